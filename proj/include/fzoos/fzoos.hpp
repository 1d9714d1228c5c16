#pragma once

#include "fzoos/core.hpp"
#include "fzoos/kernel_rff.hpp"
#include "fzoos/surrogate.hpp"
#include "fzoos/estimators.hpp"
#include "fzoos/objectives.hpp"
#include "fzoos/diagnostics.hpp"
#include "fzoos/federation.hpp"
#include "fzoos/harness.hpp"
