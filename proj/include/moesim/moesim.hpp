// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "moesim/core.hpp"
#include "moesim/costmodel.hpp"
#include "moesim/optimize.hpp"
#include "moesim/policy.hpp"
#include "moesim/simulator.hpp"
#include "moesim/trace.hpp"
