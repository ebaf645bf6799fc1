// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "matq/checkpoint.hpp"
#include "matq/code.hpp"
#include "matq/common.hpp"
#include "matq/evo.hpp"
#include "matq/grid.hpp"
#include "matq/harness.hpp"
#include "matq/matgptq.hpp"
#include "matq/mmkernel.hpp"
#include "matq/nestpack.hpp"
#include "matq/slice.hpp"
