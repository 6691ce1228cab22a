// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.

#pragma once

#include "dskd/config.hpp"
#include "dskd/data.hpp"
#include "dskd/diffusion.hpp"
#include "dskd/guidance.hpp"
#include "dskd/losses.hpp"
#include "dskd/networks.hpp"
#include "dskd/rng.hpp"
#include "dskd/tensor.hpp"
#include "dskd/trainer.hpp"
#include "dskd/verify.hpp"
