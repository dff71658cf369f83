// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "iccl/attention.hpp"
#include "iccl/data_model.hpp"
#include "iccl/errors.hpp"
#include "iccl/experiment.hpp"
#include "iccl/prompt.hpp"
#include "iccl/rng.hpp"
#include "iccl/simulate.hpp"
#include "iccl/theory.hpp"
#include "iccl/trainer.hpp"
