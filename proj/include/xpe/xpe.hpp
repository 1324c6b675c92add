#pragma once

#include "xpe/errors.hpp"
#include "xpe/tensor.hpp"
#include "xpe/autodiff.hpp"
#include "xpe/serialization.hpp"
#include "xpe/backbone.hpp"
#include "xpe/prompts.hpp"
#include "xpe/optim.hpp"
#include "xpe/data.hpp"
#include "xpe/training.hpp"
#include "xpe/pretrain.hpp"
#include "xpe/gradcheck.hpp"
#include "xpe/harness.hpp"
