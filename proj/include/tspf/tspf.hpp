#pragma once

// Umbrella header: the full library surface.

#include "tspf/baselines.hpp"
#include "tspf/config.hpp"
#include "tspf/data.hpp"
#include "tspf/eval.hpp"
#include "tspf/experiment.hpp"
#include "tspf/losses.hpp"
#include "tspf/model.hpp"
#include "tspf/nn.hpp"
#include "tspf/optim.hpp"
#include "tspf/rng.hpp"
#include "tspf/serialize.hpp"
#include "tspf/tensor.hpp"
