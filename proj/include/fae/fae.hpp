#pragma once

#include "fae/array.hpp"
#include "fae/autodiff.hpp"
#include "fae/checkpoint.hpp"
#include "fae/cmapss.hpp"
#include "fae/densities.hpp"
#include "fae/detector.hpp"
#include "fae/loss.hpp"
#include "fae/mlp.hpp"
#include "fae/model.hpp"
#include "fae/rng.hpp"
#include "fae/trainer.hpp"
#include "fae/verification.hpp"
