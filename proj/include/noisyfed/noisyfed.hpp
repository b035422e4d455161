#pragma once

#include "noisyfed/param_vector.hpp"
#include "noisyfed/rng.hpp"
#include "noisyfed/format.hpp"
#include "noisyfed/core_model.hpp"
#include "noisyfed/data_synth.hpp"
#include "noisyfed/channel.hpp"
#include "noisyfed/step_size.hpp"
#include "noisyfed/theory.hpp"
#include "noisyfed/algorithms.hpp"
#include "noisyfed/experiment.hpp"
