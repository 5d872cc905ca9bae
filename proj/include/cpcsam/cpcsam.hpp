#pragma once

#include "cpcsam/autograd.hpp"
#include "cpcsam/checkpoint.hpp"
#include "cpcsam/config.hpp"
#include "cpcsam/cross_prompting.hpp"
#include "cpcsam/data_io.hpp"
#include "cpcsam/distance_transform.hpp"
#include "cpcsam/evaluation.hpp"
#include "cpcsam/image.hpp"
#include "cpcsam/losses.hpp"
#include "cpcsam/metrics.hpp"
#include "cpcsam/model.hpp"
#include "cpcsam/optim.hpp"
#include "cpcsam/prob_map.hpp"
#include "cpcsam/prompt_geometry.hpp"
#include "cpcsam/rng.hpp"
#include "cpcsam/trainer.hpp"
