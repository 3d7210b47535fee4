#pragma once

#include "dfd/error.hpp"
#include "dfd/rng.hpp"
#include "dfd/dist.hpp"
#include "dfd/provider.hpp"
#include "dfd/model.hpp"
#include "dfd/trace.hpp"
#include "dfd/ka.hpp"
#include "dfd/focus.hpp"
#include "dfd/sampler.hpp"
#include "dfd/engine.hpp"
#include "dfd/metrics.hpp"
#include "dfd/training.hpp"
#include "dfd/config.hpp"
