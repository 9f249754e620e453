#pragma once

#include "lwdl/config.hpp"
#include "lwdl/dataset.hpp"
#include "lwdl/divergence.hpp"
#include "lwdl/engine.hpp"
#include "lwdl/io.hpp"
#include "lwdl/maps.hpp"
#include "lwdl/network.hpp"
#include "lwdl/oracle.hpp"
#include "lwdl/rng.hpp"
#include "lwdl/scheduler.hpp"
#include "lwdl/tensor.hpp"
