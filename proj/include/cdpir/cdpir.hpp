#pragma once

// Umbrella header.

#include "cdpir/config.hpp"
#include "cdpir/errors.hpp"
#include "cdpir/geometry.hpp"
#include "cdpir/interpolant.hpp"
#include "cdpir/json_io.hpp"
#include "cdpir/metrics.hpp"
#include "cdpir/model.hpp"
#include "cdpir/parallel.hpp"
#include "cdpir/random.hpp"
#include "cdpir/reconstruction.hpp"
#include "cdpir/simulate.hpp"
#include "cdpir/solver.hpp"
#include "cdpir/tensor_io.hpp"
#include "cdpir/training.hpp"
