#pragma once

#include "mvps/config.hpp"
#include "mvps/dataset.hpp"
#include "mvps/depth_prior.hpp"
#include "mvps/error.hpp"
#include "mvps/geometry.hpp"
#include "mvps/grid.hpp"
#include "mvps/io.hpp"
#include "mvps/kdtree.hpp"
#include "mvps/metrics.hpp"
#include "mvps/photometric.hpp"
#include "mvps/pipeline.hpp"
#include "mvps/random.hpp"
#include "mvps/refine.hpp"
#include "mvps/registration.hpp"
#include "mvps/scene_sim.hpp"
#include "mvps/tsdf.hpp"
