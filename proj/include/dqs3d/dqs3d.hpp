#pragma once

#include "dqs3d/error.hpp"
#include "dqs3d/parallel.hpp"
#include "dqs3d/voxel_geometry.hpp"
#include "dqs3d/qec.hpp"
#include "dqs3d/box_codec.hpp"
#include "dqs3d/matching.hpp"
#include "dqs3d/losses.hpp"
#include "dqs3d/model.hpp"
#include "dqs3d/scene.hpp"
#include "dqs3d/metrics.hpp"
#include "dqs3d/scene_io.hpp"
#include "dqs3d/self_train.hpp"
#include "dqs3d/report.hpp"
