#pragma once

#include "gdflow/common.hpp"
#include "gdflow/config.hpp"
#include "gdflow/graph.hpp"
#include "gdflow/metrics.hpp"
#include "gdflow/model.hpp"
#include "gdflow/ode.hpp"
#include "gdflow/pointcloud.hpp"
#include "gdflow/spectral.hpp"
#include "gdflow/tensor.hpp"
#include "gdflow/train.hpp"
