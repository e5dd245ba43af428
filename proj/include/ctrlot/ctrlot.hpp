#pragma once

#include "ctrlot/errors.hpp"
#include "ctrlot/linalg.hpp"
#include "ctrlot/parallel.hpp"
#include "ctrlot/systems.hpp"
#include "ctrlot/lbfgs.hpp"
#include "ctrlot/point_cost.hpp"
#include "ctrlot/measures.hpp"
#include "ctrlot/static_ot.hpp"
#include "ctrlot/grid.hpp"
#include "ctrlot/dynamic_ot.hpp"
#include "ctrlot/interpolation.hpp"
#include "ctrlot/hjb.hpp"
#include "ctrlot/io.hpp"
#include "ctrlot/config.hpp"
#include "ctrlot/pipeline.hpp"
