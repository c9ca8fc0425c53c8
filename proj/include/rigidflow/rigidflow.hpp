#pragma once

#include "rigidflow/error.hpp"
#include "rigidflow/geometry.hpp"
#include "rigidflow/io.hpp"
#include "rigidflow/mlp.hpp"
#include "rigidflow/networks.hpp"
#include "rigidflow/scenegen.hpp"
#include "rigidflow/segmentation.hpp"
#include "rigidflow/training.hpp"
#include "rigidflow/transport.hpp"
#include "rigidflow/velocity_field.hpp"
