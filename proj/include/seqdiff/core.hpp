#pragma once

#include "seqdiff/core/errors.hpp"
#include "seqdiff/core/gradcheck.hpp"
#include "seqdiff/core/layers.hpp"
#include "seqdiff/core/ops.hpp"
#include "seqdiff/core/optim.hpp"
#include "seqdiff/core/tensor.hpp"
