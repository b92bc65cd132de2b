#pragma once

#include "birqa/diff/adam.hpp"
#include "birqa/diff/gradcheck.hpp"
#include "birqa/diff/ops.hpp"
#include "birqa/diff/tensor.hpp"
