#pragma once

#include <cstdint>

#include <Eigen/Dense>

namespace lowbit {

using Index = Eigen::Index;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowArray = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Training-side numeric carrier. Row-major so that a row is one token / one
// output channel and is contiguous in memory.
using Matrix = RowMatrix<double>;
using Vector = ColVector<double>;

// Integer quantization levels. int16 covers {-1,0,1}, {0,1,2} and the 8-bit
// helper's [-127, 255] range.
using LevelMatrix = RowMatrix<std::int16_t>;

}  // namespace lowbit
