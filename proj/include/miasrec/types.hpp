#pragma once

#include <cstdint>

#include <Eigen/Dense>

namespace miasrec {

// Token-major dense storage: one row per sequence position or item.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Dense item index in [1, n]. Row `index - 1` of the item table.
using ItemIndex = std::int32_t;
using Timestamp = std::int64_t;

}  // namespace miasrec
