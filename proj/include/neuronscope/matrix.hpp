#pragma once

#include <Eigen/Dense>

namespace neuronscope {

// Row-major doubles throughout: rows are token positions / samples,
// columns are features. 64-bit floats are a project-wide invariant.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

}  // namespace neuronscope
