#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace cem::diff {

using Index = Eigen::Index;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major 2-D tensor of doubles. Scalars are 1x1, vectors are n x 1 or 1 x n.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Index rows, Index cols, double fill = 0.0) : m_(Mat::Constant(rows, cols, fill)) {}
  explicit Tensor(Mat m) : m_(std::move(m)) {}

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor column(const std::vector<double>& v);
  static Tensor row(const std::vector<double>& v);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  Index rows() const { return m_.rows(); }
  Index cols() const { return m_.cols(); }
  Index size() const { return m_.size(); }
  std::vector<Index> shape() const { return {m_.rows(), m_.cols()}; }
  bool is_scalar() const { return m_.rows() == 1 && m_.cols() == 1; }
  bool same_shape(const Tensor& o) const { return rows() == o.rows() && cols() == o.cols(); }

  double operator()(Index r, Index c) const { return m_(r, c); }
  double& operator()(Index r, Index c) { return m_(r, c); }
  double operator[](Index i) const { return m_.data()[i]; }
  double& operator[](Index i) { return m_.data()[i]; }

  // Value of a 1x1 tensor.
  double item() const;

  const Mat& mat() const { return m_; }
  Mat& mat() { return m_; }
  const double* data() const { return m_.data(); }
  double* data() { return m_.data(); }

  std::vector<double> to_vector() const { return {m_.data(), m_.data() + m_.size()}; }
  bool all_finite() const { return m_.allFinite(); }

  // Exact element-wise equality (bit patterns of finite values).
  bool operator==(const Tensor& o) const { return same_shape(o) && m_ == o.m_; }

  std::string shape_str() const;

 private:
  Mat m_;
};

// Deterministic standard-normal tensor drawn from an explicitly seeded generator.
Tensor gaussian(Index rows, Index cols, std::uint64_t seed, double stddev = 1.0);

// splitmix64 finalizer; used to derive independent stream seeds from (seed, counter).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t counter);

}  // namespace cem::diff
