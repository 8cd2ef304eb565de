#include "cem/diff/tensor.hpp"

#include <random>

namespace cem::diff {

Tensor Tensor::column(const std::vector<double>& v) {
  Tensor t(static_cast<Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) t[static_cast<Index>(i)] = v[i];
  return t;
}

Tensor Tensor::row(const std::vector<double>& v) {
  Tensor t(1, static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) t[static_cast<Index>(i)] = v[i];
  return t;
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const auto r = static_cast<Index>(rows.size());
  const auto c = r == 0 ? Index{0} : static_cast<Index>(rows.begin()->size());
  Tensor t(r, c);
  Index i = 0;
  for (const auto& row : rows) {
    if (static_cast<Index>(row.size()) != c) throw ShapeError("from_rows: ragged rows");
    Index j = 0;
    for (double v : row) t(i, j++) = v;
    ++i;
  }
  return t;
}

double Tensor::item() const {
  if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_str());
  return m_(0, 0);
}

std::string Tensor::shape_str() const {
  return "[" + std::to_string(rows()) + "x" + std::to_string(cols()) + "]";
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t counter) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (counter + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Tensor gaussian(Index rows, Index cols, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(mix_seed(seed, 0));
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(rows, cols);
  for (Index i = 0; i < t.size(); ++i) t[i] = stddev * normal(rng);
  return t;
}

}  // namespace cem::diff
