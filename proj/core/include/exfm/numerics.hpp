#pragma once

// Dense linear algebra, seeded sampling, SPD solves and derivative checking.
// Everything is 64-bit floating point and row-major.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace exfm::numerics {

class DenseVector {
 public:
  DenseVector() = default;
  explicit DenseVector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
  DenseVector(std::initializer_list<double> values) : data_(values) {}
  explicit DenseVector(std::vector<double> values) : data_(std::move(values)) {}

  std::size_t dim() const noexcept { return data_.size(); }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool operator==(const DenseVector&) const = default;

 private:
  std::vector<double> data_;
};

class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static DenseMatrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t r, std::size_t c) noexcept {
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }

  DenseMatrix transposed() const;

  bool operator==(const DenseMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// xoshiro256** seeded through splitmix64. Gaussians use Box-Muller, so the
// stream depends only on the seed and the order of calls.
class SeededRng {
 public:
  static constexpr std::string_view kAlgorithm = "xoshiro256**";

  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept;
  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double normal() noexcept;
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;
  bool bernoulli(double p) noexcept { return uniform() < p; }
  double exponential(double mean) noexcept;

  // Independent child stream; same (seed, salt) always gives the same child.
  SeededRng split(std::uint64_t salt) const noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t state_[4];
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t& state) noexcept;
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) noexcept;

// 1 / (1 + exp(-z)), evaluated without overflow for any finite z.
double sigmoid(double z) noexcept;
// log(p / (1 - p)) for p in (0, 1).
double logit(double p) noexcept;

double dot(std::span<const double> a, std::span<const double> b) noexcept;
double norm2(std::span<const double> a) noexcept;
// y += a * x
void axpy(double a, std::span<const double> x, std::span<double> y) noexcept;

DenseVector matvec(const DenseMatrix& m, std::span<const double> x);
// m^T x
DenseVector matvec_transposed(const DenseMatrix& m, std::span<const double> x);
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
// a^T a, exploiting symmetry.
DenseMatrix gram(const DenseMatrix& a);
DenseVector subtract(std::span<const double> a, std::span<const double> b);

DenseVector gaussian_vector(SeededRng& rng, std::size_t dim, double scale = 1.0);
DenseMatrix gaussian_matrix(SeededRng& rng, std::size_t rows, std::size_t cols,
                            double scale = 1.0);

// Cholesky factor of a symmetric positive definite matrix. Construction
// throws SingularMatrix when a pivot is non-positive or the condition
// estimate (max/min pivot ratio, squared) exceeds kMaxCondition.
class Cholesky {
 public:
  static constexpr double kMaxCondition = 1e12;

  explicit Cholesky(const DenseMatrix& spd);

  std::size_t dim() const noexcept { return lower_.rows(); }
  double condition_estimate() const noexcept { return condition_; }
  DenseVector solve(std::span<const double> b) const;
  // Solves A X = B column by column.
  DenseMatrix solve(const DenseMatrix& b) const;

 private:
  DenseMatrix lower_;
  double condition_ = 1.0;
};

DenseVector least_squares_solve(const DenseMatrix& a, const DenseVector& b);

// Gaussian rows orthonormalised by two passes of modified Gram-Schmidt.
DenseMatrix orthonormal_basis(SeededRng& rng, std::size_t rows, std::size_t cols);

using ScalarFunction = std::function<double(const DenseVector&)>;

// Central differences (f(x + h e_j) - f(x - h e_j)) / 2h for every j.
DenseVector finite_diff_grad(const ScalarFunction& f, const DenseVector& x, double h);

// max_j |a_j - b_j| / max(|a_j|, |b_j|, floor)
double max_relative_error(std::span<const double> a, std::span<const double> b,
                          double floor = 1e-8);

}  // namespace exfm::numerics
