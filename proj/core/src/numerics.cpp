#include "exfm/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "exfm/error.hpp"

namespace exfm::numerics {

namespace {

constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
  return (x << k) | (x >> (64 - k));
}

void require_dims(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::kDimensionMismatch, what);
}

}  // namespace

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) noexcept {
  std::uint64_t s = seed ^ rotl(salt * 0xd1b54a32d192ed03ULL, 17);
  splitmix64(s);
  return splitmix64(s);
}

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t s = seed;
  for (auto& word : state_) word = splitmix64(s);
}

std::uint64_t SeededRng::next_u64() noexcept {
  const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double SeededRng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_normal_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_normal_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t SeededRng::below(std::uint64_t n) noexcept {
  if (n <= 1) return 0;
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % n;
}

double SeededRng::exponential(double mean) noexcept {
  double u = uniform();
  while (u <= 0.0) u = uniform();
  return -mean * std::log(u);
}

SeededRng SeededRng::split(std::uint64_t salt) const noexcept {
  return SeededRng(mix_seed(seed_, salt));
}

double sigmoid(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double logit(double p) noexcept { return std::log(p) - std::log1p(-p); }

double dot(std::span<const double> a, std::span<const double> b) noexcept {
  // Four independent accumulators; the summation order is fixed so results
  // are reproducible.
  const std::size_t n = a.size();
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

double norm2(std::span<const double> a) noexcept { return std::sqrt(dot(a, a)); }

void axpy(double a, std::span<const double> x, std::span<double> y) noexcept {
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

DenseVector matvec(const DenseMatrix& m, std::span<const double> x) {
  require_dims(m.cols() == x.size(), "matvec: columns do not match vector");
  DenseVector y(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) y[r] = dot(m.row(r), x);
  return y;
}

DenseVector matvec_transposed(const DenseMatrix& m, std::span<const double> x) {
  require_dims(m.rows() == x.size(), "matvec_transposed: rows do not match vector");
  DenseVector y(m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) axpy(x[r], m.row(r), y.span());
  return y;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  require_dims(a.cols() == b.rows(), "matmul: inner dimensions differ");
  DenseMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) axpy(a(i, k), b.row(k), out);
  }
  return c;
}

DenseMatrix gram(const DenseMatrix& a) {
  const std::size_t n = a.cols();
  DenseMatrix g(n, n);
  // Upper triangle by rank-one row updates, then mirror.
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto x = a.row(r);
    for (std::size_t i = 0; i < n; ++i) {
      const double xi = x[i];
      double* gi = g.data() + i * n;
      for (std::size_t j = i; j < n; ++j) gi[j] += xi * x[j];
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) g(i, j) = g(j, i);
  return g;
}

DenseVector subtract(std::span<const double> a, std::span<const double> b) {
  require_dims(a.size() == b.size(), "subtract: sizes differ");
  DenseVector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

DenseVector gaussian_vector(SeededRng& rng, std::size_t dim, double scale) {
  DenseVector v(dim);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

DenseMatrix gaussian_matrix(SeededRng& rng, std::size_t rows, std::size_t cols,
                            double scale) {
  DenseMatrix m(rows, cols);
  for (auto& x : m.span()) x = scale * rng.normal();
  return m;
}

Cholesky::Cholesky(const DenseMatrix& spd) : lower_(spd.rows(), spd.cols()) {
  require_dims(spd.rows() == spd.cols(), "Cholesky: matrix is not square");
  const std::size_t n = spd.rows();
  double max_pivot = 0.0;
  double min_pivot = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    double diag = spd(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= lower_(j, k) * lower_(j, k);
    if (!(diag > 0.0) || !std::isfinite(diag)) {
      throw Error(ErrorCode::kSingularMatrix,
                  "non-positive pivot at column " + std::to_string(j));
    }
    const double pivot = std::sqrt(diag);
    lower_(j, j) = pivot;
    max_pivot = std::max(max_pivot, pivot);
    min_pivot = std::min(min_pivot, pivot);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = spd(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= lower_(i, k) * lower_(j, k);
      lower_(i, j) = s / pivot;
    }
  }
  if (n > 0) {
    const double ratio = max_pivot / min_pivot;
    condition_ = ratio * ratio;
    if (condition_ > kMaxCondition) {
      throw Error(ErrorCode::kSingularMatrix,
                  "condition estimate " + std::to_string(condition_) + " exceeds 1e12");
    }
  }
}

DenseVector Cholesky::solve(std::span<const double> b) const {
  const std::size_t n = dim();
  require_dims(b.size() == n, "Cholesky::solve: rhs size differs");
  DenseVector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= lower_(i, k) * y[k];
    y[i] = s / lower_(i, i);
  }
  DenseVector x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= lower_(k, ii) * x[k];
    x[ii] = s / lower_(ii, ii);
  }
  return x;
}

DenseMatrix Cholesky::solve(const DenseMatrix& b) const {
  require_dims(b.rows() == dim(), "Cholesky::solve: rhs rows differ");
  DenseMatrix out(b.rows(), b.cols());
  DenseVector column(b.rows());
  for (std::size_t c = 0; c < b.cols(); ++c) {
    for (std::size_t r = 0; r < b.rows(); ++r) column[r] = b(r, c);
    const DenseVector x = solve(column.span());
    for (std::size_t r = 0; r < b.rows(); ++r) out(r, c) = x[r];
  }
  return out;
}

DenseVector least_squares_solve(const DenseMatrix& a, const DenseVector& b) {
  require_dims(a.rows() == a.cols(), "least_squares_solve: matrix is not square");
  require_dims(a.rows() == b.dim(), "least_squares_solve: rhs size differs");
  return Cholesky(a).solve(b.span());
}

DenseMatrix orthonormal_basis(SeededRng& rng, std::size_t rows, std::size_t cols) {
  if (rows > cols) {
    throw Error(ErrorCode::kInvalidArgument,
                "orthonormal_basis: rows must not exceed cols");
  }
  DenseMatrix m = gaussian_matrix(rng, rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    auto ri = m.row(i);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < i; ++j) {
        const double proj = dot(m.row(j), ri);
        axpy(-proj, m.row(j), ri);
      }
    }
    const double n = norm2(ri);
    if (!(n > 1e-12)) {
      // Degenerate draw (probability zero); redraw this row.
      for (auto& x : ri) x = rng.normal();
      --i;
      continue;
    }
    for (auto& x : ri) x /= n;
  }
  return m;
}

DenseVector finite_diff_grad(const ScalarFunction& f, const DenseVector& x, double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) {
    throw Error(ErrorCode::kInvalidArgument, "finite_diff_grad: h outside [1e-7, 1e-3]");
  }
  DenseVector grad(x.dim());
  DenseVector probe = x;
  for (std::size_t j = 0; j < x.dim(); ++j) {
    probe[j] = x[j] + h;
    const double plus = f(probe);
    probe[j] = x[j] - h;
    const double minus = f(probe);
    probe[j] = x[j];
    grad[j] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(std::span<const double> a, std::span<const double> b,
                          double floor) {
  require_dims(a.size() == b.size(), "max_relative_error: sizes differ");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

}  // namespace exfm::numerics
