#pragma once

// Linear constructions behind the two theorems: auxiliary-head bias
// isolation (two-layer linear model vs. backbone with d heads) and the
// student-adapter regression closed forms with their Monte Carlo scaling.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "exfm/numerics.hpp"

namespace exfm::theory {

using numerics::DenseMatrix;
using numerics::DenseVector;

// ---------------------------------------------------------------------------
// Auxiliary head

struct AHConstructionConfig {
  std::size_t D = 20;
  std::size_t d = 5;
  double mu = 0.1;
  // Simplex weights over {ground truth, teacher 2..d}. Empty means no weight
  // on the ground truth and equal weight on each teacher.
  std::vector<double> alpha;
  std::size_t T = 5000;
  double eta = 0.05;
  std::size_t max_steps = 200'000;
  std::size_t head_steps = 20;  // head updates per backbone update
  std::uint64_t seed = 1;

  std::vector<double> resolved_alpha() const;
  void validate() const;
};

struct AHConstructionResult {
  DenseVector true_predictor;  // Z^T u_1
  DenseVector single_head_predictor;
  DenseVector multi_head_serving_predictor;
  DenseVector expected_single_head_bias;  // Z^T (mu sum_k alpha_k u_k)
  double single_head_bias_norm = 0.0;
  double expected_bias_norm = 0.0;
  double single_head_mse = 0.0;
  double multi_head_relative_error = 0.0;
  double multi_head_loss = 0.0;
  std::size_t single_head_steps = 0;
  std::size_t multi_head_steps = 0;
};

// Z (d x D, orthonormal rows), the basis u_k (rows of a d x d orthonormal
// matrix) and the sample second moment S = (1/T) sum x x^T.
struct AHProblem {
  DenseMatrix Z;
  DenseMatrix U;
  DenseMatrix S;
};

AHProblem make_ah_problem(const AHConstructionConfig& cfg);

// Two-layer linear model v^T H x fitted to the smoothed labels by gradient
// descent. Throws NotConverged if the final training MSE exceeds 1e-6.
AHConstructionResult run_ah_single_head(const AHConstructionConfig& cfg);
// Backbone Z_t with one serving head and d-1 teacher heads. Throws
// NotConverged if the serving predictor misses Z^T u_1 by more than 1e-2
// relative.
AHConstructionResult run_ah_multi_head(const AHConstructionConfig& cfg);
// Both, on the same sample.
AHConstructionResult run_ah_construction(const AHConstructionConfig& cfg);

// Least-squares fit of the smoothed labels on the same sample.
DenseVector ah_single_head_oracle(const AHConstructionConfig& cfg);

// ---------------------------------------------------------------------------
// Student adapter

struct SAConstructionConfig {
  std::size_t N = 4096;
  std::size_t d = 16;
  std::size_t s = 4;
  double gamma = 1.0;
  double alpha = 9.0;
  double beta = 1.0;
  double drift_scale = 1.0;  // size of w - w_hat
  std::uint64_t seed = 1;

  void validate() const;
};

// Sufficient statistics of one sampled regression problem.
struct SAProblem {
  std::size_t N = 0;
  DenseVector w;
  DenseVector w_hat;
  DenseMatrix H;         // s x d, orthonormal rows
  DenseMatrix xx;        // sum x x^T
  DenseVector xy;        // sum x y
  DenseVector xxz;       // sum x x^T z
};

SAProblem make_sa_problem(const SAConstructionConfig& cfg, numerics::SeededRng& rng);
// Same sample and noise, new (H, w_hat) for a different adapter width.
void reset_adapter(SAProblem& p, std::size_t s, double drift_scale, numerics::SeededRng& rng);

struct SAConstructionResult {
  DenseVector w1;
  DenseVector u;
  DenseVector w_v;
  double err_w1 = 0.0;
  double err_wv = 0.0;
};

SAConstructionResult sa_closed_forms(const SAProblem& p, double alpha);
SAConstructionResult sa_closed_forms(const SAConstructionConfig& cfg);

// alpha = (d/s)^(1/4) - 1 equalises the two error components at the
// (d/s)^(1/4) reduction; "fixed" uses one value everywhere.
struct AlphaPolicy {
  enum class Kind { kBoundMatched, kFixed } kind = Kind::kBoundMatched;
  double fixed = 9.0;

  double alpha_for(std::size_t d, std::size_t s) const;
};

struct ScalingTrial {
  std::size_t trial = 0;
  std::size_t d = 0;
  std::size_t s = 0;
  std::size_t N = 0;
  double gamma = 0.0;
  double alpha = 0.0;
  double err_w1 = 0.0;
  double err_wv = 0.0;
  double ratio = 0.0;
};

struct ScalingCell {
  std::size_t d = 0;
  std::size_t s = 0;
  double alpha = 0.0;
  double median_ratio = 0.0;
  double median_err_w1 = 0.0;
  double median_err_wv = 0.0;
};

struct ScalingResult {
  std::vector<ScalingTrial> trials;
  std::vector<ScalingCell> cells;
  double slope = 0.0;
  double intercept = 0.0;
};

struct ScalingConfig {
  std::vector<std::pair<std::size_t, std::size_t>> grid{{64, 4}, {64, 16}, {256, 4}, {256, 16},
                                                        {256, 64}};
  std::size_t N = 8192;
  double gamma = 1.0;
  std::size_t trials = 200;
  AlphaPolicy alpha;
  std::uint64_t seed = 1;
};

// Regresses log(median ratio) on log(s/d). Throws InsufficientGrid with
// fewer than two distinct s/d values.
ScalingResult sa_scaling_experiment(const ScalingConfig& cfg);

double median(std::vector<double> values);

inline constexpr const char* kScalingHeader = "trial,d,s,N,gamma,err_w1,err_wV,ratio";
// One row per trial, then "slope,,,N,gamma,,,<slope>".
void write_scaling_csv(std::ostream& out, const ScalingResult& result, const ScalingConfig& cfg);

struct GdResult {
  DenseVector w_prime;
  DenseVector u;
  double deviation_w = 0.0;  // relative to the closed form
  double deviation_u = 0.0;
  double max_deviation = 0.0;
  std::size_t steps = 0;
  double lr = 0.0;  // after any backtracking
};

// Gradient descent on the three-term objective (all terms summed over the
// sample). With stop_gradient the alpha-term sends no gradient to u.
// Throws NotConverged if the update has not vanished within `steps`.
GdResult sa_gd_vs_closed_form(const SAProblem& p, double alpha, double beta, double lr,
                              std::size_t steps, bool stop_gradient = true);

}  // namespace exfm::theory
