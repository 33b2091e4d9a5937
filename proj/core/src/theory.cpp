#include "exfm/theory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>
#include <string>

#include "exfm/error.hpp"

namespace exfm::theory {

using numerics::Cholesky;
using numerics::SeededRng;

namespace {

DenseVector scaled(std::span<const double> a, double s) {
  DenseVector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = s * a[i];
  return out;
}

DenseVector add(std::span<const double> a, std::span<const double> b) {
  DenseVector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

double quad_form(const DenseMatrix& s, std::span<const double> x) {
  return numerics::dot(x, numerics::matvec(s, x).span());
}

}  // namespace

// ---------------------------------------------------------------------------
// Auxiliary head

std::vector<double> AHConstructionConfig::resolved_alpha() const {
  if (!alpha.empty()) return alpha;
  std::vector<double> a(d, 0.0);
  if (d == 1) {
    a[0] = 1.0;
  } else {
    for (std::size_t k = 1; k < d; ++k) a[k] = 1.0 / double(d - 1);
  }
  return a;
}

void AHConstructionConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::kInvalidArgument, m); };
  if (d == 0 || d > D) bad("need 1 <= d <= D");
  if (!(mu >= 0.0)) bad("mu must be >= 0");
  if (T < 50 * D) bad("need T >= 50 D");
  if (!(eta > 0.0)) bad("eta must be > 0");
  if (head_steps == 0) bad("head_steps must be > 0");
  const auto a = resolved_alpha();
  if (a.size() != d) bad("alpha must have d entries");
  double sum = 0.0;
  for (double v : a) {
    if (v < 0.0) bad("alpha must be nonnegative");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-12) bad("alpha must sum to 1");
}

AHProblem make_ah_problem(const AHConstructionConfig& cfg) {
  cfg.validate();
  SeededRng rng(cfg.seed);
  SeededRng basis_rng = rng.split(1);
  SeededRng sample_rng = rng.split(2);
  AHProblem p;
  p.Z = numerics::orthonormal_basis(basis_rng, cfg.d, cfg.D);
  p.U = numerics::orthonormal_basis(basis_rng, cfg.d, cfg.d);
  p.S = DenseMatrix(cfg.D, cfg.D);
  DenseVector x(cfg.D);
  for (std::size_t t = 0; t < cfg.T; ++t) {
    for (auto& v : x) v = sample_rng.normal();
    for (std::size_t i = 0; i < cfg.D; ++i) {
      const double xi = x[i] / double(cfg.T);
      for (std::size_t j = i; j < cfg.D; ++j) p.S(i, j) += xi * x[j];
    }
  }
  for (std::size_t i = 0; i < cfg.D; ++i)
    for (std::size_t j = 0; j < i; ++j) p.S(i, j) = p.S(j, i);
  return p;
}

namespace {

// Teacher head targets in latent space: k = 0 is the ground truth u_1,
// k >= 1 is u_1 + mu u_{k+1}.
std::vector<DenseVector> head_targets(const AHProblem& p, double mu) {
  const std::size_t d = p.U.rows();
  std::vector<DenseVector> out;
  const auto u1 = p.U.row(0);
  out.emplace_back(std::vector<double>(u1.begin(), u1.end()));
  for (std::size_t k = 1; k < d; ++k) out.push_back(add(u1, scaled(p.U.row(k), mu)));
  return out;
}

// Z^T (u_1 + mu sum_{k>=2} alpha_k u_k)
DenseVector smoothed_predictor(const AHProblem& p, const std::vector<double>& alpha, double mu) {
  DenseVector latent(p.U.cols());
  numerics::axpy(1.0, p.U.row(0), latent.span());
  for (std::size_t k = 1; k < p.U.rows(); ++k) numerics::axpy(mu * alpha[k], p.U.row(k), latent.span());
  return numerics::matvec_transposed(p.Z, latent.span());
}

}  // namespace

DenseVector ah_single_head_oracle(const AHConstructionConfig& cfg) {
  const AHProblem p = make_ah_problem(cfg);
  const DenseVector target = smoothed_predictor(p, cfg.resolved_alpha(), cfg.mu);
  // Labels are linear in x, so (1/T) sum x y = S target.
  return numerics::least_squares_solve(p.S, numerics::matvec(p.S, target.span()));
}

namespace {

void fill_common(const AHProblem& p, const AHConstructionConfig& cfg, AHConstructionResult& r) {
  r.true_predictor = numerics::matvec_transposed(p.Z, p.U.row(0));
  const DenseVector smoothed = smoothed_predictor(p, cfg.resolved_alpha(), cfg.mu);
  r.expected_single_head_bias = numerics::subtract(smoothed.span(), r.true_predictor.span());
  r.expected_bias_norm = numerics::norm2(r.expected_single_head_bias.span());
}

void single_head(const AHProblem& p, const AHConstructionConfig& cfg, AHConstructionResult& r) {
  const std::size_t D = cfg.D;
  const std::size_t d = cfg.d;
  const DenseVector target = smoothed_predictor(p, cfg.resolved_alpha(), cfg.mu);
  const DenseVector c = numerics::matvec(p.S, target.span());
  SeededRng rng = SeededRng(cfg.seed).split(3);
  DenseMatrix H = numerics::gaussian_matrix(rng, d, D, 1.0 / std::sqrt(double(D)));
  DenseVector v = numerics::gaussian_vector(rng, d, 1.0 / std::sqrt(double(d)));
  constexpr double kTol = 1e-14;
  double mse = 0.0;
  std::size_t step = 0;
  for (; step < cfg.max_steps; ++step) {
    const DenseVector pred = numerics::matvec_transposed(H, v.span());
    const DenseVector err = numerics::subtract(pred.span(), target.span());
    mse = quad_form(p.S, err.span());
    if (mse <= kTol) break;
    // g = dL/dp = 2 (S p - c)
    DenseVector g = numerics::matvec(p.S, pred.span());
    for (std::size_t i = 0; i < D; ++i) g[i] = 2.0 * (g[i] - c[i]);
    const DenseVector dv = numerics::matvec(H, g.span());
    for (std::size_t a = 0; a < d; ++a) {
      auto row = H.row(a);
      numerics::axpy(-cfg.eta * v[a], g.span(), row);
    }
    numerics::axpy(-cfg.eta, dv.span(), v.span());
  }
  r.single_head_predictor = numerics::matvec_transposed(H, v.span());
  r.single_head_mse = quad_form(
      p.S, numerics::subtract(r.single_head_predictor.span(), target.span()).span());
  r.single_head_steps = step;
  r.single_head_bias_norm = numerics::norm2(
      numerics::subtract(r.single_head_predictor.span(), r.true_predictor.span()).span());
  if (r.single_head_mse > 1e-6) {
    throw Error(ErrorCode::kNotConverged,
                "single-head fit stopped at MSE " + std::to_string(r.single_head_mse));
  }
}

void multi_head(const AHProblem& p, const AHConstructionConfig& cfg, AHConstructionResult& r) {
  const std::size_t D = cfg.D;
  const std::size_t d = cfg.d;
  const auto targets = head_targets(p, cfg.mu);
  std::vector<DenseVector> target_pred;  // Z^T w_k
  for (const auto& t : targets) target_pred.push_back(numerics::matvec_transposed(p.Z, t.span()));

  SeededRng rng = SeededRng(cfg.seed).split(4);
  DenseMatrix Zt = numerics::gaussian_matrix(rng, d, D, 1.0 / std::sqrt(double(D)));
  std::vector<DenseVector> heads(d, DenseVector(d));

  auto residual = [&](std::size_t k) {
    DenseVector res = numerics::matvec_transposed(Zt, heads[k].span());
    numerics::axpy(-1.0, target_pred[k].span(), res.span());
    return res;
  };
  constexpr double kTol = 1e-20;
  double loss = 0.0;
  std::size_t step = 0;
  for (; step < cfg.max_steps; ++step) {
    for (std::size_t m = 0; m < cfg.head_steps; ++m) {
      for (std::size_t k = 0; k < d; ++k) {
        const DenseVector sr = numerics::matvec(p.S, residual(k).span());
        const DenseVector g = numerics::matvec(Zt, sr.span());
        numerics::axpy(-2.0 * cfg.eta, g.span(), heads[k].span());
      }
    }
    DenseMatrix dZ(d, D);
    loss = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const DenseVector res = residual(k);
      const DenseVector sr = numerics::matvec(p.S, res.span());
      loss += numerics::dot(res.span(), sr.span());
      for (std::size_t a = 0; a < d; ++a) numerics::axpy(2.0 * heads[k][a], sr.span(), dZ.row(a));
    }
    if (loss <= kTol) break;
    for (std::size_t i = 0; i < dZ.span().size(); ++i) Zt.span()[i] -= cfg.eta * dZ.span()[i];
  }
  r.multi_head_serving_predictor = numerics::matvec_transposed(Zt, heads[0].span());
  r.multi_head_loss = loss;
  r.multi_head_steps = step;
  r.multi_head_relative_error =
      numerics::norm2(numerics::subtract(r.multi_head_serving_predictor.span(),
                                         r.true_predictor.span())
                          .span()) /
      numerics::norm2(r.true_predictor.span());
  if (!(r.multi_head_relative_error <= 1e-2)) {
    throw Error(ErrorCode::kNotConverged,
                "serving head residual " + std::to_string(r.multi_head_relative_error) +
                    " after " + std::to_string(step) + " backbone steps");
  }
}

}  // namespace

AHConstructionResult run_ah_single_head(const AHConstructionConfig& cfg) {
  const AHProblem p = make_ah_problem(cfg);
  AHConstructionResult r;
  fill_common(p, cfg, r);
  single_head(p, cfg, r);
  return r;
}

AHConstructionResult run_ah_multi_head(const AHConstructionConfig& cfg) {
  const AHProblem p = make_ah_problem(cfg);
  AHConstructionResult r;
  fill_common(p, cfg, r);
  multi_head(p, cfg, r);
  return r;
}

AHConstructionResult run_ah_construction(const AHConstructionConfig& cfg) {
  const AHProblem p = make_ah_problem(cfg);
  AHConstructionResult r;
  fill_common(p, cfg, r);
  single_head(p, cfg, r);
  multi_head(p, cfg, r);
  return r;
}

// ---------------------------------------------------------------------------
// Student adapter

void SAConstructionConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::kInvalidArgument, m); };
  if (d == 0 || s == 0 || s > d) bad("need 1 <= s <= d");
  if (N <= d) bad("need N > d");
  if (!(gamma >= 0.0)) bad("gamma must be >= 0");
  if (!(alpha >= 0.0) || !(beta >= 0.0)) bad("alpha and beta must be >= 0");
}

void reset_adapter(SAProblem& p, std::size_t s, double drift_scale, SeededRng& rng) {
  const std::size_t d = p.w.dim();
  p.H = numerics::orthonormal_basis(rng, s, d);
  // w - w_hat = H^T delta lies in the row space of H.
  const DenseVector delta = numerics::gaussian_vector(rng, s, drift_scale);
  p.w_hat = numerics::subtract(p.w.span(), numerics::matvec_transposed(p.H, delta.span()).span());
}

SAProblem make_sa_problem(const SAConstructionConfig& cfg, SeededRng& rng) {
  cfg.validate();
  const std::size_t d = cfg.d;
  SAProblem p;
  p.N = cfg.N;
  p.w = numerics::gaussian_vector(rng, d);
  reset_adapter(p, cfg.s, cfg.drift_scale, rng);
  p.xx = DenseMatrix(d, d);
  p.xy = DenseVector(d);
  p.xxz = DenseVector(d);
  DenseVector x(d);
  for (std::size_t i = 0; i < cfg.N; ++i) {
    double sq = 0.0;
    for (auto& v : x) {
      v = rng.normal();
      sq += v * v;
    }
    // Given x, x^T z with z ~ N(0, gamma^2 I) is N(0, gamma^2 |x|^2).
    const double noise = cfg.gamma * std::sqrt(sq) * rng.normal();
    const double y = numerics::dot(x.span(), p.w.span()) + noise;
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = x[a];
      double* row = p.xx.data() + a * d;
      for (std::size_t b = a; b < d; ++b) row[b] += xa * x[b];
      p.xy[a] += xa * y;
      p.xxz[a] += xa * noise;
    }
  }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < a; ++b) p.xx(a, b) = p.xx(b, a);
  return p;
}

SAConstructionResult sa_closed_forms(const SAProblem& p, double alpha) {
  const std::size_t d = p.w.dim();
  const Cholesky xx(p.xx);
  SAConstructionResult r;
  r.w1 = xx.solve(p.xy.span());
  // u = (sum H x x^T H^T)^-1 sum (y - w_hat^T x) H x
  const DenseMatrix hxx = numerics::matmul(p.H, p.xx);
  const DenseMatrix hxxh = numerics::matmul(hxx, p.H.transposed());
  DenseVector resid = p.xy;
  numerics::axpy(-1.0, numerics::matvec(p.xx, p.w_hat.span()).span(), resid.span());
  r.u = Cholesky(hxxh).solve(numerics::matvec(p.H, resid.span()).span());
  // w_V = w + alpha (w_hat + H^T u - w) / (1 + alpha) + (sum x x^T)^-1 sum x x^T z / (1 + alpha)
  const DenseVector htu = numerics::matvec_transposed(p.H, r.u.span());
  const DenseVector noise_fit = xx.solve(p.xxz.span());
  r.w_v = DenseVector(d);
  for (std::size_t i = 0; i < d; ++i) {
    r.w_v[i] = p.w[i] + alpha * (p.w_hat[i] + htu[i] - p.w[i]) / (1.0 + alpha) +
               noise_fit[i] / (1.0 + alpha);
  }
  r.err_w1 = numerics::norm2(numerics::subtract(r.w1.span(), p.w.span()).span());
  r.err_wv = numerics::norm2(numerics::subtract(r.w_v.span(), p.w.span()).span());
  return r;
}

SAConstructionResult sa_closed_forms(const SAConstructionConfig& cfg) {
  SeededRng rng(cfg.seed);
  return sa_closed_forms(make_sa_problem(cfg, rng), cfg.alpha);
}

double AlphaPolicy::alpha_for(std::size_t d, std::size_t s) const {
  if (kind == Kind::kFixed) return fixed;
  return std::pow(double(d) / double(s), 0.25) - 1.0;
}

double median(std::vector<double> values) {
  if (values.empty()) throw Error(ErrorCode::kInvalidArgument, "median of nothing");
  const std::size_t n = values.size();
  std::nth_element(values.begin(), values.begin() + n / 2, values.end());
  const double hi = values[n / 2];
  if (n % 2 == 1) return hi;
  return 0.5 * (hi + *std::max_element(values.begin(), values.begin() + n / 2));
}

ScalingResult sa_scaling_experiment(const ScalingConfig& cfg) {
  std::set<double> ratios;
  for (const auto& [d, s] : cfg.grid) {
    if (s == 0 || 4 * s > d) {
      throw Error(ErrorCode::kInvalidArgument, "scaling grid needs s <= d/4");
    }
    if (cfg.N < 16 * d) throw Error(ErrorCode::kInvalidArgument, "scaling needs N >= 16 d");
    ratios.insert(double(s) / double(d));
  }
  if (ratios.size() < 2) {
    throw Error(ErrorCode::kInsufficientGrid, "slope needs at least two distinct s/d values");
  }
  if (cfg.trials == 0) throw Error(ErrorCode::kInvalidArgument, "trials must be > 0");

  ScalingResult result;
  std::vector<std::vector<double>> ratio_samples(cfg.grid.size());
  std::vector<std::vector<double>> w1_samples(cfg.grid.size());
  std::vector<std::vector<double>> wv_samples(cfg.grid.size());
  std::set<std::size_t> dims;
  for (const auto& cell : cfg.grid) dims.insert(cell.first);
  const SeededRng root(cfg.seed);
  for (std::size_t d : dims) {
    for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
      // One sample per (d, trial), shared by every s in the grid.
      SeededRng rng = root.split(d * 1'000'003ULL + trial);
      SAConstructionConfig base;
      base.N = cfg.N;
      base.d = d;
      base.s = 1;
      base.gamma = cfg.gamma;
      SAProblem p = make_sa_problem(base, rng);
      for (std::size_t c = 0; c < cfg.grid.size(); ++c) {
        if (cfg.grid[c].first != d) continue;
        const std::size_t s = cfg.grid[c].second;
        SeededRng adapter_rng = rng.split(s);
        reset_adapter(p, s, base.drift_scale, adapter_rng);
        const double alpha = cfg.alpha.alpha_for(d, s);
        const auto r = sa_closed_forms(p, alpha);
        ScalingTrial t{trial, d, s, cfg.N, cfg.gamma, alpha, r.err_w1, r.err_wv,
                       r.err_wv / r.err_w1};
        ratio_samples[c].push_back(t.ratio);
        w1_samples[c].push_back(t.err_w1);
        wv_samples[c].push_back(t.err_wv);
        result.trials.push_back(t);
      }
    }
  }
  std::stable_sort(result.trials.begin(), result.trials.end(),
                   [](const ScalingTrial& a, const ScalingTrial& b) {
                     if (a.d != b.d) return a.d < b.d;
                     if (a.s != b.s) return a.s < b.s;
                     return a.trial < b.trial;
                   });
  // Least squares of log(median ratio) on log(s/d).
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t c = 0; c < cfg.grid.size(); ++c) {
    ScalingCell cell{cfg.grid[c].first, cfg.grid[c].second,
                     cfg.alpha.alpha_for(cfg.grid[c].first, cfg.grid[c].second),
                     median(ratio_samples[c]), median(w1_samples[c]), median(wv_samples[c])};
    result.cells.push_back(cell);
    const double x = std::log(double(cell.s) / double(cell.d));
    const double y = std::log(cell.median_ratio);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n = double(cfg.grid.size());
  result.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  result.intercept = (sy - result.slope * sx) / n;
  return result;
}

void write_scaling_csv(std::ostream& out, const ScalingResult& result, const ScalingConfig& cfg) {
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return std::string(buf);
  };
  out << kScalingHeader << '\n';
  for (const auto& t : result.trials) {
    out << t.trial << ',' << t.d << ',' << t.s << ',' << t.N << ',' << num(t.gamma) << ','
        << num(t.err_w1) << ',' << num(t.err_wv) << ',' << num(t.ratio) << '\n';
  }
  out << "slope,,," << cfg.N << ',' << num(cfg.gamma) << ",,," << num(result.slope) << '\n';
}

GdResult sa_gd_vs_closed_form(const SAProblem& p, double alpha, double beta, double lr,
                              std::size_t steps, bool stop_gradient) {
  if (!(lr > 0.0)) throw Error(ErrorCode::kInvalidArgument, "lr must be > 0");
  const std::size_t d = p.w.dim();
  const std::size_t s = p.H.rows();
  const double inv_n = 1.0 / double(p.N);
  const SAConstructionResult cf = sa_closed_forms(p, alpha);

  GdResult out;
  out.lr = lr;
  constexpr double kGradTol = 1e-13;
  for (int attempt = 0; attempt < 30; ++attempt) {
    DenseVector w(d), u(s);
    bool diverged = false;
    double gnorm = 0.0;
    std::size_t step = 0;
    for (; step < steps; ++step) {
      // t = w_hat + H^T u
      DenseVector t = add(p.w_hat.span(), numerics::matvec_transposed(p.H, u.span()).span());
      const DenseVector xxw = numerics::matvec(p.xx, w.span());
      const DenseVector xxt = numerics::matvec(p.xx, t.span());
      DenseVector gw(d), gu_full(d);
      for (std::size_t i = 0; i < d; ++i) {
        gw[i] = inv_n * ((xxw[i] - p.xy[i]) + alpha * (xxw[i] - xxt[i]));
        // beta-term: -(sum x (y - x^T t)); alpha-term reaches u only without sg.
        gu_full[i] = inv_n * beta * (xxt[i] - p.xy[i]);
        if (!stop_gradient) gu_full[i] -= inv_n * alpha * (xxw[i] - xxt[i]);
      }
      const DenseVector gu = numerics::matvec(p.H, gu_full.span());
      gnorm = std::sqrt(numerics::dot(gw.span(), gw.span()) + numerics::dot(gu.span(), gu.span()));
      if (!std::isfinite(gnorm) || gnorm > 1e12) {
        diverged = true;
        break;
      }
      if (gnorm <= kGradTol) break;
      numerics::axpy(-out.lr, gw.span(), w.span());
      numerics::axpy(-out.lr, gu.span(), u.span());
    }
    if (diverged) {
      out.lr *= 0.5;
      continue;
    }
    if (gnorm > 1e-9) {
      throw Error(ErrorCode::kNotConverged,
                  "gradient norm " + std::to_string(gnorm) + " after " + std::to_string(step) +
                      " steps at lr " + std::to_string(out.lr));
    }
    out.w_prime = w;
    out.u = u;
    out.steps = step;
    auto rel = [](std::span<const double> a, std::span<const double> b) {
      const double nb = numerics::norm2(b);
      return numerics::norm2(numerics::subtract(a, b).span()) / (nb > 0.0 ? nb : 1.0);
    };
    out.deviation_w = rel(w.span(), cf.w_v.span());
    out.deviation_u = rel(u.span(), cf.u.span());
    out.max_deviation = std::max(out.deviation_w, out.deviation_u);
    return out;
  }
  throw Error(ErrorCode::kNotConverged, "gradient descent diverged at every step size tried");
}

}  // namespace exfm::theory
