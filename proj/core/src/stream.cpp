#include "exfm/stream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "exfm/error.hpp"

namespace exfm::stream {

using numerics::SeededRng;

void DriftGenConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kConfigError, what); };
  if (feature_dim == 0) fail("stream.feature_dim must be > 0");
  if (num_traffics == 0) fail("stream.num_traffics must be > 0");
  if (num_domains == 0) fail("stream.num_domains must be > 0");
  if (!(ar_rho > 0.0 && ar_rho <= 1.0)) fail("stream.ar_rho must be in (0, 1]");
  if (!(churn_rate >= 0.0 && churn_rate <= 1.0)) fail("stream.churn_rate must be in [0, 1]");
  if (innovation_scale < 0.0 || weight_scale < 0.0 || domain_offset_scale < 0.0 ||
      interaction_scale < 0.0 || domain_bias_spread < 0.0) {
    fail("stream scales must be >= 0");
  }
  if (examples_per_day == 0 || num_days == 0) fail("stream sizes must be > 0");
}

GeneratedStream generate_stream(const DriftGenConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.feature_dim;
  SeededRng root(cfg.seed);
  SeededRng weight_rng = root.split(1);
  SeededRng domain_rng = root.split(2);
  SeededRng sample_rng = root.split(3);
  SeededRng churn_rng = root.split(4);

  const double coord_scale = cfg.weight_scale / std::sqrt(double(n));
  DenseVector w = numerics::gaussian_vector(weight_rng, n, coord_scale);

  std::vector<DenseVector> offsets;
  std::vector<double> biases;
  for (std::size_t d = 0; d < cfg.num_domains; ++d) {
    offsets.push_back(
        numerics::gaussian_vector(domain_rng, n, cfg.domain_offset_scale / std::sqrt(double(n))));
    biases.push_back(cfg.base_logit + cfg.domain_bias_spread * domain_rng.normal());
  }
  const std::size_t k = cfg.interaction_rank;
  const auto left = numerics::gaussian_matrix(domain_rng, k, n, 1.0 / std::sqrt(double(n)));
  const auto right = numerics::gaussian_matrix(domain_rng, k, n, 1.0 / std::sqrt(double(n)));
  DenseVector strength(k);
  for (auto& s : strength) {
    s = cfg.interaction_scale / std::sqrt(double(std::max<std::size_t>(k, 1))) * domain_rng.normal();
  }

  GeneratedStream out;
  out.traffics.resize(cfg.num_traffics);
  out.true_probability.resize(cfg.num_traffics);
  const std::size_t churn_count =
      static_cast<std::size_t>(std::llround(cfg.churn_rate * double(n)));
  const double innovation = cfg.innovation_scale * coord_scale;
  std::uint64_t next_id = 1;
  const double spacing = double(kDayMs) / double(cfg.examples_per_day);

  for (std::size_t day = 0; day < cfg.num_days; ++day) {
    if (day > 0) {
      for (auto& v : w) v = cfg.ar_rho * v + innovation * weight_rng.normal();
      // Churn: redraw a random subset of coordinates.
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      for (std::size_t i = 0; i < churn_count; ++i) {
        const std::size_t j = i + churn_rng.below(n - i);
        std::swap(idx[i], idx[j]);
        w[idx[i]] = coord_scale * churn_rng.normal();
      }
    }
    for (std::size_t slot = 0; slot < cfg.examples_per_day; ++slot) {
      for (std::size_t t = 0; t < cfg.num_traffics; ++t) {
        const std::size_t dom = t % cfg.num_domains;
        Example ex;
        ex.id = next_id++;
        ex.traffic_id = static_cast<int>(t);
        ex.domain_id = static_cast<int>(dom);
        ex.timestamp_ms = static_cast<std::int64_t>(day) * kDayMs +
                          static_cast<std::int64_t>(std::floor(spacing * double(slot))) +
                          static_cast<std::int64_t>(t);
        ex.features = numerics::gaussian_vector(sample_rng, n);
        const auto x = ex.features.span();
        double z = biases[dom] + numerics::dot(w.span(), x) + numerics::dot(offsets[dom].span(), x);
        for (std::size_t r = 0; r < k; ++r) {
          z += strength[r] * numerics::dot(left.row(r), x) * numerics::dot(right.row(r), x);
        }
        const double p = numerics::sigmoid(z);
        ex.label = sample_rng.bernoulli(p) ? 1 : 0;
        out.traffics[t].push_back(std::move(ex));
        out.true_probability[t].push_back(p);
      }
    }
  }
  return out;
}

std::vector<const Example*> merge_by_time(const std::vector<std::vector<Example>>& traffics) {
  std::vector<const Example*> all;
  for (const auto& t : traffics)
    for (const auto& ex : t) all.push_back(&ex);
  std::stable_sort(all.begin(), all.end(), [](const Example* a, const Example* b) {
    if (a->timestamp_ms != b->timestamp_ms) return a->timestamp_ms < b->timestamp_ms;
    if (a->traffic_id != b->traffic_id) return a->traffic_id < b->traffic_id;
    return a->id < b->id;
  });
  return all;
}

double clipped_logloss(double prediction, int label) {
  const double p = std::clamp(prediction, kProbClip, 1.0 - kProbClip);
  return label ? -std::log(p) : -std::log1p(-p);
}

void MetricsWindow::add(double prediction, int label) {
  ++count_;
  if (label) ++positives_;
  logloss_sum_ += clipped_logloss(prediction, label);
  prediction_sum_ += prediction;
  if (scores_.size() < kReservoirCapacity) {
    scores_.push_back(prediction);
    labels_.push_back(label);
  }
}

double MetricsWindow::base_rate() const {
  return count_ ? double(positives_) / double(count_) : 0.0;
}

double MetricsWindow::mean_logloss() const {
  return count_ ? logloss_sum_ / double(count_) : 0.0;
}

double MetricsWindow::mean_prediction() const {
  return count_ ? prediction_sum_ / double(count_) : 0.0;
}

namespace {

void require_two_classes(const MetricsWindow& w, const char* metric) {
  if (w.count() == 0 || w.positives() == 0 || w.positives() == w.count()) {
    throw Error(ErrorCode::kDegenerateWindow,
                std::string(metric) + " needs both classes in the window");
  }
}

}  // namespace

double logloss(const MetricsWindow& window) {
  if (window.count() == 0) throw Error(ErrorCode::kDegenerateWindow, "logloss of empty window");
  return window.mean_logloss();
}

double ne(const MetricsWindow& window) {
  require_two_classes(window, "NE");
  const double p = window.base_rate();
  const double entropy = -(p * std::log(p) + (1.0 - p) * std::log1p(-p));
  return window.mean_logloss() / entropy;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "auc: scores and labels differ in length");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with mid-ranks for ties.
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        rank_sum_pos += mid_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw Error(ErrorCode::kDegenerateWindow, "AUC needs both classes in the window");
  }
  const double u = rank_sum_pos - double(n_pos) * double(n_pos + 1) / 2.0;
  return u / (double(n_pos) * double(n_neg));
}

double auc(const MetricsWindow& window) {
  require_two_classes(window, "AUC");
  return auc(window.scores(), window.labels());
}

double calibration(const MetricsWindow& window) {
  if (window.positives() == 0) {
    throw Error(ErrorCode::kDegenerateWindow, "calibration needs positives");
  }
  return window.mean_prediction() / window.base_rate();
}

double ne_gain_pct(double candidate_ne, double baseline_ne) {
  if (!(baseline_ne > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "ne_gain_pct: baseline NE must be > 0");
  }
  return 100.0 * (baseline_ne - candidate_ne) / baseline_ne;
}

std::vector<ProtocolRound> rolling_protocol(std::size_t num_days, std::size_t fm_days) {
  if (fm_days == 0 || fm_days + 2 > num_days) {
    throw Error(ErrorCode::kConfigError,
                "protocol needs fm_days >= 1 and at least two days after them");
  }
  std::vector<ProtocolRound> rounds;
  for (std::size_t train = fm_days + 1; train + 1 <= num_days; ++train) {
    rounds.push_back({train - 1, train, train + 1});
  }
  return rounds;
}

std::vector<DaySplit> day_roles(const ProtocolRound& round) {
  std::vector<DaySplit> roles;
  for (std::size_t d = 1; d <= round.fm_last_day; ++d) roles.push_back({d, SplitRole::kFMTrain});
  roles.push_back({round.vm_train_day, SplitRole::kVMTrain});
  roles.push_back({round.vm_test_day, SplitRole::kVMTest});
  return roles;
}

EvalResult run_streaming_eval(models::VmArch& vm, models::StudentAdapter& sa,
                              std::span<const StreamItem> stream, distill::DistillMode mode,
                              const distill::AHConfig& cfg,
                              const distill::TrainOptions& train, const EvalOptions& options) {
  using distill::DistillMode;
  EvalResult result;
  result.predictions.reserve(stream.size());
  const std::size_t batch_size = std::max<std::size_t>(options.batch_size, 1);
  int traffic_id = stream.empty() ? 0 : stream.front().example->traffic_id;

  auto emit = [&](std::size_t step) {
    TraceRow row;
    row.step = step;
    row.examples_seen = result.trained;
    row.traffic_id = traffic_id;
    row.mode = mode;
    const auto& w = result.window;
    const bool two_classes = w.positives() > 0 && w.positives() < w.count();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    row.ne = two_classes ? ne(w) : nan;
    row.auc = two_classes ? auc(w) : nan;
    row.logloss = w.count() ? w.mean_logloss() : nan;
    row.calibration = w.positives() ? calibration(w) : nan;
    result.trace.push_back(row);
  };

  std::vector<distill::TrainExample> with_label;
  std::vector<distill::TrainExample> without_label;
  std::size_t step = 0;
  for (std::size_t begin = 0; begin < stream.size(); begin += batch_size) {
    const std::size_t end = std::min(stream.size(), begin + batch_size);
    // Score the whole batch before any parameter moves.
    for (std::size_t i = begin; i < end; ++i) {
      const Example& ex = *stream[i].example;
      const double p = numerics::sigmoid(models::forward(vm, ex.features.span()).y_s);
      result.predictions.push_back(p);
      if (i >= options.metrics_from) result.window.add(p, ex.label);
      if (options.observer) options.observer(EvalEvent::kScore, ex.id);
    }
    with_label.clear();
    without_label.clear();
    for (std::size_t i = begin; i < end; ++i) {
      const Example& ex = *stream[i].example;
      distill::TrainExample te{ex.features.span(), ex.label, stream[i].y_f};
      if (mode == DistillMode::kNoDistill || te.y_f) {
        with_label.push_back(te);
      } else {
        without_label.push_back(te);
      }
    }
    if (!with_label.empty()) {
      distill::vm_train_batch(vm, sa, with_label, mode, cfg, train);
    }
    if (!without_label.empty()) {
      result.missing_supervision += without_label.size();
      distill::vm_train_batch(vm, sa, without_label, DistillMode::kNoDistill, cfg, train);
    }
    for (std::size_t i = begin; i < end; ++i) {
      if (options.observer) options.observer(EvalEvent::kTrain, stream[i].example->id);
    }
    result.trained += end - begin;
    ++step;
    if (options.trace_every && step % options.trace_every == 0) emit(step);
  }
  if (!stream.empty() && (result.trace.empty() || result.trace.back().step != step)) emit(step);
  return result;
}

void attach_ne_gain(std::vector<TraceRow>& rows, const std::vector<TraceRow>& baseline) {
  for (std::size_t i = 0; i < rows.size() && i < baseline.size(); ++i) {
    if (rows[i].step != baseline[i].step) continue;
    if (std::isfinite(rows[i].ne) && std::isfinite(baseline[i].ne) && baseline[i].ne > 0.0) {
      rows[i].ne_gain_pct = ne_gain_pct(rows[i].ne, baseline[i].ne);
    }
  }
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

namespace {

std::string format_exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_trace_csv(std::ostream& out, std::span<const TraceRow> rows, bool header) {
  if (header) out << kTraceHeader << '\n';
  for (const auto& r : rows) {
    out << r.step << ',' << r.examples_seen << ',' << r.traffic_id << ','
        << distill::to_string(r.mode) << ',' << format_double(r.ne) << ','
        << format_double(r.auc) << ',' << format_double(r.logloss) << ','
        << format_double(r.calibration) << ','
        << (r.ne_gain_pct ? format_double(*r.ne_gain_pct) : std::string("nan")) << '\n';
  }
}

void write_stream_records(std::ostream& out, std::span<const Example> examples) {
  for (const auto& ex : examples) {
    out << ex.id << ',' << ex.timestamp_ms << ',' << ex.traffic_id << ',' << ex.domain_id << ','
        << ex.label;
    for (double f : ex.features) out << ',' << format_exact(f);
    out << '\n';
  }
}

std::vector<Example> read_stream_records(std::istream& in) {
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  std::size_t dim = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    auto bad = [&](const std::string& why) {
      return Error(ErrorCode::kFormatError,
                   "stream record line " + std::to_string(line_no) + ": " + why);
    };
    if (fields.size() < 6) throw bad("expected id,timestamp,traffic_id,domain_id,label,f1..");
    Example ex;
    try {
      ex.id = std::stoull(fields[0]);
      ex.timestamp_ms = std::stoll(fields[1]);
      ex.traffic_id = std::stoi(fields[2]);
      ex.domain_id = std::stoi(fields[3]);
      ex.label = std::stoi(fields[4]);
      std::vector<double> feats;
      for (std::size_t i = 5; i < fields.size(); ++i) feats.push_back(std::stod(fields[i]));
      ex.features = DenseVector(std::move(feats));
    } catch (const std::logic_error&) {
      throw bad("unparseable number");
    }
    if (ex.label != 0 && ex.label != 1) throw bad("label must be 0 or 1");
    if (ex.traffic_id < 0 || ex.domain_id < 0) throw bad("ids must be >= 0");
    if (dim == 0) dim = ex.features.dim();
    if (ex.features.dim() != dim) throw bad("feature count differs from first record");
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<std::vector<Example>> group_by_traffic(std::vector<Example> examples) {
  int max_traffic = -1;
  for (const auto& ex : examples) max_traffic = std::max(max_traffic, ex.traffic_id);
  std::vector<std::vector<Example>> out(static_cast<std::size_t>(max_traffic + 1));
  for (auto& ex : examples) out[static_cast<std::size_t>(ex.traffic_id)].push_back(std::move(ex));
  for (auto& t : out) {
    std::stable_sort(t.begin(), t.end(), [](const Example& a, const Example& b) {
      return a.timestamp_ms < b.timestamp_ms;
    });
  }
  return out;
}

}  // namespace exfm::stream
