#pragma once

// Synthetic drifting impression streams, progressive-validation training and
// the NE / AUC / LogLoss / calibration metrics.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "exfm/distill.hpp"
#include "exfm/numerics.hpp"

namespace exfm::stream {

using numerics::DenseVector;

inline constexpr std::int64_t kDayMs = 86'400'000;

struct Example {
  std::uint64_t id = 0;
  DenseVector features;
  int label = 0;
  std::int64_t timestamp_ms = 0;
  int traffic_id = 0;
  int domain_id = 0;

  std::int64_t day() const { return timestamp_ms / kDayMs; }
};

// Ground truth on day t for domain d:
//   logit = b_d + (w(t) + o_d)^T x + sum_r lambda_r (a_r^T x)(c_r^T x)
// w(t) follows an AR(1) process; at each day boundary a `churn_rate`
// fraction of its coordinates is redrawn from the stationary law.
struct DriftGenConfig {
  std::size_t feature_dim = 16;
  std::size_t num_traffics = 3;
  std::size_t num_domains = 3;
  double ar_rho = 0.9;
  double innovation_scale = 0.15;
  double weight_scale = 1.5;
  double domain_offset_scale = 1.0;
  double base_logit = -1.5;
  double domain_bias_spread = 2.0;
  double churn_rate = 0.05;
  std::size_t interaction_rank = 4;
  double interaction_scale = 2.5;
  std::size_t examples_per_day = 2000;  // per traffic
  std::size_t num_days = 8;
  std::uint64_t seed = 1;

  void validate() const;
};

struct GeneratedStream {
  std::vector<std::vector<Example>> traffics;  // time-ordered per traffic
  // P(y = 1 | x) of every example, indexed like `traffics`.
  std::vector<std::vector<double>> true_probability;
};

GeneratedStream generate_stream(const DriftGenConfig& cfg);

// All traffics merged by (timestamp, traffic, id).
std::vector<const Example*> merge_by_time(const std::vector<std::vector<Example>>& traffics);

// Prediction clipping applied inside logloss.
inline constexpr double kProbClip = 1e-9;

class MetricsWindow {
 public:
  static constexpr std::size_t kReservoirCapacity = 1'000'000;

  void add(double prediction, int label);

  std::size_t count() const noexcept { return count_; }
  std::size_t positives() const noexcept { return positives_; }
  double base_rate() const;
  double mean_logloss() const;
  double mean_prediction() const;
  std::span<const double> scores() const noexcept { return scores_; }
  std::span<const int> labels() const noexcept { return labels_; }

 private:
  std::size_t count_ = 0;
  std::size_t positives_ = 0;
  double logloss_sum_ = 0.0;
  double prediction_sum_ = 0.0;
  std::vector<double> scores_;
  std::vector<int> labels_;
};

double clipped_logloss(double prediction, int label);
double logloss(const MetricsWindow& window);
double ne(const MetricsWindow& window);
double auc(const MetricsWindow& window);
double auc(std::span<const double> scores, std::span<const int> labels);
double calibration(const MetricsWindow& window);
double ne_gain_pct(double candidate_ne, double baseline_ne);

enum class SplitRole { kFMTrain, kVMTrain, kVMTest };

struct DaySplit {
  std::size_t day = 0;  // 1-based
  SplitRole role = SplitRole::kFMTrain;
};

// Rolling protocol over `num_days`: the first `fm_days` days only feed the
// teacher, then each later day is trained on by the students and the day
// after it is their test day. One round per pair of (train, test) days.
struct ProtocolRound {
  std::size_t fm_last_day = 0;
  std::size_t vm_train_day = 0;
  std::size_t vm_test_day = 0;
};
std::vector<ProtocolRound> rolling_protocol(std::size_t num_days, std::size_t fm_days);
std::vector<DaySplit> day_roles(const ProtocolRound& round);

struct StreamItem {
  const Example* example = nullptr;
  std::optional<double> y_f;
};

struct TraceRow {
  std::size_t step = 0;
  std::size_t examples_seen = 0;
  int traffic_id = 0;
  distill::DistillMode mode = distill::DistillMode::kNoDistill;
  double ne = 0.0;
  double auc = 0.0;
  double logloss = 0.0;
  double calibration = 0.0;
  std::optional<double> ne_gain_pct;
};

enum class EvalEvent { kScore, kTrain };

struct EvalOptions {
  std::size_t batch_size = 1;
  // A trace row is emitted every `trace_every` training steps and at the end.
  std::size_t trace_every = 500;
  // Examples scored before this index are excluded from the metric window
  // (they are still trained on).
  std::size_t metrics_from = 0;
  std::function<void(EvalEvent, std::uint64_t example_id)> observer;
};

struct EvalResult {
  std::vector<TraceRow> trace;
  MetricsWindow window;
  std::vector<double> predictions;  // progressive score of every item
  std::size_t trained = 0;
  std::size_t missing_supervision = 0;
};

// Progressive validation: each batch is scored by the current model, the
// scores enter the metric window, then the batch is trained on once.
// Items without a pseudo-label fall back to a NoDistill step.
EvalResult run_streaming_eval(models::VmArch& vm, models::StudentAdapter& sa,
                              std::span<const StreamItem> stream, distill::DistillMode mode,
                              const distill::AHConfig& cfg,
                              const distill::TrainOptions& train,
                              const EvalOptions& options = {});

// Fills ne_gain_pct of `rows` from a baseline trace with identical steps.
void attach_ne_gain(std::vector<TraceRow>& rows, const std::vector<TraceRow>& baseline);

inline constexpr const char* kTraceHeader =
    "step,examples_seen,traffic_id,mode,ne,auc,logloss,calibration,ne_gain_pct";

void write_trace_csv(std::ostream& out, std::span<const TraceRow> rows, bool header = true);

// Line records: id,timestamp,traffic_id,domain_id,label,f1,...,fn
void write_stream_records(std::ostream& out, std::span<const Example> examples);
std::vector<Example> read_stream_records(std::istream& in);
// Splits ingested records back into time-ordered per-traffic streams.
std::vector<std::vector<Example>> group_by_traffic(std::vector<Example> examples);

std::string format_double(double v);

}  // namespace exfm::stream
