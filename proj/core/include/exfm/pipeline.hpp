#pragma once

// End-to-end external distillation run: the teacher trains day by day on
// the joined multi-traffic dataset and publishes a snapshot after each day;
// the data augmentation service logs its predictions on the students' rows;
// each student then trains one pass with its distillation mode.

#include <cstdint>
#include <optional>
#include <unordered_map>
#include <vector>

#include "exfm/config.hpp"
#include "exfm/das.hpp"
#include "exfm/models.hpp"
#include "exfm/stream.hpp"

namespace exfm::pipeline {

// Generated (or ingested) traffics plus their join. Rows point into
// `traffics`, so the object is move-only.
struct Dataset {
  std::vector<std::vector<stream::Example>> traffics;
  das::JoinResult join;

  Dataset() = default;
  Dataset(Dataset&&) = default;
  Dataset& operator=(Dataset&&) = default;
  Dataset(const Dataset&) = delete;
  Dataset& operator=(const Dataset&) = delete;
};

Dataset build_dataset(const config::ExperimentConfig& cfg, const config::Seeds& seeds);
// Replays external per-traffic streams instead of generating them.
Dataset build_dataset(const config::ExperimentConfig& cfg, const config::Seeds& seeds,
                      std::vector<std::vector<stream::Example>> traffics);

// snapshots[d] has been trained on every released row of days 0..d.
struct FmHistory {
  std::vector<models::FmArch> snapshots;
};

FmHistory train_fm(const config::ExperimentConfig& cfg, const config::Seeds& seeds,
                   const Dataset& data);

// The snapshot trained through day d is published as version d + 1 at the
// start of day d + 1 + delay_days.
das::Time publish_time(std::size_t day, std::size_t delay_days);

struct SupervisionLog {
  std::vector<das::SupervisionRecord> records;  // impression order
  std::vector<das::TraceEntry> trace;
  std::vector<das::InvariantReport> invariants;
  std::unordered_map<std::uint64_t, double> y_f;  // by example id
  std::size_t misses = 0;  // rows with no servable snapshot yet
};

// Supervises every released row from the first student day on.
// Throws InvalidArgument if a record would use a snapshot trained on its own
// day or later.
SupervisionLog run_das(const config::ExperimentConfig& cfg, const Dataset& data,
                       const FmHistory& fm, std::size_t delay_days);

struct VmRun {
  int traffic_id = 0;
  distill::DistillMode mode = distill::DistillMode::kNoDistill;
  std::vector<stream::TraceRow> trace;
  stream::MetricsWindow test;  // rows after the first student day
  std::size_t trained = 0;
  std::size_t missing_supervision = 0;
};

struct VmResults {
  std::vector<VmRun> runs;  // traffic-major, modes in the order given

  const VmRun& find(int traffic_id, distill::DistillMode mode) const;
  // Every traffic's test rows for one mode.
  stream::MetricsWindow pooled(distill::DistillMode mode) const;
};

// Trains one student per (traffic, mode). Students of one traffic share
// their initial parameters across modes. `supervision` may be null.
VmResults train_vms(const config::ExperimentConfig& cfg, const config::Seeds& seeds,
                    const Dataset& data, const SupervisionLog* supervision,
                    const std::vector<distill::DistillMode>& modes, const distill::AHConfig& ah);

// Fills ne_gain_pct of every run from the NoDistill run of its traffic.
void attach_gains(VmResults& results, const VmResults& baseline);

struct PipelineResult {
  Dataset data;
  FmHistory fm;
  std::optional<SupervisionLog> supervision;  // empty when das is disabled
  VmResults vms;
};

// The configured run. NoDistill is always trained, as the gain baseline.
PipelineResult run_pipeline(const config::ExperimentConfig& cfg, const config::Seeds& seeds);
PipelineResult run_pipeline(const config::ExperimentConfig& cfg, const config::Seeds& seeds,
                            Dataset data);

}  // namespace exfm::pipeline
