#include "exfm/pipeline.hpp"

#include <algorithm>

#include "exfm/error.hpp"

namespace exfm::pipeline {

using distill::DistillMode;
using numerics::SeededRng;

namespace {

// Split tags keep the random streams of different consumers apart.
constexpr std::uint64_t kFmInitTag = 1;
constexpr std::uint64_t kJoinTag = 2;
constexpr std::uint64_t kVmInitTag = 100;

std::size_t row_day(const das::SharedDatasetRow& row) {
  return std::size_t(row.impression_time / stream::kDayMs);
}

bool in_traffic(const das::SharedDatasetRow& row, int traffic) {
  return std::find(row.traffic_ids.begin(), row.traffic_ids.end(), traffic) !=
         row.traffic_ids.end();
}

}  // namespace

Dataset build_dataset(const config::ExperimentConfig& cfg, const config::Seeds& seeds) {
  stream::DriftGenConfig gen = cfg.stream;
  gen.seed = seeds.data;
  return build_dataset(cfg, seeds, stream::generate_stream(gen).traffics);
}

Dataset build_dataset(const config::ExperimentConfig& cfg, const config::Seeds& seeds,
                      std::vector<std::vector<stream::Example>> traffics) {
  for (const auto& t : traffics) {
    for (const auto& ex : t) {
      if (ex.features.dim() != cfg.stream.feature_dim) {
        throw Error(ErrorCode::kDimensionMismatch,
                    "example " + std::to_string(ex.id) + " has " +
                        std::to_string(ex.features.dim()) + " features, config says " +
                        std::to_string(cfg.stream.feature_dim));
      }
    }
  }
  Dataset data;
  data.traffics = std::move(traffics);
  SeededRng rng = SeededRng(seeds.das).split(kJoinTag);
  data.join = das::join_and_window(data.traffics, cfg.window, rng);
  return data;
}

FmHistory train_fm(const config::ExperimentConfig& cfg, const config::Seeds& seeds,
                   const Dataset& data) {
  SeededRng rng = SeededRng(seeds.init).split(kFmInitTag);
  models::FmArch fm = models::make_fm(cfg.stream.feature_dim, cfg.fm_hidden, rng);
  {
    SeededRng probe(0);
    const auto vm = models::make_vm(cfg.vm, probe);
    if (!models::has_capacity_ratio(fm, vm, cfg.capacity_ratio)) {
      throw Error(ErrorCode::kConfigError,
                  "teacher has " + std::to_string(fm.parameter_count()) +
                      " parameters, fewer than models.capacity_ratio x student (" +
                      std::to_string(vm.parameter_count()) + ")");
    }
  }

  FmHistory history;
  std::vector<const numerics::DenseVector*> features;
  std::vector<int> labels;
  auto flush = [&] {
    if (features.empty()) return;
    models::fm_train_batch(fm, features, labels, cfg.fm_lr);
    features.clear();
    labels.clear();
  };
  const auto& rows = data.join.rows;
  std::size_t i = 0;
  for (std::size_t day = 0; day < cfg.stream.num_days; ++day) {
    for (; i < rows.size() && row_day(rows[i]) == day; ++i) {
      features.push_back(&rows[i].example->features);
      labels.push_back(rows[i].label);
      if (features.size() == cfg.fm_batch) flush();
    }
    flush();
    history.snapshots.push_back(fm);
  }
  return history;
}

das::Time publish_time(std::size_t day, std::size_t delay_days) {
  return das::Time(day + 1 + delay_days) * stream::kDayMs;
}

SupervisionLog run_das(const config::ExperimentConfig& cfg, const Dataset& data,
                       const FmHistory& fm, std::size_t delay_days) {
  SupervisionLog log;
  das::DasService service(cfg.service);
  const das::Time end = das::Time(cfg.stream.num_days) * stream::kDayMs;
  std::size_t next_day = 0;
  auto publish_due = [&](das::Time now) {
    while (next_day < fm.snapshots.size() && publish_time(next_day, delay_days) <= now &&
           publish_time(next_day, delay_days) < end) {
      service.publish(das::Version(next_day + 1), fm.snapshots[next_day].net,
                      publish_time(next_day, delay_days));
      ++next_day;
    }
  };

  for (const auto& row : data.join.rows) {
    const std::size_t day = row_day(row);
    if (day < cfg.fm_days) continue;
    publish_due(row.impression_time);
    try {
      das::SupervisionRecord rec = service.supervise(row, row.impression_time);
      if (rec.fm_version > day) {
        throw Error(ErrorCode::kInvalidArgument,
                    "example " + std::to_string(rec.example_id) + " on day " +
                        std::to_string(day) + " supervised by a snapshot trained through day " +
                        std::to_string(rec.fm_version - 1));
      }
      log.y_f.emplace(rec.example_id, rec.y_f);
      log.records.push_back(rec);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNoSnapshotInstalled) throw;
      ++log.misses;
    }
  }
  log.trace = service.trace();
  log.invariants = das::check_trace(log.trace);
  return log;
}

const VmRun& VmResults::find(int traffic_id, DistillMode mode) const {
  for (const auto& r : runs) {
    if (r.traffic_id == traffic_id && r.mode == mode) return r;
  }
  throw Error(ErrorCode::kInvalidArgument, "no student run for traffic " +
                                               std::to_string(traffic_id) + " in mode " +
                                               std::string(distill::to_string(mode)));
}

stream::MetricsWindow VmResults::pooled(DistillMode mode) const {
  stream::MetricsWindow out;
  for (const auto& r : runs) {
    if (r.mode != mode) continue;
    const auto scores = r.test.scores();
    const auto labels = r.test.labels();
    for (std::size_t i = 0; i < scores.size(); ++i) out.add(scores[i], labels[i]);
  }
  return out;
}

VmResults train_vms(const config::ExperimentConfig& cfg, const config::Seeds& seeds,
                    const Dataset& data, const SupervisionLog* supervision,
                    const std::vector<DistillMode>& modes, const distill::AHConfig& ah) {
  VmResults results;
  for (std::size_t t = 0; t < cfg.stream.num_traffics; ++t) {
    std::vector<stream::StreamItem> items;
    std::size_t warmup = 0;
    for (const auto& row : data.join.rows) {
      const std::size_t day = row_day(row);
      if (day < cfg.fm_days || !in_traffic(row, int(t))) continue;
      if (day == cfg.fm_days) ++warmup;
      stream::StreamItem item{row.example, std::nullopt};
      if (supervision) {
        if (auto it = supervision->y_f.find(row.example_id); it != supervision->y_f.end()) {
          item.y_f = it->second;
        }
      }
      items.push_back(item);
    }

    stream::EvalOptions options;
    options.batch_size = cfg.vm_batch;
    options.trace_every = cfg.trace_every;
    options.metrics_from = warmup;
    for (DistillMode mode : modes) {
      SeededRng rng = SeededRng(seeds.init).split(kVmInitTag + t);
      models::VmArch vm = models::make_vm(cfg.vm, rng, ah.grad_scale);
      models::StudentAdapter sa = models::make_student_adapter(cfg.sa_hidden, rng);
      stream::EvalResult eval =
          stream::run_streaming_eval(vm, sa, items, mode, ah, cfg.train, options);
      VmRun run;
      run.traffic_id = int(t);
      run.mode = mode;
      run.trace = std::move(eval.trace);
      for (auto& row : run.trace) row.traffic_id = int(t);
      run.test = std::move(eval.window);
      run.trained = eval.trained;
      run.missing_supervision = mode == DistillMode::kNoDistill ? 0 : eval.missing_supervision;
      results.runs.push_back(std::move(run));
    }
  }
  return results;
}

void attach_gains(VmResults& results, const VmResults& baseline) {
  for (auto& run : results.runs) {
    stream::attach_ne_gain(run.trace, baseline.find(run.traffic_id, DistillMode::kNoDistill).trace);
  }
}

PipelineResult run_pipeline(const config::ExperimentConfig& cfg, const config::Seeds& seeds) {
  return run_pipeline(cfg, seeds, build_dataset(cfg, seeds));
}

PipelineResult run_pipeline(const config::ExperimentConfig& cfg, const config::Seeds& seeds,
                            Dataset data) {
  cfg.validate();
  PipelineResult out;
  out.data = std::move(data);
  out.fm = train_fm(cfg, seeds, out.data);
  if (cfg.das_enabled) out.supervision = run_das(cfg, out.data, out.fm, cfg.delay_days);

  std::vector<DistillMode> modes{DistillMode::kNoDistill};
  for (DistillMode m : cfg.modes) {
    if (std::find(modes.begin(), modes.end(), m) == modes.end()) modes.push_back(m);
  }
  out.vms = train_vms(cfg, seeds, out.data,
                      out.supervision ? &*out.supervision : nullptr, modes, cfg.ah);
  attach_gains(out.vms, out.vms);
  return out;
}

}  // namespace exfm::pipeline
