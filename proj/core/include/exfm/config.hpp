#pragma once

// Experiment configuration: a flat text file of `section.key = value` lines.
// A `[section]` header prefixes the keys that follow it. `#` starts a
// comment. Unknown keys are rejected.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "exfm/das.hpp"
#include "exfm/distill.hpp"
#include "exfm/models.hpp"
#include "exfm/stream.hpp"

namespace exfm::config {

struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t init = 1;
  std::uint64_t das = 1;

  // The k-th paired replicate shifts every seed by k.
  Seeds replicate(std::size_t k) const { return {data + k, init + k, das + k}; }
};

struct ExperimentConfig {
  stream::DriftGenConfig stream;

  std::vector<std::size_t> fm_hidden{256, 256};
  double fm_lr = 0.05;
  std::size_t fm_batch = 32;
  models::VmShape vm;
  std::size_t sa_hidden = 8;
  double capacity_ratio = 8.0;  // minimum FM/VM parameter ratio

  std::vector<distill::DistillMode> modes{
      distill::DistillMode::kNoDistill, distill::DistillMode::kVanillaKD,
      distill::DistillMode::kAH, distill::DistillMode::kAHPlusSA};
  distill::AHConfig ah;
  distill::TrainOptions train;
  std::size_t vm_batch = 1;

  bool das_enabled = true;
  das::ServiceConfig service;
  das::WindowConfig window;

  std::size_t fm_days = 4;     // days seen only by the teacher
  std::size_t delay_days = 0;  // extra snapshot staleness
  std::size_t trace_every = 500;

  std::size_t num_seeds = 10;  // paired replicates for multi-seed commands
  std::size_t max_delay = 5;

  std::vector<double> sweep_w{0.0, 1.0, 100.0};
  std::vector<double> sweep_alpha{1.0};
  std::vector<double> sweep_beta{1.0, 4.0, 8.0};
  distill::DistillMode sweep_mode = distill::DistillMode::kAH;

  Seeds seeds;
  std::string out_dir = "out";

  // Throws ConfigError.
  void validate() const;
};

// Parses the text. Every seed key (seeds.data, seeds.init, seeds.das) must
// be present. Throws ConfigError with the offending line number.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::string& path);

// Canonical `key = value` dump, accepted back by parse_config.
void write_config(std::ostream& out, const ExperimentConfig& cfg);

}  // namespace exfm::config
