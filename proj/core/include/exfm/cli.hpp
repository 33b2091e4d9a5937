#pragma once

// Subcommands of the `exfm` tool. Each writes its artifacts under `out`,
// prints a short report to `log` and returns the process exit code:
// 0 pass, 1 experiment or check failure. Usage and configuration problems
// surface as exfm::Error with ErrorCode::kConfigError (exit 2 in the tool).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>

#include "exfm/config.hpp"

namespace exfm::cli {

inline constexpr int kExitPass = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

// One pipeline run. Artifacts: config.conf, supervision.jsonl, das_trace.csv,
// trace_vm<i>.csv per traffic, summary.csv, run.json. `stream_path` replays
// a dumped stream instead of generating one.
int cmd_run(const config::ExperimentConfig& cfg, const std::filesystem::path& out,
            std::ostream& log, const std::optional<std::string>& stream_path = std::nullopt);

inline constexpr const char* kSummaryHeader =
    "traffic_id,mode,examples,ne,auc,logloss,calibration,ne_gain_pct";

// NE against snapshot delay 0..cfg.max_delay for AH and AH+SA over
// cfg.num_seeds paired seeds. Artifacts: staleness.csv, staleness_seeds.csv.
int cmd_staleness(const config::ExperimentConfig& cfg, const std::filesystem::path& out,
                  std::ostream& log);

inline constexpr const char* kStalenessHeader = "delay_days,mode,seeds,mean_ne,sd_ne,mean_auc";
inline constexpr const char* kStalenessSeedsHeader = "seed,delay_days,mode,ne,auc";

// NE gain of cfg.sweep_mode over the w x alpha x beta grid against NoDistill.
// Artifacts: sweep.csv, sweep_seeds.csv.
int cmd_sweep(const config::ExperimentConfig& cfg, const std::filesystem::path& out,
              std::ostream& log);

inline constexpr const char* kSweepHeader =
    "w,alpha,beta,mode,seeds,mean_ne,mean_ne_gain_pct,sd_ne_gain_pct";
inline constexpr const char* kSweepSeedsHeader = "seed,w,alpha,beta,mode,ne,ne_gain_pct";

// `which` is "ah" or "sa". Artifacts: theorem_ah.csv or scaling.csv.
// `trials` overrides the Monte Carlo trial count of "sa". `head_refresh`
// adds theorem_ah_refresh.csv: "ah" at head_steps 5, 20 and 100, reported
// without a pass/fail check.
int cmd_theorem(std::string_view which, std::uint64_t seed, const std::filesystem::path& out,
                std::ostream& log, std::optional<std::size_t> trials = std::nullopt,
                bool head_refresh = false);

inline constexpr const char* kTheoremAhHeader =
    "seed,single_head_bias_norm,expected_bias_norm,single_head_mse,multi_head_relative_error";
inline constexpr const char* kTheoremAhRefreshHeader =
    "head_steps,single_head_bias_norm,expected_bias_norm,multi_head_relative_error";

// Exhaustive check of 2 tasks x 3 versions, `count` random schedules of
// 4 tasks x 5 versions and the lease-skip mutation. With `mutate` the
// protocol itself runs mutated, so the checks are expected to fail.
// Artifacts: das_verify.csv and, on failure, counterexample_<suite>.csv.
int cmd_das_verify(std::size_t count, std::uint64_t seed, bool mutate,
                   const std::filesystem::path& out, std::ostream& log);

inline constexpr const char* kDasVerifyHeader = "suite,invariant,passed,states,schedules,detail";

// Dumps the configured synthetic stream as line records (stream.csv).
int cmd_gen_stream(const config::ExperimentConfig& cfg, const std::filesystem::path& out,
                   std::ostream& log);

}  // namespace exfm::cli
