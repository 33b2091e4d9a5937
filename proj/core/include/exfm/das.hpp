#pragma once

// Simulated data augmentation service: label join with feedback windows,
// snapshot publishing, a CAS metadata register with leases, symmetric
// updater/loader tasks, snapshot garbage collection, and the checkers that
// explore their interleavings.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "exfm/models.hpp"
#include "exfm/numerics.hpp"
#include "exfm/stream.hpp"

namespace exfm::das {

using Time = std::int64_t;
// Snapshot versions start at 1; 0 means "none".
using Version = std::uint64_t;

struct SupervisionRecord {
  std::uint64_t example_id = 0;
  double y_f = 0.5;
  Version fm_version = 0;
  Time logged_at = 0;

  bool operator==(const SupervisionRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Shared dataset join

enum class LabelStatus { kPending, kArrived };

struct SharedDatasetRow {
  std::uint64_t example_id = 0;
  const stream::Example* example = nullptr;
  std::vector<int> traffic_ids;  // every traffic that logged this impression
  Time impression_time = 0;
  Time feedback_time = 0;
  Time feedback_deadline = 0;
  LabelStatus label_status = LabelStatus::kPending;
  int label = 0;
  std::optional<SupervisionRecord> supervision;
};

// Feedback delay ~ exponential(mean) truncated to [0, cap]. A mean of zero
// means the label arrives with the impression.
struct WindowConfig {
  Time window_ms = 90 * 60'000;
  double feedback_mean_ms = 15.0 * 60'000;
  Time feedback_cap_ms = 180 * 60'000;

  void validate() const;
};

// P(delay <= window) under the truncated exponential.
double feedback_release_probability(const WindowConfig& cfg);

struct JoinResult {
  std::vector<SharedDatasetRow> rows;  // released rows, impression order
  std::vector<std::uint64_t> late_ids;  // dropped by LateFeedback
  std::size_t duplicates = 0;           // impressions merged by id
};

JoinResult join_and_window(const std::vector<std::vector<stream::Example>>& streams,
                           const WindowConfig& cfg, numerics::SeededRng& rng);

// ---------------------------------------------------------------------------
// Protocol state

struct DasTiming {
  Time updater_period = 2;
  Time loader_period = 1;
  Time lease_duration = 6;
  Time load_duration = 2;
  Time gc_period = 1;

  void validate() const;
};

struct Mutation {
  bool skip_lease_extension = false;
};

struct Lease {
  Version version = 0;
  Time expires_at = 0;

  bool operator==(const Lease&) const = default;
};

struct RegisterValue {
  Version version = 0;
  Lease lease;

  bool operator==(const RegisterValue&) const = default;
};

// Append-only version -> snapshot bytes. Bytes may be empty when only the
// protocol is being simulated.
class SnapshotPublishingDb {
 public:
  void publish(Version version, std::string bytes, Time now);
  Version latest() const noexcept { return entries_.empty() ? 0 : entries_.back().version; }
  bool contains(Version v) const noexcept;
  const std::string& bytes(Version v) const;
  Time published_at(Version v) const;
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  struct Entry {
    Version version;
    Time published_at;
    std::shared_ptr<const std::string> bytes;
  };
  const Entry& find(Version v) const;
  std::vector<Entry> entries_;
};

// One linearizable register plus the last lease expiry of every version.
class MetadataStore {
 public:
  std::optional<RegisterValue> read() const { return register_; }
  // Writes `desired` iff the register currently equals `expected`.
  // Throws InvalidArgument when the lease is not strictly in the future.
  bool compare_and_set(const std::optional<RegisterValue>& expected,
                       const RegisterValue& desired, Time now);
  // Expiry of the latest lease ever written for `v`; 0 if none.
  Time lease_expiry(Version v) const;

  bool operator==(const MetadataStore&) const = default;

 private:
  std::optional<RegisterValue> register_;
  std::vector<Time> expiry_;  // index = version
};

struct CasIntent {
  std::optional<RegisterValue> expected;
  RegisterValue desired;
  bool new_version = false;

  bool operator==(const CasIntent&) const = default;
};

struct DasTask {
  int id = 0;
  Version serving = 0;
  Version loading = 0;
  Time load_done_at = 0;
  Time updater_phase = 0;
  Time loader_phase = 0;
  std::optional<CasIntent> pending_cas;
  std::vector<std::uint16_t> loads_completed;  // index = version

  bool operator==(const DasTask&) const = default;
};

enum class UpdaterOutcome { kNoop, kWroteVersion, kExtendedLease, kCasLost };

// First half of an updater tick: read SPD and the register, decide what to
// write. Nothing is written.
std::optional<CasIntent> updater_read(const DasTask& task, Version spd_latest,
                                      const MetadataStore& meta, Time now,
                                      const DasTiming& timing, const Mutation& mutation = {});
// Second half: the compare-and-set.
UpdaterOutcome updater_commit(MetadataStore& meta, const CasIntent& intent, Time now);
// Read and commit with nothing in between.
UpdaterOutcome updater_tick(DasTask& task, const SnapshotPublishingDb& spd, MetadataStore& meta,
                            Time now, const DasTiming& timing, const Mutation& mutation = {});

// Begins a load when the register names a version the task is not serving
// and no load is in flight. Returns the version being loaded.
std::optional<Version> loader_tick(DasTask& task, const MetadataStore& meta, Time now,
                                   const DasTiming& timing);
// Finishes an in-flight load whose duration has elapsed; the task switches
// to the new version atomically. Returns the installed version.
std::optional<Version> complete_load(DasTask& task, Time now);

// collected[v] is set once v's local copy is dropped.
std::vector<Version> gc_tick(const MetadataStore& meta, const std::vector<DasTask>& tasks,
                             std::vector<char>& collected, Version spd_latest, Time now);

// A task can serve iff it has an installed version whose lease has not run
// out and whose copy was not collected.
bool can_serve(const DasTask& task, const MetadataStore& meta,
               const std::vector<char>& collected, Time now);

// ---------------------------------------------------------------------------
// Traces

enum class TraceEvent {
  kPublish,
  kRegisterWrite,
  kLeaseExtend,
  kCasLost,
  kLoadBegin,
  kLoadDone,
  kSupervise,
  kSuperviseMiss,
  kGcCollect,
};

std::string_view to_string(TraceEvent e);
TraceEvent parse_trace_event(std::string_view text);

struct TraceEntry {
  Time time = 0;
  int task_id = -1;  // -1 for events not owned by a task
  TraceEvent event = TraceEvent::kPublish;
  Version version = 0;

  bool operator==(const TraceEntry&) const = default;
};

inline constexpr const char* kDasTraceHeader = "time,task_id,event,version";
void write_trace_csv(std::ostream& out, const std::vector<TraceEntry>& trace);
std::vector<TraceEntry> read_trace_csv(std::istream& in);

struct InvariantReport {
  std::string name;
  bool passed = true;
  std::string detail;  // first violation
};

// Independent trace checkers: availability, load-once, register
// monotonicity, GC safety and version tagging.
std::vector<InvariantReport> check_trace(const std::vector<TraceEntry>& trace);

// ---------------------------------------------------------------------------
// Schedule exploration

struct Scenario {
  std::size_t num_tasks = 2;
  std::vector<Time> publish_times{1, 9, 17};
  Time horizon = 30;  // last simulated time unit
  DasTiming timing;
  Mutation mutation;

  void validate() const;
};

struct ExploreResult {
  std::vector<InvariantReport> invariants;
  std::size_t states = 0;     // distinct states (exhaustive) or steps (random)
  std::size_t schedules = 0;  // complete schedules examined
  std::vector<TraceEntry> counterexample;

  bool passed() const;
};

// Every interleaving of the events due in each time unit, over every choice
// of task phases. Includes a symmetry check: the reachable set is closed
// under permutation of task ids.
ExploreResult explore_exhaustive(const Scenario& scenario);

// `count` random schedules with random phases, publication gaps in
// [min_gap, max_gap] and random event order.
struct RandomScheduleConfig {
  std::size_t num_tasks = 4;
  std::size_t num_versions = 5;
  std::size_t count = 1000;
  Time min_gap = 8;
  Time max_gap = 12;
  std::uint64_t seed = 1;
  DasTiming timing;
  Mutation mutation;
};

ExploreResult explore_random(const RandomScheduleConfig& cfg);

// ---------------------------------------------------------------------------
// Service used by the training pipeline

struct ServiceConfig {
  std::size_t num_tasks = 3;
  DasTiming timing{120'000, 60'000, 360'000, 120'000, 60'000};
};

class DasService {
 public:
  explicit DasService(const ServiceConfig& cfg);

  void publish(Version version, const models::Mlp& fm_params, Time now);
  // Runs every tick due at or before `t`, in time order.
  void advance_to(Time t);
  // FM inference through the snapshot installed on task (example_id mod
  // num_tasks). Throws NoSnapshotInstalled if that task cannot serve.
  SupervisionRecord supervise(const SharedDatasetRow& row, Time now);

  Time now() const noexcept { return now_; }
  const std::vector<TraceEntry>& trace() const noexcept { return trace_; }
  const MetadataStore& metadata() const noexcept { return meta_; }
  const std::vector<DasTask>& tasks() const noexcept { return tasks_; }
  std::size_t cached_versions() const;

 private:
  void run_ticks_at(Time t);

  ServiceConfig cfg_;
  SnapshotPublishingDb spd_;
  MetadataStore meta_;
  std::vector<DasTask> tasks_;
  std::vector<char> collected_;
  std::map<Version, std::shared_ptr<const models::FmArch>> cache_;
  std::vector<TraceEntry> trace_;
  Time now_ = 0;
  bool started_ = false;
};

// {"example_id":..,"logged_at":..,"fm_version":..,"y_f":..} per line.
void write_supervision_jsonl(std::ostream& out, const std::vector<SupervisionRecord>& records);
std::vector<SupervisionRecord> read_supervision_jsonl(std::istream& in);

}  // namespace exfm::das
