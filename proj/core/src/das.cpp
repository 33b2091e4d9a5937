#include "exfm/das.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "exfm/error.hpp"

namespace exfm::das {

// ---------------------------------------------------------------------------
// Join

void WindowConfig::validate() const {
  if (window_ms < 0) throw Error(ErrorCode::kConfigError, "das window must be >= 0");
  if (feedback_mean_ms < 0.0) throw Error(ErrorCode::kConfigError, "feedback mean must be >= 0");
  if (feedback_cap_ms < 0) throw Error(ErrorCode::kConfigError, "feedback cap must be >= 0");
}

double feedback_release_probability(const WindowConfig& cfg) {
  cfg.validate();
  if (cfg.feedback_mean_ms == 0.0 || cfg.window_ms >= cfg.feedback_cap_ms) return 1.0;
  const double m = cfg.feedback_mean_ms;
  return -std::expm1(-double(cfg.window_ms) / m) / -std::expm1(-double(cfg.feedback_cap_ms) / m);
}

namespace {

Time draw_delay(const WindowConfig& cfg, numerics::SeededRng& rng) {
  if (cfg.feedback_mean_ms == 0.0 || cfg.feedback_cap_ms == 0) return 0;
  const double m = cfg.feedback_mean_ms;
  const double mass = -std::expm1(-double(cfg.feedback_cap_ms) / m);
  const double u = rng.uniform();
  const double d = -m * std::log1p(-u * mass);
  return std::min<Time>(static_cast<Time>(std::floor(d)), cfg.feedback_cap_ms);
}

}  // namespace

JoinResult join_and_window(const std::vector<std::vector<stream::Example>>& streams,
                           const WindowConfig& cfg, numerics::SeededRng& rng) {
  cfg.validate();
  JoinResult out;
  std::vector<SharedDatasetRow> rows;
  std::unordered_map<std::uint64_t, std::size_t> by_id;
  for (const auto& s : streams) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i > 0 && s[i].timestamp_ms < s[i - 1].timestamp_ms) {
        throw Error(ErrorCode::kInvalidArgument, "join_and_window: stream not time-ordered");
      }
      const auto& ex = s[i];
      auto [it, inserted] = by_id.emplace(ex.id, rows.size());
      if (!inserted) {
        auto& row = rows[it->second];
        if (std::find(row.traffic_ids.begin(), row.traffic_ids.end(), ex.traffic_id) ==
            row.traffic_ids.end()) {
          row.traffic_ids.push_back(ex.traffic_id);
        }
        ++out.duplicates;
        continue;
      }
      SharedDatasetRow row;
      row.example_id = ex.id;
      row.example = &ex;
      row.traffic_ids = {ex.traffic_id};
      row.impression_time = ex.timestamp_ms;
      row.feedback_deadline = ex.timestamp_ms + cfg.window_ms;
      rows.push_back(std::move(row));
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.impression_time != b.impression_time) return a.impression_time < b.impression_time;
    return a.example_id < b.example_id;
  });
  for (auto& row : rows) {
    row.feedback_time = row.impression_time + draw_delay(cfg, rng);
    if (row.feedback_time > row.feedback_deadline) {
      out.late_ids.push_back(row.example_id);
      continue;
    }
    row.label_status = LabelStatus::kArrived;
    row.label = row.example->label;
    out.rows.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Protocol pieces

void DasTiming::validate() const {
  if (updater_period <= 0 || loader_period <= 0 || gc_period <= 0 || load_duration <= 0 ||
      lease_duration <= 0) {
    throw Error(ErrorCode::kConfigError, "das periods and durations must be > 0");
  }
}

void SnapshotPublishingDb::publish(Version version, std::string bytes, Time now) {
  if (version == 0 || version <= latest()) {
    throw Error(ErrorCode::kInvalidArgument, "SPD versions must be strictly increasing");
  }
  entries_.push_back({version, now, std::make_shared<const std::string>(std::move(bytes))});
}

const SnapshotPublishingDb::Entry& SnapshotPublishingDb::find(Version v) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), v,
                             [](const Entry& e, Version x) { return e.version < x; });
  if (it == entries_.end() || it->version != v) {
    throw Error(ErrorCode::kInvalidArgument, "SPD has no version " + std::to_string(v));
  }
  return *it;
}

bool SnapshotPublishingDb::contains(Version v) const noexcept {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), v,
                             [](const Entry& e, Version x) { return e.version < x; });
  return it != entries_.end() && it->version == v;
}

const std::string& SnapshotPublishingDb::bytes(Version v) const { return *find(v).bytes; }

Time SnapshotPublishingDb::published_at(Version v) const { return find(v).published_at; }

bool MetadataStore::compare_and_set(const std::optional<RegisterValue>& expected,
                                    const RegisterValue& desired, Time now) {
  if (desired.lease.expires_at <= now) {
    throw Error(ErrorCode::kInvalidArgument, "lease must expire strictly in the future");
  }
  if (desired.lease.version != desired.version) {
    throw Error(ErrorCode::kInvalidArgument, "lease must name the register version");
  }
  if (register_ != expected) return false;
  register_ = desired;
  if (expiry_.size() <= desired.version) expiry_.resize(desired.version + 1, 0);
  expiry_[desired.version] = std::max(expiry_[desired.version], desired.lease.expires_at);
  return true;
}

Time MetadataStore::lease_expiry(Version v) const {
  return v < expiry_.size() ? expiry_[v] : 0;
}

std::optional<CasIntent> updater_read(const DasTask& task, Version spd_latest,
                                      const MetadataStore& meta, Time now,
                                      const DasTiming& timing, const Mutation& mutation) {
  (void)task;
  const auto current = meta.read();
  const Time expires = now + timing.lease_duration;
  if (spd_latest == 0) return std::nullopt;
  if (!current || spd_latest > current->version) {
    return CasIntent{current, RegisterValue{spd_latest, Lease{spd_latest, expires}}, true};
  }
  if (mutation.skip_lease_extension) return std::nullopt;
  return CasIntent{current, RegisterValue{current->version, Lease{current->version, expires}},
                   false};
}

UpdaterOutcome updater_commit(MetadataStore& meta, const CasIntent& intent, Time now) {
  if (!meta.compare_and_set(intent.expected, intent.desired, now)) {
    return UpdaterOutcome::kCasLost;
  }
  return intent.new_version ? UpdaterOutcome::kWroteVersion : UpdaterOutcome::kExtendedLease;
}

UpdaterOutcome updater_tick(DasTask& task, const SnapshotPublishingDb& spd, MetadataStore& meta,
                            Time now, const DasTiming& timing, const Mutation& mutation) {
  const auto intent = updater_read(task, spd.latest(), meta, now, timing, mutation);
  if (!intent) return UpdaterOutcome::kNoop;
  return updater_commit(meta, *intent, now);
}

std::optional<Version> loader_tick(DasTask& task, const MetadataStore& meta, Time now,
                                   const DasTiming& timing) {
  const auto current = meta.read();
  if (task.loading != 0 || !current || current->version == task.serving) return std::nullopt;
  task.loading = current->version;
  task.load_done_at = now + timing.load_duration;
  return task.loading;
}

std::optional<Version> complete_load(DasTask& task, Time now) {
  if (task.loading == 0 || now < task.load_done_at) return std::nullopt;
  const Version v = task.loading;
  task.serving = v;
  task.loading = 0;
  if (task.loads_completed.size() <= v) task.loads_completed.resize(v + 1, 0);
  ++task.loads_completed[v];
  return v;
}

std::vector<Version> gc_tick(const MetadataStore& meta, const std::vector<DasTask>& tasks,
                             std::vector<char>& collected, Version spd_latest, Time now) {
  std::vector<Version> out;
  if (collected.size() <= spd_latest) collected.resize(spd_latest + 1, 0);
  Version newest_installed = 0;
  for (const auto& t : tasks) newest_installed = std::max(newest_installed, t.serving);
  for (Version v = 1; v < newest_installed; ++v) {
    if (collected[v]) continue;
    const Time expiry = meta.lease_expiry(v);
    if (expiry == 0 || expiry > now) continue;
    const bool in_use = std::any_of(tasks.begin(), tasks.end(), [&](const DasTask& t) {
      return t.serving == v || t.loading == v;
    });
    if (in_use) continue;
    collected[v] = 1;
    out.push_back(v);
  }
  return out;
}

bool can_serve(const DasTask& task, const MetadataStore& meta,
               const std::vector<char>& collected, Time now) {
  if (task.serving == 0) return false;
  if (task.serving < collected.size() && collected[task.serving]) return false;
  return meta.lease_expiry(task.serving) > now;
}

// ---------------------------------------------------------------------------
// Traces

std::string_view to_string(TraceEvent e) {
  switch (e) {
    case TraceEvent::kPublish:
      return "publish";
    case TraceEvent::kRegisterWrite:
      return "register_write";
    case TraceEvent::kLeaseExtend:
      return "lease_extend";
    case TraceEvent::kCasLost:
      return "cas_lost";
    case TraceEvent::kLoadBegin:
      return "load_begin";
    case TraceEvent::kLoadDone:
      return "load_done";
    case TraceEvent::kSupervise:
      return "supervise";
    case TraceEvent::kSuperviseMiss:
      return "supervise_miss";
    case TraceEvent::kGcCollect:
      return "gc_collect";
  }
  return "?";
}

TraceEvent parse_trace_event(std::string_view text) {
  for (int i = 0; i <= static_cast<int>(TraceEvent::kGcCollect); ++i) {
    const auto e = static_cast<TraceEvent>(i);
    if (to_string(e) == text) return e;
  }
  throw Error(ErrorCode::kFormatError, "unknown trace event '" + std::string(text) + "'");
}

void write_trace_csv(std::ostream& out, const std::vector<TraceEntry>& trace) {
  out << kDasTraceHeader << '\n';
  for (const auto& e : trace) {
    out << e.time << ',' << e.task_id << ',' << to_string(e.event) << ',' << e.version << '\n';
  }
}

std::vector<TraceEntry> read_trace_csv(std::istream& in) {
  std::vector<TraceEntry> out;
  std::string line;
  if (!std::getline(in, line) || line != kDasTraceHeader) {
    throw Error(ErrorCode::kFormatError, "DAS trace: missing header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string time, task, event, version;
    if (!std::getline(ss, time, ',') || !std::getline(ss, task, ',') ||
        !std::getline(ss, event, ',') || !std::getline(ss, version)) {
      throw Error(ErrorCode::kFormatError, "DAS trace: bad line '" + line + "'");
    }
    try {
      out.push_back({std::stoll(time), std::stoi(task), parse_trace_event(event),
                     std::stoull(version)});
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kFormatError, "DAS trace: bad number in '" + line + "'");
    }
  }
  return out;
}

namespace {

std::string describe(const TraceEntry& e) {
  return "t=" + std::to_string(e.time) + " task=" + std::to_string(e.task_id) + " " +
         std::string(to_string(e.event)) + " v" + std::to_string(e.version);
}

}  // namespace

std::vector<InvariantReport> check_trace(const std::vector<TraceEntry>& trace) {
  InvariantReport availability{"availability", true, ""};
  InvariantReport load_once{"load_once", true, ""};
  InvariantReport monotone{"register_monotonicity", true, ""};
  InvariantReport gc_safety{"gc_safety", true, ""};
  InvariantReport tagging{"version_tagging", true, ""};
  auto fail = [](InvariantReport& r, const TraceEntry& e, const std::string& why) {
    if (!r.passed) return;
    r.passed = false;
    r.detail = why + " at " + describe(e);
  };

  std::map<int, Version> installed;
  std::map<std::pair<int, Version>, int> loads;
  std::unordered_set<Version> collected;
  Version reg = 0;
  for (const auto& e : trace) {
    switch (e.event) {
      case TraceEvent::kRegisterWrite:
        if (e.version < reg) fail(monotone, e, "register moved backwards");
        reg = e.version;
        break;
      case TraceEvent::kLeaseExtend:
        if (e.version != reg) fail(monotone, e, "lease extended for a non-current version");
        break;
      case TraceEvent::kLoadBegin:
        if (collected.count(e.version)) fail(gc_safety, e, "load of a collected version");
        break;
      case TraceEvent::kLoadDone:
        if (++loads[{e.task_id, e.version}] > 1) fail(load_once, e, "version loaded twice");
        if (collected.count(e.version)) fail(gc_safety, e, "load of a collected version");
        installed[e.task_id] = e.version;
        break;
      case TraceEvent::kSupervise: {
        if (collected.count(e.version)) fail(gc_safety, e, "supervision from a collected version");
        auto it = installed.find(e.task_id);
        if (it == installed.end() || it->second != e.version) {
          fail(tagging, e, "record tagged with a version the task had not installed");
        }
        break;
      }
      case TraceEvent::kSuperviseMiss:
        if (installed.count(e.task_id)) fail(availability, e, "no servable snapshot after first load");
        break;
      case TraceEvent::kGcCollect:
        collected.insert(e.version);
        for (const auto& [task, v] : installed) {
          if (v == e.version) fail(gc_safety, e, "collected a version still being served");
        }
        break;
      case TraceEvent::kPublish:
      case TraceEvent::kCasLost:
        break;
    }
  }
  return {availability, load_once, monotone, gc_safety, tagging};
}

// ---------------------------------------------------------------------------
// Exploration

void Scenario::validate() const {
  timing.validate();
  if (num_tasks == 0 || num_tasks > 6) {
    throw Error(ErrorCode::kInvalidArgument, "scenario needs 1..6 tasks");
  }
  if (!std::is_sorted(publish_times.begin(), publish_times.end())) {
    throw Error(ErrorCode::kInvalidArgument, "publish times must be sorted");
  }
  if (!publish_times.empty() && publish_times.back() > horizon) {
    throw Error(ErrorCode::kInvalidArgument, "publish after horizon");
  }
}

bool ExploreResult::passed() const {
  return std::all_of(invariants.begin(), invariants.end(),
                     [](const InvariantReport& r) { return r.passed; });
}

namespace {

constexpr int kEventsPerTask = 5;
enum TaskEvent { kUpdaterRead = 0, kUpdaterCas, kLoader, kLoadDone, kSuperviseAttempt };
constexpr int kPublishBit = 0;
constexpr int kGcBit = 1;
constexpr int task_bit(std::size_t task, int ev) { return 2 + int(task) * kEventsPerTask + ev; }

struct SimState {
  Time now = 0;
  std::size_t next_publish = 0;
  Version spd_latest = 0;
  MetadataStore meta;
  std::vector<DasTask> tasks;
  std::vector<char> collected;
  std::uint32_t pending = 0;

  bool operator==(const SimState&) const = default;
};

void put(std::string& key, std::int64_t v) { key.append(reinterpret_cast<const char*>(&v), 8); }

std::string state_key(const SimState& s) {
  std::string key;
  put(key, s.now);
  put(key, std::int64_t(s.next_publish));
  put(key, std::int64_t(s.pending));
  const auto reg = s.meta.read();
  put(key, reg ? std::int64_t(reg->version) : -1);
  put(key, reg ? reg->lease.expires_at : -1);
  for (Version v = 1; v <= s.spd_latest; ++v) {
    put(key, s.meta.lease_expiry(v));
    put(key, v < s.collected.size() ? s.collected[v] : 0);
  }
  for (const auto& t : s.tasks) {
    put(key, std::int64_t(t.serving));
    put(key, std::int64_t(t.loading));
    put(key, t.load_done_at);
    put(key, t.updater_phase);
    put(key, t.loader_phase);
    if (t.pending_cas) {
      const auto& c = *t.pending_cas;
      put(key, c.expected ? std::int64_t(c.expected->version) : -1);
      put(key, c.expected ? c.expected->lease.expires_at : -1);
      put(key, std::int64_t(c.desired.version));
      put(key, c.desired.lease.expires_at);
      put(key, c.new_version);
    } else {
      put(key, -2);
    }
    for (Version v = 1; v <= s.spd_latest; ++v) {
      put(key, v < t.loads_completed.size() ? t.loads_completed[v] : 0);
    }
  }
  return key;
}

SimState permuted(const SimState& s, const std::vector<std::size_t>& perm) {
  SimState out = s;
  out.pending = s.pending & ((1u << 2) - 1);
  for (std::size_t i = 0; i < s.tasks.size(); ++i) {
    out.tasks[perm[i]] = s.tasks[i];
    out.tasks[perm[i]].id = int(perm[i]);
    for (int ev = 0; ev < kEventsPerTask; ++ev) {
      if (s.pending & (1u << task_bit(i, ev))) out.pending |= 1u << task_bit(perm[i], ev);
    }
  }
  return out;
}

bool due(Time now, Time phase, Time period) { return now >= phase && (now - phase) % period == 0; }

// Marks the events due in s.now.
void open_unit(SimState& s, const Scenario& sc) {
  s.pending = 0;
  if (s.next_publish < sc.publish_times.size() && sc.publish_times[s.next_publish] == s.now) {
    s.pending |= 1u << kPublishBit;
  }
  if (s.now % sc.timing.gc_period == 0) s.pending |= 1u << kGcBit;
  for (std::size_t i = 0; i < s.tasks.size(); ++i) {
    const auto& t = s.tasks[i];
    if (due(s.now, t.updater_phase, sc.timing.updater_period)) {
      s.pending |= 1u << task_bit(i, kUpdaterRead);
    }
    if (due(s.now, t.loader_phase, sc.timing.loader_period)) {
      s.pending |= 1u << task_bit(i, kLoader);
    }
    if (t.loading != 0 && t.load_done_at == s.now) s.pending |= 1u << task_bit(i, kLoadDone);
    s.pending |= 1u << task_bit(i, kSuperviseAttempt);
  }
}

struct StepOutput {
  std::vector<TraceEntry> trace;
  std::vector<std::pair<std::string, std::string>> violations;  // invariant, detail
};

void step(SimState& s, int bit, const Scenario& sc, StepOutput& out) {
  s.pending &= ~(1u << bit);
  auto emit = [&](int task, TraceEvent e, Version v) { out.trace.push_back({s.now, task, e, v}); };
  auto violate = [&](const char* inv, const std::string& detail) {
    out.violations.emplace_back(inv, detail + " at t=" + std::to_string(s.now));
  };
  if (bit == kPublishBit) {
    s.spd_latest += 1;
    s.next_publish += 1;
    if (s.collected.size() <= s.spd_latest) s.collected.resize(s.spd_latest + 1, 0);
    emit(-1, TraceEvent::kPublish, s.spd_latest);
    return;
  }
  if (bit == kGcBit) {
    for (Version v : gc_tick(s.meta, s.tasks, s.collected, s.spd_latest, s.now)) {
      emit(-1, TraceEvent::kGcCollect, v);
    }
    return;
  }
  const std::size_t ti = std::size_t(bit - 2) / kEventsPerTask;
  const int ev = (bit - 2) % kEventsPerTask;
  DasTask& task = s.tasks[ti];
  const int id = task.id;
  switch (ev) {
    case kUpdaterRead:
      task.pending_cas = updater_read(task, s.spd_latest, s.meta, s.now, sc.timing, sc.mutation);
      if (task.pending_cas) s.pending |= 1u << task_bit(ti, kUpdaterCas);
      break;
    case kUpdaterCas: {
      const CasIntent intent = *task.pending_cas;
      task.pending_cas.reset();
      const Version before = s.meta.read() ? s.meta.read()->version : 0;
      switch (updater_commit(s.meta, intent, s.now)) {
        case UpdaterOutcome::kWroteVersion:
          if (intent.desired.version < before) violate("register_monotonicity", "register regressed");
          emit(id, TraceEvent::kRegisterWrite, intent.desired.version);
          break;
        case UpdaterOutcome::kExtendedLease:
          emit(id, TraceEvent::kLeaseExtend, intent.desired.version);
          break;
        case UpdaterOutcome::kCasLost:
          emit(id, TraceEvent::kCasLost, intent.desired.version);
          break;
        case UpdaterOutcome::kNoop:
          break;
      }
      break;
    }
    case kLoader:
      if (auto v = loader_tick(task, s.meta, s.now, sc.timing)) {
        if (*v < s.collected.size() && s.collected[*v]) violate("gc_safety", "load of collected v");
        emit(id, TraceEvent::kLoadBegin, *v);
      }
      break;
    case kLoadDone:
      if (auto v = complete_load(task, s.now)) {
        if (task.loads_completed[*v] > 1) violate("load_once", "v" + std::to_string(*v) + " reloaded");
        if (*v < s.collected.size() && s.collected[*v]) violate("gc_safety", "installed collected v");
        emit(id, TraceEvent::kLoadDone, *v);
      }
      break;
    case kSuperviseAttempt:
      if (task.serving == 0) break;  // nothing installed yet
      if (can_serve(task, s.meta, s.collected, s.now)) {
        emit(id, TraceEvent::kSupervise, task.serving);
      } else {
        violate("availability", "task " + std::to_string(id) + " cannot serve v" +
                                    std::to_string(task.serving));
        emit(id, TraceEvent::kSuperviseMiss, task.serving);
      }
      break;
    default:
      break;
  }
}

// Checked once the horizon is reached: the latest version is installed
// everywhere and named by the register.
std::optional<std::string> convergence_failure(const SimState& s) {
  const auto reg = s.meta.read();
  if (s.spd_latest == 0) return std::nullopt;
  if (!reg || reg->version != s.spd_latest) return "register does not hold the latest version";
  for (const auto& t : s.tasks) {
    if (t.serving != s.spd_latest) {
      return "task " + std::to_string(t.id) + " serves v" + std::to_string(t.serving);
    }
  }
  return std::nullopt;
}

const std::vector<std::string> kInvariantNames = {"availability", "load_once",
                                                  "register_monotonicity", "gc_safety",
                                                  "version_tagging", "convergence"};

std::vector<InvariantReport> fresh_reports() {
  std::vector<InvariantReport> r;
  for (const auto& n : kInvariantNames) r.push_back({n, true, ""});
  return r;
}

void record(std::vector<InvariantReport>& reports, const std::string& name,
            const std::string& detail) {
  for (auto& r : reports) {
    if (r.name == name && r.passed) {
      r.passed = false;
      r.detail = detail;
    }
  }
}

SimState initial_state(const Scenario& sc, const std::vector<Time>& updater_phases,
                       const std::vector<Time>& loader_phases) {
  SimState s;
  s.tasks.resize(sc.num_tasks);
  for (std::size_t i = 0; i < sc.num_tasks; ++i) {
    s.tasks[i].id = int(i);
    s.tasks[i].updater_phase = updater_phases[i];
    s.tasks[i].loader_phase = loader_phases[i];
  }
  s.collected.assign(1, 0);
  open_unit(s, sc);
  return s;
}

// Every assignment of phases in [0, period) to each task.
std::vector<std::pair<std::vector<Time>, std::vector<Time>>> phase_choices(const Scenario& sc) {
  std::vector<std::pair<std::vector<Time>, std::vector<Time>>> out;
  const Time pu = sc.timing.updater_period;
  const Time pl = sc.timing.loader_period;
  const std::size_t n = sc.num_tasks;
  std::size_t combos = 1;
  for (std::size_t i = 0; i < n; ++i) combos *= std::size_t(pu * pl);
  for (std::size_t c = 0; c < combos; ++c) {
    std::vector<Time> up(n), lp(n);
    std::size_t rest = c;
    for (std::size_t i = 0; i < n; ++i) {
      up[i] = Time(rest % std::size_t(pu));
      rest /= std::size_t(pu);
      lp[i] = Time(rest % std::size_t(pl));
      rest /= std::size_t(pl);
    }
    out.emplace_back(up, lp);
  }
  return out;
}

}  // namespace

ExploreResult explore_exhaustive(const Scenario& sc) {
  sc.validate();
  ExploreResult result;
  result.invariants = fresh_reports();
  result.invariants.push_back({"symmetry", true, ""});

  struct Node {
    SimState state;
    std::size_t parent;
    std::vector<TraceEntry> edge;
  };
  std::vector<Node> nodes;
  std::unordered_map<std::string, std::size_t> seen;
  std::deque<std::size_t> queue;
  constexpr std::size_t kRoot = static_cast<std::size_t>(-1);

  auto path_to = [&](std::size_t idx, const std::vector<TraceEntry>& tail) {
    std::vector<std::vector<TraceEntry>> parts{tail};
    for (std::size_t i = idx; i != kRoot; i = nodes[i].parent) parts.push_back(nodes[i].edge);
    std::vector<TraceEntry> trace;
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
      trace.insert(trace.end(), it->begin(), it->end());
    }
    return trace;
  };
  auto add = [&](SimState s, std::size_t parent, std::vector<TraceEntry> edge) {
    auto key = state_key(s);
    if (seen.count(key)) return;
    seen.emplace(std::move(key), nodes.size());
    nodes.push_back({std::move(s), parent, std::move(edge)});
    queue.push_back(nodes.size() - 1);
  };

  for (const auto& [up, lp] : phase_choices(sc)) add(initial_state(sc, up, lp), kRoot, {});

  while (!queue.empty()) {
    const std::size_t idx = queue.front();
    queue.pop_front();
    const SimState cur = nodes[idx].state;
    if (cur.pending == 0) {
      if (cur.now >= sc.horizon) {
        ++result.schedules;
        if (auto why = convergence_failure(cur)) {
          if (result.counterexample.empty()) result.counterexample = path_to(idx, {});
          record(result.invariants, "convergence", *why);
        }
        continue;
      }
      SimState next = cur;
      next.now += 1;
      open_unit(next, sc);
      add(std::move(next), idx, {});
      continue;
    }
    for (int bit = 0; bit < 32; ++bit) {
      if (!(cur.pending & (1u << bit))) continue;
      SimState next = cur;
      StepOutput out;
      step(next, bit, sc, out);
      for (const auto& [inv, detail] : out.violations) {
        if (result.counterexample.empty()) result.counterexample = path_to(idx, out.trace);
        record(result.invariants, inv, detail);
      }
      add(std::move(next), idx, std::move(out.trace));
    }
  }
  result.states = nodes.size();

  // Symmetry: the reachable set is closed under each adjacent transposition
  // of task ids (these generate every permutation).
  for (std::size_t a = 0; a + 1 < sc.num_tasks; ++a) {
    std::vector<std::size_t> perm(sc.num_tasks);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::swap(perm[a], perm[a + 1]);
    for (const auto& node : nodes) {
      if (!seen.count(state_key(permuted(node.state, perm)))) {
        record(result.invariants, "symmetry",
               "state at t=" + std::to_string(node.state.now) + " has no image under swap(" +
                   std::to_string(a) + "," + std::to_string(a + 1) + ")");
        break;
      }
    }
  }
  return result;
}

ExploreResult explore_random(const RandomScheduleConfig& cfg) {
  cfg.timing.validate();
  if (cfg.num_tasks == 0 || cfg.num_tasks > 6 || cfg.min_gap <= 0 || cfg.max_gap < cfg.min_gap) {
    throw Error(ErrorCode::kInvalidArgument, "bad random schedule config");
  }
  ExploreResult result;
  result.invariants = fresh_reports();
  numerics::SeededRng root(cfg.seed);
  for (std::size_t run = 0; run < cfg.count; ++run) {
    numerics::SeededRng rng = root.split(run);
    Scenario sc;
    sc.num_tasks = cfg.num_tasks;
    sc.timing = cfg.timing;
    sc.mutation = cfg.mutation;
    sc.publish_times.clear();
    Time t = 1 + Time(rng.below(std::uint64_t(cfg.timing.updater_period)));
    for (std::size_t v = 0; v < cfg.num_versions; ++v) {
      sc.publish_times.push_back(t);
      t += cfg.min_gap + Time(rng.below(std::uint64_t(cfg.max_gap - cfg.min_gap + 1)));
    }
    sc.horizon = sc.publish_times.back() + cfg.timing.lease_duration + 2 * cfg.timing.load_duration +
                 2 * cfg.timing.updater_period + 2 * cfg.timing.loader_period;
    std::vector<Time> up(cfg.num_tasks), lp(cfg.num_tasks);
    for (std::size_t i = 0; i < cfg.num_tasks; ++i) {
      up[i] = Time(rng.below(std::uint64_t(cfg.timing.updater_period)));
      lp[i] = Time(rng.below(std::uint64_t(cfg.timing.loader_period)));
    }
    SimState s = initial_state(sc, up, lp);
    std::vector<TraceEntry> trace;
    bool violated = false;
    while (true) {
      if (s.pending == 0) {
        if (s.now >= sc.horizon) break;
        s.now += 1;
        open_unit(s, sc);
        continue;
      }
      std::vector<int> bits;
      for (int b = 0; b < 32; ++b) {
        if (s.pending & (1u << b)) bits.push_back(b);
      }
      StepOutput out;
      step(s, bits[rng.below(bits.size())], sc, out);
      ++result.states;
      trace.insert(trace.end(), out.trace.begin(), out.trace.end());
      for (const auto& [inv, detail] : out.violations) {
        record(result.invariants, inv, "schedule " + std::to_string(run) + ": " + detail);
        violated = true;
      }
    }
    if (auto why = convergence_failure(s)) {
      record(result.invariants, "convergence", "schedule " + std::to_string(run) + ": " + *why);
      violated = true;
    }
    // The trace checkers re-derive every property from the log alone.
    for (const auto& r : check_trace(trace)) {
      if (!r.passed) {
        record(result.invariants, r.name, "schedule " + std::to_string(run) + ": " + r.detail);
        violated = true;
      }
    }
    ++result.schedules;
    if (violated && result.counterexample.empty()) result.counterexample = trace;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Service

DasService::DasService(const ServiceConfig& cfg) : cfg_(cfg) {
  cfg_.timing.validate();
  if (cfg_.num_tasks == 0) throw Error(ErrorCode::kConfigError, "das.num_tasks must be > 0");
  tasks_.resize(cfg_.num_tasks);
  for (std::size_t i = 0; i < cfg_.num_tasks; ++i) {
    tasks_[i].id = int(i);
    tasks_[i].updater_phase = Time(i) * cfg_.timing.updater_period / Time(cfg_.num_tasks);
    tasks_[i].loader_phase = Time(i) * cfg_.timing.loader_period / Time(cfg_.num_tasks);
  }
  collected_.assign(1, 0);
}

void DasService::publish(Version version, const models::Mlp& fm_params, Time now) {
  advance_to(now);
  spd_.publish(version, models::encode_snapshot(version, fm_params), now);
  if (collected_.size() <= version) collected_.resize(version + 1, 0);
  trace_.push_back({now, -1, TraceEvent::kPublish, version});
}

namespace {

Time next_tick(Time after, Time phase, Time period) {
  if (after < phase) return phase;
  return phase + ((after - phase) / period + 1) * period;
}

}  // namespace

void DasService::advance_to(Time t) {
  if (!started_) {
    started_ = true;
    now_ = std::min<Time>(t, 0) - 1;
  }
  while (now_ < t) {
    Time next = t + 1;
    for (const auto& task : tasks_) {
      next = std::min(next, next_tick(now_, task.updater_phase, cfg_.timing.updater_period));
      next = std::min(next, next_tick(now_, task.loader_phase, cfg_.timing.loader_period));
      if (task.loading != 0) next = std::min(next, std::max(task.load_done_at, now_ + 1));
    }
    next = std::min(next, next_tick(now_, 0, cfg_.timing.gc_period));
    if (next > t) {
      now_ = t;
      break;
    }
    run_ticks_at(next);
    now_ = next;
  }
}

void DasService::run_ticks_at(Time t) {
  const auto& timing = cfg_.timing;
  for (auto& task : tasks_) {
    if (auto v = complete_load(task, t)) {
      cache_.emplace(*v, std::make_shared<const models::FmArch>(
                             models::FmArch{models::decode_snapshot(spd_.bytes(*v)).params}));
      trace_.push_back({t, task.id, TraceEvent::kLoadDone, *v});
    }
  }
  for (auto& task : tasks_) {
    if (!due(t, task.updater_phase, timing.updater_period)) continue;
    const auto intent = updater_read(task, spd_.latest(), meta_, t, timing);
    if (!intent) continue;
    switch (updater_commit(meta_, *intent, t)) {
      case UpdaterOutcome::kWroteVersion:
        trace_.push_back({t, task.id, TraceEvent::kRegisterWrite, intent->desired.version});
        break;
      case UpdaterOutcome::kExtendedLease:
        trace_.push_back({t, task.id, TraceEvent::kLeaseExtend, intent->desired.version});
        break;
      case UpdaterOutcome::kCasLost:
        trace_.push_back({t, task.id, TraceEvent::kCasLost, intent->desired.version});
        break;
      case UpdaterOutcome::kNoop:
        break;
    }
  }
  for (auto& task : tasks_) {
    if (!due(t, task.loader_phase, timing.loader_period)) continue;
    if (auto v = loader_tick(task, meta_, t, timing)) {
      trace_.push_back({t, task.id, TraceEvent::kLoadBegin, *v});
    }
  }
  if (due(t, 0, timing.gc_period)) {
    for (Version v : gc_tick(meta_, tasks_, collected_, spd_.latest(), t)) {
      cache_.erase(v);
      trace_.push_back({t, -1, TraceEvent::kGcCollect, v});
    }
  }
}

SupervisionRecord DasService::supervise(const SharedDatasetRow& row, Time now) {
  advance_to(now);
  if (!row.example) throw Error(ErrorCode::kInvalidArgument, "supervise: row has no features");
  DasTask& task = tasks_[row.example_id % tasks_.size()];
  if (!can_serve(task, meta_, collected_, now)) {
    trace_.push_back({now, task.id, TraceEvent::kSuperviseMiss, task.serving});
    throw Error(ErrorCode::kNoSnapshotInstalled,
                "task " + std::to_string(task.id) + " has no servable snapshot");
  }
  const auto& fm = *cache_.at(task.serving);
  trace_.push_back({now, task.id, TraceEvent::kSupervise, task.serving});
  return {row.example_id, models::fm_forward(fm, row.example->features.span()), task.serving,
          now};
}

std::size_t DasService::cached_versions() const { return cache_.size(); }

// ---------------------------------------------------------------------------
// Supervision log

void write_supervision_jsonl(std::ostream& out, const std::vector<SupervisionRecord>& records) {
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["example_id"] = r.example_id;
    j["logged_at"] = r.logged_at;
    j["fm_version"] = r.fm_version;
    j["y_f"] = r.y_f;
    out << j.dump() << '\n';
  }
}

std::vector<SupervisionRecord> read_supervision_jsonl(std::istream& in) {
  std::vector<SupervisionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SupervisionRecord r;
      r.example_id = j.at("example_id").get<std::uint64_t>();
      r.logged_at = j.at("logged_at").get<Time>();
      r.fm_version = j.at("fm_version").get<Version>();
      r.y_f = j.at("y_f").get<double>();
      if (!(r.y_f > 0.0 && r.y_f < 1.0)) throw Error(ErrorCode::kFormatError, "y_f outside (0,1)");
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kFormatError,
                  "supervision log line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace exfm::das
