#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "exfm/das.hpp"
#include "exfm/error.hpp"

using namespace exfm;
using namespace exfm::das;
using numerics::SeededRng;

namespace {

SharedDatasetRow row_for(std::uint64_t id, const stream::Example* ex) {
  SharedDatasetRow row;
  row.example_id = id;
  row.example = ex;
  return row;
}

std::vector<std::vector<stream::Example>> tiny_streams(std::size_t n, std::int64_t spacing = 1000) {
  std::vector<std::vector<stream::Example>> s(1);
  for (std::size_t i = 0; i < n; ++i) {
    stream::Example e;
    e.id = i + 1;
    e.features = numerics::DenseVector{double(i), 1.0};
    e.label = int(i % 2);
    e.timestamp_ms = std::int64_t(i) * spacing;
    s[0].push_back(e);
  }
  return s;
}

bool all_passed(const std::vector<InvariantReport>& r) {
  return std::all_of(r.begin(), r.end(), [](const auto& x) { return x.passed; });
}

}  // namespace

TEST(Join, ZeroWindowZeroDelayReleasesEverything) {
  WindowConfig cfg{0, 0.0, 0};
  SeededRng rng(1);
  const auto s = tiny_streams(10);
  const auto j = join_and_window(s, cfg, rng);
  ASSERT_EQ(j.rows.size(), 10u);
  for (const auto& r : j.rows) {
    EXPECT_EQ(r.feedback_time, r.impression_time);
    EXPECT_EQ(r.label_status, LabelStatus::kArrived);
  }
  EXPECT_TRUE(j.late_ids.empty());
}

TEST(Join, DuplicateImpressionsMerge) {
  auto s = tiny_streams(10);
  auto copy = s[0];
  for (auto& e : copy) e.traffic_id = 1;
  copy.resize(5);
  s.push_back(copy);
  SeededRng rng(2);
  const auto j = join_and_window(s, WindowConfig{0, 0.0, 0}, rng);
  EXPECT_EQ(j.rows.size(), 10u);
  EXPECT_EQ(j.duplicates, 5u);
  std::size_t shared = 0;
  for (const auto& r : j.rows) shared += r.traffic_ids.size() == 2;
  EXPECT_EQ(shared, 5u);
}

TEST(Join, ReleaseFractionMatchesCdf) {
  const WindowConfig cfg;
  const auto s = tiny_streams(100000, 1);
  SeededRng rng(3);
  const auto j = join_and_window(s, cfg, rng);
  const double frac = double(j.rows.size()) / 100000.0;
  EXPECT_NEAR(frac, feedback_release_probability(cfg), 0.02);
  EXPECT_EQ(j.rows.size() + j.late_ids.size(), 100000u);
  for (const auto& r : j.rows) EXPECT_LE(r.feedback_time, r.feedback_deadline);
}

TEST(Join, UnorderedStreamRejected) {
  auto s = tiny_streams(3);
  std::swap(s[0][0].timestamp_ms, s[0][2].timestamp_ms);
  SeededRng rng(4);
  EXPECT_THROW(join_and_window(s, WindowConfig{}, rng), Error);
}

TEST(Spd, VersionsStrictlyIncrease) {
  SnapshotPublishingDb spd;
  spd.publish(1, "a", 0);
  spd.publish(3, "b", 5);
  EXPECT_EQ(spd.latest(), 3u);
  EXPECT_THROW(spd.publish(3, "c", 6), Error);
  EXPECT_THROW(spd.publish(2, "c", 6), Error);
  EXPECT_EQ(spd.bytes(1), "a");
  EXPECT_FALSE(spd.contains(2));
}

TEST(Updater, WritesThenExtends) {
  const DasTiming timing;
  SnapshotPublishingDb spd;
  MetadataStore meta;
  DasTask task;
  EXPECT_EQ(updater_tick(task, spd, meta, 0, timing), UpdaterOutcome::kNoop);
  spd.publish(1, "", 0);
  EXPECT_EQ(updater_tick(task, spd, meta, 1, timing), UpdaterOutcome::kWroteVersion);
  EXPECT_EQ(meta.read()->version, 1u);
  EXPECT_EQ(meta.lease_expiry(1), 1 + timing.lease_duration);
  EXPECT_EQ(updater_tick(task, spd, meta, 3, timing), UpdaterOutcome::kExtendedLease);
  EXPECT_EQ(meta.lease_expiry(1), 3 + timing.lease_duration);
  Mutation skip{true};
  EXPECT_EQ(updater_tick(task, spd, meta, 5, timing, skip), UpdaterOutcome::kNoop);
  EXPECT_EQ(meta.lease_expiry(1), 3 + timing.lease_duration);
}

TEST(Updater, RacingTasksOneWins) {
  const DasTiming timing;
  MetadataStore meta;
  DasTask a, b;
  b.id = 1;
  const auto ia = updater_read(a, 1, meta, 1, timing);
  const auto ib = updater_read(b, 1, meta, 1, timing);
  ASSERT_TRUE(ia && ib);
  EXPECT_EQ(updater_commit(meta, *ia, 1), UpdaterOutcome::kWroteVersion);
  EXPECT_EQ(updater_commit(meta, *ib, 1), UpdaterOutcome::kCasLost);
  EXPECT_EQ(meta.read()->version, 1u);
}

TEST(Metadata, LeaseMustBeInFuture) {
  MetadataStore meta;
  EXPECT_THROW(meta.compare_and_set(std::nullopt, RegisterValue{1, Lease{1, 5}}, 5), Error);
  EXPECT_THROW(meta.compare_and_set(std::nullopt, RegisterValue{1, Lease{2, 9}}, 5), Error);
  EXPECT_TRUE(meta.compare_and_set(std::nullopt, RegisterValue{1, Lease{1, 9}}, 5));
}

TEST(Loader, SwitchesOnlyWhenLoadCompletes) {
  const DasTiming timing;
  MetadataStore meta;
  meta.compare_and_set(std::nullopt, RegisterValue{1, Lease{1, 10}}, 0);
  DasTask task;
  EXPECT_EQ(loader_tick(task, meta, 0, timing), std::optional<Version>(1));
  EXPECT_EQ(task.serving, 0u);
  EXPECT_FALSE(loader_tick(task, meta, 1, timing));  // one load at a time
  EXPECT_FALSE(complete_load(task, timing.load_duration - 1));
  EXPECT_EQ(complete_load(task, timing.load_duration), std::optional<Version>(1));
  EXPECT_EQ(task.serving, 1u);
  EXPECT_FALSE(loader_tick(task, meta, 3, timing));  // already serving
  EXPECT_EQ(task.loads_completed[1], 1);
}

TEST(Gc, CollectsOnlyExpiredUnusedOlderVersions) {
  MetadataStore meta;
  meta.compare_and_set(std::nullopt, RegisterValue{1, Lease{1, 10}}, 0);
  meta.compare_and_set(RegisterValue{1, Lease{1, 10}}, RegisterValue{2, Lease{2, 20}}, 5);
  std::vector<DasTask> tasks(2);
  tasks[0].serving = 2;
  tasks[1].serving = 1;
  std::vector<char> collected;
  EXPECT_TRUE(gc_tick(meta, tasks, collected, 2, 11).empty());  // task 1 still on v1
  tasks[1].serving = 2;
  EXPECT_TRUE(gc_tick(meta, tasks, collected, 2, 9).empty());  // lease not yet out
  EXPECT_EQ(gc_tick(meta, tasks, collected, 2, 11), std::vector<Version>{1});
  EXPECT_TRUE(gc_tick(meta, tasks, collected, 2, 12).empty());
  DasTask on_v1, on_v2;
  on_v1.serving = 1;
  on_v2.serving = 2;
  EXPECT_FALSE(can_serve(on_v1, meta, collected, 12));
  EXPECT_TRUE(can_serve(on_v2, meta, collected, 12));
  EXPECT_FALSE(can_serve(on_v2, meta, collected, 20));
}

TEST(Explore, SingleTaskSingleVersion) {
  Scenario sc;
  sc.num_tasks = 1;
  sc.publish_times = {1};
  sc.horizon = 16;
  const auto r = explore_exhaustive(sc);
  EXPECT_TRUE(r.passed());
  EXPECT_GT(r.states, 0u);
  EXPECT_GT(r.schedules, 0u);
}

TEST(Explore, TwoTasksThreeVersions) {
  const auto r = explore_exhaustive(Scenario{});
  for (const auto& inv : r.invariants) EXPECT_TRUE(inv.passed) << inv.name << ": " << inv.detail;
  EXPECT_TRUE(r.counterexample.empty());
}

TEST(Explore, LeaseSkipMutationIsCaught) {
  Scenario sc;
  sc.mutation.skip_lease_extension = true;
  const auto r = explore_exhaustive(sc);
  EXPECT_FALSE(r.passed());
  EXPECT_FALSE(r.counterexample.empty());
}

TEST(Explore, RandomSchedules) {
  RandomScheduleConfig cfg;
  cfg.count = 100;
  const auto r = explore_random(cfg);
  for (const auto& inv : r.invariants) EXPECT_TRUE(inv.passed) << inv.name << ": " << inv.detail;
  EXPECT_EQ(r.schedules, 100u);
  cfg.mutation.skip_lease_extension = true;
  EXPECT_FALSE(explore_random(cfg).passed());
}

TEST(TraceCheck, FlagsEachViolation) {
  using E = TraceEvent;
  EXPECT_TRUE(all_passed(check_trace({})));
  auto failed = [](const std::vector<TraceEntry>& t) {
    std::vector<std::string> names;
    for (const auto& r : check_trace(t))
      if (!r.passed) names.push_back(r.name);
    return names;
  };
  EXPECT_EQ(failed({{1, 0, E::kLoadDone, 1}, {2, 0, E::kLoadDone, 1}}),
            std::vector<std::string>{"load_once"});
  EXPECT_EQ(failed({{1, -1, E::kRegisterWrite, 2}, {2, -1, E::kRegisterWrite, 1}}),
            std::vector<std::string>{"register_monotonicity"});
  EXPECT_EQ(failed({{1, 0, E::kLoadDone, 1}, {2, -1, E::kGcCollect, 1}}),
            std::vector<std::string>{"gc_safety"});
  EXPECT_EQ(failed({{1, 0, E::kSupervise, 1}}), std::vector<std::string>{"version_tagging"});
  EXPECT_EQ(failed({{1, 0, E::kLoadDone, 1}, {2, 0, E::kSuperviseMiss, 1}}),
            std::vector<std::string>{"availability"});
}

TEST(TraceCsv, RoundTrip) {
  const std::vector<TraceEntry> t{{0, -1, TraceEvent::kPublish, 1},
                                  {3, 2, TraceEvent::kLoadDone, 1},
                                  {7, 0, TraceEvent::kCasLost, 4}};
  std::stringstream ss;
  write_trace_csv(ss, t);
  EXPECT_EQ(ss.str().substr(0, ss.str().find('\n')), kDasTraceHeader);
  EXPECT_EQ(read_trace_csv(ss), t);
  for (auto e : {TraceEvent::kPublish, TraceEvent::kSuperviseMiss, TraceEvent::kGcCollect}) {
    EXPECT_EQ(parse_trace_event(to_string(e)), e);
  }
}

TEST(SupervisionJsonl, RoundTrip) {
  const std::vector<SupervisionRecord> recs{{1, 0.25, 3, 100}, {2, 0.123456789012345, 4, 200}};
  std::stringstream ss;
  write_supervision_jsonl(ss, recs);
  EXPECT_EQ(read_supervision_jsonl(ss), recs);
  std::istringstream bad("{\"example_id\":1}\n");
  EXPECT_THROW(read_supervision_jsonl(bad), Error);
}

TEST(Service, ZeroTeacherGivesHalf) {
  SeededRng rng(5);
  auto fm = models::make_fm(2, std::vector<std::size_t>{4}, rng);
  auto p = models::flatten(fm.net);
  std::fill(p.begin(), p.end(), 0.0);
  models::unflatten(p, fm.net);
  DasService svc(ServiceConfig{1, DasTiming{}});
  svc.publish(1, fm.net, 0);
  const auto s = tiny_streams(3);
  const SharedDatasetRow row = row_for(1, &s[0][0]);
  EXPECT_THROW(svc.supervise(row, 0), Error);  // nothing installed yet
  const auto rec = svc.supervise(row, 20);
  EXPECT_EQ(rec.y_f, 0.5);
  EXPECT_EQ(rec.fm_version, 1u);
}

TEST(Service, SameVersionSameOutputAcrossTasks) {
  SeededRng rng(6);
  auto fm = models::make_fm(2, std::vector<std::size_t>{8}, rng);
  DasService svc(ServiceConfig{3, DasTiming{}});
  svc.publish(1, fm.net, 0);
  const auto s = tiny_streams(1);
  svc.advance_to(50);
  std::vector<double> outs;
  for (std::uint64_t id = 0; id < 3; ++id) {
    const SharedDatasetRow row = row_for(id, &s[0][0]);
    const auto rec = svc.supervise(row, 50);
    EXPECT_EQ(rec.fm_version, 1u);
    outs.push_back(rec.y_f);
  }
  EXPECT_EQ(outs[0], outs[1]);
  EXPECT_EQ(outs[1], outs[2]);
  EXPECT_EQ(outs[0], models::fm_forward(fm, s[0][0].features.span()));
  EXPECT_TRUE(all_passed(check_trace(svc.trace())));
}

TEST(Service, NewVersionReplacesOldAndOldIsCollected) {
  SeededRng rng(7);
  auto fm1 = models::make_fm(2, std::vector<std::size_t>{4}, rng);
  auto fm2 = models::make_fm(2, std::vector<std::size_t>{4}, rng);
  DasService svc(ServiceConfig{2, DasTiming{}});
  svc.publish(1, fm1.net, 0);
  svc.publish(2, fm2.net, 30);
  svc.advance_to(80);
  for (const auto& t : svc.tasks()) EXPECT_EQ(t.serving, 2u);
  EXPECT_EQ(svc.cached_versions(), 1u);
  EXPECT_TRUE(all_passed(check_trace(svc.trace())));
}
