#include "exfm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "exfm/error.hpp"

namespace exfm::config {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(ErrorCode::kConfigError, msg); }

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) fail("not a number: '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    fail("not a nonnegative integer: '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail("not a boolean: '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> to_doubles(const std::string& v) {
  std::vector<double> out;
  for (const auto& s : split_list(v)) out.push_back(to_double(s));
  return out;
}

std::vector<std::size_t> to_sizes(const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& s : split_list(v)) out.push_back(to_u64(s));
  return out;
}

distill::DistillMode to_mode(const std::string& v) {
  try {
    return distill::parse_mode(v);
  } catch (const Error& e) {
    fail(e.what());
  }
}

template <class T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ",";
    out += f(xs[i]);
  }
  return out;
}

std::string num(double v) { return stream::format_double(v); }

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

#define EXFM_DOUBLE(key, member)                                              \
  {key, {[](ExperimentConfig& c, const std::string& v) { c.member = to_double(v); }, \
         [](const ExperimentConfig& c) { return num(c.member); }}}
#define EXFM_SIZE(key, member)                                                \
  {key, {[](ExperimentConfig& c, const std::string& v) { c.member = to_u64(v); }, \
         [](const ExperimentConfig& c) { return std::to_string(c.member); }}}
#define EXFM_TIME(key, member)                                                \
  {key, {[](ExperimentConfig& c, const std::string& v) { c.member = das::Time(to_u64(v)); }, \
         [](const ExperimentConfig& c) { return std::to_string(c.member); }}}
#define EXFM_DOUBLES(key, member)                                             \
  {key, {[](ExperimentConfig& c, const std::string& v) { c.member = to_doubles(v); }, \
         [](const ExperimentConfig& c) { return join<double>(c.member, num); }}}

std::string size_str(const std::size_t& v) { return std::to_string(v); }
std::string mode_str(const distill::DistillMode& m) { return std::string(distill::to_string(m)); }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      EXFM_SIZE("stream.feature_dim", stream.feature_dim),
      EXFM_SIZE("stream.num_traffics", stream.num_traffics),
      EXFM_SIZE("stream.num_domains", stream.num_domains),
      EXFM_DOUBLE("stream.ar_rho", stream.ar_rho),
      EXFM_DOUBLE("stream.innovation_scale", stream.innovation_scale),
      EXFM_DOUBLE("stream.weight_scale", stream.weight_scale),
      EXFM_DOUBLE("stream.domain_offset_scale", stream.domain_offset_scale),
      EXFM_DOUBLE("stream.base_logit", stream.base_logit),
      EXFM_DOUBLE("stream.domain_bias_spread", stream.domain_bias_spread),
      EXFM_DOUBLE("stream.churn_rate", stream.churn_rate),
      EXFM_SIZE("stream.interaction_rank", stream.interaction_rank),
      EXFM_DOUBLE("stream.interaction_scale", stream.interaction_scale),
      EXFM_SIZE("stream.examples_per_day", stream.examples_per_day),
      EXFM_SIZE("stream.num_days", stream.num_days),

      {"models.fm_hidden",
       {[](ExperimentConfig& c, const std::string& v) { c.fm_hidden = to_sizes(v); },
        [](const ExperimentConfig& c) { return join<std::size_t>(c.fm_hidden, size_str); }}},
      EXFM_DOUBLE("models.fm_lr", fm_lr),
      EXFM_SIZE("models.fm_batch", fm_batch),
      {"models.vm_backbone",
       {[](ExperimentConfig& c, const std::string& v) { c.vm.backbone_widths = to_sizes(v); },
        [](const ExperimentConfig& c) {
          return join<std::size_t>(c.vm.backbone_widths, size_str);
        }}},
      {"models.vm_head_hidden",
       {[](ExperimentConfig& c, const std::string& v) { c.vm.head_hidden = to_sizes(v); },
        [](const ExperimentConfig& c) { return join<std::size_t>(c.vm.head_hidden, size_str); }}},
      EXFM_SIZE("models.sa_hidden", sa_hidden),
      EXFM_DOUBLE("models.capacity_ratio", capacity_ratio),

      {"distill.modes",
       {[](ExperimentConfig& c, const std::string& v) {
          c.modes.clear();
          for (const auto& s : split_list(v)) c.modes.push_back(to_mode(s));
        },
        [](const ExperimentConfig& c) { return join<distill::DistillMode>(c.modes, mode_str); }}},
      EXFM_DOUBLE("distill.w", ah.loss_weight),
      EXFM_DOUBLE("distill.alpha", ah.label_scale),
      EXFM_DOUBLE("distill.beta", ah.grad_scale),
      EXFM_DOUBLE("distill.lr", train.lr),
      EXFM_DOUBLE("distill.sa_lr", train.sa_lr),
      EXFM_SIZE("distill.sa_warmup", train.sa_warmup),
      EXFM_SIZE("distill.batch_size", vm_batch),

      {"das.enabled",
       {[](ExperimentConfig& c, const std::string& v) { c.das_enabled = to_bool(v); },
        [](const ExperimentConfig& c) { return std::string(c.das_enabled ? "true" : "false"); }}},
      EXFM_SIZE("das.num_tasks", service.num_tasks),
      EXFM_TIME("das.updater_period_ms", service.timing.updater_period),
      EXFM_TIME("das.loader_period_ms", service.timing.loader_period),
      EXFM_TIME("das.lease_ms", service.timing.lease_duration),
      EXFM_TIME("das.load_ms", service.timing.load_duration),
      EXFM_TIME("das.gc_period_ms", service.timing.gc_period),
      EXFM_TIME("das.window_ms", window.window_ms),
      EXFM_DOUBLE("das.feedback_mean_ms", window.feedback_mean_ms),
      EXFM_TIME("das.feedback_cap_ms", window.feedback_cap_ms),

      EXFM_SIZE("protocol.fm_days", fm_days),
      EXFM_SIZE("protocol.delay_days", delay_days),
      EXFM_SIZE("protocol.trace_every", trace_every),

      EXFM_SIZE("experiment.num_seeds", num_seeds),
      EXFM_SIZE("experiment.max_delay", max_delay),

      EXFM_DOUBLES("sweep.w", sweep_w),
      EXFM_DOUBLES("sweep.alpha", sweep_alpha),
      EXFM_DOUBLES("sweep.beta", sweep_beta),
      {"sweep.mode",
       {[](ExperimentConfig& c, const std::string& v) { c.sweep_mode = to_mode(v); },
        [](const ExperimentConfig& c) { return mode_str(c.sweep_mode); }}},

      {"seeds.data",
       {[](ExperimentConfig& c, const std::string& v) { c.seeds.data = to_u64(v); },
        [](const ExperimentConfig& c) { return std::to_string(c.seeds.data); }}},
      {"seeds.init",
       {[](ExperimentConfig& c, const std::string& v) { c.seeds.init = to_u64(v); },
        [](const ExperimentConfig& c) { return std::to_string(c.seeds.init); }}},
      {"seeds.das",
       {[](ExperimentConfig& c, const std::string& v) { c.seeds.das = to_u64(v); },
        [](const ExperimentConfig& c) { return std::to_string(c.seeds.das); }}},

      {"output.dir",
       {[](ExperimentConfig& c, const std::string& v) { c.out_dir = v; },
        [](const ExperimentConfig& c) { return c.out_dir; }}},
  };
  return table;
}

#undef EXFM_DOUBLE
#undef EXFM_SIZE
#undef EXFM_TIME
#undef EXFM_DOUBLES

}  // namespace

void ExperimentConfig::validate() const {
  stream.validate();
  if (fm_hidden.empty()) fail("models.fm_hidden must list at least one width");
  for (auto w : fm_hidden) {
    if (w == 0) fail("models.fm_hidden widths must be > 0");
  }
  if (vm.backbone_widths.empty()) fail("models.vm_backbone must list at least one width");
  if (fm_batch == 0 || vm_batch == 0) fail("batch sizes must be > 0");
  if (sa_hidden == 0) fail("models.sa_hidden must be > 0");
  if (!(fm_lr > 0.0)) fail("models.fm_lr must be > 0");
  if (!(capacity_ratio >= 1.0)) fail("models.capacity_ratio must be >= 1");
  if (modes.empty()) fail("distill.modes must not be empty");
  if (!(train.lr > 0.0) || !(train.sa_lr > 0.0)) fail("distill learning rates must be > 0");
  try {
    ah.validate();
  } catch (const Error& e) {
    fail(e.what());
  }
  service.timing.validate();
  window.validate();
  if (service.num_tasks == 0) fail("das.num_tasks must be > 0");
  if (fm_days == 0 || fm_days + 2 > stream.num_days) {
    fail("protocol.fm_days must be >= 1 and leave at least two student days");
  }
  if (trace_every == 0) fail("protocol.trace_every must be > 0");
  if (num_seeds == 0) fail("experiment.num_seeds must be > 0");
  if (max_delay == 0) fail("experiment.max_delay must be >= 1");
  if (out_dir.empty()) fail("output.dir must not be empty");
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::string section;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string text = trim(line);
    if (text.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (text.front() == '[') {
      if (text.back() != ']') fail(where + "unterminated section header");
      section = trim(std::string_view(text).substr(1, text.size() - 2));
      continue;
    }
    const auto eq = text.find('=');
    if (eq == std::string::npos) fail(where + "expected key = value");
    std::string key = trim(std::string_view(text).substr(0, eq));
    const std::string value = trim(std::string_view(text).substr(eq + 1));
    if (!section.empty()) key = section + "." + key;
    const auto it = fields().find(key);
    if (it == fields().end()) fail(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) fail(where + "duplicate key '" + key + "'");
    try {
      it->second.set(cfg, value);
    } catch (const Error& e) {
      fail(where + key + ": " + e.what());
    }
  }
  for (const char* k : {"seeds.data", "seeds.init", "seeds.das"}) {
    if (!seen.count(k)) fail(std::string("missing required key '") + k + "'");
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open config '" + path + "'");
  return parse_config(in);
}

void write_config(std::ostream& out, const ExperimentConfig& cfg) {
  for (const auto& [key, field] : fields()) out << key << " = " << field.get(cfg) << '\n';
}

}  // namespace exfm::config
