#include "sslkit/config.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace sslkit::config {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

std::string fmt_dims(const std::vector<int64_t>& dims) {
  std::string out;
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(dims[i]);
  }
  return out;
}

[[noreturn]] void bad(const std::string& key, const std::string& constraint) {
  throw ConfigError("config: key '" + key + "' " + constraint);
}

int64_t to_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    bad(key, "expects an integer, got '" + v + "'");
  return out;
}

uint64_t to_u64(const std::string& key, const std::string& v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    bad(key, "expects a non-negative integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    bad(key, "expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  bad(key, "expects a boolean (0/1/true/false), got '" + v + "'");
}

std::vector<int64_t> to_dims(const std::string& key, const std::string& v) {
  std::vector<int64_t> dims;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ','))
    dims.push_back(to_int(key, trim(part)));
  if (dims.size() < 2) bad(key, "expects at least two comma-separated sizes");
  return dims;
}

}  // namespace

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

RunConfig from_kv(const std::map<std::string, std::string>& kv) {
  std::string method_name = "simclr";
  if (auto it = kv.find("method"); it != kv.end()) method_name = it->second;
  const auto& names = methods::method_names();
  if (std::find(names.begin(), names.end(), method_name) == names.end()) {
    std::string msg = "unknown method '" + method_name + "'; valid names:";
    for (const auto& n : names) msg += " " + n;
    throw ConfigError(msg);
  }

  RunConfig cfg;
  cfg.method = methods::MethodConfig::defaults(method_name);
  for (const auto& [key, v] : kv) {
    auto& m = cfg.method;
    if (key == "method") continue;  // handled above
    else if (key == "projector") m.projector = to_dims(key, v);
    else if (key == "predictor") m.predictor = to_dims(key, v);
    else if (key == "tau") m.tau = to_double(key, v);
    else if (key == "tau_teacher") m.tau_teacher = to_double(key, v);
    else if (key == "queue_size") m.queue_size = to_int(key, v);
    else if (key == "momentum_base") m.momentum_base = to_double(key, v);
    else if (key == "momentum_scheduled") m.momentum_scheduled = to_bool(key, v);
    else if (key == "prototypes") m.prototypes = to_int(key, v);
    else if (key == "barlow_lambda") m.barlow_lambda = to_double(key, v);
    else if (key == "vicreg_sim") m.vicreg_sim = to_double(key, v);
    else if (key == "vicreg_var") m.vicreg_var = to_double(key, v);
    else if (key == "vicreg_cov") m.vicreg_cov = to_double(key, v);
    else if (key == "swav_eps") m.swav_eps = to_double(key, v);
    else if (key == "swav_iters") m.swav_iters = static_cast<int>(to_int(key, v));
    else if (key == "wmse_sub_batch") m.wmse_sub_batch = to_int(key, v);
    else if (key == "center_momentum") m.center_momentum = to_double(key, v);
    else if (key == "kmeans_iters") m.kmeans_iters = static_cast<int>(to_int(key, v));
    else if (key == "dataset") cfg.dataset = v;
    else if (key == "data_path") cfg.data_path = v;
    else if (key == "checkpoint") cfg.checkpoint = v;
    else if (key == "out") cfg.out = v;
    else if (key == "epochs") cfg.epochs = to_int(key, v);
    else if (key == "batch_size") cfg.batch_size = to_int(key, v);
    else if (key == "workers") cfg.workers = to_int(key, v);
    else if (key == "buffer") cfg.buffer = to_int(key, v);
    else if (key == "lr") cfg.lr = to_double(key, v);
    else if (key == "weight_decay") cfg.weight_decay = to_double(key, v);
    else if (key == "warmup_steps") cfg.warmup_steps = to_int(key, v);
    else if (key == "probe_lr") cfg.probe_lr = to_double(key, v);
    else if (key == "seed") cfg.seed = to_u64(key, v);
    else if (key == "synth_classes") cfg.synth_classes = to_int(key, v);
    else if (key == "synth_per_class") cfg.synth_per_class = to_int(key, v);
    else if (key == "synth_size") cfg.synth_size = to_int(key, v);
    else if (key == "synth_sigma") cfg.synth_sigma = to_double(key, v);
    else throw ConfigError("config: unknown key '" + key + "'");
  }

  if (cfg.dataset != "synth" && cfg.dataset != "cifar")
    bad("dataset", "must be 'synth' or 'cifar', got '" + cfg.dataset + "'");
  if (cfg.dataset == "cifar" && cfg.data_path.empty())
    bad("data_path", "is required for dataset=cifar");
  if (cfg.epochs < 0) bad("epochs", "must be >= 0");
  if (cfg.batch_size < 1) bad("batch_size", "must be >= 1");
  if (cfg.workers < 1) bad("workers", "must be >= 1");
  if (cfg.buffer < 1) bad("buffer", "must be >= 1");
  if (cfg.lr <= 0) bad("lr", "must be > 0");
  if (cfg.weight_decay < 0) bad("weight_decay", "must be >= 0");
  if (cfg.warmup_steps < 0) bad("warmup_steps", "must be >= 0");
  if (cfg.probe_lr <= 0) bad("probe_lr", "must be > 0");
  if (cfg.method.tau <= 0) bad("tau", "must be > 0");
  if (cfg.method.tau_teacher <= 0) bad("tau_teacher", "must be > 0");
  if (cfg.method.momentum_base < 0 || cfg.method.momentum_base > 1)
    bad("momentum_base", "must lie in [0,1]");
  if (cfg.method.center_momentum < 0 || cfg.method.center_momentum >= 1)
    bad("center_momentum", "must lie in [0,1)");
  if (cfg.synth_classes < 2) bad("synth_classes", "must be >= 2");
  if (cfg.synth_per_class < 1) bad("synth_per_class", "must be >= 1");
  if (cfg.synth_size < 16) bad("synth_size", "must be >= 16");
  if (cfg.synth_sigma < 0) bad("synth_sigma", "must be >= 0");

  // structural method checks; deepclusterv2's dataset_size is bound to the
  // dataset at dispatch time, so stand in a positive value here
  methods::MethodConfig probe = cfg.method;
  if (probe.name == "deepclusterv2" && probe.dataset_size == 0)
    probe.dataset_size = 1;
  try {
    probe.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

std::string serialize(const RunConfig& cfg) {
  std::map<std::string, std::string> kv;
  const auto& m = cfg.method;
  kv["method"] = m.name;
  kv["projector"] = fmt_dims(m.projector);
  kv["predictor"] = fmt_dims(m.predictor);
  kv["tau"] = fmt(m.tau);
  kv["tau_teacher"] = fmt(m.tau_teacher);
  kv["queue_size"] = std::to_string(m.queue_size);
  kv["momentum_base"] = fmt(m.momentum_base);
  kv["momentum_scheduled"] = m.momentum_scheduled ? "1" : "0";
  kv["prototypes"] = std::to_string(m.prototypes);
  kv["barlow_lambda"] = fmt(m.barlow_lambda);
  kv["vicreg_sim"] = fmt(m.vicreg_sim);
  kv["vicreg_var"] = fmt(m.vicreg_var);
  kv["vicreg_cov"] = fmt(m.vicreg_cov);
  kv["swav_eps"] = fmt(m.swav_eps);
  kv["swav_iters"] = std::to_string(m.swav_iters);
  kv["wmse_sub_batch"] = std::to_string(m.wmse_sub_batch);
  kv["center_momentum"] = fmt(m.center_momentum);
  kv["kmeans_iters"] = std::to_string(m.kmeans_iters);
  kv["dataset"] = cfg.dataset;
  kv["data_path"] = cfg.data_path;
  kv["checkpoint"] = cfg.checkpoint;
  kv["out"] = cfg.out;
  kv["epochs"] = std::to_string(cfg.epochs);
  kv["batch_size"] = std::to_string(cfg.batch_size);
  kv["workers"] = std::to_string(cfg.workers);
  kv["buffer"] = std::to_string(cfg.buffer);
  kv["lr"] = fmt(cfg.lr);
  kv["weight_decay"] = fmt(cfg.weight_decay);
  kv["warmup_steps"] = std::to_string(cfg.warmup_steps);
  kv["probe_lr"] = fmt(cfg.probe_lr);
  kv["seed"] = std::to_string(cfg.seed);
  kv["synth_classes"] = std::to_string(cfg.synth_classes);
  kv["synth_per_class"] = std::to_string(cfg.synth_per_class);
  kv["synth_size"] = std::to_string(cfg.synth_size);
  kv["synth_sigma"] = fmt(cfg.synth_sigma);

  std::string out;  // std::map iterates in sorted key order
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

bool RunConfig::operator==(const RunConfig& o) const {
  return serialize(*this) == serialize(o);
}

trainer::TrainConfig RunConfig::train_config() const {
  trainer::TrainConfig t;
  t.epochs = epochs;
  t.base_lr = lr;
  t.weight_decay = weight_decay;
  t.warmup_steps = warmup_steps;
  t.probe_lr = probe_lr;
  t.loader.batch = batch_size;
  t.loader.workers = static_cast<int>(workers);
  t.loader.depth = static_cast<int>(buffer);
  t.loader.seed = seed;
  t.out_dir = out;
  return t;
}

}  // namespace sslkit::config
