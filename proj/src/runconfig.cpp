#include "hiermem/runconfig.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "hiermem/error.hpp"

namespace hiermem {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError(key, "expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  }
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError(key, "integer out of range: '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& key, const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError(key, "empty list item in '" + v + "'");
    out.push_back(item);
  }
  if (out.empty()) throw ConfigError(key, "empty list");
  return out;
}

template <class T, class F>
std::vector<T> list_of(const std::string& key, const std::string& v, F parse) {
  std::vector<T> out;
  for (const auto& s : split_list(key, v)) out.push_back(parse(key, s));
  return out;
}

template <class T, class F>
std::string join(const std::vector<T>& xs, F show) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + show(xs[i]);
  return out;
}

std::string uint_str(std::uint64_t v) { return std::to_string(v); }

Objective objective_of(const std::string& key, const std::string& v) {
  try {
    return parse_objective(v);
  } catch (const ConfigError& e) {
    throw ConfigError(key, "unknown objective '" + v + "'");
  }
}

ConfigError prefixed(const std::string& section, const ConfigError& e) {
  std::string what = e.what();
  if (!e.key().empty() && what.rfind(e.key() + ": ", 0) == 0) what = what.substr(e.key().size() + 2);
  return ConfigError(e.key().empty() ? section : section + "." + e.key(), what);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& v) {
  const auto dot = key.find('.');
  if (dot == std::string::npos) throw ConfigError(key, "unknown key");
  const std::string section = key.substr(0, dot), f = key.substr(dot + 1);
  auto unknown = [&] { return ConfigError(key, "unknown key"); };

  if (section == "train") {
    TrainConfig& t = train;
    if (f == "objective") t.objective = objective_of(key, v);
    else if (f == "lz") t.lz = to_uint(key, v);
    else if (f == "lr") t.lr = to_double(key, v);
    else if (f == "momentum") t.momentum = to_double(key, v);
    else if (f == "clip_norm") t.clip_norm = to_double(key, v);
    else if (f == "episodes") t.episodes = to_uint(key, v);
    else if (f == "way") t.way = to_uint(key, v);
    else if (f == "shot") t.shot = to_uint(key, v);
    else if (f == "queries") t.queries = to_uint(key, v);
    else if (f == "seed") t.seed = to_uint(key, v);
    else if (f == "beta") t.beta = to_double(key, v);
    else if (f == "tau") t.tau = to_double(key, v);
    else if (f == "kl_weight") t.kl_weight = to_double(key, v);
    else if (f == "kl_warmup") t.kl_warmup = to_double(key, v);
    else if (f == "mc_memory_kl") t.mc_memory_kl = to_bool(key, v);
    else if (f == "mc_samples") t.mc_samples = to_uint(key, v);
    else if (f == "mask_own_classes") t.mask_own_classes = to_bool(key, v);
    else if (f == "hyper_lr") t.hyper_lr = to_double(key, v);
    else if (f == "log_every") t.log_every = to_uint(key, v);
    else throw unknown();
  } else if (section == "backbone") {
    BackboneConfig& b = model.backbone;
    if (f == "levels") b.levels = to_uint(key, v);
    else if (f == "channels") b.channels = list_of<std::size_t>(key, v, to_uint);
    else if (f == "in_channels") b.in_channels = to_uint(key, v);
    else if (f == "height") b.height = to_uint(key, v), height_set = true;
    else if (f == "width") b.width = to_uint(key, v), width_set = true;
    else if (f == "embed_dims") b.embed_dims = list_of<std::size_t>(key, v, to_uint);
    else if (f == "head_hidden") b.head_hidden = to_uint(key, v);
    else throw unknown();
  } else if (section == "model") {
    if (f == "infer_hidden") model.infer_hidden = to_uint(key, v);
    else if (f == "hyper_hidden") model.hyper_hidden = to_uint(key, v);
    else if (f == "init_raw_var") model.init_raw_var = to_double(key, v);
    else throw unknown();
  } else if (section == "data") {
    if (f == "root") data_root = v;
    else if (!set_spec_value(data, f, v)) throw unknown();
  } else if (section == "eval") {
    if (f == "tasks") eval.tasks = to_uint(key, v);
    else if (f == "way") eval.way = to_uint(key, v);
    else if (f == "shot") eval.shot = to_uint(key, v);
    else if (f == "queries") eval.queries = to_uint(key, v);
    else if (f == "seed") eval.seed = to_uint(key, v);
    else if (f == "threads") eval.threads = to_uint(key, v);
    else throw unknown();
  } else if (section == "ablate") {
    if (f == "shifts") shifts = list_of<double>(key, v, to_double);
    else if (f == "objectives") objectives = list_of<Objective>(key, v, objective_of);
    else if (f == "seeds") seeds = list_of<std::uint64_t>(key, v, to_uint);
    else throw unknown();
  } else if (section == "run") {
    if (f == "checkpoint_every") checkpoint_every = to_uint(key, v);
    else throw unknown();
  } else {
    throw unknown();
  }
}

RunConfig::RunConfig() {
  data.image_size = 16;
  data.phase_jitter = 0.0;
  data.texture_amplitude = 0.5;
  data.noise = 0.5;
  model.backbone.channels = {4, 8, 8};
  model.backbone.embed_dims = {16, 16, 16};
  model.backbone.height = model.backbone.width = 16;
}

void RunConfig::resolve() {
  if (data_root.empty()) {
    if (!height_set) model.backbone.height = data.image_size;
    if (!width_set) model.backbone.width = data.image_size;
    height_set = width_set = true;
  }
  try {
    train.validate();
  } catch (const ConfigError& e) {
    throw prefixed("train", e);
  }
  try {
    model.backbone.validate();
  } catch (const ConfigError& e) {
    throw prefixed("backbone", e);
  }
  if (model.infer_hidden == 0) throw ConfigError("model.infer_hidden", "must be positive");
  if (model.hyper_hidden == 0) throw ConfigError("model.hyper_hidden", "must be positive");
  try {
    data.validate();
  } catch (const ConfigError& e) {
    throw prefixed("data", e);
  }
  if (eval.tasks < 2) throw ConfigError("eval.tasks", "at least 2 tasks are needed for a confidence interval");
  if (eval.way < 2) throw ConfigError("eval.way", "must be at least 2");
  if (eval.shot == 0) throw ConfigError("eval.shot", "must be positive");
  if (eval.queries == 0) throw ConfigError("eval.queries", "must be positive");
  for (double s : shifts) {
    if (!(s >= 0.0 && s <= 1.0)) throw ConfigError("ablate.shifts", "shift " + num(s) + " outside [0, 1]");
  }
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> e;
  const TrainConfig& t = train;
  e.emplace_back("train.objective", objective_name(t.objective));
  e.emplace_back("train.lz", uint_str(t.lz));
  e.emplace_back("train.lr", num(t.lr));
  e.emplace_back("train.momentum", num(t.momentum));
  e.emplace_back("train.clip_norm", num(t.clip_norm));
  e.emplace_back("train.episodes", uint_str(t.episodes));
  e.emplace_back("train.way", uint_str(t.way));
  e.emplace_back("train.shot", uint_str(t.shot));
  e.emplace_back("train.queries", uint_str(t.queries));
  e.emplace_back("train.seed", uint_str(t.seed));
  e.emplace_back("train.beta", num(t.beta));
  e.emplace_back("train.tau", num(t.tau));
  e.emplace_back("train.kl_weight", num(t.kl_weight));
  e.emplace_back("train.kl_warmup", num(t.kl_warmup));
  e.emplace_back("train.mc_memory_kl", t.mc_memory_kl ? "true" : "false");
  e.emplace_back("train.mc_samples", uint_str(t.mc_samples));
  e.emplace_back("train.mask_own_classes", t.mask_own_classes ? "true" : "false");
  e.emplace_back("train.hyper_lr", num(t.hyper_lr));
  e.emplace_back("train.log_every", uint_str(t.log_every));
  const BackboneConfig& b = model.backbone;
  e.emplace_back("backbone.levels", uint_str(b.levels));
  e.emplace_back("backbone.channels", join(b.channels, uint_str));
  e.emplace_back("backbone.in_channels", uint_str(b.in_channels));
  e.emplace_back("backbone.height", uint_str(b.height));
  e.emplace_back("backbone.width", uint_str(b.width));
  e.emplace_back("backbone.embed_dims", join(b.embed_dims, uint_str));
  e.emplace_back("backbone.head_hidden", uint_str(b.head_hidden));
  e.emplace_back("model.infer_hidden", uint_str(model.infer_hidden));
  e.emplace_back("model.hyper_hidden", uint_str(model.hyper_hidden));
  e.emplace_back("model.init_raw_var", num(model.init_raw_var));
  if (!data_root.empty()) e.emplace_back("data.root", data_root);
  for (const auto& [k, v] : spec_entries(data)) e.emplace_back("data." + k, v);
  e.emplace_back("eval.tasks", uint_str(eval.tasks));
  e.emplace_back("eval.way", uint_str(eval.way));
  e.emplace_back("eval.shot", uint_str(eval.shot));
  e.emplace_back("eval.queries", uint_str(eval.queries));
  e.emplace_back("eval.seed", uint_str(eval.seed));
  e.emplace_back("eval.threads", uint_str(eval.threads));
  e.emplace_back("ablate.shifts", join(shifts, num));
  e.emplace_back("ablate.objectives", join(objectives, [](Objective o) { return std::string(objective_name(o)); }));
  e.emplace_back("ablate.seeds", join(seeds, uint_str));
  e.emplace_back("run.checkpoint_every", uint_str(checkpoint_every));
  return e;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line, "expected key = value");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError(o, "override must be key=value");
    cfg.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
  cfg.resolve();
}

void write_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# resolved run config; replay with: hiermem train --config <this file>\n";
  for (const auto& [k, v] : cfg.entries()) out << k << " = " << v << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace hiermem
