#include "hiermem/commands.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>

#include "hiermem/error.hpp"
#include "hiermem/gradcheck_suite.hpp"

namespace fs = std::filesystem;

namespace hiermem {

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string list(const std::vector<double>& xs) {
  if (xs.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + num(xs[i]);
  return out;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

fs::path with_suffix(const fs::path& stem, const std::string& s) { return fs::path(stem.string() + s); }

void check_image_shape(const Dataset& d, const BackboneConfig& b, const std::string& what) {
  const auto& s = d.images.shape();
  if (s.size() != 4 || s[1] != b.in_channels || s[2] != b.height || s[3] != b.width) {
    throw ShapeError(what + " images are " + to_string(s) + " but the backbone expects (" +
                     std::to_string(b.in_channels) + ", " + std::to_string(b.height) + ", " +
                     std::to_string(b.width) + ")");
  }
}

void write_log_header(std::ostream& out) {
  out << "# hiermem training log\n"
         "# columns: episode total nll kl_weight accuracy running_accuracy kl_prototype kl_memory alpha\n"
         "# list columns hold one comma-separated value per chain level, '-' when empty\n";
}

void write_log_line(std::ostream& out, const TrainRecord& r) {
  out << r.episode << ' ' << num(r.total) << ' ' << num(r.nll) << ' ' << num(r.kl_weight) << ' '
      << num(r.accuracy) << ' ' << num(r.running_accuracy) << ' ' << list(r.kl_prototype) << ' '
      << list(r.kl_memory) << ' ' << list(r.alpha) << '\n';
}

void save_run_state(Model& model, const HierarchicalMemory& memory, const fs::path& stem) {
  save_checkpoint(stem, model.parameters());
  memory.save(with_suffix(stem, ".memory"));
}

}  // namespace

DomainData load_domains(const RunConfig& cfg) {
  DomainData d;
  if (!cfg.data_root.empty()) {
    d.train = load_folders(fs::path(cfg.data_root) / "train");
    d.test = load_folders(fs::path(cfg.data_root) / "test");
  } else {
    SyntheticData s = make_synthetic(cfg.data);
    d.train = std::move(s.train);
    d.test = std::move(s.test);
  }
  return d;
}

TrainResult run_train(const RunConfig& cfg, const fs::path& dir, std::ostream* progress) {
  fs::create_directories(dir);
  write_run_config(dir / "config.txt", cfg);
  const DomainData data = load_domains(cfg);
  check_image_shape(data.train, cfg.model.backbone, "training");

  Model model(cfg.model, cfg.train.seed);
  HierarchicalMemory memory(cfg.model.backbone.embed_dims);
  std::ofstream log = open_out(dir / "train.log");
  write_log_header(log);
  const std::size_t every = cfg.train.log_every;
  TrainResult r = meta_train(cfg.train, data.train, model, memory, [&](const TrainRecord& rec) {
    write_log_line(log, rec);
    if (progress && every > 0 && (rec.episode + 1) % every == 0) {
      *progress << "episode " << rec.episode + 1 << " loss " << num(rec.total) << " running_acc "
                << num(rec.running_accuracy) << '\n';
    }
    if (cfg.checkpoint_every > 0 && (rec.episode + 1) % cfg.checkpoint_every == 0) {
      save_run_state(model, memory, dir / ("ckpt_" + std::to_string(rec.episode + 1)));
    }
  });
  if (r.diverged) log << "# diverged at episode " << r.diverged_at << ": " << r.divergence << '\n';
  if (!log) throw IoError("write failed: " + (dir / "train.log").string());
  save_run_state(model, memory, dir / "model");
  return r;
}

void write_metrics(const fs::path& path, const EvalResult& r, const RunConfig& cfg) {
  std::ofstream out = open_out(path);
  out << "# hiermem metrics\n"
         "# objective <name>\n"
         "# tasks <n> way <N> shot <K> queries <Q>\n"
         "# summary <combine> <mean accuracy> <ci95 = 1.96 sd / sqrt(tasks)>\n"
         "# alpha <level> <mean level weight over tasks>\n"
         "# task <index> <accuracy weighted> <accuracy bagging> <alpha per level, comma separated or ->\n";
  out << "objective " << objective_name(cfg.train.objective) << '\n';
  out << "tasks " << cfg.eval.tasks << " way " << cfg.eval.way << " shot " << cfg.eval.shot << " queries "
      << cfg.eval.queries << '\n';
  out << "summary weighted " << num(r.weighted.mean) << ' ' << num(r.weighted.ci95) << '\n';
  out << "summary bagging " << num(r.bagging.mean) << ' ' << num(r.bagging.ci95) << '\n';
  for (std::size_t l = 0; l < r.mean_alpha.size(); ++l) out << "alpha " << l << ' ' << num(r.mean_alpha[l]) << '\n';
  for (const auto& t : r.records) {
    out << "task " << t.task << ' ' << num(t.acc_weighted) << ' ' << num(t.acc_bagging) << ' ' << list(t.alpha)
        << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void write_prototypes(const fs::path& path, const std::vector<PrototypeExport>& exports) {
  std::ofstream out = open_out(path);
  out << "# hiermem prototype samples of the last evaluated task\n"
         "# columns: level sample label class z_0 ... z_{D-1}\n";
  for (const auto& e : exports) {
    const std::size_t n = e.classes.size();
    const std::size_t rows = e.samples.shape()[0], d = e.samples.shape()[1];
    for (std::size_t r = 0; r < rows; ++r) {
      out << e.level << ' ' << r / n << ' ' << r % n << ' ' << e.classes[r % n];
      for (std::size_t j = 0; j < d; ++j) out << ' ' << num(e.samples.data()[r * d + j]);
      out << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
}

EvalResult run_eval(const RunConfig& cfg, const fs::path& checkpoint_stem, const fs::path& out) {
  Model model(cfg.model, cfg.train.seed);
  load_checkpoint(checkpoint_stem, model.parameters());
  const HierarchicalMemory memory = HierarchicalMemory::load(with_suffix(checkpoint_stem, ".memory"));
  if (memory.dims() != cfg.model.backbone.embed_dims) {
    throw ShapeError("memory in " + checkpoint_stem.string() + " does not match backbone.embed_dims");
  }
  const DomainData data = load_domains(cfg);
  check_image_shape(data.test, cfg.model.backbone, "test");

  const auto features = cache_features(model, data.test, levels_needed(cfg.train.objective, model.levels()));
  EvalResult r = evaluate_predictor(data.test, cfg.eval, model_predictor(model, memory, cfg.train, features, cfg.eval.seed));
  fs::create_directories(out);
  write_metrics(out / "metrics.txt", r, cfg);
  const Episode last = eval_episode(data.test, cfg.eval, cfg.eval.tasks - 1);
  write_prototypes(out / "prototypes.txt", export_prototypes(model, memory, cfg.train, features, last, cfg.eval.seed));
  return r;
}

RunConfig cell_config(const RunConfig& cfg, std::uint64_t seed, Objective o, double shift) {
  RunConfig c = cfg;
  c.train.seed = seed;
  c.data.seed = seed;
  c.eval.seed = seed;
  c.train.objective = o;
  c.data.shift = shift;
  return c;
}

std::vector<AblationCell> run_ablate(const RunConfig& cfg, const fs::path& dir, std::ostream* progress) {
  if (!cfg.data_root.empty()) throw ConfigError("data.root", "ablation needs the synthetic generator");
  fs::create_directories(dir);
  write_run_config(dir / "config.txt", cfg);
  std::vector<AblationCell> cells;
  for (std::uint64_t seed : cfg.seeds) {
    for (Objective o : cfg.objectives) {
      const fs::path run = dir / ("seed" + std::to_string(seed) + "_" + objective_name(o));
      const RunConfig train_cfg = cell_config(cfg, seed, o, cfg.shifts.front());
      const TrainResult tr = run_train(train_cfg, run);
      if (tr.diverged) {
        throw NumericError(std::string(objective_name(o)) + " diverged at episode " + std::to_string(tr.diverged_at) +
                           " with seed " + std::to_string(seed));
      }
      for (double shift : cfg.shifts) {
        const RunConfig c = cell_config(cfg, seed, o, shift);
        const fs::path out = run / ("shift_" + num(shift));
        fs::create_directories(out);
        write_run_config(out / "config.txt", c);
        AblationCell cell{seed, shift, o, run_eval(c, run / "model", out)};
        if (progress) {
          *progress << "seed " << seed << " shift " << num(shift) << ' ' << objective_name(o) << " weighted "
                    << num(cell.result.weighted.mean) << " bagging " << num(cell.result.bagging.mean) << '\n';
        }
        cells.push_back(std::move(cell));
      }
    }
  }

  std::ofstream out = open_out(dir / "ablate.txt");
  out << "# hiermem ablation table\n"
         "# cell <seed> <shift> <objective> <combine> <mean accuracy> <ci95> <mean alpha per level or ->\n"
         "# avg <shift> <objective> <combine> <mean over seeds of the cell means>\n";
  for (const auto& c : cells) {
    const std::string a = list(c.result.mean_alpha);
    out << "cell " << c.seed << ' ' << num(c.shift) << ' ' << objective_name(c.objective) << " weighted "
        << num(c.result.weighted.mean) << ' ' << num(c.result.weighted.ci95) << ' ' << a << '\n';
    out << "cell " << c.seed << ' ' << num(c.shift) << ' ' << objective_name(c.objective) << " bagging "
        << num(c.result.bagging.mean) << ' ' << num(c.result.bagging.ci95) << ' ' << a << '\n';
  }
  for (double shift : cfg.shifts) {
    for (Objective o : cfg.objectives) {
      double w = 0, b = 0;
      for (const auto& c : cells) {
        if (c.shift == shift && c.objective == o) w += c.result.weighted.mean, b += c.result.bagging.mean;
      }
      const double n = static_cast<double>(cfg.seeds.size());
      out << "avg " << num(shift) << ' ' << objective_name(o) << " weighted " << num(w / n) << '\n';
      out << "avg " << num(shift) << ' ' << objective_name(o) << " bagging " << num(b / n) << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + (dir / "ablate.txt").string());
  return cells;
}

bool run_gradcheck(std::ostream& out) {
  const SuiteOutcome s = run_gradcheck_suite(gradcheck_suite(), [&](const std::string& group, const GradCheckReport& r) {
    char line[200];
    std::snprintf(line, sizeof line, "%-5s %-10s %-28s max_rel_error %.3e tol %.0e checked %zu\n",
                  r.passed() && r.checked > 0 ? "ok" : "FAIL", group.c_str(), r.name.c_str(), r.max_rel_error, r.tol,
                  r.checked);
    out << line;
  });
  out << (s.passed ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return s.passed;
}

}  // namespace hiermem
