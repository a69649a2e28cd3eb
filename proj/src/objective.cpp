#include "hiermem/objective.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "hiermem/error.hpp"

namespace hiermem {

std::string objective_name(Objective o) {
  switch (o) {
    case Objective::kProto: return "proto";
    case Objective::kVp: return "vp";
    case Objective::kVsm: return "vsm";
    case Objective::kHvp: return "hvp";
    case Objective::kHvm: return "hvm";
  }
  return "?";
}

Objective parse_objective(const std::string& name) {
  for (auto o : {Objective::kProto, Objective::kVp, Objective::kVsm, Objective::kHvp, Objective::kHvm}) {
    if (objective_name(o) == name) return o;
  }
  throw ConfigError("objective", "unknown objective '" + name + "' (proto, vp, vsm, hvp, hvm)");
}

bool uses_memory(Objective o) { return o == Objective::kVsm || o == Objective::kHvm; }
bool is_hierarchical(Objective o) { return o == Objective::kHvp || o == Objective::kHvm; }

void TrainConfig::validate() const {
  if (lz < 1) throw ConfigError("lz", "must be at least 1");
  if (!(lr > 0.0)) throw ConfigError("lr", "must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum", "must lie in [0, 1)");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm", "must be non-negative");
  if (way < 2) throw ConfigError("way", "must be at least 2");
  if (shot < 1) throw ConfigError("shot", "must be at least 1");
  if (queries < 1) throw ConfigError("queries", "must be at least 1");
  if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("beta", "must lie in (0, 1]");
  if (!(tau > 0.0)) throw ConfigError("tau", "must be positive");
  if (!(kl_weight >= 0.0)) throw ConfigError("kl_weight", "must be non-negative");
  if (!(kl_warmup >= 0.0 && kl_warmup <= 1.0)) throw ConfigError("kl_warmup", "must lie in [0, 1]");
  if (mc_samples < 2) throw ConfigError("mc_samples", "must be at least 2");
  if (!(hyper_lr >= 0.0)) throw ConfigError("hyper_lr", "must be non-negative");
  if (log_every < 1) throw ConfigError("log_every", "must be at least 1");
}

double TrainConfig::kl_weight_at(std::size_t episode) const {
  const double ramp = kl_warmup * static_cast<double>(episodes);
  if (ramp <= 0.0) return kl_weight;
  return kl_weight * std::min(1.0, static_cast<double>(episode) / ramp);
}

ChainSpec chain_spec(Objective o, std::size_t levels, const TrainConfig& cfg) {
  ChainSpec s;
  s.samples = cfg.lz;
  s.tau = cfg.tau;
  s.mc_memory_kl = cfg.mc_memory_kl;
  s.mc_samples = cfg.mc_samples;
  s.memory = uses_memory(o);
  s.hierarchical = is_hierarchical(o);
  if (s.hierarchical) {
    for (std::size_t l = 0; l < levels; ++l) s.levels.push_back(l);
  } else {
    s.levels = {levels - 1};
  }
  return s;
}

std::vector<bool> levels_needed(Objective o, std::size_t levels) {
  std::vector<bool> w(levels, is_hierarchical(o));
  w[levels - 1] = true;
  return w;
}

namespace {

Tensor one_hot(const std::vector<int>& labels, std::size_t n) {
  Tensor t({labels.size(), n}, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) t.storage()[i * n + labels[i]] = 1.0;
  return t;
}

void require_queries(const ChainInputs& in) {
  if (in.query_labels.empty()) throw ValueError("episode has an empty query set");
}

}  // namespace

EpisodeLoss loss_proto(Graph& g, const Model& model, const ChainInputs& in) {
  require_queries(in);
  const std::size_t l = model.levels() - 1;
  Var cm = class_means(in.support.at(l), in.support_labels, in.n_classes);
  Var logits = -sq_distances(in.query.at(l), cm);
  EpisodeLoss out;
  out.total_var = cross_entropy(logits, g.constant(one_hot(in.query_labels, in.n_classes)));
  out.total = out.nll = out.total_var.item();
  return out;
}

EpisodeLoss chain_loss(Graph& g, const Model& model, const HierarchicalMemory* memory, const ChainInputs& in,
                       const ChainSpec& spec, const NoiseStream& noise, double kl_weight) {
  require_queries(in);
  EpisodeLoss out;
  out.steps = run_chain(g, model, memory, in, spec, noise);
  const double inv = 1.0 / static_cast<double>(out.steps.size());
  Var total;
  for (const auto& st : out.steps) {
    Var term = st.nll + scale(st.kl_prototype, kl_weight);
    if (st.memory_used) term = term + scale(st.kl_memory, kl_weight);
    term = scale(term, inv);
    total = total.graph ? total + term : term;
    out.nll += inv * st.nll.item();
    out.kl_prototype.push_back(inv * kl_weight * st.kl_prototype.item());
    out.kl_memory.push_back(st.memory_used ? inv * kl_weight * st.kl_memory.item() : 0.0);
  }
  out.total_var = total;
  out.total = total.item();
  (void)g;
  return out;
}

EpisodeLoss loss_vp(Graph& g, const Model& model, const ChainInputs& in, const TrainConfig& cfg,
                    const NoiseStream& noise, double kl_weight) {
  return chain_loss(g, model, nullptr, in, chain_spec(Objective::kVp, model.levels(), cfg), noise, kl_weight);
}

EpisodeLoss loss_vsm(Graph& g, const Model& model, const HierarchicalMemory& memory, const ChainInputs& in,
                     const TrainConfig& cfg, const NoiseStream& noise, double kl_weight) {
  return chain_loss(g, model, &memory, in, chain_spec(Objective::kVsm, model.levels(), cfg), noise, kl_weight);
}

EpisodeLoss loss_hvp(Graph& g, const Model& model, const ChainInputs& in, const TrainConfig& cfg,
                     const NoiseStream& noise, double kl_weight) {
  return chain_loss(g, model, nullptr, in, chain_spec(Objective::kHvp, model.levels(), cfg), noise, kl_weight);
}

EpisodeLoss loss_hvm(Graph& g, const Model& model, const HierarchicalMemory& memory, const ChainInputs& in,
                     const TrainConfig& cfg, const NoiseStream& noise, double kl_weight) {
  return chain_loss(g, model, &memory, in, chain_spec(Objective::kHvm, model.levels(), cfg), noise, kl_weight);
}

EpisodeLoss episode_loss(Objective o, Graph& g, const Model& model, const HierarchicalMemory* memory,
                         const ChainInputs& in, const TrainConfig& cfg, const NoiseStream& noise, double kl_weight) {
  if (o == Objective::kProto) return loss_proto(g, model, in);
  if (uses_memory(o) && !memory) throw ValueError(objective_name(o) + " needs a memory");
  return chain_loss(g, model, uses_memory(o) ? memory : nullptr, in, chain_spec(o, model.levels(), cfg), noise,
                    kl_weight);
}

ChainInputs episode_inputs(Graph& g, const Model& model, const Dataset& data, const Episode& ep,
                           const std::vector<bool>& wanted, bool with_query_labels) {
  std::vector<std::size_t> ids = ep.support_ids;
  ids.insert(ids.end(), ep.query_ids.begin(), ep.query_ids.end());
  LevelFeatures f = model.backbone.extract(g, g.constant(data.gather(ids)), wanted);
  ChainInputs in;
  in.n_classes = ep.way;
  in.support_labels = ep.support_labels;
  if (with_query_labels) in.query_labels = ep.query_labels;
  const std::size_t ns = ep.support_ids.size(), nq = ep.query_ids.size();
  in.support.resize(model.levels());
  in.query.resize(model.levels());
  for (std::size_t l = 0; l < model.levels(); ++l) {
    if (!f.has(l)) continue;
    in.support[l] = slice(f.levels[l], 0, 0, ns);
    in.query[l] = slice(f.levels[l], 0, ns, nq);
  }
  return in;
}

namespace {

std::vector<double> row_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<std::vector<double>> summaries_of(const ChainInputs& in, const std::vector<std::size_t>& levels) {
  std::vector<std::vector<double>> out;
  for (auto l : levels) {
    out.push_back(support_gradient_summary(in.support[l].value(), in.support_labels, in.n_classes).summary);
  }
  return out;
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& labels) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

bool all_finite(const ParamList& ps, bool grads) {
  for (const auto& p : ps) {
    if (grads) {
      if (!p.tensor->has_grad()) continue;
      for (double v : std::as_const(*p.tensor).grad()) {
        if (!std::isfinite(v)) return false;
      }
    } else if (!p.tensor->all_finite()) {
      return false;
    }
  }
  return true;
}

std::uint64_t train_stream(std::uint64_t seed) { return seed * 0x9e3779b97f4a7c15ULL + 0x5851f42d4c957f2dULL; }

}  // namespace

TrainResult meta_train(const TrainConfig& cfg, const Dataset& data, Model& model, HierarchicalMemory& memory,
                       const std::function<void(const TrainRecord&)>& on_episode) {
  cfg.validate();
  if (memory.levels() != model.levels()) throw ValueError("memory depth differs from model depth");
  TrainResult result;
  std::mt19937_64 rng(train_stream(cfg.seed));
  ParamList params = model.backbone_and_inference_parameters();
  ParamList hyper_params = model.hyper_parameters();
  SgdMomentum opt(cfg.lr, cfg.momentum);
  SgdMomentum hyper_opt(cfg.hyper_lr, cfg.momentum);
  const auto wanted = levels_needed(cfg.objective, model.levels());
  const ChainSpec spec = chain_spec(cfg.objective, model.levels(), cfg);
  const bool weighted = is_hierarchical(cfg.objective) && model.levels() > 1;
  std::vector<double> window;

  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    const Episode ep = sample_episode(data, cfg.way, cfg.shot, cfg.queries, rng, e);
    const double kw = cfg.kl_weight_at(e);
    std::vector<Tensor> snapshot;
    for (const auto& p : params) snapshot.push_back(*p.tensor);

    TrainRecord rec;
    rec.episode = e;
    rec.kl_weight = kw;
    std::vector<Tensor> level_logits;
    std::vector<std::vector<double>> summaries;
    try {
      Graph g;
      ChainInputs in = episode_inputs(g, model, data, ep, wanted);
      if (cfg.mask_own_classes) in.recall_excluded = ep.classes;
      const NoiseStream noise(cfg.seed, e);
      EpisodeLoss loss = episode_loss(cfg.objective, g, model, &memory, in, cfg, noise, kw);
      if (!std::isfinite(loss.total)) throw NumericError("loss is not finite");
      g.backward(loss.total_var);
      if (!all_finite(params, true)) throw NumericError("gradient is not finite");
      opt.step(params, cfg.clip_norm);
      if (!all_finite(params, false)) throw NumericError("parameters left the finite range");
      rec.total = loss.total;
      rec.nll = loss.nll;
      rec.kl_prototype = loss.kl_prototype;
      rec.kl_memory = loss.kl_memory;
      if (cfg.objective == Objective::kProto) {
        const std::size_t l = model.levels() - 1;
        Graph h;
        Var cm = class_means(h.constant(in.support[l].value()), in.support_labels, in.n_classes);
        level_logits.push_back((-sq_distances(h.constant(in.query[l].value()), cm)).value());
      } else {
        for (const auto& st : loss.steps) level_logits.push_back(st.log_probs.value());
      }
      if (weighted) summaries = summaries_of(in, spec.levels);
      // Memory writes use the features of the forward pass above.
      if (uses_memory(cfg.objective)) {
        std::vector<const Tensor*> feats(model.levels(), nullptr);
        for (auto l : spec.levels) feats[l] = &in.support[l].value();
        memory.update(feats, ep.support_classes(), cfg.beta);
      }
    } catch (const NumericError& err) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        *params[i].tensor = snapshot[i];
        params[i].tensor->clear_grad();
      }
      result.diverged = true;
      result.diverged_at = e;
      result.divergence = err.what();
      return result;
    }

    std::vector<int> pred;
    if (weighted) {
      Graph h;
      std::vector<Var> sv;
      for (const auto& s : summaries) sv.push_back(h.constant(Tensor({1, s.size()}, s)));
      Var alpha = level_weights(h, model.hyper, sv);
      rec.alpha = row_vector(alpha.value());
      pred = argmax_rows(combine_weighted(level_logits, rec.alpha));
      if (cfg.hyper_lr > 0.0) {
        Var combined;
        for (std::size_t l = 0; l < level_logits.size(); ++l) {
          Var term = slice(alpha, 0, l, 1) * h.constant(level_logits[l]);
          combined = combined.graph ? combined + term : term;
        }
        h.backward(cross_entropy(combined, h.constant(one_hot(ep.query_labels, ep.way))));
        hyper_opt.step(hyper_params, cfg.clip_norm);
      }
    } else {
      rec.alpha = {1.0};
      pred = argmax_rows(level_logits.back());
    }
    rec.accuracy = accuracy(pred, ep.query_labels);
    window.push_back(rec.accuracy);
    if (window.size() > cfg.log_every) window.erase(window.begin());
    double s = 0;
    for (double a : window) s += a;
    rec.running_accuracy = s / static_cast<double>(window.size());
    result.log.push_back(rec);
    if (on_episode) on_episode(rec);
  }
  return result;
}

// Evaluation ---------------------------------------------------------------------

Summary mean_ci95(const std::vector<double>& xs) {
  if (xs.size() < 2) throw ValueError("confidence interval needs at least 2 tasks");
  double m = 0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double ss = 0;
  for (double x : xs) ss += (x - m) * (x - m);
  const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return {m, 1.96 * sd / std::sqrt(static_cast<double>(xs.size()))};
}

Episode eval_episode(const Dataset& data, const EvalConfig& cfg, std::size_t task) {
  std::mt19937_64 rng(train_stream(cfg.seed ^ 0xa5a5a5a5ULL) + 0x9e3779b97f4a7c15ULL * (task + 1));
  return sample_episode(data, cfg.way, cfg.shot, cfg.queries, rng, task);
}

std::size_t eval_threads(const EvalConfig& cfg) {
  std::size_t cap = 0;
  if (const char* env = std::getenv("HIERMEM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) cap = static_cast<std::size_t>(v);
  }
  if (cfg.threads == 0) return cap > 0 ? cap : 1;
  return cap > 0 ? std::min(cfg.threads, cap) : cfg.threads;
}

EvalResult evaluate_predictor(const Dataset& data, const EvalConfig& cfg, const Predictor& predict) {
  if (cfg.tasks < 2) throw ValueError("evaluation needs at least 2 tasks");
  EvalResult res;
  res.records.resize(cfg.tasks);
  const std::size_t nthreads = std::min(eval_threads(cfg), cfg.tasks);
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&](std::size_t first) {
    try {
      for (std::size_t t = first; t < cfg.tasks; t += nthreads) {
        const Episode ep = eval_episode(data, cfg, t);
        const TaskPrediction p = predict(ep);
        TaskRecord& r = res.records[t];
        r.task = t;
        r.acc_weighted = accuracy(p.weighted, ep.query_labels);
        r.acc_bagging = accuracy(p.bagging, ep.query_labels);
        r.alpha = p.alpha;
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(failure_mu);
      if (!failure) failure = std::current_exception();
    }
  };
  if (nthreads <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < nthreads; ++i) pool.emplace_back(work, i);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<double> w, b;
  for (const auto& r : res.records) {
    w.push_back(r.acc_weighted);
    b.push_back(r.acc_bagging);
    if (res.mean_alpha.size() < r.alpha.size()) res.mean_alpha.resize(r.alpha.size(), 0.0);
    for (std::size_t l = 0; l < r.alpha.size(); ++l) res.mean_alpha[l] += r.alpha[l];
  }
  for (auto& a : res.mean_alpha) a /= static_cast<double>(cfg.tasks);
  res.weighted = mean_ci95(w);
  res.bagging = mean_ci95(b);
  return res;
}

std::vector<Tensor> cache_features(const Model& model, const Dataset& data, const std::vector<bool>& wanted,
                                   std::size_t batch) {
  std::vector<Tensor> out(model.levels());
  for (std::size_t l = 0; l < model.levels(); ++l) {
    if (l < wanted.size() && wanted[l]) out[l] = Tensor({data.size(), model.backbone.embed_dim(l)});
  }
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t n = std::min(batch, data.size() - start);
    std::vector<std::size_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = start + i;
    Graph g;
    LevelFeatures f = model.backbone.extract(g, g.constant(data.gather(ids)), wanted);
    for (std::size_t l = 0; l < model.levels(); ++l) {
      if (!f.has(l)) continue;
      const auto& v = f.levels[l].value();
      std::copy(v.data().begin(), v.data().end(),
                out[l].storage().begin() + static_cast<std::ptrdiff_t>(start * v.dim(1)));
    }
  }
  return out;
}

namespace {

Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& ids) {
  const std::size_t d = t.dim(1);
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(t.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d),
              t.data().begin() + static_cast<std::ptrdiff_t>((ids[i] + 1) * d),
              out.storage().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

ChainInputs cached_inputs(Graph& g, const std::vector<Tensor>& features, const Episode& ep) {
  ChainInputs in;
  in.n_classes = ep.way;
  in.support_labels = ep.support_labels;
  in.support.resize(features.size());
  in.query.resize(features.size());
  for (std::size_t l = 0; l < features.size(); ++l) {
    if (features[l].numel() == 0) continue;
    in.support[l] = g.constant(take_rows(features[l], ep.support_ids));
    in.query[l] = g.constant(take_rows(features[l], ep.query_ids));
  }
  return in;
}

}  // namespace

Predictor model_predictor(const Model& model, const HierarchicalMemory& memory, const TrainConfig& cfg,
                          const std::vector<Tensor>& features, std::uint64_t noise_seed) {
  const ChainSpec spec = chain_spec(cfg.objective, model.levels(), cfg);
  const Objective obj = cfg.objective;
  return [&model, &memory, &features, spec, obj, noise_seed](const Episode& ep) {
    Graph g;
    ChainInputs in = cached_inputs(g, features, ep);
    TaskPrediction p;
    if (obj == Objective::kProto) {
      const std::size_t l = model.levels() - 1;
      Var cm = class_means(in.support[l], in.support_labels, in.n_classes);
      p.weighted = argmax_rows((-sq_distances(in.query[l], cm)).value());
      p.bagging = p.weighted;
      return p;
    }
    const auto steps = run_chain(g, model, spec.memory ? &memory : nullptr, in, spec,
                                 NoiseStream(noise_seed, ep.task_id));
    std::vector<Tensor> logits;
    for (const auto& st : steps) logits.push_back(st.log_probs.value());
    if (steps.size() > 1) {
      p.alpha = level_weights(model.hyper, summaries_of(in, spec.levels));
      p.weighted = argmax_rows(combine_weighted(logits, p.alpha));
      p.bagging = combine_bagging(logits);
    } else {
      p.alpha = {1.0};
      p.weighted = argmax_rows(logits[0]);
      p.bagging = p.weighted;
    }
    return p;
  };
}

std::vector<PrototypeExport> export_prototypes(const Model& model, const HierarchicalMemory& memory,
                                               const TrainConfig& cfg, const std::vector<Tensor>& features,
                                               const Episode& ep, std::uint64_t noise_seed) {
  std::vector<PrototypeExport> out;
  Graph g;
  ChainInputs in = cached_inputs(g, features, ep);
  if (cfg.objective == Objective::kProto) {
    const std::size_t l = model.levels() - 1;
    out.push_back({l, ep.classes, class_means(in.support[l], in.support_labels, in.n_classes).value()});
    return out;
  }
  const ChainSpec spec = chain_spec(cfg.objective, model.levels(), cfg);
  const auto steps = run_chain(g, model, spec.memory ? &memory : nullptr, in, spec, NoiseStream(noise_seed, ep.task_id));
  for (const auto& st : steps) out.push_back({st.level, ep.classes, st.prototypes.value()});
  return out;
}

EvalResult evaluate(const Model& model, const HierarchicalMemory& memory, const TrainConfig& cfg,
                    const Dataset& data, const EvalConfig& ecfg) {
  const auto features = cache_features(model, data, levels_needed(cfg.objective, model.levels()));
  return evaluate_predictor(data, ecfg, model_predictor(model, memory, cfg, features, ecfg.seed));
}

}  // namespace hiermem
