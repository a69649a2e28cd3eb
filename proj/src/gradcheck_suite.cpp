#include "hiermem/gradcheck_suite.hpp"

#include <memory>
#include <random>

#include "hiermem/objective.hpp"

namespace hiermem {

namespace {

Tensor uniform_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.storage()) v = d(rng);
  return t;
}

// Fixed random projection to a scalar.
Var project(Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(y * y.graph->constant(uniform_tensor(y.shape(), rng)));
}

GaussianDiag gaussian(Var mean, Var raw_var) { return GaussianDiag(mean, add_scalar(softplus(raw_var), kVarianceFloor)); }

struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  std::function<Var(const std::vector<Var>&)> op;
  double lo = -1.0, hi = 1.0;
};

std::vector<OpCase> op_cases() {
  return {
      {"add", {{3, 4}, {3, 4}}, [](auto& v) { return add(v[0], v[1]); }},
      {"add_scalar_broadcast", {{3, 4}, {1}}, [](auto& v) { return add(v[0], v[1]); }},
      {"sub", {{2, 5}, {2, 5}}, [](auto& v) { return sub(v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& v) { return mul(v[0], v[1]); }},
      {"mul_scalar_broadcast", {{1}, {2, 3}}, [](auto& v) { return mul(v[0], v[1]); }},
      {"div", {{3, 4}, {3, 4}}, [](auto& v) { return div(v[0], v[1]); }, 0.5, 2.0},
      {"neg", {{2, 3}}, [](auto& v) { return neg(v[0]); }},
      {"scale", {{2, 3}}, [](auto& v) { return scale(v[0], -1.7); }},
      {"add_scalar", {{2, 3}}, [](auto& v) { return add_scalar(v[0], 0.3); }},
      {"matmul", {{3, 4}, {4, 2}}, [](auto& v) { return matmul(v[0], v[1]); }},
      {"transpose", {{3, 2}}, [](auto& v) { return transpose(v[0]); }},
      {"reshape", {{2, 6}}, [](auto& v) { return reshape(v[0], {3, 4}); }},
      {"flatten", {{2, 2, 2, 2}}, [](auto& v) { return flatten(v[0]); }},
      {"slice", {{3, 4}}, [](auto& v) { return slice(v[0], 1, 1, 2); }},
      {"concat_axis0", {{2, 3}, {1, 3}}, [](auto& v) { return concat({v[0], v[1]}, 0); }},
      {"concat_axis1", {{2, 3}, {2, 2}}, [](auto& v) { return concat({v[0], v[1]}, 1); }},
      {"conv2d_stride1_pad1", {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}},
       [](auto& v) { return conv2d(v[0], v[1], v[2], 1, 1); }},
      {"conv2d_stride2_pad1", {{1, 2, 6, 6}, {2, 2, 3, 3}, {2}},
       [](auto& v) { return conv2d(v[0], v[1], v[2], 2, 1); }},
      {"conv2d_stride1_pad0", {{1, 1, 4, 4}, {2, 1, 3, 3}, {2}},
       [](auto& v) { return conv2d(v[0], v[1], v[2], 1, 0); }},
      {"avgpool2d", {{2, 2, 4, 4}}, [](auto& v) { return avgpool2d(v[0], 2); }},
      {"relu", {{4, 5}}, [](auto& v) { return relu(v[0]); }},
      {"softplus", {{4, 5}}, [](auto& v) { return softplus(v[0]); }, -4.0, 4.0},
      {"exp", {{3, 3}}, [](auto& v) { return exp(v[0]); }},
      {"log", {{3, 3}}, [](auto& v) { return log(v[0]); }, 0.3, 3.0},
      {"sqrt", {{3, 3}}, [](auto& v) { return sqrt(v[0]); }, 0.3, 3.0},
      {"square", {{3, 3}}, [](auto& v) { return square(v[0]); }},
      {"sum", {{3, 4}}, [](auto& v) { return sum(v[0]); }},
      {"sum_axis", {{3, 4, 2}}, [](auto& v) { return sum(v[0], 1); }},
      {"mean", {{3, 4}}, [](auto& v) { return mean(v[0]); }},
      {"mean_axis", {{3, 4}}, [](auto& v) { return mean(v[0], 0); }},
      {"softmax", {{3, 4}}, [](auto& v) { return softmax(v[0], 1); }, -3.0, 3.0},
      {"softmax_axis0", {{3, 4}}, [](auto& v) { return softmax(v[0], 0); }, -3.0, 3.0},
      {"log_softmax", {{3, 4}}, [](auto& v) { return log_softmax(v[0], 1); }, -3.0, 3.0},
      {"logsumexp", {{2, 3, 4}}, [](auto& v) { return logsumexp(v[0], 1); }, -3.0, 3.0},
      {"cross_entropy", {{3, 4}, {3, 4}}, [](auto& v) { return cross_entropy(v[0], v[1]); }},
      {"sq_distances", {{3, 4}, {2, 4}}, [](auto& v) { return sq_distances(v[0], v[1]); }},
      {"repeat_rows", {{1, 3}}, [](auto& v) { return repeat_rows(v[0], 4); }},
      {"gather_rows", {{3, 2}}, [](auto& v) { return gather_rows(v[0], {2, 0, 2, 1}); }},
  };
}

// Tiny world shared by the network-level cases.
struct Tiny {
  Model model;
  HierarchicalMemory memory;
  Dataset data;
  Episode episode;
  TrainConfig train;
};

std::shared_ptr<Tiny> make_tiny(std::uint64_t seed) {
  auto t = std::make_shared<Tiny>();
  ModelConfig mc;
  mc.backbone.levels = 2;
  mc.backbone.channels = {3, 4};
  mc.backbone.height = mc.backbone.width = 8;
  mc.backbone.embed_dims = {8, 8};
  mc.backbone.head_hidden = 8;
  mc.infer_hidden = 16;
  mc.hyper_hidden = 4;
  // Unit-scale variances keep every term of the loss well conditioned.
  mc.init_raw_var = 0.0;
  t->model = Model(mc, seed);

  std::mt19937_64 rng(seed + 17);
  const std::size_t classes = 3, per_class = 4;
  t->data.images = uniform_tensor({classes * per_class, 1, 8, 8}, rng);
  for (std::size_t c = 0; c < classes; ++c) {
    t->data.class_names.push_back("c" + std::to_string(c));
    for (std::size_t i = 0; i < per_class; ++i) t->data.labels.push_back(static_cast<int>(c));
  }
  t->episode = sample_episode(t->data, 2, 2, 2, rng, 0);

  t->memory = HierarchicalMemory(mc.backbone.embed_dims);
  Tensor f0 = uniform_tensor({4, 8}, rng), f1 = uniform_tensor({4, 8}, rng);
  t->memory.update({&f0, &f1}, {0, 1, 2, 2});

  t->train.lz = 2;
  t->train.tau = 1.0;
  return t;
}

GradCheckOptions op_options(std::uint64_t seed) {
  GradCheckOptions o;
  o.eps = 1e-5;
  o.tol = 1e-4;
  o.seed = seed;
  return o;
}

GradCheckOptions net_options(std::uint64_t seed) {
  GradCheckOptions o;
  o.eps = 1e-5;
  o.tol = 1e-3;
  o.max_coords = 6;
  o.seed = seed;
  return o;
}

}  // namespace

std::vector<GradCheckCase> gradcheck_suite(std::uint64_t seed) {
  std::vector<GradCheckCase> cases;
  std::mt19937_64 rng(seed);

  for (const auto& c : op_cases()) {
    std::vector<Tensor> inputs;
    for (const auto& s : c.shapes) inputs.push_back(uniform_tensor(s, rng, c.lo, c.hi));
    const auto proj = rng();
    cases.push_back({"op", c.name, [c, inputs, proj, seed] {
                       return grad_check([&](Graph&, const std::vector<Var>& v) { return project(c.op(v), proj); },
                                         inputs, op_options(seed), c.name);
                     }});
  }

  // distributions
  {
    auto in = std::vector<Tensor>{uniform_tensor({2, 3}, rng), uniform_tensor({2, 3}, rng)};
    const Tensor noise = uniform_tensor({2, 3}, rng, -2.0, 2.0);
    const auto proj = rng();
    cases.push_back({"distribution", "sample", [=] {
                       return grad_check(
                           [&](Graph& g, const std::vector<Var>& v) {
                             return project(sample(gaussian(v[0], v[1]), g.constant(noise)), proj);
                           },
                           in, op_options(seed), "sample");
                     }});
  }
  {
    auto in = std::vector<Tensor>{uniform_tensor({2, 4}, rng), uniform_tensor({2, 4}, rng),
                                  uniform_tensor({2, 4}, rng), uniform_tensor({2, 4}, rng)};
    cases.push_back({"distribution", "kl", [=] {
                       return grad_check(
                           [](Graph&, const std::vector<Var>& v) {
                             return kl(gaussian(v[0], v[1]), gaussian(v[2], v[3]));
                           },
                           in, op_options(seed), "kl");
                     }});
  }
  {
    auto in = std::vector<Tensor>{uniform_tensor({1, 3}, rng), uniform_tensor({3, 2}, rng),
                                  uniform_tensor({3, 2}, rng), uniform_tensor({1, 2}, rng),
                                  uniform_tensor({1, 2}, rng)};
    cases.push_back({"distribution", "kl_mixture_bound", [=] {
                       return grad_check(
                           [](Graph&, const std::vector<Var>& v) {
                             GaussianMixture mix(reshape(softmax(v[0], 1), {3}), gaussian(v[1], v[2]));
                             return kl_mixture_bound(mix, gaussian(v[3], v[4]));
                           },
                           in, op_options(seed), "kl_mixture_bound");
                     }});
  }
  {
    auto in = std::vector<Tensor>{uniform_tensor({1, 3}, rng), uniform_tensor({3, 2}, rng),
                                  uniform_tensor({3, 2}, rng), uniform_tensor({1, 2}, rng),
                                  uniform_tensor({1, 2}, rng)};
    const Tensor noise = uniform_tensor({5, 2}, rng, -2.0, 2.0);
    std::vector<double> choice;
    for (int i = 0; i < 5; ++i) choice.push_back(std::uniform_real_distribution<double>(0.0, 1.0)(rng));
    cases.push_back({"distribution", "kl_mixture_mc", [=] {
                       return grad_check(
                           [&](Graph& g, const std::vector<Var>& v) {
                             GaussianMixture mix(reshape(softmax(v[0], 1), {3}), gaussian(v[1], v[2]));
                             return kl_mixture_mc(mix, gaussian(v[3], v[4]), choice, g.constant(noise));
                           },
                           in, op_options(seed), "kl_mixture_mc");
                     }});
  }
  {
    auto in = std::vector<Tensor>{uniform_tensor({2, 3}, rng), uniform_tensor({2, 3}, rng),
                                  uniform_tensor({2, 3}, rng)};
    cases.push_back({"distribution", "log_prob", [=] {
                       return grad_check(
                           [](Graph&, const std::vector<Var>& v) { return log_prob(gaussian(v[0], v[1]), v[2]); },
                           in, op_options(seed), "log_prob");
                     }});
  }

  auto tiny = make_tiny(seed);

  // memory recall on the tiny model's level-1 nets
  {
    const Tensor keys = tiny->memory.keys(1);
    auto in = std::vector<Tensor>{uniform_tensor({2, 8}, rng), uniform_tensor({2, 8}, rng)};
    const Tensor noise = uniform_tensor({2, 8}, rng, -2.0, 2.0);
    const auto proj = rng();
    cases.push_back({"memory", "address", [=] {
                       return grad_check(
                           [&](Graph& g, const std::vector<Var>& v) { return project(address(g, keys, v[0], 0.7), proj); },
                           in, op_options(seed), "address");
                     }});
    cases.push_back({"memory", "latent_memory", [=] {
                       const LevelNets& nets = tiny->model.nets[1];
                       auto f = [&](Graph& g, const std::vector<Var>& v) {
                         Var addr = address(g, keys, v[0], 1.0);
                         LatentMemory mem = infer_latent_memory(g, nets, keys, addr, v[0], v[1]);
                         GaussianDiag prior = memory_prior(g, nets, v[0], v[1]);
                         return project(sample_latent_memory(mem, g.constant(noise)), proj) +
                                sum(kl_latent_memory(mem, prior));
                       };
                       return grad_check(f, in, net_options(seed), "latent_memory");
                     }});
    cases.push_back({"memory", "latent_memory_params", [=] {
                       LevelNets& nets = tiny->model.nets[1];
                       ParamList params;
                       nets.memory.collect("memory", params);
                       nets.memory_prior.collect("memory_prior", params);
                       auto f = [&](Graph& g) {
                         Var s = g.constant(in[0]), up = g.constant(in[1]);
                         Var addr = address(g, keys, s, 1.0);
                         LatentMemory mem = infer_latent_memory(g, nets, keys, addr, s, up);
                         GaussianDiag prior = memory_prior(g, nets, s, up);
                         return project(sample_latent_memory(mem, g.constant(noise)), proj) +
                                sum(kl_latent_memory(mem, prior));
                       };
                       return grad_check_params(f, params, net_options(seed), "latent_memory_params");
                     }});
  }

  // hypernet
  {
    auto in = std::vector<Tensor>{uniform_tensor({1, 8}, rng), uniform_tensor({1, 8}, rng)};
    const Tensor l0 = uniform_tensor({3, 2}, rng, -2.0, 0.0), l1 = uniform_tensor({3, 2}, rng, -2.0, 0.0);
    const Tensor onehot({3, 2}, {1.0, 0.0, 0.0, 1.0, 1.0, 0.0});
    auto combined_ce = [=](Graph& g, Var alpha) {
      Var c = slice(alpha, 0, 0, 1) * g.constant(l0) + slice(alpha, 0, 1, 1) * g.constant(l1);
      return cross_entropy(c, g.constant(onehot));
    };
    cases.push_back({"hypernet", "level_weights", [=] {
                       return grad_check(
                           [&](Graph& g, const std::vector<Var>& v) {
                             return combined_ce(g, level_weights(g, tiny->model.hyper, v));
                           },
                           in, net_options(seed), "level_weights");
                     }});
    cases.push_back({"hypernet", "level_weights_params", [=] {
                       ParamList params = tiny->model.hyper_parameters();
                       return grad_check_params(
                           [&](Graph& g) {
                             return combined_ce(g, level_weights(g, tiny->model.hyper,
                                                                 {g.constant(in[0]), g.constant(in[1])}));
                           },
                           params, net_options(seed), "level_weights_params");
                     }});
  }

  // backbone
  {
    const Tensor images = uniform_tensor({3, 1, 8, 8}, rng);
    const auto proj = rng();
    cases.push_back({"backbone", "backbone", [=] {
                       ParamList params;
                       tiny->model.backbone.collect(params);
                       return grad_check_params(
                           [&](Graph& g) {
                             LevelFeatures f = tiny->model.backbone.extract(g, g.constant(images));
                             return project(f.levels[0], proj) + project(f.levels[1], proj + 1);
                           },
                           params, net_options(seed), "backbone");
                     }});
  }

  // objectives
  auto mc_train = tiny->train;
  mc_train.mc_memory_kl = true;
  mc_train.mc_samples = 4;
  struct LossCase {
    Objective o;
    std::string name;
    TrainConfig cfg;
  };
  std::vector<LossCase> losses;
  for (Objective o : {Objective::kProto, Objective::kVp, Objective::kVsm, Objective::kHvp, Objective::kHvm}) {
    losses.push_back({o, "loss_" + objective_name(o), tiny->train});
  }
  losses.push_back({Objective::kHvm, "loss_hvm_mc_memory_kl", mc_train});
  for (const auto& [o, name, cfg] : losses) {
    cases.push_back({"loss", name, [=] {
                       ParamList params = tiny->model.backbone_and_inference_parameters();
                       const auto wanted = levels_needed(o, tiny->model.levels());
                       return grad_check_params(
                           [&](Graph& g) {
                             ChainInputs in = episode_inputs(g, tiny->model, tiny->data, tiny->episode, wanted);
                             return episode_loss(o, g, tiny->model, &tiny->memory, in, cfg,
                                                 NoiseStream(seed, 0), 1.0)
                                 .total_var;
                           },
                           params, net_options(seed), name);
                     }});
  }
  return cases;
}

SuiteOutcome run_gradcheck_suite(const std::vector<GradCheckCase>& cases,
                                 const std::function<void(const std::string&, const GradCheckReport&)>& on_report) {
  SuiteOutcome out;
  for (const auto& c : cases) {
    GradCheckReport r = c.run();
    r.name = c.name;
    out.passed = out.passed && r.passed() && r.checked > 0;
    if (on_report) on_report(c.group, r);
    out.reports.push_back(std::move(r));
    out.groups.push_back(c.group);
  }
  return out;
}

}  // namespace hiermem
