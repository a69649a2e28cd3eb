#include "hiermem/model.hpp"

#include <random>

namespace hiermem {

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : config(cfg), backbone(cfg.backbone, seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const auto& dims = cfg.backbone.embed_dims;
  for (std::size_t l = 0; l < dims.size(); ++l) {
    LevelNets n;
    n.dim = dims[l];
    n.upper_dim = l == 0 ? dims[0] : dims[l - 1];
    const std::size_t h = cfg.infer_hidden;
    const bool identity = h >= 2 * n.dim;
    n.posterior = GaussianHead(2 * n.dim + n.upper_dim, h, n.dim, rng, cfg.init_raw_var, identity);
    n.prior = GaussianHead(n.dim + n.upper_dim, h, n.dim, rng, cfg.init_raw_var, identity);
    n.memory = GaussianHead(2 * n.dim + n.upper_dim, h, n.dim, rng, cfg.init_raw_var, identity);
    n.memory_prior = GaussianHead(n.dim + n.upper_dim, h, n.dim, rng, cfg.init_raw_var, identity);
    nets.push_back(std::move(n));
  }
  for (std::size_t l = 0; l < dims.size(); ++l) {
    hyper.heads.emplace_back(dims[l], cfg.hyper_hidden, 1, rng);
  }
}

ParamList Model::backbone_and_inference_parameters() {
  ParamList out;
  backbone.collect(out);
  for (std::size_t l = 0; l < nets.size(); ++l) {
    const std::string p = "infer.level" + std::to_string(l + 1);
    nets[l].posterior.collect(p + ".posterior", out);
    nets[l].prior.collect(p + ".prior", out);
    nets[l].memory.collect(p + ".memory", out);
    nets[l].memory_prior.collect(p + ".memory_prior", out);
  }
  return out;
}

ParamList Model::hyper_parameters() {
  ParamList out;
  for (std::size_t l = 0; l < hyper.heads.size(); ++l) {
    hyper.heads[l].collect("hyper.level" + std::to_string(l + 1), out);
  }
  return out;
}

ParamList Model::parameters() {
  ParamList out = backbone_and_inference_parameters();
  for (auto& p : hyper_parameters()) out.push_back(p);
  return out;
}

}  // namespace hiermem
