#pragma once

#include <cstdint>
#include <vector>

#include "hiermem/backbone.hpp"
#include "hiermem/nn.hpp"

namespace hiermem {

/// Amortization networks of one level.
///
/// Conditioning slots that are absent (no latent memory, no upper level) are
/// fed zeros, so the flat and hierarchical variants share one parameterization.
struct LevelNets {
  GaussianHead posterior;     ///< q(z | class mean, m, z_upper)
  GaussianHead prior;         ///< p(z | query feature, z_upper)
  GaussianHead memory;        ///< p(m | key, support summary, m_upper), one per entry
  GaussianHead memory_prior;  ///< p(m | support summary, m_upper)

  std::size_t dim = 0;        ///< D_feat of this level (z and m live here)
  std::size_t upper_dim = 0;  ///< width of the z_upper / m_upper slots
};

/// Per-level scoring heads f_alpha^l: gradient summary (D_l) -> scalar.
struct HyperNet {
  std::vector<Mlp> heads;
};

struct ModelConfig {
  BackboneConfig backbone;
  /// Hidden width of the amortization nets; at least 2 D_feat starts their
  /// means as the identity of the primary input.
  std::size_t infer_hidden = 48;
  std::size_t hyper_hidden = 16;
  /// Initial bias of every raw variance output; softplus(-5) ~ 0.0067.
  double init_raw_var = -5.0;
};

struct Model {
  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t seed);

  ModelConfig config;
  Backbone backbone;
  std::vector<LevelNets> nets;
  HyperNet hyper;

  std::size_t levels() const { return nets.size(); }

  /// Every trainable tensor, in checkpoint order.
  ParamList parameters();
  ParamList backbone_and_inference_parameters();
  ParamList hyper_parameters();
};

}  // namespace hiermem
