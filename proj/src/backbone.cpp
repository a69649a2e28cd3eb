#include "hiermem/backbone.hpp"

#include <random>

#include "hiermem/error.hpp"

namespace hiermem {

void BackboneConfig::validate() const {
  if (levels < 1) throw ConfigError("levels", "need at least one level");
  if (channels.size() != levels) {
    throw ConfigError("channels", "expected " + std::to_string(levels) + " entries, got " +
                                      std::to_string(channels.size()));
  }
  if (embed_dims.size() != levels) {
    throw ConfigError("embed_dims", "expected " + std::to_string(levels) + " entries, got " +
                                       std::to_string(embed_dims.size()));
  }
  if (in_channels == 0 || height == 0 || width == 0) {
    throw ConfigError("height", "input extents must be positive");
  }
  for (auto c : channels) {
    if (c == 0) throw ConfigError("channels", "channel widths must be positive");
  }
  for (auto d : embed_dims) {
    if (d == 0) throw ConfigError("embed_dims", "embedding dims must be positive");
  }
  std::size_t h = height, w = width;
  for (std::size_t b = 0; b < levels; ++b) {
    if (h < 2 || w < 2 || h % 2 || w % 2) {
      throw ConfigError("levels", "block " + std::to_string(b + 1) + " cannot pool a " +
                                      std::to_string(h) + "x" + std::to_string(w) + " map");
    }
    h /= 2;
    w /= 2;
  }
}

std::vector<std::size_t> BackboneConfig::block_output_shape(std::size_t b) const {
  std::size_t h = height, w = width;
  for (std::size_t i = 0; i <= b; ++i) {
    h /= 2;
    w /= 2;
  }
  return {channels.at(b), h, w};
}

Backbone::Backbone(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  std::size_t cin = cfg_.in_channels;
  for (std::size_t b = 0; b < cfg_.levels; ++b) {
    const std::size_t cout = cfg_.channels[b];
    Block blk{Tensor({cout, cin, 3, 3}), Tensor({cout})};
    glorot_uniform(blk.weight, cin * 9, cout * 9, rng);
    blocks_.push_back(std::move(blk));
    cin = cout;
  }
  for (std::size_t l = 0; l < cfg_.levels; ++l) {
    const auto s = cfg_.block_output_shape(l);
    const std::size_t flat = s[0] * s[1] * s[2];
    const std::size_t d = cfg_.embed_dims[l];
    heads_.emplace_back(flat, cfg_.head_hidden ? cfg_.head_hidden : d, d, rng);
  }
}

LevelFeatures Backbone::extract(Graph& g, Var images, const std::vector<bool>& wanted) const {
  const Shape expect{images.shape().empty() ? 0 : images.shape()[0], cfg_.in_channels, cfg_.height,
                     cfg_.width};
  if (images.shape() != expect) {
    throw ShapeError("backbone: images " + to_string(images.shape()) + " vs expected " + to_string(expect));
  }
  std::size_t deepest = 0;
  for (std::size_t l = 0; l < cfg_.levels; ++l) {
    if (wanted.empty() || (l < wanted.size() && wanted[l])) deepest = l + 1;
  }
  LevelFeatures out;
  out.levels.resize(cfg_.levels);
  Var x = images;
  for (std::size_t b = 0; b < deepest; ++b) {
    const auto& blk = blocks_[b];
    x = avgpool2d(relu(conv2d(x, g.param(blk.weight), g.param(blk.bias), 1, 1)), 2);
    if (wanted.empty() || (b < wanted.size() && wanted[b])) {
      out.levels[b] = heads_[b](g, flatten(x));
    }
  }
  return out;
}

void Backbone::collect(ParamList& out) {
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = "backbone.block" + std::to_string(b + 1);
    out.push_back({p + ".conv.weight", &blocks_[b].weight});
    out.push_back({p + ".conv.bias", &blocks_[b].bias});
  }
  for (std::size_t l = 0; l < heads_.size(); ++l) {
    heads_[l].collect("backbone.level" + std::to_string(l + 1), out);
  }
}

std::size_t Backbone::parameter_count() {
  ParamList p;
  collect(p);
  return hiermem::parameter_count(p);
}

}  // namespace hiermem
