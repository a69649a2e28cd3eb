#pragma once

#include <cstdint>
#include <vector>

#include "hiermem/graph.hpp"
#include "hiermem/nn.hpp"

namespace hiermem {

struct BackboneConfig {
  std::size_t levels = 3;
  /// Output channels of each conv block; one entry per level.
  std::vector<std::size_t> channels = {8, 16, 16};
  std::size_t in_channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  /// Embedding width D_feat of each level.
  std::vector<std::size_t> embed_dims = {32, 32, 32};
  /// Hidden width of each level's two-layer head; 0 means "same as D_feat".
  std::size_t head_hidden = 0;

  /// Throws ConfigError on inconsistent sizes, or when pooling would shrink a
  /// block's map below 1x1 (message names the block).
  void validate() const;
  /// (C, H, W) of block `b`'s pooled output.
  std::vector<std::size_t> block_output_shape(std::size_t b) const;
};

/// Per-level embeddings of one image batch; entry l is (batch, D_feat(l)).
/// Levels that were not requested hold a null Var.
struct LevelFeatures {
  std::vector<Var> levels;

  bool has(std::size_t l) const { return l < levels.size() && levels[l].graph != nullptr; }
};

/// Stack of conv(3x3, pad 1) -> relu -> avgpool(2) blocks. After block l
/// the pooled map is flattened and mapped by two fully connected layers to
/// the level-l embedding, so level l only depends on blocks 1..l.
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, std::uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }
  std::size_t levels() const { return cfg_.levels; }
  std::size_t embed_dim(std::size_t l) const { return cfg_.embed_dims.at(l); }

  /// images: (B, C, H, W). `wanted` selects levels (empty = all); blocks run
  /// up to the deepest wanted level.
  LevelFeatures extract(Graph& g, Var images, const std::vector<bool>& wanted = {}) const;

  void collect(ParamList& out);
  std::size_t parameter_count();

  struct Block {
    mutable Tensor weight;
    mutable Tensor bias;
  };
  Block& block(std::size_t b) { return blocks_.at(b); }
  Mlp& head(std::size_t l) { return heads_.at(l); }

 private:
  BackboneConfig cfg_;
  std::vector<Block> blocks_;
  std::vector<Mlp> heads_;
};

}  // namespace hiermem
