#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "hiermem/tensor.hpp"

namespace hiermem {

/// Labelled images; class c of `class_names` is label c.
struct Dataset {
  Tensor images;  ///< (M, C, H, W)
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::string domain;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  /// Instance ids of every class, ascending.
  std::vector<std::vector<std::size_t>> by_class() const;
  /// Stacks the listed images into (ids.size(), C, H, W).
  Tensor gather(const std::vector<std::size_t>& ids) const;
};

/// One N-way K-shot task as instance ids into a Dataset. Support rows are
/// class-major; labels are 0..N-1 in the order `classes` lists them.
struct Episode {
  std::vector<std::size_t> support_ids;
  std::vector<int> support_labels;
  std::vector<std::size_t> query_ids;
  std::vector<int> query_labels;
  std::vector<int> classes;  ///< dataset class of each episode label
  std::size_t way = 0, shot = 0, queries = 0;
  std::string domain;
  std::uint64_t task_id = 0;

  /// Dataset class of every support row, for memory writes.
  std::vector<int> support_classes() const;
};

/// Throws ValueError reporting the class and sample counts when the dataset
/// cannot supply N classes with K + Q samples each.
Episode sample_episode(const Dataset& data, std::size_t way, std::size_t shot, std::size_t queries,
                       std::mt19937_64& rng, std::uint64_t task_id = 0);

struct SyntheticDomainConfig {
  double shift = 0.0;              ///< delta in [0, 1]
  std::size_t image_size = 32;
  std::size_t orientations = 4;    ///< texture dictionary is orientations x frequencies
  std::size_t frequencies = 3;
  std::size_t grid = 4;            ///< layouts are on a grid x grid cell mask
  std::size_t cells_on = 5;        ///< active cells per layout
  std::size_t layout_pool = 12;    ///< layouts per domain pool
  std::size_t train_classes = 32;
  std::size_t test_classes = 16;
  std::size_t images_per_class = 30;
  double texture_amplitude = 1.0;
  double layout_amplitude = 1.0;
  double noise = 0.3;
  std::size_t jitter = 1;          ///< max random translation of the layout in pixels
  double phase_jitter = 1.0;       ///< per-image texture phase is uniform on [0, 2 pi phase_jitter)
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the key.
  void validate() const;
};

struct Texture {
  double orientation = 0.0;  ///< radians
  double frequency = 0.0;    ///< cycles per pixel

  bool operator==(const Texture&) const = default;
};

using Layout = std::vector<std::uint8_t>;  ///< grid*grid cell mask

struct SyntheticClass {
  std::size_t texture = 0;
  std::size_t layout = 0;  ///< index into the train layout pool

  bool operator==(const SyntheticClass&) const = default;
};

/// Everything that determines pixels besides per-image randomness.
struct GeneratorParams {
  std::vector<Texture> textures;
  std::vector<Layout> layouts;          ///< pool the class layouts come from
  std::vector<Layout> domain_layouts;   ///< replacement pool of the domain
  double shift = 0.0;
  double texture_amplitude = 1.0, layout_amplitude = 1.0, noise = 0.3, phase_jitter = 1.0;
  std::size_t image_size = 32, grid = 4, jitter = 1;

  bool operator==(const GeneratorParams&) const = default;
};

struct SyntheticData {
  Dataset train;
  Dataset test;
  GeneratorParams train_params;
  GeneratorParams test_params;
  std::vector<SyntheticClass> train_classes;
  std::vector<SyntheticClass> test_classes;
  /// Layout index actually drawn for each test image: < layouts.size() when it
  /// is the class layout, otherwise layouts.size() + domain pool index.
  std::vector<std::size_t> test_layout_used;

  /// Serialized texture dictionary; identical for every shift.
  std::vector<std::uint8_t> dictionary_bytes() const;
};

/// Deterministic in `cfg`. Train classes and test classes are distinct
/// (texture, layout) pairs over one shared texture dictionary. In the test
/// domain each image keeps its class layout with probability 1 - shift and
/// otherwise shows a layout from the domain pool.
SyntheticData make_synthetic(const SyntheticDomainConfig& cfg);

/// key = value text; unknown keys are rejected with ConfigError.
void write_spec(const std::filesystem::path& path, const SyntheticDomainConfig& cfg);
SyntheticDomainConfig read_spec(const std::filesystem::path& path);
/// Applies one key/value pair; returns false when the key is unknown.
bool set_spec_value(SyntheticDomainConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::pair<std::string, std::string>> spec_entries(const SyntheticDomainConfig& cfg);

/// root/<class>/*.pgm (binary P5). Classes and files in lexicographic order;
/// pixels scaled to [0, 1]. Errors name the offending path.
Dataset load_folders(const std::filesystem::path& root);
void write_pgm(const std::filesystem::path& path, const Tensor& image);  ///< (1, H, W) or (H, W) in [0, 1]

/// Classifies queries by nearest class template of per-cell mean intensity,
/// so it only sees the layout cue. Returns query accuracy.
double layout_template_accuracy(const Dataset& data, const Episode& ep, std::size_t grid);

}  // namespace hiermem
