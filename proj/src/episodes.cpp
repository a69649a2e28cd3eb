#include "hiermem/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "hiermem/error.hpp"

namespace hiermem {

namespace fs = std::filesystem;

std::vector<std::vector<std::size_t>> Dataset::by_class() const {
  std::vector<std::vector<std::size_t>> out(num_classes());
  for (std::size_t i = 0; i < labels.size(); ++i) out.at(labels[i]).push_back(i);
  return out;
}

Tensor Dataset::gather(const std::vector<std::size_t>& ids) const {
  Shape s = images.shape();
  const std::size_t per = images.numel() / s[0];
  s[0] = ids.size();
  Tensor out(s);
  auto dst = out.storage().begin();
  for (auto id : ids) {
    if (id >= size()) throw ValueError("dataset: instance id out of range");
    auto src = images.data().begin() + static_cast<std::ptrdiff_t>(id * per);
    dst = std::copy(src, src + static_cast<std::ptrdiff_t>(per), dst);
  }
  return out;
}

std::vector<int> Episode::support_classes() const {
  std::vector<int> out;
  for (int y : support_labels) out.push_back(classes.at(y));
  return out;
}

Episode sample_episode(const Dataset& data, std::size_t way, std::size_t shot, std::size_t queries,
                       std::mt19937_64& rng, std::uint64_t task_id) {
  if (way == 0 || shot == 0 || queries == 0) throw ValueError("episode needs way, shot and queries >= 1");
  const auto groups = data.by_class();
  std::vector<int> eligible;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (groups[c].size() >= shot + queries) eligible.push_back(static_cast<int>(c));
  }
  if (eligible.size() < way) {
    throw ValueError("episode: need " + std::to_string(way) + " classes with >= " + std::to_string(shot + queries) +
                     " samples, dataset has " + std::to_string(eligible.size()) + " of " +
                     std::to_string(groups.size()));
  }
  // Partial Fisher-Yates so each draw consumes a fixed amount of randomness.
  for (std::size_t i = 0; i < way; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.queries = queries;
  ep.domain = data.domain;
  ep.task_id = task_id;
  ep.classes.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(way));
  std::vector<std::vector<std::size_t>> chosen(way);
  for (std::size_t k = 0; k < way; ++k) {
    auto ids = groups[ep.classes[k]];
    for (std::size_t i = 0; i < shot + queries; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
      std::swap(ids[i], ids[pick(rng)]);
    }
    chosen[k].assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(shot + queries));
  }
  for (std::size_t k = 0; k < way; ++k) {
    for (std::size_t i = 0; i < shot; ++i) {
      ep.support_ids.push_back(chosen[k][i]);
      ep.support_labels.push_back(static_cast<int>(k));
    }
  }
  for (std::size_t k = 0; k < way; ++k) {
    for (std::size_t i = shot; i < shot + queries; ++i) {
      ep.query_ids.push_back(chosen[k][i]);
      ep.query_labels.push_back(static_cast<int>(k));
    }
  }
  return ep;
}

// Synthetic domains -------------------------------------------------------------

void SyntheticDomainConfig::validate() const {
  if (!(shift >= 0.0 && shift <= 1.0)) throw ConfigError("shift", "must lie in [0, 1]");
  if (image_size < 4) throw ConfigError("image_size", "must be at least 4");
  if (orientations == 0) throw ConfigError("orientations", "must be positive");
  if (frequencies == 0) throw ConfigError("frequencies", "must be positive");
  if (grid == 0 || image_size % grid) throw ConfigError("grid", "must divide image_size");
  if (cells_on == 0 || cells_on >= grid * grid) throw ConfigError("cells_on", "must lie in [1, grid^2)");
  if (layout_pool == 0) throw ConfigError("layout_pool", "must be positive");
  if (train_classes == 0) throw ConfigError("train_classes", "must be positive");
  if (test_classes == 0) throw ConfigError("test_classes", "must be positive");
  if (images_per_class == 0) throw ConfigError("images_per_class", "must be positive");
  if (train_classes + test_classes > orientations * frequencies * layout_pool) {
    throw ConfigError("train_classes", "more classes than distinct (texture, layout) pairs");
  }
  if (!(noise >= 0.0)) throw ConfigError("noise", "must be non-negative");
  if (jitter * 2 >= image_size) throw ConfigError("jitter", "too large for the image");
  if (!(phase_jitter >= 0.0 && phase_jitter <= 1.0)) throw ConfigError("phase_jitter", "must lie in [0, 1]");
}

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  return mix(mix(mix(mix(seed) ^ a) ^ b) ^ c);
}

enum : std::uint64_t { kTexturesTag = 11, kLayoutsTag = 12, kDomainTag = 13, kClassesTag = 14, kImageTag = 15 };

std::vector<Layout> make_layouts(std::size_t count, const SyntheticDomainConfig& cfg, std::mt19937_64& rng,
                                 std::set<Layout>& used) {
  const std::size_t cells = cfg.grid * cfg.grid;
  std::vector<Layout> out;
  while (out.size() < count) {
    std::vector<std::size_t> idx(cells);
    for (std::size_t i = 0; i < cells; ++i) idx[i] = i;
    for (std::size_t i = 0; i < cfg.cells_on; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, cells - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    Layout l(cells, 0);
    for (std::size_t i = 0; i < cfg.cells_on; ++i) l[idx[i]] = 1;
    if (used.insert(l).second) out.push_back(std::move(l));
  }
  return out;
}

struct ImageDraw {
  double phase;
  long dx, dy;
  double replace_u;
  std::size_t replace_idx;
};

void render(const GeneratorParams& p, const Texture& tex, const Layout& layout, const ImageDraw& d,
            std::mt19937_64& noise_rng, double* out) {
  const std::size_t s = p.image_size, cell = s / p.grid;
  const double base = [&] {
    double on = 0;
    for (auto v : layout) on += v;
    return on / static_cast<double>(layout.size());
  }();
  const double c = std::cos(tex.orientation), sn = std::sin(tex.orientation);
  std::normal_distribution<double> nd(0.0, 1.0);
  const long sl = static_cast<long>(s);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const std::size_t lx = static_cast<std::size_t>(((static_cast<long>(x) - d.dx) % sl + sl) % sl);
      const std::size_t ly = static_cast<std::size_t>(((static_cast<long>(y) - d.dy) % sl + sl) % sl);
      const double on = layout[(ly / cell) * p.grid + lx / cell];
      const double t = std::sin(2.0 * std::numbers::pi * tex.frequency *
                                    (static_cast<double>(x) * c + static_cast<double>(y) * sn) +
                                d.phase);
      out[y * s + x] = p.texture_amplitude * t + p.layout_amplitude * (on - base) + p.noise * nd(noise_rng);
    }
  }
}

Dataset render_domain(const std::string& name, const GeneratorParams& p, const std::vector<SyntheticClass>& classes,
                      std::size_t per_class, std::uint64_t seed, std::uint64_t domain_tag,
                      std::vector<std::size_t>* layout_used) {
  Dataset ds;
  ds.domain = name;
  const std::size_t s = p.image_size;
  ds.images = Tensor({classes.size() * per_class, 1, s, s});
  for (std::size_t c = 0; c < classes.size(); ++c) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%03zu", name.c_str(), c);
    ds.class_names.push_back(buf);
    for (std::size_t i = 0; i < per_class; ++i) {
      std::mt19937_64 rng(stream(seed, kImageTag, domain_tag, c * 1000003 + i));
      ImageDraw d{};
      d.phase = p.phase_jitter * std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
      std::uniform_int_distribution<long> j(-static_cast<long>(p.jitter), static_cast<long>(p.jitter));
      d.dx = j(rng);
      d.dy = j(rng);
      d.replace_u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      d.replace_idx = static_cast<std::size_t>(std::uniform_real_distribution<double>(0.0, 1.0)(rng) * 1e9);
      const Layout* layout = &p.layouts[classes[c].layout];
      std::size_t used = classes[c].layout;
      if (!p.domain_layouts.empty() && d.replace_u < p.shift) {
        const std::size_t k = d.replace_idx % p.domain_layouts.size();
        layout = &p.domain_layouts[k];
        used = p.layouts.size() + k;
      }
      const std::size_t row = c * per_class + i;
      render(p, p.textures[classes[c].texture], *layout, d, rng, ds.images.storage().data() + row * s * s);
      ds.labels.push_back(static_cast<int>(c));
      if (layout_used) layout_used->push_back(used);
    }
  }
  return ds;
}

}  // namespace

std::vector<std::uint8_t> SyntheticData::dictionary_bytes() const {
  std::vector<std::uint8_t> out;
  for (const auto& t : train_params.textures) {
    for (double v : {t.orientation, t.frequency}) {
      const auto* b = reinterpret_cast<const std::uint8_t*>(&v);
      out.insert(out.end(), b, b + sizeof v);
    }
  }
  return out;
}

SyntheticData make_synthetic(const SyntheticDomainConfig& cfg) {
  cfg.validate();
  GeneratorParams base;
  base.image_size = cfg.image_size;
  base.grid = cfg.grid;
  base.jitter = cfg.jitter;
  base.phase_jitter = cfg.phase_jitter;
  base.texture_amplitude = cfg.texture_amplitude;
  base.layout_amplitude = cfg.layout_amplitude;
  base.noise = cfg.noise;
  {
    std::mt19937_64 rng(stream(cfg.seed, kTexturesTag));
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    const double f_lo = 0.12, f_hi = 0.36;
    for (std::size_t o = 0; o < cfg.orientations; ++o) {
      for (std::size_t f = 0; f < cfg.frequencies; ++f) {
        Texture t;
        t.orientation = std::numbers::pi * (static_cast<double>(o) + 0.2 * u(rng)) / static_cast<double>(cfg.orientations);
        const double frac = cfg.frequencies == 1 ? 0.5 : static_cast<double>(f) / static_cast<double>(cfg.frequencies - 1);
        t.frequency = f_lo + (f_hi - f_lo) * frac;
        base.textures.push_back(t);
      }
    }
  }
  std::set<Layout> used;
  {
    std::mt19937_64 rng(stream(cfg.seed, kLayoutsTag));
    base.layouts = make_layouts(cfg.layout_pool, cfg, rng, used);
  }

  SyntheticData out;
  {
    // Class k cycles through textures so textures are spread evenly; layouts
    // are drawn so every (texture, layout) pair is used at most once.
    std::mt19937_64 rng(stream(cfg.seed, kClassesTag));
    const std::size_t nt = base.textures.size();
    std::set<std::pair<std::size_t, std::size_t>> pairs;
    auto draw = [&](std::size_t count, std::size_t offset) {
      std::vector<SyntheticClass> cls;
      for (std::size_t c = 0; c < count; ++c) {
        SyntheticClass sc;
        sc.texture = (c + offset) % nt;
        std::uniform_int_distribution<std::size_t> pick(0, base.layouts.size() - 1);
        do {
          sc.layout = pick(rng);
        } while (!pairs.insert({sc.texture, sc.layout}).second);
        cls.push_back(sc);
      }
      return cls;
    };
    out.train_classes = draw(cfg.train_classes, 0);
    out.test_classes = draw(cfg.test_classes, 0);
  }

  out.train_params = base;
  out.test_params = base;
  if (cfg.shift > 0.0) {
    std::mt19937_64 rng(stream(cfg.seed, kDomainTag));
    out.test_params.domain_layouts = make_layouts(cfg.layout_pool, cfg, rng, used);
    out.test_params.shift = cfg.shift;
  }
  out.train = render_domain("train", out.train_params, out.train_classes, cfg.images_per_class, cfg.seed, 1, nullptr);
  out.test = render_domain("test", out.test_params, out.test_classes, cfg.images_per_class, cfg.seed, 2,
                           &out.test_layout_used);
  return out;
}

std::vector<std::pair<std::string, std::string>> spec_entries(const SyntheticDomainConfig& c) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  return {{"shift", num(c.shift)},
          {"image_size", std::to_string(c.image_size)},
          {"orientations", std::to_string(c.orientations)},
          {"frequencies", std::to_string(c.frequencies)},
          {"grid", std::to_string(c.grid)},
          {"cells_on", std::to_string(c.cells_on)},
          {"layout_pool", std::to_string(c.layout_pool)},
          {"train_classes", std::to_string(c.train_classes)},
          {"test_classes", std::to_string(c.test_classes)},
          {"images_per_class", std::to_string(c.images_per_class)},
          {"texture_amplitude", num(c.texture_amplitude)},
          {"layout_amplitude", num(c.layout_amplitude)},
          {"noise", num(c.noise)},
          {"jitter", std::to_string(c.jitter)},
          {"phase_jitter", num(c.phase_jitter)},
          {"seed", std::to_string(c.seed)}};
}

namespace {

double parse_double(const std::string& key, const std::string& v) {
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

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  }
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError(key, "integer out of range: '" + v + "'");
  }
}

}  // namespace

bool set_spec_value(SyntheticDomainConfig& c, const std::string& key, const std::string& v) {
  if (key == "shift") c.shift = parse_double(key, v);
  else if (key == "image_size") c.image_size = parse_uint(key, v);
  else if (key == "orientations") c.orientations = parse_uint(key, v);
  else if (key == "frequencies") c.frequencies = parse_uint(key, v);
  else if (key == "grid") c.grid = parse_uint(key, v);
  else if (key == "cells_on") c.cells_on = parse_uint(key, v);
  else if (key == "layout_pool") c.layout_pool = parse_uint(key, v);
  else if (key == "train_classes") c.train_classes = parse_uint(key, v);
  else if (key == "test_classes") c.test_classes = parse_uint(key, v);
  else if (key == "images_per_class") c.images_per_class = parse_uint(key, v);
  else if (key == "texture_amplitude") c.texture_amplitude = parse_double(key, v);
  else if (key == "layout_amplitude") c.layout_amplitude = parse_double(key, v);
  else if (key == "noise") c.noise = parse_double(key, v);
  else if (key == "jitter") c.jitter = parse_uint(key, v);
  else if (key == "phase_jitter") c.phase_jitter = parse_double(key, v);
  else if (key == "seed") c.seed = parse_uint(key, v);
  else return false;
  return true;
}

void write_spec(const fs::path& path, const SyntheticDomainConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# synthetic domain spec\n";
  for (const auto& [k, v] : spec_entries(cfg)) out << k << " = " << v << '\n';
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

SyntheticDomainConfig read_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open spec file " + path.string());
  SyntheticDomainConfig cfg;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line, "expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (!set_spec_value(cfg, key, value)) throw ConfigError(key, "unknown key");
  }
  cfg.validate();
  return cfg;
}

// PGM folders --------------------------------------------------------------------

namespace {

Tensor read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto fail = [&](const std::string& what) { return IoError(path.string() + ": " + what, in ? static_cast<std::int64_t>(in.tellg()) : -1); };
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  if (token() != "P5") throw IoError(path.string() + ": not a binary PGM (P5) file", 0);
  auto number = [&](const char* what) {
    const std::string t = token();
    if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos) {
      throw fail(std::string("bad ") + what + " in header");
    }
    return std::stoul(t);
  };
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw fail("header values out of range");
  const std::size_t bytes = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(w * h * bytes);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw IoError(path.string() + ": truncated pixel data");
  }
  Tensor t({1, h, w});
  for (std::size_t i = 0; i < w * h; ++i) {
    const double v = bytes == 1 ? raw[i] : (raw[2 * i] << 8 | raw[2 * i + 1]);
    t.storage()[i] = v / static_cast<double>(maxval);
  }
  return t;
}

}  // namespace

Dataset load_folders(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("not a directory: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw IoError("no class folders under " + root.string());
  Dataset ds;
  ds.domain = root.filename().string();
  std::vector<Tensor> images;
  Shape first;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[c])) {
      if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("empty class folder " + class_dirs[c].string());
    ds.class_names.push_back(class_dirs[c].filename().string());
    for (const auto& f : files) {
      Tensor t = read_pgm(f);
      if (first.empty()) first = t.shape();
      if (t.shape() != first) {
        throw IoError(f.string() + ": image size " + to_string(t.shape()) + " differs from " + to_string(first));
      }
      images.push_back(std::move(t));
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  ds.images = Tensor({images.size(), first[0], first[1], first[2]});
  const std::size_t per = images[0].numel();
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::copy(images[i].data().begin(), images[i].data().end(), ds.images.storage().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return ds;
}

void write_pgm(const fs::path& path, const Tensor& image) {
  const auto& s = image.shape();
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  if (image.numel() != h * w) throw ShapeError("write_pgm: expected a single-channel image, got " + to_string(s));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  for (double v : image.data()) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
}

// Layout-only oracle ---------------------------------------------------------------

namespace {

std::vector<double> cell_means(const Dataset& data, std::size_t id, std::size_t grid) {
  const auto& s = data.images.shape();
  const std::size_t h = s[2], w = s[3], ch = h / grid, cw = w / grid;
  const double* img = data.images.data().data() + id * s[1] * h * w;
  std::vector<double> out(grid * grid, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) out[(y / ch) * grid + x / cw] += img[y * w + x];
  }
  for (auto& v : out) v /= static_cast<double>(ch * cw);
  return out;
}

}  // namespace

double layout_template_accuracy(const Dataset& data, const Episode& ep, std::size_t grid) {
  std::vector<std::vector<double>> templ(ep.way, std::vector<double>(grid * grid, 0.0));
  for (std::size_t i = 0; i < ep.support_ids.size(); ++i) {
    const auto m = cell_means(data, ep.support_ids[i], grid);
    for (std::size_t j = 0; j < m.size(); ++j) templ[ep.support_labels[i]][j] += m[j] / static_cast<double>(ep.shot);
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ep.query_ids.size(); ++i) {
    const auto m = cell_means(data, ep.query_ids[i], grid);
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < ep.way; ++k) {
      double d = 0;
      for (std::size_t j = 0; j < m.size(); ++j) d += (m[j] - templ[k][j]) * (m[j] - templ[k][j]);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    correct += static_cast<int>(best) == ep.query_labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(ep.query_ids.size());
}

}  // namespace hiermem
