#include "hiermem/nn.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "hiermem/error.hpp"

namespace hiermem {

void glorot_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> d(-a, a);
  for (auto& v : t.storage()) v = d(rng);
}

// Linear ---------------------------------------------------------------------

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng)
    : weight_({in, out}), bias_({1, out}) {
  glorot_uniform(weight_, in, out, rng);
}

Var Linear::operator()(Graph& g, Var x) const {
  if (x.shape().size() != 2 || x.shape()[1] != weight_.dim(0)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(weight_.shape()));
  }
  return matmul(x, g.param(weight_)) + repeat_rows(g.param(bias_), x.shape()[0]);
}

void Linear::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", &weight_});
  out.push_back({prefix + ".bias", &bias_});
}

void Linear::zero() {
  std::fill(weight_.storage().begin(), weight_.storage().end(), 0.0);
  std::fill(bias_.storage().begin(), bias_.storage().end(), 0.0);
}

// Mlp --------------------------------------------------------------------------

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng)
    : first_(in, hidden, rng), second_(hidden, out, rng) {}

Var Mlp::operator()(Graph& g, Var x) const { return second_(g, relu(first_(g, x))); }

void Mlp::collect(const std::string& prefix, ParamList& out) {
  first_.collect(prefix + ".fc1", out);
  second_.collect(prefix + ".fc2", out);
}

// GaussianHead -------------------------------------------------------------------

GaussianHead::GaussianHead(std::size_t in, std::size_t hidden, std::size_t dim, std::mt19937_64& rng,
                           double init_raw_var, bool identity_init)
    : net_(in, hidden, 2 * dim, rng) {
  auto& b = net_.output().bias().storage();
  std::fill(b.begin() + static_cast<std::ptrdiff_t>(dim), b.end(), init_raw_var);
  if (!identity_init) return;
  if (in < dim || hidden < 2 * dim) throw ValueError("identity init needs in >= dim and hidden >= 2 dim");
  // Hidden units j and dim + j carry relu(x_j) and relu(-x_j); the mean
  // outputs recombine them into x_j.
  Tensor& w1 = net_.first().weight();
  Tensor& w2 = net_.output().weight();
  const std::size_t out = 2 * dim;
  for (std::size_t r = 0; r < in; ++r) {
    for (std::size_t j = 0; j < 2 * dim; ++j) w1.storage()[r * hidden + j] = 0.0;
  }
  for (std::size_t j = 0; j < dim; ++j) {
    w1.storage()[j * hidden + j] = 1.0;
    w1.storage()[j * hidden + dim + j] = -1.0;
  }
  for (std::size_t r = 0; r < hidden; ++r) {
    for (std::size_t c = 0; c < dim; ++c) w2.storage()[r * out + c] = 0.0;
  }
  for (std::size_t j = 0; j < dim; ++j) {
    w2.storage()[j * out + j] = 1.0;
    w2.storage()[(dim + j) * out + j] = -1.0;
  }
}

GaussianDiag GaussianHead::operator()(Graph& g, Var x) const {
  Var out = net_(g, x);
  const std::size_t d = dim();
  Var mu = slice(out, 1, 0, d);
  Var var = add_scalar(softplus(slice(out, 1, d, d)), kVarianceFloor);
  return GaussianDiag(mu, var);
}

void GaussianHead::collect(const std::string& prefix, ParamList& out) { net_.collect(prefix, out); }

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor->numel();
  return n;
}

// Optimizer ----------------------------------------------------------------------

void SgdMomentum::step(const ParamList& params, double clip_norm) {
  if (velocity_.size() != params.size()) {
    velocity_.assign(params.size(), {});
  }
  double factor = 1.0;
  if (clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params) {
      if (!p.tensor->has_grad()) continue;
      for (double v : std::as_const(*p.tensor).grad()) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > clip_norm) factor = clip_norm / norm;
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& t = *params[k].tensor;
    if (!t.has_grad()) continue;
    auto& vel = velocity_[k];
    if (vel.size() != t.numel()) vel.assign(t.numel(), 0.0);
    auto g = t.grad();
    auto& w = t.storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      vel[i] = momentum_ * vel[i] + factor * g[i];
      w[i] -= lr_ * vel[i];
    }
    t.clear_grad();
  }
}

// Checkpoints --------------------------------------------------------------------

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  auto p = stem;
  p += suffix;
  return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& stem, const ParamList& params) {
  std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary);
  std::ofstream man(with_suffix(stem, ".manifest"));
  if (!bin || !man) throw IoError("cannot write checkpoint " + stem.string());
  man << "# name shape offset\n";
  std::size_t offset = 0;
  for (const auto& p : params) {
    man << p.name << ' ';
    const auto& s = p.tensor->shape();
    for (std::size_t i = 0; i < s.size(); ++i) man << (i ? "x" : "") << s[i];
    man << ' ' << offset << '\n';
    write_tensor(bin, *p.tensor);
    offset += serialized_size(*p.tensor);
  }
  if (!bin || !man) throw IoError("failed writing checkpoint " + stem.string());
}

void load_checkpoint(const std::filesystem::path& stem, const ParamList& params) {
  const auto man_path = with_suffix(stem, ".manifest");
  const auto bin_path = with_suffix(stem, ".bin");
  std::ifstream man(man_path);
  if (!man) throw IoError("cannot open " + man_path.string());
  std::map<std::string, std::size_t> offsets;
  std::string line;
  while (std::getline(man, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string name, shape;
    std::size_t offset = 0;
    if (!(ls >> name >> shape >> offset)) throw IoError("malformed manifest line: " + line);
    offsets[name] = offset;
  }
  if (offsets.size() != params.size()) {
    throw ShapeError("checkpoint holds " + std::to_string(offsets.size()) + " tensors, model expects " +
                     std::to_string(params.size()));
  }
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot open " + bin_path.string());
  std::vector<Tensor> loaded;
  loaded.reserve(params.size());
  for (const auto& p : params) {
    auto it = offsets.find(p.name);
    if (it == offsets.end()) throw ShapeError("checkpoint has no tensor named " + p.name);
    bin.clear();
    bin.seekg(static_cast<std::streamoff>(it->second));
    Tensor t = read_tensor(bin, static_cast<std::int64_t>(it->second));
    if (t.shape() != p.tensor->shape()) {
      throw ShapeError("checkpoint tensor " + p.name + " has shape " + to_string(t.shape()) +
                       ", model expects " + to_string(p.tensor->shape()));
    }
    loaded.push_back(std::move(t));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    params[k].tensor->storage() = std::move(loaded[k].storage());
    params[k].tensor->clear_grad();
  }
}

}  // namespace hiermem
