#include "hiermem/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include "hiermem/error.hpp"

namespace hiermem {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(hiermem::numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (hiermem::numel(shape_) != data_.size()) {
    throw ShapeError("shape " + to_string(shape_) + " needs " +
                     std::to_string(hiermem::numel(shape_)) + " values, got " +
                     std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

double& Tensor::at(std::size_t row, std::size_t col) {
  if (rank() != 2) throw ShapeError("at(row, col) needs a rank-2 tensor, got " + to_string(shape_));
  return data_[row * shape_[1] + col];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw ShapeError("at(row, col) needs a rank-2 tensor, got " + to_string(shape_));
  return data_[row * shape_[1] + col];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (hiermem::numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

std::vector<double> Tensor::row(std::size_t r) const {
  if (rank() != 2) throw ShapeError("row() needs a rank-2 tensor, got " + to_string(shape_));
  const auto cols = shape_[1];
  return {data_.begin() + static_cast<std::ptrdiff_t>(r * cols),
          data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols)};
}

std::span<double> Tensor::grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0);
  return *grad_;
}

std::span<const double> Tensor::grad() const {
  if (!grad_) throw ValueError("tensor has no gradient");
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Serialization -------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& in, std::int64_t& pos) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw IoError("truncated tensor header", pos);
  }
  pos += sizeof v;
  return v;
}

constexpr std::uint32_t kMaxRank = 8;

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

Tensor read_tensor(std::istream& in, std::int64_t base_offset) {
  std::int64_t pos = base_offset;
  const std::uint32_t rank = get_u32(in, pos);
  if (rank == 0 || rank > kMaxRank) {
    throw IoError("invalid tensor rank " + std::to_string(rank), pos - 4);
  }
  Shape shape(rank);
  std::uint64_t n = 1;
  for (auto& e : shape) {
    const auto start = pos;
    e = get_u32(in, pos);
    if (e == 0) throw IoError("zero tensor extent", start);
    n *= e;
    if (n > (std::uint64_t{1} << 32)) throw IoError("tensor too large", start);
  }
  std::vector<double> data(n);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (static_cast<std::uint64_t>(in.gcount()) != n * sizeof(double)) {
    throw IoError("truncated tensor data", pos + in.gcount());
  }
  return Tensor(std::move(shape), std::move(data));
}

std::size_t serialized_size(const Tensor& t) {
  return 4 + 4 * t.rank() + 8 * t.numel();
}

}  // namespace hiermem
