#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hiermem {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// A Tensor is a plain value. Autodiff happens on a Graph, which copies the
/// values it needs; tensors bound as parameters receive their gradients back
/// into `grad()` when the graph runs backward.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  /// Builds a (rows, cols) matrix from nested initializer lists.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t row, std::size_t col);
  double at(std::size_t row, std::size_t col) const;
  /// Value of a single-element tensor.
  double item() const;

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;
  /// Copy of row `r` of a rank-2 tensor as a flat vector.
  std::vector<double> row(std::size_t r) const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }
  bool has_grad() const { return grad_.has_value(); }
  /// Gradient buffer; allocated (zeroed) on first access.
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad() { grad_.reset(); }

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

/// Writes `[rank:u32][extents:u32 x rank][data:f64 x n]`, little-endian.
void write_tensor(std::ostream& out, const Tensor& t);
/// Inverse of write_tensor. `base_offset` is added to reported byte offsets.
Tensor read_tensor(std::istream& in, std::int64_t base_offset = 0);
/// Size in bytes of the serialized form of `t`.
std::size_t serialized_size(const Tensor& t);

}  // namespace hiermem
