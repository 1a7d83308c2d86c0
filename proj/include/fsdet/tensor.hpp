#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fsdet {

/// Dense row-major tensor of doubles. Feature maps are stored channel-major
/// as [C, H, W]; batched maps as [N, C, H, W].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const std::vector<int>& shape() const noexcept { return shape_; }
  int dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(int i0, int i1, int i2) { return data_[offset3(i0, i1, i2)]; }
  double at(int i0, int i1, int i2) const { return data_[offset3(i0, i1, i2)]; }
  double& at(int i0, int i1, int i2, int i3) { return data_[offset4(i0, i1, i2, i3)]; }
  double at(int i0, int i1, int i2, int i3) const { return data_[offset4(i0, i1, i2, i3)]; }

  /// Same data, new shape with the same element count.
  Tensor reshaped(std::vector<int> shape) const;

  void fill(double v);
  bool all_finite() const noexcept;
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

  static std::size_t count(const std::vector<int>& shape);
  std::string shape_string() const;

 private:
  std::size_t offset3(int i0, int i1, int i2) const noexcept {
    return (static_cast<std::size_t>(i0) * shape_[1] + i1) * shape_[2] + i2;
  }
  std::size_t offset4(int i0, int i1, int i2, int i3) const noexcept {
    return ((static_cast<std::size_t>(i0) * shape_[1] + i1) * shape_[2] + i2) * shape_[3] + i3;
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);

/// Raised on violated shape or argument contracts anywhere in the pipeline.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace fsdet
