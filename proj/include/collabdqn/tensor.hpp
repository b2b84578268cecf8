#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace collabdqn {

using Shape = std::vector<std::size_t>;

/// Dense row-major float32 tensor of rank 1..5 (batch, channels, depth,
/// height, width for volumetric activations).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t rank() const { return shape_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] std::span<float> data() { return data_; }
  [[nodiscard]] std::span<const float> data() const { return data_; }
  float* raw() { return data_.data(); }
  [[nodiscard]] const float* raw() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// Same data viewed with another shape of equal element count.
  [[nodiscard]] Tensor reshaped(Shape shape) const;
  void fill(float value);

  /// Elements per leading-axis entry (1 for rank-1 tensors).
  [[nodiscard]] std::size_t row_size() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

}  // namespace collabdqn
