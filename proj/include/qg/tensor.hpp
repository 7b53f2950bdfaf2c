#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace qg {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array of doubles. Plain value type: copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Matrix view of the tensor: a 1-D tensor counts as a single row.
  std::size_t rows() const {
    if (shape_.size() == 1) return 1;
    return shape_.empty() ? 0 : shape_[0];
  }
  std::size_t cols() const {
    if (shape_.size() == 1) return shape_[0];
    return shape_.size() == 2 ? shape_[1] : 0;
  }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }

  double item() const;
  void fill(double v);

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Kernels shared by the autodiff layer. All expect 2-D (or 1-D as 1×n)
// operands and throw ShapeError on mismatch.
namespace kernels {

// out = a · b
Tensor matmul(const Tensor& a, const Tensor& b);
// out = a · bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// out = aᵀ · b
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& x);
// Adds src into dst elementwise; shapes must match.
void accumulate(Tensor& dst, const Tensor& src);

}  // namespace kernels

}  // namespace qg
