//
// Copyright 2026 The dpmaes Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#ifndef DPMAES_TENSOR_H_
#define DPMAES_TENSOR_H_

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dpmaes {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major tensor of doubles. A rank-0 tensor holds one value.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t axis) const;
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Multi-index access, bounds-checked.
  double& at(std::initializer_list<int64_t> index);
  double at(std::initializer_list<int64_t> index) const;

  // Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  // Contiguous block along axis 0: rows [begin, begin + count).
  Tensor slice0(int64_t begin, int64_t count) const;

  void fill(double value);
  bool all_finite() const;

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  int64_t flat_index(std::initializer_list<int64_t> index) const;

  Shape shape_;
  std::vector<double> data_;
};

// Ordered collection of named tensors. Order is insertion order and defines
// the flattened layout used for per-sample gradient rows and checkpoints.
class ParameterSet {
 public:
  void add(const std::string& name, Tensor value);

  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);

  size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const Tensor& value(size_t i) const { return values_[i]; }
  Tensor& value(size_t i) { return values_[i]; }

  int64_t total_size() const;
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

  bool operator==(const ParameterSet& other) const {
    return names_ == other.names_ && values_ == other.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace dpmaes

#endif  // DPMAES_TENSOR_H_
