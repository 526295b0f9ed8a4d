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

#include "dpmaes/tensor.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dpmaes/errors.h"

namespace dpmaes {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)),
      data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string(shape_));
  }
}

int64_t Tensor::dim(int64_t axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis out of range for shape " + shape_string(shape_));
  }
  return shape_[static_cast<size_t>(axis)];
}

int64_t Tensor::flat_index(std::initializer_list<int64_t> index) const {
  if (static_cast<int64_t>(index.size()) != rank()) {
    throw ShapeError("index rank does not match shape " + shape_string(shape_));
  }
  int64_t flat = 0;
  size_t axis = 0;
  for (int64_t i : index) {
    if (i < 0 || i >= shape_[axis]) {
      throw ShapeError("index out of range for shape " + shape_string(shape_));
    }
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return flat;
}

double& Tensor::at(std::initializer_list<int64_t> index) {
  return data_[static_cast<size_t>(flat_index(index))];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  return data_[static_cast<size_t>(flat_index(index))];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                     shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice0(int64_t begin, int64_t count) const {
  if (rank() == 0 || begin < 0 || count < 0 || begin + count > shape_[0]) {
    throw ShapeError("slice out of range for shape " + shape_string(shape_));
  }
  Shape shape = shape_;
  shape[0] = count;
  const int64_t block = shape_[0] == 0 ? 0 : numel() / shape_[0];
  std::vector<double> data(data_.begin() + begin * block,
                           data_.begin() + (begin + count) * block);
  return Tensor(std::move(shape), std::move(data));
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

void ParameterSet::add(const std::string& name, Tensor value) {
  if (index_.count(name)) {
    throw InvalidArgumentError("duplicate parameter name '" + name + "'");
  }
  index_.emplace(name, names_.size());
  names_.push_back(name);
  values_.push_back(std::move(value));
}

bool ParameterSet::contains(const std::string& name) const {
  return index_.count(name) > 0;
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw InvalidArgumentError("unknown parameter '" + name + "'");
  }
  return values_[it->second];
}

Tensor& ParameterSet::get(const std::string& name) {
  return const_cast<Tensor&>(std::as_const(*this).get(name));
}

int64_t ParameterSet::total_size() const {
  int64_t n = 0;
  for (const Tensor& t : values_) n += t.numel();
  return n;
}

std::vector<double> ParameterSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(total_size()));
  for (const Tensor& t : values_) {
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  }
  return flat;
}

void ParameterSet::unflatten(std::span<const double> flat) {
  if (static_cast<int64_t>(flat.size()) != total_size()) {
    throw ShapeError("flat parameter vector has length " +
                     std::to_string(flat.size()) + ", expected " +
                     std::to_string(total_size()));
  }
  size_t offset = 0;
  for (Tensor& t : values_) {
    std::copy_n(flat.begin() + offset, t.numel(), t.data().begin());
    offset += static_cast<size_t>(t.numel());
  }
}

}  // namespace dpmaes
