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

#include "dpmaes/autodiff.h"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "dpmaes/errors.h"

namespace dpmaes {
namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

ConstMatMap cmat(const double* p, int64_t rows, int64_t cols) {
  return ConstMatMap(p, rows, cols);
}
MatMap mat(double* p, int64_t rows, int64_t cols) {
  return MatMap(p, rows, cols);
}

std::string both_shapes(const Tensor& a, const Tensor& b) {
  return shape_string(a.shape()) + " vs " + shape_string(b.shape());
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const size_t r = perm.size();
  const Shape& in_shape = x.shape();
  Shape out_shape(r);
  std::vector<int64_t> in_strides(r, 1);
  for (size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  std::vector<int64_t> step(r);
  for (size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
    step[i] = in_strides[static_cast<size_t>(perm[i])];
  }
  Tensor out(out_shape);
  const int64_t n = out.numel();
  if (n == 0) return out;
  std::vector<int64_t> counter(r, 0);
  int64_t offset = 0;
  const double* src = x.ptr();
  double* dst = out.ptr();
  for (int64_t i = 0; i < n; ++i) {
    dst[i] = src[offset];
    for (size_t axis = r; axis-- > 0;) {
      if (++counter[axis] < out_shape[axis]) {
        offset += step[axis];
        break;
      }
      offset -= step[axis] * (out_shape[axis] - 1);
      counter[axis] = 0;
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// PerSampleGrads

PerSampleGrads::PerSampleGrads(int64_t batch_size, std::vector<Slot> slots)
    : batch_size_(batch_size), row_length_(0), slots_(std::move(slots)) {
  for (const Slot& s : slots_) {
    if (s.offset != row_length_) {
      throw InvalidArgumentError("gradient slots must partition the row");
    }
    row_length_ += s.size;
  }
  data_.assign(static_cast<size_t>(batch_size_ * row_length_), 0.0);
}

std::span<double> PerSampleGrads::row(int64_t sample) {
  return std::span<double>(data_).subspan(
      static_cast<size_t>(sample * row_length_),
      static_cast<size_t>(row_length_));
}

std::span<const double> PerSampleGrads::row(int64_t sample) const {
  return std::span<const double>(data_).subspan(
      static_cast<size_t>(sample * row_length_),
      static_cast<size_t>(row_length_));
}

Tensor PerSampleGrads::grad(int64_t sample, const std::string& name) const {
  for (const Slot& s : slots_) {
    if (s.name != name) continue;
    auto r = row(sample).subspan(static_cast<size_t>(s.offset),
                                 static_cast<size_t>(s.size));
    return Tensor(s.shape, std::vector<double>(r.begin(), r.end()));
  }
  throw InvalidArgumentError("no gradient slot named '" + name + "'");
}

std::vector<double> PerSampleGrads::row_sum() const {
  std::vector<double> total(static_cast<size_t>(row_length_), 0.0);
  for (int64_t b = 0; b < batch_size_; ++b) {
    auto r = row(b);
    for (size_t j = 0; j < total.size(); ++j) total[j] += r[j];
  }
  return total;
}

double PerSampleGrads::row_norm(int64_t sample) const {
  auto r = row(sample);
  double sq = 0.0;
  for (double v : r) sq += v * v;
  return std::sqrt(sq);
}

// ---------------------------------------------------------------------------
// BackwardPass

BackwardPass::BackwardPass(const Graph& graph, bool per_sample,
                           PerSampleGrads* rows)
    : graph_(graph),
      per_sample_(per_sample),
      rows_(rows),
      grads_(graph.nodes_.size()),
      has_grad_(graph.nodes_.size(), false) {
  if (per_sample_) {
    stacked_.resize(graph.nodes_.size());
    for (size_t p = 0; p < graph.param_nodes_.size(); ++p) {
      Stacked& s = stacked_[static_cast<size_t>(graph.param_nodes_[p])];
      s.base = rows_->data().data() + rows_->slots()[p].offset;
      s.stride = rows_->row_length();
    }
  }
}

std::span<double> BackwardPass::stacked_slice(int32_t id, int64_t sample) {
  Stacked& s = stacked_[static_cast<size_t>(id)];
  const int64_t n = graph_.nodes_[static_cast<size_t>(id)].value.numel();
  if (s.base == nullptr) {
    s.storage.assign(static_cast<size_t>(n * graph_.batch_size_), 0.0);
    s.base = s.storage.data();
    s.stride = n;
  }
  s.touched = true;
  return std::span<double>(s.base + sample * s.stride, static_cast<size_t>(n));
}

void BackwardPass::accumulate(int32_t id, const Tensor& grad) {
  const Graph::Node& n = graph_.nodes_[static_cast<size_t>(id)];
  if (!n.requires_grad) return;
  if (grad.numel() != n.value.numel()) {
    throw std::logic_error(std::string("gradient size mismatch at ") + n.op);
  }
  if (per_sample_ && !n.batched) {
    if (current_sample_ < 0) {
      throw std::logic_error(
          "shared input of a batched node must use accumulate_samples");
    }
    auto dst = stacked_slice(id, current_sample_);
    const double* src = grad.ptr();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    return;
  }
  const size_t k = static_cast<size_t>(id);
  if (!has_grad_[k]) {
    grads_[k] = grad.reshaped(n.value.shape());
    has_grad_[k] = true;
  } else {
    double* dst = grads_[k].ptr();
    const double* src = grad.ptr();
    for (int64_t i = 0; i < grad.numel(); ++i) dst[i] += src[i];
  }
}

void BackwardPass::accumulate_samples(
    int32_t id, const std::function<void(int64_t, std::span<double>)>& fn) {
  const Graph::Node& n = graph_.nodes_[static_cast<size_t>(id)];
  if (!n.requires_grad) return;
  if (n.batched) {
    throw std::logic_error("accumulate_samples called for a batched input");
  }
  if (split_) {
    for (int64_t b = 0; b < graph_.batch_size_; ++b) {
      fn(b, stacked_slice(id, b));
    }
    return;
  }
  Tensor total(n.value.shape());
  for (int64_t b = 0; b < std::max<int64_t>(graph_.batch_size_, 1); ++b) {
    fn(b, total.data());
  }
  accumulate(id, total);
}

void BackwardPass::run(Var seed, Tensor seed_grad) {
  accumulate(seed.id, seed_grad);
  for (int32_t id = seed.id; id >= 0; --id) {
    const Graph::Node& n = graph_.nodes_[static_cast<size_t>(id)];
    if (!n.backward || !n.requires_grad) continue;
    const size_t k = static_cast<size_t>(id);
    if (per_sample_ && !n.batched) {
      if (!stacked_[k].touched) continue;
      for (int64_t b = 0; b < graph_.batch_size_; ++b) {
        auto slice = stacked_slice(id, b);
        Tensor g(n.value.shape(),
                 std::vector<double>(slice.begin(), slice.end()));
        current_sample_ = b;
        n.backward(*this, g);
      }
      current_sample_ = -1;
      stacked_[k].storage.clear();
      stacked_[k].storage.shrink_to_fit();
      continue;
    }
    if (!has_grad_[k]) continue;
    split_ = per_sample_ && n.batched;
    n.backward(*this, grads_[k]);
    split_ = false;
    grads_[k] = Tensor();
    has_grad_[k] = false;
  }
}

// ---------------------------------------------------------------------------
// Graph

Graph::Graph(int64_t batch_size) : batch_size_(batch_size) {
  if (batch_size < 0) throw InvalidArgumentError("batch size must be >= 0");
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size()) {
    throw InvalidArgumentError("variable does not belong to this graph");
  }
  return nodes_[static_cast<size_t>(v.id)];
}

const Tensor& Graph::value(Var v) const { return node(v).value; }
bool Graph::batched(Var v) const { return node(v).batched; }
bool Graph::coupled(Var v) const { return node(v).coupled; }
bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> names;
  for (int32_t id : param_nodes_) {
    names.push_back(nodes_[static_cast<size_t>(id)].name);
  }
  return names;
}

Var Graph::push(const char* op, std::vector<int32_t> inputs, Tensor value,
                bool batched, bool couples, BackwardFn backward) {
  if (!value.all_finite()) {
    throw Error(std::string("non-finite value produced by ") + op);
  }
  Node n;
  n.op = op;
  n.batched = batched;
  n.coupled = couples;
  for (int32_t in : inputs) {
    const Node& src = nodes_[static_cast<size_t>(in)];
    n.coupled = n.coupled || src.coupled;
    n.requires_grad = n.requires_grad || src.requires_grad;
  }
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

void Graph::check_batched_leading(const char* op, const Tensor& t) const {
  if (batch_size_ < 1) {
    throw InvalidArgumentError(std::string(op) +
                               ": graph was built without a sample axis");
  }
  if (t.rank() < 1 || t.shape()[0] != batch_size_) {
    throw ShapeError(std::string(op) + ": leading extent of " +
                     shape_string(t.shape()) + " must equal batch size " +
                     std::to_string(batch_size_));
  }
}

Var Graph::parameter(const std::string& name, Tensor value) {
  for (int32_t id : param_nodes_) {
    if (name == nodes_[static_cast<size_t>(id)].name) {
      throw InvalidArgumentError("duplicate parameter name '" + name + "'");
    }
  }
  Var v = push("parameter", {}, std::move(value), false, false, nullptr);
  Node& n = nodes_.back();
  n.name = name;
  n.requires_grad = true;
  n.param_index = static_cast<int32_t>(param_nodes_.size());
  param_nodes_.push_back(v.id);
  return v;
}

Var Graph::constant(Tensor value) {
  return push("constant", {}, std::move(value), false, false, nullptr);
}

Var Graph::sample_constant(Tensor value) {
  check_batched_leading("sample_constant", value);
  return push("sample_constant", {}, std::move(value), true, false, nullptr);
}

Var Graph::matmul(Var a, Var b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  const Shape sa = na.value.shape();
  const Shape sb = nb.value.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul needs operands of rank >= 2: " +
                     both_shapes(na.value, nb.value));
  }
  const int64_t k = sa.back();
  if (sb[sb.size() - 2] != k) {
    throw ShapeError("matmul inner dimensions differ: " +
                     both_shapes(na.value, nb.value));
  }

  if (sb.size() == 2) {
    if (nb.batched) {
      throw ShapeError("matmul right operand " + shape_string(sb) +
                       " is batched but has no per-sample matrix axes");
    }
    const int64_t n = sb[1];
    const int64_t rows = na.value.numel() / k;
    Shape out_shape = sa;
    out_shape.back() = n;
    Tensor out(out_shape);
    mat(out.ptr(), rows, n).noalias() =
        cmat(na.value.ptr(), rows, k) * cmat(nb.value.ptr(), k, n);
    const bool batched = na.batched;
    const int64_t batch = batch_size_;
    return push(
        "matmul", {a.id, b.id}, std::move(out), batched, false,
        [ia = a.id, ib = b.id, rows, k, n, batch, sa, sb](
            BackwardPass& p, const Tensor& g) {
          const Tensor& va = p.value(ia);
          const Tensor& vb = p.value(ib);
          if (p.needs(ia)) {
            Tensor da(sa);
            mat(da.ptr(), rows, k).noalias() =
                cmat(g.ptr(), rows, n) * cmat(vb.ptr(), k, n).transpose();
            p.accumulate(ia, da);
          }
          if (!p.needs(ib)) return;
          if (p.split()) {
            const int64_t per = rows / batch;
            p.accumulate_samples(ib, [&](int64_t s, std::span<double> out) {
              mat(out.data(), k, n).noalias() +=
                  cmat(va.ptr() + s * per * k, per, k).transpose() *
                  cmat(g.ptr() + s * per * n, per, n);
            });
          } else {
            Tensor db(sb);
            mat(db.ptr(), k, n).noalias() =
                cmat(va.ptr(), rows, k).transpose() * cmat(g.ptr(), rows, n);
            p.accumulate(ib, db);
          }
        });
  }

  if (sa.size() != sb.size() ||
      !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    throw ShapeError("batched matmul needs equal leading extents: " +
                     both_shapes(na.value, nb.value));
  }
  if (na.batched != nb.batched) {
    throw ShapeError("batched matmul operands must both carry the sample "
                     "axis or neither: " +
                     both_shapes(na.value, nb.value));
  }
  const int64_t m = sa[sa.size() - 2];
  const int64_t n = sb.back();
  const int64_t groups = na.value.numel() / (m * k);
  Shape out_shape = sa;
  out_shape.back() = n;
  Tensor out(out_shape);
  for (int64_t gi = 0; gi < groups; ++gi) {
    mat(out.ptr() + gi * m * n, m, n).noalias() =
        cmat(na.value.ptr() + gi * m * k, m, k) *
        cmat(nb.value.ptr() + gi * k * n, k, n);
  }
  return push("matmul", {a.id, b.id}, std::move(out), na.batched, false,
              [ia = a.id, ib = b.id, m, k, n, groups, sa, sb](
                  BackwardPass& p, const Tensor& g) {
                const Tensor& va = p.value(ia);
                const Tensor& vb = p.value(ib);
                if (p.needs(ia)) {
                  Tensor da(sa);
                  for (int64_t gi = 0; gi < groups; ++gi) {
                    mat(da.ptr() + gi * m * k, m, k).noalias() =
                        cmat(g.ptr() + gi * m * n, m, n) *
                        cmat(vb.ptr() + gi * k * n, k, n).transpose();
                  }
                  p.accumulate(ia, da);
                }
                if (p.needs(ib)) {
                  Tensor db(sb);
                  for (int64_t gi = 0; gi < groups; ++gi) {
                    mat(db.ptr() + gi * k * n, k, n).noalias() =
                        cmat(va.ptr() + gi * m * k, m, k).transpose() *
                        cmat(g.ptr() + gi * m * n, m, n);
                  }
                  p.accumulate(ib, db);
                }
              });
}

Var Graph::binary_elementwise(const char* op, Var a, Var b, bool multiply) {
  if (node(b).value.rank() > node(a).value.rank()) std::swap(a, b);
  const Node& na = node(a);
  const Node& nb = node(b);
  const Shape sa = na.value.shape();
  const Shape sb = nb.value.shape();
  const bool same = sa == sb;
  if (same) {
    if (na.batched != nb.batched) {
      throw ShapeError(std::string(op) +
                       ": a shared operand cannot span the sample axis: " +
                       both_shapes(na.value, nb.value));
    }
  } else if (!is_suffix(sb, sa) || nb.batched) {
    throw ShapeError(std::string(op) + ": cannot broadcast " +
                     both_shapes(na.value, nb.value));
  }
  const int64_t inner = nb.value.numel();
  const int64_t outer = inner == 0 ? 0 : na.value.numel() / inner;
  Tensor out(sa);
  {
    const double* pa = na.value.ptr();
    const double* pb = nb.value.ptr();
    double* po = out.ptr();
    for (int64_t i = 0; i < outer; ++i) {
      for (int64_t j = 0; j < inner; ++j) {
        const int64_t t = i * inner + j;
        po[t] = multiply ? pa[t] * pb[j] : pa[t] + pb[j];
      }
    }
  }
  const int64_t batch = batch_size_;
  return push(
      op, {a.id, b.id}, std::move(out), na.batched || nb.batched, false,
      [ia = a.id, ib = b.id, same, inner, outer, multiply, batch, sa, sb](
          BackwardPass& p, const Tensor& g) {
        const Tensor& va = p.value(ia);
        const Tensor& vb = p.value(ib);
        if (p.needs(ia)) {
          if (!multiply) {
            p.accumulate(ia, g);
          } else {
            Tensor da(sa);
            for (int64_t i = 0; i < outer; ++i) {
              for (int64_t j = 0; j < inner; ++j) {
                da[i * inner + j] = g[i * inner + j] * vb[j];
              }
            }
            p.accumulate(ia, da);
          }
        }
        if (!p.needs(ib)) return;
        auto add_blocks = [&](int64_t begin, int64_t end,
                              std::span<double> out) {
          double* __restrict dst = out.data();
          for (int64_t i = begin; i < end; ++i) {
            const double* __restrict gi = g.ptr() + i * inner;
            if (multiply) {
              const double* __restrict ai = va.ptr() + i * inner;
              for (int64_t j = 0; j < inner; ++j) dst[j] += gi[j] * ai[j];
            } else {
              for (int64_t j = 0; j < inner; ++j) dst[j] += gi[j];
            }
          }
        };
        if (same) {
          Tensor db(sb);
          add_blocks(0, outer, db.data());
          p.accumulate(ib, db);
        } else if (p.split()) {
          const int64_t per = outer / batch;
          p.accumulate_samples(ib, [&](int64_t s, std::span<double> out) {
            add_blocks(s * per, (s + 1) * per, out);
          });
        } else {
          Tensor db(sb);
          add_blocks(0, outer, db.data());
          p.accumulate(ib, db);
        }
      });
}

Var Graph::add(Var a, Var b) { return binary_elementwise("add", a, b, false); }

Var Graph::mul(Var a, Var b) { return binary_elementwise("mul", a, b, true); }

Var Graph::sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var Graph::scale(Var a, double factor) {
  const Node& na = node(a);
  Tensor out(na.value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = na.value[i] * factor;
  return push("scale", {a.id}, std::move(out), na.batched, false,
              [ia = a.id, factor](BackwardPass& p, const Tensor& g) {
                Tensor da(g.shape());
                for (int64_t i = 0; i < g.numel(); ++i) da[i] = g[i] * factor;
                p.accumulate(ia, da);
              });
}

Var Graph::reshape(Var a, Shape shape) {
  const Node& na = node(a);
  if (shape_numel(shape) != na.value.numel()) {
    throw ShapeError("cannot reshape " + shape_string(na.value.shape()) +
                     " to " + shape_string(shape));
  }
  const bool keeps_axis =
      na.batched && !shape.empty() && shape[0] == batch_size_;
  const bool couples = na.batched && !keeps_axis;
  const Shape in_shape = na.value.shape();
  return push("reshape", {a.id}, na.value.reshaped(std::move(shape)),
              keeps_axis, couples,
              [ia = a.id, in_shape](BackwardPass& p, const Tensor& g) {
                p.accumulate(ia, g.reshaped(in_shape));
              });
}

Var Graph::transpose(Var a, std::vector<int> perm) {
  const Node& na = node(a);
  const size_t r = static_cast<size_t>(na.value.rank());
  std::vector<int> check = perm;
  std::sort(check.begin(), check.end());
  std::vector<int> identity(r);
  std::iota(identity.begin(), identity.end(), 0);
  if (check != identity) {
    throw ShapeError("transpose permutation does not match rank of " +
                     shape_string(na.value.shape()));
  }
  std::vector<int> inverse(r);
  for (size_t i = 0; i < r; ++i) inverse[static_cast<size_t>(perm[i])] = static_cast<int>(i);
  const bool keeps_axis = na.batched && perm[0] == 0;
  return push("transpose", {a.id}, permute(na.value, perm), keeps_axis,
              na.batched && !keeps_axis,
              [ia = a.id, inverse](BackwardPass& p, const Tensor& g) {
                p.accumulate(ia, permute(g, inverse));
              });
}

Var Graph::gather_rows(Var a, const std::vector<int64_t>& rows) {
  const Node& na = node(a);
  const Shape sa = na.value.shape();
  const size_t want_rank = na.batched ? 3 : 2;
  if (sa.size() != want_rank) {
    throw ShapeError("gather_rows expects a [R, C] table or a batched "
                     "[B, R, C] table, got " +
                     shape_string(sa));
  }
  const int64_t groups = na.batched ? sa[0] : 1;
  const int64_t R = sa[want_rank - 2];
  const int64_t C = sa[want_rank - 1];
  const int64_t L = static_cast<int64_t>(rows.size());
  for (int64_t r : rows) {
    if (r < 0 || r >= R) {
      throw ShapeError("gather_rows index " + std::to_string(r) +
                       " out of range for " + shape_string(sa));
    }
  }
  Shape out_shape = na.batched ? Shape{groups, L, C} : Shape{L, C};
  Tensor out(out_shape);
  for (int64_t s = 0; s < groups; ++s) {
    for (int64_t l = 0; l < L; ++l) {
      std::copy_n(na.value.ptr() + (s * R + rows[static_cast<size_t>(l)]) * C,
                  C, out.ptr() + (s * L + l) * C);
    }
  }
  return push("gather_rows", {a.id}, std::move(out), na.batched, false,
              [ia = a.id, rows, groups, R, C, L, sa](BackwardPass& p,
                                                     const Tensor& g) {
                Tensor da(sa);
                for (int64_t s = 0; s < groups; ++s) {
                  for (int64_t l = 0; l < L; ++l) {
                    double* dst =
                        da.ptr() + (s * R + rows[static_cast<size_t>(l)]) * C;
                    const double* src = g.ptr() + (s * L + l) * C;
                    for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
                  }
                }
                p.accumulate(ia, da);
              });
}

Var Graph::gather_rows(Var a, const std::vector<std::vector<int64_t>>& rows) {
  if (batch_size_ < 1 ||
      static_cast<int64_t>(rows.size()) != batch_size_) {
    throw ShapeError("per-sample gather_rows needs one index list per "
                     "sample (batch size " +
                     std::to_string(batch_size_) + ", got " +
                     std::to_string(rows.size()) + ")");
  }
  const Node& na = node(a);
  const Shape sa = na.value.shape();
  const size_t want_rank = na.batched ? 3 : 2;
  if (sa.size() != want_rank) {
    throw ShapeError("gather_rows expects a [R, C] table or a batched "
                     "[B, R, C] table, got " +
                     shape_string(sa));
  }
  const int64_t B = batch_size_;
  const int64_t R = sa[want_rank - 2];
  const int64_t C = sa[want_rank - 1];
  const int64_t L = static_cast<int64_t>(rows[0].size());
  for (const auto& list : rows) {
    if (static_cast<int64_t>(list.size()) != L) {
      throw ShapeError("per-sample gather_rows index lists differ in length");
    }
    for (int64_t r : list) {
      if (r < 0 || r >= R) {
        throw ShapeError("gather_rows index " + std::to_string(r) +
                         " out of range for " + shape_string(sa));
      }
    }
  }
  const bool own_rows = na.batched;
  Tensor out(Shape{B, L, C});
  for (int64_t s = 0; s < B; ++s) {
    const double* table = na.value.ptr() + (own_rows ? s * R * C : 0);
    for (int64_t l = 0; l < L; ++l) {
      std::copy_n(table + rows[static_cast<size_t>(s)][static_cast<size_t>(l)] * C, C,
                  out.ptr() + (s * L + l) * C);
    }
  }
  auto shared_rows =
      std::make_shared<const std::vector<std::vector<int64_t>>>(rows);
  return push(
      "gather_rows", {a.id}, std::move(out), true, false,
      [ia = a.id, shared_rows, own_rows, B, R, C, L, sa](BackwardPass& p,
                                                         const Tensor& g) {
        const auto& idx = *shared_rows;
        auto scatter = [&](int64_t s, double* table) {
          for (int64_t l = 0; l < L; ++l) {
            double* dst =
                table + idx[static_cast<size_t>(s)][static_cast<size_t>(l)] * C;
            const double* src = g.ptr() + (s * L + l) * C;
            for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
          }
        };
        if (own_rows) {
          Tensor da(sa);
          for (int64_t s = 0; s < B; ++s) scatter(s, da.ptr() + s * R * C);
          p.accumulate(ia, da);
        } else {
          p.accumulate_samples(ia, [&](int64_t s, std::span<double> out) {
            scatter(s, out.data());
          });
        }
      });
}

Var Graph::concat_rows(Var a, Var b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  auto rows_cols = [&](const Node& n) -> std::pair<int64_t, int64_t> {
    const Shape& s = n.value.shape();
    const size_t want = n.batched ? 3 : 2;
    if (s.size() != want) {
      throw ShapeError("concat_rows expects [R, C] or batched [B, R, C], got " +
                       both_shapes(na.value, nb.value));
    }
    return {s[want - 2], s[want - 1]};
  };
  const auto [ra, ca] = rows_cols(na);
  const auto [rb, cb] = rows_cols(nb);
  if (ca != cb) {
    throw ShapeError("concat_rows column counts differ: " +
                     both_shapes(na.value, nb.value));
  }
  const int64_t C = ca;
  const bool batched = na.batched || nb.batched;
  const int64_t groups = batched ? batch_size_ : 1;
  const int64_t R = ra + rb;
  Tensor out(batched ? Shape{groups, R, C} : Shape{R, C});
  const bool a_batched = na.batched;
  const bool b_batched = nb.batched;
  for (int64_t s = 0; s < groups; ++s) {
    std::copy_n(na.value.ptr() + (a_batched ? s * ra * C : 0), ra * C,
                out.ptr() + s * R * C);
    std::copy_n(nb.value.ptr() + (b_batched ? s * rb * C : 0), rb * C,
                out.ptr() + (s * R + ra) * C);
  }
  const Shape sa = na.value.shape();
  const Shape sb = nb.value.shape();
  return push(
      "concat_rows", {a.id, b.id}, std::move(out), batched, false,
      [ia = a.id, ib = b.id, ra, rb, R, C, groups, batched, a_batched,
       b_batched, sa, sb](BackwardPass& p, const Tensor& g) {
        auto route = [&](int32_t id, bool own, int64_t row0, int64_t nrows,
                         const Shape& shape) {
          if (!p.needs(id)) return;
          auto copy_sample = [&](int64_t s, double* dst) {
            const double* src = g.ptr() + (s * R + row0) * C;
            for (int64_t i = 0; i < nrows * C; ++i) dst[i] += src[i];
          };
          if (own || !batched) {
            Tensor d(shape);
            for (int64_t s = 0; s < groups; ++s) {
              copy_sample(s, d.ptr() + (own ? s * nrows * C : 0));
            }
            p.accumulate(id, d);
          } else {
            p.accumulate_samples(id, [&](int64_t s, std::span<double> out) {
              copy_sample(s, out.data());
            });
          }
        };
        route(ia, a_batched, 0, ra, sa);
        route(ib, b_batched, ra, rb, sb);
      });
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Node& nx = node(x);
  const Node& ng = node(gamma);
  const Node& nbeta = node(beta);
  if (nx.value.rank() < 1) throw ShapeError("layer_norm needs rank >= 1");
  const int64_t D = nx.value.shape().back();
  if (ng.value.shape() != Shape{D} || nbeta.value.shape() != Shape{D} ||
      ng.batched || nbeta.batched) {
    throw ShapeError("layer_norm affine parameters must be shared [" +
                     std::to_string(D) + "]: " +
                     both_shapes(ng.value, nbeta.value));
  }
  const int64_t rows = nx.value.numel() / D;
  auto stats = std::make_shared<std::vector<double>>(
      static_cast<size_t>(2 * rows));  // mean, rstd per row
  Tensor out(nx.value.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = nx.value.ptr() + r * D;
    double mean = 0.0;
    for (int64_t j = 0; j < D; ++j) mean += in[j];
    mean /= static_cast<double>(D);
    double var = 0.0;
    for (int64_t j = 0; j < D; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(D);
    const double rstd = 1.0 / std::sqrt(var + eps);
    (*stats)[static_cast<size_t>(2 * r)] = mean;
    (*stats)[static_cast<size_t>(2 * r + 1)] = rstd;
    double* o = out.ptr() + r * D;
    for (int64_t j = 0; j < D; ++j) {
      o[j] = (in[j] - mean) * rstd * ng.value[j] + nbeta.value[j];
    }
  }
  const int64_t batch = batch_size_;
  return push(
      "layer_norm", {x.id, gamma.id, beta.id}, std::move(out), nx.batched,
      false,
      [ix = x.id, ig = gamma.id, ib = beta.id, stats, rows, D, batch](
          BackwardPass& p, const Tensor& g) {
        const Tensor& vx = p.value(ix);
        const Tensor& vg = p.value(ig);
        auto xhat = [&](int64_t r, int64_t j) {
          return (vx[r * D + j] - (*stats)[static_cast<size_t>(2 * r)]) *
                 (*stats)[static_cast<size_t>(2 * r + 1)];
        };
        if (p.needs(ix)) {
          Tensor dx(vx.shape());
          std::vector<double> dxhat(static_cast<size_t>(D));
          for (int64_t r = 0; r < rows; ++r) {
            const double rstd = (*stats)[static_cast<size_t>(2 * r + 1)];
            double m1 = 0.0;
            double m2 = 0.0;
            for (int64_t j = 0; j < D; ++j) {
              const double d = g[r * D + j] * vg[j];
              dxhat[static_cast<size_t>(j)] = d;
              m1 += d;
              m2 += d * xhat(r, j);
            }
            m1 /= static_cast<double>(D);
            m2 /= static_cast<double>(D);
            for (int64_t j = 0; j < D; ++j) {
              dx[r * D + j] =
                  rstd * (dxhat[static_cast<size_t>(j)] - m1 - xhat(r, j) * m2);
            }
          }
          p.accumulate(ix, dx);
        }
        auto affine_grad = [&](int64_t begin, int64_t end, bool for_gamma,
                               std::span<double> out) {
          for (int64_t r = begin; r < end; ++r) {
            for (int64_t j = 0; j < D; ++j) {
              out[static_cast<size_t>(j)] +=
                  for_gamma ? g[r * D + j] * xhat(r, j) : g[r * D + j];
            }
          }
        };
        for (int which = 0; which < 2; ++which) {
          const int32_t id = which == 0 ? ig : ib;
          if (!p.needs(id)) continue;
          if (p.split()) {
            const int64_t per = rows / batch;
            p.accumulate_samples(id, [&](int64_t s, std::span<double> out) {
              affine_grad(s * per, (s + 1) * per, which == 0, out);
            });
          } else {
            Tensor d(Shape{D});
            affine_grad(0, rows, which == 0, d.data());
            p.accumulate(id, d);
          }
        }
      });
}

Var Graph::gelu(Var x) {
  const Node& nx = node(x);
  Tensor out(nx.value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    const double v = nx.value[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  return push("gelu", {x.id}, std::move(out), nx.batched, false,
              [ix = x.id](BackwardPass& p, const Tensor& g) {
                const Tensor& vx = p.value(ix);
                Tensor dx(vx.shape());
                constexpr double kInvSqrt2Pi =
                    std::numbers::inv_sqrtpi * kInvSqrt2;
                for (int64_t i = 0; i < dx.numel(); ++i) {
                  const double v = vx[i];
                  const double cdf =
                      0.5 * (1.0 + std::erf(v * kInvSqrt2));
                  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                  dx[i] = g[i] * (cdf + v * pdf);
                }
                p.accumulate(ix, dx);
              });
}

Var Graph::softmax(Var x) {
  const Node& nx = node(x);
  if (nx.value.rank() < 1) throw ShapeError("softmax needs rank >= 1");
  const int64_t D = nx.value.shape().back();
  const int64_t rows = D == 0 ? 0 : nx.value.numel() / D;
  Tensor out(nx.value.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = nx.value.ptr() + r * D;
    double* o = out.ptr() + r * D;
    const double hi = *std::max_element(in, in + D);
    double total = 0.0;
    for (int64_t j = 0; j < D; ++j) {
      o[j] = std::exp(in[j] - hi);
      total += o[j];
    }
    for (int64_t j = 0; j < D; ++j) o[j] /= total;
  }
  const int32_t self = static_cast<int32_t>(nodes_.size());
  return push("softmax", {x.id}, std::move(out), nx.batched, false,
              [ix = x.id, self, rows, D](BackwardPass& p, const Tensor& g) {
                const Tensor& y = p.value(self);
                Tensor dx(y.shape());
                for (int64_t r = 0; r < rows; ++r) {
                  double dot = 0.0;
                  for (int64_t j = 0; j < D; ++j) {
                    dot += g[r * D + j] * y[r * D + j];
                  }
                  for (int64_t j = 0; j < D; ++j) {
                    dx[r * D + j] = y[r * D + j] * (g[r * D + j] - dot);
                  }
                }
                p.accumulate(ix, dx);
              });
}

namespace {

enum ReduceKind : int { kReduceSum, kReduceMean, kReduceSumSq };

}  // namespace

Var Graph::reduction(const char* op, Var x, Reduce reduce, int kind) {
  const Node& nx = node(x);
  int64_t groups = 1;
  Shape out_shape{};
  bool out_batched = false;
  bool couples = false;
  if (reduce == Reduce::kPerSample) {
    if (!nx.batched) {
      throw InvalidArgumentError(std::string(op) +
                                 ": per-sample reduction needs a batched input");
    }
    groups = batch_size_;
    out_shape = Shape{groups};
    out_batched = true;
  } else {
    couples = nx.batched;
  }
  const int64_t block = groups == 0 ? 0 : nx.value.numel() / groups;
  Tensor out(out_shape);
  for (int64_t s = 0; s < groups; ++s) {
    double acc = 0.0;
    const double* in = nx.value.ptr() + s * block;
    for (int64_t i = 0; i < block; ++i) {
      acc += kind == kReduceSumSq ? in[i] * in[i] : in[i];
    }
    if (kind == kReduceMean) acc /= static_cast<double>(block);
    out[s] = acc;
  }
  return push(op, {x.id}, std::move(out), out_batched, couples,
              [ix = x.id, groups, block, kind](BackwardPass& p,
                                               const Tensor& g) {
                const Tensor& in = p.value(ix);
                Tensor dx(in.shape());
                const double inv_block = 1.0 / static_cast<double>(block);
                for (int64_t s = 0; s < groups; ++s) {
                  for (int64_t i = 0; i < block; ++i) {
                    const int64_t t = s * block + i;
                    if (kind == kReduceSum) {
                      dx[t] = g[s];
                    } else if (kind == kReduceMean) {
                      dx[t] = g[s] * inv_block;
                    } else {
                      dx[t] = 2.0 * in[t] * g[s];
                    }
                  }
                }
                p.accumulate(ix, dx);
              });
}

Var Graph::sum(Var x, Reduce reduce) {
  return reduction("sum", x, reduce, kReduceSum);
}

Var Graph::mean(Var x, Reduce reduce) {
  return reduction("mean", x, reduce, kReduceMean);
}

Var Graph::sum_sq(Var x, Reduce reduce) {
  return reduction("sum_sq", x, reduce, kReduceSumSq);
}

Var Graph::mean_axis(Var x, int axis) {
  const Node& nx = node(x);
  const int64_t r = nx.value.rank();
  if (axis < 0) axis += static_cast<int>(r);
  if (axis < 0 || axis >= r) {
    throw ShapeError("mean_axis: axis out of range for " +
                     shape_string(nx.value.shape()));
  }
  const Shape& s = nx.value.shape();
  int64_t outer = 1;
  int64_t inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < r; ++i) inner *= s[static_cast<size_t>(i)];
  const int64_t n = s[static_cast<size_t>(axis)];
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + axis);
  Tensor out(out_shape);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t k = 0; k < n; ++k) {
      const double* in = nx.value.ptr() + (o * n + k) * inner;
      double* dst = out.ptr() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += in[i];
    }
  }
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= static_cast<double>(n);
  const bool over_samples = nx.batched && axis == 0;
  return push("mean_axis", {x.id}, std::move(out), nx.batched && !over_samples,
              over_samples,
              [ix = x.id, outer, inner, n, in_shape = s](BackwardPass& p,
                                                        const Tensor& g) {
                Tensor dx(in_shape);
                const double inv = 1.0 / static_cast<double>(n);
                for (int64_t o = 0; o < outer; ++o) {
                  for (int64_t k = 0; k < n; ++k) {
                    double* dst = dx.ptr() + (o * n + k) * inner;
                    const double* src = g.ptr() + o * inner;
                    for (int64_t i = 0; i < inner; ++i) dst[i] = src[i] * inv;
                  }
                }
                p.accumulate(ix, dx);
              });
}

Var Graph::cross_entropy(Var logits, const std::vector<int64_t>& labels) {
  const Node& nl = node(logits);
  if (nl.value.rank() != 2) {
    throw ShapeError("cross_entropy expects [N, K] logits, got " +
                     shape_string(nl.value.shape()));
  }
  const int64_t N = nl.value.shape()[0];
  const int64_t K = nl.value.shape()[1];
  if (static_cast<int64_t>(labels.size()) != N) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + shape_string(nl.value.shape()));
  }
  for (int64_t y : labels) {
    if (y < 0 || y >= K) {
      throw InvalidArgumentError("cross_entropy label out of range");
    }
  }
  Tensor out(Shape{N});
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(N * K));
  for (int64_t i = 0; i < N; ++i) {
    const double* z = nl.value.ptr() + i * K;
    const double hi = *std::max_element(z, z + K);
    double total = 0.0;
    for (int64_t k = 0; k < K; ++k) total += std::exp(z[k] - hi);
    const double lse = hi + std::log(total);
    for (int64_t k = 0; k < K; ++k) {
      (*probs)[static_cast<size_t>(i * K + k)] = std::exp(z[k] - lse);
    }
    out[i] = lse - z[labels[static_cast<size_t>(i)]];
  }
  return push("cross_entropy", {logits.id}, std::move(out), nl.batched, false,
              [il = logits.id, probs, labels, N, K](BackwardPass& p,
                                                    const Tensor& g) {
                Tensor dz(Shape{N, K});
                for (int64_t i = 0; i < N; ++i) {
                  for (int64_t k = 0; k < K; ++k) {
                    const double onehot =
                        labels[static_cast<size_t>(i)] == k ? 1.0 : 0.0;
                    dz[i * K + k] =
                        g[i] * ((*probs)[static_cast<size_t>(i * K + k)] - onehot);
                  }
                }
                p.accumulate(il, dz);
              });
}

std::map<std::string, Tensor> Graph::backward(Var loss) const {
  const Node& nl = node(loss);
  if (nl.value.numel() != 1) {
    throw InvalidArgumentError("backward needs a scalar loss, got shape " +
                               shape_string(nl.value.shape()));
  }
  BackwardPass pass(*this, false, nullptr);
  if (nl.requires_grad) pass.run(loss, Tensor(nl.value.shape(), 1.0));
  std::map<std::string, Tensor> grads;
  for (int32_t id : param_nodes_) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    const size_t k = static_cast<size_t>(id);
    grads.emplace(n.name, pass.has_grad_[k] ? pass.grads_[k]
                                          : Tensor(n.value.shape()));
  }
  return grads;
}

PerSampleGrads Graph::per_sample_backward(Var losses) const {
  const Node& nl = node(losses);
  if (batch_size_ < 1) {
    throw InvalidArgumentError(
        "per_sample_backward needs a graph with a sample axis");
  }
  if (!nl.batched || nl.value.shape() != Shape{batch_size_}) {
    throw InvalidArgumentError(
        "per_sample_backward needs a batched loss vector of shape [" +
        std::to_string(batch_size_) + "], got " +
        shape_string(nl.value.shape()));
  }
  if (nl.coupled) {
    throw NonSeparableGraphError(
        "loss depends on a cross-sample operation; per-sample gradients "
        "(and per-sample clipping) are undefined for this graph");
  }
  std::vector<PerSampleGrads::Slot> slots;
  int64_t offset = 0;
  for (int32_t id : param_nodes_) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    slots.push_back({n.name, n.value.shape(), offset, n.value.numel()});
    offset += n.value.numel();
  }
  PerSampleGrads rows(batch_size_, std::move(slots));
  BackwardPass pass(*this, true, &rows);
  if (nl.requires_grad) pass.run(losses, Tensor(nl.value.shape(), 1.0));
  return rows;
}

}  // namespace dpmaes
