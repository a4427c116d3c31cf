#include "sonoalign/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <utility>

#include "sonoalign/errors.hpp"

namespace sonoalign::ad {

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool leaf = true;
  std::string name = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
  const Tape* tape = nullptr;
  std::size_t index = 0;

  Matrix& ensure_grad() {
    if (!has_grad) {
      grad = Matrix(value.rows(), value.cols());
      has_grad = true;
    }
    return grad;
  }
};

}  // namespace detail

namespace {

thread_local Tape* g_active_tape = nullptr;

const detail::Node& node_of(const Tensor& t, const std::shared_ptr<detail::Node>& n) {
  if (!n) throw std::logic_error("use of an undefined tensor");
  (void)t;
  return *n;
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

void require_scalar(const char* op, const Matrix& s) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw DimensionError(std::string(op) + ": expected 1x1 scalar, got " + s.shape_string());
  }
}

template <typename F>
Matrix map(const Matrix& a, F f) {
  Matrix out(a.rows(), a.cols());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Matrix(1, 1, v), requires_grad);
}

const Matrix& Tensor::value() const { return node_of(*this, node_).value; }

Matrix& Tensor::mutable_value() {
  if (!node_) throw std::logic_error("use of an undefined tensor");
  if (!node_->leaf) throw std::logic_error("mutable_value on a recorded intermediate");
  return node_->value;
}

double Tensor::item() const {
  const Matrix& v = value();
  require_scalar("item", v);
  return v[0];
}

bool Tensor::requires_grad() const { return node_of(*this, node_).requires_grad; }
bool Tensor::is_leaf() const { return node_of(*this, node_).leaf; }

const Matrix* Tensor::grad() const {
  const auto& n = node_of(*this, node_);
  return n.has_grad ? &n.grad : nullptr;
}

void Tensor::zero_grad() {
  if (!node_) return;
  node_->grad = Matrix();
  node_->has_grad = false;
}

const std::string& Tensor::op_name() const { return node_of(*this, node_).name; }

Tensor Tensor::clone() const { return Tensor(value(), requires_grad()); }

// ---- Tape -------------------------------------------------------------------

Tensor make_op(std::string name, Matrix value, std::vector<Tensor> inputs, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError("non-finite value produced by " + name);
  }
  bool any_requires = false;
  for (const auto& in : inputs) {
    if (!in.defined()) throw std::logic_error(name + ": undefined input tensor");
    any_requires = any_requires || in.requires_grad();
  }
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->name = std::move(name);
  node->leaf = false;
  Tape* tape = g_active_tape;
  if (tape != nullptr && any_requires) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(std::move(in.node_));
    node->backward = std::move(backward);
    node->tape = tape;
    node->index = tape->nodes_.size();
    tape->nodes_.push_back(node);
  }
  return Tensor(std::move(node));
}

Tape::~Tape() { clear(); }

void Tape::clear() {
  for (auto& n : nodes_) n->tape = nullptr;
  nodes_.clear();
}

void Tape::backward(const Tensor& loss) {
  const auto& root = loss.node_;
  if (!root) throw std::logic_error("backward on an undefined tensor");
  if (root->value.rows() != 1 || root->value.cols() != 1) {
    throw DimensionError("backward: loss must be 1x1, got " + root->value.shape_string());
  }
  if (root->tape != this) throw std::logic_error("backward: loss was not recorded on this tape");

  const std::size_t last = root->index;
  for (std::size_t i = 0; i <= last; ++i) {
    auto& n = *nodes_[i];
    n.grad = Matrix(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  root->grad[0] = 1.0;

  // Leaf contributions are summed per pass, then added to the leaf once, so a
  // repeated pass adds exactly the same matrix again.
  std::unordered_map<detail::Node*, Matrix> leaf_pass;
  std::vector<detail::Node*> leaf_order;
  std::vector<Matrix*> input_grads;
  for (std::size_t i = last + 1; i-- > 0;) {
    auto& n = *nodes_[i];
    if (!n.backward) continue;
    input_grads.assign(n.inputs.size(), nullptr);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      auto& in = *n.inputs[k];
      if (!in.requires_grad) continue;
      if (!in.leaf) {
        input_grads[k] = &in.ensure_grad();
        continue;
      }
      auto [it, fresh] = leaf_pass.try_emplace(&in, in.value.rows(), in.value.cols());
      if (fresh) leaf_order.push_back(&in);
      input_grads[k] = &it->second;
    }
    n.backward(n.value, n.grad, input_grads);
  }
  for (detail::Node* leaf : leaf_order) {
    Matrix& g = leaf->ensure_grad();
    const Matrix& pass = leaf_pass.at(leaf);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += pass[k];
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() noexcept { return g_active_tape; }

void backward(const Tensor& loss) {
  if (g_active_tape == nullptr) throw std::logic_error("backward: no active tape");
  g_active_tape->backward(loss);
}

// ---- primitives -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + av.shape_string() + " * " +
                         bv.shape_string() + ")");
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Matrix out(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av(i, p);
      if (aip == 0.0) continue;
      const double* brow = &bv.data()[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return make_op("matmul", std::move(out), {a, b},
                 [a, b, m, k, n](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   const Matrix& av = a.value();
                   const Matrix& bv = b.value();
                   if (Matrix* ga = grads[0]) {
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         double acc = 0.0;
                         for (std::size_t j = 0; j < n; ++j) acc += g(i, j) * bv(p, j);
                         (*ga)(i, p) += acc;
                       }
                   }
                   if (Matrix* gb = grads[1]) {
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         const double aip = av(i, p);
                         if (aip == 0.0) continue;
                         for (std::size_t j = 0; j < n; ++j) (*gb)(p, j) += aip * g(i, j);
                       }
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  return make_op("transpose", a.value().transposed(), {a},
                 [](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     for (std::size_t r = 0; r < g.rows(); ++r)
                       for (std::size_t c = 0; c < g.cols(); ++c) (*ga)(c, r) += g(r, c);
                   }
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a.value(), b.value());
  Matrix out = a.value();
  auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  return make_op("add", std::move(out), {a, b},
                 [](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   for (Matrix* gi : grads) {
                     if (!gi) continue;
                     auto d = gi->data();
                     auto gd = g.data();
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i];
                   }
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a.value(), b.value());
  Matrix out = a.value();
  auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] -= bd[i];
  return make_op("sub", std::move(out), {a, b},
                 [](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   auto gd = g.data();
                   if (Matrix* ga = grads[0]) {
                     auto d = ga->data();
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i];
                   }
                   if (Matrix* gb = grads[1]) {
                     auto d = gb->data();
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] -= gd[i];
                   }
                 });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape("hadamard", a.value(), b.value());
  Matrix out = a.value();
  auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] *= bd[i];
  return make_op("hadamard", std::move(out), {a, b},
                 [a, b](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   auto gd = g.data();
                   if (Matrix* ga = grads[0]) {
                     auto d = ga->data();
                     auto bd = b.value().data();
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * bd[i];
                   }
                   if (Matrix* gb = grads[1]) {
                     auto d = gb->data();
                     auto ad = a.value().data();
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * ad[i];
                   }
                 });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("add_row: expected 1x" + std::to_string(av.cols()) + " row, got " +
                         rv.shape_string());
  }
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv[c];
  return make_op("add_row", std::move(out), {a, row},
                 [](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     auto d = ga->data();
                     auto gd = g.data();
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i];
                   }
                   if (Matrix* gr = grads[1]) {
                     for (std::size_t r = 0; r < g.rows(); ++r)
                       for (std::size_t c = 0; c < g.cols(); ++c) (*gr)[c] += g(r, c);
                   }
                 });
}

Tensor scale(const Tensor& a, double factor) {
  Matrix out = map(a.value(), [factor](double x) { return x * factor; });
  return make_op("scale", std::move(out), {a},
                 [factor](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     auto d = ga->data();
                     auto gd = g.data();
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * factor;
                   }
                 });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  require_scalar("mul_scalar", s.value());
  const double sv = s.value()[0];
  Matrix out = map(a.value(), [sv](double x) { return x * sv; });
  return make_op("mul_scalar", std::move(out), {a, s},
                 [a, sv](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   auto gd = g.data();
                   if (Matrix* ga = grads[0]) {
                     auto d = ga->data();
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * sv;
                   }
                   if (Matrix* gs = grads[1]) {
                     auto ad = a.value().data();
                     double acc = 0.0;
                     for (std::size_t i = 0; i < gd.size(); ++i) acc += gd[i] * ad[i];
                     (*gs)[0] += acc;
                   }
                 });
}

Tensor div_scalar(const Tensor& a, const Tensor& s) {
  require_scalar("div_scalar", s.value());
  const double sv = s.value()[0];
  Matrix out = map(a.value(), [sv](double x) { return x / sv; });
  return make_op("div_scalar", std::move(out), {a, s},
                 [sv](const Matrix& out, const Matrix& g, std::span<Matrix*> grads) {
                   auto gd = g.data();
                   if (Matrix* ga = grads[0]) {
                     auto d = ga->data();
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] / sv;
                   }
                   if (Matrix* gs = grads[1]) {
                     // d(a/s)/ds = -a/s^2 = -out/s
                     auto od = out.data();
                     double acc = 0.0;
                     for (std::size_t i = 0; i < gd.size(); ++i) acc += gd[i] * od[i];
                     (*gs)[0] -= acc / sv;
                   }
                 });
}

Tensor row_softmax(const Tensor& a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    auto in = av.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      z += o[c];
    }
    for (double& v : o) v /= z;
  }
  return make_op("row_softmax", std::move(out), {a},
                 [](const Matrix& y, const Matrix& g, std::span<Matrix*> grads) {
                   Matrix* ga = grads[0];
                   if (!ga) return;
                   for (std::size_t r = 0; r < y.rows(); ++r) {
                     double dot = 0.0;
                     for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
                     for (std::size_t c = 0; c < y.cols(); ++c)
                       (*ga)(r, c) += y(r, c) * (g(r, c) - dot);
                   }
                 });
}

Tensor row_log_softmax(const Tensor& a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    auto in = av.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (double x : in) z += std::exp(x - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] - lse;
  }
  return make_op("row_log_softmax", std::move(out), {a},
                 [](const Matrix& y, const Matrix& g, std::span<Matrix*> grads) {
                   Matrix* ga = grads[0];
                   if (!ga) return;
                   for (std::size_t r = 0; r < y.rows(); ++r) {
                     double gsum = 0.0;
                     for (std::size_t c = 0; c < y.cols(); ++c) gsum += g(r, c);
                     for (std::size_t c = 0; c < y.cols(); ++c)
                       (*ga)(r, c) += g(r, c) - std::exp(y(r, c)) * gsum;
                   }
                 });
}

Tensor tanh_elem(const Tensor& a) {
  return make_op("tanh", map(a.value(), [](double x) { return std::tanh(x); }), {a},
                 [](const Matrix& y, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     auto d = ga->data();
                     auto yd = y.data();
                     auto gd = g.data();
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * (1.0 - yd[i] * yd[i]);
                   }
                 });
}

Tensor relu_elem(const Tensor& a) {
  return make_op("relu", map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a},
                 [](const Matrix& y, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     auto d = ga->data();
                     auto yd = y.data();
                     auto gd = g.data();
                     for (std::size_t i = 0; i < d.size(); ++i)
                       if (yd[i] > 0.0) d[i] += gd[i];
                   }
                 });
}

Tensor exp_elem(const Tensor& a) {
  return make_op("exp", map(a.value(), [](double x) { return std::exp(x); }), {a},
                 [](const Matrix& y, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     auto d = ga->data();
                     auto yd = y.data();
                     auto gd = g.data();
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * yd[i];
                   }
                 });
}

Tensor sigmoid_elem(const Tensor& a) {
  auto sig = [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return make_op("sigmoid", map(a.value(), sig), {a},
                 [](const Matrix& y, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     auto d = ga->data();
                     auto yd = y.data();
                     auto gd = g.data();
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * yd[i] * (1.0 - yd[i]);
                   }
                 });
}

Tensor clamp_elem(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) {
    throw ArgumentError("clamp: lo (" + std::to_string(lo) + ") > hi (" + std::to_string(hi) + ")");
  }
  Matrix out = map(a.value(), [lo, hi](double x) { return std::clamp(x, lo, hi); });
  return make_op("clamp", std::move(out), {a},
                 [a, lo, hi](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     auto d = ga->data();
                     auto ad = a.value().data();
                     auto gd = g.data();
                     for (std::size_t i = 0; i < d.size(); ++i)
                       if (lo < ad[i] && ad[i] < hi) d[i] += gd[i];
                   }
                 });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  const Matrix& av = a.value();
  const std::size_t m = av.rows(), d = av.cols();
  if (d == 0) throw DimensionError("layer_norm: empty rows");
  if (!(eps > 0.0)) throw ArgumentError("layer_norm: eps must be positive");
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(d));
  }
  Matrix normalized(m, d);
  std::vector<double> inv_std(m);
  Matrix out(m, d);
  const Matrix& gv = gain.value();
  const Matrix& bv = bias.value();
  for (std::size_t r = 0; r < m; ++r) {
    auto x = av.row(r);
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      normalized(r, c) = (x[c] - mean) * is;
      out(r, c) = normalized(r, c) * gv[c] + bv[c];
    }
  }
  return make_op(
      "layer_norm", std::move(out), {a, gain, bias},
      [gain, normalized = std::move(normalized), inv_std = std::move(inv_std), m, d](
          const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
        const Matrix& gv = gain.value();
        if (Matrix* gg = grads[1]) {
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < d; ++c) (*gg)[c] += g(r, c) * normalized(r, c);
        }
        if (Matrix* gb = grads[2]) {
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < d; ++c) (*gb)[c] += g(r, c);
        }
        if (Matrix* ga = grads[0]) {
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < m; ++r) {
            double mean_dx = 0.0, mean_dx_x = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dx = g(r, c) * gv[c];
              mean_dx += dx;
              mean_dx_x += dx * normalized(r, c);
            }
            mean_dx *= inv_d;
            mean_dx_x *= inv_d;
            for (std::size_t c = 0; c < d; ++c) {
              const double dx = g(r, c) * gv[c];
              (*ga)(r, c) += inv_std[r] * (dx - mean_dx - normalized(r, c) * mean_dx_x);
            }
          }
        }
      });
}

Tensor l2_normalize(const Tensor& a, double eps) {
  if (!(eps > 0.0)) throw ArgumentError("l2_normalize: eps must be positive");
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  std::vector<double> denom(av.rows());
  std::vector<bool> clipped(av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double sq = 0.0;
    for (double v : av.row(r)) sq += v * v;
    const double norm = std::sqrt(sq);
    clipped[r] = norm < eps;
    denom[r] = clipped[r] ? eps : norm;
    for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) = av(r, c) / denom[r];
  }
  return make_op("l2_normalize", std::move(out), {a},
                 [denom = std::move(denom), clipped = std::move(clipped)](
                     const Matrix& y, const Matrix& g, std::span<Matrix*> grads) {
                   Matrix* ga = grads[0];
                   if (!ga) return;
                   for (std::size_t r = 0; r < y.rows(); ++r) {
                     double dot = 0.0;
                     if (!clipped[r]) {
                       for (std::size_t c = 0; c < y.cols(); ++c) dot += y(r, c) * g(r, c);
                     }
                     for (std::size_t c = 0; c < y.cols(); ++c)
                       (*ga)(r, c) += (g(r, c) - y(r, c) * dot) / denom[r];
                   }
                 });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return make_op("sum", Matrix(1, 1, total), {a},
                 [](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     for (double& v : ga->data()) v += g[0];
                   }
                 });
}

Tensor mean_rows(const Tensor& a) {
  const Matrix& av = a.value();
  if (av.rows() == 0) throw DimensionError("mean_rows: no rows");
  Matrix out(1, av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out[c] += av(r, c);
  const double inv = 1.0 / static_cast<double>(av.rows());
  for (double& v : out.data()) v *= inv;
  const std::size_t m = av.rows();
  return make_op("mean_rows", std::move(out), {a},
                 [m, inv](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     for (std::size_t r = 0; r < m; ++r)
                       for (std::size_t c = 0; c < g.cols(); ++c) (*ga)(r, c) += g[c] * inv;
                   }
                 });
}

Tensor diagonal(const Tensor& a) {
  const Matrix& av = a.value();
  if (av.rows() != av.cols()) throw DimensionError("diagonal: matrix not square " + av.shape_string());
  Matrix out(1, av.rows());
  for (std::size_t i = 0; i < av.rows(); ++i) out[i] = av(i, i);
  return make_op("diagonal", std::move(out), {a},
                 [](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     for (std::size_t i = 0; i < g.cols(); ++i) (*ga)(i, i) += g[i];
                   }
                 });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  const Matrix& av = a.value();
  if (begin + count > av.rows()) throw DimensionError("slice_rows: range out of bounds");
  Matrix out(count, av.cols());
  std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>(begin * av.cols()),
              count * av.cols(), out.data().begin());
  const std::size_t offset = begin * av.cols();
  return make_op("slice_rows", std::move(out), {a},
                 [offset](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     auto d = ga->data();
                     auto gd = g.data();
                     for (std::size_t i = 0; i < gd.size(); ++i) d[offset + i] += gd[i];
                   }
                 });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  const Matrix& av = a.value();
  if (begin + count > av.cols()) throw DimensionError("slice_cols: range out of bounds");
  Matrix out(av.rows(), count);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = av(r, begin + c);
  return make_op("slice_cols", std::move(out), {a},
                 [begin](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* ga = grads[0]) {
                     for (std::size_t r = 0; r < g.rows(); ++r)
                       for (std::size_t c = 0; c < g.cols(); ++c) (*ga)(r, begin + c) += g(r, c);
                   }
                 });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::size_t at = 0;
  for (const auto& p : parts) {
    auto src = p.value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(at));
    at += src.size();
  }
  std::vector<std::size_t> sizes;
  sizes.reserve(parts.size());
  for (const auto& p : parts) sizes.push_back(p.value().size());
  return make_op("concat_rows", std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                 [sizes = std::move(sizes)](const Matrix&, const Matrix& g,
                                            std::span<Matrix*> grads) {
                   std::size_t at = 0;
                   auto gd = g.data();
                   for (std::size_t k = 0; k < grads.size(); ++k) {
                     if (Matrix* gi = grads[k]) {
                       auto d = gi->data();
                       for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[at + i];
                     }
                     at += sizes[k];
                   }
                 });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    offsets.push_back(cols);
    cols += p.cols();
  }
  Matrix out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Matrix& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < pv.cols(); ++c) out(r, offsets[k] + c) = pv(r, c);
  }
  return make_op("concat_cols", std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                 [offsets = std::move(offsets)](const Matrix&, const Matrix& g,
                                                std::span<Matrix*> grads) {
                   for (std::size_t k = 0; k < grads.size(); ++k) {
                     Matrix* gi = grads[k];
                     if (!gi) continue;
                     for (std::size_t r = 0; r < gi->rows(); ++r)
                       for (std::size_t c = 0; c < gi->cols(); ++c)
                         (*gi)(r, c) += g(r, offsets[k] + c);
                   }
                 });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  const Matrix& tv = table.value();
  Matrix out(indices.size(), tv.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= tv.rows()) throw DimensionError("gather_rows: index out of range");
    auto src = tv.row(indices[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return make_op("gather_rows", std::move(out), {table},
                 [idx = std::vector<std::size_t>(indices.begin(), indices.end())](
                     const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   if (Matrix* gt = grads[0]) {
                     for (std::size_t r = 0; r < idx.size(); ++r)
                       for (std::size_t c = 0; c < g.cols(); ++c) (*gt)(idx[r], c) += g(r, c);
                   }
                 });
}

Tensor bag_mean(const Tensor& table, const std::vector<std::vector<std::size_t>>& bags) {
  const Matrix& tv = table.value();
  Matrix out(bags.size(), tv.cols());
  for (std::size_t r = 0; r < bags.size(); ++r) {
    if (bags[r].empty()) continue;
    auto o = out.row(r);
    for (std::size_t id : bags[r]) {
      if (id >= tv.rows()) throw DimensionError("bag_mean: index out of range");
      auto src = tv.row(id);
      for (std::size_t c = 0; c < o.size(); ++c) o[c] += src[c];
    }
    const double inv = 1.0 / static_cast<double>(bags[r].size());
    for (double& v : o) v *= inv;
  }
  return make_op("bag_mean", std::move(out), {table},
                 [bags](const Matrix&, const Matrix& g, std::span<Matrix*> grads) {
                   Matrix* gt = grads[0];
                   if (!gt) return;
                   for (std::size_t r = 0; r < bags.size(); ++r) {
                     if (bags[r].empty()) continue;
                     const double inv = 1.0 / static_cast<double>(bags[r].size());
                     for (std::size_t id : bags[r])
                       for (std::size_t c = 0; c < g.cols(); ++c) (*gt)(id, c) += g(r, c) * inv;
                   }
                 });
}

}  // namespace sonoalign::ad
