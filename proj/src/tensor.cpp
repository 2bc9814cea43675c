#include "hmr/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace hmr {

namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

constexpr Scalar kNormEps = 1e-5;
constexpr Scalar kLogClamp = 1e-12;

[[noreturn]] void fail_shape(const std::string& msg) { throw std::invalid_argument(msg); }

void require(bool ok, const std::string& msg) {
  if (!ok) fail_shape(msg);
}

bool grad_needed(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

Tensor make_output(Shape shape, Array data, bool requires_grad) {
  Tensor out(std::move(shape), std::move(data));
  out.set_requires_grad(requires_grad);
  return out;
}

Scalar stable_sigmoid(Scalar x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  Scalar e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, bool requires_grad) : s_(std::make_shared<TensorStorage>()) {
  for (int e : shape) require(e > 0, "tensor extents must be positive, got " + shape_str(shape));
  s_->shape = std::move(shape);
  s_->data = Array::Zero(numel(s_->shape));
  s_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, Array data, bool requires_grad) : s_(std::make_shared<TensorStorage>()) {
  require(numel(shape) == data.size(), "data length does not match shape " + shape_str(shape));
  s_->shape = std::move(shape);
  s_->data = std::move(data);
  s_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return Tensor(std::move(shape), requires_grad); }

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  Tensor t(shape, Array::Constant(numel(shape), value));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

Tensor Tensor::from(Shape shape, std::initializer_list<Scalar> values, bool requires_grad) {
  Array a(static_cast<std::int64_t>(values.size()));
  std::int64_t i = 0;
  for (Scalar v : values) a[i++] = v;
  return Tensor(std::move(shape), std::move(a), requires_grad);
}

Array& Tensor::grad() {
  s_->ensure_grad();
  return s_->grad;
}

Scalar Tensor::value() const {
  require(s_->size() == 1, "value() needs a one-element tensor, got " + shape_str(s_->shape));
  return s_->data[0];
}

Scalar Tensor::at(int i, int j) const {
  return s_->data[static_cast<std::int64_t>(i) * s_->shape[1] + j];
}

Scalar Tensor::at(int i, int j, int k) const {
  return s_->data[(static_cast<std::int64_t>(i) * s_->shape[1] + j) * s_->shape[2] + k];
}

Tensor Tensor::detached() const {
  return Tensor(s_->shape, s_->data, false);
}

bool Tensor::all_finite() const { return s_->data.allFinite(); }

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  loss.storage()->ensure_grad();
  loss.storage()->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->has_grad()) it->backward();
  }
}

// ---- helpers shared by op implementations ----------------------------------

namespace {

void accumulate(const std::shared_ptr<TensorStorage>& s, const Array& g) {
  if (!s->requires_grad) return;
  s->ensure_grad();
  s->grad += g;
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2,
          "matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  require(a.dim(1) == b.dim(0),
          "matmul inner extents disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Array out(static_cast<std::int64_t>(m) * n);
  {
    ConstMatMap am(a.data().data(), m, k), bm(b.data().data(), k, n);
    MatMap(out.data(), m, n).noalias() = am * bm;
  }
  Tensor y = make_output({m, n}, std::move(out), tape.recording() && grad_needed({&a, &b}));
  if (y.requires_grad()) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    tape.record({{as, bs},
                 ys,
                 [as, bs, ys, m, k, n] {
                   ConstMatMap gy(ys->grad.data(), m, n);
                   if (as->requires_grad) {
                     as->ensure_grad();
                     ConstMatMap bm(bs->data.data(), k, n);
                     MatMap(as->grad.data(), m, k).noalias() += gy * bm.transpose();
                   }
                   if (bs->requires_grad) {
                     bs->ensure_grad();
                     ConstMatMap am(as->data.data(), m, k);
                     MatMap(bs->grad.data(), k, n).noalias() += am.transpose() * gy;
                   }
                 }});
  }
  return y;
}

namespace {

// col[(ci*9 + ky*3 + kx), y*W + x] = x[ci, y+ky-1, x+kx-1] (zero padded)
RowMat im2col3x3(const Array& x, int c_in, int h, int w) {
  RowMat col = RowMat::Zero(static_cast<std::int64_t>(c_in) * 9, static_cast<std::int64_t>(h) * w);
  for (int ci = 0; ci < c_in; ++ci) {
    const Scalar* plane = x.data() + static_cast<std::int64_t>(ci) * h * w;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const int row = ci * 9 + ky * 3 + kx;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const int x0 = std::max(0, 1 - kx);
          const int x1 = std::min(w, w + 1 - kx);
          for (int xx = x0; xx < x1; ++xx)
            col(row, static_cast<std::int64_t>(y) * w + xx) = plane[static_cast<std::int64_t>(sy) * w + xx + kx - 1];
        }
      }
    }
  }
  return col;
}

void col2im3x3_add(const RowMat& col, int c_in, int h, int w, Array& out) {
  for (int ci = 0; ci < c_in; ++ci) {
    Scalar* plane = out.data() + static_cast<std::int64_t>(ci) * h * w;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const int row = ci * 9 + ky * 3 + kx;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const int x0 = std::max(0, 1 - kx);
          const int x1 = std::min(w, w + 1 - kx);
          for (int xx = x0; xx < x1; ++xx)
            plane[static_cast<std::int64_t>(sy) * w + xx + kx - 1] += col(row, static_cast<std::int64_t>(y) * w + xx);
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& k) {
  require(x.rank() == 3, "conv2d input must be [C,H,W], got " + shape_str(x.shape()));
  require(k.rank() == 4 && k.dim(2) == 3 && k.dim(3) == 3,
          "conv2d kernel must be [Cout,Cin,3,3], got " + shape_str(k.shape()));
  require(x.dim(0) == k.dim(1), "conv2d channel mismatch: input " + shape_str(x.shape()) +
                                    " vs kernel " + shape_str(k.shape()));
  const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2), c_out = k.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;

  auto col = std::make_shared<RowMat>(im2col3x3(x.data(), c_in, h, w));
  Array out(static_cast<std::int64_t>(c_out) * hw);
  {
    ConstMatMap km(k.data().data(), c_out, static_cast<std::int64_t>(c_in) * 9);
    MatMap(out.data(), c_out, hw).noalias() = km * (*col);
  }
  Tensor y = make_output({c_out, h, w}, std::move(out), tape.recording() && grad_needed({&x, &k}));
  if (y.requires_grad()) {
    auto xs = x.storage(), ks = k.storage(), ys = y.storage();
    tape.record({{xs, ks},
                 ys,
                 [xs, ks, ys, col, c_in, c_out, h, w, hw] {
                   ConstMatMap gy(ys->grad.data(), c_out, hw);
                   if (ks->requires_grad) {
                     ks->ensure_grad();
                     MatMap(ks->grad.data(), c_out, static_cast<std::int64_t>(c_in) * 9).noalias() +=
                         gy * col->transpose();
                   }
                   if (xs->requires_grad) {
                     xs->ensure_grad();
                     ConstMatMap km(ks->data.data(), c_out, static_cast<std::int64_t>(c_in) * 9);
                     RowMat colgrad = km.transpose() * gy;
                     col2im3x3_add(colgrad, c_in, h, w, xs->grad);
                   }
                 }});
  }
  return y;
}

Tensor avg_pool2(Tape& tape, const Tensor& x) {
  require(x.rank() == 3, "avg_pool2 input must be [C,H,W], got " + shape_str(x.shape()));
  require(x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0,
          "avg_pool2 needs even spatial extents, got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2), oh = h / 2, ow = w / 2;
  Array out(static_cast<std::int64_t>(c) * oh * ow);
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const std::int64_t base = (static_cast<std::int64_t>(ci) * h + 2 * i) * w + 2 * j;
        out[(static_cast<std::int64_t>(ci) * oh + i) * ow + j] =
            0.25 * (x.data()[base] + x.data()[base + 1] + x.data()[base + w] + x.data()[base + w + 1]);
      }
  Tensor y = make_output({c, oh, ow}, std::move(out), tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys, c, h, w, oh, ow] {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   for (int ci = 0; ci < c; ++ci)
                     for (int i = 0; i < oh; ++i)
                       for (int j = 0; j < ow; ++j) {
                         const Scalar g = 0.25 * ys->grad[(static_cast<std::int64_t>(ci) * oh + i) * ow + j];
                         const std::int64_t base = (static_cast<std::int64_t>(ci) * h + 2 * i) * w + 2 * j;
                         xs->grad[base] += g;
                         xs->grad[base + 1] += g;
                         xs->grad[base + w] += g;
                         xs->grad[base + w + 1] += g;
                       }
                 }});
  }
  return y;
}

Tensor softmax_t(Tape& tape, const Tensor& logits, Scalar temperature) {
  if (!(temperature > 0))
    throw std::invalid_argument("softmax_t: temperature must be positive, got " + std::to_string(temperature));
  const int k = logits.dim(logits.rank() - 1);
  const std::int64_t rows = logits.size() / k;
  Array out(logits.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const Scalar* in = logits.data().data() + r * k;
    Scalar* o = out.data() + r * k;
    Scalar mx = in[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, in[i]);
    Scalar denom = 0;
    for (int i = 0; i < k; ++i) {
      o[i] = std::exp((in[i] - mx) / temperature);
      denom += o[i];
    }
    for (int i = 0; i < k; ++i) o[i] /= denom;
  }
  Tensor y = make_output(logits.shape(), std::move(out), tape.recording() && logits.requires_grad());
  if (y.requires_grad()) {
    auto xs = logits.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys, rows, k, temperature] {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const Scalar* yv = ys->data.data() + r * k;
                     const Scalar* gy = ys->grad.data() + r * k;
                     Scalar dot = 0;
                     for (int i = 0; i < k; ++i) dot += yv[i] * gy[i];
                     Scalar* gx = xs->grad.data() + r * k;
                     for (int i = 0; i < k; ++i) gx[i] += yv[i] * (gy[i] - dot) / temperature;
                   }
                 }});
  }
  return y;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor y = make_output(x.shape(), x.data().max(0.0), tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys] {
                   accumulate(xs, (xs->data > 0.0).cast<Scalar>() * ys->grad);
                 }});
  }
  return y;
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  Array out(x.size());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = stable_sigmoid(x.data()[i]);
  Tensor y = make_output(x.shape(), std::move(out), tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys] {
                   accumulate(xs, ys->data * (1.0 - ys->data) * ys->grad);
                 }});
  }
  return y;
}

namespace {

Tensor binary_elementwise(Tape& tape, const Tensor& a, const Tensor& b, const char* name, int kind) {
  require(a.shape() == b.shape(), std::string(name) + " needs matching shapes, got " +
                                      shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Array out = kind == 0 ? Array(a.data() + b.data())
             : kind == 1 ? Array(a.data() - b.data())
                         : Array(a.data() * b.data());
  Tensor y = make_output(a.shape(), std::move(out), tape.recording() && grad_needed({&a, &b}));
  if (y.requires_grad()) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    tape.record({{as, bs}, ys, [as, bs, ys, kind] {
                   if (kind == 0) {
                     accumulate(as, ys->grad);
                     accumulate(bs, ys->grad);
                   } else if (kind == 1) {
                     accumulate(as, ys->grad);
                     accumulate(bs, -ys->grad);
                   } else {
                     accumulate(as, bs->data * ys->grad);
                     accumulate(bs, as->data * ys->grad);
                   }
                 }});
  }
  return y;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) { return binary_elementwise(tape, a, b, "add", 0); }
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) { return binary_elementwise(tape, a, b, "sub", 1); }
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) { return binary_elementwise(tape, a, b, "mul", 2); }

Tensor scale(Tape& tape, const Tensor& x, Scalar c) {
  Tensor y = make_output(x.shape(), x.data() * c, tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys, c] { accumulate(xs, c * ys->grad); }});
  }
  return y;
}

Tensor scale_by(Tape& tape, const Tensor& x, const Tensor& s) {
  require(s.size() == 1, "scale_by: scale must be a one-element tensor, got " + shape_str(s.shape()));
  Tensor y = make_output(x.shape(), x.data() * s.value(), tape.recording() && grad_needed({&x, &s}));
  if (y.requires_grad()) {
    auto xs = x.storage(), ss = s.storage(), ys = y.storage();
    tape.record({{xs, ss}, ys, [xs, ss, ys] {
                   accumulate(xs, ss->data[0] * ys->grad);
                   if (ss->requires_grad) {
                     ss->ensure_grad();
                     ss->grad[0] += (xs->data * ys->grad).sum();
                   }
                 }});
  }
  return y;
}

Tensor concat(Tape& tape, const Tensor& a, const Tensor& b, int axis) {
  require(a.rank() == b.rank(), "concat ranks disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  require(axis >= 0 && axis < a.rank(),
          "concat axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis)
      require(a.dim(i) == b.dim(i), "concat extents disagree off axis: " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] += b.dim(axis);

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::int64_t wa = a.dim(axis) * inner, wb = b.dim(axis) * inner;

  Array out(a.size() + b.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    out.segment(o * (wa + wb), wa) = a.data().segment(o * wa, wa);
    out.segment(o * (wa + wb) + wa, wb) = b.data().segment(o * wb, wb);
  }
  Tensor y = make_output(std::move(out_shape), std::move(out), tape.recording() && grad_needed({&a, &b}));
  if (y.requires_grad()) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    tape.record({{as, bs}, ys, [as, bs, ys, outer, wa, wb] {
                   for (std::int64_t o = 0; o < outer; ++o) {
                     if (as->requires_grad) {
                       as->ensure_grad();
                       as->grad.segment(o * wa, wa) += ys->grad.segment(o * (wa + wb), wa);
                     }
                     if (bs->requires_grad) {
                       bs->ensure_grad();
                       bs->grad.segment(o * wb, wb) += ys->grad.segment(o * (wa + wb) + wa, wb);
                     }
                   }
                 }});
  }
  return y;
}

namespace {

Tensor layer_norm_impl(Tape& tape, const Tensor& x, const Tensor* gamma, const Tensor* beta) {
  const int k = x.dim(x.rank() - 1);
  if (gamma) {
    require(gamma->size() == k && beta->size() == k,
            "layer_norm affine extent must match last axis " + std::to_string(k));
  }
  const std::int64_t rows = x.size() / k;
  Array norm(x.size());
  Array inv_std(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    auto seg = x.data().segment(r * k, k);
    const Scalar m = seg.mean();
    const Scalar var = (seg - m).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + kNormEps);
    norm.segment(r * k, k) = (seg - m) * inv_std[r];
  }
  Array out = norm;
  if (gamma) {
    for (std::int64_t r = 0; r < rows; ++r)
      out.segment(r * k, k) = norm.segment(r * k, k) * gamma->data() + beta->data();
  }
  bool needs = tape.recording() &&
               (x.requires_grad() || (gamma && grad_needed({gamma, beta})));
  Tensor y = make_output(x.shape(), std::move(out), needs);
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    auto gs = gamma ? gamma->storage() : nullptr;
    auto bs = beta ? beta->storage() : nullptr;
    auto norm_p = std::make_shared<Array>(std::move(norm));
    auto istd_p = std::make_shared<Array>(std::move(inv_std));
    std::vector<std::shared_ptr<TensorStorage>> ins{xs};
    if (gs) {
      ins.push_back(gs);
      ins.push_back(bs);
    }
    tape.record({std::move(ins), ys, [xs, ys, gs, bs, norm_p, istd_p, rows, k] {
                   for (std::int64_t r = 0; r < rows; ++r) {
                     auto gy = ys->grad.segment(r * k, k);
                     auto nh = norm_p->segment(r * k, k);
                     Array dnorm = gs ? Array(gy * gs->data) : Array(gy);
                     if (gs && gs->requires_grad) {
                       gs->ensure_grad();
                       gs->grad += gy * nh;
                     }
                     if (bs && bs->requires_grad) {
                       bs->ensure_grad();
                       bs->grad += gy;
                     }
                     if (xs->requires_grad) {
                       xs->ensure_grad();
                       const Scalar mean_d = dnorm.mean();
                       const Scalar mean_dn = (dnorm * nh).mean();
                       xs->grad.segment(r * k, k) +=
                           (*istd_p)[r] * (dnorm - mean_d - nh * mean_dn);
                     }
                   }
                 }});
  }
  return y;
}

}  // namespace

Tensor layer_norm(Tape& tape, const Tensor& x) { return layer_norm_impl(tape, x, nullptr, nullptr); }

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  return layer_norm_impl(tape, x, &gamma, &beta);
}

Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormStats& stats, bool training, bool update_running) {
  require(x.rank() == 3, "batch_norm input must be [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  require(gamma.size() == c && beta.size() == c, "batch_norm affine extent must equal channels");
  if (stats.running_mean.size() != c) stats.init(c);
  if (!training && stats.updates == 0)
    throw std::logic_error("batch_norm: eval mode before any running statistics recorded");

  Array mean_c(c), inv_std(c);
  if (training) {
    for (int ci = 0; ci < c; ++ci) {
      auto seg = x.data().segment(ci * hw, hw);
      mean_c[ci] = seg.mean();
      const Scalar var = (seg - mean_c[ci]).square().mean();
      inv_std[ci] = 1.0 / std::sqrt(var + kNormEps);
      if (update_running) {
        stats.running_mean[ci] = 0.9 * stats.running_mean[ci] + 0.1 * mean_c[ci];
        stats.running_var[ci] = 0.9 * stats.running_var[ci] + 0.1 * var;
      }
    }
    if (update_running) stats.updates++;
  } else {
    mean_c = stats.running_mean;
    inv_std = 1.0 / (stats.running_var + kNormEps).sqrt();
  }

  Array norm(x.size());
  Array out(x.size());
  for (int ci = 0; ci < c; ++ci) {
    auto n = norm.segment(ci * hw, hw);
    n = (x.data().segment(ci * hw, hw) - mean_c[ci]) * inv_std[ci];
    out.segment(ci * hw, hw) = n * gamma.data()[ci] + beta.data()[ci];
  }
  Tensor y = make_output(x.shape(), std::move(out), tape.recording() && grad_needed({&x, &gamma, &beta}));
  if (y.requires_grad()) {
    auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), ys = y.storage();
    auto norm_p = std::make_shared<Array>(std::move(norm));
    auto istd_p = std::make_shared<Array>(std::move(inv_std));
    tape.record({{xs, gs, bs}, ys, [xs, gs, bs, ys, norm_p, istd_p, c, hw, training] {
                   for (int ci = 0; ci < c; ++ci) {
                     auto gy = ys->grad.segment(ci * hw, hw);
                     auto nh = norm_p->segment(ci * hw, hw);
                     if (gs->requires_grad) {
                       gs->ensure_grad();
                       gs->grad[ci] += (gy * nh).sum();
                     }
                     if (bs->requires_grad) {
                       bs->ensure_grad();
                       bs->grad[ci] += gy.sum();
                     }
                     if (xs->requires_grad) {
                       xs->ensure_grad();
                       const Scalar g = gs->data[ci];
                       if (training) {
                         const Scalar mean_d = gy.mean() * g;
                         const Scalar mean_dn = (gy * nh).mean() * g;
                         xs->grad.segment(ci * hw, hw) +=
                             (*istd_p)[ci] * (g * gy - mean_d - nh * mean_dn);
                       } else {
                         xs->grad.segment(ci * hw, hw) += g * (*istd_p)[ci] * gy;
                       }
                     }
                   }
                 }});
  }
  return y;
}

Tensor spatial_mean(Tape& tape, const Tensor& x) {
  require(x.rank() == 3, "spatial_mean input must be [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  Array out(c);
  for (int ci = 0; ci < c; ++ci) out[ci] = x.data().segment(ci * hw, hw).mean();
  Tensor y = make_output({c}, std::move(out), tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys, c, hw] {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   for (int ci = 0; ci < c; ++ci)
                     xs->grad.segment(ci * hw, hw) += ys->grad[ci] / static_cast<Scalar>(hw);
                 }});
  }
  return y;
}

Tensor masked_mean(Tape& tape, const Tensor& x, const Tensor& mask) {
  require(x.rank() == 3 && mask.rank() == 2, "masked_mean expects [C,H,W] and [H,W]");
  require(mask.dim(0) == x.dim(1) && mask.dim(1) == x.dim(2),
          "masked_mean mask extent mismatch: " + shape_str(x.shape()) + " vs " + shape_str(mask.shape()));
  const int c = x.dim(0);
  const std::int64_t hw = mask.size();
  const Scalar denom = std::max(mask.data().sum(), 1.0);
  Array out(c);
  for (int ci = 0; ci < c; ++ci) out[ci] = (x.data().segment(ci * hw, hw) * mask.data()).sum() / denom;
  Tensor y = make_output({c}, std::move(out), tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ms = mask.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ms, ys, c, hw, denom] {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   for (int ci = 0; ci < c; ++ci)
                     xs->grad.segment(ci * hw, hw) += (ys->grad[ci] / denom) * ms->data;
                 }});
  }
  return y;
}

Tensor mask_mul(Tape& tape, const Tensor& x, const Tensor& mask) {
  require(x.rank() == 3 && mask.rank() == 2, "mask_mul expects [C,H,W] and [H,W]");
  require(mask.dim(0) == x.dim(1) && mask.dim(1) == x.dim(2),
          "mask_mul mask extent mismatch: " + shape_str(x.shape()) + " vs " + shape_str(mask.shape()));
  const int c = x.dim(0);
  const std::int64_t hw = mask.size();
  Array out(x.size());
  for (int ci = 0; ci < c; ++ci)
    out.segment(ci * hw, hw) = x.data().segment(ci * hw, hw) * mask.data();
  Tensor y = make_output(x.shape(), std::move(out), tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ms = mask.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ms, ys, c, hw] {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   for (int ci = 0; ci < c; ++ci)
                     xs->grad.segment(ci * hw, hw) += ys->grad.segment(ci * hw, hw) * ms->data;
                 }});
  }
  return y;
}

Tensor kl_divergence(Tape& tape, const Tensor& p, const Tensor& q) {
  require(p.shape() == q.shape() && p.rank() == 1,
          "kl_divergence expects two equal-length vectors, got " + shape_str(p.shape()) + " and " +
              shape_str(q.shape()));
  auto check_prob = [](const Tensor& t, const char* name) {
    if ((t.data() < 0.0).any())
      throw std::invalid_argument(std::string("kl_divergence: ") + name + " has negative entries");
    if (std::abs(t.data().sum() - 1.0) > 1e-6)
      throw std::invalid_argument(std::string("kl_divergence: ") + name + " does not sum to 1");
  };
  check_prob(p, "p");
  check_prob(q, "q");
  Scalar d = 0;
  for (std::int64_t i = 0; i < p.size(); ++i) {
    const Scalar pi = p.data()[i];
    if (pi > 0) d += pi * (std::log(pi) - std::log(std::max(q.data()[i], kLogClamp)));
  }
  Tensor y = make_output({1}, Array::Constant(1, d), tape.recording() && q.requires_grad());
  if (y.requires_grad()) {
    auto ps = p.storage(), qs = q.storage(), ys = y.storage();
    tape.record({{qs}, ys, [ps, qs, ys] {
                   if (!qs->requires_grad) return;
                   qs->ensure_grad();
                   const Scalar g = ys->grad[0];
                   for (std::int64_t i = 0; i < qs->data.size(); ++i)
                     if (qs->data[i] > kLogClamp && ps->data[i] > 0)
                       qs->grad[i] -= g * ps->data[i] / qs->data[i];
                 }});
  }
  return y;
}

Tensor sum(Tape& tape, const Tensor& x) {
  Tensor y = make_output({1}, Array::Constant(1, x.data().sum()), tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys] {
                   accumulate(xs, Array::Constant(xs->data.size(), ys->grad[0]));
                 }});
  }
  return y;
}

Tensor mean(Tape& tape, const Tensor& x) {
  Tensor y = make_output({1}, Array::Constant(1, x.data().mean()), tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys] {
                   accumulate(xs, Array::Constant(xs->data.size(),
                                                  ys->grad[0] / static_cast<Scalar>(xs->data.size())));
                 }});
  }
  return y;
}

Tensor pick(Tape& tape, const Tensor& x, std::int64_t flat_index) {
  require(flat_index >= 0 && flat_index < x.size(),
          "pick index " + std::to_string(flat_index) + " out of range for " + shape_str(x.shape()));
  Tensor y = make_output({1}, Array::Constant(1, x.data()[flat_index]),
                         tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys, flat_index] {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   xs->grad[flat_index] += ys->grad[0];
                 }});
  }
  return y;
}

Tensor transpose2d(Tape& tape, const Tensor& x) {
  require(x.rank() == 2, "transpose2d expects a matrix, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  Array out(x.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::int64_t>(j) * m + i] = x.at(i, j);
  Tensor y = make_output({n, m}, std::move(out), tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys, m, n] {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   for (int i = 0; i < m; ++i)
                     for (int j = 0; j < n; ++j)
                       xs->grad[static_cast<std::int64_t>(i) * n + j] +=
                           ys->grad[static_cast<std::int64_t>(j) * m + i];
                 }});
  }
  return y;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  require(numel(shape) == x.size(),
          "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  Tensor y = make_output(std::move(shape), x.data(), tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys] { accumulate(xs, ys->grad); }});
  }
  return y;
}

Tensor slice_channels(Tape& tape, const Tensor& x, int from, int to) {
  require(x.rank() == 3, "slice_channels expects [C,H,W], got " + shape_str(x.shape()));
  require(0 <= from && from < to && to <= x.dim(0),
          "slice_channels range [" + std::to_string(from) + "," + std::to_string(to) +
              ") invalid for " + shape_str(x.shape()));
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  Tensor y = make_output({to - from, x.dim(1), x.dim(2)},
                         x.data().segment(from * hw, static_cast<std::int64_t>(to - from) * hw),
                         tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys, from, to, hw] {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   xs->grad.segment(from * hw, static_cast<std::int64_t>(to - from) * hw) += ys->grad;
                 }});
  }
  return y;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor* b) {
  require(x.rank() == 1, "linear input must be a vector, got " + shape_str(x.shape()));
  Tensor y = reshape(tape, matmul(tape, reshape(tape, x, {1, static_cast<int>(x.size())}), w),
                     {w.dim(1)});
  return b ? add(tape, y, *b) : y;
}

Tensor chw_to_hwc(Tape& tape, const Tensor& x) {
  require(x.rank() == 3, "chw_to_hwc input must be [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Array out(x.size());
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out[(static_cast<std::int64_t>(y) * w + xx) * c + ci] =
            x.data()[(static_cast<std::int64_t>(ci) * h + y) * w + xx];
  Tensor y = make_output({h, w, c}, std::move(out), tape.recording() && x.requires_grad());
  if (y.requires_grad()) {
    auto xs = x.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys, c, h, w] {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   for (int ci = 0; ci < c; ++ci)
                     for (int yy = 0; yy < h; ++yy)
                       for (int xx = 0; xx < w; ++xx)
                         xs->grad[(static_cast<std::int64_t>(ci) * h + yy) * w + xx] +=
                             ys->grad[(static_cast<std::int64_t>(yy) * w + xx) * c + ci];
                 }});
  }
  return y;
}

Tensor cross_entropy_cells(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
  require(logits.rank() == 3, "cross_entropy_cells logits must be [K,h,w], got " + shape_str(logits.shape()));
  const int k = logits.dim(0);
  const std::int64_t cells = static_cast<std::int64_t>(logits.dim(1)) * logits.dim(2);
  require(static_cast<std::int64_t>(labels.size()) == cells, "cross_entropy_cells label count mismatch");
  for (int l : labels) require(l >= 0 && l < k, "cross_entropy_cells label out of range");

  auto probs = std::make_shared<Array>(cells * k);  // [cell, k]
  Scalar total = 0;
  for (std::int64_t cell = 0; cell < cells; ++cell) {
    Scalar mx = logits.data()[cell];
    for (int i = 1; i < k; ++i) mx = std::max(mx, logits.data()[i * cells + cell]);
    Scalar denom = 0;
    for (int i = 0; i < k; ++i) {
      const Scalar e = std::exp(logits.data()[i * cells + cell] - mx);
      (*probs)[cell * k + i] = e;
      denom += e;
    }
    for (int i = 0; i < k; ++i) (*probs)[cell * k + i] /= denom;
    total -= std::log(std::max((*probs)[cell * k + labels[static_cast<std::size_t>(cell)]], kLogClamp));
  }
  total /= static_cast<Scalar>(cells);
  Tensor y = make_output({1}, Array::Constant(1, total), tape.recording() && logits.requires_grad());
  if (y.requires_grad()) {
    auto xs = logits.storage(), ys = y.storage();
    tape.record({{xs}, ys, [xs, ys, probs, labels, k, cells] {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   const Scalar g = ys->grad[0] / static_cast<Scalar>(cells);
                   for (std::int64_t cell = 0; cell < cells; ++cell)
                     for (int i = 0; i < k; ++i)
                       xs->grad[i * cells + cell] +=
                           g * ((*probs)[cell * k + i] -
                                (i == labels[static_cast<std::size_t>(cell)] ? 1.0 : 0.0));
                 }});
  }
  return y;
}

Tensor smooth_l1(Tape& tape, const Tensor& pred, const Array& target, Scalar beta, std::int64_t group) {
  require(pred.size() == target.size(), "smooth_l1 length mismatch");
  require(pred.size() % group == 0, "smooth_l1 length must be a multiple of the group size");
  require(beta > 0, "smooth_l1 beta must be positive");
  const std::int64_t rows = pred.size() / group;
  Scalar total = 0;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    const Scalar d = pred.data()[i] - target[i];
    total += std::abs(d) < beta ? 0.5 * d * d / beta : std::abs(d) - 0.5 * beta;
  }
  total /= static_cast<Scalar>(rows);
  Tensor y = make_output({1}, Array::Constant(1, total), tape.recording() && pred.requires_grad());
  if (y.requires_grad()) {
    auto xs = pred.storage(), ys = y.storage();
    auto tgt = std::make_shared<Array>(target);
    tape.record({{xs}, ys, [xs, ys, tgt, beta, rows] {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   const Scalar g = ys->grad[0] / static_cast<Scalar>(rows);
                   for (std::int64_t i = 0; i < xs->data.size(); ++i) {
                     const Scalar d = xs->data[i] - (*tgt)[i];
                     xs->grad[i] += g * (std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0));
                   }
                 }});
  }
  return y;
}

Tensor neg_assigned_sum(Tape& tape, const Tensor& similarity, const std::vector<int>& assignment) {
  require(similarity.rank() == 2, "neg_assigned_sum expects a matrix");
  const int m = similarity.dim(1);
  Scalar total = 0;
  for (std::size_t r = 0; r < assignment.size(); ++r) {
    require(assignment[r] >= 0 && assignment[r] < m, "assignment column out of range");
    total += similarity.at(static_cast<int>(r), assignment[r]);
  }
  Tensor y = make_output({1}, Array::Constant(1, -total), tape.recording() && similarity.requires_grad());
  if (y.requires_grad()) {
    auto ss = similarity.storage(), ys = y.storage();
    tape.record({{ss}, ys, [ss, ys, assignment, m] {
                   if (!ss->requires_grad) return;
                   ss->ensure_grad();
                   for (std::size_t r = 0; r < assignment.size(); ++r)
                     ss->grad[static_cast<std::int64_t>(r) * m + assignment[r]] -= ys->grad[0];
                 }});
  }
  return y;
}

Tensor coherence_penalty(Tape& tape, const Tensor& scores) {
  require(scores.rank() == 3, "coherence_penalty expects [h,w,K], got " + shape_str(scores.shape()));
  const int h = scores.dim(0), w = scores.dim(1), k = scores.dim(2);
  Scalar total = 0;
  auto slice = [&](int y, int x) { return scores.data().segment((static_cast<std::int64_t>(y) * w + x) * k, k); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (x + 1 < w) total += (slice(y, x) - slice(y, x + 1)).square().sum();
      if (y + 1 < h) total += (slice(y, x) - slice(y + 1, x)).square().sum();
    }
  Tensor out = make_output({1}, Array::Constant(1, total), tape.recording() && scores.requires_grad());
  if (out.requires_grad()) {
    auto ss = scores.storage(), ys = out.storage();
    tape.record({{ss}, ys, [ss, ys, h, w, k] {
                   if (!ss->requires_grad) return;
                   ss->ensure_grad();
                   const Scalar g = ys->grad[0];
                   auto sl = [&](Array& a, int y, int x) {
                     return a.segment((static_cast<std::int64_t>(y) * w + x) * k, k);
                   };
                   for (int y = 0; y < h; ++y)
                     for (int x = 0; x < w; ++x) {
                       if (x + 1 < w) {
                         Array d = sl(ss->data, y, x) - sl(ss->data, y, x + 1);
                         sl(ss->grad, y, x) += 2.0 * g * d;
                         sl(ss->grad, y, x + 1) -= 2.0 * g * d;
                       }
                       if (y + 1 < h) {
                         Array d = sl(ss->data, y, x) - sl(ss->data, y + 1, x);
                         sl(ss->grad, y, x) += 2.0 * g * d;
                         sl(ss->grad, y + 1, x) -= 2.0 * g * d;
                       }
                     }
                 }});
  }
  return out;
}

Tensor l2_normalize(Tape& tape, const Tensor& v, bool* degenerate) {
  require(v.rank() == 1, "l2_normalize expects a vector, got " + shape_str(v.shape()));
  const Scalar n = std::sqrt(v.data().square().sum());
  if (degenerate) *degenerate = n < kLogClamp;
  if (n < kLogClamp) return Tensor::zeros(v.shape());
  Tensor y = make_output(v.shape(), v.data() / n, tape.recording() && v.requires_grad());
  if (y.requires_grad()) {
    auto vs = v.storage(), ys = y.storage();
    tape.record({{vs}, ys, [vs, ys, n] {
                   if (!vs->requires_grad) return;
                   vs->ensure_grad();
                   const Scalar dot = (ys->data * ys->grad).sum();
                   vs->grad += (ys->grad - ys->data * dot) / n;
                 }});
  }
  return y;
}

Tensor finite_difference_oracle(const std::function<Scalar(const Tensor&)>& f, const Tensor& x,
                                Scalar h) {
  Array g(x.size());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    Array lo = x.data(), hi = x.data();
    hi[i] += h;
    lo[i] -= h;
    const Scalar fp = f(Tensor(x.shape(), std::move(hi)));
    const Scalar fm = f(Tensor(x.shape(), std::move(lo)));
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(g));
}

}  // namespace hmr
