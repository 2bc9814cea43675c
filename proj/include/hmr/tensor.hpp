#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace hmr {

using Scalar = double;
using Array = Eigen::ArrayXd;
using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorStorage {
  Shape shape;
  Array data;
  Array grad;  // empty until first accumulation
  bool requires_grad = false;

  std::int64_t size() const { return data.size(); }
  bool has_grad() const { return grad.size() == data.size(); }
  void ensure_grad() {
    if (!has_grad()) grad = Array::Zero(data.size());
  }
};

/// Dense row-major f64 tensor. Copies are shallow handles onto shared
/// storage, so a parameter and its tape references see the same grad buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, Array data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<Scalar> values,
                     bool requires_grad = false);

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  int dim(int axis) const { return s_->shape[static_cast<std::size_t>(axis)]; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  std::int64_t size() const { return s_->size(); }

  Array& data() { return s_->data; }
  const Array& data() const { return s_->data; }
  Array& grad();
  bool has_grad() const { return s_->has_grad(); }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool value) {
    s_->requires_grad = value;
    return *this;
  }

  /// Value of a one-element tensor.
  Scalar value() const;

  Scalar at(std::int64_t i) const { return s_->data[i]; }
  Scalar at(int i, int j) const;
  Scalar at(int i, int j, int k) const;
  Scalar& mut(std::int64_t i) { return s_->data[i]; }

  /// Same data, no grad requirement; shares nothing with the tape.
  Tensor detached() const;

  void zero_grad() {
    if (s_->has_grad()) s_->grad.setZero();
  }

  /// Drops the grad buffer entirely; has_grad() turns false until the tensor
  /// participates in another backward pass.
  void clear_grad() { s_->grad.resize(0); }

  std::shared_ptr<TensorStorage> storage() const { return s_; }

  bool all_finite() const;

 private:
  std::shared_ptr<TensorStorage> s_;
};

struct TapeNode {
  std::vector<std::shared_ptr<TensorStorage>> inputs;
  std::shared_ptr<TensorStorage> output;
  std::function<void()> backward;  // adds into input grads from output->grad
};

/// Reverse-mode tape. Ops append nodes in forward order; backward() replays
/// them in reverse, accumulating into every requires_grad storage on the
/// path. A non-recording tape turns every op into a plain forward evaluation.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  static Tape inference() { return Tape(false); }

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void record(TapeNode node) {
    if (recording_) nodes_.push_back(std::move(node));
  }

  /// Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse.
  void backward(const Tensor& loss);

 private:
  bool recording_ = true;
  std::vector<TapeNode> nodes_;
};

// ---- numeric core ops -----------------------------------------------------

/// 2-d matrix product [m,k] x [k,n] -> [m,n].
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

/// 3x3 cross-correlation, stride 1, zero padding 1 (same spatial size).
/// x: [Cin,H,W], k: [Cout,Cin,3,3] -> [Cout,H,W]. Bias-free.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& k);

/// 2x2 average pooling, stride 2. [C,H,W] -> [C,H/2,W/2].
Tensor avg_pool2(Tape& tape, const Tensor& x);

/// Temperature softmax over the last axis; max-subtracted for stability.
Tensor softmax_t(Tape& tape, const Tensor& logits, Scalar temperature);

Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, Scalar c);

/// x scaled by a one-element tensor; gradients flow to both operands.
Tensor scale_by(Tape& tape, const Tensor& x, const Tensor& s);

/// Concatenate along `axis`; all other extents must agree.
Tensor concat(Tape& tape, const Tensor& a, const Tensor& b, int axis);

/// Layer norm over the last axis, eps 1e-5. Affine form applies learnable
/// scale/shift of extent = last axis.
Tensor layer_norm(Tape& tape, const Tensor& x);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta);

struct BatchNormStats {
  Array running_mean;
  Array running_var;
  long updates = 0;
  void init(int channels) {
    running_mean = Array::Zero(channels);
    running_var = Array::Ones(channels);
  }
};

/// Per-channel normalization of a [C,H,W] map. Training mode normalizes by
/// batch statistics over the spatial axes and folds them into the running
/// stats (momentum 0.1) unless update_running is false; eval mode uses the
/// stored running stats and throws if none were ever recorded. Eps 1e-5.
Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormStats& stats, bool training, bool update_running = true);

/// Per-channel mean over spatial axes: [C,H,W] -> [C].
Tensor spatial_mean(Tape& tape, const Tensor& x);

/// Per-channel mean over the pixels selected by a binary [H,W] mask.
/// Empty masks are a caller error (divides by max(|M|,1)).
Tensor masked_mean(Tape& tape, const Tensor& x, const Tensor& mask);

/// Broadcast multiply [C,H,W] by a constant [H,W] mask.
Tensor mask_mul(Tape& tape, const Tensor& x, const Tensor& mask);

/// KL(p || q) for probability vectors; q clamped at 1e-12 before the log.
/// p is treated as constant: gradient flows to q only.
Tensor kl_divergence(Tape& tape, const Tensor& p, const Tensor& q);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

/// One element by flat index -> scalar tensor.
Tensor pick(Tape& tape, const Tensor& x, std::int64_t flat_index);

/// Same elements, new shape (copying; gradient passes through).
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);

/// Channels [from, to) of a [C,H,W] tensor.
Tensor slice_channels(Tape& tape, const Tensor& x, int from, int to);

/// [m,n] -> [n,m].
Tensor transpose2d(Tape& tape, const Tensor& x);

/// x[n] * w[n,m] + b[m] -> [m]; pass b = nullptr for a bias-free map.
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor* b);

/// [C,H,W] -> [H,W,C].
Tensor chw_to_hwc(Tape& tape, const Tensor& x);

/// Mean over cells of -log softmax(logits[:,y,x])[label]. logits: [K,h,w],
/// labels: h*w entries in [0,K).
Tensor cross_entropy_cells(Tape& tape, const Tensor& logits, const std::vector<int>& labels);

/// Smooth-L1 against a constant target, summed per row of 4 and averaged
/// over rows. pred/target: [n].
Tensor smooth_l1(Tape& tape, const Tensor& pred, const Array& target, Scalar beta,
                 std::int64_t group = 4);

/// -sum_r S[r, assignment[r]] for S: [R,M].
Tensor neg_assigned_sum(Tape& tape, const Tensor& similarity, const std::vector<int>& assignment);

/// Sum over right/down neighbour pairs of ||P(x,y,:) - P(x',y',:)||^2 for
/// P: [h,w,K]; each unordered pair counted once.
Tensor coherence_penalty(Tape& tape, const Tensor& scores);

/// v / ||v||_2 for a vector; inputs with norm < 1e-12 come back as zeros and
/// set *degenerate when provided.
Tensor l2_normalize(Tape& tape, const Tensor& v, bool* degenerate = nullptr);

// ---- gradient oracle --------------------------------------------------------

/// Central finite differences of a tensor-to-scalar function, one coordinate
/// at a time: (f(x + h e_i) - f(x - h e_i)) / 2h.
Tensor finite_difference_oracle(const std::function<Scalar(const Tensor&)>& f, const Tensor& x,
                                Scalar h = 1e-5);

}  // namespace hmr
