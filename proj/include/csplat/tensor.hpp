#pragma once

// Minimal dense tensor with reverse-mode differentiation.
//
// A Tensor is a cheap handle to a graph node holding values, an optional
// gradient buffer, and a backward closure. Graphs are dynamic: every forward
// op records the tape needed to push gradients back to its inputs. Everything
// is double precision and single-threaded; forward evaluation is bitwise
// deterministic for identical inputs.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace csplat {

using Shape = std::vector<int>;
using Rng = std::mt19937_64;

class Tensor;

struct TensorNode {
    Shape shape;
    std::vector<double> v;  // values, row-major
    std::vector<double> g;  // gradient; empty until first accumulation
    bool requires_grad = false;
    std::vector<Tensor> inputs;
    std::function<void(TensorNode&)> backward;  // pushes self.g into inputs

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    bool is_leaf() const { return !backward; }
    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), 0.0);
    }
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double value);
    static Tensor from(const Shape& shape, std::vector<double> values);
    static Tensor scalar(double value) { return from({1}, {value}); }
    static Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int axis) const { return node_->shape[static_cast<size_t>(axis)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int64_t numel() const { return node_->numel(); }

    const std::vector<double>& values() const { return node_->v; }
    std::vector<double>& mutable_values() { return node_->v; }
    const std::vector<double>& grad() const { return node_->g; }
    double item() const;

    Tensor& set_requires_grad(bool flag) {
        node_->requires_grad = flag;
        return *this;
    }
    bool requires_grad() const { return node_->requires_grad; }
    void zero_grad() { node_->g.assign(node_->v.size(), 0.0); }

    TensorNode* node() const { return node_.get(); }

    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  private:
    std::shared_ptr<TensorNode> node_;
};

// Scoped switch that disables tape recording (inference / data generation).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};
bool grad_enabled();

// Op constructor used by every kernel (and by modules that define fused ops,
// e.g. the warp and the splatting renderer). The backward closure reads
// self.g and accumulates into self.inputs[i].node()->g.
Tensor make_op(std::vector<Tensor> inputs, Shape shape, std::vector<double> values,
               std::function<void(TensorNode&)> backward);

// Runs reverse-mode accumulation from a scalar loss. Gradients of leaf nodes
// (parameters, constants) accumulate additively across calls; interior nodes
// are reset each call.
void backward(const Tensor& loss);

[[noreturn]] void tensor_fail(const std::string& msg);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.1);
Tensor std_normal_cdf(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
Tensor clamp_max(const Tensor& a, double hi);

// ---- broadcast helpers on (C,H,W) ----
Tensor mul_channels(const Tensor& x, const Tensor& scale_c);  // scale shape (C)
Tensor mul_map(const Tensor& x, const Tensor& map_1hw);       // map shape (1,H,W)

// ---- shape ----
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor chw_to_points(const Tensor& x);  // (C,H,W) -> (H*W, C)

// ---- reductions / softmax ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_axis0_keep(const Tensor& x);
Tensor mean_axis0_keep(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);

// ---- neural-net kernels ----
// x (Ci,H,W), w (Co,Ci,kh,kw), optional bias (Co); zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// x (Ci,H,W), w (Ci,Co,kh,kw); output (Co, (H-1)*s-2p+kh, ...).
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// x (n), w (m,n), b (m) -> (m)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);
Tensor nearest_resize(const Tensor& x, int out_h, int out_w);
// x (C,H,W), coords (2,Ho,Wo) holding (u,v) in source pixel units; zero pad
// outside the image. Differentiable in both arguments.
Tensor grid_sample(const Tensor& x, const Tensor& coords);

// ---- quantization / tape control ----
Tensor stop_gradient(const Tensor& x);
Tensor ste_round(const Tensor& x);  // round half away from zero; identity grad
Tensor ste_clamp(const Tensor& x, double lo, double hi);
Tensor add_uniform_noise(const Tensor& x, Rng& rng, double lo = -0.5, double hi = 0.5);

double round_half_away(double x);

}  // namespace csplat
