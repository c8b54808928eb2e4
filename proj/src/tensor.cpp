#include "csplat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace csplat {

namespace {

thread_local bool g_grad_enabled = true;

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return;
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    std::ostringstream os;
    os << op << ": shape mismatch " << shape_str(sa) << " vs " << shape_str(sb);
    for (size_t i = 0; i < std::min(sa.size(), sb.size()); ++i) {
        if (sa[i] != sb[i]) {
            os << "; dim " << i << " differs (" << sa[i] << " vs " << sb[i] << ")";
            break;
        }
    }
    tensor_fail(os.str());
}

void check(bool cond, const std::string& msg) {
    if (!cond) tensor_fail(msg);
}

// Shared skeleton for unary elementwise ops: y = f(x), dx += dy * dfdx.
template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd dfdx_from_xy) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    return make_op({a}, a.shape(), std::move(out), [dfdx_from_xy](TensorNode& self) {
        TensorNode* x = self.inputs[0].node();
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t i = 0; i < self.v.size(); ++i)
            x->g[i] += self.g[i] * dfdx_from_xy(x->v[i], self.v[i]);
    });
}

}  // namespace

void tensor_fail(const std::string& msg) { throw std::invalid_argument(msg); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

double round_half_away(double x) { return x >= 0.0 ? std::floor(x + 0.5) : std::ceil(x - 0.5); }

Tensor Tensor::zeros(const Shape& shape) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->v.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    return Tensor(std::move(n));
}

Tensor Tensor::full(const Shape& shape, double value) {
    Tensor t = zeros(shape);
    std::fill(t.node()->v.begin(), t.node()->v.end(), value);
    return t;
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        tensor_fail("Tensor::from: value count " + std::to_string(values.size()) +
                    " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->v = std::move(values);
    return Tensor(std::move(n));
}

Tensor Tensor::rand_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
    Tensor t = zeros(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& x : t.node()->v) x = dist(rng);
    return t;
}

double Tensor::item() const {
    if (numel() != 1) tensor_fail("item: tensor has " + std::to_string(numel()) + " elements, expected 1");
    return node_->v[0];
}

Tensor make_op(std::vector<Tensor> inputs, Shape shape, std::vector<double> values,
               std::function<void(TensorNode&)> bw) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        tensor_fail("make_op: value count does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->v = std::move(values);
    bool needs = false;
    if (g_grad_enabled)
        for (const auto& t : inputs)
            if (t.node()->requires_grad) needs = true;
    if (needs) {
        n->requires_grad = true;
        n->inputs = std::move(inputs);
        n->backward = std::move(bw);
    }
    return Tensor(std::move(n));
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) tensor_fail("backward: loss must be scalar, got " + std::to_string(loss.numel()) + " elements");
    // Iterative post-order DFS for a topological order.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.push_back({loss.node(), 0});
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            TensorNode* next = node->inputs[idx].node();
            ++idx;
            if (next->requires_grad && !seen.count(next)) {
                seen.insert(next);
                stack.push_back({next, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Interior gradients are scratch; leaf gradients persist and accumulate.
    for (TensorNode* n : order)
        if (!n->is_leaf()) n->g.assign(n->v.size(), 0.0);
    loss.node()->ensure_grad();
    loss.node()->g[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward) n->backward(*n);
    }
}

// ---------------- elementwise ----------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    return make_op({a, b}, a.shape(), std::move(out), [](TensorNode& self) {
        for (int k = 0; k < 2; ++k) {
            TensorNode* x = self.inputs[k].node();
            if (!x->requires_grad) continue;
            x->ensure_grad();
            for (size_t i = 0; i < self.v.size(); ++i) x->g[i] += self.g[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    return make_op({a, b}, a.shape(), std::move(out), [](TensorNode& self) {
        TensorNode* x = self.inputs[0].node();
        TensorNode* y = self.inputs[1].node();
        if (x->requires_grad) {
            x->ensure_grad();
            for (size_t i = 0; i < self.v.size(); ++i) x->g[i] += self.g[i];
        }
        if (y->requires_grad) {
            y->ensure_grad();
            for (size_t i = 0; i < self.v.size(); ++i) y->g[i] -= self.g[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    return make_op({a, b}, a.shape(), std::move(out), [](TensorNode& self) {
        TensorNode* x = self.inputs[0].node();
        TensorNode* y = self.inputs[1].node();
        if (x->requires_grad) {
            x->ensure_grad();
            for (size_t i = 0; i < self.v.size(); ++i) x->g[i] += self.g[i] * y->v[i];
        }
        if (y->requires_grad) {
            y->ensure_grad();
            for (size_t i = 0; i < self.v.size(); ++i) y->g[i] += self.g[i] * x->v[i];
        }
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape("div", a, b);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
    return make_op({a, b}, a.shape(), std::move(out), [](TensorNode& self) {
        TensorNode* x = self.inputs[0].node();
        TensorNode* y = self.inputs[1].node();
        if (x->requires_grad) {
            x->ensure_grad();
            for (size_t i = 0; i < self.v.size(); ++i) x->g[i] += self.g[i] / y->v[i];
        }
        if (y->requires_grad) {
            y->ensure_grad();
            for (size_t i = 0; i < self.v.size(); ++i)
                y->g[i] -= self.g[i] * x->v[i] / (y->v[i] * y->v[i]);
        }
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary_op(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(a, [](double x) { return std::sqrt(x); },
                    [](double, double y) { return 0.5 / y; });
}

Tensor abs(const Tensor& a) {
    return unary_op(a, [](double x) { return std::fabs(x); },
                    [](double x, double) { return x >= 0.0 ? 1.0 : -1.0; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor reciprocal(const Tensor& a) {
    return unary_op(a, [](double x) { return 1.0 / x; },
                    [](double, double y) { return -y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
    // log(1+e^x), overflow-safe
    return unary_op(a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
                    [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    return unary_op(a, [slope](double x) { return x >= 0.0 ? x : slope * x; },
                    [slope](double x, double) { return x >= 0.0 ? 1.0 : slope; });
}

Tensor std_normal_cdf(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return unary_op(a, [=](double x) { return 0.5 * std::erfc(-x * inv_sqrt2); },
                    [=](double x, double) { return inv_sqrt2pi * std::exp(-0.5 * x * x); });
}

Tensor clamp_min(const Tensor& a, double lo) {
    return unary_op(a, [lo](double x) { return x < lo ? lo : x; },
                    [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

Tensor clamp_max(const Tensor& a, double hi) {
    return unary_op(a, [hi](double x) { return x > hi ? hi : x; },
                    [hi](double x, double) { return x > hi ? 0.0 : 1.0; });
}

// ---------------- broadcast ----------------

Tensor mul_channels(const Tensor& x, const Tensor& scale_c) {
    check(x.ndim() == 3, "mul_channels: input must be (C,H,W), got " + shape_str(x.shape()));
    check(scale_c.ndim() == 1 && scale_c.dim(0) == x.dim(0),
          "mul_channels: scale dim 0 is " + std::to_string(scale_c.dim(0)) + ", expected C=" +
              std::to_string(x.dim(0)));
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    const auto& xv = x.values();
    const auto& sv = scale_c.values();
    std::vector<double> out(xv.size());
    for (int ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < hw; ++i) out[ci * hw + i] = xv[ci * hw + i] * sv[ci];
    return make_op({x, scale_c}, x.shape(), std::move(out), [c, hw](TensorNode& self) {
        TensorNode* xn = self.inputs[0].node();
        TensorNode* sn = self.inputs[1].node();
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (int ci = 0; ci < c; ++ci)
                for (int64_t i = 0; i < hw; ++i)
                    xn->g[ci * hw + i] += self.g[ci * hw + i] * sn->v[ci];
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            for (int ci = 0; ci < c; ++ci) {
                double acc = 0.0;
                for (int64_t i = 0; i < hw; ++i) acc += self.g[ci * hw + i] * xn->v[ci * hw + i];
                sn->g[ci] += acc;
            }
        }
    });
}

Tensor mul_map(const Tensor& x, const Tensor& map_1hw) {
    check(x.ndim() == 3, "mul_map: input must be (C,H,W), got " + shape_str(x.shape()));
    check(map_1hw.ndim() == 3 && map_1hw.dim(0) == 1 && map_1hw.dim(1) == x.dim(1) &&
              map_1hw.dim(2) == x.dim(2),
          "mul_map: map shape " + shape_str(map_1hw.shape()) + " does not broadcast over " +
              shape_str(x.shape()));
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    const auto& xv = x.values();
    const auto& mv = map_1hw.values();
    std::vector<double> out(xv.size());
    for (int ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < hw; ++i) out[ci * hw + i] = xv[ci * hw + i] * mv[i];
    return make_op({x, map_1hw}, x.shape(), std::move(out), [c, hw](TensorNode& self) {
        TensorNode* xn = self.inputs[0].node();
        TensorNode* mn = self.inputs[1].node();
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (int ci = 0; ci < c; ++ci)
                for (int64_t i = 0; i < hw; ++i)
                    xn->g[ci * hw + i] += self.g[ci * hw + i] * mn->v[i];
        }
        if (mn->requires_grad) {
            mn->ensure_grad();
            for (int64_t i = 0; i < hw; ++i) {
                double acc = 0.0;
                for (int ci = 0; ci < c; ++ci) acc += self.g[ci * hw + i] * xn->v[ci * hw + i];
                mn->g[i] += acc;
            }
        }
    });
}

// ---------------- shape ----------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    check(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    check(axis >= 0 && axis < static_cast<int>(s0.size()), "concat: axis out of range");
    Shape out_shape = s0;
    int total = 0;
    for (const auto& p : parts) {
        check(p.ndim() == static_cast<int>(s0.size()), "concat: rank mismatch");
        for (int d = 0; d < p.ndim(); ++d)
            if (d != axis)
                check(p.dim(d) == s0[static_cast<size_t>(d)],
                      "concat: dim " + std::to_string(d) + " mismatch (" + std::to_string(p.dim(d)) +
                          " vs " + std::to_string(s0[static_cast<size_t>(d)]) + ")");
        total += p.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[static_cast<size_t>(d)];
    for (size_t d = static_cast<size_t>(axis) + 1; d < s0.size(); ++d) inner *= s0[d];

    std::vector<double> out(static_cast<size_t>(outer) * total * inner);
    std::vector<int64_t> offsets;  // per part, offset along axis
    int64_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const auto& pv = p.values();
        const int64_t pa = p.dim(axis);
        for (int64_t o = 0; o < outer; ++o)
            std::copy(pv.begin() + o * pa * inner, pv.begin() + (o + 1) * pa * inner,
                      out.begin() + (o * total + off) * inner);
        off += pa;
    }
    return make_op(parts, out_shape, std::move(out),
                   [outer, inner, total, offsets](TensorNode& self) {
                       for (size_t k = 0; k < self.inputs.size(); ++k) {
                           TensorNode* p = self.inputs[k].node();
                           if (!p->requires_grad) continue;
                           p->ensure_grad();
                           const int64_t pa = p->numel() / (outer * inner);
                           for (int64_t o = 0; o < outer; ++o) {
                               const double* src = self.g.data() + (o * total + offsets[k]) * inner;
                               double* dst = p->g.data() + o * pa * inner;
                               for (int64_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
                           }
                       }
                   });
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
    const Shape& s = x.shape();
    check(axis >= 0 && axis < x.ndim(), "slice: axis out of range");
    check(start >= 0 && len > 0 && start + len <= s[static_cast<size_t>(axis)],
          "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
              ") exceeds dim " + std::to_string(axis) + " of size " +
              std::to_string(s[static_cast<size_t>(axis)]));
    Shape out_shape = s;
    out_shape[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
    for (size_t d = static_cast<size_t>(axis) + 1; d < s.size(); ++d) inner *= s[d];
    const int64_t sa = s[static_cast<size_t>(axis)];
    const auto& xv = x.values();
    std::vector<double> out(static_cast<size_t>(outer) * len * inner);
    for (int64_t o = 0; o < outer; ++o)
        std::copy(xv.begin() + (o * sa + start) * inner, xv.begin() + (o * sa + start + len) * inner,
                  out.begin() + o * len * inner);
    return make_op({x}, out_shape, std::move(out), [outer, inner, sa, start, len](TensorNode& self) {
        TensorNode* xn = self.inputs[0].node();
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
            const double* src = self.g.data() + o * len * inner;
            double* dst = xn->g.data() + (o * sa + start) * inner;
            for (int64_t i = 0; i < static_cast<int64_t>(len) * inner; ++i) dst[i] += src[i];
        }
    });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    check(shape_numel(shape) == x.numel(),
          "reshape: element count changes from " + std::to_string(x.numel()) + " to " +
              std::to_string(shape_numel(shape)));
    std::vector<double> out = x.values();
    return make_op({x}, shape, std::move(out), [](TensorNode& self) {
        TensorNode* xn = self.inputs[0].node();
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.g.size(); ++i) xn->g[i] += self.g[i];
    });
}

Tensor chw_to_points(const Tensor& x) {
    check(x.ndim() == 3, "chw_to_points: input must be (C,H,W), got " + shape_str(x.shape()));
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (int64_t p = 0; p < hw; ++p)
        for (int ci = 0; ci < c; ++ci) out[p * c + ci] = xv[ci * hw + p];
    return make_op({x}, {static_cast<int>(hw), c}, std::move(out), [c, hw](TensorNode& self) {
        TensorNode* xn = self.inputs[0].node();
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t p = 0; p < hw; ++p)
            for (int ci = 0; ci < c; ++ci) xn->g[ci * hw + p] += self.g[p * c + ci];
    });
}

// ---------------- reductions ----------------

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    return make_op({x}, {1}, {acc}, [](TensorNode& self) {
        TensorNode* xn = self.inputs[0].node();
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double g = self.g[0];
        for (auto& gi : xn->g) gi += g;
    });
}

Tensor mean_all(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.numel());
    return mul_scalar(sum_all(x), inv);
}

Tensor sum_axis0_keep(const Tensor& x) {
    check(x.ndim() == 3, "sum_axis0_keep: input must be (C,H,W), got " + shape_str(x.shape()));
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    const auto& xv = x.values();
    std::vector<double> out(static_cast<size_t>(hw), 0.0);
    for (int ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < hw; ++i) out[i] += xv[ci * hw + i];
    return make_op({x}, {1, x.dim(1), x.dim(2)}, std::move(out), [c, hw](TensorNode& self) {
        TensorNode* xn = self.inputs[0].node();
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int64_t i = 0; i < hw; ++i) xn->g[ci * hw + i] += self.g[i];
    });
}

Tensor mean_axis0_keep(const Tensor& x) {
    return mul_scalar(sum_axis0_keep(x), 1.0 / x.dim(0));
}

Tensor softmax(const Tensor& x, int axis) {
    const Shape& s = x.shape();
    check(axis >= 0 && axis < x.ndim(), "softmax: axis out of range");
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
    for (size_t d = static_cast<size_t>(axis) + 1; d < s.size(); ++d) inner *= s[d];
    const int64_t k = s[static_cast<size_t>(axis)];
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            double mx = -1e300;
            for (int64_t j = 0; j < k; ++j) mx = std::max(mx, xv[(o * k + j) * inner + i]);
            double sum = 0.0;
            for (int64_t j = 0; j < k; ++j) {
                double e = std::exp(xv[(o * k + j) * inner + i] - mx);
                out[(o * k + j) * inner + i] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (int64_t j = 0; j < k; ++j) out[(o * k + j) * inner + i] *= inv;
        }
    return make_op({x}, s, std::move(out), [outer, inner, k](TensorNode& self) {
        TensorNode* xn = self.inputs[0].node();
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
                double dot = 0.0;
                for (int64_t j = 0; j < k; ++j) {
                    const int64_t idx = (o * k + j) * inner + i;
                    dot += self.g[idx] * self.v[idx];
                }
                for (int64_t j = 0; j < k; ++j) {
                    const int64_t idx = (o * k + j) * inner + i;
                    xn->g[idx] += self.v[idx] * (self.g[idx] - dot);
                }
            }
    });
}

// ---------------- neural-net kernels ----------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check(x.ndim() == 3, "conv2d: input must be (C,H,W), got " + shape_str(x.shape()));
    check(w.ndim() == 4, "conv2d: weight must be (Co,Ci,kh,kw), got " + shape_str(w.shape()));
    check(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    check(w.dim(1) == ci, "conv2d: weight dim 1 (in channels) is " + std::to_string(w.dim(1)) +
                              " but input has " + std::to_string(ci) + " channels");
    const bool has_bias = b.defined();
    if (has_bias)
        check(b.ndim() == 1 && b.dim(0) == co,
              "conv2d: bias dim 0 must equal out channels " + std::to_string(co));
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    check(oh > 0 && ow > 0, "conv2d: output would be empty for input " + shape_str(x.shape()));

    const auto& xv = x.values();
    const auto& wv = w.values();
    std::vector<double> out(static_cast<size_t>(co) * oh * ow, 0.0);
    if (has_bias) {
        const auto& bv = b.values();
        for (int c = 0; c < co; ++c)
            std::fill(out.begin() + static_cast<int64_t>(c) * oh * ow,
                      out.begin() + static_cast<int64_t>(c + 1) * oh * ow, bv[c]);
    }
    for (int c = 0; c < co; ++c) {
        double* outc = out.data() + static_cast<int64_t>(c) * oh * ow;
        for (int ic = 0; ic < ci; ++ic) {
            const double* inc = xv.data() + static_cast<int64_t>(ic) * h * wd;
            const double* wc = wv.data() + (static_cast<int64_t>(c) * ci + ic) * kh * kw;
            for (int r = 0; r < kh; ++r)
                for (int s = 0; s < kw; ++s) {
                    const double wval = wc[r * kw + s];
                    if (wval == 0.0) continue;
                    for (int y = 0; y < oh; ++y) {
                        const int iy = y * stride + r - pad;
                        if (iy < 0 || iy >= h) continue;
                        const double* inrow = inc + static_cast<int64_t>(iy) * wd;
                        double* outrow = outc + static_cast<int64_t>(y) * ow;
                        for (int xo = 0; xo < ow; ++xo) {
                            const int ix = xo * stride + s - pad;
                            if (ix < 0 || ix >= wd) continue;
                            outrow[xo] += wval * inrow[ix];
                        }
                    }
                }
        }
    }
    std::vector<Tensor> inputs = has_bias ? std::vector<Tensor>{x, w, b} : std::vector<Tensor>{x, w};
    return make_op(
        inputs, {co, oh, ow}, std::move(out),
        [ci, h, wd, co, kh, kw, oh, ow, stride, pad, has_bias](TensorNode& self) {
            TensorNode* xn = self.inputs[0].node();
            TensorNode* wn = self.inputs[1].node();
            TensorNode* bn = has_bias ? self.inputs[2].node() : nullptr;
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (int c = 0; c < co; ++c) {
                    double acc = 0.0;
                    const double* gc = self.g.data() + static_cast<int64_t>(c) * oh * ow;
                    for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) acc += gc[i];
                    bn->g[c] += acc;
                }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                for (int c = 0; c < co; ++c) {
                    const double* gc = self.g.data() + static_cast<int64_t>(c) * oh * ow;
                    for (int ic = 0; ic < ci; ++ic) {
                        const double* inc = xn->v.data() + static_cast<int64_t>(ic) * h * wd;
                        double* gw = wn->g.data() + (static_cast<int64_t>(c) * ci + ic) * kh * kw;
                        for (int r = 0; r < kh; ++r)
                            for (int s = 0; s < kw; ++s) {
                                double acc = 0.0;
                                for (int y = 0; y < oh; ++y) {
                                    const int iy = y * stride + r - pad;
                                    if (iy < 0 || iy >= h) continue;
                                    const double* inrow = inc + static_cast<int64_t>(iy) * wd;
                                    const double* grow = gc + static_cast<int64_t>(y) * ow;
                                    for (int xo = 0; xo < ow; ++xo) {
                                        const int ix = xo * stride + s - pad;
                                        if (ix < 0 || ix >= wd) continue;
                                        acc += grow[xo] * inrow[ix];
                                    }
                                }
                                gw[r * kw + s] += acc;
                            }
                    }
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int c = 0; c < co; ++c) {
                    const double* gc = self.g.data() + static_cast<int64_t>(c) * oh * ow;
                    for (int ic = 0; ic < ci; ++ic) {
                        double* gx = xn->g.data() + static_cast<int64_t>(ic) * h * wd;
                        const double* wc =
                            wn->v.data() + (static_cast<int64_t>(c) * ci + ic) * kh * kw;
                        for (int r = 0; r < kh; ++r)
                            for (int s = 0; s < kw; ++s) {
                                const double wval = wc[r * kw + s];
                                if (wval == 0.0) continue;
                                for (int y = 0; y < oh; ++y) {
                                    const int iy = y * stride + r - pad;
                                    if (iy < 0 || iy >= h) continue;
                                    double* gxrow = gx + static_cast<int64_t>(iy) * wd;
                                    const double* grow = gc + static_cast<int64_t>(y) * ow;
                                    for (int xo = 0; xo < ow; ++xo) {
                                        const int ix = xo * stride + s - pad;
                                        if (ix < 0 || ix >= wd) continue;
                                        gxrow[ix] += wval * grow[xo];
                                    }
                                }
                            }
                    }
                }
            }
        });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check(x.ndim() == 3, "conv_transpose2d: input must be (C,H,W), got " + shape_str(x.shape()));
    check(w.ndim() == 4, "conv_transpose2d: weight must be (Ci,Co,kh,kw), got " + shape_str(w.shape()));
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    check(w.dim(0) == ci, "conv_transpose2d: weight dim 0 (in channels) is " +
                              std::to_string(w.dim(0)) + " but input has " + std::to_string(ci));
    const int co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int oh = (h - 1) * stride - 2 * pad + kh;
    const int ow = (wd - 1) * stride - 2 * pad + kw;
    check(oh > 0 && ow > 0, "conv_transpose2d: output would be empty");
    const bool has_bias = b.defined();
    if (has_bias)
        check(b.ndim() == 1 && b.dim(0) == co,
              "conv_transpose2d: bias dim 0 must equal out channels " + std::to_string(co));

    const auto& xv = x.values();
    const auto& wv = w.values();
    std::vector<double> out(static_cast<size_t>(co) * oh * ow, 0.0);
    if (has_bias) {
        const auto& bv = b.values();
        for (int c = 0; c < co; ++c)
            std::fill(out.begin() + static_cast<int64_t>(c) * oh * ow,
                      out.begin() + static_cast<int64_t>(c + 1) * oh * ow, bv[c]);
    }
    for (int ic = 0; ic < ci; ++ic) {
        const double* inc = xv.data() + static_cast<int64_t>(ic) * h * wd;
        for (int c = 0; c < co; ++c) {
            double* outc = out.data() + static_cast<int64_t>(c) * oh * ow;
            const double* wc = wv.data() + (static_cast<int64_t>(ic) * co + c) * kh * kw;
            for (int y = 0; y < h; ++y)
                for (int xo = 0; xo < wd; ++xo) {
                    const double xval = inc[y * wd + xo];
                    if (xval == 0.0) continue;
                    for (int r = 0; r < kh; ++r) {
                        const int oy = y * stride + r - pad;
                        if (oy < 0 || oy >= oh) continue;
                        double* outrow = outc + static_cast<int64_t>(oy) * ow;
                        for (int s = 0; s < kw; ++s) {
                            const int ox = xo * stride + s - pad;
                            if (ox < 0 || ox >= ow) continue;
                            outrow[ox] += xval * wc[r * kw + s];
                        }
                    }
                }
        }
    }
    std::vector<Tensor> inputs = has_bias ? std::vector<Tensor>{x, w, b} : std::vector<Tensor>{x, w};
    return make_op(
        inputs, {co, oh, ow}, std::move(out),
        [ci, h, wd, co, kh, kw, oh, ow, stride, pad, has_bias](TensorNode& self) {
            TensorNode* xn = self.inputs[0].node();
            TensorNode* wn = self.inputs[1].node();
            TensorNode* bn = has_bias ? self.inputs[2].node() : nullptr;
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (int c = 0; c < co; ++c) {
                    double acc = 0.0;
                    const double* gc = self.g.data() + static_cast<int64_t>(c) * oh * ow;
                    for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) acc += gc[i];
                    bn->g[c] += acc;
                }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                for (int ic = 0; ic < ci; ++ic) {
                    const double* inc = xn->v.data() + static_cast<int64_t>(ic) * h * wd;
                    for (int c = 0; c < co; ++c) {
                        const double* gc = self.g.data() + static_cast<int64_t>(c) * oh * ow;
                        double* gw = wn->g.data() + (static_cast<int64_t>(ic) * co + c) * kh * kw;
                        for (int y = 0; y < h; ++y)
                            for (int xo = 0; xo < wd; ++xo) {
                                const double xval = inc[y * wd + xo];
                                if (xval == 0.0) continue;
                                for (int r = 0; r < kh; ++r) {
                                    const int oy = y * stride + r - pad;
                                    if (oy < 0 || oy >= oh) continue;
                                    const double* grow = gc + static_cast<int64_t>(oy) * ow;
                                    for (int s = 0; s < kw; ++s) {
                                        const int ox = xo * stride + s - pad;
                                        if (ox < 0 || ox >= ow) continue;
                                        gw[r * kw + s] += xval * grow[ox];
                                    }
                                }
                            }
                    }
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int ic = 0; ic < ci; ++ic) {
                    double* gx = xn->g.data() + static_cast<int64_t>(ic) * h * wd;
                    for (int c = 0; c < co; ++c) {
                        const double* gc = self.g.data() + static_cast<int64_t>(c) * oh * ow;
                        const double* wc =
                            wn->v.data() + (static_cast<int64_t>(ic) * co + c) * kh * kw;
                        for (int y = 0; y < h; ++y)
                            for (int xo = 0; xo < wd; ++xo) {
                                double acc = 0.0;
                                for (int r = 0; r < kh; ++r) {
                                    const int oy = y * stride + r - pad;
                                    if (oy < 0 || oy >= oh) continue;
                                    const double* grow = gc + static_cast<int64_t>(oy) * ow;
                                    for (int s = 0; s < kw; ++s) {
                                        const int ox = xo * stride + s - pad;
                                        if (ox < 0 || ox >= ow) continue;
                                        acc += wc[r * kw + s] * grow[ox];
                                    }
                                }
                                gx[y * wd + xo] += acc;
                            }
                    }
                }
            }
        });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check(x.ndim() == 1, "linear: input must be 1-D, got " + shape_str(x.shape()));
    check(w.ndim() == 2 && w.dim(1) == x.dim(0),
          "linear: weight dim 1 is " + std::to_string(w.ndim() == 2 ? w.dim(1) : -1) +
              ", expected " + std::to_string(x.dim(0)));
    const int m = w.dim(0), n = w.dim(1);
    const bool has_bias = b.defined();
    if (has_bias) check(b.ndim() == 1 && b.dim(0) == m, "linear: bias dim 0 must be " + std::to_string(m));
    const auto& xv = x.values();
    const auto& wv = w.values();
    std::vector<double> out(static_cast<size_t>(m), 0.0);
    for (int i = 0; i < m; ++i) {
        double acc = has_bias ? b.values()[i] : 0.0;
        for (int j = 0; j < n; ++j) acc += wv[static_cast<int64_t>(i) * n + j] * xv[j];
        out[i] = acc;
    }
    std::vector<Tensor> inputs = has_bias ? std::vector<Tensor>{x, w, b} : std::vector<Tensor>{x, w};
    return make_op(inputs, {m}, std::move(out), [m, n, has_bias](TensorNode& self) {
        TensorNode* xn = self.inputs[0].node();
        TensorNode* wn = self.inputs[1].node();
        TensorNode* bn = has_bias ? self.inputs[2].node() : nullptr;
        if (bn && bn->requires_grad) {
            bn->ensure_grad();
            for (int i = 0; i < m; ++i) bn->g[i] += self.g[i];
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    wn->g[static_cast<int64_t>(i) * n + j] += self.g[i] * xn->v[j];
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int i = 0; i < m; ++i) acc += self.g[i] * wn->v[static_cast<int64_t>(i) * n + j];
                xn->g[j] += acc;
            }
        }
    });
}

namespace {

// Shared bilinear-resize geometry: source coordinate for output index.
inline double src_coord(int out_idx, double scale) {
    return (out_idx + 0.5) * scale - 0.5;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    check(x.ndim() == 3, "bilinear_resize: input must be (C,H,W), got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(wd) / out_w;
    const auto& xv = x.values();
    std::vector<double> out(static_cast<size_t>(c) * out_h * out_w);
    // Precompute per-row/col neighbors and weights (clamped at borders).
    std::vector<int> y0(out_h), y1(out_h);
    std::vector<double> wy(out_h);
    for (int y = 0; y < out_h; ++y) {
        double fy = std::clamp(src_coord(y, sy), 0.0, static_cast<double>(h - 1));
        y0[y] = static_cast<int>(std::floor(fy));
        y1[y] = std::min(y0[y] + 1, h - 1);
        wy[y] = fy - y0[y];
    }
    std::vector<int> x0(out_w), x1(out_w);
    std::vector<double> wx(out_w);
    for (int xo = 0; xo < out_w; ++xo) {
        double fx = std::clamp(src_coord(xo, sx), 0.0, static_cast<double>(wd - 1));
        x0[xo] = static_cast<int>(std::floor(fx));
        x1[xo] = std::min(x0[xo] + 1, wd - 1);
        wx[xo] = fx - x0[xo];
    }
    for (int ci = 0; ci < c; ++ci) {
        const double* inc = xv.data() + static_cast<int64_t>(ci) * h * wd;
        double* outc = out.data() + static_cast<int64_t>(ci) * out_h * out_w;
        for (int y = 0; y < out_h; ++y)
            for (int xo = 0; xo < out_w; ++xo) {
                const double a = inc[y0[y] * wd + x0[xo]], bb = inc[y0[y] * wd + x1[xo]];
                const double cc = inc[y1[y] * wd + x0[xo]], dd = inc[y1[y] * wd + x1[xo]];
                outc[y * out_w + xo] = (a * (1 - wx[xo]) + bb * wx[xo]) * (1 - wy[y]) +
                                       (cc * (1 - wx[xo]) + dd * wx[xo]) * wy[y];
            }
    }
    return make_op({x}, {c, out_h, out_w}, std::move(out),
                   [c, h, wd, out_h, out_w, y0, y1, wy, x0, x1, wx](TensorNode& self) {
                       TensorNode* xn = self.inputs[0].node();
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       for (int ci = 0; ci < c; ++ci) {
                           double* gx = xn->g.data() + static_cast<int64_t>(ci) * h * wd;
                           const double* gc = self.g.data() + static_cast<int64_t>(ci) * out_h * out_w;
                           for (int y = 0; y < out_h; ++y)
                               for (int xo = 0; xo < out_w; ++xo) {
                                   const double g = gc[y * out_w + xo];
                                   gx[y0[y] * wd + x0[xo]] += g * (1 - wx[xo]) * (1 - wy[y]);
                                   gx[y0[y] * wd + x1[xo]] += g * wx[xo] * (1 - wy[y]);
                                   gx[y1[y] * wd + x0[xo]] += g * (1 - wx[xo]) * wy[y];
                                   gx[y1[y] * wd + x1[xo]] += g * wx[xo] * wy[y];
                               }
                       }
                   });
}

Tensor nearest_resize(const Tensor& x, int out_h, int out_w) {
    check(x.ndim() == 3, "nearest_resize: input must be (C,H,W), got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(wd) / out_w;
    std::vector<int> ys(out_h), xs(out_w);
    for (int y = 0; y < out_h; ++y)
        ys[y] = std::min(h - 1, static_cast<int>(std::floor((y + 0.5) * sy)));
    for (int xo = 0; xo < out_w; ++xo)
        xs[xo] = std::min(wd - 1, static_cast<int>(std::floor((xo + 0.5) * sx)));
    const auto& xv = x.values();
    std::vector<double> out(static_cast<size_t>(c) * out_h * out_w);
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < out_h; ++y)
            for (int xo = 0; xo < out_w; ++xo)
                out[(static_cast<int64_t>(ci) * out_h + y) * out_w + xo] =
                    xv[(static_cast<int64_t>(ci) * h + ys[y]) * wd + xs[xo]];
    return make_op({x}, {c, out_h, out_w}, std::move(out),
                   [c, h, wd, out_h, out_w, ys, xs](TensorNode& self) {
                       TensorNode* xn = self.inputs[0].node();
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       for (int ci = 0; ci < c; ++ci)
                           for (int y = 0; y < out_h; ++y)
                               for (int xo = 0; xo < out_w; ++xo)
                                   xn->g[(static_cast<int64_t>(ci) * h + ys[y]) * wd + xs[xo]] +=
                                       self.g[(static_cast<int64_t>(ci) * out_h + y) * out_w + xo];
                   });
}

Tensor grid_sample(const Tensor& x, const Tensor& coords) {
    check(x.ndim() == 3, "grid_sample: input must be (C,H,W), got " + shape_str(x.shape()));
    check(coords.ndim() == 3 && coords.dim(0) == 2,
          "grid_sample: coords must be (2,Ho,Wo), got " + shape_str(coords.shape()));
    const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int oh = coords.dim(1), ow = coords.dim(2);
    const int64_t ohw = static_cast<int64_t>(oh) * ow;
    const auto& xv = x.values();
    const auto& cv = coords.values();
    std::vector<double> out(static_cast<size_t>(c) * ohw, 0.0);
    // Values outside the image are zero; the four taps are weighted
    // independently so samples straddling the border fade to zero.
    auto tap = [&](int ci, int yy, int xx) -> double {
        if (yy < 0 || yy >= h || xx < 0 || xx >= wd) return 0.0;
        return xv[(static_cast<int64_t>(ci) * h + yy) * wd + xx];
    };
    for (int64_t p = 0; p < ohw; ++p) {
        const double u = cv[p];        // x coordinate
        const double v = cv[ohw + p];  // y coordinate
        const double fx = std::floor(u), fy = std::floor(v);
        const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
        const double ax = u - fx, ay = v - fy;
        if (ix < -1 || ix >= wd || iy < -1 || iy >= h) continue;  // fully outside
        for (int ci = 0; ci < c; ++ci) {
            const double val = (1 - ax) * (1 - ay) * tap(ci, iy, ix) +
                               ax * (1 - ay) * tap(ci, iy, ix + 1) +
                               (1 - ax) * ay * tap(ci, iy + 1, ix) +
                               ax * ay * tap(ci, iy + 1, ix + 1);
            out[ci * ohw + p] = val;
        }
    }
    return make_op({x, coords}, {c, oh, ow}, std::move(out), [c, h, wd, ohw](TensorNode& self) {
        TensorNode* xn = self.inputs[0].node();
        TensorNode* cn = self.inputs[1].node();
        const auto& cv = cn->v;
        const auto& xv = xn->v;
        const bool gx = xn->requires_grad;
        const bool gc = cn->requires_grad;
        if (gx) xn->ensure_grad();
        if (gc) cn->ensure_grad();
        auto tap = [&](int ci, int yy, int xx) -> double {
            if (yy < 0 || yy >= h || xx < 0 || xx >= wd) return 0.0;
            return xv[(static_cast<int64_t>(ci) * h + yy) * wd + xx];
        };
        auto put = [&](int ci, int yy, int xx, double gval) {
            if (yy < 0 || yy >= h || xx < 0 || xx >= wd) return;
            xn->g[(static_cast<int64_t>(ci) * h + yy) * wd + xx] += gval;
        };
        for (int64_t p = 0; p < ohw; ++p) {
            const double u = cv[p];
            const double v = cv[ohw + p];
            const double fx = std::floor(u), fy = std::floor(v);
            const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
            const double ax = u - fx, ay = v - fy;
            if (ix < -1 || ix >= wd || iy < -1 || iy >= h) continue;
            double du = 0.0, dv = 0.0;
            for (int ci = 0; ci < c; ++ci) {
                const double g = self.g[ci * ohw + p];
                if (g == 0.0) continue;
                const double t00 = tap(ci, iy, ix), t01 = tap(ci, iy, ix + 1);
                const double t10 = tap(ci, iy + 1, ix), t11 = tap(ci, iy + 1, ix + 1);
                if (gx) {
                    put(ci, iy, ix, g * (1 - ax) * (1 - ay));
                    put(ci, iy, ix + 1, g * ax * (1 - ay));
                    put(ci, iy + 1, ix, g * (1 - ax) * ay);
                    put(ci, iy + 1, ix + 1, g * ax * ay);
                }
                if (gc) {
                    du += g * ((t01 - t00) * (1 - ay) + (t11 - t10) * ay);
                    dv += g * ((t10 - t00) * (1 - ax) + (t11 - t01) * ax);
                }
            }
            if (gc) {
                cn->g[p] += du;
                cn->g[ohw + p] += dv;
            }
        }
    });
}

// ---------------- quantization / tape control ----------------

Tensor stop_gradient(const Tensor& x) {
    auto n = std::make_shared<TensorNode>();
    n->shape = x.shape();
    n->v = x.values();
    return Tensor(std::move(n));
}

Tensor ste_round(const Tensor& x) {
    return unary_op(x, [](double v) { return round_half_away(v); },
                    [](double, double) { return 1.0; });
}

Tensor ste_clamp(const Tensor& x, double lo, double hi) {
    return unary_op(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                    [](double, double) { return 1.0; });
}

Tensor add_uniform_noise(const Tensor& x, Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + dist(rng);
    return make_op({x}, x.shape(), std::move(out), [](TensorNode& self) {
        TensorNode* xn = self.inputs[0].node();
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.g.size(); ++i) xn->g[i] += self.g[i];
    });
}

}  // namespace csplat
