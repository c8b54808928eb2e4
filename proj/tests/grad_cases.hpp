#pragma once

// One FD case per differentiable tensor kernel. Each case builds a fresh
// random instance; the unit suite runs a handful, the acceptance suite runs
// twenty-plus of each. Values are sampled away from kinks (|x| for abs,
// clamp corners, integer sample coordinates) where the derivative genuinely
// jumps.

#include <functional>
#include <string>
#include <vector>

#include "csplat/tensor.hpp"
#include "fd_check.hpp"

namespace gradcases {

struct GradCase {
    std::string name;
    std::function<fdcheck::Report(csplat::Rng&)> run;
};

namespace detail {

using csplat::Rng;
using csplat::Shape;
using csplat::Tensor;

inline Shape small_chw(Rng& rng) {
    std::uniform_int_distribution<int> c(1, 4), hw(3, 7);
    return {c(rng), hw(rng), hw(rng)};
}

inline Tensor rnd(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::rand_uniform(s, rng, lo, hi);
    t.set_requires_grad(true);
    return t;
}

// Keeps |x - kink| >= margin by pushing values outward.
inline Tensor rnd_away(const Shape& s, Rng& rng, double kink, double margin) {
    Tensor t = Tensor::rand_uniform(s, rng, -1.0, 1.0);
    for (auto& v : t.mutable_values()) {
        if (std::fabs(v - kink) < margin) v = kink + (v >= kink ? margin : -margin) * 2.0;
    }
    t.set_requires_grad(true);
    return t;
}

template <typename F>
GradCase unary(const std::string& name, F make_out, double lo = -1.0, double hi = 1.0) {
    return {name, [make_out, lo, hi](Rng& rng) {
                Tensor x = rnd(small_chw(rng), rng, lo, hi);
                return fdcheck::fd_check([&] { return csplat::mean_all(make_out(x)); }, {x}, rng);
            }};
}

}  // namespace detail

inline std::vector<GradCase> tensor_kernel_cases() {
    using namespace detail;
    using namespace csplat;
    std::vector<GradCase> cases;

    cases.push_back({"add", [](Rng& rng) {
                         Shape s = small_chw(rng);
                         Tensor a = rnd(s, rng), b = rnd(s, rng);
                         return fdcheck::fd_check([&] { return sum_all(mul(add(a, b), add(a, b))); },
                                                  {a, b}, rng);
                     }});
    cases.push_back({"sub_mul_div", [](Rng& rng) {
                         Shape s = small_chw(rng);
                         Tensor a = rnd(s, rng), b = rnd(s, rng, 0.5, 1.5), c = rnd(s, rng);
                         return fdcheck::fd_check(
                             [&] { return mean_all(div(mul(sub(a, c), a), b)); }, {a, b, c}, rng);
                     }});
    cases.push_back(unary("exp", [](const Tensor& x) { return csplat::exp(x); }));
    cases.push_back(unary("log", [](const Tensor& x) { return csplat::log(x); }, 0.2, 2.0));
    cases.push_back(unary("sqrt", [](const Tensor& x) { return csplat::sqrt(x); }, 0.2, 2.0));
    cases.push_back(unary("tanh", [](const Tensor& x) { return csplat::tanh(x); }, -2.0, 2.0));
    cases.push_back(unary("reciprocal", [](const Tensor& x) { return csplat::reciprocal(x); }, 0.3, 2.0));
    cases.push_back(unary("sigmoid", [](const Tensor& x) { return csplat::sigmoid(x); }, -3.0, 3.0));
    cases.push_back(unary("softplus", [](const Tensor& x) { return csplat::softplus(x); }, -3.0, 3.0));
    cases.push_back(unary("std_normal_cdf", [](const Tensor& x) { return csplat::std_normal_cdf(x); },
                          -2.0, 2.0));
    cases.push_back({"abs", [](Rng& rng) {
                         Tensor x = rnd_away(small_chw(rng), rng, 0.0, 0.05);
                         return fdcheck::fd_check([&] { return mean_all(csplat::abs(x)); }, {x}, rng);
                     }});
    cases.push_back({"leaky_relu", [](Rng& rng) {
                         Tensor x = rnd_away(small_chw(rng), rng, 0.0, 0.05);
                         return fdcheck::fd_check([&] { return mean_all(leaky_relu(x)); }, {x}, rng);
                     }});
    cases.push_back({"clamp_min_max", [](Rng& rng) {
                         Tensor x = rnd_away(rnd_away(small_chw(rng), rng, 0.3, 0.05).shape(), rng,
                                             0.3, 0.05);
                         for (auto& v : x.mutable_values())
                             if (std::fabs(v + 0.4) < 0.05) v += 0.15;
                         return fdcheck::fd_check(
                             [&] { return mean_all(clamp_max(clamp_min(x, -0.4), 0.3)); }, {x}, rng);
                     }});
    cases.push_back({"mul_channels", [](Rng& rng) {
                         Shape s = small_chw(rng);
                         Tensor x = rnd(s, rng);
                         Tensor g = rnd({s[0]}, rng, 0.5, 1.5);
                         return fdcheck::fd_check([&] { return mean_all(mul_channels(x, g)); },
                                                  {x, g}, rng);
                     }});
    cases.push_back({"mul_map", [](Rng& rng) {
                         Shape s = small_chw(rng);
                         Tensor x = rnd(s, rng);
                         Tensor m = rnd({1, s[1], s[2]}, rng);
                         return fdcheck::fd_check([&] { return mean_all(mul_map(x, m)); }, {x, m},
                                                  rng);
                     }});
    cases.push_back({"concat_slice", [](Rng& rng) {
                         std::uniform_int_distribution<int> hw(3, 6);
                         const int h = hw(rng), w = hw(rng);
                         Tensor a = rnd({2, h, w}, rng), b = rnd({3, h, w}, rng);
                         return fdcheck::fd_check(
                             [&] {
                                 Tensor cat = concat({a, b}, 0);
                                 return mean_all(mul(slice(cat, 0, 1, 3), slice(cat, 0, 1, 3)));
                             },
                             {a, b}, rng);
                     }});
    cases.push_back({"reshape_points", [](Rng& rng) {
                         Shape s = small_chw(rng);
                         Tensor x = rnd(s, rng);
                         return fdcheck::fd_check(
                             [&] {
                                 Tensor p = chw_to_points(x);
                                 return mean_all(mul(p, p));
                             },
                             {x}, rng);
                     }});
    cases.push_back({"softmax", [](Rng& rng) {
                         Tensor x = rnd(small_chw(rng), rng, -2.0, 2.0);
                         return fdcheck::fd_check(
                             [&] {
                                 Tensor p = softmax(x, 0);
                                 return sum_all(mul(p, p));
                             },
                             {x}, rng);
                     }});
    cases.push_back({"sum_axis0", [](Rng& rng) {
                         Tensor x = rnd(small_chw(rng), rng);
                         return fdcheck::fd_check(
                             [&] {
                                 Tensor s = sum_axis0_keep(x);
                                 return mean_all(mul(s, s));
                             },
                             {x}, rng);
                     }});
    cases.push_back({"conv2d_s1", [](Rng& rng) {
                         Tensor x = rnd({3, 6, 7}, rng);
                         Tensor w = rnd({2, 3, 3, 3}, rng);
                         Tensor b = rnd({2}, rng);
                         return fdcheck::fd_check(
                             [&] {
                                 Tensor y = conv2d(x, w, b, 1, 1);
                                 return mean_all(mul(y, y));
                             },
                             {x, w, b}, rng);
                     }});
    cases.push_back({"conv2d_s2", [](Rng& rng) {
                         Tensor x = rnd({2, 8, 6}, rng);
                         Tensor w = rnd({3, 2, 3, 3}, rng);
                         Tensor b = rnd({3}, rng);
                         return fdcheck::fd_check(
                             [&] {
                                 Tensor y = conv2d(x, w, b, 2, 1);
                                 return mean_all(mul(y, y));
                             },
                             {x, w, b}, rng);
                     }});
    cases.push_back({"conv_transpose2d", [](Rng& rng) {
                         Tensor x = rnd({3, 4, 5}, rng);
                         Tensor w = rnd({3, 2, 4, 4}, rng);
                         Tensor b = rnd({2}, rng);
                         return fdcheck::fd_check(
                             [&] {
                                 Tensor y = conv_transpose2d(x, w, b, 2, 1);
                                 return mean_all(mul(y, y));
                             },
                             {x, w, b}, rng);
                     }});
    cases.push_back({"linear", [](Rng& rng) {
                         Tensor x = rnd({5}, rng);
                         Tensor w = rnd({3, 5}, rng);
                         Tensor b = rnd({3}, rng);
                         return fdcheck::fd_check(
                             [&] {
                                 Tensor y = linear(x, w, b);
                                 return mean_all(mul(y, y));
                             },
                             {x, w, b}, rng);
                     }});
    cases.push_back({"bilinear_resize", [](Rng& rng) {
                         Tensor x = rnd({2, 4, 5}, rng);
                         return fdcheck::fd_check(
                             [&] {
                                 Tensor y = bilinear_resize(x, 7, 9);
                                 return mean_all(mul(y, y));
                             },
                             {x}, rng);
                     }});
    cases.push_back({"nearest_resize", [](Rng& rng) {
                         Tensor x = rnd({2, 4, 4}, rng);
                         return fdcheck::fd_check(
                             [&] {
                                 Tensor y = nearest_resize(x, 6, 6);
                                 return mean_all(mul(y, y));
                             },
                             {x}, rng);
                     }});
    cases.push_back({"grid_sample", [](Rng& rng) {
                         Tensor x = rnd({2, 6, 6}, rng);
                         // interior coords with fractional part in [0.2, 0.8]
                         Tensor coords = Tensor::zeros({2, 3, 4});
                         std::uniform_real_distribution<double> base(1.0, 3.0), fr(0.2, 0.8);
                         for (auto& v : coords.mutable_values())
                             v = std::floor(base(rng)) + fr(rng);
                         coords.set_requires_grad(true);
                         return fdcheck::fd_check(
                             [&] {
                                 Tensor y = grid_sample(x, coords);
                                 return mean_all(mul(y, y));
                             },
                             {x, coords}, rng);
                     }});
    cases.push_back({"uniform_noise_path", [](Rng& rng) {
                         Tensor x = rnd(small_chw(rng), rng);
                         const uint64_t noise_seed = rng();
                         return fdcheck::fd_check(
                             [&] {
                                 Rng noise_rng(noise_seed);
                                 Tensor y = add_uniform_noise(x, noise_rng);
                                 return mean_all(mul(y, y));
                             },
                             {x}, rng);
                     }});
    return cases;
}

}  // namespace gradcases
