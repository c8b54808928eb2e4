#pragma once

// Parameters, layer building blocks, AdamW, and checkpoint serialization.

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "csplat/tensor.hpp"

namespace csplat {

struct Parameter {
    Tensor tensor;
    std::string identifier;
    bool trainable = true;
};

// Owns every parameter of a model. Identifiers must be unique; they key the
// checkpoint format and the stage-2 freeze groups.
class ParamStore {
  public:
    Parameter& create(const std::string& identifier, Tensor t);
    Parameter* find(const std::string& identifier);
    const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }

    void zero_grad();
    // Marks parameters trainable iff their identifier starts with one of the
    // given prefixes; everything else is frozen.
    void set_trainable_by_prefix(const std::vector<std::string>& prefixes);
    void set_all_trainable();

  private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, Parameter*> by_name_;
};

// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor init_conv_weight(const Shape& shape, int fan_in, Rng& rng);

struct Conv2d {
    Parameter* w = nullptr;
    Parameter* b = nullptr;
    int stride = 1, pad = 1;

    Conv2d() = default;
    Conv2d(ParamStore& store, const std::string& name, int cin, int cout, int k, int stride,
           Rng& rng);
    Tensor forward(const Tensor& x) const { return conv2d(x, w->tensor, b->tensor, stride, pad); }
};

struct ConvTranspose2d {
    Parameter* w = nullptr;
    Parameter* b = nullptr;
    int stride = 2, pad = 1;

    ConvTranspose2d() = default;
    ConvTranspose2d(ParamStore& store, const std::string& name, int cin, int cout, int k,
                    int stride, Rng& rng);
    Tensor forward(const Tensor& x) const {
        return conv_transpose2d(x, w->tensor, b->tensor, stride, pad);
    }
};

struct Linear {
    Parameter* w = nullptr;
    Parameter* b = nullptr;

    Linear() = default;
    Linear(ParamStore& store, const std::string& name, int n_in, int n_out, Rng& rng);
    Tensor forward(const Tensor& x) const { return linear(x, w->tensor, b->tensor); }
};

// Adaptive moments with decoupled weight decay. Frozen parameters are skipped
// entirely: no state update, values untouched.
class AdamW {
  public:
    explicit AdamW(double lr = 1e-4, double weight_decay = 0.01, double beta1 = 0.9,
                   double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore& store);
    void reset();
    int64_t step_index() const { return t_; }
    double lr = 0.0;  // when > 0, overrides the constructor learning rate

    double base_lr() const { return lr_; }

  private:
    struct Moments {
        std::vector<double> m, v;
    };
    double lr_, weight_decay_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::unordered_map<Parameter*, Moments> state_;
};

// Checkpoint file: magic "CSCK", version byte, parameter count, then per
// parameter a length-prefixed identifier, the shape manifest, and raw
// little-endian f32 values. Bytewise round-trip stable.
void save_checkpoint(const std::string& path, const ParamStore& store);
void load_checkpoint(const std::string& path, ParamStore& store);
std::vector<uint8_t> serialize_params(const ParamStore& store);
void deserialize_params(const std::vector<uint8_t>& bytes, ParamStore& store);

}  // namespace csplat
