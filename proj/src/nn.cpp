#include "csplat/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace csplat {

Parameter& ParamStore::create(const std::string& identifier, Tensor t) {
    if (by_name_.count(identifier))
        throw std::invalid_argument("ParamStore: duplicate identifier '" + identifier + "'");
    auto p = std::make_unique<Parameter>();
    p->tensor = std::move(t);
    p->tensor.set_requires_grad(true);
    p->identifier = identifier;
    Parameter* raw = p.get();
    by_name_[identifier] = raw;
    params_.push_back(std::move(p));
    return *raw;
}

Parameter* ParamStore::find(const std::string& identifier) {
    auto it = by_name_.find(identifier);
    return it == by_name_.end() ? nullptr : it->second;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p->tensor.zero_grad();
}

void ParamStore::set_trainable_by_prefix(const std::vector<std::string>& prefixes) {
    for (auto& p : params_) {
        bool match = false;
        for (const auto& pre : prefixes)
            if (p->identifier.rfind(pre, 0) == 0) match = true;
        p->trainable = match;
    }
}

void ParamStore::set_all_trainable() {
    for (auto& p : params_) p->trainable = true;
}

Tensor init_conv_weight(const Shape& shape, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::rand_uniform(shape, rng, -bound, bound);
}

Conv2d::Conv2d(ParamStore& store, const std::string& name, int cin, int cout, int k, int stride_,
               Rng& rng)
    : stride(stride_), pad(k / 2) {
    w = &store.create(name + ".w", init_conv_weight({cout, cin, k, k}, cin * k * k, rng));
    b = &store.create(name + ".b", Tensor::zeros({cout}));
}

ConvTranspose2d::ConvTranspose2d(ParamStore& store, const std::string& name, int cin, int cout,
                                 int k, int stride_, Rng& rng)
    : stride(stride_), pad((k - stride_ + 1) / 2) {
    w = &store.create(name + ".w", init_conv_weight({cin, cout, k, k}, cin * k * k, rng));
    b = &store.create(name + ".b", Tensor::zeros({cout}));
}

Linear::Linear(ParamStore& store, const std::string& name, int n_in, int n_out, Rng& rng) {
    w = &store.create(name + ".w", init_conv_weight({n_out, n_in}, n_in, rng));
    b = &store.create(name + ".b", Tensor::zeros({n_out}));
}

void AdamW::step(ParamStore& store) {
    ++t_;
    const double alpha = lr > 0.0 ? lr : lr_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& p : store.all()) {
        if (!p->trainable) continue;
        auto& vals = p->tensor.mutable_values();
        const auto& grad = p->tensor.grad();
        auto& mom = state_[p.get()];
        if (mom.m.size() != vals.size()) {
            mom.m.assign(vals.size(), 0.0);
            mom.v.assign(vals.size(), 0.0);
        }
        for (size_t i = 0; i < vals.size(); ++i) {
            const double g = grad.empty() ? 0.0 : grad[i];
            mom.m[i] = beta1_ * mom.m[i] + (1.0 - beta1_) * g;
            mom.v[i] = beta2_ * mom.v[i] + (1.0 - beta2_) * g * g;
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            vals[i] -= alpha * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * vals[i]);
        }
    }
}

void AdamW::reset() {
    t_ = 0;
    state_.clear();
}

namespace {

constexpr char kMagic[4] = {'C', 'S', 'C', 'K'};
constexpr uint8_t kVersion = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

uint32_t get_u32(const std::vector<uint8_t>& in, size_t& pos) {
    if (pos + 4 > in.size()) throw std::runtime_error("checkpoint: truncated");
    uint32_t v = static_cast<uint32_t>(in[pos]) | (static_cast<uint32_t>(in[pos + 1]) << 8) |
                 (static_cast<uint32_t>(in[pos + 2]) << 16) |
                 (static_cast<uint32_t>(in[pos + 3]) << 24);
    pos += 4;
    return v;
}

}  // namespace

std::vector<uint8_t> serialize_params(const ParamStore& store) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    out.push_back(kVersion);
    put_u32(out, static_cast<uint32_t>(store.all().size()));
    for (const auto& p : store.all()) {
        put_u32(out, static_cast<uint32_t>(p->identifier.size()));
        out.insert(out.end(), p->identifier.begin(), p->identifier.end());
        const Shape& s = p->tensor.shape();
        out.push_back(static_cast<uint8_t>(s.size()));
        for (int d : s) put_u32(out, static_cast<uint32_t>(d));
        for (double v : p->tensor.values()) {
            float f = static_cast<float>(v);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(out, bits);
        }
    }
    return out;
}

void deserialize_params(const std::vector<uint8_t>& bytes, ParamStore& store) {
    size_t pos = 0;
    if (bytes.size() < 5 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic");
    pos = 4;
    const uint8_t version = bytes[pos++];
    if (version != kVersion)
        throw std::runtime_error("checkpoint: format version " + std::to_string(version) +
                                 " unsupported (expected " + std::to_string(kVersion) + ")");
    const uint32_t count = get_u32(bytes, pos);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = get_u32(bytes, pos);
        if (pos + name_len > bytes.size()) throw std::runtime_error("checkpoint: truncated name");
        std::string name(bytes.begin() + static_cast<long>(pos),
                         bytes.begin() + static_cast<long>(pos + name_len));
        pos += name_len;
        if (pos >= bytes.size()) throw std::runtime_error("checkpoint: truncated");
        const uint8_t ndim = bytes[pos++];
        Shape shape(ndim);
        int64_t numel = 1;
        for (uint8_t d = 0; d < ndim; ++d) {
            shape[d] = static_cast<int>(get_u32(bytes, pos));
            numel *= shape[d];
        }
        Parameter* p = store.find(name);
        if (!p) throw std::runtime_error("checkpoint: unknown parameter '" + name + "'");
        if (p->tensor.shape() != shape)
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        auto& vals = p->tensor.mutable_values();
        for (int64_t k = 0; k < numel; ++k) {
            const uint32_t bits = get_u32(bytes, pos);
            float f;
            std::memcpy(&f, &bits, 4);
            vals[static_cast<size_t>(k)] = static_cast<double>(f);
        }
    }
    if (pos != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
}

void save_checkpoint(const std::string& path, const ParamStore& store) {
    std::vector<uint8_t> bytes = serialize_params(store);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint '" + path + "'");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
}

void load_checkpoint(const std::string& path, ParamStore& store) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read checkpoint '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    deserialize_params(bytes, store);
}

}  // namespace csplat
