#include "csplat/coder.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace csplat {

namespace {

constexpr uint64_t kTop = 1ull << 56;
constexpr uint64_t kBottom = 1ull << 48;

double std_normal_cdf_d(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }

}  // namespace

bool CdfTable::valid() const {
    if (cum.size() < 2 || cum.front() != 0 || cum.back() != kCdfTotal) return false;
    for (size_t i = 1; i < cum.size(); ++i)
        if (cum[i] <= cum[i - 1]) return false;
    return true;
}

double CdfTable::ideal_bits(int sym) const {
    return 16.0 - std::log2(static_cast<double>(count(sym)));
}

CdfTable cdf_from_probs(const std::vector<double>& probs) {
    const size_t a = probs.size();
    if (a == 0 || a > kCdfTotal)
        throw std::invalid_argument("cdf_from_probs: alphabet size " + std::to_string(a) +
                                    " outside [1, 65536]");
    std::vector<int64_t> counts(a);
    int64_t total = 0;
    for (size_t i = 0; i < a; ++i) {
        counts[i] = std::max<int64_t>(1, std::llround(probs[i] * kCdfTotal));
        total += counts[i];
    }
    int64_t diff = static_cast<int64_t>(kCdfTotal) - total;
    while (diff != 0) {
        size_t best = 0;
        for (size_t i = 1; i < a; ++i)
            if (counts[i] > counts[best]) best = i;
        if (diff > 0) {
            counts[best] += diff;
            diff = 0;
        } else {
            const int64_t take = std::min(-diff, counts[best] - 1);
            if (take == 0)
                throw std::runtime_error("cdf_from_probs: cannot normalize counts");
            counts[best] -= take;
            diff += take;
        }
    }
    CdfTable t;
    t.cum.resize(a + 1);
    t.cum[0] = 0;
    for (size_t i = 0; i < a; ++i) t.cum[i + 1] = t.cum[i] + static_cast<uint32_t>(counts[i]);
    return t;
}

CdfTable cdf_from_gaussian(double mu, double sigma, int alphabet_l) {
    const int a = 2 * alphabet_l + 1;
    std::vector<double> probs(static_cast<size_t>(a), 0.0);
    // Mass beyond ~9 sigma is below count resolution; those symbols keep the
    // count-1 floor from cdf_from_probs.
    const int lo = std::max(-alphabet_l, static_cast<int>(std::floor(mu - 9.0 * sigma)) - 1);
    const int hi = std::min(alphabet_l, static_cast<int>(std::ceil(mu + 9.0 * sigma)) + 1);
    for (int k = lo; k <= hi; ++k) {
        double c_hi = k == alphabet_l ? 1.0 : std_normal_cdf_d((k + 0.5 - mu) / sigma);
        double c_lo = k == -alphabet_l ? 0.0 : std_normal_cdf_d((k - 0.5 - mu) / sigma);
        probs[static_cast<size_t>(k + alphabet_l)] = std::max(0.0, c_hi - c_lo);
    }
    return cdf_from_probs(probs);
}

void RangeEncoder::encode(uint32_t cum_lo, uint32_t freq, uint32_t total) {
    range_ /= total;
    low_ += cum_lo * range_;
    range_ *= freq;
    while ((low_ ^ (low_ + range_)) < kTop ||
           (range_ < kBottom && ((range_ = (0 - low_) & (kBottom - 1)), true))) {
        out_.push_back(static_cast<uint8_t>(low_ >> 56));
        low_ <<= 8;
        range_ <<= 8;
    }
}

std::vector<uint8_t> RangeEncoder::finish() {
    for (int i = 0; i < 8; ++i) {
        out_.push_back(static_cast<uint8_t>(low_ >> 56));
        low_ <<= 8;
    }
    return std::move(out_);
}

RangeDecoder::RangeDecoder(const std::vector<uint8_t>& bytes) : bytes_(&bytes) {
    for (int i = 0; i < 8; ++i) code_ = (code_ << 8) | next_byte();
}

uint8_t RangeDecoder::next_byte() {
    if (pos_ >= bytes_->size()) {
        if (!fault_) fault_ = pos_;
        ++pos_;
        return 0;
    }
    return (*bytes_)[pos_++];
}

int RangeDecoder::decode_symbol(const CdfTable& table) {
    range_ /= kCdfTotal;
    uint64_t f = (code_ - low_) / range_;
    if (f >= kCdfTotal) {
        if (!fault_) fault_ = pos_;
        f = kCdfTotal - 1;
    }
    const auto it = std::upper_bound(table.cum.begin() + 1, table.cum.end(), static_cast<uint32_t>(f));
    const int sym = static_cast<int>(it - table.cum.begin()) - 1;
    const uint32_t cum_lo = table.cum[sym];
    const uint32_t freq = table.count(sym);
    low_ += cum_lo * range_;
    range_ *= freq;
    while ((low_ ^ (low_ + range_)) < kTop ||
           (range_ < kBottom && ((range_ = (0 - low_) & (kBottom - 1)), true))) {
        code_ = (code_ << 8) | next_byte();
        low_ <<= 8;
        range_ <<= 8;
    }
    return sym;
}

std::vector<uint8_t> rc_encode(const std::vector<int>& symbols,
                               const std::vector<const CdfTable*>& tables) {
    if (symbols.size() != tables.size())
        throw std::invalid_argument("rc_encode: " + std::to_string(symbols.size()) +
                                    " symbols but " + std::to_string(tables.size()) + " tables");
    RangeEncoder enc;
    for (size_t i = 0; i < symbols.size(); ++i) {
        const int sym = symbols[i];
        if (sym < 0 || sym >= tables[i]->alphabet_size())
            throw std::invalid_argument("rc_encode: symbol " + std::to_string(sym) +
                                        " outside alphabet at position " + std::to_string(i));
        enc.encode_symbol(sym, *tables[i]);
    }
    return enc.finish();
}

std::vector<int> rc_decode(const std::vector<uint8_t>& bytes,
                           const std::vector<const CdfTable*>& tables, size_t count) {
    if (tables.size() != count)
        throw std::invalid_argument("rc_decode: table count does not match symbol count");
    std::vector<int> out;
    out.reserve(count);
    if (count == 0) return out;
    RangeDecoder dec(bytes);
    for (size_t i = 0; i < count; ++i) {
        out.push_back(dec.decode_symbol(*tables[i]));
        if (dec.fault_position())
            throw std::runtime_error("rc_decode: inconsistent stream at byte " +
                                     std::to_string(*dec.fault_position()) + " (symbol " +
                                     std::to_string(i) + " of " + std::to_string(count) + ")");
    }
    return out;
}

std::vector<uint8_t> deflate_bytes(const std::vector<uint8_t>& raw) {
    z_stream zs{};
    if (deflateInit2(&zs, Z_BEST_COMPRESSION, Z_DEFLATED, -15, 8, Z_DEFAULT_STRATEGY) != Z_OK)
        throw std::runtime_error("deflate: init failed");
    std::vector<uint8_t> out(deflateBound(&zs, static_cast<uLong>(raw.size())));
    zs.next_in = const_cast<Bytef*>(raw.data());
    zs.avail_in = static_cast<uInt>(raw.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = deflate(&zs, Z_FINISH);
    deflateEnd(&zs);
    if (rc != Z_STREAM_END) throw std::runtime_error("deflate: stream error");
    out.resize(zs.total_out);
    return out;
}

std::vector<uint8_t> inflate_bytes(const std::vector<uint8_t>& compressed) {
    z_stream zs{};
    if (inflateInit2(&zs, -15) != Z_OK) throw std::runtime_error("inflate: init failed");
    std::vector<uint8_t> out;
    std::vector<uint8_t> buf(64 * 1024);
    zs.next_in = const_cast<Bytef*>(compressed.data());
    zs.avail_in = static_cast<uInt>(compressed.size());
    int rc = Z_OK;
    do {
        zs.next_out = buf.data();
        zs.avail_out = static_cast<uInt>(buf.size());
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw std::runtime_error("inflate: malformed deflate payload");
        }
        out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
    } while (rc != Z_STREAM_END && (zs.avail_in > 0 || zs.avail_out == 0));
    inflateEnd(&zs);
    if (rc != Z_STREAM_END) throw std::runtime_error("inflate: truncated deflate payload");
    return out;
}

// ---------------- container ----------------

namespace {

constexpr char kMagic[4] = {'C', 'S', 'P', 'L'};

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<uint8_t>& out, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::vector<uint8_t>* b;
    size_t pos = 0;

    void need(size_t n, const char* what) const {
        if (pos + n > b->size())
            throw std::runtime_error(std::string("unpack: truncated stream reading ") + what +
                                     " (need " + std::to_string(pos + n) + " bytes, have " +
                                     std::to_string(b->size()) + ")");
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return (*b)[pos++];
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = static_cast<uint16_t>((*b)[pos] | ((*b)[pos + 1] << 8));
        pos += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>((*b)[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    float f32(const char* what) {
        const uint32_t bits = u32(what);
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    std::vector<uint8_t> bytes(size_t n, const char* what) {
        need(n, what);
        std::vector<uint8_t> out(b->begin() + static_cast<long>(pos),
                                 b->begin() + static_cast<long>(pos + n));
        pos += n;
        return out;
    }
};

std::vector<uint8_t> encode_camera_payload(const SceneBitstream& scene) {
    std::vector<uint8_t> raw;
    put_u16(raw, static_cast<uint16_t>(scene.height));
    put_u16(raw, static_cast<uint16_t>(scene.width));
    raw.push_back(static_cast<uint8_t>(scene.cameras.size()));
    for (const Camera& c : scene.cameras) {
        put_f32(raw, static_cast<float>(c.fx));
        put_f32(raw, static_cast<float>(c.fy));
        put_f32(raw, static_cast<float>(c.cx));
        put_f32(raw, static_cast<float>(c.cy));
        for (double m : c.rotation.m) put_f32(raw, static_cast<float>(m));
        put_f32(raw, static_cast<float>(c.translation.x));
        put_f32(raw, static_cast<float>(c.translation.y));
        put_f32(raw, static_cast<float>(c.translation.z));
        put_f32(raw, static_cast<float>(c.near));
        put_f32(raw, static_cast<float>(c.far));
    }
    return raw;
}

}  // namespace

std::vector<uint8_t> pack(const SceneBitstream& scene) {
    if (scene.cameras.size() != scene.streams.size())
        throw std::invalid_argument("pack: camera count " + std::to_string(scene.cameras.size()) +
                                    " != stream view count " + std::to_string(scene.streams.size()));
    size_t levels = scene.streams.empty() ? 0 : scene.streams[0].size();
    for (const auto& view : scene.streams)
        if (view.size() != levels)
            throw std::invalid_argument("pack: inconsistent level count across views");
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    out.push_back(kBitstreamVersion);
    put_f32(out, scene.lambda);
    out.push_back(static_cast<uint8_t>(levels));
    const std::vector<uint8_t> cam_deflated = deflate_bytes(encode_camera_payload(scene));
    put_u32(out, static_cast<uint32_t>(cam_deflated.size()));
    out.insert(out.end(), cam_deflated.begin(), cam_deflated.end());
    for (const auto& view : scene.streams)
        for (const auto& level : view) {
            put_u32(out, static_cast<uint32_t>(level.size()));
            out.insert(out.end(), level.begin(), level.end());
        }
    return out;
}

SceneBitstream unpack(const std::vector<uint8_t>& bytes) {
    Reader r{&bytes};
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw std::runtime_error("unpack: bad magic, not a scene bitstream");
    r.pos = 4;
    const uint8_t version = r.u8("version");
    if (version != kBitstreamVersion)
        throw std::runtime_error("unpack: unsupported version " + std::to_string(version));
    SceneBitstream scene;
    scene.lambda = r.f32("lambda");
    const uint8_t levels = r.u8("level count");
    const uint32_t cam_len = r.u32("camera block length");
    const std::vector<uint8_t> cam_raw = inflate_bytes(r.bytes(cam_len, "camera block"));

    Reader cr{&cam_raw};
    scene.height = cr.u16("image height");
    scene.width = cr.u16("image width");
    const uint8_t n_views = cr.u8("view count");
    for (int i = 0; i < n_views; ++i) {
        const double fx = cr.f32("fx"), fy = cr.f32("fy"), cx = cr.f32("cx"), cy = cr.f32("cy");
        Mat3 rot;
        for (int k = 0; k < 9; ++k) rot.m[static_cast<size_t>(k)] = cr.f32("rotation");
        Vec3 t;
        t.x = cr.f32("translation");
        t.y = cr.f32("translation");
        t.z = cr.f32("translation");
        const double near = cr.f32("near"), far = cr.f32("far");
        scene.cameras.emplace_back(fx, fy, cx, cy, rot, t, near, far);
    }
    if (cr.pos != cam_raw.size())
        throw std::runtime_error("unpack: camera block has " + std::to_string(cam_raw.size()) +
                                 " bytes, consumed " + std::to_string(cr.pos));

    scene.streams.resize(n_views);
    for (int i = 0; i < n_views; ++i)
        for (int l = 0; l < levels; ++l) {
            const uint32_t len = r.u32("stream length");
            scene.streams[static_cast<size_t>(i)].push_back(r.bytes(len, "stream payload"));
        }
    if (r.pos != bytes.size())
        throw std::runtime_error("unpack: expected " + std::to_string(r.pos) + " bytes, got " +
                                 std::to_string(bytes.size()));
    return scene;
}

// ---------------- half-float ablation baseline ----------------

uint16_t f32_to_f16(float f) {
    uint32_t x;
    std::memcpy(&x, &f, 4);
    const uint32_t sign = (x >> 16) & 0x8000u;
    const uint32_t exp32 = (x >> 23) & 0xffu;
    uint32_t mant = x & 0x7fffffu;
    if (exp32 == 0xff) return static_cast<uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
    const int32_t exp = static_cast<int32_t>(exp32) - 127 + 15;
    if (exp >= 0x1f) return static_cast<uint16_t>(sign | 0x7c00u);  // overflow -> inf
    if (exp <= 0) {
        if (exp < -10) return static_cast<uint16_t>(sign);  // underflow -> signed zero
        const uint32_t m = mant | 0x800000u;
        const uint32_t shift = static_cast<uint32_t>(14 - exp);
        uint32_t s = m >> shift;
        const uint32_t rem = m & ((1u << shift) - 1u);
        const uint32_t half = 1u << (shift - 1);
        if (rem > half || (rem == half && (s & 1u))) ++s;
        return static_cast<uint16_t>(sign | s);
    }
    uint32_t h = sign | (static_cast<uint32_t>(exp) << 10) | (mant >> 13);
    const uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;  // carry may roll into exponent
    return static_cast<uint16_t>(h);
}

float f16_to_f32(uint16_t h) {
    const uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
    const uint32_t exp = (h >> 10) & 0x1fu;
    uint32_t mant = h & 0x3ffu;
    uint32_t x;
    if (exp == 0) {
        if (mant == 0) {
            x = sign;
        } else {
            int e = -1;
            do {
                mant <<= 1;
                ++e;
            } while (!(mant & 0x400u));
            x = sign | (static_cast<uint32_t>(127 - 15 - e) << 23) | ((mant & 0x3ffu) << 13);
        }
    } else if (exp == 0x1f) {
        x = sign | 0x7f800000u | (mant << 13);
    } else {
        x = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &x, 4);
    return f;
}

std::vector<uint8_t> naive_tensor_compress(const std::vector<Tensor>& tensors) {
    std::vector<uint8_t> raw;
    put_u32(raw, static_cast<uint32_t>(tensors.size()));
    for (const Tensor& t : tensors) {
        raw.push_back(static_cast<uint8_t>(t.ndim()));
        for (int d = 0; d < t.ndim(); ++d) put_u32(raw, static_cast<uint32_t>(t.dim(d)));
        for (double v : t.values()) {
            const uint16_t half = f32_to_f16(static_cast<float>(v));
            put_u16(raw, half);
        }
    }
    std::vector<uint8_t> out;
    const std::vector<uint8_t> deflated = deflate_bytes(raw);
    put_u32(out, static_cast<uint32_t>(raw.size()));
    out.insert(out.end(), deflated.begin(), deflated.end());
    return out;
}

std::vector<Tensor> naive_tensor_decompress(const std::vector<uint8_t>& bytes) {
    Reader outer{&bytes};
    outer.u32("raw size");
    const std::vector<uint8_t> raw =
        inflate_bytes(std::vector<uint8_t>(bytes.begin() + 4, bytes.end()));
    Reader r{&raw};
    const uint32_t count = r.u32("tensor count");
    std::vector<Tensor> out;
    for (uint32_t i = 0; i < count; ++i) {
        const uint8_t ndim = r.u8("rank");
        Shape shape(ndim);
        int64_t numel = 1;
        for (uint8_t d = 0; d < ndim; ++d) {
            shape[d] = static_cast<int>(r.u32("dim"));
            numel *= shape[d];
        }
        std::vector<double> vals(static_cast<size_t>(numel));
        for (int64_t k = 0; k < numel; ++k)
            vals[static_cast<size_t>(k)] = static_cast<double>(f16_to_f32(r.u16("value")));
        out.push_back(Tensor::from(shape, std::move(vals)));
    }
    return out;
}

}  // namespace csplat
