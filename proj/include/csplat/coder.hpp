#pragma once

// Bit-exact entropy coding and the packed scene bitstream.
//
// The range coder keeps 64-bit low/range state with 16-bit probability
// totals and byte-wise renormalization; encoder and decoder must perform the
// exact same arithmetic or decoding goes catastrophically wrong, so both run
// off the same CdfTable type. Streams are length-framed, little-endian, and
// carry no checksums.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "csplat/geometry.hpp"

namespace csplat {

constexpr uint32_t kCdfTotal = 1u << 16;

// Cumulative counts over the alphabet: cum[0]=0, cum[A]=2^16, strictly
// increasing (every symbol has count >= 1).
struct CdfTable {
    std::vector<uint32_t> cum;

    int alphabet_size() const { return static_cast<int>(cum.size()) - 1; }
    uint32_t count(int sym) const { return cum[sym + 1] - cum[sym]; }
    bool valid() const;
    double ideal_bits(int sym) const;  // -log2(count/2^16)
};

// Rounds a probability vector to integer counts: every symbol >= 1, total
// exactly 2^16. Deterministic, shared by encoder and decoder.
CdfTable cdf_from_probs(const std::vector<double>& probs);

// Discretized Gaussian over integers [-L, L]; tails fold into the edge
// symbols (matching clamp-to-alphabet quantization). Symbol index = k + L.
CdfTable cdf_from_gaussian(double mu, double sigma, int alphabet_l);

class RangeEncoder {
  public:
    void encode(uint32_t cum_lo, uint32_t freq, uint32_t total);
    void encode_symbol(int sym, const CdfTable& table) {
        encode(table.cum[sym], table.count(sym), kCdfTotal);
    }
    std::vector<uint8_t> finish();

  private:
    std::vector<uint8_t> out_;
    uint64_t low_ = 0;
    uint64_t range_ = ~0ull;
};

class RangeDecoder {
  public:
    explicit RangeDecoder(const std::vector<uint8_t>& bytes);
    int decode_symbol(const CdfTable& table);
    // First byte position where the stream ran out or produced an impossible
    // frequency; empty while the stream is consistent.
    std::optional<size_t> fault_position() const { return fault_; }

  private:
    uint8_t next_byte();
    const std::vector<uint8_t>* bytes_;
    size_t pos_ = 0;
    uint64_t low_ = 0;
    uint64_t range_ = ~0ull;
    uint64_t code_ = 0;
    std::optional<size_t> fault_;
};

// Convenience forms over whole symbol sequences. tables[i] codes symbols[i];
// rc_decode throws on an inconsistent stream, naming the fault position.
std::vector<uint8_t> rc_encode(const std::vector<int>& symbols,
                               const std::vector<const CdfTable*>& tables);
std::vector<int> rc_decode(const std::vector<uint8_t>& bytes,
                           const std::vector<const CdfTable*>& tables, size_t count);

// RFC 1951 raw deflate (zlib-backed).
std::vector<uint8_t> deflate_bytes(const std::vector<uint8_t>& raw);
std::vector<uint8_t> inflate_bytes(const std::vector<uint8_t>& compressed);

// ---- packed scene bitstream ----
//
// Layout (all little-endian):
//   magic "CSPL" | version u8 = 1 | lambda f32 | level_count u8
//   camera block:  u32 length, Deflate payload of
//       H u16, W u16, N u8, then per view fx fy cx cy f32, rotation 9xf32
//       row-major, translation 3xf32, near f32, far f32
//   per view x per level: u32 length, range-coded payload

constexpr uint8_t kBitstreamVersion = 1;

struct SceneBitstream {
    float lambda = 0.0f;
    int height = 0, width = 0;
    std::vector<Camera> cameras;
    std::vector<std::vector<std::vector<uint8_t>>> streams;  // [view][level]
};

std::vector<uint8_t> pack(const SceneBitstream& scene);
SceneBitstream unpack(const std::vector<uint8_t>& bytes);

// Ablation baseline: tensors serialized as IEEE half floats and deflated.
// Decompression restores the 16-bit payload exactly.
std::vector<uint8_t> naive_tensor_compress(const std::vector<Tensor>& tensors);
std::vector<Tensor> naive_tensor_decompress(const std::vector<uint8_t>& bytes);

uint16_t f32_to_f16(float f);
float f16_to_f32(uint16_t h);

}  // namespace csplat
