#pragma once

#include <array>
#include <cstdint>

namespace semilin {

// Purpose tags keep the random streams of different pipeline stages disjoint.
enum class StreamTag : uint32_t {
    scaler_paths = 1,
    train_paths = 2,
    test_paths = 3,
    final_test_paths = 4,
    inner_bank = 5,
    outer_points = 6,
    param_init = 7,
    baseline = 8,
    eval_samples = 9,
    reference = 10,
    generic = 11,
};

// Philox4x32-10 counter-based generator. Any (seed, tag, stream, draw) position
// can be regenerated independently, which is what makes multi-threaded runs and
// the frozen inner-sample bank bit-reproducible.
std::array<uint32_t, 4> philox4x32(std::array<uint32_t, 4> ctr, std::array<uint32_t, 2> key);

class Rng {
  public:
    Rng(uint64_t seed, StreamTag tag, uint64_t stream = 0);

    // Uniform on (0,1), strictly excluding the endpoints.
    double u01();
    // Standard normal via Box-Muller (second value cached).
    double normal();
    void fill_normal(double* out, int n);

    // Position the stream at an absolute draw index. Discards the normal cache,
    // so only call before drawing.
    void seek(uint64_t draw_index);

  private:
    std::array<uint32_t, 2> key_;
    uint32_t stream_lo_, stream_hi_;
    uint64_t draw_ = 0;
    double cached_normal_ = 0.0;
    bool has_cached_ = false;

    uint64_t raw64(uint64_t index) const;
};

}  // namespace semilin
