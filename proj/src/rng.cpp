#include "semilin/rng.hpp"

#include <cmath>

namespace semilin {

namespace {

inline void mulhilo(uint32_t a, uint32_t b, uint32_t& hi, uint32_t& lo) {
    uint64_t p = static_cast<uint64_t>(a) * b;
    hi = static_cast<uint32_t>(p >> 32);
    lo = static_cast<uint32_t>(p);
}

constexpr uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr uint32_t kPhiloxW1 = 0xBB67AE85u;

}  // namespace

std::array<uint32_t, 4> philox4x32(std::array<uint32_t, 4> ctr, std::array<uint32_t, 2> key) {
    for (int round = 0; round < 10; ++round) {
        uint32_t hi0, lo0, hi1, lo1;
        mulhilo(kPhiloxM0, ctr[0], hi0, lo0);
        mulhilo(kPhiloxM1, ctr[2], hi1, lo1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += kPhiloxW0;
        key[1] += kPhiloxW1;
    }
    return ctr;
}

Rng::Rng(uint64_t seed, StreamTag tag, uint64_t stream) {
    key_ = {static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32)};
    // The tag perturbs the high stream word so (tag, stream) pairs never collide.
    stream_lo_ = static_cast<uint32_t>(stream);
    stream_hi_ = static_cast<uint32_t>(stream >> 32) ^ (static_cast<uint32_t>(tag) * 0x85EBCA6Bu);
}

uint64_t Rng::raw64(uint64_t index) const {
    std::array<uint32_t, 4> ctr = {static_cast<uint32_t>(index), static_cast<uint32_t>(index >> 32),
                                   stream_lo_, stream_hi_};
    auto r = philox4x32(ctr, key_);
    return (static_cast<uint64_t>(r[0]) << 32) | r[1];
}

double Rng::u01() {
    uint64_t r = raw64(draw_++);
    // 53 significant bits, shifted into (0,1).
    return (static_cast<double>(r >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_normal_;
    }
    double u1 = u01();
    double u2 = u01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_normal_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
}

void Rng::fill_normal(double* out, int n) {
    for (int i = 0; i < n; ++i) out[i] = normal();
}

void Rng::seek(uint64_t draw_index) {
    draw_ = draw_index;
    has_cached_ = false;
}

}  // namespace semilin
