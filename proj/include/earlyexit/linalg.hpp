#pragma once

// Small dense float32 kernels used by the layered model. Dot products and
// reductions accumulate in double before casting back to float.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace earlyexit {

using Vec = std::vector<float>;

struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;  // row-major

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {}

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return data.size(); }
};

inline double dot(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("dot: size mismatch " + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()));
    }
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

inline double l2_norm(std::span<const float> a) {
    double s = 0.0;
    for (float x : a) s += static_cast<double>(x) * x;
    return std::sqrt(s);
}

inline Vec matvec(const Mat& m, std::span<const float> v) {
    if (static_cast<int>(v.size()) != m.cols) {
        throw std::invalid_argument("matvec: vector size " + std::to_string(v.size()) +
                                    " != cols " + std::to_string(m.cols));
    }
    Vec out(static_cast<size_t>(m.rows));
    for (int r = 0; r < m.rows; ++r) {
        double s = 0.0;
        const float* row = m.data.data() + static_cast<size_t>(r) * m.cols;
        for (int c = 0; c < m.cols; ++c) s += static_cast<double>(row[c]) * v[c];
        out[r] = static_cast<float>(s);
    }
    return out;
}

// Numerically stable softmax; the result sums to 1 up to rounding.
inline std::vector<double> softmax(std::span<const float> logits) {
    std::vector<double> out(logits.size());
    double mx = -1e300;
    for (float x : logits) mx = std::max(mx, static_cast<double>(x));
    double z = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(static_cast<double>(logits[i]) - mx);
        z += out[i];
    }
    for (auto& p : out) p /= z;
    return out;
}

// Ties resolve to the lowest index.
inline int argmax_lowest(std::span<const float> v) {
    if (v.empty()) throw std::invalid_argument("argmax_lowest: empty input");
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = static_cast<int>(i);
    }
    return best;
}

inline Vec rms_normalize(std::span<const float> x, double eps = 1e-6) {
    double ms = 0.0;
    for (float v : x) ms += static_cast<double>(v) * v;
    ms = std::sqrt(ms / static_cast<double>(x.size()) + eps);
    Vec out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] / ms);
    return out;
}

// --- seeding helpers -------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_mix(uint64_t h, uint64_t v) { return splitmix64(h ^ splitmix64(v)); }

inline uint64_t hash_tokens(uint64_t h, std::span<const int> toks) {
    for (int t : toks) h = hash_mix(h, static_cast<uint64_t>(t) + 0x51ULL);
    return h;
}

}  // namespace earlyexit
