#include "earlyexit/confidence.hpp"

#include <cmath>
#include <stdexcept>

namespace earlyexit {

double softmax_response(std::span<const float> logits) {
    if (logits.size() < 2) {
        throw std::invalid_argument("softmax_response: needs at least 2 logits");
    }
    std::vector<double> p = softmax(logits);
    double top1 = 0.0, top2 = 0.0;
    for (double v : p) {
        if (v > top1) {
            top2 = top1;
            top1 = v;
        } else if (v > top2) {
            top2 = v;
        }
    }
    return std::clamp(top1 - top2, 0.0, 1.0);
}

double state_saturation(std::span<const float> d, std::span<const float> d_prev) {
    if (d.size() != d_prev.size()) {
        throw std::invalid_argument("state_saturation: dimension mismatch");
    }
    const double na = l2_norm(d);
    const double nb = l2_norm(d_prev);
    if (na == 0.0 || nb == 0.0) return 0.0;
    const double cosine = dot(d, d_prev) / (na * nb);
    return std::clamp(cosine, 0.0, 1.0);
}

double classifier_confidence(std::span<const float> d, std::span<const float> w, float b) {
    const double z = dot(d, w) + static_cast<double>(b);
    return 1.0 / (1.0 + std::exp(-z));
}

double oracle_confidence(std::span<const float> layer_logits,
                         std::span<const float> final_logits) {
    if (layer_logits.size() != final_logits.size()) {
        throw std::invalid_argument("oracle_confidence: vocab size mismatch");
    }
    return argmax_lowest(layer_logits) == argmax_lowest(final_logits) ? 1.0 : 0.0;
}

double decayed_threshold(const ThresholdPolicy& policy, int t) {
    if (t < 0) throw std::invalid_argument("decayed_threshold: t must be >= 0");
    if (policy.lambda == 0.0) return 0.0;
    const double n = policy.max_len > 0 ? static_cast<double>(policy.max_len) : 1.0;
    const double decayed =
        0.9 * policy.lambda + 0.1 * std::exp(-policy.tau * static_cast<double>(t) / n);
    return std::clamp(decayed, 0.0, 1.0);
}

}  // namespace earlyexit
