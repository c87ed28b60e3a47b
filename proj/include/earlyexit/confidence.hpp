#pragma once

// Per-layer exit confidence measures and the decaying threshold schedule.
// Every measure maps into [0, 1]; the decode loop exits at the first layer
// whose confidence reaches the (possibly decayed) threshold.

#include <span>

#include "earlyexit/linalg.hpp"

namespace earlyexit {

enum class ConfidenceKind {
    softmax_response,   // top-1 minus top-2 softmax probability
    state_saturation,   // cosine similarity of consecutive hidden states
    classifier,         // sigmoid(w . d + b), shared across layers
    oracle,             // 1 iff this layer's argmax equals the final layer's
};

struct ThresholdPolicy {
    double lambda = 1.0;  // base threshold in [0, 1]
    double tau = 0.0;     // decay temperature, >= 0
    int max_len = 0;      // N, maximum output length
};

// Gap between the two largest softmax probabilities. Requires >= 2 logits.
double softmax_response(std::span<const float> logits);

// Cosine similarity clipped to [0, 1]; negative similarity carries no exit
// signal. A zero vector on either side yields 0.
double state_saturation(std::span<const float> d, std::span<const float> d_prev);

double classifier_confidence(std::span<const float> d, std::span<const float> w, float b);

// 1 if the layer's argmax matches the final layer's, else 0; ties break to
// the lowest index on both sides.
double oracle_confidence(std::span<const float> layer_logits,
                         std::span<const float> final_logits);

// Decayed threshold clip_[0,1](0.9*lambda + 0.1*exp(-tau*t/N)) over a 0-based
// timestep. A base lambda of exactly 0 means "always exit at the first
// layer", so the schedule is pinned to 0 there; every confidence measure
// clears a zero threshold, including saturation's layer-1 zero.
double decayed_threshold(const ThresholdPolicy& policy, int t);

}  // namespace earlyexit
