#pragma once

// Inference-only layered encoder-decoder with a prediction head shared by
// every decoder layer, plus the KV-cache types the adaptive decoding loop
// works on.
//
// Layer scheme (single-head attention): each sub-layer adds a residual and
// RMS-normalizes its output, so hidden states stay at unit RMS scale and
// cached keys/values are plain projections of the previous layer's state:
//   k_s^i = W_K^i d_s^{i-1},  v_s^i = W_V^i d_s^{i-1}.
// That identity is what makes skipped-layer re-projection well defined.

#include <optional>
#include <span>
#include <vector>

#include "earlyexit/linalg.hpp"

namespace earlyexit {

struct ModelConfig {
    int num_layers = 0;  // L, shared by encoder and decoder stacks
    int vocab_size = 0;
    int d_model = 0;
    int d_k = 0;
    int d_v = 0;
    int d_ff = 0;
    int num_heads = 1;  // this implementation is single-head
    int max_len = 0;    // N, maximum output length

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct AttentionWeights {
    Mat wq;  // [d_k, d_model]
    Mat wk;  // [d_k, d_model]
    Mat wv;  // [d_v, d_model]
    Mat wo;  // [d_model, d_v]
};

struct FfnWeights {
    Mat w1;  // [d_ff, d_model]
    Mat w2;  // [d_model, d_ff]
};

struct EncoderLayerWeights {
    AttentionWeights self_attn;
    FfnWeights ffn;
};

struct DecoderLayerWeights {
    AttentionWeights self_attn;
    AttentionWeights cross_attn;  // separate projections from self-attention
    FfnWeights ffn;
};

struct ExitClassifierParams {
    Vec w;          // [d_model]
    float b = 0.0f;
};

struct Weights {
    ModelConfig config;
    Mat embedding;    // [vocab, d_model], shared by encoder and decoder inputs
    Mat output_head;  // [vocab, d_model], one head shared across all layers
    std::vector<EncoderLayerWeights> encoder;
    std::vector<DecoderLayerWeights> decoder;
    ExitClassifierParams exit_classifier;

    void validate() const;

    // Seeded uniform init in [-0.1, 0.1]; the backbone is never trained.
    static Weights random_init(const ModelConfig& config, uint64_t seed);
};

// One cached key/value pair plus provenance: which layer's projections built
// it and which layer the source hidden state came from. Provenance exists so
// propagation soundness can be asserted, it never affects the math.
struct KvEntry {
    Vec k;
    Vec v;
    int proj_layer = 0;
    int state_layer = 0;
};

// Self-attention cache: entries[i-1][s] holds token s's K/V at layer i.
// A layer's row may lag behind the token count until propagation fills it.
struct KvCache {
    std::vector<std::vector<KvEntry>> layers;

    explicit KvCache(int num_layers = 0) : layers(static_cast<size_t>(num_layers)) {}
    std::vector<KvEntry>& layer(int i) { return layers[static_cast<size_t>(i) - 1]; }
    const std::vector<KvEntry>& layer(int i) const { return layers[static_cast<size_t>(i) - 1]; }
};

using EncoderStates = std::vector<Vec>;

// Per-layer cross-attention K/V over the (fixed) encoder states, built lazily.
struct CrossAttnContext {
    const Weights* weights = nullptr;
    EncoderStates enc;
    std::vector<std::optional<std::pair<std::vector<Vec>, std::vector<Vec>>>> kv;

    CrossAttnContext() = default;
    CrossAttnContext(const Weights& w, EncoderStates enc_states);
    const std::pair<std::vector<Vec>, std::vector<Vec>>& ensure(int layer);
};

// softmax(q K^T / sqrt(d_k)) V over already-projected q, keys and values.
Vec attention(std::span<const float> query, const std::vector<Vec>& keys,
              const std::vector<Vec>& values);

// Embeds one token and RMS-normalizes it: the d^0 state of a decoder step
// (also used for encoder inputs).
Vec embed_token(const Weights& w, int token);

EncoderStates encode(const Weights& w, std::span<const int> prompt_tokens);

// One decoder layer for the current token: self-attention over the cached
// prior tokens plus the current one, cross-attention over encoder states,
// then the feed-forward. Appends the current token's K/V at this layer.
// Requires cache.layer(i) to already hold every prior token.
Vec decoder_step(const Weights& w, int layer, std::span<const float> input_state,
                 KvCache& cache, CrossAttnContext& cross);

// Shared-head logits W d. The layer argument only gets bounds-checked: every
// layer uses the same head.
Vec logits(const Weights& w, int layer, std::span<const float> d);

// Weighted per-layer loss aggregate with weights w_i = i / sum_j j.
double aggregate_layer_losses(std::span<const double> per_layer_nll);

}  // namespace earlyexit
