#include "earlyexit/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace earlyexit {

void ModelConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument("ModelConfig: " + what);
    };
    require(num_layers >= 1, "num_layers must be >= 1");
    require(vocab_size >= 1, "vocab_size must be >= 1");
    require(d_model >= 1, "d_model must be >= 1");
    require(d_k >= 1 && d_v >= 1, "attention widths must be >= 1");
    require(d_ff >= 1, "d_ff must be >= 1");
    require(num_heads == 1, "this build supports num_heads == 1 only");
    require(max_len >= 0, "max_len must be >= 0");
}

void Weights::validate() const {
    config.validate();
    auto check_shape = [](const Mat& m, int r, int c, const std::string& name) {
        if (m.rows != r || m.cols != c) {
            throw std::invalid_argument("weights: tensor " + name + " has shape [" +
                                        std::to_string(m.rows) + "," + std::to_string(m.cols) +
                                        "], expected [" + std::to_string(r) + "," +
                                        std::to_string(c) + "]");
        }
    };
    check_shape(embedding, config.vocab_size, config.d_model, "embedding");
    check_shape(output_head, config.vocab_size, config.d_model, "output_head");
    if (static_cast<int>(encoder.size()) != config.num_layers ||
        static_cast<int>(decoder.size()) != config.num_layers) {
        throw std::invalid_argument("weights: layer count mismatch with config");
    }
    auto check_attn = [&](const AttentionWeights& a, const std::string& prefix) {
        check_shape(a.wq, config.d_k, config.d_model, prefix + ".wq");
        check_shape(a.wk, config.d_k, config.d_model, prefix + ".wk");
        check_shape(a.wv, config.d_v, config.d_model, prefix + ".wv");
        check_shape(a.wo, config.d_model, config.d_v, prefix + ".wo");
    };
    for (int i = 1; i <= config.num_layers; ++i) {
        const auto& e = encoder[static_cast<size_t>(i) - 1];
        const auto& d = decoder[static_cast<size_t>(i) - 1];
        std::string en = "encoder.layer" + std::to_string(i);
        std::string dn = "decoder.layer" + std::to_string(i);
        check_attn(e.self_attn, en + ".self");
        check_shape(e.ffn.w1, config.d_ff, config.d_model, en + ".ffn.w1");
        check_shape(e.ffn.w2, config.d_model, config.d_ff, en + ".ffn.w2");
        check_attn(d.self_attn, dn + ".self");
        check_attn(d.cross_attn, dn + ".cross");
        check_shape(d.ffn.w1, config.d_ff, config.d_model, dn + ".ffn.w1");
        check_shape(d.ffn.w2, config.d_model, config.d_ff, dn + ".ffn.w2");
    }
    if (static_cast<int>(exit_classifier.w.size()) != config.d_model) {
        throw std::invalid_argument("weights: tensor exit_classifier.w has length " +
                                    std::to_string(exit_classifier.w.size()) + ", expected " +
                                    std::to_string(config.d_model));
    }
}

Weights Weights::random_init(const ModelConfig& config, uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(-0.1f, 0.1f);
    auto fill = [&](Mat& m, int r, int c) {
        m = Mat(r, c);
        for (auto& x : m.data) x = dist(rng);
    };
    Weights w;
    w.config = config;
    fill(w.embedding, config.vocab_size, config.d_model);
    fill(w.output_head, config.vocab_size, config.d_model);
    auto fill_attn = [&](AttentionWeights& a) {
        fill(a.wq, config.d_k, config.d_model);
        fill(a.wk, config.d_k, config.d_model);
        fill(a.wv, config.d_v, config.d_model);
        fill(a.wo, config.d_model, config.d_v);
    };
    w.encoder.resize(static_cast<size_t>(config.num_layers));
    w.decoder.resize(static_cast<size_t>(config.num_layers));
    for (int i = 0; i < config.num_layers; ++i) {
        fill_attn(w.encoder[i].self_attn);
        fill(w.encoder[i].ffn.w1, config.d_ff, config.d_model);
        fill(w.encoder[i].ffn.w2, config.d_model, config.d_ff);
        fill_attn(w.decoder[i].self_attn);
        fill_attn(w.decoder[i].cross_attn);
        fill(w.decoder[i].ffn.w1, config.d_ff, config.d_model);
        fill(w.decoder[i].ffn.w2, config.d_model, config.d_ff);
    }
    w.exit_classifier.w.resize(static_cast<size_t>(config.d_model));
    for (auto& x : w.exit_classifier.w) x = dist(rng);
    w.exit_classifier.b = dist(rng);
    return w;
}

Vec attention(std::span<const float> query, const std::vector<Vec>& keys,
              const std::vector<Vec>& values) {
    if (keys.empty() || keys.size() != values.size()) {
        throw std::invalid_argument("attention: needs m >= 1 keys with matching values");
    }
    const size_t dk = keys.front().size();
    const size_t dv = values.front().size();
    if (query.size() != dk) {
        throw std::invalid_argument("attention: query width " + std::to_string(query.size()) +
                                    " != key width " + std::to_string(dk));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<float> scores(keys.size());
    for (size_t s = 0; s < keys.size(); ++s) {
        if (keys[s].size() != dk || values[s].size() != dv) {
            throw std::invalid_argument("attention: ragged key/value widths");
        }
        scores[s] = static_cast<float>(dot(query, keys[s]) * scale);
    }
    std::vector<double> probs = softmax(scores);
    Vec out(dv, 0.0f);
    for (size_t j = 0; j < dv; ++j) {
        double s = 0.0;
        for (size_t m = 0; m < values.size(); ++m) s += probs[m] * values[m][j];
        out[j] = static_cast<float>(s);
    }
    return out;
}

Vec embed_token(const Weights& w, int token) {
    if (token < 0 || token >= w.config.vocab_size) {
        throw std::invalid_argument("token id " + std::to_string(token) + " out of range [0," +
                                    std::to_string(w.config.vocab_size) + ")");
    }
    const float* row = w.embedding.data.data() +
                       static_cast<size_t>(token) * w.config.d_model;
    return rms_normalize(std::span<const float>(row, static_cast<size_t>(w.config.d_model)));
}

namespace {

Vec residual_norm(std::span<const float> x, std::span<const float> delta) {
    Vec sum(x.size());
    for (size_t i = 0; i < x.size(); ++i) sum[i] = x[i] + delta[i];
    return rms_normalize(sum);
}

Vec feed_forward(const FfnWeights& f, std::span<const float> x) {
    Vec h = matvec(f.w1, x);
    for (auto& v : h) v = std::max(v, 0.0f);  // ReLU
    return matvec(f.w2, h);
}

// Shared attention sub-layer: project the query, attend, project back, add
// the residual, normalize.
Vec attn_sublayer(const AttentionWeights& aw, std::span<const float> x,
                  const std::vector<Vec>& keys, const std::vector<Vec>& values) {
    Vec q = matvec(aw.wq, x);
    Vec mixed = attention(q, keys, values);
    Vec proj = matvec(aw.wo, mixed);
    return residual_norm(x, proj);
}

}  // namespace

EncoderStates encode(const Weights& w, std::span<const int> prompt_tokens) {
    if (prompt_tokens.empty()) throw std::invalid_argument("encode: empty prompt");
    EncoderStates states;
    states.reserve(prompt_tokens.size());
    for (int tok : prompt_tokens) states.push_back(embed_token(w, tok));

    for (int layer = 0; layer < w.config.num_layers; ++layer) {
        const auto& lw = w.encoder[static_cast<size_t>(layer)];
        // Bidirectional self-attention: K/V over all positions of this layer's input.
        std::vector<Vec> keys(states.size()), values(states.size());
        for (size_t s = 0; s < states.size(); ++s) {
            keys[s] = matvec(lw.self_attn.wk, states[s]);
            values[s] = matvec(lw.self_attn.wv, states[s]);
        }
        EncoderStates next(states.size());
        for (size_t s = 0; s < states.size(); ++s) {
            Vec h = attn_sublayer(lw.self_attn, states[s], keys, values);
            next[s] = residual_norm(h, feed_forward(lw.ffn, h));
        }
        states = std::move(next);
    }
    return states;
}

CrossAttnContext::CrossAttnContext(const Weights& w, EncoderStates enc_states)
    : weights(&w), enc(std::move(enc_states)),
      kv(static_cast<size_t>(w.config.num_layers)) {}

const std::pair<std::vector<Vec>, std::vector<Vec>>& CrossAttnContext::ensure(int layer) {
    auto& slot = kv[static_cast<size_t>(layer) - 1];
    if (!slot) {
        const auto& aw = weights->decoder[static_cast<size_t>(layer) - 1].cross_attn;
        std::vector<Vec> keys(enc.size()), values(enc.size());
        for (size_t s = 0; s < enc.size(); ++s) {
            keys[s] = matvec(aw.wk, enc[s]);
            values[s] = matvec(aw.wv, enc[s]);
        }
        slot = std::make_pair(std::move(keys), std::move(values));
    }
    return *slot;
}

Vec decoder_step(const Weights& w, int layer, std::span<const float> input_state,
                 KvCache& cache, CrossAttnContext& cross) {
    if (layer < 1 || layer > w.config.num_layers) {
        throw std::invalid_argument("decoder_step: layer " + std::to_string(layer) +
                                    " out of range");
    }
    const auto& lw = w.decoder[static_cast<size_t>(layer) - 1];
    auto& row = cache.layer(layer);
    const size_t token_index = cache.layer(1).size();  // tokens committed + current
    if (layer == 1) {
        // Layer 1's row defines the current token index; deeper rows must have
        // been filled for all prior tokens by propagation.
    } else if (row.size() + 1 != token_index) {
        throw std::logic_error("decoder_step: KV cache at layer " + std::to_string(layer) +
                               " holds " + std::to_string(row.size()) + " tokens, expected " +
                               std::to_string(token_index - 1) +
                               " (skipped-layer propagation missing?)");
    }

    // Append the current token's K/V, then attend over prior tokens plus it.
    KvEntry cur;
    cur.k = matvec(lw.self_attn.wk, input_state);
    cur.v = matvec(lw.self_attn.wv, input_state);
    cur.proj_layer = layer;
    cur.state_layer = layer - 1;
    row.push_back(std::move(cur));

    std::vector<Vec> keys(row.size()), values(row.size());
    for (size_t s = 0; s < row.size(); ++s) {
        keys[s] = row[s].k;
        values[s] = row[s].v;
    }
    Vec h = attn_sublayer(lw.self_attn, input_state, keys, values);

    const auto& [ckeys, cvalues] = cross.ensure(layer);
    Vec a = attn_sublayer(lw.cross_attn, h, ckeys, cvalues);

    return residual_norm(a, feed_forward(lw.ffn, a));
}

Vec logits(const Weights& w, int layer, std::span<const float> d) {
    if (layer < 1 || layer > w.config.num_layers) {
        throw std::invalid_argument("logits: layer " + std::to_string(layer) + " out of range");
    }
    return matvec(w.output_head, d);
}

double aggregate_layer_losses(std::span<const double> per_layer_nll) {
    if (per_layer_nll.empty()) {
        throw std::invalid_argument("aggregate_layer_losses: empty loss list");
    }
    const size_t L = per_layer_nll.size();
    const double denom = static_cast<double>(L) * (static_cast<double>(L) + 1.0) / 2.0;
    double total = 0.0;
    for (size_t i = 0; i < L; ++i) {
        total += (static_cast<double>(i + 1) / denom) * per_layer_nll[i];
    }
    return total;
}

}  // namespace earlyexit
