#pragma once

// Independent dense reference for the layered decoder: every step recomputes
// the whole prefix through every layer with no KV cache. Deliberately written
// with its own small kernels so cache-equivalence checks do not test the
// library against itself.

#include <cmath>
#include <vector>

#include "earlyexit/model.hpp"

namespace testref {

using earlyexit::Mat;
using earlyexit::Vec;
using earlyexit::Weights;

inline Vec ref_matvec(const Mat& m, const Vec& v) {
    Vec out(static_cast<size_t>(m.rows));
    for (int r = 0; r < m.rows; ++r) {
        double acc = 0.0;
        for (int c = 0; c < m.cols; ++c) acc += static_cast<double>(m.at(r, c)) * v[static_cast<size_t>(c)];
        out[static_cast<size_t>(r)] = static_cast<float>(acc);
    }
    return out;
}

inline Vec ref_rms(const Vec& x, double eps = 1e-6) {
    double ms = 0.0;
    for (float v : x) ms += static_cast<double>(v) * v;
    const double scale = 1.0 / std::sqrt(ms / static_cast<double>(x.size()) + eps);
    Vec out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] * scale);
    return out;
}

inline Vec ref_attention(const Vec& q, const std::vector<Vec>& keys,
                         const std::vector<Vec>& values) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.size()));
    std::vector<double> scores(keys.size());
    double mx = -1e300;
    for (size_t s = 0; s < keys.size(); ++s) {
        double acc = 0.0;
        for (size_t j = 0; j < q.size(); ++j) acc += static_cast<double>(q[j]) * keys[s][j];
        scores[s] = static_cast<float>(acc * scale);
        mx = std::max(mx, scores[s]);
    }
    double z = 0.0;
    for (auto& s : scores) {
        s = std::exp(s - mx);
        z += s;
    }
    Vec out(values.front().size(), 0.0f);
    for (size_t j = 0; j < out.size(); ++j) {
        double acc = 0.0;
        for (size_t s = 0; s < values.size(); ++s) acc += scores[s] / z * values[s][j];
        out[j] = static_cast<float>(acc);
    }
    return out;
}

inline Vec ref_embed(const Weights& w, int token) {
    Vec raw(static_cast<size_t>(w.config.d_model));
    for (int c = 0; c < w.config.d_model; ++c) raw[static_cast<size_t>(c)] = w.embedding.at(token, c);
    return ref_rms(raw);
}

inline Vec ref_add(const Vec& a, const Vec& b) {
    Vec out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

inline Vec ref_ffn(const earlyexit::FfnWeights& f, const Vec& x) {
    Vec h = ref_matvec(f.w1, x);
    for (auto& v : h) v = v > 0.0f ? v : 0.0f;
    return ref_matvec(f.w2, h);
}

inline std::vector<Vec> ref_encode(const Weights& w, const std::vector<int>& prompt) {
    std::vector<Vec> states;
    for (int tok : prompt) states.push_back(ref_embed(w, tok));
    for (int layer = 0; layer < w.config.num_layers; ++layer) {
        const auto& lw = w.encoder[static_cast<size_t>(layer)];
        std::vector<Vec> keys, values;
        for (const auto& s : states) {
            keys.push_back(ref_matvec(lw.self_attn.wk, s));
            values.push_back(ref_matvec(lw.self_attn.wv, s));
        }
        std::vector<Vec> next;
        for (const auto& s : states) {
            Vec att = ref_attention(ref_matvec(lw.self_attn.wq, s), keys, values);
            Vec h = ref_rms(ref_add(s, ref_matvec(lw.self_attn.wo, att)));
            next.push_back(ref_rms(ref_add(h, ref_ffn(lw.ffn, h))));
        }
        states = std::move(next);
    }
    return states;
}

// All decoder-layer states for a fixed token history: out[t][i-1] = d_t^i.
inline std::vector<std::vector<Vec>> ref_decoder_states(const Weights& w,
                                                        const std::vector<Vec>& enc,
                                                        const std::vector<int>& inputs) {
    std::vector<std::vector<Vec>> all(inputs.size());
    std::vector<Vec> prev;  // d^{i-1} for every token
    for (int tok : inputs) prev.push_back(ref_embed(w, tok));
    for (int layer = 1; layer <= w.config.num_layers; ++layer) {
        const auto& lw = w.decoder[static_cast<size_t>(layer) - 1];
        std::vector<Vec> keys, values;
        for (const auto& s : prev) {
            keys.push_back(ref_matvec(lw.self_attn.wk, s));
            values.push_back(ref_matvec(lw.self_attn.wv, s));
        }
        std::vector<Vec> enc_keys, enc_values;
        for (const auto& e : enc) {
            enc_keys.push_back(ref_matvec(lw.cross_attn.wk, e));
            enc_values.push_back(ref_matvec(lw.cross_attn.wv, e));
        }
        std::vector<Vec> cur(inputs.size());
        for (size_t t = 0; t < inputs.size(); ++t) {
            // Causal self-attention: keys up to and including token t.
            std::vector<Vec> k(keys.begin(), keys.begin() + static_cast<long>(t) + 1);
            std::vector<Vec> v(values.begin(), values.begin() + static_cast<long>(t) + 1);
            Vec att = ref_attention(ref_matvec(lw.self_attn.wq, prev[t]), k, v);
            Vec h = ref_rms(ref_add(prev[t], ref_matvec(lw.self_attn.wo, att)));
            Vec catt = ref_attention(ref_matvec(lw.cross_attn.wq, h), enc_keys, enc_values);
            Vec a = ref_rms(ref_add(h, ref_matvec(lw.cross_attn.wo, catt)));
            cur[t] = ref_rms(ref_add(a, ref_ffn(lw.ffn, a)));
            all[t].push_back(cur[t]);
        }
        prev = std::move(cur);
    }
    return all;
}

inline int ref_argmax(const Vec& v) {
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = static_cast<int>(i);
    }
    return best;
}

struct RefDecodeResult {
    std::vector<int> tokens;                     // emitted, EOS excluded
    std::vector<std::vector<Vec>> step_states;   // step -> layer -> d
};

// Greedy full-model decoding, recomputing the entire prefix densely at every
// step. Decoder input at step t is the previously emitted token (0 at t=0).
inline RefDecodeResult ref_generate_full(const Weights& w, const std::vector<int>& prompt,
                                         int max_steps) {
    RefDecodeResult res;
    const std::vector<Vec> enc = ref_encode(w, prompt);
    std::vector<int> inputs{0};
    for (int t = 0; t < max_steps; ++t) {
        auto states = ref_decoder_states(w, enc, inputs);
        const Vec& top = states.back().back();
        res.step_states.push_back(states.back());
        const int token = ref_argmax(ref_matvec(w.output_head, top));
        if (token == 0) break;
        res.tokens.push_back(token);
        inputs.push_back(token);
    }
    return res;
}

}  // namespace testref
