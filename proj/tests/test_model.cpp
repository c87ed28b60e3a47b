#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "earlyexit/model.hpp"
#include "earlyexit/weights_io.hpp"
#include "reference_model.hpp"

using namespace earlyexit;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.num_layers = 2;
    c.vocab_size = 11;
    c.d_model = 12;
    c.d_k = 6;
    c.d_v = 8;
    c.d_ff = 16;
    c.num_heads = 1;
    c.max_len = 10;
    return c;
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("attention: single key/value returns the value") {
    Vec q{0.3f, -0.2f, 0.9f};
    std::vector<Vec> keys{{1.0f, 2.0f, 3.0f}};
    std::vector<Vec> values{{5.0f, -1.0f}};
    Vec out = attention(q, keys, values);
    CHECK(out[0] == doctest::Approx(5.0f));
    CHECK(out[1] == doctest::Approx(-1.0f));
}

TEST_CASE("attention: identical keys average their values") {
    Vec q{0.5f, 0.5f};
    std::vector<Vec> keys{{1.0f, 0.0f}, {1.0f, 0.0f}};
    std::vector<Vec> values{{2.0f, 4.0f}, {6.0f, 0.0f}};
    Vec out = attention(q, keys, values);
    CHECK(out[0] == doctest::Approx(4.0f).epsilon(1e-6));
    CHECK(out[1] == doctest::Approx(2.0f).epsilon(1e-6));
}

TEST_CASE("attention: matches an independent dense evaluation on random input") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    Vec q(5);
    for (auto& x : q) x = d(rng);
    std::vector<Vec> keys(3, Vec(5)), values(3, Vec(4));
    for (auto& k : keys)
        for (auto& x : k) x = d(rng);
    for (auto& v : values)
        for (auto& x : v) x = d(rng);

    Vec got = attention(q, keys, values);
    Vec want = testref::ref_attention(q, keys, values);
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-6));
}

TEST_CASE("attention: weights sum to one across random instances") {
    // If softmax rows sum to 1, attending over copies of the same value
    // reproduces that value no matter the keys.
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<float> d(-2.0f, 2.0f);
    for (int trial = 0; trial < 100; ++trial) {
        Vec q(4);
        for (auto& x : q) x = d(rng);
        std::vector<Vec> keys(5, Vec(4));
        for (auto& k : keys)
            for (auto& x : k) x = d(rng);
        std::vector<Vec> values(5, Vec{3.25f});
        Vec out = attention(q, keys, values);
        CHECK(out[0] == doctest::Approx(3.25f).epsilon(1e-6));
    }
}

TEST_CASE("attention: dimension mismatch raises invalid_argument") {
    Vec q{1.0f, 2.0f};
    std::vector<Vec> keys{{1.0f, 2.0f, 3.0f}};
    std::vector<Vec> values{{1.0f}};
    CHECK_THROWS_AS(attention(q, keys, values), std::invalid_argument);
    CHECK_THROWS_AS(attention(q, {}, {}), std::invalid_argument);
}

TEST_CASE("encode: shape, determinism and out-of-range errors") {
    auto cfg = small_config();
    Weights w = Weights::random_init(cfg, 123);
    std::vector<int> prompt{1, 4, 2, 9};

    EncoderStates a = encode(w, prompt);
    EncoderStates b = encode(w, prompt);
    REQUIRE(a.size() == prompt.size());
    for (const auto& s : a) CHECK(s.size() == static_cast<size_t>(cfg.d_model));
    CHECK(a == b);  // bit-identical

    CHECK_THROWS_AS(encode(w, std::vector<int>{}), std::invalid_argument);
    CHECK_THROWS_AS(encode(w, std::vector<int>{cfg.vocab_size}), std::invalid_argument);
    CHECK_THROWS_AS(encode(w, std::vector<int>{-1}), std::invalid_argument);
}

TEST_CASE("encode: matches the dense reference on random weights") {
    auto cfg = small_config();
    Weights w = Weights::random_init(cfg, 99);
    std::vector<int> prompt{3, 1, 7, 5};
    EncoderStates got = encode(w, prompt);
    auto want = testref::ref_encode(w, prompt);
    REQUIRE(got.size() == want.size());
    for (size_t t = 0; t < got.size(); ++t)
        for (size_t i = 0; i < got[t].size(); ++i)
            CHECK(got[t][i] == doctest::Approx(want[t][i]).epsilon(1e-5));
}

TEST_CASE("decoder_step: t=1 attends only to itself and is deterministic") {
    auto cfg = small_config();
    Weights w = Weights::random_init(cfg, 5);
    EncoderStates enc = encode(w, std::vector<int>{2, 3});

    auto run_once = [&]() {
        CrossAttnContext cross(w, enc);
        KvCache cache(cfg.num_layers);
        Vec d0 = embed_token(w, 0);
        return decoder_step(w, 1, d0, cache, cross);
    };
    Vec first = run_once();
    Vec second = run_once();
    CHECK(first == second);

    CrossAttnContext cross(w, enc);
    KvCache cache(cfg.num_layers);
    Vec d0 = embed_token(w, 0);
    Vec got = decoder_step(w, 1, d0, cache, cross);
    REQUIRE(cache.layer(1).size() == 1);
    CHECK(cache.layer(1)[0].proj_layer == 1);
    CHECK(cache.layer(1)[0].state_layer == 0);
    CHECK(got.size() == static_cast<size_t>(cfg.d_model));
}

TEST_CASE("decoder_step: cached two-token pass equals dense no-cache reference") {
    auto cfg = small_config();
    Weights w = Weights::random_init(cfg, 41);
    std::vector<int> prompt{5, 8};
    EncoderStates enc = encode(w, prompt);
    std::vector<int> inputs{0, 6};  // decoder sees BOS then a token

    CrossAttnContext cross(w, enc);
    KvCache cache(cfg.num_layers);
    std::vector<std::vector<Vec>> cached(inputs.size());
    for (size_t t = 0; t < inputs.size(); ++t) {
        Vec d = embed_token(w, inputs[t]);
        for (int layer = 1; layer <= cfg.num_layers; ++layer) {
            d = decoder_step(w, layer, d, cache, cross);
            cached[t].push_back(d);
        }
    }

    auto dense = testref::ref_decoder_states(w, testref::ref_encode(w, prompt), inputs);
    for (size_t t = 0; t < inputs.size(); ++t) {
        for (int layer = 0; layer < cfg.num_layers; ++layer) {
            for (int i = 0; i < cfg.d_model; ++i) {
                CHECK(std::fabs(cached[t][static_cast<size_t>(layer)][static_cast<size_t>(i)] -
                                dense[t][static_cast<size_t>(layer)][static_cast<size_t>(i)]) <=
                      1e-6);
            }
        }
    }
}

TEST_CASE("decoder_step: missing cache entries raise a precondition error") {
    auto cfg = small_config();
    Weights w = Weights::random_init(cfg, 17);
    EncoderStates enc = encode(w, std::vector<int>{1});
    CrossAttnContext cross(w, enc);
    KvCache cache(cfg.num_layers);

    Vec d0 = embed_token(w, 0);
    Vec d1 = decoder_step(w, 1, d0, cache, cross);
    (void)d1;
    // Skip layer 2 for token 0, then start token 1: layer 2 lacks token 0.
    Vec e0 = embed_token(w, 3);
    Vec e1 = decoder_step(w, 1, e0, cache, cross);
    CHECK_THROWS_AS(decoder_step(w, 2, e1, cache, cross), std::logic_error);
}

TEST_CASE("logits: zero state gives equal logits; shared head ignores the layer") {
    auto cfg = small_config();
    Weights w = Weights::random_init(cfg, 3);
    Vec zero(static_cast<size_t>(cfg.d_model), 0.0f);
    Vec out = logits(w, 1, zero);
    for (float v : out) CHECK(v == doctest::Approx(0.0f));

    std::mt19937_64 rng(71);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    Vec d(static_cast<size_t>(cfg.d_model));
    for (auto& x : d) x = dist(rng);
    Vec l1 = logits(w, 1, d);
    Vec l2 = logits(w, 2, d);
    CHECK(l1 == l2);

    Vec want = testref::ref_matvec(w.output_head, d);
    for (size_t i = 0; i < want.size(); ++i) CHECK(l1[i] == doctest::Approx(want[i]).epsilon(1e-6));

    CHECK_THROWS_AS(logits(w, 0, d), std::invalid_argument);
    CHECK_THROWS_AS(logits(w, cfg.num_layers + 1, d), std::invalid_argument);
}

TEST_CASE("aggregate_layer_losses: hand cases and weight normalization") {
    CHECK(aggregate_layer_losses(std::vector<double>{0.7}) == doctest::Approx(0.7));
    // L=2, losses (0.9, 0.3): (1*0.9 + 2*0.3) / 3 = 0.5
    CHECK(aggregate_layer_losses(std::vector<double>{0.9, 0.3}) ==
          doctest::Approx(0.5).epsilon(1e-12));
    CHECK(aggregate_layer_losses(std::vector<double>{0.42, 0.42, 0.42, 0.42}) ==
          doctest::Approx(0.42).epsilon(1e-12));
    CHECK_THROWS_AS(aggregate_layer_losses(std::vector<double>{}), std::invalid_argument);

    // Weights are non-decreasing and sum to 1 within 1e-12 for L up to 16.
    for (int L = 1; L <= 16; ++L) {
        std::vector<double> ones(static_cast<size_t>(L), 1.0);
        CHECK(std::fabs(aggregate_layer_losses(ones) - 1.0) <= 1e-12);
    }
}

TEST_CASE("weights: save/load round-trip is bit exact") {
    auto cfg = small_config();
    Weights w = Weights::random_init(cfg, 2024);
    auto path = temp_file("ee_roundtrip.eew");
    save_weights(w, path.string());
    Weights r = load_weights(path.string());

    CHECK(r.config == w.config);
    CHECK(r.embedding.data == w.embedding.data);
    CHECK(r.output_head.data == w.output_head.data);
    for (int i = 0; i < cfg.num_layers; ++i) {
        CHECK(r.decoder[static_cast<size_t>(i)].cross_attn.wq.data ==
              w.decoder[static_cast<size_t>(i)].cross_attn.wq.data);
        CHECK(r.encoder[static_cast<size_t>(i)].ffn.w2.data ==
              w.encoder[static_cast<size_t>(i)].ffn.w2.data);
    }
    CHECK(r.exit_classifier.w == w.exit_classifier.w);
    CHECK(r.exit_classifier.b == w.exit_classifier.b);
    std::filesystem::remove(path);
}

TEST_CASE("weights: truncated file names the tensor that is cut off") {
    auto cfg = small_config();
    Weights w = Weights::random_init(cfg, 9);
    auto path = temp_file("ee_truncated.eew");
    save_weights(w, path.string());
    const auto full_size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, full_size - 8);

    try {
        load_weights(path.string());
        FAIL("expected a load error");
    } catch (const WeightsIoError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("truncated") != std::string::npos);
        CHECK(msg.find("exit_classifier.w") != std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST_CASE("weights: shape mismatch against config names the tensor") {
    auto cfg = small_config();
    Weights w = Weights::random_init(cfg, 10);
    auto path = temp_file("ee_shapes.eew");
    save_weights(w, path.string());

    // Rewrite the header with a wrong embedding shape.
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    // The first shape entry in the directory belongs to the embedding.
    const std::string needle = "\"shape\":[11,12]";
    const std::string repl = "\"shape\":[11,13]";
    auto pos = bytes.find(needle);
    REQUIRE(pos != std::string::npos);
    bytes.replace(pos, needle.size(), repl);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();

    try {
        load_weights(path.string());
        FAIL("expected a shape error");
    } catch (const WeightsIoError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("embedding") != std::string::npos);
        CHECK(msg.find("shape") != std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST_CASE("weights: garbage bytes are rejected as malformed") {
    auto path = temp_file("ee_garbage.eew");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "not a weight container at all";
    out.close();
    CHECK_THROWS_AS(load_weights(path.string()), WeightsIoError);
    std::filesystem::remove(path);
}
