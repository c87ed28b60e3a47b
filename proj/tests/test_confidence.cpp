#include <doctest.h>

#include <cmath>
#include <random>

#include "earlyexit/confidence.hpp"

using namespace earlyexit;

TEST_CASE("softmax_response: exact tie gives 0") {
    CHECK(softmax_response(Vec{0.0f, 0.0f}) == doctest::Approx(0.0));
}

TEST_CASE("softmax_response: (10, 0) gives (e^10 - 1) / (e^10 + 1)") {
    const double expected = (std::exp(10.0) - 1.0) / (std::exp(10.0) + 1.0);
    CHECK(softmax_response(Vec{10.0f, 0.0f}) == doctest::Approx(expected).epsilon(1e-9));
    CHECK(expected == doctest::Approx(0.99991).epsilon(1e-4));
}

TEST_CASE("softmax_response: invariant to additive logit shifts") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<float> d(-3.0f, 3.0f);
    for (int trial = 0; trial < 200; ++trial) {
        Vec logits(6);
        for (auto& x : logits) x = d(rng);
        const float shift = d(rng);
        Vec shifted = logits;
        for (auto& x : shifted) x += shift;
        // Shifted floats round, so the check holds at float precision.
        CHECK(std::fabs(softmax_response(logits) - softmax_response(shifted)) <= 1e-5);
    }
}

TEST_CASE("softmax_response: sharpening never shrinks the gap for a unique argmax") {
    std::mt19937_64 rng(29);
    std::uniform_real_distribution<float> d(-2.0f, 2.0f);
    std::uniform_real_distribution<float> s(1.0f, 5.0f);
    for (int trial = 0; trial < 200; ++trial) {
        Vec logits(5);
        for (auto& x : logits) x = d(rng);
        const float scale = s(rng);
        Vec sharp = logits;
        for (auto& x : sharp) x *= scale;
        CHECK(softmax_response(sharp) >= softmax_response(logits) - 1e-12);
    }
}

TEST_CASE("softmax_response: needs at least two logits") {
    CHECK_THROWS_AS(softmax_response(Vec{1.0f}), std::invalid_argument);
}

TEST_CASE("state_saturation: identical, orthogonal and anti-parallel states") {
    Vec a{0.5f, -0.5f, 1.0f};
    CHECK(state_saturation(a, a) == doctest::Approx(1.0));

    Vec x{1.0f, 0.0f};
    Vec y{0.0f, 1.0f};
    CHECK(state_saturation(x, y) == doctest::Approx(0.0));

    Vec neg{-0.5f, 0.5f, -1.0f};
    CHECK(state_saturation(a, neg) == doctest::Approx(0.0));  // cos = -1 clips to 0
}

TEST_CASE("state_saturation: zero vectors degrade to confidence 0") {
    Vec zero{0.0f, 0.0f};
    Vec a{1.0f, 2.0f};
    CHECK(state_saturation(zero, a) == doctest::Approx(0.0));
    CHECK(state_saturation(a, zero) == doctest::Approx(0.0));
}

TEST_CASE("classifier_confidence: zero parameters sit at 0.5 and grow with b") {
    Vec d{0.1f, -0.4f, 0.8f};
    Vec w(3, 0.0f);
    CHECK(classifier_confidence(d, w, 0.0f) == doctest::Approx(0.5));

    double prev = 0.5;
    for (float b : {1.0f, 4.0f, 16.0f, 64.0f}) {
        const double c = classifier_confidence(d, w, b);
        CHECK(c >= prev);
        prev = c;
    }
    CHECK(prev == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("classifier_confidence: matches a hand dot product plus sigmoid") {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    Vec d(8), w(8);
    for (auto& x : d) x = dist(rng);
    for (auto& x : w) x = dist(rng);
    const float b = dist(rng);
    double z = b;
    for (size_t i = 0; i < d.size(); ++i) z += static_cast<double>(d[i]) * w[i];
    CHECK(classifier_confidence(d, w, b) ==
          doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-9));
}

TEST_CASE("oracle_confidence: agreement, disagreement and tie-breaking") {
    Vec same{0.1f, 0.9f, 0.3f};
    CHECK(oracle_confidence(same, same) == doctest::Approx(1.0));

    Vec a{0.9f, 0.1f};
    Vec b{0.1f, 0.9f};
    CHECK(oracle_confidence(a, b) == doctest::Approx(0.0));

    // Final logits tied at indices 2 and 5; the lowest index wins both sides.
    Vec layer{0.0f, 0.0f, 3.0f, 0.0f, 0.0f, 1.0f};
    Vec final_tied{0.0f, 0.0f, 7.0f, 0.0f, 0.0f, 7.0f};
    CHECK(oracle_confidence(layer, final_tied) == doctest::Approx(1.0));
}

TEST_CASE("decayed_threshold: closed-form examples") {
    // lambda = 1, tau = 0: 0.9 + 0.1 = 1 at every step.
    ThresholdPolicy flat{1.0, 0.0, 100};
    for (int t : {0, 1, 50, 99}) CHECK(decayed_threshold(flat, t) == doctest::Approx(1.0).epsilon(1e-9));

    ThresholdPolicy decay{0.9, 4.0, 64};
    CHECK(decayed_threshold(decay, 0) == doctest::Approx(0.91).epsilon(1e-9));
    CHECK(decayed_threshold(decay, decay.max_len) ==
          doctest::Approx(0.81 + 0.1 * std::exp(-4.0)).epsilon(1e-9));
    CHECK(0.81 + 0.1 * std::exp(-4.0) == doctest::Approx(0.81183).epsilon(1e-4));
}

TEST_CASE("decayed_threshold: monotone in t and in lambda; constant when tau is 0") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> lam(0.0, 1.0), tau(0.0, 10.0);
    for (int trial = 0; trial < 100; ++trial) {
        ThresholdPolicy p{lam(rng), tau(rng), 1000};
        double prev = 2.0;
        for (int t = 0; t < 1000; ++t) {
            const double v = decayed_threshold(p, t);
            CHECK(v <= prev + 1e-12);
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            prev = v;
        }

        ThresholdPolicy hi{std::min(1.0, p.lambda + 0.25), p.tau, p.max_len};
        CHECK(decayed_threshold(hi, 17) >= decayed_threshold(p, 17) - 1e-12);

        ThresholdPolicy flat{p.lambda, 0.0, p.max_len};
        CHECK(decayed_threshold(flat, 0) == doctest::Approx(decayed_threshold(flat, 999)));
    }
}

TEST_CASE("decayed_threshold: lambda 0 pins the schedule to 0") {
    ThresholdPolicy p{0.0, 4.0, 100};
    for (int t : {0, 10, 99}) CHECK(decayed_threshold(p, t) == 0.0);
}
