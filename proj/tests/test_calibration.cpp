#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

#include "earlyexit/calibration.hpp"

using namespace earlyexit;

namespace {

SyntheticSpec ramp_spec(uint64_t seed = 42) {
    SyntheticSpec s;
    s.num_layers = 5;
    s.vocab_size = 24;
    s.d_model = 16;
    s.alpha = {0.2, 0.5, 0.8, 0.95, 1.0};
    s.gamma = 0.5;
    s.seed = seed;
    return s;
}

std::vector<Example> small_dataset(int n, uint64_t seed) {
    SynthTask task;
    task.kind = TaskKind::copy;
    task.vocab_size = 24;
    task.out_len_min = 4;
    task.out_len_max = 8;
    task.seed = seed;
    return gen_dataset(task, n);
}

}  // namespace

TEST_CASE("consistency_loss: textual and risk modes") {
    ConsistencyObjective textual{ObjectiveMode::textual, MetricKind::token_f1, 0.1, 0.05};
    ConsistencyObjective risky{ObjectiveMode::risk, MetricKind::token_f1, 0.1, 0.05};

    TokenSeq a{1, 2, 3};
    CHECK(consistency_loss(textual, a, a, nullptr) == doctest::Approx(0.0));
    std::vector<TokenSeq> refs{a};
    CHECK(consistency_loss(risky, a, a, &refs) == doctest::Approx(0.0));

    // Early risk below the full model's risk clamps to zero.
    // refs = (1,2): full (1,2) has risk 0; early (1,2,3) has F1 0.8 -> risk 0.2.
    std::vector<TokenSeq> refs2{TokenSeq{1, 2}};
    CHECK(consistency_loss(risky, TokenSeq{1, 2}, a, &refs2) == doctest::Approx(0.0));
    CHECK(consistency_loss(risky, a, TokenSeq{1, 2}, &refs2) == doctest::Approx(0.2));

    CHECK_THROWS_AS(consistency_loss(risky, a, a, nullptr), std::invalid_argument);
    std::vector<TokenSeq> empty;
    CHECK_THROWS_AS(consistency_loss(risky, a, a, &empty), std::invalid_argument);
}

TEST_CASE("hoeffding_pvalue: closed forms and monotonicity") {
    CHECK(hoeffding_pvalue(0.0, 100, 0.1) == doctest::Approx(std::exp(-2.0)).epsilon(1e-12));
    CHECK(hoeffding_pvalue(0.15, 100, 0.1) == doctest::Approx(1.0));
    CHECK(hoeffding_pvalue(0.1, 100, 0.1) == doctest::Approx(1.0));
    // Doubling n strictly shrinks the p-value below delta.
    CHECK(hoeffding_pvalue(0.0, 200, 0.1) < hoeffding_pvalue(0.0, 100, 0.1));
    CHECK_THROWS_AS(hoeffding_pvalue(-0.1, 100, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(hoeffding_pvalue(0.0, 0, 0.1), std::invalid_argument);
}

TEST_CASE("hb_pvalue: Bentkus term arithmetic and the min composition") {
    // e * BinomCdf(0; 100, 0.1) = e * 0.9^100.
    const double bentkus = hb_bentkus_term(0.0, 100, 0.1);
    const double expect = std::exp(1.0) * std::pow(0.9, 100.0);
    CHECK(bentkus == doctest::Approx(expect).epsilon(1e-9));
    CHECK(expect == doctest::Approx(7.22e-5).epsilon(1e-2));

    const double kl = hb_kl_term(0.0, 100, 0.1);
    CHECK(hb_pvalue_from_mean(0.0, 100, 0.1) == doctest::Approx(std::min(bentkus, kl)));

    CHECK(hb_pvalue_from_mean(0.12, 100, 0.1) == doctest::Approx(1.0));
    CHECK(hb_pvalue_from_mean(0.1, 100, 0.1) == doctest::Approx(1.0));

    std::vector<double> losses(50, 0.0);
    losses[0] = 1.0;
    CHECK(hb_pvalue(losses, 0.2) ==
          doctest::Approx(hb_pvalue_from_mean(1.0 / 50.0, 50, 0.2)));
    CHECK_THROWS_AS(hb_pvalue(std::vector<double>{1.5}, 0.2), std::invalid_argument);
}

TEST_CASE("hb_pvalue is dominated by hoeffding_pvalue everywhere") {
    std::mt19937_64 rng(123);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> n_dist(1, 2000);
    for (int trial = 0; trial < 10000; ++trial) {
        const double ehat = unit(rng);
        const double delta = unit(rng);
        const int n = n_dist(rng);
        const double hb = hb_pvalue_from_mean(ehat, n, delta);
        const double hoeff = hoeffding_pvalue(ehat, n, delta);
        CHECK(hb <= hoeff + 1e-12);
        CHECK(hb > 0.0);
        CHECK(hb <= 1.0);
        if (ehat >= delta) CHECK(hb == doctest::Approx(1.0));
    }
}

TEST_CASE("p-values: monotone in delta and in the mean") {
    for (PValueKind kind : {PValueKind::hoeffding, PValueKind::hoeffding_bentkus}) {
        double prev = 1.0;
        for (double delta : {0.05, 0.1, 0.2, 0.4}) {
            const double p = pvalue(kind, 0.03, 200, delta);
            CHECK(p <= prev + 1e-12);
            prev = p;
        }
        prev = 0.0;
        for (double ehat : {0.0, 0.02, 0.05, 0.09, 0.2}) {
            const double p = pvalue(kind, ehat, 200, 0.1);
            CHECK(p >= prev - 1e-12);
            prev = p;
        }
    }
}

TEST_CASE("fst_calibrate: reject-reject-stop returns the last rejected value") {
    // Constant loss lists tuned so hoeffding p-values walk 0.001, 0.01, 0.2
    // at delta = 0.5 with n = 50.
    const double delta = 0.5;
    const int n = 50;
    auto mean_for_p = [&](double p) {
        return delta - std::sqrt(std::log(1.0 / p) / (2.0 * n));
    };
    LambdaGrid grid;
    grid.values = {0.9, 0.8, 0.7};
    const LossEvaluator evaluator = [&](double lambda) {
        double mean = 0.0;
        if (lambda == 0.9) mean = mean_for_p(0.001);
        if (lambda == 0.8) mean = mean_for_p(0.01);
        if (lambda == 0.7) mean = mean_for_p(0.2);
        return std::vector<double>(n, mean);
    };
    CHECK(fst_calibrate(evaluator, grid, delta, 0.05, PValueKind::hoeffding) ==
          doctest::Approx(0.8));
}

TEST_CASE("fst_calibrate: failing the first test falls back to 1") {
    LambdaGrid grid;
    grid.values = {0.9, 0.8, 0.7};
    const LossEvaluator evaluator = [](double) { return std::vector<double>(50, 0.9); };
    CHECK(fst_calibrate(evaluator, grid, 0.5, 0.05) == doctest::Approx(1.0));
}

TEST_CASE("fst_calibrate: rejecting everywhere walks to the grid minimum") {
    LambdaGrid grid;
    grid.values = {0.9, 0.8, 0.7};
    const LossEvaluator evaluator = [](double) { return std::vector<double>(400, 0.0); };
    CHECK(fst_calibrate(evaluator, grid, 0.2, 0.05) == doctest::Approx(0.7));
}

TEST_CASE("lambda grid: parsing and validation") {
    LambdaGrid grid = LambdaGrid::parse("1.0:0.0:0.05");
    REQUIRE(grid.values.size() == 21);
    CHECK(grid.values.front() == doctest::Approx(1.0));
    CHECK(grid.values.back() == doctest::Approx(0.0));
    CHECK(LambdaGrid::default_grid().values == grid.values);

    CHECK_THROWS_AS(LambdaGrid::parse("0.0:1.0:0.05"), std::invalid_argument);
    CHECK_THROWS_AS(LambdaGrid::parse("1.0:0.0"), std::invalid_argument);
    CHECK_THROWS_AS(LambdaGrid::parse("1.0:0.0:-0.1"), std::invalid_argument);
    LambdaGrid bad;
    bad.values = {0.5, 0.5};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("run_trials: a perfect backend always selects the grid minimum with zero loss") {
    SyntheticSpec spec = ramp_spec();
    spec.alpha = {1.0, 1.0, 1.0, 1.0, 1.0};
    SyntheticBackend backend(spec, TaskKind::copy, 12);
    auto dataset = small_dataset(60, 5);

    ConsistencyObjective objective{ObjectiveMode::textual, MetricKind::token_f1, 0.1, 0.05};
    CalibrationReport report = run_trials(dataset, backend, objective,
                                          LambdaGrid::default_grid(), DecodeSettings{}, 10,
                                          0.8, 3);
    for (const auto& t : report.per_trial) {
        CHECK(t.lambda_min == doctest::Approx(0.0));
        CHECK(t.test_mean_loss == doctest::Approx(0.0));
    }
    CHECK(report.validity_rate == doctest::Approx(1.0));
}

TEST_CASE("run_trials: near-vacuous tolerance drives lambda to the grid minimum") {
    SyntheticBackend backend(ramp_spec(3), TaskKind::copy, 12);
    auto dataset = small_dataset(80, 6);
    ConsistencyObjective objective{ObjectiveMode::textual, MetricKind::token_f1, 0.999, 0.05};
    CalibrationReport report = run_trials(dataset, backend, objective,
                                          LambdaGrid::default_grid(), DecodeSettings{}, 10,
                                          0.8, 4);
    for (const auto& t : report.per_trial) CHECK(t.lambda_min <= 0.05 + 1e-9);
}

TEST_CASE("run_trials: looser tolerance never raises the mean selected threshold") {
    SyntheticBackend backend(ramp_spec(8), TaskKind::copy, 12);
    auto dataset = small_dataset(100, 7);
    auto run_with_delta = [&](double delta) {
        ConsistencyObjective objective{ObjectiveMode::textual, MetricKind::token_f1, delta,
                                       0.05};
        return run_trials(dataset, backend, objective, LambdaGrid::default_grid(),
                          DecodeSettings{}, 20, 0.8, 11);
    };
    CHECK(run_with_delta(0.25).mean_lambda_min <= run_with_delta(0.05).mean_lambda_min + 1e-9);
}

TEST_CASE("run_trials: deterministic given the seed") {
    SyntheticBackend backend(ramp_spec(9), TaskKind::copy, 12);
    auto dataset = small_dataset(50, 8);
    ConsistencyObjective objective{ObjectiveMode::risk, MetricKind::token_f1, 0.1, 0.05};
    auto a = run_trials(dataset, backend, objective, LambdaGrid::default_grid(),
                        DecodeSettings{}, 8, 0.8, 21);
    auto b = run_trials(dataset, backend, objective, LambdaGrid::default_grid(),
                        DecodeSettings{}, 8, 0.8, 21);
    REQUIRE(a.per_trial.size() == b.per_trial.size());
    for (size_t i = 0; i < a.per_trial.size(); ++i) {
        CHECK(a.per_trial[i].lambda_min == b.per_trial[i].lambda_min);
        CHECK(a.per_trial[i].test_mean_loss == b.per_trial[i].test_mean_loss);
        CHECK(a.per_trial[i].test_mean_exit_layers == b.per_trial[i].test_mean_exit_layers);
    }
}

TEST_CASE("run_trials: textual mode works on target-free data; risk mode rejects it") {
    SyntheticBackend backend(ramp_spec(10), TaskKind::copy, 12);
    auto dataset = small_dataset(40, 9);
    for (auto& ex : dataset) ex.target.clear();

    ConsistencyObjective textual{ObjectiveMode::textual, MetricKind::token_f1, 0.1, 0.05};
    CHECK_NOTHROW(run_trials(dataset, backend, textual, LambdaGrid::default_grid(),
                             DecodeSettings{}, 3, 0.8, 2));

    ConsistencyObjective risky{ObjectiveMode::risk, MetricKind::token_f1, 0.1, 0.05};
    CHECK_THROWS_AS(run_trials(dataset, backend, risky, LambdaGrid::default_grid(),
                               DecodeSettings{}, 3, 0.8, 2),
                    std::invalid_argument);
}

TEST_CASE("run_trials: rejects tiny datasets and bad fractions") {
    SyntheticBackend backend(ramp_spec(11), TaskKind::copy, 12);
    auto dataset = small_dataset(9, 10);
    ConsistencyObjective objective{ObjectiveMode::textual, MetricKind::token_f1, 0.1, 0.05};
    CHECK_THROWS_AS(run_trials(dataset, backend, objective, LambdaGrid::default_grid(),
                               DecodeSettings{}, 3, 0.8, 2),
                    std::invalid_argument);
    auto bigger = small_dataset(20, 10);
    CHECK_THROWS_AS(run_trials(bigger, backend, objective, LambdaGrid::default_grid(),
                               DecodeSettings{}, 3, 1.5, 2),
                    std::invalid_argument);
}

TEST_CASE("report serialization: JSON fields and CSV rows") {
    SyntheticBackend backend(ramp_spec(12), TaskKind::copy, 12);
    auto dataset = small_dataset(40, 11);
    ConsistencyObjective objective{ObjectiveMode::textual, MetricKind::token_f1, 0.2, 0.05};
    CalibrationReport report = run_trials(dataset, backend, objective,
                                          LambdaGrid::default_grid(), DecodeSettings{}, 5,
                                          0.8, 31);
    const std::string json_text = report_to_json(report);
    CHECK(json_text.find("validity_rate") != std::string::npos);
    CHECK(json_text.find("per_trial") != std::string::npos);

    auto path = std::filesystem::temp_directory_path() / "ee_report.csv";
    write_report_csv(report, path.string());
    std::ifstream in(path);
    std::string line;
    int rows = 0;
    std::getline(in, line);
    CHECK(line ==
          "trial,lambda_min,test_mean_loss,test_mean_exit_layers,test_flops_reduction");
    while (std::getline(in, line)) {
        if (!line.empty()) ++rows;
    }
    CHECK(rows == 5);
    std::filesystem::remove(path);
}
