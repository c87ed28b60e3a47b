#include "earlyexit/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace earlyexit {

using nlohmann::json;

void ConsistencyObjective::validate() const {
    if (!(delta > 0.0 && delta < 1.0)) {
        throw std::invalid_argument("objective: delta must lie in (0,1)");
    }
    if (!(epsilon > 0.0 && epsilon < 1.0)) {
        throw std::invalid_argument("objective: epsilon must lie in (0,1)");
    }
}

void LambdaGrid::validate() const {
    if (values.empty()) throw std::invalid_argument("lambda grid: empty");
    for (size_t i = 0; i < values.size(); ++i) {
        if (values[i] < 0.0 || values[i] > 1.0) {
            throw std::invalid_argument("lambda grid: values must lie in [0,1]");
        }
        if (i > 0 && values[i] >= values[i - 1]) {
            throw std::invalid_argument("lambda grid: values must be strictly descending");
        }
    }
}

LambdaGrid LambdaGrid::parse(const std::string& text) {
    double start = 0.0, stop = 0.0, step = 0.0;
    const size_t c1 = text.find(':');
    const size_t c2 = text.find(':', c1 == std::string::npos ? c1 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) {
        throw std::invalid_argument("lambda grid: expected start:stop:step, got \"" + text +
                                    "\"");
    }
    try {
        start = std::stod(text.substr(0, c1));
        stop = std::stod(text.substr(c1 + 1, c2 - c1 - 1));
        step = std::stod(text.substr(c2 + 1));
    } catch (const std::exception&) {
        throw std::invalid_argument("lambda grid: non-numeric field in \"" + text + "\"");
    }
    if (step <= 0.0 || start < stop) {
        throw std::invalid_argument("lambda grid: needs start >= stop and step > 0");
    }
    LambdaGrid grid;
    for (double v = start; v >= stop - 1e-12; v -= step) {
        grid.values.push_back(std::max(0.0, std::min(1.0, std::round(v * 1e9) / 1e9)));
    }
    grid.validate();
    return grid;
}

LambdaGrid LambdaGrid::default_grid() { return parse("1.0:0.0:0.05"); }

double consistency_loss(const ConsistencyObjective& objective,
                        std::span<const int> early_output, std::span<const int> full_output,
                        const std::vector<TokenSeq>* reference_set) {
    if (objective.mode == ObjectiveMode::textual) {
        return dissimilarity(objective.metric, early_output, full_output);
    }
    if (reference_set == nullptr || reference_set->empty()) {
        throw std::invalid_argument("risk consistency needs a non-empty reference set");
    }
    const double early_risk = risk(objective.metric, early_output, *reference_set);
    const double full_risk = risk(objective.metric, full_output, *reference_set);
    // Conservative: improvements over the full model earn no credit.
    return std::max(0.0, early_risk - full_risk);
}

double hoeffding_pvalue(double mean_loss, int n, double delta) {
    if (n < 1) throw std::invalid_argument("hoeffding_pvalue: n must be >= 1");
    if (mean_loss < 0.0 || mean_loss > 1.0) {
        throw std::invalid_argument("hoeffding_pvalue: mean loss must lie in [0,1]");
    }
    const double gap = std::max(0.0, delta - mean_loss);
    return std::exp(-2.0 * static_cast<double>(n) * gap * gap);
}

namespace {

// log P(Bin(n, p) <= k) via a stable pmf recurrence in log space.
double log_binom_cdf(int k, int n, double p) {
    if (k < 0) return -std::numeric_limits<double>::infinity();
    if (k >= n || p <= 0.0) return 0.0;
    if (p >= 1.0) return -std::numeric_limits<double>::infinity();
    // log pmf(0) = n log(1-p); pmf(j+1)/pmf(j) = (n-j)/(j+1) * p/(1-p).
    double log_pmf = static_cast<double>(n) * std::log1p(-p);
    const double log_ratio_base = std::log(p) - std::log1p(-p);
    double log_sum = log_pmf;
    for (int j = 0; j < k; ++j) {
        log_pmf += std::log(static_cast<double>(n - j) / static_cast<double>(j + 1)) +
                   log_ratio_base;
        log_sum = std::max(log_sum, log_pmf) +
                  std::log1p(std::exp(-std::fabs(log_sum - log_pmf)));
    }
    return std::min(0.0, log_sum);
}

// Bernoulli KL divergence h1(a, b) with the 0 log 0 = 0 convention.
double bernoulli_kl(double a, double b) {
    double kl = 0.0;
    if (a > 0.0) kl += a * std::log(a / b);
    if (a < 1.0) kl += (1.0 - a) * std::log((1.0 - a) / (1.0 - b));
    return kl;
}

constexpr double kPValueFloor = std::numeric_limits<double>::min();

}  // namespace

double hb_bentkus_term(double mean_loss, int n, double delta) {
    const int k = static_cast<int>(std::ceil(static_cast<double>(n) * mean_loss - 1e-9));
    const double log_p = 1.0 + log_binom_cdf(k, n, delta);
    return std::min(1.0, std::exp(log_p));
}

double hb_kl_term(double mean_loss, int n, double delta) {
    if (delta <= 0.0 || delta >= 1.0) return 1.0;
    const double a = std::min(mean_loss, delta);
    return std::exp(-static_cast<double>(n) * bernoulli_kl(a, delta));
}

double hb_pvalue_from_mean(double mean_loss, int n, double delta) {
    if (n < 1) throw std::invalid_argument("hb_pvalue: n must be >= 1");
    if (mean_loss < 0.0 || mean_loss > 1.0) {
        throw std::invalid_argument("hb_pvalue: mean loss must lie in [0,1]");
    }
    const double p = std::min(hb_bentkus_term(mean_loss, n, delta),
                              hb_kl_term(mean_loss, n, delta));
    return std::clamp(p, kPValueFloor, 1.0);
}

double hb_pvalue(std::span<const double> losses, double delta) {
    if (losses.empty()) throw std::invalid_argument("hb_pvalue: empty loss list");
    double total = 0.0;
    for (double l : losses) {
        if (l < 0.0 || l > 1.0) {
            throw std::invalid_argument("hb_pvalue: losses must lie in [0,1]");
        }
        total += l;
    }
    return hb_pvalue_from_mean(total / static_cast<double>(losses.size()),
                               static_cast<int>(losses.size()), delta);
}

double pvalue(PValueKind kind, double mean_loss, int n, double delta) {
    return kind == PValueKind::hoeffding ? hoeffding_pvalue(mean_loss, n, delta)
                                         : hb_pvalue_from_mean(mean_loss, n, delta);
}

double fst_calibrate(const LossEvaluator& evaluator, const LambdaGrid& grid, double delta,
                     double epsilon, PValueKind pvalue_kind) {
    grid.validate();
    double lambda_min = 1.0;
    for (double lambda : grid.values) {
        const std::vector<double> losses = evaluator(lambda);
        if (losses.empty()) {
            throw std::runtime_error("fst_calibrate: evaluator returned no losses");
        }
        double mean = 0.0;
        for (double l : losses) mean += l;
        mean /= static_cast<double>(losses.size());
        const double p = pvalue(pvalue_kind, mean, static_cast<int>(losses.size()), delta);
        if (p > epsilon) return lambda_min;
        lambda_min = lambda;
    }
    return lambda_min;
}

// --- Monte Carlo trial harness ------------------------------------------------

namespace {

struct GenSummary {
    std::vector<int> tokens;
    long long steps = 0;
    long long layer_sum = 0;
    double flops = 0.0;
};

GenSummary summarize(const GenerationOutput& out) {
    GenSummary s;
    s.tokens = out.tokens;
    s.steps = out.trace.num_steps();
    for (const auto& step : out.trace.steps) s.layer_sum += step.exit_layer;
    s.flops = out.trace.total_flops();
    return s;
}

double mean_of(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double std_of(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean_of(xs);
    double acc = 0.0;
    for (double x : xs) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(xs.size()));
}

}  // namespace

CalibrationReport run_trials(const std::vector<Example>& dataset, const DecoderBackend& backend,
                             const ConsistencyObjective& objective, const LambdaGrid& grid,
                             const DecodeSettings& settings, int trials, double calib_fraction,
                             uint64_t seed, PValueKind pvalue_kind) {
    objective.validate();
    grid.validate();
    if (dataset.size() < 10) {
        throw std::invalid_argument("run_trials: dataset must have at least 10 examples");
    }
    if (trials < 1) throw std::invalid_argument("run_trials: trials must be >= 1");
    if (!(calib_fraction > 0.0 && calib_fraction < 1.0)) {
        throw std::invalid_argument("run_trials: calibration fraction must lie in (0,1)");
    }

    const size_t n = dataset.size();
    const size_t n_grid = grid.values.size();
    const int num_layers = backend.num_layers();
    const double full_flops = full_token_flops(backend.cost_config());

    // Shared across trials: full outputs once, early outputs once per grid
    // point, and the per-example loss table. Textual mode never touches the
    // dataset targets.
    std::vector<GenSummary> full(n);
    for (size_t i = 0; i < n; ++i) {
        full[i] = summarize(generate_full(backend, dataset[i].prompt));
    }

    ThresholdPolicy policy;
    policy.tau = settings.tau;
    policy.max_len = backend.max_output_len();

    std::vector<std::vector<GenSummary>> early(n_grid, std::vector<GenSummary>(n));
    std::vector<std::vector<double>> loss(n_grid, std::vector<double>(n, 0.0));
    for (size_t g = 0; g < n_grid; ++g) {
        policy.lambda = grid.values[g];
        for (size_t i = 0; i < n; ++i) {
            early[g][i] = summarize(
                generate_adaptive(backend, dataset[i].prompt, settings.kind, policy,
                                  settings.mode));
            if (objective.mode == ObjectiveMode::risk) {
                if (dataset[i].target.empty()) {
                    throw std::invalid_argument(
                        "risk consistency needs dataset targets for every example");
                }
                const std::vector<TokenSeq> refs{dataset[i].target};
                loss[g][i] =
                    consistency_loss(objective, early[g][i].tokens, full[i].tokens, &refs);
            } else {
                loss[g][i] =
                    consistency_loss(objective, early[g][i].tokens, full[i].tokens, nullptr);
            }
        }
    }

    CalibrationReport report;
    report.objective = objective;
    report.trials = trials;
    report.calib_fraction = calib_fraction;
    report.seed = seed;

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    const size_t n_calib =
        std::clamp<size_t>(static_cast<size_t>(std::llround(calib_fraction * n)), 1, n - 1);

    for (int trial = 0; trial < trials; ++trial) {
        std::mt19937_64 rng(hash_mix(seed, static_cast<uint64_t>(trial) + 0x7472ULL));
        std::shuffle(order.begin(), order.end(), rng);

        const auto evaluator = [&](double lambda) {
            const auto it = std::find(grid.values.begin(), grid.values.end(), lambda);
            const size_t g = static_cast<size_t>(it - grid.values.begin());
            std::vector<double> ls(n_calib);
            for (size_t i = 0; i < n_calib; ++i) ls[i] = loss[g][order[i]];
            return ls;
        };
        const double lambda_min =
            fst_calibrate(evaluator, grid, objective.delta, objective.epsilon, pvalue_kind);

        TrialResult res;
        res.lambda_min = lambda_min;
        const auto it = std::find(grid.values.begin(), grid.values.end(), lambda_min);
        const bool in_grid = it != grid.values.end();
        const size_t g = in_grid ? static_cast<size_t>(it - grid.values.begin()) : 0;

        double loss_sum = 0.0;
        long long steps = 0, layer_sum = 0;
        double flops_sum = 0.0;
        for (size_t i = n_calib; i < n; ++i) {
            const size_t idx = order[i];
            // lambda_min = 1 with a grid that lacks 1.0 falls back to the
            // full model by construction.
            const GenSummary& summary = in_grid ? early[g][idx] : full[idx];
            loss_sum += in_grid ? loss[g][idx] : 0.0;
            steps += summary.steps;
            layer_sum += in_grid ? summary.layer_sum : summary.steps * num_layers;
            flops_sum += summary.flops;
        }
        const size_t n_test = n - n_calib;
        res.test_mean_loss = loss_sum / static_cast<double>(n_test);
        res.test_mean_exit_layers =
            steps > 0 ? static_cast<double>(layer_sum) / static_cast<double>(steps) : 0.0;
        res.test_flops_reduction =
            flops_sum > 0.0 ? full_flops * static_cast<double>(steps) / flops_sum : 1.0;
        report.per_trial.push_back(res);
    }

    std::vector<double> lambdas, losses_v, layers_v, flops_v;
    int valid = 0;
    for (const auto& t : report.per_trial) {
        lambdas.push_back(t.lambda_min);
        losses_v.push_back(t.test_mean_loss);
        layers_v.push_back(t.test_mean_exit_layers);
        flops_v.push_back(t.test_flops_reduction);
        if (t.test_mean_loss <= objective.delta) ++valid;
    }
    report.validity_rate = static_cast<double>(valid) / static_cast<double>(trials);
    report.mean_lambda_min = mean_of(lambdas);
    report.std_lambda_min = std_of(lambdas);
    report.mean_test_loss = mean_of(losses_v);
    report.std_test_loss = std_of(losses_v);
    report.mean_exit_layers = mean_of(layers_v);
    report.std_exit_layers = std_of(layers_v);
    report.mean_flops_reduction = mean_of(flops_v);
    report.std_flops_reduction = std_of(flops_v);
    return report;
}

std::string report_to_json(const CalibrationReport& report) {
    json j;
    j["objective"] = {
        {"mode", report.objective.mode == ObjectiveMode::textual ? "textual" : "risk"},
        {"metric", report.objective.metric == MetricKind::token_f1        ? "token_f1"
                   : report.objective.metric == MetricKind::rouge_l       ? "rouge_l"
                                                                          : "edit"},
        {"delta", report.objective.delta},
        {"epsilon", report.objective.epsilon}};
    j["trials"] = report.trials;
    j["calib_fraction"] = report.calib_fraction;
    j["seed"] = report.seed;
    json rows = json::array();
    for (const auto& t : report.per_trial) {
        rows.push_back({{"lambda_min", t.lambda_min},
                        {"test_mean_loss", t.test_mean_loss},
                        {"test_mean_exit_layers", t.test_mean_exit_layers},
                        {"test_flops_reduction", t.test_flops_reduction}});
    }
    j["per_trial"] = std::move(rows);
    j["aggregate"] = {{"validity_rate", report.validity_rate},
                      {"mean_lambda_min", report.mean_lambda_min},
                      {"std_lambda_min", report.std_lambda_min},
                      {"mean_test_loss", report.mean_test_loss},
                      {"std_test_loss", report.std_test_loss},
                      {"mean_exit_layers", report.mean_exit_layers},
                      {"std_exit_layers", report.std_exit_layers},
                      {"mean_flops_reduction", report.mean_flops_reduction},
                      {"std_flops_reduction", report.std_flops_reduction}};
    return j.dump(2);
}

void write_report_csv(const CalibrationReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "trial,lambda_min,test_mean_loss,test_mean_exit_layers,test_flops_reduction\n";
    for (size_t i = 0; i < report.per_trial.size(); ++i) {
        const auto& t = report.per_trial[i];
        out << i << ',' << t.lambda_min << ',' << t.test_mean_loss << ','
            << t.test_mean_exit_layers << ',' << t.test_flops_reduction << '\n';
    }
    if (!out) throw std::runtime_error("short write to " + path);
}

}  // namespace earlyexit
