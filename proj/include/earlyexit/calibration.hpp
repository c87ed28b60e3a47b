#pragma once

// Threshold calibration as multiple hypothesis testing: walk a descending
// lambda grid with fixed sequence testing, rejecting "this threshold is not
// consistent" nulls via distribution-free p-values, and return the lowest
// threshold rejected before the first failure (1 when even the first test
// fails). The Monte Carlo trial harness re-splits a dataset many times to
// check the (delta, epsilon) guarantee empirically.

#include <functional>
#include <string>
#include <vector>

#include "earlyexit/engine.hpp"
#include "earlyexit/metrics.hpp"

namespace earlyexit {

enum class ObjectiveMode { textual, risk };

struct ConsistencyObjective {
    ObjectiveMode mode = ObjectiveMode::textual;
    MetricKind metric = MetricKind::token_f1;
    double delta = 0.1;    // tolerance, in (0, 1)
    double epsilon = 0.05; // confidence level, in (0, 1)

    void validate() const;
};

struct LambdaGrid {
    std::vector<double> values;  // strictly descending, within [0, 1]

    void validate() const;
    // "start:stop:step" with start > stop, e.g. "1.0:0.0:0.05".
    static LambdaGrid parse(const std::string& text);
    static LambdaGrid default_grid();  // 1.00 down to 0.00 in steps of 0.05
};

// Per-example consistency loss in [0, 1]:
//   textual: dissimilarity(early, full)
//   risk:    max(0, risk(early, refs) - risk(full, refs))
double consistency_loss(const ConsistencyObjective& objective,
                        std::span<const int> early_output, std::span<const int> full_output,
                        const std::vector<TokenSeq>* reference_set);

enum class PValueKind { hoeffding, hoeffding_bentkus };

// exp(-2n max(0, delta - mean)^2), from inverting Hoeffding's inequality.
double hoeffding_pvalue(double mean_loss, int n, double delta);

// Two components of the Hoeffding-Bentkus bound, exposed for verification.
double hb_bentkus_term(double mean_loss, int n, double delta);
double hb_kl_term(double mean_loss, int n, double delta);

// min(bentkus, kl) clamped into (0, 1]. Dominated by hoeffding_pvalue
// pointwise (Pinsker), hence at least as powerful.
double hb_pvalue_from_mean(double mean_loss, int n, double delta);
double hb_pvalue(std::span<const double> losses, double delta);

double pvalue(PValueKind kind, double mean_loss, int n, double delta);

// Fixed sequence testing over the descending grid: for each lambda, the
// evaluator yields per-example losses; testing stops at the first p-value
// above epsilon and the last rejected lambda (initially 1) is returned.
using LossEvaluator = std::function<std::vector<double>(double lambda)>;
double fst_calibrate(const LossEvaluator& evaluator, const LambdaGrid& grid, double delta,
                     double epsilon, PValueKind pvalue_kind = PValueKind::hoeffding_bentkus);

// Decode configuration held fixed during calibration; only lambda is searched.
struct DecodeSettings {
    ConfidenceKind kind = ConfidenceKind::softmax_response;
    double tau = 0.0;
    PropagationMode mode = PropagationMode::copy_hidden;
};

struct TrialResult {
    double lambda_min = 1.0;
    double test_mean_loss = 0.0;
    double test_mean_exit_layers = 0.0;
    double test_flops_reduction = 1.0;  // full flops/token over adaptive flops/token
};

struct CalibrationReport {
    ConsistencyObjective objective;
    int trials = 0;
    double calib_fraction = 0.8;
    uint64_t seed = 0;
    std::vector<TrialResult> per_trial;

    // Aggregates over trials.
    double validity_rate = 0.0;  // fraction with test_mean_loss <= delta
    double mean_lambda_min = 0.0, std_lambda_min = 0.0;
    double mean_test_loss = 0.0, std_test_loss = 0.0;
    double mean_exit_layers = 0.0, std_exit_layers = 0.0;
    double mean_flops_reduction = 0.0, std_flops_reduction = 0.0;
};

// Monte Carlo harness: pre-generates full outputs once and early outputs once
// per (example, grid lambda), then repeatedly splits the dataset into
// calibration/test parts, calibrates on the first and measures held-out
// consistency and efficiency at the chosen threshold. Textual mode never
// reads dataset targets.
CalibrationReport run_trials(const std::vector<Example>& dataset, const DecoderBackend& backend,
                             const ConsistencyObjective& objective, const LambdaGrid& grid,
                             const DecodeSettings& settings, int trials = 50,
                             double calib_fraction = 0.8, uint64_t seed = 0,
                             PValueKind pvalue_kind = PValueKind::hoeffding_bentkus);

std::string report_to_json(const CalibrationReport& report);
void write_report_csv(const CalibrationReport& report, const std::string& path);

}  // namespace earlyexit
