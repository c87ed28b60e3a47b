// eed: early-exit decoding toolkit.
//
// Subcommands cover the whole experiment loop: synthetic data generation,
// threshold sweeps, consistency-calibrated threshold selection, trace
// generation and visualization, latency benchmarks, and exit-classifier
// training. Everything is deterministic under --seed. Exit codes: 0 success,
// 2 usage error, 1 runtime failure.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "earlyexit/calibration.hpp"
#include "earlyexit/engine.hpp"
#include "earlyexit/weights_io.hpp"

using namespace earlyexit;
using nlohmann::json;

namespace {

struct BackendArgs {
    std::string backend;  // "real" | "synthetic"
    std::string weights_path;
    std::string spec_path;
};

struct LoadedBackend {
    std::unique_ptr<Weights> weights;
    std::unique_ptr<RealBackend> real;
    std::unique_ptr<SyntheticBackend> synthetic;
    std::optional<SyntheticSetup> setup;

    DecoderBackend& get() {
        if (real) return *real;
        return *synthetic;
    }
};

void add_backend_options(CLI::App* cmd, BackendArgs& args) {
    cmd->add_option("--backend", args.backend, "Backend kind: real | synthetic")
        ->required()
        ->check(CLI::IsMember({"real", "synthetic"}));
    cmd->add_option("--weights", args.weights_path, "Weight container (real backend)");
    cmd->add_option("--spec", args.spec_path, "Synthetic spec JSON (synthetic backend)");
}

LoadedBackend open_backend(const BackendArgs& args) {
    LoadedBackend lb;
    if (args.backend == "real") {
        if (args.weights_path.empty()) {
            throw CLI::ValidationError("--backend real requires --weights");
        }
        lb.weights = std::make_unique<Weights>(load_weights(args.weights_path));
        lb.real = std::make_unique<RealBackend>(*lb.weights);
    } else {
        if (args.spec_path.empty()) {
            throw CLI::ValidationError("--backend synthetic requires --spec");
        }
        lb.setup = load_synthetic_setup(args.spec_path);
        lb.synthetic = std::make_unique<SyntheticBackend>(lb.setup->spec, lb.setup->task.kind,
                                                          lb.setup->max_len);
    }
    return lb;
}

ConfidenceKind measure_from_name(const std::string& name) {
    if (name == "softmax") return ConfidenceKind::softmax_response;
    if (name == "state") return ConfidenceKind::state_saturation;
    if (name == "classifier") return ConfidenceKind::classifier;
    if (name == "oracle") return ConfidenceKind::oracle;
    throw CLI::ValidationError("unknown measure: " + name);
}

std::string measure_name(ConfidenceKind kind) {
    switch (kind) {
        case ConfidenceKind::softmax_response: return "softmax";
        case ConfidenceKind::state_saturation: return "state";
        case ConfidenceKind::classifier: return "classifier";
        case ConfidenceKind::oracle: return "oracle";
    }
    return "?";
}

MetricKind metric_from_name(const std::string& name) {
    if (name == "token_f1") return MetricKind::token_f1;
    if (name == "rouge_l") return MetricKind::rouge_l;
    if (name == "edit") return MetricKind::norm_edit_similarity;
    throw CLI::ValidationError("unknown metric: " + name);
}

std::vector<std::vector<int>> prompts_of(const std::vector<Example>& data) {
    std::vector<std::vector<int>> prompts;
    prompts.reserve(data.size());
    for (const auto& ex : data) prompts.push_back(ex.prompt);
    return prompts;
}

// Trains the shared exit classifier on the dataset when the backend has no
// stored parameters (the synthetic backend never does).
void ensure_classifier(LoadedBackend& lb, const std::vector<Example>& data, uint64_t seed) {
    if (lb.get().exit_params() != nullptr) return;
    auto prompts = prompts_of(data);
    auto examples = collect_exit_examples(lb.get(), prompts);
    ExitTrainOptions opts;
    opts.epochs = 300;
    opts.seed = seed;
    lb.synthetic->set_exit_params(train_independent(examples, opts).params);
}

// --- visualization ------------------------------------------------------------

struct Rgb {
    int r, g, b;
};

// Exit-depth tint: linear green-to-red over exit_layer / num_layers.
Rgb depth_color(int exit_layer, int num_layers) {
    const double ratio = static_cast<double>(exit_layer) / std::max(1, num_layers);
    return {static_cast<int>(std::lround(255.0 * ratio)),
            static_cast<int>(std::lround(255.0 * (1.0 - ratio))), 0};
}

std::string ansi_render(const LoadedTrace& trace) {
    std::string out;
    for (size_t i = 0; i < trace.tokens.size(); ++i) {
        const Rgb c = depth_color(trace.exit_layers[i],
                                  trace.num_layers > 0 ? trace.num_layers : 1);
        out += "\x1b[38;2;" + std::to_string(c.r) + ";" + std::to_string(c.g) + ";" +
               std::to_string(c.b) + "m" + std::to_string(trace.tokens[i]) + "\x1b[0m ";
    }
    return out;
}

std::string html_render(const std::vector<LoadedTrace>& traces) {
    std::string out =
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        "<title>exit depth</title></head>\n<body style=\"font-family:monospace\">\n";
    for (const auto& trace : traces) {
        out += "<p>";
        for (size_t i = 0; i < trace.tokens.size(); ++i) {
            const Rgb c = depth_color(trace.exit_layers[i],
                                      trace.num_layers > 0 ? trace.num_layers : 1);
            char hex[8];
            std::snprintf(hex, sizeof(hex), "#%02x%02x%02x", c.r, c.g, c.b);
            out += "<span style=\"background-color:" + std::string(hex) +
                   "\">" + std::to_string(trace.tokens[i]) + "</span> ";
        }
        out += "</p>\n";
    }
    out += "</body></html>\n";
    return out;
}

// --- sweep ----------------------------------------------------------------------

struct SweepRow {
    std::string measure;
    double lambda = 0.0;  // fixed layer index for static rows
    double mean_exit_layers = 0.0;
    double consistency_vs_full = 0.0;
    std::optional<double> metric_vs_target;
    double flops_reduction = 1.0;
};

SweepRow summarize_rows(const std::string& measure, double lambda,
                        const std::vector<GenerationOutput>& outs,
                        const std::vector<GenerationOutput>& fulls,
                        const std::vector<Example>& data, MetricKind metric,
                        const ModelConfig& cost_cfg) {
    SweepRow row;
    row.measure = measure;
    row.lambda = lambda;
    long long layers = 0, steps = 0;
    double flops = 0.0, sim_full = 0.0, sim_target = 0.0;
    bool have_targets = true;
    for (size_t i = 0; i < outs.size(); ++i) {
        for (const auto& s : outs[i].trace.steps) layers += s.exit_layer;
        steps += outs[i].trace.num_steps();
        flops += outs[i].trace.total_flops();
        sim_full += similarity(metric, outs[i].tokens, fulls[i].tokens);
        if (data[i].target.empty()) {
            have_targets = false;
        } else {
            sim_target += 1.0 - risk(metric, outs[i].tokens, {data[i].target});
        }
    }
    const double n = static_cast<double>(outs.size());
    row.mean_exit_layers = steps > 0 ? static_cast<double>(layers) / steps : 0.0;
    row.consistency_vs_full = sim_full / n;
    if (have_targets) row.metric_vs_target = sim_target / n;
    row.flops_reduction =
        flops > 0.0 ? full_token_flops(cost_cfg) * static_cast<double>(steps) / flops : 1.0;
    return row;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
    out << "measure,lambda,mean_exit_layers,consistency_vs_full,metric_vs_target,"
           "flops_reduction\n";
    for (const auto& r : rows) {
        out << r.measure << ',' << r.lambda << ',' << r.mean_exit_layers << ','
            << r.consistency_vs_full << ',';
        if (r.metric_vs_target) out << *r.metric_vs_target;
        out << ',' << r.flops_reduction << '\n';
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"early-exit decoding toolkit"};
    app.require_subcommand(1);

    // ---- synth-data ----
    auto* synth_cmd = app.add_subcommand("synth-data", "Generate a synthetic dataset file");
    std::string sd_spec, sd_out;
    int sd_n = 100;
    uint64_t sd_seed = 0;
    synth_cmd->add_option("--spec", sd_spec, "Synthetic spec JSON")->required();
    synth_cmd->add_option("-n,--count", sd_n, "Number of examples")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--seed", sd_seed, "Dataset seed");
    synth_cmd->add_option("--out", sd_out, "Output JSON-lines path")->required();

    // ---- sweep ----
    auto* sweep_cmd =
        app.add_subcommand("sweep", "Per-measure threshold sweep with static baselines");
    BackendArgs sw_backend;
    add_backend_options(sweep_cmd, sw_backend);
    std::string sw_data, sw_out, sw_grid = "1.0:0.0:0.05", sw_metric = "token_f1";
    std::string sw_propagation = "copy-hidden";
    double sw_tau = 0.0;
    uint64_t sw_seed = 0;
    sweep_cmd->add_option("--data", sw_data, "Dataset JSON-lines")->required();
    sweep_cmd->add_option("--metric", sw_metric, "token_f1 | rouge_l | edit");
    sweep_cmd->add_option("--grid", sw_grid, "Lambda grid start:stop:step");
    sweep_cmd->add_option("--tau", sw_tau, "Threshold decay temperature");
    sweep_cmd->add_option("--propagation", sw_propagation,
                          "copy-hidden | copy-kv | first-state");
    sweep_cmd->add_option("--seed", sw_seed, "Classifier training seed");
    sweep_cmd->add_option("--out", sw_out, "Output CSV path (stdout if omitted)");

    // ---- calibrate ----
    auto* cal_cmd = app.add_subcommand("calibrate", "Consistency-calibrated threshold trials");
    BackendArgs ca_backend;
    add_backend_options(cal_cmd, ca_backend);
    std::string ca_data, ca_out, ca_grid = "1.0:0.0:0.05", ca_metric = "token_f1";
    std::string ca_mode = "textual", ca_measure = "softmax", ca_propagation = "copy-hidden";
    std::string ca_pvalue = "hb";
    double ca_delta = 0.1, ca_epsilon = 0.05, ca_tau = 0.0, ca_fraction = 0.8;
    int ca_trials = 50;
    uint64_t ca_seed = 0;
    cal_cmd->add_option("--data", ca_data, "Dataset JSON-lines")->required();
    cal_cmd->add_option("--mode", ca_mode, "textual | risk")
        ->check(CLI::IsMember({"textual", "risk"}));
    cal_cmd->add_option("--metric", ca_metric, "token_f1 | rouge_l | edit");
    cal_cmd->add_option("--delta", ca_delta, "Consistency tolerance in (0,1)")->required();
    cal_cmd->add_option("--epsilon", ca_epsilon, "Confidence level in (0,1)");
    cal_cmd->add_option("--grid", ca_grid, "Lambda grid start:stop:step");
    cal_cmd->add_option("--tau", ca_tau, "Threshold decay temperature");
    cal_cmd->add_option("--measure", ca_measure, "softmax | state | classifier | oracle");
    cal_cmd->add_option("--propagation", ca_propagation,
                        "copy-hidden | copy-kv | first-state");
    cal_cmd->add_option("--pvalue", ca_pvalue, "hb | hoeffding")
        ->check(CLI::IsMember({"hb", "hoeffding"}));
    cal_cmd->add_option("--trials", ca_trials, "Number of random trials")
        ->check(CLI::PositiveNumber);
    cal_cmd->add_option("--calib-fraction", ca_fraction, "Calibration split fraction");
    cal_cmd->add_option("--seed", ca_seed, "Trial seed");
    cal_cmd->add_option("--out", ca_out, "Output prefix for .json/.csv")->required();

    // ---- generate ----
    auto* gen_cmd = app.add_subcommand("generate", "Decode a dataset and export traces");
    BackendArgs ge_backend;
    add_backend_options(gen_cmd, ge_backend);
    std::string ge_data, ge_out, ge_measure = "softmax", ge_propagation = "copy-hidden";
    double ge_lambda = 1.0, ge_tau = 0.0;
    uint64_t ge_seed = 0;
    gen_cmd->add_option("--data", ge_data, "Dataset JSON-lines")->required();
    gen_cmd->add_option("--measure", ge_measure, "softmax | state | classifier | oracle");
    gen_cmd->add_option("--lambda", ge_lambda, "Exit threshold in [0,1]");
    gen_cmd->add_option("--tau", ge_tau, "Threshold decay temperature");
    gen_cmd->add_option("--propagation", ge_propagation,
                        "copy-hidden | copy-kv | first-state");
    gen_cmd->add_option("--seed", ge_seed, "Classifier training seed (synthetic backend)");
    gen_cmd->add_option("--out", ge_out, "Trace JSON-lines path")->required();

    // ---- visualize ----
    auto* vis_cmd = app.add_subcommand("visualize", "Render per-token exit depth");
    std::string vi_data, vi_out;
    vis_cmd->add_option("--data", vi_data, "Trace JSON-lines path")->required();
    vis_cmd->add_option("--out", vi_out, "Self-contained HTML output path");

    // ---- bench ----
    auto* bench_cmd = app.add_subcommand("bench", "Wall-clock benchmark vs the full model");
    BackendArgs be_backend;
    add_backend_options(bench_cmd, be_backend);
    std::string be_data, be_out, be_measure = "softmax", be_propagation = "copy-hidden";
    double be_lambda = 1.0, be_tau = 0.0;
    int be_runs = 200;
    uint64_t be_seed = 0;
    bench_cmd->add_option("--data", be_data, "Dataset JSON-lines")->required();
    bench_cmd->add_option("--measure", be_measure, "softmax | state | classifier | oracle");
    bench_cmd->add_option("--lambda", be_lambda, "Exit threshold in [0,1]");
    bench_cmd->add_option("--tau", be_tau, "Threshold decay temperature");
    bench_cmd->add_option("--propagation", be_propagation,
                          "copy-hidden | copy-kv | first-state");
    bench_cmd->add_option("--runs", be_runs, "Timed generations (first discarded)");
    bench_cmd->add_option("--seed", be_seed, "Classifier training seed (synthetic backend)");
    bench_cmd->add_option("--out", be_out, "Report JSON path (stdout if omitted)");

    // ---- train-exit-classifier ----
    auto* train_cmd =
        app.add_subcommand("train-exit-classifier", "Fit the shared linear exit classifier");
    std::string tr_weights, tr_data, tr_out, tr_objective = "independent";
    int tr_epochs = 500;
    double tr_lr = 0.5;
    uint64_t tr_seed = 0;
    train_cmd->add_option("--weights", tr_weights, "Input weight container")->required();
    train_cmd->add_option("--data", tr_data, "Dataset JSON-lines")->required();
    train_cmd->add_option("--objective", tr_objective, "independent | geometric")
        ->check(CLI::IsMember({"independent", "geometric"}));
    train_cmd->add_option("--epochs", tr_epochs, "Training epochs")->check(CLI::PositiveNumber);
    train_cmd->add_option("--lr", tr_lr, "Learning rate");
    train_cmd->add_option("--seed", tr_seed, "Init seed");
    train_cmd->add_option("--out", tr_out, "Output weight container")->required();

    // ---- init-weights ----
    auto* init_cmd = app.add_subcommand("init-weights", "Write a seeded random weight file");
    std::string in_config, in_out;
    uint64_t in_seed = 0;
    init_cmd->add_option("--config", in_config, "Model config JSON path")->required();
    init_cmd->add_option("--seed", in_seed, "Init seed");
    init_cmd->add_option("--out", in_out, "Output weight container")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*synth_cmd) {
            auto setup = load_synthetic_setup(sd_spec);
            SynthTask task = setup.task;
            task.seed = sd_seed;
            auto data = gen_dataset(task, sd_n);
            save_dataset(data, sd_out);
            std::cout << "wrote " << data.size() << " examples to " << sd_out << "\n";
        } else if (*sweep_cmd) {
            auto lb = open_backend(sw_backend);
            auto data = load_dataset(sw_data);
            if (data.empty()) throw std::runtime_error("empty dataset: " + sw_data);
            const MetricKind metric = metric_from_name(sw_metric);
            const LambdaGrid grid = LambdaGrid::parse(sw_grid);
            const PropagationMode mode = propagation_mode_from_name(sw_propagation);
            ensure_classifier(lb, data, sw_seed);
            DecoderBackend& backend = lb.get();
            const ModelConfig cost_cfg = backend.cost_config();

            std::vector<GenerationOutput> fulls;
            for (const auto& ex : data) fulls.push_back(generate_full(backend, ex.prompt));

            std::vector<SweepRow> rows;
            for (ConfidenceKind kind :
                 {ConfidenceKind::softmax_response, ConfidenceKind::state_saturation,
                  ConfidenceKind::classifier, ConfidenceKind::oracle}) {
                for (double lambda : grid.values) {
                    ThresholdPolicy policy{lambda, sw_tau, backend.max_output_len()};
                    std::vector<GenerationOutput> outs;
                    for (const auto& ex : data) {
                        outs.push_back(
                            generate_adaptive(backend, ex.prompt, kind, policy, mode));
                    }
                    rows.push_back(summarize_rows(measure_name(kind), lambda, outs, fulls,
                                                  data, metric, cost_cfg));
                }
            }
            for (int layer = backend.num_layers(); layer >= 1; --layer) {
                std::vector<GenerationOutput> outs;
                for (const auto& ex : data) {
                    outs.push_back(generate_static(backend, ex.prompt, layer, mode));
                }
                rows.push_back(summarize_rows("static", layer, outs, fulls, data, metric,
                                              cost_cfg));
            }
            if (sw_out.empty()) {
                write_sweep_csv(rows, std::cout);
            } else {
                std::ofstream f(sw_out, std::ios::trunc);
                if (!f) throw std::runtime_error("cannot open " + sw_out);
                write_sweep_csv(rows, f);
                std::cout << "wrote " << rows.size() << " rows to " << sw_out << "\n";
            }
        } else if (*cal_cmd) {
            auto lb = open_backend(ca_backend);
            auto data = load_dataset(ca_data);
            ConsistencyObjective objective;
            objective.mode = ca_mode == "textual" ? ObjectiveMode::textual : ObjectiveMode::risk;
            objective.metric = metric_from_name(ca_metric);
            objective.delta = ca_delta;
            objective.epsilon = ca_epsilon;
            objective.validate();

            DecodeSettings settings;
            settings.kind = measure_from_name(ca_measure);
            settings.tau = ca_tau;
            settings.mode = propagation_mode_from_name(ca_propagation);
            if (settings.kind == ConfidenceKind::classifier) {
                ensure_classifier(lb, data, ca_seed);
            }
            const PValueKind pvk =
                ca_pvalue == "hb" ? PValueKind::hoeffding_bentkus : PValueKind::hoeffding;
            CalibrationReport report =
                run_trials(data, lb.get(), objective, LambdaGrid::parse(ca_grid), settings,
                           ca_trials, ca_fraction, ca_seed, pvk);
            {
                std::ofstream f(ca_out + ".json", std::ios::trunc);
                if (!f) throw std::runtime_error("cannot open " + ca_out + ".json");
                f << report_to_json(report) << "\n";
            }
            write_report_csv(report, ca_out + ".csv");
            std::cout << "trials=" << report.trials
                      << " validity_rate=" << report.validity_rate
                      << " mean_lambda_min=" << report.mean_lambda_min
                      << " mean_exit_layers=" << report.mean_exit_layers << "\n";
        } else if (*gen_cmd) {
            auto lb = open_backend(ge_backend);
            auto data = load_dataset(ge_data);
            const ConfidenceKind kind = measure_from_name(ge_measure);
            if (kind == ConfidenceKind::classifier) ensure_classifier(lb, data, ge_seed);
            DecoderBackend& backend = lb.get();
            ThresholdPolicy policy{ge_lambda, ge_tau, backend.max_output_len()};
            const PropagationMode mode = propagation_mode_from_name(ge_propagation);
            std::vector<GenerationOutput> outs;
            for (const auto& ex : data) {
                outs.push_back(generate_adaptive(backend, ex.prompt, kind, policy, mode));
            }
            write_traces(outs, backend.num_layers(), ge_out);
            std::cout << "wrote " << outs.size() << " traces to " << ge_out << "\n";
        } else if (*vis_cmd) {
            auto traces = load_traces(vi_data);
            if (!vi_out.empty()) {
                std::ofstream f(vi_out, std::ios::trunc);
                if (!f) throw std::runtime_error("cannot open " + vi_out);
                f << html_render(traces);
            }
            for (const auto& trace : traces) std::cout << ansi_render(trace) << "\n";
        } else if (*bench_cmd) {
            auto lb = open_backend(be_backend);
            auto data = load_dataset(be_data);
            const ConfidenceKind kind = measure_from_name(be_measure);
            if (kind == ConfidenceKind::classifier) ensure_classifier(lb, data, be_seed);
            DecoderBackend& backend = lb.get();
            ThresholdPolicy policy{be_lambda, be_tau, backend.max_output_len()};
            BenchReport report = bench(backend, prompts_of(data), kind, policy,
                                       propagation_mode_from_name(be_propagation), be_runs);
            json j{{"runs", report.runs},
                   {"adaptive_ms", report.adaptive_ms},
                   {"full_ms", report.full_ms},
                   {"adaptive_mean_ms", report.adaptive_mean_ms},
                   {"full_mean_ms", report.full_mean_ms},
                   {"speedup", report.speedup}};
            if (be_out.empty()) {
                std::cout << j.dump(2) << "\n";
            } else {
                std::ofstream f(be_out, std::ios::trunc);
                if (!f) throw std::runtime_error("cannot open " + be_out);
                f << j.dump(2) << "\n";
                std::cout << "speedup=" << report.speedup << "\n";
            }
        } else if (*train_cmd) {
            Weights weights = load_weights(tr_weights);
            auto data = load_dataset(tr_data);
            RealBackend backend(weights);
            auto examples = collect_exit_examples(backend, prompts_of(data));
            ExitTrainOptions opts;
            opts.epochs = tr_epochs;
            opts.learning_rate = tr_lr;
            opts.seed = tr_seed;
            ExitTrainResult result = tr_objective == "independent"
                                         ? train_independent(examples, opts)
                                         : train_geometric(examples, opts);
            weights.exit_classifier = result.params;
            save_weights(weights, tr_out);

            auto f1 = eval_layerwise_f1(result.params, examples);
            std::cout << "layer,f1_dont_exit\n";
            for (size_t i = 0; i < f1.size(); ++i) {
                std::cout << (i + 1) << ',' << f1[i] << "\n";
            }
        } else if (*init_cmd) {
            std::ifstream f(in_config);
            if (!f) throw std::runtime_error("cannot open " + in_config);
            json j;
            f >> j;
            ModelConfig cfg;
            cfg.num_layers = j.at("num_layers").get<int>();
            cfg.vocab_size = j.at("vocab_size").get<int>();
            cfg.d_model = j.at("d_model").get<int>();
            cfg.d_k = j.at("d_k").get<int>();
            cfg.d_v = j.at("d_v").get<int>();
            cfg.d_ff = j.at("d_ff").get<int>();
            cfg.num_heads = j.value("num_heads", 1);
            cfg.max_len = j.at("max_len").get<int>();
            Weights w = Weights::random_init(cfg, in_seed);
            save_weights(w, in_out);
            std::cout << "wrote " << in_out << "\n";
        }
    } catch (const CLI::ValidationError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
