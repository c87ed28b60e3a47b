#include "earlyexit/engine.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace earlyexit {

using nlohmann::json;

PropagationMode propagation_mode_from_name(const std::string& name) {
    if (name == "copy-hidden" || name == "copy_hidden") return PropagationMode::copy_hidden;
    if (name == "copy-kv" || name == "copy_projected_kv") return PropagationMode::copy_projected_kv;
    if (name == "first-state" || name == "always_first_state") {
        return PropagationMode::always_first_state;
    }
    throw std::invalid_argument("unknown propagation mode: " + name);
}

std::string propagation_mode_name(PropagationMode mode) {
    switch (mode) {
        case PropagationMode::copy_hidden: return "copy-hidden";
        case PropagationMode::copy_projected_kv: return "copy-kv";
        case PropagationMode::always_first_state: return "first-state";
    }
    return "?";
}

double DecodeTrace::avg_exit_layers() const {
    if (steps.empty()) return 0.0;
    long long total = 0;
    for (const auto& s : steps) total += s.exit_layer;
    return static_cast<double>(total) / static_cast<double>(steps.size());
}

// --- real backend ------------------------------------------------------------

RealBackend::RealBackend(const Weights& weights) : weights_(weights) {
    weights_.validate();
}

std::unique_ptr<Generation> RealBackend::begin(std::span<const int> prompt,
                                               PropagationMode mode) const {
    return std::make_unique<RealGeneration>(weights_, prompt, mode);
}

RealGeneration::RealGeneration(const Weights& w, std::span<const int> prompt,
                               PropagationMode mode)
    : weights_(w), mode_(mode), cross_(w, encode(w, prompt)),
      cache_(w.config.num_layers) {}

void RealGeneration::ensure_row(int layer) {
    auto& row = cache_.layer(layer);
    const size_t need = static_cast<size_t>(steps_);
    while (row.size() < need) {
        const size_t s = row.size();
        const TokenRecord& rec = records_[s];
        const auto& lw = weights_.decoder[static_cast<size_t>(layer) - 1].self_attn;
        KvEntry entry;
        switch (mode_) {
            case PropagationMode::copy_hidden:
                // The skipped layer sees the exited layer's hidden state but
                // projects it with its own matrices.
                entry.k = matvec(lw.wk, rec.exit_hidden);
                entry.v = matvec(lw.wv, rec.exit_hidden);
                entry.proj_layer = layer;
                entry.state_layer = rec.exit_layer;
                break;
            case PropagationMode::copy_projected_kv: {
                const KvEntry& src = cache_.layer(rec.exit_layer)[s];
                entry = src;
                break;
            }
            case PropagationMode::always_first_state:
                entry.k = matvec(lw.wk, rec.first_hidden);
                entry.v = matvec(lw.wv, rec.first_hidden);
                entry.proj_layer = layer;
                entry.state_layer = 1;
                break;
        }
        row.push_back(std::move(entry));
    }
}

void RealGeneration::materialize_cache() {
    for (int layer = 1; layer <= weights_.config.num_layers; ++layer) ensure_row(layer);
}

std::span<const float> RealGeneration::advance_layer() {
    const int layer = layers_done() + 1;
    if (layer > weights_.config.num_layers) {
        throw std::logic_error("advance_layer: past the final layer");
    }
    if (layer == 1) input_state_ = embed_token(weights_, prev_token_);
    ensure_row(layer);
    const Vec& input = layer == 1 ? input_state_ : hiddens_.back();
    hiddens_.push_back(decoder_step(weights_, layer, input, cache_, cross_));
    return hiddens_.back();
}

std::span<const float> RealGeneration::hidden(int layer) const {
    if (layer < 1 || layer > layers_done()) {
        throw std::logic_error("hidden: layer " + std::to_string(layer) + " not computed");
    }
    return hiddens_[static_cast<size_t>(layer) - 1];
}

Vec RealGeneration::layer_logits(int layer) const {
    return logits(weights_, layer, hidden(layer));
}

void RealGeneration::commit(int token, int exit_layer) {
    if (exit_layer < 1 || exit_layer > layers_done()) {
        throw std::logic_error("commit: exit layer " + std::to_string(exit_layer) +
                               " not computed");
    }
    // Drop cached K/V the exit makes stale; later tokens refill them through
    // the propagation rule instead.
    const int keep = mode_ == PropagationMode::always_first_state ? 1 : exit_layer;
    for (int layer = keep + 1; layer <= layers_done(); ++layer) {
        cache_.layer(layer).pop_back();
    }
    TokenRecord rec;
    rec.exit_layer = exit_layer;
    rec.first_hidden = hiddens_.front();
    rec.exit_hidden = hiddens_[static_cast<size_t>(exit_layer) - 1];
    records_.push_back(std::move(rec));
    hiddens_.clear();
    prev_token_ = token;
    ++steps_;
}

// --- synthetic backend --------------------------------------------------------

namespace {

class SyntheticGeneration : public Generation {
  public:
    SyntheticGeneration(const SyntheticSpec& spec, TaskKind task, std::span<const int> prompt)
        : spec_(spec), prompt_(prompt.begin(), prompt.end()) {
        for (int tok : prompt_) {
            if (tok < 1 || tok >= spec_.vocab_size) {
                throw std::invalid_argument("synthetic prompt token " + std::to_string(tok) +
                                            " out of range");
            }
        }
        target_ = derive_target(task, prompt_);
    }

    int layers_done() const override { return layers_; }
    int steps_done() const override { return steps_; }

    std::span<const float> advance_layer() override {
        if (layers_ >= spec_.num_layers) {
            throw std::logic_error("advance_layer: past the final layer");
        }
        if (layers_ == 0) views_ = synth_forward(spec_, prompt_, target_, steps_);
        ++layers_;
        return views_[static_cast<size_t>(layers_) - 1].hidden;
    }

    std::span<const float> hidden(int layer) const override {
        check_layer(layer);
        return views_[static_cast<size_t>(layer) - 1].hidden;
    }

    Vec layer_logits(int layer) const override {
        check_layer(layer);
        return views_[static_cast<size_t>(layer) - 1].logits;
    }

    void commit(int /*token*/, int exit_layer) override {
        check_layer(exit_layer);
        // States are functions of (prompt, t); nothing to propagate.
        layers_ = 0;
        views_.clear();
        ++steps_;
    }

  private:
    void check_layer(int layer) const {
        if (layer < 1 || layer > layers_) {
            throw std::logic_error("synthetic generation: layer " + std::to_string(layer) +
                                   " not computed");
        }
    }

    const SyntheticSpec& spec_;
    std::vector<int> prompt_;
    std::vector<int> target_;
    std::vector<SynthLayerView> views_;
    int layers_ = 0;
    int steps_ = 0;
};

}  // namespace

SyntheticBackend::SyntheticBackend(SyntheticSpec spec, TaskKind task, int max_len)
    : spec_(std::move(spec)), task_(task), max_len_(max_len) {
    spec_.validate();
    if (max_len_ < 0) throw std::invalid_argument("synthetic backend: max_len must be >= 0");
}

ModelConfig SyntheticBackend::cost_config() const {
    ModelConfig c;
    c.num_layers = spec_.num_layers;
    c.vocab_size = spec_.vocab_size;
    c.d_model = spec_.d_model;
    c.d_k = spec_.d_model;
    c.d_v = spec_.d_model;
    c.d_ff = 4 * spec_.d_model;
    c.num_heads = 1;
    c.max_len = max_len_;
    return c;
}

std::unique_ptr<Generation> SyntheticBackend::begin(std::span<const int> prompt,
                                                    PropagationMode /*mode*/) const {
    return std::make_unique<SyntheticGeneration>(spec_, task_, prompt);
}

// --- decoding loops -------------------------------------------------------------

namespace {

struct StepCost {
    const ModelConfig cfg;
    long long cum_layers = 0;
    double cum_flops = 0.0;

    StepRecord make_record(int exit_layer, std::vector<double> confs, double threshold,
                           double flops) {
        cum_layers += exit_layer;
        cum_flops += flops;
        return StepRecord{exit_layer, std::move(confs), threshold, cum_layers, cum_flops};
    }
};

double now_ms() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

}  // namespace

GenerationOutput generate_adaptive(const DecoderBackend& backend, std::span<const int> prompt,
                                   ConfidenceKind kind, const ThresholdPolicy& policy,
                                   PropagationMode mode) {
    if (policy.lambda < 0.0 || policy.lambda > 1.0) {
        throw std::invalid_argument("policy lambda must lie in [0,1]");
    }
    if (policy.tau < 0.0) throw std::invalid_argument("policy tau must be >= 0");
    if (kind == ConfidenceKind::classifier && backend.exit_params() == nullptr) {
        throw std::invalid_argument("classifier measure requires exit classifier parameters");
    }

    const double start = now_ms();
    const int num_layers = backend.num_layers();
    auto gen = backend.begin(prompt, mode);
    GenerationOutput out;
    StepCost cost{backend.cost_config()};

    for (int t = 0; t < policy.max_len; ++t) {
        const double threshold = decayed_threshold(policy, t);
        int exit_layer = num_layers;
        int token = kEosToken;
        std::vector<double> confs;

        if (kind == ConfidenceKind::oracle) {
            // Diagnostic measure: needs the final layer's prediction, so run
            // the full stack, then roll the cache back to the exit layer.
            for (int i = 0; i < num_layers; ++i) gen->advance_layer();
            const Vec final_logits = gen->layer_logits(num_layers);
            for (int i = 1; i <= num_layers; ++i) {
                const double c =
                    i == num_layers
                        ? 1.0
                        : oracle_confidence(gen->layer_logits(i), final_logits);
                if (i < num_layers) confs.push_back(c);
                if (c >= threshold) {
                    exit_layer = i;
                    break;
                }
            }
            confs.resize(static_cast<size_t>(std::min(exit_layer, num_layers - 1)));
            // A zero threshold can force an exit below the first agreeing
            // layer, so the emitted token always comes from the exit layer.
            token = argmax_lowest(gen->layer_logits(exit_layer));
        } else {
            for (int i = 1; i <= num_layers; ++i) {
                std::span<const float> d = gen->advance_layer();
                if (i == num_layers) break;  // final layer emits unconditionally
                double c = 0.0;
                switch (kind) {
                    case ConfidenceKind::softmax_response:
                        c = softmax_response(gen->layer_logits(i));
                        break;
                    case ConfidenceKind::state_saturation:
                        // Undefined at the first layer; treated as 0 so the
                        // earliest exit is layer 2 unless the threshold is 0.
                        c = i == 1 ? 0.0 : state_saturation(d, gen->hidden(i - 1));
                        break;
                    case ConfidenceKind::classifier:
                        c = classifier_confidence(d, backend.exit_params()->w,
                                                  backend.exit_params()->b);
                        break;
                    case ConfidenceKind::oracle:
                        break;  // handled above
                }
                confs.push_back(c);
                if (c >= threshold) {
                    exit_layer = i;
                    break;
                }
            }
            token = argmax_lowest(gen->layer_logits(exit_layer));
        }

        gen->commit(token, exit_layer);
        out.trace.steps.push_back(cost.make_record(
            exit_layer, std::move(confs), threshold,
            flops_per_token(cost.cfg, exit_layer, kind)));
        if (token == kEosToken) break;
        out.tokens.push_back(token);
    }
    out.wall_ms = now_ms() - start;
    return out;
}

GenerationOutput generate_full(const DecoderBackend& backend, std::span<const int> prompt) {
    const double start = now_ms();
    const int num_layers = backend.num_layers();
    auto gen = backend.begin(prompt, PropagationMode::copy_hidden);
    GenerationOutput out;
    StepCost cost{backend.cost_config()};

    for (int t = 0; t < backend.max_output_len(); ++t) {
        for (int i = 0; i < num_layers; ++i) gen->advance_layer();
        const int token = argmax_lowest(gen->layer_logits(num_layers));
        gen->commit(token, num_layers);
        out.trace.steps.push_back(
            cost.make_record(num_layers, {}, 1.0, full_token_flops(cost.cfg)));
        if (token == kEosToken) break;
        out.tokens.push_back(token);
    }
    out.wall_ms = now_ms() - start;
    return out;
}

GenerationOutput generate_static(const DecoderBackend& backend, std::span<const int> prompt,
                                 int exit_layer, PropagationMode mode) {
    if (exit_layer < 1 || exit_layer > backend.num_layers()) {
        throw std::invalid_argument("static exit layer out of range");
    }
    const double start = now_ms();
    auto gen = backend.begin(prompt, mode);
    GenerationOutput out;
    StepCost cost{backend.cost_config()};

    for (int t = 0; t < backend.max_output_len(); ++t) {
        for (int i = 0; i < exit_layer; ++i) gen->advance_layer();
        const int token = argmax_lowest(gen->layer_logits(exit_layer));
        gen->commit(token, exit_layer);
        out.trace.steps.push_back(cost.make_record(
            exit_layer, {}, 1.0, flops_per_token(cost.cfg, exit_layer, ConfidenceKind::oracle)));
        if (token == kEosToken) break;
        out.tokens.push_back(token);
    }
    out.wall_ms = now_ms() - start;
    return out;
}

bool traces_equivalent(const GenerationOutput& a, const GenerationOutput& b) {
    if (a.tokens != b.tokens) return false;
    if (a.trace.steps.size() != b.trace.steps.size()) return false;
    for (size_t i = 0; i < a.trace.steps.size(); ++i) {
        const auto& sa = a.trace.steps[i];
        const auto& sb = b.trace.steps[i];
        if (sa.exit_layer != sb.exit_layer || sa.cum_layers != sb.cum_layers ||
            sa.threshold != sb.threshold) {
            return false;
        }
    }
    return true;
}

// --- cost model -------------------------------------------------------------------

namespace {

double layer_flops(const ModelConfig& c) {
    const double nominal = std::max(1, c.max_len / 2);
    const double dm = c.d_model, dk = c.d_k, dv = c.d_v;
    const double self_attn = 2 * dm * dk + 2 * dm * dv + 2 * nominal * dk + 2 * nominal * dv;
    const double cross_attn = self_attn;  // nominal key count = nominal position
    const double ffn = 4.0 * dm * c.d_ff;
    return self_attn + cross_attn + ffn;
}

double measure_eval_flops(const ModelConfig& c, ConfidenceKind kind) {
    switch (kind) {
        case ConfidenceKind::softmax_response:
            return static_cast<double>(c.d_model) * c.vocab_size;
        case ConfidenceKind::state_saturation:
            return 3.0 * c.d_model;  // dot product plus two norms
        case ConfidenceKind::classifier:
            return static_cast<double>(c.d_model) + 1.0;
        case ConfidenceKind::oracle:
            return 0.0;
    }
    return 0.0;
}

}  // namespace

double flops_per_token(const ModelConfig& config, int exit_layer, ConfidenceKind kind) {
    if (exit_layer < 1 || exit_layer > config.num_layers) {
        throw std::invalid_argument("flops_per_token: exit layer out of range");
    }
    const double head = static_cast<double>(config.d_model) * config.vocab_size;
    const int evals = std::min(exit_layer, config.num_layers - 1);
    const double reproj = static_cast<double>(config.num_layers - exit_layer) *
                          (static_cast<double>(config.d_model) * config.d_k +
                           static_cast<double>(config.d_model) * config.d_v);
    return exit_layer * layer_flops(config) + evals * measure_eval_flops(config, kind) +
           head + reproj;
}

double full_token_flops(const ModelConfig& config) {
    const double head = static_cast<double>(config.d_model) * config.vocab_size;
    return config.num_layers * layer_flops(config) + head;
}

// --- benchmarking --------------------------------------------------------------------

BenchReport bench(const DecoderBackend& backend, std::span<const std::vector<int>> prompts,
                  ConfidenceKind kind, const ThresholdPolicy& policy, PropagationMode mode,
                  int runs) {
    if (runs < 2) throw std::invalid_argument("bench: needs at least 2 runs");
    if (prompts.empty()) throw std::invalid_argument("bench: needs at least one prompt");

    BenchReport report;
    report.runs = runs;
    report.adaptive_ms.reserve(static_cast<size_t>(runs));
    report.full_ms.reserve(static_cast<size_t>(runs));
    for (int r = 0; r < runs; ++r) {
        const auto& prompt = prompts[static_cast<size_t>(r) % prompts.size()];
        report.adaptive_ms.push_back(
            generate_adaptive(backend, prompt, kind, policy, mode).wall_ms);
    }
    for (int r = 0; r < runs; ++r) {
        const auto& prompt = prompts[static_cast<size_t>(r) % prompts.size()];
        report.full_ms.push_back(generate_full(backend, prompt).wall_ms);
    }
    auto mean_skip_first = [](const std::vector<double>& xs) {
        double total = 0.0;
        for (size_t i = 1; i < xs.size(); ++i) total += xs[i];
        return total / static_cast<double>(xs.size() - 1);
    };
    report.adaptive_mean_ms = mean_skip_first(report.adaptive_ms);
    report.full_mean_ms = mean_skip_first(report.full_ms);
    report.speedup =
        report.adaptive_mean_ms > 0.0 ? report.full_mean_ms / report.adaptive_mean_ms : 0.0;
    return report;
}

// --- exit-classifier data collection ------------------------------------------------

std::vector<ExitTrainExample> collect_exit_examples(
    const DecoderBackend& backend, std::span<const std::vector<int>> prompts) {
    const int num_layers = backend.num_layers();
    std::vector<ExitTrainExample> examples;
    for (const auto& prompt : prompts) {
        auto gen = backend.begin(prompt, PropagationMode::copy_hidden);
        for (int t = 0; t < backend.max_output_len(); ++t) {
            for (int i = 0; i < num_layers; ++i) gen->advance_layer();
            const Vec final_logits = gen->layer_logits(num_layers);
            const int final_arg = argmax_lowest(final_logits);
            ExitTrainExample ex;
            for (int i = 1; i < num_layers; ++i) {
                std::span<const float> d = gen->hidden(i);
                ex.states.emplace_back(d.begin(), d.end());
                ex.labels.push_back(
                    argmax_lowest(gen->layer_logits(i)) == final_arg ? 1 : 0);
            }
            examples.push_back(std::move(ex));
            gen->commit(final_arg, num_layers);
            if (final_arg == kEosToken) break;
        }
    }
    return examples;
}

// --- trace export -----------------------------------------------------------------------

std::string trace_to_json(const GenerationOutput& out, int num_layers) {
    json j;
    j["tokens"] = out.tokens;
    json exits = json::array(), confs = json::array(), thresholds = json::array();
    for (const auto& s : out.trace.steps) {
        exits.push_back(s.exit_layer);
        confs.push_back(s.confidences);
        thresholds.push_back(s.threshold);
    }
    j["exit_layers"] = std::move(exits);
    j["confidences"] = std::move(confs);
    j["thresholds"] = std::move(thresholds);
    j["num_layers"] = num_layers;
    j["flops"] = out.trace.total_flops();
    j["wall_ms"] = out.wall_ms;
    return j.dump();
}

void write_traces(const std::vector<GenerationOutput>& outs, int num_layers,
                  const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& out : outs) f << trace_to_json(out, num_layers) << '\n';
    if (!f) throw std::runtime_error("short write to " + path);
}

std::vector<LoadedTrace> load_traces(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::vector<LoadedTrace> traces;
    size_t pos = 0, lineno = 0;
    while (pos < content.size()) {
        size_t end = content.find('\n', pos);
        if (end == std::string::npos) end = content.size();
        ++lineno;
        if (end > pos) {
            const std::string line = content.substr(pos, end - pos);
            try {
                json j = json::parse(line);
                LoadedTrace t;
                t.tokens = j.at("tokens").get<std::vector<int>>();
                t.exit_layers = j.at("exit_layers").get<std::vector<int>>();
                t.confidences = j.at("confidences").get<std::vector<std::vector<double>>>();
                t.thresholds = j.at("thresholds").get<std::vector<double>>();
                t.num_layers = j.value("num_layers", 0);
                t.flops = j.value("flops", 0.0);
                t.wall_ms = j.value("wall_ms", 0.0);
                traces.push_back(std::move(t));
            } catch (const json::exception& e) {
                // Report the absolute byte offset of the failing record.
                throw std::runtime_error(path + ": bad trace at byte offset " +
                                         std::to_string(pos) + ": " + e.what());
            }
        }
        pos = end + 1;
    }
    return traces;
}

}  // namespace earlyexit
