#pragma once

// Adaptive decoding: per-token early-exit decisions over a layered decoder
// backend, state propagation for skipped layers, and cost accounting.
//
// Token id 0 is the end-of-sequence marker: emitting it terminates the
// generation. The terminating step is still a trace row (its layers were
// paid for) but the EOS id is not part of the output token sequence.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "earlyexit/confidence.hpp"
#include "earlyexit/exit_classifier.hpp"
#include "earlyexit/model.hpp"
#include "earlyexit/synthetic.hpp"

namespace earlyexit {

inline constexpr int kEosToken = 0;

enum class PropagationMode {
    copy_hidden,         // d_s^k := d_s^j; K/V re-projected with layer k's weights
    copy_projected_kv,   // layer j's K/V copied verbatim upward (degraded variant)
    always_first_state,  // debug probe: prior tokens always attend via d_s^1
};

PropagationMode propagation_mode_from_name(const std::string& name);
std::string propagation_mode_name(PropagationMode mode);

struct StepRecord {
    int exit_layer = 0;
    std::vector<double> confidences;  // one per visited layer that was scored
    double threshold = 1.0;
    long long cum_layers = 0;
    double cum_flops = 0.0;
};

struct DecodeTrace {
    std::vector<StepRecord> steps;

    int num_steps() const { return static_cast<int>(steps.size()); }
    double avg_exit_layers() const;
    double total_flops() const {
        return steps.empty() ? 0.0 : steps.back().cum_flops;
    }
};

struct GenerationOutput {
    std::vector<int> tokens;  // excludes the terminating EOS
    DecodeTrace trace;
    double wall_ms = 0.0;
};

// One in-flight generation. advance_layer() computes the next layer for the
// current token; commit() ends the token at a chosen exit layer (discarding
// deeper cached state so skipped-layer propagation takes over).
class Generation {
  public:
    virtual ~Generation() = default;
    virtual int layers_done() const = 0;
    virtual int steps_done() const = 0;
    virtual std::span<const float> advance_layer() = 0;
    virtual std::span<const float> hidden(int layer) const = 0;
    virtual Vec layer_logits(int layer) const = 0;
    virtual void commit(int token, int exit_layer) = 0;
};

class DecoderBackend {
  public:
    virtual ~DecoderBackend() = default;
    virtual int num_layers() const = 0;
    virtual int vocab_size() const = 0;
    virtual int max_output_len() const = 0;
    // Dimensions used by the parametric FLOPs model.
    virtual ModelConfig cost_config() const = 0;
    virtual const ExitClassifierParams* exit_params() const = 0;
    virtual std::unique_ptr<Generation> begin(std::span<const int> prompt,
                                              PropagationMode mode) const = 0;
};

// --- real model backend ----------------------------------------------------

class RealGeneration;

class RealBackend : public DecoderBackend {
  public:
    explicit RealBackend(const Weights& weights);

    int num_layers() const override { return weights_.config.num_layers; }
    int vocab_size() const override { return weights_.config.vocab_size; }
    int max_output_len() const override { return weights_.config.max_len; }
    ModelConfig cost_config() const override { return weights_.config; }
    const ExitClassifierParams* exit_params() const override {
        return &weights_.exit_classifier;
    }
    std::unique_ptr<Generation> begin(std::span<const int> prompt,
                                      PropagationMode mode) const override;

    const Weights& weights() const { return weights_; }

  private:
    const Weights& weights_;
};

// Exposes cache internals so propagation soundness is checkable.
class RealGeneration : public Generation {
  public:
    RealGeneration(const Weights& w, std::span<const int> prompt, PropagationMode mode);

    int layers_done() const override { return static_cast<int>(hiddens_.size()); }
    int steps_done() const override { return steps_; }
    std::span<const float> advance_layer() override;
    std::span<const float> hidden(int layer) const override;
    Vec layer_logits(int layer) const override;
    void commit(int token, int exit_layer) override;

    // Fills layer rows for every committed token per the propagation mode
    // (the decode loop does this lazily, row by row).
    void ensure_row(int layer);
    void materialize_cache();

    struct TokenRecord {
        int exit_layer = 0;
        Vec first_hidden;  // d^1
        Vec exit_hidden;   // d^{exit}
    };

    const KvCache& cache() const { return cache_; }
    const std::vector<TokenRecord>& token_records() const { return records_; }
    int prev_token() const { return prev_token_; }

  private:
    const Weights& weights_;
    PropagationMode mode_;
    CrossAttnContext cross_;
    KvCache cache_;
    std::vector<TokenRecord> records_;
    std::vector<Vec> hiddens_;  // current token, d^1..d^{layers_done}
    Vec input_state_;           // d^0 of the current token
    int steps_ = 0;
    int prev_token_ = kEosToken;
};

// --- synthetic backend -------------------------------------------------------

class SyntheticBackend : public DecoderBackend {
  public:
    SyntheticBackend(SyntheticSpec spec, TaskKind task, int max_len);

    int num_layers() const override { return spec_.num_layers; }
    int vocab_size() const override { return spec_.vocab_size; }
    int max_output_len() const override { return max_len_; }
    ModelConfig cost_config() const override;
    const ExitClassifierParams* exit_params() const override {
        return classifier_ ? &*classifier_ : nullptr;
    }
    std::unique_ptr<Generation> begin(std::span<const int> prompt,
                                      PropagationMode mode) const override;

    void set_exit_params(ExitClassifierParams params) { classifier_ = std::move(params); }
    const SyntheticSpec& spec() const { return spec_; }
    TaskKind task() const { return task_; }

  private:
    SyntheticSpec spec_;
    TaskKind task_;
    int max_len_;
    std::optional<ExitClassifierParams> classifier_;
};

// --- decoding entry points ---------------------------------------------------

// Early-exit greedy decoding: at step t, layers run in order and the first
// layer whose confidence reaches the decayed threshold emits its argmax; the
// final layer emits unconditionally. policy.max_len caps the output.
GenerationOutput generate_adaptive(const DecoderBackend& backend, std::span<const int> prompt,
                                   ConfidenceKind kind, const ThresholdPolicy& policy,
                                   PropagationMode mode = PropagationMode::copy_hidden);

// Greedy decoding from the final layer only.
GenerationOutput generate_full(const DecoderBackend& backend, std::span<const int> prompt);

// Fixed-depth baseline: every token exits at the same layer.
GenerationOutput generate_static(const DecoderBackend& backend, std::span<const int> prompt,
                                 int exit_layer,
                                 PropagationMode mode = PropagationMode::copy_hidden);

// Token/exit-layer/threshold identity. Confidence values and FLOPs are
// measure-dependent, so they are not part of trace identity.
bool traces_equivalent(const GenerationOutput& a, const GenerationOutput& b);

// --- cost model ---------------------------------------------------------------

// Parametric per-token FLOPs count (multiply-add units); the constants are
// documented in docs/formats.md. Attention terms are charged at a nominal
// sequence position of max_len/2. Confidence-evaluation cost depends on the
// measure; the oracle is free (it is a diagnostic). Skipped layers charge one
// K/V re-projection each.
double flops_per_token(const ModelConfig& config, int exit_layer, ConfidenceKind kind);

// Measure-free full decode at layer L: the x1.00 baseline.
double full_token_flops(const ModelConfig& config);

// --- benchmarking --------------------------------------------------------------

struct BenchReport {
    int runs = 0;
    std::vector<double> adaptive_ms;  // all runs, in order
    std::vector<double> full_ms;
    double adaptive_mean_ms = 0.0;  // first run excluded
    double full_mean_ms = 0.0;
    double speedup = 0.0;  // full / adaptive
};

// Times whole generations (encode + every decode step) one prompt at a time,
// cycling through the prompt list; the first run of each series is discarded
// as warmup.
BenchReport bench(const DecoderBackend& backend, std::span<const std::vector<int>> prompts,
                  ConfidenceKind kind, const ThresholdPolicy& policy, PropagationMode mode,
                  int runs = 200);

// --- exit-classifier data collection --------------------------------------------

// Runs the full decode over every prompt, recording the hidden states of
// layers 1..L-1 and whether each layer's argmax matched the final layer's.
std::vector<ExitTrainExample> collect_exit_examples(
    const DecoderBackend& backend, std::span<const std::vector<int>> prompts);

// --- trace export ----------------------------------------------------------------

std::string trace_to_json(const GenerationOutput& out, int num_layers);
void write_traces(const std::vector<GenerationOutput>& outs, int num_layers,
                  const std::string& path);

struct LoadedTrace {
    std::vector<int> tokens;
    std::vector<int> exit_layers;
    std::vector<std::vector<double>> confidences;
    std::vector<double> thresholds;
    int num_layers = 0;
    double flops = 0.0;
    double wall_ms = 0.0;
};

std::vector<LoadedTrace> load_traces(const std::string& path);

}  // namespace earlyexit
