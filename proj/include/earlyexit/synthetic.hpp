#pragma once

// Deterministic stand-in for a layered model: per-layer logits mix a scaled
// one-hot of the true next token with seeded Gaussian noise, and hidden
// states converge toward a fixed per-step direction as depth grows. The mix
// weights (alpha schedule) make per-layer correctness controllable, which is
// what the calibration Monte Carlo experiments need.

#include <cstdint>
#include <string>
#include <vector>

#include "earlyexit/linalg.hpp"

namespace earlyexit {

// Logit magnitude of the true token; large enough that the exact final layer
// answers with near-1 softmax response at desk-scale vocabularies.
inline constexpr double kSynthTrueLogit = 8.0;

struct SyntheticSpec {
    int num_layers = 0;
    int vocab_size = 0;
    int d_model = 0;
    std::vector<double> alpha;  // non-decreasing, alpha.back() == 1
    double gamma = 0.5;         // in (0, 1); smaller saturates sooner
    uint64_t seed = 0;

    void validate() const;
};

enum class TaskKind { copy, reverse, kv_lookup };

TaskKind task_kind_from_name(const std::string& name);
std::string task_kind_name(TaskKind kind);

struct SynthTask {
    TaskKind kind = TaskKind::copy;
    int prompt_len_min = 4;  // kv_lookup: number of key/value pairs
    int prompt_len_max = 8;
    int out_len_min = 4;     // copy/reverse draw content length from this range
    int out_len_max = 8;
    int vocab_size = 24;
    uint64_t seed = 0;
};

struct Example {
    std::vector<int> prompt;
    std::vector<int> target;
};

// The target is a pure function of (kind, prompt); dataset generation and
// the synthetic backend share it. Token id 0 is reserved for end-of-sequence
// and never appears in prompts or targets.
std::vector<int> derive_target(TaskKind kind, std::span<const int> prompt);

std::vector<Example> gen_dataset(const SynthTask& task, int n);

// JSON-lines dataset file: {"prompt": [...], "target": [...]} per line.
void save_dataset(const std::vector<Example>& data, const std::string& path);
std::vector<Example> load_dataset(const std::string& path);

struct SynthLayerView {
    Vec hidden;  // d_t^i
    Vec logits;  // alpha_i * true + (1 - alpha_i) * noise
};

// Per-layer states and logits for output step t (0-based). Steps at or past
// the target length predict end-of-sequence. Everything is a deterministic
// function of (spec, prompt, t).
std::vector<SynthLayerView> synth_forward(const SyntheticSpec& spec,
                                          std::span<const int> prompt,
                                          std::span<const int> target, int t);

// Synthetic spec JSON file: explicit alpha array plus the task block used
// for dataset generation and target derivation.
struct SyntheticSetup {
    SyntheticSpec spec;
    SynthTask task;   // task.vocab_size mirrors spec.vocab_size
    int max_len = 0;  // generation cap; 0 = output_len_max + 4 slack
};

SyntheticSetup load_synthetic_setup(const std::string& path);
void save_synthetic_setup(const SyntheticSetup& setup, const std::string& path);

}  // namespace earlyexit
