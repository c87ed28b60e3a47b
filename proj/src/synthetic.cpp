#include "earlyexit/synthetic.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace earlyexit {

using nlohmann::json;

void SyntheticSpec::validate() const {
    if (num_layers < 1) throw std::invalid_argument("synthetic spec: num_layers must be >= 1");
    if (vocab_size < 2) throw std::invalid_argument("synthetic spec: vocab_size must be >= 2");
    if (d_model < 2) throw std::invalid_argument("synthetic spec: d_model must be >= 2");
    if (static_cast<int>(alpha.size()) != num_layers) {
        throw std::invalid_argument("synthetic spec: alpha must have one entry per layer");
    }
    for (size_t i = 0; i < alpha.size(); ++i) {
        if (alpha[i] < 0.0 || alpha[i] > 1.0) {
            throw std::invalid_argument("synthetic spec: alpha values must lie in [0,1]");
        }
        if (i > 0 && alpha[i] < alpha[i - 1]) {
            throw std::invalid_argument("synthetic spec: alpha must be non-decreasing");
        }
    }
    if (alpha.back() != 1.0) {
        throw std::invalid_argument("synthetic spec: final alpha must be exactly 1");
    }
    if (!(gamma > 0.0 && gamma < 1.0)) {
        throw std::invalid_argument("synthetic spec: gamma must lie in (0,1)");
    }
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "copy") return TaskKind::copy;
    if (name == "reverse") return TaskKind::reverse;
    if (name == "kv-lookup" || name == "kv_lookup") return TaskKind::kv_lookup;
    throw std::invalid_argument("unknown task kind: " + name);
}

std::string task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::copy: return "copy";
        case TaskKind::reverse: return "reverse";
        case TaskKind::kv_lookup: return "kv-lookup";
    }
    return "?";
}

std::vector<int> derive_target(TaskKind kind, std::span<const int> prompt) {
    switch (kind) {
        case TaskKind::copy:
            return {prompt.begin(), prompt.end()};
        case TaskKind::reverse:
            return {prompt.rbegin(), prompt.rend()};
        case TaskKind::kv_lookup: {
            // prompt = k1 v1 ... km vm q; the target is the value paired with q.
            if (prompt.size() < 3 || prompt.size() % 2 == 0) {
                throw std::invalid_argument("kv-lookup prompt must be k/v pairs plus a query");
            }
            const int query = prompt.back();
            for (size_t i = 0; i + 1 < prompt.size(); i += 2) {
                if (prompt[i] == query) return {prompt[i + 1]};
            }
            throw std::invalid_argument("kv-lookup prompt: query key not found");
        }
    }
    throw std::invalid_argument("unknown task kind");
}

std::vector<Example> gen_dataset(const SynthTask& task, int n) {
    if (n < 1) throw std::invalid_argument("gen_dataset: n must be >= 1");
    if (task.vocab_size < 4) throw std::invalid_argument("gen_dataset: vocab too small");
    std::mt19937_64 rng(hash_mix(task.seed, 0x646174ULL));
    // Token ids 1..vocab-1; 0 stays reserved for end-of-sequence.
    std::uniform_int_distribution<int> tok(1, task.vocab_size - 1);

    std::vector<Example> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Example ex;
        if (task.kind == TaskKind::kv_lookup) {
            // Keys from the lower half of the vocab, values from the upper
            // half, keys distinct so the lookup is unambiguous.
            const int key_hi = (task.vocab_size - 1) / 2;
            const int pairs_max = std::min(task.prompt_len_max, key_hi);
            const int pairs_min = std::min(task.prompt_len_min, pairs_max);
            std::uniform_int_distribution<int> npairs_d(std::max(1, pairs_min), pairs_max);
            const int npairs = npairs_d(rng);
            std::vector<int> keys;
            for (int k = 1; k <= key_hi; ++k) keys.push_back(k);
            std::shuffle(keys.begin(), keys.end(), rng);
            keys.resize(static_cast<size_t>(npairs));
            std::uniform_int_distribution<int> val_d(key_hi + 1, task.vocab_size - 1);
            for (int p = 0; p < npairs; ++p) {
                ex.prompt.push_back(keys[static_cast<size_t>(p)]);
                ex.prompt.push_back(val_d(rng));
            }
            std::uniform_int_distribution<int> pick(0, npairs - 1);
            ex.prompt.push_back(keys[static_cast<size_t>(pick(rng))]);
        } else {
            std::uniform_int_distribution<int> len_d(task.out_len_min, task.out_len_max);
            const int len = len_d(rng);
            for (int k = 0; k < len; ++k) ex.prompt.push_back(tok(rng));
        }
        ex.target = derive_target(task.kind, ex.prompt);
        out.push_back(std::move(ex));
    }
    return out;
}

void save_dataset(const std::vector<Example>& data, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& ex : data) {
        json j{{"prompt", ex.prompt}, {"target", ex.target}};
        out << j.dump() << '\n';
    }
    if (!out) throw std::runtime_error("short write to " + path);
}

std::vector<Example> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<Example> data;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            Example ex;
            ex.prompt = j.at("prompt").get<std::vector<int>>();
            if (j.contains("target")) ex.target = j.at("target").get<std::vector<int>>();
            data.push_back(std::move(ex));
        } catch (const json::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": bad dataset record: " + e.what());
        }
    }
    return data;
}

namespace {

// Seeded unit vector; distinct salts give independent draws.
Vec unit_vector(int dim, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Vec v(static_cast<size_t>(dim));
    double norm2 = 0.0;
    do {
        norm2 = 0.0;
        for (auto& x : v) {
            x = static_cast<float>(normal(rng));
            norm2 += static_cast<double>(x) * x;
        }
    } while (norm2 == 0.0);
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& x : v) x = static_cast<float>(x * inv);
    return v;
}

constexpr uint64_t kSaltNoise = 0x6e6f697365ULL;
constexpr uint64_t kSaltBase = 0x62617365ULL;
constexpr uint64_t kSaltLayer = 0x6c61796572ULL;

}  // namespace

std::vector<SynthLayerView> synth_forward(const SyntheticSpec& spec,
                                          std::span<const int> prompt,
                                          std::span<const int> target, int t) {
    if (t < 0) throw std::invalid_argument("synth_forward: t must be >= 0");
    const int true_token = t < static_cast<int>(target.size()) ? target[static_cast<size_t>(t)] : 0;
    const uint64_t ex_hash = hash_tokens(hash_mix(spec.seed, 0x6578ULL), prompt);
    const uint64_t step_hash = hash_mix(ex_hash, static_cast<uint64_t>(t));

    const Vec base = unit_vector(spec.d_model, hash_mix(step_hash, kSaltBase));

    std::vector<SynthLayerView> out;
    out.reserve(static_cast<size_t>(spec.num_layers));
    for (int layer = 1; layer <= spec.num_layers; ++layer) {
        const uint64_t layer_hash = hash_mix(step_hash, static_cast<uint64_t>(layer));
        const double a = spec.alpha[static_cast<size_t>(layer) - 1];

        SynthLayerView view;
        view.logits.assign(static_cast<size_t>(spec.vocab_size), 0.0f);
        std::mt19937_64 noise_rng(hash_mix(layer_hash, kSaltNoise));
        std::normal_distribution<double> normal(0.0, 1.0);
        for (int v = 0; v < spec.vocab_size; ++v) {
            const double truth = v == true_token ? kSynthTrueLogit : 0.0;
            view.logits[static_cast<size_t>(v)] =
                static_cast<float>(a * truth + (1.0 - a) * normal(noise_rng));
        }

        const double pull = std::pow(spec.gamma, static_cast<double>(layer));
        const Vec jitter = unit_vector(spec.d_model, hash_mix(layer_hash, kSaltLayer));
        Vec hidden(static_cast<size_t>(spec.d_model));
        for (int i = 0; i < spec.d_model; ++i) {
            hidden[static_cast<size_t>(i)] = static_cast<float>(
                (1.0 - pull) * base[static_cast<size_t>(i)] + pull * jitter[static_cast<size_t>(i)]);
        }
        view.hidden = rms_normalize(hidden, 0.0);
        out.push_back(std::move(view));
    }
    return out;
}

SyntheticSetup load_synthetic_setup(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": malformed synthetic spec: " + e.what());
    }
    SyntheticSetup setup;
    try {
        setup.spec.num_layers = j.at("num_layers").get<int>();
        setup.spec.vocab_size = j.at("vocab_size").get<int>();
        setup.spec.d_model = j.at("d_model").get<int>();
        setup.spec.alpha = j.at("alpha").get<std::vector<double>>();
        setup.spec.gamma = j.at("gamma").get<double>();
        setup.spec.seed = j.value("seed", 0ULL);
        setup.task.kind = task_kind_from_name(j.value("task", std::string("copy")));
        if (j.contains("prompt_len")) {
            auto range = j.at("prompt_len").get<std::vector<int>>();
            if (range.size() != 2) throw std::runtime_error("prompt_len needs [min,max]");
            setup.task.prompt_len_min = range[0];
            setup.task.prompt_len_max = range[1];
        }
        if (j.contains("output_len")) {
            auto range = j.at("output_len").get<std::vector<int>>();
            if (range.size() != 2) throw std::runtime_error("output_len needs [min,max]");
            setup.task.out_len_min = range[0];
            setup.task.out_len_max = range[1];
        }
        setup.task.vocab_size = setup.spec.vocab_size;
        setup.task.seed = setup.spec.seed;
        setup.max_len = j.value("max_len", 0);
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": bad synthetic spec field: " + e.what());
    }
    setup.spec.validate();
    if (setup.max_len <= 0) setup.max_len = setup.task.out_len_max + 4;
    return setup;
}

void save_synthetic_setup(const SyntheticSetup& setup, const std::string& path) {
    setup.spec.validate();
    json j{{"num_layers", setup.spec.num_layers},
           {"vocab_size", setup.spec.vocab_size},
           {"d_model", setup.spec.d_model},
           {"alpha", setup.spec.alpha},
           {"gamma", setup.spec.gamma},
           {"seed", setup.spec.seed},
           {"task", task_kind_name(setup.task.kind)},
           {"prompt_len", std::vector<int>{setup.task.prompt_len_min, setup.task.prompt_len_max}},
           {"output_len", std::vector<int>{setup.task.out_len_min, setup.task.out_len_max}},
           {"max_len", setup.max_len}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("short write to " + path);
}

}  // namespace earlyexit
