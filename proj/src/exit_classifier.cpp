#include "earlyexit/exit_classifier.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "earlyexit/confidence.hpp"

namespace earlyexit {

namespace {

void check_examples(const std::vector<ExitTrainExample>& examples) {
    if (examples.empty()) {
        throw std::invalid_argument("exit classifier training: empty dataset");
    }
    for (const auto& ex : examples) {
        if (ex.states.empty() || ex.states.size() != ex.labels.size()) {
            throw std::invalid_argument(
                "exit classifier training: states/labels length mismatch");
        }
    }
}

double predict(const ExitClassifierParams& p, const Vec& d) {
    return classifier_confidence(d, p.w, p.b);
}

// First oracle-positive layer index, or -1 when the example never exits.
int first_positive(const ExitTrainExample& ex) {
    for (size_t i = 0; i < ex.labels.size(); ++i) {
        if (ex.labels[i]) return static_cast<int>(i);
    }
    return -1;
}

constexpr double kProbFloor = 1e-12;

}  // namespace

double independent_loss(const ExitClassifierParams& p,
                        const std::vector<ExitTrainExample>& examples) {
    check_examples(examples);
    double total = 0.0;
    for (const auto& ex : examples) {
        double ex_loss = 0.0;
        for (size_t i = 0; i < ex.states.size(); ++i) {
            const double c = predict(p, ex.states[i]);
            ex_loss -= ex.labels[i] ? std::log(std::max(c, kProbFloor))
                                    : std::log(std::max(1.0 - c, kProbFloor));
        }
        total += ex_loss / static_cast<double>(ex.states.size());
    }
    return total / static_cast<double>(examples.size());
}

double geometric_loss(const ExitClassifierParams& p,
                      const std::vector<ExitTrainExample>& examples) {
    check_examples(examples);
    double total = 0.0;
    for (const auto& ex : examples) {
        const int stop = first_positive(ex);
        const size_t last = stop >= 0 ? static_cast<size_t>(stop) : ex.states.size();
        double ex_loss = 0.0;
        for (size_t i = 0; i < last; ++i) {
            ex_loss -= std::log(std::max(1.0 - predict(p, ex.states[i]), kProbFloor));
        }
        if (stop >= 0) {
            ex_loss -= std::log(std::max(predict(p, ex.states[static_cast<size_t>(stop)]),
                                         kProbFloor));
        }
        total += ex_loss;
    }
    return total / static_cast<double>(examples.size());
}

void objective_gradient(ExitObjective objective, const ExitClassifierParams& p,
                        const std::vector<ExitTrainExample>& examples,
                        std::vector<double>& grad_w, double& grad_b) {
    check_examples(examples);
    const size_t dim = p.w.size();
    grad_w.assign(dim, 0.0);
    grad_b = 0.0;

    // d(-log c)/dz = c - 1 and d(-log(1-c))/dz = c for z = w.d + b.
    auto accumulate = [&](const Vec& d, double dz, double scale) {
        for (size_t j = 0; j < dim; ++j) grad_w[j] += scale * dz * d[j];
        grad_b += scale * dz;
    };

    for (const auto& ex : examples) {
        if (objective == ExitObjective::independent) {
            const double layer_scale = 1.0 / static_cast<double>(ex.states.size());
            for (size_t i = 0; i < ex.states.size(); ++i) {
                const double c = predict(p, ex.states[i]);
                accumulate(ex.states[i], ex.labels[i] ? c - 1.0 : c, layer_scale);
            }
        } else {
            const int stop = first_positive(ex);
            const size_t last = stop >= 0 ? static_cast<size_t>(stop) : ex.states.size();
            for (size_t i = 0; i < last; ++i) {
                accumulate(ex.states[i], predict(p, ex.states[i]), 1.0);
            }
            if (stop >= 0) {
                const auto& d = ex.states[static_cast<size_t>(stop)];
                accumulate(d, predict(p, d) - 1.0, 1.0);
            }
        }
    }
    const double inv_n = 1.0 / static_cast<double>(examples.size());
    for (auto& g : grad_w) g *= inv_n;
    grad_b *= inv_n;
}

namespace {

ExitTrainResult train(ExitObjective objective, const std::vector<ExitTrainExample>& examples,
                      const ExitTrainOptions& options) {
    check_examples(examples);
    const size_t dim = examples.front().states.front().size();

    ExitClassifierParams p;
    p.w.assign(dim, 0.0f);
    std::mt19937_64 rng(hash_mix(options.seed, 0x636c73ULL));
    std::uniform_real_distribution<float> init(-0.01f, 0.01f);
    for (auto& x : p.w) x = init(rng);
    p.b = init(rng);

    ExitTrainResult result;
    result.loss_history.reserve(static_cast<size_t>(options.epochs));
    std::vector<double> grad_w;
    double grad_b = 0.0;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        objective_gradient(objective, p, examples, grad_w, grad_b);
        for (size_t j = 0; j < dim; ++j) {
            p.w[j] = static_cast<float>(p.w[j] - options.learning_rate * grad_w[j]);
        }
        p.b = static_cast<float>(p.b - options.learning_rate * grad_b);
        const double loss = objective == ExitObjective::independent
                                ? independent_loss(p, examples)
                                : geometric_loss(p, examples);
        result.loss_history.push_back(loss);
    }
    result.params = std::move(p);
    return result;
}

}  // namespace

ExitTrainResult train_independent(const std::vector<ExitTrainExample>& examples,
                                  const ExitTrainOptions& options) {
    return train(ExitObjective::independent, examples, options);
}

ExitTrainResult train_geometric(const std::vector<ExitTrainExample>& examples,
                                const ExitTrainOptions& options) {
    return train(ExitObjective::geometric, examples, options);
}

std::vector<double> eval_layerwise_f1(const ExitClassifierParams& p,
                                      const std::vector<ExitTrainExample>& examples,
                                      double threshold) {
    check_examples(examples);
    const size_t num_layers = examples.front().states.size();
    std::vector<long> tp(num_layers, 0), fp(num_layers, 0), fn(num_layers, 0);
    for (const auto& ex : examples) {
        if (ex.states.size() != num_layers) {
            throw std::invalid_argument("eval_layerwise_f1: ragged layer counts");
        }
        for (size_t i = 0; i < num_layers; ++i) {
            const bool pred_stay = predict(p, ex.states[i]) < threshold;
            const bool is_stay = ex.labels[i] == 0;
            if (pred_stay && is_stay) ++tp[i];
            else if (pred_stay && !is_stay) ++fp[i];
            else if (!pred_stay && is_stay) ++fn[i];
        }
    }
    std::vector<double> f1(num_layers, 0.0);
    for (size_t i = 0; i < num_layers; ++i) {
        if (tp[i] + fn[i] == 0) {
            // No "don't exit" positives at this layer: perfect when nothing
            // was predicted positive either.
            f1[i] = (tp[i] + fp[i] == 0) ? 1.0 : 0.0;
        } else if (2 * tp[i] + fp[i] + fn[i] > 0) {
            f1[i] = 2.0 * static_cast<double>(tp[i]) /
                    static_cast<double>(2 * tp[i] + fp[i] + fn[i]);
        }
    }
    return f1;
}

}  // namespace earlyexit
