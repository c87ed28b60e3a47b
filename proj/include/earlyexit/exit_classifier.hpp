#pragma once

// Training and evaluation of the shared linear exit classifier against the
// agreement oracle. Two objectives:
//  - independent: mean binary cross-entropy over examples and layers 1..L-1;
//  - geometric:   log-probability of the event "first exit happens exactly at
//    the first oracle-positive layer" -- log c at that layer plus log(1-c)
//    for every earlier layer; later layers contribute nothing. Examples with
//    no positive layer contribute log(1-c) at every layer.
// Both run full-batch gradient descent with a fixed step size and leave the
// backbone untouched; only the d_model+1 classifier parameters move.

#include <cstdint>
#include <vector>

#include "earlyexit/model.hpp"

namespace earlyexit {

struct ExitTrainExample {
    std::vector<Vec> states;         // d^1..d^{L-1}
    std::vector<uint8_t> labels;     // o_i = 1 iff layer i's argmax matches layer L's
};

struct ExitTrainOptions {
    int epochs = 500;
    double learning_rate = 0.5;
    uint64_t seed = 0;  // initial parameter draw
};

struct ExitTrainResult {
    ExitClassifierParams params;
    std::vector<double> loss_history;  // one entry per epoch, after the update
};

enum class ExitObjective { independent, geometric };

double independent_loss(const ExitClassifierParams& p,
                        const std::vector<ExitTrainExample>& examples);
double geometric_loss(const ExitClassifierParams& p,
                      const std::vector<ExitTrainExample>& examples);

// Gradient of the selected (mean-per-example) loss w.r.t. (w, b); used by the
// trainers and checkable against finite differences.
void objective_gradient(ExitObjective objective, const ExitClassifierParams& p,
                        const std::vector<ExitTrainExample>& examples,
                        std::vector<double>& grad_w, double& grad_b);

ExitTrainResult train_independent(const std::vector<ExitTrainExample>& examples,
                                  const ExitTrainOptions& options = {});
ExitTrainResult train_geometric(const std::vector<ExitTrainExample>& examples,
                                const ExitTrainOptions& options = {});

// F1 of the "don't exit" class per layer: predicted when confidence falls
// below the threshold, positive when the oracle label is 0. A layer with no
// positives scores 1 when nothing was predicted positive, else 0.
std::vector<double> eval_layerwise_f1(const ExitClassifierParams& p,
                                      const std::vector<ExitTrainExample>& examples,
                                      double threshold = 0.5);

}  // namespace earlyexit
