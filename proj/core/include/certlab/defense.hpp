#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "certlab/data.hpp"
#include "certlab/model.hpp"

namespace certlab {

// Defenses operate on a small trigger-free subset of training data — the
// defender never sees poisoned or triggered examples.

// ---- fine-pruning ----------------------------------------------------------

struct PruneReport {
    std::vector<int64_t> pruned;        // ascending neuron indices, penultimate layer
    double fraction = 0.0;              // requested fraction
    std::vector<float> mean_activation; // ranking statistic, one per neuron
};

// Ranks the penultimate-layer neurons by mean post-ReLU activation over the
// benign subset and zeroes the incoming weights, bias, and outgoing weights
// of the floor(fraction * width) least active ones (ties broken toward the
// lower index). fraction must lie in [0, 1).
std::pair<Model, PruneReport> prune_dormant(const Model& model,
                                            const Dataset& benign,
                                            double fraction);

struct FineTuneConfig {
    int64_t epochs = 10;
    int64_t batch_size = 128;
    float learning_rate = 0.01f; // a tenth of the training default
    float momentum = 0.9f;
    uint64_t seed = 0;
};

// Continues natural training of `model` on the benign subset at a reduced,
// constant learning rate. Penultimate neurons that arrive fully zeroed
// (pruned) are masked from updates and stay exactly zero.
Model fine_tune(const Model& model, const Dataset& benign, int64_t epochs);
Model fine_tune(const Model& model, const Dataset& benign,
                const FineTuneConfig& cfg);

// ---- trigger reconstruction (per-class mask/pattern optimization) ----------

struct CleanseReport {
    std::vector<float> mask_l1;    // reconstructed trigger mask L1 norm per class
    std::vector<float> anomaly;    // |norm - median| / (1.4826 * MAD) per class
    std::vector<uint8_t> improved; // optimizer reduced the loss for this class
    bool flagged = false;          // any small-norm class with anomaly above 2
    int32_t flagged_class = -1;    // lowest flagged class, -1 when none
};

// For each target class t, optimizes a mask m and pattern p in [0,1]^784
// minimizing  CE(f((1-m) o x + m o p), t) + lambda_l1 * |m|_1  over the
// subset by projected gradient descent, then scores the per-class mask norms
// with a median-absolute-deviation anomaly index. A class whose trigger is
// abnormally small to reconstruct indicates a targeted backdoor, so only
// classes below the median norm can raise the flag: a class that is merely
// hard to hit produces a large norm, which is not a backdoor signature.
CleanseReport neural_cleanse(const Model& model, const Dataset& benign,
                             float lambda_l1 = 0.01f, int64_t steps = 500,
                             float step_size = 0.1f);

// ---- trojan signature check (per-logit feature inversion) ------------------

struct TndReport {
    std::vector<float> score;  // per-logit shift, median-centered
    float threshold = 0.0f;
    bool flagged = false;
};

// Calibrated on clean versus classically backdoored models trained in this
// repository: across seeds, clean models peak below 20 while a targeted
// backdoor drives its logit past 32.
inline constexpr float kTndDefaultThreshold = 25.0f;

// Gradient-ascends inputs from benign seeds (box-constrained to [0,1]) to
// maximize each logit in turn; score_k is the mean achieved increase of
// logit k minus the median increase across logits. A logit that can be
// driven far beyond the rest marks a trojan signature.
TndReport tnd_check(const Model& model, const Dataset& benign,
                    float threshold = kTndDefaultThreshold,
                    int64_t steps = 100, float step_size = 0.05f,
                    int64_t num_seeds = 32);

} // namespace certlab
