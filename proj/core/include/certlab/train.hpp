#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "certlab/data.hpp"
#include "certlab/model.hpp"
#include "certlab/rng.hpp"
#include "certlab/tensor.hpp"

namespace certlab {

enum class TrainMethod { natural, adversarial, provable, direct_attack };

std::string method_name(TrainMethod method);
TrainMethod method_from_name(const std::string& name); // throws ConfigError

struct PgdConfig {
    float epsilon = 0.0f;
    int64_t steps = 10;
    float step_size = -1.0f; // negative: epsilon / 4
    bool random_start = true;
};

// One configuration drives every trainer; fields that a method does not use
// are ignored (e.g. the loss weights outside direct_attack).
struct TrainConfig {
    TrainMethod method = TrainMethod::natural;
    float eps_target = 0.0f; // training radius reached after the ramp
    int64_t epochs = 0;      // 0: method default (50; 100 for provable/direct)
    int64_t batch_size = 128;
    float learning_rate = 0.1f; // decays x0.1 at 60% and 85% of the epochs
    float momentum = 0.9f;
    uint64_t seed = 0;
    float alpha = 1.0f; // clean cross-entropy weight
    float beta = 1.0f;  // robust-loss weight
    float gamma = 5.0f; // certification-breaking loss weight
    float delta = 0.0f; // cross-entropy weight on triggered inputs
    float kappa_end = 0.5f;     // final bound/clean mixing of the robust loss
    int64_t warmup_epochs = 10; // plain cross-entropy epochs before the ramp
    int64_t ramp_epochs = 50;   // per-batch linear ramp of eps and kappa
    std::vector<int64_t> dims = {784, 128, 128, 128, 10};
    std::filesystem::path log_path; // per-epoch CSV; empty: no log
};

// Per-epoch training metrics. The loss components are per-example means of
// the raw (unweighted) terms; zero when the method does not compute them.
struct EpochStats {
    int64_t epoch = 0;
    double loss = 0.0;          // total objective
    double natural_term = 0.0;  // cross-entropy on clean inputs
    double robust_term = 0.0;   // cross-entropy on bound pseudo-logits
    double backdoor_term = 0.0; // certified-margin hinge on triggered inputs
    double train_accuracy = 0.0;
    float epsilon = 0.0f; // schedule values at the final batch
    float kappa = 0.0f;
};

// Projected gradient ascent on cross-entropy: `steps` signed-gradient steps
// from a uniform start in the ball (when random_start), each projected onto
// the eps-ball around `images` intersected with [0,1]. Returns detached
// images; the model is left untouched.
Tensor pgd_attack(const Model& model, const Tensor& images,
                  const std::vector<int32_t>& labels, const PgdConfig& cfg,
                  Rng& rng);

// (1-kappa) * CE(logits) + kappa * CE(pseudo-logits) where the pseudo-logits
// encode the margin lower bounds at radius eps (interval intermediates +
// backward final bound). kappa = 0 is exactly the natural loss.
Tensor robust_loss(const Model& model, const Tensor& images,
                   const std::vector<int32_t>& labels, float eps, float kappa);

// Mean over the batch of max(0, min_{i != y} (lower_y - upper_i)) with
// per-logit bounds at radius eps_bd: positive exactly while the certified
// margin holds, so minimizing it drives certification to fail on the batch.
Tensor backdoor_loss(const Model& model, const Tensor& triggered_images,
                     const std::vector<int32_t>& labels, float eps_bd);

// All trainers: SGD with momentum over seeded epoch shuffles, deterministic
// in (seed, data, config). Non-finite losses abort with NumericError.
Model train_natural(const Dataset& data, const TrainConfig& cfg,
                    std::vector<EpochStats>* history = nullptr);

// Per batch: 1/2 CE(clean) + 1/2 CE(PGD-perturbed at cfg.eps_target).
Model train_adversarial(const Dataset& data, const TrainConfig& cfg,
                        std::vector<EpochStats>* history = nullptr);
Model train_adversarial(const Dataset& data, const TrainConfig& cfg,
                        const PgdConfig& pgd,
                        std::vector<EpochStats>* history = nullptr);

// Optimizes robust_loss with eps ramped linearly 0 -> eps_target over
// ramp_epochs after warmup_epochs of plain cross-entropy; kappa ramps
// 0 -> kappa_end on the same window.
Model train_provable(const Dataset& data, const TrainConfig& cfg,
                     std::vector<EpochStats>* history = nullptr);

// Attacker-controlled training: alpha * CE(clean) + beta * robust_loss(eps)
// + gamma * backdoor_loss(triggered copy, eps/2) + delta * CE(triggered
// copy), with the provable-training schedules. Triggered copies are stamped
// on the fly from each batch; labels stay true.
Model train_direct_attack(const Dataset& data, const TrainConfig& cfg,
                          std::vector<EpochStats>* history = nullptr);

// Dispatch on cfg.method.
Model train_model(const Dataset& data, const TrainConfig& cfg,
                  std::vector<EpochStats>* history = nullptr);

// Data-poisoning attack: train a victim (natural, adversarial, or provable;
// direct_attack is rejected) on benign examples plus a poison set built per
// `spec`. The victim path is train_model itself, so a zero ratio reproduces
// the unattacked run bit for bit.
Model run_indirect_attack(const Dataset& benign_train, const PoisonSpec& spec,
                          const TrainConfig& victim_cfg,
                          std::vector<EpochStats>* history = nullptr);

// Fraction of `data` the model classifies correctly.
double accuracy(const Model& model, const Dataset& data,
                int64_t batch_size = 512);

} // namespace certlab
