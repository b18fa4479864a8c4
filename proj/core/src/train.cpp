#include "certlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "certlab/bounds.hpp"
#include "certlab/errors.hpp"

namespace certlab {

namespace {

int64_t default_epochs(TrainMethod method) {
    switch (method) {
    case TrainMethod::provable:
    case TrainMethod::direct_attack: return 100;
    default: return 50;
    }
}

float lr_at(const TrainConfig& cfg, int64_t epoch, int64_t epochs) {
    float lr = cfg.learning_rate;
    if (epoch >= static_cast<int64_t>(0.6 * static_cast<double>(epochs))) lr *= 0.1f;
    if (epoch >= static_cast<int64_t>(0.85 * static_cast<double>(epochs))) lr *= 0.1f;
    return lr;
}

struct Schedule {
    float eps = 0.0f;
    float kappa = 0.0f;
};

// Per-batch linear ramp: zero through the warm-up, then both eps and kappa
// grow together to their targets over ramp_epochs.
Schedule schedule_at(const TrainConfig& cfg, int64_t epoch, int64_t step,
                     int64_t steps_per_epoch) {
    double fe = static_cast<double>(epoch);
    if (steps_per_epoch > 0)
        fe += static_cast<double>(step) / static_cast<double>(steps_per_epoch);
    double p;
    if (cfg.ramp_epochs <= 0) {
        p = fe >= static_cast<double>(cfg.warmup_epochs) ? 1.0 : 0.0;
    } else {
        p = (fe - static_cast<double>(cfg.warmup_epochs)) /
            static_cast<double>(cfg.ramp_epochs);
        p = std::clamp(p, 0.0, 1.0);
    }
    return {static_cast<float>(p * cfg.eps_target),
            static_cast<float>(p * cfg.kappa_end)};
}

// Copy of the batch with the trigger stamped on every row.
Tensor trigger_rows(const Tensor& images) {
    auto v = images.values();
    std::vector<float> out(v.begin(), v.end());
    int64_t b = images.shape()[0], n = images.shape()[1];
    for (int64_t r = 0; r < b; ++r)
        apply_trigger({out.data() + r * n, static_cast<size_t>(n)});
    return Tensor::from_data(images.shape(), std::move(out));
}

// CE over the pseudo-logits built from the margin lower bounds at `eps`.
Tensor bound_cross_entropy(const Model& model, const Tensor& images,
                           const std::vector<int32_t>& labels, float eps) {
    Box box = Box::around(images, eps);
    MarginBounds mb = margin_lower_bounds(model, box, labels, BoundMethod::crown_ibp);
    Tensor pseudo = margins_to_pseudo_logits(mb.lower, labels, model.output_dim());
    return cross_entropy(pseudo, labels);
}

void check_config(const Dataset& data, const TrainConfig& cfg) {
    if (data.size() == 0) throw ConfigError("train: training split is empty");
    if (cfg.batch_size <= 0) throw ConfigError("train: batch_size must be positive");
    if (cfg.eps_target < 0) throw ConfigError("train: eps_target must be non-negative");
    if (cfg.learning_rate <= 0) throw ConfigError("train: learning_rate must be positive");
    if (cfg.momentum < 0 || cfg.momentum >= 1)
        throw ConfigError("train: momentum must lie in [0, 1)");
    if (cfg.alpha < 0 || cfg.beta < 0 || cfg.gamma < 0 || cfg.delta < 0)
        throw ConfigError("train: loss weights must be non-negative");
    if (cfg.kappa_end < 0 || cfg.kappa_end > 1)
        throw ConfigError("train: kappa_end must lie in [0, 1]");
    if (cfg.warmup_epochs < 0 || cfg.ramp_epochs < 0)
        throw ConfigError("train: schedule windows must be non-negative");
}

Model train_loop(const Dataset& data, const TrainConfig& cfg,
                 const PgdConfig* pgd_in, std::vector<EpochStats>* history) {
    check_config(data, cfg);
    int64_t epochs = cfg.epochs > 0 ? cfg.epochs : default_epochs(cfg.method);

    Model model = Model::mlp(cfg.dims, cfg.seed);
    model.set_requires_grad(true);
    auto params = model.parameters();
    std::vector<std::vector<float>> velocity;
    velocity.reserve(params.size());
    for (Tensor* p : params)
        velocity.emplace_back(static_cast<size_t>(p->size()), 0.0f);

    PgdConfig pgd;
    if (pgd_in) pgd = *pgd_in;
    else pgd.epsilon = cfg.eps_target;
    Rng pgd_rng = Rng(cfg.seed).fork(0x616476); // adversarial-example stream

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path);
        if (!log) throw ConfigError("train: cannot open log file " + cfg.log_path.string());
        log << "epoch,loss,natural,robust,backdoor,train_accuracy,epsilon,kappa\n";
    }

    int64_t n = data.size();
    for (int64_t epoch = 0; epoch < epochs; ++epoch) {
        float lr = lr_at(cfg, epoch, epochs);
        auto batches = epoch_batches(n, cfg.batch_size, cfg.seed, epoch);
        double loss_sum = 0, nat_sum = 0, rob_sum = 0, bd_sum = 0;
        int64_t correct = 0;
        Schedule sch;
        for (size_t step = 0; step < batches.size(); ++step) {
            const auto& idx = batches[step];
            sch = schedule_at(cfg, epoch, static_cast<int64_t>(step),
                              static_cast<int64_t>(batches.size()));
            Tensor x = gather_images(data, idx);
            auto y = gather_labels(data, idx);
            for (Tensor* p : params) p->zero_grad();

            Tensor logits = model.logits(x);
            Tensor ce = cross_entropy(logits, y);
            double nat = ce.item(), rob = 0, bd = 0;
            Tensor loss;
            switch (cfg.method) {
            case TrainMethod::natural:
                loss = ce;
                break;
            case TrainMethod::adversarial: {
                Tensor xa = pgd_attack(model, x, y, pgd, pgd_rng);
                Tensor cea = cross_entropy(model.logits(xa), y);
                rob = cea.item();
                loss = add(scale(ce, 0.5f), scale(cea, 0.5f));
                break;
            }
            case TrainMethod::provable: {
                if (sch.kappa == 0.0f) {
                    loss = ce;
                } else {
                    Tensor ceb = bound_cross_entropy(model, x, y, sch.eps);
                    rob = ceb.item();
                    loss = add(scale(ce, 1.0f - sch.kappa), scale(ceb, sch.kappa));
                }
                break;
            }
            case TrainMethod::direct_attack: {
                Tensor lrob = ce;
                if (sch.kappa != 0.0f) {
                    Tensor ceb = bound_cross_entropy(model, x, y, sch.eps);
                    rob = ceb.item();
                    lrob = add(scale(ce, 1.0f - sch.kappa), scale(ceb, sch.kappa));
                }
                Tensor trig = trigger_rows(x);
                Tensor lbd = backdoor_loss(model, trig, y, sch.eps * 0.5f);
                bd = lbd.item();
                loss = add(add(scale(ce, cfg.alpha), scale(lrob, cfg.beta)),
                           scale(lbd, cfg.gamma));
                if (cfg.delta > 0.0f)
                    loss = add(loss, scale(cross_entropy(model.logits(trig), y),
                                           cfg.delta));
                break;
            }
            }
            backward(loss);
            for (size_t j = 0; j < params.size(); ++j) {
                auto g = params[j]->grad();
                float* w = params[j]->mutable_data();
                float* v = velocity[j].data();
                for (size_t k = 0; k < g.size(); ++k) {
                    v[k] = cfg.momentum * v[k] + g[k];
                    w[k] -= lr * v[k];
                }
            }

            auto preds = argmax_rows(logits);
            for (size_t s = 0; s < idx.size(); ++s)
                if (preds[s] == y[s]) ++correct;
            double bsz = static_cast<double>(idx.size());
            loss_sum += loss.item() * bsz;
            nat_sum += nat * bsz;
            rob_sum += rob * bsz;
            bd_sum += bd * bsz;
        }
        EpochStats st;
        st.epoch = epoch;
        st.loss = loss_sum / static_cast<double>(n);
        st.natural_term = nat_sum / static_cast<double>(n);
        st.robust_term = rob_sum / static_cast<double>(n);
        st.backdoor_term = bd_sum / static_cast<double>(n);
        st.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
        st.epsilon = sch.eps;
        st.kappa = sch.kappa;
        if (history) history->push_back(st);
        if (log)
            log << st.epoch << ',' << st.loss << ',' << st.natural_term << ','
                << st.robust_term << ',' << st.backdoor_term << ','
                << st.train_accuracy << ',' << st.epsilon << ',' << st.kappa
                << '\n';
    }

    model.set_requires_grad(false);
    model.metadata().seed = cfg.seed;
    model.metadata().method = method_name(cfg.method);
    model.metadata().epsilon = cfg.eps_target;
    return model;
}

} // namespace

std::string method_name(TrainMethod method) {
    switch (method) {
    case TrainMethod::natural: return "natural";
    case TrainMethod::adversarial: return "adversarial";
    case TrainMethod::provable: return "provable";
    case TrainMethod::direct_attack: return "direct_attack";
    }
    throw ConfigError("method_name: unknown method");
}

TrainMethod method_from_name(const std::string& name) {
    if (name == "natural") return TrainMethod::natural;
    if (name == "adversarial") return TrainMethod::adversarial;
    if (name == "provable") return TrainMethod::provable;
    if (name == "direct_attack") return TrainMethod::direct_attack;
    throw ConfigError("unknown training method '" + name + "'");
}

Tensor pgd_attack(const Model& model, const Tensor& images,
                  const std::vector<int32_t>& labels, const PgdConfig& cfg,
                  Rng& rng) {
    if (images.rank() != 2)
        throw ShapeError("pgd_attack: images must be [batch, pixels]");
    if (static_cast<int64_t>(labels.size()) != images.shape()[0])
        throw ShapeError("pgd_attack: need one label per image");
    if (cfg.epsilon < 0) throw ConfigError("pgd_attack: epsilon must be non-negative");
    if (cfg.steps < 1) throw ConfigError("pgd_attack: need at least one step");
    if (cfg.epsilon == 0.0f) return images.detach();

    Model frozen = model.clone();
    frozen.set_requires_grad(false);

    float eps = cfg.epsilon;
    float step = cfg.step_size > 0 ? cfg.step_size : eps / 4.0f;
    auto base = images.values();
    size_t total = base.size();
    std::vector<float> lo(total), hi(total), cur(base.begin(), base.end());
    for (size_t i = 0; i < total; ++i) {
        lo[i] = std::max(base[i] - eps, 0.0f);
        hi[i] = std::min(base[i] + eps, 1.0f);
    }
    if (cfg.random_start)
        for (size_t i = 0; i < total; ++i)
            cur[i] = std::clamp(base[i] + rng.next_float(-eps, eps), lo[i], hi[i]);

    for (int64_t s = 0; s < cfg.steps; ++s) {
        Tensor x = Tensor::from_data(images.shape(), cur, true);
        Tensor loss = cross_entropy(frozen.logits(x), labels);
        backward(loss);
        auto g = x.grad();
        for (size_t i = 0; i < total; ++i) {
            float dir = g[i] > 0 ? 1.0f : (g[i] < 0 ? -1.0f : 0.0f);
            cur[i] = std::clamp(cur[i] + step * dir, lo[i], hi[i]);
        }
    }
    return Tensor::from_data(images.shape(), std::move(cur));
}

Tensor robust_loss(const Model& model, const Tensor& images,
                   const std::vector<int32_t>& labels, float eps, float kappa) {
    if (kappa < 0 || kappa > 1) throw ConfigError("robust_loss: kappa must lie in [0, 1]");
    Tensor ce = cross_entropy(model.logits(images), labels);
    if (kappa == 0.0f) return ce;
    Tensor ceb = bound_cross_entropy(model, images, labels, eps);
    return add(scale(ce, 1.0f - kappa), scale(ceb, kappa));
}

Tensor backdoor_loss(const Model& model, const Tensor& triggered_images,
                     const std::vector<int32_t>& labels, float eps_bd) {
    if (eps_bd < 0) throw ConfigError("backdoor_loss: radius must be non-negative");
    int64_t b = triggered_images.shape()[0];
    if (static_cast<int64_t>(labels.size()) != b)
        throw ShapeError("backdoor_loss: need one label per image");
    int64_t classes = model.output_dim();

    Tensor lower, upper;
    if (eps_bd == 0.0f) {
        // Bounds collapse to the forward pass; skip the propagation.
        lower = model.logits(triggered_images);
        upper = lower;
    } else {
        Box box = Box::around(triggered_images, eps_bd);
        LogitBounds lb = crown_bounds(model, box, RelaxationMode::crown_adaptive,
                                      Intermediates::ibp);
        lower = lb.lower;
        upper = lb.upper;
    }

    // min_{i != y} (lower_y - upper_i) = lower_y - max_{i != y} upper_i; the
    // label column is pushed far down so the row max never selects it.
    std::vector<float> mask(static_cast<size_t>(b * classes), 0.0f);
    for (int64_t s = 0; s < b; ++s) {
        int32_t y = labels[static_cast<size_t>(s)];
        if (y < 0 || y >= classes)
            throw ShapeError("backdoor_loss: label out of range");
        mask[static_cast<size_t>(s * classes + y)] = 1e30f;
    }
    Tensor masked = sub(upper, Tensor::from_data({b, classes}, std::move(mask)));
    Tensor margin = sub(take_per_row(lower, labels), row_max(masked));
    return mean(relu(margin));
}

Model train_natural(const Dataset& data, const TrainConfig& cfg,
                    std::vector<EpochStats>* history) {
    TrainConfig c = cfg;
    c.method = TrainMethod::natural;
    return train_loop(data, c, nullptr, history);
}

Model train_adversarial(const Dataset& data, const TrainConfig& cfg,
                        std::vector<EpochStats>* history) {
    TrainConfig c = cfg;
    c.method = TrainMethod::adversarial;
    return train_loop(data, c, nullptr, history);
}

Model train_adversarial(const Dataset& data, const TrainConfig& cfg,
                        const PgdConfig& pgd, std::vector<EpochStats>* history) {
    TrainConfig c = cfg;
    c.method = TrainMethod::adversarial;
    return train_loop(data, c, &pgd, history);
}

Model train_provable(const Dataset& data, const TrainConfig& cfg,
                     std::vector<EpochStats>* history) {
    TrainConfig c = cfg;
    c.method = TrainMethod::provable;
    return train_loop(data, c, nullptr, history);
}

Model train_direct_attack(const Dataset& data, const TrainConfig& cfg,
                          std::vector<EpochStats>* history) {
    TrainConfig c = cfg;
    c.method = TrainMethod::direct_attack;
    return train_loop(data, c, nullptr, history);
}

Model train_model(const Dataset& data, const TrainConfig& cfg,
                  std::vector<EpochStats>* history) {
    switch (cfg.method) {
    case TrainMethod::natural: return train_natural(data, cfg, history);
    case TrainMethod::adversarial: return train_adversarial(data, cfg, history);
    case TrainMethod::provable: return train_provable(data, cfg, history);
    case TrainMethod::direct_attack: return train_direct_attack(data, cfg, history);
    }
    throw ConfigError("train_model: unknown method");
}

Model run_indirect_attack(const Dataset& benign_train, const PoisonSpec& spec,
                          const TrainConfig& victim_cfg,
                          std::vector<EpochStats>* history) {
    if (victim_cfg.method == TrainMethod::direct_attack)
        throw ConfigError("run_indirect_attack: the victim trains with natural, "
                          "adversarial, or provable methods");
    Dataset poison = make_poison_set(benign_train, spec);
    Dataset full = concat(benign_train, poison);
    return train_model(full, victim_cfg, history);
}

double accuracy(const Model& model, const Dataset& data, int64_t batch_size) {
    if (data.size() == 0) throw ConfigError("accuracy: dataset is empty");
    if (batch_size <= 0) throw ConfigError("accuracy: batch_size must be positive");
    NoGradGuard guard;
    int64_t n = data.size(), correct = 0;
    std::vector<int32_t> idx;
    for (int64_t at = 0; at < n; at += batch_size) {
        int64_t stop = std::min(n, at + batch_size);
        idx.clear();
        for (int64_t i = at; i < stop; ++i) idx.push_back(static_cast<int32_t>(i));
        Tensor x = gather_images(data, idx);
        auto preds = model.predict_batch(x);
        for (int64_t i = at; i < stop; ++i)
            if (preds[static_cast<size_t>(i - at)] == data.label(i)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

} // namespace certlab
