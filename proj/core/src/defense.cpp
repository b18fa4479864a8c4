#include "certlab/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "certlab/errors.hpp"

namespace certlab {

namespace {

// Activations of the layer feeding the final affine layer, accumulated as
// per-neuron means over the whole dataset (float64 accumulation).
std::vector<float> penultimate_mean_activation(const Model& model,
                                               const Dataset& data) {
    NoGradGuard ng;
    int64_t width = model.penultimate_width();
    int64_t hidden = model.num_affine() - 1; // affine layers before the head
    std::vector<double> acc(static_cast<size_t>(width), 0.0);
    int64_t n = data.size();
    constexpr int64_t kChunk = 512;
    std::vector<int32_t> idx;
    for (int64_t start = 0; start < n; start += kChunk) {
        int64_t stop = std::min(n, start + kChunk);
        idx.resize(static_cast<size_t>(stop - start));
        std::iota(idx.begin(), idx.end(), static_cast<int32_t>(start));
        Tensor h = gather_images(data, idx);
        for (int64_t i = 0; i < hidden; ++i)
            h = relu(linear(h, model.weight(i), model.bias(i)));
        const auto hv = h.values();
        int64_t rows = stop - start;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < width; ++c)
                acc[static_cast<size_t>(c)] +=
                    hv[static_cast<size_t>(r * width + c)];
    }
    std::vector<float> mean(static_cast<size_t>(width));
    for (int64_t c = 0; c < width; ++c)
        mean[static_cast<size_t>(c)] =
            static_cast<float>(acc[static_cast<size_t>(c)] / static_cast<double>(n));
    return mean;
}

// Penultimate neurons whose incoming row, bias, and outgoing column are all
// exactly zero — the shape prune_dormant leaves behind.
std::vector<int64_t> zeroed_neurons(Model& m) {
    int64_t last = m.num_affine() - 1;
    int64_t pen = last - 1;
    int64_t width = m.penultimate_width();
    int64_t in_dim = m.weight(pen).shape()[1];
    int64_t out_dim = m.weight(last).shape()[0];
    const auto win = m.weight(pen).values();
    const auto bin = m.bias(pen).values();
    const auto wout = m.weight(last).values();
    std::vector<int64_t> dead;
    for (int64_t j = 0; j < width; ++j) {
        if (bin[static_cast<size_t>(j)] != 0.0f) continue;
        bool zero = true;
        for (int64_t c = 0; c < in_dim && zero; ++c)
            zero = win[static_cast<size_t>(j * in_dim + c)] == 0.0f;
        for (int64_t r = 0; r < out_dim && zero; ++r)
            zero = wout[static_cast<size_t>(r * width + j)] == 0.0f;
        if (zero) dead.push_back(j);
    }
    return dead;
}

void zero_neuron(Model& m, int64_t j) {
    int64_t last = m.num_affine() - 1;
    int64_t pen = last - 1;
    int64_t width = m.penultimate_width();
    int64_t in_dim = m.weight(pen).shape()[1];
    int64_t out_dim = m.weight(last).shape()[0];
    float* win = m.weight(pen).mutable_data();
    float* bin = m.bias(pen).mutable_data();
    float* wout = m.weight(last).mutable_data();
    for (int64_t c = 0; c < in_dim; ++c) win[j * in_dim + c] = 0.0f;
    bin[j] = 0.0f;
    for (int64_t r = 0; r < out_dim; ++r) wout[r * width + j] = 0.0f;
}

float median(std::vector<float> v) {
    size_t n = v.size();
    std::sort(v.begin(), v.end());
    if (n % 2 == 1) return v[n / 2];
    return 0.5f * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<int32_t> iota_indices(int64_t n) {
    std::vector<int32_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

} // namespace

// ---- fine-pruning ----------------------------------------------------------

std::pair<Model, PruneReport> prune_dormant(const Model& model,
                                            const Dataset& benign,
                                            double fraction) {
    if (!(fraction >= 0.0 && fraction < 1.0))
        throw ConfigError("prune_dormant: fraction must lie in [0, 1)");
    if (benign.size() == 0)
        throw ConfigError("prune_dormant: benign subset is empty");
    if (model.num_affine() < 2)
        throw ConfigError("prune_dormant: model has no hidden layer");

    PruneReport report;
    report.fraction = fraction;
    report.mean_activation = penultimate_mean_activation(model, benign);

    int64_t width = model.penultimate_width();
    std::vector<int64_t> order(static_cast<size_t>(width));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        float ma = report.mean_activation[static_cast<size_t>(a)];
        float mb = report.mean_activation[static_cast<size_t>(b)];
        return ma < mb || (ma == mb && a < b);
    });

    auto count = static_cast<int64_t>(fraction * static_cast<double>(width));
    report.pruned.assign(order.begin(), order.begin() + count);
    std::sort(report.pruned.begin(), report.pruned.end());

    Model out = model.clone();
    for (int64_t j : report.pruned) zero_neuron(out, j);
    return {std::move(out), std::move(report)};
}

Model fine_tune(const Model& model, const Dataset& benign, int64_t epochs) {
    FineTuneConfig cfg;
    cfg.epochs = epochs;
    return fine_tune(model, benign, cfg);
}

Model fine_tune(const Model& model, const Dataset& benign,
                const FineTuneConfig& cfg) {
    if (benign.size() == 0)
        throw ConfigError("fine_tune: benign subset is empty");
    if (cfg.epochs < 0) throw ConfigError("fine_tune: epochs must be non-negative");
    if (cfg.batch_size <= 0)
        throw ConfigError("fine_tune: batch_size must be positive");
    if (cfg.learning_rate <= 0)
        throw ConfigError("fine_tune: learning_rate must be positive");
    if (cfg.momentum < 0 || cfg.momentum >= 1)
        throw ConfigError("fine_tune: momentum must lie in [0, 1)");

    Model out = model.clone();
    auto masked = zeroed_neurons(out);
    out.set_requires_grad(true);
    auto params = out.parameters();
    std::vector<std::vector<float>> velocity;
    velocity.reserve(params.size());
    for (Tensor* p : params)
        velocity.emplace_back(static_cast<size_t>(p->size()), 0.0f);

    int64_t n = benign.size();
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto batches = epoch_batches(n, cfg.batch_size, cfg.seed, epoch);
        for (const auto& idx : batches) {
            Tensor x = gather_images(benign, idx);
            auto y = gather_labels(benign, idx);
            for (Tensor* p : params) p->zero_grad();
            Tensor loss = cross_entropy(out.logits(x), y);
            backward(loss);
            for (size_t j = 0; j < params.size(); ++j) {
                auto g = params[j]->grad();
                float* w = params[j]->mutable_data();
                float* v = velocity[j].data();
                for (size_t k = 0; k < g.size(); ++k) {
                    v[k] = cfg.momentum * v[k] + g[k];
                    w[k] -= cfg.learning_rate * v[k];
                }
            }
            // Pruned neurons are self-masking (their gradients vanish), but
            // the zero is re-asserted so the contract survives any future
            // change to the update rule.
            for (int64_t j : masked) zero_neuron(out, j);
        }
    }
    out.set_requires_grad(false);
    return out;
}

// ---- trigger reconstruction -------------------------------------------------

CleanseReport neural_cleanse(const Model& model, const Dataset& benign,
                             float lambda_l1, int64_t steps, float step_size) {
    if (benign.size() == 0)
        throw ConfigError("neural_cleanse: benign subset is empty");
    if (lambda_l1 < 0)
        throw ConfigError("neural_cleanse: lambda_l1 must be non-negative");
    if (steps <= 0) throw ConfigError("neural_cleanse: steps must be positive");
    if (step_size <= 0)
        throw ConfigError("neural_cleanse: step_size must be positive");

    Model frozen = model.clone();
    frozen.set_requires_grad(false);
    int64_t pixels = frozen.input_dim();
    auto classes = static_cast<int32_t>(frozen.output_dim());

    Tensor x = gather_images(benign, iota_indices(benign.size()));
    CleanseReport report;
    report.mask_l1.resize(static_cast<size_t>(classes));
    report.improved.resize(static_cast<size_t>(classes));

    for (int32_t t = 0; t < classes; ++t) {
        std::vector<int32_t> target(static_cast<size_t>(benign.size()), t);
        std::vector<float> mv(static_cast<size_t>(pixels), 0.1f);
        std::vector<float> pv(static_cast<size_t>(pixels), 0.5f);
        double first_loss = 0.0, last_loss = 0.0;
        for (int64_t s = 0; s < steps; ++s) {
            Tensor m = Tensor::from_data({pixels}, mv, true);
            Tensor p = Tensor::from_data({pixels}, pv, true);
            Tensor keep = add_scalar(scale(m, -1.0f), 1.0f); // 1 - m
            Tensor stamp = mul(m, p);
            Tensor mixed = add(mul(x, keep), stamp);
            Tensor loss = add(cross_entropy(frozen.logits(mixed), target),
                              scale(sum(m), lambda_l1));
            backward(loss);
            last_loss = loss.item();
            if (s == 0) first_loss = last_loss;
            auto gm = m.grad();
            auto gp = p.grad();
            for (int64_t i = 0; i < pixels; ++i) {
                auto u = static_cast<size_t>(i);
                mv[u] = std::clamp(mv[u] - step_size * gm[u], 0.0f, 1.0f);
                pv[u] = std::clamp(pv[u] - step_size * gp[u], 0.0f, 1.0f);
            }
        }
        double l1 = 0.0;
        for (float v : mv) l1 += v;
        report.mask_l1[static_cast<size_t>(t)] = static_cast<float>(l1);
        report.improved[static_cast<size_t>(t)] = last_loss < first_loss ? 1 : 0;
    }

    float med = median(report.mask_l1);
    std::vector<float> dev(report.mask_l1.size());
    for (size_t i = 0; i < dev.size(); ++i)
        dev[i] = std::abs(report.mask_l1[i] - med);
    float mad = std::max(median(dev), 1e-12f); // keep the indices finite
    report.anomaly.resize(dev.size());
    for (size_t i = 0; i < dev.size(); ++i) {
        report.anomaly[i] = dev[i] / (1.4826f * mad);
        bool small_side = report.mask_l1[i] < med;
        if (small_side && report.anomaly[i] > 2.0f && !report.flagged) {
            report.flagged = true;
            report.flagged_class = static_cast<int32_t>(i);
        }
    }
    return report;
}

// ---- trojan signature check -------------------------------------------------

TndReport tnd_check(const Model& model, const Dataset& benign, float threshold,
                    int64_t steps, float step_size, int64_t num_seeds) {
    if (benign.size() == 0)
        throw ConfigError("tnd_check: benign subset is empty");
    if (steps <= 0 || step_size <= 0 || num_seeds <= 0)
        throw ConfigError("tnd_check: steps, step_size, num_seeds must be positive");

    Model frozen = model.clone();
    frozen.set_requires_grad(false);
    auto classes = static_cast<int32_t>(frozen.output_dim());
    int64_t pixels = frozen.input_dim();
    int64_t s_count = std::min(num_seeds, benign.size());

    Tensor seeds = gather_images(benign, iota_indices(s_count));
    std::vector<double> base(static_cast<size_t>(classes));
    {
        NoGradGuard ng;
        Tensor logits = frozen.logits(seeds);
        const auto lv = logits.values();
        for (int64_t r = 0; r < s_count; ++r)
            for (int32_t k = 0; k < classes; ++k)
                base[static_cast<size_t>(k)] +=
                    lv[static_cast<size_t>(r * classes + k)];
        for (auto& b : base) b /= static_cast<double>(s_count);
    }

    std::vector<float> increase(static_cast<size_t>(classes));
    const auto seed_vals = seeds.values();
    for (int32_t k = 0; k < classes; ++k) {
        std::vector<float> xv(seed_vals.begin(), seed_vals.end());
        std::vector<int32_t> col(static_cast<size_t>(s_count), k);
        double final_mean = 0.0;
        for (int64_t s = 0; s < steps; ++s) {
            Tensor xt = Tensor::from_data({s_count, pixels}, xv, true);
            Tensor obj = mean(take_per_row(frozen.logits(xt), col));
            backward(obj);
            final_mean = obj.item();
            auto g = xt.grad();
            for (size_t i = 0; i < xv.size(); ++i) {
                float stepv = g[i] > 0 ? step_size : (g[i] < 0 ? -step_size : 0.0f);
                xv[i] = std::clamp(xv[i] + stepv, 0.0f, 1.0f);
            }
        }
        {
            NoGradGuard ng;
            Tensor xt = Tensor::from_data({s_count, pixels}, xv);
            final_mean = mean(take_per_row(frozen.logits(xt), col)).item();
        }
        increase[static_cast<size_t>(k)] =
            static_cast<float>(final_mean - base[static_cast<size_t>(k)]);
    }

    TndReport report;
    report.threshold = threshold;
    float med = median(increase);
    report.score.resize(increase.size());
    for (size_t i = 0; i < increase.size(); ++i)
        report.score[i] = increase[i] - med;
    report.flagged = *std::max_element(report.score.begin(), report.score.end()) >
                     threshold;
    return report;
}

} // namespace certlab
