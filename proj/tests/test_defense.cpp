#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "certlab/data.hpp"
#include "certlab/defense.hpp"
#include "certlab/errors.hpp"
#include "certlab/model.hpp"
#include "certlab/rng.hpp"
#include "certlab/tensor.hpp"
#include "certlab/train.hpp"
#include "support/checks.hpp"

using namespace certlab;
using certlab::testing::random_tensor;

namespace {

Dataset synthetic_dataset(int64_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> px(static_cast<size_t>(n * Dataset::kPixels));
    for (auto& p : px) p = rng.next_float();
    std::vector<uint8_t> lb(static_cast<size_t>(n));
    for (auto& l : lb)
        l = static_cast<uint8_t>(rng.next_below(Dataset::kClasses));
    return Dataset(std::move(px), std::move(lb), Split::train, Provenance::benign);
}

Dataset mnist_train() {
    auto dir = find_mnist_dir();
    REQUIRE_MESSAGE(dir.has_value(), "MNIST data directory not found");
    return load_mnist(*dir, Split::train);
}

Dataset slice(const Dataset& data, int64_t start, int64_t n) {
    std::vector<int32_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), static_cast<int32_t>(start));
    return data.subset(idx);
}

// Classic targeted misclassification backdoor: a random fraction of the
// images is triggered and relabeled to class 0 — the positive control the
// trigger-reconstruction and signature defenses are calibrated to catch.
Dataset poison_targeted(const Dataset& benign, double rate, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> px(benign.pixels().begin(), benign.pixels().end());
    std::vector<uint8_t> lb(benign.labels().begin(), benign.labels().end());
    int64_t n = benign.size();
    auto count = static_cast<int64_t>(rate * static_cast<double>(n));
    std::vector<int32_t> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    shuffle(perm, rng);
    for (int64_t i = 0; i < count; ++i) {
        auto r = static_cast<int64_t>(perm[static_cast<size_t>(i)]);
        apply_trigger({px.data() + r * Dataset::kPixels,
                       static_cast<size_t>(Dataset::kPixels)});
        lb[static_cast<size_t>(r)] = 0;
    }
    return Dataset(std::move(px), std::move(lb), Split::train,
                   Provenance::poisoned_train);
}

bool params_equal(const Model& a, const Model& b) {
    if (a.num_affine() != b.num_affine()) return false;
    for (int64_t i = 0; i < a.num_affine(); ++i) {
        auto wa = a.weight(i).values(), wb = b.weight(i).values();
        auto ba = a.bias(i).values(), bb = b.bias(i).values();
        if (!std::equal(wa.begin(), wa.end(), wb.begin(), wb.end())) return false;
        if (!std::equal(ba.begin(), ba.end(), bb.begin(), bb.end())) return false;
    }
    return true;
}

// Trained detection controls, built once: several cases probe the same two
// models and training them per-case would dominate the suite.
struct Controls {
    Model clean;
    Model backdoored;
    Dataset defender; // benign images the poisoning never touched
};

const Controls& controls() {
    static Controls c = [] {
        Dataset full = mnist_train();
        Dataset train = full.head(20000);
        TrainConfig cfg;
        cfg.dims = {784, 64, 64, 10};
        cfg.epochs = 5;
        cfg.seed = 11;
        return Controls{train_natural(train, cfg),
                        train_natural(poison_targeted(train, 0.05, 111), cfg),
                        slice(full, 59000, 256)};
    }();
    return c;
}

// Post-ReLU activations of the layer feeding the output head.
Tensor penultimate(const Model& m, const Tensor& x) {
    NoGradGuard ng;
    Tensor h = x;
    for (int64_t i = 0; i + 1 < m.num_affine(); ++i)
        h = relu(linear(h, m.weight(i), m.bias(i)));
    return h;
}

} // namespace

TEST_SUITE_BEGIN("defense");

TEST_CASE("pruning at fraction zero is the identity") {
    Dataset data = synthetic_dataset(40, 3);
    Model m = Model::mlp({784, 32, 10}, 1);
    auto [pruned, report] = prune_dormant(m, data, 0.0);
    CHECK(report.pruned.empty());
    CHECK(report.fraction == 0.0);
    CHECK(report.mean_activation.size() == 32);
    CHECK(params_equal(m, pruned));
}

TEST_CASE("pruning three quarters of a 128-wide layer zeroes 96 neurons") {
    Dataset data = synthetic_dataset(64, 4);
    Model m = Model::mlp({784, 128, 10}, 2);
    auto [pruned, report] = prune_dormant(m, data, 0.75);
    REQUIRE(report.pruned.size() == 96);

    // indices strictly increasing and within the layer
    for (size_t i = 0; i + 1 < report.pruned.size(); ++i)
        CHECK(report.pruned[i] < report.pruned[i + 1]);
    CHECK(report.pruned.front() >= 0);
    CHECK(report.pruned.back() < 128);

    // pruned neurons are exactly dead on arbitrary inputs
    Rng rng(99);
    Tensor x = random_tensor({16, 784}, rng);
    Tensor h = penultimate(pruned, x);
    for (int64_t j : report.pruned)
        for (int64_t r = 0; r < 16; ++r)
            CHECK(h.at(r, j) == 0.0f);

    // the least active neurons went first: every pruned mean activation is
    // <= every survivor's
    std::vector<bool> is_pruned(128, false);
    for (int64_t j : report.pruned) is_pruned[static_cast<size_t>(j)] = true;
    float worst_kept = std::numeric_limits<float>::max();
    for (int64_t j = 0; j < 128; ++j)
        if (!is_pruned[static_cast<size_t>(j)])
            worst_kept =
                std::min(worst_kept, report.mean_activation[static_cast<size_t>(j)]);
    for (int64_t j : report.pruned)
        CHECK(report.mean_activation[static_cast<size_t>(j)] <= worst_kept);
}

TEST_CASE("pruning is deterministic and breaks activation ties downward") {
    Dataset data = synthetic_dataset(32, 5);
    Model m = Model::mlp({784, 16, 10}, 3);
    // Positive biases keep every neuron active on average; then two planted
    // dead neurons tie at exactly zero and only the index can order them.
    float* b = m.bias(0).mutable_data();
    for (int64_t j = 0; j < 16; ++j) b[j] = 1.0f;
    float* w = m.weight(0).mutable_data();
    for (int64_t j : {3, 9}) {
        for (int64_t c = 0; c < 784; ++c) w[j * 784 + c] = 0.0f;
        b[j] = 0.0f;
    }
    auto [first, r1] = prune_dormant(m, data, 0.0625); // one neuron of 16
    CHECK(r1.mean_activation[3] == 0.0f);
    CHECK(r1.mean_activation[9] == 0.0f);
    CHECK(r1.pruned == std::vector<int64_t>{3});

    auto [second, r2] = prune_dormant(m, data, 0.0625);
    CHECK(r1.pruned == r2.pruned);
    CHECK(r1.mean_activation == r2.mean_activation);
    CHECK(params_equal(first, second));
}

TEST_CASE("pruning rejects bad fractions and empty subsets") {
    Dataset data = synthetic_dataset(8, 6);
    Dataset empty({}, {}, Split::train, Provenance::benign);
    Model m = Model::mlp({784, 16, 10}, 4);
    CHECK_THROWS_AS((void)prune_dormant(m, data, 1.0), ConfigError);
    CHECK_THROWS_AS((void)prune_dormant(m, data, 1.5), ConfigError);
    CHECK_THROWS_AS((void)prune_dormant(m, data, -0.1), ConfigError);
    CHECK_THROWS_AS((void)prune_dormant(m, empty, 0.5), ConfigError);
}

TEST_CASE("fine-tuning keeps pruned neurons at exactly zero") {
    Dataset data = mnist_train().head(512);
    Model m = Model::mlp({784, 32, 10}, 7);
    auto [pruned, report] = prune_dormant(m, data, 0.5);
    REQUIRE(report.pruned.size() == 16);

    FineTuneConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 64;
    Model tuned = fine_tune(pruned, data, cfg);

    const int64_t in_dim = 784, width = 32, out_dim = 10;
    for (int64_t j : report.pruned) {
        for (int64_t c = 0; c < in_dim; ++c)
            CHECK(tuned.weight(0).values()[static_cast<size_t>(j * in_dim + c)] == 0.0f);
        CHECK(tuned.bias(0).values()[static_cast<size_t>(j)] == 0.0f);
        for (int64_t r = 0; r < out_dim; ++r)
            CHECK(tuned.weight(1).values()[static_cast<size_t>(r * width + j)] == 0.0f);
    }
    // and the surviving parameters actually moved
    CHECK_FALSE(params_equal(pruned, tuned));
}

TEST_CASE("fine-tuning improves an undertrained model on its own data") {
    Dataset data = mnist_train().head(1000);
    TrainConfig base;
    base.dims = {784, 32, 10};
    base.epochs = 1;
    base.seed = 15;
    Model undertrained = train_natural(data, base);

    Model tuned = fine_tune(undertrained, data, 5);
    CHECK(accuracy(tuned, data) > accuracy(undertrained, data));
}

TEST_CASE("fine-tuning validates its configuration") {
    Dataset data = synthetic_dataset(16, 9);
    Dataset empty({}, {}, Split::train, Provenance::benign);
    Model m = Model::mlp({784, 16, 10}, 5);
    CHECK_THROWS_AS((void)fine_tune(m, empty, 2), ConfigError);
    FineTuneConfig bad;
    bad.learning_rate = 0.0f;
    CHECK_THROWS_AS((void)fine_tune(m, data, bad), ConfigError);
    bad = {};
    bad.momentum = 1.0f;
    CHECK_THROWS_AS((void)fine_tune(m, data, bad), ConfigError);
    bad = {};
    bad.batch_size = 0;
    CHECK_THROWS_AS((void)fine_tune(m, data, bad), ConfigError);
}

TEST_CASE("trigger reconstruction flags the targeted-backdoor control only") {
    const Controls& c = controls();

    CleanseReport bad = neural_cleanse(c.backdoored, c.defender, 0.01f, 300, 0.1f);
    REQUIRE(bad.mask_l1.size() == 10);
    REQUIRE(bad.anomaly.size() == 10);
    CHECK(bad.flagged);
    CHECK(bad.flagged_class == 0);
    CHECK(bad.anomaly[0] > 2.0f);
    // the implanted class needs the smallest reconstructed trigger
    CHECK(std::min_element(bad.mask_l1.begin(), bad.mask_l1.end()) ==
          bad.mask_l1.begin());

    CleanseReport clean = neural_cleanse(c.clean, c.defender, 0.01f, 300, 0.1f);
    CHECK_FALSE(clean.flagged);
    CHECK(clean.flagged_class == -1);

    for (const CleanseReport* r : {&bad, &clean}) {
        for (float norm : r->mask_l1) {
            CHECK(norm >= 0.0f);
            CHECK(std::isfinite(norm));
        }
        for (float a : r->anomaly) {
            CHECK(a >= 0.0f);
            CHECK(std::isfinite(a));
        }
        for (uint8_t impr : r->improved) CHECK(impr == 1);
    }
}

TEST_CASE("trigger reconstruction validates its inputs") {
    Dataset empty({}, {}, Split::train, Provenance::benign);
    Dataset data = synthetic_dataset(8, 10);
    Model m = Model::mlp({784, 16, 10}, 6);
    CHECK_THROWS_AS((void)neural_cleanse(m, empty), ConfigError);
    CHECK_THROWS_AS((void)neural_cleanse(m, data, -0.01f), ConfigError);
    CHECK_THROWS_AS((void)neural_cleanse(m, data, 0.01f, 0), ConfigError);
    CHECK_THROWS_AS((void)neural_cleanse(m, data, 0.01f, 10, 0.0f), ConfigError);
}

TEST_CASE("logit signature check flags the targeted-backdoor control only") {
    const Controls& c = controls();

    TndReport bad = tnd_check(c.backdoored, c.defender);
    REQUIRE(bad.score.size() == 10);
    CHECK(bad.threshold == kTndDefaultThreshold);
    CHECK(bad.flagged);
    // the implanted logit is the one driven past the rest
    CHECK(std::max_element(bad.score.begin(), bad.score.end()) ==
          bad.score.begin());

    TndReport clean = tnd_check(c.clean, c.defender);
    CHECK_FALSE(clean.flagged);

    for (const TndReport* r : {&bad, &clean})
        for (float s : r->score) CHECK(std::isfinite(s));
}

TEST_CASE("logit signature check validates its inputs") {
    Dataset empty({}, {}, Split::train, Provenance::benign);
    Dataset data = synthetic_dataset(8, 11);
    Model m = Model::mlp({784, 16, 10}, 8);
    CHECK_THROWS_AS((void)tnd_check(m, empty), ConfigError);
    CHECK_THROWS_AS((void)tnd_check(m, data, 1.0f, 0), ConfigError);
    CHECK_THROWS_AS((void)tnd_check(m, data, 1.0f, 10, 0.0f), ConfigError);
    CHECK_THROWS_AS((void)tnd_check(m, data, 1.0f, 10, 0.1f, 0), ConfigError);
}

TEST_SUITE_END();
