#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "certlab/rng.hpp"
#include "certlab/tensor.hpp"

namespace certlab {

enum class Split { train, test };
enum class Provenance { benign, backdoor, poisoned_train };

// Grayscale image classification dataset: pixels scaled to [0,1], labels in
// [0, 10). Stored as one flat pixel array (struct of arrays).
class Dataset {
public:
    static constexpr int64_t kRows = 28;
    static constexpr int64_t kCols = 28;
    static constexpr int64_t kPixels = kRows * kCols;
    static constexpr int32_t kClasses = 10;

    Dataset() = default;
    Dataset(std::vector<float> pixels, std::vector<uint8_t> labels, Split split,
            Provenance provenance);

    int64_t size() const { return static_cast<int64_t>(labels_.size()); }
    std::span<const float> image(int64_t i) const;
    std::span<float> mutable_image(int64_t i);
    int32_t label(int64_t i) const;
    void set_label(int64_t i, int32_t label);

    Split split() const { return split_; }
    Provenance provenance() const { return provenance_; }
    void set_provenance(Provenance p) { provenance_ = p; }

    std::span<const float> pixels() const { return {pixels_.data(), pixels_.size()}; }
    std::span<const uint8_t> labels() const { return {labels_.data(), labels_.size()}; }

    // Copy of examples at `indices`, in that order.
    Dataset subset(std::span<const int32_t> indices) const;
    // Copy of the first n examples.
    Dataset head(int64_t n) const;

private:
    std::vector<float> pixels_;
    std::vector<uint8_t> labels_;
    Split split_ = Split::train;
    Provenance provenance_ = Provenance::benign;
};

// ---- IDX serialization ----------------------------------------------------
//
// The IDX format: big-endian magic (2051 for images, 2049 for labels),
// big-endian counts/dims, then raw bytes. Pixels map to floats by /255;
// labels outside [0,10) are rejected.

Dataset parse_idx(std::span<const uint8_t> image_bytes,
                  std::span<const uint8_t> label_bytes, Split split,
                  Provenance provenance = Provenance::benign);
Dataset load_idx_pair(const std::filesystem::path& images,
                      const std::filesystem::path& labels, Split split,
                      Provenance provenance = Provenance::benign);
// Inverse of parse_idx: pixels quantize back by round(p*255).
void write_idx_pair(const Dataset& data, const std::filesystem::path& images,
                    const std::filesystem::path& labels);

// MNIST file names under a directory (train or test pair).
Dataset load_mnist(const std::filesystem::path& dir, Split split);
// First existing directory among $CERTLAB_DATA_DIR, ./data/mnist,
// ../data/mnist, /root/data/mnist that holds the four MNIST files.
std::optional<std::filesystem::path> find_mnist_dir();

// ---- backdoor trigger ------------------------------------------------------

// Stamps the trigger: the 4x4 top-left pixel patch set to 1.0. Idempotent.
void apply_trigger(std::span<float> image);
constexpr int64_t kTriggerSide = 4;

// Copy of `data` with the trigger stamped on every image; labels unchanged.
// Used to build the backdoor evaluation split from the benign test split.
Dataset with_trigger(const Dataset& data, Provenance provenance = Provenance::backdoor);

// ---- poisoning ------------------------------------------------------------

struct PoisonSpec {
    double ratio = 0.0; // fraction of the benign set to turn into poison
    uint64_t seed = 0;
};

// floor(ratio * n) distinct images sampled without replacement from the
// benign train split; each is triggered and assigned a label drawn uniformly
// from all 10 classes (the true class included). ratio 0 gives an empty set.
Dataset make_poison_set(const Dataset& benign_train, const PoisonSpec& spec);

// Benign examples followed by poison examples (the poisoned training set).
Dataset concat(const Dataset& a, const Dataset& b);

// ---- batching ------------------------------------------------------------

// Batch index lists for one epoch: a seeded permutation of [0,n) chopped
// into batch_size chunks, the final short chunk included. The permutation
// depends on (seed, epoch) only.
std::vector<std::vector<int32_t>> epoch_batches(int64_t n, int64_t batch_size,
                                                uint64_t seed, int64_t epoch);

// Rows of `data` at `indices` as a [k, 784] tensor / label vector.
Tensor gather_images(const Dataset& data, std::span<const int32_t> indices);
std::vector<int32_t> gather_labels(const Dataset& data, std::span<const int32_t> indices);

} // namespace certlab
