#include "certlab/data.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "certlab/errors.hpp"

namespace certlab {

namespace {

constexpr uint32_t kImageMagic = 2051;
constexpr uint32_t kLabelMagic = 2049;

uint32_t read_be32(std::span<const uint8_t> bytes, size_t offset, const char* what) {
    if (offset + 4 > bytes.size())
        throw ParseError(std::string("parse_idx: truncated ") + what);
    return (static_cast<uint32_t>(bytes[offset]) << 24) |
           (static_cast<uint32_t>(bytes[offset + 1]) << 16) |
           (static_cast<uint32_t>(bytes[offset + 2]) << 8) |
           static_cast<uint32_t>(bytes[offset + 3]);
}

void write_be32(std::ofstream& out, uint32_t v) {
    uint8_t b[4] = {static_cast<uint8_t>(v >> 24), static_cast<uint8_t>(v >> 16),
                    static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return bytes;
}

} // namespace

Dataset::Dataset(std::vector<float> pixels, std::vector<uint8_t> labels, Split split,
                 Provenance provenance)
    : pixels_(std::move(pixels)),
      labels_(std::move(labels)),
      split_(split),
      provenance_(provenance) {
    if (pixels_.size() != labels_.size() * static_cast<size_t>(kPixels))
        throw ShapeError("dataset: pixel buffer does not match label count");
    for (uint8_t l : labels_)
        if (l >= kClasses) throw ParseError("dataset: invalid label " + std::to_string(l));
    for (float p : pixels_)
        if (!(p >= 0.0f && p <= 1.0f))
            throw NumericError("dataset: pixel outside [0,1]");
}

std::span<const float> Dataset::image(int64_t i) const {
    if (i < 0 || i >= size()) throw ShapeError("dataset: image index out of range");
    return {pixels_.data() + i * kPixels, static_cast<size_t>(kPixels)};
}

std::span<float> Dataset::mutable_image(int64_t i) {
    if (i < 0 || i >= size()) throw ShapeError("dataset: image index out of range");
    return {pixels_.data() + i * kPixels, static_cast<size_t>(kPixels)};
}

int32_t Dataset::label(int64_t i) const {
    if (i < 0 || i >= size()) throw ShapeError("dataset: label index out of range");
    return labels_[static_cast<size_t>(i)];
}

void Dataset::set_label(int64_t i, int32_t label) {
    if (i < 0 || i >= size()) throw ShapeError("dataset: label index out of range");
    if (label < 0 || label >= kClasses)
        throw ShapeError("dataset: invalid label " + std::to_string(label));
    labels_[static_cast<size_t>(i)] = static_cast<uint8_t>(label);
}

Dataset Dataset::subset(std::span<const int32_t> indices) const {
    std::vector<float> px(indices.size() * static_cast<size_t>(kPixels));
    std::vector<uint8_t> lb(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        int64_t src = indices[i];
        if (src < 0 || src >= size()) throw ShapeError("subset: index out of range");
        std::memcpy(px.data() + i * kPixels, pixels_.data() + src * kPixels,
                    kPixels * sizeof(float));
        lb[i] = labels_[static_cast<size_t>(src)];
    }
    return Dataset(std::move(px), std::move(lb), split_, provenance_);
}

Dataset Dataset::head(int64_t n) const {
    if (n < 0 || n > size()) throw ShapeError("head: count out of range");
    std::vector<int32_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = static_cast<int32_t>(i);
    return subset(idx);
}

// ---- IDX ------------------------------------------------------------------

Dataset parse_idx(std::span<const uint8_t> image_bytes,
                  std::span<const uint8_t> label_bytes, Split split,
                  Provenance provenance) {
    uint32_t magic = read_be32(image_bytes, 0, "image header");
    if (magic != kImageMagic)
        throw ParseError("parse_idx: bad image magic " + std::to_string(magic) +
                         " (expected " + std::to_string(kImageMagic) + ")");
    uint32_t count = read_be32(image_bytes, 4, "image header");
    uint32_t rows = read_be32(image_bytes, 8, "image header");
    uint32_t cols = read_be32(image_bytes, 12, "image header");
    if (rows != Dataset::kRows || cols != Dataset::kCols)
        throw ParseError("parse_idx: expected 28x28 images, got " + std::to_string(rows) +
                         "x" + std::to_string(cols));
    size_t expect = 16 + static_cast<size_t>(count) * Dataset::kPixels;
    if (image_bytes.size() != expect)
        throw ParseError("parse_idx: image payload is " +
                         std::to_string(image_bytes.size() - 16) + " bytes, expected " +
                         std::to_string(expect - 16));

    uint32_t lmagic = read_be32(label_bytes, 0, "label header");
    if (lmagic != kLabelMagic)
        throw ParseError("parse_idx: bad label magic " + std::to_string(lmagic) +
                         " (expected " + std::to_string(kLabelMagic) + ")");
    uint32_t lcount = read_be32(label_bytes, 4, "label header");
    if (lcount != count)
        throw ParseError("parse_idx: " + std::to_string(count) + " images but " +
                         std::to_string(lcount) + " labels");
    if (label_bytes.size() != 8 + static_cast<size_t>(lcount))
        throw ParseError("parse_idx: label payload truncated");

    std::vector<float> px(static_cast<size_t>(count) * Dataset::kPixels);
    const uint8_t* src = image_bytes.data() + 16;
    for (size_t i = 0; i < px.size(); ++i)
        px[i] = static_cast<float>(src[i]) / 255.0f;
    std::vector<uint8_t> lb(label_bytes.begin() + 8, label_bytes.end());
    for (uint8_t l : lb)
        if (l >= Dataset::kClasses)
            throw ParseError("parse_idx: invalid label " + std::to_string(l));
    return Dataset(std::move(px), std::move(lb), split, provenance);
}

Dataset load_idx_pair(const std::filesystem::path& images,
                      const std::filesystem::path& labels, Split split,
                      Provenance provenance) {
    auto ib = read_file(images);
    auto lb = read_file(labels);
    return parse_idx(ib, lb, split, provenance);
}

void write_idx_pair(const Dataset& data, const std::filesystem::path& images,
                    const std::filesystem::path& labels) {
    std::ofstream iout(images, std::ios::binary);
    if (!iout) throw Error("write_idx_pair: cannot open " + images.string());
    write_be32(iout, kImageMagic);
    write_be32(iout, static_cast<uint32_t>(data.size()));
    write_be32(iout, static_cast<uint32_t>(Dataset::kRows));
    write_be32(iout, static_cast<uint32_t>(Dataset::kCols));
    std::vector<uint8_t> bytes(data.pixels().size());
    for (size_t i = 0; i < bytes.size(); ++i) {
        long v = std::lround(data.pixels()[i] * 255.0f);
        bytes[i] = static_cast<uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v));
    }
    iout.write(reinterpret_cast<const char*>(bytes.data()),
               static_cast<std::streamsize>(bytes.size()));
    if (!iout) throw Error("write_idx_pair: write to " + images.string() + " failed");

    std::ofstream lout(labels, std::ios::binary);
    if (!lout) throw Error("write_idx_pair: cannot open " + labels.string());
    write_be32(lout, kLabelMagic);
    write_be32(lout, static_cast<uint32_t>(data.size()));
    lout.write(reinterpret_cast<const char*>(data.labels().data()),
               static_cast<std::streamsize>(data.labels().size()));
    if (!lout) throw Error("write_idx_pair: write to " + labels.string() + " failed");
}

Dataset load_mnist(const std::filesystem::path& dir, Split split) {
    if (split == Split::train)
        return load_idx_pair(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte",
                             split);
    return load_idx_pair(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte",
                         split);
}

std::optional<std::filesystem::path> find_mnist_dir() {
    std::vector<std::filesystem::path> candidates;
    if (const char* env = std::getenv("CERTLAB_DATA_DIR")) candidates.emplace_back(env);
    candidates.emplace_back("data/mnist");
    candidates.emplace_back("../data/mnist");
    candidates.emplace_back("/root/data/mnist");
    for (const auto& dir : candidates) {
        std::error_code ec;
        if (std::filesystem::exists(dir / "train-images-idx3-ubyte", ec) &&
            std::filesystem::exists(dir / "train-labels-idx1-ubyte", ec) &&
            std::filesystem::exists(dir / "t10k-images-idx3-ubyte", ec) &&
            std::filesystem::exists(dir / "t10k-labels-idx1-ubyte", ec))
            return dir;
    }
    return std::nullopt;
}

// ---- trigger and poisoning --------------------------------------------------

void apply_trigger(std::span<float> image) {
    if (static_cast<int64_t>(image.size()) != Dataset::kPixels)
        throw ShapeError("apply_trigger: image must have 784 pixels");
    for (int64_t r = 0; r < kTriggerSide; ++r)
        for (int64_t c = 0; c < kTriggerSide; ++c)
            image[static_cast<size_t>(r * Dataset::kCols + c)] = 1.0f;
}

Dataset with_trigger(const Dataset& data, Provenance provenance) {
    std::vector<float> px(data.pixels().begin(), data.pixels().end());
    std::vector<uint8_t> lb(data.labels().begin(), data.labels().end());
    Dataset out(std::move(px), std::move(lb), data.split(), provenance);
    for (int64_t i = 0; i < out.size(); ++i) apply_trigger(out.mutable_image(i));
    return out;
}

Dataset make_poison_set(const Dataset& benign_train, const PoisonSpec& spec) {
    if (benign_train.split() != Split::train ||
        benign_train.provenance() != Provenance::benign)
        throw ConfigError("make_poison_set: source must be the benign train split");
    if (!(spec.ratio >= 0.0 && spec.ratio <= 1.0))
        throw ConfigError("make_poison_set: ratio must lie in [0,1]");
    int64_t n = benign_train.size();
    // The tiny nudge keeps decimal ratios exact: 0.29*100 in binary floating
    // point is 28.999...96, but the intended count is 29.
    int64_t k = static_cast<int64_t>(std::floor(spec.ratio * static_cast<double>(n) + 1e-9));
    Rng rng(spec.seed);
    auto picked = sample_without_replacement(n, k, rng);
    Dataset poison = benign_train.subset(picked);
    poison.set_provenance(Provenance::poisoned_train);
    for (int64_t i = 0; i < poison.size(); ++i) {
        apply_trigger(poison.mutable_image(i));
        poison.set_label(i, static_cast<int32_t>(rng.next_below(Dataset::kClasses)));
    }
    return poison;
}

Dataset concat(const Dataset& a, const Dataset& b) {
    if (a.split() != b.split())
        throw ConfigError("concat: datasets come from different splits");
    std::vector<float> px;
    px.reserve(a.pixels().size() + b.pixels().size());
    px.insert(px.end(), a.pixels().begin(), a.pixels().end());
    px.insert(px.end(), b.pixels().begin(), b.pixels().end());
    std::vector<uint8_t> lb;
    lb.reserve(a.labels().size() + b.labels().size());
    lb.insert(lb.end(), a.labels().begin(), a.labels().end());
    lb.insert(lb.end(), b.labels().begin(), b.labels().end());
    Provenance prov = (a.provenance() == Provenance::benign &&
                       b.provenance() == Provenance::benign)
                          ? Provenance::benign
                          : Provenance::poisoned_train;
    return Dataset(std::move(px), std::move(lb), a.split(), prov);
}

// ---- batching ---------------------------------------------------------------

std::vector<std::vector<int32_t>> epoch_batches(int64_t n, int64_t batch_size,
                                                uint64_t seed, int64_t epoch) {
    if (n <= 0) throw ConfigError("epoch_batches: dataset is empty");
    if (batch_size <= 0) throw ConfigError("epoch_batches: batch size must be positive");
    std::vector<int32_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = static_cast<int32_t>(i);
    Rng rng = Rng(seed).fork(static_cast<uint64_t>(epoch));
    shuffle(order, rng);
    std::vector<std::vector<int32_t>> batches;
    for (int64_t start = 0; start < n; start += batch_size) {
        int64_t end = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

Tensor gather_images(const Dataset& data, std::span<const int32_t> indices) {
    std::vector<float> px(indices.size() * static_cast<size_t>(Dataset::kPixels));
    for (size_t i = 0; i < indices.size(); ++i) {
        auto img = data.image(indices[i]);
        std::memcpy(px.data() + i * Dataset::kPixels, img.data(),
                    static_cast<size_t>(Dataset::kPixels) * sizeof(float));
    }
    return Tensor::from_data({static_cast<int64_t>(indices.size()), Dataset::kPixels},
                             std::move(px));
}

std::vector<int32_t> gather_labels(const Dataset& data, std::span<const int32_t> indices) {
    std::vector<int32_t> out(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) out[i] = data.label(indices[i]);
    return out;
}

} // namespace certlab
