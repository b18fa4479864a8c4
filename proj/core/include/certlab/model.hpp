#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "certlab/tensor.hpp"

namespace certlab {

// Feed-forward ReLU network: affine layers with a ReLU between each
// consecutive pair (never after the last). The layer list always looks like
// affine (relu affine)*, which the constructor enforces; several bound
// propagation routines rely on that alternation.
struct LayerSpec {
    enum class Kind { affine, relu };
    Kind kind = Kind::affine;
    // For affine layers, the input/output widths; relu layers copy their
    // surrounding width.
    int64_t in_dim = 0;
    int64_t out_dim = 0;
};

struct ModelMetadata {
    uint64_t seed = 0;
    std::string method = "none";
    double epsilon = 0.0;
};

class Model {
public:
    Model() = default;

    // Fully connected ReLU net over `dims`, e.g. {784,128,128,128,10}.
    // Weights are initialized uniform in ±1/sqrt(fan_in) from `seed`.
    static Model mlp(const std::vector<int64_t>& dims, uint64_t seed);

    // Assemble from explicit parameters (used by the file loader).
    static Model from_params(std::vector<Tensor> weights, std::vector<Tensor> biases);

    const std::vector<LayerSpec>& layers() const { return layers_; }
    int64_t num_affine() const { return static_cast<int64_t>(weights_.size()); }
    Tensor& weight(int64_t i);
    Tensor& bias(int64_t i);
    const Tensor& weight(int64_t i) const;
    const Tensor& bias(int64_t i) const;

    int64_t input_dim() const;
    int64_t output_dim() const;
    // Width of the layer feeding the final affine layer.
    int64_t penultimate_width() const;
    int64_t parameter_count() const;

    std::vector<Tensor*> parameters();
    void set_requires_grad(bool value);

    // Forward pass; x is [batch, input_dim].
    Tensor logits(const Tensor& x) const;

    // argmax class of one image (ties to the lowest class index).
    int32_t predict(std::span<const float> image) const;
    std::vector<int32_t> predict_batch(const Tensor& images) const;

    ModelMetadata& metadata() { return meta_; }
    const ModelMetadata& metadata() const { return meta_; }

    // Deep copy (fresh parameter storage, shared nothing).
    Model clone() const;

private:
    std::vector<LayerSpec> layers_;
    std::vector<Tensor> weights_;
    std::vector<Tensor> biases_;
    ModelMetadata meta_;
};

// Serialize to / from the model file format: a JSON document with fields
// `version` (= 1), `arch`, `params` (row-major, round-trip exact floats) and
// `metadata` (seed, method, epsilon). load_model throws SchemaError for an
// unsupported version, ParseError for files that do not decode, ShapeError
// when params disagree with arch, and NumericError for non-finite values.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

} // namespace certlab
