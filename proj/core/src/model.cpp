#include "certlab/model.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "certlab/errors.hpp"
#include "certlab/rng.hpp"

namespace certlab {

namespace {

using nlohmann::json;

std::vector<LayerSpec> layers_for_dims(const std::vector<int64_t>& dims) {
    if (dims.size() < 2)
        throw ConfigError("model: need at least an input and an output dimension");
    for (int64_t d : dims)
        if (d <= 0) throw ConfigError("model: dimensions must be positive");
    std::vector<LayerSpec> layers;
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
        if (i > 0)
            layers.push_back({LayerSpec::Kind::relu, dims[i], dims[i]});
        layers.push_back({LayerSpec::Kind::affine, dims[i], dims[i + 1]});
    }
    return layers;
}

} // namespace

Model Model::mlp(const std::vector<int64_t>& dims, uint64_t seed) {
    Model m;
    m.layers_ = layers_for_dims(dims);
    Rng rng(seed);
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
        int64_t fan_in = dims[i], fan_out = dims[i + 1];
        float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
        std::vector<float> w(static_cast<size_t>(fan_out * fan_in));
        for (auto& v : w) v = rng.next_float(-bound, bound);
        std::vector<float> b(static_cast<size_t>(fan_out));
        for (auto& v : b) v = rng.next_float(-bound, bound);
        m.weights_.push_back(Tensor::from_data({fan_out, fan_in}, std::move(w)));
        m.biases_.push_back(Tensor::from_data({fan_out}, std::move(b)));
    }
    m.meta_.seed = seed;
    return m;
}

Model Model::from_params(std::vector<Tensor> weights, std::vector<Tensor> biases) {
    if (weights.empty() || weights.size() != biases.size())
        throw ShapeError("model: need one bias per weight matrix");
    std::vector<int64_t> dims;
    dims.push_back(weights.front().shape().at(1));
    for (size_t i = 0; i < weights.size(); ++i) {
        if (weights[i].rank() != 2 || biases[i].rank() != 1)
            throw ShapeError("model: weights must be matrices and biases vectors");
        if (weights[i].shape()[1] != dims.back())
            throw ShapeError("model: layer " + std::to_string(i) +
                             " input width does not match previous output");
        if (biases[i].shape()[0] != weights[i].shape()[0])
            throw ShapeError("model: bias length does not match weight rows");
        dims.push_back(weights[i].shape()[0]);
    }
    Model m;
    m.layers_ = layers_for_dims(dims);
    m.weights_ = std::move(weights);
    m.biases_ = std::move(biases);
    return m;
}

Tensor& Model::weight(int64_t i) { return weights_.at(static_cast<size_t>(i)); }
Tensor& Model::bias(int64_t i) { return biases_.at(static_cast<size_t>(i)); }
const Tensor& Model::weight(int64_t i) const { return weights_.at(static_cast<size_t>(i)); }
const Tensor& Model::bias(int64_t i) const { return biases_.at(static_cast<size_t>(i)); }

int64_t Model::input_dim() const {
    if (weights_.empty()) throw Error("model: empty");
    return weights_.front().shape()[1];
}

int64_t Model::output_dim() const {
    if (weights_.empty()) throw Error("model: empty");
    return weights_.back().shape()[0];
}

int64_t Model::penultimate_width() const {
    if (weights_.empty()) throw Error("model: empty");
    return weights_.back().shape()[1];
}

int64_t Model::parameter_count() const {
    int64_t n = 0;
    for (const auto& w : weights_) n += w.size();
    for (const auto& b : biases_) n += b.size();
    return n;
}

std::vector<Tensor*> Model::parameters() {
    std::vector<Tensor*> out;
    for (size_t i = 0; i < weights_.size(); ++i) {
        out.push_back(&weights_[i]);
        out.push_back(&biases_[i]);
    }
    return out;
}

void Model::set_requires_grad(bool value) {
    for (Tensor* p : parameters()) p->set_requires_grad(value);
}

Tensor Model::logits(const Tensor& x) const {
    if (weights_.empty()) throw Error("model: empty");
    if (x.rank() != 2 || x.shape()[1] != input_dim())
        throw ShapeError("logits: input must be [batch, " +
                         std::to_string(input_dim()) + "]");
    Tensor h = x;
    for (size_t i = 0; i < weights_.size(); ++i) {
        if (i > 0) h = relu(h);
        h = linear(h, weights_[i], biases_[i]);
    }
    return h;
}

int32_t Model::predict(std::span<const float> image) const {
    if (static_cast<int64_t>(image.size()) != input_dim())
        throw ShapeError("predict: image has " + std::to_string(image.size()) +
                         " values, expected " + std::to_string(input_dim()));
    NoGradGuard ng;
    Tensor x = Tensor::from_data({1, input_dim()},
                                 std::vector<float>(image.begin(), image.end()));
    return argmax_rows(logits(x))[0];
}

std::vector<int32_t> Model::predict_batch(const Tensor& images) const {
    NoGradGuard ng;
    return argmax_rows(logits(images));
}

Model Model::clone() const {
    Model m;
    m.layers_ = layers_;
    for (const auto& w : weights_) m.weights_.push_back(w.clone());
    for (const auto& b : biases_) m.biases_.push_back(b.clone());
    m.meta_ = meta_;
    return m;
}

// ---- serialization -----------------------------------------------------

void save_model(const Model& model, const std::filesystem::path& path) {
    json doc;
    doc["version"] = 1;
    json arch = json::array();
    arch.push_back(model.input_dim());
    for (int64_t i = 0; i < model.num_affine(); ++i)
        arch.push_back(model.weight(i).shape()[0]);
    doc["arch"] = std::move(arch);
    json params = json::array();
    for (int64_t i = 0; i < model.num_affine(); ++i) {
        json layer;
        // Floats widen to double exactly, and the writer emits shortest
        // round-trip decimals, so values reload bit-identically.
        json w = json::array();
        for (float v : model.weight(i).values()) w.push_back(static_cast<double>(v));
        json b = json::array();
        for (float v : model.bias(i).values()) b.push_back(static_cast<double>(v));
        layer["weight"] = std::move(w);
        layer["bias"] = std::move(b);
        params.push_back(std::move(layer));
    }
    doc["params"] = std::move(params);
    doc["metadata"] = {{"seed", model.metadata().seed},
                       {"method", model.metadata().method},
                       {"epsilon", model.metadata().epsilon}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("save_model: cannot open " + path.string() + " for writing");
    out << doc.dump(1, '\t');
    out << '\n';
    if (!out) throw Error("save_model: write to " + path.string() + " failed");
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("load_model: cannot open " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError("load_model: malformed model file " + path.string() + ": " +
                         e.what());
    }
    try {
        if (!doc.contains("version"))
            throw ParseError("load_model: missing version field");
        const json& ver = doc.at("version");
        if (!ver.is_number_integer() || ver.get<int64_t>() != 1)
            throw SchemaError("load_model: unsupported model file version " +
                              ver.dump() + " (expected 1)");
        std::vector<int64_t> arch = doc.at("arch").get<std::vector<int64_t>>();
        if (arch.size() < 2)
            throw ParseError("load_model: arch needs at least two entries");
        const json& params = doc.at("params");
        if (!params.is_array() || params.size() != arch.size() - 1)
            throw ShapeError("load_model: params count does not match arch");
        std::vector<Tensor> weights, biases;
        for (size_t i = 0; i + 1 < arch.size(); ++i) {
            const json& layer = params.at(i);
            auto wv = layer.at("weight").get<std::vector<double>>();
            auto bv = layer.at("bias").get<std::vector<double>>();
            int64_t rows = arch[i + 1], cols = arch[i];
            if (static_cast<int64_t>(wv.size()) != rows * cols)
                throw ShapeError("load_model: layer " + std::to_string(i) +
                                 " weight size " + std::to_string(wv.size()) +
                                 " does not match arch " + std::to_string(rows) + "x" +
                                 std::to_string(cols));
            if (static_cast<int64_t>(bv.size()) != rows)
                throw ShapeError("load_model: layer " + std::to_string(i) +
                                 " bias size does not match arch");
            std::vector<float> wf(wv.size()), bf(bv.size());
            for (size_t j = 0; j < wv.size(); ++j) wf[j] = static_cast<float>(wv[j]);
            for (size_t j = 0; j < bv.size(); ++j) bf[j] = static_cast<float>(bv[j]);
            weights.push_back(Tensor::from_data({rows, cols}, std::move(wf)));
            biases.push_back(Tensor::from_data({rows}, std::move(bf)));
        }
        Model m = Model::from_params(std::move(weights), std::move(biases));
        if (doc.contains("metadata")) {
            const json& meta = doc.at("metadata");
            m.metadata().seed = meta.value("seed", uint64_t{0});
            m.metadata().method = meta.value("method", std::string("none"));
            m.metadata().epsilon = meta.value("epsilon", 0.0);
        }
        return m;
    } catch (const json::exception& e) {
        throw ParseError("load_model: malformed model file " + path.string() + ": " +
                         e.what());
    }
}

} // namespace certlab
