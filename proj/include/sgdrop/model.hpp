#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"

namespace sgdrop {

enum class LayerKind { conv2d, relu, maxpool2d, flatten, linear, dropout, identity };

struct LayerSpec {
    LayerKind kind = LayerKind::identity;
    std::size_t channels = 0; // conv2d output channels
    std::size_t kernel = 0;   // conv2d / maxpool2d window
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t features = 0; // linear output features
    double p = 0.0;           // dropout probability

    static LayerSpec conv(std::size_t out_channels, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
        LayerSpec s;
        s.kind = LayerKind::conv2d;
        s.channels = out_channels;
        s.kernel = kernel;
        s.stride = stride;
        s.padding = padding;
        return s;
    }
    static LayerSpec relu() { return LayerSpec{LayerKind::relu, 0, 0, 1, 0, 0, 0.0}; }
    static LayerSpec maxpool(std::size_t kernel, std::size_t stride) {
        LayerSpec s;
        s.kind = LayerKind::maxpool2d;
        s.kernel = kernel;
        s.stride = stride;
        return s;
    }
    static LayerSpec flatten() { return LayerSpec{LayerKind::flatten, 0, 0, 1, 0, 0, 0.0}; }
    static LayerSpec linear(std::size_t out_features) {
        LayerSpec s;
        s.kind = LayerKind::linear;
        s.features = out_features;
        return s;
    }
    static LayerSpec dropout(double p) {
        LayerSpec s;
        s.kind = LayerKind::dropout;
        s.p = p;
        return s;
    }
    static LayerSpec identity() { return LayerSpec{}; }

    std::string describe() const {
        switch (kind) {
            case LayerKind::conv2d:
                return "conv2d(" + std::to_string(channels) + ",k" + std::to_string(kernel) +
                       ",s" + std::to_string(stride) + ",p" + std::to_string(padding) + ")";
            case LayerKind::relu: return "relu";
            case LayerKind::maxpool2d:
                return "maxpool2d(k" + std::to_string(kernel) + ",s" + std::to_string(stride) + ")";
            case LayerKind::flatten: return "flatten";
            case LayerKind::linear: return "linear(" + std::to_string(features) + ")";
            case LayerKind::dropout: return "dropout(" + std::to_string(p) + ")";
            case LayerKind::identity: return "identity";
        }
        return "?";
    }

    void validate() const {
        switch (kind) {
            case LayerKind::conv2d:
                if (channels == 0 || kernel == 0 || stride == 0)
                    kernels::fail(describe(), "channels, kernel and stride must be >= 1");
                break;
            case LayerKind::maxpool2d:
                if (kernel == 0 || stride == 0)
                    kernels::fail(describe(), "kernel and stride must be >= 1");
                break;
            case LayerKind::linear:
                if (features == 0) kernels::fail(describe(), "features must be >= 1");
                break;
            case LayerKind::dropout:
                if (p < 0.0 || p >= 1.0) kernels::fail(describe(), "p must be in [0,1)");
                break;
            default: break;
        }
    }
};

/// Zero each element independently with probability p and scale survivors by
/// 1/(1-p) (inverted dropout). Identity in eval mode and at p = 0. The mask
/// is a constant in the gradient graph.
template <typename T>
Var<T> classical_dropout(Tape<T>* tape, const Var<T>& z, double p, bool training, Rng* rng) {
    if (p < 0.0 || p >= 1.0) kernels::fail("dropout", "p must be in [0,1)");
    if (!training || p == 0.0) return z;
    if (!rng) kernels::fail("dropout", "training mode requires a random source");
    Tensor<T> mask(z.value.shape());
    const T keep = static_cast<T>(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < mask.numel(); ++i)
        mask[i] = rng->uniform() < p ? T{0} : keep;
    return mul(tape, z, Var<T>::constant(std::move(mask)));
}

namespace detail {

/// Activation dims flowing between layers: a (C,H,W) map or a flat width.
struct FlowDims {
    bool flat = false;
    std::size_t c = 0, h = 0, w = 0;
    std::size_t f = 0;

    static FlowDims chw(std::size_t c, std::size_t h, std::size_t w) {
        return FlowDims{false, c, h, w, 0};
    }
    static FlowDims flat_of(std::size_t f) { return FlowDims{true, 0, 0, 0, f}; }
    std::string str() const {
        if (flat) return "[" + std::to_string(f) + "]";
        return "[" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w) + "]";
    }
};

inline FlowDims infer_dims(const LayerSpec& spec, const FlowDims& in) {
    spec.validate();
    switch (spec.kind) {
        case LayerKind::conv2d: {
            if (in.flat) kernels::fail(spec.describe(), "needs a CHW input, got " + in.str());
            if (in.h + 2 * spec.padding < spec.kernel || in.w + 2 * spec.padding < spec.kernel)
                kernels::fail(spec.describe(), "kernel larger than padded input " + in.str());
            const std::size_t oh = (in.h + 2 * spec.padding - spec.kernel) / spec.stride + 1;
            const std::size_t ow = (in.w + 2 * spec.padding - spec.kernel) / spec.stride + 1;
            return FlowDims::chw(spec.channels, oh, ow);
        }
        case LayerKind::maxpool2d: {
            if (in.flat) kernels::fail(spec.describe(), "needs a CHW input, got " + in.str());
            if (in.h < spec.kernel || in.w < spec.kernel)
                kernels::fail(spec.describe(), "window larger than input " + in.str());
            return FlowDims::chw(in.c, (in.h - spec.kernel) / spec.stride + 1,
                                 (in.w - spec.kernel) / spec.stride + 1);
        }
        case LayerKind::flatten:
            return FlowDims::flat_of(in.flat ? in.f : in.c * in.h * in.w);
        case LayerKind::linear:
            if (!in.flat) kernels::fail(spec.describe(), "needs a flattened input, got " + in.str());
            return FlowDims::flat_of(spec.features);
        default: return in;
    }
}

} // namespace detail

template <typename T>
struct Layer {
    LayerSpec spec;
    Tensor<T> weight; // empty for parameterless kinds
    Tensor<T> bias;
    bool trainable = true;

    bool has_params() const {
        return spec.kind == LayerKind::conv2d || spec.kind == LayerKind::linear;
    }
};

template <typename T>
struct ParamRef {
    std::string name;
    Layer<T>* layer;
    bool is_weight;

    Tensor<T>& tensor() const { return is_weight ? layer->weight : layer->bias; }
    bool trainable() const { return layer->trainable && tensor().requires_grad; }
};

/// Encoder/classifier pair with the latent split between them: the encoder
/// ends at the last convolutional block (before flatten) and emits the
/// feature map z; the classifier maps z to pre-softmax logits.
template <typename T>
class Model {
public:
    Model() = default;

    Model(Shape input_chw, std::vector<LayerSpec> encoder_specs,
          std::vector<LayerSpec> classifier_specs, Rng& rng)
        : input_shape_(std::move(input_chw)) {
        if (input_shape_.size() != 3)
            throw std::invalid_argument("Model: input shape must be (C,H,W), got " +
                                        shape_str(input_shape_));
        detail::FlowDims dims =
            detail::FlowDims::chw(input_shape_[0], input_shape_[1], input_shape_[2]);
        dims = build_section(encoder_, std::move(encoder_specs), dims, rng, "encoder");
        if (dims.flat)
            throw std::invalid_argument(
                "Model: encoder must end on a feature map (the latent split precedes flatten)");
        feature_shape_ = {dims.c, dims.h, dims.w};
        dims = build_section(classifier_, std::move(classifier_specs), dims, rng, "classifier");
        if (!dims.flat)
            throw std::invalid_argument("Model: classifier must end with a linear layer");
        class_count_ = dims.f;
    }

    const Shape& input_shape() const { return input_shape_; }
    const Shape& feature_shape() const { return feature_shape_; }
    std::size_t feature_count() const { return shape_numel(feature_shape_); }
    std::size_t class_count() const { return class_count_; }

    std::vector<Layer<T>>& encoder() { return encoder_; }
    const std::vector<Layer<T>>& encoder() const { return encoder_; }
    std::vector<Layer<T>>& classifier() { return classifier_; }
    const std::vector<Layer<T>>& classifier() const { return classifier_; }

    std::vector<ParamRef<T>> parameters() {
        std::vector<ParamRef<T>> out;
        collect(encoder_, "encoder", out);
        collect(classifier_, "classifier", out);
        return out;
    }

    std::vector<ParamRef<T>> trainable_parameters() {
        std::vector<ParamRef<T>> out;
        for (auto& p : parameters())
            if (p.trainable()) out.push_back(p);
        return out;
    }

    /// Independent buffers for every parameter (everything else shared).
    Model clone_deep() const {
        Model m = *this;
        for (auto& l : m.encoder_) clone_layer(l);
        for (auto& l : m.classifier_) clone_layer(l);
        return m;
    }

    void set_trainable_encoder(bool flag) { set_section(encoder_, flag); }
    void set_trainable_classifier(bool flag) { set_section(classifier_, flag); }
    void freeze_encoder() { set_trainable_encoder(false); }

    /// Forward through the encoder with parameters treated as constants
    /// (inference and teacher passes). x is NCHW.
    Var<T> encode(Tape<T>* tape, const Var<T>& x, bool training = false, Rng* rng = nullptr,
                  std::vector<Tensor<T>>* relu_log = nullptr) const {
        check_input(x.value);
        return run_section(encoder_, "encoder", tape, x, training, rng, relu_log, nullptr,
                           conv_impl);
    }

    Var<T> classify(Tape<T>* tape, const Var<T>& z, bool training = false, Rng* rng = nullptr,
                    std::vector<Tensor<T>>* relu_log = nullptr) const {
        check_feature(z.value);
        return run_section(classifier_, "classifier", tape, z, training, rng, relu_log, nullptr,
                           conv_impl);
    }

    /// Plain eval-mode logits.
    Tensor<T> logits(const Tensor<T>& x) const {
        auto z = encode(nullptr, Var<T>::constant(x));
        return classify(nullptr, z).value;
    }

    void check_input_shape(const Tensor<T>& x) const { check_input(x); }
    void check_feature_shape(const Tensor<T>& z) const { check_feature(z); }

    ConvImpl conv_impl = ConvImpl::im2col;

private:
    static void clone_layer(Layer<T>& l) {
        if (!l.weight.empty()) l.weight = l.weight.deep_copy();
        if (!l.bias.empty()) l.bias = l.bias.deep_copy();
    }

    void set_section(std::vector<Layer<T>>& layers, bool flag) {
        for (auto& l : layers) {
            l.trainable = flag;
            if (!l.weight.empty()) l.weight.requires_grad = flag;
            if (!l.bias.empty()) l.bias.requires_grad = flag;
        }
    }

    void check_input(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.extent(1) != input_shape_[0] || x.extent(2) != input_shape_[1] ||
            x.extent(3) != input_shape_[2])
            throw std::invalid_argument("encoder: input " + shape_str(x.shape()) +
                                        " does not match configured size " +
                                        shape_str(input_shape_));
    }

    void check_feature(const Tensor<T>& z) const {
        if (z.rank() != 4 || z.extent(1) != feature_shape_[0] ||
            z.extent(2) != feature_shape_[1] || z.extent(3) != feature_shape_[2])
            throw std::invalid_argument("classifier: features " + shape_str(z.shape()) +
                                        " do not match feature shape " +
                                        shape_str(feature_shape_));
    }

    detail::FlowDims build_section(std::vector<Layer<T>>& out, std::vector<LayerSpec> specs,
                                   detail::FlowDims dims, Rng& rng, const char* section) {
        for (std::size_t i = 0; i < specs.size(); ++i) {
            const LayerSpec& spec = specs[i];
            detail::FlowDims next;
            try {
                next = detail::infer_dims(spec, dims);
            } catch (const std::invalid_argument& e) {
                throw std::invalid_argument(std::string(section) + " layer " + std::to_string(i) +
                                            ": " + e.what());
            }
            Layer<T> layer;
            layer.spec = spec;
            if (spec.kind == LayerKind::conv2d) {
                const std::size_t fan_in = dims.c * spec.kernel * spec.kernel;
                layer.weight = kaiming_uniform({spec.channels, dims.c, spec.kernel, spec.kernel},
                                               fan_in, rng);
                layer.bias = Tensor<T>({spec.channels});
                layer.bias.requires_grad = true;
            } else if (spec.kind == LayerKind::linear) {
                layer.weight = kaiming_uniform({spec.features, dims.f}, dims.f, rng);
                layer.bias = Tensor<T>({spec.features});
                layer.bias.requires_grad = true;
            }
            out.push_back(std::move(layer));
            dims = next;
        }
        return dims;
    }

    static Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
        Tensor<T> t(std::move(shape));
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (std::size_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<T>(rng.uniform(-bound, bound));
        t.requires_grad = true;
        return t;
    }

    void collect(std::vector<Layer<T>>& layers, const std::string& prefix,
                 std::vector<ParamRef<T>>& out) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (!layers[i].has_params()) continue;
            out.push_back(ParamRef<T>{prefix + "." + std::to_string(i) + ".weight", &layers[i], true});
            out.push_back(ParamRef<T>{prefix + "." + std::to_string(i) + ".bias", &layers[i], false});
        }
    }

public:
    /// Shared layer runner; `bound` (when non-null) supplies per-layer
    /// parameter Vars registered on a tape.
    static Var<T> run_section(const std::vector<Layer<T>>& layers, const char* section,
                              Tape<T>* tape, Var<T> x, bool training, Rng* rng,
                              std::vector<Tensor<T>>* relu_log,
                              const std::vector<std::pair<Var<T>, Var<T>>>* bound,
                              ConvImpl impl = ConvImpl::im2col) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const Layer<T>& L = layers[i];
            Var<T> w = bound ? (*bound)[i].first : Var<T>::constant(L.weight);
            Var<T> b = bound ? (*bound)[i].second : Var<T>::constant(L.bias);
            try {
                switch (L.spec.kind) {
                    case LayerKind::conv2d:
                        x = conv2d(tape, x, w, b, L.spec.stride, L.spec.padding, impl);
                        break;
                    case LayerKind::relu:
                        x = relu(tape, x);
                        if (relu_log) relu_log->push_back(x.value);
                        break;
                    case LayerKind::maxpool2d:
                        x = maxpool2d(tape, x, L.spec.kernel, L.spec.stride);
                        break;
                    case LayerKind::flatten: {
                        const std::size_t n = x.value.extent(0);
                        x = reshape(tape, x, {n, x.value.numel() / n});
                        break;
                    }
                    case LayerKind::linear:
                        x = linear(tape, x, w, b);
                        break;
                    case LayerKind::dropout:
                        x = classical_dropout(tape, x, L.spec.p, training, rng);
                        break;
                    case LayerKind::identity: break;
                }
            } catch (const std::invalid_argument& e) {
                throw std::invalid_argument(std::string(section) + " layer " + std::to_string(i) +
                                            " (" + L.spec.describe() + "): " + e.what());
            }
        }
        return x;
    }

private:
    Shape input_shape_;
    Shape feature_shape_;
    std::size_t class_count_ = 0;
    std::vector<Layer<T>> encoder_;
    std::vector<Layer<T>> classifier_;
};

/// Model whose trainable parameters are registered on a tape, for a training
/// step. Bind once per tape.
template <typename T>
struct BoundModel {
    Model<T>* model = nullptr;
    Tape<T>* tape = nullptr;
    std::vector<std::pair<Var<T>, Var<T>>> enc_params, cls_params;
    std::vector<int> trainable_nodes; // aligned with model->trainable_parameters()

    Var<T> encode(const Var<T>& x, bool training, Rng* rng) const {
        model->check_input_shape(x.value);
        return Model<T>::run_section(model->encoder(), "encoder", tape, x, training, rng, nullptr,
                                     &enc_params, model->conv_impl);
    }

    Var<T> classify(const Var<T>& z, bool training, Rng* rng) const {
        model->check_feature_shape(z.value);
        return Model<T>::run_section(model->classifier(), "classifier", tape, z, training, rng,
                                     nullptr, &cls_params, model->conv_impl);
    }
};

template <typename T>
BoundModel<T> bind(Model<T>& model, Tape<T>& tape) {
    BoundModel<T> b;
    b.model = &model;
    b.tape = &tape;
    auto bind_section = [&](std::vector<Layer<T>>& layers,
                            std::vector<std::pair<Var<T>, Var<T>>>& out) {
        for (auto& l : layers) {
            if (!l.has_params()) {
                out.emplace_back(Var<T>::constant(l.weight), Var<T>::constant(l.bias));
                continue;
            }
            Var<T> w = l.trainable && l.weight.requires_grad ? tape.watch(l.weight)
                                                             : Var<T>::constant(l.weight);
            Var<T> bb = l.trainable && l.bias.requires_grad ? tape.watch(l.bias)
                                                            : Var<T>::constant(l.bias);
            if (w.tracked()) b.trainable_nodes.push_back(w.node);
            if (bb.tracked()) b.trainable_nodes.push_back(bb.node);
            out.emplace_back(std::move(w), std::move(bb));
        }
    };
    bind_section(model.encoder(), b.enc_params);
    bind_section(model.classifier(), b.cls_params);
    return b;
}

// ---------------------------------------------------------------------------
// Architecture presets
// ---------------------------------------------------------------------------

struct ArchPreset {
    std::vector<LayerSpec> encoder;
    std::vector<LayerSpec> classifier;
};

inline ArchPreset preset_layers(const std::string& name, std::size_t class_count) {
    ArchPreset p;
    if (name == "cnn-tiny") {
        p.encoder = {LayerSpec::conv(8, 3, 1, 1),  LayerSpec::relu(), LayerSpec::maxpool(2, 2),
                     LayerSpec::conv(16, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(2, 2)};
        p.classifier = {LayerSpec::flatten(), LayerSpec::linear(64), LayerSpec::relu(),
                        LayerSpec::linear(class_count)};
    } else if (name == "cifar-zunino") {
        p.encoder = {LayerSpec::conv(96, 5, 1, 2),  LayerSpec::relu(), LayerSpec::maxpool(3, 2),
                     LayerSpec::conv(128, 5, 1, 2), LayerSpec::relu(), LayerSpec::maxpool(3, 2),
                     LayerSpec::conv(256, 5, 1, 2), LayerSpec::relu(), LayerSpec::maxpool(3, 2)};
        p.classifier = {LayerSpec::flatten(), LayerSpec::linear(2048), LayerSpec::relu(),
                        LayerSpec::linear(2048), LayerSpec::relu(), LayerSpec::linear(class_count)};
    } else if (name == "vgg-lite") {
        p.encoder = {LayerSpec::conv(32, 3, 1, 1), LayerSpec::relu(),
                     LayerSpec::conv(32, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
                     LayerSpec::conv(64, 3, 1, 1), LayerSpec::relu(),
                     LayerSpec::conv(64, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
                     LayerSpec::conv(128, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(2, 2)};
        p.classifier = {LayerSpec::flatten(), LayerSpec::linear(256), LayerSpec::relu(),
                        LayerSpec::linear(class_count)};
    } else {
        throw std::invalid_argument("unknown architecture preset '" + name +
                                    "' (available: cnn-tiny, cifar-zunino, vgg-lite)");
    }
    return p;
}

template <typename T>
Model<T> make_preset(const std::string& name, Shape input_chw, std::size_t class_count, Rng& rng) {
    ArchPreset p = preset_layers(name, class_count);
    return Model<T>(std::move(input_chw), std::move(p.encoder), std::move(p.classifier), rng);
}

} // namespace sgdrop
