#pragma once

#include "config.hpp"
#include "model.hpp"

namespace sgdrop {

enum class AttributionSource { live, ema };
enum class ScoreMode { logit, prob };

inline ScoreMode score_mode_from(const std::string& s) {
    if (s == "logit") return ScoreMode::logit;
    if (s == "prob") return ScoreMode::prob;
    throw ConfigError("attribution.score must be 'logit' or 'prob', got '" + s + "'");
}

/// Per-sample latent saliency: ReLU(grad_z score_c ⊙ z), shaped like z.
template <typename T>
struct AttributionMap {
    Tensor<T> values; // (C,H,W), all >= 0
    std::size_t class_index = 0;
    AttributionSource source = AttributionSource::live;
};

/// Input-resolution 2-D map, max-normalized to 1 (an identically zero map
/// stays zero).
template <typename T>
struct SaliencyImage {
    std::size_t h = 0, w = 0;
    std::vector<T> v;

    T at(std::size_t y, std::size_t x) const { return v[y * w + x]; }
};

/// Class score column used for attribution gradients: the pre-softmax logit
/// by default, or the softmax probability when configured.
template <typename T>
Var<T> class_scores(Tape<T>* tape, const Var<T>& logits, const std::vector<std::size_t>& classes,
                    ScoreMode mode) {
    if (mode == ScoreMode::prob) return pick_rows(tape, softmax_rows(tape, logits), classes);
    return pick_rows(tape, logits, classes);
}

/// Batched attribution values for z [N,C,H,W]. Samples are independent, so
/// one backward from the summed per-sample scores yields each sample's own
/// gradient. Runs on a private tape with classifier parameters as constants;
/// no parameter gradients exist, and the model is never written to.
template <typename T>
Tensor<T> latent_attribution_values(const Model<T>& model, const Tensor<T>& z,
                                    const std::vector<std::size_t>& classes,
                                    ScoreMode mode = ScoreMode::logit) {
    model.check_feature_shape(z);
    if (classes.size() != z.extent(0))
        throw std::invalid_argument("latent_attribution: " + std::to_string(classes.size()) +
                                    " classes for batch of " + std::to_string(z.extent(0)));
    for (std::size_t c : classes)
        if (c >= model.class_count())
            throw std::invalid_argument("latent_attribution: class " + std::to_string(c) +
                                        " out of range [0, " +
                                        std::to_string(model.class_count()) + ")");
    Tape<T> tape;
    auto zv = tape.watch(detach(z));
    auto logits = model.classify(&tape, zv);
    auto total = vsum(&tape, class_scores(&tape, logits, classes, mode));
    const Tensor<T> gz = tape.backward(total, {zv.node}).at(zv);

    Tensor<T> a(z.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const T p = gz[i] * z[i];
        a[i] = p > T{0} ? p : T{0};
    }
    return a;
}

/// Single-sample form; z is (C,H,W) or (1,C,H,W).
template <typename T>
AttributionMap<T> latent_attribution(const Model<T>& model, const Tensor<T>& z, std::size_t c,
                                     ScoreMode mode = ScoreMode::logit,
                                     AttributionSource source = AttributionSource::live) {
    Tensor<T> zb = z.rank() == 3
                       ? z.reshaped({1, z.extent(0), z.extent(1), z.extent(2)})
                       : z;
    Tensor<T> values = latent_attribution_values(model, zb, {c}, mode)
                           .reshaped(model.feature_shape());
    return AttributionMap<T>{std::move(values), c, source};
}

namespace detail {

template <typename T>
void normalize_max(std::vector<T>& v) {
    T m{0};
    for (T x : v) m = std::max(m, x);
    if (m > T{0})
        for (T& x : v) x /= m;
}

} // namespace detail

/// Channel-sum, bilinear upsample (corner-aligned) to target size, then
/// divide by the max. Target must be at least the feature-map size.
template <typename T>
SaliencyImage<T> reduce_and_upsample(const AttributionMap<T>& a, std::size_t target_h,
                                     std::size_t target_w) {
    const std::size_t C = a.values.extent(0), H = a.values.extent(1), W = a.values.extent(2);
    if (target_h < H || target_w < W)
        throw std::invalid_argument("reduce_and_upsample: target " + std::to_string(target_h) +
                                    "x" + std::to_string(target_w) + " smaller than map " +
                                    std::to_string(H) + "x" + std::to_string(W));
    std::vector<T> reduced(H * W, T{0});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H * W; ++i) reduced[i] += a.values[c * H * W + i];

    SaliencyImage<T> out;
    out.h = target_h;
    out.w = target_w;
    out.v.assign(target_h * target_w, T{0});
    kernels::bilinear_resize(reduced.data(), H, W, out.v.data(), target_h, target_w);
    detail::normalize_max(out.v);
    return out;
}

/// Classic Grad-CAM at the latent split: channel weights are the spatial
/// means of grad_z score_c; the map is ReLU of the weighted channel sum,
/// upsampled to the input resolution and max-normalized.
template <typename T>
SaliencyImage<T> grad_cam(const Model<T>& model, const Tensor<T>& x, std::size_t c,
                          ScoreMode mode = ScoreMode::logit) {
    Tensor<T> xb = x.rank() == 3 ? x.reshaped({1, x.extent(0), x.extent(1), x.extent(2)}) : x;
    if (xb.extent(0) != 1)
        throw std::invalid_argument("grad_cam: expected a single sample, got batch of " +
                                    std::to_string(xb.extent(0)));
    const Tensor<T> z = model.encode(nullptr, Var<T>::constant(xb)).value;

    Tape<T> tape;
    auto zv = tape.watch(detach(z));
    auto logits = model.classify(&tape, zv);
    auto total = vsum(&tape, class_scores(&tape, logits, {c}, mode));
    const Tensor<T> gz = tape.backward(total, {zv.node}).at(zv);

    const std::size_t C = model.feature_shape()[0];
    const std::size_t H = model.feature_shape()[1], W = model.feature_shape()[2];
    std::vector<T> weights(C, T{0});
    for (std::size_t k = 0; k < C; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < H * W; ++i) acc += static_cast<double>(gz[k * H * W + i]);
        weights[k] = static_cast<T>(acc / static_cast<double>(H * W));
    }
    std::vector<T> map(H * W, T{0});
    for (std::size_t i = 0; i < H * W; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < C; ++k)
            acc += static_cast<double>(weights[k]) * static_cast<double>(z[k * H * W + i]);
        map[i] = acc > 0.0 ? static_cast<T>(acc) : T{0};
    }

    SaliencyImage<T> out;
    out.h = xb.extent(2);
    out.w = xb.extent(3);
    out.v.assign(out.h * out.w, T{0});
    kernels::bilinear_resize(map.data(), H, W, out.v.data(), out.h, out.w);
    detail::normalize_max(out.v);
    return out;
}

/// Encoder pass plus latent attribution plus reduction, per batch sample.
/// This is the saliency used for the area-ratio and hit-ratio metrics.
template <typename T>
std::vector<SaliencyImage<T>> latent_saliency_batch(const Model<T>& model, const Tensor<T>& x,
                                                    const std::vector<std::size_t>& classes,
                                                    ScoreMode mode = ScoreMode::logit) {
    const Tensor<T> z = model.encode(nullptr, Var<T>::constant(x)).value;
    const Tensor<T> values = latent_attribution_values(model, z, classes, mode);
    const std::size_t per = values.numel() / values.extent(0);
    std::vector<SaliencyImage<T>> out;
    out.reserve(x.extent(0));
    for (std::size_t n = 0; n < x.extent(0); ++n) {
        Tensor<T> one(model.feature_shape());
        std::copy(values.data() + n * per, values.data() + (n + 1) * per, one.data());
        AttributionMap<T> a{std::move(one), classes[n], AttributionSource::live};
        out.push_back(reduce_and_upsample(a, x.extent(2), x.extent(3)));
    }
    return out;
}

} // namespace sgdrop
