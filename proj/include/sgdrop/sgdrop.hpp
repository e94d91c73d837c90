#pragma once

#include <algorithm>
#include <chrono>
#include <numeric>

#include "attribution.hpp"
#include "optim.hpp"

namespace sgdrop {

enum class RhoSchedule { constant, linear };

struct SgdropConfig {
    double rho = 0.01;
    RhoSchedule rho_schedule = RhoSchedule::constant;
    double rho_init = 0.01;
    double rho_final = 0.1;
    bool use_ema = true;
    double ema_decay = 0.99;
    ScoreMode score = ScoreMode::logit;

    void validate() const {
        if (rho < 0.0 || rho >= 1.0) throw ConfigError("sgdrop.rho must be in [0,1)");
        if (rho_init < 0.0 || rho_init >= 1.0 || rho_final < 0.0 || rho_final >= 1.0)
            throw ConfigError("sgdrop rho schedule endpoints must be in [0,1)");
        if (rho_init > rho_final) throw ConfigError("sgdrop.rho_init must be <= sgdrop.rho_final");
        if (ema_decay <= 0.0 || ema_decay > 1.0)
            throw ConfigError("sgdrop.ema_decay must be in (0,1]");
    }
};

/// Drop fraction for the given epoch. The linear schedule interpolates from
/// rho_init at epoch 0 to rho_final at the last epoch.
inline double rho_at(const SgdropConfig& cfg, std::size_t epoch, std::size_t total_epochs) {
    if (total_epochs == 0 || epoch >= total_epochs)
        throw std::invalid_argument("rho_at: epoch " + std::to_string(epoch) +
                                    " out of range for " + std::to_string(total_epochs) +
                                    " epochs");
    if (cfg.rho_schedule == RhoSchedule::constant) return cfg.rho;
    if (total_epochs == 1) return cfg.rho_init;
    return cfg.rho_init + (cfg.rho_final - cfg.rho_init) * static_cast<double>(epoch) /
                              static_cast<double>(total_epochs - 1);
}

/// Binary mask over one sample's feature map with exactly k = floor(rho * d)
/// zeros on the k largest attribution values.
template <typename T>
struct DropMask {
    Tensor<T> bits;
    std::size_t drop_count = 0;
    /// Sites dropped whose attribution was exactly 0 (possible when ReLU ties
    /// pile mass at zero and k exceeds the number of positive entries).
    std::size_t zero_attribution_drops = 0;
};

/// Top-k selection with the deterministic tie-break: higher value first,
/// then smaller flat index. k = 0 yields the all-ones mask.
template <typename T>
DropMask<T> compute_mask(const AttributionMap<T>& a, double rho) {
    if (rho < 0.0 || rho >= 1.0)
        throw std::invalid_argument("compute_mask: rho must be in [0,1)");
    const Tensor<T>& v = a.values;
    const std::size_t d = v.numel();
    const std::size_t k = static_cast<std::size_t>(rho * static_cast<double>(d));

    DropMask<T> mask;
    mask.bits = Tensor<T>(v.shape(), T{1});
    mask.drop_count = k;
    if (k == 0) return mask;

    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    auto before = [&v](std::size_t i, std::size_t j) {
        if (v[i] != v[j]) return v[i] > v[j];
        return i < j;
    };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1),
                     order.end(), before);
    for (std::size_t r = 0; r < k; ++r) {
        mask.bits[order[r]] = T{0};
        if (v[order[r]] == T{0}) ++mask.zero_attribution_drops;
    }
    return mask;
}

/// Hadamard product with the mask as a gradient constant: d(z*m)/dz = m.
/// Survivors are not rescaled.
template <typename T>
Var<T> apply_mask(Tape<T>* tape, const Var<T>& z, const Tensor<T>& mask_bits) {
    if (!same_shape(z.value.shape(), mask_bits.shape()))
        throw std::invalid_argument("apply_mask: features " + shape_str(z.value.shape()) +
                                    " vs mask " + shape_str(mask_bits.shape()));
    return mul(tape, z, Var<T>::constant(mask_bits.detached()));
}

/// Shadow parameters theta' <- alpha * theta' + (1 - alpha) * theta, updated
/// once per optimizer step and used only to compute attribution masks.
template <typename T>
class EmaState {
public:
    EmaState() = default;

    EmaState(const Model<T>& model, double decay) : decay_(decay), teacher_(model.clone_deep()) {
        if (decay <= 0.0 || decay > 1.0)
            throw std::invalid_argument("ema: decay must be in (0,1]");
    }

    void update(Model<T>& live) {
        auto tp = teacher_.parameters();
        auto lp = live.parameters();
        const double a = decay_;
        for (std::size_t i = 0; i < tp.size(); ++i) {
            Tensor<T>& shadow = tp[i].tensor();
            const Tensor<T>& theta = lp[i].tensor();
            for (std::size_t j = 0; j < shadow.numel(); ++j)
                shadow[j] = static_cast<T>(a * static_cast<double>(shadow[j]) +
                                           (1.0 - a) * static_cast<double>(theta[j]));
        }
        ++updates_;
    }

    const Model<T>& teacher() const { return teacher_; }
    double decay() const { return decay_; }
    std::size_t update_count() const { return updates_; }

private:
    double decay_ = 0.99;
    std::size_t updates_ = 0;
    Model<T> teacher_;
};

struct StepStats {
    double loss = 0.0;
    double accuracy = 0.0; // on the training batch
    std::size_t drop_count = 0;
    std::size_t zero_attribution_drops = 0;
    double wall_ms = 0.0;
};

namespace detail {

template <typename T>
double batch_accuracy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
    const std::size_t N = logits.extent(0), C = logits.extent(1);
    std::size_t hits = 0;
    for (std::size_t n = 0; n < N; ++n) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (logits.at2(n, c) > logits.at2(n, best)) best = c;
        if (best == labels[n]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(N);
}

template <typename T>
std::vector<Tensor<T>> collect_grads(Tape<T>& tape, const Var<T>& loss,
                                     const std::vector<int>& nodes) {
    auto result = tape.backward(loss, nodes);
    std::vector<Tensor<T>> out;
    out.reserve(nodes.size());
    for (int n : nodes) out.push_back(result.at(n));
    return out;
}

} // namespace detail

/// One plain supervised step: forward, cross-entropy, backward, update.
template <typename T>
StepStats vanilla_step(Model<T>& model, const Tensor<T>& x, const std::vector<std::size_t>& labels,
                       Optimizer<T>& opt, Rng* arch_rng = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    Tape<T> tape;
    auto bound = bind(model, tape);
    auto z = bound.encode(Var<T>::constant(x), true, arch_rng);
    auto logits = bound.classify(z, true, arch_rng);
    auto loss = cross_entropy(&tape, logits, labels);
    opt.step(model, detail::collect_grads(tape, loss, bound.trainable_nodes));

    StepStats s;
    s.loss = static_cast<double>(loss.value[0]);
    s.accuracy = detail::batch_accuracy(logits.value, labels);
    s.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    return s;
}

/// Baseline: classical dropout applied to the latent features z, the same
/// site SGDrop masks, so the two regularizers are directly comparable.
template <typename T>
StepStats dropout_step(Model<T>& model, const Tensor<T>& x, const std::vector<std::size_t>& labels,
                       double p, Rng& rng, Optimizer<T>& opt) {
    const auto t0 = std::chrono::steady_clock::now();
    Tape<T> tape;
    auto bound = bind(model, tape);
    auto z = bound.encode(Var<T>::constant(x), true, &rng);
    auto dropped = classical_dropout(&tape, z, p, true, &rng);
    auto logits = bound.classify(dropped, true, &rng);
    auto loss = cross_entropy(&tape, logits, labels);
    opt.step(model, detail::collect_grads(tape, loss, bound.trainable_nodes));

    StepStats s;
    s.loss = static_cast<double>(loss.value[0]);
    s.accuracy = detail::batch_accuracy(logits.value, labels);
    s.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    return s;
}

/// Per-sample drop masks for a batch, from teacher attribution at the given
/// drop fraction. Returns the stacked bits plus drop accounting.
template <typename T>
DropMask<T> batch_masks(const Model<T>& teacher, const Tensor<T>& x,
                        const std::vector<std::size_t>& labels, double rho, ScoreMode score) {
    const Tensor<T> z = teacher.encode(nullptr, Var<T>::constant(x)).value;
    const Tensor<T> attr = latent_attribution_values(teacher, z, labels, score);
    const std::size_t N = x.extent(0);
    const std::size_t per = attr.numel() / N;

    DropMask<T> batch;
    batch.bits = Tensor<T>(z.shape(), T{1});
    for (std::size_t n = 0; n < N; ++n) {
        Tensor<T> one(teacher.feature_shape());
        std::copy(attr.data() + n * per, attr.data() + (n + 1) * per, one.data());
        AttributionMap<T> a{std::move(one), labels[n],
                            AttributionSource::live};
        DropMask<T> m = compute_mask(a, rho);
        std::copy(m.bits.data(), m.bits.data() + per, batch.bits.data() + n * per);
        batch.drop_count = m.drop_count; // k is identical for every sample
        batch.zero_attribution_drops += m.zero_attribution_drops;
    }
    return batch;
}

/// The composed SGDrop step: (1) teacher pass (EMA parameters when enabled,
/// live parameters otherwise) produces latent attribution for the true
/// labels; (2) the top-rho mask; (3) the student forward with masked
/// features and cross-entropy; (4) backward through encoder and classifier
/// with the mask constant; (5) optimizer update; (6) EMA update.
template <typename T>
StepStats sgdrop_step(Model<T>& model, EmaState<T>* ema, const Tensor<T>& x,
                      const std::vector<std::size_t>& labels, const SgdropConfig& cfg, double rho,
                      Optimizer<T>& opt, Rng* arch_rng = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    const Model<T>& teacher = (cfg.use_ema && ema) ? ema->teacher() : model;
    DropMask<T> mask = batch_masks(teacher, x, labels, rho, cfg.score);

    Tape<T> tape;
    auto bound = bind(model, tape);
    auto z = bound.encode(Var<T>::constant(x), true, arch_rng);
    auto masked = apply_mask(&tape, z, mask.bits);
    auto logits = bound.classify(masked, true, arch_rng);
    auto loss = cross_entropy(&tape, logits, labels);
    opt.step(model, detail::collect_grads(tape, loss, bound.trainable_nodes));
    if (cfg.use_ema && ema) ema->update(model);

    StepStats s;
    s.loss = static_cast<double>(loss.value[0]);
    s.accuracy = detail::batch_accuracy(logits.value, labels);
    s.drop_count = mask.drop_count;
    s.zero_attribution_drops = mask.zero_attribution_drops;
    s.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    return s;
}

/// Convenience overload evaluating the curriculum at the given epoch.
template <typename T>
StepStats sgdrop_step(Model<T>& model, EmaState<T>* ema, const Tensor<T>& x,
                      const std::vector<std::size_t>& labels, const SgdropConfig& cfg,
                      std::size_t epoch, std::size_t total_epochs, Optimizer<T>& opt,
                      Rng* arch_rng = nullptr) {
    return sgdrop_step(model, ema, x, labels, cfg, rho_at(cfg, epoch, total_epochs), opt, arch_rng);
}

} // namespace sgdrop
