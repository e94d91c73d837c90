#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "model.hpp"

namespace sgdrop {

enum class LrSchedule { constant, step };

struct OptimizerConfig {
    enum class Kind { sgd, adam };
    Kind kind = Kind::adam;
    double lr = 1e-4;
    double momentum = 0.0; // sgd
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8; // adam
    LrSchedule schedule = LrSchedule::constant;
    std::size_t step_every_epochs = 30; // step schedule: lr /= divisor every N epochs
    double step_divisor = 10.0;
};

/// SGD-with-momentum and Adam over a model's trainable parameters. Moment
/// buffers are keyed by parameter name so freezing or unfreezing layers
/// between steps does not scramble state. The epoch-step schedule is applied
/// at epoch boundaries via set_epoch.
template <typename T>
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {
        if (cfg_.lr <= 0.0) throw std::invalid_argument("optimizer: lr must be > 0");
    }

    const OptimizerConfig& config() const { return cfg_; }
    std::size_t step_count() const { return step_; }

    void set_epoch(std::size_t epoch) {
        if (cfg_.schedule == LrSchedule::step)
            lr_scale_ = std::pow(1.0 / cfg_.step_divisor,
                                 static_cast<double>(epoch / cfg_.step_every_epochs));
        else
            lr_scale_ = 1.0;
    }

    double current_lr() const { return cfg_.lr * lr_scale_; }

    /// Apply one update. `grads` must align with model.trainable_parameters().
    void step(Model<T>& model, const std::vector<Tensor<T>>& grads) {
        auto params = model.trainable_parameters();
        if (grads.size() != params.size())
            throw std::invalid_argument("optimizer: " + std::to_string(grads.size()) +
                                        " gradients for " + std::to_string(params.size()) +
                                        " trainable parameters");
        ++step_;
        const double lr = current_lr();
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor<T>& theta = params[i].tensor();
            const Tensor<T>& g = grads[i];
            if (g.empty())
                throw std::invalid_argument("optimizer: missing gradient for " + params[i].name);
            if (!same_shape(g.shape(), theta.shape()))
                throw std::invalid_argument("optimizer: gradient shape " + shape_str(g.shape()) +
                                            " does not match " + params[i].name + " " +
                                            shape_str(theta.shape()));
            if (cfg_.kind == OptimizerConfig::Kind::sgd)
                sgd_update(params[i].name, theta, g, lr);
            else
                adam_update(params[i].name, theta, g, lr);
        }
    }

private:
    Tensor<T>& buffer(std::unordered_map<std::string, Tensor<T>>& store, const std::string& name,
                      const Shape& shape) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Tensor<T>(shape)).first;
        return it->second;
    }

    void sgd_update(const std::string& name, Tensor<T>& theta, const Tensor<T>& g, double lr) {
        if (cfg_.momentum == 0.0) {
            for (std::size_t i = 0; i < theta.numel(); ++i)
                theta[i] -= static_cast<T>(lr * static_cast<double>(g[i]));
            return;
        }
        Tensor<T>& v = buffer(velocity_, name, theta.shape());
        for (std::size_t i = 0; i < theta.numel(); ++i) {
            const double vi = cfg_.momentum * static_cast<double>(v[i]) + static_cast<double>(g[i]);
            v[i] = static_cast<T>(vi);
            theta[i] -= static_cast<T>(lr * vi);
        }
    }

    void adam_update(const std::string& name, Tensor<T>& theta, const Tensor<T>& g, double lr) {
        Tensor<T>& m = buffer(moment1_, name, theta.shape());
        Tensor<T>& v = buffer(moment2_, name, theta.shape());
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
        for (std::size_t i = 0; i < theta.numel(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            theta[i] -= static_cast<T>(lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps));
        }
    }

    OptimizerConfig cfg_;
    std::size_t step_ = 0;
    double lr_scale_ = 1.0;
    std::unordered_map<std::string, Tensor<T>> velocity_, moment1_, moment2_;
};

} // namespace sgdrop
