#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hsib/tensor.hpp"

namespace hsib {

enum class OptKind { Sgd, Adam };

struct OptimConfig {
    OptKind kind = OptKind::Adam;
    double lr = 1e-3;
    double momentum = 0.9;   // sgd
    double beta1 = 0.9;      // adam
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline OptKind opt_kind_from_string(const std::string& s) {
    if (s == "sgd") return OptKind::Sgd;
    if (s == "adam") return OptKind::Adam;
    throw Error("unknown optimizer '" + s + "'");
}

// Deterministic parameter updater; per-parameter state buffers keyed by the
// position in the parameter list.
template <class T>
class OptimizerT {
public:
    OptimizerT(std::vector<TensPtr<T>> params, OptimConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        if (!(cfg_.lr > 0)) throw Error("optimizer: learning rate must be > 0");
        state_a_.resize(params_.size());
        state_b_.resize(params_.size());
    }

    const OptimConfig& config() const { return cfg_; }

    void zero_grad() {
        for (auto& p : params_)
            if (p->has_grad()) p->zero_grad();
    }

    void step() {
        ++t_;
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p->has_grad()) continue;  // never touched by a loss: no update
            if (cfg_.kind == OptKind::Sgd)
                step_sgd(i, *p);
            else
                step_adam(i, *p);
        }
    }

private:
    void step_sgd(size_t i, Tens<T>& p) {
        auto& vel = state_a_[i];
        if (cfg_.momentum != 0.0 && vel.size() != p.data.size()) vel.assign(p.data.size(), T(0));
        const T lr = static_cast<T>(cfg_.lr);
        const T mu = static_cast<T>(cfg_.momentum);
        for (size_t j = 0; j < p.data.size(); ++j) {
            T g = p.grad[j];
            if (cfg_.momentum != 0.0) {
                vel[j] = mu * vel[j] + g;
                g = vel[j];
            }
            p.data[j] -= lr * g;
        }
    }

    void step_adam(size_t i, Tens<T>& p) {
        auto& m = state_a_[i];
        auto& v = state_b_[i];
        if (m.size() != p.data.size()) m.assign(p.data.size(), T(0));
        if (v.size() != p.data.size()) v.assign(p.data.size(), T(0));
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (size_t j = 0; j < p.data.size(); ++j) {
            const double g = static_cast<double>(p.grad[j]);
            m[j] = static_cast<T>(b1 * m[j] + (1.0 - b1) * g);
            v[j] = static_cast<T>(b2 * v[j] + (1.0 - b2) * g * g);
            const double mh = m[j] / bc1;
            const double vh = v[j] / bc2;
            p.data[j] -= static_cast<T>(cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
        }
    }

    std::vector<TensPtr<T>> params_;
    OptimConfig cfg_;
    int64_t t_ = 0;
    std::vector<std::vector<T>> state_a_;  // sgd velocity / adam m
    std::vector<std::vector<T>> state_b_;  // adam v
};

using Optimizer = OptimizerT<float>;

}  // namespace hsib
