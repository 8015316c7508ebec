#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "subjectdiff/core/nn.hpp"

namespace sdg {

// AdamW with decoupled weight decay. Operates on a caller-chosen subset of a
// registry so partition-restricted tuning leaves other parameters untouched.
template <typename T>
class AdamW {
public:
    struct Slot {
        std::string name;
        Tensor<T> t;
        std::vector<T> m, v;
        bool decay;
    };

    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
        : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

    void attach(ParamRegistry<T>& reg, std::function<bool(const typename ParamRegistry<T>::Entry&)> filter) {
        slots_.clear();
        for (auto& e : reg.entries()) {
            if (!filter(e)) continue;
            Slot s;
            s.name = e.name;
            s.t = e.t;
            s.m.assign(static_cast<size_t>(e.t.numel()), T(0));
            s.v.assign(static_cast<size_t>(e.t.numel()), T(0));
            // norm gains and biases are exempt from decay
            s.decay = e.t.ndim() >= 2;
            slots_.push_back(std::move(s));
        }
    }

    void step(double lr) {
        step_ += 1;
        const double bc1 = 1.0 - std::pow(beta1_, step_);
        const double bc2 = 1.0 - std::pow(beta2_, step_);
        for (auto& s : slots_) {
            if (!s.t.has_grad()) continue;
            const T* g = s.t.grad_vec().data();
            T* w = s.t.data();
            const int64_t n = s.t.numel();
            const double wd = s.decay ? wd_ : 0.0;
            for (int64_t i = 0; i < n; i++) {
                const double gi = static_cast<double>(g[i]);
                double mi = beta1_ * s.m[static_cast<size_t>(i)] + (1.0 - beta1_) * gi;
                double vi = beta2_ * s.v[static_cast<size_t>(i)] + (1.0 - beta2_) * gi * gi;
                s.m[static_cast<size_t>(i)] = static_cast<T>(mi);
                s.v[static_cast<size_t>(i)] = static_cast<T>(vi);
                const double mhat = mi / bc1, vhat = vi / bc2;
                double wi = static_cast<double>(w[i]);
                wi -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd * wi);
                w[i] = static_cast<T>(wi);
            }
        }
    }

    int64_t step_count() const { return step_; }
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }
    void set_step_count(int64_t s) { step_ = s; }

private:
    double beta1_, beta2_, eps_, wd_;
    int64_t step_ = 0;
    std::vector<Slot> slots_;
};

// Exponential moving average of parameter values, kept alongside the raw
// weights and swapped in for sampling.
template <typename T>
class Ema {
public:
    explicit Ema(double decay = 0.999) : decay_(decay) {}

    void init_from(const ParamRegistry<T>& reg) {
        shadow_.clear();
        for (const auto& e : reg.entries()) shadow_[e.name] = e.t.values();
    }

    void update(const ParamRegistry<T>& reg) {
        for (const auto& e : reg.entries()) {
            auto& s = shadow_[e.name];
            const T* w = e.t.data();
            for (size_t i = 0; i < s.size(); i++)
                s[i] = static_cast<T>(decay_ * s[i] + (1.0 - decay_) * w[i]);
        }
    }

    // Swap shadow and live values; call twice to restore.
    void swap_into(ParamRegistry<T>& reg) {
        for (auto& e : reg.entries()) {
            auto it = shadow_.find(e.name);
            if (it == shadow_.end()) continue;
            e.t.values().swap(it->second);
        }
    }

    bool empty() const { return shadow_.empty(); }
    double decay() const { return decay_; }
    std::unordered_map<std::string, std::vector<T>>& shadow() { return shadow_; }
    const std::unordered_map<std::string, std::vector<T>>& shadow() const { return shadow_; }

private:
    double decay_;
    std::unordered_map<std::string, std::vector<T>> shadow_;
};

}  // namespace sdg
