#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "subjectdiff/core/ops.hpp"
#include "subjectdiff/core/rng.hpp"
#include "subjectdiff/core/tensor.hpp"

namespace sdg {

// Parameter partitions. Object-attention parameters are tagged separately so
// training can freeze or update them as a unit and tests can hash them.
enum class Partition { kBackbone = 0, kObjectAttention = 1 };

inline const char* partition_name(Partition p) {
    return p == Partition::kBackbone ? "backbone" : "object_attention";
}

template <typename T>
class ParamRegistry {
public:
    struct Entry {
        std::string name;
        Tensor<T> t;
        Partition part;
    };

    Tensor<T> add(const std::string& name, std::vector<int> shape, Partition part) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter: " + name);
        Entry e{name, Tensor<T>::leaf(std::move(shape), true), part};
        index_[name] = entries_.size();
        entries_.push_back(std::move(e));
        return entries_.back().t;
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    Entry& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter: " + name);
        return entries_[it->second];
    }
    const Entry* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &entries_[it->second];
    }

    int64_t param_count(Partition part) const {
        int64_t n = 0;
        for (const auto& e : entries_)
            if (e.part == part) n += e.t.numel();
        return n;
    }
    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.t.zero_grad();
    }

    // Content hash over names and raw value bytes, in registration order.
    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& e : entries_) {
            h = fnv1a64(e.name.data(), e.name.size(), h);
            h = fnv1a64(e.t.data(), sizeof(T) * static_cast<size_t>(e.t.numel()), h);
        }
        return h;
    }

    uint64_t partition_hash(Partition part) const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& e : entries_) {
            if (e.part != part) continue;
            h = fnv1a64(e.name.data(), e.name.size(), h);
            h = fnv1a64(e.t.data(), sizeof(T) * static_cast<size_t>(e.t.numel()), h);
        }
        return h;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

template <typename T>
void init_normal(Tensor<T>& t, Rng& rng, double stddev) {
    for (auto& x : t.values()) x = static_cast<T>(rng.normal() * stddev);
}

// He-style fan-in init, gain tuned for SiLU-ish activations.
template <typename T>
void init_he(Tensor<T>& t, Rng& rng, int64_t fan_in) {
    init_normal(t, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

template <typename T>
void init_zero(Tensor<T>& t) {
    std::fill(t.values().begin(), t.values().end(), T(0));
}

template <typename T>
void init_const(Tensor<T>& t, T v) {
    std::fill(t.values().begin(), t.values().end(), v);
}

// ---------------------------------------------------------------------------
// Modules. Thin structs of parameter handles; forward composes ops.
// ---------------------------------------------------------------------------

template <typename T>
struct LinearLayer {
    Tensor<T> w, b;

    LinearLayer() = default;
    LinearLayer(ParamRegistry<T>& reg, const std::string& prefix, int in, int out, Rng& rng, Partition part,
                bool zero_init = false) {
        w = reg.add(prefix + ".w", {in, out}, part);
        b = reg.add(prefix + ".b", {out}, part);
        if (zero_init)
            init_zero(w);
        else
            init_he(w, rng, in);
        init_zero(b);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return linear(x, w, b); }
};

template <typename T>
struct Conv2dLayer {
    Tensor<T> w, b;
    int stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(ParamRegistry<T>& reg, const std::string& prefix, int in_ch, int out_ch, int k, int stride_, int pad_,
                Rng& rng, Partition part, bool zero_init = false)
        : stride(stride_), pad(pad_) {
        w = reg.add(prefix + ".w", {out_ch, in_ch, k, k}, part);
        b = reg.add(prefix + ".b", {out_ch}, part);
        if (zero_init)
            init_zero(w);
        else
            init_he(w, rng, static_cast<int64_t>(in_ch) * k * k);
        init_zero(b);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct GroupNormLayer {
    Tensor<T> gamma, beta;
    int groups = 8;

    GroupNormLayer() = default;
    GroupNormLayer(ParamRegistry<T>& reg, const std::string& prefix, int channels, int groups_, Partition part)
        : groups(groups_) {
        gamma = reg.add(prefix + ".gamma", {channels}, part);
        beta = reg.add(prefix + ".beta", {channels}, part);
        init_const(gamma, T(1));
        init_zero(beta);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return group_norm(x, gamma, beta, groups); }
};

// Sinusoidal embedding for integer timesteps; no parameters.
template <typename T>
Tensor<T> sinusoidal_embedding(const std::vector<int>& ts, int dim, double max_period = 10000.0) {
    const int B = static_cast<int>(ts.size());
    const int half = dim / 2;
    auto out = Tensor<T>::leaf({B, dim}, false);
    for (int b = 0; b < B; b++) {
        T* row = out.data() + static_cast<int64_t>(b) * dim;
        for (int i = 0; i < half; i++) {
            const double freq = std::exp(-std::log(max_period) * i / half);
            const double ang = ts[static_cast<size_t>(b)] * freq;
            row[i] = static_cast<T>(std::cos(ang));
            row[half + i] = static_cast<T>(std::sin(ang));
        }
    }
    return out;
}

}  // namespace sdg
