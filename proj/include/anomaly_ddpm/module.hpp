#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "anomaly_ddpm/autograd.hpp"
#include "anomaly_ddpm/rng.hpp"
#include "anomaly_ddpm/serialize.hpp"
#include "anomaly_ddpm/tensor.hpp"

namespace anomaly_ddpm::nn {

// Owns the named parameters of a model. Registration order is the
// serialization order inside checkpoints.
class ParamStore {
  public:
    Parameter* add(const std::string& name, Tensor init) {
        if (by_name_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
        by_name_[name] = params_.back().get();
        return params_.back().get();
    }

    Parameter* get(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw IoError("unknown parameter: " + name);
        return it->second;
    }

    const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }

    int64_t count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p->value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p->grad.fill(0.0f);
    }

    void save_weights(TensorFile& tf, const std::string& prefix = "param/") const {
        for (const auto& p : params_) tf.put(prefix + p->name, p->value);
    }

    void load_weights(const TensorFile& tf, const std::string& prefix = "param/") {
        for (auto& p : params_) {
            const Tensor& t = tf.get(prefix + p->name);
            if (!t.same_shape(p->value))
                throw IoError("checkpoint shape mismatch for " + p->name + ": expected " +
                              Tensor::shape_str(p->value.shape()) + ", found " +
                              Tensor::shape_str(t.shape()));
            p->value = t;
        }
    }

    void save_adam_state(TensorFile& tf) const {
        for (const auto& p : params_) {
            tf.put("adam_m/" + p->name, p->adam_m);
            tf.put("adam_v/" + p->name, p->adam_v);
        }
    }

    void load_adam_state(const TensorFile& tf) {
        for (auto& p : params_) {
            p->adam_m = tf.get("adam_m/" + p->name);
            p->adam_v = tf.get("adam_v/" + p->name);
        }
    }

    uint64_t weights_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : params_) {
            h = fnv1a64(p->name.data(), p->name.size(), h);
            h = fnv1a64(p->value.data(), static_cast<size_t>(p->value.numel()) * sizeof(float), h);
        }
        return h;
    }

  private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, Parameter*> by_name_;
};

inline double global_grad_norm(const ParamStore& store) {
    double s = 0.0;
    for (const auto& p : store.all())
        for (int64_t i = 0; i < p->grad.numel(); ++i) s += static_cast<double>(p->grad[i]) * p->grad[i];
    return std::sqrt(s);
}

inline double clip_global_grad_norm(ParamStore& store, double max_norm) {
    double norm = global_grad_norm(store);
    if (norm > max_norm && norm > 0.0) {
        float k = static_cast<float>(max_norm / norm);
        for (const auto& p : store.all()) p->grad *= k;
    }
    return norm;
}

class Adam {
  public:
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    int64_t step_count = 0;

    explicit Adam(float learning_rate) : lr(learning_rate) {}

    void step(ParamStore& store) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(step_count));
        for (const auto& p : store.all()) {
            float* w = p->value.data();
            float* g = p->grad.data();
            float* m = p->adam_m.data();
            float* v = p->adam_v.data();
            const int64_t n = p->value.numel();
            for (int64_t i = 0; i < n; ++i) {
                m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
};

// --- weight initialization ----------------------------------------------

inline Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double std = std::sqrt(2.0 / std::max(1, fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal() * std);
    return t;
}

// conv weight [Co,Ci,kh,kw]
inline Tensor conv_init(int co, int ci, int kh, int kw, Rng& rng) {
    return he_normal({co, ci, kh, kw}, ci * kh * kw, rng);
}

inline Tensor linear_init(int out, int in, Rng& rng) { return he_normal({out, in}, in, rng); }

}  // namespace anomaly_ddpm::nn
