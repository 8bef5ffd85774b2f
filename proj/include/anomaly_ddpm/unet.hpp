#pragma once

#include <memory>
#include <string>
#include <vector>

#include "anomaly_ddpm/diffusion.hpp"
#include "anomaly_ddpm/module.hpp"
#include "anomaly_ddpm/nn_ops.hpp"

namespace anomaly_ddpm::diffusion {

struct UNetConfig {
    int in_channels = 3;                  // latent channels n_z
    std::vector<int> widths = {48, 96, 96};  // one per resolution level
    int temb_dim = 128;                   // sinusoidal embedding size
    int temb_hidden = 256;                // embedding MLP width
    int norm_groups = 8;

    nlohmann::json to_json() const {
        return {{"in_channels", in_channels}, {"widths", widths},     {"temb_dim", temb_dim},
                {"temb_hidden", temb_hidden}, {"norm_groups", norm_groups}};
    }
    static UNetConfig from_json(const nlohmann::json& j) {
        UNetConfig c;
        c.in_channels = j.at("in_channels").get<int>();
        c.widths = j.at("widths").get<std::vector<int>>();
        c.temb_dim = j.at("temb_dim").get<int>();
        c.temb_hidden = j.at("temb_hidden").get<int>();
        c.norm_groups = j.at("norm_groups").get<int>();
        return c;
    }
};

namespace detail {

inline int norm_groups_for(int channels, int requested) {
    int g = std::min(requested, channels);
    while (g > 1 && channels % g != 0) --g;
    return g;
}

struct ConvLayer {
    nn::Parameter* w = nullptr;
    nn::Parameter* b = nullptr;
    int stride = 1, pad = 1;

    ConvLayer() = default;
    ConvLayer(nn::ParamStore& ps, const std::string& name, int ci, int co, int k, int stride_,
              Rng& rng, bool zero_init = false)
        : stride(stride_), pad(k / 2) {
        Tensor wt = zero_init ? Tensor({co, ci, k, k}) : nn::conv_init(co, ci, k, k, rng);
        w = ps.add(name + ".w", std::move(wt));
        b = ps.add(name + ".b", Tensor({co}));
    }

    nn::Var operator()(const nn::Var& x) const {
        return nn::conv2d(x, nn::param_var(*w), nn::param_var(*b), stride, pad);
    }
};

struct NormLayer {
    nn::Parameter* gamma = nullptr;
    nn::Parameter* beta = nullptr;
    int groups = 1;

    NormLayer() = default;
    NormLayer(nn::ParamStore& ps, const std::string& name, int channels, int requested_groups) {
        groups = norm_groups_for(channels, requested_groups);
        gamma = ps.add(name + ".g", Tensor::full({channels}, 1.0f));
        beta = ps.add(name + ".b", Tensor({channels}));
    }

    nn::Var operator()(const nn::Var& x) const {
        return nn::group_norm(x, groups, nn::param_var(*gamma), nn::param_var(*beta));
    }
};

struct LinearLayer {
    nn::Parameter* w = nullptr;
    nn::Parameter* b = nullptr;

    LinearLayer() = default;
    LinearLayer(nn::ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
        w = ps.add(name + ".w", nn::linear_init(out, in, rng));
        b = ps.add(name + ".b", Tensor({out}));
    }

    nn::Var operator()(const nn::Var& x) const {
        return nn::linear(x, nn::param_var(*w), nn::param_var(*b));
    }
};

// GN -> SiLU -> conv -> +temb -> GN -> SiLU -> conv(zero-init), residual skip.
struct TimeResBlock {
    NormLayer gn1, gn2;
    ConvLayer conv1, conv2;
    LinearLayer temb_proj;
    ConvLayer skip;  // 1x1, only when channel count changes
    bool has_skip = false;

    TimeResBlock() = default;
    TimeResBlock(nn::ParamStore& ps, const std::string& name, int ci, int co, int temb_hidden,
                 int groups, Rng& rng)
        : gn1(ps, name + ".gn1", ci, groups),
          gn2(ps, name + ".gn2", co, groups),
          conv1(ps, name + ".conv1", ci, co, 3, 1, rng),
          conv2(ps, name + ".conv2", co, co, 3, 1, rng, /*zero_init=*/true),
          temb_proj(ps, name + ".temb", temb_hidden, co, rng) {
        if (ci != co) {
            skip = ConvLayer(ps, name + ".skip", ci, co, 1, 1, rng);
            has_skip = true;
        }
    }

    nn::Var operator()(const nn::Var& x, const nn::Var& temb) const {
        nn::Var h = conv1(nn::silu(gn1(x)));
        h = nn::add_sample_channel(h, temb_proj(nn::silu(temb)));
        h = conv2(nn::silu(gn2(h)));
        return nn::add(has_skip ? skip(x) : x, h);
    }
};

// Single-head self-attention over spatial positions, zero-init projection.
struct AttentionBlock {
    NormLayer norm;
    ConvLayer q, k, v, proj;
    int channels = 0;

    AttentionBlock() = default;
    AttentionBlock(nn::ParamStore& ps, const std::string& name, int c, int groups, Rng& rng)
        : norm(ps, name + ".norm", c, groups),
          q(ps, name + ".q", c, c, 1, 1, rng),
          k(ps, name + ".k", c, c, 1, 1, rng),
          v(ps, name + ".v", c, c, 1, 1, rng),
          proj(ps, name + ".proj", c, c, 1, 1, rng, /*zero_init=*/true),
          channels(c) {}

    nn::Var operator()(const nn::Var& x) const {
        const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int P = H * W;
        nn::Var h = norm(x);
        nn::Var qv = nn::reshape(q(h), {N, C, P});
        nn::Var kv = nn::reshape(k(h), {N, C, P});
        nn::Var vv = nn::reshape(v(h), {N, C, P});
        // scores[p, p'] = <q(., p), k(., p')> / sqrt(C)
        nn::Var scores =
            nn::mul_scalar(nn::bmm(nn::transpose_last2(qv), kv), 1.0f / std::sqrt(static_cast<float>(C)));
        nn::Var attn = nn::softmax_lastdim(scores);
        nn::Var out = nn::bmm(vv, nn::transpose_last2(attn));
        out = proj(nn::reshape(out, {N, C, H, W}));
        return nn::add(x, out);
    }
};

}  // namespace detail

// Noise-prediction U-Net with sinusoidal timestep embedding, one residual
// block per resolution level and self-attention at the coarsest level.
class EpsilonUNet : public EpsilonModel {
  public:
    EpsilonUNet(UNetConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
        if (cfg_.widths.empty()) throw ConfigError("unet needs at least one level");
        Rng rng = Rng::keyed(init_seed, {0x756e6574ULL});
        const int L = static_cast<int>(cfg_.widths.size());
        const auto& w = cfg_.widths;
        const int g = cfg_.norm_groups;

        temb1_ = detail::LinearLayer(store_, "temb1", cfg_.temb_dim, cfg_.temb_hidden, rng);
        temb2_ = detail::LinearLayer(store_, "temb2", cfg_.temb_hidden, cfg_.temb_hidden, rng);
        stem_ = detail::ConvLayer(store_, "stem", cfg_.in_channels, w[0], 3, 1, rng);

        for (int i = 0; i < L; ++i) {
            down_.emplace_back(store_, "down" + std::to_string(i), w[static_cast<size_t>(i)],
                               w[static_cast<size_t>(i)], cfg_.temb_hidden, g, rng);
            if (i + 1 < L)
                downsample_.emplace_back(store_, "downsample" + std::to_string(i),
                                         w[static_cast<size_t>(i)], w[static_cast<size_t>(i) + 1],
                                         3, 2, rng);
        }
        mid1_ = detail::TimeResBlock(store_, "mid1", w.back(), w.back(), cfg_.temb_hidden, g, rng);
        attn_ = detail::AttentionBlock(store_, "attn", w.back(), g, rng);
        mid2_ = detail::TimeResBlock(store_, "mid2", w.back(), w.back(), cfg_.temb_hidden, g, rng);

        for (int i = L - 1; i >= 0; --i) {
            up_.emplace_back(store_, "up" + std::to_string(i), 2 * w[static_cast<size_t>(i)],
                             w[static_cast<size_t>(i)], cfg_.temb_hidden, g, rng);
            if (i > 0)
                upsample_.emplace_back(store_, "upsample" + std::to_string(i),
                                       w[static_cast<size_t>(i)], w[static_cast<size_t>(i) - 1], 3,
                                       1, rng);
        }
        out_norm_ = detail::NormLayer(store_, "out_norm", w[0], g);
        out_conv_ = detail::ConvLayer(store_, "out_conv", w[0], cfg_.in_channels, 3, 1, rng,
                                      /*zero_init=*/true);
    }

    // Graph-building forward; x is [N, n_z, h, w], t one timestep per sample.
    nn::Var forward(const nn::Var& x, const std::vector<int>& t) const {
        if (x.dim(0) != static_cast<int>(t.size()))
            throw ShapeError("unet: batch size does not match timestep count");
        if (x.dim(1) != cfg_.in_channels) throw ShapeError("unet: channel mismatch");
        const int L = static_cast<int>(cfg_.widths.size());

        nn::Var te = nn::constant(nn::timestep_embedding(t, cfg_.temb_dim));
        te = temb2_(nn::silu(temb1_(te)));

        nn::Var h = stem_(x);
        std::vector<nn::Var> skips;
        for (int i = 0; i < L; ++i) {
            h = down_[static_cast<size_t>(i)](h, te);
            skips.push_back(h);
            if (i + 1 < L) h = downsample_[static_cast<size_t>(i)](h);
        }
        h = mid1_(h, te);
        h = attn_(h);
        h = mid2_(h, te);
        for (int j = 0; j < L; ++j) {
            const int i = L - 1 - j;
            h = nn::concat_channels(h, skips[static_cast<size_t>(i)]);
            h = up_[static_cast<size_t>(j)](h, te);
            if (i > 0) h = upsample_[static_cast<size_t>(j)](nn::upsample_nearest2x(h));
        }
        return out_conv_(nn::silu(out_norm_(h)));
    }

    Tensor predict(const Tensor& zt, const std::vector<int>& t) const override {
        nn::NoGradGuard ng;
        return forward(nn::constant(zt), t).val();
    }

    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }
    const UNetConfig& config() const { return cfg_; }

  private:
    UNetConfig cfg_;
    mutable nn::ParamStore store_;
    detail::LinearLayer temb1_, temb2_;
    detail::ConvLayer stem_;
    std::vector<detail::TimeResBlock> down_;
    std::vector<detail::ConvLayer> downsample_;
    detail::TimeResBlock mid1_, mid2_;
    detail::AttentionBlock attn_;
    std::vector<detail::TimeResBlock> up_;
    std::vector<detail::ConvLayer> upsample_;
    detail::NormLayer out_norm_;
    detail::ConvLayer out_conv_;
};

}  // namespace anomaly_ddpm::diffusion
