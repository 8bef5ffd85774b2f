#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "anomaly_ddpm/module.hpp"
#include "anomaly_ddpm/nn_ops.hpp"
#include "anomaly_ddpm/serialize.hpp"
#include "anomaly_ddpm/unet.hpp"

namespace anomaly_ddpm::vqvae {

struct VqVaeConfig {
    int f = 4;                            // spatial downsampling factor, power of two
    int n_z = 3;                          // embedding dimension
    int codebook_size = 256;              // K
    float commit_weight = 0.25f;          // beta on the commitment term
    std::vector<int> widths = {32, 64, 64};  // channels per resolution level, log2(f)+1 entries
    float ema_decay = 0.99f;
    float ema_epsilon = 1e-5f;
    float lr = 1e-3f;
    int epochs = 40;
    int batch_size = 32;
    int norm_groups = 8;
    bool restart_dead_codes = true;       // re-seed unused codes from batch fibers

    int levels() const { return static_cast<int>(widths.size()); }

    void validate() const {
        if (f < 2 || (f & (f - 1)) != 0) throw ConfigError("vqvae: f must be a power of two >= 2");
        int l = 0;
        for (int v = f; v > 1; v >>= 1) ++l;
        if (static_cast<int>(widths.size()) != l + 1)
            throw ConfigError("vqvae: widths must have log2(f)+1 entries, got " +
                              std::to_string(widths.size()));
        if (n_z < 1 || codebook_size < 2) throw ConfigError("vqvae: need n_z >= 1 and K >= 2");
    }

    nlohmann::json to_json() const {
        return {{"f", f},
                {"n_z", n_z},
                {"codebook_size", codebook_size},
                {"commit_weight", commit_weight},
                {"widths", widths},
                {"ema_decay", ema_decay},
                {"ema_epsilon", ema_epsilon},
                {"lr", lr},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"norm_groups", norm_groups},
                {"restart_dead_codes", restart_dead_codes}};
    }

    static VqVaeConfig from_json(const nlohmann::json& j) {
        VqVaeConfig c;
        c.f = j.at("f").get<int>();
        c.n_z = j.at("n_z").get<int>();
        c.codebook_size = j.at("codebook_size").get<int>();
        c.commit_weight = j.at("commit_weight").get<float>();
        c.widths = j.at("widths").get<std::vector<int>>();
        c.ema_decay = j.at("ema_decay").get<float>();
        c.ema_epsilon = j.at("ema_epsilon").get<float>();
        c.lr = j.at("lr").get<float>();
        c.epochs = j.at("epochs").get<int>();
        c.batch_size = j.at("batch_size").get<int>();
        c.norm_groups = j.at("norm_groups").get<int>();
        c.restart_dead_codes = j.at("restart_dead_codes").get<bool>();
        c.validate();
        return c;
    }
};

// Finite embedding table with the EMA statistics that replace gradient
// updates for the codebook.
struct Codebook {
    Tensor vectors;           // [K, n_z]
    Tensor ema_cluster_size;  // [K]
    Tensor ema_embed_sum;     // [K, n_z]
    float decay = 0.99f;
    float epsilon = 1e-5f;
    bool initialized = false;

    int size() const { return vectors.dim(0); }
    int dim() const { return vectors.dim(1); }
};

struct QuantizeResult {
    Tensor values;                 // same shape as input, fibers snapped to codebook rows
    std::vector<int32_t> indices;  // one per spatial position, [N*h*w]
};

// Single-image latent with its quantization state.
struct LatentTensor {
    Tensor values;                 // [n_z, h, w]
    bool quantized = false;
    std::vector<int32_t> indices;  // h*w entries when quantized, else empty

    int channels() const { return values.dim(0); }
    int height() const { return values.dim(1); }
    int width() const { return values.dim(2); }
};

// Nearest codebook vector per spatial fiber (squared Euclidean distance,
// ties broken toward the lowest index). z_e is [N, n_z, h, w].
inline QuantizeResult quantize_nearest(const Tensor& z_e, const Tensor& codebook) {
    if (z_e.ndim() != 4) throw ShapeError("quantize expects [N,n_z,h,w]");
    const int N = z_e.dim(0), C = z_e.dim(1), h = z_e.dim(2), w = z_e.dim(3);
    if (codebook.ndim() != 2 || codebook.dim(1) != C)
        throw ShapeError("codebook dimension does not match latent channels");
    const int K = codebook.dim(0);
    const int hw = h * w;

    QuantizeResult out;
    out.values = Tensor(z_e.shape());
    out.indices.assign(static_cast<size_t>(N) * hw, 0);

#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        std::vector<float> fiber(static_cast<size_t>(C));
        for (int p = 0; p < hw; ++p) {
            for (int c = 0; c < C; ++c)
                fiber[static_cast<size_t>(c)] = z_e.data()[(static_cast<size_t>(n) * C + c) * hw + p];
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) {
                double d = 0.0;
                for (int c = 0; c < C; ++c) {
                    double diff = static_cast<double>(fiber[static_cast<size_t>(c)]) -
                                  codebook.at(k, c);
                    d += diff * diff;
                }
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            out.indices[static_cast<size_t>(n) * hw + p] = best;
            for (int c = 0; c < C; ++c)
                out.values.data()[(static_cast<size_t>(n) * C + c) * hw + p] = codebook.at(best, c);
        }
    }
    return out;
}

// One EMA update from a batch of encoder outputs and their assignments.
// Cluster sizes are Laplace-smoothed before the embedding means are formed.
inline void codebook_ema_update(Codebook& cb, const Tensor& z_e,
                                const std::vector<int32_t>& indices) {
    const int K = cb.size(), C = cb.dim();
    const int N = z_e.dim(0), hw = z_e.dim(2) * z_e.dim(3);
    std::vector<double> counts(static_cast<size_t>(K), 0.0);
    std::vector<double> sums(static_cast<size_t>(K) * C, 0.0);
    for (int n = 0; n < N; ++n)
        for (int p = 0; p < hw; ++p) {
            int k = indices[static_cast<size_t>(n) * hw + p];
            counts[static_cast<size_t>(k)] += 1.0;
            for (int c = 0; c < C; ++c)
                sums[static_cast<size_t>(k) * C + c] +=
                    z_e.data()[(static_cast<size_t>(n) * C + c) * hw + p];
        }

    const double g = cb.decay;
    double total = 0.0;
    for (int k = 0; k < K; ++k) {
        cb.ema_cluster_size[k] = static_cast<float>(g * cb.ema_cluster_size[k] +
                                                    (1.0 - g) * counts[static_cast<size_t>(k)]);
        total += cb.ema_cluster_size[k];
        for (int c = 0; c < C; ++c)
            cb.ema_embed_sum.at(k, c) = static_cast<float>(
                g * cb.ema_embed_sum.at(k, c) + (1.0 - g) * sums[static_cast<size_t>(k) * C + c]);
    }
    for (int k = 0; k < K; ++k) {
        const double smoothed =
            (cb.ema_cluster_size[k] + cb.epsilon) / (total + K * cb.epsilon) * total;
        for (int c = 0; c < C; ++c)
            cb.vectors.at(k, c) = static_cast<float>(cb.ema_embed_sum.at(k, c) / smoothed);
    }
}

// Residual block without time conditioning, for the compression model.
struct PlainResBlock {
    diffusion::detail::NormLayer gn1, gn2;
    diffusion::detail::ConvLayer conv1, conv2;

    PlainResBlock(nn::ParamStore& ps, const std::string& name, int c, int groups, Rng& rng)
        : gn1(ps, name + ".gn1", c, groups),
          gn2(ps, name + ".gn2", c, groups),
          conv1(ps, name + ".conv1", c, c, 3, 1, rng),
          conv2(ps, name + ".conv2", c, c, 3, 1, rng, /*zero_init=*/true) {}

    nn::Var operator()(const nn::Var& x) const {
        nn::Var h = conv1(nn::silu(gn1(x)));
        h = conv2(nn::silu(gn2(h)));
        return nn::add(x, h);
    }
};

// Convolutional encoder/decoder pair around the quantization bottleneck.
class VqVae {
  public:
    VqVae(VqVaeConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng = Rng::keyed(init_seed, {0x76717661ULL});
        const auto& w = cfg_.widths;
        const int L = cfg_.levels();
        const int g = cfg_.norm_groups;

        enc_stem_ = diffusion::detail::ConvLayer(store_, "enc.stem", 1, w[0], 3, 1, rng);
        for (int i = 0; i + 1 < L; ++i) {
            enc_res_.emplace_back(store_, "enc.res" + std::to_string(i), w[static_cast<size_t>(i)],
                                  g, rng);
            enc_down_.emplace_back(store_, "enc.down" + std::to_string(i),
                                   w[static_cast<size_t>(i)], w[static_cast<size_t>(i) + 1], 3, 2,
                                   rng);
        }
        enc_res_.emplace_back(store_, "enc.res" + std::to_string(L - 1), w.back(), g, rng);
        enc_out_norm_ = diffusion::detail::NormLayer(store_, "enc.out_norm", w.back(), g);
        enc_out_ = diffusion::detail::ConvLayer(store_, "enc.out", w.back(), cfg_.n_z, 3, 1, rng);

        dec_stem_ = diffusion::detail::ConvLayer(store_, "dec.stem", cfg_.n_z, w.back(), 3, 1, rng);
        dec_res_.emplace_back(store_, "dec.res" + std::to_string(L - 1), w.back(), g, rng);
        for (int i = L - 1; i > 0; --i) {
            dec_up_.emplace_back(store_, "dec.up" + std::to_string(i), w[static_cast<size_t>(i)],
                                 w[static_cast<size_t>(i) - 1], 3, 1, rng);
            dec_res_.emplace_back(store_, "dec.res" + std::to_string(i - 1),
                                  w[static_cast<size_t>(i) - 1], g, rng);
        }
        dec_out_norm_ = diffusion::detail::NormLayer(store_, "dec.out_norm", w[0], g);
        dec_out_ = diffusion::detail::ConvLayer(store_, "dec.out", w[0], 1, 3, 1, rng);

        cb_.vectors = Tensor({cfg_.codebook_size, cfg_.n_z});
        cb_.ema_cluster_size = Tensor({cfg_.codebook_size});
        cb_.ema_embed_sum = Tensor({cfg_.codebook_size, cfg_.n_z});
        cb_.decay = cfg_.ema_decay;
        cb_.epsilon = cfg_.ema_epsilon;
    }

    // Graph-building encoder; x is [N,1,H,W] in [0,1].
    nn::Var encode_graph(const nn::Var& x) const {
        if (x.dim(1) != 1) throw ShapeError("vqvae encoder expects single-channel input");
        if (x.dim(2) % cfg_.f != 0 || x.dim(3) % cfg_.f != 0)
            throw ShapeError("image dimensions must be divisible by f=" + std::to_string(cfg_.f));
        nn::Var h = enc_stem_(x);
        const int L = cfg_.levels();
        for (int i = 0; i + 1 < L; ++i) {
            h = enc_res_[static_cast<size_t>(i)](h);
            h = enc_down_[static_cast<size_t>(i)](h);
        }
        h = enc_res_[static_cast<size_t>(L - 1)](h);
        return enc_out_(nn::silu(enc_out_norm_(h)));
    }

    // Graph-building decoder; z is [N,n_z,h,w]; sigmoid bounds output to [0,1].
    nn::Var decode_graph(const nn::Var& z) const {
        if (z.dim(1) != cfg_.n_z) throw ShapeError("vqvae decoder expects n_z channels");
        nn::Var h = dec_stem_(z);
        h = dec_res_[0](h);
        const int L = cfg_.levels();
        for (int i = 0; i + 1 < L; ++i) {
            h = dec_up_[static_cast<size_t>(i)](nn::upsample_nearest2x(h));
            h = dec_res_[static_cast<size_t>(i) + 1](h);
        }
        return nn::sigmoid(dec_out_(nn::silu(dec_out_norm_(h))));
    }

    // Deterministic eval-mode passes.
    Tensor encode(const Tensor& images) const {
        nn::NoGradGuard ng;
        return encode_graph(nn::constant(images)).val();
    }

    Tensor decode(const Tensor& latents) const {
        nn::NoGradGuard ng;
        return decode_graph(nn::constant(latents)).val();
    }

    QuantizeResult quantize(const Tensor& z_e) const {
        if (!cb_.initialized) throw TrainError("codebook not initialized; train or load first");
        return quantize_nearest(z_e, cb_.vectors);
    }

    struct StepLosses {
        double recon = 0.0;
        double codebook = 0.0;
        double commit = 0.0;
        double total = 0.0;
    };

    // One optimizer step: L1 reconstruction + beta * commitment, straight
    // through estimator across the bottleneck, codebook moved by EMA only.
    StepLosses train_step(const Tensor& images, nn::Adam& opt, Rng& rng) {
        nn::Var x = nn::constant(images);
        nn::Var z_e = encode_graph(x);
        if (!cb_.initialized) init_codebook_from(z_e.val(), rng);

        QuantizeResult q = quantize_nearest(z_e.val(), cb_.vectors);
        Tensor offset = q.values;
        offset -= z_e.val();
        nn::Var z_q = nn::add(z_e, nn::constant(std::move(offset)));  // identity gradient
        nn::Var recon = decode_graph(z_q);

        nn::Var loss_recon = nn::l1_loss(recon, x);
        nn::Var loss_commit = nn::mse_loss(z_e, nn::constant(q.values));
        nn::Var loss = nn::add(loss_recon, nn::mul_scalar(loss_commit, cfg_.commit_weight));

        StepLosses out;
        out.recon = loss_recon.val()[0];
        out.commit = loss_commit.val()[0];
        out.codebook = out.commit;  // same number; gradients differ only in sg placement
        out.total = loss.val()[0];
        if (!std::isfinite(out.total))
            throw TrainError("vqvae: non-finite loss (recon=" + std::to_string(out.recon) +
                             ", commit=" + std::to_string(out.commit) + ")");

        store_.zero_grad();
        nn::backward(loss);
        opt.step(store_);
        codebook_ema_update(cb_, z_e.val(), q.indices);
        return out;
    }

    // Re-seed codes whose EMA mass decayed to (near) zero from random batch
    // fibers, so the codebook keeps its capacity on simple data.
    int restart_dead_codes(const Tensor& z_e, Rng& rng) {
        if (!cfg_.restart_dead_codes || !cb_.initialized) return 0;
        const int K = cb_.size(), C = cb_.dim();
        double total = 0.0;
        for (int k = 0; k < K; ++k) total += cb_.ema_cluster_size[k];
        const double threshold = 0.01 * total / K;
        const int N = z_e.dim(0), hw = z_e.dim(2) * z_e.dim(3);
        int restarted = 0;
        for (int k = 0; k < K; ++k) {
            if (cb_.ema_cluster_size[k] >= threshold) continue;
            const int n = static_cast<int>(rng.uniform_int(0, N - 1));
            const int p = static_cast<int>(rng.uniform_int(0, hw - 1));
            for (int c = 0; c < C; ++c) {
                float v = z_e.data()[(static_cast<size_t>(n) * C + c) * hw + p];
                cb_.vectors.at(k, c) = v;
                cb_.ema_embed_sum.at(k, c) = v;
            }
            cb_.ema_cluster_size[k] = 1.0f;
            ++restarted;
        }
        return restarted;
    }

    const VqVaeConfig& config() const { return cfg_; }
    const Codebook& codebook() const { return cb_; }
    Codebook& codebook() { return cb_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

    void save(const std::filesystem::path& path, nlohmann::json extra_meta = {},
              const nn::Adam* opt = nullptr) const {
        TensorFile tf;
        store_.save_weights(tf);
        tf.put("codebook/vectors", cb_.vectors);
        tf.put("codebook/ema_cluster_size", cb_.ema_cluster_size);
        tf.put("codebook/ema_embed_sum", cb_.ema_embed_sum);
        tf.meta["format"] = "vqvae-v1";
        tf.meta["config"] = cfg_.to_json();
        tf.meta["codebook_initialized"] = cb_.initialized;
        if (opt) {
            const_cast<nn::ParamStore&>(store_).save_adam_state(tf);
            tf.meta["adam_step"] = opt->step_count;
        }
        for (auto& [k, v] : extra_meta.items()) tf.meta[k] = v;
        tf.save(path);
    }

    static VqVae load(const std::filesystem::path& path, TensorFile* out_tf = nullptr,
                      nn::Adam* opt = nullptr) {
        TensorFile tf = TensorFile::load(path);
        if (tf.meta.value("format", "") != std::string("vqvae-v1"))
            throw IoError("not a vqvae checkpoint: " + path.string());
        VqVae m(VqVaeConfig::from_json(tf.meta.at("config")), /*init_seed=*/0);
        m.store_.load_weights(tf);
        m.cb_.vectors = tf.get("codebook/vectors");
        m.cb_.ema_cluster_size = tf.get("codebook/ema_cluster_size");
        m.cb_.ema_embed_sum = tf.get("codebook/ema_embed_sum");
        m.cb_.initialized = tf.meta.value("codebook_initialized", true);
        if (opt && tf.meta.contains("adam_step")) {
            m.store_.load_adam_state(tf);
            opt->step_count = tf.meta.at("adam_step").get<int64_t>();
        }
        if (out_tf) *out_tf = tf;
        return m;
    }

    uint64_t weights_hash() const {
        uint64_t h = store_.weights_hash();
        h = fnv1a64(cb_.vectors.data(), static_cast<size_t>(cb_.vectors.numel()) * sizeof(float), h);
        return h;
    }

    std::string checksum() const { return hex64(weights_hash()); }

  private:
    void init_codebook_from(const Tensor& z_e, Rng& rng) {
        const int N = z_e.dim(0), C = z_e.dim(1), hw = z_e.dim(2) * z_e.dim(3);
        for (int k = 0; k < cb_.size(); ++k) {
            const int n = static_cast<int>(rng.uniform_int(0, N - 1));
            const int p = static_cast<int>(rng.uniform_int(0, hw - 1));
            for (int c = 0; c < C; ++c) {
                float v = z_e.data()[(static_cast<size_t>(n) * C + c) * hw + p];
                cb_.vectors.at(k, c) = v + static_cast<float>(rng.normal() * 1e-3);
                cb_.ema_embed_sum.at(k, c) = cb_.vectors.at(k, c);
            }
            cb_.ema_cluster_size[k] = 1.0f;
        }
        cb_.initialized = true;
    }

    VqVaeConfig cfg_;
    mutable nn::ParamStore store_;
    diffusion::detail::ConvLayer enc_stem_, enc_out_, dec_stem_, dec_out_;
    diffusion::detail::NormLayer enc_out_norm_, dec_out_norm_;
    std::vector<PlainResBlock> enc_res_;  // defined below
    std::vector<diffusion::detail::ConvLayer> enc_down_;
    std::vector<PlainResBlock> dec_res_;
    std::vector<diffusion::detail::ConvLayer> dec_up_;
    Codebook cb_;
};

}  // namespace anomaly_ddpm::vqvae
