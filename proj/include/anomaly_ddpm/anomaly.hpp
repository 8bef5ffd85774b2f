#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "anomaly_ddpm/diffusion.hpp"
#include "anomaly_ddpm/sampler.hpp"
#include "anomaly_ddpm/serialize.hpp"
#include "anomaly_ddpm/vqvae.hpp"

namespace anomaly_ddpm::anomaly {

using diffusion::EpsilonModel;
using diffusion::LatentStandardizer;
using diffusion::NoiseSchedule;
using sampler::LatentMask;

// Per-element variational-bound terms over a timestep range.
struct KLVolume {
    Tensor values;             // [h, w, n_z, |t_range|], all >= 0
    std::vector<int> t_range;  // ascending
};

// Spatial threshold calibrated from healthy validation subjects, bound to
// the model pair that produced it.
struct ThresholdMap {
    Tensor values;  // [h, w]
    double percentile = 97.5;
    int n_calibration = 0;
    std::vector<int> t_range;
    std::string mode = "full";  // full | fast
    std::string vqvae_checksum;
    std::string ddpm_checksum;

    void save(const std::filesystem::path& path) const {
        TensorFile tf;
        tf.put("threshold", values);
        tf.meta = {{"format", "threshold-v1"},
                   {"percentile", percentile},
                   {"n_calibration", n_calibration},
                   {"t_range", t_range},
                   {"mode", mode},
                   {"vqvae_checksum", vqvae_checksum},
                   {"ddpm_checksum", ddpm_checksum}};
        tf.save(path);
    }

    static ThresholdMap load(const std::filesystem::path& path) {
        TensorFile tf = TensorFile::load(path);
        if (tf.meta.value("format", "") != std::string("threshold-v1"))
            throw IoError("not a threshold map: " + path.string());
        ThresholdMap tm;
        tm.values = tf.get("threshold");
        tm.percentile = tf.meta.at("percentile").get<double>();
        tm.n_calibration = tf.meta.at("n_calibration").get<int>();
        tm.t_range = tf.meta.at("t_range").get<std::vector<int>>();
        tm.mode = tf.meta.at("mode").get<std::string>();
        tm.vqvae_checksum = tf.meta.at("vqvae_checksum").get<std::string>();
        tm.ddpm_checksum = tf.meta.at("ddpm_checksum").get<std::string>();
        return tm;
    }
};

// Timestep grids. The full range covers [lo, hi) densely; the fast range
// takes `count` evenly spaced values at stride (hi-lo)/count.
inline std::vector<int> kl_t_range_full(int lo = 400, int hi = 600) {
    std::vector<int> ts;
    for (int t = lo; t < hi; ++t) ts.push_back(t);
    return ts;
}

inline std::vector<int> kl_t_range_fast(int lo = 400, int hi = 600, int count = 50) {
    if (count < 1 || (hi - lo) % count != 0)
        throw ConfigError("fast t-range: count must divide hi-lo");
    const int stride = (hi - lo) / count;
    std::vector<int> ts;
    for (int t = lo; t < hi; t += stride) ts.push_back(t);
    return ts;
}

// Grid for the image-level score over "the whole Markov chain"; KL needs
// t >= 2, and subsampling keeps inference tractable.
inline std::vector<int> chain_t_grid(int T, int stride = 10, bool full_chain = false) {
    std::vector<int> ts;
    const int step = full_chain ? 1 : stride;
    for (int t = 2; t <= T; t += step) ts.push_back(t);
    return ts;
}

// One noise draw per timestep: z_t = forward(z0, t, eps_t), then the
// per-element KL of the reverse step at t. z0 is a single standardized
// latent [n_z, h, w]; the model is evaluated once on the stacked batch.
inline KLVolume compute_kl_volume(const Tensor& z0, const EpsilonModel& model,
                                  const NoiseSchedule& s, const std::vector<int>& t_range,
                                  uint64_t seed) {
    if (t_range.empty()) throw ConfigError("compute_kl_volume: empty t range");
    if (z0.ndim() != 3) throw ShapeError("compute_kl_volume expects [n_z,h,w]");
    for (int t : t_range) {
        if (t < 2) throw DomainError("kl volume timesteps must be >= 2");
        s.check_t(t);
    }
    const int C = z0.dim(0), h = z0.dim(1), w = z0.dim(2);
    const int nt = static_cast<int>(t_range.size());
    const int hw = h * w;

    Tensor zt_batch({nt, C, h, w});
    for (int i = 0; i < nt; ++i) {
        Rng rng = Rng::keyed(seed, {0x6b6c766fULL, static_cast<uint64_t>(t_range[static_cast<size_t>(i)])});
        Tensor eps({C, h, w});
        rng.fill_normal(eps.data(), eps.numel());
        Tensor zt = diffusion::forward_sample(z0, t_range[static_cast<size_t>(i)], eps, s);
        std::memcpy(zt_batch.data() + static_cast<size_t>(i) * C * hw, zt.data(),
                    sizeof(float) * static_cast<size_t>(C) * hw);
    }

    Tensor eps_pred = model.predict(zt_batch, t_range);

    KLVolume vol;
    vol.t_range = t_range;
    vol.values = Tensor({h, w, C, nt});
    for (int i = 0; i < nt; ++i) {
        const int t = t_range[static_cast<size_t>(i)];
        Tensor zt({C, h, w});
        std::memcpy(zt.data(), zt_batch.data() + static_cast<size_t>(i) * C * hw,
                    sizeof(float) * static_cast<size_t>(C) * hw);
        Tensor eps_i({C, h, w});
        std::memcpy(eps_i.data(), eps_pred.data() + static_cast<size_t>(i) * C * hw,
                    sizeof(float) * static_cast<size_t>(C) * hw);
        diffusion::PosteriorParams post = diffusion::posterior_params(z0, zt, t, s);
        Tensor mu_theta = diffusion::predict_mu_from_eps(zt, eps_i, t, s);
        Tensor kl = diffusion::kl_per_element_from_mus(post.mu, mu_theta, t, s);
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    vol.values.at(y, x, c, i) = kl.at(c, y, x);
    }
    return vol;
}

// Mean over the channel and timestep axes -> v in R^{h x w}.
inline Tensor reduce_to_v(const KLVolume& vol) {
    const int h = vol.values.dim(0), w = vol.values.dim(1);
    const int C = vol.values.dim(2), nt = vol.values.dim(3);
    Tensor v({h, w});
    const double inv = 1.0 / (static_cast<double>(C) * nt);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double sum = 0.0;
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < nt; ++i) sum += vol.values.at(y, x, c, i);
            v.at(y, x) = static_cast<float>(sum * inv);
        }
    return v;
}

// Scalar anomaly score: mean KL over every element and step of the volume.
inline double image_level_score(const KLVolume& vol) { return vol.values.mean(); }

// Linear-interpolated percentile of a sample (ascending sort, rank
// (n-1)*p/100, interpolation between the straddling order statistics).
inline double percentile_linear(std::vector<double> values, double p) {
    if (values.empty()) throw DomainError("percentile of empty sample");
    std::sort(values.begin(), values.end());
    const double rank = (static_cast<double>(values.size()) - 1.0) * p / 100.0;
    const size_t lo = static_cast<size_t>(rank);
    const double frac = rank - static_cast<double>(lo);
    if (lo + 1 >= values.size()) return values.back();
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

// Per-location percentile across subjects' v maps.
inline Tensor threshold_from_v_maps(const std::vector<Tensor>& v_maps, double percentile) {
    if (v_maps.empty()) throw CalibrationError("no v maps");
    const int h = v_maps[0].dim(0), w = v_maps[0].dim(1);
    Tensor thr({h, w});
    std::vector<double> column(v_maps.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            for (size_t k = 0; k < v_maps.size(); ++k) column[k] = v_maps[k].at(y, x);
            thr.at(y, x) = static_cast<float>(percentile_linear(column, percentile));
        }
    return thr;
}

// m = 1 where v >= threshold (inclusive), else 0.
inline LatentMask extract_mask(const Tensor& v, const ThresholdMap& threshold) {
    if (!v.same_shape(threshold.values)) throw ShapeError("extract_mask: v/threshold shape mismatch");
    LatentMask m;
    m.values = Tensor(v.shape());
    for (int64_t i = 0; i < v.numel(); ++i)
        m.values[i] = v[i] >= threshold.values[i] ? 1.0f : 0.0f;
    return m;
}

// --- pixel-space filtering --------------------------------------------

inline Tensor upsample_mask_nearest(const Tensor& mask /*[h,w]*/, int factor) {
    const int h = mask.dim(0), w = mask.dim(1);
    Tensor out({h * factor, w * factor});
    for (int y = 0; y < h * factor; ++y)
        for (int x = 0; x < w * factor; ++x) out.at(y, x) = mask.at(y / factor, x / factor);
    return out;
}

// Separable Gaussian blur with reflect borders; kernel truncated at
// `truncate` standard deviations.
inline Tensor gaussian_blur(const Tensor& img /*[H,W]*/, double sigma, double truncate = 4.0) {
    if (sigma <= 0.0) return img;
    const int H = img.dim(0), W = img.dim(1);
    const int radius = static_cast<int>(std::ceil(truncate * sigma));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        ksum += kernel[static_cast<size_t>(i + radius)];
    }
    for (auto& k : kernel) k /= ksum;

    auto reflect = [](int i, int n) {
        // scipy-style reflect: (d c b a | a b c d | d c b a)
        if (n == 1) return 0;
        while (i < 0 || i >= n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - i - 1;
        }
        return i;
    };

    Tensor tmp({H, W}), out({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0.0;
            for (int k = -radius; k <= radius; ++k)
                s += kernel[static_cast<size_t>(k + radius)] * img.at(y, reflect(x + k, W));
            tmp.at(y, x) = static_cast<float>(s);
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0.0;
            for (int k = -radius; k <= radius; ++k)
                s += kernel[static_cast<size_t>(k + radius)] * tmp.at(reflect(y + k, H), x);
            out.at(y, x) = static_cast<float>(s);
        }
    return out;
}

// --- threshold calibration ----------------------------------------------

// v map of one image through encode -> quantize -> standardize -> KL volume.
inline Tensor v_map_for_image(const Tensor& image /*[H,W]*/, const vqvae::VqVae& vq,
                              const LatentStandardizer& st, const EpsilonModel& model,
                              const NoiseSchedule& s, const std::vector<int>& t_range,
                              uint64_t seed) {
    Tensor batch = image.reshaped({1, 1, image.dim(0), image.dim(1)});
    Tensor z_e = vq.encode(batch);
    vqvae::QuantizeResult q = vq.quantize(z_e);
    Tensor z0 = st.standardize(q.values);
    Tensor z0_single = z0.reshaped({z0.dim(1), z0.dim(2), z0.dim(3)});
    KLVolume vol = compute_kl_volume(z0_single, model, s, t_range, seed);
    return reduce_to_v(vol);
}

// 97.5th-percentile 2-D threshold from a healthy validation set.
inline ThresholdMap calibrate_threshold(const std::vector<Tensor>& images, const vqvae::VqVae& vq,
                                        const LatentStandardizer& st, const EpsilonModel& model,
                                        const NoiseSchedule& s, const std::vector<int>& t_range,
                                        double percentile, uint64_t seed,
                                        const std::string& mode = "full") {
    if (images.size() < 20)
        throw CalibrationError("calibration needs at least 20 healthy validation images, got " +
                               std::to_string(images.size()));
    std::vector<Tensor> v_maps;
    v_maps.reserve(images.size());
    for (size_t k = 0; k < images.size(); ++k)
        v_maps.push_back(v_map_for_image(images[k], vq, st, model, s, t_range,
                                         hash_combine64(seed, 0x63616c69ULL + k)));
    ThresholdMap tm;
    tm.values = threshold_from_v_maps(v_maps, percentile);
    tm.percentile = percentile;
    tm.n_calibration = static_cast<int>(images.size());
    tm.t_range = t_range;
    tm.mode = mode;
    return tm;
}

}  // namespace anomaly_ddpm::anomaly
