#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "anomaly_ddpm/anomaly.hpp"

namespace anomaly_ddpm::anomaly {

// Method steps from the synthetic-lesion ablation:
//   a - reverse steps over the whole latent, raw residuals
//   b - same healing as (a), residuals filtered by the upsampled KL mask
//   c - KL-mask-guided inpainting plus filtering
//   d - (c) with the 50-point KL grid and 50-step DDIM healing
enum class Variant { a, b, c, d };

inline char variant_letter(Variant v) {
    switch (v) {
        case Variant::a: return 'a';
        case Variant::b: return 'b';
        case Variant::c: return 'c';
        default: return 'd';
    }
}

inline Variant variant_from_letter(char c) {
    switch (c) {
        case 'a': return Variant::a;
        case 'b': return Variant::b;
        case 'c': return Variant::c;
        case 'd': return Variant::d;
        default: throw ConfigError(std::string("unknown variant '") + c + "', expected a|b|c|d");
    }
}

struct DetectOptions {
    Variant variant = Variant::c;
    int heal_t_start = 500;
    int ddim_steps = 50;
    uint64_t seed = 0;
    bool compute_image_score = false;  // extra stage, not part of segmentation timing
    int image_score_stride = 10;
    bool full_chain = false;
    int chunk = 25;  // encode/decode micro-batch size

    bool needs_kl_mask() const { return variant != Variant::a; }
    bool masked_healing() const { return variant == Variant::c || variant == Variant::d; }
    bool fast_mode() const { return variant == Variant::d; }
    bool filter_residuals() const { return variant != Variant::a; }
};

struct AnomalyReport {
    std::string input_id;
    Tensor v;             // [h, w]
    Tensor mask;          // [h, w] binary
    Tensor healed_image;  // [H, W] in [0,1]
    Tensor residual;      // [H, W], >= 0
    Tensor pixel_scores;  // [H, W]
    double image_score = std::numeric_limits<double>::quiet_NaN();
    std::map<std::string, double> wall_time_s;  // per stage, batch time / n_images
};

struct DetectResult {
    std::vector<AnomalyReport> reports;
    std::map<std::string, double> stage_seconds;  // whole batch
    double total_seconds = 0.0;
    bool micro_batched = false;
};

namespace detail {

class StageClock {
  public:
    void start() { t0_ = std::chrono::steady_clock::now(); }
    double stop() {
        auto t1 = std::chrono::steady_clock::now();
        return std::chrono::duration<double>(t1 - t0_).count();
    }

  private:
    std::chrono::steady_clock::time_point t0_;
};

inline Tensor stack_images(const std::vector<Tensor>& images) {
    if (images.empty()) throw ConfigError("detect: empty image batch");
    const int H = images[0].dim(0), W = images[0].dim(1);
    Tensor out({static_cast<int>(images.size()), 1, H, W});
    for (size_t i = 0; i < images.size(); ++i) {
        if (images[i].dim(0) != H || images[i].dim(1) != W)
            throw ShapeError("detect: images must share one resolution");
        std::memcpy(out.data() + i * static_cast<size_t>(H) * W, images[i].data(),
                    sizeof(float) * static_cast<size_t>(H) * W);
    }
    return out;
}

// Chunked eval-mode pass through a batched op to bound peak memory.
template <typename Fn>
inline Tensor chunked(const Tensor& batch, int chunk, Fn&& fn) {
    const int N = batch.dim(0);
    Tensor out;
    for (int lo = 0; lo < N; lo += chunk) {
        const int n = std::min(chunk, N - lo);
        std::vector<int> shape = batch.shape();
        shape[0] = n;
        Tensor part(shape);
        const size_t stride = static_cast<size_t>(batch.numel() / N);
        std::memcpy(part.data(), batch.data() + static_cast<size_t>(lo) * stride,
                    sizeof(float) * static_cast<size_t>(n) * stride);
        Tensor res = fn(part);
        if (out.empty()) {
            std::vector<int> os = res.shape();
            os[0] = N;
            out = Tensor(os);
        }
        const size_t ostride = static_cast<size_t>(out.numel() / N);
        std::memcpy(out.data() + static_cast<size_t>(lo) * ostride, res.data(),
                    sizeof(float) * static_cast<size_t>(n) * ostride);
    }
    return out;
}

}  // namespace detail

// Full detection chain over a batch of grayscale images in [0,1]:
// encode -> quantize -> standardize -> KL volume -> v -> mask -> heal ->
// decode -> residual -> mask upsample + Gaussian filter -> pixel scores.
// The threshold may be null only for variant (a), which uses no KL mask.
inline DetectResult detect_batch(const std::vector<Tensor>& images,
                                 const std::vector<std::string>& ids, const vqvae::VqVae& vq,
                                 const LatentStandardizer& st, const EpsilonModel& model,
                                 const NoiseSchedule& schedule, const ThresholdMap* threshold,
                                 const DetectOptions& opts) {
    if (images.size() != ids.size()) throw ShapeError("detect: ids/images size mismatch");
    if (opts.needs_kl_mask() && threshold == nullptr)
        throw ConfigError("detect: variants b/c/d require a calibrated threshold map");

    const int N = static_cast<int>(images.size());
    const int f = vq.config().f;
    DetectResult result;
    detail::StageClock clock;
    detail::StageClock total_clock;
    total_clock.start();

    auto fail_in = [](const std::string& stage, const std::exception& e) -> std::string {
        return "detect stage '" + stage + "': " + e.what();
    };

    // --- encode: images -> standardized quantized latents
    Tensor z0;
    try {
        clock.start();
        Tensor batch = detail::stack_images(images);
        Tensor z_e = detail::chunked(batch, opts.chunk, [&](const Tensor& part) { return vq.encode(part); });
        vqvae::QuantizeResult q = vq.quantize(z_e);
        z0 = st.standardize(q.values);
        result.stage_seconds["encode"] = clock.stop();
    } catch (const Error& e) {
        throw Error(fail_in("encode", e));
    }
    const int C = z0.dim(1), h = z0.dim(2), w = z0.dim(3);
    const int hw = h * w;

    const std::vector<int> kl_range = opts.fast_mode() ? kl_t_range_fast() : kl_t_range_full();

    // --- kl volume + v map (skipped entirely by variant a)
    std::vector<Tensor> v_maps(static_cast<size_t>(N));
    if (opts.needs_kl_mask()) {
        try {
            clock.start();
            if (!threshold->t_range.empty() && threshold->t_range != kl_range)
                throw ConfigError("threshold was calibrated on a different t range");
            for (int i = 0; i < N; ++i) {
                Tensor z0_i({C, h, w});
                std::memcpy(z0_i.data(), z0.data() + static_cast<size_t>(i) * C * hw,
                            sizeof(float) * static_cast<size_t>(C) * hw);
                KLVolume vol = compute_kl_volume(z0_i, model, schedule, kl_range,
                                                 hash_combine64(opts.seed, 0xdec0 + static_cast<uint64_t>(i)));
                v_maps[static_cast<size_t>(i)] = reduce_to_v(vol);
            }
            result.stage_seconds["kl_volume"] = clock.stop();
        } catch (const Error& e) {
            throw Error(fail_in("kl_volume", e));
        }
    }

    // --- masks
    Tensor masks({N, h, w});
    try {
        clock.start();
        if (opts.needs_kl_mask()) {
            for (int i = 0; i < N; ++i) {
                LatentMask m = extract_mask(v_maps[static_cast<size_t>(i)], *threshold);
                std::memcpy(masks.data() + static_cast<size_t>(i) * hw, m.values.data(),
                            sizeof(float) * static_cast<size_t>(hw));
            }
        } else {
            masks.fill(1.0f);
        }
        result.stage_seconds["mask"] = clock.stop();
    } catch (const Error& e) {
        throw Error(fail_in("mask", e));
    }

    // --- healing: masked inpainting for c/d, whole-latent resampling for a/b
    Tensor healed_z;
    try {
        clock.start();
        sampler::ReverseConfig rc;
        rc.kind = opts.fast_mode() ? sampler::ReverseKind::ddim : sampler::ReverseKind::ancestral;
        rc.t_start = opts.heal_t_start;
        rc.num_steps = opts.fast_mode() ? opts.ddim_steps : opts.heal_t_start;
        rc.seed = hash_combine64(opts.seed, 0x6865616cULL);
        Tensor heal_masks = masks;
        if (!opts.masked_healing()) heal_masks.fill(1.0f);
        healed_z = sampler::heal_inpaint_batch(z0, heal_masks, rc, model, schedule);
        result.stage_seconds["heal"] = clock.stop();
    } catch (const Error& e) {
        throw Error(fail_in("heal", e));
    }

    // --- decode healed latents
    Tensor healed_images;
    try {
        clock.start();
        Tensor dez = st.destandardize(healed_z);
        healed_images =
            detail::chunked(dez, opts.chunk, [&](const Tensor& part) { return vq.decode(part); });
        result.stage_seconds["decode"] = clock.stop();
    } catch (const Error& e) {
        throw Error(fail_in("decode", e));
    }

    // --- residuals and filtering
    try {
        clock.start();
        const int H = images[0].dim(0), W = images[0].dim(1);
        result.reports.resize(static_cast<size_t>(N));
        for (int i = 0; i < N; ++i) {
            AnomalyReport& rep = result.reports[static_cast<size_t>(i)];
            rep.input_id = ids[static_cast<size_t>(i)];
            rep.v = opts.needs_kl_mask() ? v_maps[static_cast<size_t>(i)] : Tensor({h, w});
            rep.mask = Tensor({h, w});
            std::memcpy(rep.mask.data(), masks.data() + static_cast<size_t>(i) * hw,
                        sizeof(float) * static_cast<size_t>(hw));
            rep.healed_image = Tensor({H, W});
            std::memcpy(rep.healed_image.data(),
                        healed_images.data() + static_cast<size_t>(i) * H * W,
                        sizeof(float) * static_cast<size_t>(H) * W);
            rep.residual = Tensor({H, W});
            for (int p = 0; p < H * W; ++p)
                rep.residual[p] = std::fabs(images[static_cast<size_t>(i)][p] - rep.healed_image[p]);
            if (opts.filter_residuals()) {
                Tensor up = upsample_mask_nearest(rep.mask, f);
                Tensor smooth = gaussian_blur(up, f / 2.0);
                rep.pixel_scores = Tensor({H, W});
                for (int p = 0; p < H * W; ++p) rep.pixel_scores[p] = rep.residual[p] * smooth[p];
            } else {
                rep.pixel_scores = rep.residual;
            }
        }
        result.stage_seconds["residual"] = clock.stop();
    } catch (const Error& e) {
        throw Error(fail_in("residual", e));
    }

    // --- optional image-level OOD score over the (subsampled) full chain
    if (opts.compute_image_score) {
        try {
            clock.start();
            const std::vector<int> grid =
                chain_t_grid(schedule.T, opts.image_score_stride, opts.full_chain);
            for (int i = 0; i < N; ++i) {
                Tensor z0_i({C, h, w});
                std::memcpy(z0_i.data(), z0.data() + static_cast<size_t>(i) * C * hw,
                            sizeof(float) * static_cast<size_t>(C) * hw);
                KLVolume vol = compute_kl_volume(z0_i, model, schedule, grid,
                                                 hash_combine64(opts.seed, 0x5c07e + static_cast<uint64_t>(i)));
                result.reports[static_cast<size_t>(i)].image_score = image_level_score(vol);
            }
            result.stage_seconds["image_score"] = clock.stop();
        } catch (const Error& e) {
            throw Error(fail_in("image_score", e));
        }
    }

    result.total_seconds = total_clock.stop();
    for (auto& rep : result.reports)
        for (const auto& [stage, secs] : result.stage_seconds)
            rep.wall_time_s[stage] = secs / N;
    return result;
}

// Single-image convenience wrapper over the batched chain.
inline AnomalyReport residual_pipeline(const Tensor& image, const std::string& id,
                                       const vqvae::VqVae& vq, const LatentStandardizer& st,
                                       const EpsilonModel& model, const NoiseSchedule& schedule,
                                       const ThresholdMap* threshold, const DetectOptions& opts) {
    DetectResult r = detect_batch({image}, {id}, vq, st, model, schedule, threshold, opts);
    return std::move(r.reports[0]);
}

}  // namespace anomaly_ddpm::anomaly
