#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "anomaly_ddpm/png_io.hpp"
#include "anomaly_ddpm/rng.hpp"
#include "anomaly_ddpm/serialize.hpp"
#include "anomaly_ddpm/tensor.hpp"

namespace anomaly_ddpm::data {

struct Image {
    Tensor pixels;  // [H, W], values in [0,1]
    std::string id;
};

struct SpriteParams {
    std::string shape;  // square | circle | cross | plus
    double size_px = 0.0;
    double intensity = 0.0;
    int center_x = 0;
    int center_y = 0;

    nlohmann::json to_json() const {
        return {{"shape", shape},
                {"size_px", size_px},
                {"intensity", intensity},
                {"center_x", center_x},
                {"center_y", center_y}};
    }
};

struct CorruptedSample {
    Image image;
    Tensor gt_mask;  // [H, W] in {0,1}, exactly the pasted pixels
    SpriteParams sprite;
};

struct SplitManifest {
    std::vector<std::string> train_ids, val_ids, test_ids;
    uint64_t seed = 0;

    void validate() const {
        std::vector<std::string> all;
        all.insert(all.end(), train_ids.begin(), train_ids.end());
        all.insert(all.end(), val_ids.begin(), val_ids.end());
        all.insert(all.end(), test_ids.begin(), test_ids.end());
        std::sort(all.begin(), all.end());
        if (std::adjacent_find(all.begin(), all.end()) != all.end())
            throw DataError("manifest: an id appears in more than one split");
    }

    nlohmann::json to_json() const {
        return {{"train", train_ids}, {"val", val_ids}, {"test", test_ids}, {"seed", seed}};
    }

    static SplitManifest from_json(const nlohmann::json& j) {
        SplitManifest m;
        m.train_ids = j.at("train").get<std::vector<std::string>>();
        m.val_ids = j.at("val").get<std::vector<std::string>>();
        m.test_ids = j.at("test").get<std::vector<std::string>>();
        m.seed = j.at("seed").get<uint64_t>();
        m.validate();
        return m;
    }

    void save(const std::filesystem::path& path) const { write_json_atomic(path, to_json()); }
    static SplitManifest load(const std::filesystem::path& path) {
        return from_json(read_json(path));
    }
};

// Per-image min-max normalization to [0,1]; constant images map to all-zero.
inline void normalize_minmax(Tensor& pixels) {
    const float lo = pixels.min();
    const float hi = pixels.max();
    if (hi <= lo) {
        pixels.fill(0.0f);
        return;
    }
    const float inv = 1.0f / (hi - lo);
    for (int64_t i = 0; i < pixels.numel(); ++i) pixels[i] = (pixels[i] - lo) * inv;
}

inline std::filesystem::path image_path(const std::filesystem::path& root, const std::string& id) {
    return root / (id + ".png");
}

// Loads one grayscale PNG and min-max normalizes it.
inline Image load_image(const std::filesystem::path& root, const std::string& id) {
    const std::filesystem::path p = image_path(root, id);
    if (!std::filesystem::exists(p)) throw DataError("missing image for id '" + id + "': " + p.string());
    GrayImageBuffer buf = read_gray_png(p);
    Image img;
    img.id = id;
    img.pixels = Tensor({buf.height, buf.width});
    for (int64_t i = 0; i < img.pixels.numel(); ++i)
        img.pixels[i] = static_cast<float>(buf.pixels[static_cast<size_t>(i)]);
    normalize_minmax(img.pixels);
    return img;
}

// Binary mask PNG (no normalization; >= half-range counts as 1).
inline Tensor load_mask(const std::filesystem::path& path) {
    GrayImageBuffer buf = read_gray_png(path);
    Tensor m({buf.height, buf.width});
    const uint16_t mid = buf.bit_depth == 8 ? 128 : 32768;
    for (int64_t i = 0; i < m.numel(); ++i)
        m[i] = buf.pixels[static_cast<size_t>(i)] >= mid ? 1.0f : 0.0f;
    return m;
}

// Loads all ids from a directory of PNGs, sorted by id.
inline std::vector<Image> load_corpus(const std::filesystem::path& root,
                                      std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end());
    std::vector<Image> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(load_image(root, id));
    return out;
}

// --- sprite corruption ----------------------------------------------------

namespace detail {

inline bool sprite_covers(const std::string& shape, double dx, double dy, double size) {
    const double r = size / 2.0;
    const double arm = std::max(1.0, size / 5.0);
    if (shape == "square") return std::fabs(dx) <= r && std::fabs(dy) <= r;
    if (shape == "circle") return dx * dx + dy * dy <= r * r;
    if (shape == "plus")
        return (std::fabs(dx) <= arm && std::fabs(dy) <= r) ||
               (std::fabs(dy) <= arm && std::fabs(dx) <= r);
    // diagonal cross
    const double w = arm * std::sqrt(2.0);
    return (std::fabs(dx - dy) <= w || std::fabs(dx + dy) <= w) && std::fabs(dx) <= r &&
           std::fabs(dy) <= r;
}

}  // namespace detail

// Pastes one random sprite (shape, size, uniform intensity) centred on a
// pixel of the image's nonzero support. The mask marks exactly the pasted
// pixels; everything else is bit-identical to the input.
inline CorruptedSample corrupt_with_sprite(const Image& image, uint64_t rng_seed) {
    const int H = image.pixels.dim(0), W = image.pixels.dim(1);

    std::vector<int> support;
    for (int i = 0; i < H * W; ++i)
        if (image.pixels[i] > 0.0f) support.push_back(i);
    if (support.empty()) throw DataError("corrupt_with_sprite: image '" + image.id + "' has empty support");

    Rng rng = Rng::keyed(rng_seed, {0x73707274ULL});
    static const char* kShapes[4] = {"square", "circle", "cross", "plus"};
    SpriteParams sp;
    sp.shape = kShapes[rng.uniform_int(0, 3)];
    sp.size_px = rng.uniform(4.0, 14.0);
    sp.intensity = rng.uniform(0.0, 1.0);
    const int center = support[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(support.size()) - 1))];
    sp.center_y = center / W;
    sp.center_x = center % W;

    CorruptedSample out;
    out.image.id = image.id;
    out.image.pixels = image.pixels;
    out.gt_mask = Tensor({H, W});
    out.sprite = sp;

    const int reach = static_cast<int>(std::ceil(sp.size_px / 2.0)) + 1;
    for (int y = std::max(0, sp.center_y - reach); y <= std::min(H - 1, sp.center_y + reach); ++y)
        for (int x = std::max(0, sp.center_x - reach); x <= std::min(W - 1, sp.center_x + reach); ++x)
            if (detail::sprite_covers(sp.shape, x - sp.center_x, y - sp.center_y, sp.size_px)) {
                out.image.pixels.at(y, x) = static_cast<float>(sp.intensity);
                out.gt_mask.at(y, x) = 1.0f;
            }

    // clip (paste intensity is already in [0,1], this guards degenerate input)
    for (int64_t i = 0; i < out.image.pixels.numel(); ++i)
        out.image.pixels[i] = std::clamp(out.image.pixels[i], 0.0f, 1.0f);

    if (out.gt_mask.sum() < 1.0) throw DataError("corrupt_with_sprite: produced an empty mask");
    return out;
}

// --- splits ----------------------------------------------------------------

inline SplitManifest make_split_manifest(std::vector<std::string> ids, int n_train, int n_val,
                                         int n_test, uint64_t seed) {
    if (static_cast<size_t>(n_train + n_val + n_test) > ids.size())
        throw DataError("not enough ids for the requested splits: have " +
                        std::to_string(ids.size()) + ", need " +
                        std::to_string(n_train + n_val + n_test));
    std::sort(ids.begin(), ids.end());
    Rng rng = Rng::keyed(seed, {0x73706c74ULL});
    rng.shuffle(ids);
    SplitManifest m;
    m.seed = seed;
    m.train_ids.assign(ids.begin(), ids.begin() + n_train);
    m.val_ids.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
    m.test_ids.assign(ids.begin() + n_train + n_val, ids.begin() + n_train + n_val + n_test);
    m.validate();
    return m;
}

// --- synthetic head-CT-like corpus -----------------------------------------

// Procedural axial-slice lookalike: bright elliptical skull ring, smooth
// tissue interior with low-contrast structures and ventricle-like darker
// regions, background exactly zero. Deterministic in (seed, index).
inline Tensor synth_head_image(uint64_t seed, int index, int size = 64) {
    Rng rng = Rng::keyed(seed, {0x68656164ULL, static_cast<uint64_t>(index)});
    const double cx = size / 2.0 + rng.uniform(-2.0, 2.0);
    const double cy = size / 2.0 + rng.uniform(-2.0, 2.0);
    const double ax = rng.uniform(0.34, 0.40) * size;
    const double ay = rng.uniform(0.40, 0.46) * size;
    const double theta = rng.uniform(-0.15, 0.15);
    const double skull_th = rng.uniform(1.5, 2.5);
    const double skull_val = rng.uniform(0.86, 0.98);
    const double tissue = rng.uniform(0.38, 0.5);

    struct Bump {
        double x, y, amp, sigma;
    };
    std::vector<Bump> bumps;
    const int nb = static_cast<int>(rng.uniform_int(3, 5));
    for (int i = 0; i < nb; ++i)
        bumps.push_back({cx + rng.uniform(-0.5, 0.5) * ax, cy + rng.uniform(-0.5, 0.5) * ay,
                         rng.uniform(-0.08, 0.08), rng.uniform(0.06, 0.16) * size});
    // ventricle-like pair near the centre
    const double vy = cy + rng.uniform(-2.0, 2.0);
    const double voff = rng.uniform(2.5, 5.0);
    const double vax = rng.uniform(1.5, 2.8), vay = rng.uniform(3.5, 6.5);
    const double vdepth = rng.uniform(0.10, 0.18);

    const double ct = std::cos(theta), st = std::sin(theta);
    Tensor img({size, size});
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double rx = (x - cx) * ct + (y - cy) * st;
            const double ry = -(x - cx) * st + (y - cy) * ct;
            const double e_outer = (rx / ax) * (rx / ax) + (ry / ay) * (ry / ay);
            if (e_outer > 1.0) continue;  // outside the head: exact zero
            const double e_inner =
                (rx / (ax - skull_th)) * (rx / (ax - skull_th)) +
                (ry / (ay - skull_th)) * (ry / (ay - skull_th));
            double v;
            if (e_inner >= 1.0) {
                v = skull_val;
            } else {
                v = tissue;
                for (const auto& b : bumps) {
                    const double d2 = (x - b.x) * (x - b.x) + (y - b.y) * (y - b.y);
                    v += b.amp * std::exp(-0.5 * d2 / (b.sigma * b.sigma));
                }
                for (int side : {-1, 1}) {
                    const double dx = rx - side * voff;
                    const double dy = ry - (vy - cy);
                    const double ev = (dx / vax) * (dx / vax) + (dy / vay) * (dy / vay);
                    if (ev <= 1.0) v -= vdepth * (1.0 - ev);
                }
                v += rng.normal() * 0.01;
            }
            img.at(y, x) = static_cast<float>(std::clamp(v, 0.05, 1.0));
        }
    }
    normalize_minmax(img);  // idempotent for the loader's contract
    return img;
}

// Writes `count` synthetic healthy images as 16-bit PNGs named
// img_<index>.png and returns the ids.
inline std::vector<std::string> generate_corpus(const std::filesystem::path& dir, int count,
                                                uint64_t seed, int size = 64) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> ids;
    ids.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05d", i);
        Tensor img = synth_head_image(seed, i, size);
        write_float_png(dir / (std::string(name) + ".png"), img.data(), size, size, 16);
        ids.emplace_back(name);
    }
    return ids;
}

}  // namespace anomaly_ddpm::data
