#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <new>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "anomaly_ddpm/errors.hpp"
#include "anomaly_ddpm/tensor.hpp"

namespace anomaly_ddpm::metrics {

// Pooled pixel scores and ground-truth labels over a test set.
struct PixelEval {
    std::vector<float> scores;
    std::vector<uint8_t> labels;

    void append(const Tensor& score_map, const Tensor& gt_mask) {
        if (!score_map.same_shape(gt_mask)) throw ShapeError("PixelEval: score/mask shape mismatch");
        for (int64_t i = 0; i < score_map.numel(); ++i) {
            scores.push_back(score_map[i]);
            labels.push_back(gt_mask[i] != 0.0f ? 1 : 0);
        }
    }

    size_t positives() const {
        size_t n = 0;
        for (uint8_t l : labels) n += l;
        return n;
    }

    void validate() const {
        if (scores.size() != labels.size()) throw MetricError("PixelEval: size mismatch");
        if (scores.empty()) throw MetricError("PixelEval: empty");
        const size_t pos = positives();
        if (pos == 0 || pos == labels.size())
            throw MetricError("PixelEval: needs at least one positive and one negative");
    }
};

// Dice coefficient of two binary masks. Both empty -> 1, exactly one empty -> 0.
inline double dice(const Tensor& pred, const Tensor& gt) {
    if (!pred.same_shape(gt)) throw ShapeError("dice: shape mismatch");
    int64_t inter = 0, p = 0, g = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const bool a = pred[i] != 0.0f;
        const bool b = gt[i] != 0.0f;
        inter += a && b;
        p += a;
        g += b;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

struct BestDice {
    double dice = 0.0;
    double threshold = 0.0;
};

// Best achievable Dice over a global threshold sweep of the pooled scores
// (prediction rule: score >= threshold). Candidate thresholds are taken at
// rank positions, so the result is exactly invariant under strictly
// monotone transformations of the scores; up to n_thresholds candidates are
// evaluated (every distinct score when there are fewer).
inline BestDice best_dice(const PixelEval& eval, int n_thresholds = 200) {
    eval.validate();
    const size_t n = eval.scores.size();
    const double total_pos = static_cast<double>(eval.positives());
    if (total_pos == 0.0) throw MetricError("best_dice: no positive pixels");

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return eval.scores[a] > eval.scores[b]; });

    // prefix stats at each distinct-score boundary (predict positive on the prefix)
    std::vector<double> bound_tp, bound_n, bound_score;
    double tp = 0.0;
    for (size_t i = 0; i < n; ++i) {
        tp += eval.labels[order[i]];
        const bool boundary = (i + 1 == n) || (eval.scores[order[i + 1]] != eval.scores[order[i]]);
        if (boundary) {
            bound_tp.push_back(tp);
            bound_n.push_back(static_cast<double>(i + 1));
            bound_score.push_back(eval.scores[order[i]]);
        }
    }

    const size_t nb = bound_tp.size();
    std::vector<size_t> candidates;
    if (nb <= static_cast<size_t>(n_thresholds)) {
        candidates.resize(nb);
        std::iota(candidates.begin(), candidates.end(), size_t{0});
    } else {
        for (int k = 0; k < n_thresholds; ++k)
            candidates.push_back(static_cast<size_t>(
                std::llround(static_cast<double>(nb - 1) * k / (n_thresholds - 1))));
    }

    BestDice best;
    best.dice = -1.0;
    for (size_t j : candidates) {
        const double d = 2.0 * bound_tp[j] / (bound_n[j] + total_pos);
        if (d > best.dice) {
            best.dice = d;
            best.threshold = bound_score[j];
        }
    }
    return best;
}

// Area under precision-recall by average-precision step integration
// (no trapezoids); ties handled by grouping equal scores.
inline double auprc(const PixelEval& eval) {
    eval.validate();
    const size_t n = eval.scores.size();
    const double total_pos = static_cast<double>(eval.positives());

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return eval.scores[a] > eval.scores[b]; });

    double ap = 0.0, tp = 0.0, prev_recall = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        double group_tp = 0.0;
        while (j < n && eval.scores[order[j]] == eval.scores[order[i]]) {
            group_tp += eval.labels[order[j]];
            ++j;
        }
        tp += group_tp;
        const double recall = tp / total_pos;
        const double precision = tp / static_cast<double>(j);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

// AUROC via the Mann-Whitney rank statistic with midranks for ties.
inline double auroc(const std::vector<float>& scores, const std::vector<uint8_t>& labels) {
    if (scores.size() != labels.size()) throw MetricError("auroc: size mismatch");
    const size_t n = scores.size();
    size_t n_pos = 0;
    for (uint8_t l : labels) n_pos += l;
    const size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw MetricError("auroc: needs both classes");

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (size_t k = i; k < j; ++k)
            if (labels[order[k]]) rank_sum_pos += midrank;
        i = j;
    }
    return (rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

inline double auroc(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
    std::vector<float> s(scores.begin(), scores.end());
    return auroc(s, labels);
}

// --- wall-clock benchmarking -------------------------------------------

struct TimedRun {
    std::map<std::string, double> per_stage_s;
    double total_s = 0.0;
};

struct BenchResult {
    std::string method;  // e.g. "c(f=4)"
    int n_images = 0;
    double total_s = 0.0;
    std::map<std::string, double> per_stage_s;
    bool micro_batched = false;

    nlohmann::json to_json() const {
        return {{"method", method},
                {"n_images", n_images},
                {"total_s", total_s},
                {"per_stage_s", per_stage_s},
                {"micro_batched", micro_batched}};
    }
};

// Runs one untimed warm-up pass, then the timed pass. On allocation failure
// the run is retried in micro-batch mode and flagged.
inline BenchResult bench(const std::string& method, int n_images,
                         const std::function<void()>& warmup,
                         const std::function<TimedRun(bool micro)>& run) {
    if (n_images <= 0) throw ConfigError("bench: need at least one image");
    BenchResult out;
    out.method = method;
    out.n_images = n_images;
    warmup();
    try {
        TimedRun r = run(false);
        out.total_s = r.total_s;
        out.per_stage_s = r.per_stage_s;
    } catch (const std::bad_alloc&) {
        TimedRun r = run(true);
        out.total_s = r.total_s;
        out.per_stage_s = r.per_stage_s;
        out.micro_batched = true;
    }
    return out;
}

}  // namespace anomaly_ddpm::metrics
