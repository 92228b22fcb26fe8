#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pdscl/core.hpp"

// ICBHI-style evaluation: specificity (normal recall), sensitivity
// (abnormal recall), their mean, plus ROC curve and AUC. AUC is computed
// two independent ways, rank-based Mann-Whitney and trapezoid under the
// ROC; they must agree and cross-check each other in the tests.

namespace pdscl {

struct MetricsCounts {
    std::size_t c_n = 0, n_n = 0;    // correct / total normal
    std::size_t c_ab = 0, n_ab = 0;  // correct / total abnormal
    std::map<FineLabel, std::pair<std::size_t, std::size_t>> per_fine;  // correct, total
};

inline MetricsCounts count_predictions(std::span<const int> labels, std::span<const int> preds,
                                       std::span<const FineLabel> fines = {}) {
    if (preds.size() != labels.size())
        throw std::invalid_argument("count_predictions: size mismatch");
    if (!fines.empty() && fines.size() != labels.size())
        throw std::invalid_argument("count_predictions: fine label size mismatch");
    MetricsCounts c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool correct = labels[i] == preds[i];
        if (labels[i] == 0) {
            ++c.n_n;
            if (correct) ++c.c_n;
        } else {
            ++c.n_ab;
            if (correct) ++c.c_ab;
        }
        if (!fines.empty()) {
            auto& [fc, ft] = c.per_fine[fines[i]];
            ++ft;
            if (correct) ++fc;
        }
    }
    return c;
}

struct Score {
    double sp = 0.0;
    double se = 0.0;
    double sc = 0.0;
};

inline Score sp_se_sc(const MetricsCounts& c) {
    if (c.n_n == 0) throw std::invalid_argument("sp_se_sc: no normal samples");
    if (c.n_ab == 0) throw std::invalid_argument("sp_se_sc: no abnormal samples");
    Score s;
    s.sp = static_cast<double>(c.c_n) / static_cast<double>(c.n_n);
    s.se = static_cast<double>(c.c_ab) / static_cast<double>(c.n_ab);
    s.sc = 0.5 * (s.sp + s.se);
    return s;
}

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

namespace detail {

inline void require_both_classes(std::span<const int> labels, const char* who) {
    bool has_pos = false, has_neg = false;
    for (int l : labels) (l != 0 ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg)
        throw std::invalid_argument(std::string(who) + ": both classes must be present");
}

}  // namespace detail

// One point per distinct score (prediction rule: abnormal iff score >=
// threshold, ties grouped), plus the (0,0) and (1,1) endpoints.
inline std::vector<RocPoint> roc_curve(std::span<const double> scores,
                                       std::span<const int> labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("roc_curve: size mismatch");
    detail::require_both_classes(labels, "roc_curve");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });

    std::size_t n_pos = 0, n_neg = 0;
    for (int l : labels) (l != 0 ? n_pos : n_neg) += 1;

    std::vector<RocPoint> curve;
    curve.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::size_t tp = 0, fp = 0, i = 0;
    while (i < order.size()) {
        const double t = scores[order[i]];
        while (i < order.size() && scores[order[i]] == t) {
            (labels[order[i]] != 0 ? tp : fp) += 1;
            ++i;
        }
        curve.push_back({t, static_cast<double>(fp) / static_cast<double>(n_neg),
                         static_cast<double>(tp) / static_cast<double>(n_pos)});
    }
    curve.push_back({-std::numeric_limits<double>::infinity(), 1.0, 1.0});
    return curve;
}

inline double trapezoid_auc(std::span<const RocPoint> curve) {
    double area = 0.0;
    for (std::size_t i = 1; i < curve.size(); ++i)
        area += (curve[i].fpr - curve[i - 1].fpr) * 0.5 * (curve[i].tpr + curve[i - 1].tpr);
    return area;
}

// Rank-based Mann-Whitney concordance with midranks for ties:
// (#{(a,n): score_a > score_n} + 0.5 * ties) / (n_ab * n_n).
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("auc: size mismatch");
    detail::require_both_classes(labels, "auc");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] < scores[b];
    });

    double rank_sum_pos = 0.0;
    std::size_t n_pos = 0, n_neg = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] != 0) rank_sum_pos += midrank;
        i = j;
    }
    for (int l : labels) (l != 0 ? n_pos : n_neg) += 1;
    const double u = rank_sum_pos -
                     static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

inline void write_roc_csv(const std::string& path, std::span<const RocPoint> curve) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write roc csv: " + path);
    f << "threshold,fpr,tpr\n";
    char buf[128];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", p.threshold, p.fpr, p.tpr);
        f << buf;
    }
    if (!f) throw std::runtime_error("short write on roc csv: " + path);
}

}  // namespace pdscl
