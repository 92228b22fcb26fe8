#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdscl/core.hpp"

// Training objectives with analytic gradients: two-class cross-entropy,
// the patient/domain supervised contrastive loss (PD-SCL), domain
// adversarial training (DAT), and their weighted combinations.

namespace pdscl {

// Boolean N x N pair indicators for a mini-batch.
//
// positive[i][j]  <=>  label_i == label_j and (patient_i != patient_j or
//                      domain_i != domain_j)
// negative[i][j]  <=>  label_i != label_j
//
// The diagonal is excluded from both. Pairs that agree in label, patient
// AND domain are in neither mask; they enter no sum.
struct PairMasks {
    std::size_t n = 0;
    std::vector<std::uint8_t> positive;
    std::vector<std::uint8_t> negative;

    bool pos(std::size_t i, std::size_t j) const { return positive[i * n + j] != 0; }
    bool neg(std::size_t i, std::size_t j) const { return negative[i * n + j] != 0; }
};

inline PairMasks build_pair_masks(const BatchMeta& meta) {
    if (!meta.consistent())
        throw std::invalid_argument("build_pair_masks: batch meta sequences differ in length");
    const std::size_t n = meta.size();
    if (n < 2) throw std::invalid_argument("build_pair_masks: batch size must be >= 2");
    PairMasks m;
    m.n = n;
    m.positive.assign(n * n, 0);
    m.negative.assign(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            if (meta.labels[i] != meta.labels[j]) {
                m.negative[i * n + j] = 1;
            } else if (meta.patient_ids[i] != meta.patient_ids[j] ||
                       meta.domain_ids[i] != meta.domain_ids[j]) {
                m.positive[i * n + j] = 1;
            }
        }
    }
    return m;
}

// Row-wise L2 normalization. Gradients of downstream losses are chained
// through this map with the Jacobian (I - f f^T) / ||x|| per row.
inline Matrix l2_normalize(const Matrix& features) {
    Matrix out(features.rows, features.cols);
    for (std::size_t i = 0; i < features.rows; ++i) {
        double sq = 0.0;
        for (std::size_t d = 0; d < features.cols; ++d)
            sq += features(i, d) * features(i, d);
        const double norm = std::sqrt(sq);
        if (norm <= 0.0)
            throw std::invalid_argument("l2_normalize: zero row at index " + std::to_string(i));
        for (std::size_t d = 0; d < features.cols; ++d) out(i, d) = features(i, d) / norm;
    }
    return out;
}

// S[i][j] = (f_i . f_j) / tau for unit-norm rows.
inline Matrix similarity_matrix(const Matrix& unit_features, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("similarity_matrix: tau must be > 0");
    const std::size_t n = unit_features.rows;
    const std::size_t d = unit_features.cols;
    Matrix s(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double dot = 0.0;
            const double* fi = unit_features.row(i);
            const double* fj = unit_features.row(j);
            for (std::size_t k = 0; k < d; ++k) dot += fi[k] * fj[k];
            s(i, j) = dot / tau;
            s(j, i) = s(i, j);
        }
    }
    return s;
}

struct LossOutput {
    double value = 0.0;
    Matrix grad_features;  // gradient w.r.t. the pre-normalization inputs
};

// PD-SCL contrastive loss over a mini-batch.
//
// Per anchor i with at least one positive:
//   L_i = LSE_{k in P(i) u Neg(i)} S[i][k]  -  LSE_{j in P(i)} S[i][j]
// and the total is the mean of L_i over anchors that have positives.
// Anchors without positives contribute nothing and do not enter the
// averaging count. The gradient is returned w.r.t. the raw features,
// chained through the row-wise L2 normalization.
inline LossOutput pdscl_loss(const Matrix& features, const BatchMeta& meta, double tau) {
    const std::size_t n = features.rows;
    const std::size_t d = features.cols;
    if (n < 2) throw std::invalid_argument("pdscl_loss: batch size must be >= 2");
    if (tau <= 0.0) throw std::invalid_argument("pdscl_loss: tau must be > 0");
    if (meta.size() != n || !meta.consistent())
        throw std::invalid_argument("pdscl_loss: batch meta does not match feature rows");

    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) sq += features(i, k) * features(i, k);
        norms[i] = std::sqrt(sq);
    }
    const Matrix unit = l2_normalize(features);
    const Matrix sim = similarity_matrix(unit, tau);
    const PairMasks masks = build_pair_masks(meta);

    // coeff[i][k] = dL_total/dS[i][k], filled anchor row by anchor row
    Matrix coeff(n, n);
    double loss_sum = 0.0;
    std::size_t anchors = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double max_pos = -std::numeric_limits<double>::infinity();
        double max_den = -std::numeric_limits<double>::infinity();
        bool has_pos = false;
        for (std::size_t k = 0; k < n; ++k) {
            if (masks.pos(i, k)) {
                has_pos = true;
                max_pos = std::max(max_pos, sim(i, k));
            }
            if (masks.pos(i, k) || masks.neg(i, k)) max_den = std::max(max_den, sim(i, k));
        }
        if (!has_pos) continue;
        ++anchors;
        double sum_pos = 0.0, sum_den = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            if (masks.pos(i, k)) sum_pos += std::exp(sim(i, k) - max_pos);
            if (masks.pos(i, k) || masks.neg(i, k)) sum_den += std::exp(sim(i, k) - max_den);
        }
        const double lse_pos = max_pos + std::log(sum_pos);
        const double lse_den = max_den + std::log(sum_den);
        loss_sum += lse_den - lse_pos;
        for (std::size_t k = 0; k < n; ++k) {
            double c = 0.0;
            if (masks.pos(i, k) || masks.neg(i, k))
                c += std::exp(sim(i, k) - max_den) / sum_den;
            if (masks.pos(i, k)) c -= std::exp(sim(i, k) - max_pos) / sum_pos;
            coeff(i, k) = c;
        }
    }

    LossOutput out;
    out.grad_features = Matrix(n, d);
    if (anchors == 0) return out;  // no positive pair anywhere: loss 0, zero grad

    const double scale = 1.0 / static_cast<double>(anchors);
    out.value = loss_sum * scale;

    // dL/df_a = (1 / (anchors * tau)) * sum_k (coeff[a][k] + coeff[k][a]) f_k
    Matrix grad_unit(n, d);
    for (std::size_t a = 0; a < n; ++a) {
        double* ga = grad_unit.row(a);
        for (std::size_t k = 0; k < n; ++k) {
            const double c = (coeff(a, k) + coeff(k, a)) * scale / tau;
            if (c == 0.0) continue;
            const double* fk = unit.row(k);
            for (std::size_t m = 0; m < d; ++m) ga[m] += c * fk[m];
        }
    }
    // chain through l2_normalize: g_x = (g - (g . f) f) / ||x||
    for (std::size_t a = 0; a < n; ++a) {
        const double* g = grad_unit.row(a);
        const double* f = unit.row(a);
        double dot = 0.0;
        for (std::size_t m = 0; m < d; ++m) dot += g[m] * f[m];
        double* gx = out.grad_features.row(a);
        for (std::size_t m = 0; m < d; ++m) gx[m] = (g[m] - dot * f[m]) / norms[a];
    }
    return out;
}

// Mean two-class cross-entropy with softmax. Gradient w.r.t. logits is
// (softmax - onehot) / N.
inline LossOutput cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
    const std::size_t n = logits.rows;
    const std::size_t c = logits.cols;
    if (c != 2) throw std::invalid_argument("cross_entropy: expected 2 classes");
    if (labels.size() != n)
        throw std::invalid_argument("cross_entropy: label count does not match logit rows");
    if (n == 0) throw std::invalid_argument("cross_entropy: empty batch");

    LossOutput out;
    out.grad_features = Matrix(n, c);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            throw std::invalid_argument("cross_entropy: label out of range at index " +
                                        std::to_string(i));
        const double* z = logits.row(i);
        double zmax = z[0];
        for (std::size_t k = 1; k < c; ++k) zmax = std::max(zmax, z[k]);
        double sum = 0.0;
        for (std::size_t k = 0; k < c; ++k) sum += std::exp(z[k] - zmax);
        const double lse = zmax + std::log(sum);
        total += lse - z[y];
        double* g = out.grad_features.row(i);
        for (std::size_t k = 0; k < c; ++k) {
            const double p = std::exp(z[k] - lse);
            g[k] = (p - (static_cast<std::size_t>(y) == k ? 1.0 : 0.0)) / static_cast<double>(n);
        }
    }
    out.value = total / static_cast<double>(n);
    return out;
}

// L_total = L_CE + lambda * L_PD-SCL. Gradients add linearly; both operands
// must carry gradients of the same shape (typically both at feature level).
inline LossOutput total_loss_pdscl(const LossOutput& ce, const LossOutput& pd,
                                   double lambda = 0.5) {
    if (lambda < 0.0) throw std::invalid_argument("total_loss_pdscl: lambda must be >= 0");
    if (!ce.grad_features.same_shape(pd.grad_features))
        throw std::invalid_argument("total_loss_pdscl: gradient shapes differ");
    LossOutput out;
    out.value = ce.value + lambda * pd.value;
    out.grad_features = Matrix(ce.grad_features.rows, ce.grad_features.cols);
    for (std::size_t i = 0; i < out.grad_features.data.size(); ++i)
        out.grad_features.data[i] = ce.grad_features.data[i] + lambda * pd.grad_features.data[i];
    return out;
}

// Domain adversarial training loss, L_total = L_CE(class) + lambda * L_DA(domain).
//
// grad_domain_logits is the lambda-scaled domain cross-entropy gradient as
// the domain head sees it. Where the domain path meets the shared encoder
// features the sign must be flipped (gradient reversal); model::backward
// applies that via UpstreamGrads::domain_feature_scale = -1.
struct DatLossOutput {
    double value = 0.0;
    double class_value = 0.0;
    double domain_value = 0.0;
    Matrix grad_class_logits;
    Matrix grad_domain_logits;
};

inline DatLossOutput dat_loss(const Matrix& class_logits, const Matrix& domain_logits,
                              const BatchMeta& meta, double lambda = 0.2) {
    if (lambda < 0.0) throw std::invalid_argument("dat_loss: lambda must be >= 0");
    const LossOutput ce = cross_entropy(class_logits, meta.labels);
    const LossOutput da = cross_entropy(domain_logits, meta.domain_ids);
    DatLossOutput out;
    out.class_value = ce.value;
    out.domain_value = da.value;
    out.value = ce.value + lambda * da.value;
    out.grad_class_logits = ce.grad_features;
    out.grad_domain_logits = Matrix(da.grad_features.rows, da.grad_features.cols);
    for (std::size_t i = 0; i < da.grad_features.data.size(); ++i)
        out.grad_domain_logits.data[i] = lambda * da.grad_features.data[i];
    return out;
}

}  // namespace pdscl
