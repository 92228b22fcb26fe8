#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdscl/core.hpp"
#include "pdscl/losses.hpp"
#include "pdscl/rng.hpp"

// Small differentiable encoder with two linear heads and manual
// backpropagation. The encoder pools a spectrogram by its mean over time,
// then applies two tanh affine layers; the class and domain heads are
// plain affine maps on the shared feature vector.

namespace pdscl {

struct ModelConfig {
    std::size_t input_dim = 128;   // mel bands after time pooling
    std::size_t hidden_dim = 64;
    std::size_t feature_dim = 32;
};

struct Affine {
    Matrix w;               // out x in
    std::vector<double> b;  // out
};

struct ModelParams {
    ModelConfig cfg;
    Affine enc1;         // input -> hidden, tanh
    Affine enc2;         // hidden -> feature, tanh
    Affine class_head;   // feature -> 2
    Affine domain_head;  // feature -> 2
};

struct GradBundle {
    Affine enc1;
    Affine enc2;
    Affine class_head;
    Affine domain_head;
};

namespace detail {

inline Affine zero_like(const Affine& a) {
    Affine g;
    g.w = Matrix(a.w.rows, a.w.cols);
    g.b.assign(a.b.size(), 0.0);
    return g;
}

inline Affine init_affine(std::size_t out_dim, std::size_t in_dim, Rng& rng) {
    Affine a;
    a.w = Matrix(out_dim, in_dim);
    a.b.assign(out_dim, 0.0);
    const double bound = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
    for (double& v : a.w.data) v = rng.uniform(-bound, bound);
    return a;
}

// y = x W^T + b, rows are samples
inline Matrix affine_forward(const Matrix& x, const Affine& a) {
    Matrix y(x.rows, a.w.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double* yi = y.row(i);
        for (std::size_t o = 0; o < a.w.rows; ++o) {
            double acc = a.b[o];
            const double* wo = a.w.row(o);
            for (std::size_t k = 0; k < a.w.cols; ++k) acc += wo[k] * xi[k];
            yi[o] = acc;
        }
    }
    return y;
}

// Accumulates dL/dW and dL/db from upstream dL/dy; returns dL/dx.
inline Matrix affine_backward(const Matrix& x, const Affine& a, const Matrix& gy, Affine& grad) {
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        const double* gyi = gy.row(i);
        for (std::size_t o = 0; o < a.w.rows; ++o) {
            grad.b[o] += gyi[o];
            double* gw = grad.w.row(o);
            for (std::size_t k = 0; k < a.w.cols; ++k) gw[k] += gyi[o] * xi[k];
        }
    }
    Matrix gx(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double* gyi = gy.row(i);
        double* gxi = gx.row(i);
        for (std::size_t o = 0; o < a.w.rows; ++o) {
            const double* wo = a.w.row(o);
            for (std::size_t k = 0; k < a.w.cols; ++k) gxi[k] += gyi[o] * wo[k];
        }
    }
    return gx;
}

}  // namespace detail

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    ModelParams p;
    p.cfg = cfg;
    p.enc1 = detail::init_affine(cfg.hidden_dim, cfg.input_dim, rng);
    p.enc2 = detail::init_affine(cfg.feature_dim, cfg.hidden_dim, rng);
    p.class_head = detail::init_affine(2, cfg.feature_dim, rng);
    p.domain_head = detail::init_affine(2, cfg.feature_dim, rng);
    return p;
}

inline GradBundle zero_grads(const ModelParams& p) {
    GradBundle g;
    g.enc1 = detail::zero_like(p.enc1);
    g.enc2 = detail::zero_like(p.enc2);
    g.class_head = detail::zero_like(p.class_head);
    g.domain_head = detail::zero_like(p.domain_head);
    return g;
}

// Mean over the time axis, one value per mel band.
inline std::vector<double> pool_time_mean(const Spectrogram& s) {
    std::vector<double> out(s.mels(), 0.0);
    if (s.frames() == 0) return out;
    for (std::size_t t = 0; t < s.frames(); ++t) {
        const double* row = s.values.row(t);
        for (std::size_t m = 0; m < s.mels(); ++m) out[m] += row[m];
    }
    const double inv = 1.0 / static_cast<double>(s.frames());
    for (double& v : out) v *= inv;
    return out;
}

inline Matrix pool_batch(std::span<const Spectrogram> specs) {
    if (specs.empty()) throw std::invalid_argument("pool_batch: empty batch");
    Matrix x(specs.size(), specs[0].mels());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].mels() != x.cols)
            throw std::invalid_argument("pool_batch: inconsistent mel dimension");
        const auto v = pool_time_mean(specs[i]);
        std::copy(v.begin(), v.end(), x.row(i));
    }
    return x;
}

// Intermediates kept by forward for exact backprop.
struct ForwardCache {
    ModelConfig cfg;
    Matrix pooled;    // N x input
    Matrix hidden;    // N x hidden, tanh applied
    Matrix features;  // N x feature, tanh applied
};

struct ForwardOut {
    Matrix features;       // N x feature
    Matrix class_logits;   // N x 2
    Matrix domain_logits;  // N x 2
    ForwardCache cache;
};

inline ForwardOut forward_pooled(const Matrix& pooled, const ModelParams& p) {
    if (pooled.cols != p.cfg.input_dim)
        throw std::invalid_argument("forward: input dim " + std::to_string(pooled.cols) +
                                    " does not match model input dim " +
                                    std::to_string(p.cfg.input_dim));
    ForwardOut out;
    Matrix h = detail::affine_forward(pooled, p.enc1);
    for (double& v : h.data) v = std::tanh(v);
    Matrix f = detail::affine_forward(h, p.enc2);
    for (double& v : f.data) v = std::tanh(v);
    out.class_logits = detail::affine_forward(f, p.class_head);
    out.domain_logits = detail::affine_forward(f, p.domain_head);
    out.cache.cfg = p.cfg;
    out.cache.pooled = pooled;
    out.cache.hidden = std::move(h);
    out.features = f;
    out.cache.features = std::move(f);
    return out;
}

inline ForwardOut forward(std::span<const Spectrogram> batch_specs, const ModelParams& p) {
    return forward_pooled(pool_batch(batch_specs), p);
}

// Upstream gradients entering the model from the losses. Empty matrices
// mean "no contribution". domain_feature_scale multiplies the domain-head
// path where it enters the shared features; -1 realizes gradient reversal
// while the domain head itself still receives the unflipped gradient.
struct UpstreamGrads {
    Matrix features;
    Matrix class_logits;
    Matrix domain_logits;
    double domain_feature_scale = 1.0;
};

inline GradBundle backward(const ModelParams& p, const ForwardCache& cache,
                           const UpstreamGrads& up) {
    const std::size_t n = cache.pooled.rows;
    if (cache.cfg.input_dim != p.cfg.input_dim || cache.cfg.hidden_dim != p.cfg.hidden_dim ||
        cache.cfg.feature_dim != p.cfg.feature_dim || cache.hidden.cols != p.cfg.hidden_dim ||
        cache.features.cols != p.cfg.feature_dim)
        throw std::invalid_argument("backward: stale cache (shape mismatch with params)");
    auto check = [&](const Matrix& m, std::size_t cols, const char* name) {
        if (!m.empty() && (m.rows != n || m.cols != cols))
            throw std::invalid_argument(std::string("backward: upstream ") + name +
                                        " has wrong shape");
    };
    check(up.features, p.cfg.feature_dim, "feature grad");
    check(up.class_logits, 2, "class logit grad");
    check(up.domain_logits, 2, "domain logit grad");

    GradBundle g = zero_grads(p);

    Matrix gf(n, p.cfg.feature_dim);
    if (!up.features.empty()) gf.data = up.features.data;
    if (!up.class_logits.empty()) {
        const Matrix gx = detail::affine_backward(cache.features, p.class_head, up.class_logits,
                                                  g.class_head);
        for (std::size_t i = 0; i < gf.data.size(); ++i) gf.data[i] += gx.data[i];
    }
    if (!up.domain_logits.empty()) {
        const Matrix gx = detail::affine_backward(cache.features, p.domain_head,
                                                  up.domain_logits, g.domain_head);
        for (std::size_t i = 0; i < gf.data.size(); ++i)
            gf.data[i] += up.domain_feature_scale * gx.data[i];
    }

    // through tanh at the feature layer
    for (std::size_t i = 0; i < gf.data.size(); ++i) {
        const double f = cache.features.data[i];
        gf.data[i] *= 1.0 - f * f;
    }
    Matrix gh = detail::affine_backward(cache.hidden, p.enc2, gf, g.enc2);
    for (std::size_t i = 0; i < gh.data.size(); ++i) {
        const double h = cache.hidden.data[i];
        gh.data[i] *= 1.0 - h * h;
    }
    detail::affine_backward(cache.pooled, p.enc1, gh, g.enc1);
    return g;
}

inline ModelParams sgd_step(ModelParams params, const GradBundle& grads, double lr) {
    if (lr <= 0.0) throw std::invalid_argument("sgd_step: learning rate must be > 0");
    auto step = [lr](Affine& p, const Affine& g) {
        for (std::size_t i = 0; i < p.w.data.size(); ++i) p.w.data[i] -= lr * g.w.data[i];
        for (std::size_t i = 0; i < p.b.size(); ++i) p.b[i] -= lr * g.b[i];
    };
    step(params.enc1, grads.enc1);
    step(params.enc2, grads.enc2);
    step(params.class_head, grads.class_head);
    step(params.domain_head, grads.domain_head);
    return params;
}

// ---------------------------------------------------------------------------
// Gradient verification harness
// ---------------------------------------------------------------------------

enum class LossMode { ce, ce_pdscl, dat };

struct GradCheckOptions {
    double tau = 0.5;
    double lambda_pdscl = 0.5;
    double lambda_dat = 0.2;
    double step = 1e-6;  // central difference half-width
};

namespace detail {

enum class ParamGroup { encoder, class_head, domain_head };

// Numeric-side objective for the finite-difference check, evaluated in long
// double and written independently of the production forward/loss path
// (plain loops, no log-sum-exp). The extra precision keeps FD rounding
// noise far below the 1e-5 relative error budget even for parameters with
// tiny gradients.
using ld = long double;

inline std::vector<ld> affine_forward_ld(const std::vector<ld>& x, const Affine& a) {
    std::vector<ld> y(a.w.rows);
    for (std::size_t o = 0; o < a.w.rows; ++o) {
        ld acc = static_cast<ld>(a.b[o]);
        const double* wo = a.w.row(o);
        for (std::size_t k = 0; k < a.w.cols; ++k) acc += static_cast<ld>(wo[k]) * x[k];
        y[o] = acc;
    }
    return y;
}

inline ld mean_ce_ld(const std::vector<std::vector<ld>>& logits, const std::vector<int>& labels) {
    ld total = 0.0L;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        ld sum = 0.0L;
        for (ld z : logits[i]) sum += std::exp(z);
        total += std::log(sum) - logits[i][static_cast<std::size_t>(labels[i])];
    }
    return total / static_cast<ld>(logits.size());
}

inline ld objective(const ModelParams& p, const Matrix& pooled, const BatchMeta& meta,
                    LossMode mode, ParamGroup group, const GradCheckOptions& opt) {
    const std::size_t n = pooled.rows;
    std::vector<std::vector<ld>> feats(n), class_logits(n), domain_logits(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<ld> x(pooled.cols);
        for (std::size_t k = 0; k < pooled.cols; ++k) x[k] = static_cast<ld>(pooled(i, k));
        std::vector<ld> h = affine_forward_ld(x, p.enc1);
        for (ld& v : h) v = std::tanh(v);
        std::vector<ld> f = affine_forward_ld(h, p.enc2);
        for (ld& v : f) v = std::tanh(v);
        class_logits[i] = affine_forward_ld(f, p.class_head);
        domain_logits[i] = affine_forward_ld(f, p.domain_head);
        feats[i] = std::move(f);
    }
    const ld ce = mean_ce_ld(class_logits, meta.labels);
    switch (mode) {
        case LossMode::ce:
            return ce;
        case LossMode::ce_pdscl: {
            // direct evaluation of the contrastive loss
            const std::size_t d = feats.empty() ? 0 : feats[0].size();
            std::vector<std::vector<ld>> unit(n, std::vector<ld>(d));
            for (std::size_t i = 0; i < n; ++i) {
                ld sq = 0.0L;
                for (ld v : feats[i]) sq += v * v;
                const ld norm = std::sqrt(sq);
                for (std::size_t k = 0; k < d; ++k) unit[i][k] = feats[i][k] / norm;
            }
            auto sim = [&](std::size_t i, std::size_t j) {
                ld dot = 0.0L;
                for (std::size_t k = 0; k < d; ++k) dot += unit[i][k] * unit[j][k];
                return dot / static_cast<ld>(opt.tau);
            };
            ld total = 0.0L;
            std::size_t anchors = 0;
            for (std::size_t i = 0; i < n; ++i) {
                ld num = 0.0L, den = 0.0L;
                bool has_pos = false;
                for (std::size_t j = 0; j < n; ++j) {
                    if (i == j) continue;
                    const bool pos = meta.labels[i] == meta.labels[j] &&
                                     (meta.patient_ids[i] != meta.patient_ids[j] ||
                                      meta.domain_ids[i] != meta.domain_ids[j]);
                    const bool neg = meta.labels[i] != meta.labels[j];
                    if (pos) {
                        num += std::exp(sim(i, j));
                        has_pos = true;
                    }
                    if (pos || neg) den += std::exp(sim(i, j));
                }
                if (!has_pos) continue;
                ++anchors;
                total += -std::log(num / den);
            }
            const ld pd = anchors == 0 ? 0.0L : total / static_cast<ld>(anchors);
            return ce + static_cast<ld>(opt.lambda_pdscl) * pd;
        }
        case LossMode::dat: {
            const ld da = mean_ce_ld(domain_logits, meta.domain_ids);
            // The reversal makes the objective group dependent: the domain
            // head descends on +lambda*L_DA while everything upstream of it
            // ascends, i.e. sees -lambda*L_DA.
            const ld sign = group == ParamGroup::domain_head ? 1.0L : -1.0L;
            return ce + sign * static_cast<ld>(opt.lambda_dat) * da;
        }
    }
    return 0.0L;
}

inline void max_rel_err_tensor(std::vector<double>& param, const std::vector<double>& analytic,
                               const ModelParams& p, const Matrix& pooled, const BatchMeta& meta,
                               LossMode mode, ParamGroup group, const GradCheckOptions& opt,
                               double& worst) {
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double saved = param[i];
        param[i] = saved + opt.step;
        const ld up = objective(p, pooled, meta, mode, group, opt);
        param[i] = saved - opt.step;
        const ld down = objective(p, pooled, meta, mode, group, opt);
        param[i] = saved;
        const double numeric = static_cast<double>((up - down) / (2.0L * static_cast<ld>(opt.step)));
        const double a = analytic[i];
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
}

}  // namespace detail

// Compares analytic gradients against central finite differences over every
// parameter. Returns max over parameters of |analytic - numeric| /
// max(|analytic|, |numeric|, 1e-8). Intended for small dims only.
inline double grad_check(const ModelParams& params, const Matrix& pooled, const BatchMeta& meta,
                         LossMode mode, const GradCheckOptions& opt = {}) {
    ForwardOut f = forward_pooled(pooled, params);
    const LossOutput ce = cross_entropy(f.class_logits, meta.labels);
    UpstreamGrads up;
    up.class_logits = ce.grad_features;
    if (mode == LossMode::ce_pdscl) {
        const LossOutput pd = pdscl_loss(f.features, meta, opt.tau);
        up.features = Matrix(pd.grad_features.rows, pd.grad_features.cols);
        for (std::size_t i = 0; i < up.features.data.size(); ++i)
            up.features.data[i] = opt.lambda_pdscl * pd.grad_features.data[i];
    } else if (mode == LossMode::dat) {
        const DatLossOutput dl =
            dat_loss(f.class_logits, f.domain_logits, meta, opt.lambda_dat);
        up.domain_logits = dl.grad_domain_logits;
        up.domain_feature_scale = -1.0;
    }
    const GradBundle analytic = backward(params, f.cache, up);

    ModelParams probe = params;
    double worst = 0.0;
    using detail::ParamGroup;
    auto run = [&](std::vector<double>& p, const std::vector<double>& a, ParamGroup g) {
        detail::max_rel_err_tensor(p, a, probe, pooled, meta, mode, g, opt, worst);
    };
    run(probe.enc1.w.data, analytic.enc1.w.data, ParamGroup::encoder);
    run(probe.enc1.b, analytic.enc1.b, ParamGroup::encoder);
    run(probe.enc2.w.data, analytic.enc2.w.data, ParamGroup::encoder);
    run(probe.enc2.b, analytic.enc2.b, ParamGroup::encoder);
    run(probe.class_head.w.data, analytic.class_head.w.data, ParamGroup::class_head);
    run(probe.class_head.b, analytic.class_head.b, ParamGroup::class_head);
    run(probe.domain_head.w.data, analytic.domain_head.w.data, ParamGroup::domain_head);
    run(probe.domain_head.b, analytic.domain_head.b, ParamGroup::domain_head);
    return worst;
}

// ---------------------------------------------------------------------------
// Checkpoint file: magic "PDCK", u32 header length, JSON header (dims, seed,
// step), then all parameter tensors as raw little-endian doubles in a fixed
// order. Save/load round-trips bit-exactly.
// ---------------------------------------------------------------------------

struct Checkpoint {
    ModelParams params;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
};

namespace detail {

template <typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
    fn(p.enc1.w.data);
    fn(p.enc1.b);
    fn(p.enc2.w.data);
    fn(p.enc2.b);
    fn(p.class_head.w.data);
    fn(p.class_head.b);
    fn(p.domain_head.w.data);
    fn(p.domain_head.b);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            std::uint64_t seed, std::uint64_t step);
inline Checkpoint load_checkpoint(const std::string& path);

}  // namespace pdscl

#include <json.hpp>

namespace pdscl {

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            std::uint64_t seed, std::uint64_t step) {
    nlohmann::ordered_json header;
    header["input_dim"] = params.cfg.input_dim;
    header["hidden_dim"] = params.cfg.hidden_dim;
    header["feature_dim"] = params.cfg.feature_dim;
    header["seed"] = seed;
    header["step"] = step;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write("PDCK", 4);
    const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
    f.write(reinterpret_cast<const char*>(&hlen), 4);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    detail::for_each_tensor(params, [&](const std::vector<double>& t) {
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
    });
    if (!f) throw std::runtime_error("short write on checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    std::uint32_t hlen = 0;
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(&hlen), 4);
    if (!f || std::memcmp(magic, "PDCK", 4) != 0)
        throw std::runtime_error("bad checkpoint magic: " + path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), hlen);
    if (!f) throw std::runtime_error("truncated checkpoint header: " + path);
    const auto header = nlohmann::json::parse(hs);

    Checkpoint ck;
    ModelConfig cfg;
    cfg.input_dim = header.at("input_dim").get<std::size_t>();
    cfg.hidden_dim = header.at("hidden_dim").get<std::size_t>();
    cfg.feature_dim = header.at("feature_dim").get<std::size_t>();
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.step = header.at("step").get<std::uint64_t>();
    ck.params = init_params(cfg, 0);
    detail::for_each_tensor(ck.params, [&](std::vector<double>& t) {
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.size() * sizeof(double)));
    });
    if (!f) throw std::runtime_error("truncated checkpoint blob: " + path);
    return ck;
}

}  // namespace pdscl
