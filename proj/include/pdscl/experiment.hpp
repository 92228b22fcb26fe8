#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pdscl/core.hpp"
#include "pdscl/frontend.hpp"
#include "pdscl/losses.hpp"
#include "pdscl/metrics.hpp"
#include "pdscl/model.hpp"
#include "pdscl/rng.hpp"
#include "pdscl/splits.hpp"
#include "pdscl/synthdata.hpp"
#include "pdscl/wav.hpp"

// End-to-end experiment pipeline: features -> leave-subject-out folds ->
// per-method training -> mobile-only validation -> JSON report. Everything
// is a pure function of (dataset, config); all randomness derives from
// (seed, fold, epoch), so repeated runs and fold-parallel runs produce
// byte-identical reports.

namespace pdscl {

enum class Method { ce_mobile_only, ce_combined, dat, pdscl };

inline const char* to_string(Method m) {
    switch (m) {
        case Method::ce_mobile_only: return "ce_mobile_only";
        case Method::ce_combined: return "ce_combined";
        case Method::dat: return "dat";
        case Method::pdscl: return "pdscl";
    }
    return "?";
}

inline Method method_from_string(const std::string& s) {
    if (s == "ce_mobile_only") return Method::ce_mobile_only;
    if (s == "ce_combined") return Method::ce_combined;
    if (s == "dat") return Method::dat;
    if (s == "pdscl") return Method::pdscl;
    throw std::invalid_argument("unknown method: '" + s + "'");
}

struct ExperimentConfig {
    std::string data_csv;
    std::string cache_dir;  // empty: compute features in memory, no cache
    Method method = Method::pdscl;
    double lambda_pdscl = 0.5;
    double tau = 0.5;
    double lambda_dat = 0.2;
    int folds = 5;
    std::uint64_t seed = 1;
    int epochs = 30;
    std::size_t batch_size = 32;
    double lr = 0.1;
    ModelConfig model;
};

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

inline Spectrogram compute_features(const SampleMeta& meta, const FrontendConfig& fc = {}) {
    const Waveform raw = read_wav(meta.path);
    const Waveform std8 = standardize_duration(raw, fc.target_samples);
    const Spectrogram logmel = compute_log_mel(std8, fc);
    return normalize_spectrogram(logmel, fc.norm_mean, fc.norm_std);
}

// Pooled mean-mel vector per sample, row i aligned with index[i]. When a
// cache dir is given, per-sample feature files are reused or written.
inline Matrix load_pooled_features(std::span<const SampleMeta> index,
                                   const std::string& cache_dir,
                                   const FrontendConfig& fc = {}) {
    namespace fs = std::filesystem;
    if (!cache_dir.empty()) fs::create_directories(cache_dir);
    Matrix pooled(index.size(), fc.n_mels);
    for (std::size_t i = 0; i < index.size(); ++i) {
        Spectrogram spec;
        const fs::path cache_path =
            cache_dir.empty() ? fs::path() : fs::path(cache_dir) / (index[i].sample_id + ".pdsf");
        if (!cache_dir.empty() && fs::exists(cache_path)) {
            spec = load_feature_cache(cache_path.string());
        } else {
            spec = compute_features(index[i], fc);
            if (!cache_dir.empty()) save_feature_cache(cache_path.string(), spec);
        }
        if (spec.mels() != fc.n_mels)
            throw std::runtime_error("feature cache has wrong mel count for sample " +
                                     index[i].sample_id);
        const auto v = pool_time_mean(spec);
        std::copy(v.begin(), v.end(), pooled.row(i));
    }
    return pooled;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

inline bool is_positive_pair(const SampleMeta& a, const SampleMeta& b) {
    return a.label == b.label &&
           (a.patient_id != b.patient_id || a.domain != b.domain);
}

// Rearranges a shuffled epoch order so every batch contains at least one
// positive pair, whenever the remaining samples permit. Used only for the
// contrastive method; the scan is deterministic.
inline void ensure_positive_pairs(std::vector<std::size_t>& order, std::size_t batch_size,
                                  std::span<const SampleMeta> samples) {
    const std::size_t n = order.size();
    for (std::size_t b = 0; b < n; b += batch_size) {
        const std::size_t e = std::min(b + batch_size, n);
        if (e - b < 2) continue;
        bool has_pair = false;
        for (std::size_t i = b; i < e && !has_pair; ++i)
            for (std::size_t j = i + 1; j < e && !has_pair; ++j)
                has_pair = is_positive_pair(samples[order[i]], samples[order[j]]);
        if (has_pair) continue;
        bool fixed = false;
        for (std::size_t t = b; t < e && !fixed; ++t) {
            for (std::size_t c = e; c < n && !fixed; ++c) {
                for (std::size_t i = b; i < e && !fixed; ++i) {
                    if (i == t) continue;
                    if (is_positive_pair(samples[order[c]], samples[order[i]])) {
                        std::swap(order[t], order[c]);
                        fixed = true;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

inline ModelParams train_model(std::span<const SampleMeta> train_set, const Matrix& train_pooled,
                               const ExperimentConfig& cfg, int fold) {
    const std::size_t n = train_set.size();
    if (n == 0) throw std::invalid_argument("train_model: empty training set");
    ModelParams params = init_params(cfg.model, derive_seed(cfg.seed, "init", fold));
    const std::uint64_t epoch_base = derive_seed(cfg.seed, "epochs", fold);

    std::vector<std::size_t> order(n);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(epoch_base, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order);
        if (cfg.method == Method::pdscl)
            ensure_positive_pairs(order, cfg.batch_size, train_set);

        for (std::size_t b = 0; b < n; b += cfg.batch_size) {
            const std::size_t e = std::min(b + cfg.batch_size, n);
            const std::size_t bn = e - b;
            Matrix bx(bn, train_pooled.cols);
            BatchMeta bmeta;
            for (std::size_t i = 0; i < bn; ++i) {
                const SampleMeta& s = train_set[order[b + i]];
                std::copy_n(train_pooled.row(order[b + i]), train_pooled.cols, bx.row(i));
                bmeta.labels.push_back(static_cast<int>(s.label));
                bmeta.patient_ids.push_back(s.patient_id);
                bmeta.domain_ids.push_back(static_cast<int>(s.domain));
            }

            ForwardOut f = forward_pooled(bx, params);
            UpstreamGrads up;
            if (cfg.method == Method::dat) {
                const DatLossOutput dl =
                    dat_loss(f.class_logits, f.domain_logits, bmeta, cfg.lambda_dat);
                up.class_logits = dl.grad_class_logits;
                up.domain_logits = dl.grad_domain_logits;
                up.domain_feature_scale = -1.0;  // gradient reversal into the encoder
            } else {
                const LossOutput ce = cross_entropy(f.class_logits, bmeta.labels);
                up.class_logits = ce.grad_features;
                if (cfg.method == Method::pdscl && bn >= 2) {
                    const LossOutput pd = pdscl_loss(f.features, bmeta, cfg.tau);
                    up.features = Matrix(bn, cfg.model.feature_dim);
                    for (std::size_t i = 0; i < up.features.data.size(); ++i)
                        up.features.data[i] = cfg.lambda_pdscl * pd.grad_features.data[i];
                }
            }
            const GradBundle grads = backward(params, f.cache, up);
            params = sgd_step(std::move(params), grads, cfg.lr);
        }
    }
    return params;
}

struct PredictionRow {
    std::string sample_id;
    int label = 0;
    double score_abnormal = 0.0;
    int pred = 0;
};

struct FoldResult {
    int fold = 0;
    std::size_t n_train = 0;
    std::size_t n_val = 0;
    MetricsCounts counts;
    Score score;
    double auc_value = 0.0;
    std::vector<RocPoint> roc;
    std::vector<PredictionRow> predictions;
};

inline FoldResult evaluate_fold(const ModelParams& params, std::span<const SampleMeta> val_set,
                                const Matrix& val_pooled) {
    const ForwardOut f = forward_pooled(val_pooled, params);
    FoldResult r;
    r.n_val = val_set.size();
    std::vector<int> labels, preds;
    std::vector<double> scores;
    std::vector<FineLabel> fines;
    for (std::size_t i = 0; i < val_set.size(); ++i) {
        const double z0 = f.class_logits(i, 0);
        const double z1 = f.class_logits(i, 1);
        const double m = std::max(z0, z1);
        const double p1 = std::exp(z1 - m) / (std::exp(z0 - m) + std::exp(z1 - m));
        const int pred = z1 > z0 ? 1 : 0;
        const int label = static_cast<int>(val_set[i].label);
        labels.push_back(label);
        preds.push_back(pred);
        scores.push_back(p1);
        fines.push_back(val_set[i].fine_label);
        r.predictions.push_back({val_set[i].sample_id, label, p1, pred});
    }
    r.counts = count_predictions(labels, preds, fines);
    r.score = sp_se_sc(r.counts);
    r.roc = roc_curve(scores, labels);
    r.auc_value = auc(scores, labels);
    return r;
}

struct ExperimentReport {
    ExperimentConfig config;
    std::vector<FoldResult> folds;
    Score mean_score;
    double mean_auc = 0.0;
    Score pooled_score;
};

inline int fold_parallelism(int folds) {
    int cap = static_cast<int>(std::thread::hardware_concurrency());
    if (cap <= 0) cap = 1;
    if (const char* env = std::getenv("PDSCL_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) cap = v;
    }
    return std::min(cap, folds);
}

inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    const std::vector<SampleMeta> index = load_metadata(cfg.data_csv);
    const Matrix pooled = load_pooled_features(index, cfg.cache_dir);

    std::vector<std::string> patients;
    for (const auto& s : index) patients.push_back(s.patient_id);
    const FoldAssignment fa = make_folds(patients, cfg.folds, cfg.seed);

    // Partition every fold up front and fail before any training if the
    // method/data combination cannot be evaluated.
    struct FoldData {
        std::vector<SampleMeta> train, val;
        std::vector<std::size_t> train_rows, val_rows;
    };
    std::vector<FoldData> fold_data(static_cast<std::size_t>(cfg.folds));
    std::vector<std::size_t> row_of_id(index.size());
    {
        std::map<std::string, std::size_t> row_by_id;
        for (std::size_t i = 0; i < index.size(); ++i) row_by_id[index[i].sample_id] = i;
        for (int fold = 0; fold < cfg.folds; ++fold) {
            auto [train, val] = fold_partition(index, fa, fold);
            if (cfg.method == Method::ce_mobile_only) {
                std::vector<SampleMeta> mobile_only;
                for (auto& s : train)
                    if (s.domain == Domain::mobile) mobile_only.push_back(std::move(s));
                train = std::move(mobile_only);
            }
            if (train.empty())
                throw std::invalid_argument("fold " + std::to_string(fold) +
                                            " has no training samples for method " +
                                            to_string(cfg.method));
            if (val.empty())
                throw std::invalid_argument("fold " + std::to_string(fold) +
                                            " has no mobile validation samples");
            bool has_normal = false, has_abnormal = false;
            for (const auto& s : val)
                (s.label == Label::normal ? has_normal : has_abnormal) = true;
            if (!has_normal || !has_abnormal)
                throw std::invalid_argument("fold " + std::to_string(fold) +
                                            " validation set lacks one of the two classes");
            FoldData& fd = fold_data[static_cast<std::size_t>(fold)];
            fd.train = std::move(train);
            fd.val = std::move(val);
            for (const auto& s : fd.train) fd.train_rows.push_back(row_by_id.at(s.sample_id));
            for (const auto& s : fd.val) fd.val_rows.push_back(row_by_id.at(s.sample_id));
        }
    }

    auto gather = [&](const std::vector<std::size_t>& rows) {
        Matrix m(rows.size(), pooled.cols);
        for (std::size_t i = 0; i < rows.size(); ++i)
            std::copy_n(pooled.row(rows[i]), pooled.cols, m.row(i));
        return m;
    };

    std::vector<FoldResult> results(static_cast<std::size_t>(cfg.folds));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(cfg.folds));
    std::atomic<int> next{0};
    auto worker = [&]() {
        for (int fold; (fold = next.fetch_add(1)) < cfg.folds;) {
            const auto f = static_cast<std::size_t>(fold);
            try {
                const FoldData& fd = fold_data[f];
                const Matrix train_pooled = gather(fd.train_rows);
                const Matrix val_pooled = gather(fd.val_rows);
                const ModelParams params = train_model(fd.train, train_pooled, cfg, fold);
                FoldResult r = evaluate_fold(params, fd.val, val_pooled);
                r.fold = fold;
                r.n_train = fd.train.size();
                results[f] = std::move(r);
            } catch (...) {
                errors[f] = std::current_exception();
            }
        }
    };
    const int n_threads = fold_parallelism(cfg.folds);
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    ExperimentReport report;
    report.config = cfg;
    report.folds = std::move(results);
    MetricsCounts pooled_counts;
    for (const auto& r : report.folds) {
        report.mean_score.sp += r.score.sp;
        report.mean_score.se += r.score.se;
        report.mean_score.sc += r.score.sc;
        report.mean_auc += r.auc_value;
        pooled_counts.c_n += r.counts.c_n;
        pooled_counts.n_n += r.counts.n_n;
        pooled_counts.c_ab += r.counts.c_ab;
        pooled_counts.n_ab += r.counts.n_ab;
    }
    const double k = static_cast<double>(report.folds.size());
    report.mean_score.sp /= k;
    report.mean_score.se /= k;
    report.mean_score.sc /= k;
    report.mean_auc /= k;
    report.pooled_score = sp_se_sc(pooled_counts);
    return report;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    j["data"] = cfg.data_csv;
    j["cache"] = cfg.cache_dir;
    j["method"] = to_string(cfg.method);
    j["lambda_pdscl"] = cfg.lambda_pdscl;
    j["tau"] = cfg.tau;
    j["lambda_dat"] = cfg.lambda_dat;
    j["folds"] = cfg.folds;
    j["seed"] = cfg.seed;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["lr"] = cfg.lr;
    j["hidden_dim"] = cfg.model.hidden_dim;
    j["feature_dim"] = cfg.model.feature_dim;
    return j;
}

inline nlohmann::ordered_json report_to_json(const ExperimentReport& report) {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["config"] = config_to_json(report.config);
    j["folds"] = nlohmann::ordered_json::array();
    for (const auto& r : report.folds) {
        nlohmann::ordered_json f;
        f["fold"] = r.fold;
        f["n_train"] = r.n_train;
        f["n_val"] = r.n_val;
        f["counts"] = {{"c_n", r.counts.c_n},
                       {"n_n", r.counts.n_n},
                       {"c_ab", r.counts.c_ab},
                       {"n_ab", r.counts.n_ab}};
        f["sp"] = r.score.sp;
        f["se"] = r.score.se;
        f["sc"] = r.score.sc;
        f["auc"] = r.auc_value;
        j["folds"].push_back(std::move(f));
    }
    j["aggregate"] = {{"mean_sp", report.mean_score.sp},
                      {"mean_se", report.mean_score.se},
                      {"mean_sc", report.mean_score.sc},
                      {"mean_auc", report.mean_auc},
                      {"pooled_sp", report.pooled_score.sp},
                      {"pooled_se", report.pooled_score.se},
                      {"pooled_sc", report.pooled_score.sc}};
    return j;
}

inline void write_predictions_csv(const std::string& path,
                                  std::span<const PredictionRow> rows) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write predictions csv: " + path);
    f << "sample_id,label,score_abnormal,pred\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.score_abnormal);
        f << r.sample_id << ',' << r.label << ',' << buf << ',' << r.pred << '\n';
    }
    if (!f) throw std::runtime_error("short write on predictions csv: " + path);
}

inline std::vector<PredictionRow> read_predictions_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open predictions csv: " + path);
    std::string line;
    if (!std::getline(f, line) || line != "sample_id,label,score_abnormal,pred")
        throw std::runtime_error("bad predictions csv header: " + path);
    std::vector<PredictionRow> rows;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        PredictionRow r;
        std::size_t p1 = line.find(','), p2 = line.find(',', p1 + 1),
                    p3 = line.find(',', p2 + 1);
        if (p1 == std::string::npos || p2 == std::string::npos || p3 == std::string::npos)
            throw std::runtime_error("bad predictions csv row: " + line);
        r.sample_id = line.substr(0, p1);
        r.label = std::stoi(line.substr(p1 + 1, p2 - p1 - 1));
        r.score_abnormal = std::stod(line.substr(p2 + 1, p3 - p2 - 1));
        r.pred = std::stoi(line.substr(p3 + 1));
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace pdscl
