// Command-line interface for the PD-SCL lung-sound lab.
//
// Subcommands: gen-data, features, train, eval, gradcheck, run.
// Every flag has a JSON config-file equivalent (--config file.json, keys are
// the long flag names); explicit flags override the file.
//
// Exit codes: 0 success, 2 validation/check failure, 3 configuration error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pdscl/experiment.hpp"
#include "pdscl/model.hpp"
#include "pdscl/synthdata.hpp"

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config file: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config file " + path + ": " + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config file must hold a JSON object");
    return j;
}

// Fill a value from the config file when the flag was not given on the
// command line; flags win over file entries.
template <typename T>
void apply_config(CLI::App* cmd, const json& cfg, const std::string& key, T& var) {
    const CLI::Option* opt = cmd->get_option("--" + key);
    if (opt->count() == 0 && cfg.contains(key)) {
        try {
            var = cfg.at(key).get<T>();
        } catch (const json::exception& e) {
            throw std::invalid_argument("config key '" + key + "': " + e.what());
        }
    }
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
    if (!f) throw std::runtime_error("short write to " + path);
}

struct TrainFlags {
    std::string data, cache, method = "pdscl";
    double lambda_pdscl = 0.5, tau = 0.5, lambda_dat = 0.2;
    int folds = 5, epochs = 30;
    std::uint64_t seed = 1;
    std::size_t batch_size = 32, hidden_dim = 64, feature_dim = 32;
    double lr = 0.1;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool need_method) {
    cmd->add_option("--data", f.data, "metadata CSV path");
    cmd->add_option("--cache", f.cache, "feature cache directory");
    if (need_method)
        cmd->add_option("--method", f.method,
                        "training method: ce_mobile_only|ce_combined|dat|pdscl");
    cmd->add_option("--lambda-pdscl", f.lambda_pdscl, "contrastive loss weight");
    cmd->add_option("--tau", f.tau, "contrastive temperature");
    cmd->add_option("--lambda-dat", f.lambda_dat, "domain adversarial weight");
    cmd->add_option("--folds", f.folds, "number of cross-validation folds");
    cmd->add_option("--seed", f.seed, "master seed");
    cmd->add_option("--epochs", f.epochs, "training epochs");
    cmd->add_option("--batch-size", f.batch_size, "mini-batch size");
    cmd->add_option("--lr", f.lr, "SGD learning rate");
    cmd->add_option("--hidden-dim", f.hidden_dim, "encoder hidden width");
    cmd->add_option("--feature-dim", f.feature_dim, "encoder feature width");
}

void apply_train_config(CLI::App* cmd, const json& cfg, TrainFlags& f, bool need_method) {
    apply_config(cmd, cfg, "data", f.data);
    apply_config(cmd, cfg, "cache", f.cache);
    if (need_method) apply_config(cmd, cfg, "method", f.method);
    apply_config(cmd, cfg, "lambda-pdscl", f.lambda_pdscl);
    apply_config(cmd, cfg, "tau", f.tau);
    apply_config(cmd, cfg, "lambda-dat", f.lambda_dat);
    apply_config(cmd, cfg, "folds", f.folds);
    apply_config(cmd, cfg, "seed", f.seed);
    apply_config(cmd, cfg, "epochs", f.epochs);
    apply_config(cmd, cfg, "batch-size", f.batch_size);
    apply_config(cmd, cfg, "lr", f.lr);
    apply_config(cmd, cfg, "hidden-dim", f.hidden_dim);
    apply_config(cmd, cfg, "feature-dim", f.feature_dim);
}

pdscl::ExperimentConfig to_experiment_config(const TrainFlags& f) {
    pdscl::ExperimentConfig cfg;
    cfg.data_csv = f.data;
    cfg.cache_dir = f.cache;
    cfg.method = pdscl::method_from_string(f.method);
    cfg.lambda_pdscl = f.lambda_pdscl;
    cfg.tau = f.tau;
    cfg.lambda_dat = f.lambda_dat;
    cfg.folds = f.folds;
    cfg.seed = f.seed;
    cfg.epochs = f.epochs;
    cfg.batch_size = f.batch_size;
    cfg.lr = f.lr;
    cfg.model.hidden_dim = f.hidden_dim;
    cfg.model.feature_dim = f.feature_dim;
    if (cfg.data_csv.empty()) throw std::invalid_argument("--data is required");
    return cfg;
}

int cmd_gen_data(const std::string& out_dir, const pdscl::CorpusConfig& cfg) {
    const auto paths = pdscl::generate_corpus(cfg, out_dir);
    std::cout << "wrote corpus: " << paths.metadata_csv << "\n";
    return 0;
}

int cmd_features(const std::string& data, const std::string& cache) {
    const auto index = pdscl::load_metadata(data);
    pdscl::load_pooled_features(index, cache);
    std::cout << "cached features for " << index.size() << " clips in " << cache << "\n";
    return 0;
}

int cmd_train(const TrainFlags& flags, int fold, const std::string& out) {
    const auto cfg = to_experiment_config(flags);
    if (fold < 0 || fold >= cfg.folds) throw std::invalid_argument("--fold out of range");
    if (out.empty()) throw std::invalid_argument("--out is required");

    const auto index = pdscl::load_metadata(cfg.data_csv);
    const pdscl::Matrix pooled = pdscl::load_pooled_features(index, cfg.cache_dir);
    std::vector<std::string> patients;
    for (const auto& s : index) patients.push_back(s.patient_id);
    const auto fa = pdscl::make_folds(patients, cfg.folds, cfg.seed);
    auto [train, val] = pdscl::fold_partition(index, fa, fold);
    if (cfg.method == pdscl::Method::ce_mobile_only) {
        std::vector<pdscl::SampleMeta> mobile_only;
        for (auto& s : train)
            if (s.domain == pdscl::Domain::mobile) mobile_only.push_back(std::move(s));
        train = std::move(mobile_only);
    }
    if (train.empty()) throw std::invalid_argument("no training samples for this method/fold");

    std::map<std::string, std::size_t> row_by_id;
    for (std::size_t i = 0; i < index.size(); ++i) row_by_id[index[i].sample_id] = i;
    pdscl::Matrix train_pooled(train.size(), pooled.cols);
    for (std::size_t i = 0; i < train.size(); ++i)
        std::copy_n(pooled.row(row_by_id.at(train[i].sample_id)), pooled.cols,
                    train_pooled.row(i));

    const auto params = pdscl::train_model(train, train_pooled, cfg, fold);
    pdscl::save_checkpoint(out, params, cfg.seed,
                           static_cast<std::uint64_t>(cfg.epochs) * train.size());
    std::cout << "trained method=" << pdscl::to_string(cfg.method) << " fold=" << fold
              << " on " << train.size() << " clips; checkpoint: " << out << "\n";
    return 0;
}

int cmd_eval(const TrainFlags& flags, int fold, const std::string& checkpoint,
             const std::string& out_dir) {
    const auto cfg = to_experiment_config(flags);
    if (fold < 0 || fold >= cfg.folds) throw std::invalid_argument("--fold out of range");
    if (checkpoint.empty()) throw std::invalid_argument("--checkpoint is required");

    const auto index = pdscl::load_metadata(cfg.data_csv);
    const pdscl::Matrix pooled = pdscl::load_pooled_features(index, cfg.cache_dir);
    std::vector<std::string> patients;
    for (const auto& s : index) patients.push_back(s.patient_id);
    const auto fa = pdscl::make_folds(patients, cfg.folds, cfg.seed);
    const auto [train, val] = pdscl::fold_partition(index, fa, fold);
    if (val.empty()) throw std::invalid_argument("fold has no mobile validation samples");

    std::map<std::string, std::size_t> row_by_id;
    for (std::size_t i = 0; i < index.size(); ++i) row_by_id[index[i].sample_id] = i;
    pdscl::Matrix val_pooled(val.size(), pooled.cols);
    for (std::size_t i = 0; i < val.size(); ++i)
        std::copy_n(pooled.row(row_by_id.at(val[i].sample_id)), pooled.cols, val_pooled.row(i));

    const auto ck = pdscl::load_checkpoint(checkpoint);
    auto result = pdscl::evaluate_fold(ck.params, val, val_pooled);
    result.fold = fold;

    ordered_json j;
    j["fold"] = fold;
    j["n_val"] = result.n_val;
    j["sp"] = result.score.sp;
    j["se"] = result.score.se;
    j["sc"] = result.score.sc;
    j["auc"] = result.auc_value;
    j["counts"] = {{"c_n", result.counts.c_n},
                   {"n_n", result.counts.n_n},
                   {"c_ab", result.counts.c_ab},
                   {"n_ab", result.counts.n_ab}};
    ordered_json fine = ordered_json::object();
    for (const auto& [label, ct] : result.counts.per_fine)
        fine[pdscl::to_string(label)] = {{"correct", ct.first}, {"total", ct.second}};
    j["per_fine"] = fine;
    std::cout << j.dump(2) << "\n";

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        const auto base = std::filesystem::path(out_dir);
        write_text((base / "metrics.json").string(), j.dump(2) + "\n");
        pdscl::write_predictions_csv((base / "predictions.csv").string(), result.predictions);
        pdscl::write_roc_csv((base / "roc.csv").string(), result.roc);
    }
    return 0;
}

int cmd_gradcheck(const std::string& mode, int n_seeds, std::size_t batch,
                  std::size_t hidden_dim, std::size_t feature_dim) {
    std::vector<std::pair<std::string, pdscl::LossMode>> modes;
    if (mode == "all" || mode == "ce") modes.emplace_back("ce", pdscl::LossMode::ce);
    if (mode == "all" || mode == "ce+pdscl")
        modes.emplace_back("ce+pdscl", pdscl::LossMode::ce_pdscl);
    if (mode == "all" || mode == "dat") modes.emplace_back("dat", pdscl::LossMode::dat);
    if (modes.empty())
        throw std::invalid_argument("--mode must be one of all|ce|ce+pdscl|dat");
    if (hidden_dim > 16 || feature_dim > 16 || batch > 8)
        throw std::invalid_argument("gradcheck dims are capped at H,D<=16, N<=8");

    pdscl::ModelConfig mc;
    mc.hidden_dim = hidden_dim;
    mc.feature_dim = feature_dim;
    bool ok = true;
    for (const auto& [name, loss_mode] : modes) {
        double worst = 0.0;
        for (int s = 0; s < n_seeds; ++s) {
            const auto seed = static_cast<std::uint64_t>(s + 1);
            pdscl::Rng rng(pdscl::derive_seed(seed, "gradcheck"));
            const auto params = pdscl::init_params(mc, rng.next_u64());
            pdscl::Matrix pooled(batch, mc.input_dim);
            for (double& v : pooled.data) v = rng.normal();
            pdscl::BatchMeta meta;
            for (std::size_t i = 0; i < batch; ++i) {
                meta.labels.push_back(static_cast<int>(rng.uniform_int(2)));
                meta.patient_ids.push_back("p" + std::to_string(rng.uniform_int(3)));
                meta.domain_ids.push_back(static_cast<int>(rng.uniform_int(2)));
            }
            worst = std::max(worst, pdscl::grad_check(params, pooled, meta, loss_mode));
        }
        const bool pass = worst < 1e-5;
        ok = ok && pass;
        std::cout << "mode=" << name << " seeds=" << n_seeds << " max_rel_err=" << worst
                  << (pass ? " PASS" : " FAIL") << "\n";
    }
    return ok ? 0 : 2;
}

int cmd_run(const TrainFlags& flags, const std::string& methods_arg,
            const std::string& seeds_arg, const std::string& out_dir) {
    if (out_dir.empty()) throw std::invalid_argument("--out is required");
    std::vector<pdscl::Method> methods;
    if (methods_arg == "all") {
        methods = {pdscl::Method::ce_mobile_only, pdscl::Method::ce_combined,
                   pdscl::Method::dat, pdscl::Method::pdscl};
    } else {
        for (const auto& m : split_list(methods_arg))
            methods.push_back(pdscl::method_from_string(m));
    }
    if (methods.empty()) throw std::invalid_argument("--methods must name at least one method");
    std::vector<std::uint64_t> seeds;
    for (const auto& s : split_list(seeds_arg)) seeds.push_back(std::stoull(s));
    if (seeds.empty()) throw std::invalid_argument("--seeds must name at least one seed");

    std::filesystem::create_directories(out_dir);
    const auto base = std::filesystem::path(out_dir);

    ordered_json summary;
    summary["schema_version"] = 1;
    summary["methods"] = ordered_json::array();
    for (const auto method : methods) {
        double mean_sp = 0, mean_se = 0, mean_sc = 0, mean_auc = 0;
        for (const auto seed : seeds) {
            auto cfg = to_experiment_config(flags);
            cfg.method = method;
            cfg.seed = seed;
            const auto report = pdscl::run_experiment(cfg);
            const std::string tag =
                std::string(pdscl::to_string(method)) + "_seed" + std::to_string(seed);
            write_text((base / ("report_" + tag + ".json")).string(),
                       pdscl::report_to_json(report).dump(2) + "\n");
            for (const auto& fr : report.folds) {
                const std::string fold_tag = tag + "_fold" + std::to_string(fr.fold);
                pdscl::write_predictions_csv((base / ("preds_" + fold_tag + ".csv")).string(),
                                             fr.predictions);
                pdscl::write_roc_csv((base / ("roc_" + fold_tag + ".csv")).string(), fr.roc);
            }
            mean_sp += report.mean_score.sp;
            mean_se += report.mean_score.se;
            mean_sc += report.mean_score.sc;
            mean_auc += report.mean_auc;
        }
        const double k = static_cast<double>(seeds.size());
        ordered_json m;
        m["method"] = pdscl::to_string(method);
        m["mean_sp"] = mean_sp / k;
        m["mean_se"] = mean_se / k;
        m["mean_sc"] = mean_sc / k;
        m["mean_auc"] = mean_auc / k;
        summary["methods"].push_back(m);
        std::cout << pdscl::to_string(method) << ": Sp=" << 100.0 * mean_sp / k
                  << "% Se=" << 100.0 * mean_se / k << "% Sc=" << 100.0 * mean_sc / k
                  << "% AUC=" << mean_auc / k << "\n";
    }
    write_text((base / "summary.json").string(), summary.dump(2) + "\n");
    std::cout << "wrote " << (base / "summary.json").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"patient/domain supervised contrastive learning lab for lung sounds"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic two-domain corpus");
    std::string gen_out, gen_config;
    pdscl::CorpusConfig corpus;
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--patients", corpus.n_patients, "number of patients");
    gen->add_option("--mobile-fraction", corpus.mobile_fraction,
                    "fraction of patients with mobile recordings");
    gen->add_option("--clips", corpus.clips_per_patient_per_domain,
                    "clips per patient per domain");
    gen->add_option("--abnormal-fraction", corpus.abnormal_fraction,
                    "abnormal fraction per patient/domain");
    gen->add_option("--seed", corpus.seed, "corpus seed");
    gen->add_option("--duration-min", corpus.duration_min_s, "min clip seconds");
    gen->add_option("--duration-max", corpus.duration_max_s, "max clip seconds");
    gen->add_option("--config", gen_config, "JSON config file");

    // features
    auto* feat = app.add_subcommand("features", "precompute the feature cache");
    std::string feat_data, feat_cache, feat_config;
    feat->add_option("--data", feat_data, "metadata CSV path");
    feat->add_option("--cache", feat_cache, "feature cache directory");
    feat->add_option("--config", feat_config, "JSON config file");

    // train
    auto* train = app.add_subcommand("train", "train one fold and save a checkpoint");
    TrainFlags train_flags;
    int train_fold = 0;
    std::string train_out, train_config;
    add_train_flags(train, train_flags, true);
    train->add_option("--fold", train_fold, "fold index to train");
    train->add_option("--out", train_out, "checkpoint output path");
    train->add_option("--config", train_config, "JSON config file");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one fold");
    TrainFlags eval_flags;
    int eval_fold = 0;
    std::string eval_ckpt, eval_out, eval_config;
    add_train_flags(eval, eval_flags, false);
    eval->add_option("--fold", eval_fold, "fold index to evaluate");
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint path");
    eval->add_option("--out-dir", eval_out, "directory for metrics/predictions/roc files");
    eval->add_option("--config", eval_config, "JSON config file");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "verify analytic gradients numerically");
    std::string gc_mode = "all", gc_config;
    int gc_seeds = 20;
    std::size_t gc_batch = 6, gc_hidden = 8, gc_feature = 8;
    gc->add_option("--mode", gc_mode, "all|ce|ce+pdscl|dat");
    gc->add_option("--seeds", gc_seeds, "number of random seeds");
    gc->add_option("--batch-size", gc_batch, "batch size (<=8)");
    gc->add_option("--hidden-dim", gc_hidden, "hidden width (<=16)");
    gc->add_option("--feature-dim", gc_feature, "feature width (<=16)");
    gc->add_option("--config", gc_config, "JSON config file");

    // run
    auto* run = app.add_subcommand("run", "full cross-validated sweep over methods and seeds");
    TrainFlags run_flags;
    std::string run_methods = "all", run_seeds = "1,2,3", run_out, run_config;
    add_train_flags(run, run_flags, false);
    run->add_option("--methods", run_methods, "all or comma list of methods");
    run->add_option("--seeds", run_seeds, "comma list of seeds");
    run->add_option("--out", run_out, "output directory for reports");
    run->add_option("--config", run_config, "JSON config file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 3;
    }

    try {
        if (gen->parsed()) {
            const json cfg = load_config_file(gen_config);
            apply_config(gen, cfg, "out", gen_out);
            apply_config(gen, cfg, "patients", corpus.n_patients);
            apply_config(gen, cfg, "mobile-fraction", corpus.mobile_fraction);
            apply_config(gen, cfg, "clips", corpus.clips_per_patient_per_domain);
            apply_config(gen, cfg, "abnormal-fraction", corpus.abnormal_fraction);
            apply_config(gen, cfg, "seed", corpus.seed);
            apply_config(gen, cfg, "duration-min", corpus.duration_min_s);
            apply_config(gen, cfg, "duration-max", corpus.duration_max_s);
            if (gen_out.empty()) throw std::invalid_argument("--out is required");
            return cmd_gen_data(gen_out, corpus);
        }
        if (feat->parsed()) {
            const json cfg = load_config_file(feat_config);
            apply_config(feat, cfg, "data", feat_data);
            apply_config(feat, cfg, "cache", feat_cache);
            if (feat_data.empty() || feat_cache.empty())
                throw std::invalid_argument("--data and --cache are required");
            return cmd_features(feat_data, feat_cache);
        }
        if (train->parsed()) {
            const json cfg = load_config_file(train_config);
            apply_train_config(train, cfg, train_flags, true);
            apply_config(train, cfg, "fold", train_fold);
            apply_config(train, cfg, "out", train_out);
            return cmd_train(train_flags, train_fold, train_out);
        }
        if (eval->parsed()) {
            const json cfg = load_config_file(eval_config);
            apply_train_config(eval, cfg, eval_flags, false);
            apply_config(eval, cfg, "fold", eval_fold);
            apply_config(eval, cfg, "checkpoint", eval_ckpt);
            apply_config(eval, cfg, "out-dir", eval_out);
            return cmd_eval(eval_flags, eval_fold, eval_ckpt, eval_out);
        }
        if (gc->parsed()) {
            const json cfg = load_config_file(gc_config);
            apply_config(gc, cfg, "mode", gc_mode);
            apply_config(gc, cfg, "seeds", gc_seeds);
            apply_config(gc, cfg, "batch-size", gc_batch);
            apply_config(gc, cfg, "hidden-dim", gc_hidden);
            apply_config(gc, cfg, "feature-dim", gc_feature);
            return cmd_gradcheck(gc_mode, gc_seeds, gc_batch, gc_hidden, gc_feature);
        }
        if (run->parsed()) {
            const json cfg = load_config_file(run_config);
            apply_train_config(run, cfg, run_flags, false);
            apply_config(run, cfg, "methods", run_methods);
            apply_config(run, cfg, "seeds", run_seeds);
            apply_config(run, cfg, "out", run_out);
            return cmd_run(run_flags, run_methods, run_seeds, run_out);
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 3;
}
