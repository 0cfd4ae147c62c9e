// Command-line front end for the capsule graph network pipeline:
// dataset synthesis, filter preparation/caching, training, evaluation,
// receptive-field sweeps, interpretability exports, and derivative checks.

#include "CLI11.hpp"

#include "ncgnn/ncgnn.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using ncgnn::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNumeric = 1;
constexpr int kExitUsage = 2;

void emit_error(const std::string& type, const std::string& message) {
    const json j = {{"error", {{"type", type}, {"message", message}}}};
    std::cerr << j.dump() << "\n";
}

ncgnn::GraphDataset load_dataset_arg(const std::string& arg, ncgnn::LoadStats* stats = nullptr) {
    const fs::path manifest_path = ncgnn::resolve_dataset_path(arg);
    return ncgnn::load_dataset(ncgnn::load_manifest(manifest_path), stats);
}

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw ncgnn::IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

// Flag bundle layered on top of an optional JSON config file; flags win.
struct ConfigFlags {
    std::string config_path;
    std::optional<std::size_t> K, f_p, f_c, T, epochs, max_hop, truncate;
    std::optional<double> lr, weight_decay, dropout, m_plus, m_minus, lambda, alpha;
    std::optional<std::string> mode, sparsify;
    std::optional<std::uint64_t> weight_seed;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file; flags override its values");
        cmd->add_option("--K", K, "primary capsules per node");
        cmd->add_option("--fp", f_p, "primary capsule dimension");
        cmd->add_option("--fc", f_c, "class capsule dimension");
        cmd->add_option("--T", T, "routing iterations");
        cmd->add_option("--epochs", epochs, "training epochs");
        cmd->add_option("--lr", lr, "learning rate");
        cmd->add_option("--weight-decay", weight_decay, "l2 coefficient");
        cmd->add_option("--dropout", dropout, "dropout probability on primary capsules");
        cmd->add_option("--m-plus", m_plus, "present-class margin");
        cmd->add_option("--m-minus", m_minus, "absent-class margin");
        cmd->add_option("--lambda", lambda, "absent-class loss weight");
        cmd->add_option("--mode", mode, "filter mode: attention|ppr");
        cmd->add_option("--max-hop", max_hop, "attention hop set is {1..max-hop}");
        cmd->add_option("--alpha", alpha, "ppr teleport probability");
        cmd->add_option("--truncate", truncate, "ppr series order (omit for exact inverse)");
        cmd->add_option("--sparsify", sparsify, "pruning rule: topk:K or eps:E");
        cmd->add_option("--weight-seed", weight_seed, "weight init / dropout seed");
    }

    ncgnn::TrainConfig resolve() const {
        ncgnn::TrainConfig cfg;
        if (!config_path.empty()) cfg = ncgnn::load_config(config_path, cfg);
        if (K) cfg.K = *K;
        if (f_p) cfg.f_p = *f_p;
        if (f_c) cfg.f_c = *f_c;
        if (T) cfg.T = *T;
        if (epochs) cfg.epochs = *epochs;
        if (lr) cfg.learning_rate = *lr;
        if (weight_decay) cfg.weight_decay = *weight_decay;
        if (dropout) cfg.dropout_p = *dropout;
        if (m_plus) cfg.m_plus = *m_plus;
        if (m_minus) cfg.m_minus = *m_minus;
        if (lambda) cfg.lambda = *lambda;
        if (mode) cfg.filter.mode = ncgnn::filter_mode_from_string(*mode);
        if (max_hop) cfg.filter.max_hop = *max_hop;
        if (alpha) {
            cfg.filter.alpha = *alpha;
            if (!mode) cfg.filter.mode = ncgnn::FilterMode::Diffusion;
        }
        if (truncate) cfg.filter.truncation = *truncate;
        if (sparsify) cfg.filter.rule = ncgnn::SparsifyRule::parse(*sparsify);
        if (weight_seed) cfg.seed = *weight_seed;
        if (mode && *mode == "attention" && (alpha || truncate))
            throw ncgnn::ValidationError("--alpha/--truncate only apply to ppr mode");
        return cfg;
    }
};

struct SplitFlags {
    std::uint64_t split_seed = 0;
    std::size_t per_class_train = 20;
    std::size_t val_size = 500;

    void attach(CLI::App* cmd) {
        cmd->add_option("--split-seed", split_seed, "split sampling seed");
        cmd->add_option("--per-class-train", per_class_train, "training nodes per class");
        cmd->add_option("--val-size", val_size, "validation set size");
    }

    ncgnn::SplitSpec spec() const {
        ncgnn::SplitSpec s;
        s.split_seed = split_seed;
        s.per_class_train = per_class_train;
        s.val_size = val_size;
        return s;
    }
};

// ---- filter cache ------------------------------------------------------------
// prepare-filter writes matrices plus a meta.json carrying the cache key
// (graph hash + filter spec). A rerun with an identical key is a no-op, and
// train can pick the matrices up instead of rebuilding them.

json filter_cache_key(const ncgnn::SparseMatrix& a_tilde, const ncgnn::FilterSpec& spec) {
    char hash_hex[17];
    std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                  static_cast<unsigned long long>(ncgnn::structure_hash(a_tilde)));
    return json{{"graph_hash", hash_hex}, {"filter", ncgnn::filter_spec_to_json(spec)}};
}

std::vector<fs::path> filter_cache_files(const fs::path& dir, const ncgnn::FilterSpec& spec) {
    std::vector<fs::path> files;
    if (spec.mode == ncgnn::FilterMode::Attention) {
        for (std::size_t hop = 1; hop <= spec.max_hop; ++hop)
            files.push_back(dir / ("hop_" + std::to_string(hop) + ".smtx"));
    } else {
        files.push_back(dir / "ppr.smtx");
    }
    return files;
}

bool filter_cache_valid(const fs::path& dir, const json& key, const ncgnn::FilterSpec& spec) {
    const fs::path meta = dir / "meta.json";
    if (!fs::is_regular_file(meta)) return false;
    std::ifstream in(meta);
    json stored;
    try {
        in >> stored;
    } catch (const json::exception&) {
        return false;
    }
    if (!stored.contains("key") || stored["key"] != key) return false;
    for (const fs::path& f : filter_cache_files(dir, spec))
        if (!fs::is_regular_file(f)) return false;
    return true;
}

ncgnn::PreparedFilter load_cached_filter(const fs::path& dir, const ncgnn::FilterSpec& spec) {
    ncgnn::PreparedFilter filter;
    filter.mode = spec.mode;
    filter.spec = spec;
    if (spec.mode == ncgnn::FilterMode::Attention) {
        for (std::size_t hop = 1; hop <= spec.max_hop; ++hop) {
            filter.hops.push_back(hop);
            filter.hop_matrices.push_back(std::make_shared<const ncgnn::SparseMatrix>(
                ncgnn::import_sparse(dir / ("hop_" + std::to_string(hop) + ".smtx"))));
        }
    } else {
        filter.diffusion = std::make_shared<const ncgnn::SparseMatrix>(
            ncgnn::import_sparse(dir / "ppr.smtx"));
    }
    return filter;
}

void write_filter_cache(const fs::path& dir, const ncgnn::PreparedFilter& filter,
                        const json& key) {
    fs::create_directories(dir);
    json nnz = json::array();
    if (filter.mode == ncgnn::FilterMode::Attention) {
        for (std::size_t i = 0; i < filter.hops.size(); ++i) {
            ncgnn::export_sparse(*filter.hop_matrices[i],
                                 dir / ("hop_" + std::to_string(filter.hops[i]) + ".smtx"));
            nnz.push_back(json{{"hop", filter.hops[i]}, {"nnz", filter.hop_matrices[i]->nnz()}});
        }
    } else {
        ncgnn::export_sparse(*filter.diffusion, dir / "ppr.smtx");
        nnz.push_back(json{{"hop", 0}, {"nnz", filter.diffusion->nnz()}});
    }
    write_json_file(dir / "meta.json", json{{"key", key}, {"nnz", nnz}});
}

// Build the filter, preferring a valid cache directory when given.
ncgnn::PreparedFilter obtain_filter(const ncgnn::SparseMatrix& a_tilde,
                                    const ncgnn::FilterSpec& spec,
                                    const std::string& cache_dir,
                                    std::vector<std::string>* warnings) {
    if (!cache_dir.empty()) {
        const json key = filter_cache_key(a_tilde, spec);
        if (filter_cache_valid(cache_dir, key, spec)) {
            std::cout << "filter cache hit: " << cache_dir << "\n";
            return load_cached_filter(cache_dir, spec);
        }
    }
    return ncgnn::prepare_filter(a_tilde, spec, warnings);
}

// ---- subcommands ----------------------------------------------------------------

int cmd_synth(const std::string& out_dir, std::size_t n_per_class, std::size_t classes,
              double p_in, double p_out, std::size_t dim, double signal, std::uint64_t seed) {
    const ncgnn::GraphDataset data =
        ncgnn::make_sbm(n_per_class, classes, p_in, p_out, dim, signal, seed);
    const fs::path manifest = ncgnn::write_dataset(data, out_dir, "sbm");
    std::cout << "wrote " << manifest.string() << " (" << data.n_nodes << " nodes, "
              << data.adjacency.nnz() / 2 << " edges)\n";
    return kExitOk;
}

int cmd_prepare_filter(const std::string& dataset, const ConfigFlags& flags,
                       const std::string& out_dir, bool sparsify_final) {
    ncgnn::TrainConfig cfg = flags.resolve();
    cfg.filter.sparsify_final = sparsify_final;
    const ncgnn::GraphDataset data = load_dataset_arg(dataset);
    const ncgnn::SparseMatrix a_tilde = ncgnn::normalize_adjacency(data.adjacency);
    const json key = filter_cache_key(a_tilde, cfg.filter);
    if (filter_cache_valid(out_dir, key, cfg.filter)) {
        std::cout << "filter cache hit: " << out_dir << " (nothing to do)\n";
        return kExitOk;
    }
    std::vector<std::string> warnings;
    const ncgnn::PreparedFilter filter = ncgnn::prepare_filter(a_tilde, cfg.filter, &warnings);
    for (const std::string& w : warnings) std::cout << "warning: " << w << "\n";
    write_filter_cache(out_dir, filter, key);
    for (const auto& [hop, nnz] : filter.nnz_stats())
        std::cout << "hop " << hop << ": nnz " << nnz << "\n";
    std::cout << "wrote filter cache to " << out_dir << "\n";
    return kExitOk;
}

int cmd_train(const std::string& dataset, const ConfigFlags& flags, const SplitFlags& splits,
              const std::string& out_dir, const std::string& filter_cache) {
    ncgnn::TrainConfig cfg = flags.resolve();
    ncgnn::GraphDataset data = load_dataset_arg(dataset);
    data.splits = ncgnn::generate_split(data, splits.spec());
    cfg.C = data.n_classes;
    cfg.validate();

    const ncgnn::SparseMatrix a_tilde = ncgnn::normalize_adjacency(data.adjacency);
    std::vector<std::string> warnings;
    const ncgnn::PreparedFilter filter = obtain_filter(a_tilde, cfg.filter, filter_cache,
                                                       &warnings);
    for (const std::string& w : warnings) std::cout << "warning: " << w << "\n";

    ncgnn::TrainResult result;
    const ncgnn::RunRecord record = ncgnn::run_single(data, cfg, filter, &result);

    fs::create_directories(out_dir);
    const json config_echo = ncgnn::config_to_json(cfg);
    write_json_file(fs::path(out_dir) / "config.json", config_echo);
    ncgnn::save_checkpoint(fs::path(out_dir) / "checkpoint.bin", result.params, config_echo);
    ncgnn::write_history(fs::path(out_dir) / "history.jsonl", result.history);

    ncgnn::RunReport report;
    report.config = config_echo;
    ncgnn::RunRecord stamped = record;
    stamped.split_seed = splits.split_seed;
    report.runs.push_back(stamped);
    report.filter_nnz = filter.nnz_stats();
    report.finalize();
    report.wall_seconds = record.wall_seconds;
    write_json_file(fs::path(out_dir) / "report.json", report.to_json());

    std::cout << "best val accuracy " << result.best_val_acc << " at epoch "
              << result.best_epoch << "\n";
    if (record.test_accuracy)
        std::cout << "test accuracy " << *record.test_accuracy << "\n";
    else
        std::cout << "test split empty; no test accuracy\n";
    std::cout << "artifacts in " << out_dir << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& dataset, const std::string& checkpoint,
             const SplitFlags& splits, const std::string& split_name,
             const std::string& out_path) {
    auto [params, config_echo] = ncgnn::load_checkpoint(checkpoint);
    ncgnn::TrainConfig cfg = ncgnn::config_from_json(config_echo);
    ncgnn::GraphDataset data = load_dataset_arg(dataset);
    data.splits = ncgnn::generate_split(data, splits.spec());
    cfg.C = data.n_classes;

    const ncgnn::SparseMatrix a_tilde = ncgnn::normalize_adjacency(data.adjacency);
    const ncgnn::PreparedFilter filter = ncgnn::prepare_filter(a_tilde, cfg.filter);
    const std::vector<std::uint8_t>& mask = split_name == "train" ? data.splits.train
                                            : split_name == "val" ? data.splits.val
                                                                  : data.splits.test;
    const double acc = ncgnn::evaluate(data, cfg, filter, params, mask);
    std::cout << split_name << " accuracy " << acc << "\n";
    if (!out_path.empty())
        write_json_file(out_path, json{{"split", split_name}, {"accuracy", acc}});
    return kExitOk;
}

int cmd_sweep(const std::string& dataset, const ConfigFlags& flags, const SplitFlags& splits,
              const std::string& hops_csv, std::size_t n_splits, std::size_t n_seeds,
              std::size_t workers, const std::string& out_dir) {
    ncgnn::TrainConfig cfg = flags.resolve();
    const ncgnn::GraphDataset data = load_dataset_arg(dataset);

    std::vector<std::size_t> hops;
    std::stringstream ss(hops_csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) hops.push_back(std::stoull(item));

    ncgnn::SweepOptions opts;
    opts.n_splits = n_splits;
    opts.n_seeds = n_seeds;
    opts.split_base = splits.spec();
    opts.weight_seed_base = cfg.seed;
    opts.workers = workers;
    const std::vector<ncgnn::RunReport> reports =
        ncgnn::receptive_field_sweep(data, cfg, hops, opts);

    json out = json::array();
    for (const ncgnn::RunReport& r : reports) out.push_back(r.to_json());
    fs::create_directories(out_dir);
    write_json_file(fs::path(out_dir) / "sweep.json", out);
    for (std::size_t i = 0; i < hops.size(); ++i)
        std::cout << "max-hop " << hops[i] << ": mean test accuracy "
                  << reports[i].mean_test_accuracy << " (std "
                  << reports[i].std_test_accuracy << ", " << reports[i].runs.size()
                  << " runs)\n";
    std::cout << "report in " << (fs::path(out_dir) / "sweep.json").string() << "\n";
    return kExitOk;
}

int cmd_explain(const std::string& dataset, const std::string& checkpoint,
                const SplitFlags& splits, const std::string& out_dir,
                std::size_t max_neighbors) {
    auto [params, config_echo] = ncgnn::load_checkpoint(checkpoint);
    ncgnn::TrainConfig cfg = ncgnn::config_from_json(config_echo);
    ncgnn::GraphDataset data = load_dataset_arg(dataset);
    data.splits = ncgnn::generate_split(data, splits.spec());
    cfg.C = data.n_classes;

    const ncgnn::SparseMatrix a_tilde = ncgnn::normalize_adjacency(data.adjacency);
    const ncgnn::PreparedFilter filter = ncgnn::prepare_filter(a_tilde, cfg.filter);
    const auto [caps, state] = ncgnn::run_forward(data, cfg, filter, params);
    const ncgnn::SparseMatrix abar = filter.materialize(params.zeta.raw());
    const ncgnn::ExplanationBundle bundle =
        ncgnn::export_explanations(params, state, abar, cfg.filter, max_neighbors);

    fs::create_directories(out_dir);
    write_json_file(fs::path(out_dir) / "explanations.json", bundle.to_json());
    bundle.write_coupling_csv(fs::path(out_dir) / "coupling.csv");
    ncgnn::write_embeddings_tsv(fs::path(out_dir) / "embeddings_maxcap.tsv",
                                ncgnn::max_capsule_embedding(caps), data.labels);
    ncgnn::write_embeddings_tsv(fs::path(out_dir) / "embeddings_lengths.tsv",
                                ncgnn::capsule_length_embedding(caps), data.labels);

    std::cout << "hop attention:";
    for (const auto& [hop, w] : bundle.hop_attention) std::cout << " " << hop << ":" << w;
    std::cout << "\nexports in " << out_dir << "\n";
    return kExitOk;
}

int cmd_gradcheck(const std::string& size, const std::string& mode, bool corrupt) {
    const ncgnn::FilterMode fm = ncgnn::filter_mode_from_string(mode);
    const ncgnn::GradCheckInstance inst = ncgnn::gradcheck_instance(size, fm);
    const ncgnn::GradCheckReport report =
        ncgnn::gradient_check(inst.data, inst.cfg, 1e-5, corrupt ? 1.05 : 1.0);
    for (const ncgnn::GradCheckRow& row : report.rows) {
        if (row.used)
            std::cout << row.tensor << ": max relative error " << row.max_rel_err << "\n";
        else
            std::cout << row.tensor << ": unused (" << mode << " mode)\n";
    }
    const bool ok = report.passed(1e-4);
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (worst " << report.worst
              << ")\n";
    return ok ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Node-level capsule graph network pipeline"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a stochastic block model dataset");
    std::string synth_out = "sbm_data";
    std::size_t synth_n = 100, synth_classes = 2, synth_dim = 8;
    double synth_pin = 0.05, synth_pout = 0.005, synth_signal = 1.0;
    std::uint64_t synth_seed = 1;
    synth->add_option("--out", synth_out, "output directory");
    synth->add_option("--n-per-class", synth_n, "nodes per class");
    synth->add_option("--classes", synth_classes, "number of classes");
    synth->add_option("--p-in", synth_pin, "intra-class edge probability");
    synth->add_option("--p-out", synth_pout, "inter-class edge probability");
    synth->add_option("--dim", synth_dim, "feature dimension");
    synth->add_option("--signal", synth_signal, "distance between class feature means");
    synth->add_option("--seed", synth_seed, "generator seed");

    // prepare-filter
    auto* prep = app.add_subcommand("prepare-filter", "Build and cache propagation matrices");
    std::string prep_dataset, prep_out = "filter_cache";
    bool prep_final = false;
    ConfigFlags prep_flags;
    prep->add_option("--dataset", prep_dataset, "dataset name/manifest/directory")->required();
    prep->add_option("--out", prep_out, "cache directory");
    prep->add_flag("--sparsify-final", prep_final,
                   "also prune the combined attention matrix on export");
    prep_flags.attach(prep);

    // train
    auto* train_cmd = app.add_subcommand("train", "Train a model and write artifacts");
    std::string train_dataset, train_out = "run", train_cache;
    ConfigFlags train_flags;
    SplitFlags train_splits;
    train_cmd->add_option("--dataset", train_dataset, "dataset name/manifest/directory")
        ->required();
    train_cmd->add_option("--out-dir", train_out, "artifact directory");
    train_cmd->add_option("--filter-cache", train_cache,
                          "directory from prepare-filter; rebuilt on mismatch");
    train_flags.attach(train_cmd);
    train_splits.attach(train_cmd);

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    std::string eval_dataset, eval_ckpt, eval_split = "test", eval_out;
    SplitFlags eval_splits;
    eval_cmd->add_option("--dataset", eval_dataset, "dataset name/manifest/directory")
        ->required();
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--split", eval_split, "train|val|test")
        ->check(CLI::IsMember({"train", "val", "test"}));
    eval_cmd->add_option("--out", eval_out, "optional JSON output path");
    eval_splits.attach(eval_cmd);

    // sweep
    auto* sweep_cmd = app.add_subcommand("sweep", "Receptive-field sweep over max-hop values");
    std::string sweep_dataset, sweep_hops = "2,3,4,5", sweep_out = "sweep";
    std::size_t sweep_splits_n = 5, sweep_seeds = 10, sweep_workers = 1;
    ConfigFlags sweep_flags;
    SplitFlags sweep_split_flags;
    sweep_cmd->add_option("--dataset", sweep_dataset, "dataset name/manifest/directory")
        ->required();
    sweep_cmd->add_option("--hops", sweep_hops, "comma-separated max-hop values");
    sweep_cmd->add_option("--splits", sweep_splits_n, "number of random splits");
    sweep_cmd->add_option("--seeds", sweep_seeds, "weight seeds per split");
    sweep_cmd->add_option("--workers", sweep_workers, "parallel training runs");
    sweep_cmd->add_option("--out-dir", sweep_out, "report directory");
    sweep_flags.attach(sweep_cmd);
    sweep_split_flags.attach(sweep_cmd);

    // explain
    auto* explain_cmd =
        app.add_subcommand("explain", "Export attention, couplings, and embeddings");
    std::string explain_dataset, explain_ckpt, explain_out = "explain";
    std::size_t explain_neighbors = 16;
    SplitFlags explain_splits;
    explain_cmd->add_option("--dataset", explain_dataset, "dataset name/manifest/directory")
        ->required();
    explain_cmd->add_option("--checkpoint", explain_ckpt, "checkpoint file")->required();
    explain_cmd->add_option("--out-dir", explain_out, "export directory");
    explain_cmd->add_option("--max-neighbors", explain_neighbors,
                            "filter entries kept per node in the export");
    explain_splits.attach(explain_cmd);

    // gradcheck
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference derivative check");
    std::string grad_size = "tiny", grad_mode = "attention";
    bool grad_corrupt = false;
    grad_cmd->add_option("--size", grad_size, "tiny|small")
        ->check(CLI::IsMember({"tiny", "small"}));
    grad_cmd->add_option("--mode", grad_mode, "attention|ppr")
        ->check(CLI::IsMember({"attention", "ppr"}));
    grad_cmd
        ->add_flag("--corrupt-adjoint", grad_corrupt,
                   "test hook: corrupt one adjoint so the check must fail")
        ->group("");  // hidden

    try {
        app.parse(argc, argv);
        if (*synth)
            return cmd_synth(synth_out, synth_n, synth_classes, synth_pin, synth_pout,
                             synth_dim, synth_signal, synth_seed);
        if (*prep) return cmd_prepare_filter(prep_dataset, prep_flags, prep_out, prep_final);
        if (*train_cmd)
            return cmd_train(train_dataset, train_flags, train_splits, train_out, train_cache);
        if (*eval_cmd)
            return cmd_eval(eval_dataset, eval_ckpt, eval_splits, eval_split, eval_out);
        if (*sweep_cmd)
            return cmd_sweep(sweep_dataset, sweep_flags, sweep_split_flags, sweep_hops,
                             sweep_splits_n, sweep_seeds, sweep_workers, sweep_out);
        if (*explain_cmd)
            return cmd_explain(explain_dataset, explain_ckpt, explain_splits, explain_out,
                               explain_neighbors);
        if (*grad_cmd) return cmd_gradcheck(grad_size, grad_mode, grad_corrupt);
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        emit_error("usage", e.what());
        return kExitUsage;
    } catch (const ncgnn::NumericError& e) {
        emit_error("numeric", e.what());
        return kExitNumeric;
    } catch (const ncgnn::IoError& e) {
        emit_error("io", e.what());
        return kExitUsage;
    } catch (const ncgnn::Error& e) {
        emit_error("validation", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        emit_error("internal", e.what());
        return kExitUsage;
    }
}
