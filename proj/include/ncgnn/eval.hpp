#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ncgnn/error.hpp"
#include "ncgnn/filter.hpp"
#include "ncgnn/graph.hpp"
#include "ncgnn/io.hpp"
#include "ncgnn/model.hpp"
#include "ncgnn/rng.hpp"
#include "ncgnn/train.hpp"

namespace ncgnn {

// Fraction of masked nodes whose predicted class matches the label.
inline double evaluate(const GraphDataset& data, const TrainConfig& cfg,
                       const PreparedFilter& filter, const ModelParams& params,
                       const std::vector<std::uint8_t>& mask) {
    const std::vector<int> predictions = detail::predict_with(data, filter, params, cfg.T + 1);
    return detail::masked_accuracy(predictions, data.labels, mask);
}

// Clean forward pass (no dropout) returning class capsules and routing state.
inline std::pair<CapsuleTensor, RoutingState> run_forward(const GraphDataset& data,
                                                          const TrainConfig& cfg,
                                                          const PreparedFilter& filter,
                                                          const ModelParams& params) {
    Tape tape;
    const BoundParams bound = bind_params_const(tape, params);
    ForwardOptions opts;
    opts.routing_passes = cfg.T + 1;
    const ForwardHandles handles = build_forward(tape, data.features, filter, bound, opts);
    const Tensor& caps = tape.value(handles.class_caps);
    CapsuleTensor ct(caps.dim(0), caps.dim(1), caps.dim(2), caps);
    return {std::move(ct), extract_state(tape, handles)};
}

// Node embedding: the class capsule vector with the largest length.
inline Tensor max_capsule_embedding(const CapsuleTensor& caps) {
    Tensor out({caps.n_nodes, caps.dim});
    const std::vector<int> arg = predict(caps);
    for (std::size_t i = 0; i < caps.n_nodes; ++i)
        for (std::size_t d = 0; d < caps.dim; ++d)
            out.at(i, d) = caps.data.at(i, static_cast<std::size_t>(arg[i]), d);
    return out;
}

// Node embedding: the vector of all class capsule lengths.
inline Tensor capsule_length_embedding(const CapsuleTensor& caps) {
    Tensor out({caps.n_nodes, caps.n_caps});
    for (std::size_t i = 0; i < caps.n_nodes; ++i)
        for (std::size_t l = 0; l < caps.n_caps; ++l) out.at(i, l) = caps.norm(i, l);
    return out;
}

inline constexpr double kMixingRatioCap = 1e9;

// Mean inter-class pairwise distance divided by mean intra-class pairwise
// distance. Higher means better separated classes. Classes with a single
// member contribute no intra pairs (reported via `warnings`). All-identical
// embeddings give 1 by convention; zero intra spread with nonzero inter
// spread is capped at kMixingRatioCap.
inline double mixing_metric(const Tensor& embeddings, const std::vector<int>& labels,
                            std::vector<std::string>* warnings = nullptr) {
    if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size())
        throw DimensionError("mixing_metric: embeddings must be (N, d) with one label per row");
    const std::size_t n = labels.size();
    const std::size_t d = embeddings.dim(1);
    int max_label = -1;
    for (int l : labels) max_label = std::max(max_label, l);
    std::vector<std::size_t> class_sizes(static_cast<std::size_t>(max_label) + 1, 0);
    for (int l : labels) ++class_sizes[static_cast<std::size_t>(l)];
    std::size_t present = 0;
    for (std::size_t c = 0; c < class_sizes.size(); ++c) {
        if (class_sizes[c] == 0) continue;
        ++present;
        if (class_sizes[c] == 1 && warnings)
            warnings->push_back("mixing_metric: class " + std::to_string(c) +
                                " has a single node; no intra-class pairs");
    }
    if (present < 2) throw ValidationError("mixing_metric: need at least two classes present");

    double inter = 0.0, intra = 0.0;
    std::size_t inter_pairs = 0, intra_pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* a = embeddings.data() + i * d;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double* b = embeddings.data() + j * d;
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = a[k] - b[k];
                s += diff * diff;
            }
            const double dist = std::sqrt(s);
            if (labels[i] == labels[j]) {
                intra += dist;
                ++intra_pairs;
            } else {
                inter += dist;
                ++inter_pairs;
            }
        }
    }
    const double inter_mean = inter_pairs ? inter / static_cast<double>(inter_pairs) : 0.0;
    const double intra_mean = intra_pairs ? intra / static_cast<double>(intra_pairs) : 0.0;
    if (intra_mean == 0.0) return inter_mean == 0.0 ? 1.0 : kMixingRatioCap;
    return std::min(inter_mean / intra_mean, kMixingRatioCap);
}

// ---- synthetic stochastic block model ----------------------------------------

inline constexpr double kSbmNoiseStddev = 0.5;

// Blockwise community graph with Gaussian class-mean features. Class means sit
// at basis vectors scaled so every pair of means is `signal` apart; per-node
// noise is isotropic with stddev kSbmNoiseStddev. Deterministic in `seed`.
inline GraphDataset make_sbm(std::size_t n_per_class, std::size_t n_classes, double p_in,
                             double p_out, std::size_t feature_dim, double signal,
                             std::uint64_t seed) {
    if (n_per_class == 0 || n_classes == 0)
        throw ValidationError("make_sbm: class sizes must be positive");
    if (feature_dim < n_classes)
        throw ValidationError("make_sbm: feature_dim must be at least n_classes");
    if (!(p_in >= 0.0 && p_in <= 1.0 && p_out >= 0.0 && p_out <= p_in))
        throw ValidationError("make_sbm: need 0 <= p_out <= p_in <= 1");
    if (signal < 0.0) throw ValidationError("make_sbm: signal must be non-negative");

    const std::size_t n = n_per_class * n_classes;
    Rng rng(seed);
    GraphDataset data;
    data.n_nodes = n;
    data.n_classes = n_classes;
    data.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) data.labels[i] = static_cast<int>(i / n_per_class);

    std::vector<Triplet> triplets;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double p = data.labels[i] == data.labels[j] ? p_in : p_out;
            if (rng.bernoulli(p)) {
                triplets.push_back({i, j, 1.0});
                triplets.push_back({j, i, 1.0});
            }
        }
    }
    data.adjacency = from_triplets(n, n, std::move(triplets));

    const double mean_scale = signal / std::sqrt(2.0);
    data.features = Tensor({n, feature_dim});
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<std::size_t>(data.labels[i]);
        for (std::size_t k = 0; k < feature_dim; ++k) {
            const double mean = (k == c) ? mean_scale : 0.0;
            data.features.at(i, k) = mean + kSbmNoiseStddev * rng.normal();
        }
    }
    data.validate();
    return data;
}

// ---- run reports and sweeps ----------------------------------------------------

struct RunRecord {
    std::uint64_t split_seed = 0;
    std::uint64_t weight_seed = 0;
    std::optional<double> test_accuracy;
    double best_val_accuracy = 0.0;
    std::size_t best_epoch = 0;
    double wall_seconds = 0.0;
};

struct RunReport {
    json config;
    std::vector<RunRecord> runs;
    double mean_test_accuracy = 0.0;
    double std_test_accuracy = 0.0;
    double wall_seconds = 0.0;
    std::vector<std::pair<std::size_t, std::size_t>> filter_nnz;  // (hop, nnz)

    void finalize() {
        std::vector<double> accs;
        for (const RunRecord& r : runs)
            if (r.test_accuracy) accs.push_back(*r.test_accuracy);
        if (accs.empty()) {
            mean_test_accuracy = std_test_accuracy = 0.0;
            return;
        }
        double sum = 0.0;
        for (double a : accs) sum += a;
        mean_test_accuracy = sum / static_cast<double>(accs.size());
        if (accs.size() < 2) {
            std_test_accuracy = 0.0;
            return;
        }
        double ss = 0.0;
        for (double a : accs) ss += (a - mean_test_accuracy) * (a - mean_test_accuracy);
        std_test_accuracy = std::sqrt(ss / static_cast<double>(accs.size() - 1));
    }

    json to_json() const {
        json runs_json = json::array();
        for (const RunRecord& r : runs) {
            json jr = {
                {"split_seed", r.split_seed},
                {"weight_seed", r.weight_seed},
                {"best_val_accuracy", r.best_val_accuracy},
                {"best_epoch", r.best_epoch},
                {"wall_seconds", r.wall_seconds},
            };
            if (r.test_accuracy)
                jr["test_accuracy"] = *r.test_accuracy;
            else
                jr["test_accuracy"] = nullptr;
            runs_json.push_back(std::move(jr));
        }
        json nnz = json::array();
        for (const auto& [hop, count] : filter_nnz)
            nnz.push_back(json{{"hop", hop}, {"nnz", count}});
        return json{
            {"config", config},
            {"runs", std::move(runs_json)},
            {"mean_test_accuracy", mean_test_accuracy},
            {"std_test_accuracy", std_test_accuracy},
            {"wall_seconds", wall_seconds},
            {"filter_nnz", std::move(nnz)},
        };
    }
};

// One train/evaluate cycle on a dataset whose splits are already set.
// test_accuracy stays empty when the test mask has no nodes.
inline RunRecord run_single(const GraphDataset& data, const TrainConfig& cfg,
                            const PreparedFilter& filter, TrainResult* result_out = nullptr,
                            EpochObserver observer = {}) {
    const auto start = std::chrono::steady_clock::now();
    TrainResult result = train(data, cfg, filter, std::move(observer));
    RunRecord record;
    record.weight_seed = cfg.seed;
    record.best_val_accuracy = result.best_val_acc;
    record.best_epoch = result.best_epoch;
    if (mask_count(data.splits.test) > 0) {
        TrainConfig eval_cfg = cfg;
        if (eval_cfg.C == 0) eval_cfg.C = data.n_classes;
        record.test_accuracy =
            evaluate(data, eval_cfg, filter, result.params, data.splits.test);
    }
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (result_out) *result_out = std::move(result);
    return record;
}

struct SweepOptions {
    std::size_t n_splits = 5;
    std::size_t n_seeds = 10;
    SplitSpec split_base;                // split_seed acts as the base of split seeds
    std::uint64_t weight_seed_base = 1;  // run weight seeds count up from here
    std::size_t workers = 1;
};

namespace detail {

template <typename Job>
void run_jobs(std::vector<Job>& jobs, std::size_t workers) {
    if (workers <= 1) {
        for (Job& j : jobs) j();
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(jobs.size());
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            try {
                jobs[i]();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace detail

// Trains one model per receptive-field size (hop set {1..hop}) over a grid of
// splits x weight seeds, and aggregates a report per hop. Runs fan out over
// `workers` threads; each run owns its state and results are merged in a
// fixed order.
inline std::vector<RunReport> receptive_field_sweep(const GraphDataset& data,
                                                    const TrainConfig& base,
                                                    const std::vector<std::size_t>& hops,
                                                    const SweepOptions& opts) {
    if (hops.empty()) throw ValidationError("receptive_field_sweep: empty hop list");
    if (base.filter.mode != FilterMode::Attention)
        throw ValidationError("receptive_field_sweep: receptive field varies the attention "
                              "filter's hop set; diffusion mode has no hop parameter");
    const SparseMatrix a_tilde = normalize_adjacency(data.adjacency);

    std::vector<SplitMasks> splits;
    for (std::size_t s = 0; s < opts.n_splits; ++s) {
        SplitSpec spec = opts.split_base;
        spec.split_seed = opts.split_base.split_seed + s;
        splits.push_back(generate_split(data, spec));
    }

    std::vector<RunReport> reports;
    for (std::size_t hop : hops) {
        const auto start = std::chrono::steady_clock::now();
        TrainConfig cfg = base;
        cfg.filter.max_hop = hop;
        const PreparedFilter filter = prepare_filter(a_tilde, cfg.filter);

        RunReport report;
        report.config = config_to_json(cfg);
        report.filter_nnz = filter.nnz_stats();
        report.runs.resize(opts.n_splits * opts.n_seeds);

        std::vector<std::function<void()>> jobs;
        for (std::size_t s = 0; s < opts.n_splits; ++s) {
            for (std::size_t w = 0; w < opts.n_seeds; ++w) {
                const std::size_t slot = s * opts.n_seeds + w;
                jobs.emplace_back([&, s, w, slot]() {
                    GraphDataset run_data = data;
                    run_data.splits = splits[s];
                    TrainConfig run_cfg = cfg;
                    run_cfg.seed = opts.weight_seed_base + w;
                    RunRecord record = run_single(run_data, run_cfg, filter);
                    record.split_seed = opts.split_base.split_seed + s;
                    report.runs[slot] = std::move(record);
                });
            }
        }
        detail::run_jobs(jobs, opts.workers);
        report.finalize();
        report.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        reports.push_back(std::move(report));
    }
    return reports;
}

// ---- interpretability exports ---------------------------------------------------

struct ExplanationBundle {
    std::vector<std::pair<std::size_t, double>> hop_attention;  // (hop, weight)
    Tensor coupling_weighted;    // (C, K), rows sum to 1
    Tensor coupling_unweighted;  // (C, K), rows sum to 1
    struct NodeNeighborhood {
        std::size_t node = 0;
        std::vector<std::pair<std::size_t, double>> neighbors;  // weight-descending
    };
    std::vector<NodeNeighborhood> neighborhoods;

    json to_json() const {
        json hops = json::array();
        for (const auto& [hop, w] : hop_attention) hops.push_back(json{{"hop", hop}, {"weight", w}});
        auto grid = [](const Tensor& t) {
            json rows = json::array();
            for (std::size_t l = 0; l < t.dim(0); ++l) {
                json row = json::array();
                for (std::size_t k = 0; k < t.dim(1); ++k) row.push_back(t.at(l, k));
                rows.push_back(std::move(row));
            }
            return rows;
        };
        json nbrs = json::array();
        for (const NodeNeighborhood& nn : neighborhoods) {
            json entries = json::array();
            for (const auto& [j, w] : nn.neighbors)
                entries.push_back(json{{"node", j}, {"weight", w}});
            nbrs.push_back(json{{"node", nn.node}, {"neighbors", std::move(entries)}});
        }
        return json{
            {"hop_attention", std::move(hops)},
            {"coupling_weighted", grid(coupling_weighted)},
            {"coupling_unweighted", grid(coupling_unweighted)},
            {"neighborhoods", std::move(nbrs)},
        };
    }

    // Class-by-capsule grid, one row per class capsule.
    void write_coupling_csv(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("write_coupling_csv: cannot open " + path.string());
        out << "class";
        for (std::size_t k = 0; k < coupling_weighted.dim(1); ++k) out << ",capsule_" << k;
        out << '\n';
        out << std::setprecision(17);
        for (std::size_t l = 0; l < coupling_weighted.dim(0); ++l) {
            out << l;
            for (std::size_t k = 0; k < coupling_weighted.dim(1); ++k)
                out << ',' << coupling_weighted.at(l, k);
            out << '\n';
        }
    }
};

// Summarizes what the trained model attends to: the hop blend weights (or the
// fixed diffusion series weights), per-class mean coupling coefficients over
// neighbors (both filter-weighted and plain means), and the top filter
// entries per node.
inline ExplanationBundle export_explanations(const ModelParams& params, const RoutingState& state,
                                             const SparseMatrix& abar, const FilterSpec& spec,
                                             std::size_t max_neighbors = 16) {
    ExplanationBundle out;
    if (spec.mode == FilterMode::Attention) {
        if (params.zeta.numel() == 0)
            throw ValidationError("export_explanations: model has no hop logits");
        std::vector<double> z(params.zeta.raw());
        const std::vector<double> xi = softmax(z);
        for (std::size_t i = 0; i < xi.size(); ++i) out.hop_attention.emplace_back(i + 1, xi[i]);
    } else {
        const std::size_t cap = spec.truncation ? *spec.truncation : 64;
        double w = spec.alpha;
        for (std::size_t i = 0; i <= cap; ++i) {
            out.hop_attention.emplace_back(i, w);
            w *= 1.0 - spec.alpha;
            if (!spec.truncation && w < 1e-9) break;
        }
    }

    const std::size_t N = state.couplings.dim(0);
    const std::size_t K = state.couplings.dim(1);
    const std::size_t C = state.couplings.dim(2);
    if (abar.n_rows != N)
        throw DimensionError("export_explanations: filter size does not match routing state");
    out.coupling_weighted = Tensor({C, K});
    out.coupling_unweighted = Tensor({C, K});
    double weight_total = 0.0;
    std::size_t pair_total = 0;
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t p = abar.row_offsets[i]; p < abar.row_offsets[i + 1]; ++p) {
            const std::size_t j = abar.col_indices[p];
            const double w = abar.values[p];
            weight_total += w;
            ++pair_total;
            for (std::size_t l = 0; l < C; ++l)
                for (std::size_t k = 0; k < K; ++k) {
                    out.coupling_weighted.at(l, k) += w * state.couplings.at(j, k, l);
                    out.coupling_unweighted.at(l, k) += state.couplings.at(j, k, l);
                }
        }
    }
    if (weight_total > 0.0)
        for (std::size_t i = 0; i < out.coupling_weighted.numel(); ++i)
            out.coupling_weighted[i] /= weight_total;
    if (pair_total > 0)
        for (std::size_t i = 0; i < out.coupling_unweighted.numel(); ++i)
            out.coupling_unweighted[i] /= static_cast<double>(pair_total);

    for (std::size_t i = 0; i < N; ++i) {
        ExplanationBundle::NodeNeighborhood nn;
        nn.node = i;
        nn.neighbors = neighborhood_of(abar, i);
        std::sort(nn.neighbors.begin(), nn.neighbors.end(),
                  [](const auto& a, const auto& b) {
                      if (a.second != b.second) return a.second > b.second;
                      return a.first < b.first;
                  });
        if (nn.neighbors.size() > max_neighbors) nn.neighbors.resize(max_neighbors);
        out.neighborhoods.push_back(std::move(nn));
    }
    return out;
}

// TSV rows: node_id, label, embedding components.
inline void write_embeddings_tsv(const std::filesystem::path& path, const Tensor& embeddings,
                                 const std::vector<int>& labels) {
    if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size())
        throw DimensionError("write_embeddings_tsv: embeddings must be (N, d)");
    std::ofstream out(path);
    if (!out) throw IoError("write_embeddings_tsv: cannot open " + path.string());
    out << std::setprecision(17);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        out << i << '\t' << labels[i];
        for (std::size_t d = 0; d < embeddings.dim(1); ++d)
            out << '\t' << embeddings.at(i, d);
        out << '\n';
    }
}

}  // namespace ncgnn
