#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ncgnn/autodiff.hpp"
#include "ncgnn/error.hpp"
#include "ncgnn/filter.hpp"
#include "ncgnn/graph.hpp"
#include "ncgnn/model.hpp"
#include "ncgnn/optim.hpp"
#include "ncgnn/rng.hpp"

namespace ncgnn {

// Every knob of a training run. Serialized alongside every artifact so runs
// are reproducible from the echoed configuration alone.
struct TrainConfig {
    std::size_t f_p = 64;
    std::size_t f_c = 16;
    std::size_t K = 8;
    std::size_t C = 0;  // 0 -> taken from the dataset
    std::size_t T = 3;  // routing iterations (T+1 coupling refinements)

    double m_plus = 0.8;
    double m_minus = 0.2;
    double lambda = 0.5;

    double learning_rate = 1e-3;
    double weight_decay = 5e-3;
    bool weight_decay_all = false;
    double dropout_p = 0.9;

    std::size_t epochs = 200;
    std::uint64_t seed = 1;  // weight init + dropout stream

    FilterSpec filter;

    void validate() const {
        if (f_p == 0 || f_c == 0 || K == 0) throw ValidationError("TrainConfig: zero dimension");
        if (T < 1) throw ValidationError("TrainConfig: T must be >= 1");
        if (!(m_minus > 0.0 && m_minus < m_plus && m_plus < 1.0))
            throw ValidationError("TrainConfig: need 0 < m_minus < m_plus < 1");
        if (!(lambda > 0.0)) throw ValidationError("TrainConfig: lambda must be positive");
        if (!(dropout_p > 0.0 && dropout_p < 1.0))
            throw ValidationError("TrainConfig: dropout_p must lie in (0,1)");
        if (!(learning_rate > 0.0)) throw ValidationError("TrainConfig: learning rate > 0");
        if (weight_decay < 0.0) throw ValidationError("TrainConfig: weight decay >= 0");
        filter.validate();
    }

    AdamConfig adam() const {
        AdamConfig a;
        a.learning_rate = learning_rate;
        a.weight_decay = weight_decay;
        a.weight_decay_all = weight_decay_all;
        return a;
    }
};

// Mean over supervised nodes of the per-class two-sided hinge on capsule
// lengths. The mask picks the nodes whose labels participate.
inline double margin_loss(const CapsuleTensor& class_caps, const std::vector<int>& labels,
                          const std::vector<std::uint8_t>& mask, const TrainConfig& cfg) {
    Tape tape;
    const VarId lengths = tape.lengths_rows(tape.constant(class_caps.data));
    const VarId loss =
        tape.margin_loss(lengths, labels, mask, cfg.m_plus, cfg.m_minus, cfg.lambda);
    return tape.value(loss)[0];
}

// Per-subspace dropout mask with inverted scaling: entries are 0 with
// probability p and 1/(1-p) otherwise. Independent draws per (node, subspace,
// channel).
inline Tensor make_dropout_mask(std::size_t n_nodes, std::size_t K, std::size_t f_p, double p,
                                Rng& rng) {
    Tensor mask({n_nodes, K, f_p});
    const double keep_scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < mask.numel(); ++i)
        mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
    return mask;
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_acc = 0.0;
};

struct TrainResult {
    ModelParams params;  // snapshot with the best validation accuracy
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_acc = 0.0;
};

// Called once per epoch with the training-pass routing state (useful for
// invariant monitoring and coupling exports).
using EpochObserver =
    std::function<void(const EpochRecord&, const RoutingState&, const ModelParams&)>;

namespace detail {

inline double masked_accuracy(const std::vector<int>& predictions,
                              const std::vector<int>& labels,
                              const std::vector<std::uint8_t>& mask) {
    std::size_t total = 0, hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (!mask[i]) continue;
        ++total;
        hit += predictions[i] == labels[i];
    }
    if (total == 0) throw ValidationError("accuracy: empty mask");
    return static_cast<double>(hit) / static_cast<double>(total);
}

inline std::vector<int> predict_with(const GraphDataset& data, const PreparedFilter& filter,
                                     const ModelParams& params, std::size_t passes) {
    Tape tape;
    const BoundParams bound = bind_params_const(tape, params);
    ForwardOptions opts;
    opts.routing_passes = passes;
    const ForwardHandles handles = build_forward(tape, data.features, filter, bound, opts);
    const Tensor& caps = tape.value(handles.class_caps);
    CapsuleTensor ct(caps.dim(0), caps.dim(1), caps.dim(2), caps);
    return predict(ct);
}

}  // namespace detail

// Full-batch training. Per epoch: one dropout forward pass on the training
// mask, backward, Adam step, then a clean forward pass for validation
// accuracy. Keeps the parameter snapshot with the best validation accuracy
// (earliest epoch wins ties). Deterministic in (dataset, config).
inline TrainResult train(const GraphDataset& dataset, TrainConfig cfg,
                         const PreparedFilter& filter, EpochObserver observer = {}) {
    if (cfg.C == 0) cfg.C = dataset.n_classes;
    cfg.validate();
    if (cfg.C != dataset.n_classes)
        throw ValidationError("train: config class count does not match dataset");
    if (dataset.splits.empty()) throw ValidationError("train: dataset has no splits");
    dataset.splits.validate(dataset.n_nodes);
    if (mask_count(dataset.splits.train) == 0)
        throw ValidationError("train: empty training mask");
    if (filter.n_nodes() != dataset.n_nodes)
        throw DimensionError("train: filter node count does not match dataset");

    ModelDims dims;
    dims.n_features = dataset.n_features();
    dims.f_p = cfg.f_p;
    dims.f_c = cfg.f_c;
    dims.K = cfg.K;
    dims.C = cfg.C;
    dims.n_hops = filter.mode == FilterMode::Attention ? filter.n_hops() : 0;

    Rng rng(cfg.seed);
    ModelParams params = init_params(dims, rng);
    AdamState adam = AdamState::init(params);

    TrainResult result;
    result.best_val_acc = -1.0;
    const std::size_t passes = cfg.T + 1;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const Tensor mask =
            make_dropout_mask(dataset.n_nodes, cfg.K, cfg.f_p, cfg.dropout_p, rng);
        Tape tape;
        const BoundParams bound = bind_params(tape, params);
        ForwardOptions opts;
        opts.routing_passes = passes;
        opts.dropout_mask = &mask;
        const ForwardHandles handles = build_forward(tape, dataset.features, filter, bound, opts);
        const VarId loss = tape.margin_loss(handles.lengths, dataset.labels,
                                            dataset.splits.train, cfg.m_plus, cfg.m_minus,
                                            cfg.lambda);
        const double loss_value = tape.value(loss)[0];
        if (!std::isfinite(loss_value))
            throw NumericError("train: loss diverged at epoch " + std::to_string(epoch));

        RoutingState state;
        if (observer) state = extract_state(tape, handles);

        params.zero_grads();
        tape.backward(loss);
        adam_step(params, adam, cfg.adam(), epoch);

        const std::vector<int> predictions =
            detail::predict_with(dataset, filter, params, passes);
        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = loss_value;
        record.val_acc =
            detail::masked_accuracy(predictions, dataset.labels, dataset.splits.val);
        result.history.push_back(record);

        if (record.val_acc > result.best_val_acc) {
            result.best_val_acc = record.val_acc;
            result.best_epoch = epoch;
            result.params = params;
        }
        if (observer) observer(record, state, params);
    }

    if (result.history.empty()) {
        result.params = params;  // epochs == 0: hand back the initialization
        result.best_val_acc = 0.0;
    }
    return result;
}

// Convenience overload that prepares the filter from the config.
inline TrainResult train(const GraphDataset& dataset, const TrainConfig& cfg,
                         EpochObserver observer = {}) {
    const SparseMatrix a_tilde = normalize_adjacency(dataset.adjacency);
    const PreparedFilter filter = prepare_filter(a_tilde, cfg.filter);
    return train(dataset, cfg, filter, std::move(observer));
}

}  // namespace ncgnn
