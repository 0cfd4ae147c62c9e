#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ncgnn/autodiff.hpp"
#include "ncgnn/error.hpp"
#include "ncgnn/eval.hpp"
#include "ncgnn/filter.hpp"
#include "ncgnn/graph.hpp"
#include "ncgnn/io.hpp"
#include "ncgnn/model.hpp"
#include "ncgnn/train.hpp"

namespace ncgnn {

struct GradCheckRow {
    std::string tensor;
    double max_rel_err = 0.0;
    bool used = true;  // false for parameters that the configured mode never touches
};

struct GradCheckReport {
    std::vector<GradCheckRow> rows;
    double worst = 0.0;

    bool passed(double threshold = 1e-4) const {
        for (const GradCheckRow& r : rows)
            if (r.used && r.max_rel_err >= threshold) return false;
        return true;
    }
};

namespace detail {

inline double gradcheck_loss(const GraphDataset& data, const PreparedFilter& filter,
                             const TrainConfig& cfg, const ModelParams& params) {
    Tape tape;
    const BoundParams bound = bind_params_const(tape, params);
    ForwardOptions opts;
    opts.routing_passes = cfg.T + 1;
    const ForwardHandles handles = build_forward(tape, data.features, filter, bound, opts);
    return tape.value(tape.margin_loss(handles.lengths, data.labels, data.splits.train,
                                       cfg.m_plus, cfg.m_minus, cfg.lambda))[0];
}

}  // namespace detail

// Central-difference verification of the full reverse pass: for every
// parameter coordinate, compares the tape gradient of the training loss
// against (L(theta+delta) - L(theta-delta)) / (2 delta). The forward pass is
// the clean one (no dropout), so the loss is a deterministic function of the
// parameters. `adjoint_corruption` != 1 deliberately breaks one adjoint and
// exists so the negative control can prove the check has teeth.
inline GradCheckReport gradient_check(const GraphDataset& data, TrainConfig cfg,
                                      double delta = 1e-5, double adjoint_corruption = 1.0) {
    if (cfg.C == 0) cfg.C = data.n_classes;
    const SparseMatrix a_tilde = normalize_adjacency(data.adjacency);
    const PreparedFilter filter = prepare_filter(a_tilde, cfg.filter);

    ModelDims dims;
    dims.n_features = data.n_features();
    dims.f_p = cfg.f_p;
    dims.f_c = cfg.f_c;
    dims.K = cfg.K;
    dims.C = cfg.C;
    dims.n_hops = filter.mode == FilterMode::Attention ? filter.n_hops() : cfg.filter.max_hop;

    Rng rng(cfg.seed);
    ModelParams params = init_params(dims, rng);

    // Analytic gradients.
    {
        Tape tape;
        tape.set_relu_adjoint_scale(adjoint_corruption);
        const BoundParams bound = bind_params(tape, params);
        ForwardOptions opts;
        opts.routing_passes = cfg.T + 1;
        const ForwardHandles handles = build_forward(tape, data.features, filter, bound, opts);
        const VarId loss = tape.margin_loss(handles.lengths, data.labels, data.splits.train,
                                            cfg.m_plus, cfg.m_minus, cfg.lambda);
        params.zero_grads();
        tape.backward(loss);
    }

    GradCheckReport report;
    params.for_each([&](const char* name, Tensor& value, Tensor& grad, bool) {
        GradCheckRow row;
        row.tensor = name;
        row.used = !(filter.mode == FilterMode::Diffusion && std::string(name) == "zeta");
        for (std::size_t i = 0; i < value.numel(); ++i) {
            const double keep = value[i];
            value[i] = keep + delta;
            const double up = detail::gradcheck_loss(data, filter, cfg, params);
            value[i] = keep - delta;
            const double down = detail::gradcheck_loss(data, filter, cfg, params);
            value[i] = keep;
            const double numeric = (up - down) / (2.0 * delta);
            const double analytic = grad[i];
            const double rel = std::abs(analytic - numeric) /
                               std::max(1e-6, std::abs(analytic) + std::abs(numeric));
            row.max_rel_err = std::max(row.max_rel_err, rel);
        }
        report.worst = std::max(report.worst, row.used ? row.max_rel_err : 0.0);
        report.rows.push_back(std::move(row));
    });
    return report;
}

// Built-in derivative-check instances. "tiny" is the small end-to-end case
// every change must keep passing; "small" stresses slightly larger shapes.
struct GradCheckInstance {
    GraphDataset data;
    TrainConfig cfg;
};

inline GradCheckInstance gradcheck_instance(const std::string& size, FilterMode mode) {
    GradCheckInstance inst;
    if (size == "tiny") {
        inst.data = make_sbm(6, 2, 0.5, 0.25, 7, 1.0, 11);
        inst.cfg.K = 3;
        inst.cfg.f_p = 5;
        inst.cfg.f_c = 4;
        inst.cfg.T = 2;
        SplitSpec split;
        split.per_class_train = 3;
        split.val_size = 3;
        split.split_seed = 5;
        inst.data.splits = generate_split(inst.data, split);
    } else if (size == "small") {
        inst.data = make_sbm(20, 2, 0.2, 0.05, 10, 1.0, 13);
        inst.cfg.K = 4;
        inst.cfg.f_p = 8;
        inst.cfg.f_c = 6;
        inst.cfg.T = 3;
        SplitSpec split;
        split.per_class_train = 8;
        split.val_size = 8;
        split.split_seed = 5;
        inst.data.splits = generate_split(inst.data, split);
    } else {
        throw ValidationError("gradcheck: unknown size '" + size + "' (tiny|small)");
    }
    inst.cfg.C = 2;
    inst.cfg.seed = 3;
    inst.cfg.filter.mode = mode;
    if (mode == FilterMode::Attention) {
        inst.cfg.filter.max_hop = 2;
        inst.cfg.filter.rule = SparsifyRule::topk(8);
    } else {
        inst.cfg.filter.alpha = 0.2;
        inst.cfg.filter.truncation = 10;
        inst.cfg.filter.rule = SparsifyRule::topk(8);
    }
    return inst;
}

}  // namespace ncgnn
