#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ncgnn/autodiff.hpp"
#include "ncgnn/error.hpp"
#include "ncgnn/filter.hpp"
#include "ncgnn/rng.hpp"
#include "ncgnn/tensor.hpp"

namespace ncgnn {

// A group of vector-valued capsules per node: (n_nodes, n_caps, dim).
struct CapsuleTensor {
    std::size_t n_nodes = 0;
    std::size_t n_caps = 0;
    std::size_t dim = 0;
    Tensor data;

    CapsuleTensor() = default;
    CapsuleTensor(std::size_t nodes, std::size_t caps, std::size_t d)
        : n_nodes(nodes), n_caps(caps), dim(d), data({nodes, caps, d}) {}
    CapsuleTensor(std::size_t nodes, std::size_t caps, std::size_t d, Tensor t)
        : n_nodes(nodes), n_caps(caps), dim(d), data(std::move(t)) {
        if (data.rank() != 3 || data.dim(0) != nodes || data.dim(1) != caps || data.dim(2) != d)
            throw DimensionError("CapsuleTensor: tensor shape mismatch");
    }

    double norm(std::size_t node, std::size_t cap) const {
        double s = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            const double v = data.at(node, cap, d);
            s += v * v;
        }
        return std::sqrt(s);
    }
};

// Routing coefficients after a forward pass, in (node, k, class) layout.
// couplings are the coefficients that produced the returned class capsules;
// logits include the final in-loop agreement update.
struct RoutingState {
    Tensor logits;     // (N, K, C)
    Tensor couplings;  // (N, K, C)
};

struct ModelDims {
    std::size_t n_features = 0;
    std::size_t f_p = 0;  // primary capsule dim
    std::size_t f_c = 0;  // class capsule dim
    std::size_t K = 0;    // primary capsules per node
    std::size_t C = 0;    // classes
    std::size_t n_hops = 0;  // attention blend size; 0 in diffusion mode
};

// Every learnable array with a same-shaped gradient slot. `version` is bumped
// on each optimizer step; tapes recorded against older versions refuse to
// replay.
struct ModelParams {
    Tensor primary_weights;  // (K, f_p, f)
    Tensor primary_bias;     // (K, f_p)
    Tensor routing_weights;  // (K, C, f_c, f_p)
    Tensor class_bias;       // (C, f_c)
    Tensor zeta;             // (n_hops,) hop-attention logits; empty in diffusion mode

    Tensor primary_weights_grad;
    Tensor primary_bias_grad;
    Tensor routing_weights_grad;
    Tensor class_bias_grad;
    Tensor zeta_grad;

    std::uint64_t version = 0;

    void zero_grads() {
        primary_weights_grad.fill(0.0);
        primary_bias_grad.fill(0.0);
        routing_weights_grad.fill(0.0);
        class_bias_grad.fill(0.0);
        zeta_grad.fill(0.0);
    }

    // f(name, value, grad, decays): `decays` marks the weight matrices that
    // participate in l2 regularization by default.
    template <typename F>
    void for_each(F&& f) {
        f("primary_weights", primary_weights, primary_weights_grad, true);
        f("primary_bias", primary_bias, primary_bias_grad, false);
        f("routing_weights", routing_weights, routing_weights_grad, true);
        f("class_bias", class_bias, class_bias_grad, false);
        if (zeta.numel() > 0) f("zeta", zeta, zeta_grad, false);
    }

    template <typename F>
    void for_each(F&& f) const {
        const_cast<ModelParams*>(this)->for_each(
            [&](const char* n, Tensor& v, Tensor& g, bool d) { f(n, v, g, d); });
    }

    ModelDims dims() const {
        ModelDims d;
        d.K = primary_weights.dim(0);
        d.f_p = primary_weights.dim(1);
        d.n_features = primary_weights.dim(2);
        d.C = class_bias.dim(0);
        d.f_c = class_bias.dim(1);
        d.n_hops = zeta.numel();
        return d;
    }
};

// Glorot-uniform weights, zero biases, zero hop logits (a uniform hop blend
// at the start of training).
inline ModelParams init_params(const ModelDims& d, Rng& rng) {
    auto glorot = [&rng](Tensor& t, std::size_t fan_in, std::size_t fan_out) {
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-limit, limit);
    };
    ModelParams p;
    p.primary_weights = Tensor({d.K, d.f_p, d.n_features});
    p.primary_bias = Tensor({d.K, d.f_p});
    p.routing_weights = Tensor({d.K, d.C, d.f_c, d.f_p});
    p.class_bias = Tensor({d.C, d.f_c});
    p.zeta = Tensor({d.n_hops});
    glorot(p.primary_weights, d.n_features, d.f_p);
    glorot(p.routing_weights, d.f_p, d.f_c);
    p.primary_weights_grad = Tensor(p.primary_weights.shape());
    p.primary_bias_grad = Tensor(p.primary_bias.shape());
    p.routing_weights_grad = Tensor(p.routing_weights.shape());
    p.class_bias_grad = Tensor(p.class_bias.shape());
    p.zeta_grad = Tensor(p.zeta.shape());
    return p;
}

struct BoundParams {
    VarId primary_weights;
    VarId primary_bias;
    VarId routing_weights;
    VarId class_bias;
    VarId zeta;  // only meaningful when the model has hop logits
    bool has_zeta = false;
};

inline BoundParams bind_params(Tape& tape, ModelParams& p) {
    BoundParams b;
    b.primary_weights =
        tape.param(p.primary_weights, &p.primary_weights_grad, &p.version, p.version);
    b.primary_bias = tape.param(p.primary_bias, &p.primary_bias_grad, &p.version, p.version);
    b.routing_weights =
        tape.param(p.routing_weights, &p.routing_weights_grad, &p.version, p.version);
    b.class_bias = tape.param(p.class_bias, &p.class_bias_grad, &p.version, p.version);
    if (p.zeta.numel() > 0) {
        b.zeta = tape.param(p.zeta, &p.zeta_grad, &p.version, p.version);
        b.has_zeta = true;
    }
    return b;
}

inline BoundParams bind_params_const(Tape& tape, const ModelParams& p) {
    BoundParams b;
    b.primary_weights = tape.constant(p.primary_weights);
    b.primary_bias = tape.constant(p.primary_bias);
    b.routing_weights = tape.constant(p.routing_weights);
    b.class_bias = tape.constant(p.class_bias);
    if (p.zeta.numel() > 0) {
        b.zeta = tape.constant(p.zeta);
        b.has_zeta = true;
    }
    return b;
}

struct ForwardOptions {
    std::size_t routing_passes = 3;        // number of coupling refinements (>= 1)
    const Tensor* dropout_mask = nullptr;  // (N, K, f_p) keep/scale factors, or null
};

struct ForwardHandles {
    VarId primaries;    // (N, K, f_p)
    VarId projections;  // (N, C, K, f_c)
    VarId class_caps;   // (N, C, f_c), squashed
    VarId lengths;      // (N, C)
    std::vector<VarId> couplings;  // one (N, C, K) tensor per refinement pass
    VarId final_logits;            // (N, C, K), after the last agreement update
};

namespace detail {

// One aggregation step u = Abar * p (+ per-class bias applied by the caller).
inline VarId propagate(Tape& tape, const PreparedFilter& filter, const BoundParams& params,
                       VarId p) {
    if (filter.mode == FilterMode::Diffusion)
        return tape.spmm(filter.diffusion, filter.diffusion, p);
    if (!params.has_zeta)
        throw ValidationError("forward: attention filter requires hop logits in the model");
    const VarId xi = tape.softmax_rows(params.zeta);
    return tape.hop_blend(filter.hop_matrices, xi, p);
}

}  // namespace detail

// Primary capsule extraction: per-subspace affine map, relu, optional
// dropout on the pre-normalization activations, then unit normalization.
inline VarId build_primary_capsules(Tape& tape, VarId features, const BoundParams& params,
                                    const Tensor* dropout_mask) {
    VarId act = tape.relu(tape.subspace_linear(params.primary_weights, params.primary_bias,
                                               features));
    if (dropout_mask) {
        check_same_shape(tape.value(act), *dropout_mask, "dropout mask");
        act = tape.mul(act, tape.constant(*dropout_mask));
    }
    return tape.l2_normalize_rows(act);
}

// Unrolled capsule routing. Each pass: softmax couplings over the K source
// capsules, per-node capsule selection, filter aggregation plus class bias,
// squash, then a dot-product agreement update of the logits (every node's own
// squashed capsule scores its own projections, computed for all nodes in the
// same pass). Gradients flow through the whole unroll.
inline ForwardHandles build_routing(Tape& tape, VarId primaries, const PreparedFilter& filter,
                                    const BoundParams& params, std::size_t routing_passes) {
    if (routing_passes < 1) throw ValidationError("routing: at least one pass required");
    const Tensor& h = tape.value(primaries);
    if (h.rank() != 3) throw DimensionError("routing: primaries must be (N, K, f_p)");
    if (filter.n_nodes() != h.dim(0))
        throw DimensionError("routing: filter has " + std::to_string(filter.n_nodes()) +
                             " nodes, primaries have " + std::to_string(h.dim(0)));

    ForwardHandles out;
    out.primaries = primaries;
    out.projections = tape.caps_transform(params.routing_weights, primaries);
    const Tensor& proj = tape.value(out.projections);
    const std::size_t N = proj.dim(0), C = proj.dim(1), K = proj.dim(2);

    VarId logits = tape.constant(Tensor({N, C, K}));
    VarId caps = 0;
    for (std::size_t pass = 0; pass < routing_passes; ++pass) {
        const VarId couplings = tape.softmax_rows(logits);
        out.couplings.push_back(couplings);
        const VarId selected = tape.weighted_sum_mid(couplings, out.projections);
        const VarId mixed = detail::propagate(tape, filter, params, selected);
        const VarId pre = tape.add_bias(mixed, params.class_bias);
        caps = tape.squash_rows(pre);
        logits = tape.add(logits, tape.dot_mid(caps, out.projections));
    }
    out.class_caps = caps;
    out.lengths = tape.lengths_rows(caps);
    out.final_logits = logits;
    return out;
}

inline ForwardHandles build_forward(Tape& tape, const Tensor& features,
                                    const PreparedFilter& filter, const BoundParams& params,
                                    const ForwardOptions& opts) {
    if (!features.all_finite())
        throw ValidationError("forward: non-finite entries in feature matrix");
    const VarId x = tape.constant(features);
    const VarId primaries = build_primary_capsules(tape, x, params, opts.dropout_mask);
    return build_routing(tape, primaries, filter, params, opts.routing_passes);
}

// (N, C, K) coupling/logit tensors transposed into the public (N, K, C) layout.
inline RoutingState extract_state(const Tape& tape, const ForwardHandles& handles) {
    const Tensor& couplings = tape.value(handles.couplings.back());
    const Tensor& logits = tape.value(handles.final_logits);
    const std::size_t N = couplings.dim(0), C = couplings.dim(1), K = couplings.dim(2);
    RoutingState state;
    state.logits = Tensor({N, K, C});
    state.couplings = Tensor({N, K, C});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t k = 0; k < K; ++k) {
                state.logits.at(n, k, c) = logits.at(n, c, k);
                state.couplings.at(n, k, c) = couplings.at(n, c, k);
            }
    return state;
}

// ---- standalone (inference) entry points -----------------------------------

inline std::vector<double> squash(const std::vector<double>& u) {
    double s = 0.0;
    for (double v : u) s += v * v;
    const double nrm = std::sqrt(s);
    const double f = nrm * nrm / (1.0 + nrm * nrm) / std::max(nrm, kNormEps);
    std::vector<double> out(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) out[i] = u[i] * f;
    return out;
}

inline CapsuleTensor primary_capsules(const Tensor& features, const ModelParams& params,
                                      const Tensor* dropout_mask = nullptr) {
    if (features.rank() != 2) throw DimensionError("primary_capsules: features must be (N, f)");
    if (!features.all_finite())
        throw ValidationError("primary_capsules: non-finite entries in feature matrix");
    const ModelDims d = params.dims();
    if (features.dim(1) != d.n_features)
        throw DimensionError("primary_capsules: feature width " + std::to_string(features.dim(1)) +
                             " does not match model (" + std::to_string(d.n_features) + ")");
    Tape tape;
    const BoundParams bound = bind_params_const(tape, params);
    const VarId h =
        build_primary_capsules(tape, tape.constant(features), bound, dropout_mask);
    return CapsuleTensor(features.dim(0), d.K, d.f_p, tape.value(h));
}

// Routing against a single materialized filter matrix. `iterations` follows
// the loop convention t = 0..T, i.e. T+1 refinement passes; T >= 1.
inline std::pair<CapsuleTensor, RoutingState> routing_forward(const CapsuleTensor& primaries,
                                                              const SparseMatrix& filter,
                                                              const ModelParams& params,
                                                              std::size_t iterations) {
    if (iterations < 1) throw ValidationError("routing_forward: iteration count must be >= 1");
    if (filter.n_rows != primaries.n_nodes || filter.n_cols != primaries.n_nodes)
        throw DimensionError("routing_forward: filter size does not match node count");
    const ModelDims d = params.dims();
    if (primaries.n_caps != d.K || primaries.dim != d.f_p)
        throw DimensionError("routing_forward: primaries do not match model dims");
    PreparedFilter prepared;
    prepared.mode = FilterMode::Diffusion;
    prepared.diffusion = std::make_shared<const SparseMatrix>(filter);
    Tape tape;
    BoundParams bound = bind_params_const(tape, params);
    bound.has_zeta = false;  // fixed matrix; hop logits do not participate
    const ForwardHandles handles = build_routing(tape, tape.constant(primaries.data), prepared,
                                                 bound, iterations + 1);
    CapsuleTensor caps(primaries.n_nodes, d.C, d.f_c, tape.value(handles.class_caps));
    return {std::move(caps), extract_state(tape, handles)};
}

// Argmax of capsule lengths; ties resolve to the lowest class id.
inline std::vector<int> predict(const CapsuleTensor& class_caps) {
    std::vector<int> out(class_caps.n_nodes, 0);
    for (std::size_t i = 0; i < class_caps.n_nodes; ++i) {
        double best = -1.0;
        for (std::size_t l = 0; l < class_caps.n_caps; ++l) {
            const double len = class_caps.norm(i, l);
            if (len > best) {
                best = len;
                out[i] = static_cast<int>(l);
            }
        }
    }
    return out;
}

// Plain repeated mean-style aggregation (filter * H * W^T with relu), kept
// untrained as the degradation reference for deep stacking.
inline Tensor baseline_mean_aggregate(const Tensor& features, const SparseMatrix& filter,
                                      const std::vector<Tensor>& layer_weights) {
    if (features.rank() != 2) throw DimensionError("baseline: features must be (N, f)");
    if (filter.n_rows != features.dim(0) || filter.n_cols != features.dim(0))
        throw DimensionError("baseline: filter size does not match features");
    if (layer_weights.empty()) throw ValidationError("baseline: at least one layer required");
    Tensor h = features;
    for (const Tensor& w : layer_weights) {
        if (w.rank() != 2 || w.dim(1) != h.dim(1))
            throw DimensionError("baseline: weight shape mismatch");
        Tensor mixed = spmm(filter, h);
        Tensor next({mixed.dim(0), w.dim(0)});
        mat_view(next, next.dim(0), next.dim(1)).noalias() =
            mat_view(mixed, mixed.dim(0), mixed.dim(1)) *
            mat_view(w, w.dim(0), w.dim(1)).transpose();
        for (std::size_t i = 0; i < next.numel(); ++i)
            if (next[i] < 0.0) next[i] = 0.0;
        h = std::move(next);
    }
    return h;
}

inline Tensor baseline_mean_aggregate(const Tensor& features, const SparseMatrix& filter,
                                      std::size_t layers, std::uint64_t seed) {
    if (layers < 1) throw ValidationError("baseline: at least one layer required");
    Rng rng(seed);
    const std::size_t f = features.dim(1);
    std::vector<Tensor> weights;
    const double limit = std::sqrt(6.0 / static_cast<double>(2 * f));
    for (std::size_t l = 0; l < layers; ++l) {
        Tensor w({f, f});
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-limit, limit);
        weights.push_back(std::move(w));
    }
    return baseline_mean_aggregate(features, filter, weights);
}

}  // namespace ncgnn
