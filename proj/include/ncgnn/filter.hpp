#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ncgnn/error.hpp"
#include "ncgnn/graph.hpp"
#include "ncgnn/sparse.hpp"

namespace ncgnn {

// Row-wise pruning rule applied to dense-ish propagation matrices.
struct SparsifyRule {
    enum class Kind { Epsilon, TopK };

    Kind kind = Kind::TopK;
    double epsilon = 0.0;  // meaningful for Epsilon
    std::size_t k = 128;   // meaningful for TopK

    static SparsifyRule eps(double e) {
        SparsifyRule r;
        r.kind = Kind::Epsilon;
        r.epsilon = e;
        return r;
    }
    static SparsifyRule topk(std::size_t k) {
        SparsifyRule r;
        r.kind = Kind::TopK;
        r.k = k;
        return r;
    }

    // Accepts "topk:K" or "eps:E".
    static SparsifyRule parse(const std::string& s) {
        const auto colon = s.find(':');
        if (colon == std::string::npos)
            throw ValidationError("SparsifyRule: expected 'topk:K' or 'eps:E', got '" + s + "'");
        const std::string head = s.substr(0, colon);
        const std::string tail = s.substr(colon + 1);
        try {
            if (head == "topk") return topk(std::stoull(tail));
            if (head == "eps") return eps(std::stod(tail));
        } catch (const std::exception&) {
            throw ValidationError("SparsifyRule: cannot parse '" + s + "'");
        }
        throw ValidationError("SparsifyRule: unknown kind '" + head + "'");
    }

    std::string str() const {
        return kind == Kind::Epsilon ? "eps:" + std::to_string(epsilon)
                                     : "topk:" + std::to_string(k);
    }

    void validate() const {
        if (kind == Kind::Epsilon && epsilon < 0.0)
            throw ValidationError("SparsifyRule: epsilon must be non-negative");
        if (kind == Kind::TopK && k == 0)
            throw ValidationError("SparsifyRule: k must be positive");
    }
};

namespace detail {

// Per-row survivors under the rule. Diagonal entries are always kept. For
// top-k, the diagonal occupies one of the k slots; ranking is by value
// descending with column ascending as the tie break.
inline std::vector<std::uint8_t> row_keep_flags(const SparseMatrix& m, std::size_t row,
                                                const SparsifyRule& rule) {
    const std::size_t begin = m.row_offsets[row];
    const std::size_t count = m.row_offsets[row + 1] - begin;
    std::vector<std::uint8_t> keep(count, 0);
    if (rule.kind == SparsifyRule::Kind::Epsilon) {
        for (std::size_t p = 0; p < count; ++p)
            keep[p] = m.col_indices[begin + p] == row || m.values[begin + p] >= rule.epsilon;
        return keep;
    }
    if (count <= rule.k) {
        std::fill(keep.begin(), keep.end(), 1);
        return keep;
    }
    std::vector<std::size_t> order(count);
    for (std::size_t p = 0; p < count; ++p) order[p] = p;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double va = m.values[begin + a];
        const double vb = m.values[begin + b];
        if (va != vb) return va > vb;
        return m.col_indices[begin + a] < m.col_indices[begin + b];
    });
    bool diag_in = false;
    for (std::size_t r = 0; r < rule.k; ++r) {
        keep[order[r]] = 1;
        if (m.col_indices[begin + order[r]] == row) diag_in = true;
    }
    if (!diag_in) {
        keep[order[rule.k - 1]] = 0;
        for (std::size_t p = 0; p < count; ++p)
            if (m.col_indices[begin + p] == row) keep[p] = 1;
    }
    return keep;
}

}  // namespace detail

// Prune a symmetric non-negative propagation matrix and recompute its
// symmetric normalization. Entries survive only if they survive the row rule
// on both sides of the diagonal, which keeps the result symmetric and keeps
// every row at or below the top-k budget. Degrees for the renormalization are
// the row sums of the pruned matrix, diagonal included.
inline SparseMatrix sparsify_and_renormalize(const SparseMatrix& m, const SparsifyRule& rule) {
    rule.validate();
    if (m.n_rows != m.n_cols) throw StructuralError("sparsify_and_renormalize: square input");
    SparseMatrix work = m;
    symmetrize_values(work);

    const std::size_t n = work.n_rows;
    std::vector<std::vector<std::uint8_t>> keep(n);
    for (std::size_t i = 0; i < n; ++i) keep[i] = detail::row_keep_flags(work, i, rule);

    auto kept_at = [&](std::size_t i, std::size_t j) {
        auto cols = work.row_cols(i);
        auto it = std::lower_bound(cols.begin(), cols.end(), j);
        if (it == cols.end() || *it != j) return false;
        return keep[i][static_cast<std::size_t>(it - cols.begin())] != 0;
    };

    SparseMatrix pruned;
    pruned.n_rows = pruned.n_cols = n;
    pruned.row_offsets.assign(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = work.row_offsets[i]; p < work.row_offsets[i + 1]; ++p) {
            const std::size_t j = work.col_indices[p];
            if (!keep[i][p - work.row_offsets[i]]) continue;
            if (j != i && !kept_at(j, i)) continue;
            pruned.col_indices.push_back(j);
            pruned.values.push_back(work.values[p]);
        }
        pruned.row_offsets[i + 1] = pruned.col_indices.size();
    }

    std::vector<double> inv_sqrt(n);
    for (std::size_t i = 0; i < n; ++i) {
        double d = 0.0;
        for (double v : pruned.row_vals(i)) d += v;
        if (!(d > 0.0))
            throw NumericError("sparsify_and_renormalize: non-positive row sum at row " +
                               std::to_string(i));
        inv_sqrt[i] = 1.0 / std::sqrt(d);
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = pruned.row_offsets[i]; p < pruned.row_offsets[i + 1]; ++p) {
            const std::size_t j = pruned.col_indices[p];
            const std::size_t lo = std::min(i, j);
            const std::size_t hi = std::max(i, j);
            pruned.values[p] = pruned.values[p] * inv_sqrt[lo] * inv_sqrt[hi];
        }
    }
    return pruned;
}

// Exact hop-power of the normalized adjacency, pruned and renormalized.
// The power itself is computed without intermediate pruning.
inline SparseMatrix matrix_power_sparsified(const SparseMatrix& a_tilde, std::size_t hop,
                                            const SparsifyRule& rule) {
    if (hop < 1)
        throw ValidationError("matrix_power_sparsified: hop must be at least 1");
    SparseMatrix power = a_tilde;
    for (std::size_t i = 1; i < hop; ++i) power = multiply(a_tilde, power);
    return sparsify_and_renormalize(power, rule);
}

// The per-hop matrices that a learned hop-attention combination draws from.
struct HopPowerSet {
    std::vector<std::size_t> hops;       // sorted, ascending
    std::vector<SparseMatrix> matrices;  // aligned with hops

    static HopPowerSet build(const SparseMatrix& a_tilde, std::vector<std::size_t> hops,
                             const SparsifyRule& rule) {
        std::sort(hops.begin(), hops.end());
        if (hops.empty() || hops.front() < 1)
            throw ValidationError("HopPowerSet: hops must be positive");
        for (std::size_t i = 1; i < hops.size(); ++i)
            if (hops[i] == hops[i - 1]) throw ValidationError("HopPowerSet: duplicate hop");
        HopPowerSet out;
        out.hops = hops;
        SparseMatrix power = a_tilde;
        std::size_t current = 1;
        for (std::size_t hop : hops) {
            while (current < hop) {
                power = multiply(a_tilde, power);
                ++current;
            }
            out.matrices.push_back(sparsify_and_renormalize(power, rule));
        }
        return out;
    }

    std::size_t n_nodes() const { return matrices.empty() ? 0 : matrices.front().n_rows; }
};

struct AttentionFilterParams {
    std::vector<double> zeta;  // free logits, one per hop
};

inline std::vector<double> softmax(const std::vector<double>& z) {
    if (z.empty()) throw ValidationError("softmax: empty input");
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    std::vector<double> out(z.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - m);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

// Convex hop combination: softmax(zeta) weights over the per-hop matrices.
// The learnable path differentiates through Tape::hop_blend; this function
// materializes the combined matrix for inspection, export, and inference.
inline SparseMatrix build_attention_filter(const HopPowerSet& powers,
                                           const AttentionFilterParams& params,
                                           std::optional<SparsifyRule> final_rule = {}) {
    if (powers.matrices.empty())
        throw ValidationError("build_attention_filter: empty hop set");
    if (params.zeta.size() != powers.hops.size())
        throw DimensionError("build_attention_filter: zeta size (" +
                             std::to_string(params.zeta.size()) + ") != hop count (" +
                             std::to_string(powers.hops.size()) + ")");
    for (double z : params.zeta)
        if (!std::isfinite(z)) throw ValidationError("build_attention_filter: non-finite zeta");
    const std::vector<double> xi = softmax(params.zeta);
    std::vector<const SparseMatrix*> mats;
    for (const SparseMatrix& m : powers.matrices) mats.push_back(&m);
    SparseMatrix abar = weighted_sum(mats, xi);
    if (final_rule) abar = sparsify_and_renormalize(abar, *final_rule);
    return abar;
}

struct DiffusionFilterParams {
    double alpha = 0.1;                     // teleport probability
    std::optional<std::size_t> truncation;  // absent -> exact inverse
};

inline constexpr std::size_t kExactPprMaxNodes = 4096;

// Personalized-PageRank propagation matrix alpha * (I - (1-alpha) * A~)^-1,
// either by dense inversion (small graphs) or by the truncated power series
// sum_{i=0..P} alpha (1-alpha)^i A~^i. No pruning, no renormalization.
inline SparseMatrix ppr_matrix(const SparseMatrix& a_tilde, const DiffusionFilterParams& params,
                               std::vector<std::string>* warnings = nullptr) {
    if (!(params.alpha > 0.0 && params.alpha < 1.0))
        throw ValidationError("ppr_matrix: alpha must lie in (0,1)");
    if (a_tilde.n_rows != a_tilde.n_cols) throw StructuralError("ppr_matrix: square input");
    const std::size_t n = a_tilde.n_rows;
    const double alpha = params.alpha;

    if (params.truncation) {
        const std::size_t P = *params.truncation;
        if (P == 0 && warnings)
            warnings->push_back("ppr truncation 0: filter degenerates to alpha * identity");
        SparseMatrix result = sparse_identity(n);
        for (double& v : result.values) v = alpha;
        SparseMatrix power = sparse_identity(n);
        double coeff = alpha;
        for (std::size_t i = 1; i <= P; ++i) {
            power = multiply(a_tilde, power);
            coeff *= 1.0 - alpha;
            result = weighted_sum({&result, &power}, {1.0, coeff});
        }
        return result;
    }

    if (n > kExactPprMaxNodes)
        throw ValidationError("ppr_matrix: exact inverse limited to " +
                              std::to_string(kExactPprMaxNodes) +
                              " nodes; pass a truncation order for larger graphs");
    MatrixRM b = MatrixRM::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = a_tilde.row_offsets[i]; p < a_tilde.row_offsets[i + 1]; ++p)
            b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a_tilde.col_indices[p])) -=
                (1.0 - alpha) * a_tilde.values[p];
    MatrixRM inv = b.partialPivLu().solve(
        MatrixRM::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));

    SparseMatrix out;
    out.n_rows = out.n_cols = n;
    out.row_offsets.assign(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double v = alpha * inv(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            const double mirror =
                alpha * inv(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
            // Keep the union pattern so the stored structure is symmetric even
            // when roundoff leaves one side exactly zero.
            if (v != 0.0 || mirror != 0.0 || i == j) {
                out.col_indices.push_back(j);
                out.values.push_back(v);
            }
        }
        out.row_offsets[i + 1] = out.col_indices.size();
    }
    return out;
}

// Fixed diffusion filter: PPR matrix, pruned, symmetric-renormalized.
inline SparseMatrix build_ppr_filter(const SparseMatrix& a_tilde,
                                     const DiffusionFilterParams& params,
                                     const SparsifyRule& rule,
                                     std::vector<std::string>* warnings = nullptr) {
    return sparsify_and_renormalize(ppr_matrix(a_tilde, params, warnings), rule);
}

// Coefficient change of basis between polynomials in the normalized adjacency
// and polynomials in the augmented Laplacian L = I - A~:
// theta_j = (-1)^j * sum_{i>=j} binom(i, j) * xi_i.
inline std::vector<double> adjacency_poly_to_laplacian_poly(const std::vector<double>& xi) {
    for (double v : xi)
        if (!std::isfinite(v))
            throw ValidationError("adjacency_poly_to_laplacian_poly: non-finite coefficient");
    const std::size_t len = xi.size();
    if (len == 0) return {};
    // Pascal's triangle up to the polynomial degree.
    std::vector<std::vector<double>> binom(len, std::vector<double>(len, 0.0));
    for (std::size_t i = 0; i < len; ++i) {
        binom[i][0] = 1.0;
        for (std::size_t j = 1; j <= i; ++j)
            binom[i][j] = binom[i - 1][j - 1] + (j <= i - 1 ? binom[i - 1][j] : 0.0);
    }
    std::vector<double> theta(len, 0.0);
    for (std::size_t j = 0; j < len; ++j) {
        double acc = 0.0;
        for (std::size_t i = j; i < len; ++i) acc += binom[i][j] * xi[i];
        theta[j] = (j % 2 == 0) ? acc : -acc;
    }
    return theta;
}

// Stored entries of one filter row: the aggregation subgraph of `node`.
inline std::vector<std::pair<std::size_t, double>> neighborhood_of(const SparseMatrix& filter,
                                                                   std::size_t node) {
    if (node >= filter.n_rows)
        throw ValidationError("neighborhood_of: node " + std::to_string(node) + " out of range");
    std::vector<std::pair<std::size_t, double>> out;
    out.reserve(filter.row_nnz(node));
    for (std::size_t p = filter.row_offsets[node]; p < filter.row_offsets[node + 1]; ++p)
        out.emplace_back(filter.col_indices[p], filter.values[p]);
    return out;
}

enum class FilterMode { Attention, Diffusion };

inline std::string to_string(FilterMode m) {
    return m == FilterMode::Attention ? "attention" : "ppr";
}

inline FilterMode filter_mode_from_string(const std::string& s) {
    if (s == "attention") return FilterMode::Attention;
    if (s == "ppr" || s == "diffusion") return FilterMode::Diffusion;
    throw ValidationError("unknown filter mode '" + s + "'");
}

struct FilterSpec {
    FilterMode mode = FilterMode::Attention;
    std::size_t max_hop = 2;                // attention: hop set {1..max_hop}
    double alpha = 0.1;                     // diffusion teleport probability
    std::optional<std::size_t> truncation;  // diffusion series order; absent -> exact
    SparsifyRule rule = SparsifyRule::topk(128);
    bool sparsify_final = false;  // attention: also prune the combined matrix on export

    void validate() const {
        rule.validate();
        if (mode == FilterMode::Attention && max_hop < 1)
            throw ValidationError("FilterSpec: max_hop must be at least 1");
        if (mode == FilterMode::Diffusion && !(alpha > 0.0 && alpha < 1.0))
            throw ValidationError("FilterSpec: alpha must lie in (0,1)");
    }

    std::vector<std::size_t> hop_set() const {
        std::vector<std::size_t> hops(max_hop);
        for (std::size_t i = 0; i < max_hop; ++i) hops[i] = i + 1;
        return hops;
    }
};

// Propagation matrices ready for the forward pass. Attention mode keeps the
// per-hop matrices separate (their blend weights are learned); diffusion mode
// holds the single fixed matrix. All matrices are symmetric by construction,
// which the aggregation adjoint relies on.
struct PreparedFilter {
    FilterMode mode = FilterMode::Attention;
    std::vector<std::size_t> hops;
    std::vector<std::shared_ptr<const SparseMatrix>> hop_matrices;
    std::shared_ptr<const SparseMatrix> diffusion;
    FilterSpec spec;

    std::size_t n_nodes() const {
        if (mode == FilterMode::Diffusion) return diffusion ? diffusion->n_rows : 0;
        return hop_matrices.empty() ? 0 : hop_matrices.front()->n_rows;
    }

    std::size_t n_hops() const { return hops.size(); }

    std::vector<std::pair<std::size_t, std::size_t>> nnz_stats() const {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        if (mode == FilterMode::Diffusion) {
            out.emplace_back(0, diffusion->nnz());
        } else {
            for (std::size_t i = 0; i < hops.size(); ++i)
                out.emplace_back(hops[i], hop_matrices[i]->nnz());
        }
        return out;
    }

    // Combined matrix for export/inference. zeta is required (and only used)
    // in attention mode.
    SparseMatrix materialize(const std::vector<double>& zeta = {}) const {
        if (mode == FilterMode::Diffusion) return *diffusion;
        HopPowerSet powers;
        powers.hops = hops;
        for (const auto& m : hop_matrices) powers.matrices.push_back(*m);
        AttentionFilterParams p;
        p.zeta = zeta.empty() ? std::vector<double>(hops.size(), 0.0) : zeta;
        std::optional<SparsifyRule> final_rule;
        if (spec.sparsify_final) final_rule = spec.rule;
        return build_attention_filter(powers, p, final_rule);
    }
};

inline PreparedFilter prepare_filter(const SparseMatrix& a_tilde, const FilterSpec& spec,
                                     std::vector<std::string>* warnings = nullptr) {
    spec.validate();
    PreparedFilter out;
    out.mode = spec.mode;
    out.spec = spec;
    if (spec.mode == FilterMode::Attention) {
        HopPowerSet powers = HopPowerSet::build(a_tilde, spec.hop_set(), spec.rule);
        out.hops = powers.hops;
        for (SparseMatrix& m : powers.matrices)
            out.hop_matrices.push_back(std::make_shared<const SparseMatrix>(std::move(m)));
    } else {
        DiffusionFilterParams p;
        p.alpha = spec.alpha;
        p.truncation = spec.truncation;
        out.diffusion = std::make_shared<const SparseMatrix>(
            build_ppr_filter(a_tilde, p, spec.rule, warnings));
    }
    return out;
}

}  // namespace ncgnn
