#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ncgnn/error.hpp"
#include "ncgnn/sparse.hpp"
#include "ncgnn/tensor.hpp"

namespace ncgnn {

struct SplitMasks {
    std::vector<std::uint8_t> train;
    std::vector<std::uint8_t> val;
    std::vector<std::uint8_t> test;

    bool empty() const { return train.empty() && val.empty() && test.empty(); }

    void validate(std::size_t n_nodes) const {
        if (train.size() != n_nodes || val.size() != n_nodes || test.size() != n_nodes)
            throw DimensionError("SplitMasks: mask length must equal node count");
        for (std::size_t i = 0; i < n_nodes; ++i)
            if (train[i] + val[i] + test[i] > 1)
                throw ValidationError("SplitMasks: node " + std::to_string(i) +
                                      " assigned to more than one split");
    }
};

inline std::size_t mask_count(const std::vector<std::uint8_t>& mask) {
    std::size_t c = 0;
    for (std::uint8_t v : mask) c += v != 0;
    return c;
}

// An undirected node-classification instance: binary symmetric adjacency
// with empty diagonal, dense node features, one label per node, and
// (optionally) named train/val/test masks.
struct GraphDataset {
    std::size_t n_nodes = 0;
    SparseMatrix adjacency;
    Tensor features;  // n_nodes x n_features
    std::vector<int> labels;
    std::size_t n_classes = 0;
    SplitMasks splits;

    std::size_t n_features() const { return features.rank() == 2 ? features.dim(1) : 0; }

    void validate() const {
        adjacency.validate();
        if (adjacency.n_rows != n_nodes || adjacency.n_cols != n_nodes)
            throw DimensionError("GraphDataset: adjacency must be n_nodes x n_nodes");
        if (!is_symmetric(adjacency))
            throw StructuralError("GraphDataset: adjacency must be symmetric");
        for (std::size_t i = 0; i < n_nodes; ++i)
            if (adjacency.has_entry(i, i))
                throw StructuralError("GraphDataset: adjacency diagonal must be empty");
        if (features.rank() != 2 || features.dim(0) != n_nodes)
            throw DimensionError("GraphDataset: features must be n_nodes x f");
        if (labels.size() != n_nodes)
            throw DimensionError("GraphDataset: one label per node required");
        for (std::size_t i = 0; i < n_nodes; ++i)
            if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes)
                throw ValidationError("GraphDataset: label out of range at node " +
                                      std::to_string(i));
        if (!splits.empty()) splits.validate(n_nodes);
    }
};

// Symmetric normalization with one added self-loop per node:
// given adjacency A, returns (D+I)^{-1/2} (A+I) (D+I)^{-1/2}.
// Inputs that already carry diagonal entries are rejected so the augmented
// degree stays unambiguous. The two mirror entries of each edge are computed
// with an identical multiply order, so the result is symmetric bit for bit.
inline SparseMatrix normalize_adjacency(const SparseMatrix& adjacency) {
    adjacency.validate();
    if (adjacency.n_rows != adjacency.n_cols)
        throw StructuralError("normalize_adjacency: matrix must be square");
    if (!is_symmetric(adjacency))
        throw StructuralError("normalize_adjacency: adjacency must be symmetric");
    const std::size_t n = adjacency.n_rows;
    for (std::size_t i = 0; i < n; ++i)
        if (adjacency.has_entry(i, i))
            throw StructuralError(
                "normalize_adjacency: input must not carry diagonal entries; self-loops are "
                "added internally");
    for (double v : adjacency.values)
        if (v < 0.0) throw ValidationError("normalize_adjacency: negative entry");

    // Augmented degrees: row sums of A + I.
    std::vector<double> inv_sqrt_deg(n);
    for (std::size_t i = 0; i < n; ++i) {
        double d = 1.0;
        for (double v : adjacency.row_vals(i)) d += v;
        inv_sqrt_deg[i] = 1.0 / std::sqrt(d);
    }

    SparseMatrix out;
    out.n_rows = out.n_cols = n;
    out.row_offsets.assign(n + 1, 0);
    auto scaled = [&](std::size_t i, std::size_t j, double v) {
        // Canonical factor order keeps (i,j) and (j,i) bit-identical.
        const std::size_t lo = std::min(i, j);
        const std::size_t hi = std::max(i, j);
        return v * inv_sqrt_deg[lo] * inv_sqrt_deg[hi];
    };
    for (std::size_t i = 0; i < n; ++i) {
        bool diag_done = false;
        for (std::size_t p = adjacency.row_offsets[i]; p < adjacency.row_offsets[i + 1]; ++p) {
            const std::size_t j = adjacency.col_indices[p];
            if (!diag_done && j > i) {
                out.col_indices.push_back(i);
                out.values.push_back(scaled(i, i, 1.0));
                diag_done = true;
            }
            out.col_indices.push_back(j);
            out.values.push_back(scaled(i, j, adjacency.values[p]));
        }
        if (!diag_done) {
            out.col_indices.push_back(i);
            out.values.push_back(scaled(i, i, 1.0));
        }
        out.row_offsets[i + 1] = out.col_indices.size();
    }
    return out;
}

// L = I - normalize_adjacency(A). This is the self-loop-augmented Laplacian
// that the polynomial filters are written against.
inline SparseMatrix normalized_laplacian(const SparseMatrix& adjacency) {
    SparseMatrix a_tilde = normalize_adjacency(adjacency);
    SparseMatrix out = a_tilde;
    for (std::size_t i = 0; i < out.n_rows; ++i) {
        for (std::size_t p = out.row_offsets[i]; p < out.row_offsets[i + 1]; ++p) {
            if (out.col_indices[p] == i)
                out.values[p] = 1.0 - out.values[p];
            else
                out.values[p] = -out.values[p];
        }
    }
    return out;
}

}  // namespace ncgnn
