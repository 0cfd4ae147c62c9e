#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <tuple>
#include <vector>

#include "ncgnn/error.hpp"
#include "ncgnn/tensor.hpp"

namespace ncgnn {

// CSR sparse matrix. Invariants (checked by validate()):
//   - row_offsets has length n_rows+1, is monotone, ends at values.size()
//   - column indices strictly increasing within each row (no duplicates)
//   - col_indices and values have equal length
// All products accumulate in ascending-column order per row, so results are
// reproducible bit for bit.
struct SparseMatrix {
    std::size_t n_rows = 0;
    std::size_t n_cols = 0;
    std::vector<std::size_t> row_offsets{0};
    std::vector<std::size_t> col_indices;
    std::vector<double> values;

    std::size_t nnz() const { return values.size(); }

    std::size_t row_nnz(std::size_t i) const { return row_offsets[i + 1] - row_offsets[i]; }

    std::span<const std::size_t> row_cols(std::size_t i) const {
        return {col_indices.data() + row_offsets[i], row_nnz(i)};
    }
    std::span<const double> row_vals(std::size_t i) const {
        return {values.data() + row_offsets[i], row_nnz(i)};
    }

    // Stored value at (i, j), or 0 if the entry is structurally absent.
    double at(std::size_t i, std::size_t j) const {
        auto cols = row_cols(i);
        auto it = std::lower_bound(cols.begin(), cols.end(), j);
        if (it == cols.end() || *it != j) return 0.0;
        return values[row_offsets[i] + static_cast<std::size_t>(it - cols.begin())];
    }

    bool has_entry(std::size_t i, std::size_t j) const {
        auto cols = row_cols(i);
        return std::binary_search(cols.begin(), cols.end(), j);
    }

    void validate() const {
        if (row_offsets.size() != n_rows + 1)
            throw StructuralError("SparseMatrix: row_offsets length must be n_rows+1");
        if (row_offsets.front() != 0 || row_offsets.back() != values.size())
            throw StructuralError("SparseMatrix: row_offsets must span [0, nnz]");
        if (col_indices.size() != values.size())
            throw StructuralError("SparseMatrix: col_indices/values length mismatch");
        for (std::size_t i = 0; i < n_rows; ++i) {
            if (row_offsets[i] > row_offsets[i + 1])
                throw StructuralError("SparseMatrix: row_offsets not monotone");
            for (std::size_t p = row_offsets[i]; p < row_offsets[i + 1]; ++p) {
                if (col_indices[p] >= n_cols)
                    throw StructuralError("SparseMatrix: column index out of range");
                if (p > row_offsets[i] && col_indices[p] <= col_indices[p - 1])
                    throw StructuralError(
                        "SparseMatrix: columns must be strictly increasing within a row");
            }
        }
    }

    bool operator==(const SparseMatrix& o) const {
        return n_rows == o.n_rows && n_cols == o.n_cols && row_offsets == o.row_offsets &&
               col_indices == o.col_indices && values == o.values;
    }
};

struct Triplet {
    std::size_t row;
    std::size_t col;
    double value;
};

inline SparseMatrix from_triplets(std::size_t n_rows, std::size_t n_cols,
                                  std::vector<Triplet> triplets) {
    std::sort(triplets.begin(), triplets.end(), [](const Triplet& a, const Triplet& b) {
        return std::tie(a.row, a.col) < std::tie(b.row, b.col);
    });
    SparseMatrix m;
    m.n_rows = n_rows;
    m.n_cols = n_cols;
    m.row_offsets.assign(n_rows + 1, 0);
    m.col_indices.reserve(triplets.size());
    m.values.reserve(triplets.size());
    for (std::size_t i = 0; i < triplets.size(); ++i) {
        const Triplet& t = triplets[i];
        if (t.row >= n_rows || t.col >= n_cols)
            throw StructuralError("from_triplets: index out of range");
        if (i > 0 && triplets[i - 1].row == t.row && triplets[i - 1].col == t.col)
            throw StructuralError("from_triplets: duplicate (row, col) entry");
        m.col_indices.push_back(t.col);
        m.values.push_back(t.value);
        ++m.row_offsets[t.row + 1];
    }
    for (std::size_t i = 0; i < n_rows; ++i) m.row_offsets[i + 1] += m.row_offsets[i];
    return m;
}

inline SparseMatrix sparse_identity(std::size_t n) {
    SparseMatrix m;
    m.n_rows = m.n_cols = n;
    m.row_offsets.resize(n + 1);
    m.col_indices.resize(n);
    m.values.assign(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        m.row_offsets[i + 1] = i + 1;
        m.col_indices[i] = i;
    }
    return m;
}

inline Tensor to_dense(const SparseMatrix& m) {
    Tensor d({m.n_rows, m.n_cols});
    for (std::size_t i = 0; i < m.n_rows; ++i)
        for (std::size_t p = m.row_offsets[i]; p < m.row_offsets[i + 1]; ++p)
            d.at(i, m.col_indices[p]) = m.values[p];
    return d;
}

// Sparse x dense. The dense operand may have any rank; its first dimension
// must match n_cols and trailing dimensions are treated as one flat width.
inline Tensor spmm(const SparseMatrix& m, const Tensor& x) {
    if (x.rank() < 1 || x.dim(0) != m.n_cols)
        throw DimensionError("spmm: rows of dense operand (" +
                             (x.rank() ? std::to_string(x.dim(0)) : std::string("?")) +
                             ") must equal n_cols (" + std::to_string(m.n_cols) + ")");
    const std::size_t width = trailing_numel(x, 1);
    std::vector<std::size_t> out_shape = x.shape();
    out_shape[0] = m.n_rows;
    Tensor out(out_shape);
    const double* xd = x.data();
    double* od = out.data();
    for (std::size_t i = 0; i < m.n_rows; ++i) {
        double* orow = od + i * width;
        for (std::size_t p = m.row_offsets[i]; p < m.row_offsets[i + 1]; ++p) {
            const double v = m.values[p];
            const double* xrow = xd + m.col_indices[p] * width;
            for (std::size_t d = 0; d < width; ++d) orow[d] += v * xrow[d];
        }
    }
    return out;
}

inline SparseMatrix transpose(const SparseMatrix& m) {
    SparseMatrix t;
    t.n_rows = m.n_cols;
    t.n_cols = m.n_rows;
    t.row_offsets.assign(t.n_rows + 1, 0);
    for (std::size_t c : m.col_indices) ++t.row_offsets[c + 1];
    for (std::size_t i = 0; i < t.n_rows; ++i) t.row_offsets[i + 1] += t.row_offsets[i];
    t.col_indices.resize(m.nnz());
    t.values.resize(m.nnz());
    std::vector<std::size_t> cursor(t.row_offsets.begin(), t.row_offsets.end() - 1);
    for (std::size_t i = 0; i < m.n_rows; ++i) {
        for (std::size_t p = m.row_offsets[i]; p < m.row_offsets[i + 1]; ++p) {
            const std::size_t c = m.col_indices[p];
            t.col_indices[cursor[c]] = i;
            t.values[cursor[c]] = m.values[p];
            ++cursor[c];
        }
    }
    return t;
}

// Gustavson sparse-sparse product with a dense accumulator row. Accumulation
// order is fixed by the CSR layout of both operands.
inline SparseMatrix multiply(const SparseMatrix& a, const SparseMatrix& b) {
    if (a.n_cols != b.n_rows) throw DimensionError("multiply: inner dimensions differ");
    SparseMatrix c;
    c.n_rows = a.n_rows;
    c.n_cols = b.n_cols;
    c.row_offsets.assign(a.n_rows + 1, 0);
    std::vector<double> acc(b.n_cols, 0.0);
    std::vector<std::uint8_t> used(b.n_cols, 0);
    std::vector<std::size_t> touched;
    touched.reserve(b.n_cols);
    for (std::size_t i = 0; i < a.n_rows; ++i) {
        touched.clear();
        for (std::size_t p = a.row_offsets[i]; p < a.row_offsets[i + 1]; ++p) {
            const std::size_t k = a.col_indices[p];
            const double av = a.values[p];
            for (std::size_t q = b.row_offsets[k]; q < b.row_offsets[k + 1]; ++q) {
                const std::size_t j = b.col_indices[q];
                if (!used[j]) {
                    used[j] = 1;
                    touched.push_back(j);
                }
                acc[j] += av * b.values[q];
            }
        }
        std::sort(touched.begin(), touched.end());
        for (std::size_t j : touched) {
            c.col_indices.push_back(j);
            c.values.push_back(acc[j]);
            acc[j] = 0.0;
            used[j] = 0;
        }
        c.row_offsets[i + 1] = c.col_indices.size();
    }
    return c;
}

// True when the sparsity pattern is symmetric and paired values are equal to
// within `tol` (0 demands bit equality).
inline bool is_symmetric(const SparseMatrix& m, double tol = 0.0) {
    if (m.n_rows != m.n_cols) return false;
    for (std::size_t i = 0; i < m.n_rows; ++i) {
        for (std::size_t p = m.row_offsets[i]; p < m.row_offsets[i + 1]; ++p) {
            const std::size_t j = m.col_indices[p];
            if (!m.has_entry(j, i)) return false;
            const double d = m.values[p] - m.at(j, i);
            if (std::abs(d) > tol) return false;
        }
    }
    return true;
}

// Rewrite every (i, j)/(j, i) pair to the value stored at (min, max). Floating
// point products of symmetric matrices are only symmetric up to roundoff;
// this pins both sides to one canonical representative. Pattern must already
// be symmetric.
inline void symmetrize_values(SparseMatrix& m) {
    for (std::size_t i = 0; i < m.n_rows; ++i) {
        for (std::size_t p = m.row_offsets[i]; p < m.row_offsets[i + 1]; ++p) {
            const std::size_t j = m.col_indices[p];
            if (j <= i) continue;
            auto cols = m.row_cols(j);
            auto it = std::lower_bound(cols.begin(), cols.end(), i);
            if (it == cols.end() || *it != i)
                throw StructuralError("symmetrize_values: pattern is not symmetric");
            m.values[m.row_offsets[j] + static_cast<std::size_t>(it - cols.begin())] =
                m.values[p];
        }
    }
}

// Union-pattern linear combination sum_i w[i] * mats[i].
inline SparseMatrix weighted_sum(const std::vector<const SparseMatrix*>& mats,
                                 const std::vector<double>& w) {
    if (mats.empty() || mats.size() != w.size())
        throw DimensionError("weighted_sum: operand/weight count mismatch");
    const std::size_t n = mats[0]->n_rows;
    const std::size_t c = mats[0]->n_cols;
    for (const SparseMatrix* m : mats)
        if (m->n_rows != n || m->n_cols != c)
            throw DimensionError("weighted_sum: operand sizes differ");
    SparseMatrix out;
    out.n_rows = n;
    out.n_cols = c;
    out.row_offsets.assign(n + 1, 0);
    std::vector<std::size_t> pos(mats.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t m = 0; m < mats.size(); ++m) pos[m] = mats[m]->row_offsets[i];
        while (true) {
            std::size_t next = c;
            for (std::size_t m = 0; m < mats.size(); ++m)
                if (pos[m] < mats[m]->row_offsets[i + 1])
                    next = std::min(next, mats[m]->col_indices[pos[m]]);
            if (next == c) break;
            double v = 0.0;
            for (std::size_t m = 0; m < mats.size(); ++m) {
                if (pos[m] < mats[m]->row_offsets[i + 1] &&
                    mats[m]->col_indices[pos[m]] == next) {
                    v += w[m] * mats[m]->values[pos[m]];
                    ++pos[m];
                }
            }
            out.col_indices.push_back(next);
            out.values.push_back(v);
        }
        out.row_offsets[i + 1] = out.col_indices.size();
    }
    return out;
}

// FNV-1a over the full CSR layout plus value bit patterns; used as a cache
// key for prepared filters.
inline std::uint64_t structure_hash(const SparseMatrix& m) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](std::uint64_t x) {
        for (int b = 0; b < 8; ++b) {
            h ^= (x >> (8 * b)) & 0xff;
            h *= 1099511628211ull;
        }
    };
    mix(m.n_rows);
    mix(m.n_cols);
    for (std::size_t v : m.row_offsets) mix(v);
    for (std::size_t v : m.col_indices) mix(v);
    for (double v : m.values) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        std::memcpy(&bits, &v, sizeof(bits));
        mix(bits);
    }
    return h;
}

}  // namespace ncgnn
