#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "ncgnn/error.hpp"
#include "ncgnn/sparse.hpp"
#include "ncgnn/tensor.hpp"

namespace ncgnn {

using VarId = std::size_t;

inline constexpr double kNormEps = 1e-12;

// Reverse-mode tape over dense tensors. Every op records its output value
// eagerly plus an adjoint closure; backward() replays the closures in reverse
// creation order and accumulates gradients. Parameters are bound with a
// version snapshot so a backward pass over mutated parameters fails loudly
// instead of producing stale gradients.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Tape&)> backward;
    };

    VarId constant(Tensor v) { return push(std::move(v), false, nullptr); }

    // Differentiable leaf without an external binding (tests, probes).
    VarId input(Tensor v) { return push(std::move(v), true, nullptr); }

    // Differentiable leaf bound to a parameter tensor. After backward() the
    // computed gradient is written to *grad_out. version/expected guard
    // against replay after an optimizer step.
    VarId param(const Tensor& value, Tensor* grad_out, const std::uint64_t* version,
                std::uint64_t expected) {
        const VarId id = push(value, true, nullptr);
        bindings_.push_back({id, grad_out, version, expected});
        return id;
    }

    const Tensor& value(VarId id) const { return nodes_[id].value; }
    Tensor& grad(VarId id) { return nodes_[id].grad; }
    bool requires_grad(VarId id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Test hook: scales the gradient flowing through relu adjoints, to verify
    // that derivative checks catch a wrong adjoint. 1.0 in normal operation.
    void set_relu_adjoint_scale(double s) { relu_adjoint_scale_ = s; }

    void backward(VarId loss) {
        if (nodes_[loss].value.numel() != 1)
            throw DimensionError("backward: loss must be a scalar");
        for (const ParamBinding& b : bindings_)
            if (b.version && *b.version != b.expected)
                throw StaleTapeError(
                    "backward: bound parameters were mutated after the forward pass");
        nodes_[loss].grad[0] = 1.0;
        for (std::size_t i = loss + 1; i-- > 0;) {
            Node& node = nodes_[i];
            if (!node.requires_grad || !node.backward) continue;
            if (!any_nonzero(node.grad)) continue;
            node.backward(*this);
        }
        for (const ParamBinding& b : bindings_)
            if (b.grad_out) *b.grad_out = nodes_[b.id].grad;
    }

    // ---- primitive ops -----------------------------------------------------

    VarId add(VarId a, VarId b) {
        check_same_shape(value(a), value(b), "add");
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
        return unary_or_binary(std::move(out), a, b, [a, b](Tape& t, VarId o) {
            const Tensor& g = t.grad(o);
            if (t.requires_grad(a)) accumulate(t.grad(a), g);
            if (t.requires_grad(b)) accumulate(t.grad(b), g);
        });
    }

    VarId scale(VarId a, double c) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
        return unary_or_binary(std::move(out), a, a, [a, c](Tape& t, VarId o) {
            const Tensor& g = t.grad(o);
            Tensor& ga = t.grad(a);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
        });
    }

    VarId mul(VarId a, VarId b) {
        check_same_shape(value(a), value(b), "mul");
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
        return unary_or_binary(std::move(out), a, b, [a, b](Tape& t, VarId o) {
            const Tensor& g = t.grad(o);
            if (t.requires_grad(a)) {
                const Tensor& vb = t.value(b);
                Tensor& ga = t.grad(a);
                for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb[i];
            }
            if (t.requires_grad(b)) {
                const Tensor& va = t.value(a);
                Tensor& gb = t.grad(b);
                for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
            }
        });
    }

    // x: [..., suffix...], bias shape must equal the trailing dims of x.
    VarId add_bias(VarId x, VarId bias) {
        const Tensor& vx = value(x);
        const Tensor& vb = value(bias);
        if (vb.rank() >= vx.rank())
            throw DimensionError("add_bias: bias rank must be below operand rank");
        for (std::size_t i = 0; i < vb.rank(); ++i)
            if (vx.dim(vx.rank() - vb.rank() + i) != vb.dim(i))
                throw DimensionError("add_bias: bias shape must match trailing dims");
        const std::size_t width = vb.numel();
        const std::size_t rows = vx.numel() / width;
        Tensor out = vx;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t d = 0; d < width; ++d) out[r * width + d] += vb[d];
        return unary_or_binary(std::move(out), x, bias,
                               [x, bias, rows, width](Tape& t, VarId o) {
                                   const Tensor& g = t.grad(o);
                                   if (t.requires_grad(x)) accumulate(t.grad(x), g);
                                   if (t.requires_grad(bias)) {
                                       Tensor& gb = t.grad(bias);
                                       for (std::size_t r = 0; r < rows; ++r)
                                           for (std::size_t d = 0; d < width; ++d)
                                               gb[d] += g[r * width + d];
                                   }
                               });
    }

    VarId relu(VarId a) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i)
            if (out[i] < 0.0) out[i] = 0.0;
        return unary_or_binary(std::move(out), a, a, [a](Tape& t, VarId o) {
            const Tensor& g = t.grad(o);
            const Tensor& vx = t.value(a);
            Tensor& ga = t.grad(a);
            const double s = t.relu_adjoint_scale_;
            for (std::size_t i = 0; i < g.numel(); ++i)
                if (vx[i] > 0.0) ga[i] += s * g[i];
        });
    }

    VarId matmul(VarId a, VarId b) {
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0))
            throw DimensionError("matmul: expected (m,k)x(k,n), got " + va.shape_str() + " x " +
                                 vb.shape_str());
        const std::size_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
        Tensor out({m, n});
        mat_view(out, m, n).noalias() = mat_view(va, m, k) * mat_view(vb, k, n);
        return unary_or_binary(std::move(out), a, b, [a, b, m, k, n](Tape& t, VarId o) {
            MapRM g = mat_view(t.grad(o), m, n);
            if (t.requires_grad(a))
                mat_view(t.grad(a), m, k).noalias() += g * mat_view(t.value(b), k, n).transpose();
            if (t.requires_grad(b))
                mat_view(t.grad(b), k, n).noalias() += mat_view(t.value(a), m, k).transpose() * g;
        });
    }

    // Normalize each trailing-dim vector to unit length. Vectors with norm at
    // or below kNormEps are scaled by 1/kNormEps instead (so zero stays zero),
    // and that linear branch is what the adjoint follows there.
    VarId l2_normalize_rows(VarId a) {
        const Tensor& va = value(a);
        const auto [rows, width] = rows_width(va, "l2_normalize_rows");
        Tensor out = va;
        for (std::size_t r = 0; r < rows; ++r) {
            double* v = out.data() + r * width;
            const double nrm = row_norm(v, width);
            const double inv = 1.0 / std::max(nrm, kNormEps);
            for (std::size_t d = 0; d < width; ++d) v[d] *= inv;
        }
        return unary_or_binary(std::move(out), a, a, [a, rows, width](Tape& t, VarId o) {
            const Tensor& g = t.grad(o);
            const Tensor& y = t.value(o);
            const Tensor& x = t.value(a);
            Tensor& ga = t.grad(a);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gr = g.data() + r * width;
                const double* yr = y.data() + r * width;
                const double* xr = x.data() + r * width;
                double* gar = ga.data() + r * width;
                const double nrm = row_norm(xr, width);
                if (nrm <= kNormEps) {
                    for (std::size_t d = 0; d < width; ++d) gar[d] += gr[d] / kNormEps;
                    continue;
                }
                double dot = 0.0;
                for (std::size_t d = 0; d < width; ++d) dot += gr[d] * yr[d];
                for (std::size_t d = 0; d < width; ++d)
                    gar[d] += (gr[d] - dot * yr[d]) / nrm;
            }
        });
    }

    VarId softmax_rows(VarId a) {
        const Tensor& va = value(a);
        const auto [rows, width] = rows_width(va, "softmax_rows");
        Tensor out = va;
        for (std::size_t r = 0; r < rows; ++r) {
            double* v = out.data() + r * width;
            double m = v[0];
            for (std::size_t d = 1; d < width; ++d) m = std::max(m, v[d]);
            double sum = 0.0;
            for (std::size_t d = 0; d < width; ++d) {
                v[d] = std::exp(v[d] - m);
                sum += v[d];
            }
            for (std::size_t d = 0; d < width; ++d) v[d] /= sum;
        }
        return unary_or_binary(std::move(out), a, a, [a, rows, width](Tape& t, VarId o) {
            const Tensor& g = t.grad(o);
            const Tensor& y = t.value(o);
            Tensor& ga = t.grad(a);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gr = g.data() + r * width;
                const double* yr = y.data() + r * width;
                double* gar = ga.data() + r * width;
                double dot = 0.0;
                for (std::size_t d = 0; d < width; ++d) dot += gr[d] * yr[d];
                for (std::size_t d = 0; d < width; ++d) gar[d] += yr[d] * (gr[d] - dot);
            }
        });
    }

    // Length-compressing nonlinearity along the trailing dim:
    //   v = (|u|^2 / (1 + |u|^2)) * u / max(|u|, eps)
    // so |v| = |u|^2/(1+|u|^2) in [0, 1) and v stays parallel to u.
    VarId squash_rows(VarId a) {
        const Tensor& va = value(a);
        const auto [rows, width] = rows_width(va, "squash_rows");
        Tensor out = va;
        for (std::size_t r = 0; r < rows; ++r) {
            double* v = out.data() + r * width;
            const double nrm = row_norm(v, width);
            const double s = nrm * nrm / (1.0 + nrm * nrm) / std::max(nrm, kNormEps);
            for (std::size_t d = 0; d < width; ++d) v[d] *= s;
        }
        return unary_or_binary(std::move(out), a, a, [a, rows, width](Tape& t, VarId o) {
            const Tensor& g = t.grad(o);
            const Tensor& x = t.value(a);
            Tensor& ga = t.grad(a);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gr = g.data() + r * width;
                const double* xr = x.data() + r * width;
                double* gar = ga.data() + r * width;
                const double nrm = row_norm(xr, width);
                if (nrm <= kNormEps) continue;  // derivative vanishes at the origin
                const double denom = 1.0 + nrm * nrm;
                const double phi = nrm / denom;
                const double dphi = (1.0 - nrm * nrm) / (denom * denom);
                double dot = 0.0;
                for (std::size_t d = 0; d < width; ++d) dot += gr[d] * xr[d];
                const double c = dphi / nrm * dot;
                for (std::size_t d = 0; d < width; ++d) gar[d] += phi * gr[d] + c * xr[d];
            }
        });
    }

    // Euclidean norm of each trailing-dim vector.
    VarId lengths_rows(VarId a) {
        const Tensor& va = value(a);
        const auto [rows, width] = rows_width(va, "lengths_rows");
        std::vector<std::size_t> shape(va.shape().begin(), va.shape().end() - 1);
        if (shape.empty()) shape.push_back(1);
        Tensor out(shape);
        for (std::size_t r = 0; r < rows; ++r)
            out[r] = row_norm(va.data() + r * width, width);
        return unary_or_binary(std::move(out), a, a, [a, rows, width](Tape& t, VarId o) {
            const Tensor& g = t.grad(o);
            const Tensor& n = t.value(o);
            const Tensor& x = t.value(a);
            Tensor& ga = t.grad(a);
            for (std::size_t r = 0; r < rows; ++r) {
                const double inv = g[r] / std::max(n[r], kNormEps);
                const double* xr = x.data() + r * width;
                double* gar = ga.data() + r * width;
                for (std::size_t d = 0; d < width; ++d) gar[d] += inv * xr[d];
            }
        });
    }

    VarId reduce_sum(VarId a) {
        const Tensor& va = value(a);
        double s = 0.0;
        for (std::size_t i = 0; i < va.numel(); ++i) s += va[i];
        return unary_or_binary(Tensor::scalar(s), a, a, [a](Tape& t, VarId o) {
            const double g = t.grad(o)[0];
            Tensor& ga = t.grad(a);
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
        });
    }

    // Sparse x dense against a fixed matrix. `bwd` must be the transpose of
    // `fwd` (pass the same pointer for symmetric matrices).
    VarId spmm(std::shared_ptr<const SparseMatrix> fwd, std::shared_ptr<const SparseMatrix> bwd,
               VarId x) {
        Tensor out = ncgnn::spmm(*fwd, value(x));
        return unary_or_binary(std::move(out), x, x, [x, bwd](Tape& t, VarId o) {
            accumulate(t.grad(x), ncgnn::spmm(*bwd, t.grad(o)));
        });
    }

    // Blended propagation sum_m w[m] * (A_m x) with differentiable blend
    // weights. Matrices must be symmetric (their own transposes). Per-hop
    // products are cached for the weight adjoint.
    VarId hop_blend(std::vector<std::shared_ptr<const SparseMatrix>> mats, VarId w, VarId x) {
        const Tensor& vw = value(w);
        const Tensor& vx = value(x);
        if (vw.numel() != mats.size())
            throw DimensionError("hop_blend: weight count must match matrix count");
        if (mats.empty()) throw DimensionError("hop_blend: empty matrix set");
        auto cache = std::make_shared<std::vector<Tensor>>();
        cache->reserve(mats.size());
        std::vector<std::size_t> shape = vx.shape();
        shape[0] = mats[0]->n_rows;
        Tensor out(shape);
        for (std::size_t m = 0; m < mats.size(); ++m) {
            cache->push_back(ncgnn::spmm(*mats[m], vx));
            const Tensor& p = cache->back();
            const double wm = vw[m];
            for (std::size_t i = 0; i < out.numel(); ++i) out[i] += wm * p[i];
        }
        return unary_or_binary(
            std::move(out), w, x, [w, x, mats = std::move(mats), cache](Tape& t, VarId o) {
                const Tensor& g = t.grad(o);
                if (t.requires_grad(w)) {
                    Tensor& gw = t.grad(w);
                    for (std::size_t m = 0; m < mats.size(); ++m) {
                        const Tensor& p = (*cache)[m];
                        double acc = 0.0;
                        for (std::size_t i = 0; i < g.numel(); ++i) acc += p[i] * g[i];
                        gw[m] += acc;
                    }
                }
                if (t.requires_grad(x)) {
                    const Tensor& vw = t.value(w);
                    Tensor& gx = t.grad(x);
                    for (std::size_t m = 0; m < mats.size(); ++m) {
                        Tensor p = ncgnn::spmm(*mats[m], g);
                        const double wm = vw[m];
                        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += wm * p[i];
                    }
                }
            });
    }

    // Per-subspace affine projection of node features:
    //   W: (K, P, F), b: (K, P), X: (N, F)  ->  (N, K, P)
    VarId subspace_linear(VarId w, VarId b, VarId x) {
        const Tensor& vw = value(w);
        const Tensor& vb = value(b);
        const Tensor& vx = value(x);
        if (vw.rank() != 3 || vb.rank() != 2 || vx.rank() != 2 || vw.dim(2) != vx.dim(1) ||
            vb.dim(0) != vw.dim(0) || vb.dim(1) != vw.dim(1))
            throw DimensionError("subspace_linear: inconsistent shapes " + vw.shape_str() + ", " +
                                 vb.shape_str() + ", " + vx.shape_str());
        const std::size_t K = vw.dim(0), P = vw.dim(1), F = vw.dim(2), N = vx.dim(0);
        Tensor out({N, K, P});
        ConstMapRM xm = mat_view(vx, N, F);
        for (std::size_t k = 0; k < K; ++k) {
            StridedMapRM yk(out.data() + k * P, static_cast<Eigen::Index>(N),
                            static_cast<Eigen::Index>(P),
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(K * P)));
            ConstMapRM wk = mat_view(vw, P, F, k * P * F);
            yk.noalias() = xm * wk.transpose();
            const double* bk = vb.data() + k * P;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t p = 0; p < P; ++p)
                    yk(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p)) += bk[p];
        }
        return ternary(std::move(out), w, b, x, [w, b, x, N, K, P, F](Tape& t, VarId o) {
            const Tensor& g = t.grad(o);
            for (std::size_t k = 0; k < K; ++k) {
                ConstStridedMapRM gk(g.data() + k * P, static_cast<Eigen::Index>(N),
                                     static_cast<Eigen::Index>(P),
                                     Eigen::OuterStride<>(static_cast<Eigen::Index>(K * P)));
                if (t.requires_grad(w)) {
                    MapRM gw = mat_view(t.grad(w), P, F, k * P * F);
                    gw.noalias() += gk.transpose() * mat_view(t.value(x), N, F);
                }
                if (t.requires_grad(b)) {
                    double* gb = t.grad(b).data() + k * P;
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t p = 0; p < P; ++p)
                            gb[p] += gk(static_cast<Eigen::Index>(n),
                                        static_cast<Eigen::Index>(p));
                }
                if (t.requires_grad(x)) {
                    MapRM gx = mat_view(t.grad(x), N, F);
                    gx.noalias() += gk * mat_view(t.value(w), P, F, k * P * F);
                }
            }
        });
    }

    // Pairwise capsule projections:
    //   W: (K, C, Fc, Fp), H: (N, K, Fp)  ->  (N, C, K, Fc)
    // out[n,c,k,:] = W[k,c] * H[n,k,:]
    VarId caps_transform(VarId w, VarId h) {
        const Tensor& vw = value(w);
        const Tensor& vh = value(h);
        if (vw.rank() != 4 || vh.rank() != 3 || vw.dim(0) != vh.dim(1) ||
            vw.dim(3) != vh.dim(2))
            throw DimensionError("caps_transform: inconsistent shapes " + vw.shape_str() +
                                 ", " + vh.shape_str());
        const std::size_t K = vw.dim(0), C = vw.dim(1), Fc = vw.dim(2), Fp = vw.dim(3);
        const std::size_t N = vh.dim(0);
        Tensor out({N, C, K, Fc});
        for (std::size_t k = 0; k < K; ++k) {
            ConstStridedMapRM hk(vh.data() + k * Fp, static_cast<Eigen::Index>(N),
                                 static_cast<Eigen::Index>(Fp),
                                 Eigen::OuterStride<>(static_cast<Eigen::Index>(K * Fp)));
            for (std::size_t c = 0; c < C; ++c) {
                StridedMapRM uk(out.data() + (c * K + k) * Fc, static_cast<Eigen::Index>(N),
                                static_cast<Eigen::Index>(Fc),
                                Eigen::OuterStride<>(static_cast<Eigen::Index>(C * K * Fc)));
                ConstMapRM wkc = mat_view(vw, Fc, Fp, (k * C + c) * Fc * Fp);
                uk.noalias() = hk * wkc.transpose();
            }
        }
        return unary_or_binary(std::move(out), w, h, [w, h, N, K, C, Fc, Fp](Tape& t, VarId o) {
            const Tensor& g = t.grad(o);
            const Tensor& vh = t.value(h);
            const Tensor& vw = t.value(w);
            for (std::size_t k = 0; k < K; ++k) {
                ConstStridedMapRM hk(vh.data() + k * Fp, static_cast<Eigen::Index>(N),
                                     static_cast<Eigen::Index>(Fp),
                                     Eigen::OuterStride<>(static_cast<Eigen::Index>(K * Fp)));
                for (std::size_t c = 0; c < C; ++c) {
                    ConstStridedMapRM gk(g.data() + (c * K + k) * Fc,
                                         static_cast<Eigen::Index>(N),
                                         static_cast<Eigen::Index>(Fc),
                                         Eigen::OuterStride<>(
                                             static_cast<Eigen::Index>(C * K * Fc)));
                    if (t.requires_grad(w)) {
                        MapRM gw = mat_view(t.grad(w), Fc, Fp, (k * C + c) * Fc * Fp);
                        gw.noalias() += gk.transpose() * hk;
                    }
                    if (t.requires_grad(h)) {
                        StridedMapRM gh(t.grad(h).data() + k * Fp, static_cast<Eigen::Index>(N),
                                        static_cast<Eigen::Index>(Fp),
                                        Eigen::OuterStride<>(
                                            static_cast<Eigen::Index>(K * Fp)));
                        gh.noalias() += gk * mat_view(vw, Fc, Fp, (k * C + c) * Fc * Fp);
                    }
                }
            }
        });
    }

    // Weighted reduction over the second-to-last axis of `u`:
    //   w: [..., B], u: [..., B, D]  ->  [..., D]
    VarId weighted_sum_mid(VarId w, VarId u) {
        const Tensor& vw = value(w);
        const Tensor& vu = value(u);
        if (vu.rank() != vw.rank() + 1)
            throw DimensionError("weighted_sum_mid: u must have one more axis than w");
        for (std::size_t i = 0; i < vw.rank(); ++i)
            if (vw.dim(i) != vu.dim(i))
                throw DimensionError("weighted_sum_mid: leading shapes differ");
        const std::size_t B = vw.dim(vw.rank() - 1);
        const std::size_t D = vu.dim(vu.rank() - 1);
        const std::size_t A = vw.numel() / B;
        std::vector<std::size_t> shape(vu.shape().begin(), vu.shape().end() - 2);
        shape.push_back(D);
        Tensor out(shape);
        for (std::size_t a = 0; a < A; ++a) {
            double* orow = out.data() + a * D;
            for (std::size_t bidx = 0; bidx < B; ++bidx) {
                const double wv = vw[a * B + bidx];
                const double* urow = vu.data() + (a * B + bidx) * D;
                for (std::size_t d = 0; d < D; ++d) orow[d] += wv * urow[d];
            }
        }
        return unary_or_binary(std::move(out), w, u, [w, u, A, B, D](Tape& t, VarId o) {
            const Tensor& g = t.grad(o);
            const Tensor& vw = t.value(w);
            const Tensor& vu = t.value(u);
            for (std::size_t a = 0; a < A; ++a) {
                const double* grow = g.data() + a * D;
                for (std::size_t bidx = 0; bidx < B; ++bidx) {
                    const double* urow = vu.data() + (a * B + bidx) * D;
                    if (t.requires_grad(w)) {
                        double acc = 0.0;
                        for (std::size_t d = 0; d < D; ++d) acc += urow[d] * grow[d];
                        t.grad(w)[a * B + bidx] += acc;
                    }
                    if (t.requires_grad(u)) {
                        const double wv = vw[a * B + bidx];
                        double* gurow = t.grad(u).data() + (a * B + bidx) * D;
                        for (std::size_t d = 0; d < D; ++d) gurow[d] += wv * grow[d];
                    }
                }
            }
        });
    }

    // Batched dot products against the trailing axis of `u`:
    //   v: [..., D], u: [..., B, D]  ->  [..., B]
    VarId dot_mid(VarId v, VarId u) {
        const Tensor& vv = value(v);
        const Tensor& vu = value(u);
        if (vu.rank() != vv.rank() + 1)
            throw DimensionError("dot_mid: u must have one more axis than v");
        const std::size_t D = vv.dim(vv.rank() - 1);
        if (vu.dim(vu.rank() - 1) != D)
            throw DimensionError("dot_mid: trailing dims differ");
        for (std::size_t i = 0; i + 1 < vv.rank(); ++i)
            if (vv.dim(i) != vu.dim(i)) throw DimensionError("dot_mid: leading shapes differ");
        const std::size_t B = vu.dim(vu.rank() - 2);
        const std::size_t A = vv.numel() / D;
        std::vector<std::size_t> shape(vu.shape().begin(), vu.shape().end() - 1);
        Tensor out(shape);
        for (std::size_t a = 0; a < A; ++a) {
            const double* vrow = vv.data() + a * D;
            for (std::size_t bidx = 0; bidx < B; ++bidx) {
                const double* urow = vu.data() + (a * B + bidx) * D;
                double acc = 0.0;
                for (std::size_t d = 0; d < D; ++d) acc += vrow[d] * urow[d];
                out[a * B + bidx] = acc;
            }
        }
        return unary_or_binary(std::move(out), v, u, [v, u, A, B, D](Tape& t, VarId o) {
            const Tensor& g = t.grad(o);
            const Tensor& vv = t.value(v);
            const Tensor& vu = t.value(u);
            for (std::size_t a = 0; a < A; ++a) {
                const double* vrow = vv.data() + a * D;
                for (std::size_t bidx = 0; bidx < B; ++bidx) {
                    const double gv = g[a * B + bidx];
                    const double* urow = vu.data() + (a * B + bidx) * D;
                    if (t.requires_grad(v)) {
                        double* gvrow = t.grad(v).data() + a * D;
                        for (std::size_t d = 0; d < D; ++d) gvrow[d] += gv * urow[d];
                    }
                    if (t.requires_grad(u)) {
                        double* gurow = t.grad(u).data() + (a * B + bidx) * D;
                        for (std::size_t d = 0; d < D; ++d) gurow[d] += gv * vrow[d];
                    }
                }
            }
        });
    }

    // Two-sided squared hinge on capsule lengths, averaged over the masked
    // (supervised) nodes and summed over classes:
    //   present class:  max(0, m_plus - len)^2
    //   absent class:   lambda * max(0, len - m_minus)^2
    VarId margin_loss(VarId lengths, std::vector<int> labels, std::vector<std::uint8_t> mask,
                      double m_plus, double m_minus, double lambda) {
        const Tensor& len = value(lengths);
        if (len.rank() != 2) throw DimensionError("margin_loss: lengths must be (N, C)");
        const std::size_t N = len.dim(0), C = len.dim(1);
        if (labels.size() != N || mask.size() != N)
            throw DimensionError("margin_loss: labels/mask length mismatch");
        std::size_t count = 0;
        for (std::uint8_t m : mask) count += m != 0;
        if (count == 0) throw ValidationError("margin_loss: empty supervision mask");
        double total = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            if (!mask[i]) continue;
            for (std::size_t l = 0; l < C; ++l) {
                const double v = len.at(i, l);
                if (static_cast<std::size_t>(labels[i]) == l) {
                    const double h = std::max(0.0, m_plus - v);
                    total += h * h;
                } else {
                    const double h = std::max(0.0, v - m_minus);
                    total += lambda * h * h;
                }
            }
        }
        total /= static_cast<double>(count);
        return unary_or_binary(
            Tensor::scalar(total), lengths, lengths,
            [lengths, labels = std::move(labels), mask = std::move(mask), m_plus, m_minus,
             lambda, N, C, count](Tape& t, VarId o) {
                const double g = t.grad(o)[0] / static_cast<double>(count);
                const Tensor& len = t.value(lengths);
                Tensor& gl = t.grad(lengths);
                for (std::size_t i = 0; i < N; ++i) {
                    if (!mask[i]) continue;
                    for (std::size_t l = 0; l < C; ++l) {
                        const double v = len.at(i, l);
                        if (static_cast<std::size_t>(labels[i]) == l) {
                            const double h = std::max(0.0, m_plus - v);
                            gl.at(i, l) += g * (-2.0 * h);
                        } else {
                            const double h = std::max(0.0, v - m_minus);
                            gl.at(i, l) += g * (2.0 * lambda * h);
                        }
                    }
                }
            });
    }

private:
    struct ParamBinding {
        VarId id;
        Tensor* grad_out;
        const std::uint64_t* version;
        std::uint64_t expected;
    };

    static double row_norm(const double* v, std::size_t width) {
        double s = 0.0;
        for (std::size_t d = 0; d < width; ++d) s += v[d] * v[d];
        return std::sqrt(s);
    }

    static std::pair<std::size_t, std::size_t> rows_width(const Tensor& t, const char* op) {
        if (t.rank() < 1) throw DimensionError(std::string(op) + ": rank must be >= 1");
        const std::size_t width = t.dim(t.rank() - 1);
        if (width == 0) throw DimensionError(std::string(op) + ": empty trailing dim");
        return {t.numel() / width, width};
    }

    static void accumulate(Tensor& dst, const Tensor& src) {
        for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
    }

    static bool any_nonzero(const Tensor& t) {
        for (std::size_t i = 0; i < t.numel(); ++i)
            if (t[i] != 0.0) return true;
        return false;
    }

    VarId push(Tensor value, bool requires_grad, std::function<void(Tape&)> backward) {
        Node node;
        node.requires_grad = requires_grad;
        if (requires_grad) node.grad = Tensor(value.shape());
        node.value = std::move(value);
        node.backward = std::move(backward);
        nodes_.push_back(std::move(node));
        return nodes_.size() - 1;
    }

    // Result node whose adjoint runs only if at least one operand wants one.
    template <typename F>
    VarId unary_or_binary(Tensor out, VarId a, VarId b, F&& f) {
        const bool rg = requires_grad(a) || requires_grad(b);
        const VarId id = push(std::move(out), rg, nullptr);
        if (rg)
            nodes_[id].backward = [id, f = std::forward<F>(f)](Tape& t) { f(t, id); };
        return id;
    }

    template <typename F>
    VarId ternary(Tensor out, VarId a, VarId b, VarId c, F&& f) {
        const bool rg = requires_grad(a) || requires_grad(b) || requires_grad(c);
        const VarId id = push(std::move(out), rg, nullptr);
        if (rg)
            nodes_[id].backward = [id, f = std::forward<F>(f)](Tape& t) { f(t, id); };
        return id;
    }

    std::vector<Node> nodes_;
    std::vector<ParamBinding> bindings_;
    double relu_adjoint_scale_ = 1.0;
};

}  // namespace ncgnn
