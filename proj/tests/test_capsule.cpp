#include "catch2/catch_amalgamated.hpp"

#include "ncgnn/graph.hpp"
#include "ncgnn/model.hpp"

#include "oracles.hpp"

#include <cmath>
#include <random>

using namespace ncgnn;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double lo = -1.0,
                     double hi = 1.0) {
    std::mt19937_64 eng(seed);
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = lo + (hi - lo) * ((eng() >> 11) * 0x1.0p-53);
    return t;
}

ModelParams random_params(const ModelDims& dims, std::uint64_t seed) {
    Rng rng(seed);
    return init_params(dims, rng);
}

oracle::Caps2 caps_to_nested(const Tensor& t) {
    oracle::Caps2 out(t.dim(0), std::vector<oracle::Vec>(t.dim(1), oracle::Vec(t.dim(2))));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (std::size_t j = 0; j < t.dim(1); ++j)
            for (std::size_t k = 0; k < t.dim(2); ++k) out[i][j][k] = t.at(i, j, k);
    return out;
}

std::vector<oracle::Caps2> routing_weights_to_nested(const Tensor& w) {
    const std::size_t K = w.dim(0), C = w.dim(1), fc = w.dim(2), fp = w.dim(3);
    std::vector<oracle::Caps2> out(
        K, oracle::Caps2(C, std::vector<oracle::Vec>(fc, oracle::Vec(fp))));
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t r = 0; r < fc; ++r)
                for (std::size_t p = 0; p < fp; ++p) out[k][c][r][p] = w.at(k, c, r, p);
    return out;
}

std::vector<oracle::Vec> bias_to_nested(const Tensor& b) {
    std::vector<oracle::Vec> out(b.dim(0), oracle::Vec(b.dim(1)));
    for (std::size_t c = 0; c < b.dim(0); ++c)
        for (std::size_t r = 0; r < b.dim(1); ++r) out[c][r] = b.at(c, r);
    return out;
}

CapsuleTensor random_primaries(std::size_t n, std::size_t K, std::size_t fp,
                               std::uint64_t seed) {
    Tensor raw = random_tensor({n, K, fp}, seed);
    // Unit-normalize, matching what the projection stage produces.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < K; ++k) {
            double s = 0.0;
            for (std::size_t d = 0; d < fp; ++d) s += raw.at(i, k, d) * raw.at(i, k, d);
            const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
            for (std::size_t d = 0; d < fp; ++d) raw.at(i, k, d) *= inv;
        }
    return CapsuleTensor(n, K, fp, std::move(raw));
}

}  // namespace

TEST_CASE("squash fixed points and magnitudes") {
    const std::vector<double> zero = squash({0.0, 0.0, 0.0});
    for (double v : zero) REQUIRE(v == 0.0);

    const std::vector<double> unit = squash({1.0, 0.0});
    REQUIRE(std::hypot(unit[0], unit[1]) == Catch::Approx(0.5).margin(1e-12));

    const std::vector<double> ten = squash({0.0, 10.0});
    REQUIRE(std::hypot(ten[0], ten[1]) == Catch::Approx(100.0 / 101.0).margin(1e-12));
}

TEST_CASE("squash keeps direction and stays below one") {
    std::mt19937_64 eng(77);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t d = 1 + eng() % 6;
        const double scale = std::pow(10.0, ((eng() >> 11) * 0x1.0p-53) * 8.0 - 4.0);
        std::vector<double> u(d);
        double nrm = 0.0;
        for (double& v : u) {
            v = (((eng() >> 11) * 0x1.0p-53) * 2.0 - 1.0) * scale;
            nrm += v * v;
        }
        nrm = std::sqrt(nrm);
        const std::vector<double> v = squash(u);
        double vn = 0.0, dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            vn += v[i] * v[i];
            dot += v[i] * u[i];
        }
        vn = std::sqrt(vn);
        REQUIRE(vn >= 0.0);
        REQUIRE(vn < 1.0);
        if (nrm > 0.0) REQUIRE(std::abs(dot - vn * nrm) <= 1e-10 * std::max(1.0, vn * nrm));
    }
}

TEST_CASE("primary capsules: zero projection hits the epsilon guard, not NaN") {
    ModelDims dims{2, 3, 2, 2, 2, 0};
    ModelParams params = random_params(dims, 1);
    params.primary_weights.fill(0.0);
    params.primary_bias.fill(0.0);
    const CapsuleTensor caps = primary_capsules(random_tensor({4, 2}, 2), params);
    for (std::size_t i = 0; i < caps.data.numel(); ++i) {
        REQUIRE(std::isfinite(caps.data[i]));
        REQUIRE(caps.data[i] == 0.0);
    }
}

TEST_CASE("primary capsules: identity projection normalizes the feature vector") {
    ModelDims dims{2, 2, 2, 1, 2, 0};
    ModelParams params = random_params(dims, 3);
    params.primary_weights.fill(0.0);
    params.primary_weights.at(0, 0, 0) = 1.0;
    params.primary_weights.at(0, 1, 1) = 1.0;
    params.primary_bias.fill(0.0);
    Tensor x({1, 2});
    x.at(0, 0) = 3.0;
    x.at(0, 1) = 4.0;
    const CapsuleTensor caps = primary_capsules(x, params);
    REQUIRE(caps.data.at(0, 0, 0) == Catch::Approx(0.6).margin(1e-12));
    REQUIRE(caps.data.at(0, 0, 1) == Catch::Approx(0.8).margin(1e-12));
}

TEST_CASE("primary capsule norms are zero or one") {
    ModelDims dims{6, 4, 3, 3, 2, 0};
    const ModelParams params = random_params(dims, 4);
    const CapsuleTensor caps = primary_capsules(random_tensor({10, 6}, 5), params);
    for (std::size_t i = 0; i < caps.n_nodes; ++i)
        for (std::size_t k = 0; k < caps.n_caps; ++k) {
            const double n = caps.norm(i, k);
            const bool zero = n == 0.0;
            const bool unit = n > 1.0 - 1e-9 && n < 1.0 + 1e-9;
            REQUIRE((zero || unit));
        }
}

TEST_CASE("primary capsules validate their inputs") {
    ModelDims dims{3, 2, 2, 2, 2, 0};
    const ModelParams params = random_params(dims, 6);
    REQUIRE_THROWS_AS(primary_capsules(random_tensor({4, 5}, 7), params), DimensionError);
    Tensor bad = random_tensor({4, 3}, 8);
    bad[2] = std::nan("");
    REQUIRE_THROWS_AS(primary_capsules(bad, params), ValidationError);
}

TEST_CASE("dropout masks are drawn independently per subspace") {
    Rng rng(9);
    const Tensor mask = make_dropout_mask(8, 3, 4, 0.5, rng);
    bool differs = false;
    for (std::size_t i = 0; i < 8 && !differs; ++i)
        for (std::size_t d = 0; d < 4 && !differs; ++d)
            if (mask.at(i, 0, d) != mask.at(i, 1, d)) differs = true;
    REQUIRE(differs);
    for (std::size_t i = 0; i < mask.numel(); ++i)
        REQUIRE((mask[i] == 0.0 || mask[i] == Catch::Approx(2.0).margin(1e-12)));
}

TEST_CASE("routing with a single source capsule fixes couplings at one") {
    const std::size_t N = 5;
    ModelDims dims{0, 3, 4, 1, 2, 0};
    dims.n_features = 3;
    const ModelParams params = random_params(dims, 10);
    const CapsuleTensor primaries = random_primaries(N, 1, 3, 11);
    const SparseMatrix filter = normalize_adjacency(oracle::random_adjacency(N, 0.5, 12));

    const auto [caps, state] = routing_forward(primaries, filter, params, 2);
    for (std::size_t i = 0; i < state.couplings.numel(); ++i)
        REQUIRE(state.couplings[i] == 1.0);

    // Closed form: squash of the aggregated single-subspace projections.
    const oracle::Dense abar = oracle::to_dense(filter);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t l = 0; l < 2; ++l) {
            oracle::Vec u(4, 0.0);
            for (std::size_t j = 0; j < N; ++j) {
                if (abar[i][j] == 0.0) continue;
                for (std::size_t r = 0; r < 4; ++r) {
                    double proj = 0.0;
                    for (std::size_t p = 0; p < 3; ++p)
                        proj += params.routing_weights.at(0, l, r, p) * primaries.data.at(j, 0, p);
                    u[r] += abar[i][j] * proj;
                }
            }
            for (std::size_t r = 0; r < 4; ++r) u[r] += params.class_bias.at(l, r);
            const oracle::Vec v = squash(u);
            for (std::size_t r = 0; r < 4; ++r)
                REQUIRE(caps.data.at(i, l, r) == Catch::Approx(v[r]).margin(1e-12));
        }
}

TEST_CASE("coupling coefficients stay on the simplex after every pass") {
    const std::size_t N = 7, K = 3, C = 2, fp = 4;
    ModelDims dims{fp, fp, 3, K, C, 0};
    ModelParams params = random_params(dims, 13);
    const CapsuleTensor primaries = random_primaries(N, K, fp, 14);
    PreparedFilter prepared;
    prepared.mode = FilterMode::Diffusion;
    prepared.diffusion = std::make_shared<const SparseMatrix>(
        normalize_adjacency(oracle::random_adjacency(N, 0.4, 15)));

    Tape tape;
    BoundParams bound = bind_params_const(tape, params);
    const ForwardHandles handles =
        build_routing(tape, tape.constant(primaries.data), prepared, bound, 4);
    REQUIRE(handles.couplings.size() == 4);
    for (VarId cv : handles.couplings) {
        const Tensor& c = tape.value(cv);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t l = 0; l < C; ++l) {
                double sum = 0.0;
                for (std::size_t k = 0; k < K; ++k) {
                    REQUIRE(c.at(n, l, k) > 0.0);
                    sum += c.at(n, l, k);
                }
                REQUIRE(std::abs(sum - 1.0) < 1e-12);
            }
    }
}

TEST_CASE("routing matches the straight-line reference on random instances") {
    std::mt19937_64 eng(99);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t N = 4 + eng() % 5;
        const std::size_t K = 1 + eng() % 3;
        const std::size_t C = 2 + eng() % 2;
        const std::size_t fp = 2 + eng() % 3;
        const std::size_t fc = 2 + eng() % 3;
        const std::size_t T = 1 + eng() % 3;

        ModelDims dims{fp, fp, fc, K, C, 0};
        const ModelParams params = random_params(dims, 1000 + eng() % 1000);
        const CapsuleTensor primaries = random_primaries(N, K, fp, 2000 + eng() % 1000);
        const SparseMatrix filter =
            normalize_adjacency(oracle::random_adjacency(N, 0.5, 3000 + eng() % 1000));

        const auto [caps, state] = routing_forward(primaries, filter, params, T);
        const oracle::RoutingRef ref = oracle::routing_reference(
            caps_to_nested(primaries.data), routing_weights_to_nested(params.routing_weights),
            bias_to_nested(params.class_bias), oracle::to_dense(filter), T);

        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t l = 0; l < C; ++l)
                for (std::size_t r = 0; r < fc; ++r)
                    REQUIRE(std::abs(caps.data.at(i, l, r) - ref.caps[i][l][r]) < 1e-12);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t l = 0; l < C; ++l) {
                    REQUIRE(std::abs(state.couplings.at(i, k, l) - ref.couplings[i][k][l]) <
                            1e-12);
                    REQUIRE(std::abs(state.logits.at(i, k, l) - ref.logits[i][k][l]) < 1e-12);
                }
    }
}

TEST_CASE("routing validates its arguments") {
    ModelDims dims{3, 3, 2, 2, 2, 0};
    const ModelParams params = random_params(dims, 16);
    const CapsuleTensor primaries = random_primaries(4, 2, 3, 17);
    const SparseMatrix filter = sparse_identity(4);
    REQUIRE_THROWS_AS(routing_forward(primaries, filter, params, 0), ValidationError);
    REQUIRE_THROWS_AS(routing_forward(primaries, sparse_identity(5), params, 1),
                      DimensionError);
}

TEST_CASE("one uniform pass equals plain weighted-mean capsule aggregation") {
    const std::size_t N = 6, K = 3, C = 2, fp = 3, fc = 4;
    ModelDims dims{fp, fp, fc, K, C, 0};
    const ModelParams params = random_params(dims, 18);
    const CapsuleTensor primaries = random_primaries(N, K, fp, 19);
    const SparseMatrix filter = normalize_adjacency(oracle::random_adjacency(N, 0.5, 20));

    PreparedFilter prepared;
    prepared.mode = FilterMode::Diffusion;
    prepared.diffusion = std::make_shared<const SparseMatrix>(filter);
    Tape tape;
    BoundParams bound = bind_params_const(tape, params);
    const ForwardHandles handles =
        build_routing(tape, tape.constant(primaries.data), prepared, bound, 1);
    const Tensor& caps = tape.value(handles.class_caps);

    const oracle::Dense abar = oracle::to_dense(filter);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t l = 0; l < C; ++l) {
            oracle::Vec u(fc, 0.0);
            for (std::size_t j = 0; j < N; ++j) {
                if (abar[i][j] == 0.0) continue;
                for (std::size_t r = 0; r < fc; ++r) {
                    double mean = 0.0;
                    for (std::size_t k = 0; k < K; ++k) {
                        double proj = 0.0;
                        for (std::size_t p = 0; p < fp; ++p)
                            proj += params.routing_weights.at(k, l, r, p) *
                                    primaries.data.at(j, k, p);
                        mean += proj / static_cast<double>(K);
                    }
                    u[r] += abar[i][j] * mean;
                }
            }
            for (std::size_t r = 0; r < fc; ++r) u[r] += params.class_bias.at(l, r);
            const oracle::Vec v = squash(u);
            for (std::size_t r = 0; r < fc; ++r)
                REQUIRE(caps.at(i, l, r) == Catch::Approx(v[r]).margin(1e-12));
        }
}

TEST_CASE("permuting nodes permutes the outputs") {
    const std::size_t N = 8, K = 2, C = 2, fp = 3;
    ModelDims dims{5, fp, 3, K, C, 0};
    const ModelParams params = random_params(dims, 21);
    const Tensor features = random_tensor({N, 5}, 22);
    const SparseMatrix adjacency = oracle::random_adjacency(N, 0.4, 23);
    const SparseMatrix filter = normalize_adjacency(adjacency);

    // Reversal permutation.
    std::vector<std::size_t> perm(N);
    for (std::size_t i = 0; i < N; ++i) perm[i] = N - 1 - i;

    Tensor perm_features({N, 5});
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < 5; ++j) perm_features.at(perm[i], j) = features.at(i, j);
    std::vector<Triplet> perm_triplets;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t p = adjacency.row_offsets[i]; p < adjacency.row_offsets[i + 1]; ++p)
            perm_triplets.push_back({perm[i], perm[adjacency.col_indices[p]], 1.0});
    const SparseMatrix perm_filter =
        normalize_adjacency(from_triplets(N, N, std::move(perm_triplets)));

    const CapsuleTensor caps_a = primary_capsules(features, params);
    const CapsuleTensor caps_b = primary_capsules(perm_features, params);
    // Node-local stage: permutation covariance is exact.
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t d = 0; d < fp; ++d)
                REQUIRE(caps_b.data.at(perm[i], k, d) == caps_a.data.at(i, k, d));

    const auto [out_a, state_a] = routing_forward(caps_a, filter, params, 2);
    const auto [out_b, state_b] = routing_forward(caps_b, perm_filter, params, 2);
    // Aggregation reorders floating-point sums, so equality holds to roundoff.
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t l = 0; l < C; ++l)
            for (std::size_t r = 0; r < 3; ++r)
                REQUIRE(std::abs(out_b.data.at(perm[i], l, r) - out_a.data.at(i, l, r)) <
                        1e-12);
}

TEST_CASE("single-pass outputs depend only on the filter row") {
    const std::size_t N = 7, K = 2, fp = 3;
    ModelDims dims{4, fp, 3, K, 2, 0};
    const ModelParams params = random_params(dims, 24);
    const Tensor features = random_tensor({N, 4}, 25);
    const SparseMatrix filter = normalize_adjacency(oracle::random_adjacency(N, 0.3, 26));

    // Pick a target and a node outside its row.
    std::size_t target = 0, outsider = N;
    for (std::size_t i = 0; i < N && outsider == N; ++i)
        for (std::size_t m = 0; m < N; ++m)
            if (!filter.has_entry(i, m)) {
                target = i;
                outsider = m;
                break;
            }
    REQUIRE(outsider < N);

    PreparedFilter prepared;
    prepared.mode = FilterMode::Diffusion;
    prepared.diffusion = std::make_shared<const SparseMatrix>(filter);

    auto single_pass = [&](const Tensor& x) {
        Tape tape;
        BoundParams bound = bind_params_const(tape, params);
        ForwardOptions opts;
        opts.routing_passes = 1;
        return tape.value(build_forward(tape, x, prepared, bound, opts).class_caps);
    };
    const Tensor base = single_pass(features);
    Tensor zeroed = features;
    for (std::size_t j = 0; j < 4; ++j) zeroed.at(outsider, j) = 0.0;
    const Tensor after = single_pass(zeroed);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t r = 0; r < 3; ++r)
            REQUIRE(after.at(target, l, r) == base.at(target, l, r));
}

TEST_CASE("information never crosses connected components") {
    // Two disjoint triangles; every power of the filter is block diagonal.
    std::vector<Triplet> t;
    auto edge = [&t](std::size_t a, std::size_t b) {
        t.push_back({a, b, 1.0});
        t.push_back({b, a, 1.0});
    };
    edge(0, 1);
    edge(1, 2);
    edge(0, 2);
    edge(3, 4);
    edge(4, 5);
    edge(3, 5);
    const SparseMatrix filter = normalize_adjacency(from_triplets(6, 6, std::move(t)));

    ModelDims dims{4, 3, 3, 2, 2, 0};
    const ModelParams params = random_params(dims, 27);
    const Tensor features = random_tensor({6, 4}, 28);

    const CapsuleTensor caps_a = primary_capsules(features, params);
    Tensor zeroed = features;
    for (std::size_t j = 0; j < 4; ++j) zeroed.at(5, j) = 0.0;  // other component
    const CapsuleTensor caps_b = primary_capsules(zeroed, params);

    const auto [out_a, sa] = routing_forward(caps_a, filter, params, 3);
    const auto [out_b, sb] = routing_forward(caps_b, filter, params, 3);
    for (std::size_t i = 0; i < 3; ++i)  // first component, bit for bit
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t r = 0; r < 3; ++r)
                REQUIRE(out_a.data.at(i, l, r) == out_b.data.at(i, l, r));
}

TEST_CASE("class capsule norms stay inside [0, 1)") {
    ModelDims dims{5, 4, 4, 3, 3, 0};
    const ModelParams params = random_params(dims, 29);
    const CapsuleTensor primaries = random_primaries(9, 3, 4, 30);
    const SparseMatrix filter = normalize_adjacency(oracle::random_adjacency(9, 0.4, 31));
    const auto [caps, state] = routing_forward(primaries, filter, params, 3);
    for (std::size_t i = 0; i < caps.n_nodes; ++i)
        for (std::size_t l = 0; l < caps.n_caps; ++l) {
            const double n = caps.norm(i, l);
            REQUIRE(n >= 0.0);
            REQUIRE(n < 1.0);
        }
}

TEST_CASE("predict takes the longest capsule, lowest id on ties") {
    CapsuleTensor caps(1, 3, 1);
    caps.data.at(0, 0, 0) = 0.9;
    caps.data.at(0, 1, 0) = 0.1;
    caps.data.at(0, 2, 0) = 0.3;
    REQUIRE(predict(caps) == std::vector<int>{0});

    CapsuleTensor ties(1, 3, 1);
    ties.data.at(0, 0, 0) = 0.4;
    ties.data.at(0, 1, 0) = 0.4;
    ties.data.at(0, 2, 0) = 0.4;
    REQUIRE(predict(ties) == std::vector<int>{0});

    CapsuleTensor batch(20, 4, 3);
    std::mt19937_64 eng(32);
    for (std::size_t i = 0; i < batch.data.numel(); ++i)
        batch.data[i] = (eng() >> 11) * 0x1.0p-53 - 0.5;
    const std::vector<int> got = predict(batch);
    for (std::size_t i = 0; i < 20; ++i) {
        int best = 0;
        double best_len = -1.0;
        for (std::size_t l = 0; l < 4; ++l) {
            const double len = batch.norm(i, l);
            if (len > best_len) {
                best_len = len;
                best = static_cast<int>(l);
            }
        }
        REQUIRE(got[i] == best);
    }
}

TEST_CASE("baseline aggregation: identity stack is a relu") {
    Tensor x = random_tensor({5, 3}, 33);
    Tensor eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    const Tensor out = baseline_mean_aggregate(x, sparse_identity(5), {eye});
    for (std::size_t i = 0; i < x.numel(); ++i) REQUIRE(out[i] == std::max(0.0, x[i]));
}

TEST_CASE("baseline aggregation mixes rows toward each other") {
    const SparseMatrix filter =
        normalize_adjacency(from_triplets(2, 2, {{0, 1, 1.0}, {1, 0, 1.0}}));
    const Tensor x = random_tensor({2, 4}, 34, 0.0, 1.0);
    double prev = 1e300;
    for (std::size_t layers = 1; layers <= 4; ++layers) {
        const Tensor h = baseline_mean_aggregate(x, filter, layers, 35);
        REQUIRE(h.dim(0) == 2);
        REQUIRE(h.dim(1) == 4);
        double diff = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
            const double d = h.at(0, j) - h.at(1, j);
            diff += d * d;
        }
        diff = std::sqrt(diff);
        REQUIRE(diff <= prev + 1e-12);
        prev = diff;
    }
}
