#include "catch2/catch_amalgamated.hpp"

#include "ncgnn/autodiff.hpp"
#include "ncgnn/graph.hpp"
#include "ncgnn/optim.hpp"
#include "ncgnn/model.hpp"

#include "oracles.hpp"

#include <functional>
#include <memory>
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

using Builder = std::function<VarId(Tape&, const std::vector<VarId>&)>;

double projected_loss(const std::vector<Tensor>& inputs, const Tensor& projection,
                      const Builder& build, bool differentiable,
                      std::vector<Tensor>* grads = nullptr) {
    Tape tape;
    std::vector<VarId> vars;
    for (const Tensor& t : inputs)
        vars.push_back(differentiable ? tape.input(t) : tape.constant(t));
    const VarId out = build(tape, vars);
    const VarId loss = tape.reduce_sum(tape.mul(out, tape.constant(projection)));
    const double value = tape.value(loss)[0];
    if (grads) {
        tape.backward(loss);
        grads->clear();
        for (VarId v : vars) grads->push_back(tape.grad(v));
    }
    return value;
}

// Central-difference check of every input coordinate against the tape grads.
void check_op(std::vector<Tensor> inputs, const Builder& build, std::uint64_t proj_seed,
              double tol = 2e-5) {
    Tape probe;
    std::vector<VarId> vars;
    for (const Tensor& t : inputs) vars.push_back(probe.constant(t));
    const Tensor out_shape_probe = probe.value(build(probe, vars));
    const Tensor projection = random_tensor(out_shape_probe.shape(), proj_seed);

    std::vector<Tensor> grads;
    projected_loss(inputs, projection, build, true, &grads);

    const double delta = 1e-6;
    for (std::size_t which = 0; which < inputs.size(); ++which) {
        for (std::size_t i = 0; i < inputs[which].numel(); ++i) {
            std::vector<Tensor> plus = inputs;
            std::vector<Tensor> minus = inputs;
            plus[which][i] += delta;
            minus[which][i] -= delta;
            const double numeric = (projected_loss(plus, projection, build, false) -
                                    projected_loss(minus, projection, build, false)) /
                                   (2.0 * delta);
            INFO("input " << which << " coordinate " << i);
            REQUIRE(oracle::rel_err(grads[which][i], numeric) < tol);
        }
    }
}

}  // namespace

TEST_CASE("adjoint: add / scale / mul / add_bias") {
    check_op({random_tensor({3, 4}, 1), random_tensor({3, 4}, 2)},
             [](Tape& t, const std::vector<VarId>& v) { return t.add(v[0], v[1]); }, 101);
    check_op({random_tensor({2, 5}, 3)},
             [](Tape& t, const std::vector<VarId>& v) { return t.scale(v[0], -1.7); }, 102);
    check_op({random_tensor({4, 3}, 4), random_tensor({4, 3}, 5)},
             [](Tape& t, const std::vector<VarId>& v) { return t.mul(v[0], v[1]); }, 103);
    check_op({random_tensor({5, 2, 3}, 6), random_tensor({2, 3}, 7)},
             [](Tape& t, const std::vector<VarId>& v) { return t.add_bias(v[0], v[1]); }, 104);
}

TEST_CASE("adjoint: relu away from the kink") {
    Tensor x = random_tensor({6, 4}, 8);
    for (std::size_t i = 0; i < x.numel(); ++i)
        if (std::abs(x[i]) < 0.05) x[i] = 0.1;  // keep clear of the nondifferentiable point
    check_op({x}, [](Tape& t, const std::vector<VarId>& v) { return t.relu(v[0]); }, 105);
}

TEST_CASE("adjoint: matmul") {
    check_op({random_tensor({3, 4}, 9), random_tensor({4, 2}, 10)},
             [](Tape& t, const std::vector<VarId>& v) { return t.matmul(v[0], v[1]); }, 106);
}

TEST_CASE("adjoint: row-wise normalize / softmax / squash / lengths") {
    check_op({random_tensor({4, 3}, 11, 0.3, 1.5)},
             [](Tape& t, const std::vector<VarId>& v) { return t.l2_normalize_rows(v[0]); },
             107);
    check_op({random_tensor({3, 5}, 12)},
             [](Tape& t, const std::vector<VarId>& v) { return t.softmax_rows(v[0]); }, 108);
    check_op({random_tensor({4, 2, 3}, 13)},
             [](Tape& t, const std::vector<VarId>& v) { return t.squash_rows(v[0]); }, 109);
    check_op({random_tensor({3, 2, 4}, 14, 0.2, 1.0)},
             [](Tape& t, const std::vector<VarId>& v) { return t.lengths_rows(v[0]); }, 110);
}

TEST_CASE("adjoint: spmm and hop_blend") {
    const SparseMatrix a = oracle::random_adjacency(6, 0.4, 15);
    const auto a_tilde = std::make_shared<const SparseMatrix>(normalize_adjacency(a));
    check_op({random_tensor({6, 3}, 16)},
             [&](Tape& t, const std::vector<VarId>& v) { return t.spmm(a_tilde, a_tilde, v[0]); },
             111);

    const auto hop2 = std::make_shared<const SparseMatrix>(
        matrix_power_sparsified(*a_tilde, 2, SparsifyRule::topk(6)));
    std::vector<std::shared_ptr<const SparseMatrix>> mats = {a_tilde, hop2};
    check_op({random_tensor({2}, 17, 0.1, 0.9), random_tensor({6, 4}, 18)},
             [&](Tape& t, const std::vector<VarId>& v) { return t.hop_blend(mats, v[0], v[1]); },
             112);
}

TEST_CASE("adjoint: subspace_linear and caps_transform") {
    check_op({random_tensor({3, 4, 5}, 19), random_tensor({3, 4}, 20),
              random_tensor({6, 5}, 21)},
             [](Tape& t, const std::vector<VarId>& v) {
                 return t.subspace_linear(v[0], v[1], v[2]);
             },
             113);
    check_op({random_tensor({3, 2, 4, 5}, 22), random_tensor({6, 3, 5}, 23)},
             [](Tape& t, const std::vector<VarId>& v) { return t.caps_transform(v[0], v[1]); },
             114);
}

TEST_CASE("adjoint: weighted_sum_mid and dot_mid") {
    check_op({random_tensor({4, 2, 3}, 24), random_tensor({4, 2, 3, 5}, 25)},
             [](Tape& t, const std::vector<VarId>& v) {
                 return t.weighted_sum_mid(v[0], v[1]);
             },
             115);
    check_op({random_tensor({4, 2, 5}, 26), random_tensor({4, 2, 3, 5}, 27)},
             [](Tape& t, const std::vector<VarId>& v) { return t.dot_mid(v[0], v[1]); }, 116);
}

TEST_CASE("adjoint: margin loss") {
    const std::vector<int> labels = {0, 2, 1, 0, 1};
    const std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1};
    const Tensor lengths = random_tensor({5, 3}, 28, 0.05, 0.95);

    Tape tape;
    const VarId len = tape.input(lengths);
    const VarId loss = tape.margin_loss(len, labels, mask, 0.8, 0.2, 0.5);
    tape.backward(loss);
    const Tensor grad = tape.grad(len);

    const double delta = 1e-6;
    for (std::size_t i = 0; i < lengths.numel(); ++i) {
        auto eval = [&](double shift) {
            Tensor t = lengths;
            t[i] += shift;
            Tape fresh;
            return fresh.value(
                fresh.margin_loss(fresh.constant(t), labels, mask, 0.8, 0.2, 0.5))[0];
        };
        const double numeric = (eval(delta) - eval(-delta)) / (2.0 * delta);
        REQUIRE(oracle::rel_err(grad[i], numeric) < 2e-5);
    }
}

TEST_CASE("synthetic tape: gradient of sum of squares is 2 theta") {
    const Tensor theta = random_tensor({7}, 29);
    Tape tape;
    const VarId p = tape.input(theta);
    const VarId loss = tape.reduce_sum(tape.mul(p, p));
    tape.backward(loss);
    for (std::size_t i = 0; i < theta.numel(); ++i)
        REQUIRE(tape.grad(p)[i] == Catch::Approx(2.0 * theta[i]).margin(1e-14));
}

TEST_CASE("parameters untouched by the loss keep zero gradients") {
    Tape tape;
    const VarId used = tape.input(random_tensor({3}, 30));
    const VarId unused = tape.input(random_tensor({4}, 31));
    const VarId loss = tape.reduce_sum(tape.mul(used, used));
    tape.backward(loss);
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(tape.grad(unused)[i] == 0.0);
}

TEST_CASE("backward refuses stale parameter bindings") {
    ModelDims dims;
    dims.n_features = 3;
    dims.f_p = 2;
    dims.f_c = 2;
    dims.K = 2;
    dims.C = 2;
    dims.n_hops = 0;
    Rng rng(4);
    ModelParams params = init_params(dims, rng);
    AdamState adam = AdamState::init(params);

    Tape tape;
    const BoundParams bound = bind_params(tape, params);
    const VarId loss = tape.reduce_sum(tape.mul(bound.primary_bias, bound.primary_bias));

    AdamConfig cfg;
    params.primary_bias_grad.fill(0.5);  // pretend a gradient exists
    adam_step(params, adam, cfg, 1);     // bumps the version
    REQUIRE_THROWS_AS(tape.backward(loss), StaleTapeError);
}

TEST_CASE("a corrupted relu adjoint is caught by the derivative check") {
    const Tensor x = random_tensor({5, 3}, 32, 0.2, 1.0);  // all positive: relu active
    const Tensor projection = random_tensor({5, 3}, 33);

    auto loss_at = [&](const Tensor& input) {
        Tape tape;
        return tape.value(
            tape.reduce_sum(tape.mul(tape.relu(tape.constant(input)),
                                     tape.constant(projection))))[0];
    };

    Tape tape;
    tape.set_relu_adjoint_scale(1.05);
    const VarId in = tape.input(x);
    const VarId loss = tape.reduce_sum(tape.mul(tape.relu(in), tape.constant(projection)));
    tape.backward(loss);

    const double delta = 1e-6;
    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        Tensor plus = x, minus = x;
        plus[i] += delta;
        minus[i] -= delta;
        const double numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * delta);
        worst = std::max(worst, oracle::rel_err(tape.grad(in)[i], numeric));
    }
    REQUIRE(worst > 1e-4);  // the corruption must not slip through
}

TEST_CASE("backward demands a scalar loss") {
    Tape tape;
    const VarId v = tape.input(random_tensor({3}, 34));
    REQUIRE_THROWS_AS(tape.backward(v), DimensionError);
}
