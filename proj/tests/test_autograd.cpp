#include <functional>

#include "doctest.h"
#include "fastgc/autograd.hpp"
#include "support.hpp"

using namespace fastgc;
using namespace testsupport;

namespace {

using Builder = std::function<NodeId(Tape&, NodeId)>;

double eval_scalar(const Tensor& x, const Builder& build) {
    Tape tape;
    NodeId p = tape.param(x);
    NodeId out = build(tape, p);
    return tape.value(out)[0];
}

Tensor ad_grad(const Tensor& x, const Builder& build) {
    Tape tape;
    NodeId p = tape.param(x);
    NodeId out = build(tape, p);
    return backward(tape, out).at(p);
}

Tensor fd_grad_op(const Tensor& x, const Builder& build, double h = 1e-6) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        std::vector<double> up(x.vec()), down(x.vec());
        up[i] += h;
        down[i] -= h;
        g[i] = (eval_scalar(Tensor(x.shape(), up), build) -
                eval_scalar(Tensor(x.shape(), down), build)) /
               (2 * h);
    }
    return Tensor(x.shape(), std::move(g));
}

// VJP vs central differences with a random upstream weighting.
void check_op(const Tensor& x, const std::function<NodeId(Tape&, NodeId)>& op, std::uint64_t seed,
              double tol = 1e-6) {
    std::mt19937_64 rng(seed);
    Builder build = [&, w = Tensor()](Tape& tape, NodeId p) mutable -> NodeId {
        NodeId out = op(tape, p);
        const std::size_t n = tape.value(out).size();
        if (w.empty()) w = rand_tensor({n}, rng);
        return tape.weighted_sum(tape.reshape(out, {n}), w);
    };
    Tensor ad = ad_grad(x, build);
    Tensor fd = fd_grad_op(x, build);
    CHECK(max_rel_err(ad, fd, 1e-4) < tol);
}

}  // namespace

TEST_CASE("backward of sum(W x) returns the input as gradient") {
    Tape tape;
    NodeId w = tape.param(Tensor({1, 2}, {5.0, -2.0}));
    NodeId x = tape.input(Tensor({2, 1}, {3.0, 4.0}));
    NodeId loss = tape.sum_all(tape.matmul(w, x));
    GradMap g = backward(tape, loss);
    CHECK(g.at(w).vec() == std::vector<double>{3.0, 4.0});
}

TEST_CASE("constant loss yields zero gradients for every parameter") {
    Tape tape;
    NodeId w = tape.param(Tensor({3, 3}, std::vector<double>(9, 1.0)));
    NodeId c = tape.input(Tensor::scalar(7.0));
    NodeId loss = tape.sum_all(c);
    GradMap g = backward(tape, loss);
    CHECK(g.contains(w));
    CHECK(sq_norm_all(g.at(w)) == 0.0);
}

TEST_CASE("non-scalar loss is rejected") {
    Tape tape;
    NodeId x = tape.param(Tensor({2, 2}));
    CHECK_THROWS_AS(backward(tape, x), ContractError);
}

TEST_CASE("retain rejects unknown node ids") {
    Tape tape;
    tape.param(Tensor({2}));
    CHECK_THROWS_AS(tape.retain(NodeId{42}), ContractError);
}

TEST_CASE("two-layer MLP gradients match finite differences") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 3; ++trial) {
        FamilyCase fc = make_linear_case(rng);
        Tape tape;
        NodeId logits = fc.model.forward(tape, fc.batch.features, false);
        NodeId losses = fc.model.per_example_losses(tape, logits, fc.batch.targets);
        GradMap g = backward(tape, tape.sum_all(losses));
        auto nodes = fc.model.param_nodes();
        auto params = fc.model.parameters();
        for (std::size_t p = 0; p < params.size(); ++p) {
            Tensor fd = fd_grad(fc.model, params[p], fc.batch);
            CHECK(max_rel_err(g.at(nodes[p]), fd, 1e-4) < 1e-4);
        }
    }
}

TEST_CASE("every differentiable op passes a finite-difference VJP check") {
    std::mt19937_64 rng(12);

    check_op(rand_tensor({3, 4}, rng), [](Tape& t, NodeId p) { return t.tanh(p); }, 100);
    check_op(rand_tensor({3, 4}, rng), [](Tape& t, NodeId p) { return t.sigmoid(p); }, 101);
    check_op(rand_tensor({3, 4}, rng), [](Tape& t, NodeId p) { return t.relu(p); }, 102);
    // keep log inputs clear of zero
    {
        Tensor pos = rand_tensor({3, 4}, rng);
        std::vector<double> buf(pos.vec());
        for (double& v : buf) v = 1.5 + std::abs(v);
        check_op(Tensor({3, 4}, buf), [](Tape& t, NodeId p) { return t.log(p); }, 103);
    }
    check_op(rand_tensor({3, 5}, rng), [](Tape& t, NodeId p) { return t.softmax_rows(p); }, 104);
    check_op(rand_tensor({2, 3, 4}, rng), [](Tape& t, NodeId p) { return t.softmax_rows(p); },
             105);
    check_op(rand_tensor({4, 3}, rng), [](Tape& t, NodeId p) { return t.scalar_mul(p, -2.5); },
             106);
    check_op(rand_tensor({2, 6}, rng), [](Tape& t, NodeId p) { return t.sum_all(p); }, 107);
    check_op(rand_tensor({2, 6}, rng), [](Tape& t, NodeId p) { return t.mean_all(p); }, 108);
    check_op(rand_tensor({2, 3, 4}, rng), [](Tape& t, NodeId p) { return t.mean_dim1(p); }, 109);
    check_op(rand_tensor({2, 3, 4}, rng), [](Tape& t, NodeId p) { return t.transpose_last2(p); },
             110);
    check_op(rand_tensor({4, 5}, rng), [](Tape& t, NodeId p) { return t.transpose2d(p); }, 111);
    check_op(rand_tensor({2, 3, 2, 4}, rng), [](Tape& t, NodeId p) { return t.transpose12(p); },
             112);
    check_op(rand_tensor({3, 8}, rng), [](Tape& t, NodeId p) { return t.reshape(p, {4, 6}); },
             113);
    check_op(rand_tensor({4, 6}, rng),
             [](Tape& t, NodeId p) { return t.slice_cols(p, 1, 3); }, 114);
    check_op(rand_tensor({3, 4, 5}, rng), [](Tape& t, NodeId p) { return t.slice_dim1(p, 2); },
             115);
    check_op(rand_tensor({7}, rng), [](Tape& t, NodeId p) { return t.index_scalar(p, 3); }, 116);
    check_op(rand_tensor({3, 5}, rng),
             [](Tape& t, NodeId p) { return t.pick_rows(p, {4, 0, 2}); }, 117);

    // binary ops: differentiate one side, hold the other as input
    std::mt19937_64 c(13);
    {
        Tensor other = rand_tensor({3, 4}, c);
        check_op(rand_tensor({3, 4}, c),
                 [other](Tape& t, NodeId p) { return t.add(p, t.input(other)); }, 118);
        check_op(rand_tensor({3, 4}, c),
                 [other](Tape& t, NodeId p) { return t.add(t.input(other), p); }, 119);
        check_op(rand_tensor({3, 4}, c),
                 [other](Tape& t, NodeId p) { return t.mul(p, t.input(other)); }, 120);
    }
    {
        Tensor bias = rand_tensor({4}, c);
        check_op(rand_tensor({3, 4}, c),
                 [bias](Tape& t, NodeId p) { return t.add_rowwise(p, t.input(bias)); }, 121);
        check_op(bias,
                 [x = rand_tensor({3, 4}, c)](Tape& t, NodeId p) {
                     return t.add_rowwise(t.input(x), p);
                 },
                 122);
        check_op(rand_tensor({3, 4}, c),
                 [bias](Tape& t, NodeId p) { return t.mul_rowwise(p, t.input(bias)); }, 123);
        check_op(bias,
                 [x = rand_tensor({3, 4}, c)](Tape& t, NodeId p) {
                     return t.mul_rowwise(t.input(x), p);
                 },
                 124);
    }
    {
        Tensor chan = rand_tensor({3}, c);
        check_op(rand_tensor({2, 3, 4}, c),
                 [chan](Tape& t, NodeId p) { return t.add_channel_bias(p, t.input(chan)); }, 125);
        check_op(chan,
                 [x = rand_tensor({2, 3, 4}, c)](Tape& t, NodeId p) {
                     return t.add_channel_bias(t.input(x), p);
                 },
                 126);
    }
    {
        Tensor b = rand_tensor({4, 5}, c);
        check_op(rand_tensor({3, 4}, c),
                 [b](Tape& t, NodeId p) { return t.matmul(p, t.input(b)); }, 127);
        check_op(b, [a = rand_tensor({3, 4}, c)](Tape& t, NodeId p) {
            return t.matmul(t.input(a), p);
        }, 128);
    }
    {
        Tensor b = rand_tensor({2, 4, 3}, c);
        check_op(rand_tensor({2, 3, 4}, c),
                 [b](Tape& t, NodeId p) { return t.bmm(p, t.input(b)); }, 129);
        check_op(b, [a = rand_tensor({2, 3, 4}, c)](Tape& t, NodeId p) {
            return t.bmm(t.input(a), p);
        }, 130);
    }
    check_op(rand_tensor({2, 2, 5, 5}, c),
             [](Tape& t, NodeId p) { return t.im2col(p, 3, 3, 1); }, 131);
    check_op(rand_tensor({2, 2, 5, 5}, c),
             [](Tape& t, NodeId p) { return t.im2col(p, 3, 3, 2, 1); }, 132);
    check_op(rand_tensor({1, 2, 4, 4, 4}, c),
             [](Tape& t, NodeId p) { return t.im2col3d(p, 2, 2, 2, 1); }, 133);
    check_op(rand_tensor({2, 2, 6, 6}, c),
             [](Tape& t, NodeId p) { return t.maxpool2d(p, 2, 2); }, 134);
    {
        Tensor gamma = rand_tensor({5}, c);
        Tensor beta = rand_tensor({5}, c);
        for (bool sqrt_mode : {true, false}) {
            check_op(rand_tensor({3, 5}, c),
                     [gamma, beta, sqrt_mode](Tape& t, NodeId p) {
                         return t.layer_norm(p, t.input(gamma), t.input(beta), 1e-5, sqrt_mode);
                     },
                     sqrt_mode ? 135 : 136, 1e-5);
            check_op(gamma,
                     [x = rand_tensor({3, 5}, c), beta, sqrt_mode](Tape& t, NodeId p) {
                         return t.layer_norm(t.input(x), p, t.input(beta), 1e-5, sqrt_mode);
                     },
                     sqrt_mode ? 137 : 138, 1e-5);
            check_op(beta,
                     [x = rand_tensor({3, 5}, c), gamma, sqrt_mode](Tape& t, NodeId p) {
                         return t.layer_norm(t.input(x), t.input(gamma), p, 1e-5, sqrt_mode);
                     },
                     sqrt_mode ? 139 : 140, 1e-5);
        }
    }
    {
        Tensor w = rand_tensor({6}, c);
        check_op(rand_tensor({6}, c),
                 [w](Tape& t, NodeId p) {
                     // wrap so the outer weighted_sum still applies
                     return t.reshape(t.weighted_sum(p, w), {1});
                 },
                 141);
    }
}

TEST_CASE("backward is linear in the upstream gradient") {
    std::mt19937_64 rng(14);
    Tensor w0 = rand_tensor({4, 3}, rng);
    Tensor x0 = rand_tensor({3, 2}, rng);

    Tape tape;
    NodeId w = tape.param(w0);
    NodeId x = tape.input(x0);
    NodeId y = tape.matmul(w, x);
    NodeId l1 = tape.sum_all(tape.tanh(y));
    NodeId l2 = tape.sum_all(tape.mul(y, y));
    const double a = 1.7, b = -0.4;
    NodeId combined = tape.add(tape.scalar_mul(l1, a), tape.scalar_mul(l2, b));

    Tensor g1 = backward(tape, l1).at(w);
    Tensor g2 = backward(tape, l2).at(w);
    Tensor gc = backward(tape, combined).at(w);
    Tensor expect = axpy(scalar_mul(g1, a), g2, b);
    CHECK(max_abs_diff(gc, expect) < 1e-10);
}

TEST_CASE("retention does not change parameter gradients (bitwise)") {
    std::mt19937_64 rng(15);
    FamilyCase fc = make_linear_case(rng);

    Tape t1;
    NodeId logits1 = fc.model.forward(t1, fc.batch.features, /*track=*/false);
    NodeId losses1 = fc.model.per_example_losses(t1, logits1, fc.batch.targets);
    GradMap g1 = backward(t1, t1.sum_all(losses1));
    std::vector<Tensor> plain;
    for (NodeId id : fc.model.param_nodes()) plain.push_back(g1.at(id));

    Tape t2;
    NodeId logits2 = fc.model.forward(t2, fc.batch.features, /*track=*/true);
    NodeId losses2 = fc.model.per_example_losses(t2, logits2, fc.batch.targets);
    GradMap g2 = backward(t2, t2.sum_all(losses2));
    auto nodes = fc.model.param_nodes();
    for (std::size_t p = 0; p < nodes.size(); ++p) {
        const Tensor& retained = g2.at(nodes[p]);
        REQUIRE(retained.size() == plain[p].size());
        for (std::size_t i = 0; i < retained.size(); ++i) CHECK(retained[i] == plain[p][i]);
    }
}

TEST_CASE("backward_per_example: single loss equals backward") {
    std::mt19937_64 rng(16);
    FamilyCase fc = make_linear_case(rng);
    Batch one = fc.batch.select(0);
    Tape tape;
    NodeId logits = fc.model.forward(tape, one.features, false);
    NodeId losses = fc.model.per_example_losses(tape, logits, one.targets);
    NodeId l0 = tape.index_scalar(losses, 0);
    GradMap whole = backward(tape, l0);
    std::vector<GradMap> per = backward_per_example(tape, {l0});
    REQUIRE(per.size() == 1);
    for (NodeId id : fc.model.param_nodes()) {
        CHECK(max_abs_diff(per[0].at(id), whole.at(id)) == 0.0);
    }
}

TEST_CASE("backward_per_example: identical records give identical gradients") {
    std::mt19937_64 rng(17);
    FamilyCase fc = make_linear_case(rng);
    Batch one = fc.batch.select(0);
    // duplicate the record
    std::vector<double> feat(one.features.vec());
    feat.insert(feat.end(), one.features.vec().begin(), one.features.vec().end());
    Shape s = one.features.shape();
    s[0] = 2;
    Batch two{Tensor(s, feat), {one.targets[0], one.targets[0]}};

    Tape tape;
    NodeId logits = fc.model.forward(tape, two.features, false);
    NodeId losses = fc.model.per_example_losses(tape, logits, two.targets);
    std::vector<GradMap> per = backward_per_example(
        tape, {tape.index_scalar(losses, 0), tape.index_scalar(losses, 1)});
    for (NodeId id : fc.model.param_nodes()) {
        CHECK(max_abs_diff(per[0].at(id), per[1].at(id)) < 1e-12);
    }
}

TEST_CASE("per-example gradients sum to tau times the mean-loss gradient") {
    std::mt19937_64 rng(18);
    FamilyCase fc = make_linear_case(rng);
    const std::size_t tau = fc.batch.size();

    Tape tape;
    NodeId logits = fc.model.forward(tape, fc.batch.features, false);
    NodeId losses = fc.model.per_example_losses(tape, logits, fc.batch.targets);
    std::vector<NodeId> ids;
    for (std::size_t i = 0; i < tau; ++i) ids.push_back(tape.index_scalar(losses, i));
    std::vector<GradMap> per = backward_per_example(tape, ids);
    GradMap mean_grad = backward(tape, tape.mean_all(losses));

    for (NodeId id : fc.model.param_nodes()) {
        Tensor total = Tensor::zeros(tape.value(id).shape());
        for (const GradMap& gm : per) total = add(total, gm.at(id));
        CHECK(max_abs_diff(total, scalar_mul(mean_grad.at(id), static_cast<double>(tau))) <
              1e-10);
    }
}

TEST_CASE("retained logits gradient equals softmax minus one-hot") {
    std::mt19937_64 rng(19);
    Tensor z0 = rand_tensor({3, 5}, rng);
    std::vector<int> targets = {2, 0, 4};

    Tape tape;
    NodeId z = tape.param(z0);
    tape.retain(z);
    NodeId losses = cross_entropy_losses(tape, z, targets);
    GradMap g = backward(tape, tape.sum_all(losses));

    Tape probe;
    Tensor soft = probe.node(probe.softmax_rows(probe.input(z0))).value;
    std::vector<double> want(soft.vec());
    for (std::size_t i = 0; i < 3; ++i) want[i * 5 + targets[i]] -= 1.0;
    CHECK(max_abs_diff(g.at(z), Tensor({3, 5}, want)) < 1e-12);
}

TEST_CASE("retaining an input exposes its gradient") {
    Tape tape;
    NodeId w = tape.param(Tensor({2, 2}, {1, 2, 3, 4}));
    NodeId x = tape.input(Tensor({2, 1}, {1, 1}));
    tape.retain(x);
    NodeId loss = tape.sum_all(tape.matmul(w, x));
    GradMap g = backward(tape, loss);
    CHECK(g.contains(x));
    CHECK(g.at(x).shape() == Shape{2, 1});
    CHECK(g.at(x).vec() == std::vector<double>{4.0, 6.0});  // column sums of W
}
