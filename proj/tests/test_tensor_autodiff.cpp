#include <catch2/catch_amalgamated.hpp>

#include <sgdrop/ops.hpp>
#include <sgdrop/rng.hpp>
#include <sgdrop/tape.hpp>
#include <sgdrop/tensor.hpp>

#include "support/oracles.hpp"

using namespace sgdrop;
using oracles::fd_grad;
using oracles::grad_discrepancy;
using oracles::random_tensor;
using oracles::random_tensor_no_kink;

namespace {

Tensor<double> t1(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor<double>::from({n}, std::move(v));
}

} // namespace

TEST_CASE("elementwise op values") {
    Tape<double> tape;
    auto a = tape.watch(t1({1, 2}));
    auto b = Var<double>::constant(t1({3, 4}));
    auto s = add(&tape, a, b);
    CHECK(s.value[0] == 4.0);
    CHECK(s.value[1] == 6.0);

    auto r = relu(&tape, Var<double>::constant(t1({-1, 0, 2})));
    CHECK(r.value[0] == 0.0);
    CHECK(r.value[1] == 0.0);
    CHECK(r.value[2] == 2.0);
}

TEST_CASE("matmul identity") {
    Rng rng(7);
    Tensor<double> eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.at2(i, i) = 1.0;
    auto a = random_tensor({3, 3}, rng);
    auto out = matmul<double>(nullptr, Var<double>::constant(eye), Var<double>::constant(a));
    CHECK(bitwise_equal(out.value, a));
}

TEST_CASE("backward of sum(x*x) is 2x") {
    Tape<double> tape;
    auto x = tape.watch(t1({1, 2, 3}));
    auto loss = vsum(&tape, mul(&tape, x, x));
    auto grads = tape.backward(loss, {x.node});
    const auto& g = grads.at(x);
    CHECK(g[0] == Catch::Approx(2.0));
    CHECK(g[1] == Catch::Approx(4.0));
    CHECK(g[2] == Catch::Approx(6.0));
}

TEST_CASE("backward of linear map w.z is w") {
    Tape<double> tape;
    auto z = tape.watch(t1({3, 4}));
    auto w = Var<double>::constant(t1({0.5, -1}));
    auto loss = vsum(&tape, mul(&tape, w, z));
    auto g = tape.backward(loss, {z.node}).at(z);
    CHECK(g[0] == 0.5);
    CHECK(g[1] == -1.0);
}

TEST_CASE("fan-out accumulates: d/dx sum(x*x + x) = 2x + 1") {
    Tape<double> tape;
    auto x = tape.watch(t1({0.5, -2}));
    auto loss = vsum(&tape, add(&tape, mul(&tape, x, x), x));
    auto g = tape.backward(loss, {x.node}).at(x);
    CHECK(g[0] == Catch::Approx(2.0));
    CHECK(g[1] == Catch::Approx(-3.0));
}

TEST_CASE("detach excludes values from tracking") {
    Tensor<double> x = t1({1, 2});
    x.requires_grad = true;
    auto d = detach(x);
    CHECK_FALSE(d.requires_grad);
    CHECK(bitwise_equal(x, d));

    // y = x * detach(m): dy/dx = m
    Tape<double> tape;
    auto xv = tape.watch(t1({1.5, -0.5, 2.0}));
    Tensor<double> m = t1({0.25, 3.0, -1.0});
    m.requires_grad = true;
    auto y = mul(&tape, xv, tape.leaf(detach(m)));
    auto loss = vsum(&tape, y);
    auto g = tape.backward(loss, {xv.node}).at(xv);
    CHECK(bitwise_equal(g, m.detached()));

    auto num = fd_grad(
        [&](const Tensor<double>& probe) {
            Tape<double> t;
            auto xx = t.watch(probe);
            return vsum(&t, mul(&t, xx, Var<double>::constant(m.detached()))).value[0];
        },
        xv.value);
    CHECK(grad_discrepancy(g, num) < 1e-4);
}

TEST_CASE("unreachable watched node gets zeros") {
    Tape<double> tape;
    auto x = tape.watch(t1({1, 2}));
    auto y = tape.watch(t1({3, 4}));
    auto loss = vsum(&tape, mul(&tape, x, x));
    auto g = tape.backward(loss, {x.node, y.node});
    CHECK(g.at(y)[0] == 0.0);
    CHECK(g.at(y)[1] == 0.0);
}

TEST_CASE("backward errors") {
    Tape<double> tape;
    auto x = tape.watch(t1({1, 2}));
    auto y = mul(&tape, x, x);
    CHECK_THROWS_WITH(tape.backward(y, {x.node}),
                      Catch::Matchers::ContainsSubstring("scalar"));
    auto loss = vsum(&tape, y);
    CHECK_THROWS_WITH(tape.backward(loss, {99}),
                      Catch::Matchers::ContainsSubstring("not on the tape"));
}

TEST_CASE("shape errors name the op and shapes") {
    CHECK_THROWS_WITH(kernels::add(t1({1, 2}), t1({1, 2, 3})),
                      Catch::Matchers::ContainsSubstring("add") &&
                          Catch::Matchers::ContainsSubstring("[2]") &&
                          Catch::Matchers::ContainsSubstring("[3]"));
    Tensor<double> bad({2, 3});
    CHECK_THROWS_WITH(kernels::matmul(bad, bad),
                      Catch::Matchers::ContainsSubstring("matmul"));
}

TEST_CASE("backward is linear in the output") {
    Rng rng(11);
    const double ca = 1.7, cb = -0.6;
    auto xval = random_tensor({6}, rng);
    auto rval = random_tensor({6}, rng);

    auto grad_of = [&](bool with_f, bool with_g, double a, double b) {
        Tape<double> tape;
        auto x = tape.watch(xval);
        auto f = vsum(&tape, mul(&tape, x, x));
        auto g = vsum(&tape, mul(&tape, x, Var<double>::constant(rval)));
        Var<double> total = add(&tape, scale(&tape, f, with_f ? a : 0.0),
                                scale(&tape, g, with_g ? b : 0.0));
        return tape.backward(total, {x.node}).at(x);
    };

    auto combined = grad_of(true, true, ca, cb);
    auto gf = grad_of(true, false, 1.0, 0.0);
    auto gg = grad_of(false, true, 0.0, 1.0);
    for (std::size_t i = 0; i < combined.numel(); ++i)
        CHECK(std::abs(combined[i] - (ca * gf[i] + cb * gg[i])) < 1e-10);
}

TEST_CASE("identical tapes give bitwise identical gradients") {
    auto run = [] {
        Rng rng(23);
        Tape<double> tape;
        auto x = tape.watch(random_tensor({2, 2, 3, 3}, rng));
        auto w = tape.watch(random_tensor({2, 2, 2, 2}, rng));
        auto b = tape.watch(random_tensor({2}, rng));
        auto y = conv2d(&tape, x, w, b, 1, 1);
        auto loss = vsum(&tape, mul(&tape, y, y));
        auto g = tape.backward(loss, {x.node, w.node, b.node});
        return std::make_tuple(g.at(x), g.at(w), g.at(b));
    };
    auto [gx1, gw1, gb1] = run();
    auto [gx2, gw2, gb2] = run();
    CHECK(bitwise_equal(gx1, gx2));
    CHECK(bitwise_equal(gw1, gw2));
    CHECK(bitwise_equal(gb1, gb2));
}

namespace {

struct FdCase {
    std::string name;
    // returns worst discrepancy between tape gradient and finite differences
    std::function<double(Rng&)> run;
};

double fd_unary(const Tensor<double>& x,
                const std::function<Var<double>(Tape<double>*, const Var<double>&)>& build) {
    Tape<double> tape;
    auto xv = tape.watch(x);
    auto loss = build(&tape, xv);
    auto analytic = tape.backward(loss, {xv.node}).at(xv);
    auto numeric = fd_grad(
        [&](const Tensor<double>& probe) {
            Tape<double> t;
            auto p = t.watch(probe);
            return build(&t, p).value[0];
        },
        x);
    return grad_discrepancy(analytic, numeric);
}

Shape random_shape4(Rng& rng) {
    return Shape{1 + rng.below(4), 1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8)};
}

} // namespace

TEST_CASE("finite-difference oracle over every primitive") {
    std::vector<FdCase> cases;

    cases.push_back({"add", [](Rng& rng) {
        auto shape = random_shape4(rng);
        auto b = random_tensor(shape, rng);
        auto r = random_tensor(shape, rng);
        return fd_unary(random_tensor(shape, rng), [&](Tape<double>* t, const Var<double>& x) {
            return vsum(t, mul(t, add(t, x, Var<double>::constant(b)), Var<double>::constant(r)));
        });
    }});
    cases.push_back({"sub", [](Rng& rng) {
        auto shape = random_shape4(rng);
        auto b = random_tensor(shape, rng);
        auto r = random_tensor(shape, rng);
        return fd_unary(random_tensor(shape, rng), [&](Tape<double>* t, const Var<double>& x) {
            return vsum(t, mul(t, sub(t, Var<double>::constant(b), x), Var<double>::constant(r)));
        });
    }});
    cases.push_back({"mul", [](Rng& rng) {
        auto shape = random_shape4(rng);
        auto b = random_tensor(shape, rng);
        return fd_unary(random_tensor(shape, rng), [&](Tape<double>* t, const Var<double>& x) {
            return vsum(t, mul(t, mul(t, x, Var<double>::constant(b)), x));
        });
    }});
    cases.push_back({"scale", [](Rng& rng) {
        auto shape = random_shape4(rng);
        const double k = rng.uniform(-2.0, 2.0);
        return fd_unary(random_tensor(shape, rng), [&](Tape<double>* t, const Var<double>& x) {
            return vsum(t, scale(t, x, k));
        });
    }});
    cases.push_back({"relu", [](Rng& rng) {
        auto shape = random_shape4(rng);
        return fd_unary(random_tensor_no_kink(shape, rng),
                        [&](Tape<double>* t, const Var<double>& x) {
                            return vmean(t, relu(t, x));
                        });
    }});
    cases.push_back({"matmul-lhs", [](Rng& rng) {
        const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
        auto b = random_tensor({k, n}, rng);
        auto r = random_tensor({m, n}, rng);
        return fd_unary(random_tensor({m, k}, rng), [&](Tape<double>* t, const Var<double>& x) {
            return vsum(t, mul(t, matmul(t, x, Var<double>::constant(b)), Var<double>::constant(r)));
        });
    }});
    cases.push_back({"matmul-rhs", [](Rng& rng) {
        const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
        auto a = random_tensor({m, k}, rng);
        auto r = random_tensor({m, n}, rng);
        return fd_unary(random_tensor({k, n}, rng), [&](Tape<double>* t, const Var<double>& x) {
            return vsum(t, mul(t, matmul(t, Var<double>::constant(a), x), Var<double>::constant(r)));
        });
    }});
    cases.push_back({"linear", [](Rng& rng) {
        const std::size_t n = 1 + rng.below(4), f = 1 + rng.below(6), o = 1 + rng.below(4);
        auto x0 = random_tensor({n, f}, rng);
        auto w0 = random_tensor({o, f}, rng);
        auto b0 = random_tensor({o}, rng);
        auto r = random_tensor({n, o}, rng);
        double worst = 0.0;
        // gradient with respect to each of the three inputs in turn
        worst = std::max(worst, fd_unary(x0, [&](Tape<double>* t, const Var<double>& x) {
            return vsum(t, mul(t, linear(t, x, Var<double>::constant(w0), Var<double>::constant(b0)),
                               Var<double>::constant(r)));
        }));
        worst = std::max(worst, fd_unary(w0, [&](Tape<double>* t, const Var<double>& w) {
            return vsum(t, mul(t, linear(t, Var<double>::constant(x0), w, Var<double>::constant(b0)),
                               Var<double>::constant(r)));
        }));
        worst = std::max(worst, fd_unary(b0, [&](Tape<double>* t, const Var<double>& b) {
            return vsum(t, mul(t, linear(t, Var<double>::constant(x0), Var<double>::constant(w0), b),
                               Var<double>::constant(r)));
        }));
        return worst;
    }});
    for (ConvImpl impl : {ConvImpl::im2col, ConvImpl::direct}) {
        const std::string tag = impl == ConvImpl::im2col ? "conv2d-im2col" : "conv2d-direct";
        cases.push_back({tag, [impl](Rng& rng) {
            const std::size_t n = 1 + rng.below(2), c = 1 + rng.below(3), o = 1 + rng.below(3);
            const std::size_t k = 1 + rng.below(3);
            const std::size_t h = k + rng.below(4), w = k + rng.below(4);
            const std::size_t stride = 1 + rng.below(2), pad = rng.below(2);
            auto x0 = random_tensor({n, c, h, w}, rng);
            auto w0 = random_tensor({o, c, k, k}, rng);
            auto b0 = random_tensor({o}, rng);
            double worst = 0.0;
            worst = std::max(worst, fd_unary(x0, [&](Tape<double>* t, const Var<double>& x) {
                return vsum(t, conv2d(t, x, Var<double>::constant(w0), Var<double>::constant(b0),
                                      stride, pad, impl));
            }));
            worst = std::max(worst, fd_unary(w0, [&](Tape<double>* t, const Var<double>& wv) {
                return vsum(t, conv2d(t, Var<double>::constant(x0), wv, Var<double>::constant(b0),
                                      stride, pad, impl));
            }));
            worst = std::max(worst, fd_unary(b0, [&](Tape<double>* t, const Var<double>& bv) {
                return vsum(t, conv2d(t, Var<double>::constant(x0), Var<double>::constant(w0), bv,
                                      stride, pad, impl));
            }));
            return worst;
        }});
    }
    cases.push_back({"maxpool2d", [](Rng& rng) {
        const std::size_t k = 2 + rng.below(2);
        const std::size_t h = k + 2 + rng.below(3);
        // distinct well-separated values so the FD step cannot flip an argmax
        Tensor<double> x({1, 1 + rng.below(2), h, h});
        std::vector<std::size_t> perm(x.numel());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        for (std::size_t i = perm.size(); i > 1; --i)
            std::swap(perm[i - 1], perm[rng.below(i)]);
        for (std::size_t i = 0; i < x.numel(); ++i)
            x[i] = 0.05 * static_cast<double>(perm[i]) - 0.5;
        auto r = random_tensor({1}, rng);
        return fd_unary(x, [&](Tape<double>* t, const Var<double>& xv) {
            return scale(t, vsum(t, maxpool2d(t, xv, k, 1 + rng.below(1) + 1)), r[0]);
        });
    }});
    cases.push_back({"reshape", [](Rng& rng) {
        auto shape = random_shape4(rng);
        auto flat = Shape{shape_numel(shape)};
        auto r = random_tensor(flat, rng);
        return fd_unary(random_tensor(shape, rng), [&](Tape<double>* t, const Var<double>& x) {
            return vsum(t, mul(t, reshape(t, x, flat), Var<double>::constant(r)));
        });
    }});
    cases.push_back({"pick_rows", [](Rng& rng) {
        const std::size_t n = 1 + rng.below(5), c = 2 + rng.below(6);
        std::vector<std::size_t> idx(n);
        for (auto& i : idx) i = rng.below(c);
        return fd_unary(random_tensor({n, c}, rng), [&](Tape<double>* t, const Var<double>& s) {
            return vsum(t, pick_rows(t, s, idx));
        });
    }});
    cases.push_back({"softmax", [](Rng& rng) {
        const std::size_t n = 1 + rng.below(4), c = 2 + rng.below(6);
        auto r = random_tensor({n, c}, rng);
        return fd_unary(random_tensor({n, c}, rng, -2.0, 2.0),
                        [&](Tape<double>* t, const Var<double>& x) {
                            return vsum(t, mul(t, softmax_rows(t, x), Var<double>::constant(r)));
                        });
    }});
    cases.push_back({"cross_entropy", [](Rng& rng) {
        const std::size_t n = 1 + rng.below(4), c = 2 + rng.below(8);
        std::vector<std::size_t> labels(n);
        for (auto& l : labels) l = rng.below(c);
        return fd_unary(random_tensor({n, c}, rng, -2.0, 2.0),
                        [&](Tape<double>* t, const Var<double>& x) {
                            return cross_entropy(t, x, labels);
                        });
    }});
    cases.push_back({"vmean", [](Rng& rng) {
        auto shape = random_shape4(rng);
        return fd_unary(random_tensor(shape, rng), [&](Tape<double>* t, const Var<double>& x) {
            return vmean(t, mul(t, x, x));
        });
    }});

    Rng rng(2024);
    double worst = 0.0;
    std::string worst_case;
    for (int trial = 0; trial < 100; ++trial) {
        auto& c = cases[static_cast<std::size_t>(trial) % cases.size()];
        const double d = c.run(rng);
        INFO("trial " << trial << " op " << c.name << " discrepancy " << d);
        CHECK(d < 1e-4);
        if (d > worst) {
            worst = d;
            worst_case = c.name;
        }
    }
    INFO("worst " << worst_case << " " << worst);
    SUCCEED();
}
