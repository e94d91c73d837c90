#include <catch2/catch_amalgamated.hpp>

#include <set>

#include <sgdrop/sgdrop.hpp>

#include "support/oracles.hpp"

using namespace sgdrop;
using oracles::fd_grad;
using oracles::grad_discrepancy;
using oracles::random_tensor;

namespace {

AttributionMap<double> attr_of(std::vector<double> v) {
    const std::size_t n = v.size();
    return AttributionMap<double>{Tensor<double>::from({1, 1, n}, std::move(v)), 0,
                                  AttributionSource::live};
}

/// Full-sort reference for the drop set: value descending, index ascending.
std::set<std::size_t> topk_oracle(const Tensor<double>& v, std::size_t k) {
    std::vector<std::size_t> order(v.numel());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
        if (v[i] != v[j]) return v[i] > v[j];
        return i < j;
    });
    return std::set<std::size_t>(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
}

} // namespace

TEST_CASE("mask drops 250 of 25088 at rho=0.01") {
    Rng rng(1);
    Tensor<double> v({512, 7, 7});
    for (std::size_t i = 0; i < v.numel(); ++i) v[i] = std::max(0.0, rng.uniform(-1.0, 1.0));
    auto mask = compute_mask(AttributionMap<double>{v, 0, AttributionSource::live}, 0.01);
    REQUIRE(mask.drop_count == 250);
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < mask.bits.numel(); ++i)
        if (mask.bits[i] == 0.0) ++zeros;
    REQUIRE(zeros == 250);
}

TEST_CASE("rho=0 keeps everything") {
    auto mask = compute_mask(attr_of({0.5, 0.1, 0.9}), 0.0);
    REQUIRE(mask.drop_count == 0);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(mask.bits[i] == 1.0);
}

TEST_CASE("quarter of four drops exactly the largest") {
    auto mask = compute_mask(attr_of({0.1, 0.5, 0.3, 0.0}), 0.25);
    REQUIRE(mask.drop_count == 1);
    REQUIRE(mask.bits[0] == 1.0);
    REQUIRE(mask.bits[1] == 0.0);
    REQUIRE(mask.bits[2] == 1.0);
    REQUIRE(mask.bits[3] == 1.0);
}

TEST_CASE("mask zero set equals the full-sort oracle with tie-break") {
    Rng rng(2);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t d = 1 + rng.below(512);
        Tensor<double> v({d});
        // quantized non-negative values: plenty of exact ties, including at 0
        for (std::size_t i = 0; i < d; ++i)
            v[i] = std::max(0.0, static_cast<double>(rng.below(8)) - 2.0) * 0.25;
        for (double rho : {0.01, 0.1, 0.5}) {
            const std::size_t k = static_cast<std::size_t>(rho * static_cast<double>(d));
            auto mask =
                compute_mask(AttributionMap<double>{v, 0, AttributionSource::live}, rho);
            REQUIRE(mask.drop_count == k);
            auto expect = topk_oracle(v, k);
            std::set<std::size_t> got;
            std::size_t zero_drops = 0;
            for (std::size_t i = 0; i < d; ++i)
                if (mask.bits[i] == 0.0) {
                    got.insert(i);
                    if (v[i] == 0.0) ++zero_drops;
                }
            REQUIRE(got == expect);
            REQUIRE(mask.zero_attribution_drops == zero_drops);
        }
    }
}

TEST_CASE("apply_mask semantics") {
    Rng rng(3);
    auto z = random_tensor({2, 3}, rng);

    SECTION("all-ones mask is the identity") {
        Tensor<double> ones({2, 3}, 1.0);
        auto out = apply_mask<double>(nullptr, Var<double>::constant(z), ones);
        REQUIRE(bitwise_equal(out.value, z));
    }
    SECTION("masked positions are exactly zero") {
        Tensor<double> m({2, 3}, 1.0);
        m[1] = 0.0;
        m[4] = 0.0;
        auto out = apply_mask<double>(nullptr, Var<double>::constant(z), m);
        REQUIRE(out.value[1] == 0.0);
        REQUIRE(out.value[4] == 0.0);
        REQUIRE(out.value[0] == z[0]);
    }
    SECTION("loss gradient vanishes at masked positions") {
        Tensor<double> m({2, 3}, 1.0);
        m[2] = 0.0;
        m[3] = 0.0;
        auto r = random_tensor({2, 3}, rng);
        Tape<double> tape;
        auto zv = tape.watch(z);
        auto loss = vsum(&tape, mul(&tape, apply_mask(&tape, zv, m), Var<double>::constant(r)));
        auto g = tape.backward(loss, {zv.node}).at(zv);
        REQUIRE(g[2] == 0.0);
        REQUIRE(g[3] == 0.0);
        auto num = fd_grad(
            [&](const Tensor<double>& probe) {
                Tape<double> t;
                auto p = t.watch(probe);
                return vsum(&t, mul(&t, apply_mask(&t, p, m), Var<double>::constant(r))).value[0];
            },
            z);
        REQUIRE(grad_discrepancy(g, num) < 1e-4);
        REQUIRE(std::abs(num[2]) < 1e-12);
    }
    SECTION("shape mismatch is rejected") {
        Tensor<double> m({3, 2}, 1.0);
        CHECK_THROWS_WITH(apply_mask<double>(nullptr, Var<double>::constant(z), m),
                          Catch::Matchers::ContainsSubstring("apply_mask"));
    }
}

TEST_CASE("ema update arithmetic") {
    Rng rng(4);
    auto model = make_preset<double>("cnn-tiny", {1, 8, 8}, 2, rng);

    SECTION("alpha=1 leaves the shadow unchanged") {
        EmaState<double> ema(model, 1.0);
        auto before = ema.teacher().encoder()[0].weight.deep_copy();
        for (auto& p : model.parameters())
            for (std::size_t i = 0; i < p.tensor().numel(); ++i) p.tensor()[i] += 1.0;
        ema.update(model);
        REQUIRE(bitwise_equal(ema.teacher().encoder()[0].weight, before));
    }
    SECTION("alpha->0 copies the live parameters") {
        EmaState<double> ema(model, 1e-300);
        for (auto& p : model.parameters())
            for (std::size_t i = 0; i < p.tensor().numel(); ++i) p.tensor()[i] = 0.25;
        ema.update(model);
        for (std::size_t i = 0; i < ema.teacher().encoder()[0].weight.numel(); ++i)
            REQUIRE(ema.teacher().encoder()[0].weight[i] == Catch::Approx(0.25).margin(1e-12));
    }
    SECTION("scalar case: 0.99 * 1 + 0.01 * 0 = 0.99") {
        EmaState<double> ema(model, 0.99);
        auto tp = const_cast<Model<double>&>(ema.teacher()).parameters();
        tp[0].tensor()[0] = 1.0;
        model.parameters()[0].tensor()[0] = 0.0;
        ema.update(model);
        REQUIRE(ema.teacher().encoder()[0].weight[0] == Catch::Approx(0.99).margin(1e-15));
    }
    SECTION("geometric decay toward frozen parameters") {
        const double alpha = 0.9;
        EmaState<double> ema(model, alpha);
        // displace the shadow, then hold theta fixed
        auto tp = const_cast<Model<double>&>(ema.teacher()).parameters();
        double norm0 = 0.0;
        for (auto& p : tp)
            for (std::size_t i = 0; i < p.tensor().numel(); ++i) p.tensor()[i] += 0.5;
        auto lp = model.parameters();
        for (std::size_t pi = 0; pi < tp.size(); ++pi)
            for (std::size_t i = 0; i < tp[pi].tensor().numel(); ++i) {
                const double d = tp[pi].tensor()[i] - lp[pi].tensor()[i];
                norm0 += d * d;
            }
        norm0 = std::sqrt(norm0);
        for (int t = 1; t <= 40; ++t) {
            ema.update(model);
            double norm = 0.0;
            for (std::size_t pi = 0; pi < tp.size(); ++pi)
                for (std::size_t i = 0; i < tp[pi].tensor().numel(); ++i) {
                    const double d = tp[pi].tensor()[i] - lp[pi].tensor()[i];
                    norm += d * d;
                }
            norm = std::sqrt(norm);
            REQUIRE(norm == Catch::Approx(std::pow(alpha, t) * norm0).margin(1e-10));
        }
        REQUIRE(ema.update_count() == 40);
    }
}

TEST_CASE("rho schedule") {
    SgdropConfig cfg;
    cfg.rho_schedule = RhoSchedule::linear;
    cfg.rho_init = 0.01;
    cfg.rho_final = 0.1;

    REQUIRE(rho_at(cfg, 0, 80) == 0.01);
    REQUIRE(rho_at(cfg, 79, 80) == 0.1);
    REQUIRE(rho_at(cfg, 40, 80) == Catch::Approx(0.01 + 0.09 * 40.0 / 79.0).margin(1e-15));
    REQUIRE(rho_at(cfg, 0, 1) == 0.01);

    SgdropConfig c2; // constant
    c2.rho = 0.05;
    REQUIRE(rho_at(c2, 3, 10) == 0.05);

    CHECK_THROWS_WITH(rho_at(cfg, 80, 80), Catch::Matchers::ContainsSubstring("out of range"));
}

namespace {

template <typename T>
Tensor<T> random_batch(Shape shape, Rng& rng) {
    Tensor<T> x(std::move(shape));
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<T>(rng.uniform());
    return x;
}

template <typename T>
bool params_equal(Model<T>& a, Model<T>& b) {
    auto pa = a.parameters();
    auto pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (!bitwise_equal(pa[i].tensor(), pb[i].tensor())) return false;
    return true;
}

} // namespace

TEST_CASE("rho=0 sgdrop step is identical to a vanilla step") {
    for (int pass = 0; pass < 2; ++pass) {
        const bool f64 = pass == 1;
        auto run = [&](auto tag) {
            using T = decltype(tag);
            Rng rng(42);
            auto m1 = make_preset<T>("cnn-tiny", {1, 16, 16}, 2, rng);
            auto m2 = m1.clone_deep();
            Rng data_rng(7);
            auto x = random_batch<T>({4, 1, 16, 16}, data_rng);
            std::vector<std::size_t> labels{0, 1, 1, 0};
            OptimizerConfig ocfg;
            ocfg.lr = 1e-3;
            Optimizer<T> o1(ocfg), o2(ocfg);

            SgdropConfig cfg;
            cfg.rho = 0.0;
            cfg.use_ema = false;
            auto s1 = sgdrop_step(m1, static_cast<EmaState<T>*>(nullptr), x, labels, cfg, 0.0, o1);
            auto s2 = vanilla_step(m2, x, labels, o2);
            REQUIRE(s1.loss == s2.loss); // bitwise: multiplying by 1.0 is exact
            REQUIRE(s1.drop_count == 0);
            REQUIRE(params_equal(m1, m2));
        };
        if (f64)
            run(double{});
        else
            run(float{});
    }
}

TEST_CASE("sgdrop step loss equals the manual composition") {
    auto check = [](auto tag, double tol) {
        using T = decltype(tag);
        Rng rng(11);
        auto model = make_preset<T>("cnn-tiny", {1, 16, 16}, 3, rng);
        EmaState<T> ema(model, 0.99);
        Rng data_rng(5);
        auto x = random_batch<T>({5, 1, 16, 16}, data_rng);
        std::vector<std::size_t> labels{2, 0, 1, 2, 1};

        SgdropConfig cfg;
        cfg.rho = 0.05;
        cfg.use_ema = true;

        // independent composition from the pre-step parameters:
        // -mean log softmax(psi(z*m))[c], softmax in 64-bit longhand
        auto frozen = model.clone_deep();
        DropMask<T> mask = batch_masks(ema.teacher(), x, labels, cfg.rho, cfg.score);
        auto z = frozen.encode(nullptr, Var<T>::constant(x)).value;
        REQUIRE(same_shape(z.shape(), mask.bits.shape()));
        Tensor<T> masked(z.shape());
        for (std::size_t i = 0; i < z.numel(); ++i) masked[i] = z[i] * mask.bits[i];
        auto logits = frozen.classify(nullptr, Var<T>::constant(masked)).value;
        double manual = 0.0;
        const std::size_t C = logits.extent(1);
        for (std::size_t n = 0; n < labels.size(); ++n) {
            double mx = -1e300;
            for (std::size_t c = 0; c < C; ++c)
                mx = std::max(mx, static_cast<double>(logits.at2(n, c)));
            double zsum = 0.0;
            for (std::size_t c = 0; c < C; ++c)
                zsum += std::exp(static_cast<double>(logits.at2(n, c)) - mx);
            manual -= std::log(std::exp(static_cast<double>(logits.at2(n, labels[n])) - mx) / zsum);
        }
        manual /= static_cast<double>(labels.size());

        OptimizerConfig ocfg;
        Optimizer<T> opt(ocfg);
        auto stats = sgdrop_step(model, &ema, x, labels, cfg, cfg.rho, opt);
        REQUIRE(stats.loss == Catch::Approx(manual).margin(tol));
        REQUIRE(stats.drop_count ==
                static_cast<std::size_t>(cfg.rho * static_cast<double>(model.feature_count())));
    };
    check(double{}, 1e-9);
    check(float{}, 1e-6);
}

TEST_CASE("disabling the EMA changes the teacher and eventually the masks") {
    Rng rng(21);
    auto base = make_preset<float>("cnn-tiny", {1, 16, 16}, 2, rng);
    auto m_ema = base.clone_deep();
    auto m_live = base.clone_deep();
    EmaState<float> ema(m_ema, 0.9);

    SgdropConfig cfg_ema;
    cfg_ema.rho = 0.1;
    cfg_ema.use_ema = true;
    SgdropConfig cfg_live = cfg_ema;
    cfg_live.use_ema = false;

    Rng data_rng(3);
    auto x = random_batch<float>({6, 1, 16, 16}, data_rng);
    std::vector<std::size_t> labels{0, 1, 0, 1, 0, 1};
    OptimizerConfig ocfg;
    ocfg.lr = 0.05; // large enough that one update visibly moves theta
    Optimizer<float> o1(ocfg), o2(ocfg);

    // step 1: the EMA teacher still equals theta, so both runs take the
    // same update and stay parameter-identical
    sgdrop_step(m_ema, &ema, x, labels, cfg_ema, cfg_ema.rho, o1);
    sgdrop_step(m_live, static_cast<EmaState<float>*>(nullptr), x, labels, cfg_live, cfg_live.rho,
                o2);
    REQUIRE(params_equal(m_ema, m_live));

    // step 2: teacher parameters now differ, so the masks must diverge
    DropMask<float> from_ema = batch_masks(ema.teacher(), x, labels, 0.1, ScoreMode::logit);
    DropMask<float> from_live = batch_masks(m_live, x, labels, 0.1, ScoreMode::logit);
    REQUIRE_FALSE(bitwise_equal(from_ema.bits, from_live.bits));
}

TEST_CASE("teacher attribution does not touch live parameters") {
    Rng rng(31);
    auto model = make_preset<float>("cnn-tiny", {1, 16, 16}, 2, rng);
    Rng data_rng(4);
    auto x = random_batch<float>({3, 1, 16, 16}, data_rng);
    std::vector<std::size_t> labels{0, 1, 1};

    std::vector<Tensor<float>> before;
    for (auto& p : model.parameters()) before.push_back(p.tensor().deep_copy());
    batch_masks(model, x, labels, 0.1, ScoreMode::logit);
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
        REQUIRE(bitwise_equal(before[i], params[i].tensor()));
}

TEST_CASE("mask cardinality holds for every sample over several steps") {
    Rng rng(41);
    auto model = make_preset<float>("cnn-tiny", {1, 16, 16}, 2, rng);
    EmaState<float> ema(model, 0.99);
    OptimizerConfig ocfg;
    ocfg.lr = 1e-3;
    Optimizer<float> opt(ocfg);
    SgdropConfig cfg;
    cfg.rho = 0.07;
    Rng data_rng(9);

    const std::size_t d = model.feature_count();
    const std::size_t k = static_cast<std::size_t>(cfg.rho * static_cast<double>(d));
    for (int step = 0; step < 5; ++step) {
        auto x = random_batch<float>({4, 1, 16, 16}, data_rng);
        std::vector<std::size_t> labels{0, 1, 1, 0};
        DropMask<float> mask = batch_masks(ema.teacher(), x, labels, cfg.rho, cfg.score);
        for (std::size_t n = 0; n < 4; ++n) {
            std::size_t zeros = 0;
            for (std::size_t i = 0; i < d; ++i)
                if (mask.bits[n * d + i] == 0.0f) ++zeros;
            REQUIRE(zeros == k);
        }
        auto stats = sgdrop_step(model, &ema, x, labels, cfg, cfg.rho, opt);
        REQUIRE(stats.drop_count == k);
    }
}

TEST_CASE("sgdrop config validation") {
    SgdropConfig bad;
    bad.rho = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    SgdropConfig swapped;
    swapped.rho_init = 0.2;
    swapped.rho_final = 0.1;
    CHECK_THROWS_AS(swapped.validate(), ConfigError);
    SgdropConfig ok;
    CHECK_NOTHROW(ok.validate());
}
