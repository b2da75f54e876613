#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hrtse/modules.hpp"

using namespace hrtse;
using ad::Var;
using nn::Params;

namespace {

Tensor randn(std::vector<int> shape, Rng& rng, float sc = 0.5f) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = sc * rng.normalf();
    return t;
}

void set_value(Params& P, const std::string& name, float v) {
    for (auto& x : P.find(name)->value.data) x = v;
}

}  // namespace

TEST_CASE("params registry") {
    Params P;
    Var a = P.add("a", Tensor::from({2}, {1.f, 2.f}));
    P.add("b", Tensor::zeros({3}));
    CHECK(P.numel() == 5);
    CHECK(P.contains("a"));
    CHECK(!P.contains("c"));
    CHECK(P.find("a") == a);
    CHECK_THROWS_AS(P.add("a", Tensor::zeros({1})), ValueError);
    CHECK_THROWS_AS(P.find("missing"), ValueError);

    uint64_t h0 = P.value_hash();
    a->value.at(0) = 5.f;
    CHECK(P.value_hash() != h0);

    ad::backward(ad::sum(ad::mul_const(a, Tensor::from({2}, {3.f, 4.f}))));
    CHECK(P.grad_norm() == doctest::Approx(5.0));
    P.zero_grads();
    CHECK(P.grad_norm() == 0.0);
}

TEST_CASE("linear matches manual matmul") {
    Params P;
    Rng rng(1);
    nn::Linear lin(P, "l", 3, 2, rng);
    Tensor x = randn({4, 3}, rng);
    Var y = lin(ad::leaf(x));
    REQUIRE(y->value.shape == std::vector<int>{4, 2});
    const Tensor& W = lin.W->value;
    const Tensor& b = lin.b->value;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 2; ++j) {
            float want = b.at(j);
            for (int k = 0; k < 3; ++k) want += x.at(i, k) * W.at(k, j);
            CHECK(y->value.at(i, j) == doctest::Approx(want).epsilon(1e-5));
        }
}

TEST_CASE("bilstm output shape and time extent") {
    Params P;
    Rng rng(2);
    nn::BiLstm rnn(P, "rnn", 3, 5, rng);
    Var y = rnn(ad::leaf(randn({7, 2, 3}, rng)));
    CHECK(y->value.shape == std::vector<int>{7, 2, 10});
}

TEST_CASE("arn block shapes for matching and differing widths") {
    Params P;
    Rng rng(3);
    nn::ArnBlock same(P, "same", 8, 8, rng);
    nn::ArnBlock wide(P, "wide", 1, 32, rng);
    Var y1 = same(ad::leaf(randn({6, 2, 8}, rng)));
    Var y2 = wide(ad::leaf(randn({9, 4, 1}, rng)));
    CHECK(y1->value.shape == std::vector<int>{6, 2, 8});
    CHECK(y2->value.shape == std::vector<int>{9, 4, 32});
}

TEST_CASE("arn block sees the whole sequence") {
    // both the bidirectional rnn and attention make frame 0 depend on the
    // final frame
    Params P;
    Rng rng(4);
    nn::ArnBlock blk(P, "blk", 4, 4, rng);
    Tensor x = randn({10, 1, 4}, rng);
    Var y0 = blk(ad::constant(x));
    x.at(9, 0, 2) += 1.5f;
    Var y1 = blk(ad::constant(x));
    double diff = 0.0;
    for (int d = 0; d < 4; ++d)
        diff += std::abs(y1->value.at(0, 0, d) - y0->value.at(0, 0, d));
    CHECK(diff > 1e-6);
}

TEST_CASE("arn block trains every sub-module") {
    Params P;
    Rng rng(5);
    nn::ArnBlock blk(P, "blk", 6, 6, rng);
    Var y = blk(ad::leaf(randn({5, 2, 6}, rng)));
    ad::backward(ad::sum(y));
    for (const auto& [name, v] : P.items()) {
        double g = 0.0;
        for (float gv : v->grad.data) g += std::abs(gv);
        INFO(name);
        CHECK(g > 0.0);
    }
}

TEST_CASE("se block gates each channel") {
    Params P;
    Rng rng(6);
    nn::SeBlock se(P, "se", 4, 2, rng);
    // zeroed excitation path -> sigmoid(0) = 0.5 on every channel
    set_value(P, "se.up.W", 0.f);
    set_value(P, "se.up.b", 0.f);
    Tensor x = randn({4, 9}, rng);
    Var y = se(ad::leaf(x));
    REQUIRE(y->value.shape == x.shape);
    for (size_t i = 0; i < x.data.size(); ++i)
        CHECK(y->value.data[i] == doctest::Approx(0.5f * x.data[i]).epsilon(1e-6));
}

TEST_CASE("res2net passes the first split through untouched") {
    Params P;
    Rng rng(7);
    nn::Res2NetBlock res(P, "res", 8, 3, 2, 4, rng);
    Tensor x = randn({8, 11}, rng);
    Var y = res(ad::leaf(x));
    REQUIRE(y->value.shape == x.shape);
    for (int c = 0; c < 2; ++c)  // width = 8 / 4 = 2
        for (int t = 0; t < 11; ++t)
            CHECK(y->value.at(c, t) == x.at(c, t));
    CHECK_THROWS_AS(nn::Res2NetBlock(P, "bad", 10, 3, 1, 4, rng), ValueError);
}

TEST_CASE("se-res2net residual rules") {
    Params P;
    Rng rng(8);
    CHECK_THROWS_AS(
        nn::SeRes2NetBlock(P, "bad", 6, 8, 3, 1, 4, 2, true, rng), ValueError);
    nn::SeRes2NetBlock blk(P, "blk", 8, 8, 3, 2, 4, 2, true, rng);
    Var y = blk(ad::leaf(randn({8, 7}, rng)));
    CHECK(y->value.shape == std::vector<int>{8, 7});
}

TEST_CASE("attentive stats pool with uniform attention") {
    Params P;
    Rng rng(9);
    nn::AttentiveStatsPool pool(P, "pool", 3, 2, rng);
    // constant scores -> softmax gives exactly uniform weights
    set_value(P, "pool.att2.W", 0.f);
    set_value(P, "pool.att2.b", 0.f);

    Tensor x = randn({3, 5}, rng);
    Var w;
    Var y = pool(ad::leaf(x), &w);
    REQUIRE(y->value.shape == std::vector<int>{6});
    double wsum = 0.0;
    for (float v : w->value.data) wsum += v;
    CHECK(wsum == doctest::Approx(1.0).epsilon(1e-6));

    for (int c = 0; c < 3; ++c) {
        double m = 0.0, m2 = 0.0;
        for (int t = 0; t < 5; ++t) {
            m += x.at(c, t) / 5.0;
            m2 += x.at(c, t) * x.at(c, t) / 5.0;
        }
        double sd = std::sqrt(std::max(0.0, m2 - m * m) + 1e-8);
        CHECK(y->value.at(c) == doctest::Approx(m).epsilon(1e-5));
        CHECK(y->value.at(3 + c) == doctest::Approx(sd).epsilon(1e-4));
    }
}

TEST_CASE("attentive stats pool on a single frame") {
    Params P;
    Rng rng(10);
    nn::AttentiveStatsPool pool(P, "pool", 4, 2, rng);
    Tensor x = randn({4, 1}, rng);
    Var y = pool(ad::leaf(x));
    for (int c = 0; c < 4; ++c) {
        CHECK(y->value.at(c) == doctest::Approx(x.at(c, 0)).epsilon(1e-6));
        CHECK(y->value.at(4 + c) == doctest::Approx(1e-4).epsilon(2e-3));
    }
    CHECK_THROWS_AS(pool(ad::leaf(Tensor::zeros({3, 1}))), ShapeError);
}

TEST_CASE("prelu and channel norm layers") {
    Params P;
    Rng rng(11);
    nn::PReluLayer act(P, "act", 2);
    Tensor x = Tensor::from({2, 3}, {-1.f, 2.f, -4.f, 1.f, -2.f, 0.5f});
    Var y = act(ad::leaf(x));
    CHECK(y->value.at(0, 0) == doctest::Approx(-0.25f));
    CHECK(y->value.at(0, 1) == doctest::Approx(2.f));
    CHECK(y->value.at(1, 1) == doctest::Approx(-0.5f));

    nn::ChannelNormLayer norm(P, "norm", 3);
    Tensor z = randn({3, 4, 5}, rng, 2.f);
    Var n = norm(ad::leaf(z));
    for (int c = 0; c < 3; ++c) {
        double m = 0.0, v = 0.0;
        for (int i = 0; i < 20; ++i) m += n->value.data[size_t(c * 20 + i)] / 20.0;
        for (int i = 0; i < 20; ++i) {
            double d = n->value.data[size_t(c * 20 + i)] - m;
            v += d * d / 20.0;
        }
        CHECK(m == doctest::Approx(0.0).epsilon(1e-4));
        CHECK(v == doctest::Approx(1.0).epsilon(1e-2));
    }
}

TEST_CASE("conv stack walks the frequency chain both ways") {
    Params P;
    Rng rng(12);
    std::vector<int> chain = {161, 80, 39, 19, 9, 4};
    Var x = ad::leaf(randn({2, 3, 161}, rng));
    for (size_t i = 0; i + 1 < chain.size(); ++i) {
        nn::Conv2dDownLayer down(P, "d" + std::to_string(i),
                                 x->value.dim(0), 2, rng);
        x = down(x);
        CHECK(x->value.dim(2) == chain[i + 1]);
    }
    for (size_t i = chain.size() - 1; i > 0; --i) {
        int want = chain[i - 1];
        int out_pad = want - ((x->value.dim(2) - 1) * 2 + 3);
        nn::ConvT2dUpLayer up(P, "u" + std::to_string(i),
                              x->value.dim(0), 2, out_pad, rng);
        x = up(x);
        CHECK(x->value.dim(2) == want);
    }
}

TEST_CASE("adam drives a quadratic to its minimum") {
    Params P;
    Rng rng(13);
    Var w = P.add("w", randn({4}, rng, 2.f));
    Tensor target = Tensor::from({4}, {1.f, -2.f, 0.5f, 3.f});
    nn::Adam opt(0.05);
    for (int it = 0; it < 400; ++it) {
        Var d = ad::sub(w, ad::constant(target));
        ad::backward(ad::sum(ad::square(d)));
        opt.step(P);
    }
    for (int i = 0; i < 4; ++i)
        CHECK(w->value.at(i) == doctest::Approx(target.at(i)).epsilon(1e-3));
    CHECK(opt.steps() == 400);
}

TEST_CASE("adam clips by global norm and clears grads") {
    Params P;
    Var w = P.add("w", Tensor::zeros({2}));
    ad::backward(ad::sum(ad::mul_const(w, Tensor::from({2}, {300.f, 400.f}))));
    nn::Adam opt(1e-3, 0.9, 0.999, 1e-8, 5.0);
    double before = w->value.at(0);
    opt.step(P);
    CHECK(opt.last_grad_norm() == doctest::Approx(500.0));
    CHECK(w->value.at(0) != before);
    CHECK(!w->has_grad);
    for (float g : w->grad.data) CHECK(g == 0.f);

    // optimizer state is keyed to the registered parameter list
    P.add("late", Tensor::zeros({1}));
    CHECK_THROWS_AS(opt.step(P), ValueError);
}
