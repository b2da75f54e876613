#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "hrtse/autodiff.hpp"
#include "hrtse/rng.hpp"

using namespace hrtse;
using ad::Var;

namespace {

Tensor randn(std::vector<int> shape, Rng& rng, float sc = 0.5f) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = sc * rng.normalf();
    return t;
}

// Keeps values away from zero so kinked ops (relu/prelu) stay differentiable
// along the probe direction.
Tensor randn_offz(std::vector<int> shape, Rng& rng) {
    Tensor t = randn(std::move(shape), rng);
    for (auto& v : t.data) v += v >= 0.0f ? 0.2f : -0.2f;
    return t;
}

using Builder = std::function<Var(const std::vector<Var>&)>;

// loss = sum(out * R) for fixed random R; compares analytic directional
// derivatives against central finite differences for every input.
void gradcheck(const char* name, const Builder& fn, std::vector<Tensor> inputs,
               double h = 5e-3) {
    INFO("gradcheck: " << name);
    Rng rng(fnv1a64(name, std::strlen(name)));

    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(ad::leaf(t, true));
    Var out = fn(vars);
    Tensor R = randn(out->value.shape, rng, 1.0f);
    for (auto& v : R.data) v /= float(out->value.numel());
    Var loss = ad::sum(ad::mul_const(out, R));
    double base = loss->value.at(0);
    ad::backward(loss);

    auto eval = [&](const std::vector<Tensor>& xs) {
        ad::NoGradGuard ng;
        std::vector<Var> vs;
        for (const auto& t : xs) vs.push_back(ad::leaf(t, false));
        Var o = fn(vs);
        double acc = 0.0;
        for (size_t i = 0; i < o->value.data.size(); ++i)
            acc += double(o->value.data[i]) * R.data[i];
        return acc;
    };
    (void)base;

    for (size_t i = 0; i < inputs.size(); ++i) {
        REQUIRE(vars[i]->has_grad);
        for (int probe = 0; probe < 2; ++probe) {
            Tensor dir = randn(inputs[i].shape, rng, 1.0f);
            double analytic = 0.0;
            for (size_t k = 0; k < dir.data.size(); ++k)
                analytic += double(vars[i]->grad.data[k]) * dir.data[k];

            std::vector<Tensor> plus = inputs, minus = inputs;
            for (size_t k = 0; k < dir.data.size(); ++k) {
                plus[i].data[k] += float(h) * dir.data[k];
                minus[i].data[k] -= float(h) * dir.data[k];
            }
            double numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            INFO("input " << i << " probe " << probe << " analytic " << analytic
                          << " numeric " << numeric);
            CHECK(std::fabs(analytic - numeric) <=
                  3e-3 + 2e-2 * std::max(std::fabs(analytic), std::fabs(numeric)));
        }
    }
}

}  // namespace

TEST_CASE("elementwise and broadcast op gradients") {
    Rng rng(1);
    gradcheck("add", [](const std::vector<Var>& v) { return ad::add(v[0], v[1]); },
              {randn({3, 4}, rng), randn({3, 4}, rng)});
    gradcheck("sub", [](const std::vector<Var>& v) { return ad::sub(v[0], v[1]); },
              {randn({3, 4}, rng), randn({3, 4}, rng)});
    gradcheck("mul", [](const std::vector<Var>& v) { return ad::mul(v[0], v[1]); },
              {randn({3, 4}, rng), randn({3, 4}, rng)});
    gradcheck("scale",
              [](const std::vector<Var>& v) { return ad::scale(v[0], -2.5); },
              {randn({5}, rng)});
    gradcheck("add_bias",
              [](const std::vector<Var>& v) { return ad::add_bias(v[0], v[1]); },
              {randn({6, 3}, rng), randn({3}, rng)});
    gradcheck(
        "rowwise_mul",
        [](const std::vector<Var>& v) { return ad::rowwise_mul(v[0], v[1]); },
        {randn({6, 3}, rng), randn({3}, rng)});
    gradcheck(
        "colwise_mul",
        [](const std::vector<Var>& v) { return ad::colwise_mul(v[0], v[1]); },
        {randn({3, 4, 2}, rng), randn({3}, rng)});
}

TEST_CASE("shape op gradients and values") {
    Rng rng(2);
    gradcheck("reshape",
              [](const std::vector<Var>& v) { return ad::reshape(v[0], {2, 6}); },
              {randn({3, 4}, rng)});
    gradcheck("transpose",
              [](const std::vector<Var>& v) { return ad::transpose(v[0]); },
              {randn({3, 5}, rng)});
    gradcheck(
        "permute3",
        [](const std::vector<Var>& v) { return ad::permute3(v[0], 1, 0, 2); },
        {randn({2, 3, 4}, rng)});
    gradcheck("concat0",
              [](const std::vector<Var>& v) { return ad::concat({v[0], v[1]}, 0); },
              {randn({2, 3, 2}, rng), randn({4, 3, 2}, rng)});
    gradcheck("concat2",
              [](const std::vector<Var>& v) { return ad::concat({v[0], v[1]}, 2); },
              {randn({2, 3, 2}, rng), randn({2, 3, 5}, rng)});
    gradcheck(
        "slice",
        [](const std::vector<Var>& v) { return ad::slice(v[0], 1, 1, 2); },
        {randn({3, 5, 2}, rng)});
    gradcheck("tile_time3",
              [](const std::vector<Var>& v) { return ad::tile_time3(v[0], 4); },
              {randn({3, 5}, rng)});

    // value checks
    Var a = ad::leaf(Tensor::from({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7}));
    Var p = ad::permute3(a, 1, 0, 2);  // out(j,i,k) = in(i,j,k)
    CHECK(p->value.at(0, 1, 0) == 4.0f);
    CHECK(p->value.at(1, 0, 1) == 3.0f);
    Var t = ad::tile_time3(ad::leaf(Tensor::from({1, 2}, {5, 6})), 3);
    CHECK(t->value.shape == std::vector<int>{1, 3, 2});
    CHECK(t->value.at(0, 2, 1) == 6.0f);
    Var c = ad::concat({ad::leaf(Tensor::from({1, 2}, {1, 2})),
                        ad::leaf(Tensor::from({1, 3}, {3, 4, 5}))},
                       1);
    CHECK(c->value.data == FloatVec{1, 2, 3, 4, 5});
    Var s = ad::slice(c, 1, 1, 3);
    CHECK(s->value.data == FloatVec{2, 3, 4});
}

TEST_CASE("reduction gradients") {
    Rng rng(3);
    gradcheck("sum", [](const std::vector<Var>& v) { return ad::sum(v[0]); },
              {randn({3, 4}, rng)});
    gradcheck("mean", [](const std::vector<Var>& v) { return ad::mean(v[0]); },
              {randn({7}, rng)});
    gradcheck("sum_axis1",
              [](const std::vector<Var>& v) { return ad::sum_axis(v[0], 1); },
              {randn({3, 4, 2}, rng)});
    gradcheck("mean_axis0",
              [](const std::vector<Var>& v) { return ad::mean_axis(v[0], 0); },
              {randn({3, 4}, rng)});
}

TEST_CASE("nonlinearity gradients") {
    Rng rng(4);
    gradcheck("relu", [](const std::vector<Var>& v) { return ad::relu(v[0]); },
              {randn_offz({4, 5}, rng)});
    gradcheck("sigmoid",
              [](const std::vector<Var>& v) { return ad::sigmoid(v[0]); },
              {randn({4, 5}, rng)});
    gradcheck("tanh", [](const std::vector<Var>& v) { return ad::tanh_(v[0]); },
              {randn({4, 5}, rng)});
    gradcheck("square",
              [](const std::vector<Var>& v) { return ad::square(v[0]); },
              {randn({4, 5}, rng)});
    gradcheck(
        "sqrt",
        [](const std::vector<Var>& v) {
            return ad::sqrt_(ad::add_scalar(ad::square(v[0]), 0.5));
        },
        {randn({4, 5}, rng)});
    gradcheck(
        "pow_const",
        [](const std::vector<Var>& v) {
            return ad::pow_const(ad::add_scalar(ad::square(v[0]), 0.5), 0.3);
        },
        {randn({4, 5}, rng)});
    gradcheck(
        "log",
        [](const std::vector<Var>& v) {
            return ad::log_(ad::add_scalar(ad::square(v[0]), 0.5));
        },
        {randn({3, 3}, rng)});
    gradcheck("softmax",
              [](const std::vector<Var>& v) { return ad::softmax_lastdim(v[0]); },
              {randn({3, 6}, rng, 1.5f)});
    gradcheck("prelu",
              [](const std::vector<Var>& v) { return ad::prelu(v[0], v[1]); },
              {randn_offz({3, 4, 2}, rng), randn({3}, rng)});
    gradcheck(
        "l2norm",
        [](const std::vector<Var>& v) { return ad::l2_normalize_rows(v[0]); },
        {randn({3, 6}, rng)});

    Var sm = ad::softmax_lastdim(ad::leaf(randn({4, 7}, rng, 2.0f)));
    for (int r = 0; r < 4; ++r) {
        float acc = 0.0f;
        for (int c = 0; c < 7; ++c) acc += sm->value.at(r, c);
        CHECK(acc == doctest::Approx(1.0f));
    }
    Var nm = ad::l2_normalize_rows(ad::leaf(randn({3, 5}, rng)));
    for (int r = 0; r < 3; ++r) {
        double acc = 0.0;
        for (int c = 0; c < 5; ++c) acc += double(nm->value.at(r, c)) * nm->value.at(r, c);
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("matmul family gradients") {
    Rng rng(5);
    gradcheck("matmul",
              [](const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); },
              {randn({3, 4}, rng), randn({4, 5}, rng)});
    Tensor c = randn({4, 5}, rng);
    gradcheck(
        "matmul_const",
        [c](const std::vector<Var>& v) { return ad::matmul_const(v[0], c); },
        {randn({3, 4}, rng)});
    gradcheck("bmm", [](const std::vector<Var>& v) { return ad::bmm(v[0], v[1]); },
              {randn({2, 3, 4}, rng), randn({2, 4, 5}, rng)});
}

TEST_CASE("normalization gradients and statistics") {
    Rng rng(6);
    gradcheck(
        "layernorm",
        [](const std::vector<Var>& v) {
            return ad::layernorm_lastdim(v[0], v[1], v[2]);
        },
        {randn({4, 6}, rng, 1.2f), randn({6}, rng), randn({6}, rng)});
    gradcheck(
        "channel_norm",
        [](const std::vector<Var>& v) { return ad::channel_norm(v[0], v[1], v[2]); },
        {randn({3, 4, 5}, rng, 1.2f), randn({3}, rng), randn({3}, rng)});

    // with unit gamma / zero beta the normalized rows have mean 0, var 1
    Var x = ad::leaf(randn({3, 4, 5}, rng, 2.0f));
    Var g = ad::leaf(Tensor::full({3}, 1.0f));
    Var b = ad::leaf(Tensor::zeros({3}));
    Var y = ad::channel_norm(x, g, b);
    for (int c = 0; c < 3; ++c) {
        double mu = 0.0, var = 0.0;
        for (int i = 0; i < 20; ++i) mu += y->value.data[size_t(c) * 20 + i];
        mu /= 20;
        for (int i = 0; i < 20; ++i) {
            double d = y->value.data[size_t(c) * 20 + i] - mu;
            var += d * d;
        }
        var /= 20;
        CHECK(mu == doctest::Approx(0.0).epsilon(1e-4));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-2));
    }
}

TEST_CASE("lstm forward matches a scalar reference and gradients check out") {
    Rng rng(7);
    // Scalar reference at S=2, B=1, I=1, H=1.
    Tensor x = randn({2, 1, 1}, rng);
    Tensor wx = randn({1, 4}, rng);
    Tensor wh = randn({1, 4}, rng);
    Tensor b = randn({4}, rng);
    Var h = ad::lstm(ad::leaf(x), ad::leaf(wx), ad::leaf(wh), ad::leaf(b), false);

    auto sg = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    double hp = 0.0, cp = 0.0;
    for (int t = 0; t < 2; ++t) {
        double xi = x.at(t, 0, 0);
        double zi = xi * wx.at(0, 0) + hp * wh.at(0, 0) + b.at(0);
        double zf = xi * wx.at(0, 1) + hp * wh.at(0, 1) + b.at(1);
        double zg = xi * wx.at(0, 2) + hp * wh.at(0, 2) + b.at(2);
        double zo = xi * wx.at(0, 3) + hp * wh.at(0, 3) + b.at(3);
        cp = sg(zf) * cp + sg(zi) * std::tanh(zg);
        hp = sg(zo) * std::tanh(cp);
        CHECK(h->value.at(t, 0, 0) == doctest::Approx(hp).epsilon(1e-4));
    }

    gradcheck(
        "lstm_fwd",
        [](const std::vector<Var>& v) {
            return ad::lstm(v[0], v[1], v[2], v[3], false);
        },
        {randn({4, 2, 3}, rng), randn({3, 20}, rng), randn({5, 20}, rng),
         randn({20}, rng)});
    gradcheck(
        "lstm_rev",
        [](const std::vector<Var>& v) {
            return ad::lstm(v[0], v[1], v[2], v[3], true);
        },
        {randn({4, 2, 3}, rng), randn({3, 20}, rng), randn({5, 20}, rng),
         randn({20}, rng)});

    // reversed lstm on a reversed input equals reversing the forward output
    Tensor xs = randn({5, 1, 3}, rng);
    Tensor xr = xs;
    for (int s = 0; s < 5; ++s)
        for (int i = 0; i < 3; ++i) xr.at(s, 0, i) = xs.at(4 - s, 0, i);
    Tensor wx2 = randn({3, 16}, rng), wh2 = randn({4, 16}, rng), b2 = randn({16}, rng);
    Var hf = ad::lstm(ad::leaf(xs), ad::leaf(wx2), ad::leaf(wh2), ad::leaf(b2), false);
    Var hr = ad::lstm(ad::leaf(xr), ad::leaf(wx2), ad::leaf(wh2), ad::leaf(b2), true);
    for (int s = 0; s < 5; ++s)
        for (int k = 0; k < 4; ++k)
            CHECK(hf->value.at(s, 0, k) ==
                  doctest::Approx(hr->value.at(4 - s, 0, k)).epsilon(1e-4));
}

TEST_CASE("conv1d matches a naive loop") {
    Rng rng(8);
    int Cin = 3, Cout = 2, T = 7, K = 3, dil = 2;
    Tensor x = randn({Cin, T}, rng), w = randn({Cout, Cin, K}, rng),
           b = randn({Cout}, rng);
    Var out = ad::conv1d(ad::leaf(x), ad::leaf(w), ad::leaf(b), dil);
    REQUIRE(out->value.shape == std::vector<int>{Cout, T});
    int pad = dil * (K - 1) / 2;
    for (int co = 0; co < Cout; ++co)
        for (int t = 0; t < T; ++t) {
            double acc = b.at(co);
            for (int ci = 0; ci < Cin; ++ci)
                for (int k = 0; k < K; ++k) {
                    int ts = t + k * dil - pad;
                    if (ts >= 0 && ts < T)
                        acc += double(w.at(co, ci, k)) * x.at(ci, ts);
                }
            CHECK(out->value.at(co, t) == doctest::Approx(acc).epsilon(1e-4));
        }
    gradcheck(
        "conv1d",
        [](const std::vector<Var>& v) { return ad::conv1d(v[0], v[1], v[2], 2); },
        {randn({3, 7}, rng), randn({2, 3, 3}, rng), randn({2}, rng)});
}

TEST_CASE("conv2d_down matches a naive loop and halves the frequency axis") {
    Rng rng(9);
    int Cin = 2, Cout = 3, T = 4, F = 9;
    Tensor x = randn({Cin, T, F}, rng), w = randn({Cout, Cin, 3, 3}, rng),
           b = randn({Cout}, rng);
    Var out = ad::conv2d_down(ad::leaf(x), ad::leaf(w), ad::leaf(b));
    int Fout = (F - 3) / 2 + 1;
    REQUIRE(out->value.shape == std::vector<int>{Cout, T, Fout});
    for (int co = 0; co < Cout; ++co)
        for (int t = 0; t < T; ++t)
            for (int f = 0; f < Fout; ++f) {
                double acc = b.at(co);
                for (int ci = 0; ci < Cin; ++ci)
                    for (int kt = 0; kt < 3; ++kt)
                        for (int kf = 0; kf < 3; ++kf) {
                            int ts = t + kt - 1, fs = 2 * f + kf;
                            if (ts >= 0 && ts < T)
                                acc += double(w.at(co, ci, kt, kf)) * x.at(ci, ts, fs);
                        }
                CHECK(out->value.at(co, t, f) == doctest::Approx(acc).epsilon(1e-4));
            }
    gradcheck(
        "conv2d_down",
        [](const std::vector<Var>& v) { return ad::conv2d_down(v[0], v[1], v[2]); },
        {randn({2, 4, 9}, rng), randn({3, 2, 3, 3}, rng), randn({3}, rng)});
}

TEST_CASE("conv_transpose2d_up matches a naive loop and doubles frequency") {
    Rng rng(10);
    int Cin = 3, Cout = 2, T = 4, F = 5;
    for (int op : {0, 1}) {
        Tensor x = randn({Cin, T, F}, rng), w = randn({Cin, Cout, 3, 3}, rng),
               b = randn({Cout}, rng);
        Var out = ad::conv_transpose2d_up(ad::leaf(x), ad::leaf(w), ad::leaf(b), op);
        int Fout = (F - 1) * 2 + 3 + op;
        REQUIRE(out->value.shape == std::vector<int>{Cout, T, Fout});
        Tensor ref = Tensor::zeros({Cout, T, Fout});
        for (int ci = 0; ci < Cin; ++ci)
            for (int t = 0; t < T; ++t)
                for (int f = 0; f < F; ++f)
                    for (int co = 0; co < Cout; ++co)
                        for (int kt = 0; kt < 3; ++kt)
                            for (int kf = 0; kf < 3; ++kf) {
                                int to = t + kt - 1, fo = 2 * f + kf;
                                if (to >= 0 && to < T)
                                    ref.at(co, to, fo) +=
                                        w.at(ci, co, kt, kf) * x.at(ci, t, f);
                            }
        for (int co = 0; co < Cout; ++co)
            for (int t = 0; t < T; ++t)
                for (int f = 0; f < Fout; ++f)
                    CHECK(out->value.at(co, t, f) ==
                          doctest::Approx(ref.at(co, t, f) + b.at(co)).epsilon(1e-3));
    }
    // frequency chain of the decoder: 39 -> 80 needs out_pad 1
    CHECK((39 - 1) * 2 + 3 + 1 == 80);
    gradcheck(
        "convT2d",
        [](const std::vector<Var>& v) {
            return ad::conv_transpose2d_up(v[0], v[1], v[2], 1);
        },
        {randn({3, 4, 5}, rng), randn({3, 2, 3, 3}, rng), randn({2}, rng)});
}

TEST_CASE("framing ops are adjoint and gradcheck") {
    Rng rng(11);
    gradcheck(
        "gather_frames",
        [](const std::vector<Var>& v) { return ad::gather_frames(v[0], 6, 3); },
        {randn({21}, rng)});
    gradcheck(
        "overlap_add",
        [](const std::vector<Var>& v) { return ad::overlap_add(v[0], 3, 20); },
        {randn({5, 6}, rng)});
    Var x = ad::leaf(randn({12}, rng));
    Var fr = ad::gather_frames(x, 4, 2);
    CHECK(fr->value.shape == std::vector<int>{5, 4});
    CHECK(fr->value.at(2, 1) == x->value.at(5));
}

TEST_CASE("cross entropy matches log softmax and backs propagates") {
    Rng rng(12);
    Tensor logits = randn({3, 5}, rng, 1.5f);
    std::vector<int> targets{1, 4, 0};
    Var ce = ad::cross_entropy_rows(ad::leaf(logits), targets);
    double ref = 0.0;
    for (int r = 0; r < 3; ++r) {
        double z = 0.0, m = -1e30;
        for (int c = 0; c < 5; ++c) m = std::max(m, double(logits.at(r, c)));
        for (int c = 0; c < 5; ++c) z += std::exp(double(logits.at(r, c)) - m);
        ref -= double(logits.at(r, targets[size_t(r)])) - m - std::log(z);
    }
    ref /= 3;
    CHECK(ce->value.at(0) == doctest::Approx(ref).epsilon(1e-4));
    gradcheck(
        "cross_entropy",
        [targets](const std::vector<Var>& v) {
            return ad::cross_entropy_rows(v[0], targets);
        },
        {randn({3, 5}, rng, 1.5f)});
}

TEST_CASE("graphs are torn down without leaking nodes") {
    int64_t before = ad::live_nodes();
    {
        Rng rng(13);
        Var x = ad::leaf(randn({4, 4}, rng), true);
        Var y = x;
        for (int i = 0; i < 200; ++i) y = ad::tanh_(ad::add(y, x));
        Var loss = ad::sum(y);
        ad::backward(loss);
        CHECK(x->has_grad);
    }
    CHECK(ad::live_nodes() == before);

    // inference mode builds value-only nodes
    {
        ad::NoGradGuard ng;
        Rng rng(14);
        Var x = ad::leaf(randn({4, 4}, rng), true);
        Var y = ad::tanh_(x);
        CHECK(!y->requires_grad);
    }
}

TEST_CASE("backward rejects non-scalar roots and accumulates across reuse") {
    Rng rng(15);
    Var x = ad::leaf(randn({3}, rng), true);
    Var y = ad::add(x, x);  // dy/dx = 2
    CHECK_THROWS_AS(ad::backward(y), ShapeError);
    Var s = ad::sum(y);
    ad::backward(s);
    for (int i = 0; i < 3; ++i) CHECK(x->grad.at(i) == doctest::Approx(2.0f));
}
