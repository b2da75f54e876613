#include "hrtse/modules.hpp"

#include <cmath>

#include "hrtse/common.hpp"

namespace hrtse::nn {

Var Params::add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ValueError("duplicate parameter name: " + name);
    Var v = ad::leaf(std::move(init), true);
    v->name = name;
    index_[name] = items_.size();
    items_.emplace_back(name, v);
    return v;
}

Var Params::find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("unknown parameter: " + name);
    return items_[it->second].second;
}

bool Params::contains(const std::string& name) const {
    return index_.count(name) != 0;
}

int64_t Params::numel() const {
    int64_t n = 0;
    for (const auto& [_, v] : items_) n += v->value.numel();
    return n;
}

void Params::zero_grads() {
    for (auto& [_, v] : items_) v->zero_grad();
}

double Params::grad_norm() const {
    double acc = 0.0;
    for (const auto& [_, v] : items_) {
        if (!v->has_grad) continue;
        for (float g : v->grad.data) acc += double(g) * g;
    }
    return std::sqrt(acc);
}

uint64_t Params::value_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, v] : items_) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(v->value.data.data(), v->value.data.size() * sizeof(float), h);
    }
    return h;
}

Tensor init_uniform(Rng& rng, std::vector<int> shape, int fan_in) {
    if (fan_in <= 0) throw ValueError("init_uniform: fan_in must be positive");
    double bound = 1.0 / std::sqrt(double(fan_in));
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = float(rng.uniform(-bound, bound));
    return t;
}

// ---- layers -------------------------------------------------------------

Linear::Linear(Params& P, const std::string& name, int in, int out, Rng& rng,
               bool bias) {
    W = P.add(name + ".W", init_uniform(rng, {in, out}, in));
    if (bias) b = P.add(name + ".b", Tensor::zeros({out}));
}

Var Linear::operator()(const Var& x) const {
    Var y = ad::matmul(x, W);
    return b ? ad::add_bias(y, b) : y;
}

Conv1dLayer::Conv1dLayer(Params& P, const std::string& name, int cin, int cout,
                         int k, int dilation_, Rng& rng)
    : dilation(dilation_) {
    W = P.add(name + ".W", init_uniform(rng, {cout, cin, k}, cin * k));
    b = P.add(name + ".b", Tensor::zeros({cout}));
}

Var Conv1dLayer::operator()(const Var& x) const {
    return ad::conv1d(x, W, b, dilation);
}

Conv2dDownLayer::Conv2dDownLayer(Params& P, const std::string& name, int cin,
                                 int cout, Rng& rng) {
    W = P.add(name + ".W", init_uniform(rng, {cout, cin, 3, 3}, cin * 9));
    b = P.add(name + ".b", Tensor::zeros({cout}));
}

Var Conv2dDownLayer::operator()(const Var& x) const {
    return ad::conv2d_down(x, W, b);
}

ConvT2dUpLayer::ConvT2dUpLayer(Params& P, const std::string& name, int cin,
                               int cout, int out_pad_, Rng& rng)
    : out_pad(out_pad_) {
    W = P.add(name + ".W", init_uniform(rng, {cin, cout, 3, 3}, cin * 9));
    b = P.add(name + ".b", Tensor::zeros({cout}));
}

Var ConvT2dUpLayer::operator()(const Var& x) const {
    return ad::conv_transpose2d_up(x, W, b, out_pad);
}

BiLstm::BiLstm(Params& P, const std::string& name, int input, int hidden_,
               Rng& rng)
    : hidden(hidden_) {
    auto bias_with_forget_one = [&] {
        Tensor b = Tensor::zeros({4 * hidden});
        for (int i = hidden; i < 2 * hidden; ++i) b.at(i) = 1.0f;  // forget gate
        return b;
    };
    wx_f = P.add(name + ".fwd.wx", init_uniform(rng, {input, 4 * hidden}, input));
    wh_f = P.add(name + ".fwd.wh", init_uniform(rng, {hidden, 4 * hidden}, hidden));
    b_f = P.add(name + ".fwd.b", bias_with_forget_one());
    wx_b = P.add(name + ".bwd.wx", init_uniform(rng, {input, 4 * hidden}, input));
    wh_b = P.add(name + ".bwd.wh", init_uniform(rng, {hidden, 4 * hidden}, hidden));
    b_b = P.add(name + ".bwd.b", bias_with_forget_one());
}

Var BiLstm::operator()(const Var& x) const {
    Var f = ad::lstm(x, wx_f, wh_f, b_f, false);
    Var r = ad::lstm(x, wx_b, wh_b, b_b, true);
    return ad::concat({f, r}, 2);
}

LayerNormLayer::LayerNormLayer(Params& P, const std::string& name, int dim) {
    gamma = P.add(name + ".gamma", Tensor::full({dim}, 1.0f));
    beta = P.add(name + ".beta", Tensor::zeros({dim}));
}

Var LayerNormLayer::operator()(const Var& x) const {
    return ad::layernorm_lastdim(x, gamma, beta);
}

ChannelNormLayer::ChannelNormLayer(Params& P, const std::string& name,
                                   int channels) {
    gamma = P.add(name + ".gamma", Tensor::full({channels}, 1.0f));
    beta = P.add(name + ".beta", Tensor::zeros({channels}));
}

Var ChannelNormLayer::operator()(const Var& x) const {
    return ad::channel_norm(x, gamma, beta);
}

PReluLayer::PReluLayer(Params& P, const std::string& name, int channels) {
    alpha = P.add(name + ".alpha", Tensor::full({channels}, 0.25f));
}

Var PReluLayer::operator()(const Var& x) const { return ad::prelu(x, alpha); }

// ---- attentive recurrent block ------------------------------------------

ArnBlock::ArnBlock(Params& P, const std::string& name, int input_dim_,
                   int hidden_, Rng& rng)
    : input_dim(input_dim_), hidden(hidden_) {
    rnn = BiLstm(P, name + ".rnn", input_dim, hidden, rng);
    rnn_proj = Linear(P, name + ".rnn_proj", 2 * hidden, hidden, rng);
    ln_rnn = LayerNormLayer(P, name + ".ln_rnn", hidden);
    wq = Linear(P, name + ".wq", hidden, hidden, rng);
    wk = Linear(P, name + ".wk", hidden, hidden, rng);
    wv = Linear(P, name + ".wv", hidden, hidden, rng);
    ln_att = LayerNormLayer(P, name + ".ln_att", hidden);
    ff1 = Linear(P, name + ".ff1", hidden, 4 * hidden, rng);
    ff2 = Linear(P, name + ".ff2", 4 * hidden, hidden, rng);
    ln_ff = LayerNormLayer(P, name + ".ln_ff", hidden);
}

Var ArnBlock::operator()(const Var& x) const {
    if (x->value.ndim() != 3 || x->value.dim(2) != input_dim)
        throw ShapeError("ArnBlock: expected [S, B, " + std::to_string(input_dim) +
                         "], got " + x->value.shape_str());
    int S = x->value.dim(0), B = x->value.dim(1);
    int H = hidden;

    Var r = rnn_proj(ad::reshape(rnn(x), {S * B, 2 * H}));
    Var h3 = ad::reshape(r, {S, B, H});
    if (input_dim == H) h3 = ad::add(x, h3);
    h3 = ln_rnn(h3);

    // single-head scaled dot-product attention over the sequence axis
    Var hb = ad::permute3(h3, 1, 0, 2);  // [B, S, H]
    Var h2 = ad::reshape(hb, {B * S, H});
    Var q = ad::reshape(wq(h2), {B, S, H});
    Var k = ad::reshape(wk(h2), {B, S, H});
    Var v = ad::reshape(wv(h2), {B, S, H});
    Var scores = ad::scale(ad::bmm(q, ad::permute3(k, 0, 2, 1)),
                           1.0 / std::sqrt(double(H)));
    Var ctx = ad::bmm(ad::softmax_lastdim(scores), v);  // [B, S, H]
    h3 = ln_att(ad::add(h3, ad::permute3(ctx, 1, 0, 2)));

    Var f = ff2(ad::relu(ff1(ad::reshape(h3, {S * B, H}))));
    return ln_ff(ad::add(h3, ad::reshape(f, {S, B, H})));
}

// ---- speaker-encoder blocks ---------------------------------------------

SeBlock::SeBlock(Params& P, const std::string& name, int channels_,
                 int se_channels, Rng& rng)
    : channels(channels_) {
    down = Linear(P, name + ".down", channels, se_channels, rng);
    up = Linear(P, name + ".up", se_channels, channels, rng);
}

Var SeBlock::operator()(const Var& x) const {
    Var m = ad::reshape(ad::mean_axis(x, 1), {1, channels});
    Var s = ad::sigmoid(up(ad::relu(down(m))));
    return ad::colwise_mul(x, ad::reshape(s, {channels}));
}

TdnnBlock::TdnnBlock(Params& P, const std::string& name, int cin, int cout,
                     int k, int dilation, Rng& rng) {
    conv = Conv1dLayer(P, name + ".conv", cin, cout, k, dilation, rng);
    norm = ChannelNormLayer(P, name + ".norm", cout);
}

Var TdnnBlock::operator()(const Var& x) const { return norm(ad::relu(conv(x))); }

Res2NetBlock::Res2NetBlock(Params& P, const std::string& name, int channels,
                           int k, int dilation, int scale_, Rng& rng)
    : scale(scale_) {
    if (channels % scale != 0)
        throw ValueError("Res2NetBlock: channels not divisible by scale");
    width = channels / scale;
    for (int i = 0; i < scale - 1; ++i)
        blocks.emplace_back(P, name + ".b" + std::to_string(i), width, width, k,
                            dilation, rng);
}

Var Res2NetBlock::operator()(const Var& x) const {
    std::vector<Var> ys;
    Var prev;
    for (int i = 0; i < scale; ++i) {
        Var xi = ad::slice(x, 0, i * width, width);
        if (i == 0) prev = xi;
        else if (i == 1) prev = blocks[0](xi);
        else prev = blocks[size_t(i - 1)](ad::add(xi, prev));
        ys.push_back(prev);
    }
    return ad::concat(ys, 0);
}

SeRes2NetBlock::SeRes2NetBlock(Params& P, const std::string& name, int cin,
                               int channels, int k, int dilation, int scale,
                               int se_channels, bool residual_, Rng& rng)
    : residual(residual_) {
    if (residual && cin != channels)
        throw ValueError("SeRes2NetBlock: residual requires matching channels");
    in1x1 = TdnnBlock(P, name + ".in1x1", cin, channels, 1, 1, rng);
    res = Res2NetBlock(P, name + ".res2net", channels, k, dilation, scale, rng);
    out1x1 = TdnnBlock(P, name + ".out1x1", channels, channels, 1, 1, rng);
    se = SeBlock(P, name + ".se", channels, se_channels, rng);
}

Var SeRes2NetBlock::operator()(const Var& x) const {
    Var h = se(out1x1(res(in1x1(x))));
    return residual ? ad::add(h, x) : h;
}

AttentiveStatsPool::AttentiveStatsPool(Params& P, const std::string& name,
                                       int channels_, int bottleneck, Rng& rng)
    : channels(channels_) {
    att1 = Linear(P, name + ".att1", channels, bottleneck, rng);
    att2 = Linear(P, name + ".att2", bottleneck, 1, rng);
}

Var AttentiveStatsPool::operator()(const Var& x, Var* att_weights) const {
    if (x->value.ndim() != 2 || x->value.dim(0) != channels)
        throw ShapeError("AttentiveStatsPool: expected [" +
                         std::to_string(channels) + ", T]");
    if (x->value.dim(1) < 1) throw ValueError("AttentiveStatsPool: empty input");
    Var s = att2(ad::tanh_(att1(ad::transpose(x))));       // [T, 1]
    Var w = ad::softmax_lastdim(ad::transpose(s));          // [1, T]
    if (att_weights) *att_weights = w;
    Var wt = ad::transpose(w);                              // [T, 1]
    Var mean = ad::matmul(x, wt);                           // [C, 1]
    Var m2 = ad::matmul(ad::square(x), wt);
    Var sd = ad::sqrt_(ad::add_scalar(ad::relu(ad::sub(m2, ad::square(mean))),
                                      1e-8));
    return ad::reshape(ad::concat({mean, sd}, 0), {2 * channels});
}

// ---- optimizer ------------------------------------------------------------

Adam::Adam(double lr, double beta1, double beta2, double eps, double clip_norm)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), clip_(clip_norm) {}

void Adam::step(Params& params) {
    const auto& items = params.items();
    if (m_.empty()) {
        m_.resize(items.size());
        v_.resize(items.size());
        for (size_t i = 0; i < items.size(); ++i) {
            m_[i].assign(items[i].second->value.data.size(), 0.0f);
            v_[i].assign(items[i].second->value.data.size(), 0.0f);
        }
    }
    if (m_.size() != items.size())
        throw ValueError("Adam: parameter list changed between steps");

    last_norm_ = params.grad_norm();
    double f = (clip_ > 0.0 && last_norm_ > clip_) ? clip_ / last_norm_ : 1.0;
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, double(t_));
    double bc2 = 1.0 - std::pow(beta2_, double(t_));

    for (size_t i = 0; i < items.size(); ++i) {
        auto& p = items[i].second;
        if (!p->has_grad) continue;
        float* w = p->value.data.data();
        const float* g = p->grad.data.data();
        for (size_t k = 0; k < p->value.data.size(); ++k) {
            double gk = double(g[k]) * f;
            double m = beta1_ * m_[i][k] + (1.0 - beta1_) * gk;
            double v = beta2_ * v_[i][k] + (1.0 - beta2_) * gk * gk;
            m_[i][k] = float(m);
            v_[i][k] = float(v);
            w[k] -= float(lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_));
        }
        p->zero_grad();
    }
}

}  // namespace hrtse::nn
