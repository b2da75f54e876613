#include "hrtse/separator.hpp"

#include <cmath>

#include "hrtse/common.hpp"

namespace hrtse {

FusionMode fusion_mode_from_string(const std::string& s) {
    if (s == "local") return FusionMode::local;
    if (s == "global") return FusionMode::global;
    if (s == "hr") return FusionMode::hr;
    throw ConfigError("unknown fusion mode: " + s + " (want local|global|hr)");
}

std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::local: return "local";
        case FusionMode::global: return "global";
        default: return "hr";
    }
}

SeparatorConfig SeparatorConfig::full() { return SeparatorConfig{}; }

SeparatorConfig SeparatorConfig::desk() {
    SeparatorConfig c;
    c.enc_channels = {4, 8, 16, 32, 64};
    c.local_channels = {4, 8, 16, 32};
    c.profile = "desk";
    return c;
}

void SeparatorConfig::validate() const {
    if (enc_channels.size() != 5 || local_channels.size() != 4)
        throw ConfigError("separator config: need 5 encoder / 4 local channel sizes");
    for (int k = 0; k < 4; ++k)
        if (local_channels[size_t(k)] != enc_channels[size_t(k)])
            throw ConfigError(
                "separator config: local channels must match encoder channels "
                "so concatenation doubles them");
    if (input_channels != 3 && input_channels != 4)
        throw ConfigError("separator config: input_channels must be 3 or 4");
    if (local_input_channels != 2 && local_input_channels != 4)
        throw ConfigError("separator config: local_input_channels must be 2 or 4");
    if (df_time_taps < 1 || df_freq_taps < 1)
        throw ConfigError("separator config: filter taps must be positive");
    if (arn_blocks < 1) throw ConfigError("separator config: arn_blocks >= 1");
    int f = bins;
    for (int k = 0; k < 5; ++k) {
        if (f < 3) throw ConfigError("separator config: too few bins");
        f = (f - 3) / 2 + 1;
    }
}

std::vector<int> SeparatorConfig::freq_chain() const {
    std::vector<int> chain{bins};
    for (int k = 0; k < 5; ++k)
        chain.push_back((chain.back() - 3) / 2 + 1);
    return chain;
}

namespace {

Tensor magnitude_of(const ComplexSpectrogram& s) {
    Tensor m = Tensor::zeros({s.frames, s.bins});
    for (size_t i = 0; i < m.data.size(); ++i)
        m.data[i] = std::sqrt(s.re[i] * s.re[i] + s.im[i] * s.im[i]);
    return m;
}

Tensor plane_of(const std::vector<float>& v, int T, int F) {
    Tensor t = Tensor::zeros({T, F});
    t.data.assign(v.begin(), v.end());
    return t;
}

}  // namespace

// ---- local feature net ------------------------------------------------

LocalNet::LocalNet(nn::Params& P, const SeparatorConfig& cfg, Rng& rng)
    : cfg_(cfg) {
    frame_arn_ = nn::ArnBlock(P, "local.arn", 1, cfg.frame_arn_hidden, rng);
    frame_out_ = nn::Linear(P, "local.arn_out", cfg.frame_arn_hidden, 1, rng);
    int cin = cfg.local_input_channels;
    for (int k = 0; k < 4; ++k) {
        int cout = cfg.local_channels[size_t(k)];
        std::string nm = "local.conv" + std::to_string(k + 1);
        convs_.emplace_back(P, nm, cin, cout, rng);
        norms_.emplace_back(P, nm + ".norm", cout);
        acts_.emplace_back(P, nm + ".act", cout);
        cin = cout;
    }
}

ad::Var LocalNet::arn_frequency(const ad::Var& anchor_mag) const {
    if (anchor_mag->value.ndim() != 2 || anchor_mag->value.dim(1) != cfg_.bins)
        throw ShapeError("arn_frequency: expected [T, " +
                         std::to_string(cfg_.bins) + "]");
    int T = anchor_mag->value.dim(0), F = cfg_.bins, H = cfg_.frame_arn_hidden;
    // frames become the batch; the frequency axis is the sequence
    ad::Var seq = ad::permute3(ad::reshape(anchor_mag, {T, F, 1}), 1, 0, 2);
    ad::Var h = frame_arn_(seq);  // [F, T, H]
    ad::Var y = frame_out_(ad::reshape(h, {F * T, H}));
    return ad::transpose(ad::reshape(y, {F, T}));  // [T, F]
}

LocalNet::Output LocalNet::forward(const ComplexSpectrogram& anchor) const {
    if (anchor.bins != cfg_.bins)
        throw ShapeError("local net: anchor bin count mismatch");
    int T = anchor.frames, F = cfg_.bins;
    ad::Var mag = ad::constant(magnitude_of(anchor));

    Output out;
    out.arn_out = arn_frequency(mag);

    std::vector<ad::Var> chans{ad::reshape(mag, {1, T, F}),
                               ad::reshape(out.arn_out, {1, T, F})};
    if (cfg_.local_input_channels == 4) {
        chans.push_back(ad::reshape(ad::constant(plane_of(anchor.re, T, F)),
                                    {1, T, F}));
        chans.push_back(ad::reshape(ad::constant(plane_of(anchor.im, T, F)),
                                    {1, T, F}));
    }
    ad::Var h = ad::concat(chans, 0);
    for (int k = 0; k < 4; ++k) {
        h = acts_[size_t(k)](norms_[size_t(k)](convs_[size_t(k)](h)));
        out.levels.push_back(h);
        out.averaged.push_back(ad::mean_axis(h, 1));
    }
    return out;
}

// ---- separator ----------------------------------------------------------

Tensor build_separator_input(const ComplexSpectrogram& mix, int input_channels) {
    if (input_channels != 3 && input_channels != 4)
        throw ValueError("build_separator_input: input_channels must be 3 or 4");
    int T = mix.frames, F = mix.bins;
    Tensor x = Tensor::zeros({input_channels, T, F});
    size_t plane = size_t(T) * F;
    for (size_t i = 0; i < plane; ++i) {
        float re = mix.re[i], im = mix.im[i];
        float mag = std::sqrt(re * re + im * im);
        x.data[i] = mag;
        x.data[plane + i] = re;
        x.data[2 * plane + i] = im;
        if (input_channels == 4) x.data[3 * plane + i] = std::sqrt(mag);
    }
    return x;
}

Separator::Separator(nn::Params& P, const SeparatorConfig& cfg, Rng& rng)
    : cfg_(cfg) {
    cfg_.validate();
    int cin = cfg.input_channels;
    for (int k = 0; k < 5; ++k) {
        int cout = cfg.enc_channels[size_t(k)];
        std::string nm = "sep.conv" + std::to_string(k + 1);
        enc_.emplace_back(P, nm, cin, cout, rng);
        enc_norms_.emplace_back(P, nm + ".norm", cout);
        enc_acts_.emplace_back(P, nm + ".act", cout);
        cin = cout * 2;  // next layer sees [conv output ; local features]
    }
    int W = cfg.arn_width();
    for (int b = 0; b < cfg.arn_blocks; ++b)
        arn_.emplace_back(P, "sep.arn" + std::to_string(b + 1), W, W, rng);

    auto chain = cfg.freq_chain();  // {161, 80, 39, 19, 9, 4}
    int dc_in = cfg.enc_channels[4] * 2;
    for (int i = 0; i < 5; ++i) {
        int level = 4 - i;  // decoder runs 5 -> 1
        int cout = level > 0 ? cfg.enc_channels[size_t(level - 1)]
                             : cfg.df_channels();
        int f_in = chain[size_t(level + 1)], f_out = chain[size_t(level)];
        int pad = f_out - ((f_in - 1) * 2 + 3);
        if (pad != 0 && pad != 1)
            throw ConfigError("separator config: frequency chain not invertible");
        std::string nm = "sep.deconv" + std::to_string(level + 1);
        dec_.emplace_back(P, nm, dc_in, cout, pad, rng);
        if (level > 0) {
            dec_norms_.emplace_back(P, nm + ".norm", cout);
            dec_acts_.emplace_back(P, nm + ".act", cout);
        }
        dc_in = cout * 2;
    }
}

ad::Var Separator::forward(const ComplexSpectrogram& mix,
                           const std::vector<ad::Var>& local, const ad::Var& g,
                           ForwardTrace* trace) const {
    if (mix.bins != cfg_.bins) throw ShapeError("separator: bin count mismatch");
    if (int(local.size()) != 4)
        throw ShapeError("separator: expected 4 local feature levels");
    auto chain = cfg_.freq_chain();
    for (int k = 0; k < 4; ++k) {
        const auto& s = local[size_t(k)]->value.shape;
        if (s != std::vector<int>{cfg_.local_channels[size_t(k)],
                                  chain[size_t(k + 1)]})
            throw ShapeError("separator: local level " + std::to_string(k + 1) +
                             " has shape " + local[size_t(k)]->value.shape_str());
    }
    int T = mix.frames;
    int W = cfg_.arn_width();
    if (g->value.shape != std::vector<int>{W})
        throw ShapeError("separator: fusion vector must have width " +
                         std::to_string(W));

    ad::Var h = ad::constant(build_separator_input(mix, cfg_.input_channels));
    std::vector<ad::Var> skips;
    for (int k = 0; k < 5; ++k) {
        if (k > 0)
            h = ad::concat({h, ad::tile_time3(local[size_t(k - 1)], T)}, 0);
        h = enc_acts_[size_t(k)](enc_norms_[size_t(k)](enc_[size_t(k)](h)));
        skips.push_back(h);
        if (trace) trace->encoder_shapes.push_back(h->value.shape);
    }

    int C5 = cfg_.enc_channels[4], F5 = cfg_.bottleneck_freq();
    ad::Var seq = ad::reshape(ad::permute3(h, 1, 0, 2), {T, W});
    if (trace) {
        double acc = 0.0;
        for (float v : seq->value.data) acc += double(v) * v;
        trace->bottleneck_in_norm = std::sqrt(acc);
    }
    seq = ad::rowwise_mul(seq, g);
    if (trace) trace->bottleneck_shape = seq->value.shape;
    ad::Var a = ad::reshape(seq, {T, 1, W});
    for (const auto& block : arn_) a = block(a);
    seq = ad::reshape(a, {T, W});
    if (trace) {
        double acc = 0.0;
        for (float v : seq->value.data) acc += double(v) * v;
        trace->bottleneck_out_norm = std::sqrt(acc);
    }

    ad::Var d = ad::permute3(ad::reshape(seq, {T, C5, F5}), 1, 0, 2);
    for (int i = 0; i < 5; ++i) {
        d = dec_[size_t(i)](ad::concat({d, skips[size_t(4 - i)]}, 0));
        if (i < 4) d = dec_acts_[size_t(i)](dec_norms_[size_t(i)](d));
        if (trace) trace->decoder_shapes.push_back(d->value.shape);
    }
    return d;  // [df_channels, T, bins]
}

// ---- filter head ----------------------------------------------------------

ComplexSpectrogram apply_deep_filter(const Tensor& coeffs,
                                     const ComplexSpectrogram& mix, int lt,
                                     int lf) {
    int T = mix.frames, F = mix.bins;
    if (coeffs.shape != std::vector<int>{2 * lt * lf, T, F})
        throw ShapeError("apply_deep_filter: coefficient shape " +
                         coeffs.shape_str() + " does not match spectrogram");
    ComplexSpectrogram out;
    out.frames = T;
    out.bins = F;
    out.config = mix.config;
    out.re.assign(size_t(T) * F, 0.0f);
    out.im.assign(size_t(T) * F, 0.0f);
    size_t plane = size_t(T) * F;
    for (int t = 0; t < T; ++t)
        for (int f = 0; f < F; ++f) {
            double are = 0.0, aim = 0.0;
            for (int i = 0; i < lt; ++i)
                for (int j = 0; j < lf; ++j) {
                    int ts = t + i - lt / 2, fs = f + j - lf / 2;
                    if (ts < 0 || ts >= T || fs < 0 || fs >= F) continue;
                    size_t p = size_t(2 * (i * lf + j));
                    float hre = coeffs.data[p * plane + size_t(t) * F + f];
                    float him = coeffs.data[(p + 1) * plane + size_t(t) * F + f];
                    float mre = mix.at_re(ts, fs), mim = mix.at_im(ts, fs);
                    are += double(hre) * mre - double(him) * mim;
                    aim += double(hre) * mim + double(him) * mre;
                }
            out.at_re(t, f) = float(are);
            out.at_im(t, f) = float(aim);
        }
    return out;
}

namespace {

// mixture plane shifted by (dt, df), zeros at the boundary
Tensor shifted_plane(const std::vector<float>& v, int T, int F, int dt, int df) {
    Tensor out = Tensor::zeros({T, F});
    for (int t = 0; t < T; ++t) {
        int ts = t + dt;
        if (ts < 0 || ts >= T) continue;
        for (int f = 0; f < F; ++f) {
            int fs = f + df;
            if (fs < 0 || fs >= F) continue;
            out.at(t, f) = v[size_t(ts) * F + fs];
        }
    }
    return out;
}

}  // namespace

std::pair<ad::Var, ad::Var> deep_filter_tape(const ad::Var& coeffs,
                                             const ComplexSpectrogram& mix,
                                             int lt, int lf) {
    int T = mix.frames, F = mix.bins;
    if (coeffs->value.shape != std::vector<int>{2 * lt * lf, T, F})
        throw ShapeError("deep_filter_tape: coefficient shape mismatch");
    ad::Var re, im;
    for (int i = 0; i < lt; ++i)
        for (int j = 0; j < lf; ++j) {
            int p = 2 * (i * lf + j);
            Tensor mre = shifted_plane(mix.re, T, F, i - lt / 2, j - lf / 2);
            Tensor mim = shifted_plane(mix.im, T, F, i - lt / 2, j - lf / 2);
            ad::Var hre = ad::reshape(ad::slice(coeffs, 0, p, 1), {T, F});
            ad::Var him = ad::reshape(ad::slice(coeffs, 0, p + 1, 1), {T, F});
            ad::Var tre = ad::sub(ad::mul_const(hre, mre), ad::mul_const(him, mim));
            ad::Var tim = ad::add(ad::mul_const(hre, mim), ad::mul_const(him, mre));
            re = re ? ad::add(re, tre) : tre;
            im = im ? ad::add(im, tim) : tim;
        }
    return {re, im};
}

ad::Var istft_tape(const ad::Var& re, const ad::Var& im, const StftConfig& cfg,
                   int out_len) {
    cfg.validate();
    int T = re->value.dim(0), B = cfg.bins(), N = cfg.dft_size;
    int W = cfg.window_samples(), H = cfg.hop_samples();
    if (re->value.shape != std::vector<int>{T, B} ||
        im->value.shape != std::vector<int>{T, B})
        throw ShapeError("istft_tape: expected [T, bins] planes");

    auto win = hann_periodic(W);
    Tensor Cw = Tensor::zeros({B, W}), Sw = Tensor::zeros({B, W});
    for (int f = 0; f < B; ++f) {
        double wf = (f == 0 || f == B - 1) ? 1.0 : 2.0;
        for (int n = 0; n < W; ++n) {
            double ang = 2.0 * M_PI * f * n / N;
            Cw.at(f, n) = float(wf * std::cos(ang) * win[size_t(n)] / N);
            Sw.at(f, n) = float(wf * std::sin(ang) * win[size_t(n)] / N);
        }
    }
    int natural = (T - 1) * H + W;
    ad::Var frames = ad::sub(ad::matmul_const(re, Cw), ad::matmul_const(im, Sw));
    ad::Var wave = ad::overlap_add(frames, H, natural);

    Tensor inv_env = Tensor::full({natural}, 1.0f);
    std::vector<double> env(size_t(natural), 0.0);
    for (int t = 0; t < T; ++t)
        for (int k = 0; k < W; ++k)
            env[size_t(t * H + k)] += win[size_t(k)] * win[size_t(k)];
    for (int i = 0; i < natural; ++i)
        if (env[size_t(i)] > 1e-10) inv_env.at(i) = float(1.0 / env[size_t(i)]);
    wave = ad::mul_const(wave, inv_env);

    if (out_len == natural) return wave;
    if (out_len < natural) return ad::slice(wave, 0, 0, out_len);
    return ad::concat({wave, ad::constant(Tensor::zeros({out_len - natural}))}, 0);
}

// ---- full model ---------------------------------------------------------

TseModel::TseModel(const SeparatorConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    local_ = LocalNet(params_, cfg_, rng);
    sep_ = Separator(params_, cfg_, rng);
    proj_ = nn::Linear(params_, "fusion.proj", cfg_.embedding_dim,
                       cfg_.arn_width(), rng);
}

ad::Var TseModel::forward_coeffs(const ComplexSpectrogram& mix,
                                 const ComplexSpectrogram& anchor,
                                 const Tensor* global_emb, FusionMode mode,
                                 ForwardTrace* trace) const {
    auto chain = cfg_.freq_chain();
    std::vector<ad::Var> local;
    if (mode == FusionMode::global) {
        for (int k = 0; k < 4; ++k)
            local.push_back(ad::constant(Tensor::zeros(
                {cfg_.local_channels[size_t(k)], chain[size_t(k + 1)]})));
    } else {
        LocalNet::Output lo = local_.forward(anchor);
        if (trace)
            for (const auto& lv : lo.levels)
                trace->local_shapes.push_back(lv->value.shape);
        local = lo.averaged;
    }

    int W = cfg_.arn_width();
    ad::Var g;
    if (mode == FusionMode::local || global_emb == nullptr) {
        g = ad::constant(Tensor::full({W}, 1.0f));
    } else {
        if (global_emb->shape != std::vector<int>{cfg_.embedding_dim})
            throw ShapeError("forward_coeffs: embedding must have length " +
                             std::to_string(cfg_.embedding_dim));
        Tensor e = *global_emb;
        e.shape = {1, cfg_.embedding_dim};
        g = ad::reshape(proj_(ad::constant(e)), {W});
    }

    if (trace) {
        trace->mode = to_string(mode);
        double la = 0.0;
        int64_t ln = 0;
        for (const auto& l : local) {
            for (float v : l->value.data) la += std::fabs(v);
            ln += l->value.numel();
        }
        trace->local_feature_abs_mean = la / double(ln);
        double gd = 0.0;
        for (float v : g->value.data) gd += std::fabs(double(v) - 1.0);
        trace->global_deviation_from_ones = gd / double(W);
    }
    return sep_.forward(mix, local, g, trace);
}

std::pair<ad::Var, ad::Var> TseModel::estimate_spec(
    const ComplexSpectrogram& mix, const ComplexSpectrogram& anchor,
    const Tensor* global_emb, FusionMode mode, ForwardTrace* trace) const {
    ad::Var coeffs = forward_coeffs(mix, anchor, global_emb, mode, trace);
    return deep_filter_tape(coeffs, mix, cfg_.df_time_taps, cfg_.df_freq_taps);
}

Waveform TseModel::separate(const Waveform& mixture, const Waveform& anchor,
                            const Tensor* global_emb, FusionMode mode,
                            const StftConfig& stft_cfg,
                            ForwardTrace* trace) const {
    ad::NoGradGuard ng;
    ComplexSpectrogram mix = stft(mixture, stft_cfg);
    ComplexSpectrogram anc = stft(anchor, stft_cfg);
    ad::Var coeffs = forward_coeffs(mix, anc, global_emb, mode, trace);
    ComplexSpectrogram est = apply_deep_filter(coeffs->value, mix,
                                               cfg_.df_time_taps,
                                               cfg_.df_freq_taps);
    return istft(est, int(mixture.size()));
}

}  // namespace hrtse
