#include "hrtse/stft.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <memory>

namespace hrtse {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void StftConfig::validate() const {
    if (sample_rate_hz <= 0) throw ConfigError("stft: bad sample rate");
    int w = window_samples(), h = hop_samples();
    if (w <= 0 || h <= 0) throw ConfigError("stft: bad window/hop");
    if (w != 2 * h)
        throw ConfigError("stft: window must equal twice the hop");
    if (dft_size < w) throw ConfigError("stft: dft size smaller than window");
}

std::vector<double> hann_periodic(int n) {
    std::vector<double> w(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k)
        w[size_t(k)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * k / n);
    return w;
}

int num_frames(int n_samples, const StftConfig& cfg) {
    cfg.validate();
    int w = cfg.window_samples(), h = cfg.hop_samples();
    if (n_samples < w)
        throw ValueError("stft: wave shorter than one analysis window");
    return 1 + (n_samples - w) / h;
}

namespace {

struct DftTables {
    // C[n][f] = cos(2 pi f n / N), S[n][f] = sin(2 pi f n / N) for the
    // one-sided bins. X_re = frames * C, X_im = -frames * S.
    MatD C, S;
    explicit DftTables(const StftConfig& cfg) {
        int N = cfg.dft_size, W = cfg.window_samples(), B = cfg.bins();
        C.resize(W, B);
        S.resize(W, B);
        for (int n = 0; n < W; ++n)
            for (int f = 0; f < B; ++f) {
                double th = 2.0 * M_PI * double(f) * double(n) / double(N);
                C(n, f) = std::cos(th);
                S(n, f) = std::sin(th);
            }
    }
};

const DftTables& tables_for(const StftConfig& cfg) {
    static const StftConfig canonical{};
    static const DftTables canonical_tables(canonical);
    if (cfg == canonical) return canonical_tables;
    thread_local StftConfig last;
    thread_local std::unique_ptr<DftTables> cached;
    if (!cached || !(last == cfg)) {
        cached = std::make_unique<DftTables>(cfg);
        last = cfg;
    }
    return *cached;
}

MatD windowed_frames(const double* x, int n, const StftConfig& cfg, int T) {
    int W = cfg.window_samples(), H = cfg.hop_samples();
    std::vector<double> win = hann_periodic(W);
    MatD fr(T, W);
    for (int t = 0; t < T; ++t)
        for (int k = 0; k < W; ++k) fr(t, k) = x[t * H + k] * win[size_t(k)];
    (void)n;
    return fr;
}

}  // namespace

ComplexSpectrogram stft(const Waveform& w, const StftConfig& cfg) {
    int T = num_frames(w.size(), cfg);
    int B = cfg.bins();
    std::vector<double> x(w.samples.begin(), w.samples.end());
    MatD fr = windowed_frames(x.data(), w.size(), cfg, T);
    const DftTables& tb = tables_for(cfg);
    MatD re = fr * tb.C;
    MatD im = -(fr * tb.S);

    ComplexSpectrogram s;
    s.frames = T;
    s.bins = B;
    s.config = cfg;
    s.re.resize(size_t(T) * B);
    s.im.resize(size_t(T) * B);
    for (int t = 0; t < T; ++t)
        for (int f = 0; f < B; ++f) {
            s.at_re(t, f) = float(re(t, f));
            s.at_im(t, f) = float(im(t, f));
        }
    return s;
}

Waveform istft(const ComplexSpectrogram& spec, int out_len) {
    const StftConfig& cfg = spec.config;
    cfg.validate();
    int T = spec.frames, B = spec.bins, N = cfg.dft_size;
    int W = cfg.window_samples(), H = cfg.hop_samples();
    if (B != cfg.bins()) throw ShapeError("istft: bin count mismatch");

    const DftTables& tb = tables_for(cfg);
    // Real IDFT from one-sided bins: interior bins carry weight 2.
    MatD re(T, B), im(T, B);
    for (int t = 0; t < T; ++t)
        for (int f = 0; f < B; ++f) {
            double sc = (f == 0 || f == B - 1) ? 1.0 : 2.0;
            re(t, f) = sc * double(spec.at_re(t, f));
            im(t, f) = sc * double(spec.at_im(t, f));
        }
    // x[n] = (1/N) sum_f re_f cos - im_f sin, n limited to window support.
    MatD frames = (re * tb.C.transpose() - im * tb.S.transpose()) / double(N);

    std::vector<double> win = hann_periodic(W);
    int natural = (T - 1) * H + W;
    std::vector<double> acc(size_t(natural), 0.0), env(size_t(natural), 0.0);
    for (int t = 0; t < T; ++t)
        for (int k = 0; k < W; ++k) {
            acc[size_t(t * H + k)] += frames(t, k) * win[size_t(k)];
            env[size_t(t * H + k)] += win[size_t(k)] * win[size_t(k)];
        }
    for (int i = 0; i < natural; ++i)
        if (env[size_t(i)] > 1e-10) acc[size_t(i)] /= env[size_t(i)];

    if (out_len < 0) out_len = natural;
    Waveform out;
    out.sample_rate_hz = cfg.sample_rate_hz;
    out.samples.assign(size_t(out_len), 0.0f);
    int n = std::min(out_len, natural);
    for (int i = 0; i < n; ++i) out.samples[size_t(i)] = float(acc[size_t(i)]);
    return out;
}

ComplexSpectrogram power_compress(const ComplexSpectrogram& spec, double p) {
    if (!(p > 0.0) || p > 1.0)
        throw ValueError("power_compress: exponent must lie in (0, 1]");
    ComplexSpectrogram out = spec;
    size_t n = spec.re.size();
    for (size_t i = 0; i < n; ++i) {
        double re = spec.re[i], im = spec.im[i];
        double mag = std::hypot(re, im);
        if (mag == 0.0) {
            out.re[i] = 0.0f;
            out.im[i] = 0.0f;
        } else {
            double sc = std::pow(mag, p - 1.0);
            out.re[i] = float(re * sc);
            out.im[i] = float(im * sc);
        }
    }
    return out;
}

std::vector<double> mel_filter_matrix(const StftConfig& cfg,
                                      const FbankConfig& fcfg) {
    cfg.validate();
    if (fcfg.n_mels < 2) throw ConfigError("fbank: need at least 2 mels");
    if (!(fcfg.fmin_hz >= 0.0) || fcfg.fmax_hz <= fcfg.fmin_hz ||
        fcfg.fmax_hz > cfg.sample_rate_hz / 2.0)
        throw ConfigError("fbank: bad frequency range");
    auto hz_to_mel = [](double hz) {
        return 2595.0 * std::log10(1.0 + hz / 700.0);
    };
    auto mel_to_hz = [](double mel) {
        return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
    };
    int B = cfg.bins(), M = fcfg.n_mels;
    double lo = hz_to_mel(fcfg.fmin_hz), hi = hz_to_mel(fcfg.fmax_hz);
    std::vector<double> edge(size_t(M) + 2);
    for (int m = 0; m < M + 2; ++m)
        edge[size_t(m)] = mel_to_hz(lo + (hi - lo) * m / double(M + 1));

    std::vector<double> mat(size_t(M) * B, 0.0);
    double df = double(cfg.sample_rate_hz) / double(cfg.dft_size);
    for (int m = 0; m < M; ++m) {
        double l = edge[size_t(m)], c = edge[size_t(m) + 1], r = edge[size_t(m) + 2];
        for (int f = 0; f < B; ++f) {
            double hz = f * df;
            double v = 0.0;
            if (hz > l && hz < c)
                v = (hz - l) / (c - l);
            else if (hz >= c && hz < r)
                v = (r - hz) / (r - c);
            mat[size_t(m) * B + f] = v;
        }
    }
    return mat;
}

FbankFeatures fbank(const Waveform& w, const StftConfig& cfg,
                    const FbankConfig& fcfg) {
    ComplexSpectrogram s = stft(w, cfg);
    std::vector<double> mel = mel_filter_matrix(cfg, fcfg);
    int T = s.frames, B = s.bins, M = fcfg.n_mels;

    FbankFeatures out;
    out.frames = T;
    out.channels = M;
    out.values.resize(size_t(T) * M);
    std::vector<double> pow_spec(static_cast<size_t>(B));
    for (int t = 0; t < T; ++t) {
        for (int f = 0; f < B; ++f) {
            double re = s.at_re(t, f), im = s.at_im(t, f);
            pow_spec[size_t(f)] = re * re + im * im;
        }
        for (int m = 0; m < M; ++m) {
            double e = 0.0;
            const double* row = &mel[size_t(m) * B];
            for (int f = 0; f < B; ++f) e += row[f] * pow_spec[size_t(f)];
            out.values[size_t(t) * M + m] =
                float(std::log(std::max(e, fcfg.floor)));
        }
    }
    if (fcfg.mean_norm) {
        for (int m = 0; m < M; ++m) {
            double mu = 0.0;
            for (int t = 0; t < T; ++t) mu += out.values[size_t(t) * M + m];
            mu /= T;
            for (int t = 0; t < T; ++t)
                out.values[size_t(t) * M + m] -= float(mu);
        }
    }
    return out;
}

SpectrogramD stft_double(const std::vector<double>& x, const StftConfig& cfg) {
    int T = num_frames(int(x.size()), cfg);
    int B = cfg.bins();
    MatD fr = windowed_frames(x.data(), int(x.size()), cfg, T);
    const DftTables& tb = tables_for(cfg);
    MatD re = fr * tb.C;
    MatD im = -(fr * tb.S);
    SpectrogramD s;
    s.frames = T;
    s.bins = B;
    s.re.assign(re.data(), re.data() + size_t(T) * B);
    s.im.assign(im.data(), im.data() + size_t(T) * B);
    return s;
}

std::vector<double> stft_adjoint_double(const SpectrogramD& cot,
                                        const StftConfig& cfg, int n_samples) {
    cfg.validate();
    int T = cot.frames, B = cot.bins;
    int W = cfg.window_samples(), H = cfg.hop_samples();
    const DftTables& tb = tables_for(cfg);
    Eigen::Map<const MatD> gre(cot.re.data(), T, B), gim(cot.im.data(), T, B);
    MatD gframes = gre * tb.C.transpose() - gim * tb.S.transpose();
    std::vector<double> win = hann_periodic(W);
    std::vector<double> gx(size_t(n_samples), 0.0);
    for (int t = 0; t < T; ++t)
        for (int k = 0; k < W; ++k)
            gx[size_t(t * H + k)] += gframes(t, k) * win[size_t(k)];
    return gx;
}

}  // namespace hrtse
