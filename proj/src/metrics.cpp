#include "hrtse/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "hrtse/common.hpp"

namespace hrtse {

namespace {

constexpr int kFs = 10000;       // metric-native rate
constexpr int kFrame = 256;      // 25.6 ms analysis frames
constexpr int kHop = 128;
constexpr int kFft = 512;
constexpr int kBands = 15;
constexpr double kBandStart = 150.0;
constexpr int kSeg = 30;         // segment length in frames
constexpr double kDynRange = 40.0;
constexpr double kBeta = -15.0;  // clipping threshold, dB

struct Frames {
    // windowed time frames, row-major [n x kFrame]
    std::vector<double> data;
    int n = 0;
    const double* row(int i) const { return data.data() + size_t(i) * kFrame; }
};

Frames frame_signal(const std::vector<double>& x) {
    Frames fr;
    if (int(x.size()) < kFrame) return fr;
    static const std::vector<double> win = [] {
        std::vector<double> w(kFrame);
        for (int i = 0; i < kFrame; ++i)
            w[size_t(i)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * (i + 1) / (kFrame + 1));
        return w;
    }();
    fr.n = 1 + (int(x.size()) - kFrame) / kHop;
    fr.data.resize(size_t(fr.n) * kFrame);
    for (int t = 0; t < fr.n; ++t)
        for (int i = 0; i < kFrame; ++i)
            fr.data[size_t(t) * kFrame + i] = x[size_t(t * kHop + i)] * win[size_t(i)];
    return fr;
}

// |DFT|^2 of a frame zero-padded to kFft, bins [0, kFft/2]
void frame_power(const double* frame, std::vector<double>& out) {
    out.assign(kFft / 2 + 1, 0.0);
    static const std::vector<double> tbl = [] {
        std::vector<double> t(size_t(kFft) * 2);
        for (int i = 0; i < kFft; ++i) {
            t[size_t(i) * 2] = std::cos(2.0 * M_PI * i / kFft);
            t[size_t(i) * 2 + 1] = -std::sin(2.0 * M_PI * i / kFft);
        }
        return t;
    }();
    for (int k = 0; k <= kFft / 2; ++k) {
        double re = 0.0, im = 0.0;
        for (int i = 0; i < kFrame; ++i) {
            int idx = (k * i) % kFft;
            re += frame[i] * tbl[size_t(idx) * 2];
            im += frame[i] * tbl[size_t(idx) * 2 + 1];
        }
        out[size_t(k)] = re * re + im * im;
    }
}

// one-third-octave band -> FFT bin ranges
std::vector<std::pair<int, int>> band_edges() {
    std::vector<std::pair<int, int>> bands;
    for (int j = 0; j < kBands; ++j) {
        double cf = kBandStart * std::pow(2.0, j / 3.0);
        double lo = cf * std::pow(2.0, -1.0 / 6.0);
        double hi = cf * std::pow(2.0, 1.0 / 6.0);
        int klo = int(std::ceil(lo * kFft / kFs));
        int khi = std::min(kFft / 2, int(std::ceil(hi * kFft / kFs)) - 1);
        bands.emplace_back(klo, khi);
    }
    return bands;
}

double correlation(const double* x, const double* y, int n) {
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (int i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    double d = std::sqrt(sxx * syy);
    return d > 0.0 ? sxy / d : 0.0;
}

// band envelopes [kBands x M] for frames kept by the activity mask
void band_envelopes(const Frames& fr, const std::vector<int>& keep,
                    std::vector<double>& env) {
    auto bands = band_edges();
    env.assign(size_t(kBands) * keep.size(), 0.0);
    std::vector<double> pw;
    for (size_t m = 0; m < keep.size(); ++m) {
        frame_power(fr.row(keep[m]), pw);
        for (int j = 0; j < kBands; ++j) {
            double acc = 0.0;
            for (int k = bands[size_t(j)].first; k <= bands[size_t(j)].second; ++k)
                acc += pw[size_t(k)];
            env[size_t(j) * keep.size() + m] = std::sqrt(acc);
        }
    }
}

double stoi_impl(const Waveform& est_in, const Waveform& ref_in, bool extended) {
    if (est_in.size() != ref_in.size())
        throw ShapeError("stoi: signals must have equal length");
    Waveform est10 = resample(est_in, kFs);
    Waveform ref10 = resample(ref_in, kFs);
    std::vector<double> e(est10.samples.begin(), est10.samples.end());
    std::vector<double> r(ref10.samples.begin(), ref10.samples.end());

    Frames fe = frame_signal(e), frm = frame_signal(r);
    int n = std::min(fe.n, frm.n);
    if (n < kSeg) throw ValueError("stoi: signal too short (need >= 1 s)");

    // silent-frame removal driven by the reference
    std::vector<double> energy(size_t(n), 0.0);
    double peak = -1e300;
    for (int t = 0; t < n; ++t) {
        double acc = 0.0;
        const double* row = frm.row(t);
        for (int i = 0; i < kFrame; ++i) acc += row[i] * row[i];
        energy[size_t(t)] = 10.0 * std::log10(acc + 1e-300);
        peak = std::max(peak, energy[size_t(t)]);
    }
    std::vector<int> keep;
    for (int t = 0; t < n; ++t)
        if (energy[size_t(t)] > peak - kDynRange) keep.push_back(t);
    int M = int(keep.size());
    if (M < kSeg) throw ValueError("stoi: too few active frames");

    std::vector<double> X, Y;  // [kBands x M]
    band_envelopes(frm, keep, X);
    band_envelopes(fe, keep, Y);

    double acc = 0.0;
    int cnt = 0;
    if (!extended) {
        const double clip = std::pow(10.0, -kBeta / 20.0);
        std::vector<double> xs(kSeg), ys(kSeg);
        for (int m = kSeg; m <= M; ++m) {
            for (int j = 0; j < kBands; ++j) {
                const double* xr = X.data() + size_t(j) * M + (m - kSeg);
                const double* yr = Y.data() + size_t(j) * M + (m - kSeg);
                double nx = 0.0, ny = 0.0;
                for (int i = 0; i < kSeg; ++i) {
                    nx += xr[i] * xr[i];
                    ny += yr[i] * yr[i];
                }
                double a = std::sqrt(nx / std::max(ny, 1e-300));
                for (int i = 0; i < kSeg; ++i) {
                    xs[size_t(i)] = xr[i];
                    ys[size_t(i)] = std::min(a * yr[i], xr[i] * (1.0 + clip));
                }
                acc += correlation(xs.data(), ys.data(), kSeg);
                ++cnt;
            }
        }
    } else {
        std::vector<double> xs(size_t(kBands) * kSeg), ys(xs.size());
        auto normalize = [](std::vector<double>& v) {
            // rows: per band over time
            for (int j = 0; j < kBands; ++j) {
                double* row = v.data() + size_t(j) * kSeg;
                double mu = 0.0;
                for (int i = 0; i < kSeg; ++i) mu += row[i];
                mu /= kSeg;
                double nn = 0.0;
                for (int i = 0; i < kSeg; ++i) {
                    row[i] -= mu;
                    nn += row[i] * row[i];
                }
                nn = std::sqrt(nn);
                if (nn > 0.0)
                    for (int i = 0; i < kSeg; ++i) row[i] /= nn;
            }
            // columns: per frame over bands
            for (int i = 0; i < kSeg; ++i) {
                double mu = 0.0;
                for (int j = 0; j < kBands; ++j) mu += v[size_t(j) * kSeg + i];
                mu /= kBands;
                double nn = 0.0;
                for (int j = 0; j < kBands; ++j) {
                    v[size_t(j) * kSeg + i] -= mu;
                    nn += v[size_t(j) * kSeg + i] * v[size_t(j) * kSeg + i];
                }
                nn = std::sqrt(nn);
                if (nn > 0.0)
                    for (int j = 0; j < kBands; ++j) v[size_t(j) * kSeg + i] /= nn;
            }
        };
        for (int m = kSeg; m <= M; ++m) {
            for (int j = 0; j < kBands; ++j)
                for (int i = 0; i < kSeg; ++i) {
                    xs[size_t(j) * kSeg + i] = X[size_t(j) * M + (m - kSeg) + i];
                    ys[size_t(j) * kSeg + i] = Y[size_t(j) * M + (m - kSeg) + i];
                }
            normalize(xs);
            normalize(ys);
            double d = 0.0;
            for (size_t i = 0; i < xs.size(); ++i) d += xs[i] * ys[i];
            acc += d / kSeg;
            ++cnt;
        }
    }
    return acc / std::max(1, cnt);
}

}  // namespace

double stoi(const Waveform& est, const Waveform& ref, bool extended) {
    return stoi_impl(est, ref, extended);
}

double estoi(const Waveform& est, const Waveform& ref) {
    return stoi_impl(est, ref, true);
}

bool tsos_flag(const Waveform& est, const Waveform& ref, const TsosConfig& cfg) {
    if (est.size() != ref.size()) throw ShapeError("tsos: length mismatch");
    int n = int(ref.size());
    if (n < cfg.frame_samples) throw ValueError("tsos: signal shorter than a frame");
    int T = 1 + (n - cfg.frame_samples) / cfg.hop_samples;

    std::vector<double> edb(static_cast<size_t>(T));
    std::vector<double> rdb(static_cast<size_t>(T));
    double peak = -1e300;
    for (int t = 0; t < T; ++t) {
        double ea = 0.0, ra = 0.0;
        for (int i = 0; i < cfg.frame_samples; ++i) {
            double ev = est.samples[size_t(t * cfg.hop_samples + i)];
            double rv = ref.samples[size_t(t * cfg.hop_samples + i)];
            ea += ev * ev;
            ra += rv * rv;
        }
        edb[size_t(t)] = 10.0 * std::log10(ea + 1e-300);
        rdb[size_t(t)] = 10.0 * std::log10(ra + 1e-300);
        peak = std::max(peak, rdb[size_t(t)]);
    }
    int run = 0;
    for (int t = 0; t < T; ++t) {
        bool active = rdb[size_t(t)] >= peak - cfg.active_floor_db;
        bool suppressed = active && edb[size_t(t)] <= rdb[size_t(t)] - cfg.suppress_db;
        run = suppressed ? run + 1 : 0;
        if (run >= cfg.min_run) return true;
    }
    return false;
}

std::optional<double> pesq_external(const std::string& cmd, const Waveform& ref,
                                    const Waveform& est,
                                    const std::string& tmp_dir) {
    if (cmd.empty()) return std::nullopt;
    namespace fs = std::filesystem;
    fs::create_directories(tmp_dir);
    std::string ref_path = (fs::path(tmp_dir) / "pesq_ref.wav").string();
    std::string est_path = (fs::path(tmp_dir) / "pesq_est.wav").string();
    write_wav(ref_path, ref, 16);
    write_wav(est_path, est, 16);

    std::string full = cmd + " " + ref_path + " " + est_path + " 2>/dev/null";
    FILE* pipe = popen(full.c_str(), "r");
    if (!pipe) throw IoError("pesq: cannot run scorer: " + cmd);
    std::string out;
    std::array<char, 256> buf{};
    while (fgets(buf.data(), int(buf.size()), pipe)) out += buf.data();
    int rc = pclose(pipe);
    if (rc != 0) throw IoError("pesq: scorer exited with status " +
                               std::to_string(rc));

    // last parseable number on stdout wins
    std::optional<double> score;
    size_t i = 0;
    while (i < out.size()) {
        char* end = nullptr;
        double v = std::strtod(out.c_str() + i, &end);
        if (end != out.c_str() + i) {
            score = v;
            i = size_t(end - out.c_str());
        } else {
            ++i;
        }
    }
    if (!score) throw IoError("pesq: no score found in scorer output");
    return score;
}

}  // namespace hrtse
