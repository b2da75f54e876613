#include "hrtse/losses.hpp"

#include <cmath>

#include "hrtse/common.hpp"

namespace hrtse {

namespace {
constexpr double kLog10Scale = 10.0 / 2.302585092994045684;  // 10 / ln 10
}

double si_snr_d(const std::vector<double>& est, const std::vector<double>& ref,
                std::vector<double>* grad_est, double cap_reg) {
    if (est.size() != ref.size())
        throw ShapeError("si_snr: length mismatch");
    size_t n = est.size();
    if (n == 0) throw ValueError("si_snr: empty signals");

    double me = 0.0, mr = 0.0;
    for (size_t i = 0; i < n; ++i) {
        me += est[i];
        mr += ref[i];
    }
    me /= double(n);
    mr /= double(n);

    double rr = 0.0, er = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double r0 = ref[i] - mr, e0 = est[i] - me;
        rr += r0 * r0;
        er += e0 * r0;
    }
    if (rr <= 0.0) throw ValueError("si_snr: reference is constant/all-zero");

    double alpha = er / rr;
    double nst = alpha * alpha * rr;  // |s_target|^2
    double nen = 0.0;                 // |e_noise|^2
    for (size_t i = 0; i < n; ++i) {
        double e0 = est[i] - me, r0 = ref[i] - mr;
        double d = e0 - alpha * r0;
        nen += d * d;
    }
    double den = nen + cap_reg * nst;
    if (nst <= 0.0) throw ValueError("si_snr: estimate orthogonal to reference");
    double value = kLog10Scale * (std::log(nst) - std::log(den));

    if (grad_est) {
        grad_est->assign(n, 0.0);
        // d|s_t|^2/de0 = 2 alpha r0 ; d|e_n|^2/de0 = 2 e0 - 2 alpha r0
        double mg = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double e0 = est[i] - me, r0 = ref[i] - mr;
            double dst = 2.0 * alpha * r0;
            double dden = 2.0 * e0 - 2.0 * alpha * r0 + cap_reg * dst;
            double g = kLog10Scale * (dst / nst - dden / den);
            (*grad_est)[i] = g;
            mg += g;
        }
        mg /= double(n);
        for (size_t i = 0; i < n; ++i) (*grad_est)[i] -= mg;
    }
    return value;
}

double loss_mag_d(const SpectrogramD& ref, const SpectrogramD& est, double p,
                  SpectrogramD* grad_est) {
    if (ref.frames != est.frames || ref.bins != est.bins)
        throw ShapeError("loss_mag: spectrogram shape mismatch");
    size_t n = ref.re.size();
    double T = double(ref.frames);
    if (grad_est) {
        grad_est->frames = est.frames;
        grad_est->bins = est.bins;
        grad_est->re.assign(n, 0.0);
        grad_est->im.assign(n, 0.0);
    }
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double mr2 = ref.re[i] * ref.re[i] + ref.im[i] * ref.im[i];
        double me2 = est.re[i] * est.re[i] + est.im[i] * est.im[i];
        double rp = std::pow(mr2, p / 2.0), ep = std::pow(me2, p / 2.0);
        double d = ep - rp;
        acc += d * d;
        if (grad_est && me2 > 0.0) {
            double c = 2.0 * d * p * std::pow(me2, p / 2.0 - 1.0) / T;
            grad_est->re[i] = c * est.re[i];
            grad_est->im[i] = c * est.im[i];
        }
    }
    return acc / T;
}

double loss_ri_d(const SpectrogramD& ref, const SpectrogramD& est, double p,
                 SpectrogramD* grad_est) {
    if (ref.frames != est.frames || ref.bins != est.bins)
        throw ShapeError("loss_ri: spectrogram shape mismatch");
    size_t n = ref.re.size();
    double T = double(ref.frames);
    if (grad_est) {
        grad_est->frames = est.frames;
        grad_est->bins = est.bins;
        grad_est->re.assign(n, 0.0);
        grad_est->im.assign(n, 0.0);
    }
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double mr2 = ref.re[i] * ref.re[i] + ref.im[i] * ref.im[i];
        double me2 = est.re[i] * est.re[i] + est.im[i] * est.im[i];
        // compressed spectra: |S|^p e^{j theta} = (re, im) * |S|^(p-1)
        double cr = mr2 > 0.0 ? std::pow(mr2, (p - 1.0) / 2.0) : 0.0;
        double ce = me2 > 0.0 ? std::pow(me2, (p - 1.0) / 2.0) : 0.0;
        double dre = est.re[i] * ce - ref.re[i] * cr;
        double dim = est.im[i] * ce - ref.im[i] * cr;
        acc += dre * dre + dim * dim;
        if (grad_est && me2 > 0.0) {
            double cd = (p - 1.0) * std::pow(me2, (p - 3.0) / 2.0);
            // d(re*ce)/dre = ce + re^2 cd ; d(re*ce)/dim = re im cd ; etc.
            double gre = dre * (ce + est.re[i] * est.re[i] * cd) +
                         dim * (est.im[i] * est.re[i] * cd);
            double gim = dre * (est.re[i] * est.im[i] * cd) +
                         dim * (ce + est.im[i] * est.im[i] * cd);
            grad_est->re[i] = 2.0 * gre / T;
            grad_est->im[i] = 2.0 * gim / T;
        }
    }
    return acc / T;
}

LossBreakdown total_loss_d(const std::vector<double>& est,
                           const std::vector<double>& ref,
                           const LossConfig& cfg,
                           std::vector<double>* grad_est) {
    if (est.size() != ref.size())
        throw ShapeError("total_loss: length mismatch");
    SpectrogramD se = stft_double(est, cfg.stft);
    SpectrogramD sr = stft_double(ref, cfg.stft);

    LossBreakdown out;
    SpectrogramD gmag, gri;
    std::vector<double> gsi;
    out.l_mag = loss_mag_d(sr, se, cfg.p, grad_est ? &gmag : nullptr);
    out.l_ri = loss_ri_d(sr, se, cfg.p, grad_est ? &gri : nullptr);
    out.si_snr = si_snr_d(est, ref, grad_est ? &gsi : nullptr, cfg.si_cap_reg);
    out.total = cfg.w_ri * out.l_ri + cfg.w_mag * out.l_mag -
                cfg.w_si * out.si_snr;

    if (grad_est) {
        SpectrogramD gspec;
        gspec.frames = se.frames;
        gspec.bins = se.bins;
        gspec.re.resize(se.re.size());
        gspec.im.resize(se.im.size());
        for (size_t i = 0; i < gspec.re.size(); ++i) {
            gspec.re[i] = cfg.w_ri * gri.re[i] + cfg.w_mag * gmag.re[i];
            gspec.im[i] = cfg.w_ri * gri.im[i] + cfg.w_mag * gmag.im[i];
        }
        *grad_est = stft_adjoint_double(gspec, cfg.stft, int(est.size()));
        for (size_t i = 0; i < est.size(); ++i)
            (*grad_est)[i] -= cfg.w_si * gsi[i];
    }
    return out;
}

double si_snr(const Waveform& est, const Waveform& ref) {
    std::vector<double> e(est.samples.begin(), est.samples.end());
    std::vector<double> r(ref.samples.begin(), ref.samples.end());
    return si_snr_d(e, r);
}

// ---- tape builders --------------------------------------------------------

namespace {

ad::Var broadcast_scalar(const ad::Var& s, int n) {
    return ad::reshape(
        ad::matmul_const(ad::reshape(s, {1, 1}), Tensor::full({1, n}, 1.0f)),
        {n});
}

}  // namespace

ad::Var si_snr_tape(const ad::Var& est, const std::vector<float>& ref,
                    double cap_reg) {
    int n = int(ref.size());
    if (est->value.shape != std::vector<int>{n})
        throw ShapeError("si_snr_tape: length mismatch");

    double mr = 0.0;
    for (float v : ref) mr += v;
    mr /= double(n);
    Tensor r0 = Tensor::zeros({n});
    double rr = 0.0;
    for (int i = 0; i < n; ++i) {
        double d = double(ref[size_t(i)]) - mr;
        r0.at(i) = float(d);
        rr += d * d;
    }
    if (rr <= 0.0) throw ValueError("si_snr_tape: reference is constant");

    ad::Var e0 = ad::sub(est, broadcast_scalar(ad::mean(est), n));
    ad::Var alpha = ad::scale(ad::sum(ad::mul_const(e0, r0)), 1.0 / rr);
    Tensor r0_row = r0;
    r0_row.shape = {1, n};
    ad::Var st = ad::reshape(ad::matmul_const(ad::reshape(alpha, {1, 1}), r0_row),
                             {n});
    ad::Var en = ad::sub(e0, st);
    ad::Var nst = ad::add_scalar(ad::sum(ad::square(st)), 1e-12);
    ad::Var den = ad::add(ad::sum(ad::square(en)), ad::scale(nst, cap_reg));
    return ad::scale(ad::sub(ad::log_(nst), ad::log_(den)), kLog10Scale);
}

TapeLoss total_loss_tape(const ad::Var& est_re, const ad::Var& est_im,
                         const ComplexSpectrogram& ref_spec,
                         const ad::Var& est_wave,
                         const std::vector<float>& ref_wave,
                         const LossConfig& cfg) {
    int T = ref_spec.frames, F = ref_spec.bins;
    if (est_re->value.shape != std::vector<int>{T, F} ||
        est_im->value.shape != std::vector<int>{T, F})
        throw ShapeError("total_loss_tape: spectrum shape mismatch");

    // reference compressions as constants
    Tensor rp = Tensor::zeros({T, F}), rc_re = Tensor::zeros({T, F}),
           rc_im = Tensor::zeros({T, F});
    for (size_t i = 0; i < rp.data.size(); ++i) {
        double re = ref_spec.re[i], im = ref_spec.im[i];
        double m2 = re * re + im * im;
        rp.data[i] = float(-std::pow(m2, cfg.p / 2.0));
        double c = m2 > 0.0 ? std::pow(m2, (cfg.p - 1.0) / 2.0) : 0.0;
        rc_re.data[i] = float(-re * c);
        rc_im.data[i] = float(-im * c);
    }

    ad::Var m2 = ad::add_scalar(
        ad::add(ad::square(est_re), ad::square(est_im)), 1e-12);
    ad::Var mp = ad::pow_const(m2, cfg.p / 2.0);
    ad::Var l_mag = ad::scale(ad::sum(ad::square(ad::add_const(mp, rp))),
                              cfg.w_mag / T);

    ad::Var cmp = ad::pow_const(m2, (cfg.p - 1.0) / 2.0);
    ad::Var dre = ad::add_const(ad::mul(est_re, cmp), rc_re);
    ad::Var dim = ad::add_const(ad::mul(est_im, cmp), rc_im);
    ad::Var l_ri = ad::scale(
        ad::add(ad::sum(ad::square(dre)), ad::sum(ad::square(dim))),
        cfg.w_ri / T);

    ad::Var si = si_snr_tape(est_wave, ref_wave, cfg.si_cap_reg);

    TapeLoss out;
    out.si = si;
    out.mag = l_mag;
    out.ri = l_ri;
    out.total = ad::add(ad::add(l_ri, l_mag), ad::scale(si, -cfg.w_si));
    return out;
}

}  // namespace hrtse
