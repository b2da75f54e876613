#pragma once

#include <vector>

#include "hrtse/autodiff.hpp"
#include "hrtse/stft.hpp"
#include "hrtse/wav.hpp"

namespace hrtse {

struct LossConfig {
    double p = 0.5;  // spectral compression exponent
    double w_ri = 1.0, w_mag = 1.0, w_si = 1.0;
    double si_cap_reg = 1e-8;  // caps SI-SNR at +80 dB when est == ref
    StftConfig stft;
};

struct LossBreakdown {
    double si_snr = 0.0;  // dB, enters the total negated
    double l_mag = 0.0;
    double l_ri = 0.0;
    double total = 0.0;
};

// ---- double-precision reference path ------------------------------------
// These carry the analytic gradients that the finite-difference checks
// validate; training itself runs on the float tape below.

double si_snr_d(const std::vector<double>& est, const std::vector<double>& ref,
                std::vector<double>* grad_est = nullptr, double cap_reg = 1e-8);

double loss_mag_d(const SpectrogramD& ref, const SpectrogramD& est, double p,
                  SpectrogramD* grad_est = nullptr);

double loss_ri_d(const SpectrogramD& ref, const SpectrogramD& est, double p,
                 SpectrogramD* grad_est = nullptr);

LossBreakdown total_loss_d(const std::vector<double>& est,
                           const std::vector<double>& ref,
                           const LossConfig& cfg,
                           std::vector<double>* grad_est = nullptr);

// metric-facing wrapper
double si_snr(const Waveform& est, const Waveform& ref);

// ---- tape path for training ---------------------------------------------

ad::Var si_snr_tape(const ad::Var& est, const std::vector<float>& ref,
                    double cap_reg = 1e-8);

struct TapeLoss {
    ad::Var total, si, mag, ri;
};

// est spectrum enters as tape variables, est waveform as a tape variable
// (from istft_tape); the reference signal and spectrum are constants.
TapeLoss total_loss_tape(const ad::Var& est_re, const ad::Var& est_im,
                         const ComplexSpectrogram& ref_spec,
                         const ad::Var& est_wave,
                         const std::vector<float>& ref_wave,
                         const LossConfig& cfg);

}  // namespace hrtse
