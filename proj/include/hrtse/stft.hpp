#pragma once

#include <vector>

#include "hrtse/common.hpp"
#include "hrtse/wav.hpp"

namespace hrtse {

struct StftConfig {
    int sample_rate_hz = 16000;
    double window_ms = 20.0;
    double hop_ms = 10.0;
    int dft_size = 320;

    int window_samples() const {
        return int(window_ms * sample_rate_hz / 1000.0 + 0.5);
    }
    int hop_samples() const {
        return int(hop_ms * sample_rate_hz / 1000.0 + 0.5);
    }
    int bins() const { return dft_size / 2 + 1; }

    // Enforces the frame geometry the rest of the system assumes:
    // window == 2 * hop (gives constant overlap-add for periodic Hann)
    // and dft_size >= window.
    void validate() const;

    bool operator==(const StftConfig&) const = default;
};

// Split-complex spectrogram, row-major [frames x bins].
struct ComplexSpectrogram {
    int frames = 0;
    int bins = 0;
    std::vector<float> re, im;
    StftConfig config;

    float& at_re(int t, int f) { return re[size_t(t) * bins + f]; }
    float& at_im(int t, int f) { return im[size_t(t) * bins + f]; }
    float at_re(int t, int f) const { return re[size_t(t) * bins + f]; }
    float at_im(int t, int f) const { return im[size_t(t) * bins + f]; }
};

// Periodic Hann of length n: w[k] = 0.5 - 0.5 cos(2 pi k / n).
std::vector<double> hann_periodic(int n);

// Frames that fit fully inside n samples. Throws ValueError when the wave is
// shorter than one window.
int num_frames(int n_samples, const StftConfig& cfg);

ComplexSpectrogram stft(const Waveform& w, const StftConfig& cfg);

// Inverse with synthesis windowing and squared-window envelope division.
// out_len < 0 reconstructs the natural length (frames-1)*hop + window.
Waveform istft(const ComplexSpectrogram& spec, int out_len = -1);

// Magnitude compression |S|^p with phase preserved; p must lie in (0, 1].
ComplexSpectrogram power_compress(const ComplexSpectrogram& spec, double p);

struct FbankConfig {
    int n_mels = 80;
    double fmin_hz = 20.0;
    double fmax_hz = 7600.0;
    double floor = 1e-10;   // applied to mel energies before log
    bool mean_norm = false; // per-utterance mean subtraction, off by default
};

struct FbankFeatures {
    int frames = 0;
    int channels = 0;
    std::vector<float> values;  // row-major [frames x channels]
    float at(int t, int c) const { return values[size_t(t) * channels + c]; }
};

// Log-mel filterbank energies of the power spectrum (natural log).
FbankFeatures fbank(const Waveform& w, const StftConfig& cfg,
                    const FbankConfig& fcfg = {});

// Triangular mel filter weights, row-major [n_mels x bins].
std::vector<double> mel_filter_matrix(const StftConfig& cfg,
                                      const FbankConfig& fcfg);

// ---- double-precision path -------------------------------------------
// The losses differentiate through the analysis transform; those gradients
// are validated against finite differences, which needs double end to end.

struct SpectrogramD {
    int frames = 0;
    int bins = 0;
    std::vector<double> re, im;
};

SpectrogramD stft_double(const std::vector<double>& x, const StftConfig& cfg);

// Adjoint of the linear map x -> (re, im): maps cotangents on the spectrum
// back to a cotangent on the n input samples.
std::vector<double> stft_adjoint_double(const SpectrogramD& cot,
                                        const StftConfig& cfg, int n_samples);

}  // namespace hrtse
