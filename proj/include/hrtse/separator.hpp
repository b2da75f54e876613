#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hrtse/modules.hpp"
#include "hrtse/stft.hpp"
#include "hrtse/wav.hpp"

namespace hrtse {

enum class FusionMode { local, global, hr };

FusionMode fusion_mode_from_string(const std::string& s);
std::string to_string(FusionMode m);

struct SeparatorConfig {
    std::vector<int> enc_channels{16, 32, 64, 128, 256};
    std::vector<int> local_channels{16, 32, 64, 128};
    int bins = 161;
    int input_channels = 4;        // magnitude, real, imag, compressed magnitude
    int local_input_channels = 2;  // anchor magnitude + frequency-ARN output
    int frame_arn_hidden = 32;
    int arn_blocks = 1;
    int embedding_dim = 256;
    int df_time_taps = 5;  // centered on both axes
    int df_freq_taps = 3;
    std::string profile = "full";

    static SeparatorConfig full();
    static SeparatorConfig desk();
    void validate() const;

    // frequency sizes after each encoder stage: 161 -> 80 -> 39 -> 19 -> 9 -> 4
    std::vector<int> freq_chain() const;
    int bottleneck_freq() const { return freq_chain().back(); }
    int arn_width() const { return enc_channels.back() * bottleneck_freq(); }
    int df_channels() const { return 2 * df_time_taps * df_freq_taps; }
};

// Records what each fusion site actually received during a forward pass,
// plus the tensor shape at every stage for conformance checks.
struct ForwardTrace {
    std::string mode;
    double local_feature_abs_mean = 0.0;  // mean |averaged local feature|
    double global_deviation_from_ones = 0.0;
    double bottleneck_in_norm = 0.0;
    double bottleneck_out_norm = 0.0;
    std::vector<std::vector<int>> encoder_shapes;  // after each conv stage
    std::vector<std::vector<int>> decoder_shapes;
    std::vector<std::vector<int>> local_shapes;    // anchor-side conv stages
    std::vector<int> bottleneck_shape;             // [T, arn_width]
};

// Anchor-side extractor: per-frame frequency-axis recurrent-attention block,
// then a 4-layer strided conv encoder whose per-layer outputs, averaged over
// time, become the local speaker features.
class LocalNet {
  public:
    LocalNet() = default;
    LocalNet(nn::Params& P, const SeparatorConfig& cfg, Rng& rng);

    struct Output {
        ad::Var arn_out;               // [T2, bins]
        std::vector<ad::Var> levels;   // [C_k, T2, F_k], 4 levels
        std::vector<ad::Var> averaged; // [C_k, F_k]
    };
    Output forward(const ComplexSpectrogram& anchor) const;

    // frequency-axis pass alone (exposed for frame-independence tests)
    ad::Var arn_frequency(const ad::Var& anchor_mag) const;

  private:
    SeparatorConfig cfg_;
    nn::ArnBlock frame_arn_;
    nn::Linear frame_out_;
    std::vector<nn::Conv2dDownLayer> convs_;
    std::vector<nn::ChannelNormLayer> norms_;
    std::vector<nn::PReluLayer> acts_;
};

// [input_channels, T, bins] stack: magnitude, real, imag, compressed magnitude.
Tensor build_separator_input(const ComplexSpectrogram& mix, int input_channels);

// CRN separator: conv encoder with local-feature concatenation, a recurrent-
// attention bottleneck with multiplicative global fusion, deconv decoder with
// skips, and a multi-tap complex filter head.
class Separator {
  public:
    Separator() = default;
    Separator(nn::Params& P, const SeparatorConfig& cfg, Rng& rng);

    // local: averaged local features per level (zeros for the global-only
    // mode); g: fusion vector [arn_width]. Returns filter coefficients
    // [df_channels, T, bins].
    ad::Var forward(const ComplexSpectrogram& mix,
                    const std::vector<ad::Var>& local, const ad::Var& g,
                    ForwardTrace* trace = nullptr) const;

  private:
    SeparatorConfig cfg_;
    std::vector<nn::Conv2dDownLayer> enc_;
    std::vector<nn::ChannelNormLayer> enc_norms_;
    std::vector<nn::PReluLayer> enc_acts_;
    std::vector<nn::ArnBlock> arn_;
    std::vector<nn::ConvT2dUpLayer> dec_;
    std::vector<nn::ChannelNormLayer> dec_norms_;
    std::vector<nn::PReluLayer> dec_acts_;
};

// S_hat(t,f) = sum_ij H(t,f,i,j) * M(t+i-Lt/2, f+j-Lf/2), zero padded.
// coeffs: [2*Lt*Lf, T, F]; tap (i,j) stores its real part in channel
// 2*(i*Lf+j) and its imaginary part in the channel after it.
ComplexSpectrogram apply_deep_filter(const Tensor& coeffs,
                                     const ComplexSpectrogram& mix, int lt,
                                     int lf);

// Differentiable version; the mixture enters as constants.
std::pair<ad::Var, ad::Var> deep_filter_tape(const ad::Var& coeffs,
                                             const ComplexSpectrogram& mix,
                                             int lt, int lf);

// Synthesis back to samples on the tape (mirrors istft): inverse DFT as a
// constant matrix product, overlap-add, envelope division.
ad::Var istft_tape(const ad::Var& re, const ad::Var& im, const StftConfig& cfg,
                   int out_len);

// The jointly trained trio: local net + separator + embedding projection.
class TseModel {
  public:
    TseModel(const SeparatorConfig& cfg, uint64_t init_seed);

    nn::Params& params() { return params_; }
    const nn::Params& params() const { return params_; }
    const SeparatorConfig& config() const { return cfg_; }

    // global_emb may be null: the fusion vector is then all-ones (neutral),
    // which is also what mode=local uses. mode=global skips the local net and
    // feeds zero features.
    ad::Var forward_coeffs(const ComplexSpectrogram& mix,
                           const ComplexSpectrogram& anchor,
                           const Tensor* global_emb, FusionMode mode,
                           ForwardTrace* trace = nullptr) const;

    std::pair<ad::Var, ad::Var> estimate_spec(const ComplexSpectrogram& mix,
                                              const ComplexSpectrogram& anchor,
                                              const Tensor* global_emb,
                                              FusionMode mode,
                                              ForwardTrace* trace = nullptr) const;

    Waveform separate(const Waveform& mixture, const Waveform& anchor,
                      const Tensor* global_emb, FusionMode mode,
                      const StftConfig& stft_cfg,
                      ForwardTrace* trace = nullptr) const;

    const LocalNet& local_net() const { return local_; }

  private:
    SeparatorConfig cfg_;
    nn::Params params_;
    LocalNet local_;
    Separator sep_;
    nn::Linear proj_;  // embedding_dim -> arn_width
};

}  // namespace hrtse
