#pragma once

#include <string>
#include <vector>

#include "hrtse/corpus.hpp"
#include "hrtse/modules.hpp"
#include "hrtse/stft.hpp"

namespace hrtse {

// Global speaker-embedding network: TDNN input block, three squeeze-excitation
// Res2Net blocks with rising dilation, multi-layer feature concatenation,
// attentive statistics pooling, and a linear map to the embedding.
struct EcapaConfig {
    int n_mels = 80;
    int channels = 2048;
    int res2net_scale = 8;
    int se_channels = 128;
    int att_bottleneck = 256;
    int embedding_dim = 256;
    std::vector<int> kernels{5, 3, 3, 3};
    std::vector<int> dilations{1, 2, 3, 4};

    static EcapaConfig full();
    static EcapaConfig desk();
    void validate() const;
    bool operator==(const EcapaConfig&) const = default;
};

class Ecapa {
  public:
    Ecapa(nn::Params& P, const EcapaConfig& cfg, Rng& rng);

    // fbank features [T, n_mels] -> embedding [1, embedding_dim]
    ad::Var forward(const ad::Var& fbank, ad::Var* att_weights = nullptr) const;

    // inference convenience: no-grad embedding of raw features
    Tensor embed(const FbankFeatures& feats) const;

    const EcapaConfig& config() const { return cfg_; }

  private:
    EcapaConfig cfg_;
    nn::TdnnBlock in_block_;
    std::vector<nn::SeRes2NetBlock> blocks_;
    nn::TdnnBlock mfa_;
    nn::AttentiveStatsPool pool_;
    nn::Linear out_;
};

Tensor fbank_tensor(const FbankFeatures& feats);

struct EmbedderTrainConfig {
    EcapaConfig ecapa = EcapaConfig::desk();
    StftConfig stft;
    FbankConfig fbank;
    double lr = 1e-3;
    int epochs = 12;
    int batch_size = 16;
    double crop_seconds = 1.2;
    double margin = 0.2;      // additive-margin softmax
    double am_scale = 30.0;
    uint64_t seed = 1;

    EmbedderTrainConfig() { fbank.mean_norm = true; }
};

struct EmbedderTrainLog {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy;
    std::vector<std::string> class_names;
    double final_accuracy = 0.0;
};

// Speaker-classification training over the manifest's train utterances.
// Model weights are registered into P (prefix "emb."), the additive-margin
// classifier under "cls.". Throws ValueError with fewer than two speakers.
EmbedderTrainLog train_embedder(const Manifest& manifest,
                                const EmbedderTrainConfig& cfg, nn::Params& P,
                                Ecapa& model);

}  // namespace hrtse
