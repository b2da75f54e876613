#include "hrtse/embedder.hpp"

#include <algorithm>
#include <cmath>

#include "hrtse/common.hpp"
#include "hrtse/wav.hpp"

namespace hrtse {

EcapaConfig EcapaConfig::full() { return EcapaConfig{}; }

EcapaConfig EcapaConfig::desk() {
    EcapaConfig c;
    c.channels = 256;
    c.se_channels = 16;
    c.att_bottleneck = 32;
    return c;
}

void EcapaConfig::validate() const {
    if (n_mels <= 0 || channels <= 0 || embedding_dim <= 0)
        throw ConfigError("embedder config: dimensions must be positive");
    if (kernels.size() != 4 || dilations.size() != 4)
        throw ConfigError("embedder config: expected 4 kernels and 4 dilations");
    if (channels % res2net_scale != 0)
        throw ConfigError("embedder config: channels not divisible by scale");
    if (se_channels <= 0 || att_bottleneck <= 0)
        throw ConfigError("embedder config: bottlenecks must be positive");
}

Ecapa::Ecapa(nn::Params& P, const EcapaConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    int C = cfg_.channels;
    in_block_ = nn::TdnnBlock(P, "emb.in", cfg_.n_mels, C, cfg_.kernels[0],
                              cfg_.dilations[0], rng);
    for (int i = 1; i <= 3; ++i)
        blocks_.emplace_back(P, "emb.block" + std::to_string(i), C, C,
                             cfg_.kernels[size_t(i)], cfg_.dilations[size_t(i)],
                             cfg_.res2net_scale, cfg_.se_channels, true, rng);
    mfa_ = nn::TdnnBlock(P, "emb.mfa", 3 * C, 3 * C, 1, 1, rng);
    pool_ = nn::AttentiveStatsPool(P, "emb.pool", 3 * C, cfg_.att_bottleneck, rng);
    out_ = nn::Linear(P, "emb.out", 6 * C, cfg_.embedding_dim, rng);
}

ad::Var Ecapa::forward(const ad::Var& fb, ad::Var* att_weights) const {
    if (fb->value.ndim() != 2 || fb->value.dim(1) != cfg_.n_mels)
        throw ShapeError("Ecapa: expected [T, " + std::to_string(cfg_.n_mels) +
                         "] features, got " + fb->value.shape_str());
    ad::Var x = ad::transpose(fb);  // [n_mels, T]
    ad::Var h0 = in_block_(x);
    ad::Var h1 = blocks_[0](h0);
    ad::Var h2 = blocks_[1](h1);
    ad::Var h3 = blocks_[2](h2);
    ad::Var cat = ad::concat({h1, h2, h3}, 0);
    ad::Var pooled = pool_(mfa_(cat), att_weights);
    return out_(ad::reshape(pooled, {1, 6 * cfg_.channels}));
}

Tensor fbank_tensor(const FbankFeatures& feats) {
    Tensor t = Tensor::zeros({feats.frames, feats.channels});
    t.data.assign(feats.values.begin(), feats.values.end());
    return t;
}

Tensor Ecapa::embed(const FbankFeatures& feats) const {
    ad::NoGradGuard ng;
    ad::Var e = forward(ad::leaf(fbank_tensor(feats)));
    Tensor out = e->value;
    out.shape = {cfg_.embedding_dim};
    return out;
}

namespace {

Waveform crop_wave(const Waveform& w, int samples, Rng& rng, bool center) {
    if (int(w.size()) <= samples) return w;
    int lo = center ? (int(w.size()) - samples) / 2
                    : rng.uniform_int(0, int(w.size()) - samples - 1);
    Waveform out;
    out.sample_rate_hz = w.sample_rate_hz;
    out.samples.assign(w.samples.begin() + lo, w.samples.begin() + lo + samples);
    return out;
}

}  // namespace

EmbedderTrainLog train_embedder(const Manifest& manifest,
                                const EmbedderTrainConfig& cfg, nn::Params& P,
                                Ecapa& model) {
    auto speakers = manifest.speakers();
    if (speakers.size() < 2)
        throw ValueError("embedder training needs at least 2 speakers");

    std::vector<int> train_utts;
    std::vector<int> labels;
    for (size_t i = 0; i < manifest.utterances.size(); ++i) {
        const auto& u = manifest.utterances[i];
        if (u.split != "train") continue;
        auto it = std::find(speakers.begin(), speakers.end(), u.speaker_id);
        train_utts.push_back(int(i));
        labels.push_back(int(it - speakers.begin()));
    }
    if (train_utts.empty()) throw ValueError("manifest has no train utterances");

    int K = int(speakers.size());
    int E = model.config().embedding_dim;
    Rng rng(cfg.seed);
    ad::Var cls = P.contains("cls.W")
                      ? P.find("cls.W")
                      : P.add("cls.W", nn::init_uniform(rng, {K, E}, E));

    nn::Adam opt(cfg.lr);
    int crop = int(cfg.crop_seconds * cfg.stft.sample_rate_hz);

    // features are deterministic: cache one random crop per utterance per epoch
    auto feats_of = [&](int utt_idx, Rng& r) {
        const auto& u = manifest.utterances[size_t(utt_idx)];
        Waveform w = read_wav(manifest.wav_path(u.utterance_id));
        return fbank(crop_wave(w, crop, r, false), cfg.stft, cfg.fbank);
    };

    EmbedderTrainLog log;
    log.class_names = speakers;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = rng.fork(uint64_t(epoch) + 1);
        auto order = erng.permutation(int(train_utts.size()));
        double loss_sum = 0.0;
        int loss_n = 0, correct = 0, seen = 0;
        for (size_t start = 0; start < order.size();
             start += size_t(cfg.batch_size)) {
            size_t stop = std::min(order.size(), start + size_t(cfg.batch_size));
            std::vector<ad::Var> rows;
            std::vector<int> targets;
            for (size_t k = start; k < stop; ++k) {
                int idx = train_utts[size_t(order[k])];
                rows.push_back(model.forward(
                    ad::leaf(fbank_tensor(feats_of(idx, erng)))));
                targets.push_back(labels[size_t(order[k])]);
            }
            int B = int(rows.size());
            ad::Var emb = B == 1 ? rows[0] : ad::concat(rows, 0);
            ad::Var cosine = ad::matmul(ad::l2_normalize_rows(emb),
                                        ad::transpose(ad::l2_normalize_rows(cls)));
            Tensor mg = Tensor::zeros({B, K});
            for (int r = 0; r < B; ++r)
                mg.at(r, targets[size_t(r)]) = float(-cfg.margin);
            ad::Var logits = ad::scale(ad::add_const(cosine, mg), cfg.am_scale);
            ad::Var loss = ad::cross_entropy_rows(logits, targets);
            ad::backward(loss);
            opt.step(P);

            loss_sum += loss->value.at(0);
            ++loss_n;
            for (int r = 0; r < B; ++r) {
                int best = 0;
                for (int c = 1; c < K; ++c)
                    if (cosine->value.at(r, c) > cosine->value.at(r, best))
                        best = c;
                correct += best == targets[size_t(r)];
                ++seen;
            }
        }
        log.epoch_loss.push_back(loss_sum / std::max(1, loss_n));
        log.epoch_accuracy.push_back(double(correct) / std::max(1, seen));
    }

    // final accuracy with frozen weights on uncropped train utterances
    int correct = 0;
    {
        ad::NoGradGuard ng;
        for (size_t k = 0; k < train_utts.size(); ++k) {
            const auto& u = manifest.utterances[size_t(train_utts[k])];
            Waveform w = read_wav(manifest.wav_path(u.utterance_id));
            Tensor e = model.embed(fbank(w, cfg.stft, cfg.fbank));
            double en = 0.0;
            for (float v : e.data) en += double(v) * v;
            en = std::sqrt(en) + 1e-12;
            int best = 0;
            double best_cos = -2.0;
            for (int c = 0; c < K; ++c) {
                double dot = 0.0, wn = 0.0;
                for (int j = 0; j < E; ++j) {
                    dot += double(e.at(j)) * cls->value.at(c, j);
                    wn += double(cls->value.at(c, j)) * cls->value.at(c, j);
                }
                double cosv = dot / (en * (std::sqrt(wn) + 1e-12));
                if (cosv > best_cos) {
                    best_cos = cosv;
                    best = c;
                }
            }
            correct += speakers[size_t(best)] == u.speaker_id;
        }
    }
    log.final_accuracy = double(correct) / double(train_utts.size());
    return log;
}

}  // namespace hrtse
