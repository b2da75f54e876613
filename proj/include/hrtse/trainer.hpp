#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hrtse/corpus.hpp"
#include "hrtse/embedder.hpp"
#include "hrtse/losses.hpp"
#include "hrtse/separator.hpp"

namespace hrtse {

// config serialization shared by checkpoints, logs, and the CLI
nlohmann::json stft_to_json(const StftConfig& c);
StftConfig stft_from_json(const nlohmann::json& j);
nlohmann::json fbank_to_json(const FbankConfig& c);
FbankConfig fbank_from_json(const nlohmann::json& j);

struct TrainConfig {
    std::string profile = "desk";  // full | desk
    FusionMode mode = FusionMode::hr;
    double lr = 1e-3;
    int batch_size = 8;
    int plateau_epochs = 2;
    bool lr_halving = true;
    int max_epochs = 30;
    double min_lr = 1e-5;
    double crop_seconds = 1.0;
    double anchor_seconds = 1.0;  // fixed center crop for local features
    double grad_clip = 5.0;
    uint64_t seed = 1;
    bool determinism = true;
    double time_limit_s = 0.0;  // 0 = unlimited
    std::string manifest_path;
    std::string embedder_ckpt;
    std::string out_dir;
    LossConfig loss;

    SeparatorConfig separator_config() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    void validate() const;
};

// lr' = lr/2 iff the trailing `plateau` validation losses all failed to
// improve on the best value seen before them.
double lr_step(const std::vector<double>& val_history, double lr, int plateau);

struct EpochStats {
    int epoch = 0;
    double train_total = 0.0, train_si = 0.0, train_mag = 0.0, train_ri = 0.0;
    double val_total = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

struct TrainingLog {
    std::vector<EpochStats> epochs;
    std::vector<double> lr_trace;
    uint64_t seed = 0;
    double wall_clock_s = 0.0;
    int best_epoch = 0;
    double best_val = 0.0;
    bool stopped_by_time = false;
    nlohmann::json config_echo;

    nlohmann::json to_json() const;
};

// Frozen embedder loaded from its checkpoint.
struct EmbedderBundle {
    EcapaConfig cfg;
    std::unique_ptr<nn::Params> params;
    std::unique_ptr<Ecapa> model;
    uint64_t weight_hash = 0;
    nlohmann::json header;
};

EmbedderBundle load_embedder(const std::string& ckpt_path);
void save_embedder(const std::string& ckpt_path, const nn::Params& params,
                   const EcapaConfig& cfg, const nlohmann::json& extra);

struct TrainResult {
    TrainingLog log;
    std::string checkpoint_path;
};

// Adam training of {separator, local net, fusion projection} on the total
// loss, with per-epoch validation, plateau-halved learning rate, and a
// best-by-validation checkpoint.
TrainResult train_tse(const TrainConfig& cfg);

// Trained extractor ready for separate()/eval: model + frozen embedder.
struct TseBundle {
    SeparatorConfig sep_cfg;
    FusionMode mode = FusionMode::hr;
    std::unique_ptr<TseModel> model;
    EmbedderBundle embedder;
    StftConfig stft;
    FbankConfig fbank_cfg;
    nlohmann::json header;

    Waveform separate(const Waveform& mixture, const Waveform& anchor,
                      ForwardTrace* trace = nullptr) const;
};

TseBundle load_tse(const std::string& tse_ckpt, const std::string& embedder_ckpt);

// ---- evaluation -----------------------------------------------------------

struct UttMetrics {
    std::string id;
    double si_snr_db = 0.0;
    double si_snri_db = 0.0;  // improvement over the unprocessed mixture
    double stoi_v = 0.0;
    double estoi_v = 0.0;
    bool tsos = false;
    std::optional<double> pesq;
};

struct MetricsReport {
    std::vector<UttMetrics> rows;
    double mean_si_snr = 0.0, mean_si_snri = 0.0;
    double mean_stoi = 0.0, mean_estoi = 0.0;
    double tsos_rate = 0.0;
    std::optional<double> mean_pesq;

    void finalize();  // recompute aggregates from rows
    nlohmann::json to_json() const;
};

struct EvalConfig {
    std::string pesq_cmd;  // empty -> column omitted
    std::string tmp_dir = "/tmp/hrtse";
};

using Estimator = std::function<Waveform(const MixtureExample&)>;

MetricsReport evaluate_set(const Manifest& manifest, const std::string& split,
                           const Estimator& estimate,
                           const EvalConfig& cfg = {});

Estimator model_estimator(const TseBundle& bundle);
Estimator mixture_passthrough();

// CSV with fixed column order plus a JSON aggregate next to it.
void write_report(const MetricsReport& report, const std::string& csv_path);

}  // namespace hrtse
