#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hrtse/trainer.hpp"

namespace hrtse {

// Side-by-side comparison of the three fusion modes against the raw mixture:
// each mode is trained from scratch per seed with an otherwise identical
// recipe, then scored on one held-out split.

struct AblationConfig {
    TrainConfig base;  // mode, seed, and out_dir are overridden per run
    std::vector<uint64_t> seeds{1, 2, 3};
    std::string eval_split = "test";
    std::string pesq_cmd;
    std::string out_dir;

    void validate() const;
};

struct AblationCell {
    double si_snr_db = 0.0;
    double stoi_v = 0.0;
    double estoi_v = 0.0;
    double tsos_rate = 0.0;
    std::optional<double> pesq;
};

struct AblationSeedRun {
    uint64_t seed = 0;
    std::map<std::string, AblationCell> by_mode;
    bool hr_leads = false;  // hr SI-SNR >= both single-feature modes
};

struct AblationResult {
    std::vector<std::string> modes{"local", "global", "hr"};
    AblationCell mixture;  // seed-independent passthrough row
    std::map<std::string, AblationCell> mean_by_mode;
    std::vector<AblationSeedRun> runs;
    int seeds_with_expected_ordering = 0;
    bool ordering_warning = false;  // expected ordering held in < 2/3 seeds

    std::string table_text() const;
    nlohmann::json to_json() const;
};

// Pure aggregation over per-seed scores; split out so the bookkeeping can be
// exercised without any training.
AblationResult summarize_ablation(const AblationCell& mixture,
                                  const std::vector<AblationSeedRun>& runs);

AblationResult run_ablation(const AblationConfig& cfg);

// ablation.json, ablation.txt, and an SI-SNR bar chart under `dir`
void write_ablation_report(const AblationResult& r, const std::string& dir);

}  // namespace hrtse
