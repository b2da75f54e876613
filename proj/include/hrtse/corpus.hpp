#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "hrtse/wav.hpp"

namespace hrtse {

struct UtteranceRecord {
    std::string utterance_id;
    std::string speaker_id;
    std::string path;  // relative to corpus_root
    double duration_s = 0.0;
    std::string split;  // train | val | test
};

struct MixtureSpec {
    std::string mixture_id;
    std::string target_utt;
    std::string interferer_utt;
    std::string anchor_utt;
    double gain_db = 0.0;  // target-to-interferer ratio over the overlap
    std::string split;
};

struct Manifest {
    int format_version = 1;
    std::string corpus_root;
    std::vector<UtteranceRecord> utterances;
    std::vector<MixtureSpec> mixtures;

    const UtteranceRecord& utterance(const std::string& id) const;
    bool has_utterance(const std::string& id) const;
    std::string wav_path(const std::string& utterance_id) const;
    std::vector<int> mixtures_of_split(const std::string& split) const;
    std::vector<std::string> speakers() const;
    std::vector<int> utterances_of_speaker(const std::string& speaker) const;

    // Structural checks: ids unique, references resolve, target and
    // interferer speakers differ, anchor matches the target speaker and is
    // never the target utterance itself.
    void validate() const;
};

void save_manifest(const Manifest& m, const std::string& path);
Manifest load_manifest(const std::string& path);

// Truncates both sources to the overlap, scales the interferer so the
// target-to-interferer energy ratio over that overlap equals gain_db, and
// returns (mixture, target, interferer) with mixture = target + interferer
// exactly in float arithmetic.
std::tuple<Waveform, Waveform, Waveform> simulate_mixture(const Waveform& target,
                                                          const Waveform& interferer,
                                                          double gain_db);

// Uniform draw over the speaker's other utterances; throws when the speaker
// has no candidate besides the excluded one.
const UtteranceRecord& select_anchor(const Manifest& m,
                                     const std::string& speaker_id,
                                     const std::string& exclude_utt,
                                     uint64_t seed);

struct MixtureExample {
    Waveform mixture, target, interferer, anchor;
    std::string mixture_id, target_speaker;
};

MixtureExample realize_mixture(const Manifest& m, const MixtureSpec& spec);

struct ToyCorpusConfig {
    int n_speakers = 8;
    int utts_per_speaker = 10;
    double min_duration_s = 3.0;
    double max_duration_s = 6.0;
    double gain_low_db = -5.0;
    double gain_high_db = 5.0;
    int train_mixtures = 96;
    int val_mixtures = 16;
    int test_mixtures = 24;
    int sample_rate_hz = 16000;
    uint64_t seed = 17;
};

// Writes <out_dir>/<speaker>/<utt>.wav (float32) plus manifest.jsonl and
// returns the manifest. Same config and seed regenerate identical bytes.
Manifest generate_toy_corpus(const ToyCorpusConfig& cfg,
                             const std::string& out_dir);

// Deterministic epoch schedule over one split's mixtures. With shuffling,
// examples are bucketed by overlap length so batchmates have similar
// durations; each epoch covers every mixture exactly once.
class BatchIterator {
  public:
    BatchIterator(const Manifest& m, const std::string& split, int batch_size,
                  uint64_t seed, bool shuffle);

    // Batches of positions into split_mixtures() for the given epoch.
    std::vector<std::vector<int>> epoch_batches(int epoch) const;

    const std::vector<int>& split_mixtures() const { return mix_idx_; }
    int overlap_samples(int pos) const { return lengths_[size_t(pos)]; }
    int num_batches() const;

  private:
    const Manifest* manifest_;
    std::vector<int> mix_idx_;   // indices into manifest->mixtures
    std::vector<int> lengths_;   // overlap length per position, in samples
    int batch_size_;
    uint64_t seed_;
    bool shuffle_;
};

}  // namespace hrtse
