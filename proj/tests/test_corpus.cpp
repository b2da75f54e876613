#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "hrtse/common.hpp"
#include "hrtse/corpus.hpp"
#include "hrtse/rng.hpp"

using namespace hrtse;
namespace fs = std::filesystem;

namespace {

ToyCorpusConfig small_cfg() {
    ToyCorpusConfig cfg;
    cfg.n_speakers = 3;
    cfg.utts_per_speaker = 4;
    cfg.min_duration_s = 1.2;
    cfg.max_duration_s = 2.0;
    cfg.train_mixtures = 10;
    cfg.val_mixtures = 3;
    cfg.test_mixtures = 3;
    cfg.seed = 99;
    return cfg;
}

std::string file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("toy corpus generates valid audio and regenerates bit-identically") {
    std::string d1 = "/tmp/hrtse_corpus_a", d2 = "/tmp/hrtse_corpus_b";
    fs::remove_all(d1);
    fs::remove_all(d2);
    auto cfg = small_cfg();
    Manifest m1 = generate_toy_corpus(cfg, d1);
    Manifest m2 = generate_toy_corpus(cfg, d2);

    CHECK(m1.utterances.size() == 12);
    CHECK(m1.mixtures.size() == 16);
    for (const auto& u : m1.utterances) {
        CHECK(u.duration_s >= cfg.min_duration_s - 0.01);
        CHECK(u.duration_s <= cfg.max_duration_s + 0.01);
        Waveform w = read_wav(m1.wav_path(u.utterance_id));
        CHECK(w.sample_rate_hz == 16000);
        float peak = 0.0f;
        double energy = 0.0;
        for (float s : w.samples) {
            peak = std::max(peak, std::fabs(s));
            energy += double(s) * s;
        }
        CHECK(peak <= 1.0f);
        CHECK(energy > 0.0);
    }
    // Byte-level determinism of audio and manifest (modulo corpus_root path).
    for (const auto& u : m1.utterances) {
        CHECK(file_bytes(m1.wav_path(u.utterance_id)) ==
              file_bytes(m2.wav_path(u.utterance_id)));
    }
    REQUIRE(m1.mixtures.size() == m2.mixtures.size());
    for (size_t i = 0; i < m1.mixtures.size(); ++i) {
        CHECK(m1.mixtures[i].target_utt == m2.mixtures[i].target_utt);
        CHECK(m1.mixtures[i].gain_db == m2.mixtures[i].gain_db);
    }
    // Every speaker holds out one val and one test utterance.
    for (const auto& spk : m1.speakers()) {
        int train = 0, val = 0, test = 0;
        for (int i : m1.utterances_of_speaker(spk)) {
            const auto& s = m1.utterances[size_t(i)].split;
            train += s == "train";
            val += s == "val";
            test += s == "test";
        }
        CHECK(train == 2);
        CHECK(val == 1);
        CHECK(test == 1);
    }
}

TEST_CASE("manifest save/load round trip and validation") {
    std::string dir = "/tmp/hrtse_corpus_a";
    Manifest m = load_manifest(dir + "/manifest.jsonl");
    std::string copy = "/tmp/hrtse_manifest_copy.jsonl";
    save_manifest(m, copy);
    Manifest m2 = load_manifest(copy);
    REQUIRE(m2.utterances.size() == m.utterances.size());
    REQUIRE(m2.mixtures.size() == m.mixtures.size());
    for (size_t i = 0; i < m.utterances.size(); ++i) {
        CHECK(m2.utterances[i].utterance_id == m.utterances[i].utterance_id);
        CHECK(m2.utterances[i].duration_s == m.utterances[i].duration_s);
        CHECK(m2.utterances[i].split == m.utterances[i].split);
    }

    Manifest bad = m;
    bad.mixtures[0].interferer_utt = bad.mixtures[0].target_utt;
    CHECK_THROWS_AS(bad.validate(), ValueError);

    bad = m;
    bad.mixtures[0].target_utt = "nope";
    CHECK_THROWS_AS(bad.validate(), ValueError);

    bad = m;
    bad.mixtures[0].anchor_utt = bad.mixtures[0].target_utt;
    CHECK_THROWS_AS(bad.validate(), ValueError);

    bad = m;
    bad.utterances.push_back(bad.utterances[0]);
    CHECK_THROWS_AS(bad.validate(), ValueError);

    CHECK_THROWS_AS(load_manifest("/tmp/hrtse_missing.jsonl"), IoError);
}

TEST_CASE("simulate_mixture hits the requested ratio and adds exactly") {
    Rng rng(5);
    Waveform a, b;
    a.samples.resize(8000);
    b.samples.resize(9000);
    for (auto& v : a.samples) v = 0.1f * rng.normalf();
    for (auto& v : b.samples) v = 0.4f * rng.normalf();

    for (double gain : {-5.0, 0.0, 3.7}) {
        auto [mix, t, i] = simulate_mixture(a, b, gain);
        REQUIRE(mix.size() == 8000);
        REQUIRE(t.size() == 8000);
        REQUIRE(i.size() == 8000);
        for (int k = 0; k < mix.size(); ++k)
            CHECK(mix.samples[size_t(k)] ==
                  t.samples[size_t(k)] + i.samples[size_t(k)]);  // exact in float
        double et = 0.0, ei = 0.0;
        for (int k = 0; k < 8000; ++k) {
            et += double(t.samples[size_t(k)]) * t.samples[size_t(k)];
            ei += double(i.samples[size_t(k)]) * i.samples[size_t(k)];
        }
        CHECK(10.0 * std::log10(et / ei) == doctest::Approx(gain).epsilon(1e-4));
    }

    Waveform z;
    z.samples.assign(8000, 0.0f);
    CHECK_THROWS_AS(simulate_mixture(a, z, 0.0), ValueError);
    CHECK_THROWS_AS(simulate_mixture(z, b, 0.0), ValueError);
}

TEST_CASE("anchor selection is uniform, deterministic, and never the target") {
    Manifest m = load_manifest("/tmp/hrtse_corpus_a/manifest.jsonl");
    std::string spk = m.utterances[0].speaker_id;
    std::string excl = m.utterances[0].utterance_id;

    std::map<std::string, int> counts;
    for (uint64_t s = 0; s < 1000; ++s) {
        const auto& a = select_anchor(m, spk, excl, s);
        CHECK(a.speaker_id == spk);
        CHECK(a.utterance_id != excl);
        counts[a.utterance_id]++;
    }
    CHECK(counts.size() == 3);  // 4 utterances minus the excluded one
    for (const auto& [id, c] : counts)
        CHECK(std::fabs(c / 1000.0 - 1.0 / 3.0) < 0.05);

    CHECK(select_anchor(m, spk, excl, 42).utterance_id ==
          select_anchor(m, spk, excl, 42).utterance_id);

    // A speaker with a single utterance has no anchor material.
    Manifest tiny;
    tiny.corpus_root = "/tmp";
    tiny.utterances.push_back({"u0", "solo", "u0.wav", 3.0, "train"});
    CHECK_THROWS_AS(select_anchor(tiny, "solo", "u0", 1), ValueError);
}

TEST_CASE("realize_mixture loads waves and applies the spec") {
    Manifest m = load_manifest("/tmp/hrtse_corpus_a/manifest.jsonl");
    const auto& spec = m.mixtures[0];
    MixtureExample ex = realize_mixture(m, spec);
    CHECK(ex.mixture.size() == ex.target.size());
    CHECK(ex.mixture.size() ==
          std::min(int(m.utterance(spec.target_utt).duration_s * 16000),
                   int(m.utterance(spec.interferer_utt).duration_s * 16000)));
    CHECK(ex.anchor.size() > 0);
    CHECK(ex.target_speaker == m.utterance(spec.target_utt).speaker_id);
    for (int k = 0; k < ex.mixture.size(); ++k)
        CHECK(ex.mixture.samples[size_t(k)] ==
              ex.target.samples[size_t(k)] + ex.interferer.samples[size_t(k)]);
}

TEST_CASE("batch iterator covers each mixture exactly once per epoch") {
    ToyCorpusConfig cfg = small_cfg();
    cfg.train_mixtures = 100;
    cfg.seed = 123;
    std::string dir = "/tmp/hrtse_corpus_iter";
    fs::remove_all(dir);
    Manifest m = generate_toy_corpus(cfg, dir);

    BatchIterator it(m, "train", 8, 7, true);
    CHECK(it.num_batches() == 13);  // 100 / 8 rounded up

    for (int epoch : {0, 1, 5}) {
        auto batches = it.epoch_batches(epoch);
        REQUIRE(int(batches.size()) == 13);
        std::set<int> seen;
        for (const auto& b : batches) {
            CHECK(int(b.size()) <= 8);
            for (int i : b) {
                CHECK(seen.insert(i).second);  // no duplicates
            }
        }
        CHECK(int(seen.size()) == 100);
    }

    // Determinism: a second iterator with the same seed gives the same plan.
    BatchIterator it2(m, "train", 8, 7, true);
    CHECK(it.epoch_batches(3) == it2.epoch_batches(3));
    // Different seeds give different plans (overwhelmingly likely).
    BatchIterator it3(m, "train", 8, 8, true);
    CHECK(it.epoch_batches(0) != it3.epoch_batches(0));

    // Without shuffling the order is the manifest order.
    BatchIterator lin(m, "train", 8, 7, false);
    auto batches = lin.epoch_batches(0);
    int expect = 0;
    for (const auto& b : batches)
        for (int i : b) CHECK(i == expect++);

    // Shuffled batches group similar overlap lengths together.
    auto shuffled = it.epoch_batches(0);
    std::vector<int> all_lengths;
    for (int p = 0; p < 100; ++p) all_lengths.push_back(it.overlap_samples(p));
    std::sort(all_lengths.begin(), all_lengths.end());
    double worst_window = 0.0;
    for (size_t s = 0; s + 8 <= all_lengths.size(); ++s)
        worst_window = std::max(
            worst_window, double(all_lengths[s + 7] - all_lengths[s]));
    for (const auto& b : shuffled) {
        int lo = it.overlap_samples(b[0]), hi = lo;
        for (int i : b) {
            lo = std::min(lo, it.overlap_samples(i));
            hi = std::max(hi, it.overlap_samples(i));
        }
        CHECK(double(hi - lo) <= worst_window + 1e-9);
    }
}
