#include "hrtse/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>

#include "hrtse/common.hpp"
#include "hrtse/rng.hpp"

namespace hrtse {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- manifest ----------------------------------------------------------

const UtteranceRecord& Manifest::utterance(const std::string& id) const {
    for (const auto& u : utterances)
        if (u.utterance_id == id) return u;
    throw ValueError("manifest: unknown utterance " + id);
}

bool Manifest::has_utterance(const std::string& id) const {
    for (const auto& u : utterances)
        if (u.utterance_id == id) return true;
    return false;
}

std::string Manifest::wav_path(const std::string& utterance_id) const {
    return (fs::path(corpus_root) / utterance(utterance_id).path).string();
}

std::vector<int> Manifest::mixtures_of_split(const std::string& split) const {
    std::vector<int> out;
    for (int i = 0; i < int(mixtures.size()); ++i)
        if (mixtures[size_t(i)].split == split) out.push_back(i);
    return out;
}

std::vector<std::string> Manifest::speakers() const {
    std::vector<std::string> out;
    for (const auto& u : utterances)
        if (std::find(out.begin(), out.end(), u.speaker_id) == out.end())
            out.push_back(u.speaker_id);
    return out;
}

std::vector<int> Manifest::utterances_of_speaker(const std::string& s) const {
    std::vector<int> out;
    for (int i = 0; i < int(utterances.size()); ++i)
        if (utterances[size_t(i)].speaker_id == s) out.push_back(i);
    return out;
}

void Manifest::validate() const {
    std::set<std::string> valid_split{"train", "val", "test"};
    std::map<std::string, const UtteranceRecord*> by_id;
    for (const auto& u : utterances) {
        if (u.utterance_id.empty() || u.speaker_id.empty() || u.path.empty())
            throw ValueError("manifest: utterance with empty fields");
        if (!(u.duration_s > 0.0))
            throw ValueError("manifest: non-positive duration for " + u.utterance_id);
        if (!valid_split.count(u.split))
            throw ValueError("manifest: bad split tag '" + u.split + "'");
        if (!by_id.emplace(u.utterance_id, &u).second)
            throw ValueError("manifest: duplicate utterance id " + u.utterance_id);
    }
    std::set<std::string> mix_ids;
    for (const auto& m : mixtures) {
        if (!mix_ids.insert(m.mixture_id).second)
            throw ValueError("manifest: duplicate mixture id " + m.mixture_id);
        if (!valid_split.count(m.split))
            throw ValueError("manifest: bad split tag '" + m.split + "'");
        auto it_t = by_id.find(m.target_utt);
        auto it_i = by_id.find(m.interferer_utt);
        auto it_a = by_id.find(m.anchor_utt);
        if (it_t == by_id.end() || it_i == by_id.end() || it_a == by_id.end())
            throw ValueError("manifest: mixture " + m.mixture_id +
                             " references a missing utterance");
        if (it_t->second->speaker_id == it_i->second->speaker_id)
            throw ValueError("manifest: mixture " + m.mixture_id +
                             " pairs a speaker with itself");
        if (it_a->second->speaker_id != it_t->second->speaker_id)
            throw ValueError("manifest: anchor speaker mismatch in " + m.mixture_id);
        if (m.anchor_utt == m.target_utt)
            throw ValueError("manifest: anchor equals target utterance in " +
                             m.mixture_id);
        if (!std::isfinite(m.gain_db))
            throw ValueError("manifest: non-finite gain in " + m.mixture_id);
    }
}

void save_manifest(const Manifest& m, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write manifest: " + path);
    json header = {{"kind", "hrtse-manifest"},
                   {"format_version", m.format_version},
                   {"corpus_root", m.corpus_root}};
    f << header.dump() << "\n";
    for (const auto& u : m.utterances) {
        json j = {{"type", "utterance"},
                  {"utterance_id", u.utterance_id},
                  {"speaker_id", u.speaker_id},
                  {"path", u.path},
                  {"duration_s", u.duration_s},
                  {"split", u.split}};
        f << j.dump() << "\n";
    }
    for (const auto& x : m.mixtures) {
        json j = {{"type", "mixture"},
                  {"mixture_id", x.mixture_id},
                  {"target_utt", x.target_utt},
                  {"interferer_utt", x.interferer_utt},
                  {"anchor_utt", x.anchor_utt},
                  {"gain_db", x.gain_db},
                  {"split", x.split}};
        f << j.dump() << "\n";
    }
    if (!f) throw IoError("short write: " + path);
}

Manifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest: " + path);
    std::string line;
    if (!std::getline(f, line)) throw IoError("empty manifest: " + path);
    json header = json::parse(line, nullptr, false);
    if (header.is_discarded() || header.value("kind", "") != "hrtse-manifest")
        throw IoError("manifest header missing or malformed: " + path);
    Manifest m;
    m.format_version = header.value("format_version", -1);
    if (m.format_version != 1)
        throw IoError("unsupported manifest format_version in " + path);
    m.corpus_root = header.value("corpus_root", "");
    // relocated corpora: the audio tree may live elsewhere than at creation
    if (const char* root = std::getenv("HRTSE_CORPUS_ROOT"); root && *root)
        m.corpus_root = root;
    int lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw IoError("manifest parse failure at line " +
                          std::to_string(lineno));
        std::string type = j.value("type", "");
        if (type == "utterance") {
            UtteranceRecord u;
            u.utterance_id = j.at("utterance_id").get<std::string>();
            u.speaker_id = j.at("speaker_id").get<std::string>();
            u.path = j.at("path").get<std::string>();
            u.duration_s = j.at("duration_s").get<double>();
            u.split = j.at("split").get<std::string>();
            m.utterances.push_back(std::move(u));
        } else if (type == "mixture") {
            MixtureSpec x;
            x.mixture_id = j.at("mixture_id").get<std::string>();
            x.target_utt = j.at("target_utt").get<std::string>();
            x.interferer_utt = j.at("interferer_utt").get<std::string>();
            x.anchor_utt = j.at("anchor_utt").get<std::string>();
            x.gain_db = j.at("gain_db").get<double>();
            x.split = j.at("split").get<std::string>();
            m.mixtures.push_back(std::move(x));
        } else {
            throw IoError("manifest record with unknown type at line " +
                          std::to_string(lineno));
        }
    }
    m.validate();
    return m;
}

// ---- mixture simulation --------------------------------------------------

std::tuple<Waveform, Waveform, Waveform> simulate_mixture(
    const Waveform& target, const Waveform& interferer, double gain_db) {
    if (!std::isfinite(gain_db)) throw ValueError("simulate_mixture: bad gain");
    if (target.sample_rate_hz != interferer.sample_rate_hz)
        throw ValueError("simulate_mixture: sample rate mismatch");
    int n = std::min(target.size(), interferer.size());
    if (n == 0) throw ValueError("simulate_mixture: empty source");

    double et = 0.0, ei = 0.0;
    for (int k = 0; k < n; ++k) {
        et += double(target.samples[size_t(k)]) * target.samples[size_t(k)];
        ei += double(interferer.samples[size_t(k)]) *
              interferer.samples[size_t(k)];
    }
    if (et == 0.0 || ei == 0.0)
        throw ValueError("simulate_mixture: silent source in overlap");
    double scale = std::sqrt(et / ei) * std::pow(10.0, -gain_db / 20.0);

    Waveform t, i, mix;
    t.sample_rate_hz = i.sample_rate_hz = mix.sample_rate_hz =
        target.sample_rate_hz;
    t.samples.resize(size_t(n));
    i.samples.resize(size_t(n));
    mix.samples.resize(size_t(n));
    for (int k = 0; k < n; ++k) {
        float tv = target.samples[size_t(k)];
        float iv = float(double(interferer.samples[size_t(k)]) * scale);
        t.samples[size_t(k)] = tv;
        i.samples[size_t(k)] = iv;
        mix.samples[size_t(k)] = tv + iv;
    }
    return {mix, t, i};
}

const UtteranceRecord& select_anchor(const Manifest& m,
                                     const std::string& speaker_id,
                                     const std::string& exclude_utt,
                                     uint64_t seed) {
    std::vector<int> pool;
    for (int i : m.utterances_of_speaker(speaker_id))
        if (m.utterances[size_t(i)].utterance_id != exclude_utt)
            pool.push_back(i);
    if (pool.empty())
        throw ValueError("select_anchor: no anchor candidate for " + speaker_id);
    Rng rng(seed);
    int pick = pool[size_t(rng.uniform_int(0, int(pool.size()) - 1))];
    return m.utterances[size_t(pick)];
}

MixtureExample realize_mixture(const Manifest& m, const MixtureSpec& spec) {
    Waveform t = read_wav(m.wav_path(spec.target_utt));
    Waveform i = read_wav(m.wav_path(spec.interferer_utt));
    auto [mix, tt, ii] = simulate_mixture(t, i, spec.gain_db);
    MixtureExample ex;
    ex.mixture = std::move(mix);
    ex.target = std::move(tt);
    ex.interferer = std::move(ii);
    ex.anchor = read_wav(m.wav_path(spec.anchor_utt));
    ex.mixture_id = spec.mixture_id;
    ex.target_speaker = m.utterance(spec.target_utt).speaker_id;
    return ex;
}

// ---- toy voices ------------------------------------------------------------

namespace {

struct Voice {
    double f0;
    double formant[3];
    double bw[3];
    double gain[3];
    double noise;
};

Voice make_voice(int idx, int n_speakers, Rng rng) {
    Voice v;
    // Log-spaced pitch lanes keep every pair of speakers apart.
    double lo = 90.0, hi = 300.0;
    double frac = n_speakers > 1 ? double(idx) / double(n_speakers - 1) : 0.5;
    v.f0 = lo * std::pow(hi / lo, frac) * rng.uniform(0.97, 1.03);
    const double flo[3] = {320.0, 1000.0, 2400.0};
    const double fhi[3] = {880.0, 2200.0, 3400.0};
    for (int k = 0; k < 3; ++k) {
        v.formant[k] = rng.uniform(flo[k], fhi[k]);
        v.bw[k] = rng.uniform(70.0, 140.0);
    }
    v.gain[0] = 1.0;
    v.gain[1] = rng.uniform(0.4, 0.8);
    v.gain[2] = rng.uniform(0.15, 0.4);
    v.noise = rng.uniform(0.01, 0.03);
    return v;
}

struct Resonator {
    double a1, a2, g;
    double z1 = 0.0, z2 = 0.0;
    Resonator(double hz, double bw, double fs) {
        double r = std::exp(-M_PI * bw / fs);
        a1 = 2.0 * r * std::cos(2.0 * M_PI * hz / fs);
        a2 = -r * r;
        g = (1.0 - r * r);
    }
    double step(double x) {
        double y = g * x + a1 * z1 + a2 * z2;
        z2 = z1;
        z1 = y;
        return y;
    }
};

Waveform synth_utterance(const Voice& v, double dur_s, int fs, Rng rng) {
    int n = int(dur_s * fs + 0.5);
    // Syllable on/off envelope with raised-cosine edges.
    std::vector<double> env(size_t(n), 0.0);
    int ramp = fs / 50;  // 20 ms
    int pos = 0;
    while (pos < n) {
        int on = int(rng.uniform(0.12, 0.35) * fs);
        int off = int(rng.uniform(0.05, 0.15) * fs);
        for (int k = 0; k < on && pos + k < n; ++k) {
            double e = 1.0;
            if (k < ramp) e = 0.5 - 0.5 * std::cos(M_PI * k / ramp);
            if (on - k < ramp) e = std::min(e, 0.5 - 0.5 * std::cos(M_PI * (on - k) / double(ramp)));
            env[size_t(pos + k)] = e;
        }
        pos += on + off;
    }

    double f0 = v.f0 * rng.uniform(0.96, 1.04);
    double vib_rate = rng.uniform(4.0, 6.5);
    double vib_depth = rng.uniform(0.01, 0.03);
    Resonator res[3] = {Resonator(v.formant[0], v.bw[0], fs),
                        Resonator(v.formant[1], v.bw[1], fs),
                        Resonator(v.formant[2], v.bw[2], fs)};

    std::vector<float> y(static_cast<size_t>(n));
    double phase = 0.0, lp = 0.0;
    for (int i = 0; i < n; ++i) {
        double t = double(i) / fs;
        double inst = f0 * (1.0 + vib_depth * std::sin(2.0 * M_PI * vib_rate * t));
        phase += inst / fs;
        double pulse = 0.0;
        if (phase >= 1.0) {
            phase -= 1.0;
            pulse = 1.0;
        }
        // One-pole lowpass turns the impulse train into a softer source.
        lp = 0.9 * lp + pulse;
        double src = lp + v.noise * rng.normal();
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += v.gain[k] * res[k].step(src);
        y[size_t(i)] = float(s * env[size_t(i)]);
    }

    // Normalize active level; keep a fixed headroom.
    double acc = 0.0;
    int count = 0;
    for (int i = 0; i < n; ++i)
        if (env[size_t(i)] > 0.1) {
            acc += double(y[size_t(i)]) * y[size_t(i)];
            ++count;
        }
    double rms = count > 0 ? std::sqrt(acc / count) : 0.0;
    double sc = rms > 0.0 ? 0.06 / rms : 1.0;
    float peak = 0.0f;
    for (int i = 0; i < n; ++i) {
        y[size_t(i)] = float(y[size_t(i)] * sc);
        peak = std::max(peak, std::fabs(y[size_t(i)]));
    }
    if (peak > 0.95f)
        for (auto& s : y) s *= 0.9f / peak;

    Waveform w;
    w.sample_rate_hz = fs;
    w.samples = std::move(y);
    return w;
}

}  // namespace

Manifest generate_toy_corpus(const ToyCorpusConfig& cfg,
                             const std::string& out_dir) {
    if (cfg.n_speakers < 2) throw ConfigError("toy corpus: need >= 2 speakers");
    // two utterances feed val/test; at least two must stay in train so every
    // train-split target has a distinct same-speaker anchor
    if (cfg.utts_per_speaker < 4)
        throw ConfigError("toy corpus: need >= 4 utterances per speaker");
    if (!(cfg.min_duration_s >= 1.0) || cfg.max_duration_s < cfg.min_duration_s)
        throw ConfigError("toy corpus: bad duration range");

    Rng root(cfg.seed);
    Manifest m;
    m.corpus_root = out_dir;
    fs::create_directories(out_dir);

    char buf[64];
    for (int s = 0; s < cfg.n_speakers; ++s) {
        std::snprintf(buf, sizeof buf, "spk%02d", s);
        std::string spk = buf;
        fs::create_directories(fs::path(out_dir) / spk);
        Voice v = make_voice(s, cfg.n_speakers, root.fork(1000 + uint64_t(s)));
        for (int u = 0; u < cfg.utts_per_speaker; ++u) {
            Rng urng = root.fork(10000 + uint64_t(s) * 257 + uint64_t(u));
            double dur = urng.uniform(cfg.min_duration_s, cfg.max_duration_s);
            Waveform w = synth_utterance(v, dur, cfg.sample_rate_hz, urng.fork(1));
            std::snprintf(buf, sizeof buf, "%s_u%02d", spk.c_str(), u);
            UtteranceRecord rec;
            rec.utterance_id = buf;
            rec.speaker_id = spk;
            rec.path = spk + "/" + rec.utterance_id + ".wav";
            rec.duration_s = w.duration_s();
            // Last two utterances per speaker stay out of training.
            rec.split = u == cfg.utts_per_speaker - 1   ? "test"
                        : u == cfg.utts_per_speaker - 2 ? "val"
                                                        : "train";
            write_wav((fs::path(out_dir) / rec.path).string(), w, 32);
            m.utterances.push_back(std::move(rec));
        }
    }

    // Mixture schedule per split. Target and interferer come from the same
    // split; anchors always come from training utterances of the target
    // speaker so enrollment never leaks held-out content.
    struct SplitPlan {
        const char* name;
        int count;
        uint64_t stream;
    };
    SplitPlan plans[3] = {{"train", cfg.train_mixtures, 2001},
                          {"val", cfg.val_mixtures, 2002},
                          {"test", cfg.test_mixtures, 2003}};
    auto utts_in = [&](const std::string& spk, const std::string& split) {
        std::vector<int> out;
        for (int i : m.utterances_of_speaker(spk))
            if (m.utterances[size_t(i)].split == split) out.push_back(i);
        return out;
    };
    std::vector<std::string> spks = m.speakers();
    for (const auto& plan : plans) {
        Rng prng = root.fork(plan.stream);
        for (int k = 0; k < plan.count; ++k) {
            int si = prng.uniform_int(0, int(spks.size()) - 1);
            int sj = prng.uniform_int(0, int(spks.size()) - 2);
            if (sj >= si) ++sj;
            auto tu = utts_in(spks[size_t(si)], plan.name);
            auto iu = utts_in(spks[size_t(sj)], plan.name);
            const auto& t = m.utterances[size_t(tu[size_t(prng.uniform_int(0, int(tu.size()) - 1))])];
            const auto& i = m.utterances[size_t(iu[size_t(prng.uniform_int(0, int(iu.size()) - 1))])];

            std::vector<int> anchors;
            for (int a : utts_in(t.speaker_id, "train"))
                if (m.utterances[size_t(a)].utterance_id != t.utterance_id)
                    anchors.push_back(a);
            if (anchors.empty())
                throw ConfigError("toy corpus: no anchor candidate for " +
                                  t.utterance_id);
            const auto& anc =
                m.utterances[size_t(anchors[size_t(prng.uniform_int(0, int(anchors.size()) - 1))])];

            MixtureSpec x;
            std::snprintf(buf, sizeof buf, "mix_%s_%04d", plan.name, k);
            x.mixture_id = buf;
            x.target_utt = t.utterance_id;
            x.interferer_utt = i.utterance_id;
            x.anchor_utt = anc.utterance_id;
            x.gain_db = prng.uniform(cfg.gain_low_db, cfg.gain_high_db);
            x.split = plan.name;
            m.mixtures.push_back(std::move(x));
        }
    }

    m.validate();
    save_manifest(m, (fs::path(out_dir) / "manifest.jsonl").string());
    return m;
}

// ---- batch iterator -------------------------------------------------------

BatchIterator::BatchIterator(const Manifest& m, const std::string& split,
                             int batch_size, uint64_t seed, bool shuffle)
    : manifest_(&m), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
    if (batch_size < 1) throw ConfigError("batch iterator: bad batch size");
    mix_idx_ = m.mixtures_of_split(split);
    lengths_.reserve(mix_idx_.size());
    for (int i : mix_idx_) {
        const auto& x = m.mixtures[size_t(i)];
        double overlap = std::min(m.utterance(x.target_utt).duration_s,
                                  m.utterance(x.interferer_utt).duration_s);
        lengths_.push_back(int(overlap * 16000.0));
    }
}

int BatchIterator::num_batches() const {
    int n = int(mix_idx_.size());
    return (n + batch_size_ - 1) / batch_size_;
}

std::vector<std::vector<int>> BatchIterator::epoch_batches(int epoch) const {
    int n = int(mix_idx_.size());
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[size_t(i)] = i;

    if (shuffle_) {
        Rng rng = Rng(seed_).fork(uint64_t(epoch));
        order = rng.permutation(n);
        // Bucket by overlap length (stable, so the shuffle breaks ties),
        // then visit the buckets in a shuffled order.
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return lengths_[size_t(a)] < lengths_[size_t(b)];
        });
    }
    std::vector<std::vector<int>> batches;
    for (int s = 0; s < n; s += batch_size_) {
        std::vector<int> b;
        for (int i = s; i < std::min(n, s + batch_size_); ++i)
            b.push_back(order[size_t(i)]);
        batches.push_back(std::move(b));
    }
    if (shuffle_ && batches.size() > 1) {
        Rng rng = Rng(seed_).fork(uint64_t(epoch)).fork(1);
        std::vector<int> bo = rng.permutation(int(batches.size()));
        std::vector<std::vector<int>> shuffled;
        shuffled.reserve(batches.size());
        for (int i : bo) shuffled.push_back(std::move(batches[size_t(i)]));
        batches = std::move(shuffled);
    }
    return batches;
}

}  // namespace hrtse
