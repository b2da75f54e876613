#include "hrtse/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "hrtse/checkpoint.hpp"
#include "hrtse/common.hpp"
#include "hrtse/metrics.hpp"

namespace hrtse {

nlohmann::json stft_to_json(const StftConfig& c) {
    return {{"sample_rate_hz", c.sample_rate_hz},
            {"window_ms", c.window_ms},
            {"hop_ms", c.hop_ms},
            {"dft_size", c.dft_size}};
}

StftConfig stft_from_json(const nlohmann::json& j) {
    StftConfig c;
    c.sample_rate_hz = j.at("sample_rate_hz").get<int>();
    c.window_ms = j.at("window_ms").get<double>();
    c.hop_ms = j.at("hop_ms").get<double>();
    c.dft_size = j.at("dft_size").get<int>();
    return c;
}

nlohmann::json fbank_to_json(const FbankConfig& c) {
    return {{"n_mels", c.n_mels},
            {"fmin_hz", c.fmin_hz},
            {"fmax_hz", c.fmax_hz},
            {"floor", c.floor},
            {"mean_norm", c.mean_norm}};
}

FbankConfig fbank_from_json(const nlohmann::json& j) {
    FbankConfig c;
    c.n_mels = j.at("n_mels").get<int>();
    c.fmin_hz = j.at("fmin_hz").get<double>();
    c.fmax_hz = j.at("fmax_hz").get<double>();
    c.floor = j.at("floor").get<double>();
    c.mean_norm = j.at("mean_norm").get<bool>();
    return c;
}

namespace {

double now_s() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

nlohmann::json ecapa_to_json(const EcapaConfig& c) {
    return {{"n_mels", c.n_mels},
            {"channels", c.channels},
            {"res2net_scale", c.res2net_scale},
            {"se_channels", c.se_channels},
            {"att_bottleneck", c.att_bottleneck},
            {"embedding_dim", c.embedding_dim},
            {"kernels", c.kernels},
            {"dilations", c.dilations}};
}

EcapaConfig ecapa_from_json(const nlohmann::json& j) {
    EcapaConfig c;
    c.n_mels = j.at("n_mels").get<int>();
    c.channels = j.at("channels").get<int>();
    c.res2net_scale = j.at("res2net_scale").get<int>();
    c.se_channels = j.at("se_channels").get<int>();
    c.att_bottleneck = j.at("att_bottleneck").get<int>();
    c.embedding_dim = j.at("embedding_dim").get<int>();
    c.kernels = j.at("kernels").get<std::vector<int>>();
    c.dilations = j.at("dilations").get<std::vector<int>>();
    return c;
}

nlohmann::json sep_to_json(const SeparatorConfig& c) {
    return {{"enc_channels", c.enc_channels},
            {"local_channels", c.local_channels},
            {"bins", c.bins},
            {"input_channels", c.input_channels},
            {"local_input_channels", c.local_input_channels},
            {"frame_arn_hidden", c.frame_arn_hidden},
            {"arn_blocks", c.arn_blocks},
            {"embedding_dim", c.embedding_dim},
            {"df_time_taps", c.df_time_taps},
            {"df_freq_taps", c.df_freq_taps},
            {"profile", c.profile}};
}

SeparatorConfig sep_from_json(const nlohmann::json& j) {
    SeparatorConfig c;
    c.enc_channels = j.at("enc_channels").get<std::vector<int>>();
    c.local_channels = j.at("local_channels").get<std::vector<int>>();
    c.bins = j.at("bins").get<int>();
    c.input_channels = j.at("input_channels").get<int>();
    c.local_input_channels = j.at("local_input_channels").get<int>();
    c.frame_arn_hidden = j.at("frame_arn_hidden").get<int>();
    c.arn_blocks = j.at("arn_blocks").get<int>();
    c.embedding_dim = j.at("embedding_dim").get<int>();
    c.df_time_taps = j.at("df_time_taps").get<int>();
    c.df_freq_taps = j.at("df_freq_taps").get<int>();
    c.profile = j.at("profile").get<std::string>();
    return c;
}

Waveform crop_at(const Waveform& w, int lo, int len) {
    Waveform out;
    out.sample_rate_hz = w.sample_rate_hz;
    int n = std::min(len, int(w.size()) - lo);
    out.samples.assign(w.samples.begin() + lo, w.samples.begin() + lo + n);
    return out;
}

Waveform center_crop(const Waveform& w, int len) {
    if (int(w.size()) <= len) return w;
    return crop_at(w, (int(w.size()) - len) / 2, len);
}

}  // namespace

SeparatorConfig TrainConfig::separator_config() const {
    if (profile == "full") return SeparatorConfig::full();
    if (profile == "desk") return SeparatorConfig::desk();
    throw ConfigError("unknown profile: " + profile + " (want full|desk)");
}

void TrainConfig::validate() const {
    if (lr <= 0) throw ConfigError("train config: lr must be positive");
    if (plateau_epochs < 1) throw ConfigError("train config: plateau_epochs >= 1");
    if (batch_size < 1) throw ConfigError("train config: batch_size >= 1");
    if (max_epochs < 1) throw ConfigError("train config: max_epochs >= 1");
    if (crop_seconds <= 0 || anchor_seconds <= 0)
        throw ConfigError("train config: crop lengths must be positive");
    separator_config();
}

nlohmann::json TrainConfig::to_json() const {
    return {{"profile", profile},
            {"mode", to_string(mode)},
            {"lr", lr},
            {"batch_size", batch_size},
            {"plateau_epochs", plateau_epochs},
            {"lr_halving", lr_halving},
            {"max_epochs", max_epochs},
            {"min_lr", min_lr},
            {"crop_seconds", crop_seconds},
            {"anchor_seconds", anchor_seconds},
            {"grad_clip", grad_clip},
            {"seed", seed},
            {"determinism", determinism},
            {"time_limit_s", time_limit_s},
            {"manifest_path", manifest_path},
            {"embedder_ckpt", embedder_ckpt},
            {"out_dir", out_dir},
            {"stft", stft_to_json(loss.stft)},
            {"loss", {{"p", loss.p},
                      {"w_ri", loss.w_ri},
                      {"w_mag", loss.w_mag},
                      {"w_si", loss.w_si}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("profile")) c.profile = j.at("profile").get<std::string>();
    if (j.contains("mode"))
        c.mode = fusion_mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("plateau_epochs"))
        c.plateau_epochs = j.at("plateau_epochs").get<int>();
    if (j.contains("lr_halving")) c.lr_halving = j.at("lr_halving").get<bool>();
    if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs").get<int>();
    if (j.contains("min_lr")) c.min_lr = j.at("min_lr").get<double>();
    if (j.contains("crop_seconds"))
        c.crop_seconds = j.at("crop_seconds").get<double>();
    if (j.contains("anchor_seconds"))
        c.anchor_seconds = j.at("anchor_seconds").get<double>();
    if (j.contains("grad_clip")) c.grad_clip = j.at("grad_clip").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("determinism"))
        c.determinism = j.at("determinism").get<bool>();
    if (j.contains("time_limit_s"))
        c.time_limit_s = j.at("time_limit_s").get<double>();
    if (j.contains("manifest_path"))
        c.manifest_path = j.at("manifest_path").get<std::string>();
    if (j.contains("embedder_ckpt"))
        c.embedder_ckpt = j.at("embedder_ckpt").get<std::string>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("stft")) c.loss.stft = stft_from_json(j.at("stft"));
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        if (l.contains("p")) c.loss.p = l.at("p").get<double>();
        if (l.contains("w_ri")) c.loss.w_ri = l.at("w_ri").get<double>();
        if (l.contains("w_mag")) c.loss.w_mag = l.at("w_mag").get<double>();
        if (l.contains("w_si")) c.loss.w_si = l.at("w_si").get<double>();
    }
    return c;
}

double lr_step(const std::vector<double>& val_history, double lr, int plateau) {
    if (int(val_history.size()) < plateau + 1) return lr;
    double best_before = 1e300;
    for (size_t i = 0; i + size_t(plateau) < val_history.size(); ++i)
        best_before = std::min(best_before, val_history[i]);
    for (size_t i = val_history.size() - size_t(plateau);
         i < val_history.size(); ++i)
        if (val_history[i] < best_before) return lr;
    return lr / 2.0;
}

nlohmann::json TrainingLog::to_json() const {
    nlohmann::json eps = nlohmann::json::array();
    for (const auto& e : epochs)
        eps.push_back({{"epoch", e.epoch},
                       {"train_total", e.train_total},
                       {"train_si_snr", e.train_si},
                       {"train_mag", e.train_mag},
                       {"train_ri", e.train_ri},
                       {"val_total", e.val_total},
                       {"lr", e.lr},
                       {"seconds", e.seconds}});
    return {{"epochs", eps},
            {"lr_trace", lr_trace},
            {"seed", seed},
            {"wall_clock_s", wall_clock_s},
            {"best_epoch", best_epoch},
            {"best_val", best_val},
            {"stopped_by_time", stopped_by_time},
            {"config", config_echo}};
}

// ---- embedder persistence --------------------------------------------------

void save_embedder(const std::string& ckpt_path, const nn::Params& params,
                   const EcapaConfig& cfg, const nlohmann::json& extra) {
    nlohmann::json header = {{"kind", "hrtse-embedder"},
                             {"format_version", 1},
                             {"ecapa", ecapa_to_json(cfg)},
                             {"extra", extra}};
    save_checkpoint(ckpt_path, params, header);
}

EmbedderBundle load_embedder(const std::string& ckpt_path) {
    nlohmann::json header = peek_checkpoint_header(ckpt_path);
    if (header.value("kind", "") != "hrtse-embedder")
        throw ConfigError("not an embedder checkpoint: " + ckpt_path);
    EmbedderBundle b;
    b.cfg = ecapa_from_json(header.at("ecapa"));
    b.params = std::make_unique<nn::Params>();
    Rng rng(0);
    b.model = std::make_unique<Ecapa>(*b.params, b.cfg, rng);
    // classifier head travels with the checkpoint when it was trained here
    nlohmann::json probe = header;
    if (header.contains("extra") && header.at("extra").contains("n_classes")) {
        int k = header.at("extra").at("n_classes").get<int>();
        b.params->add("cls.W", Tensor::zeros({k, b.cfg.embedding_dim}));
    }
    b.header = load_checkpoint(ckpt_path, *b.params);
    b.weight_hash = b.params->value_hash();
    return b;
}

// ---- training ---------------------------------------------------------------

namespace {

struct TrainData {
    Manifest manifest;
    std::map<std::string, Waveform> waves;            // all referenced utts
    std::map<std::string, ComplexSpectrogram> anchors;  // fixed anchor crops
    std::map<std::string, Tensor> embeddings;          // frozen global features
};

TrainData load_train_data(const TrainConfig& cfg, const EmbedderBundle& emb) {
    TrainData d;
    d.manifest = load_manifest(cfg.manifest_path);
    d.manifest.validate();

    StftConfig stft_cfg = cfg.loss.stft;
    FbankConfig fb;
    if (emb.header.contains("extra") && emb.header.at("extra").contains("fbank"))
        fb = fbank_from_json(emb.header.at("extra").at("fbank"));
    else
        fb.mean_norm = true;

    int anchor_samples = int(cfg.anchor_seconds * stft_cfg.sample_rate_hz);
    for (const auto& mix : d.manifest.mixtures) {
        for (const std::string& id :
             {mix.target_utt, mix.interferer_utt, mix.anchor_utt}) {
            if (d.waves.count(id)) continue;
            d.waves[id] = read_wav(d.manifest.wav_path(id));
        }
        if (!d.anchors.count(mix.anchor_utt)) {
            Waveform ac = center_crop(d.waves[mix.anchor_utt], anchor_samples);
            d.anchors.emplace(mix.anchor_utt, stft(ac, stft_cfg));
            d.embeddings.emplace(
                mix.anchor_utt,
                emb.model->embed(fbank(d.waves[mix.anchor_utt], stft_cfg, fb)));
        }
    }
    return d;
}

struct BatchLoss {
    ad::Var total;
    double si = 0.0, mag = 0.0, ri = 0.0;
};

BatchLoss mixture_loss(const TseModel& model, const TrainData& d,
                       const MixtureSpec& spec, const TrainConfig& cfg,
                       Rng& rng, bool center) {
    const Waveform& tw = d.waves.at(spec.target_utt);
    const Waveform& iw = d.waves.at(spec.interferer_utt);
    auto [mix, tgt, itf] = simulate_mixture(tw, iw, spec.gain_db);
    (void)itf;

    int crop = int(cfg.crop_seconds * cfg.loss.stft.sample_rate_hz);
    int lo = 0;
    if (int(mix.size()) > crop)
        lo = center ? (int(mix.size()) - crop) / 2
                    : rng.uniform_int(0, int(mix.size()) - crop - 1);
    Waveform mc = crop_at(mix, lo, crop);
    Waveform tc = crop_at(tgt, lo, crop);

    ComplexSpectrogram mix_spec = stft(mc, cfg.loss.stft);
    ComplexSpectrogram ref_spec = stft(tc, cfg.loss.stft);
    const ComplexSpectrogram& anchor = d.anchors.at(spec.anchor_utt);
    const Tensor& emb = d.embeddings.at(spec.anchor_utt);

    auto [re, im] = model.estimate_spec(mix_spec, anchor, &emb, cfg.mode);
    ad::Var est = istft_tape(re, im, cfg.loss.stft, int(mc.size()));
    TapeLoss l = total_loss_tape(re, im, ref_spec, est, tc.samples, cfg.loss);

    BatchLoss out;
    out.total = l.total;
    out.si = l.si->value.at(0);
    out.mag = l.mag->value.at(0);
    out.ri = l.ri->value.at(0);
    return out;
}

}  // namespace

TrainResult train_tse(const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.out_dir.empty()) throw ConfigError("train config: out_dir required");
    std::filesystem::create_directories(cfg.out_dir);

    EmbedderBundle emb = load_embedder(cfg.embedder_ckpt);
    TrainData data = load_train_data(cfg, emb);

    SeparatorConfig sep_cfg = cfg.separator_config();
    sep_cfg.embedding_dim = emb.cfg.embedding_dim;
    TseModel model(sep_cfg, cfg.seed);
    nn::Adam opt(cfg.lr, 0.9, 0.999, 1e-8, cfg.grad_clip);

    BatchIterator train_iter(data.manifest, "train", cfg.batch_size, cfg.seed,
                             true);
    auto val_idx = data.manifest.mixtures_of_split("val");
    if (train_iter.split_mixtures().empty())
        throw ValueError("manifest has no train mixtures");

    TrainingLog log;
    log.seed = cfg.seed;
    log.config_echo = cfg.to_json();
    log.lr_trace.push_back(cfg.lr);

    Rng crop_rng(fnv1a64("crop", 4, cfg.seed));
    double lr = cfg.lr;
    double t_start = now_s();
    std::vector<double> val_history;
    std::vector<FloatVec> best_values;
    double best_val = 1e300;
    int best_epoch = 0;

    auto snapshot = [&] {
        best_values.clear();
        for (const auto& [_, v] : model.params().items())
            best_values.push_back(v->value.data);
    };

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        double t_epoch = now_s();
        Rng erng = crop_rng.fork(uint64_t(epoch));
        opt.set_lr(lr);

        double sum_total = 0.0, sum_si = 0.0, sum_mag = 0.0, sum_ri = 0.0;
        int n_utt = 0;
        for (const auto& batch : train_iter.epoch_batches(epoch - 1)) {
            ad::Var batch_total;
            for (int pos : batch) {
                const auto& spec =
                    data.manifest.mixtures[size_t(train_iter.split_mixtures()[size_t(pos)])];
                BatchLoss l = mixture_loss(model, data, spec, cfg, erng, false);
                batch_total = batch_total ? ad::add(batch_total, l.total) : l.total;
                sum_total += l.total->value.at(0);
                sum_si += l.si;
                sum_mag += l.mag;
                sum_ri += l.ri;
                ++n_utt;
            }
            batch_total = ad::scale(batch_total, 1.0 / double(batch.size()));
            if (!std::isfinite(batch_total->value.at(0))) {
                nlohmann::json dump = {{"epoch", epoch},
                                       {"loss", batch_total->value.at(0)},
                                       {"config", cfg.to_json()}};
                std::ofstream(cfg.out_dir + "/nan_dump.json") << dump.dump(2);
                throw Error("training aborted: non-finite loss at epoch " +
                            std::to_string(epoch) + " (diagnostics in " +
                            cfg.out_dir + "/nan_dump.json)");
            }
            ad::backward(batch_total);
            opt.step(model.params());
        }

        double val_total = 0.0;
        {
            ad::NoGradGuard ng;
            Rng vrng(0);
            for (int mi : val_idx) {
                BatchLoss l = mixture_loss(model, data,
                                           data.manifest.mixtures[size_t(mi)],
                                           cfg, vrng, true);
                val_total += l.total->value.at(0);
            }
            val_total /= std::max<size_t>(1, val_idx.size());
        }
        val_history.push_back(val_total);

        EpochStats st;
        st.epoch = epoch;
        st.train_total = sum_total / std::max(1, n_utt);
        st.train_si = sum_si / std::max(1, n_utt);
        st.train_mag = sum_mag / std::max(1, n_utt);
        st.train_ri = sum_ri / std::max(1, n_utt);
        st.val_total = val_total;
        st.lr = lr;
        st.seconds = now_s() - t_epoch;
        log.epochs.push_back(st);

        if (val_total < best_val) {
            best_val = val_total;
            best_epoch = epoch;
            snapshot();
        }

        if (cfg.lr_halving) {
            double next = lr_step(val_history, lr, cfg.plateau_epochs);
            if (next != lr) {
                lr = next;
                log.lr_trace.push_back(lr);
            }
        }
        if (lr < cfg.min_lr) break;
        if (cfg.time_limit_s > 0 && now_s() - t_start > cfg.time_limit_s) {
            log.stopped_by_time = true;
            break;
        }
    }

    if (best_values.empty()) snapshot();
    {
        size_t i = 0;
        for (const auto& [_, v] : model.params().items())
            v->value.data = best_values[i++];
    }

    log.best_epoch = best_epoch;
    log.best_val = best_val;
    log.wall_clock_s = now_s() - t_start;

    nlohmann::json header = {{"kind", "hrtse-tse"},
                             {"format_version", 1},
                             {"profile", cfg.profile},
                             {"mode", to_string(cfg.mode)},
                             {"separator", sep_to_json(sep_cfg)},
                             {"stft", stft_to_json(cfg.loss.stft)},
                             {"embedder_hash", emb.weight_hash},
                             {"train_config", cfg.to_json()},
                             {"best_epoch", best_epoch},
                             {"best_val", best_val}};

    TrainResult res;
    res.checkpoint_path =
        cfg.out_dir + "/tse_" + to_string(cfg.mode) + ".ckpt";
    save_checkpoint(res.checkpoint_path, model.params(), header);
    std::ofstream(cfg.out_dir + "/train_log_" + to_string(cfg.mode) + ".json")
        << log.to_json().dump(2) << "\n";
    res.log = log;
    return res;
}

// ---- bundle + evaluation ---------------------------------------------------

Waveform TseBundle::separate(const Waveform& mixture, const Waveform& anchor,
                             ForwardTrace* trace) const {
    Tensor emb;
    const Tensor* emb_ptr = nullptr;
    if (mode != FusionMode::local) {
        emb = embedder.model->embed(fbank(anchor, stft, fbank_cfg));
        emb_ptr = &emb;
    }
    return model->separate(mixture, anchor, emb_ptr, mode, stft, trace);
}

TseBundle load_tse(const std::string& tse_ckpt,
                   const std::string& embedder_ckpt) {
    TseBundle b;
    b.embedder = load_embedder(embedder_ckpt);
    if (b.embedder.header.contains("extra") &&
        b.embedder.header.at("extra").contains("fbank"))
        b.fbank_cfg = fbank_from_json(b.embedder.header.at("extra").at("fbank"));
    else
        b.fbank_cfg.mean_norm = true;

    nlohmann::json header = peek_checkpoint_header(tse_ckpt);
    if (header.value("kind", "") != "hrtse-tse")
        throw ConfigError("not an extractor checkpoint: " + tse_ckpt);
    b.sep_cfg = sep_from_json(header.at("separator"));
    b.mode = fusion_mode_from_string(header.at("mode").get<std::string>());
    b.stft = stft_from_json(header.at("stft"));

    uint64_t want = header.at("embedder_hash").get<uint64_t>();
    if (want != b.embedder.weight_hash)
        throw ConfigError(
            "embedder checkpoint does not match the one this extractor was "
            "trained with (weight hash mismatch)");

    b.model = std::make_unique<TseModel>(b.sep_cfg, 0);
    b.header = load_checkpoint(tse_ckpt, b.model->params());
    return b;
}

void MetricsReport::finalize() {
    mean_si_snr = mean_si_snri = mean_stoi = mean_estoi = tsos_rate = 0.0;
    double pesq_sum = 0.0;
    int pesq_n = 0;
    for (const auto& r : rows) {
        mean_si_snr += r.si_snr_db;
        mean_si_snri += r.si_snri_db;
        mean_stoi += r.stoi_v;
        mean_estoi += r.estoi_v;
        tsos_rate += r.tsos ? 1.0 : 0.0;
        if (r.pesq) {
            pesq_sum += *r.pesq;
            ++pesq_n;
        }
    }
    double n = std::max<size_t>(1, rows.size());
    mean_si_snr /= n;
    mean_si_snri /= n;
    mean_stoi /= n;
    mean_estoi /= n;
    tsos_rate /= n;
    if (pesq_n > 0) mean_pesq = pesq_sum / pesq_n;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json agg = {{"si_snr_db", mean_si_snr},
                          {"si_snri_db", mean_si_snri},
                          {"stoi", mean_stoi},
                          {"estoi", mean_estoi},
                          {"tsos", tsos_rate},
                          {"count", rows.size()}};
    if (mean_pesq) agg["pesq"] = *mean_pesq;
    return agg;
}

MetricsReport evaluate_set(const Manifest& manifest, const std::string& split,
                           const Estimator& estimate, const EvalConfig& cfg) {
    MetricsReport rep;
    for (int mi : manifest.mixtures_of_split(split)) {
        MixtureExample ex = realize_mixture(manifest, manifest.mixtures[size_t(mi)]);
        Waveform est = estimate(ex);
        if (est.size() != ex.mixture.size())
            throw ShapeError("estimator returned wrong length for " +
                             ex.mixture_id);
        UttMetrics m;
        m.id = ex.mixture_id;
        m.si_snr_db = si_snr(est, ex.target);
        m.si_snri_db = m.si_snr_db - si_snr(ex.mixture, ex.target);
        m.stoi_v = stoi(est, ex.target);
        m.estoi_v = estoi(est, ex.target);
        m.tsos = tsos_flag(est, ex.target);
        if (!cfg.pesq_cmd.empty())
            m.pesq = pesq_external(cfg.pesq_cmd, ex.target, est, cfg.tmp_dir);
        rep.rows.push_back(std::move(m));
    }
    rep.finalize();
    return rep;
}

Estimator model_estimator(const TseBundle& bundle) {
    return [&bundle](const MixtureExample& ex) {
        return bundle.separate(ex.mixture, ex.anchor);
    };
}

Estimator mixture_passthrough() {
    return [](const MixtureExample& ex) { return ex.mixture; };
}

void write_report(const MetricsReport& report, const std::string& csv_path) {
    namespace fs = std::filesystem;
    fs::path p(csv_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    bool with_pesq = report.mean_pesq.has_value();

    std::ofstream csv(p);
    if (!csv) throw IoError("cannot write report: " + csv_path);
    csv << "utt_id,si_snr_db,si_snri_db,stoi,estoi,tsos_flag";
    if (with_pesq) csv << ",pesq";
    csv << "\n";
    csv.setf(std::ios::fixed);
    csv.precision(6);
    for (const auto& r : report.rows) {
        csv << r.id << "," << r.si_snr_db << "," << r.si_snri_db << ","
            << r.stoi_v << "," << r.estoi_v << "," << (r.tsos ? 1 : 0);
        if (with_pesq) csv << "," << (r.pesq ? *r.pesq : 0.0);
        csv << "\n";
    }
    fs::path jp = p;
    jp.replace_extension(".json");
    std::ofstream(jp) << report.to_json().dump(2) << "\n";
}

}  // namespace hrtse
