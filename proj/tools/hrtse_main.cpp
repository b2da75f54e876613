#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hrtse/ablation.hpp"
#include "hrtse/common.hpp"
#include "hrtse/corpus.hpp"
#include "hrtse/svgplot.hpp"
#include "hrtse/trainer.hpp"

namespace {

using namespace hrtse;

nlohmann::json read_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path);
    return j;
}

void cmd_corpus_make(const ToyCorpusConfig& cc, const std::string& out) {
    Manifest m = generate_toy_corpus(cc, out);
    std::printf("wrote %zu utterances, %zu mixtures under %s\n",
                m.utterances.size(), m.mixtures.size(), out.c_str());
}

void cmd_embedder_train(const std::string& manifest_path,
                        const std::string& profile, EmbedderTrainConfig ec,
                        const std::string& out_ckpt,
                        const std::string& log_path) {
    if (profile == "full")
        ec.ecapa = EcapaConfig::full();
    else if (profile == "desk")
        ec.ecapa = EcapaConfig::desk();
    else
        throw ConfigError("unknown profile: " + profile + " (want full|desk)");

    Manifest m = load_manifest(manifest_path);
    nn::Params P;
    Rng rng(ec.seed);
    Ecapa model(P, ec.ecapa, rng);
    EmbedderTrainLog log = train_embedder(m, ec, P, model);

    nlohmann::json extra = {{"n_classes", log.class_names.size()},
                            {"classes", log.class_names},
                            {"fbank", fbank_to_json(ec.fbank)},
                            {"final_accuracy", log.final_accuracy}};
    save_embedder(out_ckpt, P, ec.ecapa, extra);
    if (!log_path.empty()) {
        nlohmann::json j = {{"epoch_loss", log.epoch_loss},
                            {"epoch_accuracy", log.epoch_accuracy},
                            {"classes", log.class_names},
                            {"final_accuracy", log.final_accuracy}};
        std::ofstream(log_path) << j.dump(2) << "\n";
    }
    std::printf("embedder saved to %s (train accuracy %.3f over %zu speakers)\n",
                out_ckpt.c_str(), log.final_accuracy, log.class_names.size());
}

void cmd_tse_train(const TrainConfig& tc) {
    TrainResult res = train_tse(tc);
    std::printf("checkpoint %s (best epoch %d, val %.4f, %.1fs)\n",
                res.checkpoint_path.c_str(), res.log.best_epoch,
                res.log.best_val, res.log.wall_clock_s);
}

void cmd_tse_eval(const std::string& ckpt, const std::string& embedder,
                  const std::string& manifest_path, const std::string& split,
                  const std::string& out_csv, const std::string& pesq_cmd) {
    TseBundle bundle = load_tse(ckpt, embedder);
    Manifest m = load_manifest(manifest_path);
    EvalConfig ec;
    ec.pesq_cmd = pesq_cmd;
    MetricsReport rep = evaluate_set(m, split, model_estimator(bundle), ec);
    write_report(rep, out_csv);
    std::printf("%zu utterances: si_snr %.3f dB (improvement %.3f dB), stoi "
                "%.3f, estoi %.3f, tsos %.3f\n",
                rep.rows.size(), rep.mean_si_snr, rep.mean_si_snri,
                rep.mean_stoi, rep.mean_estoi, rep.tsos_rate);
}

void cmd_tse_separate(const std::string& mix_path, const std::string& anchor_path,
                      const std::string& ckpt, const std::string& embedder,
                      const std::string& out_path) {
    TseBundle bundle = load_tse(ckpt, embedder);
    Waveform mix = read_wav(mix_path);
    Waveform anchor = read_wav(anchor_path);
    int want = bundle.stft.sample_rate_hz;
    if (mix.sample_rate_hz != want) mix = resample(mix, want);
    if (anchor.sample_rate_hz != want) anchor = resample(anchor, want);
    Waveform est = bundle.separate(mix, anchor);
    write_wav(out_path, est, 32);
    std::printf("wrote %s (%.2f s)\n", out_path.c_str(),
                double(est.size()) / est.sample_rate_hz);
}

void cmd_ablate(const AblationConfig& ac) {
    AblationResult r = run_ablation(ac);
    std::fputs(r.table_text().c_str(), stdout);
    std::printf("report under %s\n", ac.out_dir.c_str());
}

void cmd_report_plot(const std::string& log_path, const std::string& ablation_path,
                     const std::string& out_path) {
    if (!log_path.empty()) {
        nlohmann::json j = read_config_file(log_path);
        if (!j.contains("epochs") || j.at("epochs").empty())
            throw ConfigError("training log has no epochs: " + log_path);
        svg::Series train{"train", {}}, val{"val", {}};
        for (const auto& e : j.at("epochs")) {
            train.values.push_back(e.at("train_total").get<double>());
            val.values.push_back(e.at("val_total").get<double>());
        }
        svg::write_line_chart(out_path, "loss by epoch", "epoch", "total loss",
                              {train, val});
    } else {
        nlohmann::json j = read_config_file(ablation_path);
        if (!j.contains("rows"))
            throw ConfigError("not an ablation report: " + ablation_path);
        std::vector<svg::Bar> bars;
        for (const char* row : {"mixture", "local", "global", "hr"}) {
            if (!j.at("rows").contains(row))
                throw ConfigError(std::string("ablation report lacks row: ") + row);
            bars.push_back(
                {row, j.at("rows").at(row).at("si_snr_db").get<double>()});
        }
        svg::write_bar_chart(out_path, "held-out SI-SNR by fusion mode",
                             "SI-SNR (dB)", bars);
    }
    std::printf("wrote %s\n", out_path.c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-talker target-speaker extraction toolkit"};
    app.require_subcommand(1);

    // corpus make
    auto* corpus = app.add_subcommand("corpus", "synthetic corpus utilities");
    corpus->require_subcommand(1);
    auto* corpus_make = corpus->add_subcommand(
        "make", "generate the deterministic toy corpus");
    ToyCorpusConfig cc;
    std::string corpus_out;
    corpus_make->add_option("--out", corpus_out, "corpus directory")->required();
    corpus_make->add_option("--speakers", cc.n_speakers, "number of speakers");
    corpus_make->add_option("--utts", cc.utts_per_speaker, "utterances per speaker");
    corpus_make->add_option("--min-duration", cc.min_duration_s, "seconds");
    corpus_make->add_option("--max-duration", cc.max_duration_s, "seconds");
    corpus_make->add_option("--gain-low", cc.gain_low_db, "mix gain range, dB");
    corpus_make->add_option("--gain-high", cc.gain_high_db, "mix gain range, dB");
    corpus_make->add_option("--train", cc.train_mixtures, "train mixtures");
    corpus_make->add_option("--val", cc.val_mixtures, "validation mixtures");
    corpus_make->add_option("--test", cc.test_mixtures, "test mixtures");
    corpus_make->add_option("--seed", cc.seed, "corpus seed");
    corpus_make->callback([&] { cmd_corpus_make(cc, corpus_out); });

    // embedder train
    auto* emb = app.add_subcommand("embedder", "speaker embedder");
    emb->require_subcommand(1);
    auto* emb_train =
        emb->add_subcommand("train", "speaker-classification training");
    EmbedderTrainConfig ec;
    std::string emb_manifest, emb_profile = "desk", emb_out, emb_log;
    emb_train->add_option("--manifest", emb_manifest, "manifest path")->required();
    emb_train->add_option("--out", emb_out, "checkpoint path")->required();
    emb_train->add_option("--profile", emb_profile, "full|desk");
    emb_train->add_option("--epochs", ec.epochs, "training epochs");
    emb_train->add_option("--batch", ec.batch_size, "crops per step");
    emb_train->add_option("--crop", ec.crop_seconds, "crop length, seconds");
    emb_train->add_option("--lr", ec.lr, "learning rate");
    emb_train->add_option("--margin", ec.margin, "additive margin");
    emb_train->add_option("--am-scale", ec.am_scale, "cosine scale");
    emb_train->add_option("--seed", ec.seed, "training seed");
    emb_train->add_option("--log", emb_log, "write a JSON training log here");
    emb_train->callback(
        [&] { cmd_embedder_train(emb_manifest, emb_profile, ec, emb_out, emb_log); });

    // tse train/eval/separate
    auto* tse = app.add_subcommand("tse", "extraction model");
    tse->require_subcommand(1);

    auto* tse_train = tse->add_subcommand("train", "train the extractor");
    std::string tt_config;
    TrainConfig tc;
    std::string tt_mode = "hr";
    tse_train->add_option("--config", tt_config, "JSON config file");
    auto* o_manifest = tse_train->add_option("--manifest", tc.manifest_path, "manifest path");
    auto* o_embedder = tse_train->add_option("--embedder", tc.embedder_ckpt, "embedder checkpoint");
    auto* o_out = tse_train->add_option("--out", tc.out_dir, "output directory");
    auto* o_profile = tse_train->add_option("--profile", tc.profile, "full|desk");
    auto* o_mode = tse_train->add_option("--mode", tt_mode, "local|global|hr");
    auto* o_lr = tse_train->add_option("--lr", tc.lr, "learning rate");
    auto* o_batch = tse_train->add_option("--batch", tc.batch_size, "crops per step");
    auto* o_epochs = tse_train->add_option("--epochs", tc.max_epochs, "epoch budget");
    auto* o_crop = tse_train->add_option("--crop", tc.crop_seconds, "crop length, seconds");
    auto* o_anchor = tse_train->add_option("--anchor-crop", tc.anchor_seconds, "anchor crop, seconds");
    auto* o_seed = tse_train->add_option("--seed", tc.seed, "training seed");
    auto* o_time = tse_train->add_option("--time-limit", tc.time_limit_s, "wall-clock budget, seconds");
    tse_train->callback([&] {
        TrainConfig merged =
            tt_config.empty() ? TrainConfig{}
                              : TrainConfig::from_json(read_config_file(tt_config));
        if (*o_manifest) merged.manifest_path = tc.manifest_path;
        if (*o_embedder) merged.embedder_ckpt = tc.embedder_ckpt;
        if (*o_out) merged.out_dir = tc.out_dir;
        if (*o_profile) merged.profile = tc.profile;
        if (*o_mode) merged.mode = fusion_mode_from_string(tt_mode);
        if (*o_lr) merged.lr = tc.lr;
        if (*o_batch) merged.batch_size = tc.batch_size;
        if (*o_epochs) merged.max_epochs = tc.max_epochs;
        if (*o_crop) merged.crop_seconds = tc.crop_seconds;
        if (*o_anchor) merged.anchor_seconds = tc.anchor_seconds;
        if (*o_seed) merged.seed = tc.seed;
        if (*o_time) merged.time_limit_s = tc.time_limit_s;
        cmd_tse_train(merged);
    });

    auto* tse_eval = tse->add_subcommand("eval", "score a checkpoint on a split");
    std::string ev_ckpt, ev_embedder, ev_manifest, ev_split = "test",
                ev_out, ev_pesq;
    tse_eval->add_option("--ckpt", ev_ckpt, "extractor checkpoint")->required();
    tse_eval->add_option("--embedder", ev_embedder, "embedder checkpoint")->required();
    tse_eval->add_option("--manifest", ev_manifest, "manifest path")->required();
    tse_eval->add_option("--split", ev_split, "train|val|test");
    tse_eval->add_option("--out", ev_out, "CSV report path")->required();
    tse_eval->add_option("--pesq-cmd", ev_pesq, "external scorer command");
    tse_eval->callback([&] {
        cmd_tse_eval(ev_ckpt, ev_embedder, ev_manifest, ev_split, ev_out, ev_pesq);
    });

    auto* tse_sep = tse->add_subcommand("separate", "extract one file");
    std::string sp_mix, sp_anchor, sp_ckpt, sp_embedder, sp_out;
    tse_sep->add_option("--mix", sp_mix, "mixture wav")->required();
    tse_sep->add_option("--anchor", sp_anchor, "enrollment wav")->required();
    tse_sep->add_option("--ckpt", sp_ckpt, "extractor checkpoint")->required();
    tse_sep->add_option("--embedder", sp_embedder, "embedder checkpoint")->required();
    tse_sep->add_option("--out", sp_out, "output wav")->required();
    tse_sep->callback([&] {
        cmd_tse_separate(sp_mix, sp_anchor, sp_ckpt, sp_embedder, sp_out);
    });

    // ablate
    auto* ablate = app.add_subcommand("ablate", "compare the three fusion modes");
    std::string ab_config;
    AblationConfig ac;
    TrainConfig& ab = ac.base;
    std::string ab_profile = ab.profile;
    ablate->add_option("--config", ab_config, "JSON config for the shared recipe");
    auto* a_manifest = ablate->add_option("--manifest", ab.manifest_path, "manifest path");
    auto* a_embedder = ablate->add_option("--embedder", ab.embedder_ckpt, "embedder checkpoint");
    ablate->add_option("--out", ac.out_dir, "report directory")->required();
    auto* a_profile = ablate->add_option("--profile", ab_profile, "full|desk");
    auto* a_lr = ablate->add_option("--lr", ab.lr, "learning rate");
    auto* a_batch = ablate->add_option("--batch", ab.batch_size, "crops per step");
    auto* a_epochs = ablate->add_option("--epochs", ab.max_epochs, "epoch budget per run");
    auto* a_crop = ablate->add_option("--crop", ab.crop_seconds, "crop length, seconds");
    auto* a_time = ablate->add_option("--time-limit", ab.time_limit_s, "budget per run, seconds");
    ablate->add_option("--seeds", ac.seeds, "training seeds")->delimiter(',');
    ablate->add_option("--split", ac.eval_split, "evaluation split");
    ablate->add_option("--pesq-cmd", ac.pesq_cmd, "external scorer command");
    ablate->callback([&] {
        if (!ab_config.empty()) {
            TrainConfig merged = TrainConfig::from_json(read_config_file(ab_config));
            if (*a_manifest) merged.manifest_path = ab.manifest_path;
            if (*a_embedder) merged.embedder_ckpt = ab.embedder_ckpt;
            if (*a_profile) merged.profile = ab_profile;
            if (*a_lr) merged.lr = ab.lr;
            if (*a_batch) merged.batch_size = ab.batch_size;
            if (*a_epochs) merged.max_epochs = ab.max_epochs;
            if (*a_crop) merged.crop_seconds = ab.crop_seconds;
            if (*a_time) merged.time_limit_s = ab.time_limit_s;
            ac.base = merged;
        } else {
            ab.profile = ab_profile;
        }
        cmd_ablate(ac);
    });

    // report plot
    auto* report = app.add_subcommand("report", "artifact rendering");
    report->require_subcommand(1);
    auto* rplot = report->add_subcommand("plot", "render charts from JSON artifacts");
    std::string rp_log, rp_ablation, rp_out;
    auto* rp_in = rplot->add_option_group("input", "what to plot");
    rp_in->add_option("--log", rp_log, "training log JSON -> loss curves");
    rp_in->add_option("--ablation", rp_ablation, "ablation JSON -> metric bars");
    rp_in->require_option(1);
    rplot->add_option("--out", rp_out, "output SVG path")->required();
    rplot->callback([&] { cmd_report_plot(rp_log, rp_ablation, rp_out); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
