#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hrtse/common.hpp"
#include "hrtse/corpus.hpp"
#include "hrtse/trainer.hpp"

using namespace hrtse;
namespace fs = std::filesystem;

namespace {

const std::string kRoot = "/tmp/hrtse_test_trainer";

struct Fixture {
    Manifest manifest;
    std::string manifest_path;
    std::string embedder_ckpt;
};

const Fixture& fixture() {
    static Fixture f = [] {
        Fixture x;
        fs::remove_all(kRoot);
        ToyCorpusConfig cc;
        cc.n_speakers = 4;
        cc.utts_per_speaker = 4;
        cc.min_duration_s = 1.5;
        cc.max_duration_s = 2.5;
        cc.train_mixtures = 6;
        cc.val_mixtures = 2;
        cc.test_mixtures = 2;
        cc.seed = 101;
        x.manifest = generate_toy_corpus(cc, kRoot + "/corpus");
        x.manifest_path = kRoot + "/corpus/manifest.jsonl";
        // an untrained embedder is fine here: the trainer only needs stable
        // speaker vectors, not good ones
        EcapaConfig e;
        e.channels = 64;
        e.res2net_scale = 4;
        e.se_channels = 8;
        e.att_bottleneck = 16;
        e.embedding_dim = 32;
        nn::Params P;
        Rng rng(3);
        Ecapa model(P, e, rng);
        x.embedder_ckpt = kRoot + "/embedder.ckpt";
        save_embedder(x.embedder_ckpt, P, e, {});
        return x;
    }();
    return f;
}

TrainConfig smoke_config(const std::string& out_dir) {
    TrainConfig c;
    c.profile = "desk";
    c.mode = FusionMode::hr;
    c.lr = 1e-3;
    c.batch_size = 4;
    c.max_epochs = 2;
    c.crop_seconds = 0.6;
    c.anchor_seconds = 0.6;
    c.seed = 11;
    c.manifest_path = fixture().manifest_path;
    c.embedder_ckpt = fixture().embedder_ckpt;
    c.out_dir = out_dir;
    return c;
}

}  // namespace

TEST_CASE("learning rate halves exactly after a plateau and only then") {
    CHECK(lr_step({5.0, 4.0, 4.1, 4.2}, 1e-3, 2) == 5e-4);
    CHECK(lr_step({5.0, 4.0}, 1e-3, 2) == 1e-3);
    CHECK(lr_step({5.0, 4.0, 4.1, 3.9}, 1e-3, 2) == 1e-3);
    // a longer window tolerates the same history
    CHECK(lr_step({5.0, 4.0, 4.1, 4.2}, 1e-3, 3) == 1e-3);

    // repeated plateau decays geometrically
    std::vector<double> hist{3.0};
    double lr = 1e-3;
    std::vector<double> trace;
    for (int e = 0; e < 3; ++e) {
        hist.push_back(3.0 + 0.1 * (e + 1));
        lr = lr_step(hist, lr, 2);
        trace.push_back(lr);
    }
    CHECK(trace == std::vector<double>{1e-3, 5e-4, 2.5e-4});
}

TEST_CASE("train config round trips through json") {
    TrainConfig c;
    c.profile = "full";
    c.mode = FusionMode::global;
    c.lr = 2e-4;
    c.batch_size = 12;
    c.plateau_epochs = 3;
    c.lr_halving = false;
    c.max_epochs = 7;
    c.min_lr = 1e-6;
    c.crop_seconds = 2.5;
    c.anchor_seconds = 1.5;
    c.grad_clip = 3.0;
    c.seed = 99;
    c.determinism = false;
    c.time_limit_s = 120.0;
    c.manifest_path = "/a/b.jsonl";
    c.embedder_ckpt = "/a/e.ckpt";
    c.out_dir = "/a/out";
    c.loss.p = 0.5;
    c.loss.w_ri = 0.2;
    c.loss.w_mag = 0.3;
    c.loss.w_si = 0.9;

    TrainConfig d = TrainConfig::from_json(c.to_json());
    CHECK(d.profile == c.profile);
    CHECK(d.mode == c.mode);
    CHECK(d.lr == c.lr);
    CHECK(d.batch_size == c.batch_size);
    CHECK(d.plateau_epochs == c.plateau_epochs);
    CHECK(d.lr_halving == c.lr_halving);
    CHECK(d.max_epochs == c.max_epochs);
    CHECK(d.min_lr == c.min_lr);
    CHECK(d.crop_seconds == c.crop_seconds);
    CHECK(d.anchor_seconds == c.anchor_seconds);
    CHECK(d.grad_clip == c.grad_clip);
    CHECK(d.seed == c.seed);
    CHECK(d.determinism == c.determinism);
    CHECK(d.time_limit_s == c.time_limit_s);
    CHECK(d.manifest_path == c.manifest_path);
    CHECK(d.embedder_ckpt == c.embedder_ckpt);
    CHECK(d.out_dir == c.out_dir);
    CHECK(d.loss.p == c.loss.p);
    CHECK(d.loss.w_ri == c.loss.w_ri);
    CHECK(d.loss.w_mag == c.loss.w_mag);
    CHECK(d.loss.w_si == c.loss.w_si);

    // absent fields keep defaults
    TrainConfig fresh = TrainConfig::from_json(nlohmann::json::object());
    CHECK(fresh.profile == "desk");
    CHECK(fresh.lr == 1e-3);
}

TEST_CASE("train config rejects nonsense") {
    TrainConfig c;
    c.lr = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.plateau_epochs = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.profile = "pocket";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.crop_seconds = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("report aggregation and file output") {
    MetricsReport rep;
    UttMetrics a;
    a.id = "m1";
    a.si_snr_db = 10.0;
    a.si_snri_db = 4.0;
    a.stoi_v = 0.9;
    a.estoi_v = 0.8;
    a.tsos = false;
    UttMetrics b;
    b.id = "m2";
    b.si_snr_db = 6.0;
    b.si_snri_db = 2.0;
    b.stoi_v = 0.7;
    b.estoi_v = 0.6;
    b.tsos = true;
    rep.rows = {a, b};
    rep.finalize();
    CHECK(rep.mean_si_snr == doctest::Approx(8.0));
    CHECK(rep.mean_si_snri == doctest::Approx(3.0));
    CHECK(rep.mean_stoi == doctest::Approx(0.8));
    CHECK(rep.mean_estoi == doctest::Approx(0.7));
    CHECK(rep.tsos_rate == doctest::Approx(0.5));
    CHECK(!rep.mean_pesq);

    std::string dir = kRoot + "/report";
    write_report(rep, dir + "/test.csv");
    std::ifstream csv(dir + "/test.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "utt_id,si_snr_db,si_snri_db,stoi,estoi,tsos_flag");
    std::getline(csv, line);
    CHECK(line.substr(0, 3) == "m1,");
    CHECK(line.back() == '0');
    std::getline(csv, line);
    CHECK(line.substr(0, 3) == "m2,");
    CHECK(line.back() == '1');

    std::ifstream jf(dir + "/test.json");
    REQUIRE(jf.good());
    nlohmann::json j = nlohmann::json::parse(jf);
    CHECK(j["si_snri_db"] == doctest::Approx(3.0));
    CHECK(j["tsos"] == doctest::Approx(0.5));
    CHECK(j["count"] == 2);

    // pesq column appears exactly when scores exist
    rep.rows[0].pesq = 3.0;
    rep.rows[1].pesq = 4.0;
    rep.finalize();
    REQUIRE(rep.mean_pesq.has_value());
    CHECK(*rep.mean_pesq == doctest::Approx(3.5));
    write_report(rep, dir + "/pesq.csv");
    std::ifstream csv2(dir + "/pesq.csv");
    std::getline(csv2, line);
    CHECK(line == "utt_id,si_snr_db,si_snri_db,stoi,estoi,tsos_flag,pesq");
}

TEST_CASE("passthrough evaluation scores the unprocessed mixture") {
    const Fixture& f = fixture();
    MetricsReport rep = evaluate_set(f.manifest, "test", mixture_passthrough());
    REQUIRE(rep.rows.size() == 2);
    for (const auto& r : rep.rows) {
        CHECK(!r.id.empty());
        // the estimate is the mixture itself, so the improvement is zero
        CHECK(r.si_snri_db == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(std::isfinite(r.si_snr_db));
        CHECK(r.stoi_v > 0.0);
        CHECK(r.stoi_v <= 1.0);
        CHECK(!r.pesq.has_value());
    }
}

TEST_CASE("two-epoch extraction training runs end to end") {
    const Fixture& f = fixture();
    std::string out = kRoot + "/run_a";
    TrainConfig cfg = smoke_config(out);
    TrainResult res = train_tse(cfg);

    REQUIRE(res.log.epochs.size() == 2);
    CHECK(res.log.best_epoch >= 1);
    CHECK(std::isfinite(res.log.epochs[0].train_total));
    CHECK(std::isfinite(res.log.epochs[0].val_total));
    CHECK(fs::exists(res.checkpoint_path));
    CHECK(fs::exists(out + "/train_log_hr.json"));

    // lr trace never rises and each step is a clean halving
    for (size_t i = 1; i < res.log.lr_trace.size(); ++i) {
        double prev = res.log.lr_trace[i - 1], cur = res.log.lr_trace[i];
        CHECK(cur <= prev);
        if (cur < prev) CHECK(cur == doctest::Approx(prev / 2.0));
    }

    SUBCASE("the checkpoint reloads and separates") {
        TseBundle bundle = load_tse(res.checkpoint_path, f.embedder_ckpt);
        CHECK(bundle.mode == FusionMode::hr);
        CHECK(bundle.sep_cfg.embedding_dim == 32);

        auto test_idx = f.manifest.mixtures_of_split("test");
        REQUIRE(!test_idx.empty());
        MixtureExample ex =
            realize_mixture(f.manifest, f.manifest.mixtures[size_t(test_idx[0])]);
        Waveform est = bundle.separate(ex.mixture, ex.anchor);
        REQUIRE(est.size() == ex.mixture.size());
        for (float v : est.samples) REQUIRE(std::isfinite(v));

        MetricsReport rep =
            evaluate_set(f.manifest, "test", model_estimator(bundle));
        CHECK(rep.rows.size() == 2);
    }

    SUBCASE("the same seed reproduces the first epoch exactly") {
        TrainConfig again = smoke_config(kRoot + "/run_b");
        TrainResult res2 = train_tse(again);
        REQUIRE(res2.log.epochs.size() == 2);
        CHECK(res2.log.epochs[0].train_total == res.log.epochs[0].train_total);
        CHECK(res2.log.epochs[0].val_total == res.log.epochs[0].val_total);
        CHECK(res2.log.epochs[1].train_total == res.log.epochs[1].train_total);
    }

    SUBCASE("a different embedder checkpoint is refused") {
        EcapaConfig e;
        e.channels = 64;
        e.res2net_scale = 4;
        e.se_channels = 8;
        e.att_bottleneck = 16;
        e.embedding_dim = 32;
        nn::Params P;
        Rng rng(77);  // different weights, same architecture
        Ecapa model(P, e, rng);
        std::string other = kRoot + "/other_embedder.ckpt";
        save_embedder(other, P, e, {});
        CHECK_THROWS_AS(load_tse(res.checkpoint_path, other), ConfigError);
    }
}

TEST_CASE("training demands an output directory and train data") {
    TrainConfig cfg = smoke_config("");
    CHECK_THROWS_AS(train_tse(cfg), ConfigError);
}
