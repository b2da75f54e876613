#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const std::string kRoot = "/tmp/hrtse_test_cli";

std::string binary() {
    const char* p = std::getenv("HRTSE_BIN");
    return p && *p ? p : "./hrtse";
}

struct RunResult {
    int code = -1;
    std::string out;
};

RunResult run(const std::string& args, const std::string& env = "") {
    std::string cmd = (env.empty() ? "" : env + " ") + binary() + " " + args +
                      " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    RunResult r;
    std::array<char, 512> buf{};
    while (fgets(buf.data(), int(buf.size()), pipe)) r.out += buf.data();
    int rc = pclose(pipe);
    r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    return r;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("help works and bad invocations exit with the usage code") {
    CHECK(run("--help").code == 0);
    CHECK(run("tse --help").code == 0);
    CHECK(run("").code == 1);
    CHECK(run("bogus").code == 1);
    CHECK(run("corpus make").code == 1);                    // missing --out
    CHECK(run("corpus make --out /tmp/x --what 3").code == 1);
    CHECK(run("report plot --out /tmp/x.svg").code == 1);   // no input chosen
    CHECK(run("report plot --log a --ablation b --out /tmp/x.svg").code == 1);
}

TEST_CASE("missing files and broken configs map to distinct exit codes") {
    fs::create_directories(kRoot);
    // runtime: manifest does not exist
    RunResult r = run("embedder train --manifest " + kRoot +
                      "/nope.jsonl --out " + kRoot + "/e.ckpt");
    CHECK(r.code == 3);

    // config: file is not JSON
    std::ofstream(kRoot + "/bad.json") << "not json{";
    r = run("tse train --config " + kRoot + "/bad.json");
    CHECK(r.code == 2);

    // config: bad profile value
    std::ofstream(kRoot + "/badprofile.json")
        << R"({"profile": "pocket", "manifest_path": "x", "embedder_ckpt": "y",)"
        << R"( "out_dir": "z"})";
    r = run("tse train --config " + kRoot + "/badprofile.json");
    CHECK(r.code == 2);
    fs::remove_all(kRoot);
}

TEST_CASE("the same seed regenerates the corpus byte for byte") {
    fs::remove_all(kRoot);
    // 3 utterances per speaker cannot satisfy the anchor protocol: the lone
    // train utterance would have to anchor itself
    CHECK(run("corpus make --out " + kRoot + "/x --speakers 3 --utts 3")
              .code == 2);

    std::string args =
        " --speakers 3 --utts 4 --min-duration 1.0 --max-duration 1.5"
        " --train 4 --val 1 --test 1 --seed 77";
    CHECK(run("corpus make --out " + kRoot + "/a" + args).code == 0);
    CHECK(run("corpus make --out " + kRoot + "/b" + args).code == 0);

    // manifests differ only in the recorded root; compare them line by line
    std::istringstream ma(slurp(kRoot + "/a/manifest.jsonl"));
    std::istringstream mb(slurp(kRoot + "/b/manifest.jsonl"));
    std::string la, lb;
    size_t lines = 0;
    while (std::getline(ma, la) && std::getline(mb, lb)) {
        ++lines;
        if (la.find("corpus_root") == std::string::npos) CHECK(la == lb);
    }
    CHECK(lines > 10);

    bool compared = false;
    for (const auto& e : fs::recursive_directory_iterator(kRoot + "/a")) {
        if (e.path().extension() != ".wav") continue;
        std::string rel = fs::relative(e.path(), kRoot + "/a").string();
        CHECK(slurp(e.path().string()) == slurp(kRoot + "/b/" + rel));
        compared = true;
    }
    CHECK(compared);
    fs::remove_all(kRoot);
}

TEST_CASE("corpus, embedder, extractor, eval, separate, and plots chain up") {
    fs::remove_all(kRoot);
    std::string corpus = kRoot + "/corpus";
    CHECK(run("corpus make --out " + corpus +
              " --speakers 4 --utts 4 --min-duration 1.5 --max-duration 2.5"
              " --train 6 --val 2 --test 2 --seed 11")
              .code == 0);

    CHECK(run("embedder train --manifest " + corpus + "/manifest.jsonl" +
              " --out " + kRoot + "/emb.ckpt --epochs 1 --batch 8 --log " +
              kRoot + "/emb_log.json")
              .code == 0);
    CHECK(fs::exists(kRoot + "/emb.ckpt"));
    CHECK(fs::exists(kRoot + "/emb_log.json"));

    CHECK(run("tse train --manifest " + corpus + "/manifest.jsonl" +
              " --embedder " + kRoot + "/emb.ckpt --out " + kRoot + "/run" +
              " --mode hr --epochs 1 --batch 4 --crop 0.6 --anchor-crop 0.6" +
              " --seed 3")
              .code == 0);
    std::string ckpt = kRoot + "/run/tse_hr.ckpt";
    REQUIRE(fs::exists(ckpt));

    RunResult ev = run("tse eval --ckpt " + ckpt + " --embedder " + kRoot +
                       "/emb.ckpt --manifest " + corpus + "/manifest.jsonl" +
                       " --split test --out " + kRoot + "/eval.csv");
    CHECK(ev.code == 0);
    CHECK(fs::exists(kRoot + "/eval.csv"));
    CHECK(fs::exists(kRoot + "/eval.json"));
    {
        std::istringstream csv(slurp(kRoot + "/eval.csv"));
        std::string header;
        std::getline(csv, header);
        CHECK(header == "utt_id,si_snr_db,si_snri_db,stoi,estoi,tsos_flag");
        int rows = 0;
        std::string line;
        while (std::getline(csv, line))
            if (!line.empty()) ++rows;
        CHECK(rows == 2);
    }

    // single-file extraction preserves duration
    std::string wav1, wav2;
    for (const auto& e : fs::recursive_directory_iterator(corpus))
        if (e.path().extension() == ".wav") {
            if (wav1.empty())
                wav1 = e.path().string();
            else
                wav2 = e.path().string();
        }
    REQUIRE(!wav2.empty());
    CHECK(run("tse separate --mix " + wav1 + " --anchor " + wav2 +
              " --ckpt " + ckpt + " --embedder " + kRoot + "/emb.ckpt" +
              " --out " + kRoot + "/est.wav")
              .code == 0);
    CHECK(fs::file_size(kRoot + "/est.wav") > 1000);

    CHECK(run("report plot --log " + kRoot + "/run/train_log_hr.json --out " +
              kRoot + "/loss.svg")
              .code == 0);
    CHECK(slurp(kRoot + "/loss.svg").find("<svg") == 0);

    // a moved corpus is found again through the root override
    fs::rename(corpus, kRoot + "/corpus_moved");
    RunResult moved =
        run("tse eval --ckpt " + ckpt + " --embedder " + kRoot +
                "/emb.ckpt --manifest " + kRoot + "/corpus_moved/manifest.jsonl" +
                " --split test --out " + kRoot + "/eval2.csv",
            "HRTSE_CORPUS_ROOT=" + kRoot + "/corpus_moved");
    CHECK(moved.code == 0);
    RunResult stale =
        run("tse eval --ckpt " + ckpt + " --embedder " + kRoot +
            "/emb.ckpt --manifest " + kRoot + "/corpus_moved/manifest.jsonl" +
            " --split test --out " + kRoot + "/eval3.csv");
    CHECK(stale.code == 3);

    fs::remove_all(kRoot);
}
