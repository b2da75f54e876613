#include "hrtse/ablation.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "hrtse/common.hpp"
#include "hrtse/svgplot.hpp"

namespace hrtse {

namespace {

AblationCell cell_of(const MetricsReport& rep) {
    AblationCell c;
    c.si_snr_db = rep.mean_si_snr;
    c.stoi_v = rep.mean_stoi;
    c.estoi_v = rep.mean_estoi;
    c.tsos_rate = rep.tsos_rate;
    c.pesq = rep.mean_pesq;
    return c;
}

nlohmann::json cell_json(const AblationCell& c) {
    nlohmann::json j = {{"si_snr_db", c.si_snr_db},
                        {"stoi", c.stoi_v},
                        {"estoi", c.estoi_v},
                        {"tsos", c.tsos_rate}};
    j["pesq"] = c.pesq ? nlohmann::json(*c.pesq) : nlohmann::json();
    return j;
}

void table_row(std::ostringstream& os, const std::string& label,
               const AblationCell& c) {
    os << std::left << std::setw(10) << label << std::right << std::fixed
       << std::setprecision(3) << std::setw(10) << c.si_snr_db << std::setw(9)
       << c.stoi_v << std::setw(9) << c.estoi_v;
    if (c.pesq)
        os << std::setw(9) << *c.pesq;
    else
        os << std::setw(9) << "n/a";
    os << std::setw(9) << c.tsos_rate << "\n";
}

}  // namespace

void AblationConfig::validate() const {
    base.validate();
    if (seeds.empty()) throw ConfigError("ablation: need at least one seed");
    if (out_dir.empty()) throw ConfigError("ablation: out_dir required");
    if (eval_split.empty()) throw ConfigError("ablation: eval_split required");
}

AblationResult summarize_ablation(const AblationCell& mixture,
                                  const std::vector<AblationSeedRun>& runs) {
    if (runs.empty()) throw ValueError("ablation: no runs to summarize");
    AblationResult r;
    r.mixture = mixture;
    r.runs = runs;
    for (const auto& mode : r.modes) {
        AblationCell acc;
        double pesq_sum = 0.0;
        int pesq_n = 0;
        for (const auto& run : runs) {
            auto it = run.by_mode.find(mode);
            if (it == run.by_mode.end())
                throw ValueError("ablation: run for seed " +
                                 std::to_string(run.seed) + " lacks mode " +
                                 mode);
            acc.si_snr_db += it->second.si_snr_db;
            acc.stoi_v += it->second.stoi_v;
            acc.estoi_v += it->second.estoi_v;
            acc.tsos_rate += it->second.tsos_rate;
            if (it->second.pesq) {
                pesq_sum += *it->second.pesq;
                ++pesq_n;
            }
        }
        double n = double(runs.size());
        acc.si_snr_db /= n;
        acc.stoi_v /= n;
        acc.estoi_v /= n;
        acc.tsos_rate /= n;
        if (pesq_n) acc.pesq = pesq_sum / pesq_n;
        r.mean_by_mode[mode] = acc;
    }
    for (auto& run : r.runs) {
        double hr = run.by_mode.at("hr").si_snr_db;
        run.hr_leads = hr >= run.by_mode.at("local").si_snr_db &&
                       hr >= run.by_mode.at("global").si_snr_db;
        if (run.hr_leads) ++r.seeds_with_expected_ordering;
    }
    r.ordering_warning = 2 * r.seeds_with_expected_ordering < int(runs.size()) + 1;
    return r;
}

AblationResult run_ablation(const AblationConfig& cfg) {
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);

    Manifest manifest = load_manifest(cfg.base.manifest_path);
    EvalConfig eval_cfg;
    eval_cfg.pesq_cmd = cfg.pesq_cmd;

    MetricsReport mix_rep =
        evaluate_set(manifest, cfg.eval_split, mixture_passthrough(), eval_cfg);
    AblationCell mixture = cell_of(mix_rep);

    std::vector<AblationSeedRun> runs;
    for (uint64_t seed : cfg.seeds) {
        AblationSeedRun run;
        run.seed = seed;
        for (const auto& mode : {FusionMode::local, FusionMode::global,
                                 FusionMode::hr}) {
            TrainConfig tc = cfg.base;
            tc.mode = mode;
            tc.seed = seed;
            tc.out_dir = cfg.out_dir + "/seed" + std::to_string(seed) + "_" +
                         to_string(mode);
            TrainResult tr = train_tse(tc);
            TseBundle bundle = load_tse(tr.checkpoint_path, tc.embedder_ckpt);
            MetricsReport rep = evaluate_set(manifest, cfg.eval_split,
                                             model_estimator(bundle), eval_cfg);
            write_report(rep, tc.out_dir + "/eval_" + to_string(mode) + ".csv");
            run.by_mode[to_string(mode)] = cell_of(rep);
        }
        runs.push_back(std::move(run));
    }

    AblationResult result = summarize_ablation(mixture, runs);
    write_ablation_report(result, cfg.out_dir);
    if (result.ordering_warning)
        std::fprintf(stderr,
                     "warning: hr led both single-feature modes in %d/%zu "
                     "seeds; see ablation.json\n",
                     result.seeds_with_expected_ordering, runs.size());
    return result;
}

std::string AblationResult::table_text() const {
    std::ostringstream os;
    os << std::left << std::setw(10) << "method" << std::right << std::setw(10)
       << "si_snr" << std::setw(9) << "stoi" << std::setw(9) << "estoi"
       << std::setw(9) << "pesq" << std::setw(9) << "tsos" << "\n";
    table_row(os, "mixture", mixture);
    for (const auto& mode : modes) table_row(os, mode, mean_by_mode.at(mode));
    os << "hr led the single-feature modes in " << seeds_with_expected_ordering
       << "/" << runs.size() << " seeds"
       << (ordering_warning ? " (warning)" : "") << "\n";
    return os.str();
}

nlohmann::json AblationResult::to_json() const {
    nlohmann::json rows;
    rows["mixture"] = cell_json(mixture);
    for (const auto& mode : modes) rows[mode] = cell_json(mean_by_mode.at(mode));

    nlohmann::json per_seed = nlohmann::json::array();
    for (const auto& run : runs) {
        nlohmann::json jr = {{"seed", run.seed}, {"hr_leads", run.hr_leads}};
        for (const auto& [mode, cell] : run.by_mode) jr[mode] = cell_json(cell);
        per_seed.push_back(jr);
    }
    return {{"rows", rows},
            {"per_seed", per_seed},
            {"seeds_with_expected_ordering", seeds_with_expected_ordering},
            {"ordering_warning", ordering_warning}};
}

void write_ablation_report(const AblationResult& r, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream os(fs::path(dir) / "ablation.json");
        if (!os) throw IoError("cannot write ablation report in " + dir);
        os << r.to_json().dump(2) << "\n";
    }
    {
        std::ofstream os(fs::path(dir) / "ablation.txt");
        os << r.table_text();
    }
    std::vector<svg::Bar> bars{{"mixture", r.mixture.si_snr_db}};
    for (const auto& mode : r.modes)
        bars.push_back({mode, r.mean_by_mode.at(mode).si_snr_db});
    svg::write_bar_chart((fs::path(dir) / "ablation_si_snr.svg").string(),
                         "held-out SI-SNR by fusion mode", "SI-SNR (dB)", bars);
}

}  // namespace hrtse
