// hsib: train small hyperspectral classifiers and benchmark pruning,
// int8 quantization and knowledge distillation against them.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "hsib/bench.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace hsib;

namespace {

struct GlobalOpts {
    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
    int threads = 1;
};

bench::ExperimentConfig load_config(const GlobalOpts& g) {
    auto cfg = bench::ExperimentConfig::from_json_file(g.config_path);
    if (g.seed_set) {
        cfg.seed = g.seed;
        cfg.split.seed = g.seed;
    }
    if (!g.out.empty()) cfg.out_dir = g.out;
    cfg.threads = g.threads;
    return cfg;
}

int run_family(const GlobalOpts& g, const std::string& family) {
    bench::ExperimentConfig cfg;
    try {
        cfg = load_config(g);
        const bool ok =
            (family == "train" && (cfg.method == "baseline" || cfg.method == "scratch")) ||
            (family == "prune" && cfg.method.rfind("prune.", 0) == 0) ||
            (family == "quantize" && cfg.method.rfind("quant.", 0) == 0) ||
            (family == "distill" && cfg.method.rfind("kd.", 0) == 0);
        if (!ok)
            throw Error("config method '" + cfg.method + "' does not belong to the '" + family +
                        "' subcommand");
    } catch (const Error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    }
    try {
        auto rows = bench::run_experiment(cfg);
        for (const auto& r : rows) std::printf("%s\n", bench::csv_line(r).c_str());
        return 0;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hyperspectral land-cover compression benchmark"};
    app.require_subcommand(1);
    GlobalOpts g;

    std::string header_path;
    auto* ingest = app.add_subcommand("ingest-check", "validate a dataset container");
    ingest->add_option("header", header_path, "path to the .hsij header")->required();

    std::string synth_kind = "ip", synth_out = "data";
    uint64_t synth_seed = 0;
    bool synth_seed_set = false;
    auto* synth =
        app.add_subcommand("make-synthetic", "generate a deterministic synthetic scene container");
    synth->add_option("--kind", synth_kind, "ip | up")->check(CLI::IsMember({"ip", "up"}));
    synth->add_option("--out", synth_out, "output directory");
    synth->add_option("--seed", synth_seed, "generator seed")
        ->each([&](const std::string&) { synth_seed_set = true; });

    auto add_cfg = [&](CLI::App* sub) {
        sub->add_option("--config", g.config_path, "experiment config (json)")->required();
        sub->add_option("--seed", g.seed, "override config seed")
            ->each([&](const std::string&) { g.seed_set = true; });
        sub->add_option("--out", g.out, "override output directory");
        sub->add_option("--threads", g.threads, "evaluation threads (default 1)");
    };
    auto* preprocess =
        app.add_subcommand("preprocess", "clean + standardize + project, cache the result");
    add_cfg(preprocess);
    auto* train_cmd = app.add_subcommand("train", "train a baseline or scratch model");
    add_cfg(train_cmd);
    auto* prune_cmd = app.add_subcommand("prune", "prune and fine-tune a trained model");
    add_cfg(prune_cmd);
    auto* quant_cmd = app.add_subcommand("quantize", "convert a trained model to int8");
    add_cfg(quant_cmd);
    auto* distill_cmd = app.add_subcommand("distill", "train a student with distillation");
    add_cfg(distill_cmd);

    std::string ckpt_path;
    auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint (training-free)");
    add_cfg(eval_cmd);
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    auto* lat_cmd = app.add_subcommand("bench-latency", "measure ms/sample for a checkpoint");
    add_cfg(lat_cmd);
    lat_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();

    std::string report_csv, report_md = "report.md", report_title = "results";
    auto* report_cmd = app.add_subcommand("report", "render a csv report as markdown");
    report_cmd->add_option("--csv", report_csv, "input csv")->required();
    report_cmd->add_option("--md", report_md, "output markdown");
    report_cmd->add_option("--title", report_title, "report title");

    int table_no = 3;
    std::string table_data = "data", table_out = "runs/tables";
    uint64_t table_seed = 1;
    int parallel = 1;
    auto* table_cmd = app.add_subcommand("reproduce-table",
                                         "run the benchmark matrix behind one results table");
    table_cmd->add_option("table", table_no, "table number (2,3,4,5..12)")->required();
    table_cmd->add_option("--data", table_data, "directory with dataset containers");
    table_cmd->add_option("--out", table_out, "output directory");
    table_cmd->add_option("--seed", table_seed, "seed");
    table_cmd->add_option("--parallel-experiments", parallel, "independent experiments at once");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (ingest->parsed()) {
            auto ds = load_cube(header_path);
            std::printf(
                "name=%s bands=%lld height=%lld width=%lld classes=%lld labeled=%lld mask=%s\n",
                ds.name.c_str(), static_cast<long long>(ds.cube.bands),
                static_cast<long long>(ds.cube.height), static_cast<long long>(ds.cube.width),
                static_cast<long long>(ds.labels.classes),
                static_cast<long long>(ds.labels.labeled_count()), ds.mask ? "yes" : "no");
            return 0;
        }
        if (synth->parsed()) {
            auto spec =
                synth_kind == "ip" ? SynthSpec::indian_pines_like() : SynthSpec::pavia_like();
            if (synth_seed_set) spec.seed = synth_seed;
            auto ds = make_synthetic(spec);
            fs::create_directories(synth_out);
            const auto header = (fs::path(synth_out) / (spec.name + ".hsij")).string();
            save_dataset(ds, header);
            std::printf("wrote %s\n", header.c_str());
            return 0;
        }
        if (report_cmd->parsed()) {
            auto rows = bench::parse_csv(report_csv);
            bench::write_markdown(rows, report_md, report_title);
            std::printf("wrote %s\n", report_md.c_str());
            return 0;
        }
        if (table_cmd->parsed())
            return bench::reproduce_table(table_no, table_data, table_out, table_seed, parallel);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }

    if (preprocess->parsed()) {
        bench::ExperimentConfig cfg;
        try {
            cfg = load_config(g);
        } catch (const Error& e) {
            std::fprintf(stderr, "config error: %s\n", e.what());
            return 2;
        }
        try {
            auto ds = load_cube(bench::resolve_dataset_path(cfg.dataset));
            HsiCube cube = ds.cube;
            if (cube.bands == 224) cube = remove_bands(cube, indian_pines_default_removed_bands());
            const LabelRaster* pop = cfg.fit_stats_labeled_only ? &ds.labels : nullptr;
            auto stats = standardize_fit(cube, pop);
            auto std_cube = standardize_apply(cube, stats);
            auto pca = pca_fit_cube(std_cube, cfg.pca_channels, pop);
            auto reduced = pca_transform(std_cube, pca, cfg.pca_channels);
            Dataset out;
            out.name = ds.name + "-pca" + std::to_string(cfg.pca_channels);
            out.cube = std::move(reduced);
            out.labels = ds.labels;
            out.mask = ds.mask;
            out.class_names = ds.class_names;
            fs::create_directories(cfg.out_dir);
            const auto header = (fs::path(cfg.out_dir) / (out.name + ".hsij")).string();
            save_dataset(out, header);
            pca.save((fs::path(cfg.out_dir) / (out.name + ".pca.json")).string());
            std::printf("wrote %s\n", header.c_str());
            return 0;
        } catch (const Error& e) {
            std::fprintf(stderr, "error: %s\n", e.what());
            return 1;
        }
    }
    if (train_cmd->parsed()) return run_family(g, "train");
    if (prune_cmd->parsed()) return run_family(g, "prune");
    if (quant_cmd->parsed()) return run_family(g, "quantize");
    if (distill_cmd->parsed()) return run_family(g, "distill");

    if (eval_cmd->parsed() || lat_cmd->parsed()) {
        bench::ExperimentConfig cfg;
        try {
            cfg = load_config(g);
            cfg.method = "baseline";
            cfg.teacher = ckpt_path;  // the runner loads instead of training
            cfg.measure_latency_flag = lat_cmd->parsed();
        } catch (const Error& e) {
            std::fprintf(stderr, "config error: %s\n", e.what());
            return 2;
        }
        try {
            auto rows = bench::run_experiment(cfg);
            for (const auto& r : rows) std::printf("%s\n", bench::csv_line(r).c_str());
            return 0;
        } catch (const Error& e) {
            std::fprintf(stderr, "error: %s\n", e.what());
            return 1;
        }
    }
    return 2;
}
