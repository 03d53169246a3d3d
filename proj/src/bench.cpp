#include "hsib/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <atomic>
#include <thread>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hsib::bench {

void ReportRow::validate() const {
    if (top1 < 0 || top5 < 0 || top1 > 100 || top5 > 100 || top1 > top5 + 1e-9)
        throw Error("report row: top-1/top-5 out of order");
    if (params <= 0) throw Error("report row: params must be positive");
}

std::string csv_header() {
    return "method,dataset,split,ratio,top1,top5,params,memory_mb,latency_ms,seed,wall_s";
}

namespace {

std::string fmt(double v, int prec) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

}  // namespace

std::string csv_line(const ReportRow& r) {
    std::ostringstream os;
    os << r.method << ',' << r.dataset << ',' << r.split << ',' << r.ratio << ','
       << fmt(r.top1, 4) << ',' << fmt(r.top5, 4) << ',' << r.params << ','
       << fmt(r.memory_mb, 6) << ',' << fmt(r.latency_ms, 4) << ',' << r.seed << ','
       << fmt(r.wall_s, 3);
    return os.str();
}

void write_csv(const std::vector<ReportRow>& rows, const std::string& path) {
    if (rows.empty()) throw Error("write_csv: no rows");
    fs::path p(path);
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path);
    f << csv_header() << "\n";
    for (const auto& r : rows) f << csv_line(r) << "\n";
}

std::vector<ReportRow> parse_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != csv_header())
        throw Error("csv: unexpected header in " + path);
    std::vector<ReportRow> rows;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cells.push_back(c);
        if (cells.size() != 11) throw Error("csv: malformed row '" + line + "'");
        ReportRow r;
        r.method = cells[0];
        r.dataset = cells[1];
        r.split = cells[2];
        r.ratio = std::stoi(cells[3]);
        r.top1 = std::stod(cells[4]);
        r.top5 = std::stod(cells[5]);
        r.params = std::stoll(cells[6]);
        r.memory_mb = std::stod(cells[7]);
        r.latency_ms = std::stod(cells[8]);
        r.seed = std::stoull(cells[9]);
        r.wall_s = std::stod(cells[10]);
        rows.push_back(r);
    }
    return rows;
}

namespace {

std::string method_section(const std::string& method) {
    if (method == "baseline" || method == "mlp" || method == "cnn1d" || method == "cnn2d")
        return "Baselines";
    if (method == "scratch") return "Scratch";
    if (method.rfind("prune.", 0) == 0) return "Pruning";
    if (method.rfind("quant.", 0) == 0) return "Quantization";
    if (method.rfind("kd.", 0) == 0) {
        const std::string id = method.substr(3);
        if (kd::is_offline(id)) return "Offline Distillation";
        if (kd::is_online(id)) return "Online Distillation";
        return "Self Distillation";
    }
    return "Other";
}

}  // namespace

void write_markdown(const std::vector<ReportRow>& rows, const std::string& path,
                    const std::string& title) {
    if (rows.empty()) throw Error("write_markdown: no rows");
    fs::path p(path);
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path);
    f << "# " << title << "\n";
    std::vector<std::string> order = {"Baselines",          "Scratch",
                                      "Pruning",            "Quantization",
                                      "Offline Distillation", "Online Distillation",
                                      "Self Distillation",  "Other"};
    for (const auto& sec : order) {
        bool any = false;
        for (const auto& r : rows) any = any || method_section(r.method) == sec;
        if (!any) continue;
        f << "\n## " << sec << "\n\n";
        f << "| method | dataset | split | ratio | top-1 | top-5 | params | MB | ms/sample |\n";
        f << "|---|---|---|---|---|---|---|---|---|\n";
        for (const auto& r : rows) {
            if (method_section(r.method) != sec) continue;
            f << "| " << r.method << " | " << r.dataset << " | " << r.split << " | "
              << (r.ratio ? std::to_string(r.ratio) + "%" : "-") << " | " << fmt(r.top1, 1)
              << " | " << fmt(r.top5, 1) << " | " << r.params << " | " << fmt(r.memory_mb, 2)
              << " | " << (r.latency_ms >= 0 ? fmt(r.latency_ms, 2) : "-") << " |\n";
        }
    }
}

// ---------------------------------------------------------------------------
// latency
// ---------------------------------------------------------------------------

LatencyResult measure_latency(const std::function<TensPtr<float>(const TensPtr<float>&)>& fwd,
                              const PatchSet& probe, int64_t reps, bool spectra_input,
                              bool reshape_1d) {
    if (probe.size() < 100) throw Error("measure_latency: need at least 100 probe samples");
    if (reps < 30) throw Error("measure_latency: need at least 30 repetitions");

    auto sample = [&](int64_t i) {
        std::vector<int64_t> idx = {i % probe.size()};
        TensPtr<float> x;
        if (spectra_input) {
            x = probe.gather_spectra(idx);
            if (reshape_1d) x = reshape(x, {1, 1, x->shape[1]});
        } else {
            x = probe.gather(idx);
        }
        return x;
    };

    NoGradGuard ng;
    for (int64_t i = 0; i < 10; ++i) (void)fwd(sample(i));  // warmup, discarded

    std::vector<double> ms(static_cast<size_t>(reps));
    for (int64_t i = 0; i < reps; ++i) {
        auto x = sample(10 + i);
        auto t0 = std::chrono::steady_clock::now();
        (void)fwd(x);
        auto t1 = std::chrono::steady_clock::now();
        ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    std::sort(ms.begin(), ms.end());
    LatencyResult lr;
    lr.median_ms = ms[ms.size() / 2];
    lr.iqr_lo_ms = ms[ms.size() / 4];
    lr.iqr_hi_ms = ms[(3 * ms.size()) / 4];
    return lr;
}

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

std::string resolve_dataset_path(const std::string& path) {
    if (fs::exists(path)) return path;
    if (const char* root = std::getenv("HSIB_DATA_DIR")) {
        fs::path alt = fs::path(root) / path;
        if (fs::exists(alt)) return alt.string();
    }
    throw Error("dataset not found: " + path +
                " (also tried under HSIB_DATA_DIR)");
}

void ExperimentConfig::validate() const {
    if (schema_version != 1) throw Error("config: unsupported schema_version");
    if (dataset.empty()) throw Error("config: field 'dataset' is required");
    if (split.kind != "random" && split.kind != "disjoint" && split.kind != "mask")
        throw Error("config: split.kind must be random|disjoint|mask");
    if (!(split.fraction > 0 && split.fraction < 1))
        throw Error("config: split.fraction must be in (0,1)");
    if (model != "mlp" && model != "cnn1d" && model != "cnn2d")
        throw Error("config: model must be mlp|cnn1d|cnn2d");
    if (epochs < 1 || batch_size < 2) throw Error("config: bad training knobs");
    if (!(lr > 0)) throw Error("config: lr must be positive");

    const std::string& m = method;
    bool ok = m == "baseline" || m == "scratch";
    if (m.rfind("prune.", 0) == 0) {
        prune::method_from_string(m.substr(6));
        prune::strategy_from_string(finetune_strategy);
        ok = true;
    }
    if (m.rfind("quant.", 0) == 0) {
        const auto id = m.substr(6);
        if (id != "dynamic" && id != "static" && id != "qat")
            throw Error("config: unknown quantization mode '" + id + "'");
        ok = true;
    }
    if (m.rfind("kd.", 0) == 0) {
        const auto id = m.substr(3);
        const auto& ids = kd::method_ids();
        if (std::find(ids.begin(), ids.end(), id) == ids.end())
            throw Error("config: unknown distillation method '" + id + "'");
        if (kd::is_offline(id) && id != "camkd" && teacher.empty())
            throw Error("config: method '" + m + "' requires field 'teacher'");
        if (id == "camkd" && teachers.size() < 2)
            throw Error("config: camkd requires at least 2 entries in 'teachers'");
        ok = true;
    }
    if (m == "scratch" || m.rfind("prune.", 0) == 0 || m.rfind("kd.", 0) == 0)
        prune::PruneTarget::for_label(ratio);  // throws on unknown labels
    if (!ok) throw Error("config: unknown method '" + m + "'");
}

namespace {

void require_known_keys(const json& j, const std::vector<std::string>& known,
                        const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw Error("config: unknown key '" + it.key() + "' in " + where);
    }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw Error(std::string("config: parse error: ") + e.what());
    }
    require_known_keys(
        j,
        {"schema_version", "dataset", "split", "model", "pca_channels", "patch",
         "fit_stats_labeled_only", "fit_stats_train_only", "method", "ratio",
         "finetune_strategy", "epochs",
         "batch_size", "lr", "optimizer", "finetune_epochs", "kd_epochs", "qat_epochs",
         "stage1_epochs", "teacher", "teachers", "out_dir", "seed", "threads",
         "measure_latency", "latency_reps", "distill"},
        "config");
    ExperimentConfig c;
    c.schema_version = j.value("schema_version", 1);
    c.dataset = j.value("dataset", "");
    if (j.contains("split")) {
        require_known_keys(j["split"], {"kind", "fraction", "seed"}, "split");
        c.split.kind = j["split"].value("kind", "random");
        c.split.fraction = j["split"].value("fraction", 0.55);
        c.split.seed = j["split"].value("seed", 1);
    }
    c.model = j.value("model", "cnn2d");
    c.pca_channels = j.value("pca_channels", 40);
    c.patch = j.value("patch", 19);
    c.fit_stats_labeled_only = j.value("fit_stats_labeled_only", true);
    c.fit_stats_train_only = j.value("fit_stats_train_only", false);
    c.method = j.value("method", "baseline");
    c.ratio = j.value("ratio", 90);
    c.finetune_strategy = j.value("finetune_strategy", "I");
    c.epochs = j.value("epochs", 40);
    c.batch_size = j.value("batch_size", 128);
    c.lr = j.value("lr", 1e-3);
    c.optimizer = j.value("optimizer", "adam");
    c.finetune_epochs = j.value("finetune_epochs", 50);
    c.kd_epochs = j.value("kd_epochs", 30);
    c.qat_epochs = j.value("qat_epochs", 3);
    c.stage1_epochs = j.value("stage1_epochs", 8);
    c.teacher = j.value("teacher", "");
    if (j.contains("teachers")) c.teachers = j["teachers"].get<std::vector<std::string>>();
    c.out_dir = j.value("out_dir", "runs/out");
    c.seed = j.value("seed", 1);
    c.threads = j.value("threads", 1);
    c.measure_latency_flag = j.value("measure_latency", true);
    c.latency_reps = j.value("latency_reps", 30);
    if (j.contains("distill")) {
        const auto& d = j["distill"];
        require_known_keys(d,
                           {"method", "temperature", "alpha", "lambda_cc", "lambda_at",
                            "lambda_f", "lambda_p", "lambda_cskd", "delta", "tf_a", "tf_beta",
                            "tf_temperature", "pskd_alpha_final", "peers", "attn_dim"},
                           "distill");
        c.distill.temperature = d.value("temperature", c.distill.temperature);
        c.distill.alpha = d.value("alpha", c.distill.alpha);
        c.distill.lambda_cc = d.value("lambda_cc", c.distill.lambda_cc);
        c.distill.lambda_at = d.value("lambda_at", c.distill.lambda_at);
        c.distill.lambda_f = d.value("lambda_f", c.distill.lambda_f);
        c.distill.lambda_p = d.value("lambda_p", c.distill.lambda_p);
        c.distill.lambda_cskd = d.value("lambda_cskd", c.distill.lambda_cskd);
        c.distill.delta = d.value("delta", c.distill.delta);
        c.distill.tf_a = d.value("tf_a", c.distill.tf_a);
        c.distill.tf_beta = d.value("tf_beta", c.distill.tf_beta);
        c.distill.tf_temperature = d.value("tf_temperature", c.distill.tf_temperature);
        c.distill.pskd_alpha_final = d.value("pskd_alpha_final", c.distill.pskd_alpha_final);
        c.distill.peers = d.value("peers", c.distill.peers);
        c.distill.attn_dim = d.value("attn_dim", c.distill.attn_dim);
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_json_text(ss.str());
}

std::string ExperimentConfig::to_json_string() const {
    json j;
    j["schema_version"] = schema_version;
    j["dataset"] = dataset;
    j["split"] = {{"kind", split.kind}, {"fraction", split.fraction}, {"seed", split.seed}};
    j["model"] = model;
    j["pca_channels"] = pca_channels;
    j["patch"] = patch;
    j["fit_stats_labeled_only"] = fit_stats_labeled_only;
    j["fit_stats_train_only"] = fit_stats_train_only;
    j["method"] = method;
    j["ratio"] = ratio;
    j["finetune_strategy"] = finetune_strategy;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["optimizer"] = optimizer;
    j["finetune_epochs"] = finetune_epochs;
    j["kd_epochs"] = kd_epochs;
    j["qat_epochs"] = qat_epochs;
    j["stage1_epochs"] = stage1_epochs;
    j["teacher"] = teacher;
    j["teachers"] = teachers;
    j["out_dir"] = out_dir;
    j["seed"] = seed;
    j["threads"] = threads;
    j["measure_latency"] = measure_latency_flag;
    j["latency_reps"] = latency_reps;
    j["distill"] = json::parse(distill.to_json_string());
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

namespace {

struct Prepared {
    std::string dataset_name;
    PatchSet train, test;
    int64_t classes = 0;
};

Prepared prepare(const ExperimentConfig& cfg) {
    auto ds = load_cube(resolve_dataset_path(cfg.dataset));
    HsiCube cube = ds.cube;
    // standard cleaning for 224-band cubes: drop the unusable water bands
    if (cube.bands == 224) cube = remove_bands(cube, indian_pines_default_removed_bands());

    SplitMask mask;
    if (cfg.split.kind == "mask") {
        if (!ds.mask) throw Error("config: split.kind=mask but the container has no mask file");
        mask = *ds.mask;
    } else if (cfg.split.kind == "random") {
        mask = split_random(ds.labels, cfg.split.fraction, cfg.split.seed);
    } else {
        mask = split_disjoint(ds.labels, cfg.split.fraction);
    }

    HsiCube std_cube;
    PcaModel pca;
    if (cfg.fit_stats_train_only) {
        std::vector<uint8_t> keep(mask.codes.size(), 0);
        for (size_t i = 0; i < mask.codes.size(); ++i) keep[i] = mask.codes[i] == 1;
        std_cube = standardize_apply(cube, standardize_fit_selected(cube, keep));
        pca = pca_fit_cube_selected(std_cube, cfg.pca_channels, keep);
    } else {
        const LabelRaster* fit_pop = cfg.fit_stats_labeled_only ? &ds.labels : nullptr;
        std_cube = standardize_apply(cube, standardize_fit(cube, fit_pop));
        pca = pca_fit_cube(std_cube, cfg.pca_channels, fit_pop);
    }
    auto reduced = pca_transform(std_cube, pca, cfg.pca_channels);

    const int64_t d = cfg.model == "cnn2d" ? cfg.patch : 1;
    Prepared p;
    p.dataset_name = ds.name;
    p.train = extract_patches_masked(reduced, ds.labels, mask, 1, d);
    p.test = extract_patches_masked(reduced, ds.labels, mask, 2, d);
    p.classes = p.train.num_classes;
    if (p.train.size() == 0 || p.test.size() == 0)
        throw Error("prepare: empty train or test split");
    return p;
}

ArchSpec arch_for(const ExperimentConfig& cfg, int64_t classes) {
    ArchSpec spec;
    if (cfg.model == "cnn2d") {
        spec = ArchSpec::cnn2d(classes, cfg.pca_channels);
        spec.patch = cfg.patch;
    } else if (cfg.model == "cnn1d") {
        spec = ArchSpec::cnn1d(classes, cfg.pca_channels);
    } else {
        spec = ArchSpec::mlp(classes, cfg.pca_channels);
    }
    return spec;
}

TrainConfig train_config(const ExperimentConfig& cfg) {
    TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.opt.kind = opt_kind_from_string(cfg.optimizer);
    tc.opt.lr = cfg.lr;
    tc.early_stop_patience = 20;
    return tc;
}

ModelGraph baseline_model(const ExperimentConfig& cfg, const Prepared& p, RngState& rng) {
    if (!cfg.teacher.empty()) {
        auto m = load_checkpoint(resolve_dataset_path(cfg.teacher));
        if (m.spec.classes != p.classes)
            throw Error("checkpoint emits " + std::to_string(m.spec.classes) +
                        " classes but the dataset has " + std::to_string(p.classes));
        return m;
    }
    auto m = build_model(arch_for(cfg, p.classes), rng);
    auto hist = train(m, p.train, train_config(cfg), rng);
    fs::create_directories(cfg.out_dir);
    hist.write_csv((fs::path(cfg.out_dir) / "history.csv").string());
    return m;
}

double wall_seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_manifest(const ExperimentConfig& cfg, const std::vector<ReportRow>& rows,
                    const std::vector<std::string>& artifacts, const json& extra) {
    json m;
    m["tool"] = kToolVersion;
    m["config"] = json::parse(cfg.to_json_string());
#if defined(__linux__)
    m["platform"] = "linux";
#elif defined(__APPLE__)
    m["platform"] = "darwin";
#else
    m["platform"] = "other";
#endif
    json arts = json::array();
    for (const auto& a : artifacts) {
        std::ifstream f(a, std::ios::binary);
        if (!f) continue;
        std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                         std::istreambuf_iterator<char>());
        arts.push_back({{"path", a}, {"crc32", crc32(bytes.data(), bytes.size())}});
    }
    m["artifacts"] = arts;
    m["rows"] = json::array();
    for (const auto& r : rows) m["rows"].push_back(csv_line(r));
    if (!extra.is_null()) m["extra"] = extra;
    fs::create_directories(cfg.out_dir);
    std::ofstream f(fs::path(cfg.out_dir) / "manifest.json");
    f << m.dump(2) << "\n";
}

using ForwardFn = std::function<TensPtr<float>(const TensPtr<float>&)>;

ReportRow make_row(const ExperimentConfig& cfg, const Prepared& p, const std::string& method,
                   int ratio, const EvalResult& ev, int64_t params, double memory_mb,
                   const ForwardFn& latency_fwd, double wall_s) {
    ReportRow r;
    r.method = method;
    r.dataset = p.dataset_name;
    r.split = cfg.split.kind;
    r.ratio = ratio;
    r.top1 = ev.top1;
    r.top5 = ev.top5;
    r.params = params;
    r.memory_mb = memory_mb;
    r.latency_ms = -1;
    r.seed = cfg.seed;
    r.wall_s = wall_s;
    if (cfg.measure_latency_flag && latency_fwd) {
        const bool spectra = cfg.model != "cnn2d";
        auto lat = measure_latency(latency_fwd, p.test, cfg.latency_reps, spectra,
                                   cfg.model == "cnn1d");
        r.latency_ms = lat.median_ms;
    }
    r.validate();
    return r;
}

}  // namespace

std::vector<ReportRow> run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    auto p = prepare(cfg);
    RngState rng(cfg.seed);
    fs::create_directories(cfg.out_dir);
    std::vector<ReportRow> rows;
    std::vector<std::string> artifacts;
    json extra;

    auto eval_model = [&](ModelGraph& m) { return evaluate(m, p.test, 256, cfg.threads); };
    auto model_fwd = [](ModelGraph& m) -> ForwardFn {
        m.set_train(false);
        return [&m](const TensPtr<float>& x) { return m.forward_logits(x); };
    };

    auto manifest_extras = [&](const EvalResult& ev) {
        std::map<std::string, std::string> e;
        char digest[16];
        const std::string cj = cfg.to_json_string();
        std::snprintf(digest, sizeof digest, "%08x",
                      crc32(reinterpret_cast<const unsigned char*>(cj.data()), cj.size()));
        e["config_digest"] = digest;
        e["top1"] = fmt(ev.top1, 4);
        e["top5"] = fmt(ev.top5, 4);
        e["dataset"] = p.dataset_name;
        return e;
    };

    if (cfg.method == "baseline") {
        auto m = baseline_model(cfg, p, rng);
        auto ev = eval_model(m);
        const auto ckpt = (fs::path(cfg.out_dir) / "baseline.ckpt").string();
        save_checkpoint(m, ckpt, manifest_extras(ev));
        artifacts.push_back(ckpt);
        rows.push_back(make_row(cfg, p, "baseline", 0, ev, count_params(m).conv_fc_total,
                                estimate_memory_mb_uniform(m, 4), model_fwd(m),
                                wall_seconds_since(t0)));
    } else if (cfg.method == "scratch") {
        auto target = prune::PruneTarget::for_label(cfg.ratio);
        ArchSpec spec = arch_for(cfg, p.classes);
        spec.f1 = target.f1;
        spec.f2 = target.f2;
        spec.hidden = target.hidden;
        auto m = build_model(spec, rng);
        auto hist = train(m, p.train, train_config(cfg), rng);
        hist.write_csv((fs::path(cfg.out_dir) / "history.csv").string());
        auto ev = eval_model(m);
        const auto ckpt = (fs::path(cfg.out_dir) / "scratch.ckpt").string();
        save_checkpoint(m, ckpt, manifest_extras(ev));
        artifacts.push_back(ckpt);
        rows.push_back(make_row(cfg, p, "scratch", cfg.ratio, ev, count_params(m).conv_fc_total,
                                estimate_memory_mb_uniform(m, 4), model_fwd(m),
                                wall_seconds_since(t0)));
    } else if (cfg.method.rfind("prune.", 0) == 0) {
        auto method = prune::method_from_string(cfg.method.substr(6));
        auto strategy = prune::strategy_from_string(cfg.finetune_strategy);
        auto target = prune::PruneTarget::for_label(cfg.ratio);
        auto base = baseline_model(cfg, p, rng);
        prune::FinetuneConfig fcfg;
        fcfg.train = train_config(cfg);
        fcfg.train.early_stop_patience = cfg.finetune_epochs + 1;
        fcfg.epochs_one_shot = cfg.finetune_epochs;
        fcfg.epochs_per_layer = std::max<int64_t>(1, cfg.finetune_epochs * 2 / 5);
        fcfg.epochs_per_pass = std::max<int64_t>(1, cfg.finetune_epochs * 3 / 5);
        prune::PruneReport prep;
        auto pruned =
            prune::prune_and_finetune(base, method, strategy, target, p.train, fcfg, rng, &prep);
        auto ev = eval_model(pruned);
        const auto ckpt = (fs::path(cfg.out_dir) / (cfg.method + ".ckpt")).string();
        save_checkpoint(pruned, ckpt);
        artifacts.push_back(ckpt);
        extra["params_before"] = prep.params_before;
        extra["exact_fraction_removed"] = prep.exact_fraction_removed;
        extra["fc_criterion"] = prep.fc_criterion_note;
        rows.push_back(make_row(cfg, p, cfg.method, cfg.ratio, ev,
                                count_params(pruned).conv_fc_total,
                                estimate_memory_mb_uniform(pruned, 4), model_fwd(pruned),
                                wall_seconds_since(t0)));
    } else if (cfg.method.rfind("quant.", 0) == 0) {
        const auto id = cfg.method.substr(6);
        auto base = baseline_model(cfg, p, rng);
        quant::QuantizedModel qm;
        if (id == "dynamic") {
            qm = quant::dynamic_quantize(base);
        } else if (id == "static") {
            qm = quant::static_quantize(base, p.train);
        } else {
            quant::QatConfig qc;
            qc.epochs = cfg.qat_epochs;
            qc.batch_size = cfg.batch_size;
            qc.opt.kind = opt_kind_from_string(cfg.optimizer);
            qc.opt.lr = cfg.lr * 0.1;  // gentle fine-tune from the trained start
            qm = quant::qat_train(base, p.train, qc, rng);
        }
        auto ev = qm.evaluate(p.test);
        const auto qckpt = (fs::path(cfg.out_dir) / (cfg.method + ".qckpt")).string();
        qm.save(qckpt);
        artifacts.push_back(qckpt);
        ForwardFn fwd = [&qm](const TensPtr<float>& x) { return qm.forward_logits(x); };
        rows.push_back(make_row(cfg, p, cfg.method, 0, ev, qm.params(), qm.memory_mb(), fwd,
                                wall_seconds_since(t0)));
    } else if (cfg.method.rfind("kd.", 0) == 0) {
        const auto id = cfg.method.substr(3);
        auto target = prune::PruneTarget::for_label(cfg.ratio);
        ArchSpec sspec = arch_for(cfg, p.classes);
        sspec.f1 = target.f1;
        sspec.f2 = target.f2;
        sspec.hidden = target.hidden;

        kd::DistillConfig dc = cfg.distill;
        dc.method = id;
        kd::KdTrainConfig kc;
        kc.epochs = cfg.kd_epochs;
        kc.batch_size = cfg.batch_size;
        kc.opt.kind = opt_kind_from_string(cfg.optimizer);
        kc.opt.lr = cfg.lr;
        kc.stage1_epochs = cfg.stage1_epochs;

        ModelGraph student = build_model(sspec, rng);
        ModelGraph teacher;
        if (kd::is_offline(id) && id != "camkd")
            teacher = load_checkpoint(resolve_dataset_path(cfg.teacher));

        std::optional<EvalResult> ev;
        int64_t params = 0;
        double memory = 0;
        ForwardFn fwd;
        kd::SimkdModel simkd;
        std::vector<ModelGraph> peers;
        kd::MultiBranch mb;

        if (id == "soft") {
            kd::soft_train(student, teacher, p.train, dc, kc, rng);
        } else if (id == "fitnets") {
            kd::fitnets_train(student, teacher, p.train, dc, kc, rng);
        } else if (id == "at") {
            kd::at_train(student, teacher, p.train, dc, kc, rng);
        } else if (id == "cc") {
            kd::cc_train(student, teacher, p.train, dc, kc, rng);
        } else if (id == "simkd") {
            simkd = kd::simkd_train(student, teacher, p.train, dc, kc, rng);
            ev = evaluate_fn([&](const TensPtr<float>& x) { return simkd.forward_logits(x); },
                             p.classes, p.test);
            params = simkd.params();
            memory = params * 4.0 / 1e6;
            fwd = [&simkd](const TensPtr<float>& x) { return simkd.forward_logits(x); };
            const auto ckpt = (fs::path(cfg.out_dir) / "kd.simkd.ckpt").string();
            simkd.save(ckpt);
            artifacts.push_back(ckpt);
        } else if (id == "camkd") {
            std::vector<ModelGraph> teachers;
            for (const auto& t : cfg.teachers)
                teachers.push_back(load_checkpoint(resolve_dataset_path(t)));
            kd::camkd_train(student, teachers, p.train, dc, kc, rng);
        } else if (id == "dml") {
            for (int64_t i = 0; i < dc.peers; ++i) {
                RngState ri = rng.fork(100 + i);
                peers.push_back(build_model(sspec, ri));
            }
            kd::dml_train(peers, p.train, dc, kc, rng);
            student = peers[0];
            double best = 0;
            for (auto& peer : peers) best = std::max(best, evaluate(peer, p.test).top1);
            extra["best_peer_top1"] = best;
        } else if (id == "one" || id == "clilr" || id == "okddip") {
            if (id == "one")
                mb = kd::one_train(sspec, p.train, dc, kc, rng);
            else if (id == "clilr")
                mb = kd::clilr_train(sspec, p.train, dc, kc, rng);
            else
                mb = kd::okddip_train(sspec, p.train, dc, kc, rng);
            const int64_t deploy_head = id == "okddip" ? dc.peers - 1 : 0;
            RngState rd = rng.fork(7);
            student = mb.deploy(deploy_head, rd);
            double best = 0;
            for (int64_t h = 0; h < dc.peers; ++h) {
                RngState rh = rng.fork(50 + h);
                auto dm = mb.deploy(h, rh);
                best = std::max(best, evaluate(dm, p.test).top1);
            }
            extra["best_branch_top1"] = best;
        } else if (id == "tfkd") {
            kd::tfkd_train(student, p.train, dc, kc, rng);
        } else if (id == "cskd") {
            kd::cskd_train(student, p.train, dc, kc, rng);
        } else if (id == "pskd") {
            kd::pskd_train(student, p.train, dc, kc, rng);
        } else if (id == "ddgsd") {
            kd::ddgsd_train(student, p.train, dc, kc, rng);
        }

        if (!ev) {
            ev = eval_model(student);
            params = count_params(student).conv_fc_total;
            memory = estimate_memory_mb_uniform(student, 4);
            fwd = model_fwd(student);
            const auto ckpt = (fs::path(cfg.out_dir) / (cfg.method + ".ckpt")).string();
            save_checkpoint(student, ckpt);
            artifacts.push_back(ckpt);
        }
        // resolved distillation settings ride along with the checkpoint
        {
            std::ofstream side(fs::path(cfg.out_dir) / (cfg.method + ".json"));
            side << dc.to_json_string() << "\n";
        }
        rows.push_back(
            make_row(cfg, p, cfg.method, cfg.ratio, *ev, params, memory, fwd,
                     wall_seconds_since(t0)));
    }

    write_csv(rows, (fs::path(cfg.out_dir) / "rows.csv").string());
    write_markdown(rows, (fs::path(cfg.out_dir) / "rows.md").string(), "results");
    write_manifest(cfg, rows, artifacts, extra);
    return rows;
}

// ---------------------------------------------------------------------------
// closed-form tables
// ---------------------------------------------------------------------------

std::vector<ParamTableRow> param_table(int64_t classes) {
    auto conv = [](int64_t cin, int64_t cout, int64_t k) { return cin * cout * k * k + cout; };
    auto fc = [](int64_t din, int64_t dout) { return din * dout + dout; };
    struct W {
        const char* name;
        int64_t f1, f2, h;
    };
    const W rows[] = {{"cnn2d", 50, 100, 100},
                      {"prune90", 15, 30, 30},
                      {"prune95", 10, 20, 20},
                      {"prune98", 5, 10, 10}};
    std::vector<ParamTableRow> out;
    for (const auto& w : rows) {
        ParamTableRow r;
        r.name = w.name;
        r.conv1 = conv(40, w.f1, 5);
        r.conv2 = conv(w.f1, w.f2, 5);
        r.fc1 = fc(w.f2 * 25, w.h);
        r.fc2 = fc(w.h, classes);
        r.total = r.conv1 + r.conv2 + r.fc1 + r.fc2;
        r.memory_mb = static_cast<double>(r.total) * 4 / 1e6;
        out.push_back(r);
    }
    return out;
}

std::vector<ParamTableRow> width_table() {
    std::vector<ParamTableRow> out;
    struct W {
        const char* name;
        int64_t f1, f2, h;
    };
    const W rows[] = {{"cnn2d", 50, 100, 100},
                      {"prune90", 15, 30, 30},
                      {"prune95", 10, 20, 20},
                      {"prune98", 5, 10, 10}};
    for (const auto& w : rows) {
        ParamTableRow r;
        r.name = w.name;
        r.conv1 = w.f1;
        r.conv2 = w.f2;
        r.fc1 = w.f2 * 25;  // flatten width feeding fc1
        r.fc2 = w.h;        // hidden neurons feeding the logits layer
        r.total = 0;
        r.memory_mb = 0;
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// table reproduction matrices
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> dataset_headers(const std::string& data_dir) {
    std::vector<std::string> out;
    for (const char* name : {"ip.hsij", "up.hsij", "ip-synth.hsij", "up-synth.hsij"}) {
        fs::path p = fs::path(data_dir) / name;
        if (fs::exists(p)) out.push_back(p.string());
    }
    if (out.empty()) throw Error("reproduce-table: no dataset containers under " + data_dir);
    return out;
}

double default_fraction_for(const std::string& header) {
    // the up scene uses the sparse split; everything else the 55/45 one
    return header.find("up") != std::string::npos ? 0.07 : 0.55;
}

std::vector<ReportRow> run_matrix(std::vector<ExperimentConfig> cfgs, int parallel) {
    std::vector<std::vector<ReportRow>> results(cfgs.size());
    if (parallel <= 1) {
        for (size_t i = 0; i < cfgs.size(); ++i) results[i] = run_experiment(cfgs[i]);
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int t = 0; t < parallel; ++t)
            pool.emplace_back([&]() {
                for (size_t i = next++; i < cfgs.size(); i = next++)
                    results[i] = run_experiment(cfgs[i]);
            });
        for (auto& th : pool) th.join();
    }
    std::vector<ReportRow> rows;
    for (auto& r : results) rows.insert(rows.end(), r.begin(), r.end());
    return rows;
}

}  // namespace

int reproduce_table(int which, const std::string& data_dir, const std::string& out_dir,
                    uint64_t seed, int parallel) {
    fs::create_directories(out_dir);
    if (which == 3 || which == 4) {
        // pure accounting, no training
        auto rows = which == 3 ? param_table() : width_table();
        std::ofstream md(fs::path(out_dir) / ("table" + std::to_string(which) + ".md"));
        std::ofstream csv(fs::path(out_dir) / ("table" + std::to_string(which) + ".csv"));
        if (which == 3) {
            md << "| model | conv1 | conv2 | fc1 | fc2 | total | MB (f32) | MB (int8) |\n";
            md << "|---|---|---|---|---|---|---|---|\n";
            csv << "model,conv1,conv2,fc1,fc2,total,mb_f32,mb_int8\n";
            for (const auto& r : rows) {
                md << "| " << r.name << " | " << r.conv1 << " | " << r.conv2 << " | " << r.fc1
                   << " | " << r.fc2 << " | " << r.total << " | " << fmt(r.memory_mb, 2) << " | "
                   << fmt(r.total / 1e6, 2) << " |\n";
                csv << r.name << ',' << r.conv1 << ',' << r.conv2 << ',' << r.fc1 << ',' << r.fc2
                    << ',' << r.total << ',' << fmt(r.memory_mb, 6) << ','
                    << fmt(r.total / 1e6, 6) << "\n";
            }
        } else {
            md << "| model | conv1 filters | conv2 filters | fc1 inputs | fc1 neurons |\n";
            md << "|---|---|---|---|---|\n";
            csv << "model,conv1_filters,conv2_filters,fc1_inputs,fc1_neurons\n";
            for (const auto& r : rows) {
                md << "| " << r.name << " | " << r.conv1 << " | " << r.conv2 << " | " << r.fc1
                   << " | " << r.fc2 << " |\n";
                csv << r.name << ',' << r.conv1 << ',' << r.conv2 << ',' << r.fc1 << ',' << r.fc2
                    << "\n";
            }
        }
        return 0;
    }

    auto headers = dataset_headers(data_dir);
    std::vector<ExperimentConfig> cfgs;
    auto base_cfg = [&](const std::string& header, const std::string& split_kind) {
        ExperimentConfig c;
        c.dataset = header;
        c.split.kind = split_kind;
        c.split.fraction = default_fraction_for(header);
        c.split.seed = seed;
        c.seed = seed;
        c.out_dir = (fs::path(out_dir) / ("t" + std::to_string(which)) /
                     (fs::path(header).stem().string() + "-" + split_kind))
                        .string();
        return c;
    };

    if (which == 2) {
        for (const auto& h : headers)
            for (const char* split : {"disjoint", "random"})
                for (const char* model : {"mlp", "cnn1d", "cnn2d"}) {
                    auto c = base_cfg(h, split);
                    c.model = model;
                    c.method = "baseline";
                    c.out_dir += std::string("-") + model;
                    cfgs.push_back(c);
                }
    } else if (which >= 5 && which <= 7) {
        const int ratio = which == 5 ? 90 : which == 6 ? 95 : 98;
        for (const auto& h : headers)
            for (const char* split : {"disjoint", "random"}) {
                auto scratch = base_cfg(h, split);
                scratch.method = "scratch";
                scratch.ratio = ratio;
                scratch.out_dir += "-scratch";
                cfgs.push_back(scratch);
                for (const char* m : {"l1", "thinet", "slimming", "sfp"}) {
                    auto c = base_cfg(h, split);
                    c.method = std::string("prune.") + m;
                    c.ratio = ratio;
                    c.out_dir += std::string("-") + m;
                    cfgs.push_back(c);
                }
            }
    } else if (which == 8) {
        for (const auto& h : headers)
            for (const char* split : {"disjoint", "random"})
                for (int ratio : {90, 95, 98})
                    for (const char* s : {"I", "II", "III"}) {
                        auto c = base_cfg(h, split);
                        c.method = "prune.l1";
                        c.ratio = ratio;
                        c.finetune_strategy = s;
                        c.out_dir += "-r" + std::to_string(ratio) + "-" + s;
                        cfgs.push_back(c);
                    }
    } else if (which == 9) {
        for (const auto& h : headers)
            for (const char* split : {"disjoint", "random"})
                for (const char* m : {"dynamic", "static", "qat"}) {
                    auto c = base_cfg(h, split);
                    c.method = std::string("quant.") + m;
                    c.out_dir += std::string("-") + m;
                    cfgs.push_back(c);
                }
    } else if (which >= 10 && which <= 12) {
        const int ratio = which == 10 ? 90 : which == 11 ? 95 : 98;
        for (const auto& h : headers)
            for (const char* split : {"disjoint", "random"}) {
                // offline methods need a teacher checkpoint: train one first
                auto tcfg = base_cfg(h, split);
                tcfg.method = "baseline";
                tcfg.out_dir += "-teacher";
                auto trows = run_experiment(tcfg);
                const std::string teacher = (fs::path(tcfg.out_dir) / "baseline.ckpt").string();
                for (const auto& id : kd::method_ids()) {
                    auto c = base_cfg(h, split);
                    c.method = "kd." + id;
                    c.ratio = ratio;
                    c.teacher = teacher;
                    if (id == "camkd") c.teachers = {teacher, teacher, teacher};
                    c.out_dir += "-" + id;
                    cfgs.push_back(c);
                }
            }
    } else {
        throw Error("reproduce-table: unknown table " + std::to_string(which));
    }

    auto rows = run_matrix(std::move(cfgs), parallel);
    write_csv(rows, (fs::path(out_dir) / ("table" + std::to_string(which) + ".csv")).string());
    write_markdown(rows, (fs::path(out_dir) / ("table" + std::to_string(which) + ".md")).string(),
                   "table " + std::to_string(which));
    return 0;
}

}  // namespace hsib::bench
