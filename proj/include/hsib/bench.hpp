#pragma once

// Config-driven experiment runner: splits, training, compression methods,
// metrics (top-1/top-5/params/memory/latency) and CSV/markdown reports.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hsib/data.hpp"
#include "hsib/distill.hpp"
#include "hsib/model.hpp"
#include "hsib/prune.hpp"
#include "hsib/quant.hpp"

namespace hsib::bench {

inline constexpr const char* kToolVersion = "hsib 0.1.0";

struct ReportRow {
    std::string method;
    std::string dataset;
    std::string split;  // random | disjoint | mask
    int ratio = 0;      // 0 when not applicable
    double top1 = 0, top5 = 0;
    int64_t params = 0;
    double memory_mb = 0;
    double latency_ms = 0;  // <0 when not measured
    uint64_t seed = 0;
    double wall_s = 0;

    void validate() const;
};

std::string csv_header();
std::string csv_line(const ReportRow& r);
void write_csv(const std::vector<ReportRow>& rows, const std::string& path);
std::vector<ReportRow> parse_csv(const std::string& path);
void write_markdown(const std::vector<ReportRow>& rows, const std::string& path,
                    const std::string& title);

struct LatencyResult {
    double median_ms = 0;
    double iqr_lo_ms = 0, iqr_hi_ms = 0;
};

// Batch-1 forward latency: 10 warmup passes discarded, median over reps,
// single-threaded. Wants reps >= 30 and at least 100 probe samples.
LatencyResult measure_latency(const std::function<TensPtr<float>(const TensPtr<float>&)>& fwd,
                              const PatchSet& probe, int64_t reps, bool spectra_input = false,
                              bool reshape_1d = false);

struct SplitSpec {
    std::string kind = "random";  // random | disjoint | mask
    double fraction = 0.55;
    uint64_t seed = 1;
};

struct ExperimentConfig {
    int schema_version = 1;
    std::string dataset;  // path to a .hsij header (HSIB_DATA_DIR fallback applies)
    SplitSpec split;
    std::string model = "cnn2d";  // mlp | cnn1d | cnn2d
    int64_t pca_channels = 40;
    int64_t patch = 19;
    bool fit_stats_labeled_only = true;
    bool fit_stats_train_only = false;  // statistics from the train split only

    std::string method = "baseline";
    int ratio = 90;                      // prune / kd rows
    std::string finetune_strategy = "I";

    int64_t epochs = 40;
    int64_t batch_size = 128;
    double lr = 1e-3;
    std::string optimizer = "adam";
    int64_t finetune_epochs = 50;
    int64_t kd_epochs = 30;
    int64_t qat_epochs = 3;
    int64_t stage1_epochs = 8;

    std::string teacher;                // checkpoint path for offline kd / quant source
    std::vector<std::string> teachers;  // camkd
    std::string out_dir = "runs/out";
    uint64_t seed = 1;
    int threads = 1;
    bool measure_latency_flag = true;
    int64_t latency_reps = 30;

    kd::DistillConfig distill;

    static ExperimentConfig from_json_file(const std::string& path);
    static ExperimentConfig from_json_text(const std::string& text);
    std::string to_json_string() const;
    void validate() const;
};

std::vector<ReportRow> run_experiment(const ExperimentConfig& cfg);

// the closed-form parameter/memory table (no training): returns markdown and
// asserts nothing — callers compare against the published counts
struct ParamTableRow {
    std::string name;
    int64_t conv1, conv2, fc1, fc2, total;
    double memory_mb;
};
std::vector<ParamTableRow> param_table(int64_t classes = 16);
std::vector<ParamTableRow> width_table();  // remaining filters / neurons

// desk-scale reproduction of one published table shape (2,3,4,5..12)
int reproduce_table(int which, const std::string& data_dir, const std::string& out_dir,
                    uint64_t seed, int parallel = 1);

std::string resolve_dataset_path(const std::string& path);

}  // namespace hsib::bench
