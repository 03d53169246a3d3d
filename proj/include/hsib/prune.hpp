#pragma once

// Filter-level structured pruning of the cnn2d stack: importance rankings,
// architecture surgery, and the three fine-tuning schedules.

#include <string>
#include <vector>

#include "hsib/data.hpp"
#include "hsib/model.hpp"

namespace hsib::prune {

enum class Method { L1, ThiNet, Slimming, Sfp };

Method method_from_string(const std::string& s);
std::string method_name(Method m);

struct PruneTarget {
    int label = 0;  // 90 / 95 / 98, or 0 for custom
    int64_t f1 = 0, f2 = 0, hidden = 0;

    // the standard width rows: 90 -> (15,30,30), 95 -> (10,20,20), 98 -> (5,10,10)
    static PruneTarget for_label(int label);
    static PruneTarget keep_all(const ArchSpec& spec);
    void validate(const ArchSpec& spec) const;
};

// Keep-order per prunable layer, most important first; ties resolved toward
// the lower index.
struct FilterRanking {
    std::vector<int64_t> conv1, conv2, hidden;
};

struct PruneReport {
    std::string method;
    int ratio_label = 0;
    int64_t params_before = 0, params_after = 0;
    double exact_fraction_removed = 0;
    double top1_before = 0, top1_after_surgery = 0, top1_after_finetune = 0;
    std::string fc_criterion_note;  // which criterion pruned the fc neurons
};

// importance orderings --------------------------------------------------------

// sum of absolute kernel weights per conv filter; sum of absolute incoming
// row weights per fc neuron
FilterRanking rank_l1(const ModelGraph& m);

// ranking by |batchnorm scale| for conv layers; fc falls back to the L1 rule
FilterRanking rank_slimming(const ModelGraph& m);

// adds lambda * sum |gamma| to the training objective
TrainHistory train_slimming(ModelGraph& m, const PatchSet& data, double lambda, TrainConfig cfg,
                            RngState& rng);

// Greedy reconstruction ranking: repeatedly drop the channel whose removal
// least perturbs the next layer's pre-activations on calibration data.
FilterRanking rank_thinet(const ModelGraph& m, const PatchSet& calib, RngState& rng,
                          int64_t max_patches = 256, int64_t positions_per_patch = 16);

// Greedy drop order over explicit contribution vectors (exposed for the
// exhaustive-search equivalence tests). Returns indices in drop order.
std::vector<int64_t> greedy_drop_order(const std::vector<std::vector<double>>& contribs);
// optimal dropped set of a given size by exhaustive enumeration
std::vector<int64_t> brute_force_drop(const std::vector<std::vector<double>>& contribs,
                                      int64_t n_drop);

// Trains with the lowest-L2 filters re-zeroed after every epoch; they stay
// trainable and may regrow. Returns the final L2 ranking.
FilterRanking sfp_train(ModelGraph& m, const PatchSet& data, const PruneTarget& target,
                        TrainConfig cfg, RngState& rng);

// architecture surgery --------------------------------------------------------

// Drops conv1 filters (with conv2 input kernels and bn1 entries), conv2
// filters (with bn2 entries and the matching fc1 input columns through the
// flatten), and fc1 neurons (with fc2 input columns). The logits layer keeps
// its width. Keep-all targets reproduce the original logits exactly.
ModelGraph apply_prune(const ModelGraph& m, const FilterRanking& ranking,
                       const PruneTarget& target);

// fine-tuning schedules -------------------------------------------------------

enum class Strategy { I, II, III };
Strategy strategy_from_string(const std::string& s);

struct FinetuneConfig {
    TrainConfig train;           // optimizer/batch settings reused per stage
    int64_t epochs_one_shot = 50;
    int64_t epochs_per_layer = 20;  // strategy II
    int64_t epochs_per_pass = 30;   // strategy III
    int64_t passes = 3;             // strategy III
    double slimming_lambda = 1e-4;
    int64_t slimming_epochs = 20;
    int64_t sfp_epochs = 20;
};

// Runs the selected ranking method and fine-tuning schedule; the returned
// model has exactly the target widths regardless of strategy. When eval_data
// is given the report carries accuracy before surgery, directly after the
// first surgery, and after fine-tuning.
ModelGraph prune_and_finetune(const ModelGraph& trained, Method method, Strategy strategy,
                              const PruneTarget& target, const PatchSet& train_data,
                              const FinetuneConfig& cfg, RngState& rng,
                              PruneReport* report = nullptr,
                              const PatchSet* eval_data = nullptr);

// width schedule for multi-pass runs: geometric interpolation, final = target
std::vector<PruneTarget> multipass_schedule(const ArchSpec& spec, const PruneTarget& target,
                                            int64_t passes);

}  // namespace hsib::prune
