#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hsib/ops.hpp"
#include "hsib/optim.hpp"
#include "hsib/rng.hpp"
#include "hsib/tensor.hpp"

namespace hsib {

struct PatchSet;  // data.hpp

// Architecture description. cnn2d is the main subject: two 5x5 conv blocks
// with batchnorm, a 2x2 max pool, then two fully connected layers.
struct ArchSpec {
    enum class Kind { Mlp, Cnn1d, Cnn2d };
    Kind kind = Kind::Cnn2d;
    int64_t in_channels = 40;
    int64_t f1 = 50;
    int64_t f2 = 100;
    int64_t kernel = 5;
    int64_t hidden = 100;
    int64_t classes = 16;
    int64_t patch = 19;

    static ArchSpec cnn2d(int64_t classes, int64_t in_channels = 40) {
        ArchSpec s;
        s.kind = Kind::Cnn2d;
        s.classes = classes;
        s.in_channels = in_channels;
        return s;
    }
    static ArchSpec cnn1d(int64_t classes, int64_t in_channels = 40) {
        ArchSpec s;
        s.kind = Kind::Cnn1d;
        s.in_channels = in_channels;
        s.f1 = 20;
        s.f2 = 40;
        s.hidden = 100;
        s.classes = classes;
        s.patch = 1;
        return s;
    }
    static ArchSpec mlp(int64_t classes, int64_t in_channels = 40) {
        ArchSpec s;
        s.kind = Kind::Mlp;
        s.in_channels = in_channels;
        s.hidden = 256;
        s.classes = classes;
        s.patch = 1;
        return s;
    }

    void validate() const;
    std::string kind_name() const;
    // spatial size after the conv stack (cnn2d): patch -> -k+1 -> -k+1 -> /2
    int64_t pooled_side() const { return (patch - 2 * (kernel - 1)) / 2; }
    int64_t flatten_size() const { return f2 * pooled_side() * pooled_side(); }

    bool operator==(const ArchSpec& o) const = default;
};

template <class T>
struct LayerT {
    enum class Kind { Conv2d, Conv1d, BatchNorm2d, ReLU, MaxPool2d, MaxPool1d, Flatten, Linear };
    Kind kind;
    std::string name;
    TensPtr<T> w, b;          // conv / linear
    TensPtr<T> gamma, beta;   // batchnorm affine
    std::vector<T> run_mean, run_var;
    int64_t window = 2;       // pooling
};

template <class T>
struct ForwardOutT {
    TensPtr<T> logits;
    std::map<std::string, TensPtr<T>> taps;
};

// Ordered layer list; composition is checked at build time.
template <class T>
struct ModelGraphT {
    ArchSpec spec;
    std::vector<LayerT<T>> layers;
    bool training = true;
    bool update_running_stats = true;
    T bn_eps = T(1e-5);
    T bn_momentum = T(0.1);

    void set_train(bool t) { training = t; }

    std::vector<TensPtr<T>> params() const {
        std::vector<TensPtr<T>> out;
        for (const auto& l : layers) {
            if (l.w) out.push_back(l.w);
            if (l.b) out.push_back(l.b);
            if (l.gamma) out.push_back(l.gamma);
            if (l.beta) out.push_back(l.beta);
        }
        return out;
    }

    LayerT<T>& layer(const std::string& name) {
        for (auto& l : layers)
            if (l.name == name) return l;
        throw Error("model has no layer named '" + name + "'");
    }
    const LayerT<T>& layer(const std::string& name) const {
        for (const auto& l : layers)
            if (l.name == name) return l;
        throw Error("model has no layer named '" + name + "'");
    }

    ForwardOutT<T> forward(const TensPtr<T>& x, bool want_taps = false) {
        ForwardOutT<T> out;
        TensPtr<T> h = x;
        for (auto& l : layers) {
            switch (l.kind) {
                case LayerT<T>::Kind::Conv2d: h = conv2d(h, l.w, l.b); break;
                case LayerT<T>::Kind::Conv1d: h = conv1d(h, l.w, l.b); break;
                case LayerT<T>::Kind::BatchNorm2d: {
                    BnMode mode = !training ? BnMode::Eval
                                  : update_running_stats ? BnMode::Train
                                                         : BnMode::TrainNoStats;
                    h = batchnorm2d(h, l.gamma, l.beta, &l.run_mean, &l.run_var, bn_eps,
                                    bn_momentum, mode);
                    break;
                }
                case LayerT<T>::Kind::ReLU: h = relu(h); break;
                case LayerT<T>::Kind::MaxPool2d: h = maxpool2d(h, l.window); break;
                case LayerT<T>::Kind::MaxPool1d: h = maxpool1d(h, l.window); break;
                case LayerT<T>::Kind::Flatten: h = flatten(h); break;
                case LayerT<T>::Kind::Linear: h = linear(h, l.w, l.b); break;
            }
            if (want_taps) out.taps[l.name] = h;
        }
        out.logits = h;
        return out;
    }

    TensPtr<T> forward_logits(const TensPtr<T>& x) { return forward(x, false).logits; }
};

using ModelGraph = ModelGraphT<float>;
using Layer = LayerT<float>;

// ---------------------------------------------------------------------------

struct ParamCount {
    std::vector<std::pair<std::string, int64_t>> per_layer;  // conv / fc layers
    int64_t conv_fc_total = 0;
    int64_t bn_affine_total = 0;  // reported separately from the headline count
};

struct EvalResult {
    double top1 = 0, top5 = 0;
    int64_t n = 0;
    std::vector<int64_t> confusion;  // classes x classes, rows = truth
    int64_t classes = 0;
};

struct TrainConfig {
    int64_t epochs = 200;
    int64_t batch_size = 128;
    OptimConfig opt;
    int64_t early_stop_patience = 20;  // epochs without train-loss improvement
    double bn_l1_lambda = 0.0;         // L1 pull on batchnorm scales
    bool shuffle = true;
    bool verbose = false;
    const PatchSet* eval_data = nullptr;  // per-epoch top-1 when provided
    int64_t eval_every = 1;
    std::function<void(ModelGraphT<float>&, int64_t)> epoch_end;  // after each epoch
};

struct EpochStat {
    int64_t epoch;
    double loss;
    double top1 = -1;  // optional eval accuracy, < 0 when not measured
};

struct TrainHistory {
    std::vector<EpochStat> epochs;
    void write_csv(const std::string& path) const;
};

// model construction / accounting (float product build)
template <class T>
ModelGraphT<T> build_model_t(const ArchSpec& spec, RngState& rng);
ModelGraph build_model(const ArchSpec& spec, RngState& rng);
ParamCount count_params(const ModelGraph& m);

template <class T>
ModelGraphT<T> clone_model(const ModelGraphT<T>& m, bool copy_values = true);

// MB = sum over conv/fc layers of params * bytes / 1e6 (decimal megabytes).
// dtype_map maps layer name -> bytes per weight; every conv/fc layer must
// be covered.
double estimate_memory_mb(const ModelGraph& m, const std::map<std::string, int>& dtype_map);
double estimate_memory_mb_uniform(const ModelGraph& m, int bytes_per_weight);

TrainHistory train(ModelGraph& m, const PatchSet& data, const TrainConfig& cfg, RngState& rng);
EvalResult evaluate(ModelGraph& m, const PatchSet& data, int64_t batch_size = 256,
                    int threads = 1);

// evaluation over an arbitrary logits function (quantized engines, composite
// models); `spectra_input` selects [n,C] gathering instead of [n,C,d,d]
EvalResult evaluate_fn(const std::function<TensPtr<float>(const TensPtr<float>&)>& fwd,
                       int64_t classes, const PatchSet& data, int64_t batch_size = 256,
                       bool spectra_input = false, bool reshape_1d = false);

// top-k membership with ties broken toward the lower class index
bool label_in_topk(const float* logits, int64_t classes, int64_t label, int64_t k);

// checkpoint container: JSON manifest + little-endian payload + CRC32 trailer
void save_checkpoint(const ModelGraph& m, const std::string& path,
                     const std::map<std::string, std::string>& extra_manifest = {});
ModelGraph load_checkpoint(const std::string& path);

// batchnorm folded into the preceding convolutions (eval semantics)
ModelGraph fold_batchnorm(const ModelGraph& m);

uint32_t crc32(const unsigned char* data, size_t len, uint32_t seed = 0);

}  // namespace hsib
