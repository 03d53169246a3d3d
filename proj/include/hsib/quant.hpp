#pragma once

// Affine int8 quantization: scale/zero-point math, min-max observers, and the
// dynamic / static / quantization-aware-training conversion paths with integer
// inference kernels.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hsib/data.hpp"
#include "hsib/model.hpp"

namespace hsib::quant {

struct QParams {
    double scale = 1.0;
    int64_t zero_point = 0;
    int bits = 8;
    int32_t qmin = -128, qmax = 127;
    bool is_signed = true;

    // S = (beta - alpha) / (2^b - 1); Z places alpha exactly on qmin.
    // A degenerate alpha == beta range is widened by 1e-8 on both sides.
    static QParams compute(double alpha, double beta, int bits, bool is_signed);

    double lo() const { return scale * (qmin + zero_point); }
    double hi() const { return scale * (qmax + zero_point); }
};

// rounding is half-away-from-zero throughout
int32_t quantize_value(double x, const QParams& qp);
double dequantize_value(int32_t xq, const QParams& qp);

std::vector<int32_t> quantize(std::span<const float> x, const QParams& qp);
std::vector<float> dequantize(std::span<const int32_t> xq, const QParams& qp);

// running range tracker; plain min/max or exponential moving average
struct Observer {
    bool ema = false;
    double decay = 0.99;
    double lo = 0, hi = 0;
    bool seen = false;

    void observe(std::span<const float> x);
    QParams qparams(int bits, bool is_signed) const;
};

// ---------------------------------------------------------------------------

enum class Mode { Dynamic, Static, Qat };
std::string mode_name(Mode m);

struct QLinear {
    std::string name;
    std::vector<int8_t> wq;  // row-major [rows, cols]
    int64_t rows = 0, cols = 0;
    QParams w_qp;
    std::vector<float> bias;
};

struct QConv {
    std::string name;
    std::vector<int8_t> wq;  // [cout, cin*k*k]
    int64_t cout = 0, cin = 0, k = 0;
    QParams w_qp;
    std::vector<float> bias;
};

// Integer-inference model. Static/QAT carry the whole folded stack in int8
// with precomputed activation ranges; dynamic keeps convolutions in f32 and
// quantizes only the fully connected layers, deriving activation ranges per
// batch at run time.
struct QuantizedModel {
    Mode mode = Mode::Static;
    ArchSpec spec;  // original architecture (widths, classes, patch)

    // static / qat
    QConv conv1, conv2;
    QLinear fc1, fc2;
    QParams input_qp, act1_qp, act2_qp, act3_qp;

    // dynamic: f32 stack up to the flatten, int8 fc payloads
    ModelGraph f32_front;

    TensPtr<float> forward_logits(const TensPtr<float>& x) const;
    EvalResult evaluate(const PatchSet& data, int64_t batch_size = 256) const;

    int64_t params() const;
    // per-layer bytes/weight map under this mode (conv f32 in dynamic mode)
    std::map<std::string, int> dtype_map() const;
    double memory_mb() const;

    void save(const std::string& path) const;
    static QuantizedModel load(const std::string& path);
};

// weights per-tensor signed int8 from min/max at convert time
QuantizedModel dynamic_quantize(const ModelGraph& trained);

// calibration pass attaches min/max observers to the input and each post-relu
// activation; activations after relu use unsigned ranges
QuantizedModel static_quantize(const ModelGraph& trained, const PatchSet& calib,
                               int64_t max_batches = 8, int64_t batch_size = 128);

struct QatConfig {
    int64_t epochs = 3;
    int64_t batch_size = 128;
    OptimConfig opt;
    double ema_decay = 0.99;
};

// Fine-tunes the batchnorm-folded network through fake quantization of all
// conv/fc weights and activations, then converts with the observed ranges.
// epochs == 0 degenerates to a calibration-only pass.
QuantizedModel qat_train(const ModelGraph& trained, const PatchSet& data, const QatConfig& cfg,
                         RngState& rng);

// i64-accumulator reference for the integer kernels (tests)
void gemm_i64_ref(int64_t M, int64_t N, int64_t K, const int32_t* a, const int32_t* b,
                  int64_t* c);

}  // namespace hsib::quant
