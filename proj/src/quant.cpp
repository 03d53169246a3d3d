#include "hsib/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "hsib/gemm.hpp"
#include "hsib/ops.hpp"
#include "hsib/optim.hpp"
#include "json.hpp"

using nlohmann::json;

namespace hsib::quant {

QParams QParams::compute(double alpha, double beta, int bits, bool is_signed) {
    if (!(bits >= 2 && bits <= 16)) throw Error("qparams: bits must be in [2,16]");
    if (!std::isfinite(alpha) || !std::isfinite(beta)) throw Error("qparams: non-finite range");
    if (alpha > beta) throw Error("qparams: alpha > beta");
    if (alpha == beta) {
        alpha -= 1e-8;
        beta += 1e-8;
    }
    QParams qp;
    qp.bits = bits;
    qp.is_signed = is_signed;
    if (is_signed) {
        qp.qmin = -(1 << (bits - 1));
        qp.qmax = (1 << (bits - 1)) - 1;
    } else {
        qp.qmin = 0;
        qp.qmax = (1 << bits) - 1;
    }
    const double levels = std::pow(2.0, bits) - 1.0;
    qp.scale = (beta - alpha) / levels;
    qp.zero_point = static_cast<int64_t>(std::llround(std::round(alpha / qp.scale))) - qp.qmin;
    return qp;
}

int32_t quantize_value(double x, const QParams& qp) {
    double q = std::round(x / qp.scale) - qp.zero_point;
    q = std::min<double>(std::max<double>(q, qp.qmin), qp.qmax);
    return static_cast<int32_t>(q);
}

double dequantize_value(int32_t xq, const QParams& qp) {
    return qp.scale * (static_cast<double>(xq) + qp.zero_point);
}

std::vector<int32_t> quantize(std::span<const float> x, const QParams& qp) {
    std::vector<int32_t> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = quantize_value(x[i], qp);
    return out;
}

std::vector<float> dequantize(std::span<const int32_t> xq, const QParams& qp) {
    std::vector<float> out(xq.size());
    for (size_t i = 0; i < xq.size(); ++i)
        out[i] = static_cast<float>(dequantize_value(xq[i], qp));
    return out;
}

void Observer::observe(std::span<const float> x) {
    if (x.empty()) return;
    double blo = x[0], bhi = x[0];
    for (float v : x) {
        blo = std::min<double>(blo, v);
        bhi = std::max<double>(bhi, v);
    }
    if (!seen) {
        lo = blo;
        hi = bhi;
        seen = true;
    } else if (ema) {
        lo = decay * lo + (1.0 - decay) * blo;
        hi = decay * hi + (1.0 - decay) * bhi;
    } else {
        lo = std::min(lo, blo);
        hi = std::max(hi, bhi);
    }
}

QParams Observer::qparams(int bits, bool is_signed) const {
    if (!seen) throw Error("observer: no data observed");
    double a = lo, b = hi;
    if (!is_signed) a = std::max(0.0, a);
    return QParams::compute(a, b, bits, is_signed);
}

std::string mode_name(Mode m) {
    switch (m) {
        case Mode::Dynamic: return "dynamic";
        case Mode::Static: return "static";
        case Mode::Qat: return "qat";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// integer kernels
// ---------------------------------------------------------------------------

void gemm_i64_ref(int64_t M, int64_t N, int64_t K, const int32_t* a, const int32_t* b,
                  int64_t* c) {
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) {
            int64_t s = 0;
            for (int64_t k = 0; k < K; ++k)
                s += static_cast<int64_t>(a[i * K + k]) * b[k * N + j];
            c[i * N + j] = s;
        }
}

namespace {

// widened quantized value with the zero point folded in: scale * v == real value
std::vector<int32_t> quantize_shifted(std::span<const float> x, const QParams& qp) {
    std::vector<int32_t> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = static_cast<int32_t>(quantize_value(x[i], qp) + qp.zero_point);
    return out;
}

std::vector<int32_t> widen_shifted(const std::vector<int8_t>& wq, const QParams& qp) {
    std::vector<int32_t> out(wq.size());
    for (size_t i = 0; i < wq.size(); ++i) out[i] = static_cast<int32_t>(static_cast<int64_t>(wq[i]) + qp.zero_point);
    return out;
}

QParams weight_range(const std::vector<float>& w) {
    double lo = w[0], hi = w[0];
    for (float v : w) {
        lo = std::min<double>(lo, v);
        hi = std::max<double>(hi, v);
    }
    return QParams::compute(lo, hi, 8, true);
}

QLinear quantize_linear(const std::string& name, const TensPtr<float>& w, const TensPtr<float>& b) {
    QLinear q;
    q.name = name;
    q.rows = w->shape[0];
    q.cols = w->shape[1];
    q.w_qp = weight_range(w->data);
    q.wq.resize(w->data.size());
    for (size_t i = 0; i < w->data.size(); ++i)
        q.wq[i] = static_cast<int8_t>(quantize_value(w->data[i], q.w_qp));
    q.bias = b->data;
    return q;
}

QConv quantize_conv(const std::string& name, const TensPtr<float>& w, const TensPtr<float>& b) {
    QConv q;
    q.name = name;
    q.cout = w->shape[0];
    q.cin = w->shape[1];
    q.k = w->shape[2];
    q.w_qp = weight_range(w->data);
    q.wq.resize(w->data.size());
    for (size_t i = 0; i < w->data.size(); ++i)
        q.wq[i] = static_cast<int8_t>(quantize_value(w->data[i], q.w_qp));
    q.bias = b->data;
    return q;
}

void im2col_i32(const int32_t* x, int64_t C, int64_t H, int64_t W, int64_t k, int32_t* cols) {
    const int64_t OH = H - k + 1, OW = W - k + 1;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ki = 0; ki < k; ++ki)
            for (int64_t kj = 0; kj < k; ++kj) {
                int32_t* dst = cols + ((c * k + ki) * k + kj) * OH * OW;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    const int32_t* src = x + c * H * W + (oy + ki) * W + kj;
                    std::memcpy(dst + oy * OW, src, sizeof(int32_t) * static_cast<size_t>(OW));
                }
            }
}

// integer conv on shifted operands; i32 accumulators, f32 bias add
std::vector<float> qconv_forward(const QConv& q, const std::vector<int32_t>& x_shifted, int64_t N,
                                 int64_t H, int64_t W, double in_scale) {
    const int64_t OH = H - q.k + 1, OW = W - q.k + 1, OHW = OH * OW;
    const int64_t CK = q.cin * q.k * q.k;
    auto w32 = widen_shifted(q.wq, q.w_qp);
    std::vector<float> out(static_cast<size_t>(N * q.cout * OHW));
    std::vector<int32_t> cols(static_cast<size_t>(CK * OHW));
    std::vector<int32_t> acc(static_cast<size_t>(q.cout * OHW));
    const double s = in_scale * q.w_qp.scale;
    for (int64_t n = 0; n < N; ++n) {
        im2col_i32(x_shifted.data() + n * q.cin * H * W, q.cin, H, W, q.k, cols.data());
        std::fill(acc.begin(), acc.end(), 0);
        gemm_acc<int32_t>(q.cout, OHW, CK, w32.data(), cols.data(), acc.data());
        float* y = out.data() + n * q.cout * OHW;
        for (int64_t co = 0; co < q.cout; ++co)
            for (int64_t j = 0; j < OHW; ++j)
                y[co * OHW + j] = static_cast<float>(s * acc[co * OHW + j] + q.bias[co]);
    }
    return out;
}

std::vector<float> qlinear_forward(const QLinear& q, const std::vector<int32_t>& x_shifted,
                                   int64_t N, double in_scale) {
    auto w32 = widen_shifted(q.wq, q.w_qp);
    std::vector<int32_t> wt(static_cast<size_t>(q.rows * q.cols));
    transpose(q.rows, q.cols, w32.data(), wt.data());
    std::vector<int32_t> acc(static_cast<size_t>(N * q.rows), 0);
    gemm_acc<int32_t>(N, q.rows, q.cols, x_shifted.data(), wt.data(), acc.data());
    std::vector<float> out(static_cast<size_t>(N * q.rows));
    const double s = in_scale * q.w_qp.scale;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t r = 0; r < q.rows; ++r)
            out[n * q.rows + r] = static_cast<float>(s * acc[n * q.rows + r] + q.bias[r]);
    return out;
}

void relu_inplace(std::vector<float>& v) {
    for (auto& x : v)
        if (x < 0) x = 0;
}

std::vector<float> maxpool_f32(const std::vector<float>& x, int64_t NC, int64_t H, int64_t W,
                               int64_t window) {
    const int64_t OH = H / window, OW = W / window;
    std::vector<float> out(static_cast<size_t>(NC * OH * OW));
    for (int64_t nc = 0; nc < NC; ++nc)
        for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
                float best = x[nc * H * W + (oy * window) * W + ox * window];
                for (int64_t dy = 0; dy < window; ++dy)
                    for (int64_t dx = 0; dx < window; ++dx)
                        best = std::max(best,
                                        x[nc * H * W + (oy * window + dy) * W + ox * window + dx]);
                out[nc * OH * OW + oy * OW + ox] = best;
            }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// forward paths
// ---------------------------------------------------------------------------

TensPtr<float> QuantizedModel::forward_logits(const TensPtr<float>& x) const {
    if (x->shape.size() != 4) throw Error("quantized forward: need [n,c,h,w] input");
    const int64_t N = x->shape[0];

    if (mode == Mode::Dynamic) {
        // f32 convolution stack, then per-batch quantized fully connected layers
        ModelGraph front = f32_front;  // shallow parameter shares are fine, layers copy is cheap
        front.set_train(false);
        NoGradGuard ng;
        TensPtr<float> h = x;
        for (auto& l : front.layers) {
            if (l.name == "fc1") break;
            switch (l.kind) {
                case Layer::Kind::Conv2d: h = conv2d(h, l.w, l.b); break;
                case Layer::Kind::BatchNorm2d:
                    h = batchnorm2d(h, l.gamma, l.beta, &l.run_mean, &l.run_var, front.bn_eps,
                                    front.bn_momentum, BnMode::Eval);
                    break;
                case Layer::Kind::ReLU: h = relu(h); break;
                case Layer::Kind::MaxPool2d: h = maxpool2d(h, l.window); break;
                case Layer::Kind::Flatten: h = flatten(h); break;
                default: throw Error("dynamic forward: unexpected layer");
            }
        }
        // fc1: activation range measured on this batch
        double lo = h->data[0], hi = h->data[0];
        for (float v : h->data) {
            lo = std::min<double>(lo, v);
            hi = std::max<double>(hi, v);
        }
        auto a_qp = QParams::compute(lo, hi, 8, true);
        auto hq = quantize_shifted({h->data.data(), h->data.size()}, a_qp);
        auto h1 = qlinear_forward(fc1, hq, N, a_qp.scale);
        relu_inplace(h1);
        double lo2 = h1[0], hi2 = h1[0];
        for (float v : h1) {
            lo2 = std::min<double>(lo2, v);
            hi2 = std::max<double>(hi2, v);
        }
        auto a2_qp = QParams::compute(lo2, hi2, 8, true);
        auto h1q = quantize_shifted({h1.data(), h1.size()}, a2_qp);
        auto lg = qlinear_forward(fc2, h1q, N, a2_qp.scale);
        return tensor<float>({N, fc2.rows}, std::move(lg));
    }

    // static / qat: fully integer stack over the folded network
    const int64_t H = x->shape[2], W = x->shape[3];
    auto xq = quantize_shifted({x->data.data(), x->data.size()}, input_qp);
    auto h1 = qconv_forward(conv1, xq, N, H, W, input_qp.scale);
    relu_inplace(h1);
    const int64_t H1 = H - conv1.k + 1, W1 = W - conv1.k + 1;
    auto h1q = quantize_shifted({h1.data(), h1.size()}, act1_qp);
    auto h2 = qconv_forward(conv2, h1q, N, H1, W1, act1_qp.scale);
    relu_inplace(h2);
    const int64_t H2 = H1 - conv2.k + 1, W2 = W1 - conv2.k + 1;
    auto p = maxpool_f32(h2, N * conv2.cout, H2, W2, 2);
    auto pq = quantize_shifted({p.data(), p.size()}, act2_qp);
    auto h3 = qlinear_forward(fc1, pq, N, act2_qp.scale);
    relu_inplace(h3);
    auto h3q = quantize_shifted({h3.data(), h3.size()}, act3_qp);
    auto lg = qlinear_forward(fc2, h3q, N, act3_qp.scale);
    return tensor<float>({N, fc2.rows}, std::move(lg));
}

EvalResult QuantizedModel::evaluate(const PatchSet& data, int64_t batch_size) const {
    return evaluate_fn([this](const TensPtr<float>& x) { return forward_logits(x); },
                       spec.classes, data, batch_size);
}

int64_t QuantizedModel::params() const {
    if (mode == Mode::Dynamic) {
        int64_t n = 0;
        for (const auto& l : f32_front.layers)
            if (l.w && l.name != "fc1" && l.name != "fc2") n += l.w->numel() + l.b->numel();
        n += static_cast<int64_t>(fc1.wq.size() + fc1.bias.size());
        n += static_cast<int64_t>(fc2.wq.size() + fc2.bias.size());
        return n;
    }
    return static_cast<int64_t>(conv1.wq.size() + conv1.bias.size() + conv2.wq.size() +
                                conv2.bias.size() + fc1.wq.size() + fc1.bias.size() +
                                fc2.wq.size() + fc2.bias.size());
}

std::map<std::string, int> QuantizedModel::dtype_map() const {
    std::map<std::string, int> m;
    m["conv1"] = mode == Mode::Dynamic ? 4 : 1;
    m["conv2"] = mode == Mode::Dynamic ? 4 : 1;
    m["fc1"] = 1;
    m["fc2"] = 1;
    return m;
}

double QuantizedModel::memory_mb() const {
    const auto dm = dtype_map();
    double bytes = 0;
    auto add = [&](const std::string& name, int64_t count) { bytes += count * dm.at(name); };
    if (mode == Mode::Dynamic) {
        for (const auto& l : f32_front.layers)
            if (l.w && (l.name == "conv1" || l.name == "conv2"))
                add(l.name, l.w->numel() + l.b->numel());
    } else {
        add("conv1", static_cast<int64_t>(conv1.wq.size() + conv1.bias.size()));
        add("conv2", static_cast<int64_t>(conv2.wq.size() + conv2.bias.size()));
    }
    add("fc1", static_cast<int64_t>(fc1.wq.size() + fc1.bias.size()));
    add("fc2", static_cast<int64_t>(fc2.wq.size() + fc2.bias.size()));
    return bytes / 1e6;
}

// ---------------------------------------------------------------------------
// conversion paths
// ---------------------------------------------------------------------------

QuantizedModel dynamic_quantize(const ModelGraph& trained) {
    if (trained.spec.kind != ArchSpec::Kind::Cnn2d)
        throw Error("dynamic_quantize: cnn2d models only");
    QuantizedModel q;
    q.mode = Mode::Dynamic;
    q.spec = trained.spec;
    q.f32_front = clone_model(trained, true);
    q.f32_front.set_train(false);
    q.fc1 = quantize_linear("fc1", trained.layer("fc1").w, trained.layer("fc1").b);
    q.fc2 = quantize_linear("fc2", trained.layer("fc2").w, trained.layer("fc2").b);
    return q;
}

QuantizedModel static_quantize(const ModelGraph& trained, const PatchSet& calib,
                               int64_t max_batches, int64_t batch_size) {
    if (trained.spec.kind != ArchSpec::Kind::Cnn2d)
        throw Error("static_quantize: cnn2d models only");
    if (calib.size() < 1) throw Error("static_quantize: no calibration data");

    ModelGraph folded = fold_batchnorm(trained);
    QuantizedModel q;
    q.mode = Mode::Static;
    q.spec = trained.spec;
    q.conv1 = quantize_conv("conv1", folded.layer("conv1").w, folded.layer("conv1").b);
    q.conv2 = quantize_conv("conv2", folded.layer("conv2").w, folded.layer("conv2").b);
    q.fc1 = quantize_linear("fc1", folded.layer("fc1").w, folded.layer("fc1").b);
    q.fc2 = quantize_linear("fc2", folded.layer("fc2").w, folded.layer("fc2").b);

    Observer in_obs, a1_obs, a2_obs, a3_obs;
    NoGradGuard ng;
    folded.set_train(false);
    for (int64_t b = 0; b < max_batches; ++b) {
        const int64_t s = b * batch_size;
        if (s >= calib.size()) break;
        const int64_t e = std::min(calib.size(), s + batch_size);
        std::vector<int64_t> idx(e - s);
        std::iota(idx.begin(), idx.end(), s);
        auto x = calib.gather(idx);
        auto out = folded.forward(x, true);
        in_obs.observe({x->data.data(), x->data.size()});
        auto& r1 = out.taps.at("relu1");
        a1_obs.observe({r1->data.data(), r1->data.size()});
        auto& pool = out.taps.at("pool");
        a2_obs.observe({pool->data.data(), pool->data.size()});
        auto& r3 = out.taps.at("relu3");
        a3_obs.observe({r3->data.data(), r3->data.size()});
    }
    q.input_qp = in_obs.qparams(8, true);
    q.act1_qp = a1_obs.qparams(8, false);  // post-relu: unsigned
    q.act2_qp = a2_obs.qparams(8, false);
    q.act3_qp = a3_obs.qparams(8, false);
    return q;
}

QuantizedModel qat_train(const ModelGraph& trained, const PatchSet& data, const QatConfig& cfg,
                         RngState& rng) {
    if (trained.spec.kind != ArchSpec::Kind::Cnn2d) throw Error("qat_train: cnn2d models only");
    ModelGraph folded = fold_batchnorm(trained);
    for (auto& l : folded.layers) {
        if (l.w) l.w->requires_grad = true;
        if (l.b) l.b->requires_grad = true;
    }
    auto& c1 = folded.layer("conv1");
    auto& c2 = folded.layer("conv2");
    auto& f1 = folded.layer("fc1");
    auto& f2 = folded.layer("fc2");

    Observer in_obs, a1_obs, a2_obs, a3_obs;
    for (Observer* o : {&in_obs, &a1_obs, &a2_obs, &a3_obs}) {
        o->ema = true;
        o->decay = cfg.ema_decay;
    }

    auto fq_weight = [](const TensPtr<float>& w) {
        const auto qp = weight_range(w->data);
        return fake_quant(w, qp.scale, qp.zero_point, qp.qmin, qp.qmax);
    };
    auto fq_act = [](const TensPtr<float>& a, Observer& obs, bool is_signed) {
        obs.observe({a->data.data(), a->data.size()});
        const auto qp = obs.qparams(8, is_signed);
        return fake_quant(a, qp.scale, qp.zero_point, qp.qmin, qp.qmax);
    };
    auto fq_forward = [&](const TensPtr<float>& x) {
        auto h = fq_act(x, in_obs, true);
        h = relu(conv2d(h, fq_weight(c1.w), c1.b));
        h = fq_act(h, a1_obs, false);
        h = relu(conv2d(h, fq_weight(c2.w), c2.b));
        h = maxpool2d(h, 2);
        h = fq_act(h, a2_obs, false);
        h = flatten(h);
        h = relu(linear(h, fq_weight(f1.w), f1.b));
        h = fq_act(h, a3_obs, false);
        return linear(h, fq_weight(f2.w), f2.b);
    };

    std::vector<TensPtr<float>> params = {c1.w, c1.b, c2.w, c2.b, f1.w, f1.b, f2.w, f2.b};
    OptimizerT<float> opt(params, cfg.opt);
    std::vector<int64_t> idx(static_cast<size_t>(data.size()));
    std::iota(idx.begin(), idx.end(), 0);

    {
        // observer warmup: one forward-only pass so the activation ranges
        // start from sensible values before any fine-tuning step
        NoGradGuard ng;
        for (int64_t s = 0; s < data.size(); s += cfg.batch_size) {
            const int64_t e = std::min(data.size(), s + cfg.batch_size);
            std::vector<int64_t> bidx(idx.begin() + s, idx.begin() + e);
            (void)fq_forward(data.gather(bidx));
        }
    }
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(idx);
        for (int64_t s = 0; s < data.size(); s += cfg.batch_size) {
            const int64_t e = std::min(data.size(), s + cfg.batch_size);
            std::vector<int64_t> bidx(idx.begin() + s, idx.begin() + e);
            auto x = data.gather(bidx);
            auto y = data.gather_labels(bidx);
            auto loss = cross_entropy(fq_forward(x), y);
            backward(loss);
            opt.step();
            opt.zero_grad();
        }
    }

    QuantizedModel q;
    q.mode = Mode::Qat;
    q.spec = trained.spec;
    q.conv1 = quantize_conv("conv1", c1.w, c1.b);
    q.conv2 = quantize_conv("conv2", c2.w, c2.b);
    q.fc1 = quantize_linear("fc1", f1.w, f1.b);
    q.fc2 = quantize_linear("fc2", f2.w, f2.b);
    q.input_qp = in_obs.qparams(8, true);
    q.act1_qp = a1_obs.qparams(8, false);
    q.act2_qp = a2_obs.qparams(8, false);
    q.act3_qp = a3_obs.qparams(8, false);
    return q;
}

// ---------------------------------------------------------------------------
// quantized checkpoint container
// ---------------------------------------------------------------------------

namespace {

constexpr char kQckptMagic[8] = {'H', 'S', 'I', 'B', 'Q', 'K', 'P', 'T'};

json qp_to_json(const QParams& qp) {
    json j;
    j["scale"] = qp.scale;
    j["zero_point"] = qp.zero_point;
    j["bits"] = qp.bits;
    j["signed"] = qp.is_signed;
    return j;
}

QParams qp_from_json(const json& j) {
    QParams qp;
    qp.bits = j.at("bits").get<int>();
    qp.is_signed = j.at("signed").get<bool>();
    if (qp.is_signed) {
        qp.qmin = -(1 << (qp.bits - 1));
        qp.qmax = (1 << (qp.bits - 1)) - 1;
    } else {
        qp.qmin = 0;
        qp.qmax = (1 << qp.bits) - 1;
    }
    qp.scale = j.at("scale").get<double>();
    qp.zero_point = j.at("zero_point").get<int64_t>();
    return qp;
}

}  // namespace

void QuantizedModel::save(const std::string& path) const {
    json manifest;
    manifest["version"] = 1;
    manifest["mode"] = mode_name(mode);
    manifest["classes"] = spec.classes;
    manifest["in_channels"] = spec.in_channels;
    manifest["f1"] = spec.f1;
    manifest["f2"] = spec.f2;
    manifest["kernel"] = spec.kernel;
    manifest["hidden"] = spec.hidden;
    manifest["patch"] = spec.patch;
    if (mode != Mode::Dynamic) {
        manifest["input_qp"] = qp_to_json(input_qp);
        manifest["act1_qp"] = qp_to_json(act1_qp);
        manifest["act2_qp"] = qp_to_json(act2_qp);
        manifest["act3_qp"] = qp_to_json(act3_qp);
    }

    std::vector<unsigned char> payload;
    json tensors = json::array();
    auto push_i8 = [&](const std::string& name, const std::vector<int8_t>& v, const QParams& qp,
                       std::vector<int64_t> shape) {
        json e;
        e["name"] = name;
        e["dtype"] = "i8";
        e["scale"] = qp.scale;
        e["zero_point"] = qp.zero_point;
        e["shape"] = shape;
        e["offset"] = payload.size();
        tensors.push_back(e);
        payload.insert(payload.end(), v.begin(), v.end());
    };
    auto push_f32 = [&](const std::string& name, const std::vector<float>& v) {
        json e;
        e["name"] = name;
        e["dtype"] = "f32";
        e["shape"] = json::array({static_cast<int64_t>(v.size())});
        e["offset"] = payload.size();
        tensors.push_back(e);
        const auto* p = reinterpret_cast<const unsigned char*>(v.data());
        payload.insert(payload.end(), p, p + v.size() * 4);
    };
    if (mode == Mode::Dynamic) {
        for (const auto& l : f32_front.layers) {
            if (l.w && l.name != "fc1" && l.name != "fc2") {
                push_f32(l.name + ".w", l.w->data);
                push_f32(l.name + ".b", l.b->data);
            }
            if (l.gamma) {
                push_f32(l.name + ".gamma", l.gamma->data);
                push_f32(l.name + ".beta", l.beta->data);
                push_f32(l.name + ".run_mean", l.run_mean);
                push_f32(l.name + ".run_var", l.run_var);
            }
        }
    } else {
        push_i8("conv1.w", conv1.wq, conv1.w_qp, {conv1.cout, conv1.cin, conv1.k, conv1.k});
        push_f32("conv1.b", conv1.bias);
        push_i8("conv2.w", conv2.wq, conv2.w_qp, {conv2.cout, conv2.cin, conv2.k, conv2.k});
        push_f32("conv2.b", conv2.bias);
    }
    push_i8("fc1.w", fc1.wq, fc1.w_qp, {fc1.rows, fc1.cols});
    push_f32("fc1.b", fc1.bias);
    push_i8("fc2.w", fc2.wq, fc2.w_qp, {fc2.rows, fc2.cols});
    push_f32("fc2.b", fc2.bias);
    manifest["tensors"] = tensors;

    std::string mstr = manifest.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write quantized checkpoint: " + path);
    f.write(kQckptMagic, 8);
    uint32_t mlen = static_cast<uint32_t>(mstr.size());
    f.write(reinterpret_cast<const char*>(&mlen), 4);
    f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
    uint32_t crc = crc32(reinterpret_cast<const unsigned char*>(mstr.data()), mstr.size());
    crc = crc32(payload.data(), payload.size(), crc);
    f.write(reinterpret_cast<const char*>(&crc), 4);
    if (!f) throw Error("quantized checkpoint write failed: " + path);
}

QuantizedModel QuantizedModel::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open quantized checkpoint: " + path);
    f.seekg(0, std::ios::end);
    const int64_t len = f.tellg();
    f.seekg(0);
    std::vector<char> buf(static_cast<size_t>(len));
    f.read(buf.data(), len);
    if (!f || len < 16) throw Error("quantized checkpoint truncated: " + path);
    if (std::memcmp(buf.data(), kQckptMagic, 8) != 0)
        throw Error("quantized checkpoint has bad magic: " + path);
    uint32_t mlen;
    std::memcpy(&mlen, buf.data() + 8, 4);
    if (12 + static_cast<int64_t>(mlen) + 4 > len)
        throw Error("quantized checkpoint manifest exceeds file: " + path);
    std::string mstr(buf.data() + 12, mlen);
    const unsigned char* payload = reinterpret_cast<const unsigned char*>(buf.data()) + 12 + mlen;
    const size_t payload_len = static_cast<size_t>(len) - 12 - mlen - 4;
    uint32_t want;
    std::memcpy(&want, buf.data() + len - 4, 4);
    uint32_t crc = crc32(reinterpret_cast<const unsigned char*>(mstr.data()), mstr.size());
    crc = crc32(payload, payload_len, crc);
    if (crc != want) throw Error("quantized checkpoint CRC mismatch: " + path);

    json manifest = json::parse(mstr);
    QuantizedModel q;
    std::string mode_str = manifest.at("mode").get<std::string>();
    q.mode = mode_str == "dynamic" ? Mode::Dynamic : mode_str == "static" ? Mode::Static
                                                                          : Mode::Qat;
    q.spec = ArchSpec::cnn2d(manifest.at("classes").get<int64_t>(),
                             manifest.at("in_channels").get<int64_t>());
    q.spec.f1 = manifest.at("f1").get<int64_t>();
    q.spec.f2 = manifest.at("f2").get<int64_t>();
    q.spec.kernel = manifest.at("kernel").get<int64_t>();
    q.spec.hidden = manifest.at("hidden").get<int64_t>();
    q.spec.patch = manifest.at("patch").get<int64_t>();

    std::map<std::string, json> entries;
    for (const auto& e : manifest.at("tensors")) entries[e.at("name").get<std::string>()] = e;
    auto fetch_i8 = [&](const std::string& name, std::vector<int8_t>& dst, QParams& qp) {
        const auto& e = entries.at(name);
        int64_t n = 1;
        for (auto d : e.at("shape").get<std::vector<int64_t>>()) n *= d;
        const int64_t off = e.at("offset").get<int64_t>();
        if (off + n > static_cast<int64_t>(payload_len))
            throw Error("quantized checkpoint payload truncated at " + name);
        dst.resize(static_cast<size_t>(n));
        std::memcpy(dst.data(), payload + off, static_cast<size_t>(n));
        qp.bits = 8;
        qp.is_signed = true;
        qp.qmin = -128;
        qp.qmax = 127;
        qp.scale = e.at("scale").get<double>();
        qp.zero_point = e.at("zero_point").get<int64_t>();
    };
    auto fetch_f32 = [&](const std::string& name, std::vector<float>& dst) {
        const auto& e = entries.at(name);
        int64_t n = 1;
        for (auto d : e.at("shape").get<std::vector<int64_t>>()) n *= d;
        const int64_t off = e.at("offset").get<int64_t>();
        if (off + n * 4 > static_cast<int64_t>(payload_len))
            throw Error("quantized checkpoint payload truncated at " + name);
        dst.resize(static_cast<size_t>(n));
        std::memcpy(dst.data(), payload + off, static_cast<size_t>(n * 4));
    };

    if (q.mode == Mode::Dynamic) {
        RngState dummy(0);
        q.f32_front = build_model(q.spec, dummy);
        q.f32_front.set_train(false);
        for (auto& l : q.f32_front.layers) {
            if (l.w && l.name != "fc1" && l.name != "fc2") {
                fetch_f32(l.name + ".w", l.w->data);
                fetch_f32(l.name + ".b", l.b->data);
            }
            if (l.gamma) {
                fetch_f32(l.name + ".gamma", l.gamma->data);
                fetch_f32(l.name + ".beta", l.beta->data);
                fetch_f32(l.name + ".run_mean", l.run_mean);
                fetch_f32(l.name + ".run_var", l.run_var);
            }
        }
    } else {
        q.input_qp = qp_from_json(manifest.at("input_qp"));
        q.act1_qp = qp_from_json(manifest.at("act1_qp"));
        q.act2_qp = qp_from_json(manifest.at("act2_qp"));
        q.act3_qp = qp_from_json(manifest.at("act3_qp"));
        fetch_i8("conv1.w", q.conv1.wq, q.conv1.w_qp);
        fetch_f32("conv1.b", q.conv1.bias);
        q.conv1.cout = q.spec.f1;
        q.conv1.cin = q.spec.in_channels;
        q.conv1.k = q.spec.kernel;
        fetch_i8("conv2.w", q.conv2.wq, q.conv2.w_qp);
        fetch_f32("conv2.b", q.conv2.bias);
        q.conv2.cout = q.spec.f2;
        q.conv2.cin = q.spec.f1;
        q.conv2.k = q.spec.kernel;
    }
    fetch_i8("fc1.w", q.fc1.wq, q.fc1.w_qp);
    fetch_f32("fc1.b", q.fc1.bias);
    q.fc1.rows = q.spec.hidden;
    q.fc1.cols = q.spec.flatten_size();
    fetch_i8("fc2.w", q.fc2.wq, q.fc2.w_qp);
    fetch_f32("fc2.b", q.fc2.bias);
    q.fc2.rows = q.spec.classes;
    q.fc2.cols = q.spec.hidden;
    return q;
}

}  // namespace hsib::quant
