#include "hsib/model.hpp"

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <future>
#include <thread>

#include "hsib/data.hpp"
#include "json.hpp"

using nlohmann::json;

namespace hsib {

void ArchSpec::validate() const {
    if (classes < 2) throw Error("arch: need at least 2 classes");
    if (in_channels < 1 || hidden < 1) throw Error("arch: widths must be >= 1");
    if (kind == Kind::Cnn2d || kind == Kind::Cnn1d) {
        if (f1 < 1 || f2 < 1) throw Error("arch: conv widths must be >= 1");
    }
    if (kind == Kind::Cnn2d) {
        if (kernel < 1) throw Error("arch: kernel must be >= 1");
        if (patch < 1 || patch % 2 == 0) throw Error("arch: patch size must be odd");
        if (pooled_side() < 1) throw Error("arch: patch too small for the conv stack");
    }
}

std::string ArchSpec::kind_name() const {
    switch (kind) {
        case Kind::Mlp: return "mlp";
        case Kind::Cnn1d: return "cnn1d";
        case Kind::Cnn2d: return "cnn2d";
    }
    return "?";
}

namespace {

template <class T>
TensPtr<T> he_init(std::vector<int64_t> shape, int64_t fan_in, RngState& rng) {
    auto t = tensor<T>(std::move(shape), T(0), true);
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t->data) v = static_cast<T>(rng.normal() * sd);
    return t;
}

constexpr int64_t kCnn1dKernelA = 11;
constexpr int64_t kCnn1dKernelB = 5;

}  // namespace

template <class T>
ModelGraphT<T> build_model_t(const ArchSpec& spec, RngState& rng) {
    spec.validate();
    ModelGraphT<T> m;
    m.spec = spec;
    using L = LayerT<T>;
    auto conv2 = [&](const std::string& name, int64_t cin, int64_t cout, int64_t k) {
        L l;
        l.kind = L::Kind::Conv2d;
        l.name = name;
        l.w = he_init<T>({cout, cin, k, k}, cin * k * k, rng);
        l.b = tensor<T>({cout}, T(0), true);
        m.layers.push_back(std::move(l));
    };
    auto bn = [&](const std::string& name, int64_t c) {
        L l;
        l.kind = L::Kind::BatchNorm2d;
        l.name = name;
        l.gamma = tensor<T>({c}, T(1), true);
        l.beta = tensor<T>({c}, T(0), true);
        l.run_mean.assign(static_cast<size_t>(c), T(0));
        l.run_var.assign(static_cast<size_t>(c), T(1));
        m.layers.push_back(std::move(l));
    };
    auto act = [&](const std::string& name) {
        L l;
        l.kind = L::Kind::ReLU;
        l.name = name;
        m.layers.push_back(std::move(l));
    };
    auto fc = [&](const std::string& name, int64_t din, int64_t dout) {
        L l;
        l.kind = L::Kind::Linear;
        l.name = name;
        l.w = he_init<T>({dout, din}, din, rng);
        l.b = tensor<T>({dout}, T(0), true);
        m.layers.push_back(std::move(l));
    };
    auto misc = [&](typename L::Kind kind, const std::string& name, int64_t window = 2) {
        L l;
        l.kind = kind;
        l.name = name;
        l.window = window;
        m.layers.push_back(std::move(l));
    };

    switch (spec.kind) {
        case ArchSpec::Kind::Cnn2d: {
            conv2("conv1", spec.in_channels, spec.f1, spec.kernel);
            bn("bn1", spec.f1);
            act("relu1");
            conv2("conv2", spec.f1, spec.f2, spec.kernel);
            bn("bn2", spec.f2);
            act("relu2");
            misc(L::Kind::MaxPool2d, "pool", 2);
            misc(L::Kind::Flatten, "flatten");
            fc("fc1", spec.flatten_size(), spec.hidden);
            act("relu3");
            fc("fc2", spec.hidden, spec.classes);
            break;
        }
        case ArchSpec::Kind::Cnn1d: {
            int64_t len = spec.in_channels;
            L c1;
            c1.kind = L::Kind::Conv1d;
            c1.name = "conv1";
            c1.w = he_init<T>({spec.f1, 1, kCnn1dKernelA}, kCnn1dKernelA, rng);
            c1.b = tensor<T>({spec.f1}, T(0), true);
            m.layers.push_back(std::move(c1));
            act("relu1");
            misc(L::Kind::MaxPool1d, "pool1", 2);
            len = (len - kCnn1dKernelA + 1) / 2;
            L c2;
            c2.kind = L::Kind::Conv1d;
            c2.name = "conv2";
            c2.w = he_init<T>({spec.f2, spec.f1, kCnn1dKernelB}, spec.f1 * kCnn1dKernelB, rng);
            c2.b = tensor<T>({spec.f2}, T(0), true);
            m.layers.push_back(std::move(c2));
            act("relu2");
            misc(L::Kind::MaxPool1d, "pool2", 2);
            len = (len - kCnn1dKernelB + 1) / 2;
            if (len < 1) throw Error("arch: cnn1d input too short");
            misc(L::Kind::Flatten, "flatten");
            fc("fc1", spec.f2 * len, spec.hidden);
            act("relu3");
            fc("fc2", spec.hidden, spec.classes);
            break;
        }
        case ArchSpec::Kind::Mlp: {
            fc("fc1", spec.in_channels, spec.hidden);
            act("relu1");
            fc("fc2", spec.hidden, spec.classes);
            break;
        }
    }
    return m;
}

template ModelGraphT<float> build_model_t<float>(const ArchSpec&, RngState&);
template ModelGraphT<double> build_model_t<double>(const ArchSpec&, RngState&);

ModelGraph build_model(const ArchSpec& spec, RngState& rng) {
    return build_model_t<float>(spec, rng);
}

template <class T>
ModelGraphT<T> clone_model(const ModelGraphT<T>& m, bool copy_values) {
    ModelGraphT<T> out;
    out.spec = m.spec;
    out.training = m.training;
    out.update_running_stats = m.update_running_stats;
    out.bn_eps = m.bn_eps;
    out.bn_momentum = m.bn_momentum;
    for (const auto& l : m.layers) {
        LayerT<T> nl;
        nl.kind = l.kind;
        nl.name = l.name;
        nl.window = l.window;
        nl.run_mean = l.run_mean;
        nl.run_var = l.run_var;
        auto cp = [&](const TensPtr<T>& t) -> TensPtr<T> {
            if (!t) return nullptr;
            auto n = tensor<T>(t->shape, T(0), t->requires_grad);
            if (copy_values) n->data = t->data;
            return n;
        };
        nl.w = cp(l.w);
        nl.b = cp(l.b);
        nl.gamma = cp(l.gamma);
        nl.beta = cp(l.beta);
        out.layers.push_back(std::move(nl));
    }
    return out;
}

template ModelGraphT<float> clone_model<float>(const ModelGraphT<float>&, bool);
template ModelGraphT<double> clone_model<double>(const ModelGraphT<double>&, bool);

ParamCount count_params(const ModelGraph& m) {
    ParamCount pc;
    for (const auto& l : m.layers) {
        if (l.w) {
            int64_t n = l.w->numel() + (l.b ? l.b->numel() : 0);
            pc.per_layer.emplace_back(l.name, n);
            pc.conv_fc_total += n;
        }
        if (l.gamma) pc.bn_affine_total += l.gamma->numel() + l.beta->numel();
    }
    return pc;
}

double estimate_memory_mb(const ModelGraph& m, const std::map<std::string, int>& dtype_map) {
    double bytes = 0;
    for (const auto& l : m.layers) {
        if (!l.w) continue;
        auto it = dtype_map.find(l.name);
        if (it == dtype_map.end())
            throw Error("estimate_memory: no dtype entry for layer '" + l.name + "'");
        bytes += static_cast<double>(l.w->numel() + (l.b ? l.b->numel() : 0)) * it->second;
    }
    return bytes / 1e6;
}

double estimate_memory_mb_uniform(const ModelGraph& m, int bytes_per_weight) {
    std::map<std::string, int> dm;
    for (const auto& l : m.layers)
        if (l.w) dm[l.name] = bytes_per_weight;
    return estimate_memory_mb(m, dm);
}

// ---------------------------------------------------------------------------
// training / evaluation
// ---------------------------------------------------------------------------

namespace {

TensPtr<float> batch_input(const ModelGraph& m, const PatchSet& data,
                           const std::vector<int64_t>& idx) {
    if (m.spec.kind == ArchSpec::Kind::Cnn2d) return data.gather(idx);
    auto sp = data.gather_spectra(idx);
    if (m.spec.kind == ArchSpec::Kind::Cnn1d)
        return reshape(sp, {sp->shape[0], int64_t(1), sp->shape[1]});
    return sp;
}

}  // namespace

void TrainHistory::write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path);
    f << "epoch,loss,top1\n";
    for (const auto& e : epochs) {
        f << e.epoch << "," << e.loss << ",";
        if (e.top1 >= 0) f << e.top1;
        f << "\n";
    }
}

TrainHistory train(ModelGraph& m, const PatchSet& data, const TrainConfig& cfg, RngState& rng) {
    if (data.size() == 0) throw Error("train: empty patch set");
    if (data.channels != m.spec.in_channels)
        throw Error("train: patch channels " + std::to_string(data.channels) +
                    " do not match model input " + std::to_string(m.spec.in_channels));
    if (data.num_classes > m.spec.classes)
        throw Error("train: data has more classes than the model emits");

    Optimizer opt(m.params(), cfg.opt);
    TrainHistory hist;
    m.set_train(true);

    std::vector<int64_t> idx(static_cast<size_t>(data.size()));
    for (int64_t i = 0; i < data.size(); ++i) idx[i] = i;

    double best_loss = std::numeric_limits<double>::infinity();
    int64_t since_best = 0;

    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (cfg.shuffle) rng.shuffle(idx);
        double epoch_loss = 0;
        int64_t batches = 0;
        try {
            for (int64_t s = 0; s < data.size(); s += cfg.batch_size) {
                const int64_t e = std::min<int64_t>(data.size(), s + cfg.batch_size);
                if (e - s < 2 && m.spec.kind == ArchSpec::Kind::Cnn2d) break;  // bn needs >= 2
                std::vector<int64_t> bidx(idx.begin() + s, idx.begin() + e);
                auto x = batch_input(m, data, bidx);
                auto y = data.gather_labels(bidx);
                auto out = m.forward(x);
                auto loss = cross_entropy(out.logits, y);
                epoch_loss += loss->item();
                ++batches;
                backward(loss);
                if (cfg.bn_l1_lambda > 0) {
                    // L1 pull on batchnorm scales; subgradient at 0 is 0
                    for (auto& l : m.layers)
                        if (l.gamma && l.gamma->has_grad()) {
                            const float lam = static_cast<float>(cfg.bn_l1_lambda);
                            for (size_t j = 0; j < l.gamma->data.size(); ++j) {
                                const float g = l.gamma->data[j];
                                if (g > 0)
                                    l.gamma->grad[j] += lam;
                                else if (g < 0)
                                    l.gamma->grad[j] -= lam;
                            }
                        }
                }
                opt.step();
                opt.zero_grad();
            }
        } catch (const Error& err) {
            throw Error("training diverged at epoch " + std::to_string(epoch) + ": " + err.what());
        }
        epoch_loss /= std::max<int64_t>(1, batches);
        if (cfg.epoch_end) cfg.epoch_end(m, epoch);
        double top1 = -1;
        if (cfg.eval_data && epoch % std::max<int64_t>(1, cfg.eval_every) == 0) {
            top1 = evaluate(m, *cfg.eval_data).top1;
            m.set_train(true);
        }
        hist.epochs.push_back({epoch, epoch_loss, top1});
        if (cfg.verbose)
            std::fprintf(stderr, "epoch %lld loss %.5f\n", static_cast<long long>(epoch),
                         epoch_loss);
        if (epoch_loss < best_loss - 1e-6) {
            best_loss = epoch_loss;
            since_best = 0;
        } else if (++since_best >= cfg.early_stop_patience) {
            break;
        }
    }
    return hist;
}

EvalResult evaluate_fn(const std::function<TensPtr<float>(const TensPtr<float>&)>& fwd,
                       int64_t classes, const PatchSet& data, int64_t batch_size,
                       bool spectra_input, bool reshape_1d) {
    if (data.size() == 0) throw Error("evaluate: empty patch set");
    EvalResult res;
    res.classes = classes;
    res.confusion.assign(static_cast<size_t>(classes * classes), 0);
    res.n = data.size();
    int64_t top1 = 0, top5 = 0;
    NoGradGuard ng;
    for (int64_t s = 0; s < data.size(); s += batch_size) {
        const int64_t e = std::min(data.size(), s + batch_size);
        std::vector<int64_t> bidx(e - s);
        for (int64_t i = s; i < e; ++i) bidx[i - s] = i;
        TensPtr<float> x;
        if (spectra_input) {
            x = data.gather_spectra(bidx);
            if (reshape_1d) x = reshape(x, {x->shape[0], int64_t(1), x->shape[1]});
        } else {
            x = data.gather(bidx);
        }
        auto logits = fwd(x);
        auto y = data.gather_labels(bidx);
        for (int64_t i = 0; i < e - s; ++i) {
            const float* row = logits->data.data() + i * classes;
            int64_t pred = 0;
            for (int64_t j = 1; j < classes; ++j)
                if (row[j] > row[pred]) pred = j;
            res.confusion[y[i] * classes + pred] += 1;
            if (label_in_topk(row, classes, y[i], 1)) ++top1;
            if (label_in_topk(row, classes, y[i], 5)) ++top5;
        }
    }
    res.top1 = 100.0 * top1 / res.n;
    res.top5 = 100.0 * top5 / res.n;
    return res;
}

bool label_in_topk(const float* logits, int64_t classes, int64_t label, int64_t k) {
    const float ly = logits[label];
    int64_t rank = 0;
    for (int64_t j = 0; j < classes; ++j) {
        if (logits[j] > ly || (logits[j] == ly && j < label)) ++rank;
    }
    return rank < k;
}

EvalResult evaluate(ModelGraph& m, const PatchSet& data, int64_t batch_size, int threads) {
    if (data.size() == 0) throw Error("evaluate: empty patch set");
    const int64_t K = m.spec.classes;
    EvalResult res;
    res.classes = K;
    res.confusion.assign(static_cast<size_t>(K * K), 0);
    res.n = data.size();

    m.set_train(false);
    auto run_range = [&](ModelGraph& model, int64_t lo, int64_t hi, std::vector<int64_t>& conf,
                         int64_t& top1, int64_t& top5) {
        NoGradGuard ng;
        for (int64_t s = lo; s < hi; s += batch_size) {
            const int64_t e = std::min(hi, s + batch_size);
            std::vector<int64_t> bidx(e - s);
            for (int64_t i = s; i < e; ++i) bidx[i - s] = i;
            auto x = batch_input(model, data, bidx);
            auto logits = model.forward_logits(x);
            auto y = data.gather_labels(bidx);
            for (int64_t i = 0; i < e - s; ++i) {
                const float* row = logits->data.data() + i * K;
                int64_t pred = 0;
                for (int64_t j = 1; j < K; ++j)
                    if (row[j] > row[pred]) pred = j;
                conf[y[i] * K + pred] += 1;
                if (label_in_topk(row, K, y[i], 1)) ++top1;
                if (label_in_topk(row, K, y[i], 5)) ++top5;
            }
        }
    };

    int64_t top1 = 0, top5 = 0;
    if (threads <= 1 || data.size() < 2 * batch_size) {
        run_range(m, 0, data.size(), res.confusion, top1, top5);
    } else {
        // shard on batch boundaries; integer merge keeps the result identical
        // to the single-threaded pass
        const int nt = threads;
        std::vector<std::vector<int64_t>> confs(nt, std::vector<int64_t>(K * K, 0));
        std::vector<int64_t> t1(nt, 0), t5(nt, 0);
        std::vector<ModelGraph> copies;
        for (int t = 0; t < nt; ++t) copies.push_back(clone_model(m, true));
        const int64_t nbatch = (data.size() + batch_size - 1) / batch_size;
        const int64_t per = (nbatch + nt - 1) / nt;
        std::vector<std::thread> pool;
        for (int t = 0; t < nt; ++t) {
            const int64_t lo = std::min<int64_t>(data.size(), t * per * batch_size);
            const int64_t hi = std::min<int64_t>(data.size(), (t + 1) * per * batch_size);
            pool.emplace_back([&, t, lo, hi]() {
                if (lo < hi) run_range(copies[t], lo, hi, confs[t], t1[t], t5[t]);
            });
        }
        for (auto& th : pool) th.join();
        for (int t = 0; t < nt; ++t) {
            for (int64_t i = 0; i < K * K; ++i) res.confusion[i] += confs[t][i];
            top1 += t1[t];
            top5 += t5[t];
        }
    }
    res.top1 = 100.0 * top1 / res.n;
    res.top5 = 100.0 * top5 / res.n;
    return res;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

uint32_t crc32(const unsigned char* data, size_t len, uint32_t seed) {
    static std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = seed ^ 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

namespace {

json arch_to_json(const ArchSpec& s) {
    json j;
    j["kind"] = s.kind_name();
    j["in_channels"] = s.in_channels;
    j["f1"] = s.f1;
    j["f2"] = s.f2;
    j["kernel"] = s.kernel;
    j["hidden"] = s.hidden;
    j["classes"] = s.classes;
    j["patch"] = s.patch;
    return j;
}

ArchSpec arch_from_json(const json& j) {
    ArchSpec s;
    std::string k = j.at("kind").get<std::string>();
    if (k == "mlp")
        s.kind = ArchSpec::Kind::Mlp;
    else if (k == "cnn1d")
        s.kind = ArchSpec::Kind::Cnn1d;
    else if (k == "cnn2d")
        s.kind = ArchSpec::Kind::Cnn2d;
    else
        throw Error("checkpoint: unknown arch kind '" + k + "'");
    s.in_channels = j.at("in_channels").get<int64_t>();
    s.f1 = j.at("f1").get<int64_t>();
    s.f2 = j.at("f2").get<int64_t>();
    s.kernel = j.at("kernel").get<int64_t>();
    s.hidden = j.at("hidden").get<int64_t>();
    s.classes = j.at("classes").get<int64_t>();
    s.patch = j.at("patch").get<int64_t>();
    return s;
}

constexpr char kCkptMagic[8] = {'H', 'S', 'I', 'B', 'C', 'K', 'P', 'T'};

}  // namespace

void save_checkpoint(const ModelGraph& m, const std::string& path,
                     const std::map<std::string, std::string>& extra_manifest) {
    json manifest;
    manifest["version"] = 1;
    manifest["arch"] = arch_to_json(m.spec);
    for (const auto& [k, v] : extra_manifest) manifest["extra"][k] = v;
    json tensors = json::array();

    std::vector<float> payload;
    auto push = [&](const std::string& name, const TensPtr<float>& t) {
        if (!t) return;
        json e;
        e["name"] = name;
        e["shape"] = t->shape;
        e["dtype"] = "f32";
        e["offset"] = payload.size() * 4;
        tensors.push_back(e);
        payload.insert(payload.end(), t->data.begin(), t->data.end());
    };
    auto push_vec = [&](const std::string& name, const std::vector<float>& v) {
        json e;
        e["name"] = name;
        e["shape"] = json::array({static_cast<int64_t>(v.size())});
        e["dtype"] = "f32";
        e["offset"] = payload.size() * 4;
        tensors.push_back(e);
        payload.insert(payload.end(), v.begin(), v.end());
    };
    for (const auto& l : m.layers) {
        push(l.name + ".w", l.w);
        push(l.name + ".b", l.b);
        push(l.name + ".gamma", l.gamma);
        push(l.name + ".beta", l.beta);
        if (!l.run_mean.empty()) push_vec(l.name + ".run_mean", l.run_mean);
        if (!l.run_var.empty()) push_vec(l.name + ".run_var", l.run_var);
    }
    manifest["tensors"] = tensors;

    std::string mstr = manifest.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write checkpoint: " + path);
    f.write(kCkptMagic, 8);
    uint32_t mlen = static_cast<uint32_t>(mstr.size());
    f.write(reinterpret_cast<const char*>(&mlen), 4);
    f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * 4));
    uint32_t crc = crc32(reinterpret_cast<const unsigned char*>(mstr.data()), mstr.size());
    crc = crc32(reinterpret_cast<const unsigned char*>(payload.data()), payload.size() * 4, crc);
    f.write(reinterpret_cast<const char*>(&crc), 4);
    if (!f) throw Error("checkpoint write failed: " + path);
}

ModelGraph load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint: " + path);
    f.seekg(0, std::ios::end);
    const int64_t len = f.tellg();
    f.seekg(0);
    if (len < 16) throw Error("checkpoint truncated: " + path);
    std::vector<char> buf(static_cast<size_t>(len));
    f.read(buf.data(), len);
    if (!f) throw Error("checkpoint read failed: " + path);
    if (std::memcmp(buf.data(), kCkptMagic, 8) != 0)
        throw Error("checkpoint has bad magic: " + path);
    uint32_t mlen;
    std::memcpy(&mlen, buf.data() + 8, 4);
    if (12 + static_cast<int64_t>(mlen) + 4 > len)
        throw Error("checkpoint manifest exceeds file size: " + path);
    std::string mstr(buf.data() + 12, mlen);
    const char* payload = buf.data() + 12 + mlen;
    const size_t payload_len = static_cast<size_t>(len) - 12 - mlen - 4;
    uint32_t want_crc;
    std::memcpy(&want_crc, buf.data() + len - 4, 4);
    uint32_t crc = crc32(reinterpret_cast<const unsigned char*>(mstr.data()), mstr.size());
    crc = crc32(reinterpret_cast<const unsigned char*>(payload), payload_len, crc);
    if (crc != want_crc)
        throw Error("checkpoint CRC mismatch: expected " + std::to_string(want_crc) + ", found " +
                    std::to_string(crc));

    json manifest = json::parse(mstr);
    ArchSpec spec = arch_from_json(manifest.at("arch"));
    RngState dummy(0);
    ModelGraph m = build_model(spec, dummy);

    auto read_into = [&](const json& e, float* dst, int64_t n) {
        const int64_t off = e.at("offset").get<int64_t>();
        if (off + n * 4 > static_cast<int64_t>(payload_len))
            throw Error("checkpoint payload truncated: tensor " +
                        e.at("name").get<std::string>() + " expects " + std::to_string(n * 4) +
                        " bytes at offset " + std::to_string(off) + ", payload has " +
                        std::to_string(payload_len));
        std::memcpy(dst, payload + off, static_cast<size_t>(n * 4));
    };

    std::map<std::string, json> entries;
    for (const auto& e : manifest.at("tensors")) entries[e.at("name").get<std::string>()] = e;
    auto fetch = [&](const std::string& name, float* dst, int64_t n) {
        auto it = entries.find(name);
        if (it == entries.end()) throw Error("checkpoint missing tensor '" + name + "'");
        int64_t have = 1;
        for (auto d : it->second.at("shape").get<std::vector<int64_t>>()) have *= d;
        if (have != n)
            throw Error("checkpoint tensor '" + name + "' has " + std::to_string(have) +
                        " elements, model expects " + std::to_string(n));
        read_into(it->second, dst, n);
    };
    for (auto& l : m.layers) {
        if (l.w) fetch(l.name + ".w", l.w->data.data(), l.w->numel());
        if (l.b) fetch(l.name + ".b", l.b->data.data(), l.b->numel());
        if (l.gamma) fetch(l.name + ".gamma", l.gamma->data.data(), l.gamma->numel());
        if (l.beta) fetch(l.name + ".beta", l.beta->data.data(), l.beta->numel());
        if (!l.run_mean.empty())
            fetch(l.name + ".run_mean", l.run_mean.data(), static_cast<int64_t>(l.run_mean.size()));
        if (!l.run_var.empty())
            fetch(l.name + ".run_var", l.run_var.data(), static_cast<int64_t>(l.run_var.size()));
    }
    m.set_train(false);
    return m;
}

ModelGraph fold_batchnorm(const ModelGraph& m) {
    ModelGraph out = clone_model(m, true);
    std::vector<Layer> folded;
    Layer* last_conv = nullptr;
    for (auto& l : out.layers) {
        if (l.kind == Layer::Kind::Conv2d || l.kind == Layer::Kind::Conv1d ||
            l.kind == Layer::Kind::Linear) {
            folded.push_back(l);
            last_conv = &folded.back();
        } else if (l.kind == Layer::Kind::BatchNorm2d) {
            if (!last_conv) throw Error("fold_batchnorm: batchnorm without preceding conv");
            const int64_t C = l.gamma->numel();
            const int64_t per = last_conv->w->numel() / C;
            for (int64_t c = 0; c < C; ++c) {
                const float a =
                    l.gamma->data[c] / std::sqrt(l.run_var[c] + static_cast<float>(out.bn_eps));
                for (int64_t j = 0; j < per; ++j) last_conv->w->data[c * per + j] *= a;
                last_conv->b->data[c] =
                    l.beta->data[c] + (last_conv->b->data[c] - l.run_mean[c]) * a;
            }
        } else {
            folded.push_back(l);
            last_conv = nullptr;
        }
    }
    out.layers = std::move(folded);
    out.set_train(false);
    return out;
}

}  // namespace hsib
