#pragma once

// Knowledge-distillation trainers: six offline (pretrained teacher), four
// online (co-trained peers or branches) and four self (no second network).
// Students use the pruned-architecture widths.

#include <optional>
#include <string>
#include <vector>

#include "hsib/data.hpp"
#include "hsib/model.hpp"

namespace hsib::kd {

inline const std::vector<std::string>& method_ids() {
    static const std::vector<std::string> ids = {
        "soft",  "fitnets", "at",    "cc",   "simkd", "camkd",  // offline
        "dml",   "one",     "clilr", "okddip",                  // online
        "tfkd",  "cskd",    "pskd",  "ddgsd",                   // self
    };
    return ids;
}

bool is_offline(const std::string& id);
bool is_online(const std::string& id);

struct DistillConfig {
    std::string method = "soft";
    double temperature = 4.0;
    double alpha = 0.9;           // CE weight in the combined soft-target loss
    double lambda_cc = 0.02;      // scaled by batch^2 against the 1/b^2 kernel term
    double lambda_at = 1.0;
    double lambda_f = 1.0;        // feature terms (camkd, ddgsd)
    double lambda_p = 1.0;        // ddgsd probability consistency
    double lambda_cskd = 1.0;
    double delta = 1.0;           // rbf bandwidth (after L2 normalization)
    double tf_a = 0.9;            // virtual-teacher correct-class probability
    double tf_beta = 0.1;
    double tf_temperature = 20.0;
    double pskd_alpha_final = 0.8;
    int64_t peers = 3;            // branches / peers / teachers
    int64_t attn_dim = 16;        // okddip attention projection
    bool identity_distortion = false;  // ddgsd test hook

    std::string to_json_string() const;
};

// ---------------------------------------------------------------------------
// losses (templated so the f64 finite-difference suite can drive them)
// ---------------------------------------------------------------------------

// alpha * CE(z_s, y) + (1 - alpha) * T^2 * KL(softmax_T(z_t) || softmax_T(z_s));
// the teacher side is used as given (callers detach live teachers).
template <class T>
TensPtr<T> soft_target_loss(const TensPtr<T>& z_s, const TensPtr<T>& z_t, T temperature, T alpha,
                            const std::vector<int64_t>& labels) {
    if (!same_shape(*z_s, *z_t)) throw Error("soft_target_loss: class-count mismatch");
    auto ce = cross_entropy(z_s, labels);
    auto kl = kl_div(softmax_t(z_t, temperature), softmax_t(z_s, temperature));
    return add(scale(ce, alpha), scale(kl, (T(1) - alpha) * temperature * temperature));
}

// sum over samples of || Q_s/|Q_s| - Q_t/|Q_t| ||_2 / batch, Q = channel energy;
// an all-zero map on either side skips the tap (reported through `skipped`)
template <class T>
TensPtr<T> attention_transfer_loss(const TensPtr<T>& a_s, const TensPtr<T>& a_t,
                                   bool* skipped = nullptr) {
    if (a_s->shape.size() != 4 || a_t->shape.size() != 4)
        throw Error("attention_transfer_loss: need [N,C,H,W] activations");
    if (a_s->shape[0] != a_t->shape[0] || a_s->shape[2] != a_t->shape[2] ||
        a_s->shape[3] != a_t->shape[3])
        throw Error("attention_transfer_loss: spatial dims differ");
    auto qs = channel_sumsq(a_s);
    auto qt = channel_sumsq(a_t);
    for (const auto* q : {qs.get(), qt.get()}) {
        const int64_t R = q->shape[0], K = q->shape[1];
        for (int64_t r = 0; r < R; ++r) {
            T s = 0;
            for (int64_t i = 0; i < K; ++i) s += q->data[r * K + i];
            if (s == T(0)) {
                if (skipped) *skipped = true;
                return tensor<T>({1}, {T(0)});
            }
        }
    }
    if (skipped) *skipped = false;
    return mean_all(rowwise_l2_diff(l2_normalize_rows(qs), l2_normalize_rows(qt)));
}

// (1/b^2) * || K_t - K_s ||_F^2 over rbf kernels of L2-normalized embeddings
template <class T>
TensPtr<T> correlation_congruence_loss(const TensPtr<T>& f_s, const TensPtr<T>& f_t, T delta) {
    if (f_s->shape.size() != 2 || f_t->shape.size() != 2 || f_s->shape[0] != f_t->shape[0])
        throw Error("correlation_congruence_loss: need [b,D] embeddings with equal batch");
    if (f_s->shape[0] < 2) throw Error("correlation_congruence_loss: batch must be >= 2");
    const T b = static_cast<T>(f_s->shape[0]);
    auto ks = pairwise_rbf(l2_normalize_rows(f_s), delta);
    auto kt = pairwise_rbf(l2_normalize_rows(f_t), delta);
    auto diff = sub(kt, ks);
    return scale(sum_all(mul(diff, diff)), T(1) / (b * b));
}

// Eq-style virtual teacher: probability a at the label, (1-a)/(K-1) elsewhere
template <class T>
TensPtr<T> tfkd_virtual_teacher(const std::vector<int64_t>& labels, int64_t classes, T a) {
    if (!(a > T(1) / static_cast<T>(classes) && a <= T(1)))
        throw Error("tfkd_virtual_teacher: a must lie in (1/K, 1]");
    auto out = tensor<T>({static_cast<int64_t>(labels.size()), classes});
    const T off = (T(1) - a) / static_cast<T>(classes - 1);
    for (size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] < 0 || labels[n] >= classes) throw Error("tfkd_virtual_teacher: bad label");
        for (int64_t k = 0; k < classes; ++k)
            out->data[n * classes + k] = (k == labels[n]) ? a : off;
    }
    return out;
}

template <class T>
TensPtr<T> tfkd_loss(const TensPtr<T>& z_s, const std::vector<int64_t>& labels, T a, T beta,
                     T temperature) {
    auto pd = tfkd_virtual_teacher<T>(labels, z_s->shape.back(), a);
    auto ce = cross_entropy(z_s, labels);
    auto kl = kl_div(pd, softmax_t(z_s, temperature));
    return add(ce, scale(kl, beta * temperature * temperature));
}

// (1 - alpha_t) * onehot + alpha_t * previous-epoch prediction
template <class T>
TensPtr<T> pskd_target(const std::vector<int64_t>& labels, const TensPtr<T>& p_prev, T alpha_t) {
    if (alpha_t < T(0) || alpha_t > T(1)) throw Error("pskd_target: alpha out of [0,1]");
    const int64_t N = p_prev->shape[0], K = p_prev->shape[1];
    if (static_cast<int64_t>(labels.size()) != N) throw Error("pskd_target: label count");
    auto out = tensor<T>({N, K});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k) {
            const T onehot = (k == labels[n]) ? T(1) : T(0);
            out->data[n * K + k] = (T(1) - alpha_t) * onehot + alpha_t * p_prev->data[n * K + k];
        }
    return out;
}

// per-sample softmax over -CE(z_t_k, y): reliability weights for m teachers
std::vector<double> camkd_weights(const std::vector<double>& teacher_ce);

// ---------------------------------------------------------------------------
// trainers (all deterministic given the rng state)
// ---------------------------------------------------------------------------

struct KdTrainConfig {
    int64_t epochs = 30;
    int64_t batch_size = 128;
    OptimConfig opt;
    int64_t stage1_epochs = 8;  // fitnets hint stage
    bool verbose = false;
};

// offline: teacher frozen in eval mode
void soft_train(ModelGraph& student, const ModelGraph& teacher, const PatchSet& data,
                const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng);
void fitnets_train(ModelGraph& student, const ModelGraph& teacher, const PatchSet& data,
                   const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng);
void at_train(ModelGraph& student, const ModelGraph& teacher, const PatchSet& data,
              const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng);
void cc_train(ModelGraph& student, const ModelGraph& teacher, const PatchSet& data,
              const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng);
void camkd_train(ModelGraph& student, const std::vector<ModelGraph>& teachers,
                 const PatchSet& data, const DistillConfig& dc, const KdTrainConfig& tc,
                 RngState& rng);

// simkd deploys the teacher classifier on projected student features
struct SimkdModel {
    ModelGraph encoder;           // student trunk + fc1 (its fc2 is unused)
    TensPtr<float> proj_w, proj_b;  // hidden_s -> hidden_t
    TensPtr<float> cls_w, cls_b;    // frozen teacher classifier
    TensPtr<float> forward_logits(const TensPtr<float>& x);
    int64_t params() const;
    void save(const std::string& path) const;
    static SimkdModel load(const std::string& path);
};
SimkdModel simkd_train(const ModelGraph& student_init, const ModelGraph& teacher,
                       const PatchSet& data, const DistillConfig& dc, const KdTrainConfig& tc,
                       RngState& rng);

// online: peers are independent full students; deploy peers[0]
void dml_train(std::vector<ModelGraph>& peers, const PatchSet& data, const DistillConfig& dc,
               const KdTrainConfig& tc, RngState& rng);

// shared trunk with m fully connected heads (+ optional gate)
struct MultiBranch {
    ArchSpec spec;       // per-branch equivalent architecture
    ModelGraph trunk;    // conv stack ending at the flatten
    struct Head {
        TensPtr<float> fc1_w, fc1_b, fc2_w, fc2_b;
    };
    std::vector<Head> heads;
    TensPtr<float> gate_w, gate_b;  // optional (one_train)

    ModelGraph deploy(int64_t head_index, RngState& rng) const;
    std::vector<TensPtr<float>> params() const;
};

MultiBranch make_multibranch(const ArchSpec& spec, int64_t m, bool with_gate, RngState& rng);

MultiBranch one_train(const ArchSpec& student_spec, const PatchSet& data,
                      const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng);
MultiBranch clilr_train(const ArchSpec& student_spec, const PatchSet& data,
                        const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng);
// branches 0..m-2 are attention-coupled peers, branch m-1 is the leader
MultiBranch okddip_train(const ArchSpec& student_spec, const PatchSet& data,
                         const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng);

// self
void tfkd_train(ModelGraph& student, const PatchSet& data, const DistillConfig& dc,
                const KdTrainConfig& tc, RngState& rng);
void cskd_train(ModelGraph& student, const PatchSet& data, const DistillConfig& dc,
                const KdTrainConfig& tc, RngState& rng);
void pskd_train(ModelGraph& student, const PatchSet& data, const DistillConfig& dc,
                const KdTrainConfig& tc, RngState& rng);
void ddgsd_train(ModelGraph& student, const PatchSet& data, const DistillConfig& dc,
                 const KdTrainConfig& tc, RngState& rng);

}  // namespace hsib::kd
