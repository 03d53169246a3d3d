#include "hsib/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "hsib/ops.hpp"
#include "hsib/optim.hpp"
#include "json.hpp"

using nlohmann::json;

namespace hsib::kd {

bool is_offline(const std::string& id) {
    return id == "soft" || id == "fitnets" || id == "at" || id == "cc" || id == "simkd" ||
           id == "camkd";
}

bool is_online(const std::string& id) {
    return id == "dml" || id == "one" || id == "clilr" || id == "okddip";
}

std::string DistillConfig::to_json_string() const {
    json j;
    j["method"] = method;
    j["temperature"] = temperature;
    j["alpha"] = alpha;
    j["lambda_cc"] = lambda_cc;
    j["lambda_at"] = lambda_at;
    j["lambda_f"] = lambda_f;
    j["lambda_p"] = lambda_p;
    j["lambda_cskd"] = lambda_cskd;
    j["delta"] = delta;
    j["tf_a"] = tf_a;
    j["tf_beta"] = tf_beta;
    j["tf_temperature"] = tf_temperature;
    j["pskd_alpha_final"] = pskd_alpha_final;
    j["peers"] = peers;
    j["attn_dim"] = attn_dim;
    return j.dump(2);
}

std::vector<double> camkd_weights(const std::vector<double>& teacher_ce) {
    if (teacher_ce.empty()) throw Error("camkd_weights: no teachers");
    double mx = -teacher_ce[0];
    for (double ce : teacher_ce) mx = std::max(mx, -ce);
    std::vector<double> w(teacher_ce.size());
    double tot = 0;
    for (size_t k = 0; k < teacher_ce.size(); ++k) {
        w[k] = std::exp(-teacher_ce[k] - mx);
        tot += w[k];
    }
    for (auto& v : w) v /= tot;
    return w;
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

namespace {

template <class Step>
void epoch_loop(const PatchSet& data, const KdTrainConfig& tc, RngState& rng, Step step) {
    if (data.size() == 0) throw Error("distillation: empty training set");
    std::vector<int64_t> idx(static_cast<size_t>(data.size()));
    std::iota(idx.begin(), idx.end(), 0);
    for (int64_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        rng.shuffle(idx);
        for (int64_t s = 0; s < data.size(); s += tc.batch_size) {
            const int64_t e = std::min(data.size(), s + tc.batch_size);
            if (e - s < 2) break;  // batchnorm wants real batches
            std::vector<int64_t> bidx(idx.begin() + s, idx.begin() + e);
            step(bidx, epoch);
        }
    }
}

struct TeacherOut {
    TensPtr<float> logits;
    std::map<std::string, TensPtr<float>> taps;
};

TeacherOut teacher_forward(const ModelGraph& teacher, const TensPtr<float>& x, bool want_taps) {
    ModelGraph& t = const_cast<ModelGraph&>(teacher);
    const bool was_training = t.training;
    t.set_train(false);
    NoGradGuard ng;
    auto out = t.forward(x, want_taps);
    t.set_train(was_training);
    TeacherOut to;
    to.logits = out.logits;
    to.taps = std::move(out.taps);
    return to;
}

void check_same_classes(const ModelGraph& student, const ModelGraph& teacher) {
    if (student.spec.classes != teacher.spec.classes)
        throw Error("distillation: student emits " + std::to_string(student.spec.classes) +
                    " classes but teacher emits " + std::to_string(teacher.spec.classes));
}

}  // namespace

// ---------------------------------------------------------------------------
// offline methods
// ---------------------------------------------------------------------------

void soft_train(ModelGraph& student, const ModelGraph& teacher, const PatchSet& data,
                const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng) {
    check_same_classes(student, teacher);
    student.set_train(true);
    OptimizerT<float> opt(student.params(), tc.opt);
    const float T = static_cast<float>(dc.temperature);
    const float alpha = static_cast<float>(dc.alpha);
    epoch_loop(data, tc, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        auto x = data.gather(bidx);
        auto y = data.gather_labels(bidx);
        auto zt = teacher_forward(teacher, x, false).logits;
        auto zs = student.forward_logits(x);
        auto loss = soft_target_loss(zs, zt, T, alpha, y);
        backward(loss);
        opt.step();
        opt.zero_grad();
    });
}

void fitnets_train(ModelGraph& student, const ModelGraph& teacher, const PatchSet& data,
                   const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng) {
    check_same_classes(student, teacher);
    if (student.spec.pooled_side() != teacher.spec.pooled_side())
        throw Error("fitnets: hint and guided taps have different spatial sizes");

    // stage 1: regress pooled student features onto the teacher's through a
    // trainable 1x1 conv; the regressor is dropped afterwards
    auto reg_w = tensor<float>({teacher.spec.f2, student.spec.f2, 1, 1}, 0.0f, true);
    {
        RngState ri(rng.next_u64());
        const double sd = std::sqrt(2.0 / static_cast<double>(student.spec.f2));
        for (auto& v : reg_w->data) v = static_cast<float>(ri.normal() * sd);
    }
    auto reg_b = tensor<float>({teacher.spec.f2}, 0.0f, true);

    student.set_train(true);
    auto params = student.params();
    params.push_back(reg_w);
    params.push_back(reg_b);
    OptimizerT<float> opt_stage1(params, tc.opt);
    KdTrainConfig stage1 = tc;
    stage1.epochs = tc.stage1_epochs;
    epoch_loop(data, stage1, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        auto x = data.gather(bidx);
        auto ft = teacher_forward(teacher, x, true).taps.at("pool");
        auto out = student.forward(x, true);
        auto fs = out.taps.at("pool");
        auto loss = half_mse_rows(flatten(conv2d(fs, reg_w, reg_b)), flatten(ft));
        backward(loss);
        opt_stage1.step();
        opt_stage1.zero_grad();
    });

    // stage 2: plain soft-target training
    soft_train(student, teacher, data, dc, tc, rng);
}

void at_train(ModelGraph& student, const ModelGraph& teacher, const PatchSet& data,
              const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng) {
    check_same_classes(student, teacher);
    student.set_train(true);
    OptimizerT<float> opt(student.params(), tc.opt);
    const float T = static_cast<float>(dc.temperature);
    const float alpha = static_cast<float>(dc.alpha);
    bool warned = false;
    epoch_loop(data, tc, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        auto x = data.gather(bidx);
        auto y = data.gather_labels(bidx);
        auto tout = teacher_forward(teacher, x, true);
        auto sout = student.forward(x, true);
        auto loss = soft_target_loss(sout.logits, tout.logits, T, alpha, y);
        for (const char* tap : {"relu1", "relu2"}) {
            bool skipped = false;
            auto at = attention_transfer_loss(sout.taps.at(tap), tout.taps.at(tap), &skipped);
            if (skipped && !warned) {
                std::fprintf(stderr, "attention transfer: zero map, tap %s skipped\n", tap);
                warned = true;
            }
            loss = add(loss, scale(at, static_cast<float>(dc.lambda_at)));
        }
        backward(loss);
        opt.step();
        opt.zero_grad();
    });
}

void cc_train(ModelGraph& student, const ModelGraph& teacher, const PatchSet& data,
              const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng) {
    check_same_classes(student, teacher);
    student.set_train(true);
    OptimizerT<float> opt(student.params(), tc.opt);
    const float T = static_cast<float>(dc.temperature);
    const float alpha = static_cast<float>(dc.alpha);
    epoch_loop(data, tc, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        auto x = data.gather(bidx);
        auto y = data.gather_labels(bidx);
        auto tout = teacher_forward(teacher, x, true);
        auto sout = student.forward(x, true);
        auto loss = soft_target_loss(sout.logits, tout.logits, T, alpha, y);
        const double b = static_cast<double>(bidx.size());
        auto cc = correlation_congruence_loss(sout.taps.at("relu3"), tout.taps.at("relu3"),
                                              static_cast<float>(dc.delta));
        loss = add(loss, scale(cc, static_cast<float>(dc.lambda_cc * b * b)));
        backward(loss);
        opt.step();
        opt.zero_grad();
    });
}

SimkdModel simkd_train(const ModelGraph& student_init, const ModelGraph& teacher,
                       const PatchSet& data, const DistillConfig& dc, const KdTrainConfig& tc,
                       RngState& rng) {
    (void)dc;
    check_same_classes(student_init, teacher);
    SimkdModel sm;
    sm.encoder = clone_model(student_init, true);
    sm.encoder.set_train(true);
    sm.proj_w = tensor<float>({teacher.spec.hidden, student_init.spec.hidden}, 0.0f, true);
    {
        RngState ri(rng.next_u64());
        const double sd = std::sqrt(2.0 / static_cast<double>(student_init.spec.hidden));
        for (auto& v : sm.proj_w->data) v = static_cast<float>(ri.normal() * sd);
    }
    sm.proj_b = tensor<float>({teacher.spec.hidden}, 0.0f, true);
    sm.cls_w = tensor<float>(teacher.layer("fc2").w->shape, teacher.layer("fc2").w->data);
    sm.cls_b = tensor<float>(teacher.layer("fc2").b->shape, teacher.layer("fc2").b->data);

    auto params = sm.encoder.params();
    params.push_back(sm.proj_w);
    params.push_back(sm.proj_b);
    OptimizerT<float> opt(params, tc.opt);
    epoch_loop(data, tc, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        auto x = data.gather(bidx);
        auto ft = teacher_forward(teacher, x, true).taps.at("relu3");
        auto sout = sm.encoder.forward(x, true);
        auto fs = sout.taps.at("relu3");
        auto loss = half_mse_rows(linear(fs, sm.proj_w, sm.proj_b), ft);
        backward(loss);
        opt.step();
        opt.zero_grad();
    });
    sm.encoder.set_train(false);
    return sm;
}

TensPtr<float> SimkdModel::forward_logits(const TensPtr<float>& x) {
    auto out = encoder.forward(x, true);
    auto f = linear(out.taps.at("relu3"), proj_w, proj_b);
    return linear(f, cls_w, cls_b);
}

int64_t SimkdModel::params() const {
    int64_t n = 0;
    for (const auto& l : encoder.layers)
        if (l.w && l.name != "fc2") n += l.w->numel() + l.b->numel();
    n += proj_w->numel() + proj_b->numel() + cls_w->numel() + cls_b->numel();
    return n;
}

void camkd_train(ModelGraph& student, const std::vector<ModelGraph>& teachers,
                 const PatchSet& data, const DistillConfig& dc, const KdTrainConfig& tc,
                 RngState& rng) {
    if (teachers.size() < 2) throw Error("camkd: need at least 2 teachers");
    for (const auto& t : teachers) check_same_classes(student, t);
    student.set_train(true);
    const int64_t m = static_cast<int64_t>(teachers.size());
    const int64_t ht = teachers[0].spec.hidden;

    auto proj_w = tensor<float>({ht, student.spec.hidden}, 0.0f, true);
    {
        RngState ri(rng.next_u64());
        const double sd = std::sqrt(2.0 / static_cast<double>(student.spec.hidden));
        for (auto& v : proj_w->data) v = static_cast<float>(ri.normal() * sd);
    }
    auto proj_b = tensor<float>({ht}, 0.0f, true);

    auto params = student.params();
    params.push_back(proj_w);
    params.push_back(proj_b);
    OptimizerT<float> opt(params, tc.opt);
    const float T = static_cast<float>(dc.temperature);

    epoch_loop(data, tc, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        auto x = data.gather(bidx);
        auto y = data.gather_labels(bidx);
        const int64_t n = static_cast<int64_t>(bidx.size());
        const int64_t K = student.spec.classes;

        std::vector<TeacherOut> touts;
        touts.reserve(m);
        for (const auto& t : teachers) touts.push_back(teacher_forward(t, x, true));

        // per-sample reliability weights from the teachers' label losses
        auto w = tensor<float>({n, m});
        for (int64_t i = 0; i < n; ++i) {
            std::vector<double> ces(m);
            for (int64_t k = 0; k < m; ++k) {
                const float* row = touts[k].logits->data.data() + i * K;
                double mx = row[0];
                for (int64_t j = 1; j < K; ++j) mx = std::max<double>(mx, row[j]);
                double tot = 0;
                for (int64_t j = 0; j < K; ++j) tot += std::exp(row[j] - mx);
                ces[k] = std::log(tot) + mx - row[y[i]];
            }
            auto wk = camkd_weights(ces);
            for (int64_t k = 0; k < m; ++k) w->data[i * m + k] = static_cast<float>(wk[k]);
        }

        auto sout = student.forward(x, true);
        auto ps = softmax_t(sout.logits, T);
        auto fs_proj = linear(sout.taps.at("relu3"), proj_w, proj_b);
        auto loss = cross_entropy(sout.logits, y);
        for (int64_t k = 0; k < m; ++k) {
            auto pt = softmax_t(touts[k].logits, T);
            auto klr = kl_div_rowwise(pt, ps);
            loss = add(loss, scale(mean_all(mul(klr, col(w, k))), T * T));
            auto d = sub(fs_proj, touts[k].taps.at("relu3"));
            auto sse = rowwise_dot(d, d);
            loss = add(loss, scale(mean_all(mul(sse, col(w, k))),
                                   static_cast<float>(dc.lambda_f)));
        }
        backward(loss);
        opt.step();
        opt.zero_grad();
    });
}

// ---------------------------------------------------------------------------
// online methods
// ---------------------------------------------------------------------------

void dml_train(std::vector<ModelGraph>& peers, const PatchSet& data, const DistillConfig& dc,
               const KdTrainConfig& tc, RngState& rng) {
    (void)dc;
    if (peers.size() < 2) throw Error("dml: need at least 2 peers");
    const int64_t m = static_cast<int64_t>(peers.size());
    std::vector<TensPtr<float>> all_params;
    for (auto& p : peers) {
        p.set_train(true);
        auto ps = p.params();
        all_params.insert(all_params.end(), ps.begin(), ps.end());
    }
    OptimizerT<float> opt(all_params, tc.opt);
    epoch_loop(data, tc, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        auto x = data.gather(bidx);
        auto y = data.gather_labels(bidx);
        std::vector<TensPtr<float>> logits(m), probs_det(m);
        for (int64_t i = 0; i < m; ++i) logits[i] = peers[i].forward_logits(x);
        for (int64_t i = 0; i < m; ++i) probs_det[i] = softmax_t(detach(logits[i]), 1.0f);
        TensPtr<float> total;
        for (int64_t i = 0; i < m; ++i) {
            auto li = cross_entropy(logits[i], y);
            auto pi = softmax_t(logits[i], 1.0f);
            for (int64_t j = 0; j < m; ++j) {
                if (j == i) continue;
                li = add(li, scale(kl_div(probs_det[j], pi), 1.0f / static_cast<float>(m - 1)));
            }
            total = total ? add(total, li) : li;
        }
        backward(total);
        opt.step();
        opt.zero_grad();
    });
    for (auto& p : peers) p.set_train(false);
}

MultiBranch make_multibranch(const ArchSpec& spec, int64_t m, bool with_gate, RngState& rng) {
    if (m < 1) throw Error("multibranch: need at least one head");
    MultiBranch mb;
    mb.spec = spec;
    ModelGraph full = build_model(spec, rng);
    // trunk = everything up to and including the flatten
    mb.trunk = full;
    std::vector<Layer> trunk_layers;
    for (auto& l : full.layers) {
        if (l.name == "fc1") break;
        trunk_layers.push_back(l);
    }
    mb.trunk.layers = trunk_layers;
    const int64_t flat = spec.flatten_size();
    const double sd1 = std::sqrt(2.0 / static_cast<double>(flat));
    const double sd2 = std::sqrt(2.0 / static_cast<double>(spec.hidden));
    for (int64_t i = 0; i < m; ++i) {
        MultiBranch::Head h;
        h.fc1_w = tensor<float>({spec.hidden, flat}, 0.0f, true);
        for (auto& v : h.fc1_w->data) v = static_cast<float>(rng.normal() * sd1);
        h.fc1_b = tensor<float>({spec.hidden}, 0.0f, true);
        h.fc2_w = tensor<float>({spec.classes, spec.hidden}, 0.0f, true);
        for (auto& v : h.fc2_w->data) v = static_cast<float>(rng.normal() * sd2);
        h.fc2_b = tensor<float>({spec.classes}, 0.0f, true);
        mb.heads.push_back(std::move(h));
    }
    if (with_gate) {
        mb.gate_w = tensor<float>({m, flat}, 0.0f, true);
        for (auto& v : mb.gate_w->data) v = static_cast<float>(rng.normal() * sd1);
        mb.gate_b = tensor<float>({m}, 0.0f, true);
    }
    return mb;
}

std::vector<TensPtr<float>> MultiBranch::params() const {
    std::vector<TensPtr<float>> out = trunk.params();
    for (const auto& h : heads) {
        out.push_back(h.fc1_w);
        out.push_back(h.fc1_b);
        out.push_back(h.fc2_w);
        out.push_back(h.fc2_b);
    }
    if (gate_w) {
        out.push_back(gate_w);
        out.push_back(gate_b);
    }
    return out;
}

ModelGraph MultiBranch::deploy(int64_t head_index, RngState& rng) const {
    if (head_index < 0 || head_index >= static_cast<int64_t>(heads.size()))
        throw Error("multibranch: bad head index");
    ModelGraph out = build_model(spec, rng);
    for (auto& l : out.layers) {
        // copy trunk layers by name
        for (const auto& tl : trunk.layers) {
            if (tl.name != l.name) continue;
            if (tl.w) l.w->data = tl.w->data;
            if (tl.b) l.b->data = tl.b->data;
            if (tl.gamma) {
                l.gamma->data = tl.gamma->data;
                l.beta->data = tl.beta->data;
                l.run_mean = tl.run_mean;
                l.run_var = tl.run_var;
            }
        }
    }
    const auto& h = heads[head_index];
    out.layer("fc1").w->data = h.fc1_w->data;
    out.layer("fc1").b->data = h.fc1_b->data;
    out.layer("fc2").w->data = h.fc2_w->data;
    out.layer("fc2").b->data = h.fc2_b->data;
    out.set_train(false);
    return out;
}

namespace {

struct BranchForward {
    TensPtr<float> flat;
    std::vector<TensPtr<float>> hidden, logits;
};

BranchForward branch_forward(MultiBranch& mb, const TensPtr<float>& x) {
    BranchForward bf;
    auto tout = mb.trunk.forward(x, false);
    bf.flat = tout.logits;  // trunk ends at the flatten
    for (auto& h : mb.heads) {
        auto hid = relu(linear(bf.flat, h.fc1_w, h.fc1_b));
        bf.hidden.push_back(hid);
        bf.logits.push_back(linear(hid, h.fc2_w, h.fc2_b));
    }
    return bf;
}

}  // namespace

MultiBranch one_train(const ArchSpec& student_spec, const PatchSet& data, const DistillConfig& dc,
                      const KdTrainConfig& tc, RngState& rng) {
    if (dc.peers < 2) throw Error("one: need at least 2 branches");
    auto mb = make_multibranch(student_spec, dc.peers, true, rng);
    mb.trunk.set_train(true);
    OptimizerT<float> opt(mb.params(), tc.opt);
    const float T = static_cast<float>(dc.temperature);
    const int64_t m = dc.peers;
    epoch_loop(data, tc, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        auto x = data.gather(bidx);
        auto y = data.gather_labels(bidx);
        auto bf = branch_forward(mb, x);
        auto gate = softmax_t(linear(bf.flat, mb.gate_w, mb.gate_b), 1.0f);
        TensPtr<float> ze;
        for (int64_t i = 0; i < m; ++i) {
            auto term = scale_rows(bf.logits[i], col(gate, i));
            ze = ze ? add(ze, term) : term;
        }
        auto pe_det = softmax_t(detach(ze), T);
        auto loss = cross_entropy(ze, y);  // gate learns through the ensemble
        for (int64_t i = 0; i < m; ++i) {
            loss = add(loss, cross_entropy(bf.logits[i], y));
            loss = add(loss, scale(kl_div(pe_det, softmax_t(bf.logits[i], T)), T * T));
        }
        backward(loss);
        opt.step();
        opt.zero_grad();
    });
    mb.trunk.set_train(false);
    return mb;
}

MultiBranch clilr_train(const ArchSpec& student_spec, const PatchSet& data,
                        const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng) {
    if (dc.peers < 2) throw Error("clilr: need at least 2 heads");
    auto mb = make_multibranch(student_spec, dc.peers, false, rng);
    mb.trunk.set_train(true);
    OptimizerT<float> opt(mb.params(), tc.opt);
    const float T = static_cast<float>(dc.temperature);
    const int64_t m = dc.peers;
    epoch_loop(data, tc, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        auto x = data.gather(bidx);
        auto y = data.gather_labels(bidx);
        auto bf = branch_forward(mb, x);
        std::vector<TensPtr<float>> pdet(m);
        for (int64_t i = 0; i < m; ++i) pdet[i] = softmax_t(detach(bf.logits[i]), T);
        TensPtr<float> loss;
        for (int64_t i = 0; i < m; ++i) {
            auto li = cross_entropy(bf.logits[i], y);
            TensPtr<float> mean_others;
            for (int64_t j = 0; j < m; ++j) {
                if (j == i) continue;
                mean_others = mean_others ? add(mean_others, pdet[j]) : pdet[j];
            }
            mean_others = scale(mean_others, 1.0f / static_cast<float>(m - 1));
            li = add(li, scale(kl_div(mean_others, softmax_t(bf.logits[i], T)), T * T));
            loss = loss ? add(loss, li) : li;
        }
        backward(loss);
        opt.step();
        opt.zero_grad();
    });
    mb.trunk.set_train(false);
    return mb;
}

MultiBranch okddip_train(const ArchSpec& student_spec, const PatchSet& data,
                         const DistillConfig& dc, const KdTrainConfig& tc, RngState& rng) {
    if (dc.peers < 3) throw Error("okddip: need at least 2 secondary peers and a leader");
    auto mb = make_multibranch(student_spec, dc.peers, false, rng);
    const int64_t m = dc.peers;
    const int64_t n_peers = m - 1;  // last branch is the group leader
    const int64_t d_attn = dc.attn_dim;

    auto wq = tensor<float>({d_attn, student_spec.hidden}, 0.0f, true);
    auto wk = tensor<float>({d_attn, student_spec.hidden}, 0.0f, true);
    {
        const double sd = std::sqrt(1.0 / static_cast<double>(student_spec.hidden));
        for (auto& v : wq->data) v = static_cast<float>(rng.normal() * sd);
        for (auto& v : wk->data) v = static_cast<float>(rng.normal() * sd);
    }
    auto params = mb.params();
    params.push_back(wq);
    params.push_back(wk);

    mb.trunk.set_train(true);
    OptimizerT<float> opt(params, tc.opt);
    const float T = static_cast<float>(dc.temperature);
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d_attn));

    epoch_loop(data, tc, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        auto x = data.gather(bidx);
        auto y = data.gather_labels(bidx);
        auto bf = branch_forward(mb, x);

        std::vector<TensPtr<float>> pdet(n_peers);
        for (int64_t i = 0; i < n_peers; ++i) pdet[i] = softmax_t(detach(bf.logits[i]), T);
        std::vector<TensPtr<float>> q(n_peers), k(n_peers);
        for (int64_t i = 0; i < n_peers; ++i) {
            q[i] = linear(bf.hidden[i], wq, TensPtr<float>{});
            k[i] = linear(bf.hidden[i], wk, TensPtr<float>{});
        }

        TensPtr<float> loss;
        for (int64_t i = 0; i < n_peers; ++i) {
            std::vector<TensPtr<float>> scores;
            for (int64_t j = 0; j < n_peers; ++j)
                scores.push_back(scale(rowwise_dot(q[i], k[j]), inv_sqrt_d));
            auto attn = softmax_t(stack_cols(scores), 1.0f);  // rows sum to 1
            TensPtr<float> target;
            for (int64_t j = 0; j < n_peers; ++j) {
                auto term = scale_rows(pdet[j], col(attn, j));
                target = target ? add(target, term) : term;
            }
            auto li = cross_entropy(bf.logits[i], y);
            li = add(li, scale(kl_div(target, softmax_t(bf.logits[i], T)), T * T));
            loss = loss ? add(loss, li) : li;
        }
        // second tier: leader distills from the detached mean peer prediction
        TensPtr<float> mean_peers;
        for (int64_t j = 0; j < n_peers; ++j)
            mean_peers = mean_peers ? add(mean_peers, pdet[j]) : pdet[j];
        mean_peers = scale(mean_peers, 1.0f / static_cast<float>(n_peers));
        auto ll = cross_entropy(bf.logits[m - 1], y);
        ll = add(ll, scale(kl_div(mean_peers, softmax_t(bf.logits[m - 1], T)), T * T));
        loss = add(loss, ll);

        backward(loss);
        opt.step();
        opt.zero_grad();
    });
    mb.trunk.set_train(false);
    return mb;
}

// ---------------------------------------------------------------------------
// self methods
// ---------------------------------------------------------------------------

void tfkd_train(ModelGraph& student, const PatchSet& data, const DistillConfig& dc,
                const KdTrainConfig& tc, RngState& rng) {
    student.set_train(true);
    OptimizerT<float> opt(student.params(), tc.opt);
    epoch_loop(data, tc, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        auto x = data.gather(bidx);
        auto y = data.gather_labels(bidx);
        auto z = student.forward_logits(x);
        auto loss = tfkd_loss(z, y, static_cast<float>(dc.tf_a), static_cast<float>(dc.tf_beta),
                              static_cast<float>(dc.tf_temperature));
        backward(loss);
        opt.step();
        opt.zero_grad();
    });
}

void cskd_train(ModelGraph& student, const PatchSet& data, const DistillConfig& dc,
                const KdTrainConfig& tc, RngState& rng) {
    student.set_train(true);
    OptimizerT<float> opt(student.params(), tc.opt);
    const float T = static_cast<float>(dc.temperature);

    std::vector<std::vector<int64_t>> by_class(static_cast<size_t>(data.num_classes));
    for (int64_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);
    bool warned = false;

    epoch_loop(data, tc, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        const int64_t n = static_cast<int64_t>(bidx.size());
        // same-label partners, drawn uniformly; singleton classes contribute
        // plain cross-entropy only
        std::vector<int64_t> partner(bidx.size());
        std::vector<float> valid(bidx.size(), 1.0f);
        int64_t n_valid = 0;
        for (int64_t i = 0; i < n; ++i) {
            const auto& pool = by_class[data.labels[bidx[i]]];
            if (pool.size() < 2) {
                partner[i] = bidx[i];
                valid[i] = 0.0f;
                if (!warned) {
                    std::fprintf(stderr, "cskd: singleton class, regularizer skipped\n");
                    warned = true;
                }
                continue;
            }
            int64_t pick = bidx[i];
            while (pick == bidx[i])
                pick = pool[static_cast<size_t>(rng.below(pool.size()))];
            partner[i] = pick;
            ++n_valid;
        }
        auto x = data.gather(bidx);
        auto y = data.gather_labels(bidx);
        auto z = student.forward_logits(x);
        auto loss = cross_entropy(z, y);
        if (n_valid > 0) {
            TensPtr<float> zp;
            {
                NoGradGuard ng;
                const bool upd = student.update_running_stats;
                student.update_running_stats = false;
                zp = student.forward_logits(data.gather(partner));
                student.update_running_stats = upd;
            }
            auto mask = tensor<float>({n}, valid);
            auto klr = kl_div_rowwise(softmax_t(zp, T), softmax_t(z, T));
            auto term = scale(sum_all(mul(klr, mask)),
                              static_cast<float>(dc.lambda_cskd) * T * T / n_valid);
            loss = add(loss, term);
        }
        backward(loss);
        opt.step();
        opt.zero_grad();
    });
}

void pskd_train(ModelGraph& student, const PatchSet& data, const DistillConfig& dc,
                const KdTrainConfig& tc, RngState& rng) {
    student.set_train(true);
    OptimizerT<float> opt(student.params(), tc.opt);
    std::optional<ModelGraph> prev;
    std::vector<int64_t> idx(static_cast<size_t>(data.size()));
    std::iota(idx.begin(), idx.end(), 0);

    for (int64_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        const float alpha_t =
            prev ? static_cast<float>(dc.pskd_alpha_final * static_cast<double>(epoch) /
                                      static_cast<double>(tc.epochs))
                 : 0.0f;  // no snapshot yet: pure hard labels
        rng.shuffle(idx);
        for (int64_t s = 0; s < data.size(); s += tc.batch_size) {
            const int64_t e = std::min(data.size(), s + tc.batch_size);
            if (e - s < 2) break;
            std::vector<int64_t> bidx(idx.begin() + s, idx.begin() + e);
            auto x = data.gather(bidx);
            auto y = data.gather_labels(bidx);
            TensPtr<float> target;
            if (prev && alpha_t > 0) {
                NoGradGuard ng;
                auto zp = prev->forward_logits(x);
                target = pskd_target(y, softmax_t(zp, 1.0f), alpha_t);
            } else {
                auto uniform = tensor<float>({e - s, student.spec.classes});
                target = pskd_target(y, uniform, 0.0f);
            }
            auto z = student.forward_logits(x);
            auto loss = soft_cross_entropy(z, target);
            backward(loss);
            opt.step();
            opt.zero_grad();
        }
        prev = clone_model(student, true);
        prev->set_train(false);
    }
}

void ddgsd_train(ModelGraph& student, const PatchSet& data, const DistillConfig& dc,
                 const KdTrainConfig& tc, RngState& rng) {
    student.set_train(true);
    OptimizerT<float> opt(student.params(), tc.opt);
    epoch_loop(data, tc, rng, [&](const std::vector<int64_t>& bidx, int64_t) {
        auto x = data.gather(bidx);
        auto y = data.gather_labels(bidx);
        auto v1 = dc.identity_distortion ? x : flip_spatial(x, true);
        auto v2 = dc.identity_distortion ? x : flip_spatial(x, false);

        auto out1 = student.forward(v1, true);
        const bool upd = student.update_running_stats;
        student.update_running_stats = false;
        auto out2 = student.forward(v2, true);
        student.update_running_stats = upd;

        auto p1 = softmax_t(out1.logits, 1.0f);
        auto p2 = softmax_t(out2.logits, 1.0f);
        auto loss = add(cross_entropy(out1.logits, y), cross_entropy(out2.logits, y));
        loss = add(loss, scale(add(kl_div(p1, p2), kl_div(p2, p1)),
                               static_cast<float>(dc.lambda_p)));
        auto g1 = global_avg_pool(out1.taps.at("relu2"));
        auto g2 = global_avg_pool(out2.taps.at("relu2"));
        auto gd = sub(g1, g2);
        loss = add(loss, scale(mean_all(rowwise_dot(gd, gd)),
                               static_cast<float>(dc.lambda_f)));
        backward(loss);
        opt.step();
        opt.zero_grad();
    });
}

// ---------------------------------------------------------------------------
// simkd container
// ---------------------------------------------------------------------------

void SimkdModel::save(const std::string& path) const {
    // encoder checkpoint plus the projector and the reused classifier
    save_checkpoint(encoder, path);
    json extra;
    extra["proj_w"] = proj_w->data;
    extra["proj_b"] = proj_b->data;
    extra["proj_shape"] = proj_w->shape;
    extra["cls_w"] = cls_w->data;
    extra["cls_b"] = cls_b->data;
    extra["cls_shape"] = cls_w->shape;
    std::ofstream f(path + ".simkd");
    if (!f) throw Error("cannot write " + path + ".simkd");
    f << extra.dump() << "\n";
}

SimkdModel SimkdModel::load(const std::string& path) {
    SimkdModel sm;
    sm.encoder = load_checkpoint(path);
    std::ifstream f(path + ".simkd");
    if (!f) throw Error("cannot open " + path + ".simkd");
    json extra;
    f >> extra;
    sm.proj_w = tensor<float>(extra.at("proj_shape").get<std::vector<int64_t>>(),
                              extra.at("proj_w").get<std::vector<float>>());
    sm.proj_b = tensor<float>({static_cast<int64_t>(extra.at("proj_b").size())},
                              extra.at("proj_b").get<std::vector<float>>());
    sm.cls_w = tensor<float>(extra.at("cls_shape").get<std::vector<int64_t>>(),
                             extra.at("cls_w").get<std::vector<float>>());
    sm.cls_b = tensor<float>({static_cast<int64_t>(extra.at("cls_b").size())},
                             extra.at("cls_b").get<std::vector<float>>());
    return sm;
}

}  // namespace hsib::kd
