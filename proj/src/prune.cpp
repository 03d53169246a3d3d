#include "hsib/prune.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace hsib::prune {

Method method_from_string(const std::string& s) {
    if (s == "l1") return Method::L1;
    if (s == "thinet") return Method::ThiNet;
    if (s == "slimming") return Method::Slimming;
    if (s == "sfp") return Method::Sfp;
    throw Error("unknown pruning method '" + s + "'");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::L1: return "l1";
        case Method::ThiNet: return "thinet";
        case Method::Slimming: return "slimming";
        case Method::Sfp: return "sfp";
    }
    return "?";
}

PruneTarget PruneTarget::for_label(int label) {
    PruneTarget t;
    t.label = label;
    switch (label) {
        case 90: t.f1 = 15; t.f2 = 30; t.hidden = 30; break;
        case 95: t.f1 = 10; t.f2 = 20; t.hidden = 20; break;
        case 98: t.f1 = 5; t.f2 = 10; t.hidden = 10; break;
        default: throw Error("unknown pruning ratio label " + std::to_string(label));
    }
    return t;
}

PruneTarget PruneTarget::keep_all(const ArchSpec& spec) {
    PruneTarget t;
    t.label = 0;
    t.f1 = spec.f1;
    t.f2 = spec.f2;
    t.hidden = spec.hidden;
    return t;
}

void PruneTarget::validate(const ArchSpec& spec) const {
    if (f1 < 1 || f2 < 1 || hidden < 1) throw Error("prune target: widths must be >= 1");
    if (f1 > spec.f1 || f2 > spec.f2 || hidden > spec.hidden)
        throw Error("prune target: widths exceed the current architecture");
}

Strategy strategy_from_string(const std::string& s) {
    if (s == "I" || s == "1" || s == "i") return Strategy::I;
    if (s == "II" || s == "2" || s == "ii") return Strategy::II;
    if (s == "III" || s == "3" || s == "iii") return Strategy::III;
    throw Error("unknown fine-tuning strategy '" + s + "'");
}

// ---------------------------------------------------------------------------
// rankings
// ---------------------------------------------------------------------------

namespace {

std::vector<int64_t> order_by_score_desc(const std::vector<double>& score) {
    for (double s : score)
        if (!std::isfinite(s)) throw Error("ranking: non-finite importance score");
    std::vector<int64_t> idx(score.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int64_t a, int64_t b) { return score[a] > score[b]; });
    return idx;
}

std::vector<double> l1_filter_scores(const TensPtr<float>& w, int64_t n_filters) {
    const int64_t per = w->numel() / n_filters;
    std::vector<double> s(static_cast<size_t>(n_filters), 0.0);
    for (int64_t f = 0; f < n_filters; ++f)
        for (int64_t j = 0; j < per; ++j) s[f] += std::abs(w->data[f * per + j]);
    return s;
}

}  // namespace

FilterRanking rank_l1(const ModelGraph& m) {
    FilterRanking r;
    r.conv1 = order_by_score_desc(l1_filter_scores(m.layer("conv1").w, m.spec.f1));
    r.conv2 = order_by_score_desc(l1_filter_scores(m.layer("conv2").w, m.spec.f2));
    r.hidden = order_by_score_desc(l1_filter_scores(m.layer("fc1").w, m.spec.hidden));
    return r;
}

FilterRanking rank_slimming(const ModelGraph& m) {
    auto bn_scores = [&](const std::string& name) {
        const auto& l = m.layer(name);
        if (!l.gamma) throw Error("rank_slimming: layer '" + name + "' has no batchnorm scales");
        std::vector<double> s(l.gamma->data.size());
        for (size_t i = 0; i < s.size(); ++i) s[i] = std::abs(l.gamma->data[i]);
        return s;
    };
    FilterRanking r;
    r.conv1 = order_by_score_desc(bn_scores("bn1"));
    r.conv2 = order_by_score_desc(bn_scores("bn2"));
    // no batchnorm on fc layers: fall back to the weight-magnitude rule
    r.hidden = order_by_score_desc(l1_filter_scores(m.layer("fc1").w, m.spec.hidden));
    return r;
}

TrainHistory train_slimming(ModelGraph& m, const PatchSet& data, double lambda, TrainConfig cfg,
                            RngState& rng) {
    bool has_bn = false;
    for (const auto& l : m.layers) has_bn = has_bn || (l.gamma != nullptr);
    if (!has_bn) throw Error("train_slimming: model has no batchnorm scaling factors");
    cfg.bn_l1_lambda = lambda;
    return train(m, data, cfg, rng);
}

std::vector<int64_t> greedy_drop_order(const std::vector<std::vector<double>>& contribs) {
    const int64_t n = static_cast<int64_t>(contribs.size());
    if (n == 0) return {};
    const size_t dim = contribs[0].size();
    for (auto& c : contribs)
        if (c.size() != dim) throw Error("greedy_drop_order: ragged contributions");

    std::vector<double> removed(dim, 0.0);
    std::vector<bool> dropped(static_cast<size_t>(n), false);
    std::vector<int64_t> order;
    for (int64_t step = 0; step + 1 < n; ++step) {  // leave at least one channel
        double best = 0;
        int64_t best_i = -1;
        for (int64_t i = 0; i < n; ++i) {
            if (dropped[i]) continue;
            double err = 0;
            for (size_t d = 0; d < dim; ++d) {
                const double v = removed[d] + contribs[i][d];
                err += v * v;
            }
            if (best_i < 0 || err < best) {
                best = err;
                best_i = i;
            }
        }
        dropped[best_i] = true;
        for (size_t d = 0; d < dim; ++d) removed[d] += contribs[best_i][d];
        order.push_back(best_i);
    }
    for (int64_t i = 0; i < n; ++i)
        if (!dropped[i]) order.push_back(i);
    return order;
}

std::vector<int64_t> brute_force_drop(const std::vector<std::vector<double>>& contribs,
                                      int64_t n_drop) {
    const int64_t n = static_cast<int64_t>(contribs.size());
    if (n_drop < 0 || n_drop > n) throw Error("brute_force_drop: bad drop count");
    const size_t dim = contribs.empty() ? 0 : contribs[0].size();
    std::vector<int64_t> best_set;
    double best = -1;
    std::vector<int64_t> pick(static_cast<size_t>(n_drop));
    std::function<void(int64_t, int64_t)> rec = [&](int64_t start, int64_t chosen) {
        if (chosen == n_drop) {
            std::vector<double> sum(dim, 0.0);
            for (int64_t i = 0; i < n_drop; ++i)
                for (size_t d = 0; d < dim; ++d) sum[d] += contribs[pick[i]][d];
            double err = 0;
            for (double v : sum) err += v * v;
            if (best < 0 || err < best) {
                best = err;
                best_set.assign(pick.begin(), pick.end());
            }
            return;
        }
        for (int64_t i = start; i <= n - (n_drop - chosen); ++i) {
            pick[chosen] = i;
            rec(i + 1, chosen + 1);
        }
    };
    rec(0, 0);
    std::sort(best_set.begin(), best_set.end());
    return best_set;
}

namespace {

// contribution vectors of conv1 channels to conv2's pre-activation outputs,
// sampled at random spatial positions of the calibration patches
std::vector<std::vector<double>> conv1_contribs(const ModelGraph& m, const TensPtr<float>& a1,
                                                RngState& rng, int64_t positions) {
    const auto& w2 = m.layer("conv2").w;  // [f2, f1, k, k]
    const int64_t S = a1->shape[0], C1 = a1->shape[1], H = a1->shape[2], W = a1->shape[3];
    const int64_t C2 = w2->shape[0], k = w2->shape[2];
    const int64_t OH = H - k + 1, OW = W - k + 1;
    std::vector<std::vector<double>> contribs(
        static_cast<size_t>(C1),
        std::vector<double>(static_cast<size_t>(S * positions * C2), 0.0));
    for (int64_t s = 0; s < S; ++s)
        for (int64_t p = 0; p < positions; ++p) {
            const int64_t oy = static_cast<int64_t>(rng.below(static_cast<uint64_t>(OH)));
            const int64_t ox = static_cast<int64_t>(rng.below(static_cast<uint64_t>(OW)));
            for (int64_t c = 0; c < C1; ++c) {
                const float* plane = a1->data.data() + ((s * C1 + c) * H) * W;
                for (int64_t o = 0; o < C2; ++o) {
                    double acc = 0;
                    const float* wv = w2->data.data() + ((o * C1 + c) * k) * k;
                    for (int64_t ky = 0; ky < k; ++ky)
                        for (int64_t kx = 0; kx < k; ++kx)
                            acc += wv[ky * k + kx] * plane[(oy + ky) * W + ox + kx];
                    contribs[c][(s * positions + p) * C2 + o] = acc;
                }
            }
        }
    return contribs;
}

}  // namespace

FilterRanking rank_thinet(const ModelGraph& m, const PatchSet& calib, RngState& rng,
                          int64_t max_patches, int64_t positions_per_patch) {
    if (calib.size() < 1) throw Error("rank_thinet: no calibration data");
    ModelGraph probe = clone_model(m, true);
    probe.set_train(false);

    const int64_t S = std::min<int64_t>(max_patches, calib.size());
    std::vector<int64_t> idx(static_cast<size_t>(calib.size()));
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(static_cast<size_t>(S));

    NoGradGuard ng;
    auto x = calib.gather(idx);
    auto out = probe.forward(x, true);
    auto a1 = out.taps.at("relu1");
    auto pooled = out.taps.at("pool");
    auto hidden = out.taps.at("relu3");

    FilterRanking r;
    {
        auto contribs = conv1_contribs(probe, a1, rng, positions_per_patch);
        auto drop = greedy_drop_order(contribs);
        r.conv1.assign(drop.rbegin(), drop.rend());
    }
    {
        // conv2 channel c feeds fc1 through flatten columns [c*ss, (c+1)*ss)
        const auto& wfc1 = probe.layer("fc1").w;  // [hidden, f2*ss]
        const int64_t C2 = pooled->shape[1];
        const int64_t ss = pooled->shape[2] * pooled->shape[3];
        const int64_t Hd = wfc1->shape[0];
        std::vector<std::vector<double>> contribs(
            static_cast<size_t>(C2), std::vector<double>(static_cast<size_t>(S * Hd), 0.0));
        for (int64_t s = 0; s < S; ++s)
            for (int64_t c = 0; c < C2; ++c) {
                const float* f = pooled->data.data() + (s * C2 + c) * ss;
                for (int64_t h = 0; h < Hd; ++h) {
                    double acc = 0;
                    const float* wr = wfc1->data.data() + h * wfc1->shape[1] + c * ss;
                    for (int64_t j = 0; j < ss; ++j) acc += wr[j] * f[j];
                    contribs[c][s * Hd + h] = acc;
                }
            }
        auto drop = greedy_drop_order(contribs);
        r.conv2.assign(drop.rbegin(), drop.rend());
    }
    {
        const auto& wfc2 = probe.layer("fc2").w;  // [K, hidden]
        const int64_t Hd = hidden->shape[1];
        const int64_t K = wfc2->shape[0];
        std::vector<std::vector<double>> contribs(
            static_cast<size_t>(Hd), std::vector<double>(static_cast<size_t>(S * K), 0.0));
        for (int64_t s = 0; s < S; ++s)
            for (int64_t h = 0; h < Hd; ++h) {
                const float a = hidden->data[s * Hd + h];
                for (int64_t kk = 0; kk < K; ++kk)
                    contribs[h][s * K + kk] = a * wfc2->data[kk * Hd + h];
            }
        auto drop = greedy_drop_order(contribs);
        r.hidden.assign(drop.rbegin(), drop.rend());
    }
    return r;
}

FilterRanking sfp_train(ModelGraph& m, const PatchSet& data, const PruneTarget& target,
                        TrainConfig cfg, RngState& rng) {
    target.validate(m.spec);
    if (target.f1 >= m.spec.f1 && target.f2 >= m.spec.f2 && target.hidden >= m.spec.hidden)
        throw Error("sfp_train: target must remove at least one filter");

    auto l2_scores = [](const TensPtr<float>& w, int64_t n_filters) {
        const int64_t per = w->numel() / n_filters;
        std::vector<double> s(static_cast<size_t>(n_filters), 0.0);
        for (int64_t f = 0; f < n_filters; ++f)
            for (int64_t j = 0; j < per; ++j)
                s[f] += static_cast<double>(w->data[f * per + j]) * w->data[f * per + j];
        return s;
    };
    auto zero_low = [&](ModelGraph& model, const std::string& lname, int64_t keep) {
        auto& l = model.layer(lname);
        const int64_t n = l.w->shape[0];
        auto order = order_by_score_desc(l2_scores(l.w, n));
        const int64_t per = l.w->numel() / n;
        for (int64_t i = keep; i < n; ++i) {
            const int64_t f = order[i];
            std::fill(l.w->data.begin() + f * per, l.w->data.begin() + (f + 1) * per, 0.0f);
            if (l.b) l.b->data[f] = 0.0f;
        }
    };

    cfg.epoch_end = [&](ModelGraph& model, int64_t) {
        zero_low(model, "conv1", target.f1);
        zero_low(model, "conv2", target.f2);
        zero_low(model, "fc1", target.hidden);
    };
    train(m, data, cfg, rng);

    FilterRanking r;
    r.conv1 = order_by_score_desc(l2_scores(m.layer("conv1").w, m.spec.f1));
    r.conv2 = order_by_score_desc(l2_scores(m.layer("conv2").w, m.spec.f2));
    r.hidden = order_by_score_desc(l2_scores(m.layer("fc1").w, m.spec.hidden));
    return r;
}

// ---------------------------------------------------------------------------
// surgery
// ---------------------------------------------------------------------------

namespace {

std::vector<int64_t> keep_set(const std::vector<int64_t>& order, int64_t n_keep, int64_t n_total,
                              const char* what) {
    if (static_cast<int64_t>(order.size()) != n_total)
        throw Error(std::string("apply_prune: ranking length for ") + what +
                    " does not match the layer width");
    std::vector<bool> seen(static_cast<size_t>(n_total), false);
    for (int64_t i : order) {
        if (i < 0 || i >= n_total || seen[i])
            throw Error(std::string("apply_prune: ranking for ") + what + " is not a permutation");
        seen[i] = true;
    }
    std::vector<int64_t> keep(order.begin(), order.begin() + n_keep);
    std::sort(keep.begin(), keep.end());  // preserve original channel order
    return keep;
}

}  // namespace

ModelGraph apply_prune(const ModelGraph& m, const FilterRanking& ranking,
                       const PruneTarget& target) {
    if (m.spec.kind != ArchSpec::Kind::Cnn2d) throw Error("apply_prune: cnn2d models only");
    target.validate(m.spec);
    const auto keep1 = keep_set(ranking.conv1, target.f1, m.spec.f1, "conv1");
    const auto keep2 = keep_set(ranking.conv2, target.f2, m.spec.f2, "conv2");
    const auto keeph = keep_set(ranking.hidden, target.hidden, m.spec.hidden, "fc1");

    ArchSpec spec = m.spec;
    spec.f1 = target.f1;
    spec.f2 = target.f2;
    spec.hidden = target.hidden;
    RngState dummy(0);
    ModelGraph out = build_model(spec, dummy);
    out.training = m.training;
    out.bn_eps = m.bn_eps;
    out.bn_momentum = m.bn_momentum;

    const int64_t kk = m.spec.kernel * m.spec.kernel;
    const int64_t ss = m.spec.pooled_side() * m.spec.pooled_side();

    {  // conv1: keep output filters
        const auto& src = m.layer("conv1");
        auto& dst = out.layer("conv1");
        const int64_t cin = m.spec.in_channels;
        for (int64_t fi = 0; fi < target.f1; ++fi) {
            const int64_t f = keep1[fi];
            std::copy(src.w->data.begin() + f * cin * kk, src.w->data.begin() + (f + 1) * cin * kk,
                      dst.w->data.begin() + fi * cin * kk);
            dst.b->data[fi] = src.b->data[f];
        }
    }
    {  // bn1 entries follow conv1 filters
        const auto& src = m.layer("bn1");
        auto& dst = out.layer("bn1");
        for (int64_t fi = 0; fi < target.f1; ++fi) {
            const int64_t f = keep1[fi];
            dst.gamma->data[fi] = src.gamma->data[f];
            dst.beta->data[fi] = src.beta->data[f];
            dst.run_mean[fi] = src.run_mean[f];
            dst.run_var[fi] = src.run_var[f];
        }
    }
    {  // conv2: keep output filters and surviving input kernels
        const auto& src = m.layer("conv2");
        auto& dst = out.layer("conv2");
        for (int64_t fi = 0; fi < target.f2; ++fi) {
            const int64_t f = keep2[fi];
            for (int64_t ci = 0; ci < target.f1; ++ci) {
                const int64_t c = keep1[ci];
                std::copy(src.w->data.begin() + (f * m.spec.f1 + c) * kk,
                          src.w->data.begin() + (f * m.spec.f1 + c + 1) * kk,
                          dst.w->data.begin() + (fi * target.f1 + ci) * kk);
            }
            dst.b->data[fi] = src.b->data[f];
        }
    }
    {
        const auto& src = m.layer("bn2");
        auto& dst = out.layer("bn2");
        for (int64_t fi = 0; fi < target.f2; ++fi) {
            const int64_t f = keep2[fi];
            dst.gamma->data[fi] = src.gamma->data[f];
            dst.beta->data[fi] = src.beta->data[f];
            dst.run_mean[fi] = src.run_mean[f];
            dst.run_var[fi] = src.run_var[f];
        }
    }
    {  // fc1: keep hidden rows; input columns follow conv2 channels through flatten
        const auto& src = m.layer("fc1");
        auto& dst = out.layer("fc1");
        const int64_t src_cols = src.w->shape[1];
        for (int64_t hi = 0; hi < target.hidden; ++hi) {
            const int64_t h = keeph[hi];
            for (int64_t ci = 0; ci < target.f2; ++ci) {
                const int64_t c = keep2[ci];
                std::copy(src.w->data.begin() + h * src_cols + c * ss,
                          src.w->data.begin() + h * src_cols + (c + 1) * ss,
                          dst.w->data.begin() + hi * dst.w->shape[1] + ci * ss);
            }
            dst.b->data[hi] = src.b->data[h];
        }
    }
    {  // fc2: logits layer keeps its outputs; input columns follow fc1 rows
        const auto& src = m.layer("fc2");
        auto& dst = out.layer("fc2");
        for (int64_t o = 0; o < m.spec.classes; ++o) {
            for (int64_t hi = 0; hi < target.hidden; ++hi)
                dst.w->data[o * target.hidden + hi] = src.w->data[o * m.spec.hidden + keeph[hi]];
            dst.b->data[o] = src.b->data[o];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// fine-tuning schedules
// ---------------------------------------------------------------------------

std::vector<PruneTarget> multipass_schedule(const ArchSpec& spec, const PruneTarget& target,
                                            int64_t passes) {
    std::vector<PruneTarget> out;
    auto interp = [&](int64_t from, int64_t to, int64_t pass) {
        const double r =
            std::pow(static_cast<double>(to) / from, static_cast<double>(pass) / passes);
        return std::max<int64_t>(to, round_half_up(from * r));
    };
    for (int64_t p = 1; p <= passes; ++p) {
        PruneTarget t;
        t.label = 0;
        t.f1 = interp(spec.f1, target.f1, p);
        t.f2 = interp(spec.f2, target.f2, p);
        t.hidden = interp(spec.hidden, target.hidden, p);
        out.push_back(t);
    }
    out.back() = target;
    return out;
}

ModelGraph prune_and_finetune(const ModelGraph& trained, Method method, Strategy strategy,
                              const PruneTarget& target, const PatchSet& train_data,
                              const FinetuneConfig& cfg, RngState& rng, PruneReport* report,
                              const PatchSet* eval_data) {
    target.validate(trained.spec);
    ModelGraph work = clone_model(trained, true);
    const int64_t params_before = count_params(work).conv_fc_total;
    auto eval_top1 = [&](ModelGraph& m) {
        if (!eval_data) return -1.0;
        auto r = evaluate(m, *eval_data);
        return r.top1;
    };
    double top1_before = -1, top1_surgery = -1;
    if (eval_data) top1_before = eval_top1(work);
    bool first_surgery_done = false;

    if (method == Method::Slimming) {
        // sparsity phase on the full-width network
        TrainConfig tc = cfg.train;
        tc.epochs = cfg.slimming_epochs;
        tc.early_stop_patience = tc.epochs + 1;
        train_slimming(work, train_data, cfg.slimming_lambda, tc, rng);
    }

    auto rank_now = [&](const ModelGraph& m, const PruneTarget& stage) -> FilterRanking {
        switch (method) {
            case Method::L1: return rank_l1(m);
            case Method::Slimming: return rank_slimming(m);
            case Method::ThiNet: return rank_thinet(m, train_data, rng);
            case Method::Sfp: {
                ModelGraph tmp = clone_model(m, true);
                TrainConfig tc = cfg.train;
                tc.epochs = cfg.sfp_epochs;
                tc.early_stop_patience = tc.epochs + 1;
                return sfp_train(tmp, train_data, stage, tc, rng);
            }
        }
        throw Error("prune: bad method");
    };

    auto retrain = [&](ModelGraph& m, int64_t epochs) {
        TrainConfig tc = cfg.train;
        tc.epochs = epochs;
        tc.early_stop_patience = epochs + 1;
        train(m, train_data, tc, rng);
    };

    ModelGraph out = std::move(work);
    auto after_surgery = [&](ModelGraph& m) {
        if (eval_data && !first_surgery_done) {
            top1_surgery = eval_top1(m);
            first_surgery_done = true;
        }
    };
    switch (strategy) {
        case Strategy::I: {
            out = apply_prune(out, rank_now(out, target), target);
            after_surgery(out);
            retrain(out, cfg.epochs_one_shot);
            break;
        }
        case Strategy::II: {
            // conv1, then conv2, then fc1; re-rank before each surgery
            PruneTarget stage = PruneTarget::keep_all(out.spec);
            stage.f1 = target.f1;
            out = apply_prune(out, rank_now(out, stage), stage);
            after_surgery(out);
            retrain(out, cfg.epochs_per_layer);
            stage = PruneTarget::keep_all(out.spec);
            stage.f2 = target.f2;
            out = apply_prune(out, rank_now(out, stage), stage);
            retrain(out, cfg.epochs_per_layer);
            stage = PruneTarget::keep_all(out.spec);
            stage.hidden = target.hidden;
            stage.label = target.label;
            out = apply_prune(out, rank_now(out, stage), stage);
            retrain(out, cfg.epochs_per_layer);
            break;
        }
        case Strategy::III: {
            for (const auto& t : multipass_schedule(out.spec, target, cfg.passes)) {
                PruneTarget stage = t;
                stage.f1 = std::min(stage.f1, out.spec.f1);
                stage.f2 = std::min(stage.f2, out.spec.f2);
                stage.hidden = std::min(stage.hidden, out.spec.hidden);
                out = apply_prune(out, rank_now(out, stage), stage);
                after_surgery(out);
                retrain(out, cfg.epochs_per_pass);
            }
            break;
        }
    }

    if (report) {
        report->method = method_name(method);
        report->ratio_label = target.label;
        report->params_before = params_before;
        report->params_after = count_params(out).conv_fc_total;
        report->exact_fraction_removed =
            1.0 - static_cast<double>(report->params_after) / params_before;
        report->fc_criterion_note =
            method == Method::L1 ? "fc neurons ranked by L1 of incoming weights"
                                 : "fc neurons ranked by the documented fallback rule";
        report->top1_before = top1_before;
        report->top1_after_surgery = top1_surgery;
        if (eval_data) report->top1_after_finetune = eval_top1(out);
    }
    return out;
}

}  // namespace hsib::prune
