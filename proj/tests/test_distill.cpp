#include <cmath>

#include "doctest.h"
#include "fd_check.hpp"
#include "hsib/distill.hpp"
#include "toy_data.hpp"

using namespace hsib;
using namespace hsib::kd;
using hsib::testing::fd_check;
using hsib::testing::randn;
using hsib::testing::tiny_cnn;
using hsib::testing::toy_patchset_cnn;

namespace {

// tiny f64 model for whole-pipeline gradient checks
ModelGraphT<double> tiny_cnn64(uint64_t seed, int64_t classes = 3) {
    RngState rng(seed);
    ArchSpec spec;
    spec.kind = ArchSpec::Kind::Cnn2d;
    spec.in_channels = 2;
    spec.f1 = 3;
    spec.f2 = 4;
    spec.kernel = 2;
    spec.hidden = 5;
    spec.classes = classes;
    spec.patch = 7;
    auto m = build_model_t<double>(spec, rng);
    m.training = true;
    m.update_running_stats = false;
    return m;
}

TensPtr<double> rand_input64(const ModelGraphT<double>& m, int64_t n, RngState& rng) {
    auto x = tensor<double>({n, m.spec.in_channels, m.spec.patch, m.spec.patch});
    for (auto& v : x->data) v = rng.normal();
    return x;
}

}  // namespace

TEST_CASE("soft target loss values and zero case") {
    // hand-evaluated kl for z_t=[0,ln3], z_s=[0,0] at T=1
    auto zt = tensor<float>({1, 2}, {0.0f, std::log(3.0f)});
    auto zs = tensor<float>({1, 2}, {0.0f, 0.0f});
    auto kl = kl_div(softmax_t(zt, 1.0f), softmax_t(zs, 1.0f));
    CHECK(kl->item() == doctest::Approx(0.25 * std::log(0.5) + 0.75 * std::log(1.5)).epsilon(1e-4));

    // identical logits: the distillation term is exactly zero
    auto z = tensor<float>({2, 4}, {1, 2, 3, 4, -1, 0, 1, 2});
    auto z2 = tensor<float>({2, 4}, z->data);
    auto term = kl_div(softmax_t(z, 4.0f), softmax_t(z2, 4.0f));
    CHECK(term->item() == 0.0f);  // exact

    auto loss = soft_target_loss(z, z2, 4.0f, 0.9f, {0, 1});
    auto ce = cross_entropy(tensor<float>({2, 4}, z->data), std::vector<int64_t>{0, 1});
    CHECK(loss->item() == doctest::Approx(0.9 * ce->item()));
}

TEST_CASE("soft target gradient scales as O(1) in T after the T^2 factor") {
    std::vector<double> mags;
    for (double T : {1.0, 2.0, 4.0, 8.0}) {
        auto zs = tensor<double>({1, 4}, {0.3, -0.4, 0.9, 0.1}, true);
        auto zt = tensor<double>({1, 4}, {1.0, 0.2, -0.3, 0.5});
        auto kl = scale(kl_div(softmax_t(zt, T), softmax_t(zs, T)), T * T);
        backward(kl);
        double norm = 0;
        for (double g : zs->grad) norm += g * g;
        mags.push_back(std::sqrt(norm));
    }
    for (double m : mags) {
        CHECK(m > 0.2 * mags[0]);
        CHECK(m < 5.0 * mags[0]);
    }
}

TEST_CASE("attention transfer loss") {
    // identical activations: exactly zero
    RngState rng(3);
    auto a = randn({2, 3, 4, 4}, rng);
    auto b = tensor<double>(a->shape, a->data);
    CHECK(attention_transfer_loss(a, b)->item() == 0.0);

    // positive scaling of the maps cancels out
    auto c = tensor<double>(a->shape, a->data);
    for (auto& v : c->data) v *= 2.5;
    CHECK(attention_transfer_loss(a, c)->item() == doctest::Approx(0.0).epsilon(1e-9));

    // 2x2 toy maps against direct arithmetic
    auto s = tensor<double>({1, 1, 2, 2}, {1.0, 0.0, 0.0, 0.0});
    auto t = tensor<double>({1, 1, 2, 2}, {0.0, 1.0, 0.0, 0.0});
    // Q_s = (1,0,0,0), Q_t = (0,1,0,0); normalized differ by sqrt(2)
    CHECK(attention_transfer_loss(s, t)->item() == doctest::Approx(std::sqrt(2.0)));

    // zero map skips the tap
    auto zero = tensor<double>({1, 1, 2, 2}, {0.0, 0.0, 0.0, 0.0});
    bool skipped = false;
    auto l = attention_transfer_loss(zero, t, &skipped);
    CHECK(skipped);
    CHECK(l->item() == 0.0);

    // spatial mismatch is an error
    auto wide = tensor<double>({1, 1, 2, 3}, std::vector<double>(6, 1.0));
    CHECK_THROWS_AS(attention_transfer_loss(wide, t), Error);
}

TEST_CASE("correlation congruence closed form") {
    // teacher pair collapsed, student pair separated by d after normalization
    auto ft = tensor<double>({2, 2}, {1.0, 0.0, 1.0, 0.0});
    auto fs = tensor<double>({2, 2}, {1.0, 0.0, 0.0, 1.0});
    const double delta = 1.0;
    // normalized rows: distance^2 = 2 for the student pair
    const double off = std::exp(-2.0 / (2 * delta * delta));
    const double want = (1.0 / 4.0) * 2.0 * (1.0 - off) * (1.0 - off);
    CHECK(correlation_congruence_loss(fs, ft, delta)->item() == doctest::Approx(want));

    // equal embeddings: exactly zero
    auto fs2 = tensor<double>({2, 2}, ft->data);
    CHECK(correlation_congruence_loss(fs2, ft, delta)->item() == 0.0);

    // kernel diagonal is one
    RngState rng(5);
    auto f = randn({3, 4}, rng, 1.0, false);
    auto kmat = pairwise_rbf(l2_normalize_rows(f), 1.0);
    for (int i = 0; i < 3; ++i) CHECK(kmat->data[i * 3 + i] == doctest::Approx(1.0));

    CHECK_THROWS_AS(correlation_congruence_loss(randn({1, 4}, rng), randn({1, 4}, rng), 1.0),
                    Error);
}

TEST_CASE("camkd weights") {
    auto w = camkd_weights({0.1, 1.0});
    CHECK(w[0] == doctest::Approx(0.7109).epsilon(1e-3));
    CHECK(w[1] == doctest::Approx(0.2891).epsilon(1e-3));

    // the teacher closest to the truth always carries the largest weight
    RngState rng(7);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> ces = {rng.uniform() * 3, rng.uniform() * 3, rng.uniform() * 3};
        auto ws = camkd_weights(ces);
        size_t best_ce = 0, best_w = 0;
        for (size_t i = 1; i < 3; ++i) {
            if (ces[i] < ces[best_ce]) best_ce = i;
            if (ws[i] > ws[best_w]) best_w = i;
        }
        CHECK(best_ce == best_w);
        double tot = ws[0] + ws[1] + ws[2];
        CHECK(tot == doctest::Approx(1.0));
    }

    // single teacher degenerates to weight one
    CHECK(camkd_weights({0.42})[0] == doctest::Approx(1.0));
}

TEST_CASE("virtual teacher distribution") {
    auto pd = tfkd_virtual_teacher<float>({2, 0}, 16, 0.9f);
    for (int n = 0; n < 2; ++n) {
        float sum = 0;
        for (int k = 0; k < 16; ++k) sum += pd->data[n * 16 + k];
        CHECK(sum == doctest::Approx(1.0));
    }
    CHECK(pd->data[2] == doctest::Approx(0.9));
    CHECK(pd->data[3] == doctest::Approx(0.1 / 15.0));

    // a = 1 gives exactly one-hot
    auto hot = tfkd_virtual_teacher<float>({1}, 4, 1.0f);
    CHECK(hot->data[0] == 0.0f);
    CHECK(hot->data[1] == 1.0f);

    CHECK_THROWS_AS(tfkd_virtual_teacher<float>({0}, 4, 0.2f), Error);

    // saturated student makes the distillation term exactly zero at a = 1
    auto z = tensor<float>({1, 4}, {-3000.0f, 3000.0f, -3000.0f, -3000.0f});
    auto kd = kl_div(tfkd_virtual_teacher<float>({1}, 4, 1.0f), softmax_t(z, 20.0f));
    CHECK(kd->item() == 0.0f);
}

TEST_CASE("pskd targets") {
    auto p_prev = tensor<float>({1, 2}, {0.6f, 0.4f});
    auto t = pskd_target<float>({0}, p_prev, 0.5f);
    CHECK(t->data[0] == doctest::Approx(0.8));
    CHECK(t->data[1] == doctest::Approx(0.2));

    // alpha 0 reduces soft cross-entropy to plain cross-entropy exactly
    auto z = tensor<float>({1, 2}, {0.4f, -0.2f}, true);
    auto hard = cross_entropy(tensor<float>({1, 2}, z->data), std::vector<int64_t>{0});
    auto t0 = pskd_target<float>({0}, p_prev, 0.0f);
    auto soft = soft_cross_entropy(tensor<float>({1, 2}, z->data), t0);
    CHECK(soft->item() == hard->item());

    // targets stay distributions for any alpha
    for (float a : {0.0f, 0.3f, 1.0f}) {
        auto tt = pskd_target<float>({1}, p_prev, a);
        CHECK(tt->data[0] + tt->data[1] == doctest::Approx(1.0));
    }
    CHECK_THROWS_AS(pskd_target<float>({0}, p_prev, 1.5f), Error);
}

TEST_CASE("every distillation loss passes finite-difference checks") {
    RngState rng(101);
    // soft targets through the full student pipeline
    {
        auto m = tiny_cnn64(1);
        auto x = rand_input64(m, 2, rng);
        auto zt = randn({2, 3}, rng, 1.0, false);
        std::vector<int64_t> y = {0, 2};
        auto rep = fd_check(m.params(), [&] {
            return soft_target_loss(m.forward(x).logits, zt, 3.0, 0.7, y);
        }, 1e-5, 5);
        INFO(rep.worst);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // fitnets hint stage: half-mse through a 1x1 conv regressor
    {
        auto m = tiny_cnn64(2);
        auto x = rand_input64(m, 2, rng);
        auto ft = randn({2, 6, 2, 2}, rng, 1.0, false);
        auto rw = randn({6, 4, 1, 1}, rng, 0.5);
        auto rb = randn({6}, rng, 0.1);
        auto leaves = m.params();
        leaves.push_back(rw);
        leaves.push_back(rb);
        auto rep = fd_check(leaves, [&] {
            auto fs = m.forward(x, true).taps.at("pool");
            return half_mse_rows(flatten(conv2d(fs, rw, rb)), flatten(ft));
        }, 1e-5, 5);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // attention transfer on both conv taps
    {
        auto m = tiny_cnn64(3);
        auto x = rand_input64(m, 2, rng);
        auto at1 = randn({2, 3, 6, 6}, rng, 1.0, false);
        auto at2 = randn({2, 4, 5, 5}, rng, 1.0, false);
        auto rep = fd_check(m.params(), [&] {
            auto out = m.forward(x, true);
            return add(attention_transfer_loss(out.taps.at("relu1"), at1),
                       attention_transfer_loss(out.taps.at("relu2"), at2));
        }, 1e-5, 5);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // correlation congruence on the hidden embedding
    {
        auto m = tiny_cnn64(4);
        auto x = rand_input64(m, 3, rng);
        auto ft = randn({3, 5}, rng, 1.0, false);
        auto rep = fd_check(m.params(), [&] {
            return correlation_congruence_loss(m.forward(x, true).taps.at("relu3"), ft, 1.0);
        }, 1e-5, 3);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // simkd alignment through a projector
    {
        auto m = tiny_cnn64(5);
        auto x = rand_input64(m, 2, rng);
        auto ft = randn({2, 7}, rng, 1.0, false);
        auto pw = randn({7, 5}, rng, 0.5);
        auto pb = randn({7}, rng, 0.1);
        auto leaves = m.params();
        leaves.push_back(pw);
        leaves.push_back(pb);
        auto rep = fd_check(leaves, [&] {
            return half_mse_rows(linear(m.forward(x, true).taps.at("relu3"), pw, pb), ft);
        }, 1e-5, 5);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // camkd: weighted multi-teacher kd + feature terms
    {
        auto m = tiny_cnn64(6);
        auto x = rand_input64(m, 2, rng);
        std::vector<int64_t> y = {1, 0};
        auto zt1 = randn({2, 3}, rng, 1.0, false);
        auto zt2 = randn({2, 3}, rng, 1.0, false);
        auto ft1 = randn({2, 7}, rng, 1.0, false);
        auto ft2 = randn({2, 7}, rng, 1.0, false);
        auto w = tensor<double>({2, 2}, {0.6, 0.4, 0.3, 0.7});
        auto pw = randn({7, 5}, rng, 0.5);
        auto pb = randn({7}, rng, 0.1);
        auto leaves = m.params();
        leaves.push_back(pw);
        leaves.push_back(pb);
        auto rep = fd_check(leaves, [&] {
            auto out = m.forward(x, true);
            auto ps = softmax_t(out.logits, 2.0);
            auto fs = linear(out.taps.at("relu3"), pw, pb);
            auto loss = cross_entropy(out.logits, y);
            int64_t k = 0;
            for (const auto& [zt, ft] : {std::pair{zt1, ft1}, std::pair{zt2, ft2}}) {
                auto klr = kl_div_rowwise(softmax_t(zt, 2.0), ps);
                loss = add(loss, scale(mean_all(mul(klr, col(w, k))), 4.0));
                auto d = sub(fs, ft);
                loss = add(loss, mean_all(mul(rowwise_dot(d, d), col(w, k))));
                ++k;
            }
            return loss;
        }, 1e-5, 5);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // dml: mutual kl against frozen partner predictions (the stop-gradient
    // side is a constant of the per-step objective)
    {
        auto a = tiny_cnn64(7);
        auto b = tiny_cnn64(8);
        auto x = rand_input64(a, 2, rng);
        std::vector<int64_t> y = {0, 1};
        TensPtr<double> pa_frozen, pb_frozen;
        {
            NoGradGuard ng;
            pa_frozen = softmax_t(a.forward(x).logits, 1.0);
            pb_frozen = softmax_t(b.forward(x).logits, 1.0);
        }
        auto leaves = a.params();
        auto bp = b.params();
        leaves.insert(leaves.end(), bp.begin(), bp.end());
        auto rep = fd_check(leaves, [&] {
            auto za = a.forward(x).logits;
            auto zb = b.forward(x).logits;
            auto la = add(cross_entropy(za, y), kl_div(pb_frozen, softmax_t(za, 1.0)));
            auto lb = add(cross_entropy(zb, y), kl_div(pa_frozen, softmax_t(zb, 1.0)));
            return add(la, lb);
        }, 1e-5, 7);
        INFO(rep.worst);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // one: gated ensemble with branch kl
    {
        RngState mr(9);
        ArchSpec spec;
        spec.kind = ArchSpec::Kind::Cnn2d;
        spec.in_channels = 2;
        spec.f1 = 3;
        spec.f2 = 4;
        spec.kernel = 2;
        spec.hidden = 5;
        spec.classes = 3;
        spec.patch = 7;
        auto trunk = build_model_t<double>(spec, mr);
        trunk.update_running_stats = false;
        // manual heads and gate
        auto h1w = randn({5, spec.flatten_size()}, rng, 0.2);
        auto h1b = randn({5}, rng, 0.1);
        auto z1w = randn({3, 5}, rng, 0.4);
        auto z1b = randn({3}, rng, 0.1);
        auto h2w = randn({5, spec.flatten_size()}, rng, 0.2);
        auto h2b = randn({5}, rng, 0.1);
        auto z2w = randn({3, 5}, rng, 0.4);
        auto z2b = randn({3}, rng, 0.1);
        auto gw = randn({2, spec.flatten_size()}, rng, 0.2);
        auto gb = randn({2}, rng, 0.1);
        auto x = rand_input64(trunk, 2, rng);
        std::vector<int64_t> y = {0, 2};
        std::vector<TensPtr<double>> leaves = {h1w, h1b, z1w, z1b, h2w, h2b,
                                               z2w, z2b, gw,  gb};
        auto tp = trunk.params();
        leaves.insert(leaves.end(), tp.begin(), tp.end());
        // trunk ends at the flatten for this composition
        auto trunk_flat = [&]() {
            TensPtr<double> h = x;
            for (auto& l : trunk.layers) {
                if (l.name == "fc1") break;
                switch (l.kind) {
                    case LayerT<double>::Kind::Conv2d: h = conv2d(h, l.w, l.b); break;
                    case LayerT<double>::Kind::BatchNorm2d:
                        h = batchnorm2d(h, l.gamma, l.beta, &l.run_mean, &l.run_var,
                                        trunk.bn_eps, trunk.bn_momentum, BnMode::TrainNoStats);
                        break;
                    case LayerT<double>::Kind::ReLU: h = relu(h); break;
                    case LayerT<double>::Kind::MaxPool2d: h = maxpool2d(h, l.window); break;
                    case LayerT<double>::Kind::Flatten: h = flatten(h); break;
                    default: break;
                }
            }
            return h;
        };
        TensPtr<double> pe_frozen;
        {
            NoGradGuard ng;
            auto flat = trunk_flat();
            auto za = linear(relu(linear(flat, h1w, h1b)), z1w, z1b);
            auto zb = linear(relu(linear(flat, h2w, h2b)), z2w, z2b);
            auto gate = softmax_t(linear(flat, gw, gb), 1.0);
            auto ze = add(scale_rows(za, col(gate, 0)), scale_rows(zb, col(gate, 1)));
            pe_frozen = softmax_t(ze, 2.0);
        }
        auto rep = fd_check(leaves, [&] {
            auto flat = trunk_flat();
            auto za = linear(relu(linear(flat, h1w, h1b)), z1w, z1b);
            auto zb = linear(relu(linear(flat, h2w, h2b)), z2w, z2b);
            auto gate = softmax_t(linear(flat, gw, gb), 1.0);
            auto ze = add(scale_rows(za, col(gate, 0)), scale_rows(zb, col(gate, 1)));
            auto pe = pe_frozen;
            auto loss = cross_entropy(ze, y);
            loss = add(loss, add(cross_entropy(za, y), cross_entropy(zb, y)));
            loss = add(loss, scale(add(kl_div(pe, softmax_t(za, 2.0)),
                                       kl_div(pe, softmax_t(zb, 2.0))), 4.0));
            return loss;
        }, 1e-5, 11);
        INFO(rep.worst);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // clilr: trunk gradient equals the sum of head gradients (checked by fd)
    {
        auto m = tiny_cnn64(10);
        auto x = rand_input64(m, 2, rng);
        std::vector<int64_t> y = {1, 2};
        auto h2w = randn({5, m.spec.flatten_size()}, rng, 0.2);
        auto h2b = randn({5}, rng, 0.1);
        auto z2w = randn({3, 5}, rng, 0.4);
        auto z2b = randn({3}, rng, 0.1);
        auto leaves = m.params();
        leaves.push_back(h2w);
        leaves.push_back(h2b);
        leaves.push_back(z2w);
        leaves.push_back(z2b);
        TensPtr<double> pa_frozen, pb_frozen;
        {
            NoGradGuard ng;
            auto out = m.forward(x, true);
            auto flat = out.taps.at("flatten");
            auto zb = linear(relu(linear(flat, h2w, h2b)), z2w, z2b);
            pa_frozen = softmax_t(out.logits, 2.0);
            pb_frozen = softmax_t(zb, 2.0);
        }
        auto rep = fd_check(leaves, [&] {
            auto out = m.forward(x, true);
            auto flat = out.taps.at("flatten");
            auto zb = linear(relu(linear(flat, h2w, h2b)), z2w, z2b);
            auto la = add(cross_entropy(out.logits, y),
                          scale(kl_div(pb_frozen, softmax_t(out.logits, 2.0)), 4.0));
            auto lb = add(cross_entropy(zb, y), scale(kl_div(pa_frozen, softmax_t(zb, 2.0)), 4.0));
            return add(la, lb);
        }, 1e-5, 7);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // okddip: attention-aggregated targets (live through the attention)
    {
        auto f1 = randn({2, 5}, rng);
        auto f2 = randn({2, 5}, rng);
        auto z1 = randn({2, 3}, rng);
        auto z2 = randn({2, 3}, rng);
        auto wq = randn({4, 5}, rng, 0.4);
        auto wk = randn({4, 5}, rng, 0.4);
        std::vector<int64_t> y = {0, 1};
        TensPtr<double> p1_frozen, p2_frozen;
        {
            NoGradGuard ng;
            p1_frozen = softmax_t(z1, 2.0);
            p2_frozen = softmax_t(z2, 2.0);
        }
        auto rep = fd_check({f1, f2, z1, z2, wq, wk}, [&] {
            auto q1 = linear(f1, wq, TensPtr<double>{});
            auto k1 = linear(f1, wk, TensPtr<double>{});
            auto q2 = linear(f2, wq, TensPtr<double>{});
            auto k2 = linear(f2, wk, TensPtr<double>{});
            auto p1d = p1_frozen;
            auto p2d = p2_frozen;
            TensPtr<double> loss;
            const double inv = 1.0 / 2.0;
            auto qs = std::vector{q1, q2};
            auto ks = std::vector{k1, k2};
            auto zs = std::vector{z1, z2};
            auto pds = std::vector{p1d, p2d};
            for (int i = 0; i < 2; ++i) {
                std::vector<TensPtr<double>> sc;
                for (int j = 0; j < 2; ++j) sc.push_back(scale(rowwise_dot(qs[i], ks[j]), inv));
                auto attn = softmax_t(stack_cols(sc), 1.0);
                auto target = add(scale_rows(pds[0], col(attn, 0)),
                                  scale_rows(pds[1], col(attn, 1)));
                auto li = add(cross_entropy(zs[i], y),
                              scale(kl_div(target, softmax_t(zs[i], 2.0)), 4.0));
                loss = loss ? add(loss, li) : li;
            }
            return loss;
        }, 1e-5, 3);
        INFO(rep.worst);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // tf-kd
    {
        auto m = tiny_cnn64(11);
        auto x = rand_input64(m, 2, rng);
        std::vector<int64_t> y = {0, 1};
        auto rep = fd_check(m.params(), [&] {
            return tfkd_loss(m.forward(x).logits, y, 0.8, 0.3, 5.0);
        }, 1e-5, 5);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // cs-kd: partner prediction detached
    {
        auto m = tiny_cnn64(12);
        auto x = rand_input64(m, 2, rng);
        auto zp = randn({2, 3}, rng, 1.0, false);
        std::vector<int64_t> y = {2, 0};
        auto rep = fd_check(m.params(), [&] {
            auto z = m.forward(x).logits;
            return add(cross_entropy(z, y),
                       scale(kl_div(softmax_t(zp, 4.0), softmax_t(z, 4.0)), 16.0));
        }, 1e-5, 5);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // ps-kd: soft cross entropy against a fixed mixed target
    {
        auto m = tiny_cnn64(13);
        auto x = rand_input64(m, 2, rng);
        auto p_prev = tensor<double>({2, 3}, {0.5, 0.3, 0.2, 0.1, 0.6, 0.3});
        auto rep = fd_check(m.params(), [&] {
            auto target = pskd_target<double>({0, 2}, p_prev, 0.4);
            return soft_cross_entropy(m.forward(x).logits, target);
        }, 1e-5, 5);
        CHECK(rep.max_rel_err < 1e-3);
    }
    // ddgsd: flipped views, symmetric kl and pooled-feature consistency
    {
        auto m = tiny_cnn64(14);
        auto x = rand_input64(m, 2, rng);
        std::vector<int64_t> y = {1, 0};
        auto rep = fd_check(m.params(), [&] {
            auto o1 = m.forward(flip_spatial(x, true), true);
            auto o2 = m.forward(flip_spatial(x, false), true);
            auto p1 = softmax_t(o1.logits, 1.0);
            auto p2 = softmax_t(o2.logits, 1.0);
            auto loss = add(cross_entropy(o1.logits, y), cross_entropy(o2.logits, y));
            loss = add(loss, add(kl_div(p1, p2), kl_div(p2, p1)));
            auto gd = sub(global_avg_pool(o1.taps.at("relu2")),
                          global_avg_pool(o2.taps.at("relu2")));
            return add(loss, mean_all(rowwise_dot(gd, gd)));
        }, 1e-5, 5);
        CHECK(rep.max_rel_err < 1e-3);
    }
}

TEST_CASE("no gradient reaches a frozen teacher") {
    auto data = toy_patchset_cnn(90);
    auto teacher = tiny_cnn(90);
    auto student = tiny_cnn(91);
    DistillConfig dc;
    KdTrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 32;
    RngState rng(1);
    soft_train(student, teacher, data, dc, tc, rng);
    for (const auto& p : teacher.params()) CHECK_FALSE(p->has_grad());
}

TEST_CASE("offline trainers raise the student above its starting point") {
    auto data = toy_patchset_cnn(95);
    // teacher: train a full-width toy model properly
    RngState rt(5);
    auto teacher = tiny_cnn(95);
    TrainConfig tcfg;
    tcfg.epochs = 14;
    tcfg.batch_size = 32;
    tcfg.early_stop_patience = 100;
    train(teacher, data, tcfg, rt);
    teacher.set_train(false);

    ArchSpec sspec = teacher.spec;
    sspec.f1 = 4;
    sspec.f2 = 5;
    sspec.hidden = 6;

    DistillConfig dc;
    KdTrainConfig kc;
    kc.epochs = 10;
    kc.batch_size = 32;

    // soft targets
    {
        RngState rs(7);
        auto student = build_model(sspec, rs);
        auto before = evaluate(student, data).top1;
        RngState rr(8);
        soft_train(student, teacher, data, dc, kc, rr);
        auto after = evaluate(student, data).top1;
        CHECK(after > before);
    }
    // fitnets
    {
        RngState rs(9);
        auto student = build_model(sspec, rs);
        RngState rr(10);
        KdTrainConfig kcf = kc;
        kcf.stage1_epochs = 3;
        fitnets_train(student, teacher, data, dc, kcf, rr);
        CHECK(evaluate(student, data).top1 > 50.0);
    }
    // simkd: exactly aligned features reproduce the teacher bit for bit
    {
        SimkdModel sm;
        sm.encoder = clone_model(teacher, true);
        sm.encoder.set_train(false);
        // identity projector
        sm.proj_w = tensor<float>({teacher.spec.hidden, teacher.spec.hidden}, 0.0f);
        for (int64_t i = 0; i < teacher.spec.hidden; ++i)
            sm.proj_w->data[i * teacher.spec.hidden + i] = 1.0f;
        sm.proj_b = tensor<float>({teacher.spec.hidden}, 0.0f);
        sm.cls_w = tensor<float>(teacher.layer("fc2").w->shape, teacher.layer("fc2").w->data);
        sm.cls_b = tensor<float>(teacher.layer("fc2").b->shape, teacher.layer("fc2").b->data);
        RngState rx(11);
        auto x = tensor<float>({3, 6, 11, 11});
        for (auto& v : x->data) v = static_cast<float>(rx.normal());
        NoGradGuard ng;
        auto zt = teacher.forward_logits(x);
        auto zs = sm.forward_logits(x);
        CHECK(zs->data == zt->data);
    }
}

TEST_CASE("simkd alignment loss decreases over training") {
    auto data = toy_patchset_cnn(97);
    RngState rt(5);
    auto teacher = tiny_cnn(97);
    TrainConfig tcfg;
    tcfg.epochs = 8;
    tcfg.batch_size = 32;
    tcfg.early_stop_patience = 100;
    train(teacher, data, tcfg, rt);
    teacher.set_train(false);

    ArchSpec sspec = teacher.spec;
    sspec.f1 = 4;
    sspec.f2 = 5;
    sspec.hidden = 6;
    RngState rs(13);
    auto init = build_model(sspec, rs);

    auto alignment = [&](SimkdModel& sm) {
        NoGradGuard ng;
        std::vector<int64_t> idx;
        for (int64_t i = 0; i < 64; ++i) idx.push_back(i);
        auto x = data.gather(idx);
        ModelGraph t = clone_model(teacher, true);
        t.set_train(false);
        auto ft = t.forward(x, true).taps.at("relu3");
        sm.encoder.set_train(false);
        auto fs = sm.encoder.forward(x, true).taps.at("relu3");
        return half_mse_rows(linear(fs, sm.proj_w, sm.proj_b), ft)->item();
    };

    DistillConfig dc;
    KdTrainConfig k0;
    k0.epochs = 0;
    RngState r0(14);
    auto sm0 = simkd_train(init, teacher, data, dc, k0, r0);
    const double before = alignment(sm0);

    KdTrainConfig k5;
    k5.epochs = 5;
    k5.batch_size = 32;
    RngState r5(14);
    auto sm5 = simkd_train(init, teacher, data, dc, k5, r5);
    const double after = alignment(sm5);
    CHECK(after < before);
}

TEST_CASE("online and self trainers run and produce working deployments") {
    auto data = toy_patchset_cnn(99);
    ArchSpec sspec;
    sspec.kind = ArchSpec::Kind::Cnn2d;
    sspec.in_channels = 6;
    sspec.f1 = 4;
    sspec.f2 = 5;
    sspec.kernel = 3;
    sspec.hidden = 6;
    sspec.classes = 4;
    sspec.patch = 11;

    DistillConfig dc;
    dc.peers = 3;
    KdTrainConfig kc;
    kc.epochs = 16;
    kc.batch_size = 32;
    KdTrainConfig kc_branch = kc;
    kc_branch.epochs = 40;  // branch ensembles need more steps at this scale

    {  // dml
        std::vector<ModelGraph> peers;
        for (int i = 0; i < 3; ++i) {
            RngState r(200 + i);
            peers.push_back(build_model(sspec, r));
        }
        RngState rr(20);
        dml_train(peers, data, dc, kc, rr);
        CHECK(evaluate(peers[0], data).top1 > 40.0);
    }
    {  // one
        RngState rr(21);
        auto mb = one_train(sspec, data, dc, kc_branch, rr);
        RngState rd(22);
        auto deployed = mb.deploy(0, rd);
        CHECK(evaluate(deployed, data).top1 > 40.0);
    }
    {  // clilr
        RngState rr(23);
        auto mb = clilr_train(sspec, data, dc, kc_branch, rr);
        RngState rd(24);
        auto deployed = mb.deploy(0, rd);
        CHECK(evaluate(deployed, data).top1 > 40.0);
    }
    {  // okddip deploys the leader
        RngState rr(25);
        auto mb = okddip_train(sspec, data, dc, kc_branch, rr);
        RngState rd(26);
        auto leader = mb.deploy(dc.peers - 1, rd);
        CHECK(evaluate(leader, data).top1 > 40.0);
    }
    {  // self methods
        for (int which = 0; which < 4; ++which) {
            RngState rs(300 + which);
            auto student = build_model(sspec, rs);
            RngState rr(310 + which);
            if (which == 0) tfkd_train(student, data, dc, kc, rr);
            if (which == 1) cskd_train(student, data, dc, kc, rr);
            if (which == 2) pskd_train(student, data, dc, kc, rr);
            if (which == 3) ddgsd_train(student, data, dc, kc, rr);
            CHECK(evaluate(student, data).top1 > 40.0);
        }
    }
}

TEST_CASE("zero cases of the degenerate identity configurations") {
    RngState rng(400);
    auto x = tensor<float>({2, 4}, {0.7f, -0.1f, 0.4f, 0.2f, -0.3f, 0.5f, 0.1f, 0.0f});

    // identical peers: mutual kl is exactly zero
    auto pa = softmax_t(x, 1.0f);
    auto pb = softmax_t(tensor<float>({2, 4}, x->data), 1.0f);
    CHECK(kl_div(pa, pb)->item() == 0.0f);

    // one with a single branch: gate softmax over one logit is exactly one
    auto g = softmax_t(tensor<float>({2, 1}, {0.37f, -2.0f}), 1.0f);
    CHECK(g->data[0] == 1.0f);
    CHECK(g->data[1] == 1.0f);
    auto ze = scale_rows(x, col(g, 0));
    CHECK(ze->data == x->data);
    CHECK(kl_div(softmax_t(detach(ze), 4.0f), softmax_t(x, 4.0f))->item() == 0.0f);

    // clilr with three identical heads: the mean of the two others is exact
    auto mean2 = scale(add(pa, softmax_t(tensor<float>({2, 4}, x->data), 1.0f)), 0.5f);
    CHECK(kl_div(mean2, pb)->item() == 0.0f);

    // okddip with two identical peers: attention rows are exactly (0.5, 0.5)
    auto f = tensor<float>({2, 3}, {0.3f, 0.1f, -0.2f, 0.5f, 0.4f, 0.0f});
    auto wq = tensor<float>({2, 3}, {0.1f, 0.2f, 0.3f, -0.1f, 0.0f, 0.2f});
    auto s1 = rowwise_dot(linear(f, wq, TensPtr<float>{}), linear(f, wq, TensPtr<float>{}));
    std::vector<TensPtr<float>> sc = {s1, s1};
    auto attn = softmax_t(stack_cols(sc), 1.0f);
    for (int64_t i = 0; i < attn->numel(); ++i) CHECK(attn->data[i] == 0.5f);
    auto t1 = add(scale_rows(pa, col(attn, 0)), scale_rows(pb, col(attn, 1)));
    CHECK(kl_div(t1, pb)->item() == 0.0f);

    // ddgsd with the identity distortion: both views match bit for bit
    auto m = tiny_cnn(401);
    m.update_running_stats = false;
    auto xim = tensor<float>({2, 6, 11, 11});
    for (auto& v : xim->data) v = static_cast<float>(rng.normal());
    auto o1 = m.forward(xim, true);
    auto o2 = m.forward(xim, true);
    CHECK(o1.logits->data == o2.logits->data);
    CHECK(kl_div(softmax_t(o1.logits, 1.0f), softmax_t(o2.logits, 1.0f))->item() == 0.0f);
    auto gd = sub(global_avg_pool(o1.taps.at("relu2")), global_avg_pool(o2.taps.at("relu2")));
    CHECK(mean_all(rowwise_dot(gd, gd))->item() == 0.0f);
}
