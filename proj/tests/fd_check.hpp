#pragma once

// Central finite-difference gradient checker used across the test suites.
// Rebuilds the loss graph per evaluation (backward consumes the tape).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hsib/rng.hpp"
#include "hsib/tensor.hpp"

namespace hsib::testing {

struct FdReport {
    double max_rel_err = 0;
    int64_t checked = 0;
    std::string worst;
};

// make_loss() must rebuild the graph over the given leaves each call.
inline FdReport fd_check(const std::vector<TensPtr<double>>& leaves,
                         const std::function<TensPtr<double>()>& make_loss, double h = 1e-5,
                         int64_t stride = 1) {
    for (auto& l : leaves) l->grad.clear();
    auto loss = make_loss();
    backward(loss);

    FdReport rep;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        if (!leaf->requires_grad) continue;
        leaf->ensure_grad();
        for (int64_t i = 0; i < leaf->numel(); i += stride) {
            const double keep = leaf->data[i];
            double fp, fm;
            {
                NoGradGuard ng;
                leaf->data[i] = keep + h;
                fp = make_loss()->item();
                leaf->data[i] = keep - h;
                fm = make_loss()->item();
                leaf->data[i] = keep;
            }
            const double fd = (fp - fm) / (2 * h);
            const double an = leaf->grad[i];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
            const double rel = std::abs(fd - an) / denom;
            ++rep.checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = "leaf " + std::to_string(li) + " elem " + std::to_string(i) +
                            " analytic " + std::to_string(an) + " fd " + std::to_string(fd);
            }
        }
    }
    return rep;
}

inline TensPtr<double> randn(std::vector<int64_t> shape, RngState& rng, double scale = 1.0,
                             bool requires_grad = true) {
    auto t = tensor<double>(std::move(shape), 0.0, requires_grad);
    for (auto& v : t->data) v = rng.normal() * scale;
    return t;
}

}  // namespace hsib::testing
