#pragma once

// Differentiable ops over Tens<T> nodes. Each op validates shapes, computes
// the forward result, rejects non-finite outputs, and (when grad recording
// is on and an input needs it) attaches a backward closure.

#include <cstring>

#include "hsib/gemm.hpp"
#include "hsib/tensor.hpp"

namespace hsib {

template <class T>
inline bool track(std::initializer_list<const TensPtr<T>*> inputs) {
    if (!grad_enabled()) return false;
    for (auto* p : inputs)
        if (*p && (*p)->requires_grad) return true;
    return false;
}

template <class T>
inline void link(TensPtr<T>& out, const char* op, std::initializer_list<TensPtr<T>> parents,
                 std::function<void()> fn) {
    out->op = op;
    out->requires_grad = true;
    out->parents.assign(parents);
    out->backfn = std::move(fn);
}

// ---------------------------------------------------------------------------
// elementwise / reductions
// ---------------------------------------------------------------------------

template <class T>
TensPtr<T> add(const TensPtr<T>& a, const TensPtr<T>& b) {
    if (!same_shape(*a, *b)) throw Error("add: shape mismatch");
    auto out = tensor<T>(a->shape);
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    check_finite(*out, "add");
    if (track<T>({&a, &b})) {
        Tens<T>* o = out.get();
        link(out, "add", {a, b}, [o, a, b]() {
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t i = 0; i < o->numel(); ++i) b->grad[i] += o->grad[i];
            }
        });
    }
    return out;
}

template <class T>
TensPtr<T> sub(const TensPtr<T>& a, const TensPtr<T>& b) {
    if (!same_shape(*a, *b)) throw Error("sub: shape mismatch");
    auto out = tensor<T>(a->shape);
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
    check_finite(*out, "sub");
    if (track<T>({&a, &b})) {
        Tens<T>* o = out.get();
        link(out, "sub", {a, b}, [o, a, b]() {
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t i = 0; i < o->numel(); ++i) b->grad[i] -= o->grad[i];
            }
        });
    }
    return out;
}

template <class T>
TensPtr<T> mul(const TensPtr<T>& a, const TensPtr<T>& b) {
    if (!same_shape(*a, *b)) throw Error("mul: shape mismatch");
    auto out = tensor<T>(a->shape);
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    check_finite(*out, "mul");
    if (track<T>({&a, &b})) {
        Tens<T>* o = out.get();
        link(out, "mul", {a, b}, [o, a, b]() {
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t i = 0; i < o->numel(); ++i) b->grad[i] += o->grad[i] * a->data[i];
            }
        });
    }
    return out;
}

template <class T>
TensPtr<T> scale(const TensPtr<T>& a, T c) {
    auto out = tensor<T>(a->shape);
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * c;
    check_finite(*out, "scale");
    if (track<T>({&a})) {
        Tens<T>* o = out.get();
        link(out, "scale", {a}, [o, a, c]() {
            a->ensure_grad();
            for (int64_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i] * c;
        });
    }
    return out;
}

template <class T>
TensPtr<T> square(const TensPtr<T>& a) {
    auto out = tensor<T>(a->shape);
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * a->data[i];
    check_finite(*out, "square");
    if (track<T>({&a})) {
        Tens<T>* o = out.get();
        link(out, "square", {a}, [o, a]() {
            a->ensure_grad();
            for (int64_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i] * T(2) * a->data[i];
        });
    }
    return out;
}

template <class T>
TensPtr<T> relu(const TensPtr<T>& a) {
    auto out = tensor<T>(a->shape);
    for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] > T(0) ? a->data[i] : T(0);
    if (track<T>({&a})) {
        Tens<T>* o = out.get();
        link(out, "relu", {a}, [o, a]() {
            a->ensure_grad();
            for (int64_t i = 0; i < o->numel(); ++i)
                if (a->data[i] > T(0)) a->grad[i] += o->grad[i];
        });
    }
    return out;
}

template <class T>
TensPtr<T> sum_all(const TensPtr<T>& a) {
    auto out = tensor<T>({1});
    T s = 0;
    for (int64_t i = 0; i < a->numel(); ++i) s += a->data[i];
    out->data[0] = s;
    check_finite(*out, "sum");
    if (track<T>({&a})) {
        Tens<T>* o = out.get();
        link(out, "sum", {a}, [o, a]() {
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += o->grad[0];
        });
    }
    return out;
}

template <class T>
TensPtr<T> mean_all(const TensPtr<T>& a) {
    auto out = tensor<T>({1});
    T s = 0;
    for (int64_t i = 0; i < a->numel(); ++i) s += a->data[i];
    const T inv = T(1) / static_cast<T>(a->numel());
    out->data[0] = s * inv;
    check_finite(*out, "mean");
    if (track<T>({&a})) {
        Tens<T>* o = out.get();
        link(out, "mean", {a}, [o, a, inv]() {
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += o->grad[0] * inv;
        });
    }
    return out;
}

// 0.5 * mean over leading dim of the squared difference (alignment losses)
template <class T>
TensPtr<T> half_mse_rows(const TensPtr<T>& a, const TensPtr<T>& b) {
    if (!same_shape(*a, *b)) throw Error("half_mse_rows: shape mismatch");
    if (a->shape.empty()) throw Error("half_mse_rows: rank-0 input");
    const int64_t rows = a->shape[0];
    auto out = tensor<T>({1});
    T s = 0;
    for (int64_t i = 0; i < a->numel(); ++i) {
        T d = a->data[i] - b->data[i];
        s += d * d;
    }
    const T inv = T(1) / static_cast<T>(rows);
    out->data[0] = T(0.5) * s * inv;
    check_finite(*out, "half_mse_rows");
    if (track<T>({&a, &b})) {
        Tens<T>* o = out.get();
        link(out, "half_mse_rows", {a, b}, [o, a, b, inv]() {
            const T g = o->grad[0] * inv;
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) {
                T d = (a->data[i] - b->data[i]) * g;
                if (a->requires_grad) a->grad[i] += d;
                if (b->requires_grad) b->grad[i] -= d;
            }
        });
    }
    return out;
}

template <class T>
TensPtr<T> reshape(const TensPtr<T>& a, std::vector<int64_t> shape) {
    if (shape_numel(shape) != a->numel()) throw Error("reshape: element count mismatch");
    auto out = tensor<T>(std::move(shape));
    out->data = a->data;
    if (track<T>({&a})) {
        Tens<T>* o = out.get();
        link(out, "reshape", {a}, [o, a]() {
            a->ensure_grad();
            for (int64_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i];
        });
    }
    return out;
}

template <class T>
TensPtr<T> flatten(const TensPtr<T>& a) {
    if (a->shape.size() < 2) throw Error("flatten: need at least 2-d input");
    int64_t rest = a->numel() / a->shape[0];
    return reshape(a, {a->shape[0], rest});
}

// ---------------------------------------------------------------------------
// linear / conv / pool / batchnorm
// ---------------------------------------------------------------------------

// y[N,Dout] = x[N,Din] * W^T + b, W stored [Dout,Din]. b may be null.
template <class T>
TensPtr<T> linear(const TensPtr<T>& x, const TensPtr<T>& w, const TensPtr<T>& b) {
    if (x->shape.size() != 2 || w->shape.size() != 2) throw Error("linear: need 2-d x and w");
    const int64_t N = x->shape[0], Din = x->shape[1];
    const int64_t Dout = w->shape[0];
    if (w->shape[1] != Din)
        throw Error("linear: input width " + std::to_string(Din) + " does not match weight width " +
                    std::to_string(w->shape[1]));
    if (b && (b->shape.size() != 1 || b->shape[0] != Dout)) throw Error("linear: bad bias shape");

    auto out = tensor<T>({N, Dout});
    if (b) {
        for (int64_t n = 0; n < N; ++n)
            std::copy(b->data.begin(), b->data.end(), out->data.begin() + n * Dout);
    }
    std::vector<T> wt(static_cast<size_t>(Din * Dout));
    transpose(Dout, Din, w->data.data(), wt.data());
    gemm_acc(N, Dout, Din, x->data.data(), wt.data(), out->data.data());
    check_finite(*out, "linear");

    if (track<T>({&x, &w, &b})) {
        Tens<T>* o = out.get();
        link(out, "linear", b ? std::initializer_list<TensPtr<T>>{x, w, b}
                              : std::initializer_list<TensPtr<T>>{x, w},
             [o, x, w, b, N, Din, Dout]() {
                 const T* g = o->grad.data();
                 if (x->requires_grad) {
                     x->ensure_grad();
                     gemm_acc(N, Din, Dout, g, w->data.data(), x->grad.data());
                 }
                 if (w->requires_grad) {
                     w->ensure_grad();
                     std::vector<T> gt(static_cast<size_t>(N * Dout));
                     transpose(N, Dout, g, gt.data());
                     gemm_acc(Dout, Din, N, gt.data(), x->data.data(), w->grad.data());
                 }
                 if (b && b->requires_grad) {
                     b->ensure_grad();
                     for (int64_t n = 0; n < N; ++n)
                         for (int64_t j = 0; j < Dout; ++j) b->grad[j] += g[n * Dout + j];
                 }
             });
    }
    return out;
}

namespace detail {

// x plane [C,H,W] -> cols [C*k*k, OH*OW]
template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t k, T* cols) {
    const int64_t OH = H - k + 1, OW = W - k + 1;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ki = 0; ki < k; ++ki)
            for (int64_t kj = 0; kj < k; ++kj) {
                T* dst = cols + ((c * k + ki) * k + kj) * OH * OW;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    const T* src = x + c * H * W + (oy + ki) * W + kj;
                    std::memcpy(dst + oy * OW, src, sizeof(T) * static_cast<size_t>(OW));
                }
            }
}

// rows layout [OH*OW, C*k*k]
template <class T>
void im2row(const T* x, int64_t C, int64_t H, int64_t W, int64_t k, T* rows) {
    const int64_t OH = H - k + 1, OW = W - k + 1;
    const int64_t CK = C * k * k;
    for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
            T* dst = rows + (oy * OW + ox) * CK;
            for (int64_t c = 0; c < C; ++c)
                for (int64_t ki = 0; ki < k; ++ki) {
                    const T* src = x + c * H * W + (oy + ki) * W + ox;
                    for (int64_t kj = 0; kj < k; ++kj) dst[(c * k + ki) * k + kj] = src[kj];
                }
        }
}

template <class T>
void col2im_add(const T* cols, int64_t C, int64_t H, int64_t W, int64_t k, T* x) {
    const int64_t OH = H - k + 1, OW = W - k + 1;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ki = 0; ki < k; ++ki)
            for (int64_t kj = 0; kj < k; ++kj) {
                const T* src = cols + ((c * k + ki) * k + kj) * OH * OW;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    T* dst = x + c * H * W + (oy + ki) * W + kj;
                    const T* s = src + oy * OW;
                    for (int64_t ox = 0; ox < OW; ++ox) dst[ox] += s[ox];
                }
            }
}

}  // namespace detail

// Valid-padding stride-1 cross-correlation.
// x [N,Cin,H,W], w [Cout,Cin,k,k], b [Cout] (nullable) -> [N,Cout,H-k+1,W-k+1]
template <class T>
TensPtr<T> conv2d(const TensPtr<T>& x, const TensPtr<T>& w, const TensPtr<T>& b) {
    if (x->shape.size() != 4 || w->shape.size() != 4) throw Error("conv2d: need 4-d x and w");
    const int64_t N = x->shape[0], Cin = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int64_t Cout = w->shape[0], k = w->shape[2];
    if (w->shape[1] != Cin)
        throw Error("conv2d: input channels " + std::to_string(Cin) + " vs kernel channels " +
                    std::to_string(w->shape[1]));
    if (w->shape[3] != k) throw Error("conv2d: kernel must be square");
    if (k > H || k > W) throw Error("conv2d: kernel exceeds spatial dims");
    if (b && (b->shape.size() != 1 || b->shape[0] != Cout)) throw Error("conv2d: bad bias shape");
    const int64_t OH = H - k + 1, OW = W - k + 1;
    const int64_t CK = Cin * k * k, OHW = OH * OW;

    auto out = tensor<T>({N, Cout, OH, OW});
    std::vector<T> cols(static_cast<size_t>(CK * OHW));
    for (int64_t n = 0; n < N; ++n) {
        detail::im2col(x->data.data() + n * Cin * H * W, Cin, H, W, k, cols.data());
        T* y = out->data.data() + n * Cout * OHW;
        if (b) {
            for (int64_t co = 0; co < Cout; ++co)
                std::fill(y + co * OHW, y + (co + 1) * OHW, b->data[co]);
        }
        gemm_acc(Cout, OHW, CK, w->data.data(), cols.data(), y);
    }
    check_finite(*out, "conv2d");

    if (track<T>({&x, &w, &b})) {
        Tens<T>* o = out.get();
        link(out, "conv2d", b ? std::initializer_list<TensPtr<T>>{x, w, b}
                              : std::initializer_list<TensPtr<T>>{x, w},
             [o, x, w, b, N, Cin, H, W, Cout, k, OH, OW, CK, OHW]() {
                 const T* g = o->grad.data();
                 if (b && b->requires_grad) {
                     b->ensure_grad();
                     for (int64_t n = 0; n < N; ++n)
                         for (int64_t co = 0; co < Cout; ++co) {
                             T s = 0;
                             const T* gr = g + (n * Cout + co) * OHW;
                             for (int64_t j = 0; j < OHW; ++j) s += gr[j];
                             b->grad[co] += s;
                         }
                 }
                 if (w->requires_grad) {
                     w->ensure_grad();
                     std::vector<T> rows(static_cast<size_t>(OHW * CK));
                     for (int64_t n = 0; n < N; ++n) {
                         detail::im2row(x->data.data() + n * Cin * H * W, Cin, H, W, k, rows.data());
                         gemm_acc(Cout, CK, OHW, g + n * Cout * OHW, rows.data(), w->grad.data());
                     }
                 }
                 if (x->requires_grad) {
                     x->ensure_grad();
                     std::vector<T> wt(static_cast<size_t>(CK * Cout));
                     transpose(Cout, CK, w->data.data(), wt.data());
                     std::vector<T> dcols(static_cast<size_t>(CK * OHW));
                     for (int64_t n = 0; n < N; ++n) {
                         std::fill(dcols.begin(), dcols.end(), T(0));
                         gemm_acc(CK, OHW, Cout, wt.data(), g + n * Cout * OHW, dcols.data());
                         detail::col2im_add(dcols.data(), Cin, H, W, k, x->grad.data() + n * Cin * H * W);
                     }
                 }
             });
    }
    return out;
}

// x [N,Cin,L], w [Cout,Cin,k], b [Cout] (nullable) -> [N,Cout,L-k+1]
template <class T>
TensPtr<T> conv1d(const TensPtr<T>& x, const TensPtr<T>& w, const TensPtr<T>& b) {
    if (x->shape.size() != 3 || w->shape.size() != 3) throw Error("conv1d: need 3-d x and w");
    const int64_t N = x->shape[0], Cin = x->shape[1], L = x->shape[2];
    const int64_t Cout = w->shape[0], k = w->shape[2];
    if (w->shape[1] != Cin) throw Error("conv1d: channel mismatch");
    if (k > L) throw Error("conv1d: kernel exceeds input length");
    if (b && (b->shape.size() != 1 || b->shape[0] != Cout)) throw Error("conv1d: bad bias shape");
    const int64_t OL = L - k + 1;

    auto out = tensor<T>({N, Cout, OL});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co) {
            T* y = out->data.data() + (n * Cout + co) * OL;
            if (b) std::fill(y, y + OL, b->data[co]);
            for (int64_t ci = 0; ci < Cin; ++ci) {
                const T* xr = x->data.data() + (n * Cin + ci) * L;
                const T* wr = w->data.data() + (co * Cin + ci) * k;
                for (int64_t kk = 0; kk < k; ++kk) {
                    const T wv = wr[kk];
                    for (int64_t t = 0; t < OL; ++t) y[t] += wv * xr[t + kk];
                }
            }
        }
    check_finite(*out, "conv1d");

    if (track<T>({&x, &w, &b})) {
        Tens<T>* o = out.get();
        link(out, "conv1d", b ? std::initializer_list<TensPtr<T>>{x, w, b}
                              : std::initializer_list<TensPtr<T>>{x, w},
             [o, x, w, b, N, Cin, L, Cout, k, OL]() {
                 const T* g = o->grad.data();
                 if (b && b->requires_grad) {
                     b->ensure_grad();
                     for (int64_t n = 0; n < N; ++n)
                         for (int64_t co = 0; co < Cout; ++co) {
                             T s = 0;
                             const T* gr = g + (n * Cout + co) * OL;
                             for (int64_t t = 0; t < OL; ++t) s += gr[t];
                             b->grad[co] += s;
                         }
                 }
                 if (w->requires_grad) w->ensure_grad();
                 if (x->requires_grad) x->ensure_grad();
                 for (int64_t n = 0; n < N; ++n)
                     for (int64_t co = 0; co < Cout; ++co) {
                         const T* gr = g + (n * Cout + co) * OL;
                         for (int64_t ci = 0; ci < Cin; ++ci) {
                             const T* xr = x->data.data() + (n * Cin + ci) * L;
                             const T* wr = w->data.data() + (co * Cin + ci) * k;
                             for (int64_t kk = 0; kk < k; ++kk) {
                                 if (w->requires_grad) {
                                     T s = 0;
                                     for (int64_t t = 0; t < OL; ++t) s += gr[t] * xr[t + kk];
                                     w->grad[(co * Cin + ci) * k + kk] += s;
                                 }
                                 if (x->requires_grad) {
                                     T* xg = x->grad.data() + (n * Cin + ci) * L;
                                     const T wv = wr[kk];
                                     for (int64_t t = 0; t < OL; ++t) xg[t + kk] += gr[t] * wv;
                                 }
                             }
                         }
                     }
             });
    }
    return out;
}

// Non-overlapping max pooling with floor semantics on odd dims; gradient
// goes to the first maximal element in row-major window order.
template <class T>
TensPtr<T> maxpool2d(const TensPtr<T>& x, int64_t window) {
    if (x->shape.size() != 4) throw Error("maxpool2d: need 4-d input");
    if (window < 1) throw Error("maxpool2d: window must be >= 1");
    const int64_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    if (window > H || window > W) throw Error("maxpool2d: window exceeds spatial dims");
    const int64_t OH = H / window, OW = W / window;

    auto out = tensor<T>({N, C, OH, OW});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C * OH * OW));
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xp = x->data.data() + nc * H * W;
        T* yp = out->data.data() + nc * OH * OW;
        int64_t* ap = argmax->data() + nc * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
                int64_t best = (oy * window) * W + ox * window;
                T bv = xp[best];
                for (int64_t dy = 0; dy < window; ++dy)
                    for (int64_t dx = 0; dx < window; ++dx) {
                        int64_t idx = (oy * window + dy) * W + ox * window + dx;
                        if (xp[idx] > bv) {
                            bv = xp[idx];
                            best = idx;
                        }
                    }
                yp[oy * OW + ox] = bv;
                ap[oy * OW + ox] = best;
            }
    }
    if (track<T>({&x})) {
        Tens<T>* o = out.get();
        link(out, "maxpool2d", {x}, [o, x, argmax, H, W]() {
            x->ensure_grad();
            const int64_t HW = H * W, OHW = o->shape[2] * o->shape[3];
            for (int64_t nc = 0; nc < o->shape[0] * o->shape[1]; ++nc) {
                const int64_t* ap = argmax->data() + nc * OHW;
                const T* gp = o->grad.data() + nc * OHW;
                T* xg = x->grad.data() + nc * HW;
                for (int64_t j = 0; j < OHW; ++j) xg[ap[j]] += gp[j];
            }
        });
    }
    return out;
}

template <class T>
TensPtr<T> maxpool1d(const TensPtr<T>& x, int64_t window) {
    if (x->shape.size() != 3) throw Error("maxpool1d: need 3-d input");
    if (window < 1) throw Error("maxpool1d: window must be >= 1");
    const int64_t N = x->shape[0], C = x->shape[1], L = x->shape[2];
    if (window > L) throw Error("maxpool1d: window exceeds input length");
    const int64_t OL = L / window;
    auto out = tensor<T>({N, C, OL});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C * OL));
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xp = x->data.data() + nc * L;
        T* yp = out->data.data() + nc * OL;
        int64_t* ap = argmax->data() + nc * OL;
        for (int64_t t = 0; t < OL; ++t) {
            int64_t best = t * window;
            T bv = xp[best];
            for (int64_t d = 1; d < window; ++d)
                if (xp[t * window + d] > bv) {
                    bv = xp[t * window + d];
                    best = t * window + d;
                }
            yp[t] = bv;
            ap[t] = best;
        }
    }
    if (track<T>({&x})) {
        Tens<T>* o = out.get();
        link(out, "maxpool1d", {x}, [o, x, argmax, L]() {
            x->ensure_grad();
            const int64_t OL2 = o->shape[2];
            for (int64_t nc = 0; nc < o->shape[0] * o->shape[1]; ++nc) {
                const int64_t* ap = argmax->data() + nc * OL2;
                const T* gp = o->grad.data() + nc * OL2;
                T* xg = x->grad.data() + nc * L;
                for (int64_t j = 0; j < OL2; ++j) xg[ap[j]] += gp[j];
            }
        });
    }
    return out;
}

enum class BnMode { Train, TrainNoStats, Eval };

// Per-channel batch normalization over [N,C,H,W]. Training modes use batch
// statistics (population variance); Train additionally folds them into the
// running buffers with the given momentum. Eval uses the running buffers.
template <class T>
TensPtr<T> batchnorm2d(const TensPtr<T>& x, const TensPtr<T>& gamma, const TensPtr<T>& beta,
                       std::vector<T>* run_mean, std::vector<T>* run_var, T eps, T momentum,
                       BnMode mode) {
    if (x->shape.size() != 4) throw Error("batchnorm2d: need 4-d input");
    const int64_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    if (gamma->numel() != C || beta->numel() != C) throw Error("batchnorm2d: affine size mismatch");
    if (mode != BnMode::Eval && N < 2)
        throw Error("batchnorm2d: training mode requires batch size >= 2");
    if (mode == BnMode::Eval && (!run_mean || !run_var))
        throw Error("batchnorm2d: eval mode requires running stats");

    const int64_t HW = H * W;
    const int64_t m = N * HW;
    auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(C), T(0));
    auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(C), T(0));

    if (mode == BnMode::Eval) {
        for (int64_t c = 0; c < C; ++c) {
            (*mean)[c] = (*run_mean)[c];
            (*invstd)[c] = T(1) / std::sqrt((*run_var)[c] + eps);
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            T s = 0;
            for (int64_t n = 0; n < N; ++n) {
                const T* xp = x->data.data() + (n * C + c) * HW;
                for (int64_t j = 0; j < HW; ++j) s += xp[j];
            }
            T mu = s / static_cast<T>(m);
            T v = 0;
            for (int64_t n = 0; n < N; ++n) {
                const T* xp = x->data.data() + (n * C + c) * HW;
                for (int64_t j = 0; j < HW; ++j) {
                    T d = xp[j] - mu;
                    v += d * d;
                }
            }
            v /= static_cast<T>(m);
            (*mean)[c] = mu;
            (*invstd)[c] = T(1) / std::sqrt(v + eps);
            if (mode == BnMode::Train && run_mean && run_var) {
                (*run_mean)[c] = (T(1) - momentum) * (*run_mean)[c] + momentum * mu;
                (*run_var)[c] = (T(1) - momentum) * (*run_var)[c] + momentum * v;
            }
        }
    }

    auto out = tensor<T>(x->shape);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const T* xp = x->data.data() + (n * C + c) * HW;
            T* yp = out->data.data() + (n * C + c) * HW;
            const T mu = (*mean)[c], is = (*invstd)[c], g = gamma->data[c], bb = beta->data[c];
            for (int64_t j = 0; j < HW; ++j) yp[j] = (xp[j] - mu) * is * g + bb;
        }
    check_finite(*out, "batchnorm2d");

    if (track<T>({&x, &gamma, &beta})) {
        Tens<T>* o = out.get();
        const bool batch_stats = (mode != BnMode::Eval);
        link(out, "batchnorm2d", {x, gamma, beta},
             [o, x, gamma, beta, mean, invstd, N, C, HW, m, batch_stats]() {
                 if (gamma->requires_grad) gamma->ensure_grad();
                 if (beta->requires_grad) beta->ensure_grad();
                 if (x->requires_grad) x->ensure_grad();
                 for (int64_t c = 0; c < C; ++c) {
                     const T mu = (*mean)[c], is = (*invstd)[c], gm = gamma->data[c];
                     // channel-wide reductions
                     T sum_g = 0, sum_gx = 0;
                     for (int64_t n = 0; n < N; ++n) {
                         const T* gp = o->grad.data() + (n * C + c) * HW;
                         const T* xp = x->data.data() + (n * C + c) * HW;
                         for (int64_t j = 0; j < HW; ++j) {
                             sum_g += gp[j];
                             sum_gx += gp[j] * (xp[j] - mu) * is;
                         }
                     }
                     if (gamma->requires_grad) gamma->grad[c] += sum_gx;
                     if (beta->requires_grad) beta->grad[c] += sum_g;
                     if (x->requires_grad) {
                         const T mf = static_cast<T>(m);
                         for (int64_t n = 0; n < N; ++n) {
                             const T* gp = o->grad.data() + (n * C + c) * HW;
                             const T* xp = x->data.data() + (n * C + c) * HW;
                             T* xg = x->grad.data() + (n * C + c) * HW;
                             for (int64_t j = 0; j < HW; ++j) {
                                 T xh = (xp[j] - mu) * is;
                                 if (batch_stats)
                                     xg[j] += gm * is * (gp[j] - sum_g / mf - xh * sum_gx / mf);
                                 else
                                     xg[j] += gm * is * gp[j];
                             }
                         }
                     }
                 }
             });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / losses
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
inline std::pair<int64_t, int64_t> rows_cols(const Tens<T>& t) {
    if (t.shape.size() == 1) return {1, t.shape[0]};
    if (t.shape.size() == 2) return {t.shape[0], t.shape[1]};
    throw Error("expected 1-d or 2-d tensor");
}
}  // namespace detail

// Temperature softmax over the last dim, computed max-shifted.
template <class T>
TensPtr<T> softmax_t(const TensPtr<T>& z, T temp) {
    if (!(temp > T(0))) throw Error("softmax_t: temperature must be > 0");
    auto [R, K] = detail::rows_cols(*z);
    check_finite(*z, "softmax_t input");
    auto out = tensor<T>(z->shape);
    for (int64_t r = 0; r < R; ++r) {
        const T* zp = z->data.data() + r * K;
        T* pp = out->data.data() + r * K;
        T mx = zp[0];
        for (int64_t i = 1; i < K; ++i) mx = std::max(mx, zp[i]);
        T tot = 0;
        for (int64_t i = 0; i < K; ++i) {
            pp[i] = std::exp((zp[i] - mx) / temp);
            tot += pp[i];
        }
        for (int64_t i = 0; i < K; ++i) pp[i] /= tot;
    }
    check_finite(*out, "softmax_t");
    if (track<T>({&z})) {
        Tens<T>* o = out.get();
        link(out, "softmax_t", {z}, [o, z, R, K, temp]() {
            z->ensure_grad();
            for (int64_t r = 0; r < R; ++r) {
                const T* p = o->data.data() + r * K;
                const T* g = o->grad.data() + r * K;
                T dot = 0;
                for (int64_t i = 0; i < K; ++i) dot += g[i] * p[i];
                T* zg = z->grad.data() + r * K;
                for (int64_t i = 0; i < K; ++i) zg[i] += p[i] * (g[i] - dot) / temp;
            }
        });
    }
    return out;
}

template <class T>
TensPtr<T> log_softmax_t(const TensPtr<T>& z, T temp) {
    if (!(temp > T(0))) throw Error("log_softmax_t: temperature must be > 0");
    auto [R, K] = detail::rows_cols(*z);
    auto out = tensor<T>(z->shape);
    for (int64_t r = 0; r < R; ++r) {
        const T* zp = z->data.data() + r * K;
        T* lp = out->data.data() + r * K;
        T mx = zp[0];
        for (int64_t i = 1; i < K; ++i) mx = std::max(mx, zp[i]);
        T tot = 0;
        for (int64_t i = 0; i < K; ++i) tot += std::exp((zp[i] - mx) / temp);
        T lse = std::log(tot);
        for (int64_t i = 0; i < K; ++i) lp[i] = (zp[i] - mx) / temp - lse;
    }
    check_finite(*out, "log_softmax_t");
    if (track<T>({&z})) {
        Tens<T>* o = out.get();
        link(out, "log_softmax_t", {z}, [o, z, R, K, temp]() {
            z->ensure_grad();
            for (int64_t r = 0; r < R; ++r) {
                const T* lp = o->data.data() + r * K;
                const T* g = o->grad.data() + r * K;
                T gs = 0;
                for (int64_t i = 0; i < K; ++i) gs += g[i];
                T* zg = z->grad.data() + r * K;
                for (int64_t i = 0; i < K; ++i) zg[i] += (g[i] - std::exp(lp[i]) * gs) / temp;
            }
        });
    }
    return out;
}

// Mean over the batch of -log softmax(z)[label].
template <class T>
TensPtr<T> cross_entropy(const TensPtr<T>& z, const std::vector<int64_t>& labels) {
    auto [N, K] = detail::rows_cols(*z);
    if (static_cast<int64_t>(labels.size()) != N) throw Error("cross_entropy: label count mismatch");
    for (int64_t y : labels)
        if (y < 0 || y >= K)
            throw Error("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                        std::to_string(K) + ")");
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(N * K));
    auto out = tensor<T>({1});
    T total = 0;
    for (int64_t n = 0; n < N; ++n) {
        const T* zp = z->data.data() + n * K;
        T* pp = probs->data() + n * K;
        T mx = zp[0];
        for (int64_t i = 1; i < K; ++i) mx = std::max(mx, zp[i]);
        T tot = 0;
        for (int64_t i = 0; i < K; ++i) {
            pp[i] = std::exp(zp[i] - mx);
            tot += pp[i];
        }
        for (int64_t i = 0; i < K; ++i) pp[i] /= tot;
        total += std::log(tot) + mx - zp[labels[n]];
    }
    out->data[0] = total / static_cast<T>(N);
    check_finite(*out, "cross_entropy");
    if (track<T>({&z})) {
        Tens<T>* o = out.get();
        auto lab = std::make_shared<std::vector<int64_t>>(labels);
        link(out, "cross_entropy", {z}, [o, z, probs, lab, N, K]() {
            z->ensure_grad();
            const T g = o->grad[0] / static_cast<T>(N);
            for (int64_t n = 0; n < N; ++n) {
                const T* pp = probs->data() + n * K;
                T* zg = z->grad.data() + n * K;
                for (int64_t i = 0; i < K; ++i) zg[i] += g * pp[i];
                zg[(*lab)[n]] -= g;
            }
        });
    }
    return out;
}

// Mean over the batch of -sum_k target[k] * log softmax(z)[k].
template <class T>
TensPtr<T> soft_cross_entropy(const TensPtr<T>& z, const TensPtr<T>& target) {
    if (!same_shape(*z, *target)) throw Error("soft_cross_entropy: shape mismatch");
    auto [N, K] = detail::rows_cols(*z);
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(N * K));
    auto logp = std::make_shared<std::vector<T>>(static_cast<size_t>(N * K));
    auto out = tensor<T>({1});
    T total = 0;
    for (int64_t n = 0; n < N; ++n) {
        const T* zp = z->data.data() + n * K;
        T mx = zp[0];
        for (int64_t i = 1; i < K; ++i) mx = std::max(mx, zp[i]);
        T tot = 0;
        for (int64_t i = 0; i < K; ++i) tot += std::exp(zp[i] - mx);
        T lse = std::log(tot) + mx;
        for (int64_t i = 0; i < K; ++i) {
            (*logp)[n * K + i] = zp[i] - lse;
            (*probs)[n * K + i] = std::exp(zp[i] - lse);
            const T t = target->data[n * K + i];
            if (t != T(0)) total -= t * (*logp)[n * K + i];
        }
    }
    out->data[0] = total / static_cast<T>(N);
    check_finite(*out, "soft_cross_entropy");
    if (track<T>({&z, &target})) {
        Tens<T>* o = out.get();
        link(out, "soft_cross_entropy", {z, target}, [o, z, target, probs, logp, N, K]() {
            const T g = o->grad[0] / static_cast<T>(N);
            if (z->requires_grad) {
                z->ensure_grad();
                for (int64_t n = 0; n < N; ++n) {
                    T tsum = 0;
                    for (int64_t i = 0; i < K; ++i) tsum += target->data[n * K + i];
                    T* zg = z->grad.data() + n * K;
                    for (int64_t i = 0; i < K; ++i)
                        zg[i] += g * (tsum * (*probs)[n * K + i] - target->data[n * K + i]);
                }
            }
            if (target->requires_grad) {
                target->ensure_grad();
                for (int64_t i = 0; i < N * K; ++i) target->grad[i] -= g * (*logp)[i];
            }
        });
    }
    return out;
}

// KL(p || q) = sum_i p_i ln(p_i / q_i) with the 0*ln(0/q) = 0 convention;
// for 2-d inputs the mean over rows. Inputs must be distributions.
template <class T>
TensPtr<T> kl_div(const TensPtr<T>& p, const TensPtr<T>& q) {
    if (!same_shape(*p, *q)) throw Error("kl_div: shape mismatch");
    auto [R, K] = detail::rows_cols(*p);
    for (int64_t r = 0; r < R; ++r) {
        T sp = 0, sq = 0;
        for (int64_t i = 0; i < K; ++i) {
            const T pv = p->data[r * K + i], qv = q->data[r * K + i];
            if (pv < T(0) || qv < T(0)) throw Error("kl_div: negative probability entry");
            if (pv > T(0) && qv == T(0))
                throw Error("kl_div: q has zero mass where p is positive");
            sp += pv;
            sq += qv;
        }
        if (std::abs(static_cast<double>(sp) - 1.0) > 1e-6 ||
            std::abs(static_cast<double>(sq) - 1.0) > 1e-6)
            throw Error("kl_div: inputs must sum to 1");
    }
    auto out = tensor<T>({1});
    T total = 0;
    for (int64_t i = 0; i < R * K; ++i) {
        const T pv = p->data[i];
        if (pv > T(0)) total += pv * std::log(pv / q->data[i]);
    }
    out->data[0] = total / static_cast<T>(R);
    check_finite(*out, "kl_div");
    if (track<T>({&p, &q})) {
        Tens<T>* o = out.get();
        link(out, "kl_div", {p, q}, [o, p, q, R, K]() {
            const T g = o->grad[0] / static_cast<T>(R);
            if (p->requires_grad) {
                p->ensure_grad();
                for (int64_t i = 0; i < R * K; ++i) {
                    const T pv = p->data[i];
                    if (pv > T(0)) p->grad[i] += g * (std::log(pv / q->data[i]) + T(1));
                }
            }
            if (q->requires_grad) {
                q->ensure_grad();
                for (int64_t i = 0; i < R * K; ++i) {
                    const T pv = p->data[i];
                    if (pv > T(0)) q->grad[i] -= g * pv / q->data[i];
                }
            }
        });
    }
    return out;
}

// per-row KL(p || q) without the mean reduction -> [N]
template <class T>
TensPtr<T> kl_div_rowwise(const TensPtr<T>& p, const TensPtr<T>& q) {
    if (!same_shape(*p, *q) || p->shape.size() != 2) throw Error("kl_div_rowwise: need [N,K]");
    const int64_t R = p->shape[0], K = p->shape[1];
    for (int64_t i = 0; i < R * K; ++i) {
        if (p->data[i] < T(0) || q->data[i] < T(0))
            throw Error("kl_div_rowwise: negative probability entry");
        if (p->data[i] > T(0) && q->data[i] == T(0))
            throw Error("kl_div_rowwise: q has zero mass where p is positive");
    }
    auto out = tensor<T>({R});
    for (int64_t r = 0; r < R; ++r) {
        T s = 0;
        for (int64_t i = 0; i < K; ++i) {
            const T pv = p->data[r * K + i];
            if (pv > T(0)) s += pv * std::log(pv / q->data[r * K + i]);
        }
        out->data[r] = s;
    }
    check_finite(*out, "kl_div_rowwise");
    if (track<T>({&p, &q})) {
        Tens<T>* o = out.get();
        link(out, "kl_div_rowwise", {p, q}, [o, p, q, R, K]() {
            for (int64_t r = 0; r < R; ++r) {
                const T g = o->grad[r];
                if (g == T(0)) continue;
                for (int64_t i = 0; i < K; ++i) {
                    const T pv = p->data[r * K + i];
                    if (pv <= T(0)) continue;
                    if (p->requires_grad) {
                        p->ensure_grad();
                        p->grad[r * K + i] += g * (std::log(pv / q->data[r * K + i]) + T(1));
                    }
                    if (q->requires_grad) {
                        q->ensure_grad();
                        q->grad[r * K + i] -= g * pv / q->data[r * K + i];
                    }
                }
            }
        });
    }
    return out;
}

// per-row euclidean distance ||a_r - b_r||_2 -> [N]; rows that match exactly
// contribute zero gradient
template <class T>
TensPtr<T> rowwise_l2_diff(const TensPtr<T>& a, const TensPtr<T>& b) {
    if (!same_shape(*a, *b) || a->shape.size() != 2) throw Error("rowwise_l2_diff: need [N,K]");
    const int64_t R = a->shape[0], K = a->shape[1];
    auto out = tensor<T>({R});
    for (int64_t r = 0; r < R; ++r) {
        T s = 0;
        for (int64_t i = 0; i < K; ++i) {
            const T d = a->data[r * K + i] - b->data[r * K + i];
            s += d * d;
        }
        out->data[r] = std::sqrt(s);
    }
    check_finite(*out, "rowwise_l2_diff");
    if (track<T>({&a, &b})) {
        Tens<T>* o = out.get();
        link(out, "rowwise_l2_diff", {a, b}, [o, a, b, R, K]() {
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            for (int64_t r = 0; r < R; ++r) {
                const T nrm = o->data[r];
                if (nrm == T(0)) continue;
                const T g = o->grad[r] / nrm;
                for (int64_t i = 0; i < K; ++i) {
                    const T d = (a->data[r * K + i] - b->data[r * K + i]) * g;
                    if (a->requires_grad) a->grad[r * K + i] += d;
                    if (b->requires_grad) b->grad[r * K + i] -= d;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// ops used by the distillation losses
// ---------------------------------------------------------------------------

// rows scaled to unit L2 norm
template <class T>
TensPtr<T> l2_normalize_rows(const TensPtr<T>& x, T eps = T(1e-12)) {
    auto [R, K] = detail::rows_cols(*x);
    auto norms = std::make_shared<std::vector<T>>(static_cast<size_t>(R));
    auto out = tensor<T>(x->shape);
    for (int64_t r = 0; r < R; ++r) {
        const T* xp = x->data.data() + r * K;
        T s = 0;
        for (int64_t i = 0; i < K; ++i) s += xp[i] * xp[i];
        T nrm = std::sqrt(s) + eps;
        (*norms)[r] = nrm;
        T* yp = out->data.data() + r * K;
        for (int64_t i = 0; i < K; ++i) yp[i] = xp[i] / nrm;
    }
    check_finite(*out, "l2_normalize_rows");
    if (track<T>({&x})) {
        Tens<T>* o = out.get();
        link(out, "l2_normalize_rows", {x}, [o, x, norms, R, K]() {
            x->ensure_grad();
            for (int64_t r = 0; r < R; ++r) {
                const T* y = o->data.data() + r * K;
                const T* g = o->grad.data() + r * K;
                T dot = 0;
                for (int64_t i = 0; i < K; ++i) dot += g[i] * y[i];
                T* xg = x->grad.data() + r * K;
                const T inv = T(1) / (*norms)[r];
                for (int64_t i = 0; i < K; ++i) xg[i] += (g[i] - y[i] * dot) * inv;
            }
        });
    }
    return out;
}

// K[i][j] = exp(-||x_i - x_j||^2 / (2 delta^2)) over rows of x [b,D]
template <class T>
TensPtr<T> pairwise_rbf(const TensPtr<T>& x, T delta) {
    if (x->shape.size() != 2) throw Error("pairwise_rbf: need 2-d input");
    const int64_t b = x->shape[0], D = x->shape[1];
    if (b < 2) throw Error("pairwise_rbf: need batch of at least 2");
    auto out = tensor<T>({b, b});
    const T inv2d2 = T(1) / (T(2) * delta * delta);
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < b; ++j) {
            T s = 0;
            const T* xi = x->data.data() + i * D;
            const T* xj = x->data.data() + j * D;
            for (int64_t d = 0; d < D; ++d) {
                T df = xi[d] - xj[d];
                s += df * df;
            }
            out->data[i * b + j] = std::exp(-s * inv2d2);
        }
    check_finite(*out, "pairwise_rbf");
    if (track<T>({&x})) {
        Tens<T>* o = out.get();
        link(out, "pairwise_rbf", {x}, [o, x, b, D, inv2d2]() {
            x->ensure_grad();
            for (int64_t i = 0; i < b; ++i)
                for (int64_t j = 0; j < b; ++j) {
                    const T gk = o->grad[i * b + j] * o->data[i * b + j] * (-inv2d2);
                    if (gk == T(0)) continue;
                    const T* xi = x->data.data() + i * D;
                    const T* xj = x->data.data() + j * D;
                    T* gi = x->grad.data() + i * D;
                    T* gj = x->grad.data() + j * D;
                    for (int64_t d = 0; d < D; ++d) {
                        const T df = T(2) * (xi[d] - xj[d]) * gk;
                        gi[d] += df;
                        gj[d] -= df;
                    }
                }
        });
    }
    return out;
}

// Q[n, h*w] = sum_c x[n,c,h,w]^2 (spatial energy map)
template <class T>
TensPtr<T> channel_sumsq(const TensPtr<T>& x) {
    if (x->shape.size() != 4) throw Error("channel_sumsq: need 4-d input");
    const int64_t N = x->shape[0], C = x->shape[1], HW = x->shape[2] * x->shape[3];
    auto out = tensor<T>({N, HW});
    for (int64_t n = 0; n < N; ++n) {
        T* q = out->data.data() + n * HW;
        for (int64_t c = 0; c < C; ++c) {
            const T* xp = x->data.data() + (n * C + c) * HW;
            for (int64_t j = 0; j < HW; ++j) q[j] += xp[j] * xp[j];
        }
    }
    check_finite(*out, "channel_sumsq");
    if (track<T>({&x})) {
        Tens<T>* o = out.get();
        link(out, "channel_sumsq", {x}, [o, x, N, C, HW]() {
            x->ensure_grad();
            for (int64_t n = 0; n < N; ++n) {
                const T* g = o->grad.data() + n * HW;
                for (int64_t c = 0; c < C; ++c) {
                    const T* xp = x->data.data() + (n * C + c) * HW;
                    T* xg = x->grad.data() + (n * C + c) * HW;
                    for (int64_t j = 0; j < HW; ++j) xg[j] += T(2) * xp[j] * g[j];
                }
            }
        });
    }
    return out;
}

// [N,C,H,W] -> [N,C] mean over spatial positions
template <class T>
TensPtr<T> global_avg_pool(const TensPtr<T>& x) {
    if (x->shape.size() != 4) throw Error("global_avg_pool: need 4-d input");
    const int64_t N = x->shape[0], C = x->shape[1], HW = x->shape[2] * x->shape[3];
    auto out = tensor<T>({N, C});
    const T inv = T(1) / static_cast<T>(HW);
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xp = x->data.data() + nc * HW;
        T s = 0;
        for (int64_t j = 0; j < HW; ++j) s += xp[j];
        out->data[nc] = s * inv;
    }
    check_finite(*out, "global_avg_pool");
    if (track<T>({&x})) {
        Tens<T>* o = out.get();
        link(out, "global_avg_pool", {x}, [o, x, N, C, HW, inv]() {
            x->ensure_grad();
            for (int64_t nc = 0; nc < N * C; ++nc) {
                const T g = o->grad[nc] * inv;
                T* xg = x->grad.data() + nc * HW;
                for (int64_t j = 0; j < HW; ++j) xg[j] += g;
            }
        });
    }
    return out;
}

// horizontal / vertical flip of the spatial dims of [N,C,H,W]
template <class T>
TensPtr<T> flip_spatial(const TensPtr<T>& x, bool horizontal) {
    if (x->shape.size() != 4) throw Error("flip_spatial: need 4-d input");
    const int64_t NC = x->shape[0] * x->shape[1], H = x->shape[2], W = x->shape[3];
    auto out = tensor<T>(x->shape);
    for (int64_t nc = 0; nc < NC; ++nc) {
        const T* xp = x->data.data() + nc * H * W;
        T* yp = out->data.data() + nc * H * W;
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xw = 0; xw < W; ++xw) {
                int64_t sy = horizontal ? y : H - 1 - y;
                int64_t sx = horizontal ? W - 1 - xw : xw;
                yp[y * W + xw] = xp[sy * W + sx];
            }
    }
    if (track<T>({&x})) {
        Tens<T>* o = out.get();
        link(out, "flip_spatial", {x}, [o, x, NC, H, W, horizontal]() {
            x->ensure_grad();
            for (int64_t nc = 0; nc < NC; ++nc) {
                const T* gp = o->grad.data() + nc * H * W;
                T* xg = x->grad.data() + nc * H * W;
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t xw = 0; xw < W; ++xw) {
                        int64_t sy = horizontal ? y : H - 1 - y;
                        int64_t sx = horizontal ? W - 1 - xw : xw;
                        xg[sy * W + sx] += gp[y * W + xw];
                    }
            }
        });
    }
    return out;
}

// column j of [N,K] as [N]
template <class T>
TensPtr<T> col(const TensPtr<T>& x, int64_t j) {
    if (x->shape.size() != 2 || j < 0 || j >= x->shape[1]) throw Error("col: bad index");
    const int64_t N = x->shape[0], K = x->shape[1];
    auto out = tensor<T>({N});
    for (int64_t n = 0; n < N; ++n) out->data[n] = x->data[n * K + j];
    if (track<T>({&x})) {
        Tens<T>* o = out.get();
        link(out, "col", {x}, [o, x, j, K]() {
            x->ensure_grad();
            for (int64_t n = 0; n < o->numel(); ++n) x->grad[n * K + j] += o->grad[n];
        });
    }
    return out;
}

// y[n,k] = x[n,k] * s[n]
template <class T>
TensPtr<T> scale_rows(const TensPtr<T>& x, const TensPtr<T>& s) {
    if (x->shape.size() != 2 || s->shape.size() != 1 || s->shape[0] != x->shape[0])
        throw Error("scale_rows: shape mismatch");
    const int64_t N = x->shape[0], K = x->shape[1];
    auto out = tensor<T>(x->shape);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k) out->data[n * K + k] = x->data[n * K + k] * s->data[n];
    check_finite(*out, "scale_rows");
    if (track<T>({&x, &s})) {
        Tens<T>* o = out.get();
        link(out, "scale_rows", {x, s}, [o, x, s, N, K]() {
            if (x->requires_grad) x->ensure_grad();
            if (s->requires_grad) s->ensure_grad();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t k = 0; k < K; ++k) {
                    const T g = o->grad[n * K + k];
                    if (x->requires_grad) x->grad[n * K + k] += g * s->data[n];
                    if (s->requires_grad) s->grad[n] += g * x->data[n * K + k];
                }
        });
    }
    return out;
}

// per-row dot product of two [N,D] tensors -> [N]
template <class T>
TensPtr<T> rowwise_dot(const TensPtr<T>& a, const TensPtr<T>& b) {
    if (!same_shape(*a, *b) || a->shape.size() != 2) throw Error("rowwise_dot: shape mismatch");
    const int64_t N = a->shape[0], D = a->shape[1];
    auto out = tensor<T>({N});
    for (int64_t n = 0; n < N; ++n) {
        T s = 0;
        const T* ap = a->data.data() + n * D;
        const T* bp = b->data.data() + n * D;
        for (int64_t d = 0; d < D; ++d) s += ap[d] * bp[d];
        out->data[n] = s;
    }
    check_finite(*out, "rowwise_dot");
    if (track<T>({&a, &b})) {
        Tens<T>* o = out.get();
        link(out, "rowwise_dot", {a, b}, [o, a, b, N, D]() {
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            for (int64_t n = 0; n < N; ++n) {
                const T g = o->grad[n];
                for (int64_t d = 0; d < D; ++d) {
                    if (a->requires_grad) a->grad[n * D + d] += g * b->data[n * D + d];
                    if (b->requires_grad) b->grad[n * D + d] += g * a->data[n * D + d];
                }
            }
        });
    }
    return out;
}

// stack m column vectors [N] into [N,m]
template <class T>
TensPtr<T> stack_cols(const std::vector<TensPtr<T>>& cols) {
    if (cols.empty()) throw Error("stack_cols: empty input");
    const int64_t N = cols[0]->numel();
    const int64_t M = static_cast<int64_t>(cols.size());
    for (auto& c : cols)
        if (c->shape.size() != 1 || c->numel() != N) throw Error("stack_cols: ragged input");
    auto out = tensor<T>({N, M});
    for (int64_t j = 0; j < M; ++j)
        for (int64_t n = 0; n < N; ++n) out->data[n * M + j] = cols[j]->data[n];
    bool need = false;
    if (grad_enabled())
        for (auto& c : cols) need = need || c->requires_grad;
    if (need) {
        Tens<T>* o = out.get();
        auto parents = std::make_shared<std::vector<TensPtr<T>>>(cols);
        out->op = "stack_cols";
        out->requires_grad = true;
        out->parents.assign(cols.begin(), cols.end());
        out->backfn = [o, parents, N, M]() {
            for (int64_t j = 0; j < M; ++j) {
                auto& c = (*parents)[j];
                if (!c->requires_grad) continue;
                c->ensure_grad();
                for (int64_t n = 0; n < N; ++n) c->grad[n] += o->grad[n * M + j];
            }
        };
    }
    return out;
}

// Fake quantization: forward snaps x onto the affine int grid, backward is a
// straight-through estimator gated to the representable range.
template <class T>
TensPtr<T> fake_quant(const TensPtr<T>& x, double scale_, double zero_point, double qmin,
                      double qmax) {
    if (!(scale_ > 0)) throw Error("fake_quant: scale must be positive");
    auto out = tensor<T>(x->shape);
    const double lo = scale_ * (qmin + zero_point);
    const double hi = scale_ * (qmax + zero_point);
    for (int64_t i = 0; i < x->numel(); ++i) {
        double q = std::round(static_cast<double>(x->data[i]) / scale_) - zero_point;
        q = std::min(std::max(q, qmin), qmax);
        out->data[i] = static_cast<T>(scale_ * (q + zero_point));
    }
    check_finite(*out, "fake_quant");
    if (track<T>({&x})) {
        Tens<T>* o = out.get();
        link(out, "fake_quant", {x}, [o, x, lo, hi]() {
            x->ensure_grad();
            for (int64_t i = 0; i < o->numel(); ++i) {
                const double v = static_cast<double>(x->data[i]);
                if (v >= lo && v <= hi) x->grad[i] += o->grad[i];
            }
        });
    }
    return out;
}

}  // namespace hsib
