#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "subjectdiff/core/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sdg {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatR<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatR<T>>;

// ---------------------------------------------------------------------------
// Grad mode. Inference paths wrap forward passes in NoGradGuard so no graph
// is recorded.
// ---------------------------------------------------------------------------

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
};

template <typename T>
Tensor<T> make_result(std::vector<int> shape, std::vector<Tensor<T>> parents) {
    if (!grad_enabled()) return Tensor<T>::leaf(std::move(shape), false);
    return Tensor<T>::result(std::move(shape), std::move(parents));
}

// Batch work is split into fixed-size chunks so results are bitwise
// independent of how many threads execute them.
inline constexpr int kChunkRows = 4;

inline int num_chunks(int b) { return (b + kChunkRows - 1) / kChunkRows; }

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = make_result<T>(a.shape(), {a, b});
    const int64_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; i++) po[i] = pa[i] + pb[i];
    if (out.needs_grad()) {
        auto ta = a, tb = b;
        out.set_backprop([ta, tb, n](auto& self) mutable {
            ta.accum_grad(self.g.data(), n);
            tb.accum_grad(self.g.data(), n);
        });
    }
    return out;
}

// a + alpha * b
template <typename T>
Tensor<T> add_scaled(const Tensor<T>& a, const Tensor<T>& b, T alpha) {
    if (a.shape() != b.shape()) throw std::invalid_argument("add_scaled: shape mismatch");
    auto out = make_result<T>(a.shape(), {a, b});
    const int64_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; i++) po[i] = pa[i] + alpha * pb[i];
    if (out.needs_grad()) {
        auto ta = a, tb = b;
        out.set_backprop([ta, tb, n, alpha](auto& self) mutable {
            ta.accum_grad(self.g.data(), n);
            if (tb.needs_grad()) {
                tb.impl()->ensure_grad();
                T* g = tb.impl()->g.data();
                const T* sg = self.g.data();
                for (int64_t i = 0; i < n; i++) g[i] += alpha * sg[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T s) {
    auto out = make_result<T>(a.shape(), {a});
    const int64_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; i++) po[i] = pa[i] * s;
    if (out.needs_grad()) {
        auto ta = a;
        out.set_backprop([ta, n, s](auto& self) mutable {
            if (!ta.needs_grad()) return;
            ta.impl()->ensure_grad();
            T* g = ta.impl()->g.data();
            const T* sg = self.g.data();
            for (int64_t i = 0; i < n; i++) g[i] += s * sg[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    auto out = make_result<T>(a.shape(), {a});
    const int64_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; i++) {
        T s = T(1) / (T(1) + std::exp(-pa[i]));
        po[i] = pa[i] * s;
    }
    if (out.needs_grad()) {
        auto ta = a;
        out.set_backprop([ta, n](auto& self) mutable {
            if (!ta.needs_grad()) return;
            ta.impl()->ensure_grad();
            const T* x = ta.data();
            T* g = ta.impl()->g.data();
            const T* sg = self.g.data();
            for (int64_t i = 0; i < n; i++) {
                T s = T(1) / (T(1) + std::exp(-x[i]));
                g[i] += sg[i] * (s + x[i] * s * (T(1) - s));
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& a) {
    auto out = make_result<T>(a.shape(), {a});
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; i++) out.data()[i] = std::exp(a.data()[i]);
    if (out.needs_grad()) {
        auto ta = a;
        std::vector<T> y = out.values();
        out.set_backprop([ta, y, n](auto& self) mutable {
            if (!ta.needs_grad()) return;
            ta.impl()->ensure_grad();
            T* g = ta.impl()->g.data();
            for (int64_t i = 0; i < n; i++) g[i] += self.g[i] * y[i];
        });
    }
    return out;
}

// y = x * s[0] with learnable scalar s.
template <typename T>
Tensor<T> scale_by_param(const Tensor<T>& x, const Tensor<T>& s) {
    if (s.numel() != 1) throw std::invalid_argument("scale_by_param: s must be scalar");
    auto out = make_result<T>(x.shape(), {x, s});
    const int64_t n = x.numel();
    const T sv = s.data()[0];
    for (int64_t i = 0; i < n; i++) out.data()[i] = x.data()[i] * sv;
    if (out.needs_grad()) {
        auto tx = x, ts = s;
        out.set_backprop([tx, ts, n, sv](auto& self) mutable {
            const T* sg = self.g.data();
            if (tx.needs_grad()) {
                tx.impl()->ensure_grad();
                T* g = tx.impl()->g.data();
                for (int64_t i = 0; i < n; i++) g[i] += sv * sg[i];
            }
            if (ts.needs_grad()) {
                ts.impl()->ensure_grad();
                const T* xv = tx.data();
                T acc = T(0);
                for (int64_t i = 0; i < n; i++) acc += xv[i] * sg[i];
                ts.impl()->g[0] += acc;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.numel()) throw std::invalid_argument("reshape: numel mismatch");
    auto out = make_result<T>(std::move(shape), {a});
    out.values() = a.values();
    if (out.needs_grad()) {
        auto ta = a;
        out.set_backprop([ta](auto& self) mutable { ta.accum_grad(self.g.data(), static_cast<int64_t>(self.g.size())); });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dense / matmul
// ---------------------------------------------------------------------------

// x [N,K] @ w [K,M] (+ b [M]) -> [N,M]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.size(1) != w.size(0))
        throw std::invalid_argument("linear: bad shapes");
    const int N = x.size(0), K = x.size(1), M = w.size(1);
    std::vector<Tensor<T>> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    auto out = make_result<T>({N, M}, std::move(parents));
    CMapM<T> xm(x.data(), N, K), wm(w.data(), K, M);
    MapM<T> om(out.data(), N, M);
    om.noalias() = xm * wm;
    if (b.defined()) {
        if (b.numel() != M) throw std::invalid_argument("linear: bias size");
        for (int i = 0; i < N; i++)
            for (int j = 0; j < M; j++) out.data()[static_cast<int64_t>(i) * M + j] += b.data()[j];
    }
    if (out.needs_grad()) {
        auto tx = x, tw = w, tb = b;
        out.set_backprop([tx, tw, tb, N, K, M](auto& self) mutable {
            CMapM<T> gy(self.g.data(), N, M);
            if (tx.needs_grad()) {
                tx.impl()->ensure_grad();
                MapM<T> gx(tx.impl()->g.data(), N, K);
                CMapM<T> wm(tw.data(), K, M);
                gx.noalias() += gy * wm.transpose();
            }
            if (tw.needs_grad()) {
                tw.impl()->ensure_grad();
                MapM<T> gw(tw.impl()->g.data(), K, M);
                CMapM<T> xm(tx.data(), N, K);
                gw.noalias() += xm.transpose() * gy;
            }
            if (tb.defined() && tb.needs_grad()) {
                tb.impl()->ensure_grad();
                T* gb = tb.impl()->g.data();
                for (int i = 0; i < N; i++)
                    for (int j = 0; j < M; j++) gb[j] += self.g[static_cast<size_t>(i) * M + j];
            }
        });
    }
    return out;
}

// a [N,D] @ b [M,D]^T -> [N,M]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.size(1) != b.size(1))
        throw std::invalid_argument("matmul_nt: bad shapes");
    const int N = a.size(0), D = a.size(1), M = b.size(0);
    auto out = make_result<T>({N, M}, {a, b});
    CMapM<T> am(a.data(), N, D), bm(b.data(), M, D);
    MapM<T> om(out.data(), N, M);
    om.noalias() = am * bm.transpose();
    if (out.needs_grad()) {
        auto ta = a, tb = b;
        out.set_backprop([ta, tb, N, D, M](auto& self) mutable {
            CMapM<T> gy(self.g.data(), N, M);
            if (ta.needs_grad()) {
                ta.impl()->ensure_grad();
                MapM<T> ga(ta.impl()->g.data(), N, D);
                CMapM<T> bm(tb.data(), M, D);
                ga.noalias() += gy * bm;
            }
            if (tb.needs_grad()) {
                tb.impl()->ensure_grad();
                MapM<T> gb(tb.impl()->g.data(), M, D);
                CMapM<T> am(ta.data(), N, D);
                gb.noalias() += gy.transpose() * am;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution (NCHW, square kernel). im2col + GEMM, chunked over batch.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int OH, int OW, T* cols) {
    // cols: [OH*OW, C*k*k], column index ordered (c, ki, kj)
    const int K = C * k * k;
    for (int oh = 0; oh < OH; oh++) {
        for (int ow = 0; ow < OW; ow++) {
            T* row = cols + (static_cast<int64_t>(oh) * OW + ow) * K;
            int idx = 0;
            for (int c = 0; c < C; c++) {
                const T* xc = x + static_cast<int64_t>(c) * H * W;
                for (int ki = 0; ki < k; ki++) {
                    const int ih = oh * stride + ki - pad;
                    if (ih < 0 || ih >= H) {
                        for (int kj = 0; kj < k; kj++) row[idx++] = T(0);
                        continue;
                    }
                    for (int kj = 0; kj < k; kj++) {
                        const int iw = ow * stride + kj - pad;
                        row[idx++] = (iw < 0 || iw >= W) ? T(0) : xc[ih * W + iw];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, int C, int H, int W, int k, int stride, int pad, int OH, int OW, T* dx) {
    const int K = C * k * k;
    for (int oh = 0; oh < OH; oh++) {
        for (int ow = 0; ow < OW; ow++) {
            const T* row = cols + (static_cast<int64_t>(oh) * OW + ow) * K;
            int idx = 0;
            for (int c = 0; c < C; c++) {
                T* xc = dx + static_cast<int64_t>(c) * H * W;
                for (int ki = 0; ki < k; ki++) {
                    const int ih = oh * stride + ki - pad;
                    if (ih < 0 || ih >= H) {
                        idx += k;
                        continue;
                    }
                    for (int kj = 0; kj < k; kj++) {
                        const int iw = ow * stride + kj - pad;
                        if (iw >= 0 && iw < W) xc[ih * W + iw] += row[idx];
                        idx++;
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x [B,C,H,W], w [O,C,k,k], b [O] (optional) -> [B,O,OH,OW]
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4 || x.size(1) != w.size(1) || w.size(2) != w.size(3))
        throw std::invalid_argument("conv2d: bad shapes");
    const int B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    const int O = w.size(0), k = w.size(2);
    const int OH = (H + 2 * pad - k) / stride + 1;
    const int OW = (W + 2 * pad - k) / stride + 1;
    if (OH <= 0 || OW <= 0) throw std::invalid_argument("conv2d: empty output");
    const int K = C * k * k;
    const int M = OH * OW;

    std::vector<Tensor<T>> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    auto out = make_result<T>({B, O, OH, OW}, std::move(parents));

    const int nch = num_chunks(B);
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < nch; ci++) {
        const int b0 = ci * kChunkRows, b1 = std::min(B, b0 + kChunkRows);
        std::vector<T> cols(static_cast<size_t>(b1 - b0) * M * K);
        MatR<T> omat(static_cast<int64_t>(b1 - b0) * M, O);
        for (int bi = b0; bi < b1; bi++)
            detail::im2col(x.data() + static_cast<int64_t>(bi) * C * H * W, C, H, W, k, stride, pad, OH, OW,
                           cols.data() + static_cast<size_t>(bi - b0) * M * K);
        CMapM<T> cm(cols.data(), static_cast<int64_t>(b1 - b0) * M, K);
        CMapM<T> wm(w.data(), O, K);
        omat.noalias() = cm * wm.transpose();
        for (int bi = b0; bi < b1; bi++) {
            T* dst = out.data() + static_cast<int64_t>(bi) * O * M;
            const T* src = omat.data() + static_cast<int64_t>(bi - b0) * M * O;
            for (int o = 0; o < O; o++) {
                const T bias = b.defined() ? b.data()[o] : T(0);
                for (int m = 0; m < M; m++) dst[static_cast<int64_t>(o) * M + m] = src[static_cast<int64_t>(m) * O + o] + bias;
            }
        }
    }

    if (out.needs_grad()) {
        auto tx = x, tw = w, tb = b;
        out.set_backprop([tx, tw, tb, B, C, H, W, O, k, stride, pad, OH, OW, K, M](auto& self) mutable {
            const int nch = num_chunks(B);
            const bool need_dx = tx.needs_grad();
            const bool need_dw = tw.needs_grad();
            const bool need_db = tb.defined() && tb.needs_grad();
            std::vector<std::vector<T>> dw_parts(need_dw ? nch : 0);
            std::vector<std::vector<T>> db_parts(need_db ? nch : 0);
            if (need_dx) tx.impl()->ensure_grad();
#pragma omp parallel for schedule(static)
            for (int ci = 0; ci < nch; ci++) {
                const int b0 = ci * kChunkRows, b1 = std::min(B, b0 + kChunkRows);
                const int64_t rows = static_cast<int64_t>(b1 - b0) * M;
                std::vector<T> cols(static_cast<size_t>(rows) * K);
                for (int bi = b0; bi < b1; bi++)
                    detail::im2col(tx.data() + static_cast<int64_t>(bi) * C * H * W, C, H, W, k, stride, pad, OH, OW,
                                   cols.data() + static_cast<size_t>(bi - b0) * M * K);
                // gather dY into [rows, O]
                MatR<T> dy(rows, O);
                for (int bi = b0; bi < b1; bi++) {
                    const T* src = self.g.data() + static_cast<int64_t>(bi) * O * M;
                    T* dst = dy.data() + static_cast<int64_t>(bi - b0) * M * O;
                    for (int o = 0; o < O; o++)
                        for (int m = 0; m < M; m++) dst[static_cast<int64_t>(m) * O + o] = src[static_cast<int64_t>(o) * M + m];
                }
                if (need_dw) {
                    dw_parts[ci].assign(static_cast<size_t>(O) * K, T(0));
                    MapM<T> gw(dw_parts[ci].data(), O, K);
                    CMapM<T> cm(cols.data(), rows, K);
                    gw.noalias() = dy.transpose() * cm;
                }
                if (need_db) {
                    db_parts[ci].assign(static_cast<size_t>(O), T(0));
                    for (int64_t r = 0; r < rows; r++)
                        for (int o = 0; o < O; o++) db_parts[ci][static_cast<size_t>(o)] += dy.data()[r * O + o];
                }
                if (need_dx) {
                    MatR<T> dcols(rows, K);
                    CMapM<T> wm(tw.data(), O, K);
                    dcols.noalias() = dy * wm;
                    for (int bi = b0; bi < b1; bi++)
                        detail::col2im_add(dcols.data() + static_cast<int64_t>(bi - b0) * M * K, C, H, W, k, stride, pad,
                                           OH, OW, tx.impl()->g.data() + static_cast<int64_t>(bi) * C * H * W);
                }
            }
            if (need_dw) {
                tw.impl()->ensure_grad();
                T* gw = tw.impl()->g.data();
                for (int ci = 0; ci < nch; ci++)
                    for (size_t i = 0; i < dw_parts[ci].size(); i++) gw[i] += dw_parts[ci][i];
            }
            if (need_db) {
                tb.impl()->ensure_grad();
                T* gb = tb.impl()->g.data();
                for (int ci = 0; ci < nch; ci++)
                    for (int o = 0; o < O; o++) gb[o] += db_parts[ci][static_cast<size_t>(o)];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// GroupNorm (NCHW)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, int groups, T eps = T(1e-5)) {
    if (x.ndim() != 4) throw std::invalid_argument("group_norm: expects NCHW");
    const int B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    if (C % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    const int Cg = C / groups;
    const int64_t GN = static_cast<int64_t>(Cg) * H * W;
    auto out = make_result<T>(x.shape(), {x, gamma, beta});
    auto stats = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * groups * 2);

#pragma omp parallel for schedule(static) collapse(2)
    for (int b = 0; b < B; b++) {
        for (int g = 0; g < groups; g++) {
            const T* xs = x.data() + (static_cast<int64_t>(b) * C + static_cast<int64_t>(g) * Cg) * H * W;
            T mean = T(0);
            for (int64_t i = 0; i < GN; i++) mean += xs[i];
            mean /= static_cast<T>(GN);
            T var = T(0);
            for (int64_t i = 0; i < GN; i++) {
                T d = xs[i] - mean;
                var += d * d;
            }
            var /= static_cast<T>(GN);
            T rstd = T(1) / std::sqrt(var + eps);
            (*stats)[(static_cast<size_t>(b) * groups + g) * 2] = mean;
            (*stats)[(static_cast<size_t>(b) * groups + g) * 2 + 1] = rstd;
            T* os = out.data() + (static_cast<int64_t>(b) * C + static_cast<int64_t>(g) * Cg) * H * W;
            for (int c = 0; c < Cg; c++) {
                const T gam = gamma.data()[g * Cg + c], bet = beta.data()[g * Cg + c];
                const T* xc = xs + static_cast<int64_t>(c) * H * W;
                T* oc = os + static_cast<int64_t>(c) * H * W;
                for (int i = 0; i < H * W; i++) oc[i] = (xc[i] - mean) * rstd * gam + bet;
            }
        }
    }

    if (out.needs_grad()) {
        auto tx = x, tg = gamma, tb = beta;
        out.set_backprop([tx, tg, tb, stats, B, C, H, W, groups, Cg, GN](auto& self) mutable {
            if (tx.needs_grad()) {
                tx.impl()->ensure_grad();
#pragma omp parallel for schedule(static) collapse(2)
                for (int b = 0; b < B; b++) {
                    for (int g = 0; g < groups; g++) {
                        const T mean = (*stats)[(static_cast<size_t>(b) * groups + g) * 2];
                        const T rstd = (*stats)[(static_cast<size_t>(b) * groups + g) * 2 + 1];
                        const int64_t off = (static_cast<int64_t>(b) * C + static_cast<int64_t>(g) * Cg) * H * W;
                        const T* xs = tx.data() + off;
                        const T* gy = self.g.data() + off;
                        T s1 = T(0), s2 = T(0);
                        for (int c = 0; c < Cg; c++) {
                            const T gam = tg.data()[g * Cg + c];
                            for (int i = 0; i < H * W; i++) {
                                const int64_t j = static_cast<int64_t>(c) * H * W + i;
                                const T xh = (xs[j] - mean) * rstd;
                                s1 += gy[j] * gam;
                                s2 += gy[j] * gam * xh;
                            }
                        }
                        s1 /= static_cast<T>(GN);
                        s2 /= static_cast<T>(GN);
                        T* gx = tx.impl()->g.data() + off;
                        for (int c = 0; c < Cg; c++) {
                            const T gam = tg.data()[g * Cg + c];
                            for (int i = 0; i < H * W; i++) {
                                const int64_t j = static_cast<int64_t>(c) * H * W + i;
                                const T xh = (xs[j] - mean) * rstd;
                                gx[j] += rstd * (gy[j] * gam - s1 - xh * s2);
                            }
                        }
                    }
                }
            }
            if (tg.needs_grad() || tb.needs_grad()) {
                if (tg.needs_grad()) tg.impl()->ensure_grad();
                if (tb.needs_grad()) tb.impl()->ensure_grad();
                for (int b = 0; b < B; b++) {
                    for (int g = 0; g < groups; g++) {
                        const T mean = (*stats)[(static_cast<size_t>(b) * groups + g) * 2];
                        const T rstd = (*stats)[(static_cast<size_t>(b) * groups + g) * 2 + 1];
                        const int64_t off = (static_cast<int64_t>(b) * C + static_cast<int64_t>(g) * Cg) * H * W;
                        const T* xs = tx.data() + off;
                        const T* gy = self.g.data() + off;
                        for (int c = 0; c < Cg; c++) {
                            T dg = T(0), db = T(0);
                            for (int i = 0; i < H * W; i++) {
                                const int64_t j = static_cast<int64_t>(c) * H * W + i;
                                dg += gy[j] * (xs[j] - mean) * rstd;
                                db += gy[j];
                            }
                            if (tg.needs_grad()) tg.impl()->g[static_cast<size_t>(g) * Cg + c] += dg;
                            if (tb.needs_grad()) tb.impl()->g[static_cast<size_t>(g) * Cg + c] += db;
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention.
// q [B,Nq,C], k/v [B,Nk,C]; key_mask (optional) has B*Nk entries, 1 = attend.
// Rows whose keys are fully masked produce exact zeros.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                    std::shared_ptr<const std::vector<uint8_t>> key_mask = nullptr) {
    if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3) throw std::invalid_argument("attention: expects [B,N,C]");
    const int B = q.size(0), Nq = q.size(1), C = q.size(2);
    const int Nk = k.size(1);
    if (k.size(0) != B || v.size(0) != B || k.size(2) != C || v.size(2) != C || v.size(1) != Nk)
        throw std::invalid_argument("attention: shape mismatch");
    if (C % heads != 0) throw std::invalid_argument("attention: C % heads != 0");
    if (key_mask && static_cast<int>(key_mask->size()) != B * Nk)
        throw std::invalid_argument("attention: bad mask size");
    const int dh = C / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    auto out = make_result<T>({B, Nq, C}, {q, k, v});
    // probabilities cached for backward: [B, heads, Nq, Nk]
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * heads * Nq * Nk);

    using StridedMap = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;
    using StridedMapMut = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;

#pragma omp parallel for schedule(static) collapse(2)
    for (int b = 0; b < B; b++) {
        for (int h = 0; h < heads; h++) {
            StridedMap qh(q.data() + (static_cast<int64_t>(b) * Nq) * C + h * dh, Nq, dh, Eigen::OuterStride<>(C));
            StridedMap kh(k.data() + (static_cast<int64_t>(b) * Nk) * C + h * dh, Nk, dh, Eigen::OuterStride<>(C));
            StridedMap vh(v.data() + (static_cast<int64_t>(b) * Nk) * C + h * dh, Nk, dh, Eigen::OuterStride<>(C));
            MatR<T> s(Nq, Nk);
            s.noalias() = qh * kh.transpose();
            s *= scale;
            T* p = probs->data() + (static_cast<size_t>(b) * heads + h) * Nq * Nk;
            const uint8_t* m = key_mask ? key_mask->data() + static_cast<size_t>(b) * Nk : nullptr;
            for (int i = 0; i < Nq; i++) {
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < Nk; j++)
                    if (!m || m[j]) mx = std::max(mx, s(i, j));
                T sum = T(0);
                T* pr = p + static_cast<size_t>(i) * Nk;
                if (mx == -std::numeric_limits<T>::infinity()) {
                    for (int j = 0; j < Nk; j++) pr[j] = T(0);
                } else {
                    for (int j = 0; j < Nk; j++) {
                        pr[j] = (!m || m[j]) ? std::exp(s(i, j) - mx) : T(0);
                        sum += pr[j];
                    }
                    for (int j = 0; j < Nk; j++) pr[j] /= sum;
                }
            }
            CMapM<T> pm(p, Nq, Nk);
            StridedMapMut oh(out.data() + (static_cast<int64_t>(b) * Nq) * C + h * dh, Nq, dh, Eigen::OuterStride<>(C));
            oh.noalias() = pm * vh;
        }
    }

    if (out.needs_grad()) {
        auto tq = q, tk = k, tv = v;
        out.set_backprop([tq, tk, tv, probs, B, Nq, Nk, C, heads, dh, scale](auto& self) mutable {
            if (tq.needs_grad()) tq.impl()->ensure_grad();
            if (tk.needs_grad()) tk.impl()->ensure_grad();
            if (tv.needs_grad()) tv.impl()->ensure_grad();
#pragma omp parallel for schedule(static) collapse(2)
            for (int b = 0; b < B; b++) {
                for (int h = 0; h < heads; h++) {
                    StridedMap qh(tq.data() + (static_cast<int64_t>(b) * Nq) * C + h * dh, Nq, dh, Eigen::OuterStride<>(C));
                    StridedMap kh(tk.data() + (static_cast<int64_t>(b) * Nk) * C + h * dh, Nk, dh, Eigen::OuterStride<>(C));
                    StridedMap vh(tv.data() + (static_cast<int64_t>(b) * Nk) * C + h * dh, Nk, dh, Eigen::OuterStride<>(C));
                    StridedMap go(self.g.data() + (static_cast<int64_t>(b) * Nq) * C + h * dh, Nq, dh, Eigen::OuterStride<>(C));
                    CMapM<T> pm(probs->data() + (static_cast<size_t>(b) * heads + h) * Nq * Nk, Nq, Nk);
                    MatR<T> dp(Nq, Nk), ds(Nq, Nk);
                    dp.noalias() = go * vh.transpose();
                    for (int i = 0; i < Nq; i++) {
                        T rs = T(0);
                        for (int j = 0; j < Nk; j++) rs += dp(i, j) * pm(i, j);
                        for (int j = 0; j < Nk; j++) ds(i, j) = pm(i, j) * (dp(i, j) - rs) * scale;
                    }
                    if (tv.needs_grad()) {
                        StridedMapMut gv(tv.impl()->g.data() + (static_cast<int64_t>(b) * Nk) * C + h * dh, Nk, dh,
                                         Eigen::OuterStride<>(C));
                        gv.noalias() += pm.transpose() * go;
                    }
                    if (tq.needs_grad()) {
                        StridedMapMut gq(tq.impl()->g.data() + (static_cast<int64_t>(b) * Nq) * C + h * dh, Nq, dh,
                                         Eigen::OuterStride<>(C));
                        gq.noalias() += ds * kh;
                    }
                    if (tk.needs_grad()) {
                        StridedMapMut gk(tk.impl()->g.data() + (static_cast<int64_t>(b) * Nk) * C + h * dh, Nk, dh,
                                         Eigen::OuterStride<>(C));
                        gk.noalias() += ds.transpose() * qh;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layout helpers
// ---------------------------------------------------------------------------

// [B,C,H,W] -> [B,HW,C]
template <typename T>
Tensor<T> to_seq(const Tensor<T>& x) {
    const int B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    const int N = H * W;
    auto out = make_result<T>({B, N, C}, {x});
    for (int b = 0; b < B; b++) {
        const T* src = x.data() + static_cast<int64_t>(b) * C * N;
        T* dst = out.data() + static_cast<int64_t>(b) * N * C;
        for (int c = 0; c < C; c++)
            for (int n = 0; n < N; n++) dst[static_cast<int64_t>(n) * C + c] = src[static_cast<int64_t>(c) * N + n];
    }
    if (out.needs_grad()) {
        auto tx = x;
        out.set_backprop([tx, B, C, N](auto& self) mutable {
            if (!tx.needs_grad()) return;
            tx.impl()->ensure_grad();
            for (int b = 0; b < B; b++) {
                const T* src = self.g.data() + static_cast<int64_t>(b) * N * C;
                T* dst = tx.impl()->g.data() + static_cast<int64_t>(b) * C * N;
                for (int c = 0; c < C; c++)
                    for (int n = 0; n < N; n++) dst[static_cast<int64_t>(c) * N + n] += src[static_cast<int64_t>(n) * C + c];
            }
        });
    }
    return out;
}

// [B,HW,C] -> [B,C,H,W]
template <typename T>
Tensor<T> from_seq(const Tensor<T>& x, int H, int W) {
    const int B = x.size(0), N = x.size(1), C = x.size(2);
    if (N != H * W) throw std::invalid_argument("from_seq: N != H*W");
    auto out = make_result<T>({B, C, H, W}, {x});
    for (int b = 0; b < B; b++) {
        const T* src = x.data() + static_cast<int64_t>(b) * N * C;
        T* dst = out.data() + static_cast<int64_t>(b) * C * N;
        for (int n = 0; n < N; n++)
            for (int c = 0; c < C; c++) dst[static_cast<int64_t>(c) * N + n] = src[static_cast<int64_t>(n) * C + c];
    }
    if (out.needs_grad()) {
        auto tx = x;
        out.set_backprop([tx, B, C, N](auto& self) mutable {
            if (!tx.needs_grad()) return;
            tx.impl()->ensure_grad();
            for (int b = 0; b < B; b++) {
                const T* src = self.g.data() + static_cast<int64_t>(b) * C * N;
                T* dst = tx.impl()->g.data() + static_cast<int64_t>(b) * N * C;
                for (int n = 0; n < N; n++)
                    for (int c = 0; c < C; c++) dst[static_cast<int64_t>(n) * C + c] += src[static_cast<int64_t>(c) * N + n];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_ch(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 4 || b.ndim() != 4 || a.size(0) != b.size(0) || a.size(2) != b.size(2) || a.size(3) != b.size(3))
        throw std::invalid_argument("concat_ch: shape mismatch");
    const int B = a.size(0), Ca = a.size(1), Cb = b.size(1), H = a.size(2), W = a.size(3);
    const int64_t hw = static_cast<int64_t>(H) * W;
    auto out = make_result<T>({B, Ca + Cb, H, W}, {a, b});
    for (int bi = 0; bi < B; bi++) {
        std::copy_n(a.data() + bi * Ca * hw, Ca * hw, out.data() + static_cast<int64_t>(bi) * (Ca + Cb) * hw);
        std::copy_n(b.data() + bi * Cb * hw, Cb * hw, out.data() + static_cast<int64_t>(bi) * (Ca + Cb) * hw + Ca * hw);
    }
    if (out.needs_grad()) {
        auto ta = a, tb = b;
        out.set_backprop([ta, tb, B, Ca, Cb, hw](auto& self) mutable {
            for (int bi = 0; bi < B; bi++) {
                const T* g = self.g.data() + static_cast<int64_t>(bi) * (Ca + Cb) * hw;
                if (ta.needs_grad()) {
                    ta.impl()->ensure_grad();
                    T* ga = ta.impl()->g.data() + bi * Ca * hw;
                    for (int64_t i = 0; i < Ca * hw; i++) ga[i] += g[i];
                }
                if (tb.needs_grad()) {
                    tb.impl()->ensure_grad();
                    T* gb = tb.impl()->g.data() + bi * Cb * hw;
                    for (int64_t i = 0; i < Cb * hw; i++) gb[i] += g[Ca * hw + i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    const int B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    auto out = make_result<T>({B, C, 2 * H, 2 * W}, {x});
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; bc++) {
        const T* src = x.data() + bc * H * W;
        T* dst = out.data() + bc * 4 * H * W;
        for (int i = 0; i < H; i++)
            for (int j = 0; j < W; j++) {
                const T val = src[i * W + j];
                dst[(2 * i) * 2 * W + 2 * j] = val;
                dst[(2 * i) * 2 * W + 2 * j + 1] = val;
                dst[(2 * i + 1) * 2 * W + 2 * j] = val;
                dst[(2 * i + 1) * 2 * W + 2 * j + 1] = val;
            }
    }
    if (out.needs_grad()) {
        auto tx = x;
        out.set_backprop([tx, B, C, H, W](auto& self) mutable {
            if (!tx.needs_grad()) return;
            tx.impl()->ensure_grad();
            for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; bc++) {
                T* gx = tx.impl()->g.data() + bc * H * W;
                const T* g = self.g.data() + bc * 4 * H * W;
                for (int i = 0; i < H; i++)
                    for (int j = 0; j < W; j++)
                        gx[i * W + j] += g[(2 * i) * 2 * W + 2 * j] + g[(2 * i) * 2 * W + 2 * j + 1] +
                                         g[(2 * i + 1) * 2 * W + 2 * j] + g[(2 * i + 1) * 2 * W + 2 * j + 1];
            }
        });
    }
    return out;
}

// x [B,C,H,W] + y [B,C] broadcast over spatial dims
template <typename T>
Tensor<T> add_spatial_bias(const Tensor<T>& x, const Tensor<T>& y) {
    if (x.ndim() != 4 || y.ndim() != 2 || x.size(0) != y.size(0) || x.size(1) != y.size(1))
        throw std::invalid_argument("add_spatial_bias: shape mismatch");
    const int B = x.size(0), C = x.size(1);
    const int64_t hw = static_cast<int64_t>(x.size(2)) * x.size(3);
    auto out = make_result<T>(x.shape(), {x, y});
    for (int b = 0; b < B; b++)
        for (int c = 0; c < C; c++) {
            const T add = y.data()[static_cast<int64_t>(b) * C + c];
            const T* src = x.data() + (static_cast<int64_t>(b) * C + c) * hw;
            T* dst = out.data() + (static_cast<int64_t>(b) * C + c) * hw;
            for (int64_t i = 0; i < hw; i++) dst[i] = src[i] + add;
        }
    if (out.needs_grad()) {
        auto tx = x, ty = y;
        out.set_backprop([tx, ty, B, C, hw](auto& self) mutable {
            if (tx.needs_grad()) tx.accum_grad(self.g.data(), static_cast<int64_t>(self.g.size()));
            if (ty.needs_grad()) {
                ty.impl()->ensure_grad();
                for (int b = 0; b < B; b++)
                    for (int c = 0; c < C; c++) {
                        const T* g = self.g.data() + (static_cast<int64_t>(b) * C + c) * hw;
                        T acc = T(0);
                        for (int64_t i = 0; i < hw; i++) acc += g[i];
                        ty.impl()->g[static_cast<size_t>(b) * C + c] += acc;
                    }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const int B = x.size(0), C = x.size(1);
    const int64_t hw = static_cast<int64_t>(x.size(2)) * x.size(3);
    auto out = make_result<T>({B, C}, {x});
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; bc++) {
        const T* src = x.data() + bc * hw;
        T acc = T(0);
        for (int64_t i = 0; i < hw; i++) acc += src[i];
        out.data()[bc] = acc / static_cast<T>(hw);
    }
    if (out.needs_grad()) {
        auto tx = x;
        out.set_backprop([tx, B, C, hw](auto& self) mutable {
            if (!tx.needs_grad()) return;
            tx.impl()->ensure_grad();
            for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; bc++) {
                const T g = self.g[static_cast<size_t>(bc)] / static_cast<T>(hw);
                T* gx = tx.impl()->g.data() + bc * hw;
                for (int64_t i = 0; i < hw; i++) gx[i] += g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding / pooling / normalization
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embed_rows(const Tensor<T>& table, const std::vector<int>& ids) {
    const int V = table.size(0), D = table.size(1);
    const int N = static_cast<int>(ids.size());
    for (int id : ids)
        if (id < 0 || id >= V) throw std::invalid_argument("embed_rows: id out of range");
    auto out = make_result<T>({N, D}, {table});
    for (int i = 0; i < N; i++)
        std::copy_n(table.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * D, D,
                    out.data() + static_cast<int64_t>(i) * D);
    if (out.needs_grad()) {
        auto tt = table;
        auto ids_copy = ids;
        out.set_backprop([tt, ids_copy, N, D](auto& self) mutable {
            if (!tt.needs_grad()) return;
            tt.impl()->ensure_grad();
            for (int i = 0; i < N; i++) {
                T* gt = tt.impl()->g.data() + static_cast<int64_t>(ids_copy[static_cast<size_t>(i)]) * D;
                const T* g = self.g.data() + static_cast<int64_t>(i) * D;
                for (int d = 0; d < D; d++) gt[d] += g[d];
            }
        });
    }
    return out;
}

// x [B,L,D], mask [B*L] (1 = valid) -> [B,D]; all-masked rows produce zeros.
template <typename T>
Tensor<T> masked_mean_rows(const Tensor<T>& x, std::shared_ptr<const std::vector<uint8_t>> mask) {
    const int B = x.size(0), L = x.size(1), D = x.size(2);
    if (static_cast<int>(mask->size()) != B * L) throw std::invalid_argument("masked_mean_rows: bad mask");
    auto out = make_result<T>({B, D}, {x});
    std::vector<int> counts(static_cast<size_t>(B), 0);
    for (int b = 0; b < B; b++) {
        int cnt = 0;
        T* dst = out.data() + static_cast<int64_t>(b) * D;
        for (int l = 0; l < L; l++) {
            if (!(*mask)[static_cast<size_t>(b) * L + l]) continue;
            cnt++;
            const T* src = x.data() + (static_cast<int64_t>(b) * L + l) * D;
            for (int d = 0; d < D; d++) dst[d] += src[d];
        }
        counts[static_cast<size_t>(b)] = cnt;
        if (cnt > 0)
            for (int d = 0; d < D; d++) dst[d] /= static_cast<T>(cnt);
    }
    if (out.needs_grad()) {
        auto tx = x;
        out.set_backprop([tx, mask, counts, B, L, D](auto& self) mutable {
            if (!tx.needs_grad()) return;
            tx.impl()->ensure_grad();
            for (int b = 0; b < B; b++) {
                if (counts[static_cast<size_t>(b)] == 0) continue;
                const T inv = T(1) / static_cast<T>(counts[static_cast<size_t>(b)]);
                const T* g = self.g.data() + static_cast<int64_t>(b) * D;
                for (int l = 0; l < L; l++) {
                    if (!(*mask)[static_cast<size_t>(b) * L + l]) continue;
                    T* gx = tx.impl()->g.data() + (static_cast<int64_t>(b) * L + l) * D;
                    for (int d = 0; d < D; d++) gx[d] += g[d] * inv;
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
    const int N = x.size(0), D = x.size(1);
    auto out = make_result<T>(x.shape(), {x});
    auto inv_norms = std::make_shared<std::vector<T>>(static_cast<size_t>(N));
    for (int i = 0; i < N; i++) {
        const T* src = x.data() + static_cast<int64_t>(i) * D;
        T ss = T(0);
        for (int d = 0; d < D; d++) ss += src[d] * src[d];
        const T inv = T(1) / std::sqrt(ss + eps);
        (*inv_norms)[static_cast<size_t>(i)] = inv;
        T* dst = out.data() + static_cast<int64_t>(i) * D;
        for (int d = 0; d < D; d++) dst[d] = src[d] * inv;
    }
    if (out.needs_grad()) {
        auto tx = x;
        auto yvals = out.values();
        out.set_backprop([tx, inv_norms, yvals, N, D](auto& self) mutable {
            if (!tx.needs_grad()) return;
            tx.impl()->ensure_grad();
            for (int i = 0; i < N; i++) {
                const T inv = (*inv_norms)[static_cast<size_t>(i)];
                const T* y = yvals.data() + static_cast<int64_t>(i) * D;
                const T* g = self.g.data() + static_cast<int64_t>(i) * D;
                T dot = T(0);
                for (int d = 0; d < D; d++) dot += g[d] * y[d];
                T* gx = tx.impl()->g.data() + static_cast<int64_t>(i) * D;
                for (int d = 0; d < D; d++) gx[d] += inv * (g[d] - y[d] * dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// mean over all elements of (a-b)^2 -> scalar
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("mse_loss: shape mismatch");
    const int64_t n = a.numel();
    auto out = make_result<T>({1}, {a, b});
    T acc = T(0);
    for (int64_t i = 0; i < n; i++) {
        const T d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    out.data()[0] = acc / static_cast<T>(n);
    if (out.needs_grad()) {
        auto ta = a, tb = b;
        out.set_backprop([ta, tb, n](auto& self) mutable {
            const T g = self.g[0] * T(2) / static_cast<T>(n);
            if (ta.needs_grad()) ta.impl()->ensure_grad();
            if (tb.needs_grad()) tb.impl()->ensure_grad();
            for (int64_t i = 0; i < n; i++) {
                const T d = (ta.data()[i] - tb.data()[i]) * g;
                if (ta.needs_grad()) ta.impl()->g[static_cast<size_t>(i)] += d;
                if (tb.needs_grad()) tb.impl()->g[static_cast<size_t>(i)] -= d;
            }
        });
    }
    return out;
}

// mean cross-entropy over rows of logits [N,M] against integer targets
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int>& targets) {
    const int N = logits.size(0), M = logits.size(1);
    if (static_cast<int>(targets.size()) != N) throw std::invalid_argument("cross_entropy: bad targets");
    auto out = make_result<T>({1}, {logits});
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * M);
    T loss = T(0);
    for (int i = 0; i < N; i++) {
        const T* row = logits.data() + static_cast<int64_t>(i) * M;
        T mx = row[0];
        for (int j = 1; j < M; j++) mx = std::max(mx, row[j]);
        T sum = T(0);
        T* pr = probs->data() + static_cast<size_t>(i) * M;
        for (int j = 0; j < M; j++) {
            pr[j] = std::exp(row[j] - mx);
            sum += pr[j];
        }
        for (int j = 0; j < M; j++) pr[j] /= sum;
        loss -= std::log(std::max(pr[targets[static_cast<size_t>(i)]], std::numeric_limits<T>::min()));
    }
    out.data()[0] = loss / static_cast<T>(N);
    if (out.needs_grad()) {
        auto tl = logits;
        auto tg = targets;
        out.set_backprop([tl, tg, probs, N, M](auto& self) mutable {
            if (!tl.needs_grad()) return;
            tl.impl()->ensure_grad();
            const T g = self.g[0] / static_cast<T>(N);
            for (int i = 0; i < N; i++) {
                T* gx = tl.impl()->g.data() + static_cast<int64_t>(i) * M;
                const T* pr = probs->data() + static_cast<size_t>(i) * M;
                for (int j = 0; j < M; j++) gx[j] += g * (pr[j] - (j == tg[static_cast<size_t>(i)] ? T(1) : T(0)));
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_many(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("add_many: empty");
    Tensor<T> acc = xs[0];
    for (size_t i = 1; i < xs.size(); i++) acc = add(acc, xs[i]);
    return acc;
}

}  // namespace sdg
