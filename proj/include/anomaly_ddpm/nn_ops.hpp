#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <vector>

#include "anomaly_ddpm/autograd.hpp"
#include "anomaly_ddpm/tensor.hpp"

namespace anomaly_ddpm::nn {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

namespace detail {

inline void im2col(const float* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Ho, int Wo, float* col) {
    const int P = Ho * Wo;
    for (int c = 0; c < C; ++c) {
        const float* src = x + static_cast<size_t>(c) * H * W;
        for (int dy = 0; dy < kh; ++dy) {
            for (int dx = 0; dx < kw; ++dx) {
                float* dst = col + (static_cast<size_t>(c) * kh * kw + dy * kw + dx) * P;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + dy;
                    if (iy < 0 || iy >= H) {
                        std::memset(dst + static_cast<size_t>(oy) * Wo, 0, sizeof(float) * Wo);
                        continue;
                    }
                    const float* srow = src + static_cast<size_t>(iy) * W;
                    float* drow = dst + static_cast<size_t>(oy) * Wo;
                    int ox = 0;
                    if (stride == 1) {
                        // contiguous copy with edge clamping
                        for (; ox < Wo; ++ox) {
                            int ix = ox - pad + dx;
                            drow[ox] = (ix >= 0 && ix < W) ? srow[ix] : 0.0f;
                        }
                    } else {
                        for (; ox < Wo; ++ox) {
                            int ix = ox * stride - pad + dx;
                            drow[ox] = (ix >= 0 && ix < W) ? srow[ix] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

inline void col2im_add(const float* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int Ho, int Wo, float* x) {
    const int P = Ho * Wo;
    for (int c = 0; c < C; ++c) {
        float* dst = x + static_cast<size_t>(c) * H * W;
        for (int dy = 0; dy < kh; ++dy) {
            for (int dx = 0; dx < kw; ++dx) {
                const float* src = col + (static_cast<size_t>(c) * kh * kw + dy * kw + dx) * P;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + dy;
                    if (iy < 0 || iy >= H) continue;
                    float* drow = dst + static_cast<size_t>(iy) * W;
                    const float* srow = src + static_cast<size_t>(oy) * Wo;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + dx;
                        if (ix >= 0 && ix < W) drow[ix] += srow[ox];
                    }
                }
            }
        }
    }
}

inline std::vector<float>& scratch() {
    thread_local std::vector<float> buf;
    return buf;
}

}  // namespace detail

// 2-D convolution, NCHW input, [Co,Ci,kh,kw] weights. The 1x1/stride-1 case
// skips im2col entirely.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.ndim() != 4 || wv.ndim() != 4) throw ShapeError("conv2d expects 4-D input and weight");
    const int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != Ci)
        throw ShapeError("conv2d channel mismatch: input " + std::to_string(Ci) + ", weight " +
                         std::to_string(wv.dim(1)));
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    const int P = Ho * Wo;
    const int K = Ci * kh * kw;
    const bool direct = (kh == 1 && kw == 1 && stride == 1 && pad == 0);

    Tensor y({N, Co, Ho, Wo});
    const float* bp = b.defined() ? b.val().data() : nullptr;

#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        const float* xs = xv.data() + static_cast<size_t>(n) * Ci * H * W;
        float* ys = y.data() + static_cast<size_t>(n) * Co * P;
        CMapRM Wm(wv.data(), Co, K);
        MapRM Ym(ys, Co, P);
        if (direct) {
            CMapRM Xm(xs, Ci, P);
            Ym.noalias() = Wm * Xm;
        } else {
            auto& buf = detail::scratch();
            buf.resize(static_cast<size_t>(K) * P);
            detail::im2col(xs, Ci, H, W, kh, kw, stride, pad, Ho, Wo, buf.data());
            CMapRM Cm(buf.data(), K, P);
            Ym.noalias() = Wm * Cm;
        }
        if (bp)
            for (int co = 0; co < Co; ++co) Ym.row(co).array() += bp[co];
    }

    return make_op(std::move(y), {x, w, b}, [x, w, b, stride, pad, N, Ci, H, W, Co, kh, kw, Ho, Wo,
                                             P, K, direct](Node& node) {
        const Tensor& g = node.grad;
        const Tensor& xv2 = x.val();
        const Tensor& wv2 = w.val();

        // per-sample weight/bias contributions, reduced in fixed order
        std::vector<float> dwbuf;
        std::vector<float> dbbuf;
        const bool need_dw = w.requires_grad();
        const bool need_db = b.defined() && b.requires_grad();
        if (need_dw) dwbuf.assign(static_cast<size_t>(N) * Co * K, 0.0f);
        if (need_db) dbbuf.assign(static_cast<size_t>(N) * Co, 0.0f);
        const bool need_dx = x.requires_grad();
        Tensor* dx = nullptr;
        if (need_dx) dx = &x.node()->ensure_grad();

#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
            const float* gs = g.data() + static_cast<size_t>(n) * Co * P;
            CMapRM Gm(gs, Co, P);
            auto& buf = detail::scratch();
            const float* colp = nullptr;
            if (need_dw || (need_dx && !direct)) buf.resize(static_cast<size_t>(K) * P);
            if (need_dw) {
                if (direct) {
                    colp = xv2.data() + static_cast<size_t>(n) * Ci * P;
                } else {
                    detail::im2col(xv2.data() + static_cast<size_t>(n) * Ci * H * W, Ci, H, W, kh,
                                   kw, stride, pad, Ho, Wo, buf.data());
                    colp = buf.data();
                }
                MapRM Dw(dwbuf.data() + static_cast<size_t>(n) * Co * K, Co, K);
                Dw.noalias() = Gm * CMapRM(colp, K, P).transpose();
            }
            if (need_db) {
                for (int co = 0; co < Co; ++co)
                    dbbuf[static_cast<size_t>(n) * Co + co] = Gm.row(co).sum();
            }
            if (need_dx) {
                float* dxs = dx->data() + static_cast<size_t>(n) * Ci * H * W;
                CMapRM Wm(wv2.data(), Co, K);
                if (direct) {
                    MapRM Dx(dxs, Ci, P);
                    Dx.noalias() += Wm.transpose() * Gm;
                } else {
                    // reuse scratch for dcol; col content no longer needed
                    MapRM Dc(buf.data(), K, P);
                    Dc.noalias() = Wm.transpose() * Gm;
                    detail::col2im_add(buf.data(), Ci, H, W, kh, kw, stride, pad, Ho, Wo, dxs);
                }
            }
        }

        if (need_dw) {
            Tensor& dw = w.node()->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const float* src = dwbuf.data() + static_cast<size_t>(n) * Co * K;
                float* dst = dw.data();
                for (int i = 0; i < Co * K; ++i) dst[i] += src[i];
            }
        }
        if (need_db) {
            Tensor& db = b.node()->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int co = 0; co < Co; ++co) db[co] += dbbuf[static_cast<size_t>(n) * Co + co];
        }
    });
}

inline Var linear(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.ndim() != 2 || wv.ndim() != 2) throw ShapeError("linear expects 2-D input and weight");
    const int N = xv.dim(0), D = xv.dim(1), O = wv.dim(0);
    if (wv.dim(1) != D) throw ShapeError("linear dimension mismatch");

    Tensor y({N, O});
    {
        CMapRM Xm(xv.data(), N, D), Wm(wv.data(), O, D);
        MapRM Ym(y.data(), N, O);
        Ym.noalias() = Xm * Wm.transpose();
        if (b.defined()) {
            const float* bp = b.val().data();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) Ym(n, o) += bp[o];
        }
    }

    return make_op(std::move(y), {x, w, b}, [x, w, b, N, D, O](Node& node) {
        CMapRM Gm(node.grad.data(), N, O);
        if (x.requires_grad()) {
            MapRM Dx(x.node()->ensure_grad().data(), N, D);
            Dx.noalias() += Gm * CMapRM(w.val().data(), O, D);
        }
        if (w.requires_grad()) {
            MapRM Dw(w.node()->ensure_grad().data(), O, D);
            Dw.noalias() += Gm.transpose() * CMapRM(x.val().data(), N, D);
        }
        if (b.defined() && b.requires_grad()) {
            Tensor& db = b.node()->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) db[o] += Gm(n, o);
        }
    });
}

// GroupNorm over (C/G, H, W) per sample-group, with affine scale/shift.
inline Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta,
                      float eps = 1e-5f) {
    const Tensor& xv = x.val();
    if (xv.ndim() != 4) throw ShapeError("group_norm expects 4-D input");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    const int cg = C / groups;
    const int64_t m = static_cast<int64_t>(cg) * H * W;
    const int HW = H * W;

    Tensor y(xv.shape());
    auto stats = std::make_shared<std::vector<float>>(static_cast<size_t>(N) * groups * 2);
    const float* gp = gamma.val().data();
    const float* bp = beta.val().data();

#pragma omp parallel for schedule(static) collapse(2)
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const float* xs = xv.data() + (static_cast<size_t>(n) * C + g * cg) * HW;
            float* ys = y.data() + (static_cast<size_t>(n) * C + g * cg) * HW;
            double mean = 0.0;
            for (int64_t i = 0; i < m; ++i) mean += xs[i];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (int64_t i = 0; i < m; ++i) {
                double d = xs[i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(m);
            float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
            (*stats)[(static_cast<size_t>(n) * groups + g) * 2] = static_cast<float>(mean);
            (*stats)[(static_cast<size_t>(n) * groups + g) * 2 + 1] = inv;
            for (int c = 0; c < cg; ++c) {
                float ga = gp[g * cg + c], be = bp[g * cg + c];
                const float* xc = xs + static_cast<size_t>(c) * HW;
                float* yc = ys + static_cast<size_t>(c) * HW;
                for (int i = 0; i < HW; ++i)
                    yc[i] = (xc[i] - static_cast<float>(mean)) * inv * ga + be;
            }
        }
    }

    return make_op(std::move(y), {x, gamma, beta},
                   [x, gamma, beta, stats, groups, N, C, H, W, cg, m, HW](Node& node) {
        const Tensor& gout = node.grad;
        const Tensor& xv2 = x.val();
        const float* gp2 = gamma.val().data();
        const bool need_dx = x.requires_grad();
        Tensor* dxt = need_dx ? &x.node()->ensure_grad() : nullptr;

        std::vector<double> dgamma(static_cast<size_t>(C), 0.0), dbeta(static_cast<size_t>(C), 0.0);
        for (int n = 0; n < N; ++n) {
            for (int g = 0; g < groups; ++g) {
                float mean = (*stats)[(static_cast<size_t>(n) * groups + g) * 2];
                float inv = (*stats)[(static_cast<size_t>(n) * groups + g) * 2 + 1];
                const float* xs = xv2.data() + (static_cast<size_t>(n) * C + g * cg) * HW;
                const float* gs = gout.data() + (static_cast<size_t>(n) * C + g * cg) * HW;
                // ds1 = sum(dxhat), ds2 = sum(dxhat * xhat)
                double ds1 = 0.0, ds2 = 0.0;
                for (int c = 0; c < cg; ++c) {
                    float ga = gp2[g * cg + c];
                    const float* xc = xs + static_cast<size_t>(c) * HW;
                    const float* gc = gs + static_cast<size_t>(c) * HW;
                    double sg = 0.0, sgx = 0.0;
                    for (int i = 0; i < HW; ++i) {
                        float xhat = (xc[i] - mean) * inv;
                        sg += gc[i];
                        sgx += static_cast<double>(gc[i]) * xhat;
                        ds1 += static_cast<double>(gc[i]) * ga;
                        ds2 += static_cast<double>(gc[i]) * ga * xhat;
                    }
                    dbeta[static_cast<size_t>(g * cg + c)] += sg;
                    dgamma[static_cast<size_t>(g * cg + c)] += sgx;
                }
                if (need_dx) {
                    float* dxs = dxt->data() + (static_cast<size_t>(n) * C + g * cg) * HW;
                    const double mm = static_cast<double>(m);
                    for (int c = 0; c < cg; ++c) {
                        float ga = gp2[g * cg + c];
                        const float* xc = xs + static_cast<size_t>(c) * HW;
                        const float* gc = gs + static_cast<size_t>(c) * HW;
                        float* dc = dxs + static_cast<size_t>(c) * HW;
                        for (int i = 0; i < HW; ++i) {
                            double xhat = (xc[i] - mean) * inv;
                            double dxhat = static_cast<double>(gc[i]) * ga;
                            dc[i] += static_cast<float>(inv * (dxhat - ds1 / mm - xhat * ds2 / mm));
                        }
                    }
                }
            }
        }
        if (gamma.requires_grad()) {
            Tensor& dg = gamma.node()->ensure_grad();
            for (int c = 0; c < C; ++c) dg[c] += static_cast<float>(dgamma[static_cast<size_t>(c)]);
        }
        if (beta.requires_grad()) {
            Tensor& db = beta.node()->ensure_grad();
            for (int c = 0; c < C; ++c) db[c] += static_cast<float>(dbeta[static_cast<size_t>(c)]);
        }
    });
}

inline Var silu(const Var& x) {
    const Tensor& xv = x.val();
    Tensor y(xv.shape());
    const float* xp = xv.data();
    float* yp = y.data();
    const int64_t n = xv.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        float s = 1.0f / (1.0f + std::exp(-xp[i]));
        yp[i] = xp[i] * s;
    }
    return make_op(std::move(y), {x}, [x](Node& node) {
        if (!x.requires_grad()) return;
        const float* xp2 = x.val().data();
        const float* gp = node.grad.data();
        float* dp = x.node()->ensure_grad().data();
        const int64_t n2 = x.val().numel();
        for (int64_t i = 0; i < n2; ++i) {
            float s = 1.0f / (1.0f + std::exp(-xp2[i]));
            dp[i] += gp[i] * s * (1.0f + xp2[i] * (1.0f - s));
        }
    });
}

inline Var sigmoid(const Var& x) {
    const Tensor& xv = x.val();
    Tensor y(xv.shape());
    const float* xp = xv.data();
    float* yp = y.data();
    const int64_t n = xv.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) yp[i] = 1.0f / (1.0f + std::exp(-xp[i]));
    return make_op(std::move(y), {x}, [x](Node& node) {
        if (!x.requires_grad()) return;
        const float* yp2 = node.value.data();
        const float* gp = node.grad.data();
        float* dp = x.node()->ensure_grad().data();
        const int64_t n2 = node.value.numel();
        for (int64_t i = 0; i < n2; ++i) dp[i] += gp[i] * yp2[i] * (1.0f - yp2[i]);
    });
}

inline Var add(const Var& a, const Var& b) {
    if (!a.val().same_shape(b.val())) throw ShapeError("add shape mismatch");
    Tensor y = a.val();
    y += b.val();
    return make_op(std::move(y), {a, b}, [a, b](Node& node) {
        if (a.requires_grad()) accumulate(*a.node(), node.grad);
        if (b.requires_grad()) accumulate(*b.node(), node.grad);
    });
}

inline Var mul_scalar(const Var& x, float k) {
    Tensor y = x.val();
    y *= k;
    return make_op(std::move(y), {x}, [x, k](Node& node) {
        if (!x.requires_grad()) return;
        Tensor g = node.grad;
        g *= k;
        accumulate(*x.node(), g);
    });
}

// x[N,C,H,W] + e[N,C] broadcast over spatial dims (time-embedding injection).
inline Var add_sample_channel(const Var& x, const Var& e) {
    const Tensor& xv = x.val();
    const Tensor& ev = e.val();
    if (xv.ndim() != 4 || ev.ndim() != 2 || ev.dim(0) != xv.dim(0) || ev.dim(1) != xv.dim(1))
        throw ShapeError("add_sample_channel shape mismatch");
    const int N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    Tensor y = xv;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float v = ev.at(n, c);
            float* yp = y.data() + (static_cast<size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) yp[i] += v;
        }
    return make_op(std::move(y), {x, e}, [x, e, N, C, HW](Node& node) {
        if (x.requires_grad()) accumulate(*x.node(), node.grad);
        if (e.requires_grad()) {
            Tensor& de = e.node()->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const float* gp = node.grad.data() + (static_cast<size_t>(n) * C + c) * HW;
                    double s = 0.0;
                    for (int i = 0; i < HW; ++i) s += gp[i];
                    de.at(n, c) += static_cast<float>(s);
                }
        }
    });
}

inline Var upsample_nearest2x(const Var& x) {
    const Tensor& xv = x.val();
    if (xv.ndim() != 4) throw ShapeError("upsample expects 4-D input");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor y({N, C, 2 * H, 2 * W});
    for (int nc = 0; nc < N * C; ++nc) {
        const float* xs = xv.data() + static_cast<size_t>(nc) * H * W;
        float* ys = y.data() + static_cast<size_t>(nc) * 4 * H * W;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                float v = xs[i * W + j];
                float* d = ys + (2 * i) * 2 * W + 2 * j;
                d[0] = v;
                d[1] = v;
                d[2 * W] = v;
                d[2 * W + 1] = v;
            }
    }
    return make_op(std::move(y), {x}, [x, N, C, H, W](Node& node) {
        if (!x.requires_grad()) return;
        Tensor& dx = x.node()->ensure_grad();
        for (int nc = 0; nc < N * C; ++nc) {
            float* dxs = dx.data() + static_cast<size_t>(nc) * H * W;
            const float* gs = node.grad.data() + static_cast<size_t>(nc) * 4 * H * W;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const float* g = gs + (2 * i) * 2 * W + 2 * j;
                    dxs[i * W + j] += g[0] + g[1] + g[2 * W] + g[2 * W + 1];
                }
        }
    });
}

inline Var concat_channels(const Var& a, const Var& b) {
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.ndim() != 4 || bv.ndim() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
        av.dim(3) != bv.dim(3))
        throw ShapeError("concat_channels shape mismatch");
    const int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), HW = av.dim(2) * av.dim(3);
    Tensor y({N, Ca + Cb, av.dim(2), av.dim(3)});
    for (int n = 0; n < N; ++n) {
        std::memcpy(y.data() + static_cast<size_t>(n) * (Ca + Cb) * HW,
                    av.data() + static_cast<size_t>(n) * Ca * HW, sizeof(float) * Ca * HW);
        std::memcpy(y.data() + (static_cast<size_t>(n) * (Ca + Cb) + Ca) * HW,
                    bv.data() + static_cast<size_t>(n) * Cb * HW, sizeof(float) * Cb * HW);
    }
    return make_op(std::move(y), {a, b}, [a, b, N, Ca, Cb, HW](Node& node) {
        if (a.requires_grad()) {
            Tensor& da = a.node()->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const float* g = node.grad.data() + static_cast<size_t>(n) * (Ca + Cb) * HW;
                float* d = da.data() + static_cast<size_t>(n) * Ca * HW;
                for (int i = 0; i < Ca * HW; ++i) d[i] += g[i];
            }
        }
        if (b.requires_grad()) {
            Tensor& db = b.node()->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const float* g = node.grad.data() + (static_cast<size_t>(n) * (Ca + Cb) + Ca) * HW;
                float* d = db.data() + static_cast<size_t>(n) * Cb * HW;
                for (int i = 0; i < Cb * HW; ++i) d[i] += g[i];
            }
        }
    });
}

inline Var reshape(const Var& x, std::vector<int> shape) {
    Tensor y = x.val().reshaped(std::move(shape));
    return make_op(std::move(y), {x}, [x](Node& node) {
        if (!x.requires_grad()) return;
        accumulate(*x.node(), node.grad.reshaped(x.val().shape()));
    });
}

// batched matmul: a[B,M,K] x b[B,K,N] -> [B,M,N]
inline Var bmm(const Var& a, const Var& b) {
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
        throw ShapeError("bmm shape mismatch");
    const int B = av.dim(0), M = av.dim(1), K = av.dim(2), Nn = bv.dim(2);
    Tensor y({B, M, Nn});
    for (int i = 0; i < B; ++i) {
        CMapRM Am(av.data() + static_cast<size_t>(i) * M * K, M, K);
        CMapRM Bm(bv.data() + static_cast<size_t>(i) * K * Nn, K, Nn);
        MapRM Ym(y.data() + static_cast<size_t>(i) * M * Nn, M, Nn);
        Ym.noalias() = Am * Bm;
    }
    return make_op(std::move(y), {a, b}, [a, b, B, M, K, Nn](Node& node) {
        for (int i = 0; i < B; ++i) {
            CMapRM Gm(node.grad.data() + static_cast<size_t>(i) * M * Nn, M, Nn);
            if (a.requires_grad()) {
                MapRM Da(a.node()->ensure_grad().data() + static_cast<size_t>(i) * M * K, M, K);
                CMapRM Bm(b.val().data() + static_cast<size_t>(i) * K * Nn, K, Nn);
                Da.noalias() += Gm * Bm.transpose();
            }
            if (b.requires_grad()) {
                MapRM Db(b.node()->ensure_grad().data() + static_cast<size_t>(i) * K * Nn, K, Nn);
                CMapRM Am(a.val().data() + static_cast<size_t>(i) * M * K, M, K);
                Db.noalias() += Am.transpose() * Gm;
            }
        }
    });
}

inline Var transpose_last2(const Var& x) {
    const Tensor& xv = x.val();
    if (xv.ndim() != 3) throw ShapeError("transpose_last2 expects 3-D input");
    const int B = xv.dim(0), M = xv.dim(1), Nn = xv.dim(2);
    Tensor y({B, Nn, M});
    for (int i = 0; i < B; ++i)
        for (int r = 0; r < M; ++r)
            for (int c = 0; c < Nn; ++c) y.at(i, c, r) = xv.at(i, r, c);
    return make_op(std::move(y), {x}, [x, B, M, Nn](Node& node) {
        if (!x.requires_grad()) return;
        Tensor& dx = x.node()->ensure_grad();
        for (int i = 0; i < B; ++i)
            for (int r = 0; r < M; ++r)
                for (int c = 0; c < Nn; ++c) dx.at(i, r, c) += node.grad.at(i, c, r);
    });
}

inline Var softmax_lastdim(const Var& x) {
    const Tensor& xv = x.val();
    const int L = xv.dim(xv.ndim() - 1);
    const int64_t rows = xv.numel() / L;
    Tensor y(xv.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const float* xs = xv.data() + r * L;
        float* ys = y.data() + r * L;
        float mx = xs[0];
        for (int i = 1; i < L; ++i) mx = std::max(mx, xs[i]);
        double s = 0.0;
        for (int i = 0; i < L; ++i) {
            ys[i] = std::exp(xs[i] - mx);
            s += ys[i];
        }
        float inv = static_cast<float>(1.0 / s);
        for (int i = 0; i < L; ++i) ys[i] *= inv;
    }
    return make_op(std::move(y), {x}, [x, L, rows](Node& node) {
        if (!x.requires_grad()) return;
        Tensor& dx = x.node()->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const float* ys = node.value.data() + r * L;
            const float* gs = node.grad.data() + r * L;
            float* ds = dx.data() + r * L;
            double dot = 0.0;
            for (int i = 0; i < L; ++i) dot += static_cast<double>(gs[i]) * ys[i];
            for (int i = 0; i < L; ++i) ds[i] += ys[i] * (gs[i] - static_cast<float>(dot));
        }
    });
}

inline Var mean_all(const Var& x) {
    Tensor y = Tensor::scalar(static_cast<float>(x.val().mean()));
    return make_op(std::move(y), {x}, [x](Node& node) {
        if (!x.requires_grad()) return;
        Tensor& dx = x.node()->ensure_grad();
        float g = node.grad[0] / static_cast<float>(x.val().numel());
        for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += g;
    });
}

inline Var mse_loss(const Var& a, const Var& b) {
    if (!a.val().same_shape(b.val())) throw ShapeError("mse_loss shape mismatch");
    const int64_t n = a.val().numel();
    double s = 0.0;
    const float* ap = a.val().data();
    const float* bp = b.val().data();
    for (int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(ap[i]) - bp[i];
        s += d * d;
    }
    Tensor y = Tensor::scalar(static_cast<float>(s / static_cast<double>(n)));
    return make_op(std::move(y), {a, b}, [a, b, n](Node& node) {
        const float g = node.grad[0] * 2.0f / static_cast<float>(n);
        const float* ap2 = a.val().data();
        const float* bp2 = b.val().data();
        if (a.requires_grad()) {
            float* d = a.node()->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i) d[i] += g * (ap2[i] - bp2[i]);
        }
        if (b.requires_grad()) {
            float* d = b.node()->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i) d[i] -= g * (ap2[i] - bp2[i]);
        }
    });
}

inline Var l1_loss(const Var& a, const Var& b) {
    if (!a.val().same_shape(b.val())) throw ShapeError("l1_loss shape mismatch");
    const int64_t n = a.val().numel();
    double s = 0.0;
    const float* ap = a.val().data();
    const float* bp = b.val().data();
    for (int64_t i = 0; i < n; ++i) s += std::abs(static_cast<double>(ap[i]) - bp[i]);
    Tensor y = Tensor::scalar(static_cast<float>(s / static_cast<double>(n)));
    return make_op(std::move(y), {a, b}, [a, b, n](Node& node) {
        const float g = node.grad[0] / static_cast<float>(n);
        const float* ap2 = a.val().data();
        const float* bp2 = b.val().data();
        if (a.requires_grad()) {
            float* d = a.node()->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i) {
                float diff = ap2[i] - bp2[i];
                d[i] += g * (diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f));
            }
        }
        if (b.requires_grad()) {
            float* d = b.node()->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i) {
                float diff = ap2[i] - bp2[i];
                d[i] -= g * (diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f));
            }
        }
    });
}

// Sinusoidal timestep embedding, [N, dim]; not part of the gradient graph.
inline Tensor timestep_embedding(const std::vector<int>& t, int dim) {
    const int half = dim / 2;
    Tensor e({static_cast<int>(t.size()), dim});
    for (size_t n = 0; n < t.size(); ++n) {
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
            double a = t[n] * freq;
            e.at(static_cast<int>(n), i) = static_cast<float>(std::sin(a));
            e.at(static_cast<int>(n), half + i) = static_cast<float>(std::cos(a));
        }
    }
    return e;
}

}  // namespace anomaly_ddpm::nn
