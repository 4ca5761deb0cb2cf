#pragma once

#include <Eigen/Core>

#include <complex>

#include "acdm/fft.hpp"
#include "acdm/tensor.hpp"

namespace acdm {

template <class Real>
using MatRM = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MapM = Eigen::Map<MatRM<Real>>;
template <class Real>
using CMapM = Eigen::Map<const MatRM<Real>>;

namespace detail {

template <class Real>
void check_same_shape(const TensorPtr<Real>& a, const TensorPtr<Real>& b, const char* op) {
    if (a->shape != b->shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                                    " vs " + shape_str(b->shape));
}

template <class Real>
void check_rank(const TensorPtr<Real>& t, size_t rank, const char* op) {
    if (t->shape.size() != rank)
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                    ", got shape " + shape_str(t->shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

template <class Real>
TensorPtr<Real> add(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    detail::check_same_shape(a, b, "add");
    auto out = op_result<Real>(a->shape, {a, b});
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (out->requires_grad) {
        out->backward_fn = [](TensorNode<Real>& self) {
            for (int p = 0; p < 2; ++p) {
                auto& in = *self.parents[p];
                if (!in.requires_grad) continue;
                in.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
            }
        };
    }
    return out;
}

template <class Real>
TensorPtr<Real> sub(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    detail::check_same_shape(a, b, "sub");
    auto out = op_result<Real>(a->shape, {a, b});
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] - b->data[i];
    if (out->requires_grad) {
        out->backward_fn = [](TensorNode<Real>& self) {
            auto& a = *self.parents[0];
            auto& b = *self.parents[1];
            if (a.requires_grad) {
                a.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i];
            }
            if (b.requires_grad) {
                b.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) b.grad[i] -= self.grad[i];
            }
        };
    }
    return out;
}

template <class Real>
TensorPtr<Real> mul(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    detail::check_same_shape(a, b, "mul");
    auto out = op_result<Real>(a->shape, {a, b});
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (out->requires_grad) {
        out->backward_fn = [](TensorNode<Real>& self) {
            auto& a = *self.parents[0];
            auto& b = *self.parents[1];
            if (a.requires_grad) {
                a.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i] * b.data[i];
            }
            if (b.requires_grad) {
                b.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) b.grad[i] += self.grad[i] * a.data[i];
            }
        };
    }
    return out;
}

template <class Real>
TensorPtr<Real> scale(const TensorPtr<Real>& a, Real s) {
    auto out = op_result<Real>(a->shape, {a});
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * s;
    if (out->requires_grad) {
        out->backward_fn = [s](TensorNode<Real>& self) {
            auto& a = *self.parents[0];
            a.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i] * s;
        };
    }
    return out;
}

/// Multiply a tensor by a scalar (1-element) tensor, broadcast over all cells.
template <class Real>
TensorPtr<Real> scale_by(const TensorPtr<Real>& a, const TensorPtr<Real>& s) {
    if (s->numel() != 1) throw std::invalid_argument("scale_by: scale must be a 1-element tensor");
    auto out = op_result<Real>(a->shape, {a, s});
    Real sv = s->data[0];
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * sv;
    if (out->requires_grad) {
        out->backward_fn = [](TensorNode<Real>& self) {
            auto& a = *self.parents[0];
            auto& s = *self.parents[1];
            Real sv = s.data[0];
            if (a.requires_grad) {
                a.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i] * sv;
            }
            if (s.requires_grad) {
                s.ensure_grad();
                Real acc = 0;
                for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * a.data[i];
                s.grad[0] += acc;
            }
        };
    }
    return out;
}

template <class Real>
TensorPtr<Real> silu(const TensorPtr<Real>& x) {
    auto out = op_result<Real>(x->shape, {x});
    for (size_t i = 0; i < out->data.size(); ++i) {
        Real v = x->data[i];
        out->data[i] = v / (Real(1) + std::exp(-v));
    }
    if (out->requires_grad) {
        out->backward_fn = [](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            x.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                Real v = x.data[i];
                Real sig = Real(1) / (Real(1) + std::exp(-v));
                x.grad[i] += self.grad[i] * sig * (Real(1) + v * (Real(1) - sig));
            }
        };
    }
    return out;
}

template <class Real>
TensorPtr<Real> sum_all(const TensorPtr<Real>& x) {
    auto out = op_result<Real>({1}, {x});
    Real acc = 0;
    for (Real v : x->data) acc += v;
    out->data[0] = acc;
    if (out->requires_grad) {
        out->backward_fn = [](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            x.ensure_grad();
            Real g = self.grad[0];
            for (size_t i = 0; i < x.grad.size(); ++i) x.grad[i] += g;
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel plumbing: concat / slice / bias
// ---------------------------------------------------------------------------

/// Concatenate [N,C_i,H,W] tensors along the channel axis.
template <class Real>
TensorPtr<Real> concat_channels(const std::vector<TensorPtr<Real>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    for (const auto& p : parts) detail::check_rank(p, 4, "concat_channels");
    int n = parts[0]->shape[0], h = parts[0]->shape[2], w = parts[0]->shape[3];
    int ctot = 0;
    for (const auto& p : parts) {
        if (p->shape[0] != n || p->shape[2] != h || p->shape[3] != w)
            throw std::invalid_argument("concat_channels: incompatible shapes " +
                                        shape_str(parts[0]->shape) + " vs " + shape_str(p->shape));
        ctot += p->shape[1];
    }
    auto out = tensor<Real>({n, ctot, h, w});
    bool track = grad_enabled();
    bool any = false;
    for (const auto& p : parts) any = any || p->requires_grad;
    if (track && any) {
        out->requires_grad = true;
        out->parents = parts;
    }
    size_t plane = static_cast<size_t>(h) * w;
    for (int b = 0; b < n; ++b) {
        size_t off = static_cast<size_t>(b) * ctot * plane;
        for (const auto& p : parts) {
            size_t sz = static_cast<size_t>(p->shape[1]) * plane;
            std::copy_n(p->data.data() + static_cast<size_t>(b) * sz, sz, out->data.data() + off);
            off += sz;
        }
    }
    if (out->requires_grad) {
        out->backward_fn = [n, plane, ctot](TensorNode<Real>& self) {
            for (int b = 0; b < n; ++b) {
                size_t off = static_cast<size_t>(b) * ctot * plane;
                for (auto& pp : self.parents) {
                    auto& p = *pp;
                    size_t sz = static_cast<size_t>(p.shape[1]) * plane;
                    if (p.requires_grad) {
                        p.ensure_grad();
                        Real* dst = p.grad.data() + static_cast<size_t>(b) * sz;
                        const Real* src = self.grad.data() + off;
                        for (size_t i = 0; i < sz; ++i) dst[i] += src[i];
                    }
                    off += sz;
                }
            }
        };
    }
    return out;
}

template <class Real>
TensorPtr<Real> concat_channels(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    return concat_channels(std::vector<TensorPtr<Real>>{a, b});
}

/// View channels [c0, c0+len) of a [N,C,H,W] tensor as a new tensor.
template <class Real>
TensorPtr<Real> slice_channels(const TensorPtr<Real>& x, int c0, int len) {
    detail::check_rank(x, 4, "slice_channels");
    int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    if (c0 < 0 || len <= 0 || c0 + len > c)
        throw std::invalid_argument("slice_channels: range [" + std::to_string(c0) + "," +
                                    std::to_string(c0 + len) + ") outside " + shape_str(x->shape));
    auto out = op_result<Real>({n, len, h, w}, {x});
    size_t plane = static_cast<size_t>(h) * w;
    for (int b = 0; b < n; ++b)
        std::copy_n(x->data.data() + (static_cast<size_t>(b) * c + c0) * plane, len * plane,
                    out->data.data() + static_cast<size_t>(b) * len * plane);
    if (out->requires_grad) {
        out->backward_fn = [n, c, c0, len, plane](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            x.ensure_grad();
            for (int b = 0; b < n; ++b) {
                Real* dst = x.grad.data() + (static_cast<size_t>(b) * c + c0) * plane;
                const Real* src = self.grad.data() + static_cast<size_t>(b) * len * plane;
                for (size_t i = 0; i < static_cast<size_t>(len) * plane; ++i) dst[i] += src[i];
            }
        };
    }
    return out;
}

/// y[n,c,h,w] = x[n,c,h,w] + b[c]
template <class Real>
TensorPtr<Real> bias_channel(const TensorPtr<Real>& x, const TensorPtr<Real>& b) {
    detail::check_rank(x, 4, "bias_channel");
    int c = x->shape[1];
    if (b->shape != std::vector<int>{c})
        throw std::invalid_argument("bias_channel: bias shape " + shape_str(b->shape) +
                                    " does not match channels " + std::to_string(c));
    auto out = op_result<Real>(x->shape, {x, b});
    int n = x->shape[0];
    size_t plane = static_cast<size_t>(x->shape[2]) * x->shape[3];
    for (int bi = 0; bi < n; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const Real bv = b->data[ci];
            size_t off = (static_cast<size_t>(bi) * c + ci) * plane;
            for (size_t i = 0; i < plane; ++i) out->data[off + i] = x->data[off + i] + bv;
        }
    if (out->requires_grad) {
        out->backward_fn = [n, c, plane](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            auto& b = *self.parents[1];
            if (x.requires_grad) {
                x.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
            }
            if (b.requires_grad) {
                b.ensure_grad();
                for (int bi = 0; bi < n; ++bi)
                    for (int ci = 0; ci < c; ++ci) {
                        size_t off = (static_cast<size_t>(bi) * c + ci) * plane;
                        Real acc = 0;
                        for (size_t i = 0; i < plane; ++i) acc += self.grad[off + i];
                        b.grad[ci] += acc;
                    }
            }
        };
    }
    return out;
}

/// y[n,c,h,w] = x[n,c,h,w] + e[n,c]  (per-sample channel bias, used for step embeddings)
template <class Real>
TensorPtr<Real> bias_sample_channel(const TensorPtr<Real>& x, const TensorPtr<Real>& e) {
    detail::check_rank(x, 4, "bias_sample_channel");
    detail::check_rank(e, 2, "bias_sample_channel");
    int n = x->shape[0], c = x->shape[1];
    if (e->shape[0] != n || e->shape[1] != c)
        throw std::invalid_argument("bias_sample_channel: embedding shape " + shape_str(e->shape) +
                                    " vs input " + shape_str(x->shape));
    auto out = op_result<Real>(x->shape, {x, e});
    size_t plane = static_cast<size_t>(x->shape[2]) * x->shape[3];
    for (int bi = 0; bi < n; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const Real bv = e->data[static_cast<size_t>(bi) * c + ci];
            size_t off = (static_cast<size_t>(bi) * c + ci) * plane;
            for (size_t i = 0; i < plane; ++i) out->data[off + i] = x->data[off + i] + bv;
        }
    if (out->requires_grad) {
        out->backward_fn = [n, c, plane](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            auto& e = *self.parents[1];
            if (x.requires_grad) {
                x.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
            }
            if (e.requires_grad) {
                e.ensure_grad();
                for (int bi = 0; bi < n; ++bi)
                    for (int ci = 0; ci < c; ++ci) {
                        size_t off = (static_cast<size_t>(bi) * c + ci) * plane;
                        Real acc = 0;
                        for (size_t i = 0; i < plane; ++i) acc += self.grad[off + i];
                        e.grad[static_cast<size_t>(bi) * c + ci] += acc;
                    }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dense layer
// ---------------------------------------------------------------------------

/// y[N,Fout] = x[N,Fin] * W^T + b. Pass b = nullptr for no bias.
template <class Real>
TensorPtr<Real> dense(const TensorPtr<Real>& x, const TensorPtr<Real>& w, const TensorPtr<Real>& b) {
    detail::check_rank(x, 2, "dense");
    detail::check_rank(w, 2, "dense");
    int n = x->shape[0], fin = x->shape[1], fout = w->shape[0];
    if (w->shape[1] != fin)
        throw std::invalid_argument("dense: weight " + shape_str(w->shape) + " vs input " + shape_str(x->shape));
    if (b && b->shape != std::vector<int>{fout})
        throw std::invalid_argument("dense: bias shape " + shape_str(b->shape));
    auto out = b ? op_result<Real>({n, fout}, {x, w, b}) : op_result<Real>({n, fout}, {x, w});
    CMapM<Real> X(x->data.data(), n, fin), W(w->data.data(), fout, fin);
    MapM<Real> Y(out->data.data(), n, fout);
    Y.noalias() = X * W.transpose();
    if (b)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < fout; ++j) out->data[static_cast<size_t>(i) * fout + j] += b->data[j];
    if (out->requires_grad) {
        bool has_bias = b != nullptr;
        out->backward_fn = [n, fin, fout, has_bias](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            auto& w = *self.parents[1];
            CMapM<Real> dY(self.grad.data(), n, fout);
            if (x.requires_grad) {
                x.ensure_grad();
                MapM<Real> dX(x.grad.data(), n, fin);
                CMapM<Real> W(w.data.data(), fout, fin);
                dX.noalias() += dY * W;
            }
            if (w.requires_grad) {
                w.ensure_grad();
                MapM<Real> dW(w.grad.data(), fout, fin);
                CMapM<Real> X(x.data.data(), n, fin);
                dW.noalias() += dY.transpose() * X;
            }
            if (has_bias) {
                auto& b = *self.parents[2];
                if (b.requires_grad) {
                    b.ensure_grad();
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < fout; ++j) b.grad[j] += self.grad[static_cast<size_t>(i) * fout + j];
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation) via im2col + GEMM
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
void im2col(const Real* x, int c, int h, int w, int kh, int kw, int stride, int pad, int dil,
            int ho, int wo, Real* col) {
    // col layout: [c*kh*kw, ho*wo]
    const int cols = ho * wo;
    for (int ci = 0; ci < c; ++ci) {
        const Real* plane = x + static_cast<size_t>(ci) * h * w;
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                Real* row = col + (static_cast<size_t>(ci) * kh * kw + ki * kw + kj) * cols;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride - pad + ki * dil;
                    Real* dst = row + static_cast<size_t>(oy) * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill_n(dst, wo, Real(0));
                        continue;
                    }
                    const Real* src = plane + static_cast<size_t>(iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride - pad + kj * dil;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : Real(0);
                    }
                }
            }
    }
}

template <class Real>
void col2im_accum(const Real* col, int c, int h, int w, int kh, int kw, int stride, int pad,
                  int dil, int ho, int wo, Real* dx) {
    const int cols = ho * wo;
    for (int ci = 0; ci < c; ++ci) {
        Real* plane = dx + static_cast<size_t>(ci) * h * w;
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                const Real* row = col + (static_cast<size_t>(ci) * kh * kw + ki * kw + kj) * cols;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride - pad + ki * dil;
                    if (iy < 0 || iy >= h) continue;
                    Real* dst = plane + static_cast<size_t>(iy) * w;
                    const Real* src = row + static_cast<size_t>(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride - pad + kj * dil;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
    }
}

template <class Real>
std::vector<Real>& conv_scratch() {
    thread_local std::vector<Real> buf;
    return buf;
}

}  // namespace detail

/// 2D cross-correlation of [N,C,H,W] with kernels [O,C,kh,kw].
/// With stride 1 and pad = dil*(k-1)/2 the spatial size is preserved.
template <class Real>
TensorPtr<Real> conv2d(const TensorPtr<Real>& x, const TensorPtr<Real>& k, int stride = 1,
                       int padding = 0, int dilation = 1) {
    detail::check_rank(x, 4, "conv2d");
    detail::check_rank(k, 4, "conv2d");
    int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    int o = k->shape[0], kc = k->shape[1], kh = k->shape[2], kw = k->shape[3];
    if (kc != c)
        throw std::invalid_argument("conv2d: kernel channels " + shape_str(k->shape) +
                                    " do not match input " + shape_str(x->shape));
    if (kh % 2 == 0 || kw % 2 == 0)
        throw std::invalid_argument("conv2d: kernel extents must be odd, got " + shape_str(k->shape));
    if (stride < 1 || dilation < 1 || padding < 0)
        throw std::invalid_argument("conv2d: invalid stride/padding/dilation");
    int ho = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    int wo = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    if (ho <= 0 || wo <= 0)
        throw std::invalid_argument("conv2d: empty output for input " + shape_str(x->shape) +
                                    " kernel " + shape_str(k->shape));

    auto out = op_result<Real>({n, o, ho, wo}, {x, k});
    const int rows = c * kh * kw, cols = ho * wo;
    auto& col = detail::conv_scratch<Real>();
    col.resize(static_cast<size_t>(rows) * cols);
    CMapM<Real> K(k->data.data(), o, rows);
    for (int b = 0; b < n; ++b) {
        detail::im2col(x->data.data() + static_cast<size_t>(b) * c * h * w, c, h, w, kh, kw,
                       stride, padding, dilation, ho, wo, col.data());
        CMapM<Real> Col(col.data(), rows, cols);
        MapM<Real> Y(out->data.data() + static_cast<size_t>(b) * o * cols, o, cols);
        Y.noalias() = K * Col;
    }

    if (out->requires_grad) {
        out->backward_fn = [n, c, h, w, o, kh, kw, stride, padding, dilation, ho,
                            wo](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            auto& k = *self.parents[1];
            const int rows = c * kh * kw, cols = ho * wo;
            auto& col = detail::conv_scratch<Real>();
            col.resize(static_cast<size_t>(rows) * cols);
            std::vector<Real> dcol;
            if (x.requires_grad) {
                x.ensure_grad();
                dcol.resize(static_cast<size_t>(rows) * cols);
            }
            if (k.requires_grad) k.ensure_grad();
            CMapM<Real> K(k.data.data(), o, rows);
            for (int b = 0; b < n; ++b) {
                CMapM<Real> dY(self.grad.data() + static_cast<size_t>(b) * o * cols, o, cols);
                if (k.requires_grad) {
                    detail::im2col(x.data.data() + static_cast<size_t>(b) * c * h * w, c, h, w, kh,
                                   kw, stride, padding, dilation, ho, wo, col.data());
                    CMapM<Real> Col(col.data(), rows, cols);
                    MapM<Real> dK(k.grad.data(), o, rows);
                    dK.noalias() += dY * Col.transpose();
                }
                if (x.requires_grad) {
                    MapM<Real> dCol(dcol.data(), rows, cols);
                    dCol.noalias() = K.transpose() * dY;
                    detail::col2im_accum(dcol.data(), c, h, w, kh, kw, stride, padding, dilation,
                                         ho, wo, x.grad.data() + static_cast<size_t>(b) * c * h * w);
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// group_norm
// ---------------------------------------------------------------------------

/// Group normalization over [N,C,H,W]: per (sample, group) zero mean / unit
/// variance before the per-channel affine, eps-regularized (1e-5).
template <class Real>
TensorPtr<Real> group_norm(const TensorPtr<Real>& x, int groups, const TensorPtr<Real>& gain,
                           const TensorPtr<Real>& bias) {
    detail::check_rank(x, 4, "group_norm");
    int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    if (groups <= 0 || c % groups != 0)
        throw std::invalid_argument("group_norm: groups " + std::to_string(groups) +
                                    " do not divide channels " + std::to_string(c));
    if (gain->shape != std::vector<int>{c} || bias->shape != std::vector<int>{c})
        throw std::invalid_argument("group_norm: gain/bias must be [" + std::to_string(c) + "]");

    constexpr Real kEps = Real(1e-5);
    auto out = op_result<Real>(x->shape, {x, gain, bias});
    int cg = c / groups;
    size_t plane = static_cast<size_t>(h) * w;
    size_t gsize = static_cast<size_t>(cg) * plane;
    auto stats = std::make_shared<std::vector<Real>>(static_cast<size_t>(n) * groups * 2);

    for (int b = 0; b < n; ++b)
        for (int g = 0; g < groups; ++g) {
            const Real* src = x->data.data() + (static_cast<size_t>(b) * c + static_cast<size_t>(g) * cg) * plane;
            Real mean = 0;
            for (size_t i = 0; i < gsize; ++i) mean += src[i];
            mean /= static_cast<Real>(gsize);
            Real var = 0;
            for (size_t i = 0; i < gsize; ++i) {
                Real d = src[i] - mean;
                var += d * d;
            }
            var /= static_cast<Real>(gsize);
            (*stats)[(static_cast<size_t>(b) * groups + g) * 2] = mean;
            (*stats)[(static_cast<size_t>(b) * groups + g) * 2 + 1] = var;
            Real inv = Real(1) / std::sqrt(var + kEps);
            Real* dst = out->data.data() + (static_cast<size_t>(b) * c + static_cast<size_t>(g) * cg) * plane;
            for (int cc = 0; cc < cg; ++cc) {
                Real gv = gain->data[g * cg + cc], bv = bias->data[g * cg + cc];
                for (size_t i = 0; i < plane; ++i) {
                    size_t idx = static_cast<size_t>(cc) * plane + i;
                    dst[idx] = (src[idx] - mean) * inv * gv + bv;
                }
            }
        }

    if (out->requires_grad) {
        out->backward_fn = [n, c, groups, cg, plane, gsize, stats, kEps](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            auto& gain = *self.parents[1];
            auto& bias = *self.parents[2];
            if (x.requires_grad) x.ensure_grad();
            if (gain.requires_grad) gain.ensure_grad();
            if (bias.requires_grad) bias.ensure_grad();
            for (int b = 0; b < n; ++b)
                for (int g = 0; g < groups; ++g) {
                    Real mean = (*stats)[(static_cast<size_t>(b) * groups + g) * 2];
                    Real var = (*stats)[(static_cast<size_t>(b) * groups + g) * 2 + 1];
                    Real inv = Real(1) / std::sqrt(var + kEps);
                    size_t base = (static_cast<size_t>(b) * c + static_cast<size_t>(g) * cg) * plane;
                    const Real* xs = x.data.data() + base;
                    const Real* dy = self.grad.data() + base;
                    // accumulate dgain/dbias and the two group means needed for dx
                    Real sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (int cc = 0; cc < cg; ++cc) {
                        Real gv = gain.data[g * cg + cc];
                        Real acc_gain = 0, acc_bias = 0;
                        for (size_t i = 0; i < plane; ++i) {
                            size_t idx = static_cast<size_t>(cc) * plane + i;
                            Real xhat = (xs[idx] - mean) * inv;
                            Real dxh = dy[idx] * gv;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat;
                            acc_gain += dy[idx] * xhat;
                            acc_bias += dy[idx];
                        }
                        if (gain.requires_grad) gain.grad[g * cg + cc] += acc_gain;
                        if (bias.requires_grad) bias.grad[g * cg + cc] += acc_bias;
                    }
                    if (x.requires_grad) {
                        Real m1 = sum_dxhat / static_cast<Real>(gsize);
                        Real m2 = sum_dxhat_xhat / static_cast<Real>(gsize);
                        Real* dx = x.grad.data() + base;
                        for (int cc = 0; cc < cg; ++cc) {
                            Real gv = gain.data[g * cg + cc];
                            for (size_t i = 0; i < plane; ++i) {
                                size_t idx = static_cast<size_t>(cc) * plane + i;
                                Real xhat = (xs[idx] - mean) * inv;
                                Real dxh = dy[idx] * gv;
                                dx[idx] += inv * (dxh - m1 - xhat * m2);
                            }
                        }
                    }
                }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling / upsampling
// ---------------------------------------------------------------------------

/// 2x2 average pooling with stride 2. Requires even H and W.
template <class Real>
TensorPtr<Real> avg_pool2(const TensorPtr<Real>& x) {
    detail::check_rank(x, 4, "avg_pool2");
    int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    if (h % 2 || w % 2)
        throw std::invalid_argument("avg_pool2: spatial dims must be even, got " + shape_str(x->shape));
    int ho = h / 2, wo = w / 2;
    auto out = op_result<Real>({n, c, ho, wo}, {x});
    for (int bc = 0; bc < n * c; ++bc) {
        const Real* src = x->data.data() + static_cast<size_t>(bc) * h * w;
        Real* dst = out->data.data() + static_cast<size_t>(bc) * ho * wo;
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx) {
                const Real* p = src + static_cast<size_t>(2 * y) * w + 2 * xx;
                dst[static_cast<size_t>(y) * wo + xx] = (p[0] + p[1] + p[w] + p[w + 1]) * Real(0.25);
            }
    }
    if (out->requires_grad) {
        out->backward_fn = [n, c, h, w, ho, wo](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            x.ensure_grad();
            for (int bc = 0; bc < n * c; ++bc) {
                Real* dst = x.grad.data() + static_cast<size_t>(bc) * h * w;
                const Real* src = self.grad.data() + static_cast<size_t>(bc) * ho * wo;
                for (int y = 0; y < ho; ++y)
                    for (int xx = 0; xx < wo; ++xx) {
                        Real g = src[static_cast<size_t>(y) * wo + xx] * Real(0.25);
                        Real* p = dst + static_cast<size_t>(2 * y) * w + 2 * xx;
                        p[0] += g;
                        p[1] += g;
                        p[w] += g;
                        p[w + 1] += g;
                    }
            }
        };
    }
    return out;
}

/// Nearest-neighbor 2x upsampling.
template <class Real>
TensorPtr<Real> nearest_upsample2(const TensorPtr<Real>& x) {
    detail::check_rank(x, 4, "nearest_upsample2");
    int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    int ho = h * 2, wo = w * 2;
    auto out = op_result<Real>({n, c, ho, wo}, {x});
    for (int bc = 0; bc < n * c; ++bc) {
        const Real* src = x->data.data() + static_cast<size_t>(bc) * h * w;
        Real* dst = out->data.data() + static_cast<size_t>(bc) * ho * wo;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                Real v = src[static_cast<size_t>(y) * w + xx];
                Real* p = dst + static_cast<size_t>(2 * y) * wo + 2 * xx;
                p[0] = v;
                p[1] = v;
                p[wo] = v;
                p[wo + 1] = v;
            }
    }
    if (out->requires_grad) {
        out->backward_fn = [n, c, h, w, wo](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            x.ensure_grad();
            for (int bc = 0; bc < n * c; ++bc) {
                Real* dst = x.grad.data() + static_cast<size_t>(bc) * h * w;
                const Real* src = self.grad.data() + static_cast<size_t>(bc) * h * 2 * wo;
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                        const Real* p = src + static_cast<size_t>(2 * y) * wo + 2 * xx;
                        dst[static_cast<size_t>(y) * w + xx] += p[0] + p[1] + p[wo] + p[wo + 1];
                    }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing and batched linear algebra (attention support)
// ---------------------------------------------------------------------------

template <class Real>
TensorPtr<Real> reshape(const TensorPtr<Real>& x, std::vector<int> shape) {
    if (shape_numel(shape) != x->numel())
        throw std::invalid_argument("reshape: " + shape_str(x->shape) + " to " + shape_str(shape) +
                                    " changes element count");
    auto out = op_result<Real>(std::move(shape), {x});
    out->data = x->data;
    if (out->requires_grad) {
        out->backward_fn = [](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            x.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
        };
    }
    return out;
}

/// Swap the two trailing axes of a rank-3 tensor: [N,A,B] -> [N,B,A].
template <class Real>
TensorPtr<Real> transpose_12(const TensorPtr<Real>& x) {
    detail::check_rank(x, 3, "transpose_12");
    int n = x->shape[0], a = x->shape[1], b = x->shape[2];
    auto out = op_result<Real>({n, b, a}, {x});
    for (int bi = 0; bi < n; ++bi)
        for (int i = 0; i < a; ++i)
            for (int j = 0; j < b; ++j)
                out->data[(static_cast<size_t>(bi) * b + j) * a + i] =
                    x->data[(static_cast<size_t>(bi) * a + i) * b + j];
    if (out->requires_grad) {
        out->backward_fn = [n, a, b](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            x.ensure_grad();
            for (int bi = 0; bi < n; ++bi)
                for (int i = 0; i < a; ++i)
                    for (int j = 0; j < b; ++j)
                        x.grad[(static_cast<size_t>(bi) * a + i) * b + j] +=
                            self.grad[(static_cast<size_t>(bi) * b + j) * a + i];
        };
    }
    return out;
}

/// Softmax over the last axis of a rank-3 tensor.
template <class Real>
TensorPtr<Real> softmax_last(const TensorPtr<Real>& x) {
    detail::check_rank(x, 3, "softmax_last");
    int rows = x->shape[0] * x->shape[1], cols = x->shape[2];
    auto out = op_result<Real>(x->shape, {x});
    for (int r = 0; r < rows; ++r) {
        const Real* src = x->data.data() + static_cast<size_t>(r) * cols;
        Real* dst = out->data.data() + static_cast<size_t>(r) * cols;
        Real mx = src[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, src[j]);
        Real sum = 0;
        for (int j = 0; j < cols; ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        Real inv = Real(1) / sum;
        for (int j = 0; j < cols; ++j) dst[j] *= inv;
    }
    if (out->requires_grad) {
        out->backward_fn = [rows, cols](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            x.ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const Real* y = self.data.data() + static_cast<size_t>(r) * cols;
                const Real* dy = self.grad.data() + static_cast<size_t>(r) * cols;
                Real dot = 0;
                for (int j = 0; j < cols; ++j) dot += dy[j] * y[j];
                Real* dx = x.grad.data() + static_cast<size_t>(r) * cols;
                for (int j = 0; j < cols; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        };
    }
    return out;
}

/// Batched matrix product: [N,A,B] x [N,B,C] -> [N,A,C].
template <class Real>
TensorPtr<Real> bmm(const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    detail::check_rank(a, 3, "bmm");
    detail::check_rank(b, 3, "bmm");
    int n = a->shape[0], ra = a->shape[1], ca = a->shape[2], cb = b->shape[2];
    if (b->shape[0] != n || b->shape[1] != ca)
        throw std::invalid_argument("bmm: incompatible " + shape_str(a->shape) + " x " + shape_str(b->shape));
    auto out = op_result<Real>({n, ra, cb}, {a, b});
    for (int bi = 0; bi < n; ++bi) {
        CMapM<Real> A(a->data.data() + static_cast<size_t>(bi) * ra * ca, ra, ca);
        CMapM<Real> B(b->data.data() + static_cast<size_t>(bi) * ca * cb, ca, cb);
        MapM<Real> Y(out->data.data() + static_cast<size_t>(bi) * ra * cb, ra, cb);
        Y.noalias() = A * B;
    }
    if (out->requires_grad) {
        out->backward_fn = [n, ra, ca, cb](TensorNode<Real>& self) {
            auto& a = *self.parents[0];
            auto& b = *self.parents[1];
            if (a.requires_grad) a.ensure_grad();
            if (b.requires_grad) b.ensure_grad();
            for (int bi = 0; bi < n; ++bi) {
                CMapM<Real> dY(self.grad.data() + static_cast<size_t>(bi) * ra * cb, ra, cb);
                CMapM<Real> A(a.data.data() + static_cast<size_t>(bi) * ra * ca, ra, ca);
                CMapM<Real> B(b.data.data() + static_cast<size_t>(bi) * ca * cb, ca, cb);
                if (a.requires_grad) {
                    MapM<Real> dA(a.grad.data() + static_cast<size_t>(bi) * ra * ca, ra, ca);
                    dA.noalias() += dY * B.transpose();
                }
                if (b.requires_grad) {
                    MapM<Real> dB(b.grad.data() + static_cast<size_t>(bi) * ca * cb, ca, cb);
                    dB.noalias() += A.transpose() * dY;
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean-reduced Huber loss: quadratic below delta, linear above.
template <class Real>
TensorPtr<Real> huber_loss(const TensorPtr<Real>& pred, const TensorPtr<Real>& target, Real delta = Real(1)) {
    detail::check_same_shape(pred, target, "huber_loss");
    if (delta <= 0) throw std::invalid_argument("huber_loss: delta must be positive");
    auto out = op_result<Real>({1}, {pred, target});
    const size_t n = pred->data.size();
    Real acc = 0;
    for (size_t i = 0; i < n; ++i) {
        Real r = pred->data[i] - target->data[i];
        Real a = std::abs(r);
        acc += a <= delta ? Real(0.5) * r * r : delta * (a - Real(0.5) * delta);
    }
    out->data[0] = acc / static_cast<Real>(n);
    if (out->requires_grad) {
        out->backward_fn = [delta, n](TensorNode<Real>& self) {
            auto& p = *self.parents[0];
            auto& t = *self.parents[1];
            Real g = self.grad[0] / static_cast<Real>(n);
            if (p.requires_grad) p.ensure_grad();
            if (t.requires_grad) t.ensure_grad();
            for (size_t i = 0; i < n; ++i) {
                Real r = p.data[i] - t.data[i];
                Real d = std::clamp(r, -delta, delta) * g;
                if (p.requires_grad) p.grad[i] += d;
                if (t.requires_grad) t.grad[i] -= d;
            }
        };
    }
    return out;
}

/// Mean squared error.
template <class Real>
TensorPtr<Real> mse_loss(const TensorPtr<Real>& pred, const TensorPtr<Real>& target) {
    detail::check_same_shape(pred, target, "mse_loss");
    auto out = op_result<Real>({1}, {pred, target});
    const size_t n = pred->data.size();
    Real acc = 0;
    for (size_t i = 0; i < n; ++i) {
        Real r = pred->data[i] - target->data[i];
        acc += r * r;
    }
    out->data[0] = acc / static_cast<Real>(n);
    if (out->requires_grad) {
        out->backward_fn = [n](TensorNode<Real>& self) {
            auto& p = *self.parents[0];
            auto& t = *self.parents[1];
            Real g = self.grad[0] * Real(2) / static_cast<Real>(n);
            if (p.requires_grad) p.ensure_grad();
            if (t.requires_grad) t.ensure_grad();
            for (size_t i = 0; i < n; ++i) {
                Real d = (p.data[i] - t.data[i]) * g;
                if (p.requires_grad) p.grad[i] += d;
                if (t.requires_grad) t.grad[i] -= d;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// spectral_conv2d (FNO layer core)
// ---------------------------------------------------------------------------

/// Spectral convolution: FFT -> complex channel mixing on the retained
/// low-frequency block -> inverse FFT (real part). Weights are
/// [O, C, modes_y, modes_x, 2] (re, im); each retained (ky, kx) weight also
/// acts, conjugated, on the Hermitian mirror mode so real inputs map to real
/// outputs. modes_x counts x-frequencies (W axis), modes_y y-frequencies
/// (H axis); both limited to the Nyquist extent of the real transform.
template <class Real>
TensorPtr<Real> spectral_conv2d(const TensorPtr<Real>& x, const TensorPtr<Real>& wts, int modes_x,
                                int modes_y) {
    detail::check_rank(x, 4, "spectral_conv2d");
    if (wts->shape.size() != 5 || wts->shape[4] != 2)
        throw std::invalid_argument("spectral_conv2d: weights must be [O,C,my,mx,2], got " +
                                    shape_str(wts->shape));
    int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    int o = wts->shape[0];
    if (wts->shape[1] != c || wts->shape[2] != modes_y || wts->shape[3] != modes_x)
        throw std::invalid_argument("spectral_conv2d: weights " + shape_str(wts->shape) +
                                    " do not match channels/modes");
    if (modes_x < 1 || modes_x > w / 2 + 1 || modes_y < 1 || modes_y > h / 2 + 1)
        throw std::invalid_argument("spectral_conv2d: modes (" + std::to_string(modes_x) + "," +
                                    std::to_string(modes_y) + ") exceed Nyquist for " + shape_str(x->shape));

    using Cx = std::complex<double>;
    auto out = op_result<Real>({n, o, h, w}, {x, wts});
    const size_t plane = static_cast<size_t>(h) * w;

    auto mix_forward = [&](const std::vector<Cx>& spec_in, std::vector<Cx>& spec_out) {
        // spec_in: [c][h][w], spec_out: [o][h][w] (zeroed by caller)
        for (int oc = 0; oc < o; ++oc)
            for (int ic = 0; ic < c; ++ic) {
                const Cx* S = spec_in.data() + static_cast<size_t>(ic) * plane;
                Cx* D = spec_out.data() + static_cast<size_t>(oc) * plane;
                const Real* wp = wts->data.data() +
                                 ((static_cast<size_t>(oc) * c + ic) * modes_y) * modes_x * 2;
                for (int ky = 0; ky < modes_y; ++ky)
                    for (int kx = 0; kx < modes_x; ++kx) {
                        Cx wv(wp[(static_cast<size_t>(ky) * modes_x + kx) * 2],
                              wp[(static_cast<size_t>(ky) * modes_x + kx) * 2 + 1]);
                        size_t idx = static_cast<size_t>(ky) * w + kx;
                        D[idx] += wv * S[idx];
                        int my = (h - ky) % h, mx = (w - kx) % w;
                        if (my != ky || mx != kx) {
                            size_t midx = static_cast<size_t>(my) * w + mx;
                            D[midx] += std::conj(wv) * S[midx];
                        }
                    }
            }
    };

    {
        std::vector<Cx> buf(plane), spec_in(static_cast<size_t>(c) * plane),
            spec_out(static_cast<size_t>(o) * plane);
        for (int b = 0; b < n; ++b) {
            for (int ic = 0; ic < c; ++ic) {
                for (size_t i = 0; i < plane; ++i)
                    buf[i] = Cx(static_cast<double>(x->data[(static_cast<size_t>(b) * c + ic) * plane + i]), 0.0);
                fft::dft_2d(h, w, buf.data(), spec_in.data() + static_cast<size_t>(ic) * plane, false);
            }
            std::fill(spec_out.begin(), spec_out.end(), Cx(0, 0));
            mix_forward(spec_in, spec_out);
            for (int oc = 0; oc < o; ++oc) {
                fft::dft_2d(h, w, spec_out.data() + static_cast<size_t>(oc) * plane, buf.data(), true);
                Real* dst = out->data.data() + (static_cast<size_t>(b) * o + oc) * plane;
                for (size_t i = 0; i < plane; ++i) dst[i] = static_cast<Real>(buf[i].real());
            }
        }
    }

    if (out->requires_grad) {
        out->backward_fn = [n, c, o, h, w, modes_x, modes_y, plane](TensorNode<Real>& self) {
            auto& x = *self.parents[0];
            auto& wts = *self.parents[1];
            if (x.requires_grad) x.ensure_grad();
            if (wts.requires_grad) wts.ensure_grad();
            std::vector<Cx> buf(plane), spec_in(static_cast<size_t>(c) * plane),
                dspec_out(static_cast<size_t>(o) * plane), dspec_in(static_cast<size_t>(c) * plane);
            for (int b = 0; b < n; ++b) {
                // dZ for the output spectra: adjoint of "real part of normalized
                // ifft" is the forward transform scaled by 1/(h*w)
                const double inv_hw = 1.0 / (static_cast<double>(h) * w);
                for (int oc = 0; oc < o; ++oc) {
                    for (size_t i = 0; i < plane; ++i)
                        buf[i] = Cx(static_cast<double>(
                                        self.grad[(static_cast<size_t>(b) * o + oc) * plane + i]), 0.0);
                    Cx* dst = dspec_out.data() + static_cast<size_t>(oc) * plane;
                    fft::dft_2d(h, w, buf.data(), dst, false);
                    for (size_t i = 0; i < plane; ++i) dst[i] *= inv_hw;
                }
                // input spectra (recomputed; cheaper than caching per batch)
                for (int ic = 0; ic < c; ++ic) {
                    for (size_t i = 0; i < plane; ++i)
                        buf[i] = Cx(static_cast<double>(
                                        x.data[(static_cast<size_t>(b) * c + ic) * plane + i]), 0.0);
                    fft::dft_2d(h, w, buf.data(), spec_in.data() + static_cast<size_t>(ic) * plane, false);
                }
                if (x.requires_grad) std::fill(dspec_in.begin(), dspec_in.end(), Cx(0, 0));
                for (int oc = 0; oc < o; ++oc)
                    for (int ic = 0; ic < c; ++ic) {
                        const Cx* dD = dspec_out.data() + static_cast<size_t>(oc) * plane;
                        const Cx* S = spec_in.data() + static_cast<size_t>(ic) * plane;
                        Cx* dS = dspec_in.data() + static_cast<size_t>(ic) * plane;
                        const size_t wbase = (static_cast<size_t>(oc) * c + ic) *
                                             static_cast<size_t>(modes_y) * modes_x * 2;
                        for (int ky = 0; ky < modes_y; ++ky)
                            for (int kx = 0; kx < modes_x; ++kx) {
                                size_t wi = wbase + (static_cast<size_t>(ky) * modes_x + kx) * 2;
                                Cx wv(wts.data[wi], wts.data[wi + 1]);
                                size_t idx = static_cast<size_t>(ky) * w + kx;
                                int my = (h - ky) % h, mx = (w - kx) % w;
                                bool mirrored = (my != ky || mx != kx);
                                size_t midx = static_cast<size_t>(my) * w + mx;
                                if (wts.requires_grad) {
                                    // base: dw += conj(S) * dD ; mirror (y = conj(w) s): dw += conj(dD) * S
                                    Cx dw = std::conj(S[idx]) * dD[idx];
                                    if (mirrored) dw += std::conj(dD[midx]) * S[midx];
                                    wts.grad[wi] += static_cast<Real>(dw.real());
                                    wts.grad[wi + 1] += static_cast<Real>(dw.imag());
                                }
                                if (x.requires_grad) {
                                    dS[idx] += std::conj(wv) * dD[idx];
                                    if (mirrored) dS[midx] += wv * dD[midx];
                                }
                            }
                    }
                if (x.requires_grad) {
                    for (int ic = 0; ic < c; ++ic) {
                        // adjoint of forward fft: dx = Re(HW * ifft(dS)) = Re(fft^+(dS))
                        fft::dft_2d(h, w, dspec_in.data() + static_cast<size_t>(ic) * plane, buf.data(), true);
                        Real* dst = x.grad.data() + (static_cast<size_t>(b) * c + ic) * plane;
                        double scale = static_cast<double>(h) * w;
                        for (size_t i = 0; i < plane; ++i)
                            dst[i] += static_cast<Real>(buf[i].real() * scale);
                    }
                }
            }
        };
    }
    return out;
}

}  // namespace acdm
