// Structured ops for the segmentation network: 2-d convolution (im2col +
// blocked GEMM), nearest-neighbour upsampling, group normalization, and
// channel softmax, each with its reverse-mode rule.
//
// Layout is NCHW row-major throughout. Parallel loops split only output
// elements across threads; every reduction runs serially in a fixed order,
// which keeps results bit-identical for any SEGREFINE_THREADS value.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "segrefine/tensor.hpp"
#include "segrefine/threading.hpp"

namespace segrefine {

namespace detail {

// C[m x n] += A[m x k] * B[k x n], all row-major. The j-tile keeps a column
// block of B hot in cache while streaming rows of A.
template <typename T>
void gemm_accum(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k,
                std::int64_t n) {
    constexpr std::int64_t kJTile = 512;
    parallel_for(m, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t j0 = 0; j0 < n; j0 += kJTile) {
            const std::int64_t j1 = std::min(n, j0 + kJTile);
            for (std::int64_t i = i0; i < i1; ++i) {
                const T* arow = a + i * k;
                T* crow = c + i * n;
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    const T av = arow[kk];
                    const T* brow = b + kk * n;
                    for (std::int64_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
                }
            }
        }
    });
}

struct ConvDims {
    std::int64_t n, ic, h, w;
    std::int64_t oc, kh, kw;
    std::int64_t stride, pad;
    std::int64_t oh, ow;
    std::int64_t patch() const { return ic * kh * kw; }
    std::int64_t out_hw() const { return oh * ow; }
};

// col[(ic*kh+r)*kw+s][oh*ow+...] = x[ic][oh*stride-pad+r][ow*stride-pad+s],
// zero outside the image. One sample.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
    const std::int64_t hw = d.h * d.w;
    const std::int64_t out_hw = d.out_hw();
    std::int64_t row = 0;
    for (std::int64_t ic = 0; ic < d.ic; ++ic) {
        const T* plane = x + ic * hw;
        for (std::int64_t r = 0; r < d.kh; ++r) {
            for (std::int64_t s = 0; s < d.kw; ++s, ++row) {
                T* dst = col + row * out_hw;
                for (std::int64_t oh = 0; oh < d.oh; ++oh) {
                    const std::int64_t ih = oh * d.stride - d.pad + r;
                    if (ih < 0 || ih >= d.h) {
                        for (std::int64_t ow = 0; ow < d.ow; ++ow) dst[oh * d.ow + ow] = T(0);
                        continue;
                    }
                    const T* src = plane + ih * d.w;
                    for (std::int64_t ow = 0; ow < d.ow; ++ow) {
                        const std::int64_t iw = ow * d.stride - d.pad + s;
                        dst[oh * d.ow + ow] =
                            (iw >= 0 && iw < d.w) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

// colt[oh*ow+...][(ic*kh+r)*kw+s]: the transpose of im2col, used so the
// weight-gradient GEMM keeps unit-stride inner loops.
template <typename T>
void im2row(const T* x, const ConvDims& d, T* colt) {
    const std::int64_t hw = d.h * d.w;
    const std::int64_t patch = d.patch();
    std::int64_t row = 0;
    for (std::int64_t ic = 0; ic < d.ic; ++ic) {
        const T* plane = x + ic * hw;
        for (std::int64_t r = 0; r < d.kh; ++r) {
            for (std::int64_t s = 0; s < d.kw; ++s, ++row) {
                for (std::int64_t oh = 0; oh < d.oh; ++oh) {
                    const std::int64_t ih = oh * d.stride - d.pad + r;
                    for (std::int64_t ow = 0; ow < d.ow; ++ow) {
                        const std::int64_t iw = ow * d.stride - d.pad + s;
                        colt[(oh * d.ow + ow) * patch + row] =
                            (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w)
                                ? plane[ih * d.w + iw]
                                : T(0);
                    }
                }
            }
        }
    }
}

// Scatter-add of dcol back onto a sample's input gradient.
template <typename T>
void col2im_accum(const T* dcol, const ConvDims& d, T* dx) {
    const std::int64_t hw = d.h * d.w;
    const std::int64_t out_hw = d.out_hw();
    std::int64_t row = 0;
    for (std::int64_t ic = 0; ic < d.ic; ++ic) {
        T* plane = dx + ic * hw;
        for (std::int64_t r = 0; r < d.kh; ++r) {
            for (std::int64_t s = 0; s < d.kw; ++s, ++row) {
                const T* src = dcol + row * out_hw;
                for (std::int64_t oh = 0; oh < d.oh; ++oh) {
                    const std::int64_t ih = oh * d.stride - d.pad + r;
                    if (ih < 0 || ih >= d.h) continue;
                    for (std::int64_t ow = 0; ow < d.ow; ++ow) {
                        const std::int64_t iw = ow * d.stride - d.pad + s;
                        if (iw >= 0 && iw < d.w) {
                            plane[ih * d.w + iw] += src[oh * d.ow + ow];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d

/// x: [N, IC, H, W], w: [OC, IC, KH, KW], b: [OC] or undefined for no bias.
/// Output: [N, OC, OH, OW] with OH = (H + 2*pad - KH) / stride + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::int64_t stride, std::int64_t pad) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw ShapeError("conv2d: weight must be [OC,IC,KH,KW], got " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(1)) {
        throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) +
                         " != weight channels " + std::to_string(w.dim(1)));
    }
    if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(0))) {
        throw ShapeError("conv2d: bias must be [OC], got " + shape_str(b.shape()));
    }
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (pad < 0) throw ShapeError("conv2d: pad must be >= 0");

    detail::ConvDims d;
    d.n = x.dim(0);
    d.ic = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.oc = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    d.pad = pad;
    if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw) {
        throw ShapeError("conv2d: kernel larger than padded input");
    }
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;

    auto out = Tensor<T>::zeros({d.n, d.oc, d.oh, d.ow});
    const std::int64_t in_plane = d.ic * d.h * d.w;
    const std::int64_t out_plane = d.oc * d.out_hw();
    {
        std::vector<T> col(static_cast<std::size_t>(d.patch() * d.out_hw()));
        for (std::int64_t n = 0; n < d.n; ++n) {
            detail::im2col(x.data().data() + n * in_plane, d, col.data());
            detail::gemm_accum(w.data().data(), col.data(),
                               out.mutable_data().data() + n * out_plane, d.oc,
                               d.patch(), d.out_hw());
        }
        if (b.defined()) {
            auto& ov = out.mutable_data();
            const auto& bv = b.data();
            for (std::int64_t n = 0; n < d.n; ++n) {
                for (std::int64_t oc = 0; oc < d.oc; ++oc) {
                    T* dst = ov.data() + n * out_plane + oc * d.out_hw();
                    const T bias = bv[static_cast<std::size_t>(oc)];
                    for (std::int64_t l = 0; l < d.out_hw(); ++l) dst[l] += bias;
                }
            }
        }
    }

    auto xi = x.impl();
    auto wi = w.impl();
    auto bi = b.defined() ? b.impl() : nullptr;
    std::vector<Tensor<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    detail::attach_node<T>("conv2d", out, std::move(inputs),
                           [xi, wi, bi, d, in_plane, out_plane](const TensorImpl<T>& o) {
        const T* dy = o.grad.data();
        const std::int64_t out_hw = d.out_hw();
        const std::int64_t patch = d.patch();

        if (bi && bi->requires_grad) {
            auto& db = detail::ensure_grad(*bi);
            parallel_for(d.oc, [&](std::int64_t c0, std::int64_t c1) {
                for (std::int64_t oc = c0; oc < c1; ++oc) {
                    T acc = 0;
                    for (std::int64_t n = 0; n < d.n; ++n) {
                        const T* src = dy + n * out_plane + oc * out_hw;
                        for (std::int64_t l = 0; l < out_hw; ++l) acc += src[l];
                    }
                    db[static_cast<std::size_t>(oc)] += acc;
                }
            });
        }

        if (wi->requires_grad) {
            auto& dw = detail::ensure_grad(*wi);
            std::vector<T> colt(static_cast<std::size_t>(out_hw * patch));
            for (std::int64_t n = 0; n < d.n; ++n) {
                detail::im2row(xi->data.data() + n * in_plane, d, colt.data());
                detail::gemm_accum(dy + n * out_plane, colt.data(), dw.data(), d.oc,
                                   out_hw, patch);
            }
        }

        if (xi->requires_grad || xi->grad_fn) {
            auto& dx = detail::ensure_grad(*xi);
            // wt[patch x oc] = w transposed, so dcol = wt * dy is a plain GEMM.
            std::vector<T> wt(static_cast<std::size_t>(patch * d.oc));
            for (std::int64_t oc = 0; oc < d.oc; ++oc) {
                for (std::int64_t p = 0; p < patch; ++p) {
                    wt[static_cast<std::size_t>(p * d.oc + oc)] =
                        wi->data[static_cast<std::size_t>(oc * patch + p)];
                }
            }
            std::vector<T> dcol(static_cast<std::size_t>(patch * out_hw));
            for (std::int64_t n = 0; n < d.n; ++n) {
                std::fill(dcol.begin(), dcol.end(), T(0));
                detail::gemm_accum(wt.data(), dy + n * out_plane, dcol.data(), patch,
                                   d.oc, out_hw);
                detail::col2im_accum(dcol.data(), d, dx.data() + n * in_plane);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// upsample2x_nearest

/// [N, C, H, W] -> [N, C, 2H, 2W], each pixel replicated into a 2x2 block.
template <typename T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("upsample2x_nearest: input must be [N,C,H,W]");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    auto out = Tensor<T>::zeros({n, c, 2 * h, 2 * w});
    const auto& xv = x.data();
    auto& ov = out.mutable_data();
    parallel_for(n * c, [&](std::int64_t p0, std::int64_t p1) {
        for (std::int64_t p = p0; p < p1; ++p) {
            const T* src = xv.data() + p * h * w;
            T* dst = ov.data() + p * 4 * h * w;
            for (std::int64_t i = 0; i < h; ++i) {
                for (std::int64_t j = 0; j < w; ++j) {
                    const T v = src[i * w + j];
                    T* row0 = dst + (2 * i) * 2 * w + 2 * j;
                    T* row1 = row0 + 2 * w;
                    row0[0] = v;
                    row0[1] = v;
                    row1[0] = v;
                    row1[1] = v;
                }
            }
        }
    });

    auto xi = x.impl();
    detail::attach_node<T>("upsample2x_nearest", out, {x},
                           [xi, n, c, h, w](const TensorImpl<T>& o) {
        auto& dx = detail::ensure_grad(*xi);
        parallel_for(n * c, [&](std::int64_t p0, std::int64_t p1) {
            for (std::int64_t p = p0; p < p1; ++p) {
                const T* src = o.grad.data() + p * 4 * h * w;
                T* dst = dx.data() + p * h * w;
                for (std::int64_t i = 0; i < h; ++i) {
                    for (std::int64_t j = 0; j < w; ++j) {
                        const T* row0 = src + (2 * i) * 2 * w + 2 * j;
                        const T* row1 = row0 + 2 * w;
                        dst[i * w + j] += row0[0] + row0[1] + row1[0] + row1[1];
                    }
                }
            }
        });
    });
    return out;
}

// ---------------------------------------------------------------------------
// group_norm

/// Normalizes over (C/groups, H, W) per sample and group, then applies the
/// per-channel affine (gamma, beta). Population variance; eps guards the
/// rsqrt. gamma/beta: [C].
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, std::int64_t groups, T eps = T(1e-5)) {
    if (x.rank() != 4) throw ShapeError("group_norm: input must be [N,C,H,W]");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (groups < 1 || c % groups != 0) {
        throw ShapeError("group_norm: channels " + std::to_string(c) +
                         " not divisible by groups " + std::to_string(groups));
    }
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c) {
        throw ShapeError("group_norm: gamma/beta must be [C]");
    }
    const std::int64_t cg = c / groups;       // channels per group
    const std::int64_t m = cg * h * w;        // elements per (sample, group)
    const std::int64_t hw = h * w;

    auto out = Tensor<T>::zeros(x.shape());
    // Saved for backward: one (mean, inv_std) pair per (sample, group).
    auto stats = std::make_shared<std::vector<T>>(static_cast<std::size_t>(2 * n * groups));
    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    auto& ov = out.mutable_data();
    parallel_for(n * groups, [&](std::int64_t g0, std::int64_t g1) {
        for (std::int64_t idx = g0; idx < g1; ++idx) {
            const std::int64_t ni = idx / groups;
            const std::int64_t gi = idx % groups;
            const T* src = xv.data() + (ni * c + gi * cg) * hw;
            T mean = 0;
            for (std::int64_t i = 0; i < m; ++i) mean += src[i];
            mean /= static_cast<T>(m);
            T var = 0;
            for (std::int64_t i = 0; i < m; ++i) {
                const T dlt = src[i] - mean;
                var += dlt * dlt;
            }
            var /= static_cast<T>(m);
            const T inv = T(1) / std::sqrt(var + eps);
            (*stats)[static_cast<std::size_t>(2 * idx)] = mean;
            (*stats)[static_cast<std::size_t>(2 * idx + 1)] = inv;
            T* dst = ov.data() + (ni * c + gi * cg) * hw;
            for (std::int64_t cc = 0; cc < cg; ++cc) {
                const T ga = gv[static_cast<std::size_t>(gi * cg + cc)];
                const T be = bv[static_cast<std::size_t>(gi * cg + cc)];
                for (std::int64_t i = 0; i < hw; ++i) {
                    dst[cc * hw + i] = ga * (src[cc * hw + i] - mean) * inv + be;
                }
            }
        }
    });

    auto xi = x.impl();
    auto gi_ = gamma.impl();
    auto bi = beta.impl();
    detail::attach_node<T>("group_norm", out, {x, gamma, beta},
                           [xi, gi_, bi, stats, n, c, h, w, groups, cg, m,
                            hw](const TensorImpl<T>& o) {
        const T* dy = o.grad.data();
        if (gi_->requires_grad || bi->requires_grad) {
            auto& dg = detail::ensure_grad(*gi_);
            auto& db = detail::ensure_grad(*bi);
            parallel_for(c, [&](std::int64_t c0, std::int64_t c1) {
                for (std::int64_t ch = c0; ch < c1; ++ch) {
                    const std::int64_t gidx = ch / cg;
                    T sum_dy = 0, sum_dy_xhat = 0;
                    for (std::int64_t ni = 0; ni < n; ++ni) {
                        const T mean = (*stats)[static_cast<std::size_t>(2 * (ni * groups + gidx))];
                        const T inv = (*stats)[static_cast<std::size_t>(2 * (ni * groups + gidx) + 1)];
                        const T* xs = xi->data.data() + (ni * c + ch) * hw;
                        const T* ds = dy + (ni * c + ch) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            sum_dy += ds[i];
                            sum_dy_xhat += ds[i] * (xs[i] - mean) * inv;
                        }
                    }
                    dg[static_cast<std::size_t>(ch)] += sum_dy_xhat;
                    db[static_cast<std::size_t>(ch)] += sum_dy;
                }
            });
        }
        if (xi->requires_grad || xi->grad_fn) {
            auto& dx = detail::ensure_grad(*xi);
            parallel_for(n * groups, [&](std::int64_t g0, std::int64_t g1) {
                for (std::int64_t idx = g0; idx < g1; ++idx) {
                    const std::int64_t ni = idx / groups;
                    const std::int64_t gidx = idx % groups;
                    const T mean = (*stats)[static_cast<std::size_t>(2 * idx)];
                    const T inv = (*stats)[static_cast<std::size_t>(2 * idx + 1)];
                    const T* xs = xi->data.data() + (ni * c + gidx * cg) * hw;
                    const T* ds = dy + (ni * c + gidx * cg) * hw;
                    // dxhat = dy * gamma; dx = inv*(dxhat - mean(dxhat)
                    //        - xhat * mean(dxhat*xhat)).
                    T mean_dxhat = 0, mean_dxhat_xhat = 0;
                    for (std::int64_t cc = 0; cc < cg; ++cc) {
                        const T ga = gi_->data[static_cast<std::size_t>(gidx * cg + cc)];
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const T dxhat = ds[cc * hw + i] * ga;
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * (xs[cc * hw + i] - mean) * inv;
                        }
                    }
                    mean_dxhat /= static_cast<T>(m);
                    mean_dxhat_xhat /= static_cast<T>(m);
                    T* dst = dx.data() + (ni * c + gidx * cg) * hw;
                    for (std::int64_t cc = 0; cc < cg; ++cc) {
                        const T ga = gi_->data[static_cast<std::size_t>(gidx * cg + cc)];
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const T xhat = (xs[cc * hw + i] - mean) * inv;
                            const T dxhat = ds[cc * hw + i] * ga;
                            dst[cc * hw + i] +=
                                inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
            });
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// softmax_channels

/// Softmax over the channel axis of [N, C, H, W], max-shifted for stability.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("softmax_channels: input must be [N,C,H,W]");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t hw = h * w;
    auto out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.mutable_data();
    parallel_for(n * hw, [&](std::int64_t p0, std::int64_t p1) {
        for (std::int64_t p = p0; p < p1; ++p) {
            const std::int64_t ni = p / hw;
            const std::int64_t px = p % hw;
            const T* src = xv.data() + ni * c * hw + px;
            T* dst = ov.data() + ni * c * hw + px;
            T mx = src[0];
            for (std::int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, src[ch * hw]);
            T denom = 0;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const T e = std::exp(src[ch * hw] - mx);
                dst[ch * hw] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (std::int64_t ch = 0; ch < c; ++ch) dst[ch * hw] *= inv;
        }
    });

    auto xi = x.impl();
    detail::attach_node<T>("softmax_channels", out, {x},
                           [xi, n, c, hw](const TensorImpl<T>& o) {
        auto& dx = detail::ensure_grad(*xi);
        const T* dy = o.grad.data();
        const T* p = o.data.data();
        parallel_for(n * hw, [&](std::int64_t p0, std::int64_t p1) {
            for (std::int64_t px_ = p0; px_ < p1; ++px_) {
                const std::int64_t ni = px_ / hw;
                const std::int64_t px = px_ % hw;
                const std::int64_t base = ni * c * hw + px;
                T dot = 0;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    dot += dy[base + ch * hw] * p[base + ch * hw];
                }
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    dx[base + ch * hw] += p[base + ch * hw] * (dy[base + ch * hw] - dot);
                }
            }
        });
    });
    return out;
}

}  // namespace segrefine
