#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "tape.hpp"
#include "tensor.hpp"

namespace sgdrop {

enum class ConvImpl { im2col, direct };

namespace kernels {

[[noreturn]] inline void fail(const std::string& op, const std::string& msg) {
    throw std::invalid_argument(op + ": " + msg);
}

inline void require_same(const std::string& op, const Shape& a, const Shape& b) {
    if (!same_shape(a, b)) fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same("add", a.shape(), b.shape());
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same("sub", a.shape(), b.shape());
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same("mul", a.shape(), b.shape());
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T k) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * k;
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
    return out;
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void matmul_nn_acc(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* a = A + i * K;
        T* c = C + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T av = a[k];
            const T* brow = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B^T where B is stored [N,K]
template <typename T>
void matmul_nt_acc(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* a = A + i * K;
        T* c = C + i * N;
        for (std::size_t j = 0; j < N; ++j) {
            const T* b = B + j * K;
            T acc{0};
            for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
            c[j] += acc;
        }
    }
}

// C[M,N] += A^T * B where A is stored [K,M]
template <typename T>
void matmul_tn_acc(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t k = 0; k < K; ++k) {
        const T* a = A + k * M;
        const T* b = B + k * N;
        for (std::size_t i = 0; i < M; ++i) {
            const T av = a[i];
            T* c = C + i * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
        fail("matmul", "incompatible shapes " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()));
    Tensor<T> out({a.extent(0), b.extent(1)});
    matmul_nn_acc(a.data(), b.data(), out.data(), a.extent(0), a.extent(1), b.extent(1));
    return out;
}

struct ConvDims {
    std::size_t n, c, h, w, o, kh, kw, oh, ow;
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
    if (x.rank() != 4) fail("conv2d", "input must be NCHW, got " + shape_str(x.shape()));
    if (w.rank() != 4) fail("conv2d", "weight must be OIHW, got " + shape_str(w.shape()));
    if (x.extent(1) != w.extent(1))
        fail("conv2d", "input channels " + shape_str(x.shape()) + " do not match weight " +
                           shape_str(w.shape()));
    if (stride == 0) fail("conv2d", "stride must be >= 1");
    ConvDims d;
    d.n = x.extent(0);
    d.c = x.extent(1);
    d.h = x.extent(2);
    d.w = x.extent(3);
    d.o = w.extent(0);
    d.kh = w.extent(2);
    d.kw = w.extent(3);
    if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
        fail("conv2d", "kernel " + shape_str(w.shape()) + " larger than padded input " +
                           shape_str(x.shape()));
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    return d;
}

// cols layout: row (c*kh+i)*kw+j, column oy*OW+ox
template <typename T>
void im2col(const T* x, const ConvDims& d, std::size_t stride, std::size_t pad, T* cols) {
    const std::size_t span = d.oh * d.ow;
    for (std::size_t c = 0; c < d.c; ++c) {
        const T* xc = x + c * d.h * d.w;
        for (std::size_t ki = 0; ki < d.kh; ++ki) {
            for (std::size_t kj = 0; kj < d.kw; ++kj) {
                T* row = cols + ((c * d.kh + ki) * d.kw + kj) * span;
                for (std::size_t oy = 0; oy < d.oh; ++oy) {
                    const std::ptrdiff_t y =
                        static_cast<std::ptrdiff_t>(oy * stride + ki) -
                        static_cast<std::ptrdiff_t>(pad);
                    T* dst = row + oy * d.ow;
                    if (y < 0 || y >= static_cast<std::ptrdiff_t>(d.h)) {
                        std::fill(dst, dst + d.ow, T{0});
                        continue;
                    }
                    const T* xrow = xc + static_cast<std::size_t>(y) * d.w;
                    for (std::size_t ox = 0; ox < d.ow; ++ox) {
                        const std::ptrdiff_t xx =
                            static_cast<std::ptrdiff_t>(ox * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad);
                        dst[ox] = (xx < 0 || xx >= static_cast<std::ptrdiff_t>(d.w))
                                      ? T{0}
                                      : xrow[static_cast<std::size_t>(xx)];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_acc(const T* cols, const ConvDims& d, std::size_t stride, std::size_t pad, T* x) {
    const std::size_t span = d.oh * d.ow;
    for (std::size_t c = 0; c < d.c; ++c) {
        T* xc = x + c * d.h * d.w;
        for (std::size_t ki = 0; ki < d.kh; ++ki) {
            for (std::size_t kj = 0; kj < d.kw; ++kj) {
                const T* row = cols + ((c * d.kh + ki) * d.kw + kj) * span;
                for (std::size_t oy = 0; oy < d.oh; ++oy) {
                    const std::ptrdiff_t y =
                        static_cast<std::ptrdiff_t>(oy * stride + ki) -
                        static_cast<std::ptrdiff_t>(pad);
                    if (y < 0 || y >= static_cast<std::ptrdiff_t>(d.h)) continue;
                    T* xrow = xc + static_cast<std::size_t>(y) * d.w;
                    const T* src = row + oy * d.ow;
                    for (std::size_t ox = 0; ox < d.ow; ++ox) {
                        const std::ptrdiff_t xx =
                            static_cast<std::ptrdiff_t>(ox * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad);
                        if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(d.w)) continue;
                        xrow[static_cast<std::size_t>(xx)] += src[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         std::size_t stride, std::size_t pad, ConvImpl impl = ConvImpl::im2col) {
    const ConvDims d = conv_dims(x, w, stride, pad);
    if (!b.empty() && (b.rank() != 1 || b.extent(0) != d.o))
        fail("conv2d", "bias shape " + shape_str(b.shape()) + " does not match " +
                           std::to_string(d.o) + " output channels");
    Tensor<T> out({d.n, d.o, d.oh, d.ow});
    const std::size_t span = d.oh * d.ow;
    const std::size_t ckk = d.c * d.kh * d.kw;

    if (impl == ConvImpl::im2col) {
        std::vector<T> cols(ckk * span);
        for (std::size_t n = 0; n < d.n; ++n) {
            im2col(x.data() + n * d.c * d.h * d.w, d, stride, pad, cols.data());
            T* y = out.data() + n * d.o * span;
            matmul_nn_acc(w.data(), cols.data(), y, d.o, ckk, span);
        }
    } else {
        for (std::size_t n = 0; n < d.n; ++n) {
            const T* xs = x.data() + n * d.c * d.h * d.w;
            T* y = out.data() + n * d.o * span;
            for (std::size_t o = 0; o < d.o; ++o) {
                const T* wo = w.data() + o * ckk;
                for (std::size_t oy = 0; oy < d.oh; ++oy) {
                    for (std::size_t ox = 0; ox < d.ow; ++ox) {
                        T acc{0};
                        for (std::size_t c = 0; c < d.c; ++c) {
                            for (std::size_t ki = 0; ki < d.kh; ++ki) {
                                const std::ptrdiff_t yy =
                                    static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(d.h)) continue;
                                for (std::size_t kj = 0; kj < d.kw; ++kj) {
                                    const std::ptrdiff_t xx =
                                        static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(d.w)) continue;
                                    acc += wo[(c * d.kh + ki) * d.kw + kj] *
                                           xs[(c * d.h + static_cast<std::size_t>(yy)) * d.w +
                                              static_cast<std::size_t>(xx)];
                                }
                            }
                        }
                        y[(o * d.oh + oy) * d.ow + ox] = acc;
                    }
                }
            }
        }
    }

    if (!b.empty()) {
        for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t o = 0; o < d.o; ++o) {
                T* y = out.data() + (n * d.o + o) * span;
                const T bv = b[o];
                for (std::size_t i = 0; i < span; ++i) y[i] += bv;
            }
    }
    return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gout,
                     std::size_t stride, std::size_t pad, Tensor<T>* gx, Tensor<T>* gw,
                     Tensor<T>* gb) {
    const ConvDims d = conv_dims(x, w, stride, pad);
    const std::size_t span = d.oh * d.ow;
    const std::size_t ckk = d.c * d.kh * d.kw;
    if (gx) *gx = Tensor<T>(x.shape());
    if (gw) *gw = Tensor<T>(w.shape());
    if (gb) *gb = Tensor<T>({d.o});

    std::vector<T> cols(gw ? ckk * span : 0);
    std::vector<T> gcols(gx ? ckk * span : 0);
    for (std::size_t n = 0; n < d.n; ++n) {
        const T* g = gout.data() + n * d.o * span;
        if (gw) {
            im2col(x.data() + n * d.c * d.h * d.w, d, stride, pad, cols.data());
            matmul_nt_acc(g, cols.data(), gw->data(), d.o, span, ckk);
        }
        if (gx) {
            std::fill(gcols.begin(), gcols.end(), T{0});
            matmul_tn_acc(w.data(), g, gcols.data(), ckk, d.o, span);
            col2im_acc(gcols.data(), d, stride, pad, gx->data() + n * d.c * d.h * d.w);
        }
        if (gb) {
            for (std::size_t o = 0; o < d.o; ++o) {
                T acc{0};
                const T* go = g + o * span;
                for (std::size_t i = 0; i < span; ++i) acc += go[i];
                (*gb)[o] += acc;
            }
        }
    }
}

template <typename T>
Tensor<T> maxpool2d_forward(const Tensor<T>& x, std::size_t kernel, std::size_t stride,
                            std::vector<std::size_t>* argmax) {
    if (x.rank() != 4) fail("maxpool2d", "input must be NCHW, got " + shape_str(x.shape()));
    if (kernel == 0 || stride == 0) fail("maxpool2d", "kernel and stride must be >= 1");
    const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    if (H < kernel || W < kernel)
        fail("maxpool2d", "window " + std::to_string(kernel) + " larger than input " +
                              shape_str(x.shape()));
    const std::size_t OH = (H - kernel) / stride + 1;
    const std::size_t OW = (W - kernel) / stride + 1;
    Tensor<T> out({N, C, OH, OW});
    if (argmax) argmax->assign(out.numel(), 0);
    std::size_t oi = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T* plane = x.data() + (n * C + c) * H * W;
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox, ++oi) {
                    std::size_t best = (oy * stride) * W + ox * stride;
                    T bv = plane[best];
                    for (std::size_t i = 0; i < kernel; ++i)
                        for (std::size_t j = 0; j < kernel; ++j) {
                            const std::size_t idx = (oy * stride + i) * W + ox * stride + j;
                            if (plane[idx] > bv) { // first max wins on ties
                                bv = plane[idx];
                                best = idx;
                            }
                        }
                    out[oi] = bv;
                    if (argmax) (*argmax)[oi] = (n * C + c) * H * W + best;
                }
        }
    return out;
}

/// Row-wise softmax of [N,C] logits, computed in double with max-subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
    if (logits.rank() != 2) fail("softmax", "expected [N,C] logits, got " + shape_str(logits.shape()));
    const std::size_t N = logits.extent(0), C = logits.extent(1);
    Tensor<T> probs(logits.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const T* row = logits.data() + n * C;
        double m = static_cast<double>(row[0]);
        for (std::size_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(row[c]));
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(row[c]) - m);
        T* p = probs.data() + n * C;
        for (std::size_t c = 0; c < C; ++c)
            p[c] = static_cast<T>(std::exp(static_cast<double>(row[c]) - m) / z);
    }
    return probs;
}

/// Mean over the batch of -log softmax(logits)[label]. Also emits the
/// softmax matrix for the backward pass.
template <typename T>
double cross_entropy_forward(const Tensor<T>& logits, const std::vector<std::size_t>& labels,
                             Tensor<T>* probs_out = nullptr) {
    if (logits.rank() != 2)
        fail("cross_entropy", "expected [N,C] logits, got " + shape_str(logits.shape()));
    const std::size_t N = logits.extent(0), C = logits.extent(1);
    if (labels.size() != N)
        fail("cross_entropy", std::to_string(labels.size()) + " labels for batch of " +
                                  std::to_string(N));
    Tensor<T> probs(logits.shape());
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        if (labels[n] >= C)
            fail("cross_entropy", "label " + std::to_string(labels[n]) + " out of range [0, " +
                                      std::to_string(C) + ")");
        const T* row = logits.data() + n * C;
        double m = static_cast<double>(row[0]);
        for (std::size_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(row[c]));
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(row[c]) - m);
        T* p = probs.data() + n * C;
        for (std::size_t c = 0; c < C; ++c)
            p[c] = static_cast<T>(std::exp(static_cast<double>(row[c]) - m) / z);
        total += std::log(z) - (static_cast<double>(row[labels[n]]) - m);
    }
    if (probs_out) *probs_out = std::move(probs);
    return total / static_cast<double>(N);
}

/// Bilinear resample of a single [H,W] map with corner alignment. Works for
/// both up- and down-scaling (no antialiasing).
template <typename T>
void bilinear_resize(const T* src, std::size_t h, std::size_t w, T* dst, std::size_t oh,
                     std::size_t ow) {
    const double sy = oh > 1 ? static_cast<double>(h - 1) / static_cast<double>(oh - 1) : 0.0;
    const double sx = ow > 1 ? static_cast<double>(w - 1) / static_cast<double>(ow - 1) : 0.0;
    for (std::size_t oy = 0; oy < oh; ++oy) {
        const double fy = static_cast<double>(oy) * sy;
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double ty = fy - static_cast<double>(y0);
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const double fx = static_cast<double>(ox) * sx;
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double tx = fx - static_cast<double>(x0);
            const double a = static_cast<double>(src[y0 * w + x0]);
            const double b = static_cast<double>(src[y0 * w + x1]);
            const double c = static_cast<double>(src[y1 * w + x0]);
            const double d = static_cast<double>(src[y1 * w + x1]);
            const double top = a + (b - a) * tx;
            const double bot = c + (d - c) * tx;
            dst[oy * ow + ox] = static_cast<T>(top + (bot - top) * ty);
        }
    }
}

} // namespace kernels

// ---------------------------------------------------------------------------
// Tape ops. Each computes the forward value with the kernels above and, when
// a tape is supplied and any input is tracked, records a node whose closure
// routes gradients back to the tracked parents. With tape == nullptr these
// are plain inference math.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
    Tensor<T> out = kernels::add(a.value, b.value);
    if (!tape || (!a.tracked() && !b.tracked())) return Var<T>::constant(std::move(out));
    const int pa = a.node, pb = b.node;
    std::vector<int> parents;
    if (pa >= 0) parents.push_back(pa);
    if (pb >= 0) parents.push_back(pb);
    int id = tape->record(parents, out.shape(),
                          [pa, pb](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
                              if (pa >= 0) Tape<T>::accumulate(grads, pa, g);
                              if (pb >= 0) Tape<T>::accumulate(grads, pb, g);
                          });
    return Var<T>{std::move(out), id};
}

template <typename T>
Var<T> sub(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
    Tensor<T> out = kernels::sub(a.value, b.value);
    if (!tape || (!a.tracked() && !b.tracked())) return Var<T>::constant(std::move(out));
    const int pa = a.node, pb = b.node;
    std::vector<int> parents;
    if (pa >= 0) parents.push_back(pa);
    if (pb >= 0) parents.push_back(pb);
    int id = tape->record(parents, out.shape(),
                          [pa, pb](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
                              if (pa >= 0) Tape<T>::accumulate(grads, pa, g);
                              if (pb >= 0) Tape<T>::accumulate(grads, pb, kernels::scale(g, T{-1}));
                          });
    return Var<T>{std::move(out), id};
}

template <typename T>
Var<T> mul(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
    Tensor<T> out = kernels::mul(a.value, b.value);
    if (!tape || (!a.tracked() && !b.tracked())) return Var<T>::constant(std::move(out));
    const int pa = a.node, pb = b.node;
    const Tensor<T> av = a.value, bv = b.value; // shared handles
    std::vector<int> parents;
    if (pa >= 0) parents.push_back(pa);
    if (pb >= 0) parents.push_back(pb);
    int id = tape->record(parents, out.shape(),
                          [pa, pb, av, bv](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
                              if (pa >= 0) Tape<T>::accumulate(grads, pa, kernels::mul(g, bv));
                              if (pb >= 0) Tape<T>::accumulate(grads, pb, kernels::mul(g, av));
                          });
    return Var<T>{std::move(out), id};
}

template <typename T>
Var<T> scale(Tape<T>* tape, const Var<T>& a, double k) {
    Tensor<T> out = kernels::scale(a.value, static_cast<T>(k));
    if (!tape || !a.tracked()) return Var<T>::constant(std::move(out));
    const int pa = a.node;
    int id = tape->record({pa}, out.shape(),
                          [pa, k](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
                              Tape<T>::accumulate(grads, pa, kernels::scale(g, static_cast<T>(k)));
                          });
    return Var<T>{std::move(out), id};
}

template <typename T>
Var<T> relu(Tape<T>* tape, const Var<T>& x) {
    Tensor<T> out = kernels::relu(x.value);
    if (!tape || !x.tracked()) return Var<T>::constant(std::move(out));
    const int px = x.node;
    const Tensor<T> xv = x.value;
    int id = tape->record({px}, out.shape(),
                          [px, xv](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
                              Tensor<T> gx(xv.shape());
                              for (std::size_t i = 0; i < xv.numel(); ++i)
                                  gx[i] = xv[i] > T{0} ? g[i] : T{0};
                              Tape<T>::accumulate(grads, px, gx);
                          });
    return Var<T>{std::move(out), id};
}

template <typename T>
Var<T> matmul(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
    Tensor<T> out = kernels::matmul(a.value, b.value);
    if (!tape || (!a.tracked() && !b.tracked())) return Var<T>::constant(std::move(out));
    const int pa = a.node, pb = b.node;
    const Tensor<T> av = a.value, bv = b.value;
    std::vector<int> parents;
    if (pa >= 0) parents.push_back(pa);
    if (pb >= 0) parents.push_back(pb);
    int id = tape->record(
        parents, out.shape(), [pa, pb, av, bv](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
            const std::size_t M = av.extent(0), K = av.extent(1), N = bv.extent(1);
            if (pa >= 0) {
                Tensor<T> ga({M, K});
                kernels::matmul_nt_acc(g.data(), bv.data(), ga.data(), M, N, K);
                Tape<T>::accumulate(grads, pa, ga);
            }
            if (pb >= 0) {
                Tensor<T> gb({K, N});
                kernels::matmul_tn_acc(av.data(), g.data(), gb.data(), K, M, N);
                Tape<T>::accumulate(grads, pb, gb);
            }
        });
    return Var<T>{std::move(out), id};
}

/// y = x * W^T + b for x [N,F], W [out,F], b [out] (b may be empty).
template <typename T>
Var<T> linear(Tape<T>* tape, const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const Tensor<T>&xv = x.value, &wv = w.value;
    if (xv.rank() != 2 || wv.rank() != 2 || xv.extent(1) != wv.extent(1))
        kernels::fail("linear", "input " + shape_str(xv.shape()) + " incompatible with weight " +
                                    shape_str(wv.shape()));
    const std::size_t N = xv.extent(0), F = xv.extent(1), O = wv.extent(0);
    if (!b.value.empty() && (b.value.rank() != 1 || b.value.extent(0) != O))
        kernels::fail("linear", "bias shape " + shape_str(b.value.shape()) + " does not match " +
                                    std::to_string(O) + " outputs");
    Tensor<T> out({N, O});
    kernels::matmul_nt_acc(xv.data(), wv.data(), out.data(), N, F, O);
    if (!b.value.empty())
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o) out[n * O + o] += b.value[o];

    if (!tape || (!x.tracked() && !w.tracked() && !b.tracked()))
        return Var<T>::constant(std::move(out));
    const int px = x.node, pw = w.node, pb = b.node;
    const Tensor<T> xs = xv, ws = wv;
    std::vector<int> parents;
    for (int p : {px, pw, pb})
        if (p >= 0) parents.push_back(p);
    int id = tape->record(
        parents, out.shape(),
        [px, pw, pb, xs, ws, N, F, O](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
            if (px >= 0) {
                Tensor<T> gx({N, F});
                kernels::matmul_nn_acc(g.data(), ws.data(), gx.data(), N, O, F);
                Tape<T>::accumulate(grads, px, gx);
            }
            if (pw >= 0) {
                Tensor<T> gw({O, F});
                kernels::matmul_tn_acc(g.data(), xs.data(), gw.data(), O, N, F);
                Tape<T>::accumulate(grads, pw, gw);
            }
            if (pb >= 0) {
                Tensor<T> gb({O});
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t o = 0; o < O; ++o) gb[o] += g[n * O + o];
                Tape<T>::accumulate(grads, pb, gb);
            }
        });
    return Var<T>{std::move(out), id};
}

template <typename T>
Var<T> conv2d(Tape<T>* tape, const Var<T>& x, const Var<T>& w, const Var<T>& b,
              std::size_t stride, std::size_t pad, ConvImpl impl = ConvImpl::im2col) {
    Tensor<T> out = kernels::conv2d_forward(x.value, w.value, b.value, stride, pad, impl);
    if (!tape || (!x.tracked() && !w.tracked() && !b.tracked()))
        return Var<T>::constant(std::move(out));
    const int px = x.node, pw = w.node, pb = b.node;
    const Tensor<T> xs = x.value, ws = w.value;
    std::vector<int> parents;
    for (int p : {px, pw, pb})
        if (p >= 0) parents.push_back(p);
    int id = tape->record(
        parents, out.shape(),
        [px, pw, pb, xs, ws, stride, pad](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
            Tensor<T> gx, gw, gb;
            kernels::conv2d_backward(xs, ws, g, stride, pad, px >= 0 ? &gx : nullptr,
                                     pw >= 0 ? &gw : nullptr, pb >= 0 ? &gb : nullptr);
            if (px >= 0) Tape<T>::accumulate(grads, px, gx);
            if (pw >= 0) Tape<T>::accumulate(grads, pw, gw);
            if (pb >= 0) Tape<T>::accumulate(grads, pb, gb);
        });
    return Var<T>{std::move(out), id};
}

template <typename T>
Var<T> maxpool2d(Tape<T>* tape, const Var<T>& x, std::size_t kernel, std::size_t stride) {
    const bool track = tape && x.tracked();
    std::vector<std::size_t> argmax;
    Tensor<T> out = kernels::maxpool2d_forward(x.value, kernel, stride, track ? &argmax : nullptr);
    if (!track) return Var<T>::constant(std::move(out));
    const int px = x.node;
    const Shape xshape = x.value.shape();
    int id = tape->record(
        {px}, out.shape(),
        [px, xshape, argmax = std::move(argmax)](const Tensor<T>& g,
                                                 std::vector<Tensor<T>>& grads) {
            Tensor<T> gx(xshape);
            for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
            Tape<T>::accumulate(grads, px, gx);
        });
    return Var<T>{std::move(out), id};
}

template <typename T>
Var<T> reshape(Tape<T>* tape, const Var<T>& x, Shape s) {
    Tensor<T> out = x.value.reshaped(s);
    if (!tape || !x.tracked()) return Var<T>::constant(std::move(out));
    const int px = x.node;
    const Shape xshape = x.value.shape();
    int id = tape->record({px}, out.shape(),
                          [px, xshape](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
                              Tape<T>::accumulate(grads, px, g.reshaped(xshape));
                          });
    return Var<T>{std::move(out), id};
}

template <typename T>
Var<T> vsum(Tape<T>* tape, const Var<T>& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.value.numel(); ++i) acc += static_cast<double>(x.value[i]);
    Tensor<T> out({1});
    out[0] = static_cast<T>(acc);
    if (!tape || !x.tracked()) return Var<T>::constant(std::move(out));
    const int px = x.node;
    const Shape xshape = x.value.shape();
    int id = tape->record({px}, out.shape(),
                          [px, xshape](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
                              Tape<T>::accumulate(grads, px, Tensor<T>(xshape, g[0]));
                          });
    return Var<T>{std::move(out), id};
}

template <typename T>
Var<T> vmean(Tape<T>* tape, const Var<T>& x) {
    const std::size_t n = x.value.numel();
    Var<T> s = vsum(tape, x);
    return scale(tape, s, 1.0 / static_cast<double>(n));
}

/// out[n] = scores[n, index[n]]
template <typename T>
Var<T> pick_rows(Tape<T>* tape, const Var<T>& scores, const std::vector<std::size_t>& index) {
    const Tensor<T>& s = scores.value;
    if (s.rank() != 2) kernels::fail("pick_rows", "expected [N,C] input, got " + shape_str(s.shape()));
    const std::size_t N = s.extent(0), C = s.extent(1);
    if (index.size() != N)
        kernels::fail("pick_rows", std::to_string(index.size()) + " indices for batch of " +
                                       std::to_string(N));
    Tensor<T> out({N});
    for (std::size_t n = 0; n < N; ++n) {
        if (index[n] >= C)
            kernels::fail("pick_rows", "index " + std::to_string(index[n]) + " out of range [0, " +
                                           std::to_string(C) + ")");
        out[n] = s.at2(n, index[n]);
    }
    if (!tape || !scores.tracked()) return Var<T>::constant(std::move(out));
    const int ps = scores.node;
    const Shape sshape = s.shape();
    int id = tape->record({ps}, out.shape(),
                          [ps, sshape, index, C](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
                              Tensor<T> gs(sshape);
                              for (std::size_t n = 0; n < index.size(); ++n)
                                  gs[n * C + index[n]] = g[n];
                              Tape<T>::accumulate(grads, ps, gs);
                          });
    return Var<T>{std::move(out), id};
}

template <typename T>
Var<T> softmax_rows(Tape<T>* tape, const Var<T>& logits) {
    Tensor<T> probs = kernels::softmax_rows(logits.value);
    if (!tape || !logits.tracked()) return Var<T>::constant(std::move(probs));
    const int pl = logits.node;
    const Tensor<T> p = probs;
    int id = tape->record(
        {pl}, probs.shape(), [pl, p](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
            const std::size_t N = p.extent(0), C = p.extent(1);
            Tensor<T> gl(p.shape());
            for (std::size_t n = 0; n < N; ++n) {
                double dot = 0.0;
                for (std::size_t c = 0; c < C; ++c)
                    dot += static_cast<double>(g[n * C + c]) * static_cast<double>(p[n * C + c]);
                for (std::size_t c = 0; c < C; ++c)
                    gl[n * C + c] = static_cast<T>(
                        static_cast<double>(p[n * C + c]) *
                        (static_cast<double>(g[n * C + c]) - dot));
            }
            Tape<T>::accumulate(grads, pl, gl);
        });
    return Var<T>{std::move(probs), id};
}

/// Mean over the batch of -log softmax(logits)[label], max-stabilized.
template <typename T>
Var<T> cross_entropy(Tape<T>* tape, const Var<T>& logits, const std::vector<std::size_t>& labels) {
    Tensor<T> probs;
    const double loss = kernels::cross_entropy_forward(logits.value, labels, &probs);
    Tensor<T> out({1});
    out[0] = static_cast<T>(loss);
    if (!tape || !logits.tracked()) return Var<T>::constant(std::move(out));
    const int pl = logits.node;
    const Tensor<T> p = probs;
    int id = tape->record(
        {pl}, out.shape(), [pl, p, labels](const Tensor<T>& g, std::vector<Tensor<T>>& grads) {
            const std::size_t N = p.extent(0), C = p.extent(1);
            const T gv = g[0];
            Tensor<T> gl(p.shape());
            const T invn = static_cast<T>(1.0 / static_cast<double>(N));
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    T v = p[n * C + c];
                    if (c == labels[n]) v -= T{1};
                    gl[n * C + c] = gv * v * invn;
                }
            Tape<T>::accumulate(grads, pl, gl);
        });
    return Var<T>{std::move(out), id};
}

} // namespace sgdrop
