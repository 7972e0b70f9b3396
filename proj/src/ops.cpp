#include "rfcnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace rfcnet::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void require_same(const Shape& a, const Shape& b, const char* op) {
    if (!(a == b)) {
        throw ShapeMismatch(std::string(op) + ": shapes differ " + a.str() + " vs " + b.str());
    }
}

template <typename T>
Node<T>& parent(Node<T>& self, std::size_t i) {
    return *self.parents[i];
}

// Lowers one (C, Hs, Ws) image into a (C*k*k, Ho*Wo) patch matrix. Output
// column (oy, ox) reads source pixel (oy*stride - pad + ki, ox*stride - pad + kj).
template <typename T>
void im2col(const T* src, int channels, int hs, int ws, int k, int stride, int pad, int ho, int wo,
            T* cols) {
    const std::size_t ncols = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < channels; ++c) {
        const T* plane = src + static_cast<std::size_t>(c) * hs * ws;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                T* row = cols + ((static_cast<std::size_t>(c) * k + ki) * k + kj) * ncols;
                for (int oy = 0; oy < ho; ++oy) {
                    const int sy = oy * stride - pad + ki;
                    T* dst = row + static_cast<std::size_t>(oy) * wo;
                    if (sy < 0 || sy >= hs) {
                        std::fill(dst, dst + wo, T(0));
                        continue;
                    }
                    const T* srow = plane + static_cast<std::size_t>(sy) * ws;
                    if (stride == 1) {
                        const int shift = kj - pad;
                        const int lo = std::clamp(-shift, 0, wo);
                        const int hi = std::clamp(ws - shift, lo, wo);
                        std::fill(dst, dst + lo, T(0));
                        std::copy(srow + lo + shift, srow + hi + shift, dst + lo);
                        std::fill(dst + hi, dst + wo, T(0));
                    } else {
                        for (int ox = 0; ox < wo; ++ox) {
                            const int sx = ox * stride - pad + kj;
                            dst[ox] = (sx >= 0 && sx < ws) ? srow[sx] : T(0);
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatters-adds the patch matrix back into the image.
template <typename T>
void col2im(const T* cols, int channels, int hs, int ws, int k, int stride, int pad, int ho, int wo,
            T* dst) {
    const std::size_t ncols = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < channels; ++c) {
        T* plane = dst + static_cast<std::size_t>(c) * hs * ws;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const T* row = cols + ((static_cast<std::size_t>(c) * k + ki) * k + kj) * ncols;
                for (int oy = 0; oy < ho; ++oy) {
                    const int sy = oy * stride - pad + ki;
                    if (sy < 0 || sy >= hs) continue;
                    const T* srcrow = row + static_cast<std::size_t>(oy) * wo;
                    T* drow = plane + static_cast<std::size_t>(sy) * ws;
                    if (stride == 1) {
                        const int shift = kj - pad;
                        const int lo = std::clamp(-shift, 0, wo);
                        const int hi = std::clamp(ws - shift, lo, wo);
                        for (int ox = lo; ox < hi; ++ox) drow[ox + shift] += srcrow[ox];
                    } else {
                        for (int ox = 0; ox < wo; ++ox) {
                            const int sx = ox * stride - pad + kj;
                            if (sx >= 0 && sx < ws) drow[sx] += srcrow[ox];
                        }
                    }
                }
            }
        }
    }
}

template <typename T, typename Fwd, typename Bwd>
Var<T> unary(const Var<T>& x, Fwd fwd, Bwd bwd) {
    Tensor<T> out(x.shape());
    const T* xs = x.value().data();
    T* ys = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) ys[i] = fwd(xs[i]);
    return make_result<T>(std::move(out), {x}, [bwd](Node<T>& self) {
        auto& p = parent(self, 0);
        if (!p.requires_grad) return;
        T* g = p.grad_buffer().data();
        const T* xs = p.value.data();
        const T* ys = self.value.data();
        const T* gy = self.grad.data();
        for (std::size_t i = 0; i < self.value.size(); ++i) g[i] += gy[i] * bwd(xs[i], ys[i]);
    });
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same(a.shape(), b.shape(), "add");
    Tensor<T> out(a.shape());
    const T* as = a.value().data();
    const T* bs = b.value().data();
    T* ys = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) ys[i] = as[i] + bs[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        const T* gy = self.grad.data();
        for (std::size_t k = 0; k < 2; ++k) {
            auto& p = parent(self, k);
            if (!p.requires_grad) continue;
            T* g = p.grad_buffer().data();
            for (std::size_t i = 0; i < self.value.size(); ++i) g[i] += gy[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same(a.shape(), b.shape(), "mul");
    Tensor<T> out(a.shape());
    const T* as = a.value().data();
    const T* bs = b.value().data();
    T* ys = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) ys[i] = as[i] * bs[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        const T* gy = self.grad.data();
        auto& pa = parent(self, 0);
        auto& pb = parent(self, 1);
        const std::size_t n = self.value.size();
        if (pa.requires_grad) {
            T* g = pa.grad_buffer().data();
            const T* bs = pb.value.data();
            for (std::size_t i = 0; i < n; ++i) g[i] += gy[i] * bs[i];
        }
        if (pb.requires_grad) {
            T* g = pb.grad_buffer().data();
            const T* as = pa.value.data();
            for (std::size_t i = 0; i < n; ++i) g[i] += gy[i] * as[i];
        }
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    return unary<T>(
        x, [](T v) { return v < T(0) ? T(0) : v; },  // NaN passes through
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    return unary<T>(
        x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
    return unary<T>(
        x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
    require_same(x.shape(), weights.shape(), "weighted_sum");
    T acc = T(0);
    for (std::size_t i = 0; i < weights.size(); ++i) acc += x.value()[i] * weights[i];
    Tensor<T> out(Shape{1, 1, 1, 1}, acc);
    return make_result<T>(std::move(out), {x}, [weights](Node<T>& self) {
        auto& p = parent(self, 0);
        T* g = p.grad_buffer().data();
        const T gy = self.grad[0];
        for (std::size_t i = 0; i < weights.size(); ++i) g[i] += gy * weights[i];
    });
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
    if (parts.empty()) throw ShapeMismatch("concat_channels: no inputs");
    Shape s = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        const Shape& ps = p.shape();
        if (ps.n != s.n || ps.h != s.h || ps.w != s.w) {
            throw ShapeMismatch("concat_channels: " + ps.str() + " vs " + s.str());
        }
        total += ps.c;
    }
    Shape os{s.n, total, s.h, s.w};
    Tensor<T> out(os);
    const std::size_t plane = s.plane();
    int c0 = 0;
    for (const auto& p : parts) {
        const int pc = p.shape().c;
        for (int n = 0; n < s.n; ++n) {
            const T* src = p.value().data() + static_cast<std::size_t>(n) * pc * plane;
            std::copy(src, src + pc * plane, out.data() + (static_cast<std::size_t>(n) * total + c0) * plane);
        }
        c0 += pc;
    }
    std::vector<Var<T>> inputs(parts.begin(), parts.end());
    return make_result<T>(std::move(out), inputs, [](Node<T>& self) {
        const Shape& os = self.value.shape();
        const std::size_t plane = os.plane();
        int c0 = 0;
        for (auto& pp : self.parents) {
            const int pc = pp->value.shape().c;
            if (pp->requires_grad) {
                T* g = pp->grad_buffer().data();
                for (int n = 0; n < os.n; ++n) {
                    const T* src = self.grad.data() + (static_cast<std::size_t>(n) * os.c + c0) * plane;
                    T* dst = g + static_cast<std::size_t>(n) * pc * plane;
                    for (std::size_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
                }
            }
            c0 += pc;
        }
    });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int start, int count) {
    const Shape& s = x.shape();
    if (start < 0 || count <= 0 || start + count > s.c) {
        throw ShapeMismatch("slice_channels: [" + std::to_string(start) + ", +" + std::to_string(count) +
                            ") out of " + s.str());
    }
    Shape os{s.n, count, s.h, s.w};
    Tensor<T> out(os);
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
        const T* src = x.value().data() + (static_cast<std::size_t>(n) * s.c + start) * plane;
        std::copy(src, src + count * plane, out.data() + static_cast<std::size_t>(n) * count * plane);
    }
    return make_result<T>(std::move(out), {x}, [start, count](Node<T>& self) {
        auto& p = parent(self, 0);
        const Shape& s = p.value.shape();
        const std::size_t plane = s.plane();
        T* g = p.grad_buffer().data();
        for (int n = 0; n < s.n; ++n) {
            const T* src = self.grad.data() + static_cast<std::size_t>(n) * count * plane;
            T* dst = g + (static_cast<std::size_t>(n) * s.c + start) * plane;
            for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
        }
    });
}

template <typename T>
Var<T> concat_batch(std::span<const Var<T>> parts) {
    if (parts.empty()) throw ShapeMismatch("concat_batch: no inputs");
    Shape s = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        const Shape& ps = p.shape();
        if (ps.c != s.c || ps.h != s.h || ps.w != s.w) {
            throw ShapeMismatch("concat_batch: " + ps.str() + " vs " + s.str());
        }
        total += ps.n;
    }
    Tensor<T> out(Shape{total, s.c, s.h, s.w});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off);
        off += p.value().size();
    }
    std::vector<Var<T>> inputs(parts.begin(), parts.end());
    return make_result<T>(std::move(out), inputs, [](Node<T>& self) {
        std::size_t off = 0;
        for (auto& pp : self.parents) {
            const std::size_t n = pp->value.size();
            if (pp->requires_grad) {
                T* g = pp->grad_buffer().data();
                for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
            }
            off += n;
        }
    });
}

template <typename T>
Var<T> slice_batch(const Var<T>& x, int start, int count) {
    const Shape& s = x.shape();
    if (start < 0 || count <= 0 || start + count > s.n) {
        throw ShapeMismatch("slice_batch out of range for " + s.str());
    }
    const std::size_t item = static_cast<std::size_t>(s.c) * s.plane();
    Tensor<T> out(Shape{count, s.c, s.h, s.w});
    std::copy(x.value().data() + start * item, x.value().data() + (start + count) * item, out.data());
    return make_result<T>(std::move(out), {x}, [start, item](Node<T>& self) {
        auto& p = parent(self, 0);
        T* g = p.grad_buffer().data() + start * item;
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    const int k = ws.h;
    if (ws.c != xs.c || ws.h != ws.w || k % 2 == 0) {
        throw ShapeMismatch("conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
    }
    if (bias.defined() && bias.value().size() != static_cast<std::size_t>(ws.n)) {
        throw ShapeMismatch("conv2d: bias size mismatch");
    }
    const int cout = ws.n;
    const int pad = k / 2;
    const int hw = static_cast<int>(xs.plane());
    const int kdim = xs.c * k * k;
    Tensor<T> out(Shape{xs.n, cout, xs.h, xs.w});
    ConstMatMap<T> wm(weight.value().data(), cout, kdim);
    RowMat<T> cols;
    if (k > 1) cols.resize(kdim, hw);
    for (int n = 0; n < xs.n; ++n) {
        const T* src = x.value().data() + static_cast<std::size_t>(n) * xs.c * hw;
        MatMap<T> ym(out.data() + static_cast<std::size_t>(n) * cout * hw, cout, hw);
        if (k == 1) {
            ym.noalias() = wm * ConstMatMap<T>(src, xs.c, hw);
        } else {
            im2col(src, xs.c, xs.h, xs.w, k, 1, pad, xs.h, xs.w, cols.data());
            ym.noalias() = wm * cols;
        }
        if (bias.defined()) {
            for (int c = 0; c < cout; ++c) ym.row(c).array() += bias.value()[c];
        }
    }
    std::vector<Var<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result<T>(std::move(out), inputs, [k, pad, cout, hw, kdim](Node<T>& self) {
        auto& px = parent(self, 0);
        auto& pw = parent(self, 1);
        const Shape& xs = px.value.shape();
        ConstMatMap<T> wm(pw.value.data(), cout, kdim);
        RowMat<T> cols;
        RowMat<T> dcols;
        if (k > 1) {
            cols.resize(kdim, hw);
            dcols.resize(kdim, hw);
        }
        for (int n = 0; n < xs.n; ++n) {
            const T* src = px.value.data() + static_cast<std::size_t>(n) * xs.c * hw;
            ConstMatMap<T> gy(self.grad.data() + static_cast<std::size_t>(n) * cout * hw, cout, hw);
            if (pw.requires_grad) {
                MatMap<T> gw(pw.grad_buffer().data(), cout, kdim);
                if (k == 1) {
                    gw.noalias() += gy * ConstMatMap<T>(src, xs.c, hw).transpose();
                } else {
                    im2col(src, xs.c, xs.h, xs.w, k, 1, pad, xs.h, xs.w, cols.data());
                    gw.noalias() += gy * cols.transpose();
                }
            }
            if (px.requires_grad) {
                T* gx = px.grad_buffer().data() + static_cast<std::size_t>(n) * xs.c * hw;
                if (k == 1) {
                    MatMap<T>(gx, xs.c, hw).noalias() += wm.transpose() * gy;
                } else {
                    dcols.noalias() = wm.transpose() * gy;
                    col2im(dcols.data(), xs.c, xs.h, xs.w, k, 1, pad, xs.h, xs.w, gx);
                }
            }
            if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                T* gb = self.parents[2]->grad_buffer().data();
                // fixed summation order; Eigen's reduction peels by address alignment
                for (int c = 0; c < cout; ++c) {
                    T acc = 0;
                    for (Eigen::Index i = 0; i < gy.cols(); ++i) acc += gy(c, i);
                    gb[c] += acc;
                }
            }
        }
    });
}

template <typename T>
Var<T> conv_transpose2d_up(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    if (ws.n != xs.c || ws.h != 3 || ws.w != 3) {
        throw ShapeMismatch("conv_transpose2d_up: weight " + ws.str() + " incompatible with input " +
                            xs.str());
    }
    const int cout = ws.c;
    const int hw = static_cast<int>(xs.plane());
    const int ho = xs.h * 2;
    const int wo = xs.w * 2;
    const int kdim = cout * 9;
    if (bias.defined() && bias.value().size() != static_cast<std::size_t>(cout)) {
        throw ShapeMismatch("conv_transpose2d_up: bias size mismatch");
    }
    Tensor<T> out(Shape{xs.n, cout, ho, wo});
    ConstMatMap<T> wm(weight.value().data(), xs.c, kdim);
    RowMat<T> cols(kdim, hw);
    const std::size_t oplane = static_cast<std::size_t>(ho) * wo;
    for (int n = 0; n < xs.n; ++n) {
        ConstMatMap<T> xm(x.value().data() + static_cast<std::size_t>(n) * xs.c * hw, xs.c, hw);
        cols.noalias() = wm.transpose() * xm;
        T* dst = out.data() + static_cast<std::size_t>(n) * cout * oplane;
        col2im(cols.data(), cout, ho, wo, 3, 2, 1, xs.h, xs.w, dst);
        if (bias.defined()) {
            for (int c = 0; c < cout; ++c) {
                T* plane = dst + c * oplane;
                const T b = bias.value()[c];
                for (std::size_t i = 0; i < oplane; ++i) plane[i] += b;
            }
        }
    }
    std::vector<Var<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result<T>(std::move(out), inputs, [cout, hw, ho, wo, kdim, oplane](Node<T>& self) {
        auto& px = parent(self, 0);
        auto& pw = parent(self, 1);
        const Shape& xs = px.value.shape();
        ConstMatMap<T> wm(pw.value.data(), xs.c, kdim);
        RowMat<T> dcols(kdim, hw);
        for (int n = 0; n < xs.n; ++n) {
            const T* gy = self.grad.data() + static_cast<std::size_t>(n) * cout * oplane;
            im2col(gy, cout, ho, wo, 3, 2, 1, xs.h, xs.w, dcols.data());
            if (px.requires_grad) {
                MatMap<T> gx(px.grad_buffer().data() + static_cast<std::size_t>(n) * xs.c * hw, xs.c, hw);
                gx.noalias() += wm * dcols;
            }
            if (pw.requires_grad) {
                ConstMatMap<T> xm(px.value.data() + static_cast<std::size_t>(n) * xs.c * hw, xs.c, hw);
                MatMap<T> gw(pw.grad_buffer().data(), xs.c, kdim);
                gw.noalias() += xm * dcols.transpose();
            }
            if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                T* gb = self.parents[2]->grad_buffer().data();
                for (int c = 0; c < cout; ++c) {
                    T acc = T(0);
                    const T* plane = gy + c * oplane;
                    for (std::size_t i = 0; i < oplane; ++i) acc += plane[i];
                    gb[c] += acc;
                }
            }
        }
    });
}

template <typename T>
Var<T> max_pool2(const Var<T>& x) {
    const Shape& s = x.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeMismatch("max_pool2: odd spatial size " + s.str());
    Shape os{s.n, s.c, s.h / 2, s.w / 2};
    Tensor<T> out(os);
    std::vector<std::uint32_t> argmax(out.size());
    const T* xs = x.value().data();
    std::size_t o = 0;
    for (int nc = 0; nc < s.n * s.c; ++nc) {
        const std::size_t base = static_cast<std::size_t>(nc) * s.plane();
        for (int y = 0; y < os.h; ++y) {
            for (int xx = 0; xx < os.w; ++xx, ++o) {
                std::size_t best = base + static_cast<std::size_t>(2 * y) * s.w + 2 * xx;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const std::size_t idx = base + static_cast<std::size_t>(2 * y + dy) * s.w + 2 * xx + dx;
                        if (xs[idx] > xs[best]) best = idx;
                    }
                }
                out[o] = xs[best];
                argmax[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return make_result<T>(std::move(out), {x}, [argmax = std::move(argmax)](Node<T>& self) {
        T* g = parent(self, 0).grad_buffer().data();
        for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += self.grad[i];
    });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum, T eps) {
    const Shape& s = x.shape();
    const int channels = s.c;
    if (gamma.value().size() != static_cast<std::size_t>(channels) ||
        beta.value().size() != static_cast<std::size_t>(channels)) {
        throw ShapeMismatch("batch_norm: parameter size does not match channels of " + s.str());
    }
    const std::size_t plane = s.plane();
    const std::size_t count = static_cast<std::size_t>(s.n) * plane;
    std::vector<T> mean(channels), invstd(channels);
    const T* xs = x.value().data();
    for (int c = 0; c < channels; ++c) {
        if (training) {
            double sum = 0.0;
            for (int n = 0; n < s.n; ++n) {
                const T* p = xs + (static_cast<std::size_t>(n) * channels + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) sum += p[i];
            }
            const double mu = sum / static_cast<double>(count);
            double sq = 0.0;
            for (int n = 0; n < s.n; ++n) {
                const T* p = xs + (static_cast<std::size_t>(n) * channels + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = p[i] - mu;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(count);
            mean[c] = static_cast<T>(mu);
            invstd[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * static_cast<T>(mu);
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * static_cast<T>(unbiased);
        } else {
            mean[c] = running_mean[c];
            invstd[c] = T(1) / std::sqrt(running_var[c] + eps);
        }
    }
    Tensor<T> out(s);
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < channels; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
            const T scale = gamma.value()[c] * invstd[c];
            const T shift = beta.value()[c] - mean[c] * scale;
            for (std::size_t i = 0; i < plane; ++i) out[off + i] = xs[off + i] * scale + shift;
        }
    }
    return make_result<T>(
        std::move(out), {x, gamma, beta},
        [training, mean = std::move(mean), invstd = std::move(invstd), count](Node<T>& self) {
            auto& px = parent(self, 0);
            auto& pg = parent(self, 1);
            auto& pb = parent(self, 2);
            const Shape& s = px.value.shape();
            const std::size_t plane = s.plane();
            const T* xs = px.value.data();
            const T* gy = self.grad.data();
            for (int c = 0; c < s.c; ++c) {
                double sum_gy = 0.0;
                double sum_gy_xhat = 0.0;
                for (int n = 0; n < s.n; ++n) {
                    const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        const double xhat = (xs[off + i] - mean[c]) * invstd[c];
                        sum_gy += gy[off + i];
                        sum_gy_xhat += gy[off + i] * xhat;
                    }
                }
                if (pg.requires_grad) pg.grad_buffer()[c] += static_cast<T>(sum_gy_xhat);
                if (pb.requires_grad) pb.grad_buffer()[c] += static_cast<T>(sum_gy);
                if (!px.requires_grad) continue;
                T* gx = px.grad_buffer().data();
                const T g = pg.value[c];
                if (training) {
                    const double m = static_cast<double>(count);
                    const double mean_gy = sum_gy / m;
                    const double mean_gy_xhat = sum_gy_xhat / m;
                    for (int n = 0; n < s.n; ++n) {
                        const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                            const double xhat = (xs[off + i] - mean[c]) * invstd[c];
                            gx[off + i] += static_cast<T>(g * invstd[c] *
                                                          (gy[off + i] - mean_gy - xhat * mean_gy_xhat));
                        }
                    }
                } else {
                    const T scale = g * invstd[c];
                    for (int n = 0; n < s.n; ++n) {
                        const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * plane;
                        for (std::size_t i = 0; i < plane; ++i) gx[off + i] += gy[off + i] * scale;
                    }
                }
            }
        });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double p, bool training, std::mt19937_64& rng) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
    std::bernoulli_distribution keep(1.0 - p);
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.value().size());
    for (auto& m : mask) m = keep(rng) ? scale : T(0);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < mask.size(); ++i) out[i] = x.value()[i] * mask[i];
    return make_result<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
        T* g = parent(self, 0).grad_buffer().data();
        for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
    });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& scores, std::span<const std::uint8_t> labels) {
    const Shape& s = scores.shape();
    const std::size_t plane = s.plane();
    const std::size_t pixels = static_cast<std::size_t>(s.n) * plane;
    if (labels.size() != pixels) {
        throw ShapeMismatch("softmax_cross_entropy: " + std::to_string(labels.size()) +
                            " labels for scores " + s.str());
    }
    for (auto l : labels) {
        if (l >= s.c) {
            throw LabelOutOfRange("label " + std::to_string(l) + " outside 0.." + std::to_string(s.c - 1));
        }
    }
    // Softmax probabilities are kept for the backward pass.
    std::vector<T> probs(scores.value().size());
    const T* xs = scores.value().data();
    double total = 0.0;
    for (int n = 0; n < s.n; ++n) {
        const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (int c = 0; c < s.c; ++c) mx = std::max(mx, xs[base + c * plane + i]);
            double z = 0.0;
            for (int c = 0; c < s.c; ++c) {
                const T e = std::exp(xs[base + c * plane + i] - mx);
                probs[base + c * plane + i] = e;
                z += e;
            }
            for (int c = 0; c < s.c; ++c) probs[base + c * plane + i] = static_cast<T>(probs[base + c * plane + i] / z);
            const int label = labels[static_cast<std::size_t>(n) * plane + i];
            total += -(static_cast<double>(xs[base + label * plane + i] - mx) - std::log(z));
        }
    }
    Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(total / static_cast<double>(pixels)));
    std::vector<std::uint8_t> lab(labels.begin(), labels.end());
    return make_result<T>(std::move(out), {scores},
                          [probs = std::move(probs), lab = std::move(lab), pixels](Node<T>& self) {
                              auto& p = parent(self, 0);
                              const Shape& s = p.value.shape();
                              const std::size_t plane = s.plane();
                              T* g = p.grad_buffer().data();
                              const T scale = self.grad[0] / static_cast<T>(pixels);
                              for (std::size_t i = 0; i < probs.size(); ++i) g[i] += probs[i] * scale;
                              for (int n = 0; n < s.n; ++n) {
                                  for (std::size_t i = 0; i < plane; ++i) {
                                      const int label = lab[static_cast<std::size_t>(n) * plane + i];
                                      g[(static_cast<std::size_t>(n) * s.c + label) * plane + i] -= scale;
                                  }
                              }
                          });
}

#define RFCNET_INSTANTIATE_OPS(T)                                                                    \
    template Var<T> add(const Var<T>&, const Var<T>&);                                              \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                              \
    template Var<T> relu(const Var<T>&);                                                            \
    template Var<T> sigmoid(const Var<T>&);                                                         \
    template Var<T> tanh(const Var<T>&);                                                            \
    template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);                                  \
    template Var<T> concat_channels(std::span<const Var<T>>);                                       \
    template Var<T> slice_channels(const Var<T>&, int, int);                                        \
    template Var<T> concat_batch(std::span<const Var<T>>);                                          \
    template Var<T> slice_batch(const Var<T>&, int, int);                                           \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&);                            \
    template Var<T> conv_transpose2d_up(const Var<T>&, const Var<T>&, const Var<T>&);               \
    template Var<T> max_pool2(const Var<T>&);                                                       \
    template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, \
                               bool, T, T);                                                         \
    template Var<T> dropout(const Var<T>&, double, bool, std::mt19937_64&);                         \
    template Var<T> softmax_cross_entropy(const Var<T>&, std::span<const std::uint8_t>);

RFCNET_INSTANTIATE_OPS(float)
RFCNET_INSTANTIATE_OPS(double)

}  // namespace rfcnet::ops
