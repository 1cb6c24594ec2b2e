#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "elab/rng.hpp"
#include "elab/tensor.hpp"

namespace elab::nn {

/// Callback receiving (canonical name, weights, gradient accumulator).
template <class T>
using ParamFn = std::function<void(const std::string&, Tensor<T>&, Tensor<T>&)>;

template <class T>
inline T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// ---------------------------------------------------------------------------
// SiLU
// ---------------------------------------------------------------------------

template <class T>
struct Silu {
    struct Cache {
        Tensor<T> x;
    };

    Tensor<T> forward(const Tensor<T>& x, Cache& c) const {
        c.x = x;
        Tensor<T> y(x.shape);
        for (std::size_t i = 0; i < x.size(); ++i) y.v[i] = x.v[i] * sigmoid(x.v[i]);
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy, const Cache& c) const {
        Tensor<T> gx(gy.shape);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            const T s = sigmoid(c.x.v[i]);
            gx.v[i] = gy.v[i] * s * (T(1) + c.x.v[i] * (T(1) - s));
        }
        return gx;
    }
};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

template <class T>
struct Linear {
    int in = 0, out = 0;
    Tensor<T> W, b, gW, gb;

    Linear() = default;
    Linear(int in_, int out_) : in(in_), out(out_) {
        W = Tensor<T>({in, out});
        b = Tensor<T>({out});
        gW = Tensor<T>({in, out});
        gb = Tensor<T>({out});
    }

    void init(Rng& rng) {
        const double s = 1.0 / std::sqrt(static_cast<double>(in));
        for (auto& w : W.v) w = static_cast<T>(rng.normal() * s);
        b.zero();
    }

    struct Cache {
        Tensor<T> x;  // [N, in]
    };

    Tensor<T> forward(const Tensor<T>& x, Cache& c) const {
        const int n = static_cast<int>(x.size()) / in;
        c.x = x;
        Tensor<T> y({n, out});
        y.mat(n, out).noalias() = x.mat(n, in) * W.mat(in, out);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < out; ++j) y.at2(i, j) += b.v[static_cast<std::size_t>(j)];
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy, const Cache& c) {
        const int n = static_cast<int>(gy.size()) / out;
        gW.mat(in, out).noalias() += c.x.mat(n, in).transpose() * gy.mat(n, out);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < out; ++j) gb.v[static_cast<std::size_t>(j)] += gy.at2(i, j);
        Tensor<T> gx({n, in});
        gx.mat(n, in).noalias() = gy.mat(n, out) * W.mat(in, out).transpose();
        return gx;
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        fn(prefix + ".W", W, gW);
        fn(prefix + ".b", b, gb);
    }
};

// ---------------------------------------------------------------------------
// Conv2d, channels-last [B, H, W, C], square kernel, zero padding
// ---------------------------------------------------------------------------

template <class T>
struct Conv2d {
    int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;
    Tensor<T> W, b, gW, gb;  // W: [k*k*cin, cout], rows ordered (ky, kx, ci)

    Conv2d() = default;
    Conv2d(int cin_, int cout_, int k_, int stride_, int pad_)
        : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_) {
        W = Tensor<T>({k * k * cin, cout});
        b = Tensor<T>({cout});
        gW = Tensor<T>({k * k * cin, cout});
        gb = Tensor<T>({cout});
    }

    void init(Rng& rng) {
        const double s = 1.0 / std::sqrt(static_cast<double>(k) * k * cin);
        for (auto& w : W.v) w = static_cast<T>(rng.normal() * s);
        b.zero();
    }

    int out_hw(int hw) const { return (hw + 2 * pad - k) / stride + 1; }

    struct Cache {
        Tensor<T> cols;  // [B*OH*OW, k*k*cin]
        int B = 0, H = 0, Wi = 0, OH = 0, OW = 0;
    };

    void im2col(const Tensor<T>& x, Cache& c) const {
        const int B = x.dim(0), H = x.dim(1), Wi = x.dim(2);
        const int OH = out_hw(H), OW = out_hw(Wi);
        c.B = B;
        c.H = H;
        c.Wi = Wi;
        c.OH = OH;
        c.OW = OW;
        c.cols = Tensor<T>({B * OH * OW, k * k * cin});
        T* dst = c.cols.data();
        for (int bb = 0; bb < B; ++bb) {
            for (int oy = 0; oy < OH; ++oy) {
                for (int ox = 0; ox < OW; ++ox) {
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride + ky - pad;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride + kx - pad;
                            if (iy >= 0 && iy < H && ix >= 0 && ix < Wi) {
                                const T* src = &x.at4(bb, iy, ix, 0);
                                for (int ci = 0; ci < cin; ++ci) dst[ci] = src[ci];
                            } else {
                                for (int ci = 0; ci < cin; ++ci) dst[ci] = T(0);
                            }
                            dst += cin;
                        }
                    }
                }
            }
        }
    }

    Tensor<T> forward(const Tensor<T>& x, Cache& c) const {
        if (x.dim(3) != cin) throw std::invalid_argument("conv2d: channel mismatch");
        im2col(x, c);
        const int R = c.B * c.OH * c.OW, K = k * k * cin;
        Tensor<T> y({c.B, c.OH, c.OW, cout});
        y.mat(R, cout).noalias() = c.cols.mat(R, K) * W.mat(K, cout);
        T* yp = y.data();
        for (int r = 0; r < R; ++r, yp += cout)
            for (int j = 0; j < cout; ++j) yp[j] += b.v[static_cast<std::size_t>(j)];
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy, const Cache& c) {
        const int R = c.B * c.OH * c.OW, K = k * k * cin;
        gW.mat(K, cout).noalias() += c.cols.mat(R, K).transpose() * gy.mat(R, cout);
        const T* gp = gy.data();
        for (int r = 0; r < R; ++r, gp += cout)
            for (int j = 0; j < cout; ++j) gb.v[static_cast<std::size_t>(j)] += gp[j];

        Tensor<T> gcols({R, K});
        gcols.mat(R, K).noalias() = gy.mat(R, cout) * W.mat(K, cout).transpose();

        Tensor<T> gx({c.B, c.H, c.Wi, cin});
        const T* src = gcols.data();
        for (int bb = 0; bb < c.B; ++bb) {
            for (int oy = 0; oy < c.OH; ++oy) {
                for (int ox = 0; ox < c.OW; ++ox) {
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride + ky - pad;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride + kx - pad;
                            if (iy >= 0 && iy < c.H && ix >= 0 && ix < c.Wi) {
                                T* dst = &gx.at4(bb, iy, ix, 0);
                                for (int ci = 0; ci < cin; ++ci) dst[ci] += src[ci];
                            }
                            src += cin;
                        }
                    }
                }
            }
        }
        return gx;
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        fn(prefix + ".W", W, gW);
        fn(prefix + ".b", b, gb);
    }
};

// ---------------------------------------------------------------------------
// ConvTranspose2d with kernel 2, stride 2 (non-overlapping upsampling)
// ---------------------------------------------------------------------------

template <class T>
struct ConvT2d {
    int cin = 0, cout = 0;
    Tensor<T> W, b, gW, gb;  // W: [cin, 4*cout], blocks ordered (dy, dx)

    ConvT2d() = default;
    ConvT2d(int cin_, int cout_) : cin(cin_), cout(cout_) {
        W = Tensor<T>({cin, 4 * cout});
        b = Tensor<T>({cout});
        gW = Tensor<T>({cin, 4 * cout});
        gb = Tensor<T>({cout});
    }

    void init(Rng& rng) {
        const double s = 1.0 / std::sqrt(static_cast<double>(cin));
        for (auto& w : W.v) w = static_cast<T>(rng.normal() * s);
        b.zero();
    }

    struct Cache {
        Tensor<T> x;  // [B, h, w, cin]
    };

    Tensor<T> forward(const Tensor<T>& x, Cache& c) const {
        const int B = x.dim(0), h = x.dim(1), w = x.dim(2);
        c.x = x;
        const int R = B * h * w;
        Tensor<T> blocks({R, 4 * cout});
        blocks.mat(R, 4 * cout).noalias() = x.mat(R, cin) * W.mat(cin, 4 * cout);
        Tensor<T> y({B, 2 * h, 2 * w, cout});
        const T* bp = blocks.data();
        for (int bb = 0; bb < B; ++bb)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            T* dst = &y.at4(bb, 2 * i + dy, 2 * j + dx, 0);
                            for (int co = 0; co < cout; ++co) dst[co] = bp[(dy * 2 + dx) * cout + co] + b.v[static_cast<std::size_t>(co)];
                        }
                    bp += 4 * cout;
                }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy, const Cache& c) {
        const int B = c.x.dim(0), h = c.x.dim(1), w = c.x.dim(2);
        const int R = B * h * w;
        Tensor<T> gblocks({R, 4 * cout});
        T* gp = gblocks.data();
        for (int bb = 0; bb < B; ++bb)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const T* src = &gy.at4(bb, 2 * i + dy, 2 * j + dx, 0);
                            for (int co = 0; co < cout; ++co) {
                                gp[(dy * 2 + dx) * cout + co] = src[co];
                                gb.v[static_cast<std::size_t>(co)] += src[co];
                            }
                        }
                    gp += 4 * cout;
                }
        gW.mat(cin, 4 * cout).noalias() += c.x.mat(R, cin).transpose() * gblocks.mat(R, 4 * cout);
        Tensor<T> gx({B, h, w, cin});
        gx.mat(R, cin).noalias() = gblocks.mat(R, 4 * cout) * W.mat(cin, 4 * cout).transpose();
        return gx;
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        fn(prefix + ".W", W, gW);
        fn(prefix + ".b", b, gb);
    }
};

// ---------------------------------------------------------------------------
// GroupNorm over channels-last activations
// ---------------------------------------------------------------------------

template <class T>
struct GroupNorm {
    int C = 0, groups = 1;
    T eps = T(1e-5);
    Tensor<T> gamma, beta, ggamma, gbeta;

    GroupNorm() = default;
    GroupNorm(int C_, int groups_) : C(C_), groups(groups_) {
        if (C % groups != 0) throw std::invalid_argument("groupnorm: C % groups != 0");
        gamma = Tensor<T>({C}, T(1));
        beta = Tensor<T>({C});
        ggamma = Tensor<T>({C});
        gbeta = Tensor<T>({C});
    }

    struct Cache {
        Tensor<T> xhat;               // normalized input, same shape as x
        std::vector<T> inv_std;       // per (b, group)
        int B = 0, H = 0, Wi = 0;
    };

    Tensor<T> forward(const Tensor<T>& x, Cache& c) const {
        const int B = x.dim(0), H = x.dim(1), Wi = x.dim(2);
        const int cg = C / groups;
        const std::size_t n = static_cast<std::size_t>(H) * Wi * cg;
        c.B = B;
        c.H = H;
        c.Wi = Wi;
        c.xhat = Tensor<T>(x.shape);
        c.inv_std.assign(static_cast<std::size_t>(B) * groups, T(0));
        Tensor<T> y(x.shape);
        for (int bb = 0; bb < B; ++bb) {
            for (int g = 0; g < groups; ++g) {
                T mean = 0, var = 0;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < Wi; ++j) {
                        const T* p = &x.at4(bb, i, j, g * cg);
                        for (int cc = 0; cc < cg; ++cc) mean += p[cc];
                    }
                mean /= static_cast<T>(n);
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < Wi; ++j) {
                        const T* p = &x.at4(bb, i, j, g * cg);
                        for (int cc = 0; cc < cg; ++cc) {
                            const T d = p[cc] - mean;
                            var += d * d;
                        }
                    }
                var /= static_cast<T>(n);
                const T is = T(1) / std::sqrt(var + eps);
                c.inv_std[static_cast<std::size_t>(bb) * groups + g] = is;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < Wi; ++j) {
                        const T* p = &x.at4(bb, i, j, g * cg);
                        T* xh = &c.xhat.at4(bb, i, j, g * cg);
                        T* yp = &y.at4(bb, i, j, g * cg);
                        for (int cc = 0; cc < cg; ++cc) {
                            xh[cc] = (p[cc] - mean) * is;
                            yp[cc] = xh[cc] * gamma.v[static_cast<std::size_t>(g * cg + cc)] +
                                     beta.v[static_cast<std::size_t>(g * cg + cc)];
                        }
                    }
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy, const Cache& c) {
        const int B = c.B, H = c.H, Wi = c.Wi;
        const int cg = C / groups;
        const T n = static_cast<T>(static_cast<std::size_t>(H) * Wi * cg);
        Tensor<T> gx({B, H, Wi, C});
        for (int bb = 0; bb < B; ++bb) {
            for (int g = 0; g < groups; ++g) {
                T sum_gxh = 0, sum_gxh_xh = 0;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < Wi; ++j) {
                        const T* gp = &gy.at4(bb, i, j, g * cg);
                        const T* xh = &c.xhat.at4(bb, i, j, g * cg);
                        for (int cc = 0; cc < cg; ++cc) {
                            const int ch = g * cg + cc;
                            const T gxh = gp[cc] * gamma.v[static_cast<std::size_t>(ch)];
                            sum_gxh += gxh;
                            sum_gxh_xh += gxh * xh[cc];
                            ggamma.v[static_cast<std::size_t>(ch)] += gp[cc] * xh[cc];
                            gbeta.v[static_cast<std::size_t>(ch)] += gp[cc];
                        }
                    }
                const T is = c.inv_std[static_cast<std::size_t>(bb) * groups + g];
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < Wi; ++j) {
                        const T* gp = &gy.at4(bb, i, j, g * cg);
                        const T* xh = &c.xhat.at4(bb, i, j, g * cg);
                        T* gxp = &gx.at4(bb, i, j, g * cg);
                        for (int cc = 0; cc < cg; ++cc) {
                            const int ch = g * cg + cc;
                            const T gxh = gp[cc] * gamma.v[static_cast<std::size_t>(ch)];
                            gxp[cc] = is * (gxh - sum_gxh / n - xh[cc] * sum_gxh_xh / n);
                        }
                    }
            }
        }
        return gx;
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        fn(prefix + ".gamma", gamma, ggamma);
        fn(prefix + ".beta", beta, gbeta);
    }
};

// ---------------------------------------------------------------------------
// Sinusoidal timestep features + 2-layer MLP
// ---------------------------------------------------------------------------

template <class T>
inline Tensor<T> sinusoidal_features(const std::vector<int>& ts, int dim) {
    const int half = dim / 2;
    Tensor<T> out({static_cast<int>(ts.size()), dim});
    for (std::size_t b = 0; b < ts.size(); ++b) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
            const double a = static_cast<double>(ts[b]) * freq;
            out.at2(static_cast<int>(b), i) = static_cast<T>(std::sin(a));
            out.at2(static_cast<int>(b), half + i) = static_cast<T>(std::cos(a));
        }
    }
    return out;
}

template <class T>
struct TimeEmbed {
    int dim = 0;
    Linear<T> l1, l2;
    Silu<T> act;

    TimeEmbed() = default;
    explicit TimeEmbed(int dim_) : dim(dim_), l1(dim_, dim_), l2(dim_, dim_) {}

    void init(Rng& rng) {
        l1.init(rng);
        l2.init(rng);
    }

    struct Cache {
        typename Linear<T>::Cache c1, c2;
        typename Silu<T>::Cache ca;
    };

    Tensor<T> forward(const std::vector<int>& ts, Cache& c) const {
        Tensor<T> f = sinusoidal_features<T>(ts, dim);
        Tensor<T> h = l1.forward(f, c.c1);
        h = act.forward(h, c.ca);
        return l2.forward(h, c.c2);
    }

    void backward(const Tensor<T>& gy, const Cache& c) {
        Tensor<T> g = l2.backward(gy, c.c2);
        g = act.backward(g, c.ca);
        l1.backward(g, c.c1);  // sinusoid has no parameters, gradient stops here
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        l1.visit(prefix + ".l1", fn);
        l2.visit(prefix + ".l2", fn);
    }
};

}  // namespace elab::nn
