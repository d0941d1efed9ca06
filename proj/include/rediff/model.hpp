#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "rediff/diffusion.hpp"
#include "rediff/rng.hpp"
#include "rediff/vocab.hpp"

namespace rediff {

struct ShapeMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    SeqDims dims;

    int context() const { return dims.context(); }
    int head_dim() const { return d_model / n_heads; }

    bool operator==(const ModelConfig&) const = default;
};

// Offsets of every tensor inside the flat parameter vector, in checkpoint
// order.
struct ParamLayout {
    struct Tensor {
        std::string name;
        size_t offset;
        int rows, cols;
        size_t size() const { return static_cast<size_t>(rows) * cols; }
    };
    std::vector<Tensor> tensors;
    size_t total = 0;

    explicit ParamLayout(const ModelConfig& c) {
        auto add = [this](const std::string& name, int rows, int cols) {
            tensors.push_back({name, total, rows, cols});
            total += static_cast<size_t>(rows) * cols;
        };
        add("tok_emb", c.vocab_size, c.d_model);
        add("pos_emb", c.context(), c.d_model);
        add("seg_emb", 3, c.d_model);
        for (int l = 0; l < c.n_layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            add(p + "ln1_g", 1, c.d_model);
            add(p + "ln1_b", 1, c.d_model);
            add(p + "wq", c.d_model, c.d_model);
            add(p + "bq", 1, c.d_model);
            add(p + "wk", c.d_model, c.d_model);
            add(p + "bk", 1, c.d_model);
            add(p + "wv", c.d_model, c.d_model);
            add(p + "bv", 1, c.d_model);
            add(p + "wo", c.d_model, c.d_model);
            add(p + "bo", 1, c.d_model);
            add(p + "ln2_g", 1, c.d_model);
            add(p + "ln2_b", 1, c.d_model);
            add(p + "w1", c.d_model, c.d_ff);
            add(p + "b1", 1, c.d_ff);
            add(p + "w2", c.d_ff, c.d_model);
            add(p + "b2", 1, c.d_model);
        }
        add("lnf_g", 1, c.d_model);
        add("lnf_b", 1, c.d_model);
        add("w_out", c.d_model, c.vocab_size);
        add("b_out", 1, c.vocab_size);
    }

    const Tensor& find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw std::invalid_argument("no tensor named " + name);
    }
};

// All weights of the bidirectional mask predictor, flat and checkpointable.
struct ModelParams {
    ModelConfig config;
    std::vector<double> theta;

    ModelParams() = default;
    explicit ModelParams(const ModelConfig& c) : config(c) {
        theta.assign(ParamLayout(c).total, 0.0);
    }

    double* tensor(size_t offset) { return theta.data() + offset; }
    const double* tensor(size_t offset) const { return theta.data() + offset; }

    bool finite() const {
        for (double x : theta)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

// Scaled-uniform init (+-1/sqrt(fan_in)); layer-norm gains start at 1.
// Position embeddings start from a sinusoidal table (still learned): the
// scene->caption routing is positional and forms much faster from a
// structured positional basis than from noise.
inline ModelParams init_params(const ModelConfig& config, uint64_t seed) {
    ModelParams p(config);
    const ParamLayout layout(config);
    Rng rng = Rng(seed).substream("init");
    for (const auto& t : layout.tensors) {
        double* w = p.tensor(t.offset);
        const bool is_gain = t.name.ends_with("_g");
        if (is_gain) {
            for (size_t i = 0; i < t.size(); ++i) w[i] = 1.0;
        } else if (t.name == "pos_emb") {
            const int d = t.cols;
            for (int pos = 0; pos < t.rows; ++pos) {
                for (int j = 0; j < d; j += 2) {
                    const double freq = std::pow(10000.0, -static_cast<double>(j) / d);
                    w[pos * d + j] = 0.3 * std::sin(pos * freq);
                    if (j + 1 < d) w[pos * d + j + 1] = 0.3 * std::cos(pos * freq);
                }
            }
        } else if (t.rows == 1) {
            // biases and layer-norm shifts stay zero
        } else {
            const double scale = 1.0 / std::sqrt(static_cast<double>(t.rows));
            for (size_t i = 0; i < t.size(); ++i) w[i] = (2.0 * rng.uniform() - 1.0) * scale;
        }
    }
    return p;
}

namespace detail {

constexpr double kLnEps = 1e-5;

// y[n,out] = x[n,in] * w[in,out] + b
inline void linear(const double* x, const double* w, const double* b, double* y, int n, int in,
                   int out) {
    for (int i = 0; i < n; ++i) {
        double* yi = y + static_cast<size_t>(i) * out;
        if (b) std::memcpy(yi, b, sizeof(double) * out);
        else std::memset(yi, 0, sizeof(double) * out);
        const double* xi = x + static_cast<size_t>(i) * in;
        for (int k = 0; k < in; ++k) {
            const double xv = xi[k];
            const double* wk = w + static_cast<size_t>(k) * out;
            for (int j = 0; j < out; ++j) yi[j] += xv * wk[j];
        }
    }
}

// accumulate dx += dy * w^T, dw += x^T * dy, db += column sums of dy
inline void linear_backward(const double* x, const double* w, const double* dy, double* dx,
                            double* dw, double* db, int n, int in, int out) {
    for (int i = 0; i < n; ++i) {
        const double* dyi = dy + static_cast<size_t>(i) * out;
        const double* xi = x + static_cast<size_t>(i) * in;
        if (dx) {
            double* dxi = dx + static_cast<size_t>(i) * in;
            for (int k = 0; k < in; ++k) {
                const double* wk = w + static_cast<size_t>(k) * out;
                double acc = 0.0;
                for (int j = 0; j < out; ++j) acc += dyi[j] * wk[j];
                dxi[k] += acc;
            }
        }
        for (int k = 0; k < in; ++k) {
            const double xv = xi[k];
            double* dwk = dw + static_cast<size_t>(k) * out;
            for (int j = 0; j < out; ++j) dwk[j] += xv * dyi[j];
        }
        for (int j = 0; j < out; ++j) db[j] += dyi[j];
    }
}

inline void layernorm(const double* x, const double* g, const double* b, double* y, double* mean,
                      double* rstd, int n, int d) {
    for (int i = 0; i < n; ++i) {
        const double* xi = x + static_cast<size_t>(i) * d;
        double* yi = y + static_cast<size_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= d;
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        mean[i] = mu;
        rstd[i] = rs;
        for (int j = 0; j < d; ++j) yi[j] = (xi[j] - mu) * rs * g[j] + b[j];
    }
}

inline void layernorm_backward(const double* x, const double* g, const double* mean,
                               const double* rstd, const double* dy, double* dx, double* dg,
                               double* db, int n, int d) {
    for (int i = 0; i < n; ++i) {
        const double* xi = x + static_cast<size_t>(i) * d;
        const double* dyi = dy + static_cast<size_t>(i) * d;
        double* dxi = dx + static_cast<size_t>(i) * d;
        const double mu = mean[i], rs = rstd[i];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < d; ++j) {
            const double xhat = (xi[j] - mu) * rs;
            const double dxhat = dyi[j] * g[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dg[j] += dyi[j] * xhat;
            db[j] += dyi[j];
        }
        for (int j = 0; j < d; ++j) {
            const double xhat = (xi[j] - mu) * rs;
            const double dxhat = dyi[j] * g[j];
            dxi[j] += rs * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
        }
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2))); }
inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

inline void softmax_row(double* row, int n) {
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < n; ++j) row[j] *= inv;
}

}  // namespace detail

// Forward-pass activations, cached for the backward pass. One instance per
// concurrently evaluated sample; reusable across calls.
struct Activations {
    ModelConfig config;
    std::vector<int> input_ids;  // full context
    std::vector<int> segments;

    std::vector<double> x0;  // [T,d]
    struct Layer {
        std::vector<double> ln1, q, k, v, probs, ctx, xmid, ln2, hpre, hact, xout;
        std::vector<double> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
    };
    std::vector<Layer> layers;
    std::vector<double> lnf, lnf_mean, lnf_rstd;  // response rows only
    std::vector<double> logits;                   // [R, V]

    explicit Activations(const ModelConfig& c) : config(c) {
        const int T = c.context(), d = c.d_model, R = c.dims.response_len;
        input_ids.assign(T, 0);
        segments.assign(T, 0);
        x0.assign(static_cast<size_t>(T) * d, 0.0);
        layers.resize(c.n_layers);
        for (auto& l : layers) {
            l.ln1.assign(static_cast<size_t>(T) * d, 0.0);
            l.q = l.k = l.v = l.ctx = l.xmid = l.ln2 = l.xout = l.ln1;
            l.probs.assign(static_cast<size_t>(c.n_heads) * T * T, 0.0);
            l.hpre.assign(static_cast<size_t>(T) * c.d_ff, 0.0);
            l.hact = l.hpre;
            l.ln1_mean.assign(T, 0.0);
            l.ln1_rstd = l.ln2_mean = l.ln2_rstd = l.ln1_mean;
        }
        lnf.assign(static_cast<size_t>(R) * d, 0.0);
        lnf_mean.assign(R, 0.0);
        lnf_rstd.assign(R, 0.0);
        logits.assign(static_cast<size_t>(R) * c.vocab_size, 0.0);
    }
};

// Bidirectional transformer over [scene || prompt || response]; returns
// vocabulary logits for every response position. Pure function of
// (params, inputs); attention has no causal mask.
inline void forward(const ModelParams& params, const TokenSequence& scene_ids,
                    const TokenSequence& prompt_ids, const TokenSequence& response_ids,
                    Activations& acts) {
    const ModelConfig& c = params.config;
    if (acts.config != c) throw ShapeMismatch("activations built for a different config");
    if (scene_ids.window() != c.dims.scene_len || prompt_ids.window() != c.dims.prompt_len ||
        response_ids.window() != c.dims.response_len)
        throw ShapeMismatch("input windows do not match model config");

    const int T = c.context(), d = c.d_model, H = c.n_heads, dh = c.head_dim();
    const int R = c.dims.response_len, V = c.vocab_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const ParamLayout layout(c);
    auto W = [&](const std::string& name) { return params.tensor(layout.find(name).offset); };

    // embeddings
    {
        int pos = 0;
        for (int i = 0; i < c.dims.scene_len; ++i, ++pos) {
            acts.input_ids[pos] = scene_ids.ids[i];
            acts.segments[pos] = 0;
        }
        for (int i = 0; i < c.dims.prompt_len; ++i, ++pos) {
            acts.input_ids[pos] = prompt_ids.ids[i];
            acts.segments[pos] = 1;
        }
        for (int i = 0; i < R; ++i, ++pos) {
            acts.input_ids[pos] = response_ids.ids[i];
            acts.segments[pos] = 2;
        }
        const double* tok = W("tok_emb");
        const double* posw = W("pos_emb");
        const double* seg = W("seg_emb");
        for (int i = 0; i < T; ++i) {
            const int id = acts.input_ids[i];
            if (id < 0 || id >= V) throw ShapeMismatch("token id out of range");
            double* xi = acts.x0.data() + static_cast<size_t>(i) * d;
            const double* te = tok + static_cast<size_t>(id) * d;
            const double* pe = posw + static_cast<size_t>(i) * d;
            const double* se = seg + static_cast<size_t>(acts.segments[i]) * d;
            for (int j = 0; j < d; ++j) xi[j] = te[j] + pe[j] + se[j];
        }
    }

    const double* xin = acts.x0.data();
    for (int l = 0; l < c.n_layers; ++l) {
        auto& L = acts.layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        detail::layernorm(xin, W(p + "ln1_g"), W(p + "ln1_b"), L.ln1.data(), L.ln1_mean.data(),
                          L.ln1_rstd.data(), T, d);
        detail::linear(L.ln1.data(), W(p + "wq"), W(p + "bq"), L.q.data(), T, d, d);
        detail::linear(L.ln1.data(), W(p + "wk"), W(p + "bk"), L.k.data(), T, d, d);
        detail::linear(L.ln1.data(), W(p + "wv"), W(p + "bv"), L.v.data(), T, d, d);

        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            double* probs = L.probs.data() + static_cast<size_t>(h) * T * T;
            for (int i = 0; i < T; ++i) {
                const double* qi = L.q.data() + static_cast<size_t>(i) * d + off;
                double* row = probs + static_cast<size_t>(i) * T;
                for (int j = 0; j < T; ++j) {
                    const double* kj = L.k.data() + static_cast<size_t>(j) * d + off;
                    double acc = 0.0;
                    for (int e = 0; e < dh; ++e) acc += qi[e] * kj[e];
                    row[j] = acc * scale;
                }
                detail::softmax_row(row, T);
                double* ci = L.ctx.data() + static_cast<size_t>(i) * d + off;
                std::memset(ci, 0, sizeof(double) * dh);
                for (int j = 0; j < T; ++j) {
                    const double pj = row[j];
                    const double* vj = L.v.data() + static_cast<size_t>(j) * d + off;
                    for (int e = 0; e < dh; ++e) ci[e] += pj * vj[e];
                }
            }
        }

        // attn projection + residual
        detail::linear(L.ctx.data(), W(p + "wo"), W(p + "bo"), L.xmid.data(), T, d, d);
        for (size_t i = 0; i < L.xmid.size(); ++i) L.xmid[i] += xin[i];

        detail::layernorm(L.xmid.data(), W(p + "ln2_g"), W(p + "ln2_b"), L.ln2.data(),
                          L.ln2_mean.data(), L.ln2_rstd.data(), T, d);
        detail::linear(L.ln2.data(), W(p + "w1"), W(p + "b1"), L.hpre.data(), T, d, c.d_ff);
        for (size_t i = 0; i < L.hpre.size(); ++i) L.hact[i] = detail::gelu(L.hpre[i]);
        detail::linear(L.hact.data(), W(p + "w2"), W(p + "b2"), L.xout.data(), T, c.d_ff, d);
        for (size_t i = 0; i < L.xout.size(); ++i) L.xout[i] += L.xmid[i];

        xin = L.xout.data();
    }

    // final norm + vocabulary projection, response rows only
    const int resp_base = c.dims.scene_len + c.dims.prompt_len;
    const double* xfinal = xin + static_cast<size_t>(resp_base) * d;
    detail::layernorm(xfinal, W("lnf_g"), W("lnf_b"), acts.lnf.data(), acts.lnf_mean.data(),
                      acts.lnf_rstd.data(), R, d);
    detail::linear(acts.lnf.data(), W("w_out"), W("b_out"), acts.logits.data(), R, d, V);
}

// Backpropagates d(loss)/d(logits) through the cached forward pass,
// accumulating into `grad` (same layout as theta).
inline void backward(const ModelParams& params, const Activations& acts,
                     const std::vector<double>& dlogits, std::vector<double>& grad) {
    const ModelConfig& c = params.config;
    const int T = c.context(), d = c.d_model, H = c.n_heads, dh = c.head_dim();
    const int R = c.dims.response_len, V = c.vocab_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (dlogits.size() != static_cast<size_t>(R) * V) throw ShapeMismatch("dlogits shape");
    if (grad.size() != params.theta.size()) grad.assign(params.theta.size(), 0.0);

    const ParamLayout layout(c);
    auto W = [&](const std::string& name) { return params.tensor(layout.find(name).offset); };
    auto G = [&](const std::string& name) { return grad.data() + layout.find(name).offset; };

    std::vector<double> dx(static_cast<size_t>(T) * d, 0.0);  // grad wrt layer output
    std::vector<double> dlnf(static_cast<size_t>(R) * d, 0.0);

    // output projection
    detail::linear_backward(acts.lnf.data(), W("w_out"), dlogits.data(), dlnf.data(), G("w_out"),
                            G("b_out"), R, d, V);
    // final layernorm: into the response rows of dx
    const int resp_base = c.dims.scene_len + c.dims.prompt_len;
    const double* xfinal =
        (c.n_layers ? acts.layers.back().xout.data() : acts.x0.data()) +
        static_cast<size_t>(resp_base) * d;
    detail::layernorm_backward(xfinal, W("lnf_g"), acts.lnf_mean.data(), acts.lnf_rstd.data(),
                               dlnf.data(), dx.data() + static_cast<size_t>(resp_base) * d,
                               G("lnf_g"), G("lnf_b"), R, d);

    std::vector<double> dln(static_cast<size_t>(T) * d);
    std::vector<double> dtmp(static_cast<size_t>(T) * d);
    std::vector<double> dh1(static_cast<size_t>(T) * c.d_ff);
    std::vector<double> dq(static_cast<size_t>(T) * d), dk(dq), dv(dq), dctx(dq);

    for (int l = c.n_layers - 1; l >= 0; --l) {
        const auto& L = acts.layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        const double* xin = l == 0 ? acts.x0.data() : acts.layers[l - 1].xout.data();

        // FFN block: xout = xmid + W2(gelu(W1 ln2(xmid)))
        std::fill(dh1.begin(), dh1.end(), 0.0);
        std::fill(dln.begin(), dln.end(), 0.0);
        // dx is d(xout); residual passes it to xmid directly
        detail::linear_backward(L.hact.data(), W(p + "w2"), dx.data(), nullptr, G(p + "w2"),
                                G(p + "b2"), T, c.d_ff, d);
        // dhact = dx * w2^T
        {
            const double* w2 = W(p + "w2");
            for (int i = 0; i < T; ++i) {
                const double* dxi = dx.data() + static_cast<size_t>(i) * d;
                double* dhi = dh1.data() + static_cast<size_t>(i) * c.d_ff;
                const double* hp = L.hpre.data() + static_cast<size_t>(i) * c.d_ff;
                const double* ha = L.hact.data() + static_cast<size_t>(i) * c.d_ff;
                for (int k = 0; k < c.d_ff; ++k) {
                    const double* w2k = w2 + static_cast<size_t>(k) * d;
                    double acc = 0.0;
                    for (int j = 0; j < d; ++j) acc += dxi[j] * w2k[j];
                    const double x = hp[k];
                    const double cdf = std::abs(x) > 1e-8 ? ha[k] / x : 0.5;
                    const double pdf =
                        std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
                    dhi[k] = acc * (cdf + x * pdf);
                }
            }
        }
        detail::linear_backward(L.ln2.data(), W(p + "w1"), dh1.data(), dln.data(), G(p + "w1"),
                                G(p + "b1"), T, d, c.d_ff);
        // d(xmid) = dx (residual) + layernorm backward of dln
        detail::layernorm_backward(L.xmid.data(), W(p + "ln2_g"), L.ln2_mean.data(),
                                   L.ln2_rstd.data(), dln.data(), dx.data(), G(p + "ln2_g"),
                                   G(p + "ln2_b"), T, d);

        // attention block: xmid = xin + Wo(ctx)
        std::fill(dctx.begin(), dctx.end(), 0.0);
        detail::linear_backward(L.ctx.data(), W(p + "wo"), dx.data(), dctx.data(), G(p + "wo"),
                                G(p + "bo"), T, d, d);
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        std::vector<double> dp(T);
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            const double* probs = L.probs.data() + static_cast<size_t>(h) * T * T;
            for (int i = 0; i < T; ++i) {
                const double* dci = dctx.data() + static_cast<size_t>(i) * d + off;
                const double* row = probs + static_cast<size_t>(i) * T;
                // dP and softmax backward folded: dS_j = P_j * (dP_j - sum_k dP_k P_k)
                double dot = 0.0;
                for (int j = 0; j < T; ++j) {
                    const double* vj = L.v.data() + static_cast<size_t>(j) * d + off;
                    double acc = 0.0;
                    for (int e = 0; e < dh; ++e) acc += dci[e] * vj[e];
                    dp[j] = acc;
                    dot += acc * row[j];
                    double* dvj = dv.data() + static_cast<size_t>(j) * d + off;
                    const double pj = row[j];
                    for (int e = 0; e < dh; ++e) dvj[e] += pj * dci[e];
                }
                double* dqi = dq.data() + static_cast<size_t>(i) * d + off;
                for (int j = 0; j < T; ++j) {
                    const double ds = row[j] * (dp[j] - dot) * scale;
                    if (ds == 0.0) continue;
                    const double* kj = L.k.data() + static_cast<size_t>(j) * d + off;
                    double* dkj = dk.data() + static_cast<size_t>(j) * d + off;
                    const double* qi = L.q.data() + static_cast<size_t>(i) * d + off;
                    for (int e = 0; e < dh; ++e) {
                        dqi[e] += ds * kj[e];
                        dkj[e] += ds * qi[e];
                    }
                }
            }
        }
        std::fill(dln.begin(), dln.end(), 0.0);
        detail::linear_backward(L.ln1.data(), W(p + "wq"), dq.data(), dln.data(), G(p + "wq"),
                                G(p + "bq"), T, d, d);
        detail::linear_backward(L.ln1.data(), W(p + "wk"), dk.data(), dln.data(), G(p + "wk"),
                                G(p + "bk"), T, d, d);
        detail::linear_backward(L.ln1.data(), W(p + "wv"), dv.data(), dln.data(), G(p + "wv"),
                                G(p + "bv"), T, d, d);
        // d(xin) = dx (residual) + ln1 backward
        detail::layernorm_backward(xin, W(p + "ln1_g"), L.ln1_mean.data(), L.ln1_rstd.data(),
                                   dln.data(), dx.data(), G(p + "ln1_g"), G(p + "ln1_b"), T, d);
    }

    // embedding scatter
    {
        double* dtok = G("tok_emb");
        double* dpos = G("pos_emb");
        double* dseg = G("seg_emb");
        for (int i = 0; i < T; ++i) {
            const double* dxi = dx.data() + static_cast<size_t>(i) * d;
            double* te = dtok + static_cast<size_t>(acts.input_ids[i]) * d;
            double* pe = dpos + static_cast<size_t>(i) * d;
            double* se = dseg + static_cast<size_t>(acts.segments[i]) * d;
            for (int j = 0; j < d; ++j) {
                te[j] += dxi[j];
                pe[j] += dxi[j];
                se[j] += dxi[j];
            }
        }
    }
}

inline void sgd_step(ModelParams& params, const std::vector<double>& grad, double lr) {
    if (grad.size() != params.theta.size()) throw ShapeMismatch("gradient shape");
    for (size_t i = 0; i < grad.size(); ++i) params.theta[i] -= lr * grad[i];
}

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m, v;
    int64_t t = 0;

    void reset(size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        t = 0;
    }
};

inline void adam_step(ModelParams& params, const std::vector<double>& grad, AdamState& state,
                      const AdamConfig& cfg) {
    if (grad.size() != params.theta.size()) throw ShapeMismatch("gradient shape");
    if (state.m.size() != grad.size()) state.reset(grad.size());
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < grad.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params.theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

// Checkpoint: text header, then the flat 64-bit little-endian parameter
// block in layout order, then (optionally) the adam moments.
inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            uint64_t vocab_hash, int64_t step, const AdamState* adam = nullptr) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    const ModelConfig& c = params.config;
    out << "rediff-checkpoint v1\n"
        << "vocab_size = " << c.vocab_size << "\n"
        << "d_model = " << c.d_model << "\n"
        << "n_layers = " << c.n_layers << "\n"
        << "n_heads = " << c.n_heads << "\n"
        << "d_ff = " << c.d_ff << "\n"
        << "scene_len = " << c.dims.scene_len << "\n"
        << "prompt_len = " << c.dims.prompt_len << "\n"
        << "response_len = " << c.dims.response_len << "\n"
        << "vocab_hash = " << vocab_hash << "\n"
        << "step = " << step << "\n"
        << "param_count = " << params.theta.size() << "\n"
        << "adam = " << (adam ? adam->t : -1) << "\n"
        << "end_header\n";
    out.write(reinterpret_cast<const char*>(params.theta.data()),
              static_cast<std::streamsize>(params.theta.size() * sizeof(double)));
    if (adam) {
        out.write(reinterpret_cast<const char*>(adam->m.data()),
                  static_cast<std::streamsize>(adam->m.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(adam->v.data()),
                  static_cast<std::streamsize>(adam->v.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

struct Checkpoint {
    ModelParams params;
    uint64_t vocab_hash = 0;
    int64_t step = 0;
    AdamState adam;  // adam.t < 0 when absent
    bool has_adam = false;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    std::getline(in, line);
    if (line != "rediff-checkpoint v1") throw std::runtime_error("bad checkpoint magic");
    ModelConfig c;
    Checkpoint ck;
    size_t param_count = 0;
    int64_t adam_t = -1;
    while (std::getline(in, line) && line != "end_header") {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("bad checkpoint header: " + line);
        std::string key = line.substr(0, eq);
        while (!key.empty() && key.back() == ' ') key.pop_back();
        if (key == "vocab_hash") {
            ck.vocab_hash = std::stoull(line.substr(eq + 1));
            continue;
        }
        const long long val = std::stoll(line.substr(eq + 1));
        if (key == "vocab_size") c.vocab_size = static_cast<int>(val);
        else if (key == "d_model") c.d_model = static_cast<int>(val);
        else if (key == "n_layers") c.n_layers = static_cast<int>(val);
        else if (key == "n_heads") c.n_heads = static_cast<int>(val);
        else if (key == "d_ff") c.d_ff = static_cast<int>(val);
        else if (key == "scene_len") c.dims.scene_len = static_cast<int>(val);
        else if (key == "prompt_len") c.dims.prompt_len = static_cast<int>(val);
        else if (key == "response_len") c.dims.response_len = static_cast<int>(val);
        else if (key == "step") ck.step = val;
        else if (key == "param_count") param_count = static_cast<size_t>(val);
        else if (key == "adam") adam_t = val;
        else throw std::runtime_error("unknown checkpoint field: " + key);
    }
    ck.params = ModelParams(c);
    if (param_count != ck.params.theta.size())
        throw std::runtime_error("checkpoint parameter count mismatch");
    in.read(reinterpret_cast<char*>(ck.params.theta.data()),
            static_cast<std::streamsize>(param_count * sizeof(double)));
    if (adam_t >= 0) {
        ck.has_adam = true;
        ck.adam.reset(param_count);
        ck.adam.t = adam_t;
        in.read(reinterpret_cast<char*>(ck.adam.m.data()),
                static_cast<std::streamsize>(param_count * sizeof(double)));
        in.read(reinterpret_cast<char*>(ck.adam.v.data()),
                static_cast<std::streamsize>(param_count * sizeof(double)));
    }
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    return ck;
}

}  // namespace rediff
