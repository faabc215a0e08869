#pragma once

// Decoder-only autoregressive transformer in double precision with a
// hand-written backward pass. Architecture (declared in ModelConfig and
// recorded in checkpoints): pre-norm blocks, RMS norm gains, no linear
// biases, rotary position mixing, GELU MLP, tied input/output embeddings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ganita/common.hpp"
#include "ganita/tensor.hpp"
#include "ganita/tokenizer.hpp"

namespace ganita {

struct ModelConfig {
    int vocab_size = 8192;
    int context_length = 4096;
    int n_layers = 8;
    int d_model = 256;
    int n_heads = 8;
    int mlp_ratio = 4;
    bool tied_embeddings = true;
    std::string position_encoding = "rope";  // the one supported scheme
    uint64_t seed = 0;

    void validate() const {
        if (vocab_size < 1 || n_layers < 1 || d_model < 1 || n_heads < 1 || mlp_ratio < 1)
            throw ConfigError("model config: all dims must be >= 1");
        if (context_length < 2) throw ConfigError("model config: context_length must be >= 2");
        if (d_model % n_heads != 0) throw ConfigError("model config: n_heads must divide d_model");
        if (position_encoding != "rope")
            throw ConfigError("model config: unsupported position_encoding " + position_encoding);
    }

    nlohmann::json to_json() const {
        return {{"vocab_size", vocab_size},       {"context_length", context_length},
                {"n_layers", n_layers},           {"d_model", d_model},
                {"n_heads", n_heads},             {"mlp_ratio", mlp_ratio},
                {"tied_embeddings", tied_embeddings},
                {"position_encoding", position_encoding},
                {"seed", seed}};
    }
    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.context_length = j.value("context_length", c.context_length);
        c.n_layers = j.value("n_layers", c.n_layers);
        c.d_model = j.value("d_model", c.d_model);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
        c.tied_embeddings = j.value("tied_embeddings", c.tied_embeddings);
        c.position_encoding = j.value("position_encoding", c.position_encoding);
        c.seed = j.value("seed", c.seed);
        c.validate();
        return c;
    }
};

// Tensor name -> shape, in a fixed order shared by init, optimizer and
// checkpoints (std::map keeps iteration deterministic).
inline std::map<std::string, std::vector<size_t>> tensor_shapes(const ModelConfig& cfg) {
    size_t d = static_cast<size_t>(cfg.d_model);
    size_t v = static_cast<size_t>(cfg.vocab_size);
    size_t h = static_cast<size_t>(cfg.mlp_ratio) * d;
    std::map<std::string, std::vector<size_t>> shapes;
    shapes["tok_emb"] = {v, d};
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        shapes[p + "attn_norm.gain"] = {d};
        shapes[p + "attn.wq"] = {d, d};
        shapes[p + "attn.wk"] = {d, d};
        shapes[p + "attn.wv"] = {d, d};
        shapes[p + "attn.wo"] = {d, d};
        shapes[p + "mlp_norm.gain"] = {d};
        shapes[p + "mlp.w_up"] = {h, d};
        shapes[p + "mlp.w_down"] = {d, h};
    }
    shapes["final_norm.gain"] = {d};
    if (!cfg.tied_embeddings) shapes["lm_head"] = {v, d};
    return shapes;
}

// V*d + L*((4 + 2*mlp_ratio)*d^2 + 2d) + d, plus V*d again if untied.
// Matches the declared tensor shapes exactly.
inline int64_t count_parameters(const ModelConfig& cfg) {
    cfg.validate();
    int64_t total = 0;
    for (const auto& [name, shape] : tensor_shapes(cfg))
        total += static_cast<int64_t>(Tensor::numel(shape));
    return total;
}

struct ModelState {
    ModelConfig config;
    std::map<std::string, Tensor> tensors;

    Tensor& t(const std::string& name) { return tensors.at(name); }
    const Tensor& t(const std::string& name) const { return tensors.at(name); }
};

// Seeded deterministic init: norm gains 1, weights ~ N(0, 1/d_model).
inline ModelState init_model(const ModelConfig& cfg) {
    cfg.validate();
    ModelState m;
    m.config = cfg;
    Rng rng(cfg.seed);
    double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    for (const auto& [name, shape] : tensor_shapes(cfg)) {
        Tensor t(shape);
        if (name.find("norm.gain") != std::string::npos) {
            t.fill(1.0);
        } else {
            for (double& v : t.data) v = rng.normal() * scale;
        }
        m.tensors.emplace(name, std::move(t));
    }
    return m;
}

struct Logits {
    size_t batch = 0;
    size_t positions = 0;
    size_t vocab = 0;
    std::vector<double> data;  // [batch * positions, vocab] row-major

    const double* row(size_t b, size_t t) const { return data.data() + (b * positions + t) * vocab; }
    double* row(size_t b, size_t t) { return data.data() + (b * positions + t) * vocab; }
};

namespace detail {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
inline double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * std::exp(-0.5 * x * x) * kInvSqrt2Pi;
}

constexpr double kNormEps = 1e-5;

struct LayerCache {
    std::vector<double> x_in;    // [n,d] residual stream entering the block
    std::vector<double> inv1;    // [n] rms reciprocal for attn norm
    std::vector<double> a;       // [n,d] normed input to attention
    std::vector<double> q, k, v; // [n,d] post-rope q,k; raw v
    std::vector<double> p;       // [B,H,T,T] attention probabilities
    std::vector<double> o;       // [n,d] attention mix before out proj
    std::vector<double> x_mid;   // [n,d] residual after attention
    std::vector<double> inv2;    // [n]
    std::vector<double> a2;      // [n,d] normed input to mlp
    std::vector<double> u;       // [n,h] pre-activation
    std::vector<double> g;       // [n,h] gelu(u)
};

struct ForwardCache {
    size_t B = 0, T = 0;
    std::vector<LayerCache> layers;
    std::vector<double> x_final;  // [n,d] residual before final norm
    std::vector<double> inv_f;    // [n]
    std::vector<double> y;        // [n,d] final normed activations
};

inline void rmsnorm_forward(const double* x, const double* gain, size_t n, size_t d, double* y,
                            double* inv) {
    for (size_t r = 0; r < n; ++r) {
        const double* xr = x + r * d;
        double ms = 0.0;
        for (size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        double iv = 1.0 / std::sqrt(ms / static_cast<double>(d) + kNormEps);
        inv[r] = iv;
        double* yr = y + r * d;
        for (size_t j = 0; j < d; ++j) yr[j] = gain[j] * xr[j] * iv;
    }
}

inline void rmsnorm_backward(const double* x, const double* gain, const double* inv,
                             const double* dy, size_t n, size_t d, double* dx, double* dgain) {
    for (size_t r = 0; r < n; ++r) {
        const double* xr = x + r * d;
        const double* dyr = dy + r * d;
        double iv = inv[r];
        double dot = 0.0;
        for (size_t j = 0; j < d; ++j) dot += dyr[j] * gain[j] * xr[j];
        double c = iv * iv * iv * dot / static_cast<double>(d);
        double* dxr = dx + r * d;
        for (size_t j = 0; j < d; ++j) {
            dxr[j] += gain[j] * dyr[j] * iv - xr[j] * c;
            dgain[j] += dyr[j] * xr[j] * iv;
        }
    }
}

// In-place rotary mixing over head-dim pairs; sign=-1 inverts (used for
// the backward pass, since rotation is orthogonal).
inline void rope_apply(double* x, size_t B, size_t T, size_t n_heads, size_t head_dim,
                       double sign) {
    size_t d = n_heads * head_dim;
    size_t half = head_dim / 2;
    for (size_t b = 0; b < B; ++b) {
        for (size_t t = 0; t < T; ++t) {
            double* row = x + (b * T + t) * d;
            for (size_t h = 0; h < n_heads; ++h) {
                double* hp = row + h * head_dim;
                for (size_t j = 0; j < half; ++j) {
                    double theta = sign * static_cast<double>(t) *
                                   std::pow(10000.0, -2.0 * static_cast<double>(j) /
                                                         static_cast<double>(head_dim));
                    double c = std::cos(theta), s = std::sin(theta);
                    double x0 = hp[2 * j], x1 = hp[2 * j + 1];
                    hp[2 * j] = x0 * c - x1 * s;
                    hp[2 * j + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

}  // namespace detail

// Forward pass over a batch of equal-length sequences. When `cache` is
// non-null, activations needed by the backward pass are retained.
inline Logits forward(const ModelState& model, const std::vector<TokenIdSeq>& batch,
                      detail::ForwardCache* cache = nullptr) {
    const ModelConfig& cfg = model.config;
    if (batch.empty()) throw DataError("forward: empty batch");
    size_t B = batch.size();
    size_t T = batch[0].size();
    if (T == 0) throw DataError("forward: empty sequence");
    if (T > static_cast<size_t>(cfg.context_length))
        throw DataError("forward: sequence longer than context_length");
    for (const auto& seq : batch) {
        if (seq.size() != T) throw DataError("forward: ragged batch");
        for (TokenId id : seq)
            if (id < 0 || id >= cfg.vocab_size)
                throw DataError("forward: token id out of range");
    }

    size_t d = static_cast<size_t>(cfg.d_model);
    size_t H = static_cast<size_t>(cfg.n_heads);
    size_t hd = d / H;
    size_t hm = static_cast<size_t>(cfg.mlp_ratio) * d;
    size_t n = B * T;
    double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    const Tensor& emb = model.t("tok_emb");
    std::vector<double> x(n * d);
    for (size_t b = 0; b < B; ++b)
        for (size_t t = 0; t < T; ++t)
            std::copy_n(emb.ptr() + static_cast<size_t>(batch[b][t]) * d, d,
                        x.data() + (b * T + t) * d);

    if (cache) {
        cache->B = B;
        cache->T = T;
        cache->layers.assign(static_cast<size_t>(cfg.n_layers), {});
    }

    std::vector<double> a(n * d), q(n * d), k(n * d), v(n * d), o(n * d), att(n * d);
    std::vector<double> inv(n), p(B * H * T * T), u(n * hm), g(n * hm);

    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string pref = "layer" + std::to_string(l) + ".";
        const double* g1 = model.t(pref + "attn_norm.gain").ptr();
        const double* wq = model.t(pref + "attn.wq").ptr();
        const double* wk = model.t(pref + "attn.wk").ptr();
        const double* wv = model.t(pref + "attn.wv").ptr();
        const double* wo = model.t(pref + "attn.wo").ptr();
        const double* g2 = model.t(pref + "mlp_norm.gain").ptr();
        const double* wu = model.t(pref + "mlp.w_up").ptr();
        const double* wd = model.t(pref + "mlp.w_down").ptr();

        detail::LayerCache* lc = cache ? &cache->layers[static_cast<size_t>(l)] : nullptr;
        if (lc) lc->x_in = x;

        detail::rmsnorm_forward(x.data(), g1, n, d, a.data(), inv.data());
        if (lc) {
            lc->a = a;
            lc->inv1 = inv;
        }

        gemm(false, true, n, d, d, 1.0, a.data(), d, wq, d, 0.0, q.data(), d);
        gemm(false, true, n, d, d, 1.0, a.data(), d, wk, d, 0.0, k.data(), d);
        gemm(false, true, n, d, d, 1.0, a.data(), d, wv, d, 0.0, v.data(), d);
        detail::rope_apply(q.data(), B, T, H, hd, 1.0);
        detail::rope_apply(k.data(), B, T, H, hd, 1.0);
        if (lc) {
            lc->q = q;
            lc->k = k;
            lc->v = v;
        }

        // causal attention, per batch element and head
        std::vector<double> s(T * T);
        for (size_t b = 0; b < B; ++b) {
            for (size_t h = 0; h < H; ++h) {
                const double* qp = q.data() + b * T * d + h * hd;
                const double* kp = k.data() + b * T * d + h * hd;
                const double* vp = v.data() + b * T * d + h * hd;
                gemm(false, true, T, T, hd, att_scale, qp, d, kp, d, 0.0, s.data(), T);
                double* pp = p.data() + (b * H + h) * T * T;
                for (size_t i = 0; i < T; ++i) {
                    double mx = -1e300;
                    for (size_t j = 0; j <= i; ++j) mx = std::max(mx, s[i * T + j]);
                    double sum = 0.0;
                    for (size_t j = 0; j <= i; ++j) {
                        double e = std::exp(s[i * T + j] - mx);
                        pp[i * T + j] = e;
                        sum += e;
                    }
                    for (size_t j = 0; j <= i; ++j) pp[i * T + j] /= sum;
                    for (size_t j = i + 1; j < T; ++j) pp[i * T + j] = 0.0;
                }
                gemm(false, false, T, hd, T, 1.0, pp, T, vp, d, 0.0, o.data() + b * T * d + h * hd,
                     d);
            }
        }
        if (lc) {
            lc->p = p;
            lc->o = o;
        }

        gemm(false, true, n, d, d, 1.0, o.data(), d, wo, d, 0.0, att.data(), d);
        for (size_t i = 0; i < n * d; ++i) x[i] += att[i];
        if (lc) lc->x_mid = x;

        detail::rmsnorm_forward(x.data(), g2, n, d, a.data(), inv.data());
        if (lc) {
            lc->a2 = a;
            lc->inv2 = inv;
        }

        gemm(false, true, n, hm, d, 1.0, a.data(), d, wu, d, 0.0, u.data(), hm);
        for (size_t i = 0; i < n * hm; ++i) g[i] = detail::gelu(u[i]);
        if (lc) {
            lc->u = u;
            lc->g = g;
        }
        gemm(false, true, n, d, hm, 1.0, g.data(), hm, wd, hm, 0.0, att.data(), d);
        for (size_t i = 0; i < n * d; ++i) x[i] += att[i];
    }

    const double* gf = model.t("final_norm.gain").ptr();
    std::vector<double> y(n * d);
    detail::rmsnorm_forward(x.data(), gf, n, d, y.data(), inv.data());
    if (cache) {
        cache->x_final = x;
        cache->inv_f = inv;
        cache->y = y;
    }

    const Tensor& head = cfg.tied_embeddings ? emb : model.t("lm_head");
    Logits logits;
    logits.batch = B;
    logits.positions = T;
    logits.vocab = static_cast<size_t>(cfg.vocab_size);
    logits.data.resize(n * logits.vocab);
    gemm(false, true, n, logits.vocab, d, 1.0, y.data(), d, head.ptr(), d, 0.0, logits.data.data(),
         logits.vocab);
    return logits;
}

// Mean over supervised positions of -log softmax(logits)[target]; the
// target at position i is tokens[i+1], the final position is excluded.
inline double cross_entropy_loss(const Logits& logits, const std::vector<TokenIdSeq>& tokens) {
    if (tokens.size() != logits.batch) throw DataError("cross_entropy_loss: batch mismatch");
    for (const auto& seq : tokens)
        if (seq.size() != logits.positions) throw DataError("cross_entropy_loss: length mismatch");
    if (logits.positions < 2) throw DataError("cross_entropy_loss: need at least 2 positions");
    size_t count = logits.batch * (logits.positions - 1);
    double total = 0.0;
    size_t V = logits.vocab;
    for (size_t b = 0; b < logits.batch; ++b) {
        for (size_t t = 0; t + 1 < logits.positions; ++t) {
            const double* row = logits.row(b, t);
            TokenId target = tokens[b][t + 1];
            if (target < 0 || static_cast<size_t>(target) >= V)
                throw DataError("cross_entropy_loss: target out of range");
            double mx = row[0];
            for (size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (size_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
            total += -(row[static_cast<size_t>(target)] - mx - std::log(sum));
        }
    }
    return total / static_cast<double>(count);
}

using GradMap = std::map<std::string, Tensor>;

inline GradMap zero_gradients(const ModelConfig& cfg) {
    GradMap g;
    for (const auto& [name, shape] : tensor_shapes(cfg)) g.emplace(name, Tensor(shape));
    return g;
}

// Full forward + backward; returns the mean next-token loss and
// accumulates parameter gradients into `grads` (which must be zeroed or
// hold shapes matching the model).
inline double loss_and_gradients(const ModelState& model, const std::vector<TokenIdSeq>& batch,
                                 GradMap& grads) {
    const ModelConfig& cfg = model.config;
    detail::ForwardCache cache;
    Logits logits = forward(model, batch, &cache);
    double loss = cross_entropy_loss(logits, batch);

    size_t B = cache.B, T = cache.T;
    size_t d = static_cast<size_t>(cfg.d_model);
    size_t H = static_cast<size_t>(cfg.n_heads);
    size_t hd = d / H;
    size_t hm = static_cast<size_t>(cfg.mlp_ratio) * d;
    size_t n = B * T;
    size_t V = logits.vocab;
    double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    double inv_count = 1.0 / static_cast<double>(B * (T - 1));

    // dlogits = (softmax - onehot)/count on supervised rows, reusing the
    // logits buffer in place.
    for (size_t b = 0; b < B; ++b) {
        for (size_t t = 0; t < T; ++t) {
            double* row = logits.row(b, t);
            if (t + 1 >= T) {
                std::fill_n(row, V, 0.0);
                continue;
            }
            double mx = row[0];
            for (size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (size_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
            for (size_t j = 0; j < V; ++j) row[j] = std::exp(row[j] - mx) / sum * inv_count;
            row[static_cast<size_t>(batch[b][t + 1])] -= inv_count;
        }
    }

    const Tensor& emb = model.t("tok_emb");
    const Tensor& head = cfg.tied_embeddings ? emb : model.t("lm_head");
    Tensor& d_head = cfg.tied_embeddings ? grads.at("tok_emb") : grads.at("lm_head");

    // dY = dlogits * head; d_head += dlogits^T * Y
    std::vector<double> dx(n * d);
    gemm(false, false, n, d, V, 1.0, logits.data.data(), V, head.ptr(), d, 0.0, dx.data(), d);
    gemm(true, false, V, d, n, 1.0, logits.data.data(), V, cache.y.data(), d, 1.0, d_head.ptr(), d);

    // final norm backward
    std::vector<double> dres(n * d, 0.0);
    detail::rmsnorm_backward(cache.x_final.data(), model.t("final_norm.gain").ptr(),
                             cache.inv_f.data(), dx.data(), n, d, dres.data(),
                             grads.at("final_norm.gain").ptr());

    std::vector<double> da(n * d), dq(n * d), dk(n * d), dv(n * d), doo(n * d), datt(n * d);
    std::vector<double> du(n * hm), dg(n * hm);
    std::vector<double> dp(T * T), ds(T * T);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const detail::LayerCache& lc = cache.layers[static_cast<size_t>(l)];
        std::string pref = "layer" + std::to_string(l) + ".";
        const double* wq = model.t(pref + "attn.wq").ptr();
        const double* wk = model.t(pref + "attn.wk").ptr();
        const double* wv = model.t(pref + "attn.wv").ptr();
        const double* wo = model.t(pref + "attn.wo").ptr();
        const double* wu = model.t(pref + "mlp.w_up").ptr();
        const double* wd = model.t(pref + "mlp.w_down").ptr();

        // ----- MLP branch: x = x_mid + W_d gelu(W_u rmsnorm(x_mid)) -----
        // dres currently holds dL/dx at the block output.
        gemm(false, false, n, hm, d, 1.0, dres.data(), d, wd, hm, 0.0, dg.data(), hm);
        gemm(true, false, d, hm, n, 1.0, dres.data(), d, lc.g.data(), hm, 1.0,
             grads.at(pref + "mlp.w_down").ptr(), hm);
        for (size_t i = 0; i < n * hm; ++i) du[i] = dg[i] * detail::gelu_grad(lc.u[i]);
        std::fill(da.begin(), da.end(), 0.0);
        gemm(false, false, n, d, hm, 1.0, du.data(), hm, wu, d, 1.0, da.data(), d);
        gemm(true, false, hm, d, n, 1.0, du.data(), hm, lc.a2.data(), d, 1.0,
             grads.at(pref + "mlp.w_up").ptr(), d);
        // residual: dres += rmsnorm-backward(da)
        detail::rmsnorm_backward(lc.x_mid.data(), model.t(pref + "mlp_norm.gain").ptr(),
                                 lc.inv2.data(), da.data(), n, d, dres.data(),
                                 grads.at(pref + "mlp_norm.gain").ptr());

        // ----- attention branch: x_mid = x_in + W_o * attn(rmsnorm(x_in)) -----
        gemm(false, false, n, d, d, 1.0, dres.data(), d, wo, d, 0.0, doo.data(), d);
        gemm(true, false, d, d, n, 1.0, dres.data(), d, lc.o.data(), d, 1.0,
             grads.at(pref + "attn.wo").ptr(), d);

        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (size_t b = 0; b < B; ++b) {
            for (size_t h = 0; h < H; ++h) {
                const double* pp = lc.p.data() + (b * H + h) * T * T;
                const double* qp = lc.q.data() + b * T * d + h * hd;
                const double* kp = lc.k.data() + b * T * d + h * hd;
                const double* vp = lc.v.data() + b * T * d + h * hd;
                const double* dop = doo.data() + b * T * d + h * hd;
                // dP = dO V^T ; dV += P^T dO
                gemm(false, true, T, T, hd, 1.0, dop, d, vp, d, 0.0, dp.data(), T);
                gemm(true, false, T, hd, T, 1.0, pp, T, dop, d, 1.0,
                     dv.data() + b * T * d + h * hd, d);
                // softmax backward within the causal window
                for (size_t i = 0; i < T; ++i) {
                    double dot = 0.0;
                    for (size_t j = 0; j <= i; ++j) dot += dp[i * T + j] * pp[i * T + j];
                    for (size_t j = 0; j <= i; ++j)
                        ds[i * T + j] = pp[i * T + j] * (dp[i * T + j] - dot);
                    for (size_t j = i + 1; j < T; ++j) ds[i * T + j] = 0.0;
                }
                // dQ += scale * dS K ; dK += scale * dS^T Q
                gemm(false, false, T, hd, T, att_scale, ds.data(), T, kp, d, 1.0,
                     dq.data() + b * T * d + h * hd, d);
                gemm(true, false, T, hd, T, att_scale, ds.data(), T, qp, d, 1.0,
                     dk.data() + b * T * d + h * hd, d);
            }
        }
        detail::rope_apply(dq.data(), B, T, H, hd, -1.0);
        detail::rope_apply(dk.data(), B, T, H, hd, -1.0);

        std::fill(da.begin(), da.end(), 0.0);
        gemm(false, false, n, d, d, 1.0, dq.data(), d, wq, d, 1.0, da.data(), d);
        gemm(false, false, n, d, d, 1.0, dk.data(), d, wk, d, 1.0, da.data(), d);
        gemm(false, false, n, d, d, 1.0, dv.data(), d, wv, d, 1.0, da.data(), d);
        gemm(true, false, d, d, n, 1.0, dq.data(), d, lc.a.data(), d, 1.0,
             grads.at(pref + "attn.wq").ptr(), d);
        gemm(true, false, d, d, n, 1.0, dk.data(), d, lc.a.data(), d, 1.0,
             grads.at(pref + "attn.wk").ptr(), d);
        gemm(true, false, d, d, n, 1.0, dv.data(), d, lc.a.data(), d, 1.0,
             grads.at(pref + "attn.wv").ptr(), d);

        detail::rmsnorm_backward(lc.x_in.data(), model.t(pref + "attn_norm.gain").ptr(),
                                 lc.inv1.data(), da.data(), n, d, dres.data(),
                                 grads.at(pref + "attn_norm.gain").ptr());
    }

    // embedding lookup backward
    Tensor& d_emb = grads.at("tok_emb");
    for (size_t b = 0; b < B; ++b) {
        for (size_t t = 0; t < T; ++t) {
            double* row = d_emb.ptr() + static_cast<size_t>(batch[b][t]) * d;
            const double* src = dres.data() + (b * T + t) * d;
            for (size_t j = 0; j < d; ++j) row[j] += src[j];
        }
    }
    return loss;
}

// ----- generation -----

struct GenerateOptions {
    bool greedy = true;
    double temperature = 1.0;
    uint64_t seed = 0;
    std::optional<TokenId> stop_token;
    // Checked after each appended token over the full sequence so far.
    std::function<bool(const TokenIdSeq&)> should_stop;
};

// Backend-agnostic loop: `next_logits` maps the sequence so far to a
// logit vector for the next token. Greedy argmax breaks ties toward the
// lowest token id.
inline TokenIdSeq generate_with(const std::function<std::vector<double>(const TokenIdSeq&)>& next_logits,
                                const TokenIdSeq& prompt, int max_new_tokens,
                                const GenerateOptions& opts = {}) {
    if (max_new_tokens < 0) throw ConfigError("generate: negative token budget");
    TokenIdSeq seq = prompt;
    Rng rng(opts.seed);
    for (int step = 0; step < max_new_tokens; ++step) {
        std::vector<double> logits = next_logits(seq);
        TokenId next;
        if (opts.greedy) {
            size_t best = 0;
            for (size_t j = 1; j < logits.size(); ++j)
                if (logits[j] > logits[best]) best = j;
            next = static_cast<TokenId>(best);
        } else {
            if (opts.temperature <= 0.0) throw ConfigError("generate: temperature must be > 0");
            double mx = *std::max_element(logits.begin(), logits.end());
            double sum = 0.0;
            for (double& v : logits) {
                v = std::exp((v - mx) / opts.temperature);
                sum += v;
            }
            double r = rng.uniform() * sum;
            size_t j = 0;
            for (; j + 1 < logits.size(); ++j) {
                r -= logits[j];
                if (r <= 0.0) break;
            }
            next = static_cast<TokenId>(j);
        }
        seq.push_back(next);
        if (opts.stop_token && next == *opts.stop_token) break;
        if (opts.should_stop && opts.should_stop(seq)) break;
    }
    return seq;
}

inline TokenIdSeq generate(const ModelState& model, const TokenIdSeq& prompt, int max_new_tokens,
                           const GenerateOptions& opts = {}) {
    if (prompt.empty()) throw DataError("generate: empty prompt");
    if (static_cast<int>(prompt.size()) + max_new_tokens > model.config.context_length)
        throw ConfigError("generate: prompt plus budget exceeds context_length");
    auto next_logits = [&model](const TokenIdSeq& seq) {
        Logits lg = forward(model, {seq});
        std::vector<double> out(lg.vocab);
        std::copy_n(lg.row(0, lg.positions - 1), lg.vocab, out.begin());
        return out;
    };
    return generate_with(next_logits, prompt, max_new_tokens, opts);
}

}  // namespace ganita
