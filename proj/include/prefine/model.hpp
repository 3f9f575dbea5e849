#pragma once

// From-scratch decoder-only autoregressive token model with exact analytic
// gradients, in double precision. Pre-norm transformer: learned token and
// position embeddings, per-layer causal self-attention and GELU feed-forward
// (width 4*model_dim), final layer norm, untied output projection.
//
// One forward routine serves training, full-logits evaluation, and
// incremental sampling, so the three paths produce bit-identical values.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "prefine/rng.hpp"
#include "prefine/vocab.hpp"

namespace prefine::lm {

// ---------------------------------------------------------------------------
// Configuration, parameters, schema
// ---------------------------------------------------------------------------

struct ModelConfig {
    int layers = 2;
    int model_dim = 64;
    int heads = 4;
    int context_length = 64;
    int vocab_size = 0;

    int ffn_dim() const { return 4 * model_dim; }
    int head_dim() const { return model_dim / heads; }

    void validate() const {
        if (layers < 1) throw ConfigError("model.layers", "must be >= 1");
        if (model_dim < 1) throw ConfigError("model.model_dim", "must be >= 1");
        if (heads < 1 || model_dim % heads != 0)
            throw ConfigError("model.heads", "model_dim must be divisible by heads");
        if (context_length < 2) throw ConfigError("model.context_length", "must be >= 2");
        if (vocab_size < 2) throw ConfigError("model.vocab_size", "must be >= 2");
    }

    bool operator==(const ModelConfig& o) const = default;
};

struct Tensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> data;

    size_t count() const {
        size_t n = 1;
        for (int s : shape) n *= static_cast<size_t>(s);
        return n;
    }
};

enum class InitKind : uint8_t { gauss, zero, one };

struct TensorSpec {
    std::string name;
    std::vector<int> shape;
    InitKind init;
};

inline std::vector<TensorSpec> model_schema(const ModelConfig& cfg) {
    const int d = cfg.model_dim;
    const int f = cfg.ffn_dim();
    std::vector<TensorSpec> out;
    out.push_back({"tok_emb", {cfg.vocab_size, d}, InitKind::gauss});
    out.push_back({"pos_emb", {cfg.context_length, d}, InitKind::gauss});
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        out.push_back({p + "ln1.g", {d}, InitKind::one});
        out.push_back({p + "ln1.b", {d}, InitKind::zero});
        out.push_back({p + "attn.wq", {d, d}, InitKind::gauss});
        out.push_back({p + "attn.bq", {d}, InitKind::zero});
        out.push_back({p + "attn.wk", {d, d}, InitKind::gauss});
        out.push_back({p + "attn.bk", {d}, InitKind::zero});
        out.push_back({p + "attn.wv", {d, d}, InitKind::gauss});
        out.push_back({p + "attn.bv", {d}, InitKind::zero});
        out.push_back({p + "attn.wo", {d, d}, InitKind::gauss});
        out.push_back({p + "attn.bo", {d}, InitKind::zero});
        out.push_back({p + "ln2.g", {d}, InitKind::one});
        out.push_back({p + "ln2.b", {d}, InitKind::zero});
        out.push_back({p + "mlp.w1", {f, d}, InitKind::gauss});
        out.push_back({p + "mlp.b1", {f}, InitKind::zero});
        out.push_back({p + "mlp.w2", {d, f}, InitKind::gauss});
        out.push_back({p + "mlp.b2", {d}, InitKind::zero});
    }
    out.push_back({"ln_f.g", {d}, InitKind::one});
    out.push_back({"ln_f.b", {d}, InitKind::zero});
    out.push_back({"out.w", {cfg.vocab_size, d}, InitKind::gauss});
    out.push_back({"out.b", {cfg.vocab_size}, InitKind::zero});
    return out;
}

struct Parameters {
    ModelConfig config;
    std::vector<Tensor> tensors;

    size_t total_count() const {
        size_t n = 0;
        for (const auto& t : tensors) n += t.count();
        return n;
    }

    const Tensor& tensor(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw SchemaError("no tensor named " + name);
    }

    Tensor& tensor(const std::string& name) {
        for (auto& t : tensors)
            if (t.name == name) return t;
        throw SchemaError("no tensor named " + name);
    }
};

// Same schema as the Parameters it was computed for.
using GradientSet = Parameters;

inline Parameters zeros_like_config(const ModelConfig& cfg) {
    cfg.validate();
    Parameters p;
    p.config = cfg;
    for (const auto& spec : model_schema(cfg)) {
        Tensor t;
        t.name = spec.name;
        t.shape = spec.shape;
        t.data.assign(Tensor{spec.name, spec.shape, {}}.count(), 0.0);
        p.tensors.push_back(std::move(t));
    }
    return p;
}

inline GradientSet zeros_like(const Parameters& params) {
    return zeros_like_config(params.config);
}

// Gaussian std 0.02 for weights and embeddings, zero biases, unit layer-norm
// gains; one derived stream per tensor so layouts can change without
// perturbing unrelated tensors.
inline Parameters init_parameters(const ModelConfig& cfg, uint64_t seed) {
    Parameters p = zeros_like_config(cfg);
    const Rng root(seed);
    const Rng init_stream = root.split("param_init");
    for (auto& t : p.tensors) {
        const InitKind kind = [&] {
            for (const auto& spec : model_schema(cfg))
                if (spec.name == t.name) return spec.init;
            throw SchemaError("unreachable: " + t.name);
        }();
        Rng rng = init_stream.split(fnv1a64(t.name));
        switch (kind) {
            case InitKind::gauss:
                for (auto& x : t.data) x = rng.normal(0.0, 0.02);
                break;
            case InitKind::zero:
                break;
            case InitKind::one:
                std::fill(t.data.begin(), t.data.end(), 1.0);
                break;
        }
    }
    return p;
}

// ---------------------------------------------------------------------------
// Fast views
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
struct LayerPtrs {
    T *ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    T *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
};

template <typename T>
struct ModelPtrs {
    T *tok_emb, *pos_emb, *lnf_g, *lnf_b, *out_w, *out_b;
    std::vector<LayerPtrs<T>> layers;
};

template <typename P, typename T>
ModelPtrs<T> make_view(P& params) {
    ModelPtrs<T> v;
    size_t i = 0;
    auto next = [&]() -> T* { return params.tensors[i++].data.data(); };
    v.tok_emb = next();
    v.pos_emb = next();
    v.layers.resize(static_cast<size_t>(params.config.layers));
    for (auto& L : v.layers) {
        L.ln1_g = next();
        L.ln1_b = next();
        L.wq = next();
        L.bq = next();
        L.wk = next();
        L.bk = next();
        L.wv = next();
        L.bv = next();
        L.wo = next();
        L.bo = next();
        L.ln2_g = next();
        L.ln2_b = next();
        L.w1 = next();
        L.b1 = next();
        L.w2 = next();
        L.b2 = next();
    }
    v.lnf_g = next();
    v.lnf_b = next();
    v.out_w = next();
    v.out_b = next();
    return v;
}

inline ModelPtrs<const double> view(const Parameters& p) {
    return make_view<const Parameters, const double>(p);
}
inline ModelPtrs<double> view(Parameters& p) { return make_view<Parameters, double>(p); }

// y = W x + b, W row-major [out x in]
inline void matvec(const double* __restrict w, const double* __restrict x,
                   const double* __restrict b, double* __restrict y, int out, int in) {
    for (int o = 0; o < out; ++o) {
        const double* __restrict row = w + static_cast<size_t>(o) * in;
        double acc = 0.0;
        for (int i = 0; i < in; ++i) acc += row[i] * x[i];
        y[o] = acc + (b ? b[o] : 0.0);
    }
}

// dW += dy outer x; db += dy; dx += W^T dy
inline void matvec_bwd(const double* __restrict w, const double* __restrict x,
                       const double* __restrict dy, double* __restrict dw,
                       double* __restrict db, double* __restrict dx, int out, int in) {
    for (int o = 0; o < out; ++o) {
        const double g = dy[o];
        const double* __restrict row = w + static_cast<size_t>(o) * in;
        double* __restrict drow = dw + static_cast<size_t>(o) * in;
        if (db) db[o] += g;
        for (int i = 0; i < in; ++i) {
            drow[i] += g * x[i];
            if (dx) dx[i] += row[i] * g;
        }
    }
}

constexpr double kLnEps = 1e-5;

// Returns rstd; xhat written for backward reuse.
inline double layernorm_fwd(const double* __restrict x, const double* __restrict g,
                            const double* __restrict b, double* __restrict y,
                            double* __restrict xhat, int d) {
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += x[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
        const double c = x[i] - mu;
        var += c * c;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    for (int i = 0; i < d; ++i) {
        const double h = (x[i] - mu) * rstd;
        xhat[i] = h;
        y[i] = g[i] * h + b[i];
    }
    return rstd;
}

inline void layernorm_bwd(const double* __restrict dy, const double* __restrict xhat,
                          const double* __restrict g, double rstd, double* __restrict dg,
                          double* __restrict db, double* __restrict dx, int d) {
    double sum_dh = 0.0, sum_dh_xhat = 0.0;
    for (int i = 0; i < d; ++i) {
        const double dh = dy[i] * g[i];
        sum_dh += dh;
        sum_dh_xhat += dh * xhat[i];
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
    }
    const double inv_d = 1.0 / d;
    for (int i = 0; i < d; ++i) {
        const double dh = dy[i] * g[i];
        dx[i] += rstd * (dh - inv_d * sum_dh - xhat[i] * inv_d * sum_dh_xhat);
    }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward cache
// ---------------------------------------------------------------------------

struct LayerCache {
    std::vector<double> x_in;     // [T][d] residual stream entering the layer
    std::vector<double> xhat1;    // [T][d] ln1 normalized (pre gain/bias)
    std::vector<double> n1;       // [T][d] ln1 output
    std::vector<double> rstd1;    // [T]
    std::vector<double> q, k, v;  // [T][d]
    std::vector<double> att;      // [h][T][T], row-major over (t, tau), tau <= t
    std::vector<double> mix;      // [T][d] concatenated head mixes (input to wo)
    std::vector<double> h_mid;    // [T][d] after attention residual
    std::vector<double> xhat2;    // [T][d]
    std::vector<double> n2;       // [T][d]
    std::vector<double> rstd2;    // [T]
    std::vector<double> mlp_pre;  // [T][f]
    std::vector<double> mlp_act;  // [T][f]
};

struct ForwardCache {
    int T = 0;
    bool last_row_only = false;   // last layer + head computed for row T-1 only
    std::vector<int> ids;
    std::vector<LayerCache> layers;
    std::vector<double> x_final;  // [T][d]
    std::vector<double> xhatf;    // [T][d]
    std::vector<double> nf;       // [T][d]
    std::vector<double> rstdf;    // [T]

    // Scoring (filled by score_response): per predicted response token.
    std::vector<int> pred_rows;      // row t predicts ids[t+1]
    std::vector<int> pred_targets;
    std::vector<double> probs;       // [n_pred][V]
    std::vector<double> token_logps;
    double logprob = 0.0;
};

namespace detail {

inline void check_length(const Parameters& params, size_t T) {
    if (T == 0) throw std::invalid_argument("empty sequence");
    if (T > static_cast<size_t>(params.config.context_length))
        throw std::invalid_argument("sequence too long: " + std::to_string(T) + " > context_length " +
                                    std::to_string(params.config.context_length));
}

}  // namespace detail

// Forward pass over ids[0..T). With last_row_only the final layer's
// attention/MLP and the residual output are computed for the last position
// only — exactly the rows a next-token query needs; values at that row are
// identical to the full pass because earlier positions cannot attend ahead.
inline void run_forward(const Parameters& params, const int* ids, int T, ForwardCache& c,
                        bool last_row_only = false) {
    detail::check_length(params, static_cast<size_t>(T));
    const auto& cfg = params.config;
    const int d = cfg.model_dim;
    const int f = cfg.ffn_dim();
    const int H = cfg.heads;
    const int hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto v = detail::view(params);

    for (int t = 0; t < T; ++t) {
        if (ids[t] < 0 || ids[t] >= cfg.vocab_size)
            throw std::invalid_argument("token id out of range: " + std::to_string(ids[t]));
    }

    c.T = T;
    c.last_row_only = last_row_only;
    c.ids.assign(ids, ids + T);
    c.layers.resize(static_cast<size_t>(cfg.layers));
    const size_t td = static_cast<size_t>(T) * d;
    const size_t tf = static_cast<size_t>(T) * f;

    std::vector<double> x(td);
    for (int t = 0; t < T; ++t) {
        const double* te = v.tok_emb + static_cast<size_t>(ids[t]) * d;
        const double* pe = v.pos_emb + static_cast<size_t>(t) * d;
        for (int i = 0; i < d; ++i) x[static_cast<size_t>(t) * d + i] = te[i] + pe[i];
    }

    for (int l = 0; l < cfg.layers; ++l) {
        LayerCache& L = c.layers[static_cast<size_t>(l)];
        const auto& W = v.layers[static_cast<size_t>(l)];
        const bool tail = last_row_only && l == cfg.layers - 1;
        const int row_lo = tail ? T - 1 : 0;

        L.x_in = x;
        L.xhat1.resize(td);
        L.n1.resize(td);
        L.rstd1.resize(static_cast<size_t>(T));
        L.q.resize(td);
        L.k.resize(td);
        L.v.resize(td);
        L.att.assign(static_cast<size_t>(H) * T * T, 0.0);
        L.mix.assign(td, 0.0);
        L.h_mid.resize(td);
        L.xhat2.resize(td);
        L.n2.resize(td);
        L.rstd2.resize(static_cast<size_t>(T));
        L.mlp_pre.resize(tf);
        L.mlp_act.resize(tf);

        // ln1 + qkv for every row: later rows attend to all earlier keys.
        for (int t = 0; t < T; ++t) {
            const size_t o = static_cast<size_t>(t) * d;
            L.rstd1[static_cast<size_t>(t)] =
                detail::layernorm_fwd(&L.x_in[o], W.ln1_g, W.ln1_b, &L.n1[o], &L.xhat1[o], d);
            detail::matvec(W.wq, &L.n1[o], W.bq, &L.q[o], d, d);
            detail::matvec(W.wk, &L.n1[o], W.bk, &L.k[o], d, d);
            detail::matvec(W.wv, &L.n1[o], W.bv, &L.v[o], d, d);
        }

        // causal attention
        for (int h = 0; h < H; ++h) {
            const int hoff = h * hd;
            double* att_h = &L.att[static_cast<size_t>(h) * T * T];
            for (int t = row_lo; t < T; ++t) {
                const double* qt = &L.q[static_cast<size_t>(t) * d + hoff];
                double* arow = att_h + static_cast<size_t>(t) * T;
                double mx = -std::numeric_limits<double>::infinity();
                for (int tau = 0; tau <= t; ++tau) {
                    const double* kt = &L.k[static_cast<size_t>(tau) * d + hoff];
                    double s = 0.0;
                    for (int i = 0; i < hd; ++i) s += qt[i] * kt[i];
                    s *= scale;
                    arow[tau] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (int tau = 0; tau <= t; ++tau) {
                    const double e = std::exp(arow[tau] - mx);
                    arow[tau] = e;
                    z += e;
                }
                const double inv_z = 1.0 / z;
                double* mrow = &L.mix[static_cast<size_t>(t) * d + hoff];
                for (int tau = 0; tau <= t; ++tau) {
                    const double p = arow[tau] * inv_z;
                    arow[tau] = p;
                    const double* vt = &L.v[static_cast<size_t>(tau) * d + hoff];
                    for (int i = 0; i < hd; ++i) mrow[i] += p * vt[i];
                }
            }
        }

        // output projection + residual, ln2 + MLP + residual
        for (int t = row_lo; t < T; ++t) {
            const size_t o = static_cast<size_t>(t) * d;
            const size_t of = static_cast<size_t>(t) * f;
            double* hm = &L.h_mid[o];
            detail::matvec(W.wo, &L.mix[o], W.bo, hm, d, d);
            for (int i = 0; i < d; ++i) hm[i] += L.x_in[o + i];
            L.rstd2[static_cast<size_t>(t)] =
                detail::layernorm_fwd(hm, W.ln2_g, W.ln2_b, &L.n2[o], &L.xhat2[o], d);
            detail::matvec(W.w1, &L.n2[o], W.b1, &L.mlp_pre[of], f, d);
            for (int i = 0; i < f; ++i) L.mlp_act[of + i] = detail::gelu(L.mlp_pre[of + i]);
            double* xo = &x[o];
            detail::matvec(W.w2, &L.mlp_act[of], W.b2, xo, d, f);
            for (int i = 0; i < d; ++i) xo[i] += hm[i];
        }
    }

    c.x_final = std::move(x);
    c.xhatf.resize(td);
    c.nf.resize(td);
    c.rstdf.resize(static_cast<size_t>(T));
    const int row_lo = last_row_only ? T - 1 : 0;
    for (int t = row_lo; t < T; ++t) {
        const size_t o = static_cast<size_t>(t) * d;
        c.rstdf[static_cast<size_t>(t)] =
            detail::layernorm_fwd(&c.x_final[o], v.lnf_g, v.lnf_b, &c.nf[o], &c.xhatf[o], d);
    }
}

// Vocabulary logits at one row of a completed forward pass.
inline void logits_row(const Parameters& params, const ForwardCache& c, int t, double* out) {
    const auto v = detail::view(params);
    const int d = params.config.model_dim;
    detail::matvec(v.out_w, &c.nf[static_cast<size_t>(t) * d], v.out_b, out, params.config.vocab_size, d);
}

// Per-position logits for a whole sequence; causal and deterministic.
inline std::vector<std::vector<double>> logits(const Parameters& params, const TokenSequence& seq) {
    ForwardCache c;
    run_forward(params, seq.ids.data(), static_cast<int>(seq.size()), c);
    std::vector<std::vector<double>> out(seq.size(), std::vector<double>(params.config.vocab_size));
    for (size_t t = 0; t < seq.size(); ++t)
        logits_row(params, c, static_cast<int>(t), out[t].data());
    return out;
}

namespace detail {

inline double log_sum_exp(const double* x, int n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(x[i] - mx);
    return mx + std::log(z);
}

}  // namespace detail

// Fills the cache's prediction rows: softmax rows and log-probs of each
// response-role token given its prefix. Prompt positions are excluded.
inline void score_response(const Parameters& params, ForwardCache& c, const TokenSequence& seq) {
    const int V = params.config.vocab_size;
    c.pred_rows.clear();
    c.pred_targets.clear();
    for (size_t t = 0; t < seq.size(); ++t) {
        if (seq.roles[t] != Role::response) continue;
        if (t == 0) throw std::invalid_argument("response token at position 0 has no context");
        c.pred_rows.push_back(static_cast<int>(t - 1));
        c.pred_targets.push_back(seq.ids[t]);
    }
    if (c.pred_rows.empty()) throw std::invalid_argument("empty response region");
    const size_t n = c.pred_rows.size();
    c.probs.resize(n * static_cast<size_t>(V));
    c.token_logps.resize(n);
    c.logprob = 0.0;
    std::vector<double> row(static_cast<size_t>(V));
    for (size_t j = 0; j < n; ++j) {
        logits_row(params, c, c.pred_rows[j], row.data());
        const double lse = detail::log_sum_exp(row.data(), V);
        double* p = &c.probs[j * static_cast<size_t>(V)];
        for (int i = 0; i < V; ++i) p[i] = std::exp(row[static_cast<size_t>(i)] - lse);
        const double lp = row[static_cast<size_t>(c.pred_targets[j])] - lse;
        c.token_logps[j] = lp;
        c.logprob += lp;
    }
}

struct LogProbResult {
    double total = 0.0;
    std::vector<double> per_token;
};

// Log-probability of the response region under the model: the sum over
// response positions of log P(token | prefix).
inline LogProbResult sequence_logprob(const Parameters& params, const TokenSequence& seq) {
    ForwardCache c;
    run_forward(params, seq.ids.data(), static_cast<int>(seq.size()), c);
    score_response(params, c, seq);
    return {c.logprob, c.token_logps};
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Accumulates weight * d(-log P(response | prompt))/dtheta into grads.
// The cache must come from run_forward(last_row_only=false) + score_response.
inline void backward_neglogprob(const Parameters& params, const ForwardCache& c, double weight,
                                GradientSet& grads) {
    if (c.last_row_only) throw std::logic_error("backward requires a full forward pass");
    const auto& cfg = params.config;
    const int d = cfg.model_dim;
    const int f = cfg.ffn_dim();
    const int H = cfg.heads;
    const int hd = cfg.head_dim();
    const int V = cfg.vocab_size;
    const int T = c.T;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto v = detail::view(params);
    auto g = detail::view(grads);
    const size_t td = static_cast<size_t>(T) * d;
    const size_t tf = static_cast<size_t>(T) * f;

    // d loss / d x_final, via output head and final layer norm
    std::vector<double> dx(td, 0.0);
    {
        std::vector<double> dnf(td, 0.0);
        std::vector<double> dlogits(static_cast<size_t>(V));
        for (size_t j = 0; j < c.pred_rows.size(); ++j) {
            const int t = c.pred_rows[j];
            const double* p = &c.probs[j * static_cast<size_t>(V)];
            for (int i = 0; i < V; ++i) dlogits[static_cast<size_t>(i)] = weight * p[i];
            dlogits[static_cast<size_t>(c.pred_targets[j])] -= weight;
            detail::matvec_bwd(v.out_w, &c.nf[static_cast<size_t>(t) * d], dlogits.data(), g.out_w,
                               g.out_b, &dnf[static_cast<size_t>(t) * d], V, d);
        }
        for (int t = 0; t < T; ++t) {
            const size_t o = static_cast<size_t>(t) * d;
            detail::layernorm_bwd(&dnf[o], &c.xhatf[o], v.lnf_g, c.rstdf[static_cast<size_t>(t)],
                                  g.lnf_g, g.lnf_b, &dx[o], d);
        }
    }

    std::vector<double> dh(td), dn2(td), dn1(td), dq(td), dk(td), dvv(td), dmix(td);
    std::vector<double> dpre(tf), dact(static_cast<size_t>(f));
    std::vector<double> datt_row(static_cast<size_t>(T));

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const LayerCache& L = c.layers[static_cast<size_t>(l)];
        const auto& W = v.layers[static_cast<size_t>(l)];
        auto& G = g.layers[static_cast<size_t>(l)];

        std::fill(dh.begin(), dh.end(), 0.0);
        std::fill(dn2.begin(), dn2.end(), 0.0);
        std::fill(dn1.begin(), dn1.end(), 0.0);
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dvv.begin(), dvv.end(), 0.0);
        std::fill(dmix.begin(), dmix.end(), 0.0);

        // x_out = h_mid + W2 gelu(W1 n2 + b1) + b2
        for (int t = 0; t < T; ++t) {
            const size_t o = static_cast<size_t>(t) * d;
            const size_t of = static_cast<size_t>(t) * f;
            // through mlp
            std::fill(dact.begin(), dact.end(), 0.0);
            detail::matvec_bwd(W.w2, &L.mlp_act[of], &dx[o], G.w2, G.b2, dact.data(), d, f);
            for (int i = 0; i < f; ++i)
                dpre[of + i] = dact[static_cast<size_t>(i)] * detail::gelu_grad(L.mlp_pre[of + i]);
            detail::matvec_bwd(W.w1, &L.n2[o], &dpre[of], G.w1, G.b1, &dn2[o], f, d);
            // residual
            for (int i = 0; i < d; ++i) dh[o + i] = dx[o + i];
            detail::layernorm_bwd(&dn2[o], &L.xhat2[o], W.ln2_g, L.rstd2[static_cast<size_t>(t)],
                                  G.ln2_g, G.ln2_b, &dh[o], d);
        }

        // h_mid = x_in + Wo mix + bo
        for (int t = 0; t < T; ++t) {
            const size_t o = static_cast<size_t>(t) * d;
            detail::matvec_bwd(W.wo, &L.mix[o], &dh[o], G.wo, G.bo, &dmix[o], d, d);
        }

        // attention backward
        for (int h = 0; h < H; ++h) {
            const int hoff = h * hd;
            const double* att_h = &L.att[static_cast<size_t>(h) * T * T];
            for (int t = 0; t < T; ++t) {
                const double* arow = att_h + static_cast<size_t>(t) * T;
                const double* dm = &dmix[static_cast<size_t>(t) * d + hoff];
                double dot_sum = 0.0;
                for (int tau = 0; tau <= t; ++tau) {
                    const double* vt = &L.v[static_cast<size_t>(tau) * d + hoff];
                    double dp = 0.0;
                    for (int i = 0; i < hd; ++i) dp += dm[i] * vt[i];
                    datt_row[static_cast<size_t>(tau)] = dp;
                    dot_sum += dp * arow[tau];
                    double* dvt = &dvv[static_cast<size_t>(tau) * d + hoff];
                    const double p = arow[tau];
                    for (int i = 0; i < hd; ++i) dvt[i] += p * dm[i];
                }
                const double* qt = &L.q[static_cast<size_t>(t) * d + hoff];
                double* dqt = &dq[static_cast<size_t>(t) * d + hoff];
                for (int tau = 0; tau <= t; ++tau) {
                    const double ds = arow[tau] * (datt_row[static_cast<size_t>(tau)] - dot_sum) * scale;
                    const double* kt = &L.k[static_cast<size_t>(tau) * d + hoff];
                    double* dkt = &dk[static_cast<size_t>(tau) * d + hoff];
                    for (int i = 0; i < hd; ++i) {
                        dqt[i] += ds * kt[i];
                        dkt[i] += ds * qt[i];
                    }
                }
            }
        }

        // qkv projections, ln1, residual into dx for the next layer down
        for (int t = 0; t < T; ++t) {
            const size_t o = static_cast<size_t>(t) * d;
            detail::matvec_bwd(W.wq, &L.n1[o], &dq[o], G.wq, G.bq, &dn1[o], d, d);
            detail::matvec_bwd(W.wk, &L.n1[o], &dk[o], G.wk, G.bk, &dn1[o], d, d);
            detail::matvec_bwd(W.wv, &L.n1[o], &dvv[o], G.wv, G.bv, &dn1[o], d, d);
            for (int i = 0; i < d; ++i) dx[o + i] = dh[o + i];
            detail::layernorm_bwd(&dn1[o], &L.xhat1[o], W.ln1_g, L.rstd1[static_cast<size_t>(t)],
                                  G.ln1_g, G.ln1_b, &dx[o], d);
        }
    }

    // embeddings
    for (int t = 0; t < T; ++t) {
        const size_t o = static_cast<size_t>(t) * d;
        double* te = g.tok_emb + static_cast<size_t>(c.ids[static_cast<size_t>(t)]) * d;
        double* pe = g.pos_emb + static_cast<size_t>(t) * d;
        for (int i = 0; i < d; ++i) {
            te[i] += dx[o + i];
            pe[i] += dx[o + i];
        }
    }
}

// ---------------------------------------------------------------------------
// Weighted batch objective
// ---------------------------------------------------------------------------

struct Objective {
    const TokenSequence* seq = nullptr;
    double weight = 0.0;
};

struct ForwardBackwardResult {
    double loss = 0.0;
    GradientSet grads;
    std::vector<double> logprobs;  // per objective, response log-prob
};

namespace detail {

inline void check_finite(const GradientSet& grads, double loss) {
    if (!std::isfinite(loss)) throw DivergenceError("non-finite loss");
    for (const auto& t : grads.tensors)
        for (double x : t.data)
            if (!std::isfinite(x)) throw DivergenceError("non-finite gradient in tensor " + t.name);
}

}  // namespace detail

// loss = sum_i weight_i * (-log P(response_i | prompt_i)), with grads the
// exact analytic gradient. Zero-weight terms still contribute their
// log-probs but neither loss nor gradient.
inline ForwardBackwardResult forward_backward(const Parameters& params,
                                              const std::vector<Objective>& batch) {
    ForwardBackwardResult r;
    r.grads = zeros_like(params);
    r.logprobs.reserve(batch.size());
    ForwardCache cache;
    for (const auto& obj : batch) {
        run_forward(params, obj.seq->ids.data(), static_cast<int>(obj.seq->size()), cache);
        score_response(params, cache, *obj.seq);
        r.logprobs.push_back(cache.logprob);
        if (obj.weight != 0.0) {
            r.loss += obj.weight * -cache.logprob;
            backward_neglogprob(params, cache, obj.weight, r.grads);
        }
    }
    detail::check_finite(r.grads, r.loss);
    return r;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct SampleResult {
    TokenSequence seq;            // prompt + generated response
    std::vector<double> token_logps;  // model log-probs (temperature 1) of each generated token
    bool ended_with_eos = false;
};

// Appends tokens until EOS or max_new. Temperature 0 is deterministic argmax
// with lowest-index tie break; identical (params, prompt, rng seed) produce
// identical output for any temperature.
inline SampleResult sample(const Parameters& params, const TokenSequence& prompt, double temperature,
                           int max_new, Rng& rng, int eos_id) {
    if (temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
    if (prompt.empty()) throw std::invalid_argument("empty prompt");
    if (static_cast<int>(prompt.size()) + max_new > params.config.context_length)
        throw std::invalid_argument("prompt length + max_new exceeds context_length");
    const int V = params.config.vocab_size;

    SampleResult out;
    out.seq = prompt;
    thread_local ForwardCache cache;
    std::vector<double> row(static_cast<size_t>(V));
    std::vector<double> probs(static_cast<size_t>(V));

    for (int step = 0; step < max_new; ++step) {
        run_forward(params, out.seq.ids.data(), static_cast<int>(out.seq.size()), cache,
                    /*last_row_only=*/true);
        logits_row(params, cache, static_cast<int>(out.seq.size()) - 1, row.data());
        const double lse = detail::log_sum_exp(row.data(), V);

        int tok;
        if (temperature == 0.0) {
            tok = 0;
            for (int i = 1; i < V; ++i)
                if (row[static_cast<size_t>(i)] > row[static_cast<size_t>(tok)]) tok = i;
        } else {
            double mx = -std::numeric_limits<double>::infinity();
            for (int i = 0; i < V; ++i) mx = std::max(mx, row[static_cast<size_t>(i)]);
            double z = 0.0;
            for (int i = 0; i < V; ++i) {
                probs[static_cast<size_t>(i)] = std::exp((row[static_cast<size_t>(i)] - mx) / temperature);
                z += probs[static_cast<size_t>(i)];
            }
            const double u = rng.uniform() * z;
            double acc = 0.0;
            tok = V - 1;
            for (int i = 0; i < V; ++i) {
                acc += probs[static_cast<size_t>(i)];
                if (u < acc) {
                    tok = i;
                    break;
                }
            }
        }

        out.token_logps.push_back(row[static_cast<size_t>(tok)] - lse);
        out.seq.push_back(tok, Role::response);
        if (tok == eos_id) {
            out.ended_with_eos = true;
            break;
        }
    }
    return out;
}

}  // namespace prefine::lm
