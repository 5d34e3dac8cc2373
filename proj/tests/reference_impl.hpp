#pragma once
// Test-only straight-line reference implementations, independent of the
// tape-based production path. Everything here is plain loops over plain
// vectors so it can serve as an oracle.

#include <cmath>
#include <vector>

#include "onepiece/backbone.hpp"
#include "onepiece/tensor.hpp"

namespace refimpl {

struct RefLayer {
    std::vector<double> wq, bq, wk, bk, wv, bv, wo, bo;
    std::vector<double> w1, b1, w2, b2;
    std::vector<double> ln1_g, ln1_b, ln2_g, ln2_b;
};

struct RefEncoder {
    int dim = 0, heads = 1, ff = 0;
    double ln_eps = 1e-6;
    std::vector<RefLayer> layers;
};

inline RefEncoder snapshot(const onepiece::EncoderParams& p) {
    RefEncoder r;
    r.dim = p.dim;
    r.heads = p.heads;
    r.ff = p.ff;
    r.ln_eps = p.ln_eps;
    for (const auto& lp : p.layers) {
        RefLayer rl;
        rl.wq = lp.wq.val(); rl.bq = lp.bq.val();
        rl.wk = lp.wk.val(); rl.bk = lp.bk.val();
        rl.wv = lp.wv.val(); rl.bv = lp.bv.val();
        rl.wo = lp.wo.val(); rl.bo = lp.bo.val();
        rl.w1 = lp.w1.val(); rl.b1 = lp.b1.val();
        rl.w2 = lp.w2.val(); rl.b2 = lp.b2.val();
        rl.ln1_g = lp.ln1_g.val(); rl.ln1_b = lp.ln1_b.val();
        rl.ln2_g = lp.ln2_g.val(); rl.ln2_b = lp.ln2_b.val();
        r.layers.push_back(std::move(rl));
    }
    return r;
}

inline std::vector<double> ref_layer_norm_rows(const std::vector<double>& x, int t, int d,
                                               const std::vector<double>& g,
                                               const std::vector<double>& b, double eps) {
    std::vector<double> y(x.size());
    for (int i = 0; i < t; ++i) {
        double mu = 0;
        for (int j = 0; j < d; ++j) mu += x[i * d + j];
        mu /= d;
        double var = 0;
        for (int j = 0; j < d; ++j) var += (x[i * d + j] - mu) * (x[i * d + j] - mu);
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) y[i * d + j] = g[j] * (x[i * d + j] - mu) * is + b[j];
    }
    return y;
}

// X[t x d] * W[d x e] + b
inline std::vector<double> ref_linear(const std::vector<double>& x, int t, int d,
                                      const std::vector<double>& w, int e,
                                      const std::vector<double>& b) {
    std::vector<double> y(static_cast<std::size_t>(t) * e, 0.0);
    for (int i = 0; i < t; ++i)
        for (int k = 0; k < d; ++k)
            for (int j = 0; j < e; ++j) y[i * e + j] += x[i * d + k] * w[k * e + j];
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < e; ++j) y[i * e + j] += b[j];
    return y;
}

// Full pre-norm forward. When zero_disallowed_values is set, the value rows
// of columns a query row may not attend to are literally zeroed for that row
// before the weighted sum (instead of relying on zero attention weights);
// with sound masking both paths must agree exactly on every output.
inline std::vector<double> ref_encode(std::vector<double> h, int t, const RefEncoder& p,
                                      const onepiece::AttentionMask& mask,
                                      bool zero_disallowed_values = false) {
    int d = p.dim;
    int dh = d / p.heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const auto& lp : p.layers) {
        std::vector<double> xin = ref_layer_norm_rows(h, t, d, lp.ln1_g, lp.ln1_b, p.ln_eps);
        std::vector<double> q = ref_linear(xin, t, d, lp.wq, d, lp.bq);
        std::vector<double> k = ref_linear(xin, t, d, lp.wk, d, lp.bk);
        std::vector<double> v = ref_linear(xin, t, d, lp.wv, d, lp.bv);
        std::vector<double> ctx(static_cast<std::size_t>(t) * d, 0.0);
        for (int hd = 0; hd < p.heads; ++hd) {
            int c0 = hd * dh;
            for (int i = 0; i < t; ++i) {
                std::vector<double> logits(static_cast<std::size_t>(t), 0.0);
                double mx = -1e300;
                for (int j = 0; j < t; ++j) {
                    if (!mask.at(i, j)) continue;
                    double acc = 0;
                    for (int a = 0; a < dh; ++a) acc += q[i * d + c0 + a] * k[j * d + c0 + a];
                    logits[j] = acc * scale;
                    mx = std::max(mx, logits[j]);
                }
                double z = 0;
                for (int j = 0; j < t; ++j) {
                    if (mask.at(i, j)) z += std::exp(logits[j] - mx);
                }
                for (int j = 0; j < t; ++j) {
                    double w = mask.at(i, j) ? std::exp(logits[j] - mx) / z : 0.0;
                    for (int a = 0; a < dh; ++a) {
                        double vv = v[j * d + c0 + a];
                        if (zero_disallowed_values && !mask.at(i, j)) vv = 0.0;
                        ctx[i * d + c0 + a] += w * vv;
                    }
                }
            }
        }
        std::vector<double> proj = ref_linear(ctx, t, d, lp.wo, d, lp.bo);
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += proj[i];
        std::vector<double> yin = ref_layer_norm_rows(h, t, d, lp.ln2_g, lp.ln2_b, p.ln_eps);
        std::vector<double> f1 = ref_linear(yin, t, d, lp.w1, p.ff, lp.b1);
        for (auto& x : f1) x = 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
        std::vector<double> f2 = ref_linear(f1, t, p.ff, lp.w2, d, lp.b2);
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += f2[i];
    }
    return h;
}

}  // namespace refimpl
