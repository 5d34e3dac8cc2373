#pragma once
// Pre-norm bidirectional Transformer encoder. One code path serves both the
// full forward and the incremental (KV-cached) forward used by reasoning:
// when a cache is supplied, only the new rows are projected and their keys
// and values are appended to the per-layer cache.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "onepiece/context.hpp"
#include "onepiece/tensor.hpp"

namespace onepiece {

struct LayerParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // attention projections
    Tensor w1, b1, w2, b2;                  // FFN
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
};

struct EncoderParams {
    int dim = 0;
    int heads = 1;
    int ff = 0;
    double ln_eps = 1e-6;
    std::vector<LayerParams> layers;
    int n_layers() const { return static_cast<int>(layers.size()); }
    int head_dim() const { return dim / heads; }
};

// Per-layer cached key/value rows (full width). `len` counts cached rows;
// base rows never change after the initial fill.
struct KVCache {
    std::vector<Tensor> k, v;
    int len = 0;
    int step = 0;  // completed reasoning steps
    bool empty() const { return k.empty(); }
};

// Attention weights captured for export: indexed [layer][head], each a
// row-major (rows x cached_cols) matrix.
struct AttentionCapture {
    int heads = 0;
    int cols = 0;
    std::vector<std::vector<double>> w;  // layer*heads entries
};

// Applies the L pre-norm layers to `x`. Without a cache this is the plain
// forward over all rows (mask row offset 0). With a cache, `x` holds only
// the new rows, which attend to cached rows plus themselves at mask rows
// [cache->len, cache->len + rows).
inline Tensor encode(Tensor x, const AttentionMask& mask, const EncoderParams& p,
                     KVCache* cache = nullptr, AttentionCapture* capture = nullptr) {
    int rows = x.rows();
    if (x.cols() != p.dim) throw std::invalid_argument("encode: token width mismatch");
    if (p.dim % p.heads != 0) throw std::invalid_argument("encode: dim not divisible by heads");
    int row0 = cache ? cache->len : 0;
    if (mask.size < row0 + rows) {
        throw std::invalid_argument("encode: mask of " + std::to_string(mask.size) +
                                    " smaller than " + std::to_string(row0 + rows) + " rows");
    }
    if (cache && cache->empty() && row0 == 0) {
        cache->k.assign(static_cast<std::size_t>(p.n_layers()), Tensor());
        cache->v.assign(static_cast<std::size_t>(p.n_layers()), Tensor());
    }
    if (capture) {
        capture->heads = p.heads;
        capture->w.clear();
    }
    int dh = p.head_dim();
    double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor h = x;
    for (int l = 0; l < p.n_layers(); ++l) {
        const LayerParams& lp = p.layers[static_cast<std::size_t>(l)];
        Tensor xin = layer_norm_rows(h, lp.ln1_g, lp.ln1_b, p.ln_eps);
        Tensor q = add_rowvec(matmul(xin, lp.wq), lp.bq);
        Tensor k = add_rowvec(matmul(xin, lp.wk), lp.bk);
        Tensor v = add_rowvec(matmul(xin, lp.wv), lp.bv);
        if (cache) {
            if (cache->k[static_cast<std::size_t>(l)].defined()) {
                k = concat_rows({cache->k[static_cast<std::size_t>(l)], k});
                v = concat_rows({cache->v[static_cast<std::size_t>(l)], v});
            }
            cache->k[static_cast<std::size_t>(l)] = k;
            cache->v[static_cast<std::size_t>(l)] = v;
        }
        int tk = k.rows();
        std::vector<Tensor> heads;
        for (int hd = 0; hd < p.heads; ++hd) {
            Tensor qh = slice_cols(q, hd * dh, dh);
            Tensor kh = slice_cols(k, hd * dh, dh);
            Tensor vh = slice_cols(v, hd * dh, dh);
            std::vector<double> wcap;
            Tensor ctx = attend(qh, kh, vh, mask, row0, scale_factor,
                                capture ? &wcap : nullptr);
            if (capture) {
                capture->cols = tk;
                capture->w.push_back(std::move(wcap));
            }
            heads.push_back(ctx);
        }
        Tensor ctx = p.heads == 1 ? heads[0] : concat_cols(heads);
        Tensor attn_out = add(h, add_rowvec(matmul(ctx, lp.wo), lp.bo));
        Tensor yin = layer_norm_rows(attn_out, lp.ln2_g, lp.ln2_b, p.ln_eps);
        Tensor f = add_rowvec(matmul(gelu(add_rowvec(matmul(yin, lp.w1), lp.b1)), lp.w2), lp.b2);
        h = add(attn_out, f);
        for (double val : h.val()) {
            if (!std::isfinite(val)) {
                throw std::runtime_error("encode: non-finite value after layer " +
                                         std::to_string(l));
            }
        }
    }
    if (cache) cache->len = row0 + rows;
    return h;
}

// Full forward that returns the per-layer, per-head attention weights.
inline AttentionCapture export_attention(Tensor x, const AttentionMask& mask,
                                         const EncoderParams& p) {
    AttentionCapture cap;
    encode(x, mask, p, nullptr, &cap);
    return cap;
}

// Dump format, one file per request: a two-line text header carrying the
// dimensions and per-token tags (segment names, plus R1..RK for reasoning
// rows), then row-major little-endian 64-bit floats, one (rows x cols)
// matrix per (layer, head) in layer-major order.
inline void write_attention_dump(const std::string& path, const AttentionCapture& cap,
                                 int n_layers, const std::vector<std::string>& tags) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write attention dump: " + path);
    out << "onepiece-attn v1 layers=" << n_layers << " heads=" << cap.heads
        << " T=" << cap.cols << "\n";
    for (std::size_t i = 0; i < tags.size(); ++i) {
        if (i) out << ' ';
        out << tags[i];
    }
    out << "\n";
    for (const auto& w : cap.w) {
        out.write(reinterpret_cast<const char*>(w.data()),
                  static_cast<std::streamsize>(w.size() * sizeof(double)));
    }
}

}  // namespace onepiece
