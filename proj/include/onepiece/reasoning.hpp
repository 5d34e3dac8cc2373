#pragma once
// Block-wise multi-step latent reasoning: block-causal masks, reasoning
// position embeddings, the incremental cached step, and the analytic /
// measured multiply-accumulate accounting.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "onepiece/backbone.hpp"
#include "onepiece/optim.hpp"
#include "onepiece/tensor.hpp"

namespace onepiece {

struct ReasoningConfig {
    int block_size = 1;  // M
    int steps = 1;       // K
    Tensor rpe;          // [K_max x d]
    void validate() const {
        if (block_size < 1 || steps < 1) {
            throw std::invalid_argument("ReasoningConfig: M and K must be >= 1");
        }
        if (rpe.defined() && rpe.rows() < steps) {
            throw std::invalid_argument("ReasoningConfig: RPE table has " +
                                        std::to_string(rpe.rows()) + " rows for K=" +
                                        std::to_string(steps));
        }
    }
};

// Mask of size (N + kM)^2 extending `base` (the N x N base-token mask):
//  - base rows keep exactly the base columns;
//  - rows of block j attend base columns, columns of blocks < j, and all
//    columns within block j; nothing else.
inline AttentionMask build_block_mask(const AttentionMask& base, int m, int k) {
    if (base.size < 1 || m < 1 || k < 1) {
        throw std::invalid_argument("build_block_mask: N, M, k must be >= 1");
    }
    int n = base.size;
    int total = n + k * m;
    AttentionMask mask(total, false);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) mask.set(r, c, base.at(r, c));
    }
    for (int j = 1; j <= k; ++j) {
        int jr0 = n + (j - 1) * m;
        for (int r = jr0; r < jr0 + m; ++r) {
            for (int c = 0; c < n + j * m; ++c) mask.set(r, c, true);
        }
    }
    return mask;
}

// Spec form: bidirectional base attention among the N base tokens.
inline AttentionMask build_block_mask(int n, int m, int k) {
    if (n < 1) throw std::invalid_argument("build_block_mask: N must be >= 1");
    return build_block_mask(AttentionMask(n, true), m, k);
}

// Adds the step-k reasoning position embedding row to every block row.
// Step 0 passes through unchanged and never consults the table.
inline Tensor apply_rpe(Tensor block, int k, Tensor rpe) {
    if (k == 0) return block;
    if (k < 0 || k > rpe.rows()) {
        throw std::invalid_argument("apply_rpe: step " + std::to_string(k) +
                                    " outside RPE table of " + std::to_string(rpe.rows()));
    }
    return add_rowvec(block, slice_rows(rpe, k - 1, 1));
}

// One incremental forward over the M new block rows. The cache must hold
// N + (k-1)M rows; `block_in` is already RPE-shifted. Output equals the last
// M rows of a from-scratch masked encode of the same concatenation.
inline Tensor reason_step(KVCache& cache, Tensor block_in, const AttentionMask& step_mask,
                          const EncoderParams& params) {
    if (cache.empty()) throw std::invalid_argument("reason_step: cache not initialized");
    Tensor out = encode(block_in, step_mask, params, &cache);
    cache.step += 1;
    return out;
}

// Reasoning blocks: blocks[0] is B0 (the last M rows of the base encoder
// output); blocks[k] for k >= 1 holds the refined states produced by the
// step-k forward, which feed that step's supervision and the next step.
struct BlockSet {
    std::vector<Tensor> blocks;
    int block_size = 0;
    int steps() const { return static_cast<int>(blocks.size()) - 1; }
};

struct ReasoningOutput {
    Tensor base_hidden;  // N x d
    BlockSet blocks;
    KVCache cache;
};

inline ReasoningOutput run_reasoning(Tensor tokens, const AttentionMask& base_mask,
                                     const ReasoningConfig& cfg, const EncoderParams& params) {
    cfg.validate();
    int n = tokens.rows();
    int m = cfg.block_size;
    if (n < m) {
        throw std::invalid_argument("run_reasoning: N=" + std::to_string(n) + " < M=" +
                                    std::to_string(m));
    }
    ReasoningOutput out;
    out.blocks.block_size = m;
    out.base_hidden = encode(tokens, base_mask, params, &out.cache);
    Tensor prev = slice_rows(out.base_hidden, n - m, m);
    out.blocks.blocks.push_back(prev);
    for (int k = 1; k <= cfg.steps; ++k) {
        Tensor shifted = apply_rpe(prev, k, cfg.rpe);
        AttentionMask mask_k = build_block_mask(base_mask, m, k);
        prev = reason_step(out.cache, shifted, mask_k, params);
        out.blocks.blocks.push_back(prev);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Complexity accounting
// ---------------------------------------------------------------------------
//
// Counted operations are the multiply-accumulates of the matrix products in
// the backbone: Q/K/V/output projections, attention scores and context sums,
// and the two FFN products. Per layer the base forward costs
//   4*N*d^2 + 2*N^2*d + 2*N*d*d_ff
// and the cached step k costs
//   4*M*d^2 + 2*M*(N+kM)*d + 2*M*d*d_ff.

inline std::uint64_t base_layer_macs(int n, int d, int dff) {
    auto nn = static_cast<std::uint64_t>(n);
    auto dd = static_cast<std::uint64_t>(d);
    auto ff = static_cast<std::uint64_t>(dff);
    return 4 * nn * dd * dd + 2 * nn * nn * dd + 2 * nn * dd * ff;
}

inline std::uint64_t step_layer_macs(int n, int d, int m, int k, int dff) {
    auto nn = static_cast<std::uint64_t>(n);
    auto dd = static_cast<std::uint64_t>(d);
    auto mm = static_cast<std::uint64_t>(m);
    auto kk = static_cast<std::uint64_t>(k);
    auto ff = static_cast<std::uint64_t>(dff);
    return 4 * mm * dd * dd + 2 * mm * (nn + kk * mm) * dd + 2 * mm * dd * ff;
}

struct FlopReport {
    std::uint64_t base_analytic = 0;
    std::uint64_t base_measured = 0;
    std::vector<std::uint64_t> step_analytic;
    std::vector<std::uint64_t> step_measured;
    std::uint64_t total_analytic() const {
        std::uint64_t t = base_analytic;
        for (auto s : step_analytic) t += s;
        return t;
    }
    std::uint64_t total_measured() const {
        std::uint64_t t = base_measured;
        for (auto s : step_measured) t += s;
        return t;
    }
    bool exact_match() const {
        if (base_analytic != base_measured) return false;
        if (step_analytic.size() != step_measured.size()) return false;
        for (std::size_t i = 0; i < step_analytic.size(); ++i) {
            if (step_analytic[i] != step_measured[i]) return false;
        }
        return true;
    }
};

namespace detail {

inline EncoderParams random_encoder(Tape& tape, int layers, int d, int heads, int dff,
                                    Rng& rng) {
    EncoderParams p;
    p.dim = d;
    p.heads = heads;
    p.ff = dff;
    for (int l = 0; l < layers; ++l) {
        LayerParams lp;
        auto mat = [&](int r, int c) { return tape.leaf({r, c}, gaussian_init(static_cast<std::size_t>(r) * c, 0.2, rng), false); };
        auto vec = [&](int nn, double v) { return tape.leaf({nn}, std::vector<double>(static_cast<std::size_t>(nn), v), false); };
        lp.wq = mat(d, d); lp.bq = vec(d, 0.0);
        lp.wk = mat(d, d); lp.bk = vec(d, 0.0);
        lp.wv = mat(d, d); lp.bv = vec(d, 0.0);
        lp.wo = mat(d, d); lp.bo = vec(d, 0.0);
        lp.w1 = mat(d, dff); lp.b1 = vec(dff, 0.0);
        lp.w2 = mat(dff, d); lp.b2 = vec(d, 0.0);
        lp.ln1_g = vec(d, 1.0); lp.ln1_b = vec(d, 0.0);
        lp.ln2_g = vec(d, 1.0); lp.ln2_b = vec(d, 0.0);
        p.layers.push_back(lp);
    }
    return p;
}

}  // namespace detail

// Runs an instrumented forward over random inputs and compares the measured
// counter against the closed form, stage by stage.
inline FlopReport flop_count(int n, int d, int layers, int m, int k, int dff,
                             int heads = 1, std::uint64_t seed = 7) {
    if (n < 1 || d < 1 || layers < 0 || dff < 1) {
        throw std::invalid_argument("flop_count: bad dimensions");
    }
    FlopReport rep;
    auto ll = static_cast<std::uint64_t>(layers);
    rep.base_analytic = ll * base_layer_macs(n, d, dff);
    if (m >= 1 && k >= 1) {
        for (int s = 1; s <= k; ++s) {
            rep.step_analytic.push_back(ll * step_layer_macs(n, d, m, s, dff));
        }
    }

    Rng rng(seed);
    Tape tape;
    EncoderParams p = detail::random_encoder(tape, layers, d, heads, dff, rng);
    Tensor tokens = tape.leaf({n, d}, gaussian_init(static_cast<std::size_t>(n) * d, 0.5, rng), false);
    AttentionMask base(n, true);
    KVCache cache;
    mac_reset();
    Tensor h = encode(tokens, base, p, &cache);
    rep.base_measured = mac_count();
    if (m >= 1 && k >= 1 && n >= m) {
        Tensor rpe = tape.leaf({k, d}, gaussian_init(static_cast<std::size_t>(k) * d, 0.1, rng), false);
        Tensor prev = slice_rows(h, n - m, m);
        for (int s = 1; s <= k; ++s) {
            Tensor shifted = apply_rpe(prev, s, rpe);
            AttentionMask mask_s = build_block_mask(base, m, s);
            mac_reset();
            prev = reason_step(cache, shifted, mask_s, p);
            rep.step_measured.push_back(mac_count());
        }
    }
    return rep;
}

}  // namespace onepiece
