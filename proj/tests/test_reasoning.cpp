#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "onepiece/reasoning.hpp"
#include "test_helpers.hpp"

using namespace onepiece;

namespace {

// Reference recurrence without a cache: re-encode the growing concatenation
// from scratch at every step.
std::vector<std::vector<double>> scratch_blocks(const std::vector<double>& tokens, int n, int d,
                                                const AttentionMask& base, int m, int k,
                                                const std::vector<double>& rpe,
                                                const EncoderParams& params, Tape& tape) {
    std::vector<std::vector<double>> blocks;
    Tensor x = tape.leaf({n, d}, tokens, false);
    Tensor h = encode(x, base, params);
    Tensor prev = slice_rows(h, n - m, m);
    blocks.push_back(prev.val());
    std::vector<double> packed = tokens;
    for (int s = 1; s <= k; ++s) {
        std::vector<double> shifted = blocks.back();
        for (int r = 0; r < m; ++r) {
            for (int c = 0; c < d; ++c) {
                shifted[static_cast<std::size_t>(r) * d + c] += rpe[static_cast<std::size_t>(s - 1) * d + c];
            }
        }
        packed.insert(packed.end(), shifted.begin(), shifted.end());
        AttentionMask mask_s = build_block_mask(base, m, s);
        Tensor full = tape.leaf({n + s * m, d}, packed, false);
        Tensor hs = encode(full, mask_s, params);
        blocks.push_back(slice_rows(hs, n + (s - 1) * m, m).val());
    }
    return blocks;
}

}  // namespace

TEST_CASE("build_block_mask rules") {
    SECTION("N=3, M=1, k=1") {
        AttentionMask m = build_block_mask(3, 1, 1);
        REQUIRE(m.size == 4);
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) REQUIRE(m.at(r, c));
            REQUIRE_FALSE(m.at(r, 3));  // base rows never see the block
        }
        for (int c = 0; c < 4; ++c) REQUIRE(m.at(3, c));
    }
    SECTION("N=2, M=2, k=2") {
        AttentionMask m = build_block_mask(2, 2, 2);
        REQUIRE(m.size == 6);
        // block 1 rows (2,3): base + self, not block 2
        for (int r = 2; r < 4; ++r) {
            for (int c = 0; c < 4; ++c) REQUIRE(m.at(r, c));
            REQUIRE_FALSE(m.at(r, 4));
            REQUIRE_FALSE(m.at(r, 5));
        }
        // block 2 rows (4,5): everything
        for (int r = 4; r < 6; ++r) {
            for (int c = 0; c < 6; ++c) REQUIRE(m.at(r, c));
        }
    }
    SECTION("visibility grows with the block index") {
        Rng rng(3);
        for (int trial = 0; trial < 20; ++trial) {
            int n = 1 + rng.int_below(5);
            int m = 1 + rng.int_below(5);
            int k = 2 + rng.int_below(4);
            AttentionMask mask = build_block_mask(n, m, k);
            mask.validate();
            for (int j = 2; j <= k; ++j) {
                int rj = n + (j - 1) * m;      // first row of block j
                int rp = n + (j - 2) * m;      // first row of block j-1
                int shared = n + (j - 1) * m;  // columns visible to both
                for (int c = 0; c < shared; ++c) {
                    if (mask.at(rp, c)) REQUIRE(mask.at(rj, c));
                }
                // strictly larger: block j sees its own columns, j-1 does not
                REQUIRE(mask.at(rj, n + (j - 1) * m));
                REQUIRE_FALSE(mask.at(rp, n + (j - 1) * m));
            }
            // base rows allow exactly base columns
            for (int r = 0; r < n; ++r) {
                for (int c = n; c < mask.size; ++c) REQUIRE_FALSE(mask.at(r, c));
            }
        }
    }
}

TEST_CASE("apply_rpe") {
    Tape tape;
    Tensor rpe0 = tape.zeros({3, 4});
    Tensor block = tape.leaf({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}, false);
    SECTION("zero table leaves the block unchanged") {
        Tensor out = apply_rpe(block, 2, rpe0);
        REQUIRE(out.val() == block.val());
    }
    SECTION("row broadcast") {
        Tensor rpe = tape.leaf({3, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0}, false);
        Tensor out = apply_rpe(block, 1, rpe);
        REQUIRE(out.at(0, 0) == 2.0);
        REQUIRE(out.at(1, 0) == 6.0);
        REQUIRE(out.at(0, 1) == 2.0);  // row 1 of rpe not used
    }
    SECTION("step 0 passes through and never consults the table") {
        Tensor undefined_rpe;  // would throw if touched
        Tensor out = apply_rpe(block, 0, undefined_rpe);
        REQUIRE(out.val() == block.val());
    }
    SECTION("step beyond the table is rejected") {
        REQUIRE_THROWS_AS(apply_rpe(block, 4, rpe0), std::invalid_argument);
    }
}

TEST_CASE("cached reasoning equals the from-scratch forward") {
    Rng rng(41);
    for (int trial = 0; trial < 8; ++trial) {
        int d = 4;
        int m = 1 + rng.int_below(3);
        int n = m + 1 + rng.int_below(6);
        int k = 1 + rng.int_below(3);
        int layers = 1 + rng.int_below(2);
        Tape tape;
        EncoderParams params = testutil::make_encoder(tape, layers, d, 2, rng);
        std::vector<double> tokens = gaussian_init(static_cast<std::size_t>(n) * d, 0.7, rng);
        std::vector<double> rpe = gaussian_init(static_cast<std::size_t>(k) * d, 0.3, rng);
        AttentionMask base(n, true);

        ReasoningConfig cfg;
        cfg.block_size = m;
        cfg.steps = k;
        cfg.rpe = tape.leaf({k, d}, rpe, false);
        ReasoningOutput out = run_reasoning(tape.leaf({n, d}, tokens, false), base, cfg, params);

        auto ref = scratch_blocks(tokens, n, d, base, m, k, rpe, params, tape);
        REQUIRE(out.blocks.blocks.size() == ref.size());
        for (std::size_t b = 0; b < ref.size(); ++b) {
            for (std::size_t i = 0; i < ref[b].size(); ++i) {
                REQUIRE(std::abs(out.blocks.blocks[b].val()[i] - ref[b][i]) < 1e-9);
            }
        }
        REQUIRE(out.cache.len == n + k * m);  // N + kM rows cached after step k
        REQUIRE(out.cache.step == k);
    }
}

TEST_CASE("run_reasoning shapes and errors") {
    Tape tape;
    Rng rng(43);
    EncoderParams params = testutil::make_encoder(tape, 1, 4, 2, rng);
    SECTION("N < M rejected") {
        ReasoningConfig cfg;
        cfg.block_size = 5;
        cfg.steps = 1;
        cfg.rpe = tape.zeros({2, 4});
        Tensor x = tape.leaf({3, 4}, gaussian_init(12, 0.5, rng), false);
        REQUIRE_THROWS_AS(run_reasoning(x, AttentionMask(3, true), cfg, params),
                          std::invalid_argument);
    }
    SECTION("K=1 with zero RPE is one masked forward over N+M tokens") {
        int n = 5, m = 2, d = 4;
        std::vector<double> tokens = gaussian_init(static_cast<std::size_t>(n) * d, 0.6, rng);
        ReasoningConfig cfg;
        cfg.block_size = m;
        cfg.steps = 1;
        cfg.rpe = tape.zeros({1, d});
        AttentionMask base(n, true);
        ReasoningOutput out =
            run_reasoning(tape.leaf({n, d}, tokens, false), base, cfg, params);
        // one unrolled forward: [tokens; B0] under the k=1 block mask
        Tensor h0 = encode(tape.leaf({n, d}, tokens, false), base, params);
        Tensor b0 = slice_rows(h0, n - m, m);
        std::vector<double> packed = tokens;
        packed.insert(packed.end(), b0.val().begin(), b0.val().end());
        Tensor full = tape.leaf({n + m, d}, packed, false);
        Tensor h1 = encode(full, build_block_mask(base, m, 1), params);
        Tensor want = slice_rows(h1, n, m);
        for (int i = 0; i < m * d; ++i) {
            REQUIRE(std::abs(out.blocks.blocks[1].val()[static_cast<std::size_t>(i)] -
                             want.val()[static_cast<std::size_t>(i)]) < 1e-9);
        }
    }
    SECTION("RPE distinguishability: different steps shift identical content apart") {
        Tensor rpe = tape.leaf({2, 4}, gaussian_init(8, 0.5, rng), false);
        Tensor block = tape.leaf({2, 4}, gaussian_init(8, 0.5, rng), false);
        Tensor b1 = apply_rpe(block, 1, rpe);
        Tensor b2 = apply_rpe(block, 2, rpe);
        bool differ = false;
        for (int i = 0; i < 8; ++i) differ = differ || (b1.val()[static_cast<std::size_t>(i)] != b2.val()[static_cast<std::size_t>(i)]);
        REQUIRE(differ);
    }
}

TEST_CASE("flop accounting") {
    SECTION("no reasoning means zero reasoning count") {
        FlopReport r = flop_count(8, 4, 1, 0, 0, 16);
        REQUIRE(r.step_analytic.empty());
        REQUIRE(r.step_measured.empty());
        REQUIRE(r.exact_match());
    }
    SECTION("doubling K scales the dominant attention term per the closed form") {
        int n = 16, d = 8, m = 4, dff = 32;
        auto total_steps = [&](int kk) {
            std::uint64_t t = 0;
            for (int s = 1; s <= kk; ++s) t += step_layer_macs(n, d, m, s, dff);
            return t;
        };
        std::uint64_t k2 = total_steps(2), k4 = total_steps(4);
        // closed form: sum_k 2M(N+kM)d grows quadratically in K
        std::uint64_t fixed_per_step = 4ull * m * d * d + 2ull * m * d * dff;
        std::uint64_t attn2 = k2 - 2 * fixed_per_step;
        std::uint64_t attn4 = k4 - 4 * fixed_per_step;
        std::uint64_t want2 = 0, want4 = 0;
        for (int s = 1; s <= 2; ++s) want2 += 2ull * m * (n + s * m) * d;
        for (int s = 1; s <= 4; ++s) want4 += 2ull * m * (n + s * m) * d;
        REQUIRE(attn2 == want2);
        REQUIRE(attn4 == want4);
    }
    SECTION("measured equals analytic exactly for (16,8,2,4,3)") {
        FlopReport r = flop_count(16, 8, 2, 4, 3, 32, 2);
        REQUIRE(r.base_analytic == r.base_measured);
        REQUIRE(r.step_analytic.size() == 3);
        for (int s = 0; s < 3; ++s) {
            REQUIRE(r.step_analytic[static_cast<std::size_t>(s)] ==
                    r.step_measured[static_cast<std::size_t>(s)]);
        }
        REQUIRE(r.exact_match());
    }
}
