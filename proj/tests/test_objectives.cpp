#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "onepiece/objectives.hpp"
#include "onepiece/optim.hpp"
#include "test_helpers.hpp"

using namespace onepiece;

namespace {

double ln2() { return std::log(2.0); }

HeadParams make_head(Tape& tape, int d, Rng& rng, double sigma = 0.3) {
    HeadParams h;
    h.w1 = tape.leaf({d, d}, gaussian_init(static_cast<std::size_t>(d) * d, sigma, rng), false);
    h.b1 = tape.leaf({d}, gaussian_init(static_cast<std::size_t>(d), 0.1, rng), false);
    h.w2 = tape.leaf({d}, gaussian_init(static_cast<std::size_t>(d), sigma, rng), false);
    h.b2 = tape.leaf({1}, gaussian_init(1, 0.1, rng), false);
    return h;
}

// straight-line 2-layer head
double head_oracle(const HeadParams& h, const std::vector<double>& x, int d) {
    std::vector<double> hid(static_cast<std::size_t>(d), 0.0);
    for (int j = 0; j < d; ++j) {
        for (int i = 0; i < d; ++i) hid[static_cast<std::size_t>(j)] += x[static_cast<std::size_t>(i)] * h.w1.at(i, j);
        hid[static_cast<std::size_t>(j)] += h.b1.at(j);
        double v = hid[static_cast<std::size_t>(j)];
        hid[static_cast<std::size_t>(j)] = 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440));
    }
    double s = h.b2.at(0);
    for (int j = 0; j < d; ++j) s += hid[static_cast<std::size_t>(j)] * h.w2.at(j);
    return s;
}

}  // namespace

TEST_CASE("user_repr") {
    Tape tape;
    SECTION("equal already-normalized rows pass through") {
        Tensor block = tape.leaf({3, 2}, {1, -1, 1, -1, 1, -1}, false);
        Tensor r = user_repr(block);
        REQUIRE(r.at(0) == Catch::Approx(1.0).margin(1e-6));
        REQUIRE(r.at(1) == Catch::Approx(-1.0).margin(1e-6));
    }
    SECTION("constant rows normalize to zero") {
        Tensor block = tape.leaf({2, 2}, {2, 2, 2, 2}, false);
        Tensor r = user_repr(block);
        REQUIRE(r.at(0) == 0.0);
        REQUIRE(r.at(1) == 0.0);
    }
    SECTION("random block matches hand-evaluated LN+mean") {
        Rng rng(3);
        std::vector<double> x = gaussian_init(8, 1.5, rng);
        Tensor r = user_repr(tape.leaf({2, 4}, x, false));
        for (int j = 0; j < 4; ++j) {
            double want = 0;
            for (int i = 0; i < 2; ++i) {
                double mu = 0, var = 0;
                for (int c = 0; c < 4; ++c) mu += x[static_cast<std::size_t>(i) * 4 + c];
                mu /= 4;
                for (int c = 0; c < 4; ++c) {
                    double dd = x[static_cast<std::size_t>(i) * 4 + c] - mu;
                    var += dd * dd;
                }
                var /= 4;
                want += (x[static_cast<std::size_t>(i) * 4 + j] - mu) / std::sqrt(var + 1e-12);
            }
            want /= 2;
            REQUIRE(std::abs(r.at(j) - want) < 1e-10);
        }
    }
}

TEST_CASE("bce") {
    Tape tape;
    SECTION("logit 0, label 1 gives ln 2") {
        Tensor l = bce(tape.leaf({1}, {0.0}, false), {1.0});
        REQUIRE(l.at(0) == Catch::Approx(ln2()).margin(1e-12));
    }
    SECTION("saturated correct logit gives ~0") {
        Tensor l = bce(tape.leaf({1}, {20.0}, false), {1.0});
        REQUIRE(l.at(0) < 1e-8);
    }
    SECTION("random case matches direct evaluation") {
        Rng rng(5);
        std::vector<double> logits = gaussian_init(5, 2.0, rng);
        std::vector<double> labels{1, 0, 1, 1, 0};
        Tensor l = bce(tape.leaf({5}, logits, false), labels);
        double want = 0;
        for (int i = 0; i < 5; ++i) {
            double p = 1.0 / (1.0 + std::exp(-logits[static_cast<std::size_t>(i)]));
            want += labels[static_cast<std::size_t>(i)] == 1.0 ? -std::log(p) : -std::log(1 - p);
        }
        REQUIRE(std::abs(l.at(0) - want) < 1e-12);
    }
    SECTION("empty input rejected") {
        REQUIRE_THROWS_AS(bce(tape.leaf({1}, {0.0}, false), {}), std::invalid_argument);
    }
}

TEST_CASE("scl") {
    Tape tape;
    SECTION("two equal scores, one positive") {
        ContrastiveResult r = scl(tape.leaf({2}, {0.7, 0.7}, false), {1, 0}, 1.0);
        REQUIRE(r.loss.at(0) == Catch::Approx(ln2()).margin(1e-12));
        REQUIRE(r.flagged == 0);
    }
    SECTION("dominant positive saturates to zero loss") {
        ContrastiveResult r = scl(tape.leaf({3}, {60.0, 0.0, 0.0}, false), {1, 0, 0}, 1.0);
        REQUIRE(r.loss.at(0) < 1e-8);
    }
    SECTION("random C=4 matches direct softmax evaluation") {
        Rng rng(7);
        std::vector<double> s = gaussian_init(4, 1.5, rng);
        std::vector<double> y{0, 1, 1, 0};
        double eta = 0.4;
        ContrastiveResult r = scl(tape.leaf({4}, s, false), y, eta);
        double z = 0;
        for (double v : s) z += std::exp(v / eta);
        double want = 0;
        for (int i = 0; i < 4; ++i) {
            if (y[static_cast<std::size_t>(i)] == 1.0) want += -std::log(std::exp(s[static_cast<std::size_t>(i)] / eta) / z);
        }
        REQUIRE(std::abs(r.loss.at(0) - want) < 1e-12);
    }
    SECTION("zero positives flagged, zero loss") {
        ContrastiveResult r = scl(tape.leaf({2}, {1.0, 2.0}, false), {0, 0}, 1.0);
        REQUIRE(r.flagged == 1);
        REQUIRE(r.loss.at(0) == 0.0);
    }
    SECTION("shift invariance") {
        Rng rng(9);
        std::vector<double> s = gaussian_init(5, 2.0, rng);
        std::vector<double> y{1, 0, 0, 1, 0};
        std::vector<double> shifted = s;
        for (auto& v : shifted) v += 13.7;
        double a = scl(tape.leaf({5}, s, false), y, 0.07).loss.at(0);
        double b = scl(tape.leaf({5}, shifted, false), y, 0.07).loss.at(0);
        REQUIRE(std::abs(a - b) < 1e-10);
    }
}

TEST_CASE("bcl") {
    Tape tape;
    SECTION("one positive, one negative, equal scores: U2I term is ln 2") {
        // r and both pool items orthogonal-free: choose z rows equal so scores tie
        Tensor r = tape.leaf({2}, {1.0, 0.0}, false);
        Tensor z = tape.leaf({2, 2}, {0.5, 0.3, 0.5, -0.9}, false);  // equal first coord
        ContrastiveResult res = bcl({r}, {PoolView{z, {1, 0}}}, 1.0);
        // batch of one: I2U is exactly 0, so the whole loss is the U2I ln 2
        REQUIRE(res.loss.at(0) == Catch::Approx(ln2()).margin(1e-12));
    }
    SECTION("batch size 1 makes every I2U term zero") {
        Rng rng(11);
        Tensor r = tape.leaf({3}, gaussian_init(3, 1.0, rng), false);
        Tensor z = tape.leaf({2, 3}, gaussian_init(6, 1.0, rng), false);
        double eta = 0.5;
        ContrastiveResult res = bcl({r}, {PoolView{z, {1, 1}}}, eta);
        // I2U denominator is the single user itself: contributes -log(1) = 0.
        double want = 0;
        std::vector<double> s(2);
        for (int v = 0; v < 2; ++v) {
            for (int c = 0; c < 3; ++c) s[static_cast<std::size_t>(v)] += z.at(v, c) * r.at(c);
            s[static_cast<std::size_t>(v)] /= eta;
        }
        double zsum = std::exp(s[0]) + std::exp(s[1]);
        want += -std::log(std::exp(s[0]) / zsum) - std::log(std::exp(s[1]) / zsum);
        REQUIRE(std::abs(res.loss.at(0) - want) < 1e-12);
    }
    SECTION("batch of three matches exhaustive enumeration") {
        Rng rng(13);
        int d = 3;
        double eta = 0.3;
        std::vector<Tensor> rs;
        std::vector<PoolView> pools;
        std::vector<std::vector<double>> rvals, zvals;
        std::vector<std::vector<double>> labels{{1, 0, 0}, {0, 1, 1}, {1, 1, 0}};
        for (int i = 0; i < 3; ++i) {
            rvals.push_back(gaussian_init(static_cast<std::size_t>(d), 1.0, rng));
            zvals.push_back(gaussian_init(static_cast<std::size_t>(3) * d, 1.0, rng));
            rs.push_back(tape.leaf({d}, rvals.back(), false));
            pools.push_back(PoolView{tape.leaf({3, d}, zvals.back(), false), labels[static_cast<std::size_t>(i)]});
        }
        ContrastiveResult res = bcl(rs, pools, eta);
        auto ip = [&](const std::vector<double>& a, const std::vector<double>& z, int row) {
            double s = 0;
            for (int c = 0; c < d; ++c) s += a[static_cast<std::size_t>(c)] * z[static_cast<std::size_t>(row) * d + c];
            return s;
        };
        double want = 0;
        for (int i = 0; i < 3; ++i) {
            for (int v = 0; v < 3; ++v) {
                if (labels[static_cast<std::size_t>(i)][static_cast<std::size_t>(v)] != 1.0) continue;
                // U2I
                double num = std::exp(ip(rvals[static_cast<std::size_t>(i)], zvals[static_cast<std::size_t>(i)], v) / eta);
                double den = 0;
                for (int w = 0; w < 3; ++w) den += std::exp(ip(rvals[static_cast<std::size_t>(i)], zvals[static_cast<std::size_t>(i)], w) / eta);
                want += -std::log(num / den);
                // I2U
                double den2 = 0;
                for (int j = 0; j < 3; ++j) den2 += std::exp(ip(rvals[static_cast<std::size_t>(j)], zvals[static_cast<std::size_t>(i)], v) / eta);
                want += -std::log(num / den2);
            }
        }
        REQUIRE(std::abs(res.loss.at(0) - want) < 1e-12);
        REQUIRE(res.flagged == 0);
    }
    SECTION("pool without positives contributes zero and is flagged") {
        Rng rng(15);
        Tensor r = tape.leaf({2}, gaussian_init(2, 1.0, rng), false);
        Tensor z = tape.leaf({2, 2}, gaussian_init(4, 1.0, rng), false);
        ContrastiveResult res = bcl({r, r}, {PoolView{z, {0, 0}}, PoolView{z, {1, 0}}}, 1.0);
        REQUIRE(res.flagged == 1);
    }
}

TEST_CASE("rank_scores") {
    Tape tape;
    Rng rng(17);
    SECTION("zero-weight two-layer head outputs its bias everywhere") {
        HeadParams h;
        h.w1 = tape.zeros({3, 3});
        h.b1 = tape.zeros({3});
        h.w2 = tape.zeros({3});
        h.b2 = tape.leaf({1}, {0.7}, false);
        Tensor block = tape.leaf({4, 3}, gaussian_init(12, 1.0, rng), false);
        Tensor s = rank_scores(block, h);
        for (int i = 0; i < 4; ++i) REQUIRE(s.at(i) == 0.7);
    }
    SECTION("identical rows score identically") {
        HeadParams h = make_head(tape, 3, rng);
        std::vector<double> row = gaussian_init(3, 1.0, rng);
        std::vector<double> two = row;
        two.insert(two.end(), row.begin(), row.end());
        Tensor s = rank_scores(tape.leaf({2, 3}, two, false), h);
        REQUIRE(s.at(0) == s.at(1));
    }
    SECTION("1-layer linear head equals an explicit dot product") {
        HeadParams h;
        std::vector<double> w = gaussian_init(3, 1.0, rng);
        h.w2 = tape.leaf({3}, w, false);
        h.b2 = tape.leaf({1}, {0.25}, false);
        std::vector<double> x = gaussian_init(3, 1.0, rng);
        Tensor s = rank_scores(tape.leaf({1, 3}, x, false), h);
        double want = 0.25;
        for (int c = 0; c < 3; ++c) want += w[static_cast<std::size_t>(c)] * x[static_cast<std::size_t>(c)];
        REQUIRE(std::abs(s.at(0) - want) < 1e-12);
    }
}

TEST_CASE("task assignment validation") {
    TaskAssignment good{{Task::impression, Task::click}};
    good.validate();
    TaskAssignment bad{{Task::order, Task::click}};
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("total_loss") {
    Tape tape;
    Rng rng(19);
    int d = 4;
    SECTION("ranking K=3 on a 2-candidate toy equals the six hand-summed terms") {
        std::map<Task, HeadParams> heads;
        heads[Task::click] = make_head(tape, d, rng);
        heads[Task::add_to_cart] = make_head(tape, d, rng);
        heads[Task::order] = make_head(tape, d, rng);
        RankingExample ex;
        ex.blocks.block_size = 2;
        std::vector<std::vector<double>> blockvals;
        for (int b = 0; b < 4; ++b) {
            blockvals.push_back(gaussian_init(static_cast<std::size_t>(2) * d, 1.0, rng));
            ex.blocks.blocks.push_back(tape.leaf({2, d}, blockvals.back(), false));
        }
        ex.labels[Task::click] = {1, 0};
        ex.labels[Task::add_to_cart] = {1, 0};
        ex.labels[Task::order] = {0, 0};
        TaskAssignment assign{{Task::click, Task::add_to_cart, Task::order}};
        double eta = 0.25;
        TotalLossResult res = total_loss({ex}, assign, heads, eta);

        double want = 0;
        Task tasks[3] = {Task::click, Task::add_to_cart, Task::order};
        for (int k = 1; k <= 3; ++k) {
            Task tk = tasks[k - 1];
            const auto& y = ex.labels[tk];
            double s0 = head_oracle(heads[tk], {blockvals[static_cast<std::size_t>(k)][0], blockvals[static_cast<std::size_t>(k)][1],
                                                blockvals[static_cast<std::size_t>(k)][2], blockvals[static_cast<std::size_t>(k)][3]}, d);
            double s1 = head_oracle(heads[tk], {blockvals[static_cast<std::size_t>(k)][4], blockvals[static_cast<std::size_t>(k)][5],
                                                blockvals[static_cast<std::size_t>(k)][6], blockvals[static_cast<std::size_t>(k)][7]}, d);
            double ss[2] = {s0, s1};
            for (int i = 0; i < 2; ++i) {
                double p = 1.0 / (1.0 + std::exp(-ss[i]));
                want += y[static_cast<std::size_t>(i)] == 1.0 ? -std::log(p) : -std::log(1.0 - p);
            }
            double z = std::exp(s0 / eta) + std::exp(s1 / eta);
            for (int i = 0; i < 2; ++i) {
                if (y[static_cast<std::size_t>(i)] == 1.0) want += -std::log(std::exp(ss[i] / eta) / z);
            }
        }
        REQUIRE(std::abs(res.loss.at(0) - want) < 1e-10);
        REQUIRE(res.breakdown.size() == 3);
    }
    SECTION("retrieval K=1 degenerates to the single-task loss") {
        RetrievalExample ex;
        ex.blocks.block_size = 2;
        ex.blocks.blocks.push_back(tape.leaf({2, d}, gaussian_init(8, 1.0, rng), false));
        ex.blocks.blocks.push_back(tape.leaf({2, d}, gaussian_init(8, 1.0, rng), false));
        ex.pool_z = tape.leaf({3, d}, gaussian_init(12, 1.0, rng), false);
        ex.labels[Task::click] = {1, 0, 0};
        TaskAssignment assign{{Task::click}};
        TotalLossResult res = total_loss({ex}, assign, 0.07);
        REQUIRE(res.breakdown.size() == 1);
        REQUIRE(res.loss.at(0) > 0.0);
        // single term: BCE + BCL on block 1
        Tensor r = user_repr(ex.blocks.blocks[1]);
        Tensor logits = matvec(ex.pool_z, r);
        Tensor b = bce(logits, ex.labels[Task::click]);
        ContrastiveResult c = bcl({r}, {PoolView{ex.pool_z, ex.labels[Task::click]}}, 0.07);
        REQUIRE(std::abs(res.loss.at(0) - (b.at(0) + c.loss.at(0))) < 1e-12);
    }
    SECTION("assignment/blocks mismatch rejected") {
        RetrievalExample ex;
        ex.blocks.block_size = 2;
        for (int b = 0; b < 2; ++b) {
            ex.blocks.blocks.push_back(tape.leaf({2, d}, gaussian_init(8, 1.0, rng), false));
        }
        ex.pool_z = tape.leaf({2, d}, gaussian_init(8, 1.0, rng), false);
        ex.labels[Task::impression] = {1, 0};
        ex.labels[Task::click] = {1, 0};
        TaskAssignment assign{{Task::impression, Task::click}};
        REQUIRE_THROWS_AS(total_loss({ex}, assign, 0.07), std::invalid_argument);
    }
    SECTION("step isolation: heads of other tasks get zero gradient") {
        ParamStore store;
        Rng r2(23);
        store.add("hc.w2", {d}, gaussian_init(static_cast<std::size_t>(d), 0.5, r2));
        store.add("hc.b2", {1}, {0.1});
        store.add("ho.w2", {d}, gaussian_init(static_cast<std::size_t>(d), 0.5, r2));
        store.add("ho.b2", {1}, {0.2});
        Tape t2;
        Binding bind;
        std::map<Task, HeadParams> heads;
        HeadParams hc, ho;
        hc.w2 = bind_param(t2, store, "hc.w2", true, &bind);
        hc.b2 = bind_param(t2, store, "hc.b2", true, &bind);
        ho.w2 = bind_param(t2, store, "ho.w2", true, &bind);
        ho.b2 = bind_param(t2, store, "ho.b2", true, &bind);
        heads[Task::click] = hc;
        heads[Task::order] = ho;
        RankingExample ex;
        ex.blocks.block_size = 2;
        ex.blocks.blocks.push_back(t2.leaf({2, d}, gaussian_init(8, 1.0, r2), false));
        ex.blocks.blocks.push_back(t2.leaf({2, d}, gaussian_init(8, 1.0, r2), false));
        ex.labels[Task::click] = {1, 0};
        // only the click term on block 1
        TotalLossResult res = total_loss_ranking({ex}, {{1, Task::click}}, heads, 0.07);
        t2.backward(res.loss);
        for (double g : bind.at("ho.w2").grad()) REQUIRE(g == 0.0);
        REQUIRE(bind.at("ho.b2").grad()[0] == 0.0);
        bool any = false;
        for (double g : bind.at("hc.w2").grad()) any = any || g != 0.0;
        REQUIRE(any);
    }
    SECTION("losses are non-negative and gradient-checkable on a toy config") {
        ParamStore store;
        Rng r3(29);
        store.add("z", {3, d}, gaussian_init(static_cast<std::size_t>(3) * d, 0.8, r3));
        store.add("b1", {2, d}, gaussian_init(static_cast<std::size_t>(2) * d, 0.8, r3));
        store.add("b2", {2, d}, gaussian_init(static_cast<std::size_t>(2) * d, 0.8, r3));
        auto build = [&](Tape& t, Binding& b) {
            RetrievalExample ex;
            ex.blocks.block_size = 2;
            ex.blocks.blocks.push_back(t.zeros({2, d}));  // B0 unused by schedule
            ex.blocks.blocks.push_back(bind_param(t, store, "b1", true, &b));
            ex.blocks.blocks.push_back(bind_param(t, store, "b2", true, &b));
            ex.pool_z = bind_param(t, store, "z", true, &b);
            ex.labels[Task::impression] = {1, 1, 0};
            ex.labels[Task::click] = {1, 0, 0};
            TaskAssignment assign{{Task::impression, Task::click}};
            TotalLossResult res = total_loss({ex}, assign, 0.5);
            return res.loss;
        };
        Tape t;
        Binding bb;
        REQUIRE(build(t, bb).at(0) >= 0.0);
        REQUIRE(grad_check(build, store, 1e-4).max_rel_err < 1e-4);
    }
}
