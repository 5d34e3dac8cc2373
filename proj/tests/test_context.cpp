#include <catch2/catch_amalgamated.hpp>

#include <optional>
#include <set>

#include "onepiece/context.hpp"
#include "test_helpers.hpp"

using namespace onepiece;
using testutil::item;

namespace {

// Grammar of packed sequences: IH* (BOS PA+ EOS)+? SD_USER SD_QUERY? CIS*
bool grammar_ok(const std::vector<Segment>& tags, Mode mode) {
    std::size_t i = 0;
    while (i < tags.size() && tags[i] == Segment::IH) ++i;
    while (i < tags.size() && tags[i] == Segment::PA_BOS) {
        ++i;
        std::size_t start = i;
        while (i < tags.size() && tags[i] == Segment::PA) ++i;
        if (i == start) return false;  // empty group
        if (i >= tags.size() || tags[i] != Segment::PA_EOS) return false;
        ++i;
    }
    if (i >= tags.size() || tags[i] != Segment::SD_USER) return false;
    ++i;
    if (i < tags.size() && tags[i] == Segment::SD_QUERY) ++i;
    std::size_t cis = 0;
    while (i < tags.size() && tags[i] == Segment::CIS) {
        ++i;
        ++cis;
    }
    if (i != tags.size()) return false;
    if (mode == Mode::ranking && cis == 0) return false;
    if (mode == Mode::retrieval && cis != 0) return false;
    return true;
}

QueryFeatures query(int id, int tv) {
    QueryFeatures q;
    q.query_id = id;
    q.text.assign(static_cast<std::size_t>(tv), 0.1);
    q.pop_bucket = 1;
    return q;
}

}  // namespace

TEST_CASE("embed_item") {
    SECTION("zero tables give the zero vector") {
        Tape tape;
        EmbeddingTables t = testutil::make_zero_tables(tape, 2, 4, 3);
        Tensor e = embed_item(t, item(1, 2, 3, 1, 2), ItemProjection::shared);
        for (int j = 0; j < 4; ++j) REQUIRE(e.at(0, j) == 0.0);
    }
    SECTION("1-dim embeddings with a summing projection") {
        // feature embeddings [1],[2],[3],[4],[5]; projection = column of ones
        Tape tape;
        EmbeddingTables t;
        t.dim = 1;
        t.text_dim = 1;
        auto one_col = [&](std::vector<double> v) {
            int n = static_cast<int>(v.size());
            return tape.leaf({n, 1}, std::move(v), false);
        };
        t.item_id = one_col({1});
        t.item_cat = one_col({2});
        t.item_shop = one_col({3});
        t.item_price = one_col({4});
        t.item_pop = one_col({5});
        t.proj_shared_w = tape.leaf({5, 1}, {1, 1, 1, 1, 1}, false);
        t.proj_shared_b = tape.leaf({1, 1}, {0}, false);
        Tensor e = embed_item(t, item(0, 0, 0, 0, 0), ItemProjection::shared);
        REQUIRE(e.at(0, 0) == 15.0);
    }
    SECTION("shared and candidate projections differ when their parameters do") {
        Tape tape;
        Rng rng(3);
        EmbeddingTables t = testutil::make_tables(tape, 2, 4, 3, rng);
        Tensor a = embed_item(t, item(1, 1, 1, 1, 1), ItemProjection::shared);
        Tensor b = embed_item(t, item(1, 1, 1, 1, 1), ItemProjection::candidate);
        bool differ = false;
        for (int j = 0; j < 4; ++j) differ = differ || (a.at(0, j) != b.at(0, j));
        REQUIRE(differ);
    }
    SECTION("out-of-vocabulary id is rejected with the feature name") {
        Tape tape;
        Rng rng(3);
        EmbeddingTables t = testutil::make_tables(tape, 2, 4, 3, rng);
        REQUIRE_THROWS_WITH(embed_item(t, item(99), ItemProjection::shared),
                            Catch::Matchers::ContainsSubstring("item_id"));
        REQUIRE_THROWS_WITH(embed_item(t, item(1, 77), ItemProjection::shared),
                            Catch::Matchers::ContainsSubstring("category_id"));
    }
}

TEST_CASE("build_interaction_history") {
    Tape tape;
    Rng rng(5);
    EmbeddingTables t = testutil::make_tables(tape, 2, 4, 3, rng);
    SECTION("empty history is valid and yields zero tokens") {
        TokenSpan s = build_interaction_history(t, {});
        REQUIRE(s.n() == 0);
    }
    SECTION("single item with zero positional table equals the embedding") {
        Tape z;
        Rng r2(5);
        EmbeddingTables tz = testutil::make_tables(z, 2, 4, 3, r2);
        tz.pos_ih = z.zeros({8, 4});
        TokenSpan s = build_interaction_history(tz, {item(2, 1, 1, 0, 0)});
        Tensor e = embed_item(tz, item(2, 1, 1, 0, 0), ItemProjection::shared);
        for (int j = 0; j < 4; ++j) REQUIRE(s.tokens.at(0, j) == e.at(0, j));
    }
    SECTION("swapping two items changes tokens exactly by the positional difference") {
        auto a = item(1, 1, 0, 0, 0), b = item(3, 2, 1, 1, 1);
        TokenSpan ab = build_interaction_history(t, {a, b});
        TokenSpan ba = build_interaction_history(t, {b, a});
        // token_0(ab) - token_1(ba) = (emb(a)+p0) - (emb(a)+p1) = p0 - p1
        for (int j = 0; j < 4; ++j) {
            double diff = ab.tokens.at(0, j) - ba.tokens.at(1, j);
            double want = t.pos_ih.at(0, j) - t.pos_ih.at(1, j);
            REQUIRE(diff == Catch::Approx(want).margin(1e-15));
        }
    }
    SECTION("positional overflow is rejected") {
        std::vector<ItemFeatures> many(9, item(1));
        REQUIRE_THROWS_WITH(build_interaction_history(t, many),
                            Catch::Matchers::ContainsSubstring("positional"));
    }
}

TEST_CASE("build_preference_anchors") {
    Tape tape;
    Rng rng(6);
    EmbeddingTables t = testutil::make_tables(tape, 2, 4, 3, rng);
    SECTION("one group of one item gives BOS, item, EOS") {
        AnchorGroup g{AnchorKind::top_exposed, {item(1)}};
        TokenSpan s = build_preference_anchors(t, {g});
        REQUIRE(s.tags == std::vector<Segment>{Segment::PA_BOS, Segment::PA, Segment::PA_EOS});
        for (int j = 0; j < 4; ++j) {
            REQUIRE(s.tokens.at(0, j) == t.bos.at(0, j));
            REQUIRE(s.tokens.at(2, j) == t.eos.at(0, j));
        }
    }
    SECTION("two groups of sizes 2 and 1 give 7 tokens in order") {
        AnchorGroup g1{AnchorKind::top_exposed, {item(1), item(2)}};
        AnchorGroup g2{AnchorKind::top_clicked, {item(3)}};
        TokenSpan s = build_preference_anchors(t, {g1, g2});
        REQUIRE(s.tags == std::vector<Segment>{Segment::PA_BOS, Segment::PA, Segment::PA,
                                               Segment::PA_EOS, Segment::PA_BOS, Segment::PA,
                                               Segment::PA_EOS});
    }
    SECTION("within-group positional index restarts per group") {
        // 2nd item of group 2 carries the same positional row as 2nd item of group 1
        AnchorGroup g1{AnchorKind::top_exposed, {item(1), item(2)}};
        AnchorGroup g2{AnchorKind::top_clicked, {item(3), item(2)}};
        TokenSpan s = build_preference_anchors(t, {g1, g2});
        // token index: group1 second item = 2; group2 second item = 6
        Tensor e = embed_item(t, item(2), ItemProjection::shared);
        for (int j = 0; j < 4; ++j) {
            double p1 = s.tokens.at(2, j) - e.at(0, j);
            double p2 = s.tokens.at(6, j) - e.at(0, j);
            REQUIRE(p1 == Catch::Approx(p2).margin(1e-15));
            REQUIRE(p1 == Catch::Approx(t.pos_pa.at(1, j)).margin(1e-15));
        }
    }
    SECTION("empty group rejected; kind order enforced") {
        REQUIRE_THROWS_AS(build_preference_anchors(t, {{AnchorKind::top_exposed, {}}}),
                          std::invalid_argument);
        AnchorGroup g1{AnchorKind::top_clicked, {item(1)}};
        AnchorGroup g2{AnchorKind::top_exposed, {item(2)}};
        REQUIRE_THROWS_AS(build_preference_anchors(t, {g1, g2}), std::invalid_argument);
    }
}

TEST_CASE("build_situational") {
    SECTION("zero tables give zero tokens") {
        Tape tape;
        EmbeddingTables t = testutil::make_zero_tables(tape, 2, 4, 3);
        TokenSpan s = build_situational(t, UserFeatures{1, 1, 1}, query(1, 3));
        REQUIRE(s.n() == 2);
        for (int i = 0; i < 2; ++i) {
            for (int j = 0; j < 4; ++j) REQUIRE(s.tokens.at(i, j) == 0.0);
        }
    }
    SECTION("query-free mode emits exactly one SD token") {
        Tape tape;
        Rng rng(7);
        EmbeddingTables t = testutil::make_tables(tape, 2, 4, 3, rng);
        TokenSpan s = build_situational(t, UserFeatures{1, 1, 1}, std::nullopt);
        REQUIRE(s.tags == std::vector<Segment>{Segment::SD_USER});
    }
    SECTION("fixed tiny tables reproduce hand-computed vectors") {
        Tape tape;
        EmbeddingTables t;
        t.dim = 2;
        t.text_dim = 1;
        t.user_id = tape.leaf({2, 1}, {0.5, 1.5}, false);
        t.user_age = tape.leaf({2, 1}, {2.0, 3.0}, false);
        t.user_loc = tape.leaf({2, 1}, {-1.0, 4.0}, false);
        // proj_user: [3 -> 2], W = [[1,0],[0,1],[1,1]], b = [0.25, -0.25]
        t.proj_user_w = tape.leaf({3, 2}, {1, 0, 0, 1, 1, 1}, false);
        t.proj_user_b = tape.leaf({1, 2}, {0.25, -0.25}, false);
        t.query_id = tape.leaf({2, 1}, {1.0, -1.0}, false);
        t.query_pop = tape.leaf({2, 1}, {0.5, 2.5}, false);
        // proj_query: [1 + 1 + 1 -> 2], W = [[1,1],[2,0],[0,2]], b = 0
        t.proj_query_w = tape.leaf({3, 2}, {1, 1, 2, 0, 0, 2}, false);
        t.proj_query_b = tape.leaf({1, 2}, {0, 0}, false);
        t.pos_user = tape.leaf({1, 2}, {0.1, 0.2}, false);
        t.pos_query = tape.leaf({1, 2}, {-0.1, -0.2}, false);
        QueryFeatures q;
        q.query_id = 1;
        q.text = {3.0};
        q.pop_bucket = 0;
        TokenSpan s = build_situational(t, UserFeatures{1, 0, 1}, q);
        // user: φ = [1.5, 2.0, 4.0] -> W^T φ = [1.5+4.0, 2.0+4.0] = [5.5, 6.0]; +b +pos
        REQUIRE(s.tokens.at(0, 0) == Catch::Approx(5.5 + 0.25 + 0.1).margin(1e-12));
        REQUIRE(s.tokens.at(0, 1) == Catch::Approx(6.0 - 0.25 + 0.2).margin(1e-12));
        // query: φ = [-1.0, 3.0, 0.5] -> [-1+6, -1+1] = [5.0, 0.0]; +pos
        REQUIRE(s.tokens.at(1, 0) == Catch::Approx(5.0 - 0.1).margin(1e-12));
        REQUIRE(s.tokens.at(1, 1) == Catch::Approx(0.0 - 0.2).margin(1e-12));
    }
}

TEST_CASE("pack_sequence") {
    Tape tape;
    Rng rng(8);
    EmbeddingTables t = testutil::make_tables(tape, 2, 4, 3, rng);
    std::vector<ItemFeatures> ih{item(1), item(2)};
    std::vector<AnchorGroup> pa{{AnchorKind::top_exposed, {item(3), item(1)}}};
    UserFeatures u{1, 1, 1};
    SECTION("retrieval ordering is forced") {
        TokenSequence s = pack_sequence(t, ih, pa, u, query(2, 3), std::nullopt);
        REQUIRE(s.n() == 8);
        REQUIRE(s.mode == Mode::retrieval);
        REQUIRE(s.segments == std::vector<Segment>{Segment::IH, Segment::IH, Segment::PA_BOS,
                                                   Segment::PA, Segment::PA, Segment::PA_EOS,
                                                   Segment::SD_USER, Segment::SD_QUERY});
    }
    SECTION("ranking appends CIS") {
        std::vector<ItemFeatures> cand{item(4), item(5), item(6)};
        TokenSequence s = pack_sequence(t, ih, pa, u, query(2, 3), cand);
        REQUIRE(s.n() == 11);
        REQUIRE(s.mode == Mode::ranking);
        for (int i = 8; i < 11; ++i) REQUIRE(s.segments[static_cast<std::size_t>(i)] == Segment::CIS);
        REQUIRE(s.cis_len() == 3);
    }
    SECTION("permuting candidates changes only the last C rows, bitwise") {
        std::vector<ItemFeatures> cand{item(4), item(5), item(6)};
        std::vector<ItemFeatures> perm{item(6), item(4), item(5)};
        TokenSequence s1 = pack_sequence(t, ih, pa, u, query(2, 3), cand);
        TokenSequence s2 = pack_sequence(t, ih, pa, u, query(2, 3), perm);
        for (int i = 0; i < 8; ++i) {
            for (int j = 0; j < 4; ++j) REQUIRE(s1.tokens.at(i, j) == s2.tokens.at(i, j));
        }
        // candidate tokens are content-only: row of item(4) in s1 equals its permuted slot in s2
        for (int j = 0; j < 4; ++j) {
            REQUIRE(s1.tokens.at(8, j) == s2.tokens.at(9, j));
            REQUIRE(s1.tokens.at(9, j) == s2.tokens.at(10, j));
            REQUIRE(s1.tokens.at(10, j) == s2.tokens.at(8, j));
        }
    }
    SECTION("ranking with empty candidate list is rejected") {
        REQUIRE_THROWS_AS(pack_sequence(t, ih, pa, u, query(2, 3), std::vector<ItemFeatures>{}),
                          std::invalid_argument);
    }
    SECTION("segment grammar holds over random component sizes") {
        Rng g(99);
        for (int trial = 0; trial < 30; ++trial) {
            std::vector<ItemFeatures> ihr;
            for (int i = g.int_below(5); i > 0; --i) ihr.push_back(item(g.int_below(8)));
            std::vector<AnchorGroup> par;
            int ngroups = g.int_below(3);
            for (int b = 0; b < ngroups; ++b) {
                AnchorGroup grp{static_cast<AnchorKind>(b), {}};
                for (int i = 1 + g.int_below(3); i > 0; --i) grp.items.push_back(item(g.int_below(8)));
                par.push_back(grp);
            }
            bool ranking = g.bernoulli(0.5);
            std::optional<std::vector<ItemFeatures>> cand;
            if (ranking) {
                std::vector<ItemFeatures> c;
                for (int i = 1 + g.int_below(4); i > 0; --i) c.push_back(item(g.int_below(8)));
                cand = c;
            }
            TokenSequence s = pack_sequence(t, ihr, par, u, query(1, 3), cand);
            REQUIRE(grammar_ok(s.segments, s.mode));
            REQUIRE(s.n() == s.tokens.rows());
        }
    }
    SECTION("determinism: identical inputs give byte-identical sequences") {
        std::vector<ItemFeatures> cand{item(4), item(5)};
        TokenSequence s1 = pack_sequence(t, ih, pa, u, query(2, 3), cand);
        TokenSequence s2 = pack_sequence(t, ih, pa, u, query(2, 3), cand);
        REQUIRE(s1.tokens.val() == s2.tokens.val());
    }
}

TEST_CASE("group_candidates") {
    std::vector<int> pool(12);
    for (int i = 0; i < 12; ++i) pool[static_cast<std::size_t>(i)] = i;
    SECTION("full setwise limit") {
        Rng rng(1);
        auto g = group_candidates(pool, 12, rng);
        REQUIRE(g.size() == 1);
        REQUIRE(g[0].size() == 12);
    }
    SECTION("pointwise limit") {
        Rng rng(1);
        std::vector<int> five{0, 1, 2, 3, 4};
        auto g = group_candidates(five, 1, rng);
        REQUIRE(g.size() == 5);
        for (const auto& grp : g) REQUIRE(grp.size() == 1);
    }
    SECTION("sizes 4,4,2 partition preserving the multiset") {
        Rng rng(5);
        std::vector<int> ten(10);
        for (int i = 0; i < 10; ++i) ten[static_cast<std::size_t>(i)] = i * 7;
        auto g = group_candidates(ten, 4, rng);
        REQUIRE(g.size() == 3);
        REQUIRE(g[0].size() == 4);
        REQUIRE(g[1].size() == 4);
        REQUIRE(g[2].size() == 2);
        std::multiset<int> seen;
        for (const auto& grp : g) seen.insert(grp.begin(), grp.end());
        REQUIRE(seen == std::multiset<int>(ten.begin(), ten.end()));
    }
    SECTION("errors") {
        Rng rng(1);
        REQUIRE_THROWS_AS(group_candidates(std::vector<int>{}, 2, rng), std::invalid_argument);
        REQUIRE_THROWS_AS(group_candidates(pool, 0, rng), std::invalid_argument);
    }
}
