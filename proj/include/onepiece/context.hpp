#pragma once
// Context engineering: turns raw entities into the packed token sequence.
// Four token families: interaction history (IH), preference anchors (PA,
// wrapped in BOS/EOS per group), situational descriptors (SD: user token and
// query token), and in ranking mode a candidate item set (CIS) appended last
// with no positional embedding.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "onepiece/features.hpp"
#include "onepiece/rng.hpp"
#include "onepiece/tensor.hpp"

namespace onepiece {

enum class Segment : std::uint8_t { IH, PA_BOS, PA, PA_EOS, SD_USER, SD_QUERY, CIS };

inline const char* segment_name(Segment s) {
    switch (s) {
        case Segment::IH: return "IH";
        case Segment::PA_BOS: return "PA_BOS";
        case Segment::PA: return "PA";
        case Segment::PA_EOS: return "PA_EOS";
        case Segment::SD_USER: return "SD_USER";
        case Segment::SD_QUERY: return "SD_QUERY";
        case Segment::CIS: return "CIS";
    }
    return "?";
}

enum class Mode { retrieval, ranking };

// Embedding and projection parameters bound to one tape. IH and PA share one
// projection; user, query, and candidate tokens have their own.
struct EmbeddingTables {
    Tensor item_id, item_cat, item_shop, item_price, item_pop;
    Tensor user_id, user_age, user_loc;
    Tensor query_id, query_pop;
    Tensor proj_shared_w, proj_shared_b;
    Tensor proj_cand_w, proj_cand_b;
    Tensor proj_user_w, proj_user_b;
    Tensor proj_query_w, proj_query_b;
    Tensor pos_ih, pos_pa, pos_user, pos_query;  // positional tables
    Tensor bos, eos;                             // PA group boundaries
    int dim = 0;
    int text_dim = 0;
};

enum class ItemProjection { shared, candidate };

// Concatenates the per-feature embeddings in fixed field order, then applies
// the named projection. One row per item.
inline Tensor embed_items(const EmbeddingTables& t, const std::vector<ItemFeatures>& items,
                          ItemProjection which) {
    if (items.empty()) throw std::invalid_argument("embed_items: empty item list");
    std::vector<int> id, cat, shop, price, pop;
    for (const auto& f : items) {
        id.push_back(f.item_id);
        cat.push_back(f.category_id);
        shop.push_back(f.shop_id);
        price.push_back(f.price_bucket);
        pop.push_back(f.pop_bucket);
    }
    Tensor feats = concat_cols({gather_rows(t.item_id, id, "item_id"),
                                gather_rows(t.item_cat, cat, "category_id"),
                                gather_rows(t.item_shop, shop, "shop_id"),
                                gather_rows(t.item_price, price, "price_bucket"),
                                gather_rows(t.item_pop, pop, "popularity_bucket")});
    const Tensor& w = which == ItemProjection::shared ? t.proj_shared_w : t.proj_cand_w;
    const Tensor& b = which == ItemProjection::shared ? t.proj_shared_b : t.proj_cand_b;
    return add_rowvec(matmul(feats, w), b);
}

inline Tensor embed_item(const EmbeddingTables& t, const ItemFeatures& f, ItemProjection which) {
    return embed_items(t, {f}, which);
}

inline Tensor embed_user(const EmbeddingTables& t, const UserFeatures& u) {
    Tensor feats = concat_cols({gather_rows(t.user_id, {u.user_id}, "user_id"),
                                gather_rows(t.user_age, {u.age_bucket}, "age_bucket"),
                                gather_rows(t.user_loc, {u.location_id}, "location_id")});
    return add_rowvec(matmul(feats, t.proj_user_w), t.proj_user_b);
}

inline Tensor embed_query(const EmbeddingTables& t, const QueryFeatures& q) {
    if (static_cast<int>(q.text.size()) != t.text_dim) {
        throw std::invalid_argument("embed_query: text vector has " + std::to_string(q.text.size()) +
                                    " dims, expected " + std::to_string(t.text_dim));
    }
    for (double x : q.text) {
        if (!std::isfinite(x)) throw std::invalid_argument("embed_query: non-finite text vector");
    }
    Tape* tape = t.query_id.tape();
    Tensor text = tape->leaf({1, t.text_dim}, q.text, false);
    Tensor feats = concat_cols({gather_rows(t.query_id, {q.query_id}, "query_id"), text,
                                gather_rows(t.query_pop, {q.pop_bucket}, "query_pop_bucket")});
    return add_rowvec(matmul(feats, t.proj_query_w), t.proj_query_b);
}

// A token block plus its segment tags; n == 0 means no tokens (tensor unset).
struct TokenSpan {
    Tensor tokens;
    std::vector<Segment> tags;
    int n() const { return static_cast<int>(tags.size()); }
};

// IH tokens: shared-projection item embeddings plus order-based positional
// embeddings, ascending timestamp order preserved.
inline TokenSpan build_interaction_history(const EmbeddingTables& t,
                                           const std::vector<ItemFeatures>& seq) {
    TokenSpan out;
    if (seq.empty()) return out;
    if (static_cast<int>(seq.size()) > t.pos_ih.rows()) {
        throw std::invalid_argument("interaction history of " + std::to_string(seq.size()) +
                                    " overflows positional table of " +
                                    std::to_string(t.pos_ih.rows()));
    }
    Tensor emb = embed_items(t, seq, ItemProjection::shared);
    Tensor pos = slice_rows(t.pos_ih, 0, static_cast<int>(seq.size()));
    out.tokens = add(emb, pos);
    out.tags.assign(seq.size(), Segment::IH);
    return out;
}

// PA tokens: each group wrapped in learnable BOS/EOS; the within-group
// positional index restarts at 1 for every group.
inline TokenSpan build_preference_anchors(const EmbeddingTables& t,
                                          const std::vector<AnchorGroup>& groups) {
    TokenSpan out;
    if (groups.empty()) return out;
    for (std::size_t g = 1; g < groups.size(); ++g) {
        if (static_cast<int>(groups[g].kind) < static_cast<int>(groups[g - 1].kind)) {
            throw std::invalid_argument("anchor groups out of fixed kind order");
        }
    }
    std::vector<Tensor> parts;
    for (const auto& g : groups) {
        if (g.items.empty()) throw std::invalid_argument("empty anchor group rejected");
        if (static_cast<int>(g.items.size()) > t.pos_pa.rows()) {
            throw std::invalid_argument("anchor group of " + std::to_string(g.items.size()) +
                                        " overflows positional table of " +
                                        std::to_string(t.pos_pa.rows()));
        }
        parts.push_back(t.bos);
        Tensor emb = embed_items(t, g.items, ItemProjection::shared);
        parts.push_back(add(emb, slice_rows(t.pos_pa, 0, static_cast<int>(g.items.size()))));
        parts.push_back(t.eos);
        out.tags.push_back(Segment::PA_BOS);
        out.tags.insert(out.tags.end(), g.items.size(), Segment::PA);
        out.tags.push_back(Segment::PA_EOS);
    }
    out.tokens = concat_rows(parts);
    return out;
}

// SD tokens: [user, query], or just [user] in the query-free setting.
inline TokenSpan build_situational(const EmbeddingTables& t, const UserFeatures& u,
                                   const std::optional<QueryFeatures>& q) {
    TokenSpan out;
    Tensor user_tok = add(embed_user(t, u), t.pos_user);
    if (q.has_value()) {
        Tensor query_tok = add(embed_query(t, *q), t.pos_query);
        out.tokens = concat_rows({user_tok, query_tok});
        out.tags = {Segment::SD_USER, Segment::SD_QUERY};
    } else {
        out.tokens = user_tok;
        out.tags = {Segment::SD_USER};
    }
    return out;
}

struct TokenSequence {
    Tensor tokens;  // N x d
    std::vector<Segment> segments;
    Mode mode = Mode::retrieval;
    int n() const { return static_cast<int>(segments.size()); }
    int sd_len() const {
        int c = 0;
        for (Segment s : segments) {
            c += (s == Segment::SD_USER || s == Segment::SD_QUERY) ? 1 : 0;
        }
        return c;
    }
    int cis_len() const {
        int c = 0;
        for (Segment s : segments) c += (s == Segment::CIS) ? 1 : 0;
        return c;
    }
};

// Packs IH ++ PA ++ SD (++ CIS in ranking mode). CIS tokens use the candidate
// projection and carry no positional embedding. The SD segment is skipped
// only in the SD-ablated setting (no user features given).
inline TokenSequence pack_sequence(const EmbeddingTables& t, const std::vector<ItemFeatures>& ih,
                                   const std::vector<AnchorGroup>& pa,
                                   const std::optional<UserFeatures>& user,
                                   const std::optional<QueryFeatures>& query,
                                   const std::optional<std::vector<ItemFeatures>>& candidates) {
    TokenSequence seq;
    std::vector<Tensor> parts;
    TokenSpan ih_span = build_interaction_history(t, ih);
    if (ih_span.n() > 0) parts.push_back(ih_span.tokens);
    seq.segments.insert(seq.segments.end(), ih_span.tags.begin(), ih_span.tags.end());
    TokenSpan pa_span = build_preference_anchors(t, pa);
    if (pa_span.n() > 0) parts.push_back(pa_span.tokens);
    seq.segments.insert(seq.segments.end(), pa_span.tags.begin(), pa_span.tags.end());
    if (user.has_value()) {
        TokenSpan sd_span = build_situational(t, *user, query);
        parts.push_back(sd_span.tokens);
        seq.segments.insert(seq.segments.end(), sd_span.tags.begin(), sd_span.tags.end());
    } else if (query.has_value()) {
        throw std::invalid_argument("pack_sequence: query token requires the user token");
    }
    if (candidates.has_value()) {
        if (candidates->empty()) {
            throw std::invalid_argument("pack_sequence: ranking mode with empty candidate list");
        }
        parts.push_back(embed_items(t, *candidates, ItemProjection::candidate));
        seq.segments.insert(seq.segments.end(), candidates->size(), Segment::CIS);
        seq.mode = Mode::ranking;
    } else {
        seq.mode = Mode::retrieval;
    }
    if (parts.empty()) throw std::invalid_argument("pack_sequence: no tokens at all");
    seq.tokens = concat_rows(parts);
    return seq;
}

// Random partition of the candidate pool into groups of size C (the last
// group may be smaller). Every pool item appears exactly once.
template <class T>
inline std::vector<std::vector<T>> group_candidates(const std::vector<T>& pool, int c, Rng& rng) {
    if (c < 1) throw std::invalid_argument("group_candidates: C must be >= 1");
    if (pool.empty()) throw std::invalid_argument("group_candidates: empty pool");
    std::vector<int> idx(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) idx[i] = static_cast<int>(i);
    rng.shuffle(idx);
    std::vector<std::vector<T>> groups;
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(c)) {
        std::vector<T> g;
        for (std::size_t i = start; i < idx.size() && i < start + static_cast<std::size_t>(c); ++i) {
            g.push_back(pool[static_cast<std::size_t>(idx[i])]);
        }
        groups.push_back(std::move(g));
    }
    return groups;
}

}  // namespace onepiece
