#pragma once
// Synthetic e-commerce funnel world. Users, items, and queries live in a
// shared latent space; sessions expose the top-affinity items and sample the
// click -> add-to-cart -> order funnel with a competitive term (how an item
// compares with the other exposed items), so relative in-group judgments
// carry real signal. Also builds the retrieval/ranking training pools from
// session records and reads/writes the line-delimited dataset files.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "onepiece/config.hpp"
#include "onepiece/objectives.hpp"
#include "onepiece/rng.hpp"

namespace onepiece {

struct WorldConfig {
    int users = 400, items = 2000, queries = 160, categories = 24, shops = 64;
    int latent_dim = 16;
    int days = 10, sessions_per_user_day = 5;
    int exposure = 8, pool = 32;
    double rate_click = 0.65, rate_atc = 0.45, rate_order = 0.55;
    double click_slope = 7.0, stage_bonus = 1.2, mix_user = 0.5;
    double expo_noise = 0.45, drift = 0.03, query_text_noise = 0.25;
    double click_threshold = 0.0, compete = 2.0;
    double session_pool_frac = 1.0;  // fraction of the catalog in play per session
    double user_cat_mix = 0.35;      // weight of the user's base taste vs the per-category one
    double dom_penalty = 0.0;        // click penalty when a better same-category item is co-exposed
    int expo_cat_cap = 0;            // max exposed items per category (0 = unlimited)
    bool expo_pairs = false;         // expose the top-2 items of each leading category
    int price_buckets = 8, pop_buckets = 8, age_buckets = 8, locations = 16;
    int anchor_len = 30;
    std::uint64_t seed = 42;

    static WorldConfig from_config(const Config& c, std::uint64_t seed_override) {
        WorldConfig w;
        w.users = static_cast<int>(c.get_int("world.users"));
        w.items = static_cast<int>(c.get_int("world.items"));
        w.queries = static_cast<int>(c.get_int("world.queries"));
        w.categories = static_cast<int>(c.get_int("world.categories"));
        w.shops = static_cast<int>(c.get_int("world.shops"));
        w.latent_dim = static_cast<int>(c.get_int("world.latent_dim"));
        w.days = static_cast<int>(c.get_int("world.days"));
        w.sessions_per_user_day = static_cast<int>(c.get_int("world.sessions_per_user_day"));
        w.exposure = static_cast<int>(c.get_int("world.exposure"));
        w.pool = static_cast<int>(c.get_int("world.pool"));
        w.rate_click = c.get_double("world.rate_click");
        w.rate_atc = c.get_double("world.rate_atc");
        w.rate_order = c.get_double("world.rate_order");
        w.click_slope = c.get_double("world.click_slope");
        w.stage_bonus = c.get_double("world.stage_bonus");
        w.mix_user = c.get_double("world.mix_user");
        w.expo_noise = c.get_double("world.expo_noise");
        w.drift = c.get_double("world.drift");
        w.query_text_noise = c.get_double("world.query_text_noise");
        w.click_threshold = c.get_double("world.click_threshold");
        w.compete = c.get_double("world.compete");
        w.session_pool_frac = c.get_double("world.session_pool_frac");
        w.user_cat_mix = c.get_double("world.user_cat_mix");
        w.dom_penalty = c.get_double("world.dom_penalty");
        w.expo_cat_cap = static_cast<int>(c.get_int("world.expo_cat_cap"));
        w.expo_pairs = c.get_flag("world.expo_pairs");
        w.price_buckets = static_cast<int>(c.get_int("world.price_buckets"));
        w.pop_buckets = static_cast<int>(c.get_int("world.pop_buckets"));
        w.age_buckets = static_cast<int>(c.get_int("world.age_buckets"));
        w.locations = static_cast<int>(c.get_int("world.locations"));
        w.anchor_len = static_cast<int>(c.get_int("world.anchor_len"));
        w.seed = seed_override;
        w.validate();
        return w;
    }

    void validate() const {
        if (users < 1 || items < 1 || queries < 1 || categories < 1 || shops < 1) {
            throw std::invalid_argument("WorldConfig: counts must be >= 1");
        }
        auto rate_ok = [](double r) { return r > 0.0 && r < 1.0; };
        if (!rate_ok(rate_click) || !rate_ok(rate_atc) || !rate_ok(rate_order)) {
            // degenerate rates of exactly 0/1 are only used by tests through
            // direct field writes; configs must stay in (0,1)
            throw std::invalid_argument("WorldConfig: funnel base rates must lie in (0,1)");
        }
        if (exposure < 1 || pool < 1 || days < 1 || sessions_per_user_day < 1) {
            throw std::invalid_argument("WorldConfig: session shape must be >= 1");
        }
        if (session_pool_frac <= 0.0 || session_pool_frac > 1.0) {
            throw std::invalid_argument("WorldConfig: session_pool_frac must lie in (0,1]");
        }
        if (exposure + pool > static_cast<int>(session_pool_frac * items)) {
            throw std::invalid_argument("WorldConfig: exposure + pool exceeds the session pool");
        }
    }
};

struct WorldItem {
    int id = 0, category = 0, shop = 0, price_bucket = 0, pop_bucket = 0;
    std::vector<double> vec;
    double pop_bias = 0.0;
    double clickability = 0.0;   // per-item propensity entering the click stage
    double orderability = 0.0;   // per-item propensity entering atc/order stages
};

struct WorldUser {
    int id = 0, age_bucket = 0, location = 0;
    std::vector<double> base_pref;
};

struct WorldQuery {
    int id = 0, category = 0, pop_bucket = 0;
    std::vector<double> intent;
    std::vector<double> text;
};

struct QueryAnchors {
    std::vector<int> exposed, clicked, purchased;
};

struct World {
    WorldConfig cfg;
    std::vector<std::vector<double>> centroids;
    std::vector<WorldItem> items;
    std::vector<WorldUser> users;
    std::vector<WorldQuery> queries;
    // Effective preference of user u for category c on day d: a blend of the
    // user's drifting base taste and a drifting per-category taste. What a
    // user wants depends on what they are shopping for, so reading it off
    // requires conditioning the history on the query.
    std::vector<std::vector<std::vector<std::vector<double>>>> user_cat_pref_by_day;
    std::vector<std::vector<int>> items_by_category;
    std::vector<QueryAnchors> anchors;

    const std::vector<double>& pref(int day, int user, int category) const {
        return user_cat_pref_by_day[static_cast<std::size_t>(day)][static_cast<std::size_t>(user)]
                                   [static_cast<std::size_t>(category)];
    }
};

namespace fg_detail {

inline std::vector<double> latent(int d, Rng& rng, double sigma) {
    std::vector<double> v(static_cast<std::size_t>(d));
    for (auto& x : v) x = rng.normal(0.0, sigma);
    return v;
}

inline double dot_vec(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline int value_bucket(double v, int buckets, double spread) {
    // maps roughly N(0, spread) values onto [0, buckets)
    int b = static_cast<int>((v / spread + 2.0) / 4.0 * buckets);
    if (b < 0) b = 0;
    if (b >= buckets) b = buckets - 1;
    return b;
}

// top-n indices by score, descending, ties broken by ascending index
inline std::vector<int> top_indices(const std::vector<double>& score, int n,
                                    const std::vector<char>* excluded = nullptr) {
    std::vector<int> idx;
    idx.reserve(score.size());
    for (std::size_t i = 0; i < score.size(); ++i) {
        if (excluded && (*excluded)[i]) continue;
        idx.push_back(static_cast<int>(i));
    }
    int k = n < static_cast<int>(idx.size()) ? n : static_cast<int>(idx.size());
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        double sa = score[static_cast<std::size_t>(a)], sb = score[static_cast<std::size_t>(b)];
        if (sa != sb) return sa > sb;
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

}  // namespace fg_detail

inline World generate_world(const WorldConfig& cfg) {
    World w;
    w.cfg = cfg;
    double ls = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));

    Rng crng(derive_seed(cfg.seed, 1));
    for (int c = 0; c < cfg.categories; ++c) {
        w.centroids.push_back(fg_detail::latent(cfg.latent_dim, crng, ls));
    }

    Rng irng(derive_seed(cfg.seed, 2));
    w.items_by_category.assign(static_cast<std::size_t>(cfg.categories), {});
    for (int i = 0; i < cfg.items; ++i) {
        WorldItem it;
        it.id = i;
        it.category = i % cfg.categories;  // balanced assignment
        it.shop = irng.int_below(cfg.shops);
        it.vec = w.centroids[static_cast<std::size_t>(it.category)];
        for (auto& x : it.vec) x += irng.normal(0.0, 0.6 * ls);
        it.pop_bias = irng.normal(0.0, 0.4);
        it.clickability = irng.normal(0.0, 1.0);
        it.orderability = irng.normal(0.0, 1.0);
        it.price_bucket = irng.int_below(cfg.price_buckets);
        it.pop_bucket = fg_detail::value_bucket(it.pop_bias, cfg.pop_buckets, 0.4);
        w.items_by_category[static_cast<std::size_t>(it.category)].push_back(i);
        w.items.push_back(std::move(it));
    }

    Rng urng(derive_seed(cfg.seed, 3));
    for (int u = 0; u < cfg.users; ++u) {
        WorldUser us;
        us.id = u;
        us.age_bucket = urng.int_below(cfg.age_buckets);
        us.location = urng.int_below(cfg.locations);
        us.base_pref = fg_detail::latent(cfg.latent_dim, urng, ls);
        w.users.push_back(std::move(us));
    }

    Rng drng(derive_seed(cfg.seed, 4));
    w.user_cat_pref_by_day.resize(static_cast<std::size_t>(cfg.days));
    std::vector<std::vector<std::vector<double>>> cat_taste(static_cast<std::size_t>(cfg.users));
    std::vector<std::vector<double>> base_taste(static_cast<std::size_t>(cfg.users));
    for (int u = 0; u < cfg.users; ++u) {
        base_taste[static_cast<std::size_t>(u)] = w.users[static_cast<std::size_t>(u)].base_pref;
        cat_taste[static_cast<std::size_t>(u)].resize(static_cast<std::size_t>(cfg.categories));
        for (int cc = 0; cc < cfg.categories; ++cc) {
            cat_taste[static_cast<std::size_t>(u)][static_cast<std::size_t>(cc)] =
                fg_detail::latent(cfg.latent_dim, drng, ls);
        }
    }
    for (int d = 0; d < cfg.days; ++d) {
        if (d > 0) {
            for (int u = 0; u < cfg.users; ++u) {
                for (auto& x : base_taste[static_cast<std::size_t>(u)]) {
                    x += drng.normal(0.0, cfg.drift * ls);
                }
                for (auto& cv : cat_taste[static_cast<std::size_t>(u)]) {
                    for (auto& x : cv) x += drng.normal(0.0, cfg.drift * ls);
                }
            }
        }
        auto& day_prefs = w.user_cat_pref_by_day[static_cast<std::size_t>(d)];
        day_prefs.resize(static_cast<std::size_t>(cfg.users));
        for (int u = 0; u < cfg.users; ++u) {
            day_prefs[static_cast<std::size_t>(u)].resize(static_cast<std::size_t>(cfg.categories));
            for (int cc = 0; cc < cfg.categories; ++cc) {
                std::vector<double> v(static_cast<std::size_t>(cfg.latent_dim));
                for (int x = 0; x < cfg.latent_dim; ++x) {
                    v[static_cast<std::size_t>(x)] =
                        cfg.user_cat_mix * base_taste[static_cast<std::size_t>(u)][static_cast<std::size_t>(x)] +
                        (1.0 - cfg.user_cat_mix) *
                            cat_taste[static_cast<std::size_t>(u)][static_cast<std::size_t>(cc)][static_cast<std::size_t>(x)];
                }
                day_prefs[static_cast<std::size_t>(u)][static_cast<std::size_t>(cc)] = std::move(v);
            }
        }
    }

    Rng qrng(derive_seed(cfg.seed, 5));
    for (int q = 0; q < cfg.queries; ++q) {
        WorldQuery wq;
        wq.id = q;
        wq.category = q % cfg.categories;
        wq.pop_bucket = qrng.int_below(cfg.pop_buckets);
        wq.intent = w.centroids[static_cast<std::size_t>(wq.category)];
        for (auto& x : wq.intent) x += qrng.normal(0.0, cfg.query_text_noise * ls);
        wq.text = wq.intent;
        for (auto& x : wq.text) x += qrng.normal(0.0, cfg.query_text_noise * ls);
        w.queries.push_back(std::move(wq));
    }

    // Query anchors: expected top items under the generator's own scoring,
    // standing in for production log aggregates.
    for (const auto& q : w.queries) {
        std::vector<double> se(static_cast<std::size_t>(cfg.items));
        std::vector<double> sc(se.size()), sp(se.size());
        for (int i = 0; i < cfg.items; ++i) {
            const auto& it = w.items[static_cast<std::size_t>(i)];
            double base = fg_detail::dot_vec(q.intent, it.vec) + it.pop_bias;
            se[static_cast<std::size_t>(i)] = base;
            sc[static_cast<std::size_t>(i)] = base + cfg.stage_bonus * it.clickability;
            sp[static_cast<std::size_t>(i)] = sc[static_cast<std::size_t>(i)] + cfg.stage_bonus * it.orderability;
        }
        QueryAnchors a;
        a.exposed = fg_detail::top_indices(se, cfg.anchor_len);
        a.clicked = fg_detail::top_indices(sc, cfg.anchor_len);
        a.purchased = fg_detail::top_indices(sp, cfg.anchor_len);
        w.anchors.push_back(std::move(a));
    }
    return w;
}

// One (user, query, day) request with exposed items, monotone funnel labels,
// and the session's top-affinity unexposed candidate pool.
struct ExposedItem {
    int item = 0;
    int imp = 1, click = 0, atc = 0, order = 0;
};

struct SessionRecord {
    std::string sid;
    int user = 0, query = 0, day = 0;
    std::vector<int> ih;  // clicked-history snapshot at session time
    std::vector<ExposedItem> exposed;
    std::vector<int> pool;

    bool has_click() const {
        for (const auto& e : exposed) {
            if (e.click) return true;
        }
        return false;
    }
    std::vector<int> clicked_items() const {
        std::vector<int> c;
        for (const auto& e : exposed) {
            if (e.click) c.push_back(e.item);
        }
        return c;
    }
};

// The generator's own funnel probabilities for an exposed item; these are
// the closed forms the Monte-Carlo check integrates against.
struct FunnelProbs {
    double p_click = 0, p_atc = 0, p_order = 0;  // each conditional on the previous stage
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// `dominated` is the affinity lead of the best co-exposed same-category
// rival over this item (0 when none): substitutes cannibalize clicks.
inline FunnelProbs funnel_probabilities(const WorldConfig& cfg, const WorldItem& item,
                                        double affinity, double exposed_mean_affinity,
                                        double dominated = 0.0) {
    double rel = affinity - cfg.click_threshold +
                 cfg.compete * (affinity - exposed_mean_affinity);
    double dom = cfg.dom_penalty * (dominated > 0.0 ? dominated : 0.0);
    FunnelProbs p;
    p.p_click = cfg.rate_click *
                sigmoid(cfg.click_slope * rel + cfg.stage_bonus * item.clickability - dom);
    p.p_atc = cfg.rate_atc * sigmoid(cfg.click_slope * rel + cfg.stage_bonus * item.orderability);
    p.p_order = cfg.rate_order * sigmoid(cfg.click_slope * rel + cfg.stage_bonus * item.orderability);
    return p;
}

// Affinity lead of the strongest same-category rival within the exposed set.
inline std::vector<double> dominated_margins(const World& w, const std::vector<int>& shown,
                                             const std::vector<double>& affinity) {
    std::vector<double> dom(shown.size(), 0.0);
    for (std::size_t i = 0; i < shown.size(); ++i) {
        int ci = w.items[static_cast<std::size_t>(shown[i])].category;
        double best = 0.0;
        for (std::size_t j = 0; j < shown.size(); ++j) {
            if (i == j) continue;
            if (w.items[static_cast<std::size_t>(shown[j])].category != ci) continue;
            double lead = affinity[static_cast<std::size_t>(shown[j])] -
                          affinity[static_cast<std::size_t>(shown[i])];
            if (lead > best) best = lead;
        }
        dom[i] = best;
    }
    return dom;
}

inline std::vector<double> session_affinities(const World& w, int user, int query, int day) {
    const auto& pref = w.pref(day, user, w.queries[static_cast<std::size_t>(query)].category);
    const auto& intent = w.queries[static_cast<std::size_t>(query)].intent;
    std::vector<double> ctx(pref.size());
    for (std::size_t i = 0; i < ctx.size(); ++i) {
        ctx[i] = w.cfg.mix_user * pref[i] + (1.0 - w.cfg.mix_user) * intent[i];
    }
    std::vector<double> a(static_cast<std::size_t>(w.cfg.items));
    for (int i = 0; i < w.cfg.items; ++i) {
        const auto& it = w.items[static_cast<std::size_t>(i)];
        a[static_cast<std::size_t>(i)] = fg_detail::dot_vec(ctx, it.vec) + it.pop_bias;
    }
    return a;
}

inline SessionRecord simulate_session(const World& w, int user, int query, int day,
                                      const std::vector<int>& history, Rng& rng) {
    const WorldConfig& cfg = w.cfg;
    SessionRecord rec;
    rec.user = user;
    rec.query = query;
    rec.day = day;
    rec.ih = history;

    std::vector<double> a = session_affinities(w, user, query, day);
    // candidate subset in play this session; exposure competes within it, so
    // the exposed cohort's strength varies with subset luck
    std::vector<char> out_of_play;
    if (cfg.session_pool_frac < 1.0) {
        int keep = static_cast<int>(cfg.session_pool_frac * cfg.items);
        if (keep < cfg.exposure + cfg.pool) keep = cfg.exposure + cfg.pool;
        std::vector<int> subset = rng.sample_without_replacement(cfg.items, keep);
        out_of_play.assign(static_cast<std::size_t>(cfg.items), 1);
        for (int i : subset) out_of_play[static_cast<std::size_t>(i)] = 0;
    }
    std::vector<double> noisy(a);
    for (std::size_t i = 0; i < noisy.size(); ++i) {
        noisy[i] += cfg.expo_noise * rng.gumbel();
    }
    std::vector<int> shown;
    if (cfg.expo_pairs) {
        // paired exposure: rank categories by their best in-play score and
        // expose the top two items of each until the slate is full
        std::vector<int> by_score = fg_detail::top_indices(
            noisy, cfg.items, out_of_play.empty() ? nullptr : &out_of_play);
        std::vector<int> cat_rank(static_cast<std::size_t>(cfg.categories), -1);
        std::vector<std::vector<int>> cat_items(static_cast<std::size_t>(cfg.categories));
        int cats_seen = 0;
        for (int i : by_score) {
            int cat = w.items[static_cast<std::size_t>(i)].category;
            if (cat_rank[static_cast<std::size_t>(cat)] < 0) cat_rank[static_cast<std::size_t>(cat)] = cats_seen++;
            if (static_cast<int>(cat_items[static_cast<std::size_t>(cat)].size()) < 2) {
                cat_items[static_cast<std::size_t>(cat)].push_back(i);
            }
        }
        std::vector<int> cats(static_cast<std::size_t>(cfg.categories));
        for (int cc = 0; cc < cfg.categories; ++cc) cats[static_cast<std::size_t>(cc)] = cc;
        std::sort(cats.begin(), cats.end(), [&](int x, int yy) {
            int rx = cat_rank[static_cast<std::size_t>(x)], ry = cat_rank[static_cast<std::size_t>(yy)];
            if (rx < 0) rx = 1 << 20;
            if (ry < 0) ry = 1 << 20;
            return rx < ry;
        });
        for (int cc : cats) {
            for (int i : cat_items[static_cast<std::size_t>(cc)]) {
                if (static_cast<int>(shown.size()) >= cfg.exposure) break;
                shown.push_back(i);
            }
            if (static_cast<int>(shown.size()) >= cfg.exposure) break;
        }
    } else if (cfg.expo_cat_cap > 0) {
        // diversity rule: walk the score order, cap exposures per category
        std::vector<int> by_score = fg_detail::top_indices(
            noisy, cfg.items, out_of_play.empty() ? nullptr : &out_of_play);
        std::vector<int> cat_count(static_cast<std::size_t>(cfg.categories), 0);
        for (int i : by_score) {
            int cat = w.items[static_cast<std::size_t>(i)].category;
            if (cat_count[static_cast<std::size_t>(cat)] >= cfg.expo_cat_cap) continue;
            cat_count[static_cast<std::size_t>(cat)] += 1;
            shown.push_back(i);
            if (static_cast<int>(shown.size()) >= cfg.exposure) break;
        }
    } else {
        shown = fg_detail::top_indices(noisy, cfg.exposure,
                                       out_of_play.empty() ? nullptr : &out_of_play);
    }

    double mean_a = 0;
    for (int i : shown) mean_a += a[static_cast<std::size_t>(i)];
    mean_a /= static_cast<double>(shown.size());
    std::vector<double> dom = dominated_margins(w, shown, a);

    for (std::size_t si = 0; si < shown.size(); ++si) {
        int i = shown[si];
        ExposedItem e;
        e.item = i;
        FunnelProbs p = funnel_probabilities(cfg, w.items[static_cast<std::size_t>(i)],
                                             a[static_cast<std::size_t>(i)], mean_a, dom[si]);
        e.click = rng.bernoulli(p.p_click) ? 1 : 0;
        e.atc = (e.click && rng.bernoulli(p.p_atc)) ? 1 : 0;
        e.order = (e.atc && rng.bernoulli(p.p_order)) ? 1 : 0;
        rec.exposed.push_back(e);
    }

    std::vector<char> excluded = out_of_play;
    if (excluded.empty()) excluded.assign(static_cast<std::size_t>(cfg.items), 0);
    for (int i : shown) excluded[static_cast<std::size_t>(i)] = 1;
    rec.pool = fg_detail::top_indices(a, cfg.pool, &excluded);
    return rec;
}

// Simulates every session of every day, threading user click histories
// through chronologically. Sessions are ordered (user, slot) within a day.
inline std::vector<std::vector<SessionRecord>> simulate_days(const World& w) {
    const WorldConfig& cfg = w.cfg;
    std::vector<std::vector<int>> history(static_cast<std::size_t>(cfg.users));
    std::vector<std::vector<SessionRecord>> days(static_cast<std::size_t>(cfg.days));
    for (int d = 0; d < cfg.days; ++d) {
        int sidx = 0;
        for (int u = 0; u < cfg.users; ++u) {
            for (int s = 0; s < cfg.sessions_per_user_day; ++s) {
                Rng rng(derive_seed(cfg.seed, 0x5e55, static_cast<std::uint64_t>(d),
                                    static_cast<std::uint64_t>(u) * 1000 + static_cast<std::uint64_t>(s)));
                int query = rng.int_below(cfg.queries);
                SessionRecord rec = simulate_session(w, u, query, d, history[static_cast<std::size_t>(u)], rng);
                char buf[32];
                std::snprintf(buf, sizeof(buf), "d%02d-s%06d", d, sidx++);
                rec.sid = buf;
                for (const auto& e : rec.exposed) {
                    if (e.click) history[static_cast<std::size_t>(u)].push_back(e.item);
                }
                if (static_cast<int>(history[static_cast<std::size_t>(u)].size()) > 64) {
                    history[static_cast<std::size_t>(u)].erase(
                        history[static_cast<std::size_t>(u)].begin(),
                        history[static_cast<std::size_t>(u)].end() - 64);
                }
                days[static_cast<std::size_t>(d)].push_back(std::move(rec));
            }
        }
    }
    return days;
}

// ---------------------------------------------------------------------------
// Training-sample constructors
// ---------------------------------------------------------------------------

struct RetrievalSampleConfig {
    int n_exposed_cap = 8;   // exposed-but-unclicked kept (n)
    int k_unexposed = 8;     // sampled from the session's ranking pool (k)
    int l_same_category = 4; // hard negatives sharing a clicked category (l)
};

// Pool with per-task labels: clicked items are positive for both tasks,
// exposed-unclicked are impression-positive / click-negative, sampled
// unexposed and same-category items are negative for both.
struct RetrievalPool {
    std::vector<int> items;
    std::map<Task, std::vector<double>> labels;
};

inline RetrievalPool build_retrieval_samples(const SessionRecord& s,
                                             const std::vector<std::vector<int>>& items_by_category,
                                             const std::vector<int>& item_category,
                                             const RetrievalSampleConfig& cfg, Rng& rng) {
    if (!s.has_click()) {
        throw std::invalid_argument("build_retrieval_samples: session " + s.sid + " has no clicks");
    }
    RetrievalPool pool;
    std::vector<char> taken;
    taken.assign(item_category.size(), 0);
    auto push = [&](int item, double yi, double yc) {
        if (taken[static_cast<std::size_t>(item)]) return false;
        taken[static_cast<std::size_t>(item)] = 1;
        pool.items.push_back(item);
        pool.labels[Task::impression].push_back(yi);
        pool.labels[Task::click].push_back(yc);
        return true;
    };
    std::vector<int> clicked;
    std::vector<int> unclicked;
    for (const auto& e : s.exposed) {
        if (e.click) clicked.push_back(e.item);
        else unclicked.push_back(e.item);
    }
    for (int i : clicked) push(i, 1.0, 1.0);
    {
        auto pick = rng.sample_without_replacement(static_cast<int>(unclicked.size()),
                                                   cfg.n_exposed_cap);
        for (int idx : pick) push(unclicked[static_cast<std::size_t>(idx)], 1.0, 0.0);
    }
    {
        auto pick = rng.sample_without_replacement(static_cast<int>(s.pool.size()), cfg.k_unexposed);
        for (int idx : pick) push(s.pool[static_cast<std::size_t>(idx)], 0.0, 0.0);
    }
    int added = 0;
    int guard = 0;
    while (added < cfg.l_same_category && guard < 20 * cfg.l_same_category) {
        ++guard;
        int anchor = clicked[rng.below(clicked.size())];
        const auto& cat_items = items_by_category[static_cast<std::size_t>(
            item_category[static_cast<std::size_t>(anchor)])];
        int cand = cat_items[rng.below(cat_items.size())];
        if (push(cand, 0.0, 0.0)) ++added;
    }
    return pool;
}

struct RankingSampleConfig {
    int n_unexposed = 4;  // augmented hard negatives from the session pool
    int group_size = 4;   // C
};

struct RankingGroup {
    std::vector<int> items;
    std::map<Task, std::vector<double>> labels;  // impression/click/atc/order per candidate
};

inline std::vector<RankingGroup> build_ranking_samples(const SessionRecord& s,
                                                       const RankingSampleConfig& cfg, Rng& rng) {
    if (!s.has_click()) {
        throw std::invalid_argument("build_ranking_samples: session " + s.sid + " has no clicks");
    }
    struct PoolEntry {
        int item;
        std::array<double, 4> y;
    };
    std::vector<PoolEntry> pool;
    for (const auto& e : s.exposed) {
        pool.push_back({e.item,
                        {static_cast<double>(e.imp), static_cast<double>(e.click),
                         static_cast<double>(e.atc), static_cast<double>(e.order)}});
    }
    auto pick = rng.sample_without_replacement(static_cast<int>(s.pool.size()), cfg.n_unexposed);
    for (int idx : pick) pool.push_back({s.pool[static_cast<std::size_t>(idx)], {0, 0, 0, 0}});

    auto groups = group_candidates(pool, cfg.group_size, rng);
    std::vector<RankingGroup> out;
    for (const auto& g : groups) {
        RankingGroup rg;
        for (const auto& e : g) {
            rg.items.push_back(e.item);
            rg.labels[Task::impression].push_back(e.y[0]);
            rg.labels[Task::click].push_back(e.y[1]);
            rg.labels[Task::add_to_cart].push_back(e.y[2]);
            rg.labels[Task::order].push_back(e.y[3]);
        }
        out.push_back(std::move(rg));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------
//
// A dataset directory holds: world.json (config and seed), fields.json (the
// self-describing header), catalog/users/queries/anchors .jsonl, and one
// sessions_day_XX.jsonl per day. The trainer consumes only these files; the
// latent vectors never leave the generator.

struct CatalogItem {
    int id = 0, category = 0, shop = 0, price_bucket = 0, pop_bucket = 0;
};

struct CatalogUser {
    int id = 0, age_bucket = 0, location = 0;
};

struct CatalogQuery {
    int id = 0, pop_bucket = 0;
    std::vector<double> text;
};

struct Dataset {
    WorldConfig cfg;
    std::vector<CatalogItem> items;
    std::vector<CatalogUser> users;
    std::vector<CatalogQuery> queries;
    std::vector<QueryAnchors> anchors;
    std::vector<std::vector<int>> items_by_category;
    std::vector<std::vector<SessionRecord>> days;
    std::vector<int> item_category;  // convenience view
};

inline Dataset dataset_from_world(const World& w,
                                  std::vector<std::vector<SessionRecord>> days) {
    Dataset ds;
    ds.cfg = w.cfg;
    for (const auto& it : w.items) {
        ds.items.push_back({it.id, it.category, it.shop, it.price_bucket, it.pop_bucket});
        ds.item_category.push_back(it.category);
    }
    for (const auto& u : w.users) ds.users.push_back({u.id, u.age_bucket, u.location});
    for (const auto& q : w.queries) ds.queries.push_back({q.id, q.pop_bucket, q.text});
    ds.anchors = w.anchors;
    ds.items_by_category = w.items_by_category;
    ds.days = std::move(days);
    return ds;
}

inline Dataset generate_dataset(const WorldConfig& cfg) {
    World w = generate_world(cfg);
    return dataset_from_world(w, simulate_days(w));
}

namespace fg_detail {

using ojson = nlohmann::ordered_json;

inline void write_lines(const std::filesystem::path& p, const std::vector<ojson>& lines) {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    for (const auto& j : lines) out << j.dump() << "\n";
}

inline std::vector<nlohmann::json> read_lines(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("missing dataset file: " + p.string());
    std::vector<nlohmann::json> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    }
    return out;
}

}  // namespace fg_detail

inline void write_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    using fg_detail::ojson;
    fs::create_directories(dir);
    const WorldConfig& c = ds.cfg;
    ojson meta{{"format", "onepiece-dataset-v1"},
               {"seed", c.seed},
               {"users", c.users},
               {"items", c.items},
               {"queries", c.queries},
               {"categories", c.categories},
               {"shops", c.shops},
               {"latent_dim", c.latent_dim},
               {"days", c.days},
               {"sessions_per_user_day", c.sessions_per_user_day},
               {"exposure", c.exposure},
               {"pool", c.pool},
               {"rate_click", c.rate_click},
               {"rate_atc", c.rate_atc},
               {"rate_order", c.rate_order},
               {"click_slope", c.click_slope},
               {"stage_bonus", c.stage_bonus},
               {"mix_user", c.mix_user},
               {"expo_noise", c.expo_noise},
               {"drift", c.drift},
               {"query_text_noise", c.query_text_noise},
               {"click_threshold", c.click_threshold},
               {"compete", c.compete},
               {"session_pool_frac", c.session_pool_frac},
               {"user_cat_mix", c.user_cat_mix},
               {"dom_penalty", c.dom_penalty},
               {"expo_cat_cap", c.expo_cat_cap},
               {"expo_pairs", c.expo_pairs},
               {"price_buckets", c.price_buckets},
               {"pop_buckets", c.pop_buckets},
               {"age_buckets", c.age_buckets},
               {"locations", c.locations},
               {"anchor_len", c.anchor_len}};
    {
        std::ofstream out(fs::path(dir) / "world.json");
        out << meta.dump(2) << "\n";
    }
    {
        ojson fields{
            {"format", "onepiece-dataset-v1"},
            {"catalog.jsonl", "one item per line: id, category, shop, price_bucket, pop_bucket"},
            {"users.jsonl", "one user per line: id, age_bucket, location"},
            {"queries.jsonl", "one query per line: id, pop_bucket, text (dense vector)"},
            {"anchors.jsonl",
             "one query per line: query, top_exposed, top_clicked, top_purchased (item id lists)"},
            {"sessions_day_XX.jsonl",
             "one session per line: sid, user, query, day, ih (clicked-history snapshot), "
             "exposed (item, imp, click, atc, order), pool (unexposed top-affinity ids)"}};
        std::ofstream out(fs::path(dir) / "fields.json");
        out << fields.dump(2) << "\n";
    }
    std::vector<ojson> lines;
    for (const auto& it : ds.items) {
        lines.push_back(ojson{{"id", it.id},
                              {"category", it.category},
                              {"shop", it.shop},
                              {"price_bucket", it.price_bucket},
                              {"pop_bucket", it.pop_bucket}});
    }
    fg_detail::write_lines(fs::path(dir) / "catalog.jsonl", lines);
    lines.clear();
    for (const auto& u : ds.users) {
        lines.push_back(ojson{{"id", u.id}, {"age_bucket", u.age_bucket}, {"location", u.location}});
    }
    fg_detail::write_lines(fs::path(dir) / "users.jsonl", lines);
    lines.clear();
    for (const auto& q : ds.queries) {
        lines.push_back(ojson{{"id", q.id}, {"pop_bucket", q.pop_bucket}, {"text", q.text}});
    }
    fg_detail::write_lines(fs::path(dir) / "queries.jsonl", lines);
    lines.clear();
    for (std::size_t q = 0; q < ds.anchors.size(); ++q) {
        lines.push_back(ojson{{"query", q},
                              {"top_exposed", ds.anchors[q].exposed},
                              {"top_clicked", ds.anchors[q].clicked},
                              {"top_purchased", ds.anchors[q].purchased}});
    }
    fg_detail::write_lines(fs::path(dir) / "anchors.jsonl", lines);
    for (int d = 0; d < static_cast<int>(ds.days.size()); ++d) {
        lines.clear();
        for (const auto& s : ds.days[static_cast<std::size_t>(d)]) {
            ojson exposed = ojson::array();
            for (const auto& e : s.exposed) {
                exposed.push_back(ojson{{"item", e.item},
                                        {"imp", e.imp},
                                        {"click", e.click},
                                        {"atc", e.atc},
                                        {"order", e.order}});
            }
            lines.push_back(ojson{{"sid", s.sid},
                                  {"user", s.user},
                                  {"query", s.query},
                                  {"day", s.day},
                                  {"ih", s.ih},
                                  {"exposed", exposed},
                                  {"pool", s.pool}});
        }
        char buf[32];
        std::snprintf(buf, sizeof(buf), "sessions_day_%02d.jsonl", d);
        fg_detail::write_lines(fs::path(dir) / buf, lines);
    }
}

inline Dataset read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    Dataset ds;
    {
        std::ifstream in(fs::path(dir) / "world.json");
        if (!in) throw std::runtime_error("missing dataset: " + dir + "/world.json");
        nlohmann::json meta = nlohmann::json::parse(in);
        WorldConfig& c = ds.cfg;
        c.seed = meta.at("seed").get<std::uint64_t>();
        c.users = meta.at("users");
        c.items = meta.at("items");
        c.queries = meta.at("queries");
        c.categories = meta.at("categories");
        c.shops = meta.at("shops");
        c.latent_dim = meta.at("latent_dim");
        c.days = meta.at("days");
        c.sessions_per_user_day = meta.at("sessions_per_user_day");
        c.exposure = meta.at("exposure");
        c.pool = meta.at("pool");
        c.rate_click = meta.at("rate_click");
        c.rate_atc = meta.at("rate_atc");
        c.rate_order = meta.at("rate_order");
        c.click_slope = meta.at("click_slope");
        c.stage_bonus = meta.at("stage_bonus");
        c.mix_user = meta.at("mix_user");
        c.expo_noise = meta.at("expo_noise");
        c.drift = meta.at("drift");
        c.query_text_noise = meta.at("query_text_noise");
        c.click_threshold = meta.at("click_threshold");
        c.compete = meta.at("compete");
        c.session_pool_frac = meta.at("session_pool_frac");
        c.user_cat_mix = meta.at("user_cat_mix");
        c.dom_penalty = meta.at("dom_penalty");
        c.expo_cat_cap = meta.at("expo_cat_cap");
        c.expo_pairs = meta.at("expo_pairs").get<bool>();
        c.price_buckets = meta.at("price_buckets");
        c.pop_buckets = meta.at("pop_buckets");
        c.age_buckets = meta.at("age_buckets");
        c.locations = meta.at("locations");
        c.anchor_len = meta.at("anchor_len");
    }
    ds.items_by_category.assign(static_cast<std::size_t>(ds.cfg.categories), {});
    for (const auto& j : fg_detail::read_lines(fs::path(dir) / "catalog.jsonl")) {
        CatalogItem it{j.at("id"), j.at("category"), j.at("shop"), j.at("price_bucket"),
                       j.at("pop_bucket")};
        ds.items_by_category[static_cast<std::size_t>(it.category)].push_back(it.id);
        ds.item_category.push_back(it.category);
        ds.items.push_back(it);
    }
    for (const auto& j : fg_detail::read_lines(fs::path(dir) / "users.jsonl")) {
        ds.users.push_back({j.at("id"), j.at("age_bucket"), j.at("location")});
    }
    for (const auto& j : fg_detail::read_lines(fs::path(dir) / "queries.jsonl")) {
        CatalogQuery q;
        q.id = j.at("id");
        q.pop_bucket = j.at("pop_bucket");
        q.text = j.at("text").get<std::vector<double>>();
        ds.queries.push_back(std::move(q));
    }
    for (const auto& j : fg_detail::read_lines(fs::path(dir) / "anchors.jsonl")) {
        QueryAnchors a;
        a.exposed = j.at("top_exposed").get<std::vector<int>>();
        a.clicked = j.at("top_clicked").get<std::vector<int>>();
        a.purchased = j.at("top_purchased").get<std::vector<int>>();
        ds.anchors.push_back(std::move(a));
    }
    for (int d = 0; d < ds.cfg.days; ++d) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "sessions_day_%02d.jsonl", d);
        std::vector<SessionRecord> day;
        for (const auto& j : fg_detail::read_lines(fs::path(dir) / buf)) {
            SessionRecord s;
            s.sid = j.at("sid");
            s.user = j.at("user");
            s.query = j.at("query");
            s.day = j.at("day");
            s.ih = j.at("ih").get<std::vector<int>>();
            for (const auto& e : j.at("exposed")) {
                ExposedItem ei;
                ei.item = e.at("item");
                ei.imp = e.at("imp");
                ei.click = e.at("click");
                ei.atc = e.at("atc");
                ei.order = e.at("order");
                s.exposed.push_back(ei);
            }
            s.pool = j.at("pool").get<std::vector<int>>();
            day.push_back(std::move(s));
        }
        ds.days.push_back(std::move(day));
    }
    return ds;
}

}  // namespace onepiece
