#pragma once
// Retrieval index and evaluation: exact inner-product top-k, Recall@K,
// AUC/GAUC, Eq.-16-style score fusion, and the coverage / exclusive-
// contribution set analyses.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "onepiece/reasoning.hpp"

namespace onepiece {

// Exact inner-product index; one row per id, similarity = inner product.
struct ItemIndex {
    std::vector<int> ids;
    std::vector<double> emb;  // row-major, size() x dim
    int dim = 0;

    int size() const { return static_cast<int>(ids.size()); }

    void validate() const {
        if (emb.size() != static_cast<std::size_t>(size()) * dim) {
            throw std::invalid_argument("ItemIndex: embedding shape mismatch");
        }
        for (double v : emb) {
            if (!std::isfinite(v)) throw std::invalid_argument("ItemIndex: non-finite entry");
        }
    }
};

// Ids sorted by descending inner product; ties broken by ascending id.
inline std::vector<int> top_k(const std::vector<double>& query, const ItemIndex& index, int k) {
    if (k > index.size()) {
        throw std::invalid_argument("top_k: K=" + std::to_string(k) + " exceeds index of " +
                                    std::to_string(index.size()));
    }
    if (static_cast<int>(query.size()) != index.dim) {
        throw std::invalid_argument("top_k: query dimension mismatch");
    }
    std::vector<std::pair<double, int>> scored(static_cast<std::size_t>(index.size()));
    for (int i = 0; i < index.size(); ++i) {
        double s = 0;
        const double* row = index.emb.data() + static_cast<std::size_t>(i) * index.dim;
        for (int c = 0; c < index.dim; ++c) s += row[c] * query[static_cast<std::size_t>(c)];
        scored[static_cast<std::size_t>(i)] = {s, index.ids[static_cast<std::size_t>(i)]};
    }
    std::partial_sort(scored.begin(), scored.begin() + k, scored.end(),
                      [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                      });
    std::vector<int> out(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) out[static_cast<std::size_t>(i)] = scored[static_cast<std::size_t>(i)].second;
    return out;
}

inline double recall_at_k(const std::vector<int>& retrieved, const std::set<int>& relevant) {
    if (relevant.empty()) throw std::invalid_argument("recall_at_k: empty relevant set");
    int hit = 0;
    for (int id : retrieved) hit += relevant.count(id) ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(relevant.size());
}

struct AucResult {
    double value = 0.0;
    bool valid = false;  // needs at least one positive and one negative
};

// Probability that a random positive outscores a random negative, ties
// counted as one half; computed by the rank statistic.
inline AucResult auc(const std::vector<double>& scores, const std::vector<double>& labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("auc: length mismatch");
    std::size_t n = scores.size();
    std::size_t pos = 0;
    for (double y : labels) {
        if (y != 0.0 && y != 1.0) throw std::invalid_argument("auc: labels must be 0/1");
        pos += y == 1.0 ? 1 : 0;
    }
    if (pos == 0 || pos == n) return {};
    std::vector<int> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
    });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[static_cast<std::size_t>(order[j])] == scores[static_cast<std::size_t>(order[i])]) ++j;
        double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
        for (std::size_t t = i; t < j; ++t) {
            if (labels[static_cast<std::size_t>(order[t])] == 1.0) rank_sum_pos += avg_rank;
        }
        i = j;
    }
    double p = static_cast<double>(pos), m = static_cast<double>(n - pos);
    return {(rank_sum_pos - p * (p + 1) / 2.0) / (p * m), true};
}

struct ScoredGroup {
    std::vector<double> scores;
    std::vector<double> labels;
};

struct GaucResult {
    double value = 0.0;
    bool valid = false;
    int skipped = 0;  // single-class groups
};

// Impression-weighted mean of per-group AUC over groups containing both
// classes (this artifact's GAUC definition).
inline GaucResult gauc(const std::vector<ScoredGroup>& groups) {
    if (groups.empty()) throw std::invalid_argument("gauc: no groups");
    double weight = 0.0, acc = 0.0;
    int skipped = 0;
    for (const auto& g : groups) {
        AucResult a = auc(g.scores, g.labels);
        if (!a.valid) {
            ++skipped;
            continue;
        }
        double w = static_cast<double>(g.scores.size());
        acc += w * a.value;
        weight += w;
    }
    if (weight == 0.0) return {0.0, false, skipped};
    return {acc / weight, true, skipped};
}

struct FusionParams {
    double alpha = 1.0, beta = 0.2, gamma = 0.1;
    double a = 1.0, b = 1.0;
};

// p_final = alpha*p_ctr^a*p_ctcvr^b + beta*p_ctr^a*p_ctcvr^b*price
//         + gamma*p_ctr*ecpm
inline double score_fusion(double p_ctr, double p_ctcvr, double price, double ecpm,
                           const FusionParams& fp) {
    if (p_ctr < 0.0 || p_ctr > 1.0 || p_ctcvr < 0.0 || p_ctcvr > 1.0) {
        throw std::invalid_argument("score_fusion: probabilities must lie in [0,1]");
    }
    double core = std::pow(p_ctr, fp.a) * std::pow(p_ctcvr, fp.b);
    return fp.alpha * core + fp.beta * core * price + fp.gamma * p_ctr * ecpm;
}

struct CoverageResult {
    std::map<std::string, double> fraction;  // per route
    std::vector<std::string> undefined;      // routes with empty exposure sets
};

// Coverage(R) = |model_route ∩ R| / |R| for each reference route R.
inline CoverageResult coverage(const std::set<int>& model_route,
                               const std::map<std::string, std::set<int>>& routes) {
    CoverageResult out;
    for (const auto& [name, r] : routes) {
        if (r.empty()) {
            out.undefined.push_back(name);
            continue;
        }
        std::size_t inter = 0;
        for (int id : r) inter += model_route.count(id) ? 1 : 0;
        out.fraction[name] = static_cast<double>(inter) / static_cast<double>(r.size());
    }
    return out;
}

// Share of the union found by exactly one route, attributed to that route.
inline std::map<std::string, double> exclusive_share(
    const std::map<std::string, std::set<int>>& routes) {
    if (routes.size() < 2) throw std::invalid_argument("exclusive_share: need at least 2 routes");
    std::map<int, int> owner_count;
    std::map<int, std::string> owner;
    for (const auto& [name, r] : routes) {
        for (int id : r) {
            owner_count[id] += 1;
            owner[id] = name;
        }
    }
    if (owner_count.empty()) throw std::invalid_argument("exclusive_share: empty union");
    std::map<std::string, double> share;
    for (const auto& [name, r] : routes) share[name] = 0.0;
    for (const auto& [id, cnt] : owner_count) {
        if (cnt == 1) share[owner[id]] += 1.0;
    }
    for (auto& [name, s] : share) s /= static_cast<double>(owner_count.size());
    return share;
}

// Flat report: metric values, coverage/exclusive tables, FLOP accounting,
// and bookkeeping counts (skipped sessions and the like).
struct MetricsReport {
    int day = -1;
    std::map<std::string, double> values;
    std::map<std::string, double> coverage_by_route;
    std::map<std::string, double> exclusive_by_route;
    std::map<std::string, long long> counts;
    FlopReport flops;
    bool has_flops = false;
    std::map<std::string, std::string> meta;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["day"] = day;
        j["values"] = values;
        j["coverage"] = coverage_by_route;
        j["exclusive"] = exclusive_by_route;
        j["counts"] = counts;
        j["meta"] = meta;
        if (has_flops) {
            j["flops"] = {{"base_analytic", flops.base_analytic},
                          {"base_measured", flops.base_measured},
                          {"step_analytic", flops.step_analytic},
                          {"step_measured", flops.step_measured},
                          {"total_analytic", flops.total_analytic()},
                          {"total_measured", flops.total_measured()}};
        }
        return j;
    }
};

}  // namespace onepiece
