#pragma once
// Streaming day-by-day incremental training and chronological evaluation:
// the checkpoint trained through day t is evaluated on the unseen day t+1.
// Also home of the ablation toggles (attention mask, candidate visibility,
// PA/SD presence, supervision style) and the per-day metric computation.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "onepiece/evalserve.hpp"
#include "onepiece/model.hpp"

namespace onepiece {

struct TrainPlan {
    Mode mode = Mode::retrieval;
    int days = 0;  // 0 = all available
    int batch = 8;
    OptimizerConfig opt;
    double eta = 0.07;
    int steps = 2;       // reasoning steps K; 0 = no reasoning (heads on B0)
    int group_size = 4;  // candidate group size C (ranking)
    enum class TaskStyle { progressive, last_step, click_only };
    TaskStyle style = TaskStyle::progressive;
    enum class MaskMode { bidirectional, causal };
    MaskMode mask = MaskMode::bidirectional;
    enum class CisMode { visible, invisible };
    CisMode cis = CisMode::visible;
    bool pa_enabled = true;
    int pa_len = 10;
    bool sd_enabled = true;
    int ih_len = 16;
    RetrievalSampleConfig retrieval_samples;
    int rank_neg_unexposed = 4;
    int max_groups = 2;  // candidate groups taken per session per epoch
    double lr_decay = 1.0;  // per-day multiplicative learning-rate decay
    std::uint64_t seed = 1;

    static TrainPlan from_config(const Config& c) {
        TrainPlan p;
        std::string mode = c.get_str("train.mode");
        if (mode == "retrieval") p.mode = Mode::retrieval;
        else if (mode == "ranking") p.mode = Mode::ranking;
        else throw std::invalid_argument("train.mode must be retrieval or ranking");
        p.days = static_cast<int>(c.get_int("train.days"));
        p.batch = static_cast<int>(c.get_int("train.batch"));
        std::string opt = c.get_str("train.optimizer");
        if (opt == "plain") p.opt.mode = OptimizerConfig::Mode::plain;
        else if (opt == "adaptive") p.opt.mode = OptimizerConfig::Mode::adaptive;
        else throw std::invalid_argument("train.optimizer must be plain or adaptive");
        p.opt.lr = c.get_double("train.lr");
        p.opt.beta1 = c.get_double("train.beta1");
        p.opt.beta2 = c.get_double("train.beta2");
        p.opt.eps = c.get_double("train.adam_eps");
        p.opt.clip_norm = c.get_double("train.clip_norm");
        p.eta = c.get_double("train.eta");
        p.steps = static_cast<int>(c.get_int("train.steps"));
        p.group_size = static_cast<int>(c.get_int("train.group_size"));
        std::string style = c.get_str("train.tasks");
        if (style == "progressive") p.style = TaskStyle::progressive;
        else if (style == "last_step") p.style = TaskStyle::last_step;
        else if (style == "click_only") p.style = TaskStyle::click_only;
        else throw std::invalid_argument("train.tasks must be progressive|last_step|click_only");
        std::string mask = c.get_str("train.mask");
        if (mask == "bidirectional") p.mask = MaskMode::bidirectional;
        else if (mask == "causal") p.mask = MaskMode::causal;
        else throw std::invalid_argument("train.mask must be bidirectional or causal");
        std::string cis = c.get_str("train.cis");
        if (cis == "visible") p.cis = CisMode::visible;
        else if (cis == "invisible") p.cis = CisMode::invisible;
        else throw std::invalid_argument("train.cis must be visible or invisible");
        p.pa_enabled = c.get_flag("train.pa");
        p.pa_len = static_cast<int>(c.get_int("train.pa_len"));
        p.sd_enabled = c.get_flag("train.sd");
        p.ih_len = static_cast<int>(c.get_int("train.ih_len"));
        p.retrieval_samples.n_exposed_cap = static_cast<int>(c.get_int("train.neg_exposed_cap"));
        p.retrieval_samples.k_unexposed = static_cast<int>(c.get_int("train.neg_unexposed"));
        p.retrieval_samples.l_same_category = static_cast<int>(c.get_int("train.neg_samecat"));
        p.rank_neg_unexposed = static_cast<int>(c.get_int("train.rank_neg_unexposed"));
        p.max_groups = static_cast<int>(c.get_int("train.max_groups"));
        p.lr_decay = c.get_double("train.lr_decay");
        p.seed = static_cast<std::uint64_t>(c.get_int("train.seed"));
        return p;
    }

    std::vector<Task> base_tasks() const {
        if (mode == Mode::retrieval) return {Task::impression, Task::click};
        return {Task::click, Task::add_to_cart, Task::order};
    }

    // Loss schedule: (block index, task) pairs. Progressive puts the last K
    // funnel tasks on blocks 1..K; last-step puts every task on block K;
    // click-only supervises the final block with the click task. With K=0
    // everything attaches to the base block B0.
    std::vector<LossTerm> schedule() const {
        std::vector<Task> base = base_tasks();
        std::vector<LossTerm> sched;
        if (steps == 0) {
            if (style == TaskStyle::click_only) return {{0, Task::click}};
            for (Task t : base) sched.push_back({0, t});
            return sched;
        }
        switch (style) {
            case TaskStyle::progressive: {
                if (steps > static_cast<int>(base.size())) {
                    throw std::invalid_argument(
                        "progressive schedule: K exceeds the funnel task list");
                }
                TaskAssignment a;
                a.tasks.assign(base.end() - steps, base.end());
                return progressive_schedule(a);
            }
            case TaskStyle::last_step: {
                TaskAssignment a;
                a.tasks = base;
                return last_step_schedule(a, steps);
            }
            case TaskStyle::click_only:
                return {{steps, Task::click}};
        }
        return sched;
    }

    // Block a task is read from at evaluation time: the block it was trained
    // on, or the final block when the schedule does not carry it.
    int eval_block_for(Task t, int n_blocks) const {
        for (const LossTerm& term : schedule()) {
            if (term.task == t) return term.block;
        }
        return n_blocks - 1;
    }
};

struct EvalConfig {
    std::vector<int> recall_ks{100, 500};
    FusionParams fusion;
    std::string dump_attention_dir;  // empty = no dumps
    int dump_attention_count = 0;

    static EvalConfig from_config(const Config& c) {
        EvalConfig e;
        e.recall_ks = c.get_int_list("eval.recall_k");
        e.fusion.alpha = c.get_double("eval.fusion_alpha");
        e.fusion.beta = c.get_double("eval.fusion_beta");
        e.fusion.gamma = c.get_double("eval.fusion_gamma");
        e.fusion.a = c.get_double("eval.fusion_a");
        e.fusion.b = c.get_double("eval.fusion_b");
        return e;
    }
};

// ---------------------------------------------------------------------------
// Request assembly and ablation masks
// ---------------------------------------------------------------------------

inline std::vector<AnchorGroup> anchor_groups_for(const Dataset& ds, int query,
                                                  const TrainPlan& plan,
                                                  const VocabSpec& vocab) {
    std::vector<AnchorGroup> groups;
    if (!plan.pa_enabled || plan.pa_len <= 0) return groups;
    const QueryAnchors& a = ds.anchors[static_cast<std::size_t>(query)];
    auto take = [&](AnchorKind kind, const std::vector<int>& ids) {
        AnchorGroup g;
        g.kind = kind;
        for (int i = 0; i < plan.pa_len && i < static_cast<int>(ids.size()); ++i) {
            g.items.push_back(item_features(ds.items[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)])], vocab));
        }
        if (!g.items.empty()) groups.push_back(std::move(g));
    };
    take(AnchorKind::top_exposed, a.exposed);
    take(AnchorKind::top_clicked, a.clicked);
    take(AnchorKind::top_purchased, a.purchased);
    return groups;
}

inline TokenSequence build_request(const BoundModel& b, const Dataset& ds,
                                   const SessionRecord& s, const TrainPlan& plan,
                                   const std::optional<std::vector<int>>& candidate_ids,
                                   const VocabSpec& vocab) {
    std::vector<ItemFeatures> ih;
    int start = static_cast<int>(s.ih.size()) - plan.ih_len;
    if (start < 0) start = 0;
    for (std::size_t i = static_cast<std::size_t>(start); i < s.ih.size(); ++i) {
        ih.push_back(item_features(ds.items[static_cast<std::size_t>(s.ih[i])], vocab));
    }
    std::vector<AnchorGroup> pa = anchor_groups_for(ds, s.query, plan, vocab);
    std::optional<UserFeatures> user;
    std::optional<QueryFeatures> query;
    if (plan.sd_enabled) {
        user = user_features(ds.users[static_cast<std::size_t>(s.user)], vocab);
        query = query_features(ds.queries[static_cast<std::size_t>(s.query)], vocab);
    }
    std::optional<std::vector<ItemFeatures>> cand;
    if (candidate_ids) {
        std::vector<ItemFeatures> c;
        for (int id : *candidate_ids) {
            c.push_back(item_features(ds.items[static_cast<std::size_t>(id)], vocab));
        }
        cand = std::move(c);
    }
    return pack_sequence(b.tables, ih, pa, user, query, cand);
}

// Base-token mask under the ablation toggles. Causal restricts base rows to
// the lower triangle; CIS-invisible lets a candidate attend non-CIS tokens
// and its own column only.
inline AttentionMask build_base_mask(const TokenSequence& seq, TrainPlan::MaskMode mask_mode,
                                     TrainPlan::CisMode cis_mode) {
    int n = seq.n();
    AttentionMask mask(n, false);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            bool ok = mask_mode == TrainPlan::MaskMode::bidirectional ? true : c <= r;
            if (cis_mode == TrainPlan::CisMode::invisible) {
                bool rc = seq.segments[static_cast<std::size_t>(r)] == Segment::CIS;
                bool cc = seq.segments[static_cast<std::size_t>(c)] == Segment::CIS;
                if (rc && cc && r != c) ok = false;
            }
            mask.set(r, c, ok);
        }
    }
    mask.validate();
    return mask;
}

// Block-extended mask. Under CIS-invisible ranking the copies of candidate p
// may attend non-CIS base tokens and p's own copies only, so the ablation
// keeps candidates mutually invisible across reasoning steps too.
inline AttentionMask build_plan_block_mask(const AttentionMask& base, const TokenSequence& seq,
                                           int m, int k, const TrainPlan& plan) {
    AttentionMask mask = build_block_mask(base, m, k);
    if (plan.mode == Mode::ranking && plan.cis == TrainPlan::CisMode::invisible) {
        int n = base.size;
        int cis0 = n - seq.cis_len();
        for (int j = 1; j <= k; ++j) {
            int r0 = n + (j - 1) * m;
            for (int p = 0; p < m; ++p) {
                // other candidates' base columns
                for (int c = cis0; c < n; ++c) {
                    if (c - cis0 != p) mask.set(r0 + p, c, false);
                }
                // other candidates' copies in blocks <= j
                for (int jj = 1; jj <= j; ++jj) {
                    int c0 = n + (jj - 1) * m;
                    for (int q = 0; q < m; ++q) {
                        if (q != p) mask.set(r0 + p, c0 + q, false);
                    }
                }
            }
        }
    }
    return mask;
}

// Base encode plus K reasoning steps under the plan's masks. K=0 returns
// only B0 (the last `block_size` rows of the encoder output).
inline BlockSet forward_blocks(const BoundModel& b, const TokenSequence& seq, int block_size,
                               const TrainPlan& plan, KVCache* cache_out = nullptr) {
    AttentionMask base = build_base_mask(seq, plan.mask, plan.cis);
    int n = seq.n();
    if (n < block_size) {
        throw std::invalid_argument("forward_blocks: sequence shorter than the block");
    }
    BlockSet blocks;
    blocks.block_size = block_size;
    KVCache cache;
    Tensor h = encode(seq.tokens, base, b.enc, &cache);
    Tensor prev = slice_rows(h, n - block_size, block_size);
    blocks.blocks.push_back(prev);
    for (int k = 1; k <= plan.steps; ++k) {
        Tensor shifted = apply_rpe(prev, k, b.rpe);
        AttentionMask mask_k = build_plan_block_mask(base, seq, block_size, k, plan);
        prev = reason_step(cache, shifted, mask_k, b.enc);
        blocks.blocks.push_back(prev);
    }
    if (cache_out) *cache_out = cache;
    return blocks;
}

inline int retrieval_block_size(const TokenSequence& seq, const TrainPlan& plan) {
    int sd = seq.sd_len();
    if (plan.sd_enabled && sd >= 1) return sd;
    return seq.n() >= 2 ? 2 : 1;  // SD-ablated fallback: the trailing tokens
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct LossLogRow {
    int day = 0;
    int batch = 0;
    int block = 0;
    Task task = Task::click;
    double value = 0.0;
};

struct TrainLog {
    std::vector<LossLogRow> rows;

    void write_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write training log: " + path);
        out << "day,batch,step_k,task,loss\n";
        for (const auto& r : rows) {
            out << r.day << "," << r.batch << "," << r.block << "," << task_name(r.task) << ","
                << r.value << "\n";
        }
    }
};

struct DayStats {
    int day = 0;
    int batches = 0;
    int samples = 0;
    int flagged_pools = 0;
    double mean_loss = 0.0;
};

namespace trainer_detail {

inline std::map<std::string, std::vector<double>> collect_grads(const Binding& binding) {
    std::map<std::string, std::vector<double>> grads;
    for (const auto& [name, t] : binding) {
        if (t.needs_grad()) grads[name] = t.grad();
    }
    return grads;
}

}  // namespace trainer_detail

inline DayStats train_day(OnePieceModel& model, Optimizer& opt, const Dataset& ds, int day,
                          const TrainPlan& plan, TrainLog* log = nullptr) {
    if (day < 0 || day >= static_cast<int>(ds.days.size())) {
        throw std::invalid_argument("train_day: day " + std::to_string(day) + " out of range");
    }
    const auto& shard = ds.days[static_cast<std::size_t>(day)];
    if (shard.empty()) throw std::invalid_argument("train_day: empty shard");
    const VocabSpec& vocab = model.cfg.vocab;
    std::vector<LossTerm> sched = plan.schedule();

    // eligible sessions, shuffled (samples within each day are shuffled)
    std::vector<int> order;
    for (int i = 0; i < static_cast<int>(shard.size()); ++i) {
        if (shard[static_cast<std::size_t>(i)].has_click()) order.push_back(i);
    }
    Rng shuffle_rng(derive_seed(plan.seed, 0xd1, static_cast<std::uint64_t>(day)));
    shuffle_rng.shuffle(order);

    DayStats stats;
    stats.day = day;
    double loss_sum = 0.0;
    long long loss_terms = 0;

    if (plan.mode == Mode::retrieval) {
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(plan.batch)) {
            std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(plan.batch));
            Tape tape;
            Binding binding;
            BoundModel b = bind_model(tape, model, true, &binding);
            std::vector<RetrievalExample> batch;
            for (std::size_t i = start; i < end; ++i) {
                const SessionRecord& s = shard[static_cast<std::size_t>(order[i])];
                Rng rng(derive_seed(plan.seed, 0xa1, static_cast<std::uint64_t>(day),
                                    static_cast<std::uint64_t>(order[i])));
                RetrievalPool pool =
                    build_retrieval_samples(s, ds.items_by_category, ds.item_category,
                                            plan.retrieval_samples, rng);
                TokenSequence seq = build_request(b, ds, s, plan, std::nullopt, vocab);
                int m = retrieval_block_size(seq, plan);
                RetrievalExample ex;
                ex.blocks = forward_blocks(b, seq, m, plan);
                std::vector<ItemFeatures> pf;
                for (int id : pool.items) pf.push_back(item_features(ds.items[static_cast<std::size_t>(id)], vocab));
                ex.pool_z = embed_items(b.tables, pf, ItemProjection::candidate);
                ex.labels = std::move(pool.labels);
                batch.push_back(std::move(ex));
            }
            TotalLossResult res = total_loss_retrieval(batch, sched, plan.eta);
            double bn = static_cast<double>(batch.size());
            Tensor loss = scale(res.loss, 1.0 / bn);
            if (!std::isfinite(loss.at(0))) {
                throw std::runtime_error("train_day: non-finite loss at day " +
                                         std::to_string(day) + " batch " +
                                         std::to_string(stats.batches));
            }
            tape.backward(loss);
            opt.step(model.params, trainer_detail::collect_grads(binding));
            stats.flagged_pools += res.flagged;
            loss_sum += loss.at(0);
            ++loss_terms;
            if (log) {
                for (const auto& e : res.breakdown) {
                    log->rows.push_back({day, stats.batches, e.block, e.task,
                                         (e.bce + e.contrastive) / bn});
                }
            }
            stats.samples += static_cast<int>(batch.size());
            ++stats.batches;
        }
    } else {
        // assemble (session, group) pairs in shuffled session order
        struct GroupRef {
            int session;
            RankingGroup group;
        };
        std::vector<GroupRef> all_groups;
        for (int idx : order) {
            const SessionRecord& s = shard[static_cast<std::size_t>(idx)];
            Rng rng(derive_seed(plan.seed, 0xa2, static_cast<std::uint64_t>(day),
                                static_cast<std::uint64_t>(idx)));
            RankingSampleConfig rc;
            rc.n_unexposed = plan.rank_neg_unexposed;
            rc.group_size = plan.group_size;
            auto groups = build_ranking_samples(s, rc, rng);
            for (int g = 0; g < static_cast<int>(groups.size()) && g < plan.max_groups; ++g) {
                all_groups.push_back({idx, std::move(groups[static_cast<std::size_t>(g)])});
            }
        }
        for (std::size_t start = 0; start < all_groups.size(); start += static_cast<std::size_t>(plan.batch)) {
            std::size_t end = std::min(all_groups.size(), start + static_cast<std::size_t>(plan.batch));
            Tape tape;
            Binding binding;
            BoundModel b = bind_model(tape, model, true, &binding);
            std::vector<RankingExample> batch;
            for (std::size_t i = start; i < end; ++i) {
                const SessionRecord& s = shard[static_cast<std::size_t>(all_groups[i].session)];
                const RankingGroup& g = all_groups[i].group;
                TokenSequence seq = build_request(b, ds, s, plan, g.items, vocab);
                RankingExample ex;
                ex.blocks = forward_blocks(b, seq, static_cast<int>(g.items.size()), plan);
                ex.labels = std::move(all_groups[i].group.labels);
                batch.push_back(std::move(ex));
            }
            TotalLossResult res = total_loss_ranking(batch, sched, b.heads, plan.eta);
            double bn = static_cast<double>(batch.size());
            Tensor loss = scale(res.loss, 1.0 / bn);
            if (!std::isfinite(loss.at(0))) {
                throw std::runtime_error("train_day: non-finite loss at day " +
                                         std::to_string(day) + " batch " +
                                         std::to_string(stats.batches));
            }
            tape.backward(loss);
            opt.step(model.params, trainer_detail::collect_grads(binding));
            stats.flagged_pools += res.flagged;
            loss_sum += loss.at(0);
            ++loss_terms;
            if (log) {
                for (const auto& e : res.breakdown) {
                    log->rows.push_back({day, stats.batches, e.block, e.task,
                                         (e.bce + e.contrastive) / bn});
                }
            }
            stats.samples += static_cast<int>(batch.size());
            ++stats.batches;
        }
    }
    stats.mean_loss = loss_terms ? loss_sum / static_cast<double>(loss_terms) : 0.0;
    return stats;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline ItemIndex build_item_index(OnePieceModel& model, const Dataset& ds) {
    Tape tape;
    BoundModel b = bind_model(tape, model, false);
    std::vector<ItemFeatures> feats;
    for (const auto& it : ds.items) feats.push_back(item_features(it, model.cfg.vocab));
    Tensor z = embed_items(b.tables, feats, ItemProjection::candidate);
    ItemIndex index;
    index.dim = model.cfg.dim;
    for (const auto& it : ds.items) index.ids.push_back(it.id);
    index.emb = z.val();
    index.validate();
    return index;
}

inline MetricsReport evaluate_retrieval(OnePieceModel& model, const Dataset& ds, int day,
                                        const TrainPlan& plan, const EvalConfig& ec) {
    MetricsReport rep;
    rep.day = day;
    const auto& shard = ds.days[static_cast<std::size_t>(day)];
    ItemIndex index = build_item_index(model, ds);
    int max_k = 0;
    for (int k : ec.recall_ks) max_k = std::max(max_k, k);
    if (max_k > index.size()) {
        throw std::invalid_argument("evaluate_retrieval: recall K exceeds the catalog");
    }
    const VocabSpec& vocab = model.cfg.vocab;
    const int query_block = plan.eval_block_for(Task::click, plan.steps + 1);
    std::map<int, double> recall_sum;
    long long evaluated = 0, skipped = 0;
    int dumped = 0;

    // Route exposure sets for the coverage / exclusive-contribution analysis.
    // The model route proposes its top items per session; the reference
    // routes are popularity over the already-seen days, the query-anchor
    // lists, and a seeded random route.
    int route_k = ds.cfg.exposure;
    std::set<int> route_model, route_pop, route_qtop, route_rand;
    {
        std::vector<long long> expo_count(ds.items.size(), 0);
        for (int d = 0; d < day; ++d) {
            for (const auto& s : ds.days[static_cast<std::size_t>(d)]) {
                for (const auto& e : s.exposed) expo_count[static_cast<std::size_t>(e.item)] += 1;
            }
        }
        std::vector<int> by_pop(ds.items.size());
        for (std::size_t i = 0; i < by_pop.size(); ++i) by_pop[i] = static_cast<int>(i);
        std::sort(by_pop.begin(), by_pop.end(), [&](int a, int b) {
            if (expo_count[static_cast<std::size_t>(a)] != expo_count[static_cast<std::size_t>(b)]) {
                return expo_count[static_cast<std::size_t>(a)] > expo_count[static_cast<std::size_t>(b)];
            }
            return a < b;
        });
        for (int i = 0; i < route_k && i < static_cast<int>(by_pop.size()); ++i) {
            route_pop.insert(by_pop[static_cast<std::size_t>(i)]);
        }
    }
    Rng route_rng(derive_seed(plan.seed, 0xc0fe, static_cast<std::uint64_t>(day)));

    const std::size_t eval_batch = 32;
    for (std::size_t start = 0; start < shard.size(); start += eval_batch) {
        std::size_t end = std::min(shard.size(), start + eval_batch);
        Tape tape;
        BoundModel b = bind_model(tape, model, false);
        for (std::size_t i = start; i < end; ++i) {
            const SessionRecord& s = shard[i];
            if (!s.has_click()) {
                ++skipped;
                continue;
            }
            TokenSequence seq = build_request(b, ds, s, plan, std::nullopt, vocab);
            int m = retrieval_block_size(seq, plan);
            BlockSet blocks = forward_blocks(b, seq, m, plan);
            Tensor r = user_repr(blocks.blocks[static_cast<std::size_t>(query_block)]);
            std::vector<int> retrieved = top_k(r.val(), index, max_k);
            std::set<int> relevant;
            for (int id : s.clicked_items()) relevant.insert(id);
            for (int k : ec.recall_ks) {
                std::vector<int> head(retrieved.begin(), retrieved.begin() + k);
                recall_sum[k] += recall_at_k(head, relevant);
            }
            for (int i2 = 0; i2 < route_k; ++i2) {
                route_model.insert(retrieved[static_cast<std::size_t>(i2)]);
                route_rand.insert(route_rng.int_below(static_cast<int>(ds.items.size())));
            }
            const QueryAnchors& qa = ds.anchors[static_cast<std::size_t>(s.query)];
            for (int i2 = 0; i2 < route_k && i2 < static_cast<int>(qa.exposed.size()); ++i2) {
                route_qtop.insert(qa.exposed[static_cast<std::size_t>(i2)]);
            }
            ++evaluated;
            if (!ec.dump_attention_dir.empty() && dumped < ec.dump_attention_count) {
                AttentionMask base = build_base_mask(seq, plan.mask, plan.cis);
                AttentionCapture cap = export_attention(seq.tokens, base, b.enc);
                std::vector<std::string> tags;
                for (Segment sg : seq.segments) tags.push_back(segment_name(sg));
                write_attention_dump(ec.dump_attention_dir + "/attn_" + s.sid + ".bin", cap,
                                     model.cfg.layers, tags);
                ++dumped;
            }
        }
    }
    for (int k : ec.recall_ks) {
        rep.values["recall@" + std::to_string(k)] =
            evaluated ? recall_sum[k] / static_cast<double>(evaluated) : 0.0;
    }
    if (evaluated > 0) {
        std::map<std::string, std::set<int>> routes{{"popularity", route_pop},
                                                    {"query-top", route_qtop},
                                                    {"random", route_rand}};
        CoverageResult cov = coverage(route_model, routes);
        rep.coverage_by_route = cov.fraction;
        routes["model"] = route_model;
        rep.exclusive_by_route = exclusive_share(routes);
    }
    rep.counts["eval_sessions"] = evaluated;
    rep.counts["skipped_clickless"] = skipped;
    return rep;
}

// Table-style coverage CSV: one column per reference route, one row for the
// model's coverage of it, plus an exclusive-share row over all routes.
inline void write_coverage_csv(const MetricsReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write coverage: " + path);
    out << "route";
    for (const auto& [k, v] : rep.coverage_by_route) out << "," << k;
    out << "\nmodel";
    for (const auto& [k, v] : rep.coverage_by_route) out << "," << v;
    out << "\n\nexclusive_route,share\n";
    for (const auto& [k, v] : rep.exclusive_by_route) out << k << "," << v << "\n";
}

inline MetricsReport evaluate_ranking(OnePieceModel& model, const Dataset& ds, int day,
                                      const TrainPlan& plan, const EvalConfig& ec) {
    MetricsReport rep;
    rep.day = day;
    const auto& shard = ds.days[static_cast<std::size_t>(day)];
    const VocabSpec& vocab = model.cfg.vocab;
    const std::vector<Task> eval_tasks{Task::click, Task::add_to_cart, Task::order};
    const int n_blocks = plan.steps + 1;
    std::map<Task, int> task_block;
    for (Task t : eval_tasks) task_block[t] = plan.eval_block_for(t, n_blocks);
    std::map<Task, std::vector<double>> all_scores, all_labels;
    std::map<Task, std::vector<ScoredGroup>> session_groups;
    std::vector<double> fused_scores, fused_order_labels;
    long long evaluated = 0, skipped = 0;
    int dumped = 0;
    const std::size_t eval_batch = 16;
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < shard.size(); ++i) {
        if (shard[i].has_click()) eligible.push_back(i);
        else ++skipped;
    }
    for (std::size_t start = 0; start < eligible.size(); start += eval_batch) {
        std::size_t end = std::min(eligible.size(), start + eval_batch);
        Tape tape;
        BoundModel b = bind_model(tape, model, false);
        for (std::size_t ii = start; ii < end; ++ii) {
            const SessionRecord& s = shard[eligible[ii]];
            // exposed items grouped into C-sized sets, seeded per session
            std::vector<ExposedItem> exposed = s.exposed;
            Rng grng(derive_seed(plan.seed, 0xe7a1, static_cast<std::uint64_t>(day),
                                 static_cast<std::uint64_t>(eligible[ii])));
            auto groups = group_candidates(exposed, plan.group_size, grng);
            std::map<Task, ScoredGroup> session_acc;
            for (const auto& g : groups) {
                std::vector<int> ids;
                for (const auto& e : g) ids.push_back(e.item);
                TokenSequence seq = build_request(b, ds, s, plan, ids, vocab);
                BlockSet blocks = forward_blocks(b, seq, static_cast<int>(ids.size()), plan);
                int nb = static_cast<int>(blocks.blocks.size());
                std::map<Task, std::vector<double>> scores;
                for (Task t : eval_tasks) {
                    Tensor sc = rank_scores(blocks.blocks[static_cast<std::size_t>(task_block[t])],
                                            b.heads.at(t));
                    scores[t] = sc.val();
                }
                // score fusion reads the click/order logits of the final block
                Tensor click_final = rank_scores(blocks.blocks[static_cast<std::size_t>(nb - 1)],
                                                 b.heads.at(Task::click));
                Tensor order_final = rank_scores(blocks.blocks[static_cast<std::size_t>(nb - 1)],
                                                 b.heads.at(Task::order));
                for (std::size_t c = 0; c < g.size(); ++c) {
                    const ExposedItem& e = g[c];
                    double label[3] = {static_cast<double>(e.click), static_cast<double>(e.atc),
                                       static_cast<double>(e.order)};
                    int li = 0;
                    for (Task t : eval_tasks) {
                        all_scores[t].push_back(scores[t][c]);
                        all_labels[t].push_back(label[li]);
                        session_acc[t].scores.push_back(scores[t][c]);
                        session_acc[t].labels.push_back(label[li]);
                        ++li;
                    }
                    const CatalogItem& item = ds.items[static_cast<std::size_t>(e.item)];
                    double p_ctr = sigmoid(click_final.at(static_cast<int>(c)));
                    double p_ctcvr = sigmoid(order_final.at(static_cast<int>(c)));
                    double price = static_cast<double>(item.price_bucket + 1);
                    double ecpm = 0.1 * static_cast<double>(item.pop_bucket + 1);
                    fused_scores.push_back(score_fusion(p_ctr, p_ctcvr, price, ecpm, ec.fusion));
                    fused_order_labels.push_back(label[2]);
                }
                if (!ec.dump_attention_dir.empty() && dumped < ec.dump_attention_count) {
                    AttentionMask base = build_base_mask(seq, plan.mask, plan.cis);
                    AttentionCapture cap = export_attention(seq.tokens, base, b.enc);
                    std::vector<std::string> tags;
                    for (Segment sg : seq.segments) tags.push_back(segment_name(sg));
                    write_attention_dump(ec.dump_attention_dir + "/attn_" + s.sid + ".bin", cap,
                                         model.cfg.layers, tags);
                    ++dumped;
                }
            }
            for (Task t : eval_tasks) session_groups[t].push_back(session_acc[t]);
            ++evaluated;
        }
    }
    const char* prefix[3] = {"C", "A", "O"};
    int pi = 0;
    for (Task t : eval_tasks) {
        AucResult a = auc(all_scores[t], all_labels[t]);
        if (a.valid) rep.values[std::string(prefix[pi]) + "-AUC"] = a.value;
        GaucResult g = gauc(session_groups[t]);
        if (g.valid) rep.values[std::string(prefix[pi]) + "-GAUC"] = g.value;
        rep.counts[std::string(prefix[pi]) + "-gauc_skipped"] = g.skipped;
        ++pi;
    }
    AucResult fa = auc(fused_scores, fused_order_labels);
    if (fa.valid) rep.values["fused-O-AUC"] = fa.value;
    rep.counts["eval_sessions"] = evaluated;
    rep.counts["skipped_clickless"] = skipped;
    return rep;
}

inline MetricsReport evaluate(OnePieceModel& model, const Dataset& ds, int day,
                              const TrainPlan& plan, const EvalConfig& ec) {
    if (day < 0 || day >= static_cast<int>(ds.days.size())) {
        throw std::invalid_argument("evaluate: day out of range");
    }
    return plan.mode == Mode::retrieval ? evaluate_retrieval(model, ds, day, plan, ec)
                                        : evaluate_ranking(model, ds, day, plan, ec);
}

// ---------------------------------------------------------------------------
// Streaming protocol
// ---------------------------------------------------------------------------

struct StreamResult {
    std::vector<MetricsReport> reports;  // one per evaluation day
    std::vector<DayStats> day_stats;
    TrainLog log;
};

// Train on day t, evaluate on the unseen day t+1, for t = 0..T-2. The seen-
// session leakage check is structural (ids collected and compared) rather
// than assumed from the day split.
inline StreamResult streaming_protocol(OnePieceModel& model, Optimizer& opt, const Dataset& ds,
                                       const TrainPlan& plan, const EvalConfig& ec) {
    int total_days = static_cast<int>(ds.days.size());
    int days = plan.days > 0 ? std::min(plan.days, total_days) : total_days;
    if (days < 2) throw std::invalid_argument("streaming_protocol: need at least 2 days");
    StreamResult out;
    std::set<std::string> seen;
    FlopReport flops;
    bool flops_done = false;
    const double base_lr = opt.config().lr;
    for (int t = 0; t + 1 < days; ++t) {
        if (plan.lr_decay != 1.0) opt.set_lr(base_lr * std::pow(plan.lr_decay, t));
        DayStats stats = train_day(model, opt, ds, t, plan, &out.log);
        out.day_stats.push_back(stats);
        for (const auto& s : ds.days[static_cast<std::size_t>(t)]) seen.insert(s.sid);
        long long leaks = 0;
        for (const auto& s : ds.days[static_cast<std::size_t>(t + 1)]) {
            if (seen.count(s.sid)) ++leaks;
        }
        if (leaks > 0) {
            throw std::runtime_error("streaming_protocol: " + std::to_string(leaks) +
                                     " eval sessions already seen in training");
        }
        MetricsReport rep = evaluate(model, ds, t + 1, plan, ec);
        rep.counts["leak_violations"] = leaks;
        rep.values["train_mean_loss"] = stats.mean_loss;
        rep.meta["mode"] = plan.mode == Mode::retrieval ? "retrieval" : "ranking";
        if (!flops_done) {
            // representative request shape for the complexity report
            int n_repr = 0;
            {
                Tape tape;
                BoundModel b = bind_model(tape, model, false);
                const auto& s0 = ds.days[0].front();
                if (plan.mode == Mode::ranking) {
                    std::vector<int> ids;
                    for (int i = 0; i < plan.group_size && i < static_cast<int>(s0.exposed.size()); ++i) {
                        ids.push_back(s0.exposed[static_cast<std::size_t>(i)].item);
                    }
                    n_repr = build_request(b, ds, s0, plan, ids, model.cfg.vocab).n();
                } else {
                    n_repr = build_request(b, ds, s0, plan, std::nullopt, model.cfg.vocab).n();
                }
            }
            int m = plan.mode == Mode::ranking ? plan.group_size : 2;
            int k = plan.steps;
            flops = flop_count(n_repr, model.cfg.dim, model.cfg.layers, k > 0 ? m : 0, k,
                               model.cfg.ff(), model.cfg.heads);
            flops_done = true;
        }
        rep.flops = flops;
        rep.has_flops = true;
        out.reports.push_back(std::move(rep));
    }
    return out;
}

inline void write_metrics_csv(const std::vector<MetricsReport>& reports, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write metrics: " + path);
    std::set<std::string> keys;
    for (const auto& r : reports) {
        for (const auto& [k, v] : r.values) keys.insert(k);
    }
    out << "day";
    for (const auto& k : keys) out << "," << k;
    out << "\n";
    for (const auto& r : reports) {
        out << r.day;
        for (const auto& k : keys) {
            out << ",";
            auto it = r.values.find(k);
            if (it != r.values.end()) out << it->second;
        }
        out << "\n";
    }
}

}  // namespace onepiece
