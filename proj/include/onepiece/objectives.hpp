#pragma once
// Progressive multi-task losses. Retrieval couples pointwise BCE with the
// bidirectional contrastive objective (U2I + I2U); ranking couples BCE with
// the set contrastive objective over each candidate group. Each reasoning
// step carries one task; the last-step ablation routes every task to the
// final block instead.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "onepiece/reasoning.hpp"
#include "onepiece/tensor.hpp"

namespace onepiece {

enum class Task : int { impression = 0, click = 1, add_to_cart = 2, order = 3 };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::impression: return "impression";
        case Task::click: return "click";
        case Task::add_to_cart: return "add_to_cart";
        case Task::order: return "order";
    }
    return "?";
}

inline Task task_from_name(const std::string& s) {
    if (s == "impression") return Task::impression;
    if (s == "click") return Task::click;
    if (s == "add_to_cart") return Task::add_to_cart;
    if (s == "order") return Task::order;
    throw std::invalid_argument("unknown task: " + s);
}

// Ordered task list, one per reasoning step, in funnel order.
struct TaskAssignment {
    std::vector<Task> tasks;
    void validate() const {
        if (tasks.empty()) throw std::invalid_argument("TaskAssignment: empty");
        for (std::size_t i = 1; i < tasks.size(); ++i) {
            if (static_cast<int>(tasks[i]) < static_cast<int>(tasks[i - 1])) {
                throw std::invalid_argument("TaskAssignment: funnel depth must be non-decreasing");
            }
        }
    }
    int steps() const { return static_cast<int>(tasks.size()); }
};

// Two-layer scorer mapping a d-vector to one logit. One head per task,
// never shared across tasks.
struct HeadParams {
    Tensor w1, b1, w2, b2;
};

// Step-specific user representation: layer normalization (unit gain, zero
// bias, eps 1e-12) followed by mean pooling over the block rows.
inline Tensor user_repr(Tensor block) {
    if (block.shape().size() != 2) throw std::invalid_argument("user_repr: 2-D block expected");
    Tape* tape = block.tape();
    int d = block.cols();
    Tensor gain = tape->leaf({d}, std::vector<double>(static_cast<std::size_t>(d), 1.0), false);
    Tensor bias = tape->zeros({d});
    return mean_rows(layer_norm_rows(block, gain, bias, 1e-12));
}

// Pointwise binary cross-entropy over logits (sum over elements).
inline Tensor bce(Tensor logits, const std::vector<double>& labels) {
    return bce_with_logits(logits, labels);
}

// Candidate-wise logits through a task-specific scoring network. A head
// without a hidden layer (w1 unset) is a plain linear scorer.
inline Tensor rank_scores(Tensor block_hidden, const HeadParams& head) {
    if (!head.w1.defined()) {
        return add_broadcast_scalar(matvec(block_hidden, head.w2), head.b2);
    }
    Tensor h = gelu(add_rowvec(matmul(block_hidden, head.w1), head.b1));
    return add_broadcast_scalar(matvec(h, head.w2), head.b2);
}

struct ContrastiveResult {
    Tensor loss;      // scalar (zero tensor when nothing contributed)
    int flagged = 0;  // examples with no positive, contributing zero
};

namespace detail {

inline std::vector<int> positive_indices(const std::vector<double>& labels) {
    std::vector<int> pos;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1.0) pos.push_back(static_cast<int>(i));
    }
    return pos;
}

}  // namespace detail

// Set contrastive loss: each positive candidate competes against the whole
// group. Zero positives contribute zero and are flagged.
inline ContrastiveResult scl(Tensor scores, const std::vector<double>& labels, double eta) {
    if (eta <= 0.0) throw std::invalid_argument("scl: temperature must be positive");
    if (static_cast<std::size_t>(scores.numel()) != labels.size()) {
        throw std::invalid_argument("scl: scores/labels length mismatch");
    }
    Tape* tape = scores.tape();
    std::vector<int> pos = detail::positive_indices(labels);
    if (pos.empty()) return {tape->scalar(0.0, scores.needs_grad()), 1};
    Tensor s_eta = scale(scores, 1.0 / eta);
    Tensor lse = log_sum_exp(s_eta);
    Tensor picked = sum_all(gather(s_eta, pos));
    Tensor loss = sub(scale(lse, static_cast<double>(pos.size())), picked);
    return {loss, 0};
}

// One example's candidate pool for retrieval: item embeddings plus the
// labels of the task currently being optimized.
struct PoolView {
    Tensor z;  // P x d
    std::vector<double> labels;
};

// Bidirectional contrastive loss over a batch at one reasoning step.
// U2I: every positive against its example's whole pool. I2U: every positive
// against the batch's user representations.
inline ContrastiveResult bcl(const std::vector<Tensor>& r_batch,
                             const std::vector<PoolView>& pools, double eta) {
    if (eta <= 0.0) throw std::invalid_argument("bcl: temperature must be positive");
    if (r_batch.empty() || r_batch.size() != pools.size()) {
        throw std::invalid_argument("bcl: batch size mismatch");
    }
    Tape* tape = r_batch[0].tape();
    int batch_n = static_cast<int>(r_batch.size());
    std::vector<Tensor> reprs;
    for (const Tensor& r : r_batch) reprs.push_back(r);
    Tensor r_mat = concat_rows(reprs);  // batch_n x d
    std::vector<Tensor> terms;
    int flagged = 0;
    for (int i = 0; i < batch_n; ++i) {
        const PoolView& pool = pools[static_cast<std::size_t>(i)];
        if (static_cast<std::size_t>(pool.z.rows()) != pool.labels.size()) {
            throw std::invalid_argument("bcl: pool labels mismatch");
        }
        std::vector<int> pos = detail::positive_indices(pool.labels);
        if (pos.empty()) {
            ++flagged;
            continue;
        }
        // U2I over this example's pool
        Tensor s = scale(matvec(pool.z, r_batch[static_cast<std::size_t>(i)]), 1.0 / eta);
        Tensor lse = log_sum_exp(s);
        Tensor picked = sum_all(gather(s, pos));
        terms.push_back(sub(scale(lse, static_cast<double>(pos.size())), picked));
        // I2U over the batch's user representations
        Tensor zp = gather_rows(pool.z, pos, "bcl positives");
        Tensor su = scale(matmul_nt(zp, r_mat), 1.0 / eta);  // pos x batch_n
        std::vector<Tensor> i2u;
        for (std::size_t p = 0; p < pos.size(); ++p) {
            Tensor row = slice_rows(su, static_cast<int>(p), 1);
            Tensor row_lse = log_sum_exp(row);
            Tensor own = gather(row, {i});
            i2u.push_back(sub(row_lse, sum_all(own)));
        }
        terms.push_back(add_n(i2u));
    }
    if (terms.empty()) return {tape->scalar(0.0, r_batch[0].needs_grad()), flagged};
    return {add_n(terms), flagged};
}

// One loss term: which block feeds it and which slot of the per-step label
// arrays / head table it uses.
struct LossTerm {
    int block = 1;
    Task task = Task::click;
};

// Progressive schedule: task k on block k. Last-step schedule: every task on
// block K.
inline std::vector<LossTerm> progressive_schedule(const TaskAssignment& a) {
    a.validate();
    std::vector<LossTerm> sched;
    for (int k = 0; k < a.steps(); ++k) sched.push_back({k + 1, a.tasks[static_cast<std::size_t>(k)]});
    return sched;
}

inline std::vector<LossTerm> last_step_schedule(const TaskAssignment& a, int blocks) {
    a.validate();
    std::vector<LossTerm> sched;
    for (Task t : a.tasks) sched.push_back({blocks, t});
    return sched;
}

struct LossBreakdownEntry {
    int block = 0;
    Task task = Task::click;
    double bce = 0.0;
    double contrastive = 0.0;
};

struct TotalLossResult {
    Tensor loss;
    std::vector<LossBreakdownEntry> breakdown;
    int flagged = 0;
};

// Retrieval: one example = one packed request; pools carry per-task labels.
struct RetrievalExample {
    BlockSet blocks;
    Tensor pool_z;                                      // P x d
    std::map<Task, std::vector<double>> labels;         // per task, length P
};

inline TotalLossResult total_loss_retrieval(const std::vector<RetrievalExample>& batch,
                                            const std::vector<LossTerm>& schedule, double eta) {
    if (batch.empty()) throw std::invalid_argument("total_loss_retrieval: empty batch");
    TotalLossResult out;
    std::vector<Tensor> terms;
    for (const LossTerm& term : schedule) {
        std::vector<Tensor> reprs;
        std::vector<PoolView> pools;
        for (const RetrievalExample& ex : batch) {
            if (term.block < 0 || term.block >= static_cast<int>(ex.blocks.blocks.size())) {
                throw std::invalid_argument("total_loss_retrieval: schedule block " +
                                            std::to_string(term.block) + " out of range");
            }
            reprs.push_back(user_repr(ex.blocks.blocks[static_cast<std::size_t>(term.block)]));
            auto it = ex.labels.find(term.task);
            if (it == ex.labels.end()) {
                throw std::invalid_argument(std::string("total_loss_retrieval: no labels for ") +
                                            task_name(term.task));
            }
            pools.push_back(PoolView{ex.pool_z, it->second});
        }
        LossBreakdownEntry entry;
        entry.block = term.block;
        entry.task = term.task;
        std::vector<Tensor> bces;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Tensor logits = matvec(batch[i].pool_z, reprs[i]);
            bces.push_back(bce(logits, pools[i].labels));
        }
        Tensor bce_sum = add_n(bces);
        ContrastiveResult c = bcl(reprs, pools, eta);
        entry.bce = bce_sum.at(0);
        entry.contrastive = c.loss.at(0);
        out.flagged += c.flagged;
        out.breakdown.push_back(entry);
        terms.push_back(add(bce_sum, c.loss));
    }
    out.loss = add_n(terms);
    return out;
}

// Ranking: one example = one candidate group (block size C).
struct RankingExample {
    BlockSet blocks;
    std::map<Task, std::vector<double>> labels;  // per task, length C
};

inline TotalLossResult total_loss_ranking(const std::vector<RankingExample>& batch,
                                          const std::vector<LossTerm>& schedule,
                                          const std::map<Task, HeadParams>& heads, double eta) {
    if (batch.empty()) throw std::invalid_argument("total_loss_ranking: empty batch");
    TotalLossResult out;
    std::vector<Tensor> terms;
    for (const LossTerm& term : schedule) {
        auto hit = heads.find(term.task);
        if (hit == heads.end()) {
            throw std::invalid_argument(std::string("total_loss_ranking: no head for ") +
                                        task_name(term.task));
        }
        LossBreakdownEntry entry;
        entry.block = term.block;
        entry.task = term.task;
        std::vector<Tensor> step_terms;
        double bce_total = 0.0, scl_total = 0.0;
        for (const RankingExample& ex : batch) {
            if (term.block < 0 || term.block >= static_cast<int>(ex.blocks.blocks.size())) {
                throw std::invalid_argument("total_loss_ranking: schedule block out of range");
            }
            auto lit = ex.labels.find(term.task);
            if (lit == ex.labels.end()) {
                throw std::invalid_argument(std::string("total_loss_ranking: no labels for ") +
                                            task_name(term.task));
            }
            Tensor scores = rank_scores(ex.blocks.blocks[static_cast<std::size_t>(term.block)],
                                        hit->second);
            Tensor b = bce(scores, lit->second);
            ContrastiveResult c = scl(scores, lit->second, eta);
            bce_total += b.at(0);
            scl_total += c.loss.at(0);
            out.flagged += c.flagged;
            step_terms.push_back(add(b, c.loss));
        }
        entry.bce = bce_total;
        entry.contrastive = scl_total;
        out.breakdown.push_back(entry);
        terms.push_back(add_n(step_terms));
    }
    out.loss = add_n(terms);
    return out;
}

// Spec-shaped entry point: progressive assignment, task k on block k.
inline TotalLossResult total_loss(const std::vector<RetrievalExample>& batch,
                                  const TaskAssignment& assignment, double eta) {
    for (const auto& ex : batch) {
        if (ex.blocks.steps() != assignment.steps()) {
            throw std::invalid_argument("total_loss: assignment length " +
                                        std::to_string(assignment.steps()) + " vs " +
                                        std::to_string(ex.blocks.steps()) + " blocks");
        }
    }
    return total_loss_retrieval(batch, progressive_schedule(assignment), eta);
}

inline TotalLossResult total_loss(const std::vector<RankingExample>& batch,
                                  const TaskAssignment& assignment,
                                  const std::map<Task, HeadParams>& heads, double eta) {
    for (const auto& ex : batch) {
        if (ex.blocks.steps() != assignment.steps()) {
            throw std::invalid_argument("total_loss: assignment length " +
                                        std::to_string(assignment.steps()) + " vs " +
                                        std::to_string(ex.blocks.steps()) + " blocks");
        }
    }
    return total_loss_ranking(batch, progressive_schedule(assignment), heads, eta);
}

}  // namespace onepiece
