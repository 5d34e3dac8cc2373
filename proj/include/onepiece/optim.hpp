#pragma once
// Parameter storage, first-order optimizer, and the finite-difference
// gradient checker used as the test oracle for everything differentiable.

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "onepiece/rng.hpp"
#include "onepiece/tensor.hpp"

namespace onepiece {

struct ParamEntry {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> m;  // first moment (adaptive mode)
    std::vector<double> v;  // second moment
};

class ParamStore {
public:
    void add(const std::string& name, std::vector<int> shape, std::vector<double> values) {
        if (entries_.count(name)) throw std::invalid_argument("param exists: " + name);
        std::size_t n = Tape::numel_of(shape);
        if (values.size() != n) throw std::invalid_argument("param size mismatch: " + name);
        entries_[name] = ParamEntry{std::move(shape), std::move(values), {}, {}};
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    ParamEntry& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::invalid_argument("unknown param: " + name);
        return it->second;
    }
    const ParamEntry& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::invalid_argument("unknown param: " + name);
        return it->second;
    }

    std::map<std::string, ParamEntry>& entries() { return entries_; }
    const std::map<std::string, ParamEntry>& entries() const { return entries_; }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& [k, e] : entries_) n += e.value.size();
        return n;
    }

private:
    std::map<std::string, ParamEntry> entries_;
};

// Leaves bound for one tape, keyed by parameter name. Used both by training
// (to read gradients back out) and by grad_check.
using Binding = std::map<std::string, Tensor>;

inline Tensor bind_param(Tape& tape, ParamStore& store, const std::string& name, bool needs_grad,
                         Binding* binding) {
    const ParamEntry& e = store.at(name);
    Tensor t = tape.leaf(e.shape, e.value, needs_grad);
    if (binding) (*binding)[name] = t;
    return t;
}

struct OptimizerConfig {
    enum class Mode { plain, adaptive };
    Mode mode = Mode::adaptive;
    double lr = 1e-3;
    double beta1 = 0.9;    // first-moment decay
    double beta2 = 0.999;  // second-moment decay
    double eps = 1e-8;
    double clip_norm = 0.0;  // global L2 gradient clip; 0 disables
};

// Deterministic given its state: plain mode is p -= lr*g, adaptive mode is
// the bias-corrected moment update with the configured decay constants.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

    const OptimizerConfig& config() const { return cfg_; }
    long long steps_taken() const { return t_; }
    void set_lr(double lr) { cfg_.lr = lr; }

    void step(ParamStore& store, const std::map<std::string, std::vector<double>>& grads) {
        ++t_;
        double scale = 1.0;
        if (cfg_.clip_norm > 0.0) {
            double sq = 0.0;
            for (const auto& [name, g] : grads) {
                for (double gv : g) sq += gv * gv;
            }
            double norm = std::sqrt(sq);
            if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
        }
        for (const auto& [name, g] : grads) {
            ParamEntry& e = store.at(name);
            if (g.size() != e.value.size()) {
                throw std::invalid_argument("optimizer: gradient size mismatch for " + name);
            }
            for (double gv : g) {
                if (!std::isfinite(gv)) {
                    throw std::runtime_error("optimizer: non-finite gradient for parameter " + name);
                }
            }
            if (cfg_.mode == OptimizerConfig::Mode::plain) {
                for (std::size_t i = 0; i < g.size(); ++i) e.value[i] -= cfg_.lr * scale * g[i];
            } else {
                if (e.m.size() != g.size()) {
                    e.m.assign(g.size(), 0.0);
                    e.v.assign(g.size(), 0.0);
                }
                double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
                double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
                for (std::size_t i = 0; i < g.size(); ++i) {
                    double gc = scale * g[i];
                    e.m[i] = cfg_.beta1 * e.m[i] + (1.0 - cfg_.beta1) * gc;
                    e.v[i] = cfg_.beta2 * e.v[i] + (1.0 - cfg_.beta2) * gc * gc;
                    double mhat = e.m[i] / bc1;
                    double vhat = e.v[i] / bc2;
                    e.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                }
            }
        }
    }

private:
    OptimizerConfig cfg_;
    long long t_ = 0;
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    int worst_index = -1;
};

// Compares reverse-mode gradients against central finite differences over
// every scalar of every parameter the builder touches. The builder must
// construct a scalar loss on the given tape, reading parameter values live
// from the store and registering its leaves in the binding.
inline GradCheckResult grad_check(
    const std::function<Tensor(Tape&, Binding&)>& build, ParamStore& store, double h = 1e-4) {
    Tape tape;
    Binding binding;
    Tensor loss = build(tape, binding);
    if (loss.numel() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
    tape.backward(loss);

    std::map<std::string, std::vector<double>> analytic;
    for (const auto& [name, t] : binding) {
        if (t.needs_grad()) analytic[name] = t.grad();
    }

    auto eval = [&]() {
        Tape t2;
        Binding b2;
        return build(t2, b2).at(0);
    };

    GradCheckResult res;
    for (auto& [name, e] : store.entries()) {
        auto it = analytic.find(name);
        for (std::size_t i = 0; i < e.value.size(); ++i) {
            double ad = (it == analytic.end()) ? 0.0 : it->second[i];
            double orig = e.value[i];
            e.value[i] = orig + h;
            double fp = eval();
            e.value[i] = orig - h;
            double fm = eval();
            e.value[i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double rel = std::abs(ad - fd) / (std::abs(fd) + 1e-8);
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = name;
                res.worst_index = static_cast<int>(i);
            }
        }
    }
    return res;
}

// Gaussian init helper used across modules.
inline std::vector<double> gaussian_init(std::size_t n, double sigma, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(0.0, sigma);
    return v;
}

}  // namespace onepiece
