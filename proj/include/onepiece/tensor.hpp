#pragma once
// Dense 64-bit tensors with reverse-mode differentiation on a tape.
//
// A Tape owns all tensor storage for one computation; Tensor is a cheap
// handle (tape pointer + node id). Operations record backward closures on
// the tape when any input requires gradients, so replaying the op list in
// reverse order implements backpropagation. One tape is built and
// differentiated by one logical thread; distinct tapes are independent.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace onepiece {

// Multiply-accumulate counter for the complexity accountant. Incremented by
// the matrix-product kernels (matmul family and attention score/context
// sums); elementwise ops, normalizations and exponentials are not counted.
inline thread_local std::uint64_t g_mac_count = 0;

inline void mac_reset() { g_mac_count = 0; }
inline std::uint64_t mac_count() { return g_mac_count; }

// Boolean allow-matrix over a token sequence: allow[r*size+c] == 1 means
// row r may attend to column c.
struct AttentionMask {
    int size = 0;
    std::vector<std::uint8_t> allow;

    AttentionMask() = default;
    AttentionMask(int n, bool allow_all)
        : size(n), allow(static_cast<std::size_t>(n) * n, allow_all ? 1 : 0) {}

    bool at(int r, int c) const {
        return allow[static_cast<std::size_t>(r) * size + c] != 0;
    }
    void set(int r, int c, bool v) {
        allow[static_cast<std::size_t>(r) * size + c] = v ? 1 : 0;
    }
    const std::uint8_t* row(int r) const {
        return allow.data() + static_cast<std::size_t>(r) * size;
    }

    // Every row must keep at least one allowed column.
    void validate() const {
        for (int r = 0; r < size; ++r) {
            const std::uint8_t* a = row(r);
            bool any = false;
            for (int c = 0; c < size; ++c) any = any || a[c];
            if (!any) {
                throw std::invalid_argument("AttentionMask: row " + std::to_string(r) +
                                            " has no allowed columns");
            }
        }
    }
};

class Tape;

class Tensor {
public:
    Tensor() = default;
    Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

    bool defined() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int id() const { return id_; }

    const std::vector<int>& shape() const;
    int rows() const;  // 1-D tensors count as one row
    int cols() const;
    int numel() const;
    bool needs_grad() const;

    const std::vector<double>& val() const;
    std::vector<double>& val();
    const std::vector<double>& grad() const;

    double at(int i) const { return val()[static_cast<std::size_t>(i)]; }
    double at(int i, int j) const {
        return val()[static_cast<std::size_t>(i) * cols() + j];
    }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    struct Node {
        std::vector<int> shape;
        std::vector<double> val;
        std::vector<double> grad;  // allocated only when needs_grad
        bool needs_grad = false;
    };

    Tensor leaf(std::vector<int> shape, std::vector<double> values, bool needs_grad) {
        std::size_t n = numel_of(shape);
        if (values.size() != n) {
            throw std::invalid_argument("Tape::leaf: " + std::to_string(values.size()) +
                                        " values for shape of " + std::to_string(n));
        }
        int id = make_node(std::move(shape), needs_grad);
        nodes_[static_cast<std::size_t>(id)].val = std::move(values);
        return Tensor(this, id);
    }

    Tensor zeros(std::vector<int> shape, bool needs_grad = false) {
        std::size_t n = numel_of(shape);
        int id = make_node(std::move(shape), needs_grad);
        nodes_[static_cast<std::size_t>(id)].val.assign(n, 0.0);
        return Tensor(this, id);
    }

    Tensor scalar(double v, bool needs_grad = false) {
        return leaf({1}, {v}, needs_grad);
    }

    // Replays recorded operations in exact reverse order of recording.
    void backward(Tensor root) {
        if (root.tape() != this) throw std::invalid_argument("backward: foreign tensor");
        Node& r = node(root.id());
        if (r.val.size() != 1) throw std::invalid_argument("backward: root must be scalar");
        if (!r.needs_grad) throw std::invalid_argument("backward: root does not require grad");
        r.grad.assign(1, 1.0);
        for (std::size_t i = ops_.size(); i-- > 0;) ops_[i]();
    }

    void clear() {
        nodes_.clear();
        ops_.clear();
    }

    std::size_t num_nodes() const { return nodes_.size(); }
    std::size_t num_ops() const { return ops_.size(); }

    // --- internal, used by the op implementations ---
    int make_node(std::vector<int> shape, bool needs_grad) {
        std::size_t n = numel_of(shape);
        Node node;
        node.shape = std::move(shape);
        node.needs_grad = needs_grad;
        node.val.resize(n);
        if (needs_grad) node.grad.assign(n, 0.0);
        nodes_.push_back(std::move(node));
        return static_cast<int>(nodes_.size()) - 1;
    }
    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

    static std::size_t numel_of(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("Tape: nonpositive dimension");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

private:
    std::vector<Node> nodes_;
    std::vector<std::function<void()>> ops_;
};

inline const std::vector<int>& Tensor::shape() const { return tape_->node(id_).shape; }
inline int Tensor::rows() const {
    const auto& s = shape();
    return s.size() == 2 ? s[0] : 1;
}
inline int Tensor::cols() const { return shape().back(); }
inline int Tensor::numel() const { return static_cast<int>(tape_->node(id_).val.size()); }
inline bool Tensor::needs_grad() const { return tape_->node(id_).needs_grad; }
inline const std::vector<double>& Tensor::val() const { return tape_->node(id_).val; }
inline std::vector<double>& Tensor::val() { return tape_->node(id_).val; }
inline const std::vector<double>& Tensor::grad() const { return tape_->node(id_).grad; }

namespace detail {

inline std::string shape_str(const Tensor& t) {
    std::string s = "(";
    const auto& sh = t.shape();
    for (std::size_t i = 0; i < sh.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(sh[i]);
    }
    return s + ")";
}

inline Tape* same_tape(const Tensor& a, const Tensor& b) {
    if (a.tape() != b.tape()) throw std::invalid_argument("operands on different tapes");
    return a.tape();
}

inline void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw std::runtime_error(std::string("non-finite value in ") + what);
    }
}

}  // namespace detail

inline void assert_all_finite(const Tensor& t, const char* what) {
    detail::check_finite(t.val(), what);
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Tensor add(Tensor a, Tensor b) {
    Tape* tp = detail::same_tape(a, b);
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("add: shape mismatch " + detail::shape_str(a) + " vs " +
                                    detail::shape_str(b));
    }
    bool ng = a.needs_grad() || b.needs_grad();
    int id = tp->make_node(a.shape(), ng);
    auto& out = tp->node(id).val;
    const auto& av = a.val();
    const auto& bv = b.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    if (ng) {
        int aid = a.id(), bid = b.id();
        tp->record([tp, id, aid, bid] {
            const auto& g = tp->node(id).grad;
            if (tp->node(aid).needs_grad) {
                auto& ga = tp->node(aid).grad;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (tp->node(bid).needs_grad) {
                auto& gb = tp->node(bid).grad;
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return Tensor(tp, id);
}

inline Tensor sub(Tensor a, Tensor b) {
    Tape* tp = detail::same_tape(a, b);
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("sub: shape mismatch " + detail::shape_str(a) + " vs " +
                                    detail::shape_str(b));
    }
    bool ng = a.needs_grad() || b.needs_grad();
    int id = tp->make_node(a.shape(), ng);
    auto& out = tp->node(id).val;
    const auto& av = a.val();
    const auto& bv = b.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    if (ng) {
        int aid = a.id(), bid = b.id();
        tp->record([tp, id, aid, bid] {
            const auto& g = tp->node(id).grad;
            if (tp->node(aid).needs_grad) {
                auto& ga = tp->node(aid).grad;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (tp->node(bid).needs_grad) {
                auto& gb = tp->node(bid).grad;
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return Tensor(tp, id);
}

inline Tensor scale(Tensor a, double s) {
    Tape* tp = a.tape();
    bool ng = a.needs_grad();
    int id = tp->make_node(a.shape(), ng);
    auto& out = tp->node(id).val;
    const auto& av = a.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    if (ng) {
        int aid = a.id();
        tp->record([tp, id, aid, s] {
            const auto& g = tp->node(id).grad;
            auto& ga = tp->node(aid).grad;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
        });
    }
    return Tensor(tp, id);
}

// X[m x d] + v broadcast to every row; v may be shaped {d} or {1, d}.
inline Tensor add_rowvec(Tensor x, Tensor v) {
    Tape* tp = detail::same_tape(x, v);
    int m = x.rows(), d = x.cols();
    if (v.numel() != d) {
        throw std::invalid_argument("add_rowvec: row " + detail::shape_str(v) +
                                    " does not match " + detail::shape_str(x));
    }
    bool ng = x.needs_grad() || v.needs_grad();
    int id = tp->make_node(x.shape(), ng);
    auto& out = tp->node(id).val;
    const auto& xv = x.val();
    const auto& vv = v.val();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < d; ++j) {
            out[static_cast<std::size_t>(i) * d + j] =
                xv[static_cast<std::size_t>(i) * d + j] + vv[static_cast<std::size_t>(j)];
        }
    }
    if (ng) {
        int xid = x.id(), vid = v.id();
        tp->record([tp, id, xid, vid, m, d] {
            const auto& g = tp->node(id).grad;
            if (tp->node(xid).needs_grad) {
                auto& gx = tp->node(xid).grad;
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (tp->node(vid).needs_grad) {
                auto& gv = tp->node(vid).grad;
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < d; ++j) {
                        gv[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * d + j];
                    }
                }
            }
        });
    }
    return Tensor(tp, id);
}

// x + s broadcast, s scalar tensor.
inline Tensor add_broadcast_scalar(Tensor x, Tensor s) {
    Tape* tp = detail::same_tape(x, s);
    if (s.numel() != 1) throw std::invalid_argument("add_broadcast_scalar: s must be scalar");
    bool ng = x.needs_grad() || s.needs_grad();
    int id = tp->make_node(x.shape(), ng);
    auto& out = tp->node(id).val;
    const auto& xv = x.val();
    double sv = s.at(0);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + sv;
    if (ng) {
        int xid = x.id(), sid = s.id();
        tp->record([tp, id, xid, sid] {
            const auto& g = tp->node(id).grad;
            if (tp->node(xid).needs_grad) {
                auto& gx = tp->node(xid).grad;
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (tp->node(sid).needs_grad) {
                auto& gs = tp->node(sid).grad;
                for (std::size_t i = 0; i < g.size(); ++i) gs[0] += g[i];
            }
        });
    }
    return Tensor(tp, id);
}

// ---------------------------------------------------------------------------
// Matrix products (these increment the MAC counter)
// ---------------------------------------------------------------------------

inline Tensor matmul(Tensor a, Tensor b) {
    Tape* tp = detail::same_tape(a, b);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: shape mismatch " + detail::shape_str(a) + " * " +
                                    detail::shape_str(b));
    }
    int m = a.rows(), k = a.cols(), n = b.cols();
    g_mac_count += static_cast<std::uint64_t>(m) * k * n;
    bool ng = a.needs_grad() || b.needs_grad();
    int id = tp->make_node({m, n}, ng);
    auto& out = tp->node(id).val;
    const double* av = a.val().data();
    const double* bv = b.val().data();
    std::fill(out.begin(), out.end(), 0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = av + static_cast<std::size_t>(i) * k;
        double* orow = out.data() + static_cast<std::size_t>(i) * n;
        for (int t = 0; t < k; ++t) {
            double aval = arow[t];
            const double* brow = bv + static_cast<std::size_t>(t) * n;
            for (int j = 0; j < n; ++j) orow[j] += aval * brow[j];
        }
    }
    if (ng) {
        int aid = a.id(), bid = b.id();
        tp->record([tp, id, aid, bid, m, k, n] {
            const double* g = tp->node(id).grad.data();
            if (tp->node(aid).needs_grad) {
                // dA = dC * B^T
                double* ga = tp->node(aid).grad.data();
                const double* bv2 = tp->node(bid).val.data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = g + static_cast<std::size_t>(i) * n;
                    double* garow = ga + static_cast<std::size_t>(i) * k;
                    for (int t = 0; t < k; ++t) {
                        const double* brow = bv2 + static_cast<std::size_t>(t) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        garow[t] += acc;
                    }
                }
            }
            if (tp->node(bid).needs_grad) {
                // dB = A^T * dC
                double* gb = tp->node(bid).grad.data();
                const double* av2 = tp->node(aid).val.data();
                for (int i = 0; i < m; ++i) {
                    const double* arow = av2 + static_cast<std::size_t>(i) * k;
                    const double* grow = g + static_cast<std::size_t>(i) * n;
                    for (int t = 0; t < k; ++t) {
                        double aval = arow[t];
                        double* gbrow = gb + static_cast<std::size_t>(t) * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += aval * grow[j];
                    }
                }
            }
        });
    }
    return Tensor(tp, id);
}

// A[m x k] * B[n x k]^T -> [m x n]; rows of both operands stay contiguous.
inline Tensor matmul_nt(Tensor a, Tensor b) {
    Tape* tp = detail::same_tape(a, b);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols()) {
        throw std::invalid_argument("matmul_nt: shape mismatch " + detail::shape_str(a) +
                                    " * " + detail::shape_str(b) + "^T");
    }
    int m = a.rows(), k = a.cols(), n = b.rows();
    g_mac_count += static_cast<std::uint64_t>(m) * k * n;
    bool ng = a.needs_grad() || b.needs_grad();
    int id = tp->make_node({m, n}, ng);
    auto& out = tp->node(id).val;
    const double* av = a.val().data();
    const double* bv = b.val().data();
    for (int i = 0; i < m; ++i) {
        const double* arow = av + static_cast<std::size_t>(i) * k;
        double* orow = out.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = bv + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += arow[t] * brow[t];
            orow[j] = acc;
        }
    }
    if (ng) {
        int aid = a.id(), bid = b.id();
        tp->record([tp, id, aid, bid, m, k, n] {
            const double* g = tp->node(id).grad.data();
            if (tp->node(aid).needs_grad) {
                // dA = dC * B
                double* ga = tp->node(aid).grad.data();
                const double* bv2 = tp->node(bid).val.data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = g + static_cast<std::size_t>(i) * n;
                    double* garow = ga + static_cast<std::size_t>(i) * k;
                    for (int j = 0; j < n; ++j) {
                        double gval = grow[j];
                        const double* brow = bv2 + static_cast<std::size_t>(j) * k;
                        for (int t = 0; t < k; ++t) garow[t] += gval * brow[t];
                    }
                }
            }
            if (tp->node(bid).needs_grad) {
                // dB = dC^T * A
                double* gb = tp->node(bid).grad.data();
                const double* av2 = tp->node(aid).val.data();
                for (int i = 0; i < m; ++i) {
                    const double* arow = av2 + static_cast<std::size_t>(i) * k;
                    const double* grow = g + static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) {
                        double gval = grow[j];
                        double* gbrow = gb + static_cast<std::size_t>(j) * k;
                        for (int t = 0; t < k; ++t) gbrow[t] += gval * arow[t];
                    }
                }
            }
        });
    }
    return Tensor(tp, id);
}

inline Tensor matvec(Tensor a, Tensor x) {
    Tape* tp = detail::same_tape(a, x);
    if (a.shape().size() != 2 || a.cols() != x.numel()) {
        throw std::invalid_argument("matvec: shape mismatch " + detail::shape_str(a) + " * " +
                                    detail::shape_str(x));
    }
    int m = a.rows(), k = a.cols();
    g_mac_count += static_cast<std::uint64_t>(m) * k;
    bool ng = a.needs_grad() || x.needs_grad();
    int id = tp->make_node({m}, ng);
    auto& out = tp->node(id).val;
    const double* av = a.val().data();
    const double* xv = x.val().data();
    for (int i = 0; i < m; ++i) {
        const double* arow = av + static_cast<std::size_t>(i) * k;
        double acc = 0.0;
        for (int t = 0; t < k; ++t) acc += arow[t] * xv[t];
        out[static_cast<std::size_t>(i)] = acc;
    }
    if (ng) {
        int aid = a.id(), xid = x.id();
        tp->record([tp, id, aid, xid, m, k] {
            const double* g = tp->node(id).grad.data();
            if (tp->node(aid).needs_grad) {
                double* ga = tp->node(aid).grad.data();
                const double* xv2 = tp->node(xid).val.data();
                for (int i = 0; i < m; ++i) {
                    double gval = g[i];
                    double* garow = ga + static_cast<std::size_t>(i) * k;
                    for (int t = 0; t < k; ++t) garow[t] += gval * xv2[t];
                }
            }
            if (tp->node(xid).needs_grad) {
                double* gx = tp->node(xid).grad.data();
                const double* av2 = tp->node(aid).val.data();
                for (int i = 0; i < m; ++i) {
                    double gval = g[i];
                    const double* arow = av2 + static_cast<std::size_t>(i) * k;
                    for (int t = 0; t < k; ++t) gx[t] += gval * arow[t];
                }
            }
        });
    }
    return Tensor(tp, id);
}

inline Tensor dot(Tensor a, Tensor b) {
    Tape* tp = detail::same_tape(a, b);
    if (a.numel() != b.numel()) {
        throw std::invalid_argument("dot: length mismatch " + detail::shape_str(a) + " vs " +
                                    detail::shape_str(b));
    }
    int n = a.numel();
    g_mac_count += static_cast<std::uint64_t>(n);
    bool ng = a.needs_grad() || b.needs_grad();
    int id = tp->make_node({1}, ng);
    const auto& av = a.val();
    const auto& bv = b.val();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += av[static_cast<std::size_t>(i)] * bv[static_cast<std::size_t>(i)];
    tp->node(id).val[0] = acc;
    if (ng) {
        int aid = a.id(), bid = b.id();
        tp->record([tp, id, aid, bid, n] {
            double g = tp->node(id).grad[0];
            if (tp->node(aid).needs_grad) {
                auto& ga = tp->node(aid).grad;
                const auto& bv2 = tp->node(bid).val;
                for (int i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += g * bv2[static_cast<std::size_t>(i)];
            }
            if (tp->node(bid).needs_grad) {
                auto& gb = tp->node(bid).grad;
                const auto& av2 = tp->node(aid).val;
                for (int i = 0; i < n; ++i) gb[static_cast<std::size_t>(i)] += g * av2[static_cast<std::size_t>(i)];
            }
        });
    }
    return Tensor(tp, id);
}

// ---------------------------------------------------------------------------
// Concatenation / slicing / gathering
// ---------------------------------------------------------------------------

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    Tape* tp = parts[0].tape();
    int d = parts[0].cols();
    int m = 0;
    bool ng = false;
    for (const Tensor& t : parts) {
        if (t.tape() != tp) throw std::invalid_argument("concat_rows: mixed tapes");
        if (t.cols() != d) {
            throw std::invalid_argument("concat_rows: column mismatch " + detail::shape_str(t));
        }
        m += t.rows();
        ng = ng || t.needs_grad();
    }
    int id = tp->make_node({m, d}, ng);
    auto& out = tp->node(id).val;
    std::size_t off = 0;
    for (const Tensor& t : parts) {
        const auto& v = t.val();
        std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(off));
        off += v.size();
    }
    if (ng) {
        std::vector<int> ids;
        std::vector<int> sizes;
        for (const Tensor& t : parts) {
            ids.push_back(t.id());
            sizes.push_back(t.numel());
        }
        tp->record([tp, id, ids, sizes] {
            const auto& g = tp->node(id).grad;
            std::size_t off2 = 0;
            for (std::size_t p = 0; p < ids.size(); ++p) {
                auto& n = tp->node(ids[p]);
                if (n.needs_grad) {
                    for (int i = 0; i < sizes[p]; ++i) {
                        n.grad[static_cast<std::size_t>(i)] += g[off2 + static_cast<std::size_t>(i)];
                    }
                }
                off2 += static_cast<std::size_t>(sizes[p]);
            }
        });
    }
    return Tensor(tp, id);
}

inline Tensor slice_rows(Tensor x, int r0, int count) {
    Tape* tp = x.tape();
    int m = x.rows(), d = x.cols();
    if (r0 < 0 || count < 1 || r0 + count > m) {
        throw std::invalid_argument("slice_rows: [" + std::to_string(r0) + ", " +
                                    std::to_string(r0 + count) + ") out of " + std::to_string(m));
    }
    bool ng = x.needs_grad();
    int id = tp->make_node({count, d}, ng);
    auto& out = tp->node(id).val;
    const auto& xv = x.val();
    std::copy(xv.begin() + static_cast<std::ptrdiff_t>(r0) * d,
              xv.begin() + static_cast<std::ptrdiff_t>(r0 + count) * d, out.begin());
    if (ng) {
        int xid = x.id();
        tp->record([tp, id, xid, r0, count, d] {
            const auto& g = tp->node(id).grad;
            auto& gx = tp->node(xid).grad;
            for (int i = 0; i < count * d; ++i) {
                gx[static_cast<std::size_t>(r0) * d + i] += g[static_cast<std::size_t>(i)];
            }
        });
    }
    return Tensor(tp, id);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    Tape* tp = parts[0].tape();
    int m = parts[0].rows();
    int d = 0;
    bool ng = false;
    for (const Tensor& t : parts) {
        if (t.tape() != tp) throw std::invalid_argument("concat_cols: mixed tapes");
        if (t.rows() != m) {
            throw std::invalid_argument("concat_cols: row mismatch " + detail::shape_str(t));
        }
        d += t.cols();
        ng = ng || t.needs_grad();
    }
    int id = tp->make_node({m, d}, ng);
    auto& out = tp->node(id).val;
    int coff = 0;
    for (const Tensor& t : parts) {
        int tc = t.cols();
        const auto& v = t.val();
        for (int i = 0; i < m; ++i) {
            std::copy(v.begin() + static_cast<std::ptrdiff_t>(i) * tc,
                      v.begin() + static_cast<std::ptrdiff_t>(i + 1) * tc,
                      out.begin() + static_cast<std::ptrdiff_t>(i) * d + coff);
        }
        coff += tc;
    }
    if (ng) {
        std::vector<int> ids, widths;
        for (const Tensor& t : parts) {
            ids.push_back(t.id());
            widths.push_back(t.cols());
        }
        tp->record([tp, id, ids, widths, m, d] {
            const auto& g = tp->node(id).grad;
            int coff2 = 0;
            for (std::size_t p = 0; p < ids.size(); ++p) {
                auto& n = tp->node(ids[p]);
                int w = widths[p];
                if (n.needs_grad) {
                    for (int i = 0; i < m; ++i) {
                        for (int j = 0; j < w; ++j) {
                            n.grad[static_cast<std::size_t>(i) * w + j] +=
                                g[static_cast<std::size_t>(i) * d + coff2 + j];
                        }
                    }
                }
                coff2 += w;
            }
        });
    }
    return Tensor(tp, id);
}

inline Tensor slice_cols(Tensor x, int c0, int count) {
    Tape* tp = x.tape();
    int m = x.rows(), d = x.cols();
    if (c0 < 0 || count < 1 || c0 + count > d) {
        throw std::invalid_argument("slice_cols: [" + std::to_string(c0) + ", " +
                                    std::to_string(c0 + count) + ") out of " + std::to_string(d));
    }
    bool ng = x.needs_grad();
    int id = tp->make_node({m, count}, ng);
    auto& out = tp->node(id).val;
    const auto& xv = x.val();
    for (int i = 0; i < m; ++i) {
        std::copy(xv.begin() + static_cast<std::ptrdiff_t>(i) * d + c0,
                  xv.begin() + static_cast<std::ptrdiff_t>(i) * d + c0 + count,
                  out.begin() + static_cast<std::ptrdiff_t>(i) * count);
    }
    if (ng) {
        int xid = x.id();
        tp->record([tp, id, xid, c0, count, m, d] {
            const auto& g = tp->node(id).grad;
            auto& gx = tp->node(xid).grad;
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < count; ++j) {
                    gx[static_cast<std::size_t>(i) * d + c0 + j] +=
                        g[static_cast<std::size_t>(i) * count + j];
                }
            }
        });
    }
    return Tensor(tp, id);
}

// Rows of `table` picked by index; backward scatter-adds into the table.
inline Tensor gather_rows(Tensor table, const std::vector<int>& ids, const char* what = "gather_rows") {
    Tape* tp = table.tape();
    if (table.shape().size() != 2) throw std::invalid_argument("gather_rows: table must be 2-D");
    int v = table.rows(), e = table.cols();
    if (ids.empty()) throw std::invalid_argument(std::string(what) + ": empty id list");
    for (int i : ids) {
        if (i < 0 || i >= v) {
            throw std::invalid_argument(std::string(what) + ": id " + std::to_string(i) +
                                        " outside vocabulary of " + std::to_string(v));
        }
    }
    bool ng = table.needs_grad();
    int m = static_cast<int>(ids.size());
    int id = tp->make_node({m, e}, ng);
    auto& out = tp->node(id).val;
    const auto& tv = table.val();
    for (int r = 0; r < m; ++r) {
        std::copy(tv.begin() + static_cast<std::ptrdiff_t>(ids[static_cast<std::size_t>(r)]) * e,
                  tv.begin() + static_cast<std::ptrdiff_t>(ids[static_cast<std::size_t>(r)] + 1) * e,
                  out.begin() + static_cast<std::ptrdiff_t>(r) * e);
    }
    if (ng) {
        int tid = table.id();
        std::vector<int> idcopy = ids;
        tp->record([tp, id, tid, idcopy, e] {
            const auto& g = tp->node(id).grad;
            auto& gt = tp->node(tid).grad;
            for (std::size_t r = 0; r < idcopy.size(); ++r) {
                for (int j = 0; j < e; ++j) {
                    gt[static_cast<std::size_t>(idcopy[r]) * e + j] += g[r * static_cast<std::size_t>(e) + j];
                }
            }
        });
    }
    return Tensor(tp, id);
}

inline Tensor gather(Tensor x, const std::vector<int>& idx) {
    Tape* tp = x.tape();
    int n = x.numel();
    if (idx.empty()) throw std::invalid_argument("gather: empty index list");
    for (int i : idx) {
        if (i < 0 || i >= n) throw std::invalid_argument("gather: index out of range");
    }
    bool ng = x.needs_grad();
    int id = tp->make_node({static_cast<int>(idx.size())}, ng);
    auto& out = tp->node(id).val;
    const auto& xv = x.val();
    for (std::size_t r = 0; r < idx.size(); ++r) out[r] = xv[static_cast<std::size_t>(idx[r])];
    if (ng) {
        int xid = x.id();
        std::vector<int> idcopy = idx;
        tp->record([tp, id, xid, idcopy] {
            const auto& g = tp->node(id).grad;
            auto& gx = tp->node(xid).grad;
            for (std::size_t r = 0; r < idcopy.size(); ++r) gx[static_cast<std::size_t>(idcopy[r])] += g[r];
        });
    }
    return Tensor(tp, id);
}

// ---------------------------------------------------------------------------
// Reductions and nonlinearities
// ---------------------------------------------------------------------------

inline Tensor sum_all(Tensor x) {
    Tape* tp = x.tape();
    bool ng = x.needs_grad();
    int id = tp->make_node({1}, ng);
    const auto& xv = x.val();
    double acc = 0.0;
    for (double v : xv) acc += v;
    tp->node(id).val[0] = acc;
    if (ng) {
        int xid = x.id();
        tp->record([tp, id, xid] {
            double g = tp->node(id).grad[0];
            auto& gx = tp->node(xid).grad;
            for (auto& gv : gx) gv += g;
        });
    }
    return Tensor(tp, id);
}

inline Tensor add_n(const std::vector<Tensor>& scalars) {
    if (scalars.empty()) throw std::invalid_argument("add_n: empty input");
    Tape* tp = scalars[0].tape();
    bool ng = false;
    double acc = 0.0;
    for (const Tensor& t : scalars) {
        if (t.tape() != tp) throw std::invalid_argument("add_n: mixed tapes");
        if (t.numel() != 1) throw std::invalid_argument("add_n: non-scalar input");
        acc += t.at(0);
        ng = ng || t.needs_grad();
    }
    int id = tp->make_node({1}, ng);
    tp->node(id).val[0] = acc;
    if (ng) {
        std::vector<int> ids;
        for (const Tensor& t : scalars) ids.push_back(t.id());
        tp->record([tp, id, ids] {
            double g = tp->node(id).grad[0];
            for (int sid : ids) {
                auto& n = tp->node(sid);
                if (n.needs_grad) n.grad[0] += g;
            }
        });
    }
    return Tensor(tp, id);
}

inline Tensor mean_rows(Tensor x) {
    Tape* tp = x.tape();
    if (x.shape().size() != 2) throw std::invalid_argument("mean_rows: 2-D input required");
    int m = x.rows(), d = x.cols();
    bool ng = x.needs_grad();
    int id = tp->make_node({d}, ng);
    auto& out = tp->node(id).val;
    const auto& xv = x.val();
    for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int i = 0; i < m; ++i) acc += xv[static_cast<std::size_t>(i) * d + j];
        out[static_cast<std::size_t>(j)] = acc / m;
    }
    if (ng) {
        int xid = x.id();
        tp->record([tp, id, xid, m, d] {
            const auto& g = tp->node(id).grad;
            auto& gx = tp->node(xid).grad;
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < d; ++j) {
                    gx[static_cast<std::size_t>(i) * d + j] += g[static_cast<std::size_t>(j)] / m;
                }
            }
        });
    }
    return Tensor(tp, id);
}

inline Tensor gelu(Tensor x) {
    Tape* tp = x.tape();
    bool ng = x.needs_grad();
    int id = tp->make_node(x.shape(), ng);
    auto& out = tp->node(id).val;
    const auto& xv = x.val();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
    }
    if (ng) {
        int xid = x.id();
        tp->record([tp, id, xid] {
            const auto& g = tp->node(id).grad;
            auto& gx = tp->node(xid).grad;
            const auto& xv2 = tp->node(xid).val;
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            for (std::size_t i = 0; i < g.size(); ++i) {
                double x2 = xv2[i];
                double phi = 0.5 * (1.0 + std::erf(x2 * 0.70710678118654752440));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * x2 * x2);
                gx[i] += g[i] * (phi + x2 * pdf);
            }
        });
    }
    return Tensor(tp, id);
}

// Per-row layer normalization with population variance:
// y = gain * (x - mean) / sqrt(var + eps) + bias.
inline Tensor layer_norm_rows(Tensor x, Tensor gain, Tensor bias, double eps) {
    Tape* tp = detail::same_tape(x, gain);
    detail::same_tape(x, bias);
    int m = x.rows(), d = x.cols();
    if (gain.numel() != d || bias.numel() != d) {
        throw std::invalid_argument("layer_norm: gain/bias must have " + std::to_string(d) +
                                    " entries");
    }
    if (d < 1 || eps <= 0.0) throw std::invalid_argument("layer_norm: need d >= 1 and eps > 0");
    bool ng = x.needs_grad() || gain.needs_grad() || bias.needs_grad();
    int id = tp->make_node(x.shape(), ng);
    auto& out = tp->node(id).val;
    const auto& xv = x.val();
    const auto& gv = gain.val();
    const auto& bv = bias.val();
    std::vector<double> inv_sigma(static_cast<std::size_t>(m));
    std::vector<double> means(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        const double* row = xv.data() + static_cast<std::size_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = row[j] - mu;
            var += c * c;
        }
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        means[static_cast<std::size_t>(i)] = mu;
        inv_sigma[static_cast<std::size_t>(i)] = is;
        double* orow = out.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) orow[j] = gv[static_cast<std::size_t>(j)] * (row[j] - mu) * is + bv[static_cast<std::size_t>(j)];
    }
    if (ng) {
        int xid = x.id(), gid = gain.id(), bid = bias.id();
        tp->record([tp, id, xid, gid, bid, m, d, means, inv_sigma] {
            const auto& g = tp->node(id).grad;
            const auto& xv2 = tp->node(xid).val;
            const auto& gv2 = tp->node(gid).val;
            for (int i = 0; i < m; ++i) {
                const double* grow = g.data() + static_cast<std::size_t>(i) * d;
                const double* xrow = xv2.data() + static_cast<std::size_t>(i) * d;
                double mu = means[static_cast<std::size_t>(i)];
                double is = inv_sigma[static_cast<std::size_t>(i)];
                if (tp->node(gid).needs_grad || tp->node(bid).needs_grad) {
                    for (int j = 0; j < d; ++j) {
                        double xhat = (xrow[j] - mu) * is;
                        if (tp->node(gid).needs_grad) tp->node(gid).grad[static_cast<std::size_t>(j)] += grow[j] * xhat;
                        if (tp->node(bid).needs_grad) tp->node(bid).grad[static_cast<std::size_t>(j)] += grow[j];
                    }
                }
                if (tp->node(xid).needs_grad) {
                    double mean_t = 0.0, mean_tx = 0.0;
                    for (int j = 0; j < d; ++j) {
                        double t = grow[j] * gv2[static_cast<std::size_t>(j)];
                        double xhat = (xrow[j] - mu) * is;
                        mean_t += t;
                        mean_tx += t * xhat;
                    }
                    mean_t /= d;
                    mean_tx /= d;
                    auto& gx = tp->node(xid).grad;
                    for (int j = 0; j < d; ++j) {
                        double t = grow[j] * gv2[static_cast<std::size_t>(j)];
                        double xhat = (xrow[j] - mu) * is;
                        gx[static_cast<std::size_t>(i) * d + j] += (t - mean_t - xhat * mean_tx) * is;
                    }
                }
            }
        });
    }
    return Tensor(tp, id);
}

inline Tensor layer_norm(Tensor x, Tensor gain, Tensor bias, double eps) {
    if (x.shape().size() != 1) throw std::invalid_argument("layer_norm: 1-D input expected");
    Tensor row = concat_rows({x});  // [1 x d]
    Tensor y = layer_norm_rows(row, gain, bias, eps);
    return slice_rows(y, 0, 1);
}

// Softmax over allowed entries of a vector; disallowed outputs are exactly 0.
// Stabilized by the max allowed logit; the denominator is accumulated over
// value-sorted terms so equal multisets of logits sum identically.
inline Tensor masked_softmax(Tensor x, const std::vector<std::uint8_t>& allow) {
    Tape* tp = x.tape();
    int n = x.numel();
    if (static_cast<int>(allow.size()) != n) {
        throw std::invalid_argument("masked_softmax: mask length " + std::to_string(allow.size()) +
                                    " vs logits " + std::to_string(n));
    }
    bool any = false;
    for (auto a : allow) any = any || a;
    if (!any) throw std::invalid_argument("masked_softmax: all positions disallowed");
    bool ng = x.needs_grad();
    int id = tp->make_node(x.shape(), ng);
    auto& out = tp->node(id).val;
    const auto& xv = x.val();
    double mx = -1e300;
    for (int i = 0; i < n; ++i) {
        if (allow[static_cast<std::size_t>(i)]) mx = std::max(mx, xv[static_cast<std::size_t>(i)]);
    }
    std::vector<double> exps;
    exps.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double e = allow[static_cast<std::size_t>(i)] ? std::exp(xv[static_cast<std::size_t>(i)] - mx) : 0.0;
        out[static_cast<std::size_t>(i)] = e;
        if (allow[static_cast<std::size_t>(i)]) exps.push_back(e);
    }
    std::sort(exps.begin(), exps.end());
    double z = 0.0;
    for (double e : exps) z += e;
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] /= z;
    if (ng) {
        int xid = x.id();
        tp->record([tp, id, xid] {
            const auto& g = tp->node(id).grad;
            const auto& y = tp->node(id).val;
            auto& gx = tp->node(xid).grad;
            double s = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) s += y[i] * g[i];
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += y[i] * (g[i] - s);
        });
    }
    return Tensor(tp, id);
}

inline Tensor log_sum_exp(Tensor x) {
    Tape* tp = x.tape();
    int n = x.numel();
    bool ng = x.needs_grad();
    int id = tp->make_node({1}, ng);
    const auto& xv = x.val();
    double mx = -1e300;
    for (int i = 0; i < n; ++i) mx = std::max(mx, xv[static_cast<std::size_t>(i)]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(xv[static_cast<std::size_t>(i)] - mx);
    double v = mx + std::log(z);
    tp->node(id).val[0] = v;
    if (ng) {
        int xid = x.id();
        tp->record([tp, id, xid, v] {
            double g = tp->node(id).grad[0];
            auto& gx = tp->node(xid).grad;
            const auto& xv2 = tp->node(xid).val;
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * std::exp(xv2[i] - v);
        });
    }
    return Tensor(tp, id);
}

// Sum of stabilized binary cross-entropy terms with logit inputs.
inline Tensor bce_with_logits(Tensor logits, const std::vector<double>& labels) {
    Tape* tp = logits.tape();
    int n = logits.numel();
    if (n == 0 || labels.empty()) throw std::invalid_argument("bce: empty input");
    if (static_cast<int>(labels.size()) != n) {
        throw std::invalid_argument("bce: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(n) + " logits");
    }
    for (double y : labels) {
        if (y != 0.0 && y != 1.0) throw std::invalid_argument("bce: labels must be 0 or 1");
    }
    bool ng = logits.needs_grad();
    int id = tp->make_node({1}, ng);
    const auto& lv = logits.val();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double l = lv[static_cast<std::size_t>(i)];
        double y = labels[static_cast<std::size_t>(i)];
        acc += std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l)));
    }
    tp->node(id).val[0] = acc;
    if (ng) {
        int lid = logits.id();
        std::vector<double> ycopy = labels;
        tp->record([tp, id, lid, ycopy] {
            double g = tp->node(id).grad[0];
            auto& gl = tp->node(lid).grad;
            const auto& lv2 = tp->node(lid).val;
            for (std::size_t i = 0; i < gl.size(); ++i) {
                double s = 1.0 / (1.0 + std::exp(-lv2[i]));
                gl[i] += g * (s - ycopy[i]);
            }
        });
    }
    return Tensor(tp, id);
}

// ---------------------------------------------------------------------------
// Fused masked attention
// ---------------------------------------------------------------------------
//
// ctx = softmax(scale * Q K^T, mask) V for one head. Query rows i correspond
// to mask rows row0+i; keys cover mask columns [0, Tk). Scores and context
// sums run over allowed pairs only.
//
// Reductions over key positions are accumulated in a canonical order (sorted
// by attention weight, ties broken by value-row content) so that outputs are
// bitwise invariant under permutations of identical key/value content. This
// is what makes candidate-set scoring exactly order-free.
inline Tensor attend(Tensor q, Tensor k, Tensor v, const AttentionMask& mask, int row0,
                     double scale_factor, std::vector<double>* capture_weights = nullptr) {
    Tape* tp = detail::same_tape(q, k);
    detail::same_tape(q, v);
    int tq = q.rows(), dh = q.cols();
    int tk = k.rows(), dv = v.cols();
    if (k.cols() != dh) throw std::invalid_argument("attend: K width mismatch");
    if (v.rows() != tk) throw std::invalid_argument("attend: V rows mismatch");
    if (mask.size < row0 + tq || mask.size < tk) {
        throw std::invalid_argument("attend: mask of " + std::to_string(mask.size) +
                                    " too small for rows " + std::to_string(row0 + tq) +
                                    ", cols " + std::to_string(tk));
    }
    bool ng = q.needs_grad() || k.needs_grad() || v.needs_grad();
    int id = tp->make_node({tq, dv}, ng);
    auto& out = tp->node(id).val;
    const double* qv = q.val().data();
    const double* kv = k.val().data();
    const double* vv = v.val().data();

    std::vector<double> weights(static_cast<std::size_t>(tq) * tk, 0.0);
    // (exp value, column) pairs sorted ascending give one canonical order for
    // both the denominator and the context accumulation
    std::vector<std::pair<double, int>> terms;
    terms.reserve(static_cast<std::size_t>(tk));

    for (int i = 0; i < tq; ++i) {
        const std::uint8_t* allow = mask.row(row0 + i);
        const double* qrow = qv + static_cast<std::size_t>(i) * dh;
        terms.clear();
        double mx = -1e300;
        for (int j = 0; j < tk; ++j) {
            if (!allow[j]) continue;
            const double* krow = kv + static_cast<std::size_t>(j) * dh;
            double acc = 0.0;
            for (int t = 0; t < dh; ++t) acc += qrow[t] * krow[t];
            double logit = acc * scale_factor;
            terms.emplace_back(logit, j);
            mx = std::max(mx, logit);
        }
        if (terms.empty()) {
            throw std::invalid_argument("attend: row " + std::to_string(row0 + i) +
                                        " has no allowed columns");
        }
        g_mac_count += static_cast<std::uint64_t>(terms.size()) * dh;  // score dots
        for (auto& t : terms) t.first = std::exp(t.first - mx);
        std::sort(terms.begin(), terms.end(), [&](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            const double* va = vv + static_cast<std::size_t>(a.second) * dv;
            const double* vb = vv + static_cast<std::size_t>(b.second) * dv;
            for (int t = 0; t < dv; ++t) {
                if (va[t] != vb[t]) return va[t] < vb[t];
            }
            return false;
        });
        double z = 0.0;
        for (const auto& t : terms) z += t.first;

        double* wrow = weights.data() + static_cast<std::size_t>(i) * tk;
        double* orow = out.data() + static_cast<std::size_t>(i) * dv;
        std::fill(orow, orow + dv, 0.0);
        for (const auto& term : terms) {
            double w = term.first / z;
            wrow[term.second] = w;
            const double* vrow = vv + static_cast<std::size_t>(term.second) * dv;
            for (int t = 0; t < dv; ++t) orow[t] += w * vrow[t];
        }
        g_mac_count += static_cast<std::uint64_t>(terms.size()) * dv;
    }
    if (capture_weights) *capture_weights = weights;

    if (ng) {
        int qid = q.id(), kid = k.id(), vid = v.id();
        tp->record([tp, id, qid, kid, vid, weights = std::move(weights), tq, tk, dh, dv,
                    scale_factor] {
            const auto& g = tp->node(id).grad;
            const auto& qv2 = tp->node(qid).val;
            const auto& kv2 = tp->node(kid).val;
            const auto& vv2 = tp->node(vid).val;
            bool nq = tp->node(qid).needs_grad;
            bool nk = tp->node(kid).needs_grad;
            bool nv = tp->node(vid).needs_grad;
            std::vector<double> dlogit(static_cast<std::size_t>(tk));
            for (int i = 0; i < tq; ++i) {
                const double* grow = g.data() + static_cast<std::size_t>(i) * dv;
                const double* wrow = weights.data() + static_cast<std::size_t>(i) * tk;
                if (nv) {
                    auto& gv = tp->node(vid).grad;
                    for (int j = 0; j < tk; ++j) {
                        double w = wrow[j];
                        if (w == 0.0) continue;
                        for (int t = 0; t < dv; ++t) {
                            gv[static_cast<std::size_t>(j) * dv + t] += w * grow[t];
                        }
                    }
                }
                if (nq || nk) {
                    double dot_sum = 0.0;
                    for (int j = 0; j < tk; ++j) {
                        double w = wrow[j];
                        if (w == 0.0) {
                            dlogit[static_cast<std::size_t>(j)] = 0.0;
                            continue;
                        }
                        const double* vrow = vv2.data() + static_cast<std::size_t>(j) * dv;
                        double dw = 0.0;
                        for (int t = 0; t < dv; ++t) dw += grow[t] * vrow[t];
                        dlogit[static_cast<std::size_t>(j)] = dw;
                        dot_sum += w * dw;
                    }
                    for (int j = 0; j < tk; ++j) {
                        double w = wrow[j];
                        dlogit[static_cast<std::size_t>(j)] =
                            w == 0.0 ? 0.0 : w * (dlogit[static_cast<std::size_t>(j)] - dot_sum);
                    }
                    const double* qrow = qv2.data() + static_cast<std::size_t>(i) * dh;
                    for (int j = 0; j < tk; ++j) {
                        double dl = dlogit[static_cast<std::size_t>(j)] * scale_factor;
                        if (dl == 0.0) continue;
                        const double* krow = kv2.data() + static_cast<std::size_t>(j) * dh;
                        if (nq) {
                            auto& gq = tp->node(qid).grad;
                            for (int t = 0; t < dh; ++t) {
                                gq[static_cast<std::size_t>(i) * dh + t] += dl * krow[t];
                            }
                        }
                        if (nk) {
                            auto& gk = tp->node(kid).grad;
                            for (int t = 0; t < dh; ++t) {
                                gk[static_cast<std::size_t>(j) * dh + t] += dl * qrow[t];
                            }
                        }
                    }
                }
            }
        });
    }
    return Tensor(tp, id);
}

}  // namespace onepiece
