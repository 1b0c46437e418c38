#pragma once

// Rank-4 float32 tensors (N,C,H,W) with reverse-mode autodiff.
//
// A Tensor is a cheap handle onto a shared Node. Ops build new nodes that
// keep handles to their parents plus a backward closure; backward() walks the
// graph in reverse topological order and accumulates into leaf grads.
// Recording only happens while grad mode is on AND some input requires grad,
// so eval-mode forwards leave no tape behind.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "falcon/errors.hpp"

namespace falcon {

enum class Mode { train, eval };

struct Shape {
    int n = 0, c = 0, h = 0, w = 0;

    std::int64_t numel() const {
        return std::int64_t(n) * c * h * w;
    }
    bool operator==(const Shape& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

inline void check_shape(const Shape& s, const char* who) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
        throw DimensionError(std::string(who) + ": all dims must be >= 1, got " + s.str());
}

// --- grad mode ---------------------------------------------------------

namespace detail {
inline bool& grad_enabled_flag() {
    thread_local bool on = true;
    return on;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// --- op-level parallelism ----------------------------------------------

// Thread cap for the heavy loops (conv/pool). 1 = serial, the default; 0 is
// resolved to hardware_concurrency by set_thread_count. Writes from parallel
// workers are always to disjoint ranges, so results are thread-count invariant.
namespace detail {
inline int& thread_count_ref() {
    static int n = 1;
    return n;
}
}  // namespace detail

inline int thread_count() { return detail::thread_count_ref(); }

inline void set_thread_count(int n) {
    if (n < 0) throw ParamError("set_thread_count: count must be >= 0, got " + std::to_string(n));
    if (n == 0) {
        unsigned hc = std::thread::hardware_concurrency();
        n = hc == 0 ? 1 : int(hc);
    }
    detail::thread_count_ref() = n;
}

template <typename Fn>
void parallel_for(std::int64_t count, Fn&& fn) {
    int threads = thread_count();
    if (threads <= 1 || count < 2) {
        for (std::int64_t i = 0; i < count; ++i) fn(i);
        return;
    }
    threads = int(std::min<std::int64_t>(threads, count));
    std::vector<std::thread> pool;
    pool.reserve(threads - 1);
    std::int64_t chunk = (count + threads - 1) / threads;
    auto run = [&fn](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) fn(i);
    };
    for (int t = 1; t < threads; ++t) {
        std::int64_t lo = t * chunk, hi = std::min(count, lo + chunk);
        if (lo < hi) pool.emplace_back(run, lo, hi);
    }
    run(0, std::min(count, chunk));
    for (auto& th : pool) th.join();
}

// --- Tensor ------------------------------------------------------------

class Tensor {
  public:
    struct Node {
        Shape shape;
        std::vector<float> data;
        std::vector<float> grad;  // empty until touched by backward
        bool requires_grad = false;
        const char* op = "leaf";
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward_fn;

        bool is_leaf() const { return parents.empty(); }
        void ensure_grad() {
            if (grad.empty()) grad.assign(data.size(), 0.0f);
        }
    };

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape s, bool requires_grad = false) {
        check_shape(s, "Tensor::zeros");
        auto n = std::make_shared<Node>();
        n->shape = s;
        n->data.assign(std::size_t(s.numel()), 0.0f);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor full(Shape s, float v, bool requires_grad = false) {
        Tensor t = zeros(s, requires_grad);
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor from_data(Shape s, std::vector<float> values, bool requires_grad = false) {
        check_shape(s, "Tensor::from_data");
        if (std::int64_t(values.size()) != s.numel())
            throw DimensionError("Tensor::from_data: " + std::to_string(values.size()) +
                                 " values for shape " + s.str());
        auto n = std::make_shared<Node>();
        n->shape = s;
        n->data = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    // Seeded N(0, std) fill; used by all weight init paths.
    static Tensor randn(Shape s, std::mt19937& rng, float stddev, bool requires_grad = false) {
        Tensor t = zeros(s, requires_grad);
        std::normal_distribution<float> dist(0.0f, stddev);
        for (auto& v : t.data()) v = dist(rng);
        return t;
    }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_->shape.numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op() const { return node_->op; }

    std::vector<float>& data() { return node_->data; }
    const std::vector<float>& data() const { return node_->data; }
    std::vector<float>& grad() { return node_->grad; }
    const std::vector<float>& grad() const { return node_->grad; }

    float at(int n, int c, int h, int w) const {
        const Shape& s = node_->shape;
        return node_->data[((std::int64_t(n) * s.c + c) * s.h + h) * s.w + w];
    }
    float& at(int n, int c, int h, int w) {
        const Shape& s = node_->shape;
        return node_->data[((std::int64_t(n) * s.c + c) * s.h + h) * s.w + w];
    }

    std::shared_ptr<Node> node() const { return node_; }

    // Deep copy; result is a detached leaf.
    Tensor clone() const {
        auto n = std::make_shared<Node>();
        n->shape = node_->shape;
        n->data = node_->data;
        n->requires_grad = node_->requires_grad && node_->is_leaf();
        return Tensor(std::move(n));
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
    }

    // Reverse-mode sweep. seed defaults to ones (scalar losses pass nothing).
    // Non-leaf grads are reset first so repeated sweeps over the same graph
    // produce bit-identical results; leaf grads accumulate.
    void backward(const std::vector<float>* seed = nullptr) const {
        Node* root = node_.get();
        if (seed && std::int64_t(seed->size()) != root->shape.numel())
            throw DimensionError("backward: seed size " + std::to_string(seed->size()) +
                                 " for shape " + root->shape.str());
        std::vector<Node*> order;
        topo_sort(root, order);
        for (Node* n : order) {
            if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0f);
            else if (n->requires_grad) n->ensure_grad();
        }
        if (seed) root->grad = *seed;
        else std::fill(root->grad.begin(), root->grad.end(), 1.0f);
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }

    // Distinct op names reachable from this node; structural tests use this.
    std::vector<std::string> graph_ops() const {
        std::vector<Node*> order;
        topo_sort(node_.get(), order);
        std::unordered_set<std::string> seen;
        std::vector<std::string> out;
        for (Node* n : order)
            if (seen.insert(n->op).second) out.push_back(n->op);
        return out;
    }

    bool graph_has_op(const std::string& name) const {
        auto ops = graph_ops();
        return std::find(ops.begin(), ops.end(), name) != ops.end();
    }

  private:
    static void topo_sort(Node* root, std::vector<Node*>& order) {
        // Iterative DFS; graphs are deep enough in training to overflow the
        // call stack if done recursively.
        std::unordered_set<Node*> visited;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(root, 0);
        visited.insert(root);
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node* p = node->parents[idx++].get();
                if (visited.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> node_;
};

namespace detail {

// Result node factory: wires parents and decides whether a tape entry exists.
inline Tensor make_op(const char* op, Shape s, std::vector<Tensor> parents,
                      std::function<void(Tensor::Node&)> backward_fn) {
    auto n = std::make_shared<Tensor::Node>();
    n->shape = s;
    n->data.assign(std::size_t(s.numel()), 0.0f);
    n->op = op;
    bool needs = false;
    if (grad_enabled())
        for (const Tensor& p : parents) needs = needs || p.requires_grad();
    if (needs) {
        n->requires_grad = true;
        for (const Tensor& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

}  // namespace detail

// --- elementwise ops ----------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    auto an = a.node(), bn = b.node();
    Tensor out = detail::make_op("add", a.shape(), {a, b}, [an, bn](Tensor::Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
        }
    });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    return out;
}

inline Tensor scale(const Tensor& a, float s) {
    auto an = a.node();
    Tensor out = detail::make_op("scale", a.shape(), {a}, [an, s](Tensor::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += s * self.grad[i];
    });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = s * av[i];
    return out;
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

inline Tensor relu(const Tensor& a) {
    auto an = a.node();
    Tensor out = detail::make_op("relu", a.shape(), {a}, [an](Tensor::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        // Subgradient at 0 is 0 (strict > keeps it deterministic).
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (an->data[i] > 0.0f) an->grad[i] += self.grad[i];
    });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0.0f ? av[i] : 0.0f;
    return out;
}

inline Tensor clamp01(const Tensor& a) {
    auto an = a.node();
    Tensor out = detail::make_op("clamp01", a.shape(), {a}, [an](Tensor::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (an->data[i] > 0.0f && an->data[i] < 1.0f) an->grad[i] += self.grad[i];
    });
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::min(1.0f, std::max(0.0f, av[i]));
    return out;
}

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ParamError("concat_channels: no inputs");
    Shape s0 = parts[0].shape();
    int ctotal = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
            throw DimensionError("concat_channels: mismatched dims " + s.str() + " vs " + s0.str());
        ctotal += s.c;
    }
    Shape os{s0.n, ctotal, s0.h, s0.w};
    std::vector<std::shared_ptr<Tensor::Node>> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    Tensor out = detail::make_op("concat_channels", os, parts, [nodes, os](Tensor::Node& self) {
        std::int64_t plane = std::int64_t(os.h) * os.w;
        for (int n = 0; n < os.n; ++n) {
            std::int64_t coff = 0;
            for (auto& pn : nodes) {
                std::int64_t cnt = std::int64_t(pn->shape.c) * plane;
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    const float* g = self.grad.data() + (std::int64_t(n) * os.c + coff) * plane;
                    float* dst = pn->grad.data() + std::int64_t(n) * cnt;
                    for (std::int64_t i = 0; i < cnt; ++i) dst[i] += g[i];
                }
                coff += pn->shape.c;
            }
        }
    });
    std::int64_t plane = std::int64_t(s0.h) * s0.w;
    for (int n = 0; n < os.n; ++n) {
        std::int64_t coff = 0;
        for (const Tensor& p : parts) {
            std::int64_t cnt = std::int64_t(p.shape().c) * plane;
            const float* src = p.data().data() + std::int64_t(n) * cnt;
            float* dst = out.data().data() + (std::int64_t(n) * ctotal + coff) * plane;
            std::copy(src, src + cnt, dst);
            coff += p.shape().c;
        }
    }
    return out;
}

inline Tensor slice_channels(const Tensor& a, int from, int count) {
    const Shape& s = a.shape();
    if (from < 0 || count < 1 || from + count > s.c)
        throw DimensionError("slice_channels: [" + std::to_string(from) + "," +
                             std::to_string(from + count) + ") out of " + std::to_string(s.c) +
                             " channels");
    Shape os{s.n, count, s.h, s.w};
    auto an = a.node();
    Tensor out = detail::make_op("slice_channels", os, {a}, [an, from, os](Tensor::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const Shape& is = an->shape;
        std::int64_t plane = std::int64_t(os.h) * os.w;
        for (int n = 0; n < os.n; ++n) {
            const float* g = self.grad.data() + std::int64_t(n) * os.c * plane;
            float* dst = an->grad.data() + (std::int64_t(n) * is.c + from) * plane;
            for (std::int64_t i = 0; i < std::int64_t(os.c) * plane; ++i) dst[i] += g[i];
        }
    });
    std::int64_t plane = std::int64_t(s.h) * s.w;
    for (int n = 0; n < os.n; ++n) {
        const float* src = a.data().data() + (std::int64_t(n) * s.c + from) * plane;
        float* dst = out.data().data() + std::int64_t(n) * count * plane;
        std::copy(src, src + std::int64_t(count) * plane, dst);
    }
    return out;
}

inline std::vector<Tensor> split_channels(const Tensor& a, const std::vector<int>& sizes) {
    int total = 0;
    for (int s : sizes) total += s;
    if (total != a.shape().c)
        throw DimensionError("split_channels: sizes sum to " + std::to_string(total) + ", tensor has " +
                             std::to_string(a.shape().c) + " channels");
    std::vector<Tensor> out;
    int at = 0;
    for (int s : sizes) {
        out.push_back(slice_channels(a, at, s));
        at += s;
    }
    return out;
}

inline Tensor upsample_nearest2x(const Tensor& a) {
    const Shape& s = a.shape();
    Shape os{s.n, s.c, s.h * 2, s.w * 2};
    auto an = a.node();
    Tensor out = detail::make_op("upsample_nearest2x", os, {a}, [an, os](Tensor::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const Shape& is = an->shape;
        for (int n = 0; n < is.n; ++n)
            for (int c = 0; c < is.c; ++c)
                for (int y = 0; y < is.h; ++y)
                    for (int x = 0; x < is.w; ++x) {
                        std::int64_t o = ((std::int64_t(n) * os.c + c) * os.h + 2 * y) * os.w + 2 * x;
                        an->grad[((std::int64_t(n) * is.c + c) * is.h + y) * is.w + x] +=
                            self.grad[o] + self.grad[o + 1] + self.grad[o + os.w] + self.grad[o + os.w + 1];
                    }
    });
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x) {
                    float v = a.at(n, c, y, x);
                    std::int64_t o = ((std::int64_t(n) * os.c + c) * os.h + 2 * y) * os.w + 2 * x;
                    out.data()[o] = v;
                    out.data()[o + 1] = v;
                    out.data()[o + os.w] = v;
                    out.data()[o + os.w + 1] = v;
                }
    return out;
}

// --- reductions ---------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    auto an = a.node();
    Tensor out = detail::make_op("sum_all", Shape{1, 1, 1, 1}, {a}, [an](Tensor::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        float g = self.grad[0];
        for (auto& v : an->grad) v += g;
    });
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    out.data()[0] = float(acc);
    return out;
}

// Sum of squared differences (no averaging); the style/concept losses use it.
inline Tensor sse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("sse: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    auto an = a.node(), bn = b.node();
    Tensor out = detail::make_op("sse", Shape{1, 1, 1, 1}, {a, b}, [an, bn](Tensor::Node& self) {
        float g = self.grad[0];
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < an->data.size(); ++i)
                an->grad[i] += 2.0f * (an->data[i] - bn->data[i]) * g;
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < bn->data.size(); ++i)
                bn->grad[i] -= 2.0f * (an->data[i] - bn->data[i]) * g;
        }
    });
    const auto& av = a.data();
    const auto& bv = b.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        double d = double(av[i]) - double(bv[i]);
        acc += d * d;
    }
    out.data()[0] = float(acc);
    return out;
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
    return scale(sse(a, b), 1.0f / float(a.numel()));
}

// Per-sample Gram matrices: (N,C,H,W) -> (N,1,C,C), entries
// G[i][j] = sum_hw F[i]*F[j] / (C*H*W).
inline Tensor gram(const Tensor& a) {
    const Shape& s = a.shape();
    Shape os{s.n, 1, s.c, s.c};
    float norm = 1.0f / (float(s.c) * float(s.h) * float(s.w));
    auto an = a.node();
    Tensor out = detail::make_op("gram", os, {a}, [an, norm](Tensor::Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const Shape& is = an->shape;
        std::int64_t plane = std::int64_t(is.h) * is.w;
        // dF = (dG + dG^T) * F * norm
        for (int n = 0; n < is.n; ++n) {
            const float* f = an->data.data() + std::int64_t(n) * is.c * plane;
            const float* dg = self.grad.data() + std::int64_t(n) * is.c * is.c;
            float* df = an->grad.data() + std::int64_t(n) * is.c * plane;
            for (int i = 0; i < is.c; ++i)
                for (int j = 0; j < is.c; ++j) {
                    float g = (dg[std::int64_t(i) * is.c + j] + dg[std::int64_t(j) * is.c + i]) * norm;
                    if (g == 0.0f) continue;
                    const float* fj = f + std::int64_t(j) * plane;
                    float* di = df + std::int64_t(i) * plane;
                    for (std::int64_t p = 0; p < plane; ++p) di[p] += g * fj[p];
                }
        }
    });
    std::int64_t plane = std::int64_t(s.h) * s.w;
    for (int n = 0; n < s.n; ++n) {
        const float* f = a.data().data() + std::int64_t(n) * s.c * plane;
        float* g = out.data().data() + std::int64_t(n) * s.c * s.c;
        for (int i = 0; i < s.c; ++i)
            for (int j = i; j < s.c; ++j) {
                const float* fi = f + std::int64_t(i) * plane;
                const float* fj = f + std::int64_t(j) * plane;
                double acc = 0.0;
                for (std::int64_t p = 0; p < plane; ++p) acc += double(fi[p]) * fj[p];
                float v = float(acc * norm);
                g[std::int64_t(i) * s.c + j] = v;
                g[std::int64_t(j) * s.c + i] = v;
            }
    }
    return out;
}

}  // namespace falcon
