#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace latcert::ad {

constexpr double kProbClamp = 1e-7;  // probabilities inside log/KL stay in [eps, 1-eps]

inline double clamp_prob(double p) {
    return std::min(std::max(p, kProbClamp), 1.0 - kProbClamp);
}

// A named trainable array with its Adam accumulators.
struct Param {
    std::string name;
    int rows = 0, cols = 0;
    std::vector<double> value;
    std::vector<double> m, v;  // Adam first/second moments
    long long steps = 0;

    Param() = default;
    Param(std::string n, int r, int c, double init = 0.0)
        : name(std::move(n)), rows(r), cols(c), value(static_cast<std::size_t>(r) * c, init),
          m(value.size(), 0.0), v(value.size(), 0.0) {}

    std::size_t size() const { return value.size(); }
};

// Standard Adam with bias correction; grad must match the param's size.
inline void adam_update(Param& p, const std::vector<double>& grad, double lr, double beta1 = 0.9,
                        double beta2 = 0.999, double eps = 1e-8) {
    if (grad.size() != p.size()) throw std::invalid_argument("adam_update: gradient size mismatch");
    ++p.steps;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(p.steps));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(p.steps));
    for (std::size_t i = 0; i < p.size(); ++i) {
        p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * grad[i];
        p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * grad[i] * grad[i];
        p.value[i] -= lr * (p.m[i] / bc1) / (std::sqrt(p.v[i] / bc2) + eps);
    }
}

class Graph;

// Lightweight handle into the graph arena.
struct Tensor {
    Graph* g = nullptr;
    int id = -1;

    int rows() const;
    int cols() const;
    const std::vector<double>& value() const;
    const std::vector<double>& grad() const;
    double scalar() const;
};

// Reverse-mode tape over dense row-major matrices (at most 2-D). Rebuilt
// every training step; parameters live outside in Param objects.
class Graph {
public:
    struct Node {
        int rows = 0, cols = 0;
        std::vector<double> val;
        std::vector<double> grad;
        std::function<void(Graph&)> backward_fn;  // accumulates into parent grads
        Param* param = nullptr;
        bool requires_grad = false;
    };

    void clear() {
        nodes_.clear();
        param_nodes_.clear();
        backward_done_ = false;
    }

    std::size_t size() const { return nodes_.size(); }
    Node& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

    Tensor input(int rows, int cols, std::vector<double> data) {
        check_size(rows, cols, data.size(), "input");
        return make(rows, cols, std::move(data), false);
    }

    Tensor scalar_input(double x) { return input(1, 1, {x}); }

    Tensor param(Param& p) {
        Tensor t = make(p.rows, p.cols, p.value, true);
        node(t.id).param = &p;
        param_nodes_.push_back(t.id);
        return t;
    }

    // --- elementwise and structural ops ---

    Tensor add(Tensor a, Tensor b) {
        same_shape(a, b, "add");
        return binary_elementwise(
            a, b, [](double x, double y) { return x + y; },
            [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
    }

    Tensor sub(Tensor a, Tensor b) {
        same_shape(a, b, "sub");
        return binary_elementwise(
            a, b, [](double x, double y) { return x - y; },
            [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
    }

    Tensor mul(Tensor a, Tensor b) {
        same_shape(a, b, "mul");
        return binary_elementwise(
            a, b, [](double x, double y) { return x * y; },
            [](double, double y) { return y; }, [](double x, double) { return x; });
    }

    Tensor maximum(Tensor a, Tensor b) {
        same_shape(a, b, "maximum");
        return binary_elementwise(
            a, b, [](double x, double y) { return std::max(x, y); },
            [](double x, double y) { return x >= y ? 1.0 : 0.0; },
            [](double x, double y) { return x >= y ? 0.0 : 1.0; });
    }

    // log(exp(a) + exp(b)), stable.
    Tensor logaddexp(Tensor a, Tensor b) {
        same_shape(a, b, "logaddexp");
        auto f = [](double x, double y) {
            double m = std::max(x, y);
            return m + std::log(std::exp(x - m) + std::exp(y - m));
        };
        auto da = [](double x, double y) { return 1.0 / (1.0 + std::exp(y - x)); };
        auto db = [](double x, double y) { return 1.0 / (1.0 + std::exp(x - y)); };
        return binary_elementwise(a, b, f, da, db);
    }

    Tensor negate(Tensor a) {
        return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
    }

    Tensor exp_(Tensor a) {
        return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
    }

    Tensor log_(Tensor a) {
        return unary(a, [](double x) { return std::log(std::max(x, kProbClamp)); },
                     [](double x, double) { return 1.0 / std::max(x, kProbClamp); });
    }

    Tensor sigmoid(Tensor a) {
        return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                     [](double, double y) { return y * (1.0 - y); });
    }

    Tensor tanh_(Tensor a) {
        return unary(a, [](double x) { return std::tanh(x); },
                     [](double, double y) { return 1.0 - y * y; });
    }

    Tensor relu(Tensor a) {
        return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                     [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
    }

    Tensor leaky_relu(Tensor a, double slope = 0.01) {
        return unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; },
                     [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
    }

    Tensor square(Tensor a) {
        return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
    }

    Tensor scale(Tensor a, double c) {
        return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
    }

    Tensor add_const(Tensor a, double c) {
        return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
    }

    Tensor stop_gradient(Tensor a) {
        const Node& an = node(a.id);
        return make(an.rows, an.cols, an.val, false);
    }

    Tensor matmul(Tensor a, Tensor b) {
        const Node &an = node(a.id), &bn = node(b.id);
        if (an.cols != bn.rows) throw std::invalid_argument("matmul: inner dimension mismatch");
        int m = an.rows, k = an.cols, n = bn.cols;
        std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                double av = an.val[i * k + p];
                if (av == 0.0) continue;
                for (int j = 0; j < n; ++j) out[i * n + j] += av * bn.val[p * n + j];
            }
        Tensor t = make(m, n, std::move(out), an.requires_grad || bn.requires_grad);
        if (node(t.id).requires_grad) {
            int aid = a.id, bid = b.id, tid = t.id;
            node(t.id).backward_fn = [aid, bid, tid, m, k, n](Graph& g) {
                Node &an2 = g.node(aid), &bn2 = g.node(bid);
                const Node& tn = g.node(tid);
                if (an2.requires_grad)
                    for (int i = 0; i < m; ++i)
                        for (int p = 0; p < k; ++p) {
                            double acc = 0.0;
                            for (int j = 0; j < n; ++j)
                                acc += tn.grad[i * n + j] * bn2.val[p * n + j];
                            an2.grad[i * k + p] += acc;
                        }
                if (bn2.requires_grad)
                    for (int p = 0; p < k; ++p)
                        for (int j = 0; j < n; ++j) {
                            double acc = 0.0;
                            for (int i = 0; i < m; ++i)
                                acc += an2.val[i * k + p] * tn.grad[i * n + j];
                            bn2.grad[p * n + j] += acc;
                        }
            };
        }
        return t;
    }

    // a (m x n) + bias (1 x n), broadcast over rows.
    Tensor bias_add(Tensor a, Tensor bias) {
        const Node &an = node(a.id), &bn = node(bias.id);
        if (bn.rows != 1 || bn.cols != an.cols)
            throw std::invalid_argument("bias_add: bias must be 1 x cols(a)");
        int m = an.rows, n = an.cols;
        std::vector<double> out(an.val);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out[i * n + j] += bn.val[j];
        Tensor t = make(m, n, std::move(out), an.requires_grad || bn.requires_grad);
        if (node(t.id).requires_grad) {
            int aid = a.id, bid = bias.id, tid = t.id;
            node(t.id).backward_fn = [aid, bid, tid, m, n](Graph& g) {
                Node &an2 = g.node(aid), &bn2 = g.node(bid);
                const Node& tn = g.node(tid);
                if (an2.requires_grad)
                    for (std::size_t i = 0; i < tn.grad.size(); ++i) an2.grad[i] += tn.grad[i];
                if (bn2.requires_grad)
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) bn2.grad[j] += tn.grad[i * n + j];
            };
        }
        return t;
    }

    Tensor concat_cols(Tensor a, Tensor b) {
        const Node &an = node(a.id), &bn = node(b.id);
        if (an.rows != bn.rows) throw std::invalid_argument("concat_cols: row count mismatch");
        int m = an.rows, na = an.cols, nb = bn.cols;
        std::vector<double> out(static_cast<std::size_t>(m) * (na + nb));
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < na; ++j) out[i * (na + nb) + j] = an.val[i * na + j];
            for (int j = 0; j < nb; ++j) out[i * (na + nb) + na + j] = bn.val[i * nb + j];
        }
        Tensor t = make(m, na + nb, std::move(out), an.requires_grad || bn.requires_grad);
        if (node(t.id).requires_grad) {
            int aid = a.id, bid = b.id, tid = t.id;
            node(t.id).backward_fn = [aid, bid, tid, m, na, nb](Graph& g) {
                Node &an2 = g.node(aid), &bn2 = g.node(bid);
                const Node& tn = g.node(tid);
                for (int i = 0; i < m; ++i) {
                    if (an2.requires_grad)
                        for (int j = 0; j < na; ++j)
                            an2.grad[i * na + j] += tn.grad[i * (na + nb) + j];
                    if (bn2.requires_grad)
                        for (int j = 0; j < nb; ++j)
                            bn2.grad[i * nb + j] += tn.grad[i * (na + nb) + na + j];
                }
            };
        }
        return t;
    }

    // Columns [start, start+len) of a.
    Tensor slice_cols(Tensor a, int start, int len) {
        const Node& an = node(a.id);
        if (start < 0 || len < 1 || start + len > an.cols)
            throw std::invalid_argument("slice_cols: range out of bounds");
        int m = an.rows, n = an.cols;
        std::vector<double> out(static_cast<std::size_t>(m) * len);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < len; ++j) out[i * len + j] = an.val[i * n + start + j];
        Tensor t = make(m, len, std::move(out), an.requires_grad);
        if (an.requires_grad) {
            int aid = a.id, tid = t.id;
            node(t.id).backward_fn = [aid, tid, m, n, start, len](Graph& g) {
                Node& an2 = g.node(aid);
                const Node& tn = g.node(tid);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < len; ++j)
                        an2.grad[i * n + start + j] += tn.grad[i * len + j];
            };
        }
        return t;
    }

    Tensor softmax(Tensor a) {
        const Node& an = node(a.id);
        int m = an.rows, n = an.cols;
        std::vector<double> out(an.val.size());
        for (int i = 0; i < m; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < n; ++j) mx = std::max(mx, an.val[i * n + j]);
            double z = 0.0;
            for (int j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(an.val[i * n + j] - mx));
            for (int j = 0; j < n; ++j) out[i * n + j] /= z;
        }
        Tensor t = make(m, n, std::move(out), an.requires_grad);
        if (node(t.id).requires_grad) {
            int aid = a.id, tid = t.id;
            node(t.id).backward_fn = [aid, tid, m, n](Graph& g) {
                Node& an2 = g.node(aid);
                const Node& tn = g.node(tid);
                for (int i = 0; i < m; ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < n; ++j) dot += tn.grad[i * n + j] * tn.val[i * n + j];
                    for (int j = 0; j < n; ++j)
                        an2.grad[i * n + j] += tn.val[i * n + j] * (tn.grad[i * n + j] - dot);
                }
            };
        }
        return t;
    }

    Tensor reduce_sum(Tensor a) { return reduce(a, false); }
    Tensor reduce_mean(Tensor a) { return reduce(a, true); }

    // m x n -> m x 1 row sums.
    Tensor row_sum(Tensor a) {
        const Node& an = node(a.id);
        int m = an.rows, n = an.cols;
        std::vector<double> out(m, 0.0);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out[i] += an.val[i * n + j];
        Tensor t = make(m, 1, std::move(out), an.requires_grad);
        if (node(t.id).requires_grad) {
            int aid = a.id, tid = t.id;
            node(t.id).backward_fn = [aid, tid, m, n](Graph& g) {
                Node& an2 = g.node(aid);
                const Node& tn = g.node(tid);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) an2.grad[i * n + j] += tn.grad[i];
            };
        }
        return t;
    }

    // Diagonal-normal log density, elementwise.
    Tensor gaussian_log_prob(Tensor x, Tensor mean, Tensor log_scale) {
        same_shape(x, mean, "gaussian_log_prob");
        same_shape(x, log_scale, "gaussian_log_prob");
        const Node &xn = node(x.id), &mn = node(mean.id), &sn = node(log_scale.id);
        std::size_t sz = xn.val.size();
        std::vector<double> out(sz);
        const double c = -0.5 * std::log(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < sz; ++i) {
            double z = (xn.val[i] - mn.val[i]) * std::exp(-sn.val[i]);
            out[i] = c - sn.val[i] - 0.5 * z * z;
        }
        bool rg = xn.requires_grad || mn.requires_grad || sn.requires_grad;
        Tensor t = make(xn.rows, xn.cols, std::move(out), rg);
        if (rg) {
            int xid = x.id, mid = mean.id, sid = log_scale.id, tid = t.id;
            node(t.id).backward_fn = [xid, mid, sid, tid](Graph& g) {
                Node &xn2 = g.node(xid), &mn2 = g.node(mid), &sn2 = g.node(sid);
                const Node& tn = g.node(tid);
                for (std::size_t i = 0; i < tn.grad.size(); ++i) {
                    double inv_s = std::exp(-sn2.val[i]);
                    double z = (xn2.val[i] - mn2.val[i]) * inv_s;
                    double go = tn.grad[i];
                    if (xn2.requires_grad) xn2.grad[i] += go * (-z * inv_s);
                    if (mn2.requires_grad) mn2.grad[i] += go * (z * inv_s);
                    if (sn2.requires_grad) sn2.grad[i] += go * (z * z - 1.0);
                }
            };
        }
        return t;
    }

    // Elementwise KL(Bernoulli(sigmoid(p_logits)) || Bernoulli(sigmoid(q_logits))).
    Tensor bernoulli_kl(Tensor p_logits, Tensor q_logits) {
        same_shape(p_logits, q_logits, "bernoulli_kl");
        auto f = [](double pl, double ql) {
            double p = clamp_prob(1.0 / (1.0 + std::exp(-pl)));
            double q = clamp_prob(1.0 / (1.0 + std::exp(-ql)));
            return p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
        };
        auto dp = [](double pl, double ql) {
            double p = clamp_prob(1.0 / (1.0 + std::exp(-pl)));
            double q = clamp_prob(1.0 / (1.0 + std::exp(-ql)));
            double dkl_dp = std::log(p / q) - std::log((1.0 - p) / (1.0 - q));
            return dkl_dp * p * (1.0 - p);
        };
        auto dq = [](double pl, double ql) {
            double p = clamp_prob(1.0 / (1.0 + std::exp(-pl)));
            double q = clamp_prob(1.0 / (1.0 + std::exp(-ql)));
            double dkl_dq = -p / q + (1.0 - p) / (1.0 - q);
            return dkl_dq * q * (1.0 - q);
        };
        return binary_elementwise(p_logits, q_logits, f, dp, dq);
    }

    // --- backward pass ---

    void backward(Tensor loss) {
        Node& ln = node(loss.id);
        if (ln.rows != 1 || ln.cols != 1)
            throw std::invalid_argument("backward: loss must be a scalar");
        if (backward_done_) throw std::runtime_error("backward: tape already consumed");
        backward_done_ = true;
        for (Node& n : nodes_)
            if (n.requires_grad) n.grad.assign(n.val.size(), 0.0);
        ln.grad.assign(1, 1.0);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.requires_grad && n.backward_fn) n.backward_fn(*this);
        }
    }

    // Applies Adam to every registered parameter using the tape's gradients.
    void apply_adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
        if (!backward_done_) throw std::runtime_error("apply_adam: call backward first");
        for (int id : param_nodes_) {
            Node& n = node(id);
            adam_update(*n.param, n.grad, lr, beta1, beta2, eps);
        }
    }

    const std::vector<int>& param_nodes() const { return param_nodes_; }

private:
    static void check_size(int rows, int cols, std::size_t n, const char* op) {
        if (rows < 1 || cols < 1 || static_cast<std::size_t>(rows) * cols != n)
            throw std::invalid_argument(std::string(op) + ": data size does not match shape");
    }

    Tensor make(int rows, int cols, std::vector<double> val, bool requires_grad) {
        Node n;
        n.rows = rows;
        n.cols = cols;
        n.val = std::move(val);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Tensor{this, static_cast<int>(nodes_.size()) - 1};
    }

    void same_shape(Tensor a, Tensor b, const char* op) const {
        const Node &an = node(a.id), &bn = node(b.id);
        if (an.rows != bn.rows || an.cols != bn.cols)
            throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }

    template <typename F, typename DF>
    Tensor unary(Tensor a, F f, DF df) {
        const Node& an = node(a.id);
        std::vector<double> out(an.val.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(an.val[i]);
        Tensor t = make(an.rows, an.cols, std::move(out), an.requires_grad);
        if (an.requires_grad) {
            int aid = a.id, tid = t.id;
            node(t.id).backward_fn = [aid, tid, df](Graph& g) {
                Node& an2 = g.node(aid);
                const Node& tn = g.node(tid);
                for (std::size_t i = 0; i < tn.grad.size(); ++i)
                    an2.grad[i] += tn.grad[i] * df(an2.val[i], tn.val[i]);
            };
        }
        return t;
    }

    template <typename F, typename DA, typename DB>
    Tensor binary_elementwise(Tensor a, Tensor b, F f, DA da, DB db) {
        const Node &an = node(a.id), &bn = node(b.id);
        std::vector<double> out(an.val.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(an.val[i], bn.val[i]);
        bool rg = an.requires_grad || bn.requires_grad;
        Tensor t = make(an.rows, an.cols, std::move(out), rg);
        if (rg) {
            int aid = a.id, bid = b.id, tid = t.id;
            node(t.id).backward_fn = [aid, bid, tid, da, db](Graph& g) {
                Node &an2 = g.node(aid), &bn2 = g.node(bid);
                const Node& tn = g.node(tid);
                for (std::size_t i = 0; i < tn.grad.size(); ++i) {
                    if (an2.requires_grad)
                        an2.grad[i] += tn.grad[i] * da(an2.val[i], bn2.val[i]);
                    if (bn2.requires_grad)
                        bn2.grad[i] += tn.grad[i] * db(an2.val[i], bn2.val[i]);
                }
            };
        }
        return t;
    }

    Tensor reduce(Tensor a, bool mean) {
        const Node& an = node(a.id);
        double acc = 0.0;
        for (double x : an.val) acc += x;
        double denom = mean ? static_cast<double>(an.val.size()) : 1.0;
        Tensor t = make(1, 1, {acc / denom}, an.requires_grad);
        if (an.requires_grad) {
            int aid = a.id, tid = t.id;
            node(t.id).backward_fn = [aid, tid, denom](Graph& g) {
                Node& an2 = g.node(aid);
                const Node& tn = g.node(tid);
                for (double& gr : an2.grad) gr += tn.grad[0] / denom;
            };
        }
        return t;
    }

    std::vector<Node> nodes_;
    std::vector<int> param_nodes_;
    bool backward_done_ = false;
};

inline int Tensor::rows() const { return g->node(id).rows; }
inline int Tensor::cols() const { return g->node(id).cols; }
inline const std::vector<double>& Tensor::value() const { return g->node(id).val; }
inline const std::vector<double>& Tensor::grad() const { return g->node(id).grad; }
inline double Tensor::scalar() const {
    const auto& n = g->node(id);
    if (n.rows != 1 || n.cols != 1) throw std::runtime_error("Tensor::scalar: not a scalar");
    return n.val[0];
}

// --- parameter persistence ---

inline void save_params(const std::map<std::string, Param>& params, const std::string& path) {
    nlohmann::json j;
    j["format"] = "latcert-params";
    j["version"] = 1;
    nlohmann::json items = nlohmann::json::object();
    for (const auto& [name, p] : params)
        items[name] = {{"shape", {p.rows, p.cols}}, {"data", p.value}};
    j["params"] = items;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_params: cannot open " + path);
    out << j.dump() << '\n';
}

inline std::map<std::string, Param> load_params(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_params: cannot open " + path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "latcert-params")
        throw std::runtime_error("load_params: unrecognized checkpoint format");
    std::map<std::string, Param> params;
    for (const auto& [name, item] : j.at("params").items()) {
        Param p(name, item.at("shape").at(0).get<int>(), item.at("shape").at(1).get<int>());
        p.value = item.at("data").get<std::vector<double>>();
        if (p.value.size() != p.size()) throw std::runtime_error("load_params: size mismatch");
        params[name] = std::move(p);
    }
    return params;
}

}  // namespace latcert::ad
