#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "latcert/latent.hpp"

namespace latcert {

// Shortest round-trip decimal formatting, so exported files are bit-stable.
inline std::string format_double(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    if (res.ec != std::errc{}) throw std::runtime_error("format_double: to_chars failed");
    return std::string(buf, res.ptr);
}

struct Objective {
    enum class Kind { discounted_return, reach, constrained_reach };
    Kind kind = Kind::discounted_return;
    std::set<int> C;  // AP indices that must hold until the target
    std::set<int> T;  // AP indices defining the target
    double gamma = 0.99;

    void validate() const {
        if (!(gamma >= 0.0 && gamma < 1.0))
            throw std::invalid_argument("objective: gamma must be in [0,1)");
        if (kind != Kind::discounted_return && T.empty())
            throw std::invalid_argument("objective: reachability kinds need a nonempty target");
    }
};

// A latent state satisfies an AP subset when every listed label bit is set.
inline bool satisfies(LatentState s, const std::set<int>& aps) {
    for (int i : aps)
        if (((s >> i) & 1) == 0) return false;
    return true;
}

using LatentPolicyTable = std::map<LatentState, std::vector<double>>;

// Dense Markov chain induced by a latent policy, indexed over the MDP's
// instantiated states.
struct LatentMc {
    std::vector<LatentState> states;
    std::vector<std::vector<double>> P;  // row-stochastic
    std::vector<double> R;
    int n_ap = 0;

    int index_of(LatentState s) const {
        auto it = std::lower_bound(states.begin(), states.end(), s);
        if (it == states.end() || *it != s)
            throw std::runtime_error("LatentMc: unknown state " + std::to_string(s));
        return static_cast<int>(it - states.begin());
    }
};

inline const std::vector<double>& policy_row(const LatentPolicyTable& pi, LatentState s,
                                             int n_actions) {
    auto it = pi.find(s);
    if (it == pi.end())
        throw std::runtime_error("policy table: no distribution for state " + std::to_string(s));
    if (static_cast<int>(it->second.size()) != n_actions)
        throw std::invalid_argument("policy table: wrong action count for state " +
                                    std::to_string(s));
    return it->second;
}

inline LatentMc induce_mc(const LatentMdp& m, const LatentPolicyTable& pi) {
    LatentMc mc;
    mc.states = m.states();
    mc.n_ap = m.n_ap();
    int n = static_cast<int>(mc.states.size());
    mc.P.assign(n, std::vector<double>(n, 0.0));
    mc.R.assign(n, 0.0);
    for (int i = 0; i < n; ++i) {
        LatentState s = mc.states[i];
        const auto& probs = policy_row(pi, s, m.n_actions());
        for (int a = 0; a < m.n_actions(); ++a) {
            if (probs[a] <= 0.0) continue;
            mc.R[i] += probs[a] * m.reward(s, a);
            for (const auto& [succ, p] : m.row(s, a)) mc.P[i][mc.index_of(succ)] += probs[a] * p;
        }
    }
    return mc;
}

// Absorbing-state reward transform of the reachability objectives: target
// states loop with reward (1-gamma); under constrained reachability, states
// violating C (and not in T) absorb with reward zero.
inline LatentMdp transform_for_objective(const LatentMdp& m, const Objective& obj) {
    obj.validate();
    if (obj.kind == Objective::Kind::discounted_return)
        throw std::invalid_argument("transform_for_objective: nothing to transform");
    LatentMdp out(m.n_bits(), m.n_ap(), m.n_actions());
    double target_reward = 1.0 - obj.gamma;
    for (LatentState s : m.states()) {
        bool target = satisfies(s, obj.T);
        bool violates_c =
            obj.kind == Objective::Kind::constrained_reach && !target && !satisfies(s, obj.C);
        for (int a = 0; a < m.n_actions(); ++a) {
            if (target || violates_c) {
                out.set_row(s, a, {{s, 1.0}});
                out.set_reward(s, a, target ? target_reward : 0.0, false);
            } else if (m.supported(s, a)) {
                out.set_row(s, a, m.row(s, a));
                out.set_reward(s, a, 0.0);
            }
        }
    }
    return out;
}

struct ValueTable {
    std::map<LatentState, double> values;
    std::map<std::pair<LatentState, int>, double> qvalues;
    double residual = 0.0;
    int sweeps = 0;
};

inline ValueTable value_iteration(const LatentMdp& m, const LatentPolicyTable& pi,
                                  const Objective& obj, double tol = 1e-10) {
    obj.validate();
    if (tol <= 0.0) throw std::invalid_argument("value_iteration: tol must be positive");
    const LatentMdp& model =
        obj.kind == Objective::Kind::discounted_return ? m : transform_for_objective(m, obj);
    double gamma = obj.gamma;
    LatentMc mc = induce_mc(model, pi);
    int n = static_cast<int>(mc.states.size());
    // gamma-weighted stopping rule: value error <= tol.
    double threshold = gamma > 0.0 ? tol * (1.0 - gamma) / gamma : tol;

    std::vector<double> v(n, 0.0), next(n, 0.0);
    ValueTable table;
    for (int sweep = 0; sweep < 10'000'000; ++sweep) {
        double delta = 0.0;
        for (int i = 0; i < n; ++i) {
            double acc = mc.R[i];
            if (gamma > 0.0) {
                double exp = 0.0;
                for (int j = 0; j < n; ++j) exp += mc.P[i][j] * v[j];
                acc += gamma * exp;
            }
            next[i] = acc;
            delta = std::max(delta, std::abs(next[i] - v[i]));
        }
        v.swap(next);
        table.residual = delta;
        table.sweeps = sweep + 1;
        if (delta <= threshold) break;
    }
    for (int i = 0; i < n; ++i) table.values[mc.states[i]] = v[i];
    for (const auto& [key, row] : model.rows()) {
        double q = model.reward(key.first, key.second);
        if (gamma > 0.0) {
            double exp = 0.0;
            for (const auto& [succ, p] : row) exp += p * v[mc.index_of(succ)];
            q += gamma * exp;
        }
        table.qvalues[key] = q;
    }
    return table;
}

namespace detail {

// Gaussian elimination with partial pivoting; A is modified in place.
inline std::vector<double> solve_linear(std::vector<std::vector<double>> A,
                                        std::vector<double> b) {
    int n = static_cast<int>(A.size());
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(A[r][col]) > std::abs(A[piv][col])) piv = r;
        if (std::abs(A[piv][col]) < 1e-14)
            throw std::runtime_error("solve_linear: singular matrix");
        std::swap(A[piv], A[col]);
        std::swap(b[piv], b[col]);
        for (int r = col + 1; r < n; ++r) {
            double f = A[r][col] / A[col][col];
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c) A[r][c] -= f * A[col][c];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n, 0.0);
    for (int r = n - 1; r >= 0; --r) {
        double acc = b[r];
        for (int c = r + 1; c < n; ++c) acc -= A[r][c] * x[c];
        x[r] = acc / A[r][r];
    }
    return x;
}

// Bottom strongly connected components of the positive-probability graph.
inline int count_bsccs(const std::vector<std::vector<double>>& P) {
    int n = static_cast<int>(P.size());
    std::vector<std::vector<bool>> reach(n, std::vector<bool>(n, false));
    for (int i = 0; i < n; ++i) {
        reach[i][i] = true;
        for (int j = 0; j < n; ++j)
            if (P[i][j] > 0.0) reach[i][j] = true;
    }
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < n; ++i)
            if (reach[i][k])
                for (int j = 0; j < n; ++j)
                    if (reach[k][j]) reach[i][j] = true;
    std::vector<int> comp(n, -1);
    int n_comp = 0;
    for (int i = 0; i < n; ++i) {
        if (comp[i] >= 0) continue;
        comp[i] = n_comp;
        for (int j = i + 1; j < n; ++j)
            if (comp[j] < 0 && reach[i][j] && reach[j][i]) comp[j] = n_comp;
        ++n_comp;
    }
    std::vector<bool> bottom(n_comp, true);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (P[i][j] > 0.0 && comp[i] != comp[j]) bottom[comp[i]] = false;
    int count = 0;
    for (bool b : bottom) count += b ? 1 : 0;
    return count;
}

}  // namespace detail

// Unique stationary distribution of a unichain MC, via the linear system
// xi P = xi, sum(xi) = 1 (handles periodic chains that defeat power
// iteration). Multiple bottom SCCs violate the ergodicity assumption.
inline std::vector<double> stationary_distribution(const LatentMc& mc, double tol = 1e-9) {
    int n = static_cast<int>(mc.P.size());
    if (n == 0) throw std::invalid_argument("stationary_distribution: empty chain");
    if (detail::count_bsccs(mc.P) != 1)
        throw std::runtime_error(
            "stationary_distribution: chain is reducible (multiple bottom SCCs), "
            "violating the ergodicity assumption");
    // (P^T - I) xi = 0 with the last row replaced by the normalization.
    std::vector<std::vector<double>> A(n, std::vector<double>(n, 0.0));
    std::vector<double> b(n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) A[i][j] = mc.P[j][i] - (i == j ? 1.0 : 0.0);
    for (int j = 0; j < n; ++j) A[n - 1][j] = 1.0;
    b[n - 1] = 1.0;
    std::vector<double> xi = detail::solve_linear(std::move(A), std::move(b));
    double sum = 0.0;
    for (double& x : xi) {
        if (x < 0.0 && x > -1e-10) x = 0.0;
        if (x < 0.0) throw std::runtime_error("stationary_distribution: negative mass");
        sum += x;
    }
    for (double& x : xi) x /= sum;
    double residual = 0.0;
    for (int j = 0; j < n; ++j) {
        double acc = -xi[j];
        for (int i = 0; i < n; ++i) acc += xi[i] * mc.P[i][j];
        residual = std::max(residual, std::abs(acc));
    }
    if (residual > tol)
        throw std::runtime_error("stationary_distribution: residual above tolerance");
    return xi;
}

inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size())
        throw std::invalid_argument("total_variation: dimension mismatch");
    double sp = 0.0, sq = 0.0, l1 = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        sp += p[i];
        sq += q[i];
        l1 += std::abs(p[i] - q[i]);
    }
    if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
        throw std::invalid_argument("total_variation: inputs must be probability vectors");
    return 0.5 * l1;
}

struct LipschitzConstants {
    double KR = 0.0;
    double KP = 0.0;
    double KV = 0.0;
    double Rmax = 0.0;
    std::pair<int, int> kr_pair{0, 0};  // lexicographically smallest attaining pair
    std::pair<int, int> kp_pair{0, 0};
    bool kv_fallback = false;  // gamma*KP >= 1, Rmax/(1-gamma) branch forced
};

inline double kv_constant(double Rmax, double KR, double KP, double gamma, bool* fallback = nullptr) {
    double loose = Rmax / (1.0 - gamma);
    if (gamma * KP >= 1.0) {
        if (fallback) *fallback = true;
        return loose;
    }
    if (fallback) *fallback = false;
    return std::min(loose, KR / (1.0 - gamma * KP));
}

inline LipschitzConstants lipschitz_constants(const LatentMc& mc, double gamma) {
    if (!(gamma >= 0.0 && gamma < 1.0))
        throw std::invalid_argument("lipschitz_constants: gamma must be in [0,1)");
    int n = static_cast<int>(mc.P.size());
    LipschitzConstants k;
    for (int i = 0; i < n; ++i) k.Rmax = std::max(k.Rmax, std::abs(mc.R[i]));
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            double dr = std::abs(mc.R[i] - mc.R[j]);
            if (dr > k.KR) {
                k.KR = dr;
                k.kr_pair = {i, j};
            }
            double tv = 0.0;
            for (int c = 0; c < n; ++c) tv += std::abs(mc.P[i][c] - mc.P[j][c]);
            tv *= 0.5;
            if (tv > k.KP) {
                k.KP = tv;
                k.kp_pair = {i, j};
            }
        }
    }
    k.KV = kv_constant(k.Rmax, k.KR, k.KP, gamma, &k.kv_fallback);
    return k;
}

// Exact optimal transport between two distributions over at most 64 points,
// by successive shortest augmenting paths on the transportation network.
inline double wasserstein_exact(const std::vector<double>& p, const std::vector<double>& q,
                                const std::vector<std::vector<double>>& metric) {
    std::size_t n = p.size();
    if (q.size() != n || metric.size() != n)
        throw std::invalid_argument("wasserstein_exact: dimension mismatch");
    if (n > 64) throw std::invalid_argument("wasserstein_exact: supports above oracle scale (64)");
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sp += p[i];
        sq += q[i];
        if (metric[i].size() != n || std::abs(metric[i][i]) > 1e-15)
            throw std::invalid_argument("wasserstein_exact: metric must have zero diagonal");
        for (std::size_t j = 0; j < n; ++j) {
            if (metric[i][j] < 0.0 || std::abs(metric[i][j] - metric[j][i]) > 1e-12)
                throw std::invalid_argument("wasserstein_exact: metric must be symmetric nonneg");
        }
    }
    if (std::abs(sp - sq) > 1e-9)
        throw std::invalid_argument("wasserstein_exact: infeasible marginals");

    std::vector<double> supply = p, demand = q;
    std::vector<std::vector<double>> flow(n, std::vector<double>(n, 0.0));
    const double inf = std::numeric_limits<double>::infinity();
    while (true) {
        double left = 0.0;
        for (std::size_t i = 0; i < n; ++i) left += supply[i];
        if (left <= 1e-15) break;
        // Bellman-Ford over the residual bipartite graph. Node 2n = super
        // source over positive supplies; distances to demand nodes n..2n-1.
        std::size_t N = 2 * n + 1;
        std::vector<double> dist(N, inf);
        std::vector<int> prev(N, -1);
        dist[2 * n] = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            if (supply[i] > 1e-15) {
                dist[i] = 0.0;
                prev[i] = static_cast<int>(2 * n);
            }
        for (std::size_t pass = 0; pass < N; ++pass) {
            bool changed = false;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    // forward i -> demand j
                    if (dist[i] + metric[i][j] < dist[n + j] - 1e-15) {
                        dist[n + j] = dist[i] + metric[i][j];
                        prev[n + j] = static_cast<int>(i);
                        changed = true;
                    }
                    // backward demand j -> i when flow can be returned
                    if (flow[i][j] > 1e-15 && dist[n + j] - metric[i][j] < dist[i] - 1e-15) {
                        dist[i] = dist[n + j] - metric[i][j];
                        prev[i] = static_cast<int>(n + j);
                        changed = true;
                    }
                }
            }
            if (!changed) break;
        }
        int best = -1;
        for (std::size_t j = 0; j < n; ++j)
            if (demand[j] > 1e-15 && dist[n + j] < inf &&
                (best < 0 || dist[n + j] < dist[n + best]))
                best = static_cast<int>(j);
        if (best < 0) throw std::runtime_error("wasserstein_exact: no augmenting path");

        // Trace the path back, finding the bottleneck.
        std::vector<int> path;
        for (int v = static_cast<int>(n) + best; v != static_cast<int>(2 * n); v = prev[v])
            path.push_back(v);
        std::reverse(path.begin(), path.end());
        double delta = std::min(supply[path.front()], demand[best]);
        for (std::size_t k = 0; k + 1 < path.size(); ++k) {
            int u = path[k], v = path[k + 1];
            // backward edges (demand -> supply) are bounded by existing flow;
            // forward edges are uncapacitated
            if (u >= static_cast<int>(n)) delta = std::min(delta, flow[v][u - n]);
        }
        for (std::size_t k = 0; k + 1 < path.size(); ++k) {
            int u = path[k], v = path[k + 1];
            if (u < static_cast<int>(n))
                flow[u][v - n] += delta;
            else
                flow[v][u - n] -= delta;
        }
        supply[path.front()] -= delta;
        demand[best] -= delta;
    }
    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) cost += flow[i][j] * metric[i][j];
    return cost;
}

enum class BisimVariant { reward, label };

// Fixed point of the Delta operator, iterated to sup-norm change <= tol.
inline std::vector<std::vector<double>> bisim_pseudometric(const LatentMc& mc,
                                                           BisimVariant variant, double gamma,
                                                           double tol = 1e-8,
                                                           int max_iters = 1'000'000) {
    int n = static_cast<int>(mc.P.size());
    if (n > 32) throw std::invalid_argument("bisim_pseudometric: above oracle scale (32)");
    std::uint64_t mask = (std::uint64_t{1} << mc.n_ap) - 1;
    std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
    std::vector<std::vector<double>> next = d;
    for (int iter = 0; iter < max_iters; ++iter) {
        double change = 0.0;
        for (int i = 0; i < n; ++i) {
            next[i][i] = 0.0;
            for (int j = i + 1; j < n; ++j) {
                double val = 0.0;
                if (variant == BisimVariant::reward)
                    val += (1.0 - gamma) * std::abs(mc.R[i] - mc.R[j]);
                double w = gamma > 0.0 ? gamma * wasserstein_exact(mc.P[i], mc.P[j], d) : 0.0;
                double label_term =
                    (variant == BisimVariant::label &&
                     (mc.states[i] & mask) != (mc.states[j] & mask))
                        ? 1.0
                        : 0.0;
                val += std::max(w, label_term);
                next[i][j] = next[j][i] = val;
                change = std::max(change, std::abs(val - d[i][j]));
            }
        }
        d.swap(next);
        if (change <= tol) break;
    }
    return d;
}

// --- PRISM explicit-format export/import ---
//
// <prefix>.sta  header "n_bits n_ap n_actions" then "index:bits" lines
// <prefix>.tra  "src act dst prob" lines, sorted
// <prefix>.lab  "ap<i>: s0 s1 ..." state lists per label bit
// <prefix>.srew "src act reward" lines
// With a policy, the induced chain goes to <prefix>_mc.tra / _mc.srew.

inline void export_prism(const LatentMdp& m, const std::string& path_prefix,
                         const LatentPolicyTable* policy = nullptr) {
    const std::vector<LatentState>& states = m.states();
    auto index_of = [&](LatentState s) {
        return static_cast<int>(std::lower_bound(states.begin(), states.end(), s) -
                                states.begin());
    };
    auto open = [](const std::string& path) {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("export_prism: cannot open " + path);
        return out;
    };

    {
        auto out = open(path_prefix + ".sta");
        out << m.n_bits() << ' ' << m.n_ap() << ' ' << m.n_actions() << '\n';
        for (std::size_t i = 0; i < states.size(); ++i) out << i << ':' << states[i] << '\n';
    }
    {
        auto out = open(path_prefix + ".tra");
        for (const auto& [key, row] : m.rows())
            for (const auto& [succ, prob] : row)
                out << index_of(key.first) << ' ' << key.second << ' ' << index_of(succ) << ' '
                    << format_double(prob) << '\n';
    }
    {
        auto out = open(path_prefix + ".lab");
        for (int bit = 0; bit < m.n_ap(); ++bit) {
            out << "ap" << bit << ':';
            for (std::size_t i = 0; i < states.size(); ++i)
                if ((states[i] >> bit) & 1) out << ' ' << i;
            out << '\n';
        }
    }
    {
        auto out = open(path_prefix + ".srew");
        for (const auto& [key, r] : m.rewards())
            out << index_of(key.first) << ' ' << key.second << ' ' << format_double(r) << '\n';
    }
    if (policy) {
        LatentMc mc = induce_mc(m, *policy);
        auto out = open(path_prefix + "_mc.tra");
        for (std::size_t i = 0; i < mc.states.size(); ++i)
            for (std::size_t j = 0; j < mc.states.size(); ++j)
                if (mc.P[i][j] > 0.0)
                    out << i << " 0 " << j << ' ' << format_double(mc.P[i][j]) << '\n';
        auto rew = open(path_prefix + "_mc.srew");
        for (std::size_t i = 0; i < mc.states.size(); ++i)
            rew << i << " 0 " << format_double(mc.R[i]) << '\n';
    }
}

inline LatentMdp import_prism(const std::string& path_prefix) {
    std::ifstream sta(path_prefix + ".sta");
    if (!sta) throw std::runtime_error("import_prism: cannot open " + path_prefix + ".sta");
    int n_bits = 0, n_ap = 0, n_actions = 0;
    sta >> n_bits >> n_ap >> n_actions;
    std::vector<LatentState> states;
    std::string line;
    std::getline(sta, line);
    while (std::getline(sta, line)) {
        if (line.empty()) continue;
        auto colon = line.find(':');
        if (colon == std::string::npos) throw std::runtime_error("import_prism: bad .sta line");
        std::size_t idx = std::stoull(line.substr(0, colon));
        LatentState bits = std::stoull(line.substr(colon + 1));
        if (idx != states.size()) throw std::runtime_error("import_prism: .sta out of order");
        states.push_back(bits);
    }

    LatentMdp m(n_bits, n_ap, n_actions);
    std::ifstream tra(path_prefix + ".tra");
    if (!tra) throw std::runtime_error("import_prism: cannot open " + path_prefix + ".tra");
    std::map<std::pair<LatentState, int>, std::vector<std::pair<LatentState, double>>> rows;
    std::size_t src, dst;
    int act;
    double val;
    while (tra >> src >> act >> dst >> val)
        rows[{states.at(src), act}].push_back({states.at(dst), val});
    for (auto& [key, row] : rows) m.set_row(key.first, key.second, std::move(row));

    std::ifstream srew(path_prefix + ".srew");
    if (!srew) throw std::runtime_error("import_prism: cannot open " + path_prefix + ".srew");
    while (srew >> src >> act >> val) m.set_reward(states.at(src), act, val);
    return m;
}

}  // namespace latcert
