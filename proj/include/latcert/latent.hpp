#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "latcert/core.hpp"

namespace latcert {

// Latent states are bit patterns packed into an unsigned integer, LSB = label
// bit 0. The first n_ap bits always equal the ground label.
using LatentState = std::uint64_t;

inline LatentState label_prefix(const Label& l) {
    LatentState bits = 0;
    for (std::size_t i = 0; i < l.size(); ++i)
        if (l[i]) bits |= (LatentState{1} << i);
    return bits;
}

inline Label label_of_latent(LatentState s, int n_ap) {
    Label l(n_ap);
    for (int i = 0; i < n_ap; ++i) l[i] = static_cast<std::uint8_t>((s >> i) & 1);
    return l;
}

struct LatentTransition {
    LatentState s = 0;
    int a = 0;
    double r = 0.0;
    LatentState s_next = 0;
};

// State embedding phi and (optional) action machinery linking ground and
// latent spaces. For discrete-action environments with latent actions equal
// to ground actions, encode_action/decode_action default to the identity on
// action ids.
struct EmbeddingPair {
    std::function<LatentState(const GroundState&, const Label&)> phi;
    std::function<Action(const GroundState&, int)> psi;       // latent action -> ground action
    std::function<int(const GroundState&, const Action&)> encode_action;  // ground -> latent

    static EmbeddingPair with_identity_actions(
        std::function<LatentState(const GroundState&, const Label&)> phi_fn) {
        EmbeddingPair emb;
        emb.phi = std::move(phi_fn);
        emb.psi = [](const GroundState&, int a) { return Action::make(a); };
        emb.encode_action = [](const GroundState&, const Action& a) {
            if (!a.discrete())
                throw std::invalid_argument("identity action embedding requires discrete actions");
            return a.id;
        };
        return emb;
    }
};

// Transition/reward counts keyed by (latent state, latent action). Rewards
// use Welford running means. Mergeable so counting can shard across workers.
class CountTable {
public:
    struct PairStats {
        std::map<LatentState, long long> successor_counts;
        long long total = 0;
        long long reward_n = 0;
        double reward_mean = 0.0;
    };

    void observe(LatentState s, int a, double r, LatentState s_next) {
        PairStats& st = pairs_[{s, a}];
        ++st.successor_counts[s_next];
        ++st.total;
        ++st.reward_n;
        st.reward_mean += (r - st.reward_mean) / static_cast<double>(st.reward_n);
    }

    void observe(const LatentTransition& tr) { observe(tr.s, tr.a, tr.r, tr.s_next); }

    void merge(const CountTable& other) {
        for (const auto& [key, theirs] : other.pairs_) {
            PairStats& st = pairs_[key];
            for (const auto& [succ, c] : theirs.successor_counts) st.successor_counts[succ] += c;
            st.total += theirs.total;
            long long n = st.reward_n + theirs.reward_n;
            if (n > 0)
                st.reward_mean = (st.reward_mean * st.reward_n +
                                  theirs.reward_mean * theirs.reward_n) /
                                 static_cast<double>(n);
            st.reward_n = n;
        }
    }

    const std::map<std::pair<LatentState, int>, PairStats>& pairs() const { return pairs_; }

    long long total(LatentState s, int a) const {
        auto it = pairs_.find({s, a});
        return it == pairs_.end() ? 0 : it->second.total;
    }

private:
    std::map<std::pair<LatentState, int>, PairStats> pairs_;
};

// Tabular discrete latent MDP. Rows are materialized lazily: only pairs seen
// during construction exist, and querying an unknown pair is an error rather
// than a silent uniform fill.
class LatentMdp {
public:
    LatentMdp() = default;
    LatentMdp(int n_bits, int n_ap, int n_actions)
        : n_bits_(n_bits), n_ap_(n_ap), n_actions_(n_actions) {
        if (n_bits < n_ap) throw std::invalid_argument("LatentMdp: n_bits must be >= n_ap");
    }

    int n_bits() const { return n_bits_; }
    int n_ap() const { return n_ap_; }
    int n_actions() const { return n_actions_; }

    void set_row(LatentState s, int a, std::vector<std::pair<LatentState, double>> row) {
        double sum = 0.0;
        for (auto& [succ, p] : row) {
            if (p < 0.0) throw std::invalid_argument("LatentMdp: negative probability");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("LatentMdp: row does not sum to 1");
        std::sort(row.begin(), row.end());
        rows_[{s, a}] = std::move(row);
        touch_state(s);
    }

    // enforce_range is dropped only by objective transforms, whose rewards
    // (1 - gamma) are not bound by the scaled-reward assumption.
    void set_reward(LatentState s, int a, double r, bool enforce_range = true) {
        if (enforce_range && (r < -0.5 - 1e-12 || r > 0.5 + 1e-12))
            throw std::invalid_argument("LatentMdp: reward outside [-1/2,1/2]");
        rewards_[{s, a}] = r;
        touch_state(s);
    }

    bool supported(LatentState s, int a) const { return rows_.count({s, a}) > 0; }

    const std::vector<std::pair<LatentState, double>>& row(LatentState s, int a) const {
        auto it = rows_.find({s, a});
        if (it == rows_.end())
            throw std::runtime_error("LatentMdp: unsupported pair (state " + std::to_string(s) +
                                     ", action " + std::to_string(a) + ")");
        return it->second;
    }

    double prob(LatentState s_next, LatentState s, int a) const {
        for (const auto& [succ, p] : row(s, a))
            if (succ == s_next) return p;
        return 0.0;
    }

    double reward(LatentState s, int a) const {
        auto it = rewards_.find({s, a});
        if (it == rewards_.end())
            throw std::runtime_error("LatentMdp: no reward for pair (state " + std::to_string(s) +
                                     ", action " + std::to_string(a) + ")");
        return it->second;
    }

    Label label(LatentState s) const { return label_of_latent(s, n_ap_); }

    // Sorted list of every latent state instantiated by any row or reward.
    const std::vector<LatentState>& states() const { return states_; }

    const std::map<std::pair<LatentState, int>, std::vector<std::pair<LatentState, double>>>&
    rows() const {
        return rows_;
    }
    const std::map<std::pair<LatentState, int>, double>& rewards() const { return rewards_; }

    nlohmann::json to_json() const {
        nlohmann::json transitions = nlohmann::json::array();
        for (const auto& [key, row] : rows_)
            for (const auto& [succ, p] : row)
                transitions.push_back({key.first, key.second, succ, p});
        nlohmann::json rewards = nlohmann::json::array();
        for (const auto& [key, r] : rewards_) rewards.push_back({key.first, key.second, r});
        return {{"n_bits", n_bits_},
                {"n_ap", n_ap_},
                {"n_actions", n_actions_},
                {"transitions", transitions},
                {"rewards", rewards}};
    }

    static LatentMdp from_json(const nlohmann::json& j) {
        LatentMdp m(j.at("n_bits").get<int>(), j.at("n_ap").get<int>(),
                    j.at("n_actions").get<int>());
        std::map<std::pair<LatentState, int>, std::vector<std::pair<LatentState, double>>> rows;
        for (const auto& t : j.at("transitions"))
            rows[{t.at(0).get<LatentState>(), t.at(1).get<int>()}].push_back(
                {t.at(2).get<LatentState>(), t.at(3).get<double>()});
        for (auto& [key, row] : rows) m.set_row(key.first, key.second, std::move(row));
        for (const auto& r : j.at("rewards"))
            m.set_reward(r.at(0).get<LatentState>(), r.at(1).get<int>(), r.at(2).get<double>());
        return m;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("LatentMdp::save: cannot open " + path);
        out << to_json().dump(2) << '\n';
    }

    static LatentMdp load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("LatentMdp::load: cannot open " + path);
        nlohmann::json j;
        in >> j;
        return from_json(j);
    }

private:
    void touch_state(LatentState s) {
        auto it = std::lower_bound(states_.begin(), states_.end(), s);
        if (it == states_.end() || *it != s) states_.insert(it, s);
    }

    int n_bits_ = 0;
    int n_ap_ = 0;
    int n_actions_ = 0;
    std::map<std::pair<LatentState, int>, std::vector<std::pair<LatentState, double>>> rows_;
    std::map<std::pair<LatentState, int>, double> rewards_;
    std::vector<LatentState> states_;
};

// Maps a ground trace through the embedding. Verifies label preservation:
// the label-bit prefix of phi(s) must equal the recorded label of s.
inline std::vector<LatentTransition> embed_trace(const Trace& trace, const EmbeddingPair& emb) {
    std::vector<LatentTransition> out;
    out.reserve(trace.transitions.size());
    auto check = [&](LatentState z, const Label& l) {
        if ((z & ((LatentState{1} << trace.ap) - 1)) != label_prefix(l))
            throw std::runtime_error("embed_trace: embedding does not preserve labels");
        return z;
    };
    for (const Transition& tr : trace.transitions) {
        LatentTransition lt;
        lt.s = check(emb.phi(tr.s, tr.l), tr.l);
        lt.a = emb.encode_action(tr.s, tr.a);
        lt.r = tr.r;
        lt.s_next = check(emb.phi(tr.s_next, tr.l_next), tr.l_next);
        out.push_back(lt);
    }
    return out;
}

inline CountTable count_transitions(const std::vector<LatentTransition>& seq) {
    CountTable counts;
    for (const LatentTransition& tr : seq) counts.observe(tr);
    return counts;
}

// Builds the tabular latent MDP from counts. With add_one_smoothing the
// successor distribution is Laplace-smoothed over every latent state seen
// anywhere in the table; this is for export only, never for certification.
inline LatentMdp frequency_estimate(const CountTable& counts, int n_bits, int n_ap, int n_actions,
                                    bool add_one_smoothing = false) {
    LatentMdp m(n_bits, n_ap, n_actions);
    std::vector<LatentState> universe;
    if (add_one_smoothing) {
        std::map<LatentState, bool> seen;
        for (const auto& [key, st] : counts.pairs()) {
            seen[key.first] = true;
            for (const auto& [succ, c] : st.successor_counts) seen[succ] = true;
        }
        for (const auto& [s, _] : seen) universe.push_back(s);
    }
    for (const auto& [key, st] : counts.pairs()) {
        if (st.total < 1) continue;
        std::vector<std::pair<LatentState, double>> row;
        if (add_one_smoothing) {
            double denom = static_cast<double>(st.total + universe.size());
            for (LatentState succ : universe) {
                auto it = st.successor_counts.find(succ);
                long long c = it == st.successor_counts.end() ? 0 : it->second;
                row.push_back({succ, (c + 1) / denom});
            }
        } else {
            for (const auto& [succ, c] : st.successor_counts)
                row.push_back({succ, static_cast<double>(c) / static_cast<double>(st.total)});
        }
        m.set_row(key.first, key.second, std::move(row));
        m.set_reward(key.first, key.second, std::clamp(st.reward_mean, -0.5, 0.5));
    }
    // Close the model: a state observed only as a successor has no outgoing
    // row, which would leave induced chains (and PRISM exports) ill-formed.
    // Such states become zero-reward absorbing states under every action.
    std::set<LatentState> sources;
    for (const auto& [key, st] : counts.pairs())
        if (st.total >= 1) sources.insert(key.first);
    std::set<LatentState> dangling;
    for (const auto& [key, st] : counts.pairs())
        for (const auto& [succ, c] : st.successor_counts)
            if (c > 0 && !sources.count(succ)) dangling.insert(succ);
    for (LatentState s : dangling)
        for (int a = 0; a < n_actions; ++a) {
            m.set_row(s, a, {{s, 1.0}});
            m.set_reward(s, a, 0.0);
        }
    return m;
}

// A stochastic policy over latent states emitting latent action indices.
class LatentPolicy {
public:
    virtual ~LatentPolicy() = default;
    virtual int act(LatentState s, RngStream& rng) const = 0;
};

class TabularLatentPolicy final : public LatentPolicy {
public:
    explicit TabularLatentPolicy(std::map<LatentState, std::vector<double>> table)
        : table_(std::move(table)) {}
    int act(LatentState s, RngStream& rng) const override {
        auto it = table_.find(s);
        if (it == table_.end())
            throw std::runtime_error("TabularLatentPolicy: state " + std::to_string(s) +
                                     " not in table");
        return static_cast<int>(rng.categorical(it->second));
    }
    const std::map<LatentState, std::vector<double>>& table() const { return table_; }

private:
    std::map<LatentState, std::vector<double>> table_;
};

// Executes the epsilon-mimic mixture in the ground environment: with
// probability epsilon the latent policy acts through phi/psi, otherwise the
// base policy acts directly. epsilon = 1 is pure latent execution.
inline Trace run_latent_policy(const Environment& env, const EmbeddingPair& emb,
                               const LatentPolicy& latent_policy, std::size_t steps,
                               std::uint64_t seed, double epsilon_mimic = 1.0,
                               const Policy* base_policy = nullptr) {
    if (epsilon_mimic < 0.0 || epsilon_mimic > 1.0)
        throw std::invalid_argument("run_latent_policy: epsilon_mimic must be in [0,1]");
    if (epsilon_mimic < 1.0 && base_policy == nullptr)
        throw std::invalid_argument("run_latent_policy: base_policy required when epsilon < 1");

    struct MixturePolicy final : Policy {
        const EmbeddingPair& emb;
        const LatentPolicy& latent;
        const Environment& env;
        double eps;
        const Policy* base;
        MixturePolicy(const EmbeddingPair& e, const LatentPolicy& lp, const Environment& en,
                      double ep, const Policy* b)
            : emb(e), latent(lp), env(en), eps(ep), base(b) {}
        Action act(const GroundState& s, RngStream& rng) const override {
            if (eps >= 1.0 || (eps > 0.0 && rng.uniform() < eps)) {
                LatentState z = emb.phi(s, env.label(s));
                return emb.psi(s, latent.act(z, rng));
            }
            return base->act(s, rng);
        }
    } mixture(emb, latent_policy, env, epsilon_mimic, base_policy);

    return rollout(env, mixture, steps, seed);
}

}  // namespace latcert
