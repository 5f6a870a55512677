#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "latcert/rng.hpp"

namespace latcert {

using GroundState = std::vector<double>;  // finite entries, dimension fixed per env
using Label = std::vector<std::uint8_t>;  // one bit per atomic proposition

// Discrete environments carry an int action id; continuous ones a real vector.
struct Action {
    int id = -1;
    std::vector<double> vec;

    bool discrete() const { return vec.empty(); }
    static Action make(int a) { return Action{a, {}}; }
    static Action make(std::vector<double> v) { return Action{-1, std::move(v)}; }
};

struct Transition {
    GroundState s;
    Action a;
    double r = 0.0;  // scaled to [-1/2, 1/2]
    GroundState s_next;
    Label l;
    Label l_next;
    bool reset = false;  // episode boundary after this transition (diagnostic only)
};

struct Trace {
    std::string env_id;
    std::uint64_t seed = 0;
    int ap = 0;
    int dim = 0;
    std::vector<Transition> transitions;
};

inline bool finite(const GroundState& s) {
    for (double x : s)
        if (!std::isfinite(x)) return false;
    return true;
}

// Affine map of [min,max] onto [-1/2, 1/2]. Out-of-bounds rewards are an
// error: environments declare their bounds statically.
inline double scale_reward(double raw, std::pair<double, double> bounds) {
    auto [lo, hi] = bounds;
    if (!(lo < hi)) throw std::invalid_argument("scale_reward: bounds.min must be < bounds.max");
    if (raw < lo || raw > hi)
        throw std::domain_error("scale_reward: raw reward outside declared bounds");
    return (raw - lo) / (hi - lo) - 0.5;
}

struct StepResult {
    GroundState s_next;
    double raw_reward = 0.0;
    bool done = false;
};

class Environment {
public:
    virtual ~Environment() = default;
    virtual const std::string& env_id() const = 0;
    virtual int state_dim() const = 0;
    virtual int ap_count() const = 0;
    virtual int action_count() const = 0;  // 0 for continuous action spaces
    virtual int action_dim() const { return 1; }  // real-vector width when continuous
    virtual std::pair<double, double> reward_bounds() const = 0;
    virtual GroundState initial_state(RngStream& rng) const = 0;
    virtual StepResult step(const GroundState& s, const Action& a, RngStream& rng) const = 0;
    virtual Label label(const GroundState& s) const = 0;
};

class Policy {
public:
    virtual ~Policy() = default;
    virtual Action act(const GroundState& s, RngStream& rng) const = 0;
};

// Executes `policy` in `env` for exactly `steps` transitions. Episodic
// environments reset internally; the returned trace is the concatenated
// interaction stream with reset markers.
inline Trace rollout(const Environment& env, const Policy& policy, std::size_t steps,
                     std::uint64_t seed) {
    if (steps < 1) throw std::invalid_argument("rollout: steps must be >= 1");
    RngStream dyn(seed, "dynamics");
    RngStream pol(seed, "policy");

    Trace trace;
    trace.env_id = env.env_id();
    trace.seed = seed;
    trace.ap = env.ap_count();
    trace.dim = env.state_dim();
    trace.transitions.reserve(steps);

    GroundState s = env.initial_state(dyn);
    Label l = env.label(s);
    for (std::size_t t = 0; t < steps; ++t) {
        Action a = policy.act(s, pol);
        StepResult res = env.step(s, a, dyn);
        if (!finite(res.s_next))
            throw std::runtime_error("rollout: environment produced non-finite state");
        // Episode resets are folded into the interaction stream: the recorded
        // successor of a terminal step is the fresh initial state, keeping the
        // chaining invariant s_next[t] == s[t+1] exact.
        GroundState s_next = res.done ? env.initial_state(dyn) : res.s_next;
        Transition tr;
        tr.s = s;
        tr.a = a;
        tr.r = scale_reward(res.raw_reward, env.reward_bounds());
        tr.s_next = s_next;
        tr.l = l;
        tr.l_next = env.label(s_next);
        tr.reset = res.done;
        trace.transitions.push_back(std::move(tr));
        s = std::move(s_next);
        l = trace.transitions.back().l_next;
    }
    return trace;
}

// --- Trace persistence (JSON lines) ---

inline nlohmann::json action_to_json(const Action& a) {
    if (a.discrete()) return a.id;
    return a.vec;
}

inline Action action_from_json(const nlohmann::json& j) {
    if (j.is_number_integer()) return Action::make(j.get<int>());
    return Action::make(j.get<std::vector<double>>());
}

inline void save_trace(const Trace& trace, std::ostream& out) {
    nlohmann::json header = {
        {"env", trace.env_id}, {"seed", trace.seed}, {"ap", trace.ap}, {"dim", trace.dim}};
    out << header.dump() << '\n';
    for (std::size_t t = 0; t < trace.transitions.size(); ++t) {
        const Transition& tr = trace.transitions[t];
        nlohmann::json line = {{"t", t},
                               {"s", tr.s},
                               {"a", action_to_json(tr.a)},
                               {"r", tr.r},
                               {"l", tr.l},
                               {"reset", tr.reset}};
        out << line.dump() << '\n';
    }
}

inline void save_trace(const Trace& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_trace: cannot open " + path);
    save_trace(trace, out);
}

// Reads a JSONL trace. Each line stores only the source state of its
// transition; successors are reconstructed from the following line, so the
// final line closes the stream and is not returned as a transition.
inline Trace load_trace(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_trace: empty input");
    nlohmann::json header = nlohmann::json::parse(line);
    Trace trace;
    trace.env_id = header.at("env").get<std::string>();
    trace.seed = header.at("seed").get<std::uint64_t>();
    trace.ap = header.at("ap").get<int>();
    trace.dim = header.at("dim").get<int>();

    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        Transition tr;
        tr.s = j.at("s").get<GroundState>();
        tr.a = action_from_json(j.at("a"));
        tr.r = j.at("r").get<double>();
        tr.l = j.at("l").get<Label>();
        tr.reset = j.at("reset").get<bool>();
        trace.transitions.push_back(std::move(tr));
    }
    if (!trace.transitions.empty()) {
        for (std::size_t t = 0; t + 1 < trace.transitions.size(); ++t) {
            trace.transitions[t].s_next = trace.transitions[t + 1].s;
            trace.transitions[t].l_next = trace.transitions[t + 1].l;
        }
        trace.transitions.pop_back();
    }
    return trace;
}

inline Trace load_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_trace: cannot open " + path);
    return load_trace(in);
}

}  // namespace latcert
