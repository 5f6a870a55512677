#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latcert/core.hpp"

namespace latcert {

inline double clampd(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

inline double angle_normalize(double x) {
    const double two_pi = 2.0 * std::numbers::pi;
    x = std::fmod(x + std::numbers::pi, two_pi);
    if (x < 0) x += two_pi;
    return x - std::numbers::pi;
}

// --- CartPole (canonical gym constants, Euler integration) ---

class CartPoleEnv final : public Environment {
public:
    static constexpr double kGravity = 9.8;
    static constexpr double kMassCart = 1.0;
    static constexpr double kMassPole = 0.1;
    static constexpr double kLength = 0.5;  // half pole length
    static constexpr double kForceMag = 10.0;
    static constexpr double kDt = 0.02;
    static constexpr double kThetaLimit = 12.0 * 2.0 * std::numbers::pi / 360.0;
    static constexpr double kXLimit = 2.4;

    explicit CartPoleEnv(double pos_threshold = 1.5, double angle_threshold = 0.15)
        : pos_threshold_(pos_threshold), angle_threshold_(angle_threshold) {}

    const std::string& env_id() const override { return id_; }
    int state_dim() const override { return 4; }
    int ap_count() const override { return 2; }
    int action_count() const override { return 2; }
    std::pair<double, double> reward_bounds() const override { return {0.0, 1.0}; }

    GroundState initial_state(RngStream& rng) const override {
        GroundState s(4);
        for (double& x : s) x = rng.uniform(-0.05, 0.05);
        return s;
    }

    StepResult step(const GroundState& s, const Action& a, RngStream&) const override {
        if (a.id != 0 && a.id != 1) throw std::invalid_argument("cartpole: action must be 0 or 1");
        double x = s[0], x_dot = s[1], theta = s[2], theta_dot = s[3];
        double force = (a.id == 1) ? kForceMag : -kForceMag;
        double cos_t = std::cos(theta), sin_t = std::sin(theta);
        double total_mass = kMassCart + kMassPole;
        double pml = kMassPole * kLength;
        double temp = (force + pml * theta_dot * theta_dot * sin_t) / total_mass;
        double theta_acc = (kGravity * sin_t - cos_t * temp) /
                           (kLength * (4.0 / 3.0 - kMassPole * cos_t * cos_t / total_mass));
        double x_acc = temp - pml * theta_acc * cos_t / total_mass;
        StepResult res;
        res.s_next = {x + kDt * x_dot, x_dot + kDt * x_acc, theta + kDt * theta_dot,
                      theta_dot + kDt * theta_acc};
        res.raw_reward = 1.0;
        res.done = std::abs(res.s_next[0]) > kXLimit || std::abs(res.s_next[2]) > kThetaLimit;
        return res;
    }

    Label label(const GroundState& s) const override {
        return {static_cast<std::uint8_t>(s[0] < pos_threshold_ ? 1 : 0),
                static_cast<std::uint8_t>(s[2] < angle_threshold_ ? 1 : 0)};
    }

private:
    std::string id_ = "cartpole";
    double pos_threshold_;
    double angle_threshold_;
};

// --- MountainCar ---

class MountainCarEnv final : public Environment {
public:
    const std::string& env_id() const override { return id_; }
    int state_dim() const override { return 2; }
    int ap_count() const override { return 3; }
    int action_count() const override { return 3; }
    std::pair<double, double> reward_bounds() const override { return {-1.0, 0.0}; }

    GroundState initial_state(RngStream& rng) const override {
        return {rng.uniform(-0.6, -0.4), 0.0};
    }

    StepResult step(const GroundState& s, const Action& a, RngStream&) const override {
        if (a.id < 0 || a.id > 2) throw std::invalid_argument("mountaincar: action must be 0..2");
        double pos = s[0], vel = s[1];
        vel += (a.id - 1) * 0.001 - 0.0025 * std::cos(3.0 * pos);
        vel = clampd(vel, -0.07, 0.07);
        pos += vel;
        pos = clampd(pos, -1.2, 0.6);
        if (pos <= -1.2) vel = 0.0;
        StepResult res;
        res.s_next = {pos, vel};
        res.raw_reward = -1.0;
        res.done = pos >= 0.5;
        return res;
    }

    Label label(const GroundState& s) const override {
        return {static_cast<std::uint8_t>(s[0] >= 0.5 ? 1 : 0),
                static_cast<std::uint8_t>(s[0] >= -0.5 ? 1 : 0),
                static_cast<std::uint8_t>(s[1] >= 0.0 ? 1 : 0)};
    }

private:
    std::string id_ = "mountaincar";
};

// --- Pendulum (state = <cos t, sin t, angular velocity>) ---

class PendulumEnv final : public Environment {
public:
    static constexpr double kGravity = 10.0;
    static constexpr double kDt = 0.05;
    static constexpr double kMaxSpeed = 8.0;
    static constexpr double kMaxTorque = 2.0;

    const std::string& env_id() const override { return id_; }
    int state_dim() const override { return 3; }
    int ap_count() const override { return 4; }
    int action_count() const override { return 0; }  // continuous torque
    std::pair<double, double> reward_bounds() const override {
        double pi = std::numbers::pi;
        return {-(pi * pi + 0.1 * kMaxSpeed * kMaxSpeed + 0.001 * kMaxTorque * kMaxTorque), 0.0};
    }

    GroundState initial_state(RngStream& rng) const override {
        double theta = rng.uniform(-std::numbers::pi, std::numbers::pi);
        double omega = rng.uniform(-1.0, 1.0);
        return {std::cos(theta), std::sin(theta), omega};
    }

    StepResult step(const GroundState& s, const Action& a, RngStream&) const override {
        if (a.discrete() || a.vec.size() != 1)
            throw std::invalid_argument("pendulum: action must be a 1-d torque");
        double theta = std::atan2(s[1], s[0]);
        double omega = s[2];
        double u = clampd(a.vec[0], -kMaxTorque, kMaxTorque);
        double cost = std::pow(angle_normalize(theta), 2) + 0.1 * omega * omega + 0.001 * u * u;
        omega += (3.0 * kGravity / 2.0 * std::sin(theta) + 3.0 * u) * kDt;
        omega = clampd(omega, -kMaxSpeed, kMaxSpeed);
        theta += omega * kDt;
        StepResult res;
        res.s_next = {std::cos(theta), std::sin(theta), omega};
        res.raw_reward = -cost;
        res.done = false;
        return res;
    }

    Label label(const GroundState& s) const override {
        return {static_cast<std::uint8_t>(s[0] >= std::cos(std::numbers::pi / 3.0) ? 1 : 0),
                static_cast<std::uint8_t>(s[0] >= 0.0 ? 1 : 0),
                static_cast<std::uint8_t>(s[1] >= 0.0 ? 1 : 0),
                static_cast<std::uint8_t>(s[2] >= 0.0 ? 1 : 0)};
    }

private:
    std::string id_ = "pendulum";
};

// --- Lifted chain: a discrete MDP lifted to R^2 observations. ---
//
// Node i sits at a point on the unit circle; observations are the node center
// plus uniform noise inside a ball whose radius keeps the balls disjoint, so
// a perfect ball-membership embedding exists and the exact latent model is
// known analytically.

struct LiftedChainSpec {
    int n_nodes = 0;
    // transition[a][i][j] = P(j | i, a), each row summing to 1.
    std::vector<std::vector<std::vector<double>>> transition;
    std::vector<double> node_rewards;  // in [-1/2, 1/2]
    double observation_radius = 0.0;   // 0 => auto (half the disjointness limit)

    int n_actions() const { return static_cast<int>(transition.size()); }

    void validate() const {
        if (n_nodes < 1) throw std::invalid_argument("lifted_chain: n_nodes must be >= 1");
        if (transition.empty()) throw std::invalid_argument("lifted_chain: no actions");
        if (static_cast<int>(node_rewards.size()) != n_nodes)
            throw std::invalid_argument("lifted_chain: node_rewards size mismatch");
        for (double r : node_rewards)
            if (r < -0.5 || r > 0.5)
                throw std::invalid_argument("lifted_chain: node reward outside [-1/2,1/2]");
        for (const auto& mat : transition) {
            if (static_cast<int>(mat.size()) != n_nodes)
                throw std::invalid_argument("lifted_chain: transition matrix size mismatch");
            for (const auto& row : mat) {
                if (static_cast<int>(row.size()) != n_nodes)
                    throw std::invalid_argument("lifted_chain: transition row size mismatch");
                double sum = 0.0;
                for (double p : row) {
                    if (p < 0.0) throw std::invalid_argument("lifted_chain: negative probability");
                    sum += p;
                }
                if (std::abs(sum - 1.0) > 1e-12)
                    throw std::invalid_argument("lifted_chain: row does not sum to 1");
            }
        }
    }
};

class LiftedChainEnv final : public Environment {
public:
    explicit LiftedChainEnv(LiftedChainSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        n_ap_ = 1;
        while ((1 << n_ap_) < spec_.n_nodes) ++n_ap_;
        double limit = (spec_.n_nodes > 1) ? std::sin(std::numbers::pi / spec_.n_nodes) : 1.0;
        radius_ = spec_.observation_radius > 0 ? spec_.observation_radius : 0.5 * limit;
        if (radius_ >= limit)
            throw std::invalid_argument("lifted_chain: observation balls must be disjoint");
        centers_.resize(spec_.n_nodes);
        for (int i = 0; i < spec_.n_nodes; ++i) {
            double ang = 2.0 * std::numbers::pi * i / spec_.n_nodes;
            centers_[i] = {std::cos(ang), std::sin(ang)};
        }
    }

    const std::string& env_id() const override { return id_; }
    int state_dim() const override { return 2; }
    int ap_count() const override { return n_ap_; }
    int action_count() const override { return spec_.n_actions(); }
    std::pair<double, double> reward_bounds() const override { return {-0.5, 0.5}; }

    GroundState initial_state(RngStream& rng) const override { return observe(0, rng); }

    StepResult step(const GroundState& s, const Action& a, RngStream& rng) const override {
        if (a.id < 0 || a.id >= spec_.n_actions())
            throw std::invalid_argument("lifted_chain: action out of range");
        int i = node_of(s);
        const auto& row = spec_.transition[a.id][i];
        int j = static_cast<int>(rng.categorical(row));
        StepResult res;
        res.s_next = observe(j, rng);
        res.raw_reward = spec_.node_rewards[i];
        res.done = false;
        return res;
    }

    // Node labels are the binary encoding of the node index (LSB first).
    Label label(const GroundState& s) const override { return node_label(node_of(s)); }

    Label node_label(int node) const {
        Label l(n_ap_);
        for (int b = 0; b < n_ap_; ++b) l[b] = static_cast<std::uint8_t>((node >> b) & 1);
        return l;
    }

    int node_of(const GroundState& s) const {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int i = 0; i < spec_.n_nodes; ++i) {
            double dx = s[0] - centers_[i][0], dy = s[1] - centers_[i][1];
            double d = dx * dx + dy * dy;
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        return best;
    }

    const LiftedChainSpec& spec() const { return spec_; }
    double observation_radius() const { return radius_; }

private:
    GroundState observe(int node, RngStream& rng) const {
        // Uniform point in the node's disk.
        double r = radius_ * std::sqrt(rng.uniform());
        double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
        return {centers_[node][0] + r * std::cos(ang), centers_[node][1] + r * std::sin(ang)};
    }

    std::string id_ = "lifted_chain";
    LiftedChainSpec spec_;
    int n_ap_ = 0;
    double radius_ = 0.0;
    std::vector<std::array<double, 2>> centers_;
};

// A small default chain used by oracle tests and CLI examples: 4 nodes,
// 2 actions with genuinely stochastic rows.
inline LiftedChainSpec default_chain_spec() {
    LiftedChainSpec spec;
    spec.n_nodes = 4;
    spec.node_rewards = {0.4, -0.2, 0.1, -0.45};
    spec.transition = {
        {{0.1, 0.7, 0.1, 0.1}, {0.0, 0.2, 0.8, 0.0}, {0.3, 0.0, 0.2, 0.5}, {0.6, 0.1, 0.1, 0.2}},
        {{0.5, 0.0, 0.5, 0.0}, {0.25, 0.25, 0.25, 0.25}, {0.0, 0.9, 0.1, 0.0}, {0.1, 0.2, 0.3, 0.4}},
    };
    return spec;
}

// --- Scripted input policies (stand-ins for trained RL policies) ---

class CartPolePdPolicy final : public Policy {
public:
    Action act(const GroundState& s, RngStream&) const override {
        double score = 0.03 * s[0] + 0.1 * s[1] + 1.0 * s[2] + 0.5 * s[3];
        return Action::make(score > 0.0 ? 1 : 0);
    }
};

class MountainCarBangBangPolicy final : public Policy {
public:
    Action act(const GroundState& s, RngStream&) const override {
        return Action::make(s[1] >= 0.0 ? 2 : 0);
    }
};

// Energy-shaping swing-up with PD stabilization near the top.
class PendulumEnergyPolicy final : public Policy {
public:
    Action act(const GroundState& s, RngStream&) const override {
        double theta = std::atan2(s[1], s[0]);
        double omega = s[2];
        double angle = angle_normalize(theta);
        double u;
        if (std::abs(angle) < 1.0 && std::abs(omega) < 2.5) {
            u = -10.0 * angle - 2.5 * omega;
        } else {
            double energy = 0.5 * omega * omega + PendulumEnv::kGravity * (std::cos(theta) - 1.0);
            u = omega * (0.0 - energy);
        }
        return Action::make(std::vector<double>{clampd(u, -2.0, 2.0)});
    }
};

class UniformRandomPolicy final : public Policy {
public:
    explicit UniformRandomPolicy(int n_actions) : n_(n_actions) {}
    Action act(const GroundState&, RngStream& rng) const override {
        return Action::make(static_cast<int>(rng.index(n_)));
    }

private:
    int n_;
};

// Tabular stochastic policy over lifted-chain nodes.
class TabularChainPolicy final : public Policy {
public:
    TabularChainPolicy(const LiftedChainEnv& env, std::vector<std::vector<double>> table)
        : env_(env), table_(std::move(table)) {
        if (static_cast<int>(table_.size()) != env.spec().n_nodes)
            throw std::invalid_argument("tabular policy: one row per node required");
    }
    Action act(const GroundState& s, RngStream& rng) const override {
        const auto& row = table_[env_.node_of(s)];
        return Action::make(static_cast<int>(rng.categorical(row)));
    }
    const std::vector<std::vector<double>>& table() const { return table_; }

private:
    const LiftedChainEnv& env_;
    std::vector<std::vector<double>> table_;
};

// --- Factories ---

inline std::shared_ptr<Environment> make_environment(
    const std::string& env_id, const nlohmann::json& config_in = nlohmann::json::object()) {
    const nlohmann::json config = config_in.is_null() ? nlohmann::json::object() : config_in;
    if (env_id == "cartpole") {
        double pos = config.value("pos_threshold", 1.5);
        double ang = config.value("angle_threshold", 0.15);
        return std::make_shared<CartPoleEnv>(pos, ang);
    }
    if (env_id == "mountaincar") return std::make_shared<MountainCarEnv>();
    if (env_id == "pendulum") return std::make_shared<PendulumEnv>();
    if (env_id == "lifted_chain") {
        LiftedChainSpec spec = default_chain_spec();
        if (config.contains("n_nodes")) {
            spec.n_nodes = config.at("n_nodes").get<int>();
            spec.transition =
                config.at("transition").get<std::vector<std::vector<std::vector<double>>>>();
            spec.node_rewards = config.at("node_rewards").get<std::vector<double>>();
        }
        if (config.contains("observation_radius"))
            spec.observation_radius = config.at("observation_radius").get<double>();
        return std::make_shared<LiftedChainEnv>(std::move(spec));
    }
    throw std::invalid_argument("unknown environment id: " + env_id);
}

inline std::shared_ptr<Policy> heuristic_policy(const Environment& env) {
    const std::string& id = env.env_id();
    if (id == "cartpole") return std::make_shared<CartPolePdPolicy>();
    if (id == "mountaincar") return std::make_shared<MountainCarBangBangPolicy>();
    if (id == "pendulum") return std::make_shared<PendulumEnergyPolicy>();
    if (id == "lifted_chain") {
        const auto& chain = dynamic_cast<const LiftedChainEnv&>(env);
        int n = chain.spec().n_nodes, m = chain.spec().n_actions();
        // Mildly non-uniform so the induced chain is not symmetric.
        std::vector<std::vector<double>> table(n, std::vector<double>(m, 0.0));
        for (int i = 0; i < n; ++i) {
            double w = 0.0;
            for (int a = 0; a < m; ++a) w += (table[i][a] = 1.0 + ((i + a) % m));
            for (int a = 0; a < m; ++a) table[i][a] /= w;
        }
        return std::make_shared<TabularChainPolicy>(chain, std::move(table));
    }
    throw std::invalid_argument("no heuristic policy for environment: " + id);
}

// Undiscounted raw-reward return of one episode (max_steps cap, gym style).
inline double episode_return(const Environment& env, const Policy& policy, std::uint64_t seed,
                             int max_steps = 200) {
    RngStream dyn(seed, "dynamics");
    RngStream pol(seed, "policy");
    GroundState s = env.initial_state(dyn);
    double total = 0.0;
    for (int t = 0; t < max_steps; ++t) {
        StepResult res = env.step(s, policy.act(s, pol), dyn);
        total += res.raw_reward;
        if (res.done) break;
        s = res.s_next;
    }
    return total;
}

inline std::vector<double> episode_returns(const Environment& env, const Policy& policy,
                                           int episodes, std::uint64_t seed, int max_steps = 200) {
    std::vector<double> out(episodes);
    for (int e = 0; e < episodes; ++e) out[e] = episode_return(env, policy, seed + e, max_steps);
    return out;
}

}  // namespace latcert
