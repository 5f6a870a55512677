#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "latcert/autodiff.hpp"
#include "latcert/core.hpp"
#include "latcert/environments.hpp"
#include "latcert/latent.hpp"
#include "latcert/model_checker.hpp"
#include "latcert/pac.hpp"
#include "latcert/replay.hpp"

namespace latcert {

enum class AnnealMode { to_zero, to_one };

// Geometric annealing from the warmup step t0 on.
inline double anneal(double value0, double tau, long long t, AnnealMode mode,
                     long long t0 = 10'000) {
    if (t < t0) throw std::invalid_argument("anneal: t must be >= t0");
    if (!(tau >= 0.0 && tau < 1.0)) throw std::invalid_argument("anneal: tau must be in [0,1)");
    double decay = std::pow(1.0 - tau, static_cast<double>(t - t0));
    return mode == AnnealMode::to_zero ? value0 * decay
                                       : value0 + (1.0 - value0) * (1.0 - decay);
}

// --- discrete reparameterized samplers (plain, non-graph form) ---

struct RelaxedBernoulliSample {
    std::vector<double> soft;        // sigmoid((logit + logistic noise) / temperature)
    std::vector<std::uint8_t> hard;  // soft thresholded at 1/2
};

inline RelaxedBernoulliSample sample_relaxed_bernoulli(const std::vector<double>& logits,
                                                       double temperature, RngStream& rng) {
    if (temperature <= 0.0)
        throw std::invalid_argument("relaxed bernoulli: temperature must be positive");
    RelaxedBernoulliSample out;
    out.soft.reserve(logits.size());
    out.hard.reserve(logits.size());
    for (double a : logits) {
        double x = 1.0 / (1.0 + std::exp(-(a + rng.logistic()) / temperature));
        out.soft.push_back(x);
        out.hard.push_back(static_cast<std::uint8_t>(x >= 0.5 ? 1 : 0));
    }
    return out;
}

struct GumbelSoftmaxSample {
    std::vector<double> soft;  // tempered softmax over logits + Gumbel noise
    int hard = 0;              // argmax class
};

inline GumbelSoftmaxSample sample_gumbel_softmax(const std::vector<double>& logits,
                                                 double temperature, RngStream& rng) {
    std::size_t n = logits.size();
    if (n < 2) throw std::invalid_argument("gumbel softmax: need at least two classes");
    double bound = 1.0 / static_cast<double>(n - 1);
    if (!(temperature > 0.0 && temperature <= bound))
        throw std::invalid_argument("gumbel softmax: temperature must be in (0, 1/(n-1)]");
    std::vector<double> pert(n);
    for (std::size_t i = 0; i < n; ++i) pert[i] = (logits[i] + rng.gumbel()) / temperature;
    double mx = *std::max_element(pert.begin(), pert.end());
    GumbelSoftmaxSample out;
    out.soft.resize(n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += (out.soft[i] = std::exp(pert[i] - mx));
    for (double& x : out.soft) x /= z;
    out.hard = static_cast<int>(std::max_element(pert.begin(), pert.end()) - pert.begin());
    return out;
}

// --- configuration ---

struct VaeConfig {
    int n_bits = 9;
    int n_latent_actions = 0;  // 0 => latent actions are the ground actions
    int hidden = 64;
    double lam1 = 2.0 / 3.0;  // encoder bit temperature
    double lam2 = 0.5;        // prior bit temperature
    double lam1_action = 0.5;
    double lam2_action = 0.25;
    double tau_lam1 = 1e-6;
    double tau_lam2 = 2e-6;
    double tau_lam_action = 1e-6;
    double alpha0 = 10.0;
    double alpha_action = 1.0;
    double tau_alpha = 1e-5;
    double beta0 = 0.0;
    double tau_beta = 5e-5;
    double eps_mimic0 = 0.0;
    double tau_eps = 0.0;
    double lr = 1e-3;
    int batch = 128;
    std::size_t buffer_capacity = 1'000'000;
    long long warmup = 10'000;
    int steps_per_update = 16;
    ReplayMode replay_mode = ReplayMode::bucket;
    double varsigma = 1.0 / 3.0;
    double omega0 = 0.4;
    double tau_omega = 7e-5;
    long long total_steps = 200'000;
    long long eval_interval = 5'000;
    std::uint64_t seed = 0;
    bool add_one_smoothing = false;  // export-only; certification rejects smoothed models

    void validate() const {
        if (n_bits < 1) throw std::invalid_argument("vae config: n_bits must be >= 1");
        if (hidden < 1) throw std::invalid_argument("vae config: hidden width must be >= 1");
        if (!(lam1 > 0.0 && lam2 > 0.0))
            throw std::invalid_argument("vae config: temperatures must be positive");
        if (n_latent_actions > 0) {
            double bound = 1.0 / static_cast<double>(n_latent_actions - 1);
            if (!(lam1_action > 0.0 && lam1_action <= bound) ||
                !(lam2_action > 0.0 && lam2_action <= bound))
                throw std::invalid_argument(
                    "vae config: Gumbel temperatures must be in (0, 1/(n-1)]");
        }
        if (!(beta0 >= 0.0 && beta0 <= 1.0))
            throw std::invalid_argument("vae config: beta0 must be in [0,1]");
        if (alpha0 < 0.0) throw std::invalid_argument("vae config: alpha0 must be >= 0");
        if (!(eps_mimic0 >= 0.0 && eps_mimic0 <= 1.0))
            throw std::invalid_argument("vae config: eps_mimic0 must be in [0,1]");
        if (batch < 1 || warmup < batch)
            throw std::invalid_argument("vae config: warmup must cover at least one batch");
        if (steps_per_update < 1)
            throw std::invalid_argument("vae config: steps_per_update must be >= 1");
        if (!(varsigma >= 0.0 && varsigma <= 1.0))
            throw std::invalid_argument("vae config: varsigma must be in [0,1]");
        if (!(omega0 >= 0.0 && omega0 <= 1.0))
            throw std::invalid_argument("vae config: omega0 must be in [0,1]");
        if (total_steps < warmup)
            throw std::invalid_argument("vae config: total_steps must be >= warmup");
    }

    nlohmann::json to_json() const {
        const char* mode = replay_mode == ReplayMode::uniform   ? "uniform"
                           : replay_mode == ReplayMode::bucket ? "bucket"
                                                                : "loss";
        return {{"n_bits", n_bits},
                {"n_latent_actions", n_latent_actions},
                {"hidden", hidden},
                {"lam1", lam1},
                {"lam2", lam2},
                {"lam1_action", lam1_action},
                {"lam2_action", lam2_action},
                {"tau_lam1", tau_lam1},
                {"tau_lam2", tau_lam2},
                {"tau_lam_action", tau_lam_action},
                {"alpha0", alpha0},
                {"alpha_action", alpha_action},
                {"tau_alpha", tau_alpha},
                {"beta0", beta0},
                {"tau_beta", tau_beta},
                {"eps_mimic0", eps_mimic0},
                {"tau_eps", tau_eps},
                {"lr", lr},
                {"batch", batch},
                {"buffer_capacity", buffer_capacity},
                {"warmup", warmup},
                {"steps_per_update", steps_per_update},
                {"replay_mode", mode},
                {"varsigma", varsigma},
                {"omega0", omega0},
                {"tau_omega", tau_omega},
                {"total_steps", total_steps},
                {"eval_interval", eval_interval},
                {"seed", seed},
                {"smoothing", add_one_smoothing ? "add-one" : "none"}};
    }

    static VaeConfig from_json(const nlohmann::json& j) {
        VaeConfig c;
        nlohmann::json known = c.to_json();
        for (const auto& [key, _] : j.items())
            if (!known.contains(key))
                throw std::invalid_argument("vae config: unknown key '" + key + "'");
        c.n_bits = j.value("n_bits", c.n_bits);
        c.n_latent_actions = j.value("n_latent_actions", c.n_latent_actions);
        c.hidden = j.value("hidden", c.hidden);
        c.lam1 = j.value("lam1", c.lam1);
        c.lam2 = j.value("lam2", c.lam2);
        c.lam1_action = j.value("lam1_action", c.lam1_action);
        c.lam2_action = j.value("lam2_action", c.lam2_action);
        c.tau_lam1 = j.value("tau_lam1", c.tau_lam1);
        c.tau_lam2 = j.value("tau_lam2", c.tau_lam2);
        c.tau_lam_action = j.value("tau_lam_action", c.tau_lam_action);
        c.alpha0 = j.value("alpha0", c.alpha0);
        c.alpha_action = j.value("alpha_action", c.alpha_action);
        c.tau_alpha = j.value("tau_alpha", c.tau_alpha);
        c.beta0 = j.value("beta0", c.beta0);
        c.tau_beta = j.value("tau_beta", c.tau_beta);
        c.eps_mimic0 = j.value("eps_mimic0", c.eps_mimic0);
        c.tau_eps = j.value("tau_eps", c.tau_eps);
        c.lr = j.value("lr", c.lr);
        c.batch = j.value("batch", c.batch);
        c.buffer_capacity = j.value("buffer_capacity", c.buffer_capacity);
        c.warmup = j.value("warmup", c.warmup);
        c.steps_per_update = j.value("steps_per_update", c.steps_per_update);
        if (j.contains("replay_mode")) {
            std::string m = j.at("replay_mode").get<std::string>();
            if (m == "uniform")
                c.replay_mode = ReplayMode::uniform;
            else if (m == "bucket")
                c.replay_mode = ReplayMode::bucket;
            else if (m == "loss")
                c.replay_mode = ReplayMode::loss;
            else
                throw std::invalid_argument("vae config: unknown replay_mode '" + m + "'");
        }
        c.varsigma = j.value("varsigma", c.varsigma);
        c.omega0 = j.value("omega0", c.omega0);
        c.tau_omega = j.value("tau_omega", c.tau_omega);
        c.total_steps = j.value("total_steps", c.total_steps);
        c.eval_interval = j.value("eval_interval", c.eval_interval);
        c.seed = j.value("seed", c.seed);
        if (j.contains("smoothing")) {
            std::string sm = j.at("smoothing").get<std::string>();
            if (sm != "none" && sm != "add-one")
                throw std::invalid_argument("vae config: unknown smoothing '" + sm + "'");
            c.add_one_smoothing = sm == "add-one";
        }
        c.validate();
        return c;
    }
};

// --- networks ---

struct Mlp {
    ad::Param W1, b1, W2, b2, W3, b3;

    Mlp() = default;
    Mlp(const std::string& name, int in, int hidden, int out, RngStream& rng)
        : W1(name + ".W1", in, hidden), b1(name + ".b1", 1, hidden),
          W2(name + ".W2", hidden, hidden), b2(name + ".b2", 1, hidden),
          W3(name + ".W3", hidden, out), b3(name + ".b3", 1, out) {
        glorot(W1, rng);
        glorot(W2, rng);
        glorot(W3, rng);
    }

    static void glorot(ad::Param& w, RngStream& rng) {
        double r = std::sqrt(6.0 / (w.rows + w.cols));
        for (double& x : w.value) x = rng.uniform(-r, r);
    }

    ad::Tensor forward(ad::Graph& g, ad::Tensor x) {
        ad::Tensor h1 = g.tanh_(g.bias_add(g.matmul(x, g.param(W1)), g.param(b1)));
        ad::Tensor h2 = g.tanh_(g.bias_add(g.matmul(h1, g.param(W2)), g.param(b2)));
        return g.bias_add(g.matmul(h2, g.param(W3)), g.param(b3));
    }

    std::vector<double> forward_plain(const std::vector<double>& x) const {
        auto layer = [](const std::vector<double>& in, const ad::Param& W, const ad::Param& b,
                        bool act) {
            std::vector<double> out(static_cast<std::size_t>(W.cols), 0.0);
            for (int j = 0; j < W.cols; ++j) {
                double acc = b.value[j];
                for (int i = 0; i < W.rows; ++i) acc += in[i] * W.value[i * W.cols + j];
                out[j] = act ? std::tanh(acc) : acc;
            }
            return out;
        };
        return layer(layer(layer(x, W1, b1, true), W2, b2, true), W3, b3, false);
    }

    void collect(std::map<std::string, ad::Param*>& out) {
        for (ad::Param* p : {&W1, &b1, &W2, &b2, &W3, &b3}) out[p->name] = p;
    }
};

// --- the variational model ---

struct ElboTerms {
    double D = 0.0;          // distortion
    double R = 0.0;          // rate, analytic form
    double R_mc = 0.0;       // Monte-Carlo rate used in the training loss
    double H = 0.0;          // marginal-encoder entropy bonus
    double alpha_beta_elbo = 0.0;
    double loss = 0.0;       // weighted training objective (minimized)
};

class VaeModel {
public:
    VaeModel() = default;
    VaeModel(VaeConfig cfg, int state_dim, int n_ap, int n_ground_actions, int action_dim)
        : cfg_(cfg), state_dim_(state_dim), n_ap_(n_ap), n_ground_actions_(n_ground_actions),
          action_dim_(action_dim) {
        cfg_.validate();
        if (cfg_.n_bits < n_ap)
            throw std::invalid_argument("vae: n_bits must be >= the label bit count");
        if (n_ground_actions == 0 && cfg_.n_latent_actions < 2)
            throw std::invalid_argument(
                "vae: continuous action spaces require n_latent_actions >= 2");
        RngStream rng(cfg_.seed, "init");
        int k = cfg_.n_bits - n_ap;
        int na = n_latent_actions();
        enc_ = Mlp("enc", state_dim, cfg_.hidden, std::max(k, 1), rng);
        prior_ = Mlp("prior", cfg_.n_bits + na, cfg_.hidden, cfg_.n_bits, rng);
        policy_ = Mlp("policy", cfg_.n_bits, cfg_.hidden, na, rng);
        reward_dec_ = Mlp("reward_dec", cfg_.n_bits + na, cfg_.hidden, 1, rng);
        state_dec_ = Mlp("state_dec", cfg_.n_bits, cfg_.hidden, state_dim, rng);
        reward_log_scale_ = ad::Param("reward_dec.log_scale", 1, 1, -1.0);
        state_log_scale_ = ad::Param("state_dec.log_scale", 1, state_dim, 0.0);
        if (latent_actions_distinct()) {
            action_enc_ = Mlp("action_enc", cfg_.n_bits + action_dim, cfg_.hidden, na, rng);
            action_dec_ = Mlp("action_dec", cfg_.n_bits + na, cfg_.hidden, action_dim, rng);
            action_log_scale_ = ad::Param("action_dec.log_scale", 1, action_dim, -1.0);
        }
    }

    const VaeConfig& config() const { return cfg_; }
    int n_ap() const { return n_ap_; }
    int state_dim() const { return state_dim_; }
    bool latent_actions_distinct() const { return cfg_.n_latent_actions > 0; }
    int n_latent_actions() const {
        return latent_actions_distinct() ? cfg_.n_latent_actions : n_ground_actions_;
    }

    // Deterministic evaluation embedding: mode of the bit distribution, label
    // bits copied verbatim into the prefix.
    LatentState embed_mode(const GroundState& s, const Label& l) const {
        LatentState z = label_prefix(l);
        if (cfg_.n_bits > n_ap_) {
            std::vector<double> logits = enc_.forward_plain(s);
            for (int i = 0; i < cfg_.n_bits - n_ap_; ++i)
                if (logits[i] >= 0.0) z |= (LatentState{1} << (n_ap_ + i));
        }
        return z;
    }

    std::vector<double> bits_of(LatentState z) const {
        std::vector<double> bits(cfg_.n_bits);
        for (int i = 0; i < cfg_.n_bits; ++i) bits[i] = static_cast<double>((z >> i) & 1);
        return bits;
    }

    std::vector<double> policy_probs(LatentState z) const {
        std::vector<double> logits = policy_.forward_plain(bits_of(z));
        double mx = *std::max_element(logits.begin(), logits.end());
        double sum = 0.0;
        for (double& x : logits) sum += (x = std::exp(x - mx));
        for (double& x : logits) x /= sum;
        return logits;
    }

    int sample_policy(LatentState z, RngStream& rng) const {
        return static_cast<int>(rng.categorical(policy_probs(z)));
    }

    Action ground_action(LatentState z, int abar) const {
        if (!latent_actions_distinct()) return Action::make(abar);
        std::vector<double> in = bits_of(z);
        in.resize(in.size() + n_latent_actions(), 0.0);
        in[cfg_.n_bits + abar] = 1.0;
        return Action::make(action_dec_.forward_plain(in));
    }

    int encode_action_mode(LatentState z, const Action& a) const {
        if (!latent_actions_distinct()) {
            if (!a.discrete())
                throw std::invalid_argument("vae: expected a discrete ground action");
            return a.id;
        }
        std::vector<double> in = bits_of(z);
        in.insert(in.end(), a.vec.begin(), a.vec.end());
        std::vector<double> logits = action_enc_.forward_plain(in);
        return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }

    EmbeddingPair embedding(const Environment& env) const {
        EmbeddingPair emb;
        emb.phi = [this](const GroundState& s, const Label& l) { return embed_mode(s, l); };
        emb.psi = [this](const GroundState&, int abar) { return ground_action(0, abar); };
        if (latent_actions_distinct()) {
            emb.psi = [this, &env](const GroundState& s, int abar) {
                return ground_action(embed_mode(s, env.label(s)), abar);
            };
        }
        emb.encode_action = [this, &env](const GroundState& s, const Action& a) {
            return encode_action_mode(embed_mode(s, env.label(s)), a);
        };
        return emb;
    }

    std::map<std::string, ad::Param*> params() {
        std::map<std::string, ad::Param*> out;
        enc_.collect(out);
        prior_.collect(out);
        policy_.collect(out);
        reward_dec_.collect(out);
        state_dec_.collect(out);
        out[reward_log_scale_.name] = &reward_log_scale_;
        out[state_log_scale_.name] = &state_log_scale_;
        if (latent_actions_distinct()) {
            action_enc_.collect(out);
            action_dec_.collect(out);
            out[action_log_scale_.name] = &action_log_scale_;
        }
        return out;
    }

    void save_checkpoint(const std::string& path) {
        std::map<std::string, ad::Param> snapshot;
        for (auto& [name, p] : params()) snapshot[name] = *p;
        ad::save_params(snapshot, path);
    }

    void load_checkpoint(const std::string& path) {
        std::map<std::string, ad::Param> loaded = ad::load_params(path);
        for (auto& [name, p] : params()) {
            auto it = loaded.find(name);
            if (it == loaded.end())
                throw std::runtime_error("checkpoint: missing parameter " + name);
            if (it->second.rows != p->rows || it->second.cols != p->cols)
                throw std::runtime_error("checkpoint: shape mismatch for " + name);
            p->value = it->second.value;
        }
    }

    // --- batched training graph ---

    struct BatchData {
        int B = 0;
        std::vector<double> s, l, a, r, s2, l2, w;
    };

    struct ElboScalars {
        double lam1, lam2, lam_action, alpha, beta;
    };

    // Builds the <alpha,beta>-ELBO loss on the tape; returns the loss tensor
    // plus per-sample loss values (for loss-based priorities) and all terms.
    std::pair<ad::Tensor, ElboTerms> elbo_terms(ad::Graph& g, const BatchData& batch,
                                                const ElboScalars& sc, RngStream& noise_rng,
                                                std::vector<double>* per_sample = nullptr) {
        int B = batch.B, k = cfg_.n_bits - n_ap_, na = n_latent_actions();
        using ad::Tensor;
        Tensor S = g.input(B, state_dim_, batch.s);
        Tensor Lbl = g.input(B, n_ap_, batch.l);
        Tensor Rt = g.input(B, 1, batch.r);
        Tensor S2 = g.input(B, state_dim_, batch.s2);
        Tensor Lbl2 = g.input(B, n_ap_, batch.l2);
        Tensor W = g.input(B, 1, batch.w);

        auto sample_bits = [&](Tensor logits) {
            std::vector<double> noise(static_cast<std::size_t>(B) * k);
            for (double& x : noise) x = noise_rng.logistic();
            Tensor nz = g.input(B, k, std::move(noise));
            return g.sigmoid(g.scale(g.add(logits, nz), 1.0 / sc.lam1));
        };
        auto one_minus = [&](Tensor t) { return g.add_const(g.negate(t), 1.0); };
        // Binary Concrete log density at x for location logits a, temperature lam.
        auto concrete_log_density = [&](Tensor a, Tensor x, double lam) {
            Tensor lx = g.log_(x);
            Tensor l1x = g.log_(one_minus(x));
            Tensor head = g.add_const(g.sub(a, g.scale(g.add(lx, l1x), lam + 1.0)), std::log(lam));
            Tensor lae = g.logaddexp(g.sub(a, g.scale(lx, lam)), g.scale(l1x, -lam));
            return g.sub(head, g.scale(lae, 2.0));
        };
        auto bce = [&](Tensor probs, Tensor target) {
            return g.negate(g.add(g.mul(target, g.log_(probs)),
                                  g.mul(one_minus(target), g.log_(one_minus(probs)))));
        };

        Tensor enc1 = enc_.forward(g, S);    // logits of non-label bits of s
        Tensor enc2 = enc_.forward(g, S2);   // of s'
        Tensor zbar1 = k > 0 ? g.concat_cols(Lbl, sample_bits(enc1)) : Lbl;
        Tensor z2_soft = k > 0 ? sample_bits(enc2) : Tensor{};
        Tensor zbar2 = k > 0 ? g.concat_cols(Lbl2, z2_soft) : Lbl2;

        // Latent action representation fed to prior/decoders.
        Tensor Ain;  // B x na one-hot (ground) or relaxed one-hot (latent)
        Tensor qa_logits{};
        if (!latent_actions_distinct()) {
            Ain = g.input(B, na, batch.a);
        } else {
            Tensor Av = g.input(B, action_dim_, batch.a);
            qa_logits = action_enc_.forward(g, g.concat_cols(zbar1, Av));
            std::vector<double> gnoise(static_cast<std::size_t>(B) * na);
            for (double& x : gnoise) x = noise_rng.gumbel();
            Tensor gn = g.input(B, na, std::move(gnoise));
            Ain = g.softmax(g.scale(g.add(qa_logits, gn), 1.0 / sc.lam_action));
        }

        Tensor prior_logits = prior_.forward(g, g.concat_cols(zbar1, Ain));
        Tensor prior_lab = g.slice_cols(prior_logits, 0, n_ap_);
        Tensor prior_rest = k > 0 ? g.slice_cols(prior_logits, n_ap_, k) : Tensor{};

        // Distortion.
        Tensor state_mean = state_dec_.forward(g, zbar2);
        Tensor state_ls = g.bias_add(g.input(B, state_dim_,
                                             std::vector<double>(
                                                 static_cast<std::size_t>(B) * state_dim_, 0.0)),
                                     g.param(state_log_scale_));
        Tensor lg_state = g.row_sum(g.gaussian_log_prob(S2, state_mean, state_ls));

        Tensor reward_mean = reward_dec_.forward(g, g.concat_cols(zbar1, Ain));
        Tensor reward_ls = g.bias_add(
            g.input(B, 1, std::vector<double>(static_cast<std::size_t>(B), 0.0)),
            g.param(reward_log_scale_));
        Tensor lg_reward = g.gaussian_log_prob(Rt, reward_mean, reward_ls);

        Tensor pol_logits = policy_.forward(g, zbar1);
        Tensor lg_act;
        if (!latent_actions_distinct()) {
            lg_act = g.row_sum(g.mul(g.log_(g.softmax(pol_logits)), Ain));
        } else {
            Tensor Av = g.input(B, action_dim_, batch.a);
            Tensor act_mean = action_dec_.forward(g, g.concat_cols(zbar1, Ain));
            Tensor act_ls = g.bias_add(
                g.input(B, action_dim_,
                        std::vector<double>(static_cast<std::size_t>(B) * action_dim_, 0.0)),
                g.param(action_log_scale_));
            lg_act = g.row_sum(g.gaussian_log_prob(Av, act_mean, act_ls));
        }
        Tensor D_per = g.negate(g.add(g.add(lg_state, lg_act), lg_reward));

        // Rate. Label bits of s' are deterministic under the encoder, so their
        // KL contribution is the prior's negative log likelihood of the label.
        Tensor rate_label = g.row_sum(bce(g.sigmoid(prior_lab), Lbl2));
        Tensor R_mc_per = rate_label;
        Tensor R_an_per = rate_label;
        if (k > 0) {
            Tensor logq = concrete_log_density(enc2, z2_soft, sc.lam1);
            Tensor logp = concrete_log_density(prior_rest, z2_soft, sc.lam2);
            R_mc_per = g.add(rate_label, g.row_sum(g.sub(logq, logp)));
            R_an_per = g.add(rate_label, g.row_sum(g.bernoulli_kl(enc2, prior_rest)));
        }
        if (latent_actions_distinct()) {
            Tensor q = g.softmax(qa_logits);
            Tensor kl_act =
                g.row_sum(g.mul(q, g.sub(g.log_(q), g.log_(g.softmax(pol_logits)))));
            R_mc_per = g.add(R_mc_per, kl_act);
            R_an_per = g.add(R_an_per, kl_act);
        }

        // Marginal-encoder entropy over the batch.
        Tensor H = g.scalar_input(0.0);
        if (k > 0) {
            std::vector<double> ones(static_cast<std::size_t>(B), 1.0 / B);
            Tensor avg = g.matmul(g.input(1, B, std::move(ones)), g.sigmoid(enc1));
            H = g.negate(g.reduce_sum(g.add(g.mul(avg, g.log_(avg)),
                                            g.mul(one_minus(avg), g.log_(one_minus(avg))))));
        }
        if (latent_actions_distinct()) {
            std::vector<double> ones(static_cast<std::size_t>(B), 1.0 / B);
            Tensor avg = g.matmul(g.input(1, B, std::move(ones)), g.softmax(qa_logits));
            Tensor Hq = g.negate(g.reduce_sum(g.mul(avg, g.log_(avg))));
            H = g.add(H, g.scale(Hq, cfg_.alpha_action));
        }

        Tensor loss_per = g.add(D_per, g.scale(R_mc_per, sc.beta));
        Tensor loss = g.sub(g.reduce_mean(g.mul(W, loss_per)), g.scale(H, sc.alpha));

        if (per_sample) *per_sample = loss_per.value();
        ElboTerms terms;
        auto mean_of = [](const std::vector<double>& v) {
            double acc = 0.0;
            for (double x : v) acc += x;
            return acc / static_cast<double>(v.size());
        };
        terms.D = mean_of(D_per.value());
        terms.R = mean_of(R_an_per.value());
        terms.R_mc = mean_of(R_mc_per.value());
        terms.H = H.scalar();
        terms.alpha_beta_elbo = -(terms.D + sc.beta * terms.R) + sc.alpha * terms.H;
        terms.loss = loss.scalar();
        return {loss, terms};
    }

private:
    VaeConfig cfg_;
    int state_dim_ = 0, n_ap_ = 0, n_ground_actions_ = 0, action_dim_ = 0;
    Mlp enc_, prior_, policy_, reward_dec_, state_dec_, action_enc_, action_dec_;
    ad::Param reward_log_scale_, state_log_scale_, action_log_scale_;
};

// Runs the distilled latent policy in the ground environment; returns raw
// undiscounted per-episode returns (gym convention, before reward scaling).
inline std::vector<double> distill_eval(const Environment& env, const VaeModel& model,
                                        int episodes, std::uint64_t seed, int max_steps = 200) {
    std::vector<double> returns(episodes, 0.0);
    for (int e = 0; e < episodes; ++e) {
        RngStream dyn(seed + e, "dynamics");
        RngStream pol(seed + e, "policy");
        GroundState s = env.initial_state(dyn);
        for (int t = 0; t < max_steps; ++t) {
            LatentState z = model.embed_mode(s, env.label(s));
            int abar = model.sample_policy(z, pol);
            StepResult res = env.step(s, model.ground_action(z, abar), dyn);
            returns[e] += res.raw_reward;
            if (res.done) break;
            s = res.s_next;
        }
    }
    return returns;
}

inline double mean_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

struct MetricsRow {
    long long step = 0;
    double D = 0, R = 0, elbo = 0, alpha = 0, beta = 0, lam_enc = 0, lam_prior = 0,
           eps_mimic = 0, usage_entropy = 0, return_eval = 0;
};

struct LossCurvePoint {
    long long step = 0;
    double LR = 0.0, LP = 0.0;
};

struct TrainResult {
    VaeModel model;
    LatentMdp latent_mdp;
    LatentPolicyTable policy_table;
    std::vector<MetricsRow> metrics;
    std::vector<LossCurvePoint> loss_curve;
    double mean_usage_entropy = 0.0;
};

inline double empirical_entropy(const std::deque<LatentState>& window) {
    if (window.empty()) return 0.0;
    std::map<LatentState, long long> counts;
    for (LatentState z : window) ++counts[z];
    double H = 0.0, n = static_cast<double>(window.size());
    for (const auto& [_, c] : counts) {
        double f = static_cast<double>(c) / n;
        H -= f * std::log(f);
    }
    return H;
}

inline void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "step,D,R,elbo,alpha,beta,lam_enc,lam_prior,eps_mimic,usage_entropy,return_eval\n";
    for (const MetricsRow& r : rows)
        out << r.step << ',' << format_double(r.D) << ',' << format_double(r.R) << ','
            << format_double(r.elbo) << ',' << format_double(r.alpha) << ','
            << format_double(r.beta) << ',' << format_double(r.lam_enc) << ','
            << format_double(r.lam_prior) << ',' << format_double(r.eps_mimic) << ','
            << format_double(r.usage_entropy) << ',' << format_double(r.return_eval) << '\n';
}

// The interleaved collect/optimize loop of the variational trainer.
inline TrainResult train(const Environment& env, const Policy& base_policy, const VaeConfig& cfg,
                         const std::string& out_dir = "") {
    cfg.validate();
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    TrainResult result;
    result.model = VaeModel(cfg, env.state_dim(), env.ap_count(), env.action_count(),
                            env.action_dim());
    VaeModel& model = result.model;

    BufferConfig bc;
    bc.capacity = cfg.buffer_capacity;
    bc.mode = cfg.replay_mode;
    bc.varsigma = cfg.replay_mode == ReplayMode::uniform ? 0.0 : cfg.varsigma;
    bc.omega = cfg.omega0;
    ReplayBuffer buffer(bc);

    RngStream dyn(cfg.seed, "dynamics");
    RngStream pol(cfg.seed, "policy");
    RngStream noise(cfg.seed, "train_noise");
    RngStream rep(cfg.seed, "replay");

    GroundState s = env.initial_state(dyn);
    Label l = env.label(s);
    std::deque<LatentState> usage_window;
    std::deque<LatentTransition> loss_window;
    const std::size_t usage_cap = 2000, loss_cap = 20'000;
    PacParams window_params{0.02, 0.005, 0.99};
    long long window_required = required_samples_loss(window_params);

    ad::Graph graph;
    double usage_entropy_acc = 0.0;
    long long usage_entropy_rows = 0;
    ElboTerms last_terms;
    VaeModel::ElboScalars last_scalars{0, 0, 0, 0, 0};
    bool have_update = false;

    for (long long t = 1; t <= cfg.total_steps; ++t) {
        double eps = t <= cfg.warmup
                         ? cfg.eps_mimic0
                         : anneal(cfg.eps_mimic0, cfg.tau_eps, t, AnnealMode::to_zero, cfg.warmup);
        LatentState z = model.embed_mode(s, l);
        Action a;
        int abar;
        if (eps >= 1.0 || (eps > 0.0 && pol.uniform() < eps)) {
            abar = model.sample_policy(z, pol);
            a = model.ground_action(z, abar);
        } else {
            a = base_policy.act(s, pol);
            abar = model.encode_action_mode(z, a);
        }
        StepResult res = env.step(s, a, dyn);
        if (!finite(res.s_next)) throw std::runtime_error("train: non-finite state");
        GroundState s_next = res.done ? env.initial_state(dyn) : res.s_next;
        Label l_next = env.label(s_next);
        double r = scale_reward(res.raw_reward, env.reward_bounds());

        Transition tr{s, a, r, s_next, l, l_next, res.done};
        buffer.insert(tr, z);
        LatentState z_next = model.embed_mode(s_next, l_next);
        loss_window.push_back({z, abar, r, z_next});
        if (loss_window.size() > loss_cap) loss_window.pop_front();
        usage_window.push_back(z);
        if (usage_window.size() > usage_cap) usage_window.pop_front();

        if (t >= cfg.warmup && t % cfg.steps_per_update == 0 &&
            buffer.size() >= static_cast<std::size_t>(cfg.batch)) {
            VaeModel::ElboScalars sc;
            sc.lam1 = anneal(cfg.lam1, cfg.tau_lam1, t, AnnealMode::to_zero, cfg.warmup);
            sc.lam2 = anneal(cfg.lam2, cfg.tau_lam2, t, AnnealMode::to_zero, cfg.warmup);
            sc.lam_action =
                anneal(cfg.lam1_action, cfg.tau_lam_action, t, AnnealMode::to_zero, cfg.warmup);
            sc.alpha = anneal(cfg.alpha0, cfg.tau_alpha, t, AnnealMode::to_zero, cfg.warmup);
            sc.beta = anneal(cfg.beta0, cfg.tau_beta, t, AnnealMode::to_one, cfg.warmup);
            buffer.set_omega(anneal(cfg.omega0, cfg.tau_omega, t, AnnealMode::to_one, cfg.warmup));

            SampledBatch sampled = buffer.sample(static_cast<std::size_t>(cfg.batch), rep);
            VaeModel::BatchData batch;
            batch.B = cfg.batch;
            int na = model.n_latent_actions();
            for (int i = 0; i < cfg.batch; ++i) {
                const Transition& bt = sampled.entries[i]->transition;
                batch.s.insert(batch.s.end(), bt.s.begin(), bt.s.end());
                batch.s2.insert(batch.s2.end(), bt.s_next.begin(), bt.s_next.end());
                for (auto bit : bt.l) batch.l.push_back(static_cast<double>(bit));
                for (auto bit : bt.l_next) batch.l2.push_back(static_cast<double>(bit));
                batch.r.push_back(bt.r);
                batch.w.push_back(sampled.weights[i]);
                if (!model.latent_actions_distinct()) {
                    std::vector<double> onehot(na, 0.0);
                    onehot.at(bt.a.id) = 1.0;
                    batch.a.insert(batch.a.end(), onehot.begin(), onehot.end());
                } else {
                    batch.a.insert(batch.a.end(), bt.a.vec.begin(), bt.a.vec.end());
                }
            }

            graph.clear();
            std::vector<double> per_sample;
            auto [loss, terms] = model.elbo_terms(graph, batch, sc, noise, &per_sample);
            if (!std::isfinite(terms.loss)) {
                if (!out_dir.empty()) model.save_checkpoint(out_dir + "/checkpoint_abort.json");
                throw std::runtime_error("train: loss diverged at step " + std::to_string(t));
            }
            graph.backward(loss);
            graph.apply_adam(cfg.lr);
            if (cfg.replay_mode == ReplayMode::loss)
                for (int i = 0; i < cfg.batch; ++i)
                    buffer.update_priority_loss(sampled.indices[i], per_sample[i]);
            last_terms = terms;
            last_scalars = sc;
            have_update = true;
        }

        if (t >= cfg.warmup && t % cfg.eval_interval == 0 && have_update) {
            MetricsRow row;
            row.step = t;
            row.D = last_terms.D;
            row.R = last_terms.R;
            row.elbo = last_terms.alpha_beta_elbo;
            row.alpha = last_scalars.alpha;
            row.beta = last_scalars.beta;
            row.lam_enc = last_scalars.lam1;
            row.lam_prior = last_scalars.lam2;
            row.eps_mimic = eps;
            row.usage_entropy = empirical_entropy(usage_window);
            row.return_eval = mean_of(distill_eval(env, model, 5, cfg.seed * 977 + t));
            result.metrics.push_back(row);
            usage_entropy_acc += row.usage_entropy;
            ++usage_entropy_rows;

            if (static_cast<long long>(loss_window.size()) >= window_required) {
                std::vector<LatentTransition> window(loss_window.begin(), loss_window.end());
                CountTable counts = count_transitions(window);
                LatentMdp wm = frequency_estimate(counts, cfg.n_bits, env.ap_count(),
                                                  model.n_latent_actions());
                LossEstimate est = estimate_losses(window, wm, window_params);
                result.loss_curve.push_back({t, est.L_R_hat, est.L_P_hat});
            }
        }

        s = std::move(s_next);
        l = std::move(l_next);
    }

    if (usage_entropy_rows > 0)
        result.mean_usage_entropy = usage_entropy_acc / static_cast<double>(usage_entropy_rows);

    // Tabular extraction: frequency estimation over a fresh pure-latent run.
    {
        EmbeddingPair emb = model.embedding(env);
        struct PureLatent final : LatentPolicy {
            const VaeModel& m;
            explicit PureLatent(const VaeModel& mm) : m(mm) {}
            int act(LatentState zz, RngStream& rng) const override {
                return m.sample_policy(zz, rng);
            }
        } latent_pol(model);
        Trace extraction =
            run_latent_policy(env, emb, latent_pol, 20'000, cfg.seed ^ 0x9e3779b9ULL, 1.0);
        std::vector<LatentTransition> seq = embed_trace(extraction, emb);
        CountTable counts = count_transitions(seq);
        result.latent_mdp = frequency_estimate(counts, cfg.n_bits, env.ap_count(),
                                               model.n_latent_actions(), cfg.add_one_smoothing);
        // The policy table must be consistent with the tabular model: mass on
        // actions the frequency estimate never observed is renormalized away
        // so the induced chain is well-defined. Every state keeps at least one
        // supported action (sources by observation, closed states by fiat).
        for (LatentState zz : result.latent_mdp.states()) {
            std::vector<double> probs = model.policy_probs(zz);
            double mass = 0.0;
            for (int a = 0; a < static_cast<int>(probs.size()); ++a) {
                if (!result.latent_mdp.supported(zz, a)) probs[a] = 0.0;
                mass += probs[a];
            }
            for (double& p : probs) p /= mass;
            result.policy_table[zz] = std::move(probs);
        }
    }

    if (!out_dir.empty()) {
        std::ofstream cfg_out(out_dir + "/config.json");
        cfg_out << cfg.to_json().dump(2) << '\n';
        model.save_checkpoint(out_dir + "/checkpoint.json");
        result.latent_mdp.save(out_dir + "/latent_mdp.json");
        nlohmann::json pj = nlohmann::json::object();
        for (const auto& [zz, probs] : result.policy_table) pj[std::to_string(zz)] = probs;
        std::ofstream pol_out(out_dir + "/policy.json");
        pol_out << pj.dump(2) << '\n';
        write_metrics_csv(result.metrics, out_dir + "/metrics.csv");
        std::ofstream loss_out(out_dir + "/losses.csv");
        loss_out << "step,LR,LP\n";
        for (const LossCurvePoint& p : result.loss_curve)
            loss_out << p.step << ',' << format_double(p.LR) << ',' << format_double(p.LP)
                     << '\n';
    }
    return result;
}

}  // namespace latcert
