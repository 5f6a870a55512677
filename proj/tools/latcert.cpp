// latcert: command-line surface over the certification toolkit.
//
// Exit codes: 0 success, 1 runtime error, 2 usage/config error.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "latcert/environments.hpp"
#include "latcert/model_checker.hpp"
#include "latcert/pac.hpp"
#include "latcert/vae.hpp"

namespace {

using nlohmann::json;

std::string hex64(std::uint64_t h) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
}

std::string hash_string(const std::string& s) { return hex64(latcert::fnv1a(s)); }

std::string hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return hash_string(buf.str());
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    json j;
    in >> j;
    return j;
}

void write_json_file(const json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << j.dump(2) << '\n';
}

// Full run configuration: env block + vae block (+ export smoothing).
struct RunConfig {
    std::string env_id;
    json env_config = json::object();
    latcert::VaeConfig vae;
    json raw;

    static RunConfig parse(const json& j) {
        RunConfig rc;
        for (const auto& [key, _] : j.items())
            if (key != "env" && key != "vae")
                throw std::invalid_argument("run config: unknown key '" + key + "'");
        const json& env = j.at("env");
        rc.env_id = env.at("id").get<std::string>();
        rc.env_config = env;
        rc.env_config.erase("id");
        rc.vae = latcert::VaeConfig::from_json(j.value("vae", json::object()));
        rc.raw = j;
        return rc;
    }

    std::string hash() const { return hash_string(raw.dump()); }
};

std::set<int> parse_ap_set(const std::string& csv) {
    std::set<int> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.insert(std::stoi(item));
    return out;
}

// Rebuilds the trained model from a model directory written by `train`.
struct LoadedModel {
    latcert::LatentMdp mdp;
    latcert::LatentPolicyTable policy;
    latcert::VaeConfig vae_config;
    std::shared_ptr<latcert::Environment> env;
    latcert::VaeModel net;
    bool has_net = false;

    static LoadedModel load(const std::string& dir) {
        LoadedModel m;
        m.mdp = latcert::LatentMdp::load(dir + "/latent_mdp.json");
        std::string pol_path = dir + "/policy.json";
        if (std::filesystem::exists(pol_path)) {
            json pj = read_json_file(pol_path);
            for (const auto& [key, probs] : pj.items())
                m.policy[std::stoull(key)] = probs.get<std::vector<double>>();
        } else {
            std::vector<double> uni(m.mdp.n_actions(),
                                    1.0 / static_cast<double>(m.mdp.n_actions()));
            for (latcert::LatentState s : m.mdp.states()) m.policy[s] = uni;
        }
        std::string run_path = dir + "/run_config.json";
        if (std::filesystem::exists(run_path)) {
            RunConfig rc = RunConfig::parse(read_json_file(run_path).at("config"));
            m.env = latcert::make_environment(rc.env_id, rc.env_config);
        }
        std::string cfg_path = dir + "/config.json";
        std::string ckpt_path = dir + "/checkpoint.json";
        if (std::filesystem::exists(cfg_path) && std::filesystem::exists(ckpt_path)) {
            m.vae_config = latcert::VaeConfig::from_json(read_json_file(cfg_path));
            if (m.env) {
                m.net = latcert::VaeModel(m.vae_config, m.env->state_dim(), m.env->ap_count(),
                                          m.env->action_count(), m.env->action_dim());
                m.net.load_checkpoint(ckpt_path);
                m.has_net = true;
            }
        }
        return m;
    }

    // Embedding for certification: the trained network when available,
    // otherwise the label prefix (exact for lifted_chain, where the label
    // encodes the node index).
    latcert::EmbeddingPair embedding(const latcert::Environment& env) const {
        if (has_net) return net.embedding(env);
        if (mdp.n_bits() != mdp.n_ap())
            throw std::invalid_argument(
                "model has no checkpoint and n_bits != n_ap: no analytic embedding available");
        return latcert::EmbeddingPair::with_identity_actions(
            [](const latcert::GroundState&, const latcert::Label& l) {
                return latcert::label_prefix(l);
            });
    }
};

int cmd_simulate(const std::string& env_id, const json& env_config,
                 const std::string& policy_name, std::size_t steps, std::uint64_t seed,
                 const std::string& out) {
    auto env = latcert::make_environment(env_id, env_config);
    std::shared_ptr<latcert::Policy> policy;
    if (policy_name == "heuristic")
        policy = latcert::heuristic_policy(*env);
    else if (policy_name == "random") {
        if (env->action_count() == 0)
            throw std::invalid_argument("random policy requires a discrete action space");
        policy = std::make_shared<latcert::UniformRandomPolicy>(env->action_count());
    } else
        throw std::invalid_argument("unknown policy '" + policy_name +
                                    "' (expected heuristic|random)");
    latcert::Trace trace = latcert::rollout(*env, *policy, steps, seed);
    latcert::save_trace(trace, out);
    json cfg = {{"env", env_id}, {"env_config", env_config}, {"policy", policy_name},
                {"steps", steps}, {"seed", seed}};
    std::cout << json({{"out", out},
                       {"transitions", trace.transitions.size()},
                       {"config_hash", hash_string(cfg.dump())}})
                     .dump()
              << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    RunConfig rc = RunConfig::parse(read_json_file(config_path));
    auto env = latcert::make_environment(rc.env_id, rc.env_config);
    auto base = latcert::heuristic_policy(*env);
    latcert::TrainResult res = latcert::train(*env, *base, rc.vae, out_dir);
    write_json_file({{"config", rc.raw}, {"config_hash", rc.hash()}},
                    out_dir + "/run_config.json");
    std::cout << json({{"out", out_dir},
                       {"latent_states", res.latent_mdp.states().size()},
                       {"mean_usage_entropy", res.mean_usage_entropy},
                       {"config_hash", rc.hash()}})
                     .dump()
              << "\n";
    return 0;
}

int cmd_certify(const std::string& model_dir, const std::string& trace_path, double epsilon,
                double delta, double gamma, std::size_t burn_in, const std::string& objective,
                const std::string& c_csv, const std::string& t_csv, const std::string& out) {
    LoadedModel model = LoadedModel::load(model_dir);
    if (model.vae_config.add_one_smoothing)
        throw std::invalid_argument("model was exported with add-one smoothing; "
                                    "smoothed dynamics cannot be certified");

    latcert::Trace trace = latcert::load_trace(trace_path);
    auto env = model.env ? model.env : latcert::make_environment(trace.env_id);
    latcert::EmbeddingPair emb = model.embedding(*env);
    std::vector<latcert::LatentTransition> seq = latcert::embed_trace(trace, emb);

    latcert::PacParams params{epsilon, delta, gamma};
    latcert::LossEstimate est = latcert::estimate_losses(seq, model.mdp, params, burn_in);

    latcert::LatentMc mc = latcert::induce_mc(model.mdp, model.policy);
    latcert::LipschitzConstants consts = latcert::lipschitz_constants(mc, gamma);

    std::map<std::string, std::string> provenance;
    provenance["trace_digest"] = hash_file(trace_path);
    provenance["trace_seed"] = std::to_string(trace.seed);
    provenance["burn_in"] = std::to_string(burn_in);
    provenance["required_T_loss"] = std::to_string(latcert::required_samples_loss(params));
    provenance["required_T_value"] =
        std::to_string(latcert::required_samples_value(params, consts.KV));
    std::string run_path = model_dir + "/run_config.json";
    provenance["config_hash"] =
        std::filesystem::exists(run_path)
            ? read_json_file(run_path).at("config_hash").get<std::string>()
            : hash_file(model_dir + "/latent_mdp.json");

    latcert::CertificateReport report =
        latcert::assemble_certificate(est, consts, std::move(provenance));
    json out_json = report.to_json();

    if (!objective.empty()) {
        latcert::Objective obj;
        obj.gamma = gamma;
        if (objective == "return")
            obj.kind = latcert::Objective::Kind::discounted_return;
        else if (objective == "reach")
            obj.kind = latcert::Objective::Kind::reach;
        else if (objective == "constrained-reach")
            obj.kind = latcert::Objective::Kind::constrained_reach;
        else
            throw std::invalid_argument("unknown objective '" + objective + "'");
        obj.C = parse_ap_set(c_csv);
        obj.T = parse_ap_set(t_csv);
        latcert::ValueTable vt = latcert::value_iteration(model.mdp, model.policy, obj);
        json values = json::object();
        for (const auto& [s, v] : vt.values) values[std::to_string(s)] = v;
        out_json["objective"] = {{"kind", objective},
                                 {"C", obj.C},
                                 {"T", obj.T},
                                 {"gamma", gamma},
                                 {"values", values}};
    }

    if (out.empty())
        std::cout << out_json.dump(2) << "\n";
    else
        write_json_file(out_json, out);
    return 0;
}

int cmd_export_prism(const std::string& model_path, const std::string& out_prefix,
                     bool with_policy) {
    std::string mdp_path = model_path;
    latcert::LatentPolicyTable policy;
    bool have_policy = false;
    if (std::filesystem::is_directory(model_path)) {
        LoadedModel model = LoadedModel::load(model_path);
        mdp_path = model_path + "/latent_mdp.json";
        policy = model.policy;
        have_policy = true;
    }
    latcert::LatentMdp mdp = latcert::LatentMdp::load(mdp_path);
    if (with_policy && !have_policy)
        throw std::invalid_argument("--with-policy requires a model directory");
    latcert::export_prism(mdp, out_prefix, with_policy ? &policy : nullptr);
    std::cout << json({{"out_prefix", out_prefix},
                       {"states", mdp.states().size()},
                       {"config_hash", hash_file(mdp_path)}})
                     .dump()
              << "\n";
    return 0;
}

int cmd_bisim_oracle(const std::string& model_path, const std::string& variant_name, double gamma,
                     const std::string& out) {
    std::string mdp_path = std::filesystem::is_directory(model_path)
                               ? model_path + "/latent_mdp.json"
                               : model_path;
    LoadedModel model;
    if (std::filesystem::is_directory(model_path)) {
        model = LoadedModel::load(model_path);
    } else {
        model.mdp = latcert::LatentMdp::load(model_path);
        std::vector<double> uni(model.mdp.n_actions(),
                                1.0 / static_cast<double>(model.mdp.n_actions()));
        for (latcert::LatentState s : model.mdp.states()) model.policy[s] = uni;
    }
    latcert::BisimVariant variant;
    if (variant_name == "reward")
        variant = latcert::BisimVariant::reward;
    else if (variant_name == "label")
        variant = latcert::BisimVariant::label;
    else
        throw std::invalid_argument("unknown variant '" + variant_name +
                                    "' (expected reward|label)");
    latcert::LatentMc mc = latcert::induce_mc(model.mdp, model.policy);
    std::vector<std::vector<double>> d = latcert::bisim_pseudometric(mc, variant, gamma);
    json out_json = {{"variant", variant_name},
                     {"gamma", gamma},
                     {"states", mc.states},
                     {"distance", d},
                     {"config_hash", hash_file(mdp_path)}};
    if (out.empty())
        std::cout << out_json.dump(2) << "\n";
    else
        write_json_file(out_json, out);
    return 0;
}

int cmd_distill_eval(const std::string& model_dir, int episodes, std::uint64_t seed,
                     bool baseline) {
    LoadedModel model = LoadedModel::load(model_dir);
    if (!model.has_net || !model.env)
        throw std::invalid_argument("distill-eval requires a model directory with "
                                    "run_config.json and checkpoint.json");
    std::vector<double> returns = latcert::distill_eval(*model.env, model.net, episodes, seed);
    json out = {{"episodes", episodes},
                {"seed", seed},
                {"mean", latcert::mean_of(returns)},
                {"returns", returns}};
    if (baseline) {
        auto heur = latcert::heuristic_policy(*model.env);
        std::vector<double> base =
            latcert::episode_returns(*model.env, *heur, episodes, seed);
        out["baseline_mean"] = latcert::mean_of(base);
    }
    std::string run_path = model_dir + "/run_config.json";
    out["config_hash"] = read_json_file(run_path).at("config_hash").get<std::string>();
    std::cout << out.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"latcert: PAC certification toolkit for discrete latent-space abstractions"};
    app.require_subcommand(1);

    bool show_version = false;
    app.add_flag("--version", show_version, "print schema versions and exit");

    // simulate
    auto* sim = app.add_subcommand("simulate", "roll out a policy and write a JSONL trace");
    std::string sim_env, sim_policy = "heuristic", sim_out, sim_env_config;
    std::size_t sim_steps = 1000;
    std::uint64_t sim_seed = 0;
    sim->add_option("--env", sim_env, "environment id")->required();
    sim->add_option("--policy", sim_policy, "heuristic|random");
    sim->add_option("--steps", sim_steps, "number of transitions");
    sim->add_option("--seed", sim_seed, "rng seed");
    sim->add_option("--env-config", sim_env_config, "JSON file with environment options");
    sim->add_option("--out", sim_out, "output trace path")->required();

    // train
    auto* tr = app.add_subcommand("train", "train the discrete-latent variational model");
    std::string tr_config, tr_out;
    tr->add_option("--config", tr_config, "run config JSON ({env:{id,...}, vae:{...}})")
        ->required();
    tr->add_option("--out", tr_out, "output model directory")->required();

    // certify
    auto* cert = app.add_subcommand("certify", "estimate local losses and assemble bounds");
    std::string ct_model, ct_trace, ct_obj, ct_c, ct_t, ct_out;
    double ct_eps = 0.01, ct_delta = 0.005, ct_gamma = 0.99;
    std::size_t ct_burn = 1000;
    cert->add_option("--model", ct_model, "model directory")->required();
    cert->add_option("--trace", ct_trace, "on-policy JSONL trace")->required();
    cert->add_option("--epsilon", ct_eps, "PAC accuracy");
    cert->add_option("--delta", ct_delta, "PAC failure probability");
    cert->add_option("--gamma", ct_gamma, "discount factor");
    cert->add_option("--burn-in", ct_burn, "transitions discarded before estimation");
    cert->add_option("--objective", ct_obj, "return|reach|constrained-reach");
    cert->add_option("--C", ct_c, "comma-separated AP indices for the constraint");
    cert->add_option("--T", ct_t, "comma-separated AP indices for the target");
    cert->add_option("--out", ct_out, "report path (default: stdout)");

    // export-prism
    auto* ex = app.add_subcommand("export-prism", "write PRISM explicit files");
    std::string ex_model, ex_out;
    bool ex_policy = false;
    ex->add_option("--model", ex_model, "latent_mdp.json or model directory")->required();
    ex->add_option("--out", ex_out, "output path prefix")->required();
    ex->add_flag("--with-policy", ex_policy, "also export the policy-induced chain");

    // bisim-oracle
    auto* bo = app.add_subcommand("bisim-oracle", "compute the bisimulation pseudometric");
    std::string bo_model, bo_variant = "reward", bo_out;
    double bo_gamma = 0.99;
    bo->add_option("--model", bo_model, "latent_mdp.json or model directory")->required();
    bo->add_option("--variant", bo_variant, "reward|label");
    bo->add_option("--gamma", bo_gamma, "discount factor");
    bo->add_option("--out", bo_out, "output path (default: stdout)");

    // distill-eval
    auto* de = app.add_subcommand("distill-eval", "evaluate the distilled latent policy");
    std::string de_model;
    int de_eps = 30;
    std::uint64_t de_seed = 0;
    bool de_base = false;
    de->add_option("--model", de_model, "model directory")->required();
    de->add_option("--episodes", de_eps, "episode count");
    de->add_option("--seed", de_seed, "rng seed");
    de->add_flag("--baseline", de_base, "also report the heuristic policy's mean");

    if (argc == 2 && std::string(argv[1]) == "--version") {
        std::cout << nlohmann::json({{"latcert", "0.1.0"},
                                     {"schemas",
                                      {{"trace_jsonl", 1},
                                       {"latent_mdp_json", 1},
                                       {"report_json", 1},
                                       {"params_json", 1},
                                       {"metrics_csv", 1},
                                       {"prism_explicit", 1}}}})
                         .dump(2)
                  << "\n";
        return 0;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (sim->parsed()) {
            json env_cfg = sim_env_config.empty() ? json::object()
                                                  : read_json_file(sim_env_config);
            return cmd_simulate(sim_env, env_cfg, sim_policy, sim_steps, sim_seed, sim_out);
        }
        if (tr->parsed()) return cmd_train(tr_config, tr_out);
        if (cert->parsed())
            return cmd_certify(ct_model, ct_trace, ct_eps, ct_delta, ct_gamma, ct_burn, ct_obj,
                               ct_c, ct_t, ct_out);
        if (ex->parsed()) return cmd_export_prism(ex_model, ex_out, ex_policy);
        if (bo->parsed()) return cmd_bisim_oracle(bo_model, bo_variant, bo_gamma, bo_out);
        if (de->parsed()) return cmd_distill_eval(de_model, de_eps, de_seed, de_base);
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
