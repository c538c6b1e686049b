// Command-line front end: run / eval / verify / flops / ellipticity.
// Exit codes: 0 ok, 1 verification failure, 2 config or input error, 3 NaN-guard abort.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "cvnn/experiment.hpp"
#include "cvnn/verify.hpp"

using namespace cvnn;

namespace {

constexpr int kOk = 0, kVerifyFail = 1, kConfigError = 2, kNanAbort = 3;

// Suite thresholds.
constexpr double kGradTol = 1e-4;
constexpr double kMeanTol = 1e-6, kGammaTol = 1e-4, kRelationTol = 1e-4;
constexpr double kInvSqrtTol = 1e-9, kOracleTol = 1e-12;
constexpr double kInitRelTol = 0.02, kPhaseTol = 0.01, kUnitaryTol = 1e-10;
constexpr double kBudget = 1.7e6, kBudgetBand = 0.10;
constexpr double kCondTol = 1e-6, kNaiveMedianMin = 10;

bool line(const std::string& label, double value, const char* op, double bound, bool ok) {
    std::printf("  %-44s %12.4e %s %-10.3g %s\n", label.c_str(), value, op, bound, ok ? "ok" : "FAIL");
    return ok;
}

bool suite_gradcheck(std::uint64_t seed, std::size_t instances) {
    bool all = true;
    std::printf("gradcheck: central differences, step 1e-3, double precision, %zu instances per op\n", instances);
    std::printf("  %-32s %9s %8s %12s %12s %6s %8s\n", "op", "checked", "skipped", "max_rel", "norm_rel",
                "over", "refined");
    for (const auto& r : run_gradcheck(seed, instances)) {
        const bool ok = r.max_rel < kGradTol;
        all = all && ok;
        std::printf("  %-32s %9zu %8zu %12.4e %12.4e %6zu %8zu %s\n", r.name.c_str(), r.checked, r.rejected,
                    r.max_rel, r.max_rel_norm, r.over, r.over_refined, ok ? "ok" : "FAIL");
    }
    std::printf("  over: components >= %.0e at step 1e-3; refined: of those, still >= %.0e at step 1e-5\n",
                kGradTol, kGradTol);
    return all;
}

bool suite_whitening(std::uint64_t seed) {
    const WhiteningStats w = measure_whitening(seed);
    const InvSqrtStats s = measure_inv_sqrt(seed);
    std::printf("whitening: batches of 256, eps 1e-5\n");
    bool ok = true;
    ok &= line("max |mean|", w.max_abs_mean, "<", kMeanTol, w.max_abs_mean < kMeanTol);
    ok &= line("max |Gamma - 1|", w.max_gamma_err, "<", kGammaTol, w.max_gamma_err < kGammaTol);
    ok &= line("max |C|", w.max_abs_c, "<", kRelationTol, w.max_abs_c < kRelationTol);
    ok &= line("inv_sqrt: max |M (V + eps I) M - I|", s.max_identity_err, "<", kInvSqrtTol,
               s.max_identity_err < kInvSqrtTol);
    ok &= line("inv_sqrt [[5,4],[4,5]] vs eigendecomposition", s.oracle_err, "<", kOracleTol,
               s.oracle_err < kOracleTol);
    return ok;
}

bool suite_initstats(std::uint64_t seed) {
    const InitStats s = measure_init(seed);
    std::printf("initstats: 1e5 Rayleigh draws per criterion\n");
    bool ok = true;
    ok &= line("glorot E|W|^2 relative error", s.glorot_var_rel, "<", kInitRelTol, s.glorot_var_rel < kInitRelTol);
    ok &= line("he E|W|^2 relative error", s.he_var_rel, "<", kInitRelTol, s.he_var_rel < kInitRelTol);
    ok &= line("E|W| relative error", s.mean_mag_rel, "<", kInitRelTol, s.mean_mag_rel < kInitRelTol);
    ok &= line("|E exp(i theta)|", s.phase_resultant, "<", kPhaseTol, s.phase_resultant < kPhaseTol);
    ok &= line("semi-unitary orthonormality error", s.semi_unitary_err, "<", kUnitaryTol,
               s.semi_unitary_err < kUnitaryTol);
    line("Var|W| relative error (info)", s.var_mag_rel, "~", 0.0, true);
    line("unitary rescale variance error (info)", s.unitary_rescale_rel, "~", 0.0, true);
    return ok;
}

bool suite_budget() {
    std::printf("budget: 1.7M parameters +-10%%\n");
    bool ok = true;
    for (const auto& b : measure_budgets()) {
        const double rel = double(b.params) / kBudget - 1;
        const bool pass = std::abs(rel) <= kBudgetBand;
        ok &= pass;
        std::printf("  %-4s %10zu params  %+6.2f%%  %s\n", b.name.c_str(), b.params, 100 * rel, pass ? "ok" : "FAIL");
    }
    return ok;
}

bool suite_flops() {
    const FlopStats f = measure_flops();
    std::printf("flops: real multiplies per example\n");
    bool ok = true;
    ok &= line("complex/real conv layer ratio", f.layer_ratio, "==", 4.0, f.layer_ratio == 4.0);
    std::printf("  CWS %llu, RWS %llu\n", (unsigned long long)f.cws, (unsigned long long)f.rws);
    ok &= line("CWS/RWS whole-model ratio in [3.5, 4.5]", f.model_ratio, "~", 4.0,
               f.model_ratio >= 3.5 && f.model_ratio <= 4.5);
    return ok;
}

bool suite_ellipticity(std::uint64_t seed) {
    const EllipticityStats e = measure_ellipticity(seed);
    std::printf("ellipticity: 20 seeds x 20 layers, 1000 points\n");
    bool ok = true;
    ok &= line("full: max |cond - 1|", e.full_max_dev, "<", kCondTol, e.full_max_dev < kCondTol);
    ok &= line("naive: median final cond", e.naive_median_final, ">", kNaiveMedianMin,
               e.naive_median_final > kNaiveMedianMin);
    return ok;
}

bool suite_activations(std::uint64_t seed) {
    const ActivationRegionStats a = measure_activation_regions(seed);
    std::printf("activations: 100 points per region\n");
    bool ok = true;
    ok &= line("crelu CR residual, quadrants I/III (max)", a.crelu_cr_max_q13, "<", 1e-6, a.crelu_cr_max_q13 < 1e-6);
    ok &= line("crelu CR residual, quadrants II/IV (min)", a.crelu_cr_min_q24, ">", 0.5, a.crelu_cr_min_q24 > 0.5);
    ok &= line("zrelu phase change", a.zrelu_phase_err, "<", 1e-10, a.zrelu_phase_err < 1e-10);
    ok &= line("modrelu phase change", a.modrelu_phase_err, "<", 1e-10, a.modrelu_phase_err < 1e-10);
    return ok;
}

ExperimentConfig config_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
    ExperimentConfig c = load_config(path);
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        apply_config_key(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    validate_config(c);
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"complex-valued network toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    auto* run = app.add_subcommand("run", "train a model from a config file");
    run->add_option("config", config_path, "config file")->required();
    run->add_option("--set", sets, "override a config key (key=value)");

    std::string ckpt_path, data_arg;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("checkpoint", ckpt_path)->required();
    eval->add_option("data", data_arg, "'val' or a CIFAR binary file")->required();

    std::string suite;
    std::uint64_t seed = 1234;
    std::size_t instances = 5;
    auto* verify = app.add_subcommand("verify", "run a property suite");
    verify->add_option("suite", suite)
        ->required()
        ->check(CLI::IsMember({"gradcheck", "whitening", "initstats", "budget", "flops", "ellipticity",
                               "activations", "all"}));
    verify->add_option("--seed", seed);
    verify->add_option("--instances", instances, "random instances per op (gradcheck)");

    auto* flops = app.add_subcommand("flops", "per-layer real-multiply counts for a config");
    flops->add_option("config", config_path, "config file")->required();
    flops->add_option("--set", sets, "override a config key (key=value)");

    std::size_t layers = 20, points = 1000, seeds = 20;
    std::string mode = "full", out_path;
    auto* ell = app.add_subcommand("ellipticity", "covariance condition numbers through stacked random layers");
    ell->add_option("--layers", layers);
    ell->add_option("--points", points);
    ell->add_option("--mode", mode)->check(CLI::IsMember({"naive", "full"}));
    ell->add_option("--seeds", seeds);
    ell->add_option("--seed", seed, "root seed");
    ell->add_option("--out", out_path, "CSV path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kConfigError;
    }

    try {
        if (*run) {
            const ExperimentConfig cfg = config_with_overrides(config_path, sets);
            const RunResult r = run_experiment(cfg);
            if (r.aborted) {
                std::fprintf(stderr, "NaN guard tripped at %s\n", r.nan_where.c_str());
                return kNanAbort;
            }
            std::printf("finished %zu epochs, best metric %.6g, outputs in %s\n", r.history.size(),
                        r.best_metric, cfg.output_dir.c_str());
            return kOk;
        }
        if (*eval) {
            const EvalResult e = evaluate_checkpoint(ckpt_path, data_arg);
            nlohmann::json j{{"loss", e.loss}, {"metric", e.metric}};
            std::cout << j.dump(2) << "\n";
            return kOk;
        }
        if (*verify) {
            bool ok = true;
            const bool all = suite == "all";
            if (all || suite == "gradcheck") ok &= suite_gradcheck(seed, instances);
            if (all || suite == "whitening") ok &= suite_whitening(seed);
            if (all || suite == "initstats") ok &= suite_initstats(seed);
            if (all || suite == "budget") ok &= suite_budget();
            if (all || suite == "flops") ok &= suite_flops();
            if (all || suite == "ellipticity") ok &= suite_ellipticity(seed);
            if (all || suite == "activations") ok &= suite_activations(seed);
            std::printf("%s\n", ok ? "PASS" : "FAIL");
            return ok ? kOk : kVerifyFail;
        }
        if (*flops) {
            const ExperimentConfig cfg = config_with_overrides(config_path, sets);
            auto net = build_model<float>(cfg.model, cfg.seed);
            const Shape ex = example_shape(cfg.model, cfg.data.seq_len);
            const auto costs = net->flops(ex);
            for (const auto& c : costs) std::printf("%-40s %14llu\n", c.name.c_str(), (unsigned long long)c.multiplies);
            std::printf("%-40s %14llu\n", "total", (unsigned long long)total_multiplies(costs));
            std::printf("%-40s %14zu\n", "parameters", net->parameter_count());
            return kOk;
        }
        if (*ell) {
            const StandardizeMode m = parse_standardize_mode(mode);
            std::ofstream file;
            if (!out_path.empty()) {
                file.open(out_path);
                if (!file) throw ConfigError("cannot write " + out_path);
            }
            std::ostream& os = out_path.empty() ? std::cout : file;
            os << "seed,layer,mode,condition\n";
            os.precision(17);
            for (std::size_t k = 0; k < seeds; ++k) {
                const std::uint64_t s = derive_seed(seed, std::uint64_t(k));
                const auto conds = ellipticity_harness(points, layers, m, s);
                for (std::size_t l = 0; l < conds.size(); ++l) os << k << "," << l << "," << mode << "," << conds[l] << "\n";
            }
            return kOk;
        }
    } catch (const NanGuardError& e) {
        std::fprintf(stderr, "NaN guard: %s\n", e.what());
        return kNanAbort;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kConfigError;
    }
    return kOk;
}
