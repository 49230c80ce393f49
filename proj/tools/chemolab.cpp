// chemolab: command-line driver for simulation, linearization, recovery,
// identifiability checks and convergence studies.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <string>

#include "CLI11.hpp"
#include "chemo/harness.hpp"

namespace fs = std::filesystem;
using namespace chemo;

namespace {

enum Exit { kOk = 0, kUsage = 1, kNumerical = 2, kAcceptance = 3 };

struct Options {
    std::string config;
    std::string out;
    int tau = -1;
    bool quiet = false;
    bool self_test = false;
};

std::ofstream open_out(const fs::path& dir, const std::string& name) {
    fs::create_directories(dir);
    std::ofstream os(dir / name);
    if (!os) throw Error("cannot write " + (dir / name).string());
    return os;
}

int simulate(const ExperimentConfig& cfg, const fs::path& out, bool quiet) {
    const auto init = cfg.initial_data();
    const ParameterSet p = cfg.parameters();
    ForwardSolver solver(cfg.domain(), p, cfg.kinetics_for(p), cfg.solver);
    const Trajectory traj = solver.solve(init[0], init[1], init[2]);
    const MeasurementRecord m = measure(traj);
    auto t = open_out(out, "trajectory.csv");
    write_trajectory_csv(t, traj);
    auto mc = open_out(out, "measurement.csv");
    write_measurement_csv(mc, m);
    write_binary((out / "trajectory.bin").string(), traj);
    write_binary((out / "measurement.bin").string(), m);
    if (!quiet) {
        double umin = std::numeric_limits<double>::infinity();
        for (const State& s : traj.states)
            for (double v : s.u.values()) umin = std::min(umin, v);
        std::printf("simulate: %zu stored states, t_final = %g, min u = %.3e\n", traj.states.size(),
                    traj.times.back(), umin);
    }
    return kOk;
}

int linearize(const ExperimentConfig& cfg, const fs::path& out, bool quiet, bool self_test) {
    const Domain d = cfg.domain();
    const ParameterSet p = cfg.parameters();
    const KineticsSpec k = cfg.kinetics_for(p);
    const PerturbationFamily fam = cfg.perturbation_family();
    VariationStack direct = solve_first_variation(p, k, fam, cfg.solver);
    if (cfg.family_order == 2) direct = solve_second_variation(p, k, fam, direct, cfg.solver);
    Oracle oracle(d, p, k, cfg.solver);
    const VariationStack fd = extract_variation_fd(oracle.as_map(), k, fam, cfg.family_order);
    const ConsistencyReport rep = consistency_report(direct, fd);

    auto a = open_out(out, "variation_direct.csv");
    write_variation_csv(a, direct);
    auto b = open_out(out, "variation_fd.csv");
    write_variation_csv(b, fd);
    auto c = open_out(out, "consistency.csv");
    c << "order,epsilon,l2,linf\n";
    for (const auto& r : rep.rows)
        c << r.order << ',' << format_number(r.epsilon) << ',' << format_number(r.l2) << ',' << format_number(r.linf)
          << '\n';
    c << "# slope_order1 = " << format_number(rep.slope_order1) << '\n';
    if (cfg.family_order == 2) c << "# slope_order2 = " << format_number(rep.slope_order2) << '\n';

    if (!quiet) {
        std::printf("linearize: order-1 slope %.3f%s\n", rep.slope_order1, rep.floor_order1 ? " (at floor)" : "");
        if (cfg.family_order == 2)
            std::printf("linearize: order-2 slope %.3f%s\n", rep.slope_order2, rep.floor_order2 ? " (at floor)" : "");
    }
    if (self_test) {
        const bool ok1 = rep.floor_order1 || rep.slope_order1 >= 0.8;
        const bool ok2 = cfg.family_order != 2 || rep.floor_order2 || rep.slope_order2 >= 0.8;
        if (!ok1 || !ok2) return kAcceptance;
    }
    return kOk;
}

int recover(const ExperimentConfig& cfg, const fs::path& out, bool quiet, bool self_test) {
    const ParameterSet p = cfg.parameters();
    const KineticsSpec k = cfg.kinetics_for(p);
    Oracle oracle(cfg.domain(), p, k, cfg.solver);
    RecoveryReport rep = run_full_pipeline(oracle, cfg.pipeline);
    rep.attach_truth(p, k);

    auto t = open_out(out, "report.txt");
    write_report_text(t, rep);
    auto c = open_out(out, "report.csv");
    write_report_csv(c, rep);
    if (!rep.fields.empty()) {
        std::vector<std::pair<std::string, const Field*>> cols;
        for (const auto& [name, f] : rep.fields) cols.emplace_back(name, &f);
        auto fcsv = open_out(out, "fields.csv");
        write_fields_csv(fcsv, cols);
    }

    if (!quiet)
        for (const auto& s : rep.stages)
            for (const auto& e : s.estimates)
                std::printf("%-16s %-6s %12.6g  rel_error %s\n", s.stage.c_str(), e.name.c_str(), e.estimate,
                            e.rel_error ? format_number(*e.rel_error).c_str() : "-");
    if (!rep.complete) {
        std::fprintf(stderr, "recover: numerical failure in %s\n", rep.failure.c_str());
        return kNumerical;
    }
    if (self_test)
        for (const char* n : ParameterSet::kNames) {
            const StageEstimate* e = rep.find(n);
            if (!e || !e->rel_error || *e->rel_error > 0.05) return kAcceptance;
        }
    return kOk;
}

int identcheck(const ExperimentConfig& cfg, const fs::path& out, bool quiet, bool self_test) {
    const double match_tol = default_match_tol(cfg);
    const IdentReport pair = identifiability_experiment(cfg.parameters(), cfg.b2(), cfg, match_tol);
    auto c = open_out(out, "ident.csv");
    c << "trial,parameter_distance,measurement_distance,match_tol,param_tol,verdict\n";
    auto row = [&](const std::string& label, const IdentReport& r) {
        c << label << ',' << format_number(r.parameter_distance) << ',' << format_number(r.measurement_distance)
          << ',' << format_number(r.match_tol) << ',' << format_number(r.param_tol) << ',' << r.verdict << '\n';
    };
    row("pair", pair);
    bool failed = pair.verdict == "violation";
    std::size_t below = 0;
    if (cfg.ident_trials > 0) {
        const auto trials = random_sweep(cfg, match_tol);
        for (std::size_t i = 0; i < trials.size(); ++i) {
            row(std::to_string(i), trials[i].report);
            if (trials[i].report.verdict == "violation") failed = true;
            if (trials[i].report.measurement_distance < 10.0 * match_tol) ++below;
        }
    }
    if (cfg.ident_search_evals > 0) {
        const NearCollision nc = near_collision_search(cfg, match_tol, cfg.ident_search_evals);
        row("search", nc.best.report);
        if (!quiet)
            std::printf("identcheck: closest B2 after %zu evaluations: measurement distance %.3e\n", nc.evaluations,
                        nc.best.report.measurement_distance);
    }
    if (!quiet) {
        std::printf("identcheck: match_tol %.3e, pair verdict %s (parameter %.3e, measurement %.3e)\n", match_tol,
                    pair.verdict.c_str(), pair.parameter_distance, pair.measurement_distance);
        if (cfg.ident_trials > 0)
            std::printf("identcheck: %zu of %zu random trials below 10 x match_tol\n", below, cfg.ident_trials);
    }
    if (self_test && (failed || below > 0)) return kAcceptance;
    return kOk;
}

int convergence(const ExperimentConfig& cfg, const fs::path& out, bool quiet, bool self_test) {
    std::vector<std::size_t> levels;
    for (double n : cfg.convergence_levels) levels.push_back(static_cast<std::size_t>(n));
    const ConvergenceTable t = convergence_study(cfg, levels);
    auto c = open_out(out, "convergence.csv");
    t.write_csv(c);
    bool ok = true;
    for (const auto& [name, order] : t.fitted_order) {
        const double expected = name == "forward_time" ? 1.0 : 2.0;
        ok = ok && std::abs(order - expected) <= 0.2;
        if (!quiet) std::printf("convergence: %-14s order %.3f (expected %.0f)\n", name.c_str(), order, expected);
    }
    for (const auto& r : t.rows) {
        if (r.non_monotone) {
            ok = false;
            if (!quiet) std::printf("convergence: %s non-monotone at N = %zu\n", r.study.c_str(), r.nodes);
        }
        if (r.cfl_violation && !quiet)
            std::printf("convergence: %s level N = %zu violates CFL, excluded\n", r.study.c_str(), r.nodes);
    }
    return self_test && !ok ? kAcceptance : kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attraction-repulsion chemotaxis: forward solves and parameter recovery"};
    app.require_subcommand(1, 1);
    Options opt;
    app.add_option("--config", opt.config, "experiment config (key = value)")->check(CLI::ExistingFile);
    app.add_option("--out", opt.out, "output directory (overrides output.dir)");
    app.add_option("--tau", opt.tau, "0: elliptic chemicals, 1: parabolic chemicals")->check(CLI::IsMember({0, 1}));
    app.add_flag("--quiet", opt.quiet, "no summary on stdout");
    app.add_flag("--self-test", opt.self_test, "exit 3 when the run misses its acceptance thresholds");

    auto* sim = app.add_subcommand("simulate", "forward run to CSV and binary");
    auto* lin = app.add_subcommand("linearize", "variation stacks and consistency report");
    auto* rec = app.add_subcommand("recover", "full recovery pipeline");
    auto* idc = app.add_subcommand("identcheck", "identifiability experiments");
    auto* conv = app.add_subcommand("convergence", "manufactured-solution convergence table");
    for (auto* s : {sim, lin, rec, idc, conv}) s->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return kUsage;
    }

    ExperimentConfig cfg;
    try {
        Config raw = opt.config.empty() ? Config{} : Config::load(opt.config);
        if (opt.tau >= 0) raw.set("solver.tau", std::to_string(opt.tau));
        if (!opt.out.empty()) raw.set("output.dir", opt.out);
        cfg = ExperimentConfig::from_config(raw);
    } catch (const InvalidArgument& e) {
        std::cerr << "chemolab: " << e.what() << '\n';
        return kUsage;
    }

    const fs::path out = cfg.output_dir;
    try {
        if (sim->parsed()) return simulate(cfg, out, opt.quiet);
        if (lin->parsed()) return linearize(cfg, out, opt.quiet, opt.self_test);
        if (rec->parsed()) return recover(cfg, out, opt.quiet, opt.self_test);
        if (idc->parsed()) return identcheck(cfg, out, opt.quiet, opt.self_test);
        return convergence(cfg, out, opt.quiet, opt.self_test);
    } catch (const NumericalFailure& e) {
        std::cerr << "chemolab: numerical failure in stage " << e.stage() << ": " << e.what() << '\n';
        return kNumerical;
    } catch (const InvalidArgument& e) {
        std::cerr << "chemolab: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "chemolab: " << e.what() << '\n';
        return kNumerical;
    }
}
