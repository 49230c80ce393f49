#pragma once

// Experiment plumbing: the flat config file, measurement comparison,
// identifiability experiments and the convergence study.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "chemo/errors.hpp"
#include "chemo/forward.hpp"
#include "chemo/io.hpp"
#include "chemo/model.hpp"
#include "chemo/probes.hpp"
#include "chemo/recover.hpp"
#include "chemo/variation.hpp"

namespace chemo {

// ---------------------------------------------------------------------------
// Config file: `key = value` lines, dotted keys, `#` comments.

class Config {
public:
    static Config parse(std::istream& is) {
        Config c;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string body = trim(line);
            if (body.empty()) continue;
            const auto eq = body.find('=');
            if (eq == std::string::npos)
                throw InvalidArgument("config line " + std::to_string(lineno) + ": expected `key = value`");
            const std::string key = trim(body.substr(0, eq));
            const std::string value = trim(body.substr(eq + 1));
            if (key.empty() || !std::all_of(key.begin(), key.end(), [](unsigned char ch) {
                    return std::islower(ch) || std::isdigit(ch) || ch == '_' || ch == '.';
                }))
                throw InvalidArgument("config line " + std::to_string(lineno) + ": bad key `" + key + "`");
            if (!c.values_.emplace(key, value).second)
                throw InvalidArgument("config line " + std::to_string(lineno) + ": duplicate key " + key);
        }
        return c;
    }

    static Config parse(const std::string& text) {
        std::istringstream is(text);
        return parse(is);
    }

    static Config load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw InvalidArgument("cannot open config " + path);
        return parse(is);
    }

    std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set(const std::string& key, double value) { values_[key] = format_number(value); }
    const std::map<std::string, std::string>& values() const { return values_; }

    friend bool operator==(const Config& a, const Config& b) { return a.values_ == b.values_; }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

namespace detail {

/// Typed reads that remember which keys were consumed.
class ConfigReader {
public:
    explicit ConfigReader(const Config& c) : c_(c) {}

    std::string str(const std::string& key, const std::string& def) {
        used_.insert(key);
        const auto it = c_.values().find(key);
        return it == c_.values().end() ? def : it->second;
    }
    double num(const std::string& key, double def) {
        const std::string s = str(key, "");
        if (s.empty()) return def;
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw InvalidArgument("config " + key + ": not a number: " + s);
        }
    }
    long integer(const std::string& key, long def) {
        const double v = num(key, static_cast<double>(def));
        if (v != std::floor(v)) throw InvalidArgument("config " + key + ": expected an integer");
        return static_cast<long>(v);
    }
    bool flag(const std::string& key, bool def) {
        const std::string s = str(key, def ? "true" : "false");
        if (s == "true" || s == "1") return true;
        if (s == "false" || s == "0") return false;
        throw InvalidArgument("config " + key + ": expected true or false");
    }
    std::vector<double> list(const std::string& key, const std::vector<double>& def) {
        const std::string s = str(key, "");
        if (s.empty()) return def;
        std::vector<double> out;
        std::istringstream is(s);
        std::string item;
        while (std::getline(is, item, ',')) {
            try {
                out.push_back(std::stod(item));
            } catch (const std::exception&) {
                throw InvalidArgument("config " + key + ": bad list entry `" + item + "`");
            }
        }
        return out;
    }
    std::vector<std::array<std::size_t, 2>> modes(const std::string& key,
                                                  const std::vector<std::array<std::size_t, 2>>& def) {
        const std::string s = str(key, "");
        if (s.empty()) return def;
        std::vector<std::array<std::size_t, 2>> out;
        std::istringstream is(s);
        std::string item;
        while (std::getline(is, item, ';')) {
            const auto colon = item.find(':');
            try {
                if (colon == std::string::npos) throw std::invalid_argument(item);
                out.push_back({static_cast<std::size_t>(std::stoul(item.substr(0, colon))),
                               static_cast<std::size_t>(std::stoul(item.substr(colon + 1)))});
            } catch (const std::exception&) {
                throw InvalidArgument("config " + key + ": modes are written `kx:ky;kx:ky`");
            }
        }
        return out;
    }
    void reject_unknown() const {
        for (const auto& [k, v] : c_.values())
            if (!used_.count(k)) throw InvalidArgument("unknown config key: " + k);
    }

private:
    const Config& c_;
    std::set<std::string> used_;
};

inline std::string join(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_number(v[i]);
    return out;
}

inline std::string join_modes(const std::vector<std::array<std::size_t, 2>>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i)
        out += (i ? ";" : "") + std::to_string(v[i][0]) + ":" + std::to_string(v[i][1]);
    return out;
}

inline CoefficientShape parse_shape(const std::string& s) {
    if (s == "constant") return CoefficientShape::constant;
    if (s == "field") return CoefficientShape::field;
    if (s == "separable") return CoefficientShape::separable;
    throw InvalidArgument("unknown coefficient shape: " + s);
}

}  // namespace detail

/// base + amp * cos(pi kx x / Lx) cos(pi ky y / Ly)
struct ModeSpec {
    double base = 0.0;
    double amp = 0.0;
    std::array<std::size_t, 2> mode{1, 0};

    Field build(const Domain& d) const {
        Field phi = neumann_eigenmode(d, d.dim() == 1 ? std::array<std::size_t, 2>{mode[0], 0} : mode).values;
        Field out(d, base);
        out.axpy(amp, phi);
        return out;
    }
};

/// Spatial profile of a kinetics coefficient read from the config.
enum class Profile { constant, cos_linear };

struct ExperimentConfig {
    // domain
    std::size_t dim = 1;
    std::array<double, 2> lengths{1.0, 1.0};
    std::array<std::size_t, 2> nodes{129, 129};
    SolverConfig solver;
    // truth
    ParameterSet truth;
    double alpha_mod = 0.0, gamma_mod = 0.0;  ///< + mod cos(pi x1/L1)
    std::map<std::string, std::pair<double, Profile>> second_order;  ///< g11 ... h02
    // initial data of simulate / identcheck
    std::array<ModeSpec, 3> init{ModeSpec{1.0, 0.5, {1, 0}}, ModeSpec{0.0, 0.0, {1, 0}}, ModeSpec{0.0, 0.0, {1, 0}}};
    // perturbation family of linearize
    std::array<ModeSpec, 3> family{ModeSpec{1.0, 0.5, {1, 0}}, ModeSpec{0.0, 0.0, {1, 0}},
                                   ModeSpec{0.0, 0.0, {1, 0}}};
    int family_order = 2;
    PipelineConfig pipeline;
    // identifiability
    std::size_t ident_trials = 20;
    std::uint64_t ident_seed = 12345;
    double ident_spread = 0.2;
    double ident_min_gap = 0.05;
    double ident_param_tol = 1e-3;
    std::optional<double> ident_match_tol;
    std::size_t ident_search_evals = 0;
    std::map<std::string, double> ident_b2;  ///< overrides of B1 for the B2 side
    // convergence
    std::vector<double> convergence_levels{17, 33, 65};
    std::string output_dir = "out";

    static inline const std::array<const char*, 6> kSecondNames{"g11", "g20", "g02", "h11", "h20", "h02"};

    Domain domain() const {
        return dim == 1 ? Domain::line(lengths[0], nodes[0]) : Domain::box(lengths[0], lengths[1], nodes[0], nodes[1]);
    }

    /// Truth parameters with the alpha/gamma modulation applied.
    ParameterSet parameters() const { return with_modulation(truth); }

    ParameterSet with_modulation(ParameterSet p) const {
        const Domain d = domain();
        auto modulate = [&](double base, double mod) -> Coefficient {
            if (mod == 0.0) return base;
            return Field::sample(d, [&](double x, double) { return base + mod * std::cos(M_PI * x / lengths[0]); });
        };
        p.alpha = modulate(p.alpha.mean(), alpha_mod);
        p.gamma = modulate(p.gamma.mean(), gamma_mod);
        return p;
    }

    /// Applied kinetics of p with the configured second-order entries.
    KineticsSpec kinetics_for(const ParameterSet& p) const {
        KineticsSpec k = applied_kinetics(p, EquilibriumState{}, 2);
        const Domain d = domain();
        for (const auto& [name, spec] : second_order) {
            const auto [value, profile] = spec;
            if (value == 0.0) continue;
            Coefficient c = value;
            if (profile == Profile::cos_linear)
                c = Field::sample(d, [&](double x, double y) {
                    const double ly = dim == 2 ? y / lengths[1] : 0.0;
                    return value * std::cos(M_PI * x / lengths[0]) * (1.0 + ly);
                });
            const int pp = name[1] - '0', qq = name[2] - '0';
            if (name[0] == 'g')
                k.set_g(pp, qq, c);
            else
                k.set_h(pp, qq, c);
        }
        return k;
    }
    KineticsSpec kinetics() const { return kinetics_for(parameters()); }

    std::array<Field, 3> initial_data() const {
        const Domain d = domain();
        return {init[0].build(d), init[1].build(d), init[2].build(d)};
    }

    PerturbationFamily perturbation_family() const {
        const Domain d = domain();
        PerturbationFamily fam = PerturbationFamily::first_order(family[0].build(d), family[1].build(d),
                                                                 family[2].build(d));
        fam.epsilons = pipeline.epsilons;
        return fam;
    }

    ParameterSet b2() const {
        ParameterSet p = truth;
        for (const auto& [name, v] : ident_b2) {
            if (name == "chi") p.chi = v;
            else if (name == "xi") p.xi = v;
            else if (name == "r") p.r = v;
            else if (name == "mu") p.mu = v;
            else if (name == "alpha") p.alpha = v;
            else if (name == "beta") p.beta = v;
            else if (name == "gamma") p.gamma = v;
            else if (name == "delta") p.delta = v;
        }
        return with_modulation(p);
    }

    void validate() const {
        (void)domain();
        solver.validate();
        parameters().validate();
        kinetics().validate(domain());
        for (double e : pipeline.epsilons)
            if (!(e > 0.0)) throw InvalidArgument("config: epsilons must be positive");
        for (double t : {pipeline.cond_max, pipeline.residual_tol, pipeline.u_floor_rel, pipeline.cgo_tol,
                         pipeline.nonexp_tol, pipeline.mode_sigma_floor, pipeline.separability_tol,
                         pipeline.lambda_reg, ident_param_tol, ident_min_gap, ident_spread})
            if (!(t > 0.0)) throw InvalidArgument("config: tolerances must be positive");
        if (ident_match_tol && !(*ident_match_tol > 0.0))
            throw InvalidArgument("config: ident.match_tol must be positive");
        if (family_order != 1 && family_order != 2) throw InvalidArgument("config: family.order must be 1 or 2");
        if (convergence_levels.size() < 3) throw InvalidArgument("config: convergence.levels needs >= 3 levels");
    }

    static ExperimentConfig from_config(const Config& c) {
        detail::ConfigReader r(c);
        ExperimentConfig e;
        e.dim = static_cast<std::size_t>(r.integer("domain.dim", 1));
        e.lengths = {r.num("domain.length_x", 1.0), r.num("domain.length_y", 1.0)};
        e.nodes[0] = static_cast<std::size_t>(r.integer("domain.nodes_x", 129));
        e.nodes[1] = static_cast<std::size_t>(r.integer("domain.nodes_y", static_cast<long>(e.nodes[0])));

        SolverConfig& s = e.solver;
        s.tau = static_cast<int>(r.integer("solver.tau", 0));
        s.dt = r.num("solver.dt", 5e-4);
        s.t_final = r.num("solver.t_final", 1.0);
        s.stride = static_cast<int>(r.integer("solver.stride", 1));
        s.elliptic_tol = r.num("solver.elliptic_tol", s.elliptic_tol);
        s.cfl_safety = r.num("solver.cfl_safety", s.cfl_safety);
        s.chem_speedup = r.num("solver.chem_speedup", s.chem_speedup);
        s.picard_tol = r.num("solver.picard_tol", s.picard_tol);
        s.picard_max_iter = static_cast<int>(r.integer("solver.picard_max_iter", s.picard_max_iter));

        ParameterSet& p = e.truth;
        p.chi = r.num("truth.chi", 0.1);
        p.xi = r.num("truth.xi", 0.05);
        p.r = r.num("truth.r", 0.5);
        p.mu = r.num("truth.mu", 1.0);
        p.alpha = r.num("truth.alpha", 1.0);
        p.beta = r.num("truth.beta", 1.0);
        p.gamma = r.num("truth.gamma", 1.0);
        p.delta = r.num("truth.delta", 1.0);
        e.alpha_mod = r.num("truth.alpha_mod", 0.0);
        e.gamma_mod = r.num("truth.gamma_mod", 0.0);
        for (const char* n : kSecondNames) {
            const std::string key = std::string("kinetics.") + n;
            const std::string prof = r.str(key + "_profile", "constant");
            if (prof != "constant" && prof != "cos_linear")
                throw InvalidArgument("config " + key + "_profile: expected constant or cos_linear");
            e.second_order[n] = {r.num(key, 0.0), prof == "constant" ? Profile::constant : Profile::cos_linear};
        }

        auto read_mode = [&](const std::string& prefix, ModeSpec def) {
            ModeSpec m;
            m.base = r.num(prefix, def.base);
            m.amp = r.num(prefix + "_amp", def.amp);
            m.mode = {static_cast<std::size_t>(r.integer(prefix + "_mode_x", static_cast<long>(def.mode[0]))),
                      static_cast<std::size_t>(r.integer(prefix + "_mode_y", static_cast<long>(def.mode[1])))};
            return m;
        };
        const std::array<const char*, 3> comp{"u", "v", "w"};
        const std::array<const char*, 3> fam{"f1", "g1", "h1"};
        for (int i = 0; i < 3; ++i) {
            e.init[i] = read_mode(std::string("init.") + comp[i], e.init[i]);
            e.family[i] = read_mode(std::string("family.") + fam[i], e.family[i]);
        }
        e.family_order = static_cast<int>(r.integer("family.order", 2));

        const Domain d = e.domain();
        PipelineConfig& pc = e.pipeline;
        pc = PipelineConfig::for_domain(d);
        pc.epsilons = r.list("family.epsilons", pc.epsilons);
        pc.r_modes = r.modes("pipeline.r_modes", pc.r_modes);
        pc.second_modes = r.modes("pipeline.second_modes", pc.second_modes);
        pc.probe_amplitude = r.num("pipeline.probe_amplitude", pc.probe_amplitude);
        const std::string tm = r.str("pipeline.time_model", to_string(pc.time_model));
        if (tm == "imex_euler")
            pc.time_model = TimeModel::imex_euler;
        else if (tm == "continuous")
            pc.time_model = TimeModel::continuous;
        else
            throw InvalidArgument("config pipeline.time_model: expected imex_euler or continuous");
        pc.u_floor_rel = r.num("pipeline.u_floor_rel", pc.u_floor_rel);
        pc.mode_sigma_floor = r.num("pipeline.mode_sigma_floor", pc.mode_sigma_floor);
        pc.nonexp_tol = r.num("pipeline.nonexp_tol", pc.nonexp_tol);
        pc.cgo_tol = r.num("pipeline.cgo_tol", pc.cgo_tol);
        pc.cond_max = r.num("pipeline.cond_max", pc.cond_max);
        pc.residual_tol = r.num("pipeline.residual_tol", pc.residual_tol);
        pc.alpha_shape = detail::parse_shape(r.str("pipeline.alpha_shape", to_string(pc.alpha_shape)));
        pc.gamma_shape = detail::parse_shape(r.str("pipeline.gamma_shape", to_string(pc.gamma_shape)));
        pc.second_order = r.flag("pipeline.second_order", pc.second_order);
        for (const char* n : kSecondNames) {
            const CoefficientShape sh = detail::parse_shape(r.str(std::string("pipeline.shape.") + n, "constant"));
            if (sh != CoefficientShape::constant) pc.second_shapes[n] = sh;
        }
        pc.declared_gamma0 = r.num("pipeline.declared_gamma0", pc.declared_gamma0);
        pc.moment_order = static_cast<std::size_t>(r.integer("pipeline.moment_order", 6));
        pc.lambda_reg = r.num("pipeline.lambda_reg", pc.lambda_reg);
        pc.separability_tol = r.num("pipeline.separability_tol", pc.separability_tol);

        e.ident_trials = static_cast<std::size_t>(r.integer("ident.trials", 20));
        e.ident_seed = static_cast<std::uint64_t>(r.integer("ident.seed", 12345));
        e.ident_spread = r.num("ident.spread", e.ident_spread);
        e.ident_min_gap = r.num("ident.min_gap", e.ident_min_gap);
        e.ident_param_tol = r.num("ident.param_tol", e.ident_param_tol);
        if (c.has("ident.match_tol")) e.ident_match_tol = r.num("ident.match_tol", 0.0);
        e.ident_search_evals = static_cast<std::size_t>(r.integer("ident.search_evals", 0));
        for (const char* n : ParameterSet::kNames) {
            const std::string key = std::string("ident.b2.") + n;
            if (c.has(key)) e.ident_b2[n] = r.num(key, 0.0);
        }
        e.convergence_levels = r.list("convergence.levels", e.convergence_levels);
        e.output_dir = r.str("output.dir", e.output_dir);
        r.reject_unknown();
        e.validate();
        return e;
    }

    static ExperimentConfig load(const std::string& path) { return from_config(Config::load(path)); }

    /// Every key with its current value; from_config(to_config()) is the identity.
    Config to_config() const {
        Config c;
        c.set("domain.dim", std::to_string(dim));
        c.set("domain.length_x", lengths[0]);
        c.set("domain.length_y", lengths[1]);
        c.set("domain.nodes_x", std::to_string(nodes[0]));
        c.set("domain.nodes_y", std::to_string(nodes[1]));
        c.set("solver.tau", std::to_string(solver.tau));
        c.set("solver.dt", solver.dt);
        c.set("solver.t_final", solver.t_final);
        c.set("solver.stride", std::to_string(solver.stride));
        c.set("solver.elliptic_tol", solver.elliptic_tol);
        c.set("solver.cfl_safety", solver.cfl_safety);
        c.set("solver.chem_speedup", solver.chem_speedup);
        c.set("solver.picard_tol", solver.picard_tol);
        c.set("solver.picard_max_iter", std::to_string(solver.picard_max_iter));
        c.set("truth.chi", truth.chi);
        c.set("truth.xi", truth.xi);
        c.set("truth.r", truth.r);
        c.set("truth.mu", truth.mu);
        c.set("truth.alpha", truth.alpha.mean());
        c.set("truth.beta", truth.beta);
        c.set("truth.gamma", truth.gamma.mean());
        c.set("truth.delta", truth.delta);
        c.set("truth.alpha_mod", alpha_mod);
        c.set("truth.gamma_mod", gamma_mod);
        for (const auto& [n, spec] : second_order) {
            c.set("kinetics." + n, spec.first);
            c.set("kinetics." + n + "_profile", spec.second == Profile::constant ? "constant" : "cos_linear");
        }
        const std::array<const char*, 3> comp{"u", "v", "w"};
        const std::array<const char*, 3> fam{"f1", "g1", "h1"};
        auto put_mode = [&](const std::string& prefix, const ModeSpec& m) {
            c.set(prefix, m.base);
            c.set(prefix + "_amp", m.amp);
            c.set(prefix + "_mode_x", std::to_string(m.mode[0]));
            c.set(prefix + "_mode_y", std::to_string(m.mode[1]));
        };
        for (int i = 0; i < 3; ++i) {
            put_mode(std::string("init.") + comp[i], init[i]);
            put_mode(std::string("family.") + fam[i], family[i]);
        }
        c.set("family.order", std::to_string(family_order));
        c.set("family.epsilons", detail::join(pipeline.epsilons));
        c.set("pipeline.r_modes", detail::join_modes(pipeline.r_modes));
        c.set("pipeline.second_modes", detail::join_modes(pipeline.second_modes));
        c.set("pipeline.probe_amplitude", pipeline.probe_amplitude);
        c.set("pipeline.time_model", to_string(pipeline.time_model));
        c.set("pipeline.u_floor_rel", pipeline.u_floor_rel);
        c.set("pipeline.mode_sigma_floor", pipeline.mode_sigma_floor);
        c.set("pipeline.nonexp_tol", pipeline.nonexp_tol);
        c.set("pipeline.cgo_tol", pipeline.cgo_tol);
        c.set("pipeline.cond_max", pipeline.cond_max);
        c.set("pipeline.residual_tol", pipeline.residual_tol);
        c.set("pipeline.alpha_shape", to_string(pipeline.alpha_shape));
        c.set("pipeline.gamma_shape", to_string(pipeline.gamma_shape));
        c.set("pipeline.second_order", pipeline.second_order ? "true" : "false");
        for (const char* n : kSecondNames)
            c.set(std::string("pipeline.shape.") + n, to_string(pipeline.second_shape(n)));
        c.set("pipeline.declared_gamma0", pipeline.declared_gamma0);
        c.set("pipeline.moment_order", std::to_string(pipeline.moment_order));
        c.set("pipeline.lambda_reg", pipeline.lambda_reg);
        c.set("pipeline.separability_tol", pipeline.separability_tol);
        c.set("ident.trials", std::to_string(ident_trials));
        c.set("ident.seed", std::to_string(ident_seed));
        c.set("ident.spread", ident_spread);
        c.set("ident.min_gap", ident_min_gap);
        c.set("ident.param_tol", ident_param_tol);
        if (ident_match_tol) c.set("ident.match_tol", *ident_match_tol);
        c.set("ident.search_evals", std::to_string(ident_search_evals));
        for (const auto& [n, v] : ident_b2) c.set("ident.b2." + n, v);
        c.set("convergence.levels", detail::join(convergence_levels));
        c.set("output.dir", output_dir);
        return c;
    }
};

// ---------------------------------------------------------------------------
// Measurements and identifiability

/// max( sup |trace difference| over all components and times,
///      relative L2 difference of the final-time fields )
inline double measurement_distance(const MeasurementRecord& a, const MeasurementRecord& b) {
    if (!(a.domain == b.domain) || a.boundary != b.boundary)
        throw InvalidArgument("measurement_distance: records on different grids");
    if (a.times.size() != b.times.size())
        throw InvalidArgument("measurement_distance: records on different time sets");
    for (std::size_t n = 0; n < a.times.size(); ++n)
        if (std::abs(a.times[n] - b.times[n]) > 1e-12 * std::max(1.0, std::abs(a.times[n])))
            throw InvalidArgument("measurement_distance: records on different time sets");
    double sup = 0.0;
    for (auto tr : {&MeasurementRecord::boundary_u, &MeasurementRecord::boundary_v, &MeasurementRecord::boundary_w})
        for (std::size_t n = 0; n < a.times.size(); ++n)
            for (std::size_t k = 0; k < a.boundary.size(); ++k)
                sup = std::max(sup, std::abs((a.*tr)[n][k] - (b.*tr)[n][k]));
    double num = 0.0, den = 0.0;
    for (auto f : {&MeasurementRecord::final_u, &MeasurementRecord::final_v, &MeasurementRecord::final_w}) {
        const Field diff = a.*f - b.*f;
        num += inner_product(diff, diff);
        // Symmetric normalisation keeps d(a, b) = d(b, a) exact.
        den += 0.5 * (inner_product(a.*f, a.*f) + inner_product(b.*f, b.*f));
    }
    const double rel = den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
    return std::max(sup, rel);
}

/// Largest relative component gap; field coefficients use the relative L2 gap.
inline double parameter_distance(const ParameterSet& a, const ParameterSet& b) {
    const auto va = a.as_vector(), vb = b.as_vector();
    double d = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) {
        const double ref = std::abs(va[i]);
        d = std::max(d, ref > 0.0 ? std::abs(vb[i] - va[i]) / ref : std::abs(vb[i]));
    }
    for (auto m : {&ParameterSet::alpha, &ParameterSet::gamma}) {
        const Coefficient& ca = a.*m;
        const Coefficient& cb = b.*m;
        if (ca.is_constant() && cb.is_constant()) continue;
        const Domain& dom = ca.is_constant() ? cb.field().domain() : ca.field().domain();
        const Field fa = ca.sample(dom), fb = cb.sample(dom);
        const double n = l2_norm(fa);
        d = std::max(d, n > 0.0 ? l2_norm(fb - fa) / n : l2_norm(fb));
    }
    return d;
}

inline MeasurementRecord simulate_measurement(const ExperimentConfig& cfg, const ParameterSet& p,
                                              const SolverConfig& solver) {
    const auto init = cfg.initial_data();
    ForwardSolver fs(cfg.domain(), p, cfg.kinetics_for(p), solver);
    return measure(fs.solve(init[0], init[1], init[2]));
}

/// Distance between the measurements at dt and at dt/2 (stride doubled so
/// the stored times coincide).
inline double self_convergence_distance(const ExperimentConfig& cfg) {
    SolverConfig half = cfg.solver;
    half.dt *= 0.5;
    half.stride *= 2;
    const ParameterSet p = cfg.parameters();
    return measurement_distance(simulate_measurement(cfg, p, cfg.solver), simulate_measurement(cfg, p, half));
}

inline double default_match_tol(const ExperimentConfig& cfg) {
    return cfg.ident_match_tol ? *cfg.ident_match_tol : 10.0 * self_convergence_distance(cfg);
}

struct IdentReport {
    double parameter_distance = 0.0;
    double measurement_distance = 0.0;
    double match_tol = 0.0;
    double param_tol = 0.0;
    std::string verdict;  ///< "consistent" or "violation"
};

inline IdentReport make_ident_report(double pdist, double mdist, double match_tol, double param_tol) {
    IdentReport r{pdist, mdist, match_tol, param_tol, "consistent"};
    if (mdist <= match_tol && pdist > param_tol) r.verdict = "violation";
    return r;
}

/// Runs both forward maps on the configured initial data and compares.
inline IdentReport identifiability_experiment(const ParameterSet& b1, const ParameterSet& b2,
                                              const ExperimentConfig& cfg, double match_tol) {
    b1.validate();
    b2.validate();
    const MeasurementRecord m1 = simulate_measurement(cfg, b1, cfg.solver);
    const MeasurementRecord m2 = simulate_measurement(cfg, b2, cfg.solver);
    return make_ident_report(parameter_distance(b1, b2), measurement_distance(m1, m2), match_tol,
                             cfg.ident_param_tol);
}

struct SweepTrial {
    ParameterSet b2;
    IdentReport report;
};

/// Seeded random B2: every component scaled by an independent factor in
/// [1 - spread, 1 + spread], redrawn until the parameter gap is >= min_gap.
inline std::vector<SweepTrial> random_sweep(const ExperimentConfig& cfg, double match_tol) {
    std::mt19937_64 rng(cfg.ident_seed);
    std::uniform_real_distribution<double> factor(1.0 - cfg.ident_spread, 1.0 + cfg.ident_spread);
    const ParameterSet b1 = cfg.parameters();
    const MeasurementRecord m1 = simulate_measurement(cfg, b1, cfg.solver);
    std::vector<SweepTrial> out;
    for (std::size_t t = 0; t < cfg.ident_trials; ++t) {
        ParameterSet b2;
        for (int attempt = 0;; ++attempt) {
            if (attempt > 1000) throw InvalidArgument("random_sweep: cannot reach min_gap with this spread");
            b2 = cfg.truth;
            b2.chi *= factor(rng);
            b2.xi *= factor(rng);
            b2.r *= factor(rng);
            b2.mu *= factor(rng);
            b2.alpha = b2.alpha.mean() * factor(rng);
            b2.beta *= factor(rng);
            b2.gamma = b2.gamma.mean() * factor(rng);
            b2.delta *= factor(rng);
            b2 = cfg.with_modulation(b2);
            if (parameter_distance(b1, b2) >= cfg.ident_min_gap) break;
        }
        const MeasurementRecord m2 = simulate_measurement(cfg, b2, cfg.solver);
        out.push_back({b2, make_ident_report(parameter_distance(b1, b2), measurement_distance(m1, m2), match_tol,
                                             cfg.ident_param_tol)});
    }
    return out;
}

struct NearCollision {
    SweepTrial best;
    std::size_t evaluations = 0;
};

/// Compass search for the B2 closest in measurement to B1 while keeping one
/// component pinned min_gap away. A stress test: it reports the floor it
/// reaches, it proves nothing.
inline NearCollision near_collision_search(const ExperimentConfig& cfg, double match_tol, std::size_t max_evals) {
    const ParameterSet b1 = cfg.parameters();
    const MeasurementRecord m1 = simulate_measurement(cfg, b1, cfg.solver);
    auto scaled = [&](const std::array<double, 8>& f) {
        ParameterSet p = cfg.truth;
        p.chi *= f[0];
        p.xi *= f[1];
        p.r *= f[2];
        p.mu *= f[3];
        p.alpha = p.alpha.mean() * f[4];
        p.beta *= f[5];
        p.gamma = p.gamma.mean() * f[6];
        p.delta *= f[7];
        return cfg.with_modulation(p);
    };
    NearCollision best;
    best.best.report.measurement_distance = std::numeric_limits<double>::infinity();
    const std::size_t per_anchor = std::max<std::size_t>(1, max_evals / 8);
    for (std::size_t anchor = 0; anchor < 8 && best.evaluations < max_evals; ++anchor) {
        const double base = b1.as_vector()[anchor];
        if (base == 0.0) continue;
        std::array<double, 8> f;
        f.fill(1.0);
        f[anchor] = 1.0 + cfg.ident_min_gap;
        auto eval = [&](const std::array<double, 8>& g) {
            ++best.evaluations;
            const ParameterSet p = scaled(g);
            try {
                return measurement_distance(m1, simulate_measurement(cfg, p, cfg.solver));
            } catch (const NumericalFailure&) {
                return std::numeric_limits<double>::infinity();
            }
        };
        double fval = eval(f);
        std::size_t used = 1;
        double step = 0.02;
        while (used < per_anchor && step > 1e-3) {
            bool improved = false;
            for (std::size_t i = 0; i < 8 && used < per_anchor; ++i) {
                if (i == anchor) continue;
                for (double sgn : {1.0, -1.0}) {
                    std::array<double, 8> g = f;
                    g[i] += sgn * step;
                    if (std::abs(g[i] - 1.0) > cfg.ident_spread || g[i] <= 0.0) continue;
                    const double v = eval(g);
                    ++used;
                    if (v < fval) {
                        f = g;
                        fval = v;
                        improved = true;
                        break;
                    }
                }
            }
            if (!improved) step *= 0.5;
        }
        if (fval < best.best.report.measurement_distance) {
            best.best.b2 = scaled(f);
            best.best.report =
                make_ident_report(parameter_distance(b1, best.best.b2), fval, match_tol, cfg.ident_param_tol);
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Convergence study

struct ConvergenceRow {
    std::string study;
    std::size_t nodes = 0;
    double h = 0.0;
    double dt = 0.0;
    double error = 0.0;
    double order = std::numeric_limits<double>::quiet_NaN();  ///< against the previous level
    bool cfl_violation = false;
    bool excluded = false;
    bool non_monotone = false;
};

struct ConvergenceTable {
    std::vector<ConvergenceRow> rows;
    std::map<std::string, double> fitted_order;  ///< least-squares slope over non-excluded levels

    void write_csv(std::ostream& os) const {
        os << "study,nodes,h,dt,error,order,cfl_violation,excluded,non_monotone\n";
        for (const auto& r : rows)
            os << r.study << ',' << r.nodes << ',' << format_number(r.h) << ',' << format_number(r.dt) << ','
               << format_number(r.error) << ',' << (std::isnan(r.order) ? "" : format_number(r.order)) << ','
               << r.cfl_violation << ',' << r.excluded << ',' << r.non_monotone << '\n';
        for (const auto& [k, v] : fitted_order) os << "# fitted_order." << k << " = " << format_number(v) << '\n';
    }
};

namespace detail {

/// Max over nodes of |numerical - reference| for a separable cosine profile.
inline double mode_error(const Field& f, double amplitude, std::size_t k) {
    const Domain& d = f.domain();
    double e = 0.0;
    for (std::size_t j = 0; j < d.nodes(1); ++j)
        for (std::size_t i = 0; i < d.nodes(0); ++i) {
            const double ref = amplitude * std::cos(M_PI * static_cast<double>(k) * d.coord(0, i) / d.length(0));
            e = std::max(e, std::abs(f[d.index(i, j)] - ref));
        }
    return e;
}

inline void finish_study(ConvergenceTable& t, const std::string& name, bool use_dt) {
    std::vector<double> x, y;
    ConvergenceRow* prev = nullptr;
    for (auto& r : t.rows) {
        if (r.study != name) continue;
        if (prev && !prev->excluded && !r.excluded) {
            const double a = use_dt ? prev->dt / r.dt : prev->h / r.h;
            r.order = std::log(prev->error / r.error) / std::log(a);
            r.non_monotone = !(r.error < prev->error);
        }
        if (!r.excluded) {
            x.push_back(use_dt ? r.dt : r.h);
            y.push_back(r.error);
        }
        prev = &r;
    }
    if (x.size() >= 2) t.fitted_order[name] = loglog_slope(x, y);
}

/// Whether the configured chemotaxis, with chemicals at their elliptic
/// balance for the configured initial density, breaks the Courant bound at
/// this dt and grid.
inline bool violates_cfl(const ExperimentConfig& cfg, const Domain& d, double dt) {
    ExperimentConfig c = cfg;
    c.dim = d.dim();
    c.nodes = {d.nodes(0), d.nodes(1)};
    SolverConfig s = cfg.solver;
    s.tau = 0;
    s.dt = dt;
    s.t_final = dt;
    s.stride = 1;
    const ParameterSet p = c.parameters();
    const auto init = c.initial_data();
    ForwardSolver fs(d, p, c.kinetics_for(p), s);
    try {
        (void)fs.step(fs.initial_state(init[0], init[1], init[2]));
    } catch (const CflViolation&) {
        return true;
    }
    return false;
}

}  // namespace detail

/// Manufactured-solution errors on the configured domain family (1D line of
/// length L, node counts from `levels`):
///   forward_space     heat mode vs (1 + lambda dt)^-n cos, fixed dt
///   forward_time      heat mode vs exp(-lambda_h T) cos, finest grid, dt halved
///   elliptic          -Lap v + v = (lambda + 1) cos
///   variation1        u1 = exp((r - lambda) t) cos, dt ~ h^2
///   variation2        second variation of u0 = 0 with chi = xi = 0, dt ~ h^2
/// A level whose dt violates the CFL bound of the configured chemotaxis is
/// flagged and left out of the fits.
inline ConvergenceTable convergence_study(const ExperimentConfig& cfg, std::vector<std::size_t> levels) {
    if (levels.size() < 3) throw InvalidArgument("convergence_study: needs at least three levels");
    std::sort(levels.begin(), levels.end());
    const double len = cfg.lengths[0];
    const double lam = M_PI * M_PI / (len * len);
    const double tf = std::min(cfg.solver.t_final, 0.1);
    ConvergenceTable table;

    ParameterSet heat;
    heat.chi = heat.xi = heat.r = 0.0;
    heat.mu = 1e-300;
    const KineticsSpec heat_k = applied_kinetics(heat, EquilibriumState{}, 1);

    auto heat_run = [&](const Domain& d, double dt) {
        SolverConfig s;
        s.tau = 1;
        s.dt = dt;
        s.t_final = tf;
        s.stride = static_cast<int>(std::llround(tf / dt));
        const Field f = Field::sample(d, [&](double x, double) { return 1.0 + std::cos(M_PI * x / len); });
        ForwardSolver fs(d, heat, heat_k, s);
        Field u = fs.solve(f, Field(d), Field(d)).final_state().u;
        for (double& v : u.raw()) v -= 1.0;
        return u;
    };

    const double dt_space = 1e-4;
    for (std::size_t n : levels) {
        const Domain d = Domain::line(len, n);
        ConvergenceRow r{"forward_space", n, d.spacing(0), dt_space};
        r.cfl_violation = detail::violates_cfl(cfg, d, dt_space);
        r.excluded = r.cfl_violation;
        const double steps = std::round(tf / dt_space);
        r.error = detail::mode_error(heat_run(d, dt_space), std::pow(1.0 + lam * dt_space, -steps), 1);
        table.rows.push_back(r);
    }
    detail::finish_study(table, "forward_space", false);

    {
        const Domain d = Domain::line(len, levels.back());
        const double lam_h = neumann_eigenmode(d, {1, 0}).lambda_h;
        for (std::size_t i = 0; i < levels.size(); ++i) {
            const double dt = 1e-2 / static_cast<double>(1u << i);
            ConvergenceRow r{"forward_time", levels.back(), d.spacing(0), dt};
            r.cfl_violation = detail::violates_cfl(cfg, d, dt);
            r.excluded = r.cfl_violation;
            r.error = detail::mode_error(heat_run(d, dt), std::exp(-lam_h * tf), 1);
            table.rows.push_back(r);
        }
        detail::finish_study(table, "forward_time", true);
    }

    for (std::size_t n : levels) {
        const Domain d = Domain::line(len, n);
        const Field src = Field::sample(d, [&](double x, double) { return (lam + 1.0) * std::cos(M_PI * x / len); });
        ConvergenceRow r{"elliptic", n, d.spacing(0), 0.0};
        r.error = detail::mode_error(elliptic_solve(src, 1.0, 1e-13), 1.0, 1);
        table.rows.push_back(r);
    }
    detail::finish_study(table, "elliptic", false);

    // Variations about u = v = w = 0 with chi = xi = 0: closed forms per mode.
    ParameterSet p;
    p.chi = p.xi = 0.0;
    p.r = cfg.truth.r;
    p.mu = cfg.truth.mu;
    const KineticsSpec k = applied_kinetics(p, EquilibriumState{}, 2);
    const double theta = p.r - lam;
    for (std::size_t n : levels) {
        const Domain d = Domain::line(len, n);
        const double h = d.spacing(0);
        const double dt = 0.25 * h * h;
        SolverConfig s;
        s.tau = 0;
        s.dt = dt;
        s.t_final = std::round(tf / dt) * dt;
        const double t = s.t_final;
        const Field f1 = Field::sample(d, [&](double x, double) { return std::cos(M_PI * x / len); });
        PerturbationFamily fam = PerturbationFamily::first_order(f1, Field(d), Field(d));
        const VariationStack v1 = solve_first_variation(p, k, fam, s);
        const VariationStack v2 = solve_second_variation(p, k, fam, v1, s);
        const bool cfl = detail::violates_cfl(cfg, d, dt);

        ConvergenceRow a{"variation1", n, h, dt};
        a.cfl_violation = a.excluded = cfl;
        a.error = detail::mode_error(v1.order1.final_state().u, std::exp(theta * t), 1);
        table.rows.push_back(a);

        // u2 = a0(t) + a2(t) cos(2 pi x / L) from -2 mu U1^2 = -mu e^{2 theta t}(1 + cos 2 pi x/L).
        const double a0 = -p.mu * (std::exp(2 * theta * t) - std::exp(p.r * t)) / (2 * theta - p.r);
        const double a2 = -p.mu * (std::exp(2 * theta * t) - std::exp((p.r - 4 * lam) * t)) / (2 * theta - p.r + 4 * lam);
        const Field& u2 = v2.order2->final_state().u;
        double e2 = 0.0;
        for (std::size_t i = 0; i < d.nodes(0); ++i) {
            const double x = d.coord(0, i);
            e2 = std::max(e2, std::abs(u2[i] - a0 - a2 * std::cos(2 * M_PI * x / len)));
        }
        ConvergenceRow b{"variation2", n, h, dt};
        b.cfl_violation = b.excluded = cfl;
        b.error = e2;
        table.rows.push_back(b);
    }
    detail::finish_study(table, "variation1", false);
    detail::finish_study(table, "variation2", false);
    return table;
}

}  // namespace chemo
