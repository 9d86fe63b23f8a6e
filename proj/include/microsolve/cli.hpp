#pragma once
/*
 * Scenario files and run orchestration for the microsolve command line.
 *
 * Scenario format (one `key = value` per line, `#` starts a comment, strings
 * in double quotes):
 *
 *   name                = "transport-demo"
 *   dimension           = 1
 *   modes               = 64
 *   time_window         = 3.14159265358979   # period of the time axis
 *   dt                  = 0.0490873852123405 # time_window / modes
 *   principal_symbol    = "tau + (1+v0)*xi1; order=1; homogeneous=1"
 *   subprincipal_symbol = "0; order=0"
 *   forcing             = "-i*0.05*cos(t)*cos(x1)"
 *   prescribed[0]       = 0
 *   params.rho          = 8
 *   real_mode           = true
 *
 * The space-time torus has 2 pi periodic grid time t' with t = s t',
 * s = dt modes / (2 pi).  Symbols and data are transformed to t' on load and
 * results are reported in physical time.
 */

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "solver.hpp"
#include "verify.hpp"

namespace microsolve {

struct Scenario {
    std::string name;
    int dimension = 1;
    int modes = 64;
    double time_window = two_pi;
    double dt = two_pi / 64;
    std::string principal_text, subprincipal_text, forcing_text;
    Symbol principal, subprincipal;  // in physical time
    Expr forcing;
    std::vector<cplx> prescribed;    // u_alpha in physical time, graded order
    SolveParams params;
    bool real_mode = false;
    std::vector<double> rho_ladder{8.0, 16.0, 32.0};
    bool match_derivatives = false;
    double match_tol = 1e-6;
    std::string oracle_speed_text;   // quasilinear transport speed c(v0), enables the characteristics check
    Expr oracle_speed;
    double residual_limit = 1e-4;
    double oracle_limit = 1e-4;

    int order() const { return int(std::lround(principal.order())); }
    double time_scale() const { return dt * modes / two_pi; }
    TorusGrid grid() const { return TorusGrid(2, modes); }
};

namespace detail {

inline std::string trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return std::string(s);
}

// Strips a trailing comment outside quotes and the surrounding quotes of a string value.
inline std::string scenario_value(std::string_view raw, const std::string& where) {
    std::string v = trim(raw);
    if (!v.empty() && v.front() == '"') {
        auto close = v.find('"', 1);
        if (close == std::string::npos) throw ConfigError(where + ": unterminated string");
        const std::string rest = trim(std::string_view(v).substr(close + 1));
        if (!rest.empty() && rest[0] != '#') throw ConfigError(where + ": trailing text after string");
        return v.substr(1, close - 1);
    }
    if (auto hash = v.find('#'); hash != std::string::npos) v = trim(std::string_view(v).substr(0, hash));
    return v;
}

inline double scenario_number(const std::string& v, const std::string& where) {
    char* end = nullptr;
    double x = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size()) throw ConfigError(where + ": expected a number, got '" + v + "'");
    return x;
}

inline int scenario_int(const std::string& v, const std::string& where) {
    double x = scenario_number(v, where);
    if (x != std::round(x)) throw ConfigError(where + ": expected an integer, got '" + v + "'");
    return int(x);
}

inline bool scenario_bool(const std::string& v, const std::string& where) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(where + ": expected true or false, got '" + v + "'");
}

inline cplx constant_value(const std::string& text, const std::string& where) {
    try {
        expr::Parser parser(text);
        Expr e = parser.parse_expression();
        if (parser.pos() != text.size()) throw ParseError("trailing input", int(parser.pos()) + 1);
        expr::Usage u;
        expr::collect_usage(e, u);
        if (u.t || u.tau || u.absxi || u.x_dims || u.xi_dims || u.jet_arity)
            throw ConfigError("expected a constant");
        return expr::eval(*e, EvalPoint{});
    } catch (const Error& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

inline std::vector<double> parse_ladder(const std::string& text, const std::string& where) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(scenario_number(trim(item), where));
    if (out.empty()) throw ConfigError(where + ": empty rho ladder");
    for (double r : out)
        if (!(r >= 2.0)) throw ConfigError(where + ": ladder entries must be >= 2");
    return out;
}

inline void set_param(SolveParams& p, const std::string& field, const std::string& v, const std::string& where) {
    static const std::map<std::string, double SolveParams::*> reals{
        {"cone_aperture", &SolveParams::cone_aperture}, {"rho", &SolveParams::rho},
        {"delta", &SolveParams::delta},                 {"delta0", &SolveParams::delta0},
        {"c0", &SolveParams::c0},                       {"c2", &SolveParams::c2},
        {"outer_radius", &SolveParams::outer_radius},   {"picard_tol", &SolveParams::picard_tol},
        {"neumann_tol", &SolveParams::neumann_tol},     {"c_cfl", &SolveParams::c_cfl}};
    static const std::map<std::string, int SolveParams::*> ints{{"sobolev_index", &SolveParams::sobolev_index},
                                                                {"jet_depth", &SolveParams::jet_depth},
                                                                {"max_picard_iters", &SolveParams::max_picard_iters},
                                                                {"preferred_time_index", &SolveParams::preferred_time_index}};
    if (auto it = reals.find(field); it != reals.end()) p.*(it->second) = scenario_number(v, where);
    else if (auto jt = ints.find(field); jt != ints.end()) p.*(jt->second) = scenario_int(v, where);
    else if (field == "single_cone") p.single_cone = scenario_bool(v, where);
    else throw ConfigError(where + ": unknown parameter 'params." + field + "'");
}

}  // namespace detail

// Parses scenario text; `origin` prefixes error locations.
inline Scenario parse_scenario(std::string_view text, const std::string& origin = "scenario") {
    Scenario sc;
    std::map<std::string, std::string> seen;
    std::map<int, cplx> prescribed;
    bool have_window = false, have_dt = false, have_delta0 = false;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string body = detail::trim(line);
        if (body.empty() || body[0] == '#') continue;
        auto eq = body.find('=');
        const std::string loc = origin + ":" + std::to_string(lineno);
        if (eq == std::string::npos) throw ConfigError(loc + ": expected 'key = value'");
        const std::string key = detail::trim(std::string_view(body).substr(0, eq));
        const std::string where = loc + ": key '" + key + "'";
        const std::string value = detail::scenario_value(std::string_view(body).substr(eq + 1), where);
        if (seen.count(key)) throw ConfigError(where + ": duplicate key");
        seen[key] = value;
        if (key == "name") sc.name = value;
        else if (key == "dimension") sc.dimension = detail::scenario_int(value, where);
        else if (key == "modes") sc.modes = detail::scenario_int(value, where);
        else if (key == "time_window") sc.time_window = detail::scenario_number(value, where), have_window = true;
        else if (key == "dt") sc.dt = detail::scenario_number(value, where), have_dt = true;
        else if (key == "principal_symbol") sc.principal_text = value;
        else if (key == "subprincipal_symbol") sc.subprincipal_text = value;
        else if (key == "forcing") sc.forcing_text = value;
        else if (key == "real_mode") sc.real_mode = detail::scenario_bool(value, where);
        else if (key == "rho_ladder") sc.rho_ladder = detail::parse_ladder(value, where);
        else if (key == "match_derivatives") sc.match_derivatives = detail::scenario_bool(value, where);
        else if (key == "match_tol") sc.match_tol = detail::scenario_number(value, where);
        else if (key == "oracle.speed") sc.oracle_speed_text = value;
        else if (key == "checks.residual") sc.residual_limit = detail::scenario_number(value, where);
        else if (key == "checks.oracle") sc.oracle_limit = detail::scenario_number(value, where);
        else if (key.rfind("params.", 0) == 0) {
            detail::set_param(sc.params, key.substr(7), value, where);
            if (key == "params.delta0") have_delta0 = true;
        } else if (key.rfind("prescribed[", 0) == 0 && key.back() == ']') {
            const int idx = detail::scenario_int(key.substr(11, key.size() - 12), where);
            if (idx < 0) throw ConfigError(where + ": negative index");
            prescribed[idx] = detail::constant_value(value, where);
        } else {
            throw ConfigError(where + ": unknown key");
        }
    }
    for (const char* required : {"dimension", "modes", "principal_symbol", "forcing"})
        if (!seen.count(required)) throw ConfigError(origin + ": missing required key '" + std::string(required) + "'");
    if (sc.dimension != 1)
        throw ConfigError(origin + ": key 'dimension': only dimension = 1 (a 2-D space-time grid) is supported");
    if (sc.modes < 8 || sc.modes % 2) throw ConfigError(origin + ": key 'modes': needs an even count >= 8");
    if (!have_window && !have_dt) sc.dt = two_pi / sc.modes;
    if (have_window && !have_dt) sc.dt = sc.time_window / sc.modes;
    if (!have_window) sc.time_window = sc.dt * sc.modes;
    if (!(sc.dt > 0.0)) throw ConfigError(origin + ": key 'dt': must be positive");
    if (std::abs(sc.time_window - sc.dt * sc.modes) > 1e-9 * sc.time_window)
        throw ConfigError(origin + ": keys 'time_window' and 'dt': time_window must equal modes * dt");
    if (sc.name.empty()) sc.name = origin;

    auto parse_sym = [&](const std::string& key, const std::string& text) {
        try {
            return parse_symbol(text);
        } catch (const Error& e) {
            throw ConfigError(origin + ": key '" + key + "': " + e.what());
        }
    };
    sc.principal = parse_sym("principal_symbol", sc.principal_text);
    const double m = sc.principal.order();
    if (m < 1.0 || m != std::round(m) || !sc.principal.homogeneous_degree() || *sc.principal.homogeneous_degree() != m)
        throw ConfigError(origin + ": key 'principal_symbol': needs integer order m >= 1 and homogeneous=true");
    if (sc.subprincipal_text.empty()) {
        std::ostringstream os;
        os << "0; order=" << m - 1;
        sc.subprincipal_text = os.str();
    }
    sc.subprincipal = parse_sym("subprincipal_symbol", sc.subprincipal_text);
    if (sc.subprincipal.order() > m - 1 + 1e-12)
        throw ConfigError(origin + ": key 'subprincipal_symbol': order must be at most m - 1");
    try {
        expr::Parser parser(sc.forcing_text);
        sc.forcing = parser.parse_expression();
        if (parser.pos() != sc.forcing_text.size()) throw ParseError("trailing input", int(parser.pos()) + 1);
        expr::Usage u;
        expr::collect_usage(sc.forcing, u);
        if (u.tau || u.xi_dims || u.absxi || u.jet_arity || u.x_dims > 1)
            throw ConfigError("may only depend on t and x1");
    } catch (const Error& e) {
        throw ConfigError(origin + ": key 'forcing': " + e.what());
    }
    if (!sc.oracle_speed_text.empty()) {
        try {
            expr::Parser parser(sc.oracle_speed_text);
            sc.oracle_speed = parser.parse_expression();
            if (parser.pos() != sc.oracle_speed_text.size()) throw ParseError("trailing input", int(parser.pos()) + 1);
        } catch (const Error& e) {
            throw ConfigError(origin + ": key 'oracle.speed': " + e.what());
        }
        if (sc.order() != 1) throw ConfigError(origin + ": key 'oracle.speed': the characteristics oracle needs m = 1");
    }

    const std::size_t count = jet_multi_indices(2, sc.order() - 1).size();
    sc.prescribed.assign(count, cplx(0.0));
    for (auto [idx, val] : prescribed) {
        if (std::size_t(idx) >= count)
            throw ConfigError(origin + ": key 'prescribed[" + std::to_string(idx) + "]': only " + std::to_string(count) +
                              " derivatives |alpha| < m exist");
        sc.prescribed[idx] = val;
    }
    if (!prescribed.empty() && prescribed.size() != count)
        throw ConfigError(origin + ": keys 'prescribed[...]': expected " + std::to_string(count) + " values, got " +
                          std::to_string(prescribed.size()));
    if (!have_delta0) sc.params.delta0 = sc.params.inner_bound();
    try {
        sc.params.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(origin + ": params: " + e.what());
    }
    return sc;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open scenario '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    Scenario sc = parse_scenario(buf.str(), path.string());
    if (sc.name == path.string()) sc.name = path.stem().string();
    return sc;
}

// ---------------------------------------------------------------------------
// Problem data in grid time t' = t / s.

struct GridProblem {
    TorusGrid grid;
    double s = 1.0;
    Symbol principal, subprincipal;
    GridFunction f;
    std::vector<cplx> prescribed;
};

inline GridProblem grid_problem(const Scenario& sc) {
    GridProblem gp{sc.grid(), sc.time_scale(), sc.principal, sc.subprincipal, GridFunction(sc.grid()), {}};
    const int m = sc.order();
    const double weight = std::pow(gp.s, m);
    if (gp.s != 1.0) {
        gp.principal = rescale_time(sc.principal, gp.s, weight);
        gp.subprincipal = rescale_time(sc.subprincipal, gp.s, weight);
    }
    for (std::size_t k = 0; k < gp.grid.size(); ++k) {
        Point p = gp.grid.centered_point(k);
        EvalPoint e;
        e.t = gp.s * p[0];
        e.x = {p[1], 0.0};
        gp.f.values[k] = weight * expr::eval(*sc.forcing, e);
    }
    // d^alpha in t' carries s^{alpha_t}.
    const auto alphas = jet_multi_indices(2, m - 1);
    for (std::size_t i = 0; i < alphas.size(); ++i)
        gp.prescribed.push_back(sc.prescribed[i] * std::pow(gp.s, alphas[i][0]));
    return gp;
}

// ---------------------------------------------------------------------------
// Reports

struct Check {
    std::string name;
    double value = 0.0;
    double limit = 0.0;
    bool passed = false;
};

struct RunResult {
    nlohmann::ordered_json report;
    std::vector<Check> checks;
    bool passed() const {
        return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
    }
};

namespace detail {

inline nlohmann::ordered_json to_json(cplx c) { return {{"re", c.real()}, {"im", c.imag()}}; }

inline nlohmann::ordered_json to_json(const SolveParams& p) {
    return {{"cone_aperture", p.cone_aperture}, {"rho", p.rho},
            {"delta", p.delta},                 {"delta0", p.delta0},
            {"c0", p.c0},                       {"c2", p.c2},
            {"outer_radius", p.outer_radius},   {"sobolev_index", p.sobolev_index},
            {"jet_depth", p.jet_depth},         {"max_picard_iters", p.max_picard_iters},
            {"picard_tol", p.picard_tol},       {"neumann_tol", p.neumann_tol},
            {"c_cfl", p.c_cfl},                 {"single_cone", p.single_cone},
            {"preferred_time_index", p.preferred_time_index}};
}

inline nlohmann::ordered_json to_json(const LinearDiagnostics& d) {
    return {{"t1_norm", d.t1_norm},
            {"t2_norm", d.t2_norm},
            {"t1_converged", d.t1_converged},
            {"t2_converged", d.t2_converged},
            {"t1_columns", d.t1_columns},
            {"t2_columns", d.t2_columns},
            {"linf_bound_t2", d.linf_bound_t2},
            {"substeps", d.substeps},
            {"horizon_nodes", d.horizon_nodes},
            {"characteristic_cones", d.characteristic_cones},
            {"elliptic_cones", d.elliptic_cones}};
}

inline nlohmann::ordered_json to_json(const SolveReport& r) {
    nlohmann::ordered_json steps = nlohmann::ordered_json::array();
    for (const auto& s : r.steps)
        steps.push_back({{"iteration", s.iteration},
                         {"phi_v_norm", s.phi_v_norm},
                         {"update_norm", s.update_norm},
                         {"update_norms", s.update_norms},
                         {"envelope_ratio", s.envelope_ratio},
                         {"linear_residual", s.linear_residual},
                         {"t1_norm", s.t1_norm},
                         {"t2_norm", s.t2_norm},
                         {"imag_before_projection", s.imag_before_projection}});
    return {{"status", r.status},
            {"params", to_json(r.params)},
            {"order", r.order},
            {"iterations", r.iterations},
            {"converged", r.converged},
            {"residual", r.residual},
            {"relative_residual", r.relative_residual},
            {"window_radius", r.window_radius},
            {"window_points", r.window_points},
            {"f0_norm", r.f0_norm},
            {"fitted_C", r.fitted_C},
            {"fitted_C_tilde", r.fitted_C_tilde},
            {"rho0", r.rho0},
            {"rho_rule_met", r.params.rho >= r.rho0},
            {"steps", steps},
            {"linear", to_json(r.linear)},
            {"cone_kinds", r.cone_kinds},
            {"imag_ratio", r.imag_ratio}};
}

inline nlohmann::ordered_json checks_json(const std::vector<Check>& checks) {
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (const auto& c : checks)
        out.push_back({{"name", c.name}, {"value", c.value}, {"limit", c.limit}, {"passed", c.passed}});
    return out;
}

inline Check check_below(std::string name, double value, double limit) {
    return {std::move(name), value, limit, value < limit};
}

inline nlohmann::ordered_json scenario_json(const Scenario& sc) {
    nlohmann::ordered_json pres = nlohmann::ordered_json::array();
    for (auto c : sc.prescribed) pres.push_back(to_json(c));
    return {{"name", sc.name},
            {"dimension", sc.dimension},
            {"modes", sc.modes},
            {"time_window", sc.time_window},
            {"dt", sc.dt},
            {"time_scale", sc.time_scale()},
            {"principal_symbol", sc.principal_text},
            {"subprincipal_symbol", sc.subprincipal_text},
            {"forcing", sc.forcing_text},
            {"prescribed", pres},
            {"real_mode", sc.real_mode}};
}

}  // namespace detail

// Output directory writer with fixed number formatting.
class ReportWriter {
public:
    explicit ReportWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::error_code ec;
        std::filesystem::create_directories(dir_, ec);
        if (ec) throw std::ios_base::failure("cannot create output directory '" + dir_.string() + "'");
    }

    const std::filesystem::path& dir() const { return dir_; }

    void json(const std::string& file, const nlohmann::ordered_json& j) const { write(file, j.dump(2) + "\n"); }

    void csv(const std::string& file, const std::vector<std::string>& header,
             const std::vector<std::vector<double>>& rows) const {
        std::ostringstream os;
        os << std::setprecision(12);
        for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
        os << "\n";
        for (const auto& r : rows) {
            for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
            os << "\n";
        }
        write(file, os.str());
    }

private:
    std::filesystem::path dir_;

    void write(const std::string& file, const std::string& content) const {
        std::ofstream out(dir_ / file, std::ios::binary);
        if (!out) throw std::ios_base::failure("cannot write '" + (dir_ / file).string() + "'");
        out << content;
        if (!out) throw std::ios_base::failure("cannot write '" + (dir_ / file).string() + "'");
    }
};

namespace detail {

// Slices of u through the origin in physical coordinates: plot_t0.csv (t = 0) and plot_x0.csv (x = 0).
inline void write_plots(const ReportWriter& out, const GridFunction& u, double s) {
    const TorusGrid& g = u.grid;
    const int n = g.modes();
    std::vector<std::vector<double>> along_x, along_t;
    for (int i = -n / 2; i < n / 2; ++i) {
        const double c = i * g.spacing();
        cplx ux = u.values[g.flat(0, i)], ut = u.values[g.flat(i, 0)];
        along_x.push_back({0.0, c, std::abs(ux), ux.real()});
        along_t.push_back({s * c, 0.0, std::abs(ut), ut.real()});
    }
    out.csv("plot_t0.csv", {"t", "x", "abs_u", "re_u"}, along_x);
    out.csv("plot_x0.csv", {"t", "x", "abs_u", "re_u"}, along_t);
}

// Trigonometric interpolant of the t' = 0 slice, evaluated at any x.
inline std::function<double(double)> slice_interpolant(const GridFunction& u) {
    const TorusGrid& g = u.grid;
    const TorusGrid line(1, g.modes());
    GridFunction slice(line);
    for (int i = 0; i < g.modes(); ++i) slice.values[i] = u.values[g.flat(0, i)];
    auto spec = forward_transform(slice).coeffs;
    return [spec, line](double x) {
        cplx acc = 0.0;
        for (std::size_t q = 0; q < spec.size(); ++q) {
            const int k = line.freq(q)[0];
            acc += (std::abs(k) == line.modes() / 2 ? std::cos(k * x) : std::exp(cplx(0.0, k * x))) * spec[q];
        }
        return acc.real();
    };
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands

// Constant jets at the prescribed derivatives, for symbols with jet slots.
inline std::optional<JetField> prescribed_jets(const Scenario& sc, const GridProblem& gp) {
    if (std::max(gp.principal.jet_arity(), gp.subprincipal.jet_arity()) == 0) return std::nullopt;
    std::vector<cplx> jet(jet_multi_indices(2, std::max(sc.params.jet_depth, sc.order())).size());
    for (std::size_t i = 0; i < gp.prescribed.size() && i < jet.size(); ++i) jet[i] = gp.prescribed[i];
    return constant_jet_field(gp.grid, jet);
}

inline RunResult run_quantize(const Scenario& sc) {
    GridProblem gp = grid_problem(sc);
    const int m = sc.order();
    const Symbol full = detail::symbol_sum(gp.principal, gp.subprincipal, m);
    QuantOptions opts;
    opts.layout = Layout::SpaceTime;
    opts.centered = true;
    QuantizedOp op(full, gp.grid, opts, prescribed_jets(sc, gp));
    GridFunction pf = op.apply(gp.f);
    RunResult res;
    const double scale = std::max(l2_norm(pf), 1e-300);
    if (op.has_fast_path()) {
        const double diff = l2_norm(op.apply_naive(gp.f) - pf) / scale;
        res.checks.push_back(detail::check_below("fast_vs_naive_relative", diff, 1e-11));
    }
    if (gp.grid.size() <= 32 * 32) {
        DenseMatrix d = dense_matrix(op);
        GridFunction dense(gp.grid);
        for (std::size_t i = 0; i < d.n; ++i)
            for (std::size_t j = 0; j < d.n; ++j) dense.values[i] += d(i, j) * gp.f.values[j];
        res.checks.push_back(detail::check_below("dense_vs_apply_relative", l2_norm(dense - pf) / scale, 1e-11));
    }
    res.report["quantize"] = {{"symbol", full.expression_string()},
                              {"fast_path", op.has_fast_path()},
                              {"forcing_l2", l2_norm(gp.f)},
                              {"image_l2", l2_norm(pf)},
                              {"image_sup", sup_norm(pf)}};
    return res;
}

inline RunResult run_reduce(const Scenario& sc) {
    GridProblem gp = grid_problem(sc);
    const int m = sc.order();
    std::vector<cplx> jet(jet_multi_indices(2, std::max(sc.params.jet_depth, m)).size());
    for (std::size_t i = 0; i < gp.prescribed.size() && i < jet.size(); ++i) jet[i] = gp.prescribed[i];
    BasePoint base{0.0, {0.0, 0.0}, jet};
    NormalFormOptions nfo;
    nfo.preferred_time_index = sc.params.preferred_time_index;
    nfo.probe_lambdas.clear();
    RunResult res;
    nlohmann::ordered_json cones = nlohmann::ordered_json::array();
    double worst_division = 0.0;
    bool elliptic_prepared = false;
    for (const auto& cone : build_cone_partition(2, sc.params.cone_aperture, FreqAxes::TauXi)) {
        auto nf = build_normal_form(gp.principal, gp.subprincipal, base, cone, nfo);
        if (nf.kind == ConeKind::Characteristic) worst_division = std::max(worst_division, nf.division_residual);
        else elliptic_prepared = elliptic_prepared || nf.preparation.has_value();
        cones.push_back({{"axis", {cone.axis[0], cone.axis[1]}},
                         {"kind", cone_kind_name(nf.kind)},
                         {"lower_bound", nf.principal.lower_bound},
                         {"time_index", nf.frame.time_index},
                         {"prepared", nf.preparation.has_value()},
                         {"division_residual", nf.division_residual}});
    }
    res.checks.push_back(detail::check_below("division_residual", worst_division, 1e-9));
    res.checks.push_back({"elliptic_cones_unprepared", elliptic_prepared ? 1.0 : 0.0, 0.5, !elliptic_prepared});
    ReducedData red = reduce_data(gp.prescribed, gp.f, gp.principal, gp.subprincipal, sc.params);
    res.report["reduce"] = {{"cones", cones},
                            {"jet_depth", red.jet_depth},
                            {"offset_sup", sup_norm(red.offset)},
                            {"f0_sup", sup_norm(red.f0)}};
    return res;
}

inline RunResult run_solve_linear(const Scenario& sc, const ReportWriter* out) {
    GridProblem gp = grid_problem(sc);
    const int m = sc.order();
    const auto jets = prescribed_jets(sc, gp);
    RunResult res;
    nlohmann::ordered_json rungs = nlohmann::ordered_json::array();
    std::vector<std::vector<double>> rows;
    std::optional<LinearSolution> prev;
    int ok = 1;
    GridFunction top_u(gp.grid);
    for (double rho : sc.rho_ladder) {
        SolveParams p = at_rho(sc.params, rho);
        auto [sol, st] = solve_linearized(LinearProblem{gp.principal, gp.subprincipal, gp.grid, jets}, gp.f, p);
        auto d = derivative_functionals(st, sol.u, {0.0, 0.0}, m);
        const double scaled = d.values.empty() ? 0.0 : std::abs(d.values.back().scaled);
        if (prev) ok = ok && (sol.residual <= 0.5 * prev->residual || (prev->residual_ok && sol.residual_ok));
        rows.push_back({rho, p.delta0, sol.residual, sol.tolerance, st.diag.t1_norm, st.diag.t2_norm,
                        double(sol.window_points), scaled});
        rungs.push_back({{"rho", rho},
                         {"delta0", p.delta0},
                         {"residual", sol.residual},
                         {"relative_residual", sol.relative_residual},
                         {"floor", sol.tolerance},
                         {"window_points", sol.window_points},
                         {"diagnostics", detail::to_json(st.diag)}});
        top_u = sol.u;
        prev = std::move(sol);
    }
    res.checks.push_back({"residual_halves_or_floor", double(ok), 1.0, ok == 1});
    res.checks.push_back(detail::check_below("top_rung_residual", prev->residual, sc.residual_limit));
    res.report["solve_linear"] = {{"ladder", rungs}};
    if (out) {
        out->csv("ladder.csv", {"rho", "delta0", "residual", "floor", "t1_norm", "t2_norm", "window_points", "scaled_top_functional"},
                 rows);
        detail::write_plots(*out, top_u, gp.s);
    }
    return res;
}

struct SolveOutcome {
    QuasiSolution sol;
    std::optional<MatchReport> match;
    GridProblem gp;
};

inline SolveOutcome solve_scenario(const Scenario& sc) {
    GridProblem gp = grid_problem(sc);
    QuasiOptions opts;
    opts.real_mode = sc.real_mode;
    if (sc.match_derivatives) {
        auto [sol, rep] = match_initial_derivatives(gp.principal, gp.subprincipal, gp.f, gp.prescribed, sc.params,
                                                    sc.match_tol, opts);
        return {std::move(sol), std::move(rep), std::move(gp)};
    }
    QuasiSolution sol = quasilinear_solve(gp.principal, gp.subprincipal, gp.f, gp.prescribed, sc.params, opts);
    return {std::move(sol), std::nullopt, std::move(gp)};
}

inline void add_solve_checks(const Scenario& sc, const SolveOutcome& so, RunResult& res) {
    const auto& r = so.sol.report;
    res.checks.push_back({"converged", r.converged ? 1.0 : 0.0, 1.0, r.converged});
    res.checks.push_back(detail::check_below("residual", r.residual, sc.residual_limit));
    if (sc.real_mode) res.checks.push_back({"imag_ratio", r.imag_ratio, 1e-12, r.imag_ratio < 1e-12});
    if (so.match) {
        double dev = 0.0;
        for (auto d : so.sol.derivative_deviation) dev = std::max(dev, std::abs(d));
        res.checks.push_back(detail::check_below("derivative_deviation", dev, sc.match_tol));
    }
}

inline nlohmann::ordered_json solve_json(const SolveOutcome& so) {
    nlohmann::ordered_json j = detail::to_json(so.sol.report);
    nlohmann::ordered_json dev = nlohmann::ordered_json::array();
    const auto alphas = jet_multi_indices(2, so.sol.report.order - 1);
    // Deviations back in physical time.
    for (std::size_t i = 0; i < so.sol.derivative_deviation.size(); ++i)
        dev.push_back(detail::to_json(so.sol.derivative_deviation[i] / std::pow(so.gp.s, alphas[i][0])));
    j["derivative_deviation"] = dev;
    j["u_sup"] = sup_norm(so.sol.u);
    if (so.match)
        j["match"] = {{"steps", so.match->steps},
                      {"converged", so.match->converged},
                      {"deviations", so.match->deviations},
                      {"contraction", so.match->contraction}};
    return j;
}

inline void write_norms(const ReportWriter& out, const SolveReport& r) {
    std::vector<std::string> header{"iteration"};
    const std::size_t cols = r.steps.empty() ? 0 : r.steps.front().update_norms.size();
    for (std::size_t k = 0; k < cols; ++k) header.push_back("update_H" + std::to_string(k));
    header.insert(header.end(), {"phi_v_norm", "envelope_ratio", "linear_residual"});
    std::vector<std::vector<double>> rows;
    for (const auto& s : r.steps) {
        std::vector<double> row{double(s.iteration)};
        row.insert(row.end(), s.update_norms.begin(), s.update_norms.end());
        row.insert(row.end(), {s.phi_v_norm, s.envelope_ratio, s.linear_residual});
        rows.push_back(std::move(row));
    }
    out.csv("norms.csv", header, rows);
}

inline RunResult run_solve(const Scenario& sc, const ReportWriter* out) {
    SolveOutcome so = solve_scenario(sc);
    RunResult res;
    add_solve_checks(sc, so, res);
    res.report["solve"] = solve_json(so);
    if (out) {
        write_norms(*out, so.sol.report);
        detail::write_plots(*out, so.sol.u, so.gp.s);
    }
    return res;
}

// Solves, then recomputes the residual by direct application and, for transport
// scenarios with `oracle.speed`, compares against the method of characteristics.
inline RunResult run_verify(const Scenario& sc, const ReportWriter* out) {
    SolveOutcome so = solve_scenario(sc);
    RunResult res;
    add_solve_checks(sc, so, res);
    const auto& rep = so.sol.report;
    const GridProblem& gp = so.gp;
    const TorusGrid& g = gp.grid;
    QuantOptions opts;
    opts.layout = Layout::SpaceTime;
    opts.centered = true;
    const int m = sc.order();
    const Symbol full = detail::symbol_sum(gp.principal, gp.subprincipal, m);
    const int depth = std::max(full.jet_arity() > 0 ? rep.params.jet_depth : 0, 0);
    // Direct application sees u itself; the solver froze the jets of Phi v + offset, equal to u on the window.
    GridFunction direct = manufacture(full, so.sol.u, depth, opts) - gp.f;
    auto pts = window_points(g, rep.window_radius);
    const double recomputed = window_norm(direct, pts);
    const double agree = std::abs(recomputed - rep.residual) / std::max(rep.residual, 1e-14);
    res.checks.push_back(detail::check_below("direct_residual", recomputed, sc.residual_limit));
    nlohmann::ordered_json ver = {{"direct_residual", recomputed}, {"reported_residual", rep.residual},
                                  {"relative_disagreement", agree}};
    if (sc.oracle_speed) {
        const double s = gp.s, h = g.spacing();
        Expr speed = sc.oracle_speed, forcing = sc.forcing;
        auto initial = detail::slice_interpolant(so.sol.u);
        // P u = -i (u_t + c(u) u_x) = f, so the transport source is i f.
        TransportSpec spec{[speed](double u) {
                               std::array<cplx, 1> jet{cplx(u)};
                               EvalPoint e;
                               e.jet = jet;
                               return expr::eval(*speed, e).real();
                           },
                           [forcing](double t, double x) {
                               EvalPoint e;
                               e.t = t;
                               e.x = {x, 0.0};
                               return (cplx(0.0, 1.0) * expr::eval(*forcing, e)).real();
                           },
                           initial};
        const int reach = int(rep.window_radius / h);
        std::vector<double> nodes;
        for (int n = -reach; n <= reach; ++n) nodes.push_back(s * n * h);
        auto ref = characteristics_reference(spec, TorusGrid(1, g.modes()), nodes);
        // Diamond whose backward characteristics stay in the window.
        double cmax = 0.0;
        for (double v : {-sup_norm(so.sol.u), 0.0, sup_norm(so.sol.u)}) cmax = std::max(cmax, std::abs(spec.speed(v)));
        double err = 0.0;
        int compared = 0;
        const TorusGrid line(1, g.modes());
        for (int n = -reach; n <= reach; ++n)
            for (int ix = -reach; ix <= reach; ++ix) {
                if (std::abs(ix * h) + s * cmax * std::abs(n * h) > rep.window_radius + 1e-12) continue;
                const cplx ours = so.sol.u.values[g.flat(n, ix)];
                const cplx theirs = ref.u.slice(std::size_t(n + reach)).values[line.flat(ix)];
                err = std::max(err, std::abs(ours - theirs));
                ++compared;
            }
        res.checks.push_back(detail::check_below("characteristics_oracle", err, sc.oracle_limit));
        ver["characteristics"] = {{"max_error", err}, {"points", compared}, {"oracle_error_estimate", ref.error_estimate}};
    }
    res.report["solve"] = solve_json(so);
    res.report["verify"] = ver;
    if (out) {
        write_norms(*out, rep);
        detail::write_plots(*out, so.sol.u, gp.s);
    }
    return res;
}

// Timing of the naive O(N^2d) application against the separable fast path.
inline RunResult run_bench(const Scenario& sc, int repeats = 3) {
    GridProblem gp = grid_problem(sc);
    const int m = sc.order();
    const Symbol full = detail::symbol_sum(gp.principal, gp.subprincipal, m);
    QuantOptions opts;
    opts.layout = Layout::SpaceTime;
    opts.centered = true;
    QuantizedOp op(full, gp.grid, opts, prescribed_jets(sc, gp));
    using clock = std::chrono::steady_clock;
    auto timed = [&](auto&& fn) {
        double best = std::numeric_limits<double>::infinity();
        GridFunction r(gp.grid);
        for (int i = 0; i < repeats; ++i) {
            auto t0 = clock::now();
            r = fn();
            best = std::min(best, std::chrono::duration<double>(clock::now() - t0).count());
        }
        return std::pair{best, r};
    };
    auto [naive_s, naive] = timed([&] { return op.apply_naive(gp.f); });
    RunResult res;
    nlohmann::ordered_json b = {{"modes", sc.modes}, {"naive_seconds", naive_s}, {"fast_path", op.has_fast_path()}};
    if (op.has_fast_path()) {
        auto [fast_s, fast] = timed([&] { return op.apply_fast(gp.f); });
        const double diff = l2_norm(fast - naive) / std::max(l2_norm(naive), 1e-300);
        b["fast_seconds"] = fast_s;
        b["speedup"] = naive_s / std::max(fast_s, 1e-12);
        b["relative_difference"] = diff;
        res.checks.push_back(detail::check_below("fast_vs_naive_relative", diff, 1e-11));
    }
    res.report["bench"] = b;
    return res;
}

// Exit codes by failure category.
enum ExitCode : int {
    exit_ok = 0,
    exit_check_failed = 1,
    exit_config = 2,
    exit_domain = 3,
    exit_not_contractive = 4,
    exit_convergence = 5,
    exit_stage = 6,
    exit_io = 7,
    exit_internal = 70,
};

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParseError*>(&e)) return exit_config;
    if (dynamic_cast<const NotContractive*>(&e)) return exit_not_contractive;
    if (dynamic_cast<const ConvergenceError*>(&e)) return exit_convergence;
    if (dynamic_cast<const DomainError*>(&e) || dynamic_cast<const DimensionMismatch*>(&e)) return exit_domain;
    if (dynamic_cast<const Error*>(&e)) return exit_stage;
    if (dynamic_cast<const std::ios_base::failure*>(&e)) return exit_io;
    return exit_internal;
}

inline const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> names{"quantize", "reduce", "solve-linear", "solve", "verify", "bench"};
    return names;
}

// Runs one subcommand and writes report.json (plus CSVs) into `out_dir`.
inline int run_subcommand(const std::string& cmd, const Scenario& sc, const std::filesystem::path& out_dir) {
    ReportWriter out(out_dir);
    nlohmann::ordered_json report = {{"subcommand", cmd}, {"scenario", detail::scenario_json(sc)}};
    try {
        RunResult res;
        if (cmd == "quantize") res = run_quantize(sc);
        else if (cmd == "reduce") res = run_reduce(sc);
        else if (cmd == "solve-linear") res = run_solve_linear(sc, &out);
        else if (cmd == "solve") res = run_solve(sc, &out);
        else if (cmd == "verify") res = run_verify(sc, &out);
        else if (cmd == "bench") res = run_bench(sc);
        else throw ConfigError("unknown subcommand '" + cmd + "'");
        report["status"] = res.passed() ? "ok" : "check_failed";
        report["passed"] = res.passed();
        report["checks"] = detail::checks_json(res.checks);
        for (auto& [k, v] : res.report.items()) report[k] = v;
        out.json("report.json", report);
        return res.passed() ? exit_ok : exit_check_failed;
    } catch (const std::exception& e) {
        const int code = exit_code_for(e);
        report["status"] = "error";
        report["passed"] = false;
        report["error"] = {{"message", e.what()}, {"exit_code", code}};
        out.json("report.json", report);
        throw;
    }
}

}  // namespace microsolve
