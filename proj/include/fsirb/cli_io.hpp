#pragma once

#include "fsirb/core/errors.hpp"
#include "fsirb/fsi_solver.hpp"
#include "fsirb/lagrangian_mollifier.hpp"
#include "fsirb/uniqueness_diagnostics.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fsirb {

enum class Command { simulate, verify_transform, verify_mollifier, uniqueness, energy_check };

inline std::string to_string(Command c) {
    switch (c) {
        case Command::simulate: return "simulate";
        case Command::verify_transform: return "verify_transform";
        case Command::verify_mollifier: return "verify_mollifier";
        case Command::uniqueness: return "uniqueness";
        case Command::energy_check: return "energy_check";
    }
    return "?";
}

inline Command command_from_string(const std::string& s) {
    for (Command c : {Command::simulate, Command::verify_transform, Command::verify_mollifier, Command::uniqueness,
                      Command::energy_check})
        if (to_string(c) == s) return c;
    throw ValidationError("command", "unknown command '" + s + "'");
}

struct RunConfig {
    Scenario scenario;
    Command command = Command::simulate;
    std::string output_dir = "out";
    int snapshot_every = 10;
    SerrinSpec serrin;
    std::uint64_t seed = 1;
    double delta = 1e-3;                 // perturbation size for pair commands
    std::vector<double> mollifier_h;     // empty: 16, 8, 4 time steps
    double mollifier_margin = 0.0;
};

inline bool operator==(const RunConfig& a, const RunConfig& b) {
    const Scenario &x = a.scenario, &y = b.scenario;
    return x.container.lo == y.container.lo && x.container.hi == y.container.hi && x.body.center == y.body.center &&
           x.body.radius == y.body.radius && x.body.rho_s == y.body.rho_s && x.rho_f == y.rho_f && x.mu == y.mu &&
           x.beta == y.beta && x.coupling == y.coupling && x.u0.preset == y.u0.preset &&
           x.u0.amplitude == y.u0.amplitude && x.u0.seed == y.u0.seed && x.u0.perturbation == y.u0.perturbation &&
           x.u0.perturbation_seed == y.u0.perturbation_seed && x.a0 == y.a0 && x.omega0 == y.omega0 &&
           x.grid_n == y.grid_n && x.dt == y.dt && x.T == y.T && x.delta_wall == y.delta_wall &&
           x.snapshot_every == y.snapshot_every && a.command == b.command && a.output_dir == b.output_dir &&
           a.snapshot_every == b.snapshot_every && a.serrin.s == b.serrin.s && a.serrin.r == b.serrin.r &&
           a.seed == b.seed && a.delta == b.delta && a.mollifier_h == b.mollifier_h &&
           a.mollifier_margin == b.mollifier_margin;
}

// ---------------------------------------------------------------------------
// JSON scenario files

namespace detail {

using json = nlohmann::ordered_json;

inline std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t byte) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

inline void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw ValidationError("schema", where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : keys) known = known || it.key() == k;
        if (!known) throw ValidationError("schema", "unknown key '" + it.key() + "' in " + where);
    }
}

inline double num(const json& j, const char* key, double fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    if (!v.is_number()) throw ValidationError("schema", where + "." + key + " must be a number");
    return v.get<double>();
}

inline std::uint64_t uint(const json& j, const char* key, std::uint64_t fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ValidationError("schema", where + "." + key + " must be a nonnegative integer");
    return v.get<std::uint64_t>();
}

inline int integer(const json& j, const char* key, int fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    if (!v.is_number_integer()) throw ValidationError("schema", where + "." + key + " must be an integer");
    return v.get<int>();
}

inline std::string str(const json& j, const char* key, const std::string& fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    if (!v.is_string()) throw ValidationError("schema", where + "." + key + " must be a string");
    return v.get<std::string>();
}

inline Vec3 vec(const json& j, const char* key, const Vec3& fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    if (!v.is_array() || v.size() != 3 || !v[0].is_number() || !v[1].is_number() || !v[2].is_number())
        throw ValidationError("schema", where + "." + key + " must be an array of three numbers");
    return Vec3(v[0].get<double>(), v[1].get<double>(), v[2].get<double>());
}

inline json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

}  // namespace detail

// Checks every invariant of a config and names the first one violated.
inline void validate(const RunConfig& c) {
    const Scenario& sc = c.scenario;
    for (double v : {sc.container.lo.x(), sc.container.lo.y(), sc.container.lo.z(), sc.container.hi.x(),
                     sc.container.hi.y(), sc.container.hi.z(), sc.body.radius, sc.body.rho_s, sc.rho_f, sc.mu,
                     sc.beta, sc.dt, sc.T, sc.delta_wall, c.delta, c.serrin.s, c.serrin.r})
        if (!std::isfinite(v)) throw ValidationError("finite", "all numbers must be finite");
    if (!sc.body.center.allFinite() || !sc.a0.allFinite() || !sc.omega0.allFinite())
        throw ValidationError("finite", "all numbers must be finite");
    try {
        SerrinSpec::from_s(c.serrin.s).validate();
        c.serrin.validate();
    } catch (const InvalidSpec& e) {
        throw ValidationError("serrin exponents", "need s > 3 and 3/s + 2/r = 1");
    }
    if (c.snapshot_every < 1) throw ValidationError("snapshot_every", "must be at least 1");
    if (c.output_dir.empty()) throw ValidationError("output_dir", "must not be empty");
    if (!(c.delta >= 0.0)) throw ValidationError("delta", "must be nonnegative");
    for (double h : c.mollifier_h)
        if (!(h > 0.0)) throw ValidationError("mollifier", "half-widths must be positive");
    if (c.mollifier_margin < 0.0) throw ValidationError("mollifier", "margin must be nonnegative");
    if (sc.u0.preset != "zero" && sc.u0.preset != "vortex" && sc.u0.preset != "random")
        throw ValidationError("u0", "preset must be zero, vortex or random");
    if (!sc.container.contains(sc.body.center)) throw ValidationError("body", "center outside the container");
    try {
        sc.validate();
    } catch (const CFLViolation& e) {
        throw ValidationError("CFL", e.what());
    } catch (const InvalidSpec& e) {
        throw ValidationError("scenario", e.what());
    }
}

inline RunConfig parse_scenario(const std::string& text) {
    using detail::json;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        const auto [line, col] = detail::line_col(text, e.byte == 0 ? 0 : e.byte - 1);
        throw ParseError(e.what(), line, col);
    }
    detail::only_keys(j, "document",
                      {"command", "container", "body", "fluid", "coupling", "initial", "grid_n", "dt", "T",
                       "delta_wall", "output_dir", "snapshot_every", "serrin", "seed", "delta", "mollifier"});
    RunConfig c;
    Scenario& sc = c.scenario;
    c.command = command_from_string(detail::str(j, "command", "simulate", "document"));
    if (j.contains("container")) {
        const json& b = j.at("container");
        detail::only_keys(b, "container", {"lo", "hi"});
        sc.container.lo = detail::vec(b, "lo", sc.container.lo, "container");
        sc.container.hi = detail::vec(b, "hi", sc.container.hi, "container");
    }
    if (j.contains("body")) {
        const json& b = j.at("body");
        detail::only_keys(b, "body", {"center", "radius", "rho_s"});
        sc.body.center = detail::vec(b, "center", sc.body.center, "body");
        sc.body.radius = detail::num(b, "radius", sc.body.radius, "body");
        sc.body.rho_s = detail::num(b, "rho_s", sc.body.rho_s, "body");
    }
    if (j.contains("fluid")) {
        const json& f = j.at("fluid");
        detail::only_keys(f, "fluid", {"rho", "mu"});
        sc.rho_f = detail::num(f, "rho", sc.rho_f, "fluid");
        sc.mu = detail::num(f, "mu", sc.mu, "fluid");
    }
    if (j.contains("coupling")) {
        const json& f = j.at("coupling");
        detail::only_keys(f, "coupling", {"type", "beta"});
        const std::string t = detail::str(f, "type", "no_slip", "coupling");
        if (t == "no_slip") {
            sc.coupling = Coupling::no_slip;
        } else if (t == "navier_slip") {
            sc.coupling = Coupling::navier_slip;
        } else {
            throw ValidationError("coupling", "type must be no_slip or navier_slip");
        }
        sc.beta = detail::num(f, "beta", sc.beta, "coupling");
    }
    if (j.contains("initial")) {
        const json& f = j.at("initial");
        detail::only_keys(f, "initial", {"preset", "amplitude", "perturbation", "a0", "omega0"});
        sc.u0.preset = detail::str(f, "preset", sc.u0.preset, "initial");
        sc.u0.amplitude = detail::num(f, "amplitude", sc.u0.amplitude, "initial");
        sc.u0.perturbation = detail::num(f, "perturbation", sc.u0.perturbation, "initial");
        sc.a0 = detail::vec(f, "a0", sc.a0, "initial");
        sc.omega0 = detail::vec(f, "omega0", sc.omega0, "initial");
    }
    sc.grid_n = detail::integer(j, "grid_n", sc.grid_n, "document");
    sc.dt = detail::num(j, "dt", sc.dt, "document");
    sc.T = detail::num(j, "T", sc.T, "document");
    sc.delta_wall = detail::num(j, "delta_wall", sc.delta_wall, "document");
    c.output_dir = detail::str(j, "output_dir", c.output_dir, "document");
    c.snapshot_every = detail::integer(j, "snapshot_every", c.snapshot_every, "document");
    if (j.contains("serrin")) {
        const json& s = j.at("serrin");
        detail::only_keys(s, "serrin", {"s", "r"});
        const double sv = detail::num(s, "s", c.serrin.s, "serrin");
        const double rv = detail::num(s, "r", sv > 3.0 ? 2.0 * sv / (sv - 3.0) : c.serrin.r, "serrin");
        c.serrin.s = sv;
        c.serrin.r = rv;
        c.serrin.q = 1.0 / (0.5 + 1.0 / sv);
        c.serrin.p = 1.0 / (0.5 + 1.0 / rv);
    }
    c.seed = detail::uint(j, "seed", c.seed, "document");
    c.delta = detail::num(j, "delta", c.delta, "document");
    if (j.contains("mollifier")) {
        const json& m = j.at("mollifier");
        detail::only_keys(m, "mollifier", {"h", "margin"});
        if (m.contains("h")) {
            if (!m.at("h").is_array()) throw ValidationError("schema", "mollifier.h must be an array");
            for (const json& v : m.at("h")) {
                if (!v.is_number()) throw ValidationError("schema", "mollifier.h must hold numbers");
                c.mollifier_h.push_back(v.get<double>());
            }
        }
        c.mollifier_margin = detail::num(m, "margin", c.mollifier_margin, "mollifier");
    }
    sc.snapshot_every = c.snapshot_every;
    sc.u0.seed = c.seed;
    sc.u0.perturbation_seed = c.seed + 1;
    validate(c);
    return c;
}

inline std::string serialize(const RunConfig& c) {
    using detail::json;
    const Scenario& sc = c.scenario;
    json j;
    j["command"] = to_string(c.command);
    j["container"] = {{"lo", detail::vec_json(sc.container.lo)}, {"hi", detail::vec_json(sc.container.hi)}};
    j["body"] = {{"center", detail::vec_json(sc.body.center)}, {"radius", sc.body.radius}, {"rho_s", sc.body.rho_s}};
    j["fluid"] = {{"rho", sc.rho_f}, {"mu", sc.mu}};
    j["coupling"] = {{"type", to_string(sc.coupling)}, {"beta", sc.beta}};
    j["initial"] = {{"preset", sc.u0.preset},
                    {"amplitude", sc.u0.amplitude},
                    {"perturbation", sc.u0.perturbation},
                    {"a0", detail::vec_json(sc.a0)},
                    {"omega0", detail::vec_json(sc.omega0)}};
    j["grid_n"] = sc.grid_n;
    j["dt"] = sc.dt;
    j["T"] = sc.T;
    j["delta_wall"] = sc.delta_wall;
    j["output_dir"] = c.output_dir;
    j["snapshot_every"] = c.snapshot_every;
    j["serrin"] = {{"s", c.serrin.s}, {"r", c.serrin.r}};
    j["seed"] = c.seed;
    j["delta"] = c.delta;
    j["mollifier"] = {{"h", c.mollifier_h}, {"margin", c.mollifier_margin}};
    return j.dump(2) + "\n";
}

inline RunConfig load_scenario(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_scenario(ss.str());
}

// ---------------------------------------------------------------------------
// Output

namespace detail {

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::trunc) {
    std::ofstream out(path, std::ios::binary | std::ios::out | mode);
    if (!out) throw IoError("cannot write " + path);
    return out;
}

inline void check_written(std::ofstream& out, const std::string& path) {
    out.flush();
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace detail

// Legacy ASCII VTK on the cell centres: velocity, pressure and the fraction
// of the cell inside the body (mean of its six face fractions).
inline void write_vtk(const SolverState& st, const Scenario& sc, const std::string& path) {
    const MacGrid g = MacGrid::of(sc);
    const auto vel = cell_velocity(st.u, g);
    auto out = detail::open_out(path);
    const int N = g.N;
    const Vec3 o = g.lo + Vec3::Constant(0.5 * g.h);
    out << "# vtk DataFile Version 3.0\n"
        << "fsirb t=" << detail::fmt(st.t) << " step=" << st.step << "\n"
        << "ASCII\nDATASET STRUCTURED_POINTS\n"
        << "DIMENSIONS " << N << ' ' << N << ' ' << N << "\n"
        << "ORIGIN " << detail::fmt(o.x()) << ' ' << detail::fmt(o.y()) << ' ' << detail::fmt(o.z()) << "\n"
        << "SPACING " << detail::fmt(g.h) << ' ' << detail::fmt(g.h) << ' ' << detail::fmt(g.h) << "\n"
        << "POINT_DATA " << static_cast<long long>(N) * N * N << "\n"
        << "VECTORS velocity double\n";
    for (const Vec3& v : vel.data) out << detail::fmt(v.x()) << ' ' << detail::fmt(v.y()) << ' ' << detail::fmt(v.z()) << "\n";
    out << "SCALARS pressure double 1\nLOOKUP_TABLE default\n";
    for (int k = 0; k < N; ++k)
        for (int j = 0; j < N; ++j)
            for (int i = 0; i < N; ++i) out << detail::fmt(st.p.size() ? st.p(i, j, k) : 0.0) << "\n";
    out << "SCALARS body_mask double 1\nLOOKUP_TABLE default\n";
    const MacField& m = st.mask;
    for (int k = 0; k < N; ++k)
        for (int j = 0; j < N; ++j)
            for (int i = 0; i < N; ++i) {
                double f = 0.0;
                if (m.c[0].size()) {
                    f = (m.c[0](i, j, k) + m.c[0](i + 1, j, k) + m.c[1](i, j, k) + m.c[1](i, j + 1, k) +
                         m.c[2](i, j, k) + m.c[2](i, j, k + 1)) /
                        6.0;
                }
                out << detail::fmt(f) << "\n";
            }
    detail::check_written(out, path);
}

struct CsvRow {
    double t = 0.0;
    double E = 0.0;
    double dissipation = 0.0;
    double slack = 0.0;
    double a_norm = 0.0;
    double omega_norm = 0.0;
    double dist_to_wall = 0.0;
    double serrin_norm = 0.0;

    bool operator==(const CsvRow& o) const {
        return t == o.t && E == o.E && dissipation == o.dissipation && slack == o.slack && a_norm == o.a_norm &&
               omega_norm == o.omega_norm && dist_to_wall == o.dist_to_wall && serrin_norm == o.serrin_norm;
    }
};

inline const char* csv_header() { return "t,E,dissipation,slack,|a|,|omega|,dist_to_wall,serrin_norm"; }

inline std::string format_csv_row(const CsvRow& r) {
    std::string s;
    for (double v : {r.t, r.E, r.dissipation, r.slack, r.a_norm, r.omega_norm, r.dist_to_wall, r.serrin_norm}) {
        if (!s.empty()) s += ',';
        s += detail::fmt(v);
    }
    return s;
}

inline CsvRow parse_csv_row(const std::string& line) {
    std::vector<double> v;
    std::size_t pos = 0;
    while (pos <= line.size()) {
        const std::size_t next = std::min(line.find(',', pos), line.size());
        const std::string cell = line.substr(pos, next - pos);
        char* end = nullptr;
        const double x = std::strtod(cell.c_str(), &end);
        if (cell.empty() || end != cell.c_str() + cell.size()) throw ParseError("bad CSV cell '" + cell + "'", 1, pos + 1);
        v.push_back(x);
        pos = next + 1;
    }
    if (v.size() != 8) throw ParseError("expected 8 CSV columns", 1, 1);
    return CsvRow{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
}

inline CsvRow make_row(const SolverState& st, const EnergyRecord& e, const Scenario& sc, double serrin_s) {
    CsvRow r;
    r.t = st.t;
    r.E = e.kinetic;
    r.dissipation = e.dissipation + e.slip_dissipation;
    r.slack = e.slack;
    r.a_norm = st.rigid.a.norm();
    r.omega_norm = st.rigid.omega.norm();
    r.dist_to_wall = sc.container.wall_distance(st.rigid.q) - sc.body.radius;
    r.serrin_norm = st.u.c[0].size() ? serrin_norm(st.u, MacGrid::of(sc), serrin_s) : 0.0;
    return r;
}

inline void append_csv_row(const std::string& path, const CsvRow& row) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    auto out = detail::open_out(path, std::ios::app);
    if (fresh) out << csv_header() << "\n";
    out << format_csv_row(row) << "\n";
    detail::check_written(out, path);
}

// VTK snapshot plus one row of the run CSV.
inline void write_snapshot(const SolverState& st, const EnergyRecord& e, const Scenario& sc, double serrin_s,
                           const std::string& vtk_path, const std::string& csv_path) {
    write_vtk(st, sc, vtk_path);
    append_csv_row(csv_path, make_row(st, e, sc, serrin_s));
}

// ---------------------------------------------------------------------------
// Commands

namespace detail {

inline std::string join(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

inline std::string snapshot_name(int step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "snap_%06d.vtk", step);
    return buf;
}

inline void prepare_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create output directory " + dir);
    const std::string probe = join(dir, ".write_probe");
    {
        std::ofstream p(probe);
        if (!p) throw IoError("output directory not writable: " + dir);
    }
    std::filesystem::remove(probe, ec);
}

inline Scenario pair_scenario(const RunConfig& c) {
    Scenario sc = c.scenario;
    sc.snapshot_every = c.snapshot_every;
    return sc;
}

}  // namespace detail

// Every step goes to run.csv; VTK files every snapshot_every steps and at T.
inline void cmd_simulate(const RunConfig& c, std::ostream& log) {
    const Scenario& sc = c.scenario;
    const std::string csv = detail::join(c.output_dir, "run.csv");
    std::filesystem::remove(csv);
    const int steps = sc.steps();
    run(sc, [&](const SolverState& st, const EnergyRecord& e) {
        append_csv_row(csv, make_row(st, e, sc, c.serrin.s));
        if (st.step % c.snapshot_every == 0 || st.step == steps)
            write_vtk(st, sc, detail::join(c.output_dir, detail::snapshot_name(st.step)));
    });
    log << "simulate: " << steps << " steps, output in " << c.output_dir << "\n";
}

inline void cmd_verify_transform(const RunConfig& c, std::ostream& log) {
    const Scenario sc = detail::pair_scenario(c);
    const RunResult r1 = run(sc);
    const RunResult r2 = run(perturbed(sc, c.delta));
    auto out = detail::open_out(detail::join(c.output_dir, "transform.csv"));
    out << "t,diff_norm,max_velocity_gap,omega_diff,rotation_gap,rotation_reconstruction\n";
    const SampledTrajectory tr1(r1.trajectory);
    double worst = 0.0;
    for_each_transformed(sc, r1, sc, r2,
                         [&](const SolverState& st1, const SolverState&, const FlowMapData& m1, const FlowMapData&,
                             const TransformedSnapshot& snap) {
                             const FlowMapData self = composite_map(m1, m1, st1.rigid, st1.rigid, false);
                             const TransformedState u1 = transform_fields(st1, self, Mat3::Identity());
                             double gap = 0.0;
                             for (std::size_t i = 0; i < u1.U.size(); ++i)
                                 gap = std::max(gap, (u1.U[i] - snap.state.U[i]).norm());
                             const int n = std::max(1, st1.step);
                             const Mat3 Z = reconstruct_rotation(tr1, r1.trajectory.front().Q, 0.0, st1.t, n);
                             const double recon = (Z - st1.rigid.Q).norm();
                             worst = std::max(worst, gap);
                             out << detail::fmt(snap.t) << ',' << detail::fmt(detail::node_l2_sq(u1.U, snap.state.U))
                                 << ',' << detail::fmt(gap) << ',' << detail::fmt(snap.omega_diff.norm()) << ','
                                 << detail::fmt((snap.Q - Mat3::Identity()).norm()) << ',' << detail::fmt(recon)
                                 << "\n";
                         });
    detail::check_written(out, "transform.csv");
    log << "verify_transform: delta " << c.delta << ", max |U2 - u1| " << worst << "\n";
}

inline void cmd_verify_mollifier(const RunConfig& c, std::ostream& log) {
    Scenario sc = c.scenario;
    sc.snapshot_every = 1;
    const RunResult r = run(sc);
    const SampledTrajectory tr(r.trajectory);
    const Grid g = map_grid(sc);
    FlowMapData m = identity_map(g, sc.container, comparison_cutoff(sc), 0.0, MapOptions{true, true, false});
    std::vector<FlowMapData> maps;
    TimeSeries<GridField<Vec3>> u{0.0, sc.dt, {}};
    for (std::size_t n = 0; n < r.snapshots.size(); ++n) {
        if (n > 0) m = advance_flowmap(m, tr, sc.dt);
        m.t = r.snapshots[n].t;
        maps.push_back(m);
        u.f.push_back(detail::node_samples(r.snapshots[n].u, g));
    }
    std::vector<double> hs = c.mollifier_h;
    if (hs.empty()) hs = {16 * sc.dt, 8 * sc.dt, 4 * sc.dt};
    auto out = detail::open_out(detail::join(c.output_dir, "mollifier.csv"));
    out << "h,l2l2_distance,reynolds_lhs,reynolds_rhs,reynolds_gap\n";
    const double t_eval = u.time((u.size() - 1) * 3 / 4);
    for (double h : hs) {
        MollifierSpec spec{h, c.mollifier_margin};
        spec.validate();
        const double d = l2l2_distance(regularize(u, maps, spec), u);
        std::string lhs = "", rhs = "", gap = "";
        if (u.size() >= 3) {
            const ReynoldsTerms rt = reynolds_terms(u, u, maps, spec, t_eval);
            lhs = detail::fmt(rt.lhs);
            rhs = detail::fmt(rt.rhs());
            gap = detail::fmt(rt.gap());
        }
        out << detail::fmt(h) << ',' << detail::fmt(d) << ',' << lhs << ',' << rhs << ',' << gap << "\n";
    }
    detail::check_written(out, "mollifier.csv");
    log << "verify_mollifier: " << hs.size() << " kernel widths\n";
}

inline void cmd_uniqueness(const RunConfig& c, std::ostream& log) {
    const Scenario sc = detail::pair_scenario(c);
    const GronwallReport rep = gronwall_experiment(sc, c.delta, c.serrin);
    auto out = detail::open_out(detail::join(c.output_dir, "gronwall.csv"));
    write_gronwall_csv(out, rep);
    detail::check_written(out, "gronwall.csv");
    auto sum = detail::open_out(detail::join(c.output_dir, "gronwall_summary.txt"));
    write_gronwall_summary(sum, rep);
    detail::check_written(sum, "gronwall_summary.txt");
    write_gronwall_summary(log, rep);
}

inline void cmd_energy_check(const RunConfig& c, std::ostream& log) {
    const Scenario sc = detail::pair_scenario(c);
    const RunResult r1 = run(sc);
    const RunResult r2 = run(perturbed(sc, c.delta));
    const auto terms = energy_equality_terms(sc, r1, sc, r2);
    auto out = detail::open_out(detail::join(c.output_dir, "energy_equality.csv"));
    out << "t,kinetic,convective,dissipation,forcing,initial,residual\n";
    for (const auto& e : terms)
        out << detail::fmt(e.t) << ',' << detail::fmt(e.kinetic) << ',' << detail::fmt(e.convective) << ','
            << detail::fmt(e.dissipation) << ',' << detail::fmt(e.forcing) << ',' << detail::fmt(e.initial) << ','
            << detail::fmt(e.residual()) << "\n";
    detail::check_written(out, "energy_equality.csv");
    log << "energy_check: final residual " << (terms.empty() ? 0.0 : terms.back().residual()) << "\n";
}

inline void dispatch(const RunConfig& c, std::ostream& log) {
    detail::prepare_dir(c.output_dir);
    switch (c.command) {
        case Command::simulate: cmd_simulate(c, log); break;
        case Command::verify_transform: cmd_verify_transform(c, log); break;
        case Command::verify_mollifier: cmd_verify_mollifier(c, log); break;
        case Command::uniqueness: cmd_uniqueness(c, log); break;
        case Command::energy_check: cmd_energy_check(c, log); break;
    }
}

enum ExitCode { exit_ok = 0, exit_validation = 1, exit_runtime = 2, exit_io = 3 };

// Runs a loaded config and maps every failure to the exit-code contract.
template <class F>
int guarded(F&& f, std::ostream& err) {
    try {
        f();
        return exit_ok;
    } catch (const IoError& e) {
        err << e.what() << "\n";
        return exit_io;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "IoError: " << e.what() << "\n";
        return exit_io;
    } catch (const ParseError& e) {
        err << e.what() << "\n";
        return exit_validation;
    } catch (const ValidationError& e) {
        err << e.what() << "\n";
        return exit_validation;
    } catch (const CFLViolation& e) {
        err << e.what() << "\n";
        return exit_validation;
    } catch (const InvalidSpec& e) {
        err << e.what() << "\n";
        return exit_validation;
    } catch (const MismatchedScenario& e) {
        err << e.what() << "\n";
        return exit_validation;
    } catch (const std::exception& e) {
        err << e.what() << "\n";
        return exit_runtime;
    }
}

struct CliOverrides {
    std::optional<std::string> out;
    std::optional<int> snapshot_every;
    std::optional<std::uint64_t> seed;
    std::optional<double> delta;
    std::optional<int> grid;
    std::optional<double> slip_beta;
};

// Flags win over the file; the result is validated again.
inline RunConfig apply_overrides(RunConfig c, const CliOverrides& o) {
    if (o.out) c.output_dir = *o.out;
    if (o.snapshot_every) c.snapshot_every = *o.snapshot_every;
    if (o.seed) {
        c.seed = *o.seed;
        c.scenario.u0.seed = c.seed;
        c.scenario.u0.perturbation_seed = c.seed + 1;
    }
    if (o.delta) c.delta = *o.delta;
    if (o.grid) c.scenario.grid_n = *o.grid;
    if (o.slip_beta) {
        c.scenario.coupling = Coupling::navier_slip;
        c.scenario.beta = *o.slip_beta;
    }
    c.scenario.snapshot_every = c.snapshot_every;
    validate(c);
    return c;
}

inline int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Rigid body in a viscous incompressible fluid: simulation and uniqueness diagnostics", "fsirb"};
    std::string command, scenario;
    CliOverrides o;
    app.add_option("command", command,
                   "simulate | verify_transform | verify_mollifier | uniqueness | energy_check")
        ->required();
    app.add_option("scenario", scenario, "scenario JSON file")->required();
    app.add_option("--out", o.out, "output directory (overrides output_dir)");
    app.add_option("--snapshot-every", o.snapshot_every, "VTK snapshot interval in steps");
    app.add_option("--seed", o.seed, "seed of the initial and perturbation fields");
    app.add_option("--delta", o.delta, "perturbation size for uniqueness, verify_transform and energy_check");
    app.add_option("--grid", o.grid, "cells per side (overrides grid_n)");
    app.add_option("--slip-beta", o.slip_beta, "switch to Navier slip with this friction coefficient");
    app.footer("Exit codes: 0 ok, 1 invalid input, 2 runtime error (including contact), 3 I/O error.\n"
               "FSIRB_THREADS caps the number of worker threads.");
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n" << app.help();
        return exit_validation;
    }
    return guarded(
        [&] {
            const Command cmd = command_from_string(command);
            RunConfig c = load_scenario(scenario);
            c.command = cmd;
            c = apply_overrides(c, o);
            dispatch(c, out);
        },
        err);
}

}  // namespace fsirb
