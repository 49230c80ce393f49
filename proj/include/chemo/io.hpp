#pragma once

// CSV and binary serialisation of trajectories, measurements, variation
// stacks and recovery reports. Numbers are written with 17 significant
// digits so a CSV round trip is lossless; the binary container is a magic
// tag, a JSON header and the raw little-endian doubles.

#include <algorithm>
#include <bit>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "chemo/errors.hpp"
#include "chemo/forward.hpp"
#include "chemo/recover.hpp"
#include "chemo/variation.hpp"

namespace chemo {

static_assert(std::endian::native == std::endian::little, "binary container assumes a little-endian host");

inline std::string format_number(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

namespace detail {

inline void write_coords(std::ostream& os, const Domain& d, std::size_t k) {
    os << format_number(d.coord(0, k % d.nodes(0)));
    if (d.dim() == 2) os << ',' << format_number(d.coord(1, k / d.nodes(0)));
}

inline const char* coord_header(const Domain& d) { return d.dim() == 2 ? "x,y" : "x"; }

}  // namespace detail

/// One row per (time, node): t,x[,y],u,v,w
inline void write_trajectory_csv(std::ostream& os, const Trajectory& t) {
    const Domain& d = t.domain;
    os << "t," << detail::coord_header(d) << ",u,v,w\n";
    for (std::size_t n = 0; n < t.states.size(); ++n) {
        const State& s = t.states[n];
        for (std::size_t k = 0; k < d.size(); ++k) {
            os << format_number(t.times[n]) << ',';
            detail::write_coords(os, d, k);
            os << ',' << format_number(s.u[k]) << ',' << format_number(s.v[k]) << ',' << format_number(s.w[k])
               << '\n';
        }
    }
}

/// Named fields on a shared grid: x[,y],name1,name2,...
inline void write_fields_csv(std::ostream& os, const std::vector<std::pair<std::string, const Field*>>& cols) {
    if (cols.empty()) return;
    const Domain& d = cols.front().second->domain();
    os << detail::coord_header(d);
    for (const auto& [name, f] : cols) {
        if (!(f->domain() == d)) throw InvalidArgument("write_fields_csv: fields on different grids");
        os << ',' << name;
    }
    os << '\n';
    for (std::size_t k = 0; k < d.size(); ++k) {
        detail::write_coords(os, d, k);
        for (const auto& col : cols) os << ',' << format_number((*col.second)[k]);
        os << '\n';
    }
}

/// Boundary traces, then the final-time fields: kind,t,x[,y],u,v,w
inline void write_measurement_csv(std::ostream& os, const MeasurementRecord& m) {
    const Domain& d = m.domain;
    os << "kind,t," << detail::coord_header(d) << ",u,v,w\n";
    for (std::size_t n = 0; n < m.times.size(); ++n)
        for (std::size_t b = 0; b < m.boundary.size(); ++b) {
            os << "boundary," << format_number(m.times[n]) << ',';
            detail::write_coords(os, d, m.boundary[b]);
            os << ',' << format_number(m.boundary_u[n][b]) << ',' << format_number(m.boundary_v[n][b]) << ','
               << format_number(m.boundary_w[n][b]) << '\n';
        }
    const double tf = m.times.empty() ? 0.0 : m.times.back();
    for (std::size_t k = 0; k < d.size(); ++k) {
        os << "final," << format_number(tf) << ',';
        detail::write_coords(os, d, k);
        os << ',' << format_number(m.final_u[k]) << ',' << format_number(m.final_v[k]) << ','
           << format_number(m.final_w[k]) << '\n';
    }
}

/// provenance,order,t,x[,y],u,v,w
inline void write_variation_csv(std::ostream& os, const VariationStack& s) {
    const Domain& d = s.order1.domain;
    os << "provenance,order,t," << detail::coord_header(d) << ",u,v,w\n";
    auto emit = [&](const Trajectory& t, int order) {
        for (std::size_t n = 0; n < t.states.size(); ++n)
            for (std::size_t k = 0; k < d.size(); ++k) {
                os << to_string(s.provenance) << ',' << order << ',' << format_number(t.times[n]) << ',';
                detail::write_coords(os, d, k);
                os << ',' << format_number(t.states[n].u[k]) << ',' << format_number(t.states[n].v[k]) << ','
                   << format_number(t.states[n].w[k]) << '\n';
            }
    };
    emit(s.order1, 1);
    if (s.order2) emit(*s.order2, 2);
}

/// stage,name,estimate,truth,rel_error,residual,cond; absent values are empty.
inline void write_report_csv(std::ostream& os, const RecoveryReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
    auto num = [](double v) { return std::isnan(v) ? std::string() : format_number(v); };
    os << "stage,name,estimate,truth,rel_error,residual,cond\n";
    for (const StageReport& s : r.stages)
        for (const StageEstimate& e : s.estimates)
            os << s.stage << ',' << e.name << ',' << format_number(e.estimate) << ',' << opt(e.truth) << ','
               << opt(e.rel_error) << ',' << num(e.residual) << ',' << num(e.cond) << '\n';
}

/// Human-readable `key = value` report, one line per fact.
inline void write_report_text(std::ostream& os, const RecoveryReport& r) {
    os << "complete = " << (r.complete ? "true" : "false") << '\n';
    if (!r.complete) os << "failure = " << r.failure << '\n';
    os << "oracle_queries = " << r.oracle_queries << '\n';
    for (std::size_t i = 0; i < r.experiments.size(); ++i)
        os << "experiment." << i << " = " << r.experiments[i] << '\n';
    for (const StageReport& s : r.stages) {
        const std::string p = "stage." + s.stage + '.';
        os << p << "status = " << (s.completed ? "completed" : "failed") << '\n';
        if (!s.reason.empty()) os << p << "reason = " << s.reason << '\n';
        if (!std::isnan(s.residual)) os << p << "residual = " << format_number(s.residual) << '\n';
        if (!std::isnan(s.cond)) os << p << "cond = " << format_number(s.cond) << '\n';
        for (const StageEstimate& e : s.estimates) {
            const std::string q = p + e.name + '.';
            os << q << "estimate = " << format_number(e.estimate) << '\n';
            if (r.fields.count(e.name)) os << q << "shape = field (estimate is the mean)\n";
            if (e.truth) os << q << "truth = " << format_number(*e.truth) << '\n';
            if (e.rel_error) os << q << "rel_error = " << format_number(*e.rel_error) << '\n';
        }
    }
}

inline std::string report_text(const RecoveryReport& r) {
    std::ostringstream os;
    write_report_text(os, r);
    return os.str();
}

// ---------------------------------------------------------------------------
// Binary container

inline constexpr char kBinaryMagic[8] = {'C', 'H', 'E', 'M', 'O', 'B', 'I', 'N'};
inline constexpr std::uint32_t kBinaryVersion = 1;

namespace detail {

inline nlohmann::json domain_json(const Domain& d) {
    return {{"dim", d.dim()},
            {"lengths", {d.length(0), d.length(1)}},
            {"nodes", {d.nodes(0), d.nodes(1)}}};
}

inline Domain domain_from_json(const nlohmann::json& j) {
    const auto l = j.at("lengths").get<std::vector<double>>();
    const auto n = j.at("nodes").get<std::vector<std::size_t>>();
    if (l.size() != 2 || n.size() != 2) throw InvalidArgument("binary container: malformed domain");
    return Domain(j.at("dim").get<std::size_t>(), {l[0], l[1]}, {n[0], n[1]});
}

inline void write_container(const std::string& path, const nlohmann::json& header, const std::vector<double>& data) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    const std::string h = header.dump();
    const std::uint64_t hl = h.size(), dl = data.size();
    os.write(kBinaryMagic, sizeof kBinaryMagic);
    os.write(reinterpret_cast<const char*>(&kBinaryVersion), sizeof kBinaryVersion);
    os.write(reinterpret_cast<const char*>(&hl), sizeof hl);
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    os.write(reinterpret_cast<const char*>(&dl), sizeof dl);
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!os) throw Error("write failed: " + path);
}

inline std::pair<nlohmann::json, std::vector<double>> read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t hl = 0, dl = 0;
    is.read(magic, sizeof magic);
    if (!is || !std::equal(magic, magic + 8, kBinaryMagic)) throw InvalidArgument(path + ": not a chemo container");
    is.read(reinterpret_cast<char*>(&version), sizeof version);
    if (version != kBinaryVersion) throw InvalidArgument(path + ": unsupported container version");
    is.read(reinterpret_cast<char*>(&hl), sizeof hl);
    std::string h(hl, '\0');
    is.read(h.data(), static_cast<std::streamsize>(hl));
    is.read(reinterpret_cast<char*>(&dl), sizeof dl);
    std::vector<double> data(dl);
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(dl * sizeof(double)));
    if (!is) throw InvalidArgument(path + ": truncated container");
    return {nlohmann::json::parse(h), std::move(data)};
}

class Cursor {
public:
    explicit Cursor(const std::vector<double>& d) : d_(d) {}
    std::vector<double> values(std::size_t n) {
        const std::size_t start = take(n);
        return std::vector<double>(d_.begin() + static_cast<std::ptrdiff_t>(start),
                                   d_.begin() + static_cast<std::ptrdiff_t>(start + n));
    }
    void finish() const {
        if (pos_ != d_.size()) throw InvalidArgument("binary container: payload size mismatch");
    }

private:
    std::size_t take(std::size_t n) {
        if (pos_ + n > d_.size()) throw InvalidArgument("binary container: payload too short");
        const std::size_t start = pos_;
        pos_ += n;
        return start;
    }
    const std::vector<double>& d_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void write_binary(const std::string& path, const Trajectory& t) {
    nlohmann::json h{{"kind", "trajectory"},   {"domain", detail::domain_json(t.domain)},
                     {"tau", t.tau},           {"dt", t.dt},
                     {"stride", t.stride},     {"count", t.times.size()}};
    std::vector<double> data(t.times);
    for (const State& s : t.states)
        for (const Field* f : {&s.u, &s.v, &s.w}) data.insert(data.end(), f->raw().begin(), f->raw().end());
    detail::write_container(path, h, data);
}

inline Trajectory read_trajectory_binary(const std::string& path) {
    auto [h, data] = detail::read_container(path);
    if (h.at("kind") != "trajectory") throw InvalidArgument(path + ": not a trajectory");
    Trajectory t;
    t.domain = detail::domain_from_json(h.at("domain"));
    t.tau = h.at("tau").get<int>();
    t.dt = h.at("dt").get<double>();
    t.stride = h.at("stride").get<int>();
    const auto n = h.at("count").get<std::size_t>();
    detail::Cursor c(data);
    t.times = c.values(n);
    for (std::size_t i = 0; i < n; ++i) {
        State s;
        s.u = Field(t.domain, c.values(t.domain.size()));
        s.v = Field(t.domain, c.values(t.domain.size()));
        s.w = Field(t.domain, c.values(t.domain.size()));
        t.states.push_back(std::move(s));
    }
    c.finish();
    return t;
}

inline void write_binary(const std::string& path, const MeasurementRecord& m) {
    nlohmann::json h{{"kind", "measurement"},
                     {"domain", detail::domain_json(m.domain)},
                     {"boundary", m.boundary},
                     {"count", m.times.size()}};
    std::vector<double> data(m.times);
    for (const auto* tr : {&m.boundary_u, &m.boundary_v, &m.boundary_w})
        for (const auto& row : *tr) data.insert(data.end(), row.begin(), row.end());
    for (const Field* f : {&m.final_u, &m.final_v, &m.final_w})
        data.insert(data.end(), f->raw().begin(), f->raw().end());
    detail::write_container(path, h, data);
}

inline MeasurementRecord read_measurement_binary(const std::string& path) {
    auto [h, data] = detail::read_container(path);
    if (h.at("kind") != "measurement") throw InvalidArgument(path + ": not a measurement record");
    MeasurementRecord m;
    m.domain = detail::domain_from_json(h.at("domain"));
    m.boundary = h.at("boundary").get<std::vector<std::size_t>>();
    const auto n = h.at("count").get<std::size_t>();
    detail::Cursor c(data);
    m.times = c.values(n);
    for (auto* tr : {&m.boundary_u, &m.boundary_v, &m.boundary_w})
        for (std::size_t i = 0; i < n; ++i) tr->push_back(c.values(m.boundary.size()));
    m.final_u = Field(m.domain, c.values(m.domain.size()));
    m.final_v = Field(m.domain, c.values(m.domain.size()));
    m.final_w = Field(m.domain, c.values(m.domain.size()));
    c.finish();
    return m;
}

}  // namespace chemo
