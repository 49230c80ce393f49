#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "chemo/io.hpp"

using namespace chemo;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "chemo_io_test";
    fs::create_directories(dir);
    return dir / name;
}

Trajectory sample_trajectory(const Domain& d) {
    ParameterSet p;
    p.chi = 0.1;
    p.xi = 0.05;
    p.r = 0.5;
    SolverConfig c;
    c.tau = 1;
    c.dt = 1e-2;
    c.t_final = 0.1;
    c.stride = 3;
    const Field f = Field::sample(d, [](double x, double y) { return 1.0 / 3.0 + std::cos(M_PI * x) * y * y + 0.7; });
    return solve_forward(f, Field(d, 0.1), Field(d, 0.2), p, applied_kinetics(p, {}), c);
}

}  // namespace

TEST(Format, SeventeenDigitsRoundTrip) {
    for (double x : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0}) EXPECT_EQ(std::stod(format_number(x)), x);
    EXPECT_EQ(format_number(1.0 / 3.0), "0.33333333333333331");
    EXPECT_EQ(format_number(std::nan("")), "nan");
}

TEST(Csv, TrajectoryHasOneRowPerTimeAndNode) {
    const Domain d = Domain::box(1.0, 1.0, 9, 8);
    const Trajectory t = sample_trajectory(d);
    std::ostringstream os;
    write_trajectory_csv(os, t);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "t,x,y,u,v,w");
    std::size_t rows = 0;
    while (std::getline(is, line)) ++rows;
    EXPECT_EQ(rows, t.times.size() * d.size());
}

TEST(Csv, OneDimensionalHeaderAndValues) {
    const Domain d = Domain::line(1.0, 9);
    const Trajectory t = sample_trajectory(d);
    std::ostringstream os;
    write_trajectory_csv(os, t);
    std::istringstream is(os.str());
    std::string header, first;
    std::getline(is, header);
    std::getline(is, first);
    EXPECT_EQ(header, "t,x,u,v,w");
    EXPECT_EQ(first, "0,0," + format_number(t.states[0].u[0]) + "," + format_number(t.states[0].v[0]) + "," +
                         format_number(t.states[0].w[0]));
}

TEST(Csv, MeasurementListsTracesThenFinalFields) {
    const Domain d = Domain::line(1.0, 9);
    const MeasurementRecord m = measure(sample_trajectory(d));
    std::ostringstream os;
    write_measurement_csv(os, m);
    const std::string s = os.str();
    EXPECT_EQ(s.rfind("kind,t,x,u,v,w\n", 0), 0u);
    std::size_t boundary = 0, final = 0, pos = 0;
    while ((pos = s.find("\nboundary,", pos)) != std::string::npos) ++boundary, ++pos;
    pos = 0;
    while ((pos = s.find("\nfinal,", pos)) != std::string::npos) ++final, ++pos;
    EXPECT_EQ(boundary, m.times.size() * 2);
    EXPECT_EQ(final, d.size());
}

TEST(Csv, ReportColumns) {
    RecoveryReport r;
    StageReport s;
    s.stage = "r";
    s.completed = true;
    s.estimates.push_back({"r", 0.5, 1e-3, 2.0, 0.5, 0.0});
    r.stages.push_back(s);
    std::ostringstream os;
    write_report_csv(os, r);
    EXPECT_EQ(os.str(), "stage,name,estimate,truth,rel_error,residual,cond\nr,r,0.5,0.5,0,0.001,2\n");
    const std::string text = report_text(r);
    EXPECT_NE(text.find("stage.r.status = completed"), std::string::npos);
    EXPECT_NE(text.find("stage.r.r.estimate = 0.5"), std::string::npos);
}

TEST(Csv, FieldsShareAGrid) {
    const Domain d = Domain::line(1.0, 9);
    const Field a(d, 1.0), b(d, 2.0), c(Domain::line(1.0, 10), 0.0);
    std::ostringstream os;
    write_fields_csv(os, {{"a", &a}, {"b", &b}});
    EXPECT_EQ(os.str().substr(0, 8), "x,a,b\n0,");
    EXPECT_THROW(write_fields_csv(os, {{"a", &a}, {"c", &c}}), InvalidArgument);
}

TEST(Binary, TrajectoryRoundTripIsBitExact) {
    for (const Domain& d : {Domain::line(2.0, 17), Domain::box(1.0, 0.5, 9, 11)}) {
        const Trajectory t = sample_trajectory(d);
        const fs::path p = scratch("traj.bin");
        write_binary(p.string(), t);
        const Trajectory back = read_trajectory_binary(p.string());
        EXPECT_TRUE(back.domain == t.domain);
        EXPECT_EQ(back.tau, t.tau);
        EXPECT_EQ(back.dt, t.dt);
        EXPECT_EQ(back.stride, t.stride);
        EXPECT_EQ(back.times, t.times);
        ASSERT_EQ(back.states.size(), t.states.size());
        for (std::size_t n = 0; n < t.states.size(); ++n) {
            EXPECT_EQ(back.states[n].u.raw(), t.states[n].u.raw());
            EXPECT_EQ(back.states[n].v.raw(), t.states[n].v.raw());
            EXPECT_EQ(back.states[n].w.raw(), t.states[n].w.raw());
        }
    }
}

TEST(Binary, MeasurementRoundTripIsBitExact) {
    const Domain d = Domain::box(1.0, 1.0, 9, 9);
    const MeasurementRecord m = measure(sample_trajectory(d));
    const fs::path p = scratch("meas.bin");
    write_binary(p.string(), m);
    const MeasurementRecord back = read_measurement_binary(p.string());
    EXPECT_EQ(back.boundary, m.boundary);
    EXPECT_EQ(back.times, m.times);
    EXPECT_EQ(back.boundary_u, m.boundary_u);
    EXPECT_EQ(back.boundary_w, m.boundary_w);
    EXPECT_EQ(back.final_v.raw(), m.final_v.raw());
}

TEST(Binary, RejectsForeignAndTruncatedFiles) {
    const fs::path p = scratch("bad.bin");
    {
        std::ofstream os(p, std::ios::binary);
        os << "NOTCHEMO and some more bytes to read";
    }
    EXPECT_THROW(read_trajectory_binary(p.string()), Error);

    const Trajectory t = sample_trajectory(Domain::line(1.0, 9));
    write_binary(p.string(), t);
    fs::resize_file(p, fs::file_size(p) - 8);
    EXPECT_THROW(read_trajectory_binary(p.string()), Error);

    write_binary(p.string(), measure(t));
    EXPECT_THROW(read_trajectory_binary(p.string()), Error);
}
