#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#ifndef CHEMOLAB_PATH
#error "CHEMOLAB_PATH must name the chemolab executable"
#endif
#ifndef CHEMO_CONFIG_DIR
#error "CHEMO_CONFIG_DIR must point at the shipped configs"
#endif

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "chemolab_cli_test";

// Per-test log so parallel ctest runs do not share it.
fs::path log_path() {
    return kRoot / (std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + ".log");
}

int run(const std::string& args) {
    fs::create_directories(kRoot);
    const std::string cmd = std::string(CHEMOLAB_PATH) + " " + args + " > " + log_path().string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

fs::path write_config(const std::string& name, const std::string& body) {
    fs::create_directories(kRoot);
    const fs::path p = kRoot / name;
    std::ofstream(p) << body;
    return p;
}

std::string cfg(const std::string& name) { return (fs::path(CHEMO_CONFIG_DIR) / name).string(); }

const std::string kSmall = "domain.nodes_x = 33\nsolver.dt = 2e-3\nsolver.t_final = 0.4\ntruth.delta = 2\n";

}  // namespace

TEST(Cli, UnknownFlagPrintsUsageAndExitsOne) {
    EXPECT_EQ(run("simulate --bogus"), 1);
    EXPECT_NE(slurp(log_path()).find("Usage"), std::string::npos);
    EXPECT_EQ(run(""), 1);
    EXPECT_EQ(run("frobnicate"), 1);
    EXPECT_EQ(run("simulate --tau 3"), 1);
}

TEST(Cli, BadConfigIsAUsageError) {
    const fs::path p = write_config("bad.cfg", "solver.tau = 0\nsolver.nonsense = 1\n");
    EXPECT_EQ(run("simulate --config " + p.string()), 1);
    EXPECT_NE(slurp(log_path()).find("unknown config key"), std::string::npos);
    EXPECT_EQ(run("simulate --config /nonexistent/x.cfg"), 1);
}

TEST(Cli, RecoverWritesReportFiles) {
    const fs::path out = kRoot / "recover";
    fs::remove_all(out);
    ASSERT_EQ(run("recover --quiet --config " + cfg("tau0.cfg") + " --out " + out.string()), 0)
        << slurp(log_path());
    EXPECT_TRUE(fs::exists(out / "report.txt"));
    const std::string csv = slurp(out / "report.csv");
    EXPECT_EQ(csv.rfind("stage,name,estimate,truth,rel_error,residual,cond\n", 0), 0u);
    EXPECT_NE(csv.find("chi_xi_mu,chi,"), std::string::npos);
    EXPECT_TRUE(slurp(log_path()).empty());
}

TEST(Cli, RecoverReportsNumericalFailureWithStage) {
    const fs::path out = kRoot / "symmetric";
    EXPECT_EQ(run("recover --quiet --config " + cfg("tau0_symmetric.cfg") + " --out " + out.string()), 2);
    EXPECT_NE(slurp(log_path()).find("chi_xi_mu"), std::string::npos);
    EXPECT_NE(slurp(out / "report.txt").find("stage.chi_xi_mu.status = failed"), std::string::npos);
}

TEST(Cli, IdentcheckWithEqualParametersIsConsistent) {
    const fs::path out = kRoot / "ident_same";
    EXPECT_EQ(run("identcheck --config " + cfg("ident_same.cfg") + " --out " + out.string()), 0);
    EXPECT_NE(slurp(out / "ident.csv").find(",consistent\n"), std::string::npos);
}

TEST(Cli, SelfTestFailureExitsThree) {
    // A 1% change in chi with a generous match tolerance reads as a violation.
    const fs::path p = write_config("violation.cfg", kSmall + "ident.trials = 0\nident.b2.chi = 0.101\nident.match_tol = 10\n");
    EXPECT_EQ(run("identcheck --self-test --config " + p.string() + " --out " + (kRoot / "v").string()), 3);
    EXPECT_EQ(run("identcheck --config " + p.string() + " --out " + (kRoot / "v").string()), 0);
    EXPECT_NE(slurp(kRoot / "v" / "ident.csv").find(",violation\n"), std::string::npos);
}

TEST(Cli, TauFlagOverridesTheConfig) {
    const fs::path p = write_config("small.cfg", kSmall);
    const fs::path a = kRoot / "tau0", b = kRoot / "tau1";
    ASSERT_EQ(run("simulate --quiet --config " + p.string() + " --out " + a.string()), 0);
    ASSERT_EQ(run("simulate --quiet --tau 1 --config " + p.string() + " --out " + b.string()), 0);
    EXPECT_NE(slurp(a / "trajectory.csv"), slurp(b / "trajectory.csv"));
}

TEST(Cli, IdenticalRunsGiveBitwiseIdenticalOutputs) {
    const fs::path p = write_config("repro.cfg", kSmall);
    const fs::path a = kRoot / "repro_a", b = kRoot / "repro_b";
    for (const char* sub : {"simulate", "recover", "identcheck"}) {
        ASSERT_EQ(run(std::string(sub) + " --quiet --config " + p.string() + " --out " + a.string()), 0) << sub;
        ASSERT_EQ(run(std::string(sub) + " --quiet --config " + p.string() + " --out " + b.string()), 0) << sub;
    }
    for (const char* f : {"trajectory.csv", "measurement.csv", "trajectory.bin", "report.csv", "report.txt", "ident.csv"}) {
        const std::string x = slurp(a / f);
        EXPECT_FALSE(x.empty()) << f;
        EXPECT_EQ(x, slurp(b / f)) << f;
    }
}

TEST(Cli, LinearizeAndConvergenceRun) {
    const fs::path p = write_config("lin.cfg", kSmall + "solver.tau = 1\nconvergence.levels = 17,33,65\n");
    const fs::path out = kRoot / "lin";
    EXPECT_EQ(run("linearize --self-test --quiet --config " + p.string() + " --out " + out.string()), 0);
    EXPECT_TRUE(fs::exists(out / "variation_direct.csv"));
    EXPECT_NE(slurp(out / "consistency.csv").find("# slope_order2"), std::string::npos);
    EXPECT_EQ(run("convergence --self-test --quiet --config " + p.string() + " --out " + out.string()), 0);
    EXPECT_NE(slurp(out / "convergence.csv").find("forward_space,65,"), std::string::npos);
}
