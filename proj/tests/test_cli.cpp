#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

#ifdef RSC_CLI_PATH

namespace {

const fs::path kDir = fs::temp_directory_path() / "rsc_test_cli";

/// Runs the CLI through the shell; stdout and stderr go to `log`.
int rsc_cli(const std::string& args, const std::string& env = "") {
    fs::create_directories(kDir);
    const std::string cmd = env + " '" RSC_CLI_PATH "' " + args + " > '" + (kDir / "log.txt").string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string log_text() {
    std::ifstream in(kDir / "log.txt");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const std::string kTiny =
    "--set benchmark=tabular-shift --set data.source_samples=40 --set data.target_samples=40 --set train.epochs=2 -q";

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("run succeeds and writes the summary") {
    fs::remove_all(kDir);
    CHECK(rsc_cli("run " + kTiny + " --out '" + (kDir / "ok").string() + "'") == 0);
    CHECK(fs::exists(kDir / "ok" / "summary.csv"));
    CHECK(fs::exists(kDir / "ok" / "default" / "seed_0" / "metrics.csv"));
    CHECK(rsc_cli("report '" + (kDir / "ok").string() + "'") == 0);
    CHECK(fs::exists(kDir / "ok" / "gamma_curve.csv"));
}

TEST_CASE("parse failures exit with 2 and a diagnostic") {
    fs::create_directories(kDir);
    std::ofstream(kDir / "bad.json") << "{\n  \"train\": [1,\n}\n";
    CHECK(rsc_cli("run --config '" + (kDir / "bad.json").string() + "'") == 2);
    CHECK(log_text().find("bad.json:3:") != std::string::npos);
    CHECK(rsc_cli("run --set train.nope=1") == 2);
    CHECK(log_text().find("train.nope") != std::string::npos);
    CHECK(rsc_cli("run --no-such-flag") == 2);
    CHECK(rsc_cli("") == 2);
    fs::create_directories(kDir / "empty");
    CHECK(rsc_cli("report '" + (kDir / "empty").string() + "'") == 2);
}

TEST_CASE("divergence exits with 3") {
    CHECK(rsc_cli("run " + kTiny + " --set train.learning_rate=1e300 --set train.baseline=none --out '" +
                  (kDir / "div").string() + "'") == 3);
    CHECK(fs::exists(kDir / "div" / "summary.csv"));
}

TEST_CASE("IO failures exit with 4") {
    fs::create_directories(kDir);
    std::ofstream(kDir / "file") << "x";
    CHECK(rsc_cli("run " + kTiny + " --out '" + (kDir / "file" / "sub").string() + "'") == 4);
    CHECK(rsc_cli("report '" + (kDir / "absent").string() + "'") == 4);
}

TEST_CASE("RSC_SEED supplies the default seed") {
    CHECK(rsc_cli("run " + kTiny + " --out '" + (kDir / "env").string() + "'", "RSC_SEED=5") == 0);
    CHECK(fs::exists(kDir / "env" / "default" / "seed_5" / "metrics.csv"));
    CHECK(rsc_cli("run " + kTiny + " --seed 6 --out '" + (kDir / "flag").string() + "'", "RSC_SEED=5") == 0);
    CHECK(fs::exists(kDir / "flag" / "default" / "seed_6" / "metrics.csv"));
    CHECK(rsc_cli("run " + kTiny, "RSC_SEED=abc") == 2);
}

TEST_CASE("gen-data and check") {
    CHECK(rsc_cli("gen-data --set benchmark=tabular-shift --set data.source_samples=5 --set data.target_samples=5 "
                  "--out '" + (kDir / "data").string() + "'") == 0);
    CHECK(fs::exists(kDir / "data" / "source0.csv"));
    CHECK(rsc_cli("check masks") == 0);
    CHECK(log_text().find("PASS") != std::string::npos);
    CHECK(rsc_cli("check nonsense") == 2);
    fs::remove_all(kDir);
}

}

#endif
