#include <doctest.h>

#include <fstream>
#include <sstream>

#include "maskveil/binio.hpp"
#include "maskveil/cli.hpp"
#include "maskveil/errors.hpp"
#include "support.hpp"

using namespace maskveil;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Small corpus plus a 5-point model shared by the CLI cases.
const fs::path& workspace() {
  static const fs::path dir = [] {
    auto d = maskveil::testing::scratch_dir("cli");
    REQUIRE(invoke({"make-corpus", "--seed", "3", "--identities", "4", "--per-identity", "4", "--out",
                    (d / "corpus").string()})
                .code == 0);
    REQUIRE(invoke({"train-recognizer", "--corpus", (d / "corpus").string(), "--layout", "5", "--k", "6",
                    "--out", (d / "models").string()})
                .code == 0);
    REQUIRE(invoke({"fit-template", "--corpus", (d / "corpus").string(), "--model",
                    (d / "models/model_v5.mvm").string(), "--out", (d / "models").string()})
                .code == 0);
    return d;
  }();
  return dir;
}

std::vector<std::string> protect_args(const fs::path& out) {
  const auto& d = workspace();
  return {"protect", "--corpus", (d / "corpus").string(), "--held-out", "--model",
          (d / "models/model_v5.mvm").string(), "--regression", (d / "models/regression_v5.mvr").string(),
          "--phase1-rounds", "60", "--group-rounds", "10", "--seed", "5", "--out", out.string()};
}

}  // namespace

TEST_CASE("cli: usage errors and help") {
  CHECK(invoke({}).code == cli::kDomainOrFormat);
  CHECK(invoke({"no-such-command"}).code == cli::kDomainOrFormat);
  const auto help = invoke({"--help"});
  CHECK(help.code == cli::kOk);
  CHECK(help.out.find("protect") != std::string::npos);
}

TEST_CASE("cli: missing inputs map to the I/O exit code") {
  const auto r = invoke({"train-recognizer", "--corpus", "/nonexistent/corpus", "--out", "/tmp/x"});
  CHECK(r.code == cli::kIo);
  CHECK(r.err.find("landmarks") != std::string::npos);
}

TEST_CASE("cli: protect, restore and evaluate round trip") {
  const auto& d = workspace();
  const auto run = d / "run";
  REQUIRE(invoke(protect_args(run)).code == cli::kOk);
  CHECK(fs::exists(run / "protect_manifest.txt"));
  CHECK(slurp(run / "protect_manifest.txt").find("seed = 5") != std::string::npos);

  const auto restored = invoke({"restore", "--run", run.string(), "--corpus", (d / "corpus").string()});
  CHECK(restored.code == cli::kOk);
  CHECK(restored.out.find(" 0 differing samples") != std::string::npos);

  const auto eval = invoke({"evaluate", "--corpus", (d / "corpus").string(), "--held-out", "--model",
                            (d / "models/model_v5.mvm").string(), "--run", run.string(), "--out",
                            (d / "eval").string()});
  CHECK(eval.code == cli::kOk);
  const auto manifest = slurp(d / "eval/metrics_manifest.txt");
  for (const char* key : {"T_o = ", "F_c = ", "T_r = ", "r_s = ", "mean_dssim = "}) {
    CHECK(manifest.find(key) != std::string::npos);
  }

  SUBCASE("reruns are byte identical") {
    REQUIRE(invoke(protect_args(d / "run_again")).code == cli::kOk);
    CHECK(slurp(run / "protect_manifest.txt") == slurp(d / "run_again/protect_manifest.txt"));
    for (const auto& e : fs::recursive_directory_iterator(run / "keys")) {
      if (!e.is_regular_file()) continue;
      CHECK(slurp(e.path()) == slurp(d / "run_again/keys" / fs::relative(e.path(), run / "keys")));
    }
  }
}

TEST_CASE("cli: restore reports a wrong key as a verification mismatch") {
  const auto& d = workspace();
  const auto run = d / "run_wrong";
  REQUIRE(invoke(protect_args(run)).code == cli::kOk);
  std::vector<fs::path> keys;
  for (const auto& e : fs::recursive_directory_iterator(run / "keys")) {
    if (e.is_regular_file()) keys.push_back(e.path());
  }
  std::sort(keys.begin(), keys.end());
  REQUIRE(keys.size() >= 2);
  fs::copy_file(keys[1], keys[0], fs::copy_options::overwrite_existing);
  const auto r = invoke({"restore", "--run", run.string(), "--corpus", (d / "corpus").string()});
  CHECK(r.code == cli::kVerificationMismatch);
}

TEST_CASE("cli: corrupt keys are rejected before anything is written") {
  const auto& d = workspace();
  const auto run = d / "run_corrupt";
  REQUIRE(invoke(protect_args(run)).code == cli::kOk);
  fs::path victim;
  for (const auto& e : fs::recursive_directory_iterator(run / "keys")) {
    if (e.is_regular_file()) victim = e.path();
  }
  auto bytes = binio::read_file(victim);
  bytes[bytes.size() - 1] ^= 0xFF;
  binio::write_file(victim, bytes);
  const auto r = invoke({"restore", "--run", run.string()});
  CHECK(r.code == cli::kDomainOrFormat);
  CHECK(r.err.find(victim.filename().string()) != std::string::npos);
  CHECK_FALSE(fs::exists(run / "restored"));
}

TEST_CASE("cli: evaluate names missing artifacts") {
  const auto& d = workspace();
  const auto run = d / "run_missing";
  REQUIRE(invoke(protect_args(run)).code == cli::kOk);
  const auto r = invoke({"evaluate", "--corpus", (d / "corpus").string(), "--held-out", "--model",
                         (d / "models/model_v5.mvm").string(), "--run", run.string(), "--out",
                         (d / "eval_missing").string()});
  CHECK(r.code == cli::kIo);
  CHECK(r.err.find("restored") != std::string::npos);
}

TEST_CASE("cli: config file supplies defaults and flags override it") {
  const auto& d = workspace();
  {
    std::ofstream cfg(d / "run.cfg");
    cfg << "# protect settings\nseed = 5\nphase1-rounds = 60\ngroup-rounds = 10\nheld-out = true\n";
  }
  auto args = protect_args(d / "run_cfg");
  // Drop the explicit seed and rounds so the config provides them.
  std::vector<std::string> trimmed;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--seed" || args[i] == "--phase1-rounds" || args[i] == "--group-rounds") {
      ++i;
      continue;
    }
    trimmed.push_back(args[i]);
  }
  trimmed.push_back("--config");
  trimmed.push_back((d / "run.cfg").string());
  REQUIRE(invoke(trimmed).code == cli::kOk);
  REQUIRE(invoke(protect_args(d / "run_flags")).code == cli::kOk);
  CHECK(slurp(d / "run_cfg/protect_manifest.txt") == slurp(d / "run_flags/protect_manifest.txt"));

  auto overridden = trimmed;
  overridden.insert(overridden.end(), {"--seed", "6"});
  auto& out_path = *std::find(overridden.begin(), overridden.end(), (d / "run_cfg").string());
  out_path = (d / "run_cfg6").string();
  REQUIRE(invoke(overridden).code == cli::kOk);
  CHECK(slurp(d / "run_cfg6/protect_manifest.txt").find("seed = 6") != std::string::npos);
}

TEST_CASE("cli: unreachable tuning target exits with its own code") {
  const auto& d = workspace();
  auto args = protect_args(d / "run_tune");
  args.insert(args.end(), {"--tune-sigma", "--fc-target", "1.0", "--tune-sample", "2", "--noise", "gaussian",
                           "--noise-sigma", "0"});
  const auto r = invoke(args);
  CHECK(r.code == cli::kUnreachableTarget);
  CHECK(r.err.find("unreachable") != std::string::npos);
}

TEST_CASE("cli: superpose warns past three recognizers") {
  const auto& d = workspace();
  const auto t = (d / "models/template_v5.mvk").string();
  const auto r = invoke({"superpose", "--template", t, t, t, t, "--out", (d / "merged.mvk").string()});
  CHECK(r.code == cli::kOk);
  CHECK(r.err.find("less than 3 are recommended") != std::string::npos);
}

TEST_CASE("cli: config parser rejects malformed lines") {
  const auto dir = maskveil::testing::scratch_dir("cfg");
  {
    std::ofstream cfg(dir / "bad.cfg");
    cfg << "seed 5\n";
  }
  CHECK_THROWS_AS(cli::read_config(dir / "bad.cfg"), FormatError);
}
