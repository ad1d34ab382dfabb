#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include <json.hpp>

#include "physnet/cli.hpp"
#include "physnet/tensor_io.hpp"

using namespace physnet;
namespace fs = std::filesystem;

namespace {

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "physnet");
  return run_cli(args);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

// Shared small dataset and checkpoint, built once.
struct Fixture {
  fs::path dir = fs::temp_directory_path() / "physnet_test_cli";
  fs::path data = dir / "data";
  fs::path manifest = data / "manifest.json";
  fs::path ckpt = dir / "model.ckpt";
  fs::path clip;

  Fixture() {
    fs::remove_all(dir);
    fs::create_directories(dir);
    REQUIRE(cli({"synth-gen", "--out", data.string(), "--clips", "10", "--seed", "7", "--frames", "64", "--size",
                 "32x32", "--amp", "0.05"}) == 0);
    REQUIRE(cli({"train", "--data", manifest.string(), "--epochs", "2", "--clip-len", "32", "--widths", "4", "--out",
                 ckpt.string(), "--seed", "1"}) == 0);
    clip = data / nlohmann::json::parse(slurp(manifest))["clips"][0]["path"].get<std::string>();
  }
  ~Fixture() { fs::remove_all(dir); }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("help and argument errors") {
  CHECK(cli({"--help"}) == 0);
  CHECK(cli({"synth-gen", "--help"}) == 0);
  CHECK(cli({}) == 1);
  CHECK(cli({"frobnicate"}) == 1);
  CHECK(cli({"synth-gen"}) == 1);
  CHECK(cli({"synth-gen", "--out", (fs::temp_directory_path() / "physnet_cli_zero").string(), "--clips", "0"}) == 1);
  CHECK(cli({"synth-gen", "--out", (fs::temp_directory_path() / "physnet_cli_bad").string(), "--hr-min", "20"}) ==
        1);
}

TEST_CASE("synth-gen writes a deterministic dataset") {
  const auto base = fs::temp_directory_path() / "physnet_cli_synth";
  fs::remove_all(base);
  const std::vector<std::string> common{"--clips", "4", "--seed", "7", "--frames", "30", "--size", "8x8"};
  auto args_a = common, args_b = common;
  args_a.insert(args_a.begin(), {"synth-gen", "--out", (base / "a").string()});
  args_b.insert(args_b.begin(), {"synth-gen", "--out", (base / "b").string()});
  REQUIRE(cli(args_a) == 0);
  REQUIRE(cli(args_b) == 0);
  const auto m = nlohmann::json::parse(slurp(base / "a" / "manifest.json"));
  CHECK(m["clips"].size() == 4);
  for (const auto& e : m["clips"]) {
    CHECK(fs::exists(base / "a" / e["path"].get<std::string>()));
    CHECK(fs::exists(base / "a" / e["signal_path"].get<std::string>()));
  }
  CHECK(slurp(base / "a" / "manifest.json") == slurp(base / "b" / "manifest.json"));
  fs::remove_all(base);
}

TEST_CASE("train writes a checkpoint and one loss row per epoch") {
  auto& f = fixture();
  CHECK(fs::exists(f.ckpt));
  const fs::path loss = f.ckpt.string() + ".loss.csv";
  REQUIRE(fs::exists(loss));
  CHECK(line_count(loss) == 3);
}

TEST_CASE("train argument checks") {
  auto& f = fixture();
  const auto out = (f.dir / "bad.ckpt").string();
  CHECK(cli({"train", "--data", f.manifest.string(), "--variant", "3dcnn-ed", "--clip-len", "63", "--out", out}) == 1);
  CHECK(cli({"train", "--data", f.manifest.string(), "--lr", "0", "--out", out}) == 1);
  CHECK(cli({"train", "--data", f.manifest.string(), "--epochs", "0", "--out", out}) == 1);
  CHECK(cli({"train", "--data", f.manifest.string(), "--variant", "vit", "--out", out}) == 1);
  CHECK(cli({"train", "--data", (f.dir / "nope.json").string(), "--out", out}) == 2);
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("infer writes one row per frame, deterministically") {
  auto& f = fixture();
  const auto a = f.dir / "a.csv", b = f.dir / "b.csv";
  REQUIRE(cli({"infer", "--ckpt", f.ckpt.string(), "--clip", f.clip.string(), "--out", a.string()}) == 0);
  REQUIRE(cli({"infer", "--ckpt", f.ckpt.string(), "--clip", f.clip.string(), "--out", b.string()}) == 0);
  const auto T = load_tensor(f.clip).dim(1);
  CHECK(line_count(a) == static_cast<std::size_t>(T + 1));
  CHECK(slurp(a) == slurp(b));
  CHECK(cli({"infer", "--ckpt", (f.dir / "missing.ckpt").string(), "--clip", f.clip.string(), "--out",
             a.string()}) == 2);
  CHECK(cli({"infer", "--ckpt", f.ckpt.string(), "--clip", (f.dir / "missing.tensor").string(), "--out",
             a.string()}) == 2);
}

TEST_CASE("eval writes a metric report") {
  auto& f = fixture();
  const auto out = f.dir / "report.json";
  REQUIRE(cli({"eval", "--ckpt", f.ckpt.string(), "--data", f.manifest.string(), "--split", "all", "--out",
               out.string(), "--hrv-min-duration", "1"}) == 0);
  const auto j = nlohmann::json::parse(slurp(out));
  CHECK(j.contains("HR"));
  for (const char* k : {"RF", "LF", "HF", "LF_HF"}) CHECK(j.contains(k));
  CHECK(j["clips_total"] == 10);
}

TEST_CASE("eval rejects single-clip sets and unwritable outputs") {
  auto& f = fixture();
  const auto one = f.dir / "one";
  REQUIRE(cli({"synth-gen", "--out", one.string(), "--clips", "1", "--frames", "64", "--size", "32x32"}) == 0);
  CHECK(cli({"eval", "--ckpt", f.ckpt.string(), "--data", (one / "manifest.json").string(), "--split", "all",
             "--out", (f.dir / "one.json").string()}) == 1);
  const auto ro = f.dir / "readonly";
  fs::create_directories(ro);
  fs::permissions(ro, fs::perms::owner_read | fs::perms::owner_exec);
  const bool enforced = [&] {
    std::ofstream probe(ro / "probe");
    return !probe.good();
  }();
  if (enforced) {
    CHECK(cli({"eval", "--ckpt", f.ckpt.string(), "--data", f.manifest.string(), "--split", "all", "--out",
               (ro / "r.json").string()}) == 2);
  }
  fs::permissions(ro, fs::perms::owner_all);
  // A directory in place of the output file fails regardless of privileges.
  CHECK(cli({"eval", "--ckpt", f.ckpt.string(), "--data", f.manifest.string(), "--split", "all", "--out",
             ro.string()}) == 2);
}

TEST_CASE("dump-features") {
  auto& f = fixture();
  const auto a = f.dir / "f0.tensor", b = f.dir / "f0b.tensor";
  REQUIRE(cli({"dump-features", "--ckpt", f.ckpt.string(), "--clip", f.clip.string(), "--stage", "0", "--out",
               a.string()}) == 0);
  REQUIRE(cli({"dump-features", "--ckpt", f.ckpt.string(), "--clip", f.clip.string(), "--stage", "0", "--out",
               b.string()}) == 0);
  CHECK(load_tensor(a).rank() == 4);
  CHECK(slurp(a) == slurp(b));
  CHECK(cli({"dump-features", "--ckpt", f.ckpt.string(), "--clip", f.clip.string(), "--stage", "9", "--out",
             a.string()}) == 1);
}

TEST_CASE("config file supplies defaults that flags override") {
  auto& f = fixture();
  const auto cfg = f.dir / "cfg.json";
  std::ofstream(cfg) << R"({"synth-gen": {"clips": 3, "frames": 30, "size": "8x8", "seed": 5}})";
  const auto out_a = f.dir / "cfg_a", out_b = f.dir / "cfg_b";
  REQUIRE(cli({"--config", cfg.string(), "synth-gen", "--out", out_a.string()}) == 0);
  CHECK(nlohmann::json::parse(slurp(out_a / "manifest.json"))["clips"].size() == 3);
  REQUIRE(cli({"--config", cfg.string(), "synth-gen", "--out", out_b.string(), "--clips", "2"}) == 0);
  CHECK(nlohmann::json::parse(slurp(out_b / "manifest.json"))["clips"].size() == 2);
  CHECK(cli({"--config", (f.dir / "absent.json").string(), "synth-gen", "--out", out_b.string()}) == 2);
}

TEST_CASE("process exit codes from the installed binary") {
  const char* bin = std::getenv("PHYSNET_CLI_PATH");
#ifdef PHYSNET_CLI_PATH
  if (!bin) bin = PHYSNET_CLI_PATH;
#endif
  if (!bin) {
    MESSAGE("PHYSNET_CLI_PATH not set; skipping process-level checks");
    return;
  }
  auto run = [&](const std::string& args) {
    const int status = std::system((std::string(bin) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  auto& f = fixture();
  CHECK(run("--help") == 0);
  CHECK(run("synth-gen --out " + (f.dir / "p").string() + " --clips 0") == 1);
  CHECK(run("infer --ckpt " + (f.dir / "missing.ckpt").string() + " --clip " + f.clip.string() + " --out " +
            (f.dir / "x.csv").string()) == 2);
  CHECK(run("infer --ckpt " + f.ckpt.string() + " --clip " + f.clip.string() + " --out " +
            (f.dir / "x.csv").string()) == 0);
}
