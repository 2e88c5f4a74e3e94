#include "bmds/io.hpp"

#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string last_line() const {
    auto end = out.find_last_not_of('\n');
    if (end == std::string::npos) return "";
    auto begin = out.rfind('\n', end);
    return out.substr(begin == std::string::npos ? 0 : begin + 1, end - (begin == std::string::npos ? 0 : begin + 1) + 1);
  }
};

Run run(const std::string& args) {
  const std::string cmd = std::string(BMDS_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bmds_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string tiny_config(const fs::path& dir) {
  const std::string path = (dir / "tiny.cfg").string();
  bmds::write_file(path,
                   "data.size = 16\ndata.n_samples = 6\ndata.crop = 8\nstage1.epochs = 1\nstage1.val_every = 1\n"
                   "stage2.epochs = 1\nstage2.T_infer = 2\n");
  return path;
}

}  // namespace

TEST_CASE("cli: usage errors exit 1") {
  CHECK(run("").code == 1);
  CHECK(run("frobnicate").code == 1);
  const Run missing = run("eval --config missing.txt --ckpt x.ckpt");
  CHECK(missing.code == 1);
  CHECK(missing.out.find("missing.txt") != std::string::npos);
  CHECK(run("train --set no.such.key=1").code == 1);
  CHECK(run("train --set stage2.T_train=0").code == 1);
}

TEST_CASE("cli: runtime errors exit 2") {
  const auto dir = scratch("rt");
  CHECK(run("eval --ckpt " + (dir / "absent.ckpt").string() + " --out " + dir.string()).code == 2);
}

TEST_CASE("cli: print-default-config parses back") {
  const auto dir = scratch("cfg");
  const Run r = run("--print-default-config");
  CHECK(r.code == 0);
  CHECK(r.out.find("stage2.T_infer = 20") != std::string::npos);
  CHECK(r.out.find("losses.lambda1 = 0.4") != std::string::npos);
  bmds::write_file((dir / "d.cfg").string(), r.out);
  const Run t = run("gen-data --config " + (dir / "d.cfg").string() + " --set data.n_samples=3 --set data.size=8 --set data.crop=8 --out " +
                    (dir / "data").string());
  CHECK(t.code == 0);
  CHECK(t.last_line() == "OK gen-data");
}

TEST_CASE("cli: gen-data twice is byte-identical") {
  const auto dir = scratch("gen");
  const std::string base = "gen-data --seed 7 --set data.size=8 --set data.crop=8 --set data.n_samples=4 --out ";
  REQUIRE(run(base + (dir / "a").string()).code == 0);
  REQUIRE(run(base + (dir / "b").string()).code == 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    ++files;
    CHECK(bmds::read_file(e.path().string()) == bmds::read_file((dir / "b" / e.path().filename()).string()));
  }
  CHECK(files == 5);
}

TEST_CASE("cli: train, finetune, eval and report end with OK lines") {
  const auto dir = scratch("pipe");
  const std::string cfg = tiny_config(dir);
  const std::string common = " --config " + cfg + " --out " + dir.string() + " --quiet";
  const Run tr = run("train" + common);
  REQUIRE(tr.code == 0);
  CHECK(tr.last_line() == "OK train");
  CHECK(fs::exists(dir / "stage1.ckpt"));
  CHECK(fs::exists(dir / "stage1_log.csv"));
  const Run ft = run("finetune-bayes --ckpt " + (dir / "stage1.ckpt").string() + common);
  REQUIRE(ft.code == 0);
  CHECK(ft.last_line() == "OK finetune-bayes");
  const Run ev = run("eval --ckpt " + (dir / "stage2.ckpt").string() + " --scenario full --scenario missing:3" + common);
  REQUIRE(ev.code == 0);
  CHECK(ev.last_line() == "OK eval");
  const std::string report = bmds::read_file((dir / "report.csv").string());
  CHECK(report.rfind("scenario,region,dice_mean,dice_std,hd95_mean,hd95_std,ece,nll,unc_auc,n_cases\n", 0) == 0);
  CHECK(std::count(report.begin(), report.end(), '\n') == 9);
  const Run rp = run("report --in " + dir.string() + " --out " + dir.string());
  CHECK(rp.code == 0);
  CHECK(rp.last_line() == "OK report");

  // a checkpoint from a different data configuration is refused
  const Run mismatch = run("finetune-bayes --ckpt " + (dir / "stage1.ckpt").string() + common + " --set data.noise_std=0.5");
  CHECK(mismatch.code == 2);
  CHECK(mismatch.out.find("--allow-config-mismatch") != std::string::npos);
  CHECK(run("finetune-bayes --allow-config-mismatch --ckpt " + (dir / "stage1.ckpt").string() + common +
            " --set data.noise_std=0.5").code == 0);
}
