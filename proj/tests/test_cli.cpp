#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "upp/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

fs::path workdir(const std::string& name) {
  const fs::path dir = fs::current_path() / "cli_work" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Run run(const fs::path& dir, const std::string& args) {
  const fs::path log = dir / "stdout.txt";
  const std::string cmd = "cd '" + dir.string() + "' && '" + std::string(UPP_CLI_PATH) + "' " + args + " > '" +
                          log.string() + "' 2> '" + (dir / "stderr.txt").string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = upp::read_text_file(log);
  return r;
}

std::string slurp(const fs::path& p) { return upp::read_text_file(p); }

}  // namespace

TEST_CASE("synth reports the full-scale inventory", "[cli]") {
  const auto dir = workdir("synth24");
  const auto r = run(dir, "synth --modes 24 --device dev.json");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("276 MZIs, 552 couplers, 576 heaters") != std::string::npos);
  const auto j = upp::read_json_file(dir / "dev.json");
  CHECK(j.at("public").at("heaters") == 576);
}

TEST_CASE("exit codes", "[cli]") {
  const auto dir = workdir("codes");
  CHECK(run(dir, "synth --modes 1").code == 2);
  CHECK(run(dir, "synth --no-such-flag").code == 2);
  CHECK(run(dir, "").code == 2);
  CHECK(run(dir, "characterize --device missing.json").code == 4);
  CHECK(run(dir, "--config missing.json synth").code == 4);
  upp::write_text_file(dir / "typo.json", "{\"n_mode\": 4}");
  CHECK(run(dir, "--config typo.json synth").code == 2);
  upp::write_text_file(dir / "broken.json", "{");
  CHECK(run(dir, "--config broken.json synth").code == 2);
  CHECK(run(dir, "synth --modes 4 --noise -1").code == 2);
}

TEST_CASE("repeated runs are byte identical", "[cli][determinism]") {
  std::string first_device, first_records;
  for (int pass = 0; pass < 2; ++pass) {
    const auto dir = workdir("repeat" + std::to_string(pass));
    REQUIRE(run(dir, "synth --modes 5 --seed 17 --device d.json").code == 0);
    REQUIRE(run(dir, "trainset --device d.json --seed 17 --records 40 --measurements m.csv").code == 0);
    if (pass == 0) {
      first_device = slurp(dir / "d.json");
      first_records = slurp(dir / "m.csv");
    } else {
      CHECK(slurp(dir / "d.json") == first_device);
      CHECK(slurp(dir / "m.csv") == first_records);
    }
  }
  const auto dir = workdir("repeat_other");
  REQUIRE(run(dir, "synth --modes 5 --seed 18 --device d.json").code == 0);
  CHECK(slurp(dir / "d.json") != first_device);
}

TEST_CASE("calibrate, program and evaluate", "[cli][pipeline]") {
  const auto dir = workdir("pipeline");
  REQUIRE(run(dir, "synth --modes 4 --seed 3 --device d.json").code == 0);
  const auto cal = run(dir, "calibrate --device d.json --model m.json --seed 3 --records 600 --out run");
  REQUIRE(cal.code == 0);
  CHECK(cal.out.find("model: 16 offsets, 12 ratios, 64 crosstalk terms") != std::string::npos);
  const auto model = upp::read_json_file(dir / "m.json");
  CHECK(model.at("layout_hash") == upp::read_json_file(dir / "d.json").at("layout_hash"));
  CHECK(slurp(dir / "run_fit_log.csv").rfind("iteration,loss", 0) == 0);

  const auto ev = run(dir, "evaluate --device d.json --model m.json --count 20 --out eval");
  REQUIRE(ev.code == 0);
  const std::string csv = slurp(dir / "eval_campaign.csv");
  CHECK(csv.rfind("target_id,fidelity,total_power_mw,status\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 21);
  const auto summary = upp::read_json_file(dir / "eval_summary.json");
  CHECK(summary.at("count") == 20);
  CHECK(summary.at("failures") == 0);
  CHECK(summary.at("fidelity").at("mean").get<double>() >= 0.99);
  CHECK(summary.at("power_mw").at("reference") == 10000.0);

  REQUIRE(run(dir, "program --model m.json --targets permutation --count 3 --out prog").code == 0);
  const std::string prog = slurp(dir / "prog_program.csv");
  CHECK(std::count(prog.begin(), prog.end(), '\n') == 4);

  upp::write_json_file(dir / "empty.json", upp::targets_to_json({}));
  CHECK(run(dir, "evaluate --device d.json --model m.json --targets file --targets-file empty.json").code == 2);
  upp::write_json_file(dir / "one.json", upp::targets_to_json({upp::haar_random_unitary(4, 9)}));
  REQUIRE(run(dir, "evaluate --device d.json --model m.json --targets file --targets-file one.json --out one").code ==
          0);
  CHECK(upp::read_json_file(dir / "one_summary.json").at("count") == 1);

  REQUIRE(run(dir, "synth --modes 5 --device other.json").code == 0);
  CHECK(run(dir, "evaluate --device other.json --model m.json").code == 2);
}

TEST_CASE("calibrate from recorded measurements", "[cli][pipeline]") {
  const auto dir = workdir("offline");
  REQUIRE(run(dir, "synth --modes 3 --seed 5 --device d.json").code == 0);
  REQUIRE(run(dir, "trainset --device d.json --seed 5 --records 300 --measurements rec.csv").code == 0);
  const auto cal = run(dir, "calibrate --device d.json --model m.json --measurements rec.csv --out fit");
  REQUIRE(cal.code == 0);
  CHECK(fs::exists(dir / "m.json"));
  upp::write_text_file(dir / "short.csv", "seq,P_0\n");
  CHECK(run(dir, "calibrate --device d.json --model m2.json --measurements short.csv").code == 2);
}

TEST_CASE("characterization subcommands write their reports", "[cli]") {
  const auto dir = workdir("characterize");
  REQUIRE(run(dir, "synth --modes 4 --seed 6 --device d.json").code == 0);
  REQUIRE(run(dir, "characterize --device d.json --out c").code == 0);
  CHECK(fs::exists(dir / "c_insertion_loss.csv"));
  CHECK(fs::exists(dir / "c_static.csv"));
  REQUIRE(run(dir, "fringe --device d.json --heater 5 --out f").code == 0);
  CHECK(upp::read_json_file(dir / "f_fringe.json").at("heater") == 5);
  REQUIRE(run(dir, "fringe --device d.json --out all").code == 0);
  const std::string all = slurp(dir / "all_fringes.csv");
  CHECK(std::count(all.begin(), all.end(), '\n') == 17);
  CHECK(run(dir, "fringe --device d.json --heater 16").code == 2);
  REQUIRE(run(dir, "route --device d.json --input 0 --output 3 --out r").code == 0);
  CHECK(upp::read_json_file(dir / "r_route.json").at("output_port") == 3);
}

TEST_CASE("config files and flag overrides", "[cli][config]") {
  const auto dir = workdir("config");
  REQUIRE(run(dir, "--dump-config eff.json synth --modes 3 --seed 8 --device d.json").code == 0);
  const auto eff = upp::read_json_file(dir / "eff.json");
  CHECK(eff.at("n_modes") == 3);
  CHECK(eff.at("seed") == 8);
  REQUIRE(run(dir, "--config eff.json synth --device again.json").code == 0);
  CHECK(slurp(dir / "again.json") == slurp(dir / "d.json"));
  REQUIRE(run(dir, "--config eff.json synth --modes 4 --device four.json").code == 0);
  CHECK(upp::read_json_file(dir / "four.json").at("public").at("n_modes") == 4);
}
