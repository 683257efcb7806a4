// Drives the installed command-line binary end to end on a miniature world.
// The binary path arrives via EVAQ_BIN so the suite tests exactly what the
// build produced.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "doctest.h"
#include "evaq/io.hpp"
#include "helpers.hpp"

using nlohmann::json;

namespace {

std::string bin_path() {
  const char* p = std::getenv("EVAQ_BIN");
  REQUIRE_MESSAGE(p != nullptr, "EVAQ_BIN must point at the CLI binary");
  return p;
}

struct CliResult {
  int exit_code = -1;
  std::string out;

  json parsed() const {
    REQUIRE_MESSAGE(!out.empty(), "expected JSON on stdout");
    return json::parse(out);
  }
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = bin_path() + " " + args + " 2>/dev/null";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof(buf), pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

bool file_exists(const std::string& p) { return std::ifstream(p).good(); }

std::string file_bytes(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// world small enough for seconds-long stages but big enough that labeling
// and stratified 3-fold evaluation stay feasible
std::string write_tiny_config(const TempDir& td) {
  const std::string path = td.file("tiny.cfg");
  std::ofstream out(path);
  out << "world.n_users=100\n"
      << "world.query_mean=8\n"
      << "world.query_max=30\n"
      << "world.gps_mean=9\n"
      << "world.gps_max=40\n"
      << "world.n_districts=6\n"
      << "world.n_intents=3\n"
      << "train_ssqe.iterations=15\n"
      << "train_ssqe.batch=16\n"
      << "train_ssqe.negatives=2\n"
      << "train_ssqe.val_every=10\n"
      << "train_ssqe.val_items=30\n"
      << "train_smqe.iterations=12\n"
      << "train_smqe.batch=8\n"
      << "train_smqe.negatives=2\n"
      << "train_smqe.val_every=10\n"
      << "train_smqe.val_items=20\n"
      << "similarity.pairs_per_class=15\n"
      << "rf.n_trees=10\n"
      << "cv.k=3\n"
      << "sweep.grid=3.5,4\n"
      << "sweep.methods=1,2\n";
  out.close();
  return path;
}

} // namespace

TEST_CASE("print-config shows defaults overlaid with --set") {
  const auto r = run_cli("synth --print-config --set world.n_users=77 --out /tmp/nowhere");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("world.n_users = 77\n") != std::string::npos);
  CHECK(r.out.find("out_dir = /tmp/nowhere\n") != std::string::npos);
  CHECK(r.out.find("rf.n_trees = 100\n") != std::string::npos);
}

TEST_CASE("errors leave as one JSON line with a kind") {
  const auto unknown = run_cli("synth --set bogus.key=1 --out /tmp/x");
  CHECK(unknown.exit_code == 1);
  auto j = unknown.parsed();
  CHECK(j["error"]["kind"] == "config");
  CHECK(j["error"]["message"].get<std::string>().find("bogus.key") != std::string::npos);

    const auto malformed = run_cli("synth --set oops --out /tmp/x");
  CHECK(malformed.exit_code == 1);
  CHECK(malformed.parsed()["error"]["kind"] == "usage");

  const auto badcfg = run_cli("synth --set world.n_users=0 --out /tmp/x");
  CHECK(badcfg.exit_code == 1);
  CHECK(badcfg.parsed()["error"]["kind"] == "config");

  const auto nocmd = run_cli("frobnicate");
  CHECK(nocmd.exit_code == 2);
  CHECK(nocmd.parsed()["error"]["kind"] == "usage");
}

TEST_CASE("missing inputs surface as io errors, not crashes") {
  TempDir td("cli_empty");
  const auto r = run_cli("featurize --method 1 --out " + td.str());
  CHECK(r.exit_code == 1);
  CHECK(r.parsed()["error"]["kind"] == "io");
}

TEST_CASE("the staged chain produces every artifact") {
  TempDir td("cli_chain");
  const std::string cfg = write_tiny_config(td);
  const std::string common = " --config " + cfg + " --seed 3 --out " + td.str();

  const auto synth = run_cli("synth" + common);
  REQUIRE_MESSAGE(synth.exit_code == 0, synth.out);
  CHECK(synth.parsed()["ok"] == true);
  for (const char* f : {"queries.tsv", "gps.tsv", "truth.tsv", "similarity_pairs.tsv"}) {
    CHECK(file_exists(td.file(f)));
    CHECK(file_exists(td.file(std::string(f) + ".meta.json")));
  }

  const auto sess = run_cli("sessionize" + common);
  REQUIRE_MESSAGE(sess.exit_code == 0, sess.out);
  const auto sj = sess.parsed();
  CHECK(sj["records"].get<std::size_t>() > 0);
  CHECK(sj["sessions"].get<std::size_t>() > 0);
  // every query lands in a session, so each session costs one pair
  CHECK(sj["pairs"].get<std::size_t>() ==
        sj["records"].get<std::size_t>() - sj["sessions"].get<std::size_t>());
  CHECK(file_exists(td.file("sessions.tsv")));
  CHECK(file_exists(td.file("char_vocab.tsv")));

  const auto stats = run_cli("stats" + common);
  REQUIRE_MESSAGE(stats.exit_code == 0, stats.out);
  CHECK(file_exists(td.file("cohort_stats.tsv")));

  const auto ssqe = run_cli("train-ssqe" + common);
  REQUIRE_MESSAGE(ssqe.exit_code == 0, ssqe.out);
  CHECK(file_exists(td.file("ssqe.ckpt")));
  CHECK(file_exists(td.file("ssqe_metrics.jsonl")));

  const auto smqe = run_cli("train-smqe" + common);
  REQUIRE_MESSAGE(smqe.exit_code == 0, smqe.out);
  CHECK(file_exists(td.file("smqe.ckpt")));

  const auto sim = run_cli("similarity" + common);
  REQUIRE_MESSAGE(sim.exit_code == 0, sim.out);
  const auto simj = sim.parsed();
  CHECK(simj["n_same"].get<std::size_t>() == 15);
  CHECK(simj["n_cross"].get<std::size_t>() == 15);
  CHECK(simj.contains("gap"));

  const auto label = run_cli("label" + common);
  REQUIRE_MESSAGE(label.exit_code == 0, label.out);
  const auto lj = label.parsed();
  CHECK(lj["users"].get<std::size_t>() == 100);
  CHECK(lj["scored"].get<std::size_t>() > 90);
  CHECK(lj["evacuated"].get<std::size_t>() >= 3);
  for (const char* f : {"theta.tsv", "labels.tsv", "theta_hist.tsv"})
    CHECK(file_exists(td.file(f)));

  const auto cal = run_cli("calibrate --target-rate 0.05" + common);
  REQUIRE_MESSAGE(cal.exit_code == 0, cal.out);
  CHECK(cal.parsed()["threshold"].get<double>() > 0.0);
  CHECK(file_exists(td.file("calibration.json")));

  const auto feat = run_cli("featurize --method 1" + common);
  REQUIRE_MESSAGE(feat.exit_code == 0, feat.out);
  const auto fj = feat.parsed();
  CHECK(fj["rows"].get<std::size_t>() > 90);
  CHECK(fj["dim"].get<std::size_t>() > 0);
  CHECK(file_exists(td.file("features_m1.tsv")));

  const auto eval1 = run_cli("evaluate --method 1" + common);
  REQUIRE_MESSAGE(eval1.exit_code == 0, eval1.out);
  const auto ej = eval1.parsed();
  CHECK(ej["mean_auc"].get<double>() >= 0.0);
  CHECK(ej["mean_auc"].get<double>() <= 1.0);
  CHECK(file_exists(td.file("eval_m1.json")));

  // bit-for-bit repeatable: rerunning a stage rewrites identical bytes
  const std::string first = file_bytes(td.file("eval_m1.json"));
  const auto eval_again = run_cli("evaluate --method 1" + common);
  REQUIRE(eval_again.exit_code == 0);
  CHECK(file_bytes(td.file("eval_m1.json")) == first);

  const auto sweep = run_cli("sweep" + common);
  REQUIRE_MESSAGE(sweep.exit_code == 0, sweep.out);
  CHECK(sweep.parsed()["rows"].get<std::size_t>() == 4); // 2 grid points x 2 methods
  CHECK(file_exists(td.file("threshold_sweep.tsv")));

  // an encoder method exercises checkpoint loading downstream
  const auto feat2 = run_cli("featurize --method 2" + common);
  REQUIRE_MESSAGE(feat2.exit_code == 0, feat2.out);
  CHECK(feat2.parsed()["dim"].get<std::size_t>() == 32);
}

TEST_CASE("single-shot e2e emits the full report set") {
  TempDir td("cli_e2e");
  const std::string cfg = write_tiny_config(td);
  const auto r = run_cli("e2e --config " + cfg + " --seed 4 --out " + td.str());
  REQUIRE_MESSAGE(r.exit_code == 0, r.out);
  const auto j = r.parsed();
  CHECK(j["ok"] == true);

  for (int m = 1; m <= 8; ++m) CHECK(file_exists(td.file("eval_m" + std::to_string(m) + ".json")));
  CHECK(file_exists(td.file("method_table.tsv")));
  CHECK(file_exists(td.file("threshold_sweep.tsv")));
  CHECK(file_exists(td.file("oracle.json")));

  const auto table = file_bytes(td.file("method_table.tsv"));
  CHECK(std::count(table.begin(), table.end(), '\n') == 9); // header + 8 methods

  const auto oracle = json::parse(file_bytes(td.file("oracle.json")));
  CHECK(oracle["n_users"].get<std::size_t>() == 100);
  CHECK(oracle["theta_auc"].get<double>() > 0.9);
  CHECK(oracle["labels"]["n"].get<std::size_t>() > 0);

  const auto report = json::parse(file_bytes(td.file("eval_m8.json")));
  CHECK(report["method_id"] == 8);
  CHECK(report["fold_auc"].size() == 3);
  CHECK(report["fold_model_hashes"].size() == 3);
}
