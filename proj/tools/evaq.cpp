// Pipeline driver: synthetic worlds in, per-user evacuation predictions out.
//
// Configuration is a flat key=value file overlaid by --set pairs and a few
// dedicated flags; every artifact carries a sidecar with the producing
// config hash. Errors leave as one machine-readable JSON line on stdout
// with a nonzero exit status.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "evaq/error.hpp"
#include "evaq/io.hpp"
#include "evaq/pipeline.hpp"

namespace {

using nlohmann::json;

struct CommonFlags {
  std::string config_file;
  std::vector<std::string> sets;
  bool print_config = false;
};

void add_common(CLI::App* cmd, CommonFlags& common) {
  cmd->add_option("--config", common.config_file, "flat key=value config file");
  cmd->add_option("--set", common.sets, "override one key (KEY=VALUE, repeatable)");
  cmd->add_flag("--print-config", common.print_config,
                "dump the effective config and exit");
}

evaq::cfg::FlatConfig assemble(const CommonFlags& common,
                               const std::vector<std::pair<std::string, std::string>>& extra) {
  evaq::cfg::FlatConfig flat;
  if (!common.config_file.empty())
    flat = evaq::cfg::FlatConfig::parse_file(common.config_file);
  for (const auto& kv : common.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      evaq::fail("usage", "--set expects KEY=VALUE, got '" + kv + "'");
    flat.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const auto& [k, v] : extra) flat.set(k, v);
  return flat;
}

evaq::pipe::PipelineConfig make_config(const evaq::cfg::FlatConfig& flat) {
  auto pc = evaq::pipe::PipelineConfig::from_flat(flat);
  const auto consumed = flat.consumed();
  std::string unknown;
  for (const auto& [key, value] : flat.entries())
    if (!consumed.count(key)) unknown += unknown.empty() ? key : ", " + key;
  if (!unknown.empty()) evaq::fail("config", "unknown config keys: " + unknown);
  return pc;
}

void emit(const json& j) { std::cout << j.dump() << "\n"; }

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"evacuation decision prediction from pre-disaster search queries"};
  app.require_subcommand(1);

  CommonFlags common;
  std::optional<std::uint64_t> seed_flag;
  std::optional<std::string> out_flag;

  // Flags shared by every subcommand. CLI11 wants options registered per
  // subcommand, so each one gets the same set plus its own extras.
  std::optional<std::int64_t> users_flag;
  std::optional<double> theta_hi_flag, theta_lo_flag, target_rate_flag;
  std::optional<int> method_flag;
  std::optional<std::string> pairs_flag, grid_flag, methods_flag;

  auto add_shared = [&](CLI::App* cmd) {
    add_common(cmd, common);
    cmd->add_option("--seed", seed_flag, "root seed; stage seeds derive from it");
    cmd->add_option("--out", out_flag, "artifact directory");
    return cmd;
  };

  auto* c_synth = add_shared(app.add_subcommand("synth", "generate a synthetic world"));
  c_synth->add_option("--users", users_flag, "number of users");
  add_shared(app.add_subcommand("sessionize", "split the query log into sessions"));
  add_shared(app.add_subcommand("stats", "cohort query statistics against ground truth"));
  add_shared(app.add_subcommand("train-ssqe", "train the single-query encoder"));
  add_shared(app.add_subcommand("train-smqe", "train the session encoder"));
  auto* c_sim = add_shared(app.add_subcommand("similarity", "score query pairs with the trained encoder"));
  c_sim->add_option("--pairs", pairs_flag, "pair list TSV (default: <out>/similarity_pairs.tsv)");
  auto* c_label = add_shared(app.add_subcommand("label", "GPS anomaly scores and labels"));
  c_label->add_option("--theta-hi", theta_hi_flag, "evacuated threshold");
  c_label->add_option("--theta-lo", theta_lo_flag, "stayed threshold");
  auto* c_cal = add_shared(app.add_subcommand("calibrate", "threshold matching a target label rate"));
  c_cal->add_option("--target-rate", target_rate_flag, "target label-1 rate");
  auto* c_feat = add_shared(app.add_subcommand("featurize", "feature matrix for one method"));
  c_feat->add_option("--method", method_flag, "method id 1..8");
  auto* c_eval = add_shared(app.add_subcommand("evaluate", "cross-validated evaluation of one method"));
  c_eval->add_option("--method", method_flag, "method id 1..8");
  auto* c_sweep = add_shared(app.add_subcommand("sweep", "re-label and re-evaluate over a threshold grid"));
  c_sweep->add_option("--grid", grid_flag, "comma list of theta-hi values");
  c_sweep->add_option("--methods", methods_flag, "comma list of method ids");
  add_shared(app.add_subcommand("e2e", "full chain on synthetic data"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e); // --help and friends
    emit(json{{"error", {{"kind", "usage"}, {"message", e.what()}}}});
    return 2;
  }

  try {
    std::vector<std::pair<std::string, std::string>> extra;
    if (seed_flag) extra.emplace_back("seed", std::to_string(*seed_flag));
    if (out_flag) extra.emplace_back("out_dir", *out_flag);
    if (users_flag) extra.emplace_back("world.n_users", std::to_string(*users_flag));
    if (theta_hi_flag) extra.emplace_back("label.theta_hi", evaq::io::format_double(*theta_hi_flag));
    if (theta_lo_flag) extra.emplace_back("label.theta_lo", evaq::io::format_double(*theta_lo_flag));
    if (target_rate_flag)
      extra.emplace_back("label.target_rate", evaq::io::format_double(*target_rate_flag));
    if (method_flag) extra.emplace_back("features.method", std::to_string(*method_flag));
    if (grid_flag) extra.emplace_back("sweep.grid", *grid_flag);
    if (methods_flag) extra.emplace_back("sweep.methods", *methods_flag);

    const auto flat = assemble(common, extra);
    const auto pc = make_config(flat);

    if (common.print_config) {
      std::cout << pc.to_flat().dump();
      return 0;
    }

    const std::string stage = app.get_subcommands().front()->get_name();
    const evaq::pipe::Paths paths{pc.out_dir};

    if (stage == "synth") {
      evaq::pipe::run_synth(pc);
      emit(json{{"ok", true}, {"stage", stage}, {"out", pc.out_dir}});
    } else if (stage == "sessionize") {
      const auto s = evaq::pipe::run_sessionize(pc);
      emit(json{{"ok", true},
                {"stage", stage},
                {"records", s.records},
                {"sessions", s.sessions},
                {"pairs", s.pairs}});
    } else if (stage == "stats") {
      evaq::pipe::run_stats(pc);
      emit(json{{"ok", true}, {"stage", stage}, {"file", paths.stats()}});
    } else if (stage == "train-ssqe") {
      evaq::pipe::run_train_ssqe(pc);
      emit(json{{"ok", true}, {"stage", stage}, {"checkpoint", paths.ssqe()}});
    } else if (stage == "train-smqe") {
      evaq::pipe::run_train_smqe(pc);
      emit(json{{"ok", true}, {"stage", stage}, {"checkpoint", paths.smqe()}});
    } else if (stage == "similarity") {
      const std::string pairs_path = pairs_flag.value_or(paths.pairs());
      const auto rep = evaq::pipe::run_similarity(pc, pairs_path);
      emit(json{{"ok", true},
                {"stage", stage},
                {"same_mean", rep.same_mean},
                {"cross_mean", rep.cross_mean},
                {"gap", rep.same_mean - rep.cross_mean},
                {"n_same", rep.n_same},
                {"n_cross", rep.n_cross}});
    } else if (stage == "label") {
      const auto s = evaq::pipe::run_label(pc);
      emit(json{{"ok", true},
                {"stage", stage},
                {"users", s.total_users},
                {"scored", s.scored},
                {"excluded", s.excluded},
                {"evacuated", s.evacuated},
                {"stayed", s.stayed},
                {"uncertain", s.uncertain},
                {"label1_rate", s.label1_rate}});
    } else if (stage == "calibrate") {
      const double threshold = evaq::pipe::run_calibrate(pc);
      emit(json{{"ok", true}, {"stage", stage}, {"threshold", threshold}});
    } else if (stage == "featurize") {
      const auto fm = evaq::pipe::run_featurize(pc, pc.method_id);
      emit(json{{"ok", true},
                {"stage", stage},
                {"method", pc.method_id},
                {"rows", fm.rows.size()},
                {"dim", fm.dim},
                {"file", paths.features(pc.method_id)}});
    } else if (stage == "evaluate") {
      const auto rep = evaq::pipe::run_evaluate(pc, pc.method_id);
      emit(json{{"ok", true},
                {"stage", stage},
                {"method", pc.method_id},
                {"mean_accuracy", rep.mean_accuracy},
                {"mean_auc", rep.mean_auc},
                {"report", paths.report(pc.method_id)}});
    } else if (stage == "sweep") {
      const auto rows = evaq::pipe::run_sweep(pc);
      emit(json{{"ok", true}, {"stage", stage}, {"rows", rows.size()}, {"file", paths.sweep()}});
    } else if (stage == "e2e") {
      evaq::pipe::run_e2e(pc);
      emit(json{{"ok", true},
                {"stage", stage},
                {"table", paths.table()},
                {"sweep", paths.sweep()},
                {"oracle", paths.oracle()}});
    } else {
      evaq::fail("usage", "unknown subcommand " + stage);
    }
  } catch (const evaq::Error& e) {
    emit(json{{"error", {{"kind", e.kind()}, {"message", e.what()}}}});
    return 1;
  } catch (const std::exception& e) {
    emit(json{{"error", {{"kind", "internal"}, {"message", e.what()}}}});
    return 1;
  }
  return 0;
}
