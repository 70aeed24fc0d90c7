// headlab command-line interface. Exit status: 0 success, 2 invalid
// configuration or usage, 3 numerical abort, 1 any other failure.

#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "headlab/error.hpp"
#include "headlab/experiment.hpp"
#include "headlab/format.hpp"

namespace fs = std::filesystem;
using namespace headlab;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool needs_config = true) {
  auto* opt = cmd->add_option("--config,-c", f.config, "Experiment config (JSON)");
  if (needs_config) opt->required();
  cmd->add_option("--seed", f.seed, "Override schedule.seed");
  cmd->add_option("--out,-o", f.out, "Output directory (overrides $HEADLAB_OUT and the config)");
}

ExperimentConfig load_config(const CommonFlags& f) {
  auto c = load_experiment_config(f.config);
  if (f.seed) c.schedule.seed = *f.seed;
  c.validate();
  return c;
}

fs::path out_dir(const CommonFlags& f, const ExperimentConfig* c) {
  return resolve_output_dir(f.out ? std::optional<fs::path>(*f.out) : std::nullopt, c);
}

void print_metrics(const Json& report) {
  if (!report.contains("metrics")) return;
  for (const auto& m : report["metrics"])
    std::cout << m["task"].get<std::string>() << ' ' << m["metric"].get<std::string>() << ' '
              << fixed2(100.0 * m["value"].get<double>()) << '\n';
}

void print_dissociation(const Json& d) {
  std::cout << "D_i =";
  for (const auto& t : d["tasks"]) {
    const auto& v = d["d_i"][t.get<std::string>()];
    std::cout << ' ' << t.get<std::string>() << ' ' << (v.is_null() ? std::string("undefined") : fixed2(v.get<double>()));
  }
  std::cout << '\n';
  if (d.contains("dual"))
    std::cout << "D_A = " << fixed2(d["dual"]["d_a"].get<double>()) << "  D_B = " << fixed2(d["dual"]["d_b"].get<double>())
              << "  D = " << fixed2(d["dual"]["d"].get<double>()) << '\n';
  else if (!d["d"].is_null())
    std::cout << "D = " << fixed2(d["d"].get<double>()) << '\n';
  std::cout << "label: " << d["label"].get<std::string>() << '\n';
  for (const auto& f : d["flags"]) std::cout << "note: " << f.get<std::string>() << '\n';
}

std::vector<NamedCheckpoint> parse_models(const std::vector<std::string>& specs) {
  std::vector<NamedCheckpoint> out;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == s.size())
      throw ConfigError("--model expects TASK=CHECKPOINT_DIR, got '" + s + "'");
    out.push_back({s.substr(0, eq), s.substr(eq + 1)});
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"headlab: attention-head specialization experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "headlab 0.1.0");

  CommonFlags train_f, iat_f, imp_f, prune_f, diss_f, transfer_f, report_f;
  std::optional<double> delta, alpha, iat_delta, iat_alpha;
  std::optional<std::string> resume, iat_resume;
  std::optional<std::size_t> max_steps, iat_max_steps;

  auto* train = app.add_subcommand("train", "Multi-task training (IAT when schedule.iat_fraction > 0)");
  add_common(train, train_f);
  train->add_option("--delta", delta, "Override schedule.iat_fraction");
  train->add_option("--alpha", alpha, "Override schedule.iat_alpha");
  train->add_option("--resume", resume, "Continue from a checkpoint directory");
  train->add_option("--max-steps", max_steps, "Stop after this many steps (checkpoint stays resumable)");

  auto* iat = app.add_subcommand("iat", "Training with important-head training; delta defaults to 0.1 when unset");
  add_common(iat, iat_f);
  iat->add_option("--delta", iat_delta, "IAT share of the final steps");
  iat->add_option("--alpha", iat_alpha, "Share of heads each task may update");
  iat->add_option("--resume", iat_resume, "Continue from a checkpoint directory");
  iat->add_option("--max-steps", iat_max_steps, "Stop after this many steps");

  std::string imp_ckpt, prune_ckpt, diss_ckpt;
  std::optional<double> prune_alpha;
  std::optional<std::string> prune_select;
  auto* importance = app.add_subcommand("importance", "Head importance and top-alpha head sets of a checkpoint");
  add_common(importance, imp_f);
  importance->add_option("--checkpoint", imp_ckpt, "Checkpoint directory")->required();

  auto* prune = app.add_subcommand("prune-eval", "Evaluate every task with every task's important heads pruned");
  add_common(prune, prune_f);
  prune->add_option("--checkpoint", prune_ckpt, "Checkpoint directory")->required();
  prune->add_option("--alpha", prune_alpha, "Override analysis.alpha");
  prune->add_option("--select", prune_select, "top, bottom or random");

  std::string diss_from;
  double diss_alpha = 0.3;
  Thresholds thresholds;
  auto* dissociate = app.add_subcommand("dissociate", "Dissociation scores from a prune table or a checkpoint");
  add_common(dissociate, diss_f, false);
  auto* from_opt = dissociate->add_option("--from", diss_from, "Prune-table CSV (rows: pruned_for_task, base)");
  dissociate->add_option("--checkpoint", diss_ckpt, "Checkpoint directory (with --config)")->excludes(from_opt);
  dissociate->add_option("--alpha", diss_alpha, "Pruned share recorded with a CSV table")->capture_default_str();
  dissociate->add_option("--distinct", thresholds.distinct, "Threshold for a distinct double dissociation")->capture_default_str();
  dissociate->add_option("--mild", thresholds.mild, "Threshold for mild specialization")->capture_default_str();

  auto* transfer = app.add_subcommand("transfer", "Pairwise few-shot transfer matrix between the configured tasks");
  add_common(transfer, transfer_f);

  std::vector<std::string> sim_models, sim_metrics{"dse", "cra"};
  std::optional<std::string> sim_probes, sim_transfer, sim_out, sim_config;
  std::optional<std::size_t> sim_layer, sim_count;
  std::string sim_pooling = "mean", sim_statistic = "spearman";
  std::size_t sim_max_len = 32;
  auto* similarity = app.add_subcommand("similarity", "DSE / CRA between task models, AHP from a transfer matrix");
  similarity->add_option("--model", sim_models, "TASK=CHECKPOINT_DIR, one per task");
  similarity->add_option("--metric", sim_metrics, "dse, cra and/or ahp")->capture_default_str();
  similarity->add_option("--probes", sim_probes, "Probe sentences, one per line");
  similarity->add_option("--probe-count", sim_count, "Probe sentences to use (default 1000)");
  similarity->add_option("--transfer", sim_transfer, "transfer.csv for AHP");
  similarity->add_option("--layer", sim_layer, "Representation layer (default: final)");
  similarity->add_option("--pooling", sim_pooling, "mean or first")->capture_default_str();
  similarity->add_option("--statistic", sim_statistic, "RDM comparison: spearman or pearson")->capture_default_str();
  similarity->add_option("--max-len", sim_max_len, "Token budget per probe")->capture_default_str();
  similarity->add_option("--config,-c", sim_config, "Take probe file, count, layer and statistic from a config");
  similarity->add_option("--out,-o", sim_out, "Output directory");

  std::string corr_sim, corr_diss;
  std::optional<std::string> corr_out;
  auto* correlate_cmd = app.add_subcommand("correlate", "Similarity vs dissociation over task pairs");
  correlate_cmd->add_option("--similarity", corr_sim, "Similarity matrix CSV")->required();
  correlate_cmd->add_option("--dissociation", corr_diss, "CSV task_a,task_b,value")->required();
  correlate_cmd->add_option("--out,-o", corr_out, "Output directory");

  auto* report = app.add_subcommand("report", "Train, score, prune and dissociate in one run");
  add_common(report, report_f);

  std::size_t check_seeds = 5;
  auto* selfcheck = app.add_subcommand("selfcheck", "Gradient, gate and persistence invariants");
  selfcheck->add_option("--seeds", check_seeds, "Random models per gradient check")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed() || iat->parsed()) {
      const bool is_iat = iat->parsed();
      const auto& f = is_iat ? iat_f : train_f;
      auto c = load_config(f);
      const auto& d = is_iat ? iat_delta : delta;
      const auto& a = is_iat ? iat_alpha : alpha;
      if (d) c.schedule.iat_fraction = *d;
      if (a) c.schedule.iat_alpha = *a;
      if (is_iat && c.schedule.iat_fraction == 0.0) c.schedule.iat_fraction = 0.1;
      if (is_iat && !(c.schedule.iat_fraction > 0.0)) throw ConfigError("iat: --delta must be > 0");
      c.validate();
      TrainRunOptions opts;
      const auto& r = is_iat ? iat_resume : resume;
      const auto& m = is_iat ? iat_max_steps : max_steps;
      if (r) opts.resume = *r;
      if (m) opts.max_steps = *m;
      const auto out = out_dir(f, &c);
      const auto outcome = run_train(c, out, opts);
      print_metrics(outcome.report);
      std::cout << "params sha256 " << outcome.params_digest << '\n' << "wrote " << out.string() << '\n';
    } else if (importance->parsed()) {
      const auto c = load_config(imp_f);
      const auto out = out_dir(imp_f, &c);
      const auto r = run_prune_eval(c, imp_ckpt, out, true);
      for (const auto& s : r["head_sets"]) {
        std::cout << s["task"].get<std::string>() << ':';
        for (const auto& h : s["members"]) std::cout << " L" << h[0] << "H" << h[1];
        std::cout << '\n';
      }
      std::cout << "wrote " << out.string() << '\n';
    } else if (prune->parsed()) {
      auto c = load_config(prune_f);
      if (prune_alpha) c.analysis.alpha = *prune_alpha;
      if (prune_select) c.analysis.select = select_mode_from_string(*prune_select);
      c.validate();
      const auto out = out_dir(prune_f, &c);
      const auto r = run_prune_eval(c, prune_ckpt, out);
      print_dissociation(r["dissociation"]);
      std::cout << "wrote " << out.string() << '\n';
    } else if (dissociate->parsed()) {
      Json r;
      fs::path out;
      if (!diss_from.empty()) {
        if (!(diss_alpha > 0.0 && diss_alpha <= 1.0)) throw ConfigError("--alpha must lie in (0, 1]");
        out = out_dir(diss_f, nullptr);
        r = run_dissociate_csv(diss_from, diss_alpha, thresholds, out);
      } else {
        if (diss_ckpt.empty() || diss_f.config.empty())
          throw ConfigError("dissociate needs --from TABLE.csv, or --config with --checkpoint");
        const auto c = load_config(diss_f);
        out = out_dir(diss_f, &c);
        r = run_prune_eval(c, diss_ckpt, out);
      }
      print_dissociation(r["dissociation"]);
      std::cout << "wrote " << out.string() << '\n';
    } else if (transfer->parsed()) {
      const auto c = load_config(transfer_f);
      const auto out = out_dir(transfer_f, &c);
      const auto r = run_transfer(c, out);
      std::cout << "wrote " << (out / "transfer.csv").string() << '\n';
    } else if (similarity->parsed()) {
      SimilarityRequest req;
      req.models = parse_models(sim_models);
      req.metrics = sim_metrics;
      req.pooling = pooling_from_string(sim_pooling);
      req.statistic = rdm_statistic_from_string(sim_statistic);
      req.max_len = sim_max_len;
      req.layer = sim_layer;
      std::optional<ExperimentConfig> c;
      std::optional<fs::path> probe_file = sim_probes ? std::optional<fs::path>(*sim_probes) : std::nullopt;
      std::size_t count = 1000;
      if (sim_config) {
        c = load_experiment_config(*sim_config);
        const auto& a = c->analysis;
        if (!probe_file) probe_file = a.probe_file;
        count = a.probe_count;
        if (!req.layer) req.layer = a.layer;
        req.statistic = a.statistic;
        req.pooling = a.representation_pooling;
        req.max_len = c->max_len;
      }
      if (sim_count) count = *sim_count;
      if (sim_transfer) req.transfer_csv = *sim_transfer;
      const bool needs_probes =
          std::ranges::any_of(req.metrics, [](const auto& m) { return m == "dse" || m == "cra"; });
      if (needs_probes) {
        if (!probe_file) throw ConfigError("--probes is required for DSE and CRA");
        req.probes = read_probes(*probe_file, count, &std::cerr);
      }
      const auto out = resolve_output_dir(sim_out ? std::optional<fs::path>(*sim_out) : std::nullopt, c ? &*c : nullptr);
      const auto r = run_similarity(req, out);
      if (r.contains("similarity"))
        for (const auto& m : r["similarity"]) {
          std::cout << m["metric"].get<std::string>() << '\n';
          const auto& tasks = m["tasks"];
          for (std::size_t i = 0; i < tasks.size(); ++i) {
            std::cout << "  " << tasks[i].get<std::string>();
            for (const auto& v : m["values"][i]) std::cout << ' ' << (v.is_null() ? "nan" : sig9(v.get<double>()));
            std::cout << '\n';
          }
          for (const auto& fl : m["flags"]) std::cout << "  note: " << fl.get<std::string>() << '\n';
        }
      std::cout << "wrote " << out.string() << '\n';
    } else if (correlate_cmd->parsed()) {
      const auto out = resolve_output_dir(corr_out ? std::optional<fs::path>(*corr_out) : std::nullopt, nullptr);
      const auto r = run_correlate(corr_sim, corr_diss, out);
      const auto& c = r["correlation"];
      std::cout << "pearson " << (c["pearson"].is_null() ? "undefined" : sig9(c["pearson"].get<double>()))
                << "  spearman " << (c["spearman"].is_null() ? "undefined" : sig9(c["spearman"].get<double>()))
                << "  points " << c["points"].size() << '\n';
      for (const auto& fl : c["flags"]) std::cout << "note: " << fl.get<std::string>() << '\n';
    } else if (report->parsed()) {
      const auto c = load_config(report_f);
      const auto out = out_dir(report_f, &c);
      const auto r = run_report(c, out);
      print_metrics(r);
      print_dissociation(r["dissociation"]);
      std::cout << "wrote " << (out / "report.json").string() << '\n';
    } else if (selfcheck->parsed()) {
      return run_selfcheck(std::cout, check_seeds) ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
