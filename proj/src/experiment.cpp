#include "headlab/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "headlab/checkpoint.hpp"
#include "headlab/error.hpp"
#include "headlab/format.hpp"

namespace headlab {

namespace fs = std::filesystem;

namespace {

// Seed streams below the trainer's own (1..3, 100+).
constexpr std::uint64_t kModelInitStream = 20;
constexpr std::uint64_t kHeadInitStream = 30;
constexpr std::uint64_t kSplitStream = 40;
constexpr std::uint64_t kSynthStream = 50;
constexpr std::uint64_t kSelectStream = 60;
constexpr std::uint64_t kTransferStream = 70;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::ofstream open_out(const fs::path& file, std::ios::openmode mode = std::ios::trunc) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::out | mode);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  return out;
}

Json report_header(const std::string& command, const ExperimentConfig* config) {
  Json r{{"schema_version", kReportVersion}, {"command", command}};
  if (config) {
    r["config"] = to_json(*config);
    r["seeds"] = {{"run", config->schedule.seed},
                  {"selection", config->analysis.select_seed},
                  {"transfer", config->analysis.transfer.seed}};
  }
  return r;
}

std::vector<double> metric_percent(const std::vector<double>& v) {
  std::vector<double> out;
  for (double x : v) out.push_back(100.0 * x);
  return out;
}

Json metrics_json(const PreparedExperiment& p, const std::vector<double>& values) {
  Json m = Json::array();
  for (std::size_t i = 0; i < values.size(); ++i)
    m.push_back({{"task", p.config.tasks[i].spec.name},
                 {"metric", to_string(p.config.tasks[i].spec.metric)},
                 {"value", values[i]}});
  return m;
}

void write_metrics_csv(const fs::path& file, const PreparedExperiment& p, const std::vector<double>& values) {
  auto out = open_out(file);
  out << "task,metric,percent\n";
  for (std::size_t i = 0; i < values.size(); ++i)
    out << p.config.tasks[i].spec.name << ',' << to_string(p.config.tasks[i].spec.metric) << ','
        << fixed2(100.0 * values[i]) << '\n';
}

Json head_set_json(const HeadSet& s) {
  Json members = Json::array();
  for (auto h : s.members) members.push_back({h.layer, h.head});
  return {{"task", s.task}, {"mode", to_string(s.mode)}, {"alpha", s.alpha}, {"seed", s.seed}, {"members", members}};
}

Json importance_json(const ImportanceMatrix& m) {
  Json rows = Json::array();
  for (const auto& r : m.rows)
    rows.push_back({{"task", r.task}, {"scores", r.scores}, {"n_samples", r.n_samples}, {"n_batches", r.n_batches}});
  return {{"n_layers", m.n_layers}, {"n_heads", m.n_heads}, {"rows", rows}};
}

struct TrainSection {
  Json report;
  std::string digest;
};

TrainSection train_into(const ExperimentConfig& config, const fs::path& out, const TrainRunOptions& options) {
  const auto t0 = Clock::now();
  std::optional<LoadedCheckpoint> resumed;
  if (options.resume) resumed = load_checkpoint(*options.resume);
  const auto p = prepare_experiment(
      config, resumed ? std::optional<Vocabulary>(Vocabulary::from_tokens(resumed->extras.vocab)) : std::nullopt);
  Model model = resumed ? std::move(resumed->model) : build_model(p);
  check_model_tasks(model, config);

  MultitaskTrainer trainer(model, train_tasks(p), config.schedule);
  if (resumed) trainer.restore(resumed->extras);

  fs::create_directories(out);
  {
    auto log = open_out(out / "train.log.jsonl", resumed ? std::ios::app : std::ios::trunc);
    trainer.run(options.max_steps, &log);
  }
  CheckpointExtras base;
  base.vocab = p.vocab.tokens();
  trainer.save(out / "checkpoint", base);
  const std::string digest = file_digest(out / "checkpoint" / "params.bin");

  Json r{{"training",
          {{"steps_per_epoch", trainer.steps_per_epoch()},
           {"total_steps", trainer.total_steps()},
           {"completed_steps", trainer.step()},
           {"iat_start_step", trainer.iat_start_step()},
           {"finished", trainer.finished()},
           {"vocab_size", p.vocab.size()},
           {"log", "train.log.jsonl"}}},
         {"checkpoint", {{"dir", "checkpoint"}, {"params_sha256", digest}}}};
  if (trainer.finished()) {
    const auto values = evaluate_all(model, p, GateVector(model.config().n_layers, model.config().n_heads));
    r["metrics"] = metrics_json(p, values);
    write_metrics_csv(out / "metrics.csv", p, values);
  }
  if (const auto& masks = trainer.masks()) {
    Json sets = Json::array();
    for (const auto& s : masks->sets) sets.push_back(head_set_json(s));
    r["iat"] = {{"start_step", masks->start_step}, {"sets", sets}, {"masks", "iat_masks.csv"}};
    auto csv = open_out(out / "iat_masks.csv");
    write_mask_csv(csv, *masks, model.config().n_layers, model.config().n_heads);
  }
  r["timing"] = {{"train_seconds", seconds_since(t0)}};
  return {r, digest};
}

void write_head_sets_csv(const fs::path& file, const std::vector<HeadSet>& sets) {
  auto out = open_out(file);
  out << "task,mode,alpha,rank,layer,head\n";
  for (const auto& s : sets)
    for (std::size_t k = 0; k < s.members.size(); ++k)
      out << s.task << ',' << to_string(s.mode) << ',' << sig9(s.alpha) << ',' << k + 1 << ','
          << s.members[k].layer << ',' << s.members[k].head << '\n';
}

void write_overlap_csv(const fs::path& file, const DissociationReport& r) {
  auto out = open_out(file);
  out << "overlap";
  for (const auto& t : r.tasks) out << ',' << t;
  out << '\n';
  for (std::size_t i = 0; i < r.tasks.size(); ++i) {
    out << r.tasks[i];
    for (double v : r.overlap[i]) out << ',' << fixed2(v);
    out << '\n';
  }
}

void write_layer_csv(const fs::path& file, const DissociationReport& r) {
  auto out = open_out(file);
  out << "task";
  const std::size_t layers = r.layers->stddev.size();
  for (std::size_t l = 0; l < layers; ++l) out << ",layer_" << l;
  out << '\n';
  for (std::size_t i = 0; i < r.tasks.size(); ++i) {
    out << r.tasks[i];
    for (auto c : r.layers->counts[i]) out << ',' << c;
    out << '\n';
  }
  out << "stddev";
  for (double s : r.layers->stddev) out << ',' << sig9(s);
  out << '\n';
}

Json iap_into(const ExperimentConfig& config, const fs::path& checkpoint, const fs::path& out, bool importance_only) {
  const auto t0 = Clock::now();
  auto loaded = load_checkpoint(checkpoint);
  if (loaded.extras.vocab.empty()) throw CheckpointError(checkpoint.string() + " stores no vocabulary");
  const auto p = prepare_experiment(config, Vocabulary::from_tokens(loaded.extras.vocab));
  check_model_tasks(loaded.model, config);
  const auto iap = run_iap(loaded.model, p);

  fs::create_directories(out);
  {
    auto csv = open_out(out / "importance.csv");
    write_importance_csv(csv, iap.importance);
  }
  write_head_sets_csv(out / "head_sets.csv", iap.sets);
  Json sets = Json::array();
  for (const auto& s : iap.sets) sets.push_back(head_set_json(s));
  Json r{{"importance", importance_json(iap.importance)}, {"head_sets", sets}};
  r["overlap"] = iap.dissociation.overlap;
  r["layer_distribution"] = {{"counts", iap.dissociation.layers->counts},
                             {"stddev", iap.dissociation.layers->stddev}};
  write_overlap_csv(out / "overlap.csv", iap.dissociation);
  write_layer_csv(out / "layer_distribution.csv", iap.dissociation);
  if (!importance_only) {
    r["dissociation"] = to_json(iap.dissociation);
    auto csv = open_out(out / "prune_table.csv");
    write_table_csv(csv, iap.dissociation);
  }
  r["checkpoint"] = {{"dir", checkpoint.string()}, {"params_sha256", file_digest(checkpoint / "params.bin")}};
  r["timing"] = {{"analysis_seconds", seconds_since(t0)}};
  return r;
}

void merge_timing(Json& into, const Json& from) {
  for (const auto& [k, v] : from.items()) {
    if (k == "timing") {
      for (const auto& [tk, tv] : v.items()) into["timing"][tk] = tv;
    } else {
      into[k] = v;
    }
  }
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

double parse_cell(const std::string& s, const std::string& where) {
  if (s == "nan") return std::nan("");
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(where + ": '" + s + "' is not a number");
  }
}

}  // namespace

PreparedExperiment prepare_experiment(const ExperimentConfig& config, const std::optional<Vocabulary>& vocab) {
  config.validate();
  PreparedExperiment p;
  p.config = config;
  const std::uint64_t seed = config.schedule.seed;
  for (std::size_t i = 0; i < config.tasks.size(); ++i) {
    const auto& t = config.tasks[i];
    const auto split_seed = Rng::derive(seed, kSplitStream + i);
    if (t.source.type == TaskSource::Type::Synth) {
      auto synth = synth_task(t.source.synth_kind, t.source.size,
                              t.source.seed.value_or(Rng::derive(seed, kSynthStream + i)), t.spec.n_class,
                              t.spec.name);
      p.data.push_back(split_dataset(t.spec, std::move(synth.examples), split_seed, 0.9));
    } else {
      p.data.push_back(load_tsv(t.source.train_path, t.spec, split_seed, t.source.train_fraction, t.source.dev_path));
    }
    p.data.back().spec = t.spec;
  }
  if (vocab) {
    p.vocab = *vocab;
  } else {
    std::vector<std::string> texts;
    for (const auto& d : p.data) {
      auto more = example_texts(d.train);
      texts.insert(texts.end(), more.begin(), more.end());
    }
    p.vocab = Vocabulary::build(texts);
  }
  if (config.vocab_size_given && config.model.vocab_size < p.vocab.size()) {
    throw ConfigError("model.vocab_size " + std::to_string(config.model.vocab_size) + " is below the vocabulary size " +
                      std::to_string(p.vocab.size()));
  }
  for (const auto& d : p.data) {
    p.train.push_back(encode_examples(d.train, p.vocab, config.max_len));
    p.dev.push_back(encode_examples(d.dev, p.vocab, config.max_len));
  }
  return p;
}

Model build_model(const PreparedExperiment& p) {
  ModelConfig mc = p.config.model;
  if (!p.config.vocab_size_given) mc.vocab_size = p.vocab.size();
  const std::uint64_t seed = p.config.schedule.seed;
  Model m(mc, Rng::derive(seed, kModelInitStream));
  for (std::size_t i = 0; i < p.config.tasks.size(); ++i) {
    const auto& t = p.config.tasks[i];
    m.add_task(t.spec.name, t.spec.kind, t.spec.n_class, t.pooling, Rng::derive(seed, kHeadInitStream + i));
  }
  return m;
}

std::vector<TrainTask> train_tasks(const PreparedExperiment& p) {
  std::vector<TrainTask> out;
  for (std::size_t i = 0; i < p.train.size(); ++i) out.push_back({i, p.train[i]});
  return out;
}

void check_model_tasks(const Model& model, const ExperimentConfig& config) {
  if (model.task_count() != config.tasks.size())
    throw ConfigError("checkpoint has " + std::to_string(model.task_count()) + " tasks, config " +
                      std::to_string(config.tasks.size()));
  for (std::size_t i = 0; i < config.tasks.size(); ++i) {
    const auto& h = model.task(i);
    const auto& s = config.tasks[i].spec;
    if (h.name != s.name || h.kind != s.kind || h.output_width() != (s.kind == TaskKind::Regression ? 1 : s.n_class))
      throw ConfigError("tasks[" + std::to_string(i) + "]: checkpoint task '" + h.name + "' does not match '" + s.name +
                        "'");
  }
}

std::vector<double> evaluate_all(const Model& model, const PreparedExperiment& p, const GateVector& gates) {
  std::vector<double> out;
  for (std::size_t i = 0; i < p.dev.size(); ++i)
    out.push_back(evaluate_task(model, i, p.dev[i], p.config.tasks[i].spec.metric, gates));
  return out;
}

IapResult run_iap(const Model& model, const PreparedExperiment& p) {
  const auto& cfg = model.config();
  const auto& a = p.config.analysis;
  IapResult r;
  r.importance.n_layers = cfg.n_layers;
  r.importance.n_heads = cfg.n_heads;
  const std::size_t n = p.config.tasks.size();
  for (std::size_t i = 0; i < n; ++i) {
    auto row = head_importance(model, i, p.train[i], a.importance);
    row.task = p.config.tasks[i].spec.name;
    r.sets.push_back(select_heads(row.scores, cfg.n_layers, cfg.n_heads, a.alpha, a.select,
                                  Rng::derive(a.select_seed, kSelectStream + i), row.task));
    r.importance.rows.push_back(std::move(row));
  }
  PerformanceTable table;
  for (const auto& t : p.config.tasks) table.tasks.push_back(t.spec.name);
  table.base = metric_percent(evaluate_all(model, p, GateVector(cfg.n_layers, cfg.n_heads)));
  for (const auto& s : r.sets)
    table.pruned.push_back(metric_percent(evaluate_all(model, p, pruning_gates(s, cfg.n_layers, cfg.n_heads))));
  r.dissociation = make_dissociation_report(table, a.alpha, a.thresholds);
  r.dissociation.overlap.assign(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) r.dissociation.overlap[i][j] = head_overlap(r.sets[i], r.sets[j]);
  r.dissociation.layers = layer_distribution(r.sets, cfg.n_layers);
  return r;
}

TrainOutcome run_train(const ExperimentConfig& config, const fs::path& out, const TrainRunOptions& options) {
  auto section = train_into(config, out, options);
  Json r = report_header("train", &config);
  merge_timing(r, section.report);
  write_json_file(out / "report.json", r);
  return {r, section.digest};
}

Json run_prune_eval(const ExperimentConfig& config, const fs::path& checkpoint, const fs::path& out,
                    bool importance_only) {
  Json r = report_header(importance_only ? "importance" : "prune-eval", &config);
  merge_timing(r, iap_into(config, checkpoint, out, importance_only));
  write_json_file(out / "report.json", r);
  return r;
}

Json run_dissociate_csv(const fs::path& table, double alpha, const Thresholds& t, const fs::path& out) {
  std::ifstream in(table);
  if (!in) throw DataError("cannot open " + table.string());
  const auto perf = read_table_csv(in);
  const auto rep = make_dissociation_report(perf, alpha, t);
  Json r = report_header("dissociate", nullptr);
  r["source"] = {{"table", table.string()}};
  r["dissociation"] = to_json(rep);
  fs::create_directories(out);
  auto csv = open_out(out / "prune_table.csv");
  write_table_csv(csv, rep);
  write_json_file(out / "report.json", r);
  return r;
}

Json run_transfer(const ExperimentConfig& config, const fs::path& out) {
  const auto t0 = Clock::now();
  const auto p = prepare_experiment(config);
  const std::size_t n = config.tasks.size();
  if (n < 2) throw ConfigError("transfer needs at least two tasks");
  SimilarityMatrix transfer;
  transfer.metric = "transfer";
  for (const auto& t : config.tasks) transfer.tasks.push_back(t.spec.name);
  transfer.values.assign(n, std::vector<std::optional<double>>(n));
  Json sources = Json::array();
  for (std::size_t i = 0; i < n; ++i) {
    // A single-task model on the source, from the same initial weights as the joint model.
    PreparedExperiment single = p;
    single.config.tasks = {config.tasks[i]};
    single.train = {p.train[i]};
    single.dev = {p.dev[i]};
    Model model = build_model(single);
    MultitaskTrainer trainer(model, train_tasks(single), config.schedule);
    trainer.run();
    sources.push_back({{"task", config.tasks[i].spec.name},
                       {"source_metric", evaluate_task(model, 0, p.dev[i], config.tasks[i].spec.metric,
                                                       GateVector(model.config().n_layers, model.config().n_heads))}});
    for (std::size_t j = 0; j < n; ++j) {
      TransferOptions opts = config.analysis.transfer;
      opts.seed = Rng::derive(opts.seed, kTransferStream + i * n + j);
      transfer.values[i][j] = transfer_finetune(model, config.tasks[j].spec, p.train[j], p.dev[j], opts);
    }
  }
  transfer.config = {{"orientation", "row = source, column = target"},
                     {"shots", config.analysis.transfer.shots},
                     {"epochs", config.analysis.transfer.epochs}};
  fs::create_directories(out);
  {
    auto csv = open_out(out / "transfer.csv");
    write_similarity_csv(csv, transfer);
  }
  Json r = report_header("transfer", &config);
  r["transfer"] = {{"matrix", to_json(transfer)}, {"sources", sources}, {"csv", "transfer.csv"}};
  r["timing"] = {{"transfer_seconds", seconds_since(t0)}};
  write_json_file(out / "report.json", r);
  return r;
}

std::vector<std::string> read_probes(const fs::path& file, std::size_t count, std::ostream* warn) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open probe file " + file.string());
  std::vector<std::string> out;
  std::string line;
  while (out.size() < count && std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(line);
  }
  if (out.size() < count && warn) {
    *warn << "warning: " << file.string() << " has " << out.size() << " probe sentences; using all of them instead of "
          << count << "\n";
  }
  return out;
}

Json run_similarity(const SimilarityRequest& req, const fs::path& out) {
  const auto t0 = Clock::now();
  std::vector<std::string> tasks;
  std::vector<Representations> reps;
  const bool need_reps = std::ranges::any_of(req.metrics, [](const auto& m) { return m == "dse" || m == "cra"; });
  if (need_reps) {
    if (req.models.size() < 2) throw ConfigError("--model: DSE and CRA need at least two checkpoints");
    if (req.probes.size() < 2) throw ConfigError("at least two probe sentences are required");
    for (const auto& nc : req.models) {
      auto loaded = load_checkpoint(nc.dir);
      if (loaded.extras.vocab.empty()) throw CheckpointError(nc.dir.string() + " stores no vocabulary");
      const auto vocab = Vocabulary::from_tokens(loaded.extras.vocab);
      const auto& mc = loaded.model.config();
      const std::size_t layer = req.layer.value_or(mc.n_layers - 1);
      if (layer >= mc.n_layers) throw ConfigError("--layer " + std::to_string(layer) + " is out of range");
      std::vector<EncodedInput> probes;
      for (const auto& s : req.probes)
        probes.push_back(tokenize(s, std::nullopt, vocab, std::min(req.max_len, mc.max_seq_len)).encoded());
      tasks.push_back(nc.task);
      reps.push_back(sentence_representations(loaded.model, probes, layer, req.pooling));
    }
  }
  Json matrices = Json::array();
  fs::create_directories(out);
  for (const auto& metric : req.metrics) {
    SimilarityMatrix m;
    if (metric == "dse") {
      m = dse(tasks, reps);
    } else if (metric == "cra") {
      m = cra(tasks, reps, req.statistic);
    } else if (metric == "ahp") {
      if (!req.transfer_csv) throw ConfigError("--transfer is required for AHP");
      std::ifstream in(*req.transfer_csv);
      if (!in) throw DataError("cannot open " + req.transfer_csv->string());
      const auto p = read_similarity_csv(in);
      std::vector<std::vector<double>> values(p.tasks.size(), std::vector<double>(p.tasks.size(), 1.0));
      for (std::size_t i = 0; i < p.tasks.size(); ++i)
        for (std::size_t j = 0; j < p.tasks.size(); ++j)
          if (i != j) {
            if (!p.values[i][j]) throw ShapeError("transfer result " + p.tasks[i] + " -> " + p.tasks[j] + " is missing");
            values[i][j] = *p.values[i][j];
          }
      m = ahp(p.tasks, values);
    } else {
      throw ConfigError("--metric: unknown similarity metric '" + metric + "' (dse, cra, ahp)");
    }
    if (metric != "ahp") {
      m.config["layer"] = req.layer ? Json(*req.layer) : Json("final");
      m.config["pooling"] = to_string(req.pooling);
    }
    auto csv = open_out(out / ("similarity_" + metric + ".csv"));
    write_similarity_csv(csv, m);
    matrices.push_back(to_json(m));
  }
  Json r = report_header("similarity", nullptr);
  Json models = Json::array();
  for (const auto& nc : req.models) models.push_back({{"task", nc.task}, {"checkpoint", nc.dir.string()}});
  r["source"] = {{"models", models}, {"probes", req.probes.size()}};
  if (!matrices.empty()) r["similarity"] = matrices;
  r["timing"] = {{"similarity_seconds", seconds_since(t0)}};
  write_json_file(out / "report.json", r);
  return r;
}

SimilarityMatrix read_similarity_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("similarity CSV is empty");
  auto header = split_line(line);
  if (header.size() < 3) throw DataError("similarity CSV needs at least two task columns");
  SimilarityMatrix m;
  m.metric = header[0];
  m.tasks.assign(header.begin() + 1, header.end());
  const std::size_t n = m.tasks.size();
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \r") == std::string::npos) continue;
    auto cells = split_line(line);
    const std::string where = "similarity CSV line " + std::to_string(row + 2);
    if (row >= n) throw DataError(where + ": more rows than tasks");
    if (cells.size() != n + 1) throw DataError(where + ": expected " + std::to_string(n + 1) + " cells");
    if (cells[0] != m.tasks[row]) throw DataError(where + ": row '" + cells[0] + "' should be '" + m.tasks[row] + "'");
    std::vector<std::optional<double>> values;
    for (std::size_t j = 1; j <= n; ++j) {
      const double v = parse_cell(cells[j], where);
      values.push_back(std::isnan(v) ? std::nullopt : std::optional<double>(v));
    }
    m.values.push_back(std::move(values));
    ++row;
  }
  if (row != n) throw DataError("similarity CSV has " + std::to_string(row) + " rows for " + std::to_string(n) + " tasks");
  return m;
}

std::vector<std::tuple<std::string, std::string, double>> read_pair_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("pair CSV is empty");
  std::vector<std::tuple<std::string, std::string, double>> out;
  std::size_t no = 1;
  while (std::getline(in, line)) {
    ++no;
    if (line.find_first_not_of(" \r") == std::string::npos) continue;
    auto cells = split_line(line);
    const std::string where = "pair CSV line " + std::to_string(no);
    if (cells.size() != 3) throw DataError(where + ": expected task_a,task_b,value");
    out.emplace_back(cells[0], cells[1], parse_cell(cells[2], where));
  }
  return out;
}

Json run_correlate(const fs::path& similarity_csv, const fs::path& dissociation_csv, const fs::path& out) {
  std::ifstream sin(similarity_csv);
  if (!sin) throw DataError("cannot open " + similarity_csv.string());
  const auto sim = read_similarity_csv(sin);
  std::ifstream din(dissociation_csv);
  if (!din) throw DataError("cannot open " + dissociation_csv.string());
  const auto pairs = read_pair_csv(din);

  std::map<std::pair<std::string, std::string>, double> sim_by_pair;
  for (const auto& pv : pair_values(sim)) {
    auto a = sim.tasks[pv.a], b = sim.tasks[pv.b];
    sim_by_pair[{std::min(a, b), std::max(a, b)}] = pv.value;
  }
  std::vector<double> x, y;
  std::vector<std::pair<std::string, std::string>> names;
  std::vector<std::string> flags;
  for (const auto& [a, b, d] : pairs) {
    auto it = sim_by_pair.find({std::min(a, b), std::max(a, b)});
    if (it == sim_by_pair.end() || !std::isfinite(d)) {
      flags.push_back(a + "/" + b + ": no similarity value, pair skipped");
      continue;
    }
    x.push_back(it->second);
    y.push_back(d);
    names.emplace_back(a, b);
  }
  auto c = correlate(x, y);
  c.flags.insert(c.flags.begin(), flags.begin(), flags.end());
  fs::create_directories(out);
  {
    auto csv = open_out(out / "correlation_points.csv");
    csv << "task_a,task_b,similarity,dissociation\n";
    for (std::size_t i = 0; i < x.size(); ++i)
      csv << names[i].first << ',' << names[i].second << ',' << sig9(x[i]) << ',' << sig9(y[i]) << '\n';
  }
  Json r = report_header("correlate", nullptr);
  r["source"] = {{"similarity", similarity_csv.string()}, {"dissociation", dissociation_csv.string()}};
  Json cj = to_json(c);
  cj["similarity_metric"] = sim.metric;
  r["correlation"] = cj;
  write_json_file(out / "report.json", r);
  return r;
}

Json run_report(const ExperimentConfig& config, const fs::path& out) {
  const auto t0 = Clock::now();
  Json r = report_header("report", &config);
  merge_timing(r, train_into(config, out, {}).report);
  merge_timing(r, iap_into(config, out / "checkpoint", out, false));
  r["checkpoint"]["dir"] = "checkpoint";
  r["timing"]["wall_clock_seconds"] = seconds_since(t0);
  write_json_file(out / "report.json", r);
  return r;
}

void write_json_file(const fs::path& file, const Json& j) {
  auto out = open_out(file);
  out << j.dump(2) << '\n';
}

Json read_json_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open " + file.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw DataError(file.string() + ": " + e.what());
  }
}

}  // namespace headlab
