#include <cstdlib>
#include <fstream>
#include <set>

#include "headlab/error.hpp"
#include "headlab/experiment.hpp"

namespace headlab {

namespace fs = std::filesystem;

namespace {

// Typed field readers that name the offending field in their errors.
class Fields {
 public:
  Fields(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  const Json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string field(const std::string& key) const { return path_ + "." + key; }

  std::optional<std::size_t> size(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    if (!v->is_number_integer() || v->get<long long>() < 0)
      throw ConfigError(field(key) + " must be a non-negative integer");
    return v->get<std::size_t>();
  }
  std::optional<std::uint64_t> u64(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0))
      throw ConfigError(field(key) + " must be a non-negative integer");
    return v->get<std::uint64_t>();
  }
  std::optional<double> number(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    if (!v->is_number()) throw ConfigError(field(key) + " must be a number");
    return v->get<double>();
  }
  std::optional<bool> boolean(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    if (!v->is_boolean()) throw ConfigError(field(key) + " must be a boolean");
    return v->get<bool>();
  }
  std::optional<std::string> string(const std::string& key) {
    const Json* v = get(key);
    if (!v) return std::nullopt;
    if (!v->is_string()) throw ConfigError(field(key) + " must be a string");
    return v->get<std::string>();
  }
  // Parses an enum-like string, prefixing the field name to the parser's error.
  template <typename F>
  auto named(const std::string& key, F parse) -> std::optional<decltype(parse(std::string{}))> {
    auto s = string(key);
    if (!s) return std::nullopt;
    try {
      return parse(*s);
    } catch (const ConfigError& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [key, v] : j_.items())
      if (!seen_.contains(key)) throw ConfigError("unknown field " + field(key));
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

TaskSource parse_source(const Json& j, const std::string& path, const fs::path& base) {
  Fields f(j, path);
  TaskSource s;
  const bool synth = j.contains("synth"), tsv = j.contains("tsv");
  if (synth == tsv) throw ConfigError(path + " needs exactly one of \"synth\" or \"tsv\"");
  if (synth) {
    s.type = TaskSource::Type::Synth;
    s.synth_kind = *f.named("synth", synth_kind_from_string);
    if (auto v = f.size("size")) s.size = *v;
    s.seed = f.u64("seed");
  } else {
    s.type = TaskSource::Type::Tsv;
    s.train_path = resolve(base, *f.string("tsv"));
    if (auto d = f.string("dev")) s.dev_path = resolve(base, *d);
    if (auto v = f.number("train_fraction")) s.train_fraction = *v;
  }
  f.finish();
  return s;
}

TaskConfig parse_task(const Json& j, const std::string& path, const fs::path& base) {
  Fields f(j, path);
  TaskConfig t;
  auto name = f.string("name");
  if (!name || name->empty()) throw ConfigError(path + ".name is required");
  const Json* src = f.get("source");
  if (!src) throw ConfigError(path + ".source is required");
  t.source = parse_source(*src, path + ".source", base);

  std::optional<std::size_t> n_class = f.size("n_class");
  auto paradigm = f.named("paradigm", paradigm_from_string);
  auto kind = f.named("kind", task_kind_from_string);
  auto metric = f.named("metric", metric_from_string);
  if (auto p = f.named("pooling", pooling_from_string)) t.pooling = *p;
  f.finish();

  if (t.source.type == TaskSource::Type::Synth) {
    if (paradigm || kind) throw ConfigError(path + ": paradigm and kind are fixed by the synthetic generator");
    // The generator fixes the spec; only the class count (topic) and metric may change.
    const auto probe = synth_task(t.source.synth_kind, 2 * n_class.value_or(4), 0, n_class.value_or(4));
    t.spec = probe.spec;
    if (t.spec.kind == TaskKind::Classification && t.source.synth_kind != SynthKind::Topic && n_class &&
        *n_class != t.spec.n_class) {
      throw ConfigError(path + ".n_class: " + to_string(t.source.synth_kind) + " has " +
                        std::to_string(t.spec.n_class) + " classes");
    }
  } else {
    if (paradigm) t.spec.paradigm = *paradigm;
    if (kind) t.spec.kind = *kind;
    if (t.spec.kind == TaskKind::Regression) {
      t.spec.n_class = 1;
      t.spec.metric = Metric::Spearman;
    }
    if (n_class) t.spec.n_class = *n_class;
  }
  t.spec.name = *name;
  if (metric) t.spec.metric = *metric;
  try {
    t.spec.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return t;
}

Thresholds parse_thresholds(const Json& j, const std::string& path) {
  Fields f(j, path);
  Thresholds t;
  if (auto v = f.number("distinct")) t.distinct = *v;
  if (auto v = f.number("single")) t.single = *v;
  if (auto v = f.number("mild")) t.mild = *v;
  f.finish();
  return t;
}

TransferOptions parse_transfer(const Json& j, const std::string& path) {
  Fields f(j, path);
  TransferOptions t;
  if (auto v = f.size("shots")) t.shots = *v;
  if (auto v = f.size("epochs")) t.epochs = *v;
  if (auto v = f.size("batch_size")) t.batch_size = *v;
  if (auto v = f.number("learning_rate")) t.learning_rate = static_cast<float>(*v);
  if (auto v = f.u64("seed")) t.seed = *v;
  f.finish();
  return t;
}

AnalysisConfig parse_analysis(const Json& j, const fs::path& base) {
  Fields f(j, "analysis");
  AnalysisConfig a;
  if (auto v = f.number("alpha")) a.alpha = *v;
  if (auto v = f.named("select", select_mode_from_string)) a.select = *v;
  if (auto v = f.u64("select_seed")) a.select_seed = *v;
  if (auto v = f.boolean("normalize_importance")) a.importance.normalize_per_layer = *v;
  if (auto v = f.size("importance_batch_size")) a.importance.batch_size = *v;
  if (auto v = f.size("importance_max_batches")) a.importance.max_batches = *v;
  if (const Json* t = f.get("thresholds")) a.thresholds = parse_thresholds(*t, "analysis.thresholds");
  if (const Json* s = f.get("similarity")) {
    if (!s->is_array()) throw ConfigError("analysis.similarity must be an array");
    for (const auto& m : *s) {
      if (!m.is_string()) throw ConfigError("analysis.similarity entries must be strings");
      const auto name = m.get<std::string>();
      if (name != "dse" && name != "cra" && name != "ahp")
        throw ConfigError("analysis.similarity: unknown metric '" + name + "' (dse, cra, ahp)");
      a.similarity.push_back(name);
    }
  }
  if (auto v = f.string("probe_file")) a.probe_file = resolve(base, *v);
  if (auto v = f.size("probe_count")) a.probe_count = *v;
  if (auto v = f.size("layer")) a.layer = *v;
  if (auto v = f.named("representation_pooling", pooling_from_string)) a.representation_pooling = *v;
  if (auto v = f.named("statistic", rdm_statistic_from_string)) a.statistic = *v;
  if (const Json* t = f.get("transfer")) a.transfer = parse_transfer(*t, "analysis.transfer");
  f.finish();
  return a;
}

Json source_json(const TaskSource& s) {
  if (s.type == TaskSource::Type::Synth) {
    Json j{{"synth", to_string(s.synth_kind)}, {"size", s.size}};
    if (s.seed) j["seed"] = *s.seed;
    return j;
  }
  Json j{{"tsv", s.train_path.string()}, {"train_fraction", s.train_fraction}};
  if (s.dev_path) j["dev"] = s.dev_path->string();
  return j;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (tasks.empty()) throw ConfigError("tasks: at least one task is required");
  std::set<std::string> names;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& t = tasks[i];
    const std::string path = "tasks[" + std::to_string(i) + "]";
    if (!names.insert(t.spec.name).second) throw ConfigError(path + ".name: duplicate task '" + t.spec.name + "'");
    const auto& s = t.source;
    if (s.type == TaskSource::Type::Synth) {
      if (s.size < 2 * t.spec.n_class) throw ConfigError(path + ".source.size is below 2 * n_class");
    } else {
      if (!fs::exists(s.train_path)) throw ConfigError(path + ".source.tsv: no such file " + s.train_path.string());
      if (s.dev_path && !fs::exists(*s.dev_path))
        throw ConfigError(path + ".source.dev: no such file " + s.dev_path->string());
      if (!(s.train_fraction > 0.0 && s.train_fraction < 1.0))
        throw ConfigError(path + ".source.train_fraction must lie in (0, 1)");
    }
  }
  if (max_len < 3) throw ConfigError("max_len must be >= 3");
  if (max_len > model.max_seq_len) throw ConfigError("max_len exceeds model.max_seq_len");
  try {
    ModelConfig probe = model;
    probe.vocab_size = std::max<std::size_t>(probe.vocab_size, 1);
    probe.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (!(model.dropout >= 0.0f && model.dropout < 1.0f)) throw ConfigError("model.dropout must lie in [0, 1)");
  schedule.validate();
  if (!(analysis.alpha > 0.0 && analysis.alpha <= 1.0)) throw ConfigError("analysis.alpha must lie in (0, 1]");
  if (analysis.layer && *analysis.layer >= model.n_layers)
    throw ConfigError("analysis.layer must be below model.n_layers");
  if (analysis.probe_file && !fs::exists(*analysis.probe_file))
    throw ConfigError("analysis.probe_file: no such file " + analysis.probe_file->string());
  if (analysis.probe_count < 2) throw ConfigError("analysis.probe_count must be >= 2");
  if (analysis.importance.batch_size < 1 || analysis.importance.max_batches < 1)
    throw ConfigError("analysis.importance_batch_size and importance_max_batches must be >= 1");
  const auto& tr = analysis.transfer;
  if (tr.shots < 1 || tr.epochs < 1 || tr.batch_size < 1 || !(tr.learning_rate > 0.0f))
    throw ConfigError("analysis.transfer: shots, epochs, batch_size and learning_rate must be positive");
}

ExperimentConfig experiment_config_from_json(const Json& j, const fs::path& base_dir) {
  Fields f(j, "config");
  ExperimentConfig c;
  if (auto v = f.size("version"); v && *v != kConfigVersion)
    throw ConfigError("config.version " + std::to_string(*v) + " is not supported (expected " +
                      std::to_string(kConfigVersion) + ")");
  if (auto v = f.string("name")) c.name = *v;
  if (const Json* m = f.get("model")) {
    c.model = model_config_from_json(*m, "model");
    c.vocab_size_given = m->contains("vocab_size");
  }
  if (auto v = f.size("max_len")) c.max_len = *v;
  const Json* tasks = f.get("tasks");
  if (!tasks || !tasks->is_array()) throw ConfigError("config.tasks must be an array");
  for (std::size_t i = 0; i < tasks->size(); ++i)
    c.tasks.push_back(parse_task((*tasks)[i], "tasks[" + std::to_string(i) + "]", base_dir));
  if (const Json* s = f.get("schedule")) c.schedule = train_schedule_from_json(*s);
  if (const Json* a = f.get("analysis")) c.analysis = parse_analysis(*a, base_dir);
  if (auto v = f.string("output")) c.output = resolve(base_dir, *v);
  f.finish();
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config " + file.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
  return experiment_config_from_json(j, file.parent_path());
}

Json to_json(const ExperimentConfig& c) {
  Json model = to_json(c.model);
  if (!c.vocab_size_given) model.erase("vocab_size");
  Json tasks = Json::array();
  for (const auto& t : c.tasks) {
    Json jt{{"name", t.spec.name}, {"metric", to_string(t.spec.metric)}, {"n_class", t.spec.n_class},
            {"pooling", to_string(t.pooling)}, {"source", source_json(t.source)}};
    if (t.source.type == TaskSource::Type::Tsv) {
      jt["paradigm"] = to_string(t.spec.paradigm);
      jt["kind"] = to_string(t.spec.kind);
    }
    tasks.push_back(jt);
  }
  const auto& a = c.analysis;
  Json analysis{{"alpha", a.alpha},
                {"select", to_string(a.select)},
                {"select_seed", a.select_seed},
                {"normalize_importance", a.importance.normalize_per_layer},
                {"importance_batch_size", a.importance.batch_size},
                {"importance_max_batches", a.importance.max_batches},
                {"thresholds",
                 {{"distinct", a.thresholds.distinct}, {"single", a.thresholds.single}, {"mild", a.thresholds.mild}}},
                {"similarity", a.similarity},
                {"probe_count", a.probe_count},
                {"representation_pooling", to_string(a.representation_pooling)},
                {"statistic", to_string(a.statistic)},
                {"transfer",
                 {{"shots", a.transfer.shots},
                  {"epochs", a.transfer.epochs},
                  {"batch_size", a.transfer.batch_size},
                  {"learning_rate", float_json(a.transfer.learning_rate)},
                  {"seed", a.transfer.seed}}}};
  if (a.probe_file) analysis["probe_file"] = a.probe_file->string();
  if (a.layer) analysis["layer"] = *a.layer;
  Json j{{"version", kConfigVersion}, {"name", c.name},          {"model", model},
         {"max_len", c.max_len},      {"tasks", tasks},          {"schedule", to_json(c.schedule)},
         {"analysis", analysis}};
  if (c.output) j["output"] = c.output->string();
  return j;
}

fs::path resolve_output_dir(const std::optional<fs::path>& flag, const ExperimentConfig* config) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("HEADLAB_OUT"); env && *env) return env;
  if (config && config->output) return *config->output;
  return "headlab_out";
}

}  // namespace headlab
