#include "headlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "headlab/error.hpp"

namespace headlab {

std::string to_string(SamplingMode m) { return m == SamplingMode::Annealed ? "annealed" : "proportional"; }

SamplingMode sampling_mode_from_string(const std::string& s) {
  if (s == "proportional") return SamplingMode::Proportional;
  if (s == "annealed") return SamplingMode::Annealed;
  throw ConfigError("unknown sampling mode '" + s + "' (proportional, annealed)");
}

double sampling_exponent(SamplingMode mode, std::size_t epoch, std::size_t total_epochs) {
  if (epoch < 1 || epoch > total_epochs) {
    throw ConfigError("epoch " + std::to_string(epoch) + " outside 1.." + std::to_string(total_epochs));
  }
  if (mode == SamplingMode::Proportional) return 1.0;
  if (total_epochs < 2) throw ConfigError("annealed sampling needs at least 2 epochs");
  return 1.0 - 0.8 * static_cast<double>(epoch - 1) / static_cast<double>(total_epochs - 1);
}

std::vector<double> sampling_probs(std::span<const std::size_t> sizes, SamplingMode mode, std::size_t epoch,
                                   std::size_t total_epochs) {
  if (sizes.empty()) throw ConfigError("sampling needs at least one task");
  const double eps = sampling_exponent(mode, epoch, total_epochs);
  std::vector<double> p;
  double total = 0.0;
  for (auto n : sizes) {
    if (n == 0) throw DataError("sampling: a task has an empty training set");
    p.push_back(std::pow(static_cast<double>(n), eps));
    total += p.back();
  }
  for (auto& x : p) x /= total;
  return p;
}

std::size_t draw_index(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

void TrainSchedule::validate() const {
  if (epochs < 1) throw ConfigError("schedule.epochs must be >= 1");
  if (sampling == SamplingMode::Annealed && epochs < 2) {
    throw ConfigError("schedule.epochs must be >= 2 for annealed sampling");
  }
  if (!(iat_fraction >= 0.0 && iat_fraction <= 1.0)) throw ConfigError("schedule.iat_fraction must lie in [0, 1]");
  if (!(iat_alpha > 0.0 && iat_alpha <= 1.0)) throw ConfigError("schedule.iat_alpha must lie in (0, 1]");
  if (batch_size < 1) throw ConfigError("schedule.batch_size must be >= 1");
  if (!(adam.learning_rate > 0.0f) || !std::isfinite(adam.learning_rate)) {
    throw ConfigError("schedule.learning_rate must be positive");
  }
  if (!(adam.warmup_proportion >= 0.0 && adam.warmup_proportion <= 1.0)) {
    throw ConfigError("schedule.warmup_proportion must lie in [0, 1]");
  }
}

Json to_json(const TrainSchedule& s) {
  return Json{{"epochs", s.epochs},
              {"sampling", to_string(s.sampling)},
              {"iat_fraction", s.iat_fraction},
              {"iat_alpha", s.iat_alpha},
              {"iat_select", to_string(s.iat_select)},
              {"seed", s.seed},
              {"batch_size", s.batch_size},
              {"learning_rate", float_json(s.adam.learning_rate)},
              {"warmup_proportion", s.adam.warmup_proportion},
              {"decay", s.adam.decay == DecayMode::Linear ? "linear" : "constant"},
              {"importance_batch_size", s.importance.batch_size},
              {"importance_max_batches", s.importance.max_batches}};
}

TrainSchedule train_schedule_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("schedule must be an object");
  TrainSchedule s;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "epochs") s.epochs = v.get<std::size_t>();
      else if (key == "sampling") s.sampling = sampling_mode_from_string(v.get<std::string>());
      else if (key == "iat_fraction") s.iat_fraction = v.get<double>();
      else if (key == "iat_alpha") s.iat_alpha = v.get<double>();
      else if (key == "iat_select") s.iat_select = select_mode_from_string(v.get<std::string>());
      else if (key == "seed") s.seed = v.get<std::uint64_t>();
      else if (key == "batch_size") s.batch_size = v.get<std::size_t>();
      else if (key == "learning_rate") s.adam.learning_rate = v.get<float>();
      else if (key == "warmup_proportion") s.adam.warmup_proportion = v.get<double>();
      else if (key == "decay") {
        const auto d = v.get<std::string>();
        if (d != "linear" && d != "constant") throw ConfigError("schedule.decay must be linear or constant");
        s.adam.decay = d == "linear" ? DecayMode::Linear : DecayMode::Constant;
      } else if (key == "importance_batch_size") s.importance.batch_size = v.get<std::size_t>();
      else if (key == "importance_max_batches") s.importance.max_batches = v.get<std::size_t>();
      else throw ConfigError("schedule: unknown key '" + key + "'");
    } catch (const Json::exception& e) {
      throw ConfigError("schedule." + key + ": " + e.what());
    }
  }
  s.validate();
  return s;
}

TaskStream::TaskStream(std::size_t size, std::uint64_t seed) : rng_(seed), order_(size) {
  if (size == 0) throw DataError("task stream over an empty dataset");
  std::iota(order_.begin(), order_.end(), 0);
  reshuffle();
}

void TaskStream::reshuffle() {
  rng_.shuffle(order_.begin(), order_.end());
  pos_ = 0;
}

std::vector<std::size_t> TaskStream::next(std::size_t count) {
  std::vector<std::size_t> out;
  out.reserve(count);
  while (out.size() < count) {
    if (pos_ == order_.size()) {
      reshuffle();
      ++passes_;
    }
    out.push_back(order_[pos_++]);
  }
  return out;
}

Json TaskStream::state() const {
  return Json{{"rng", rng_.state()}, {"order", order_}, {"pos", pos_}, {"passes", passes_}};
}

void TaskStream::restore(const Json& j) {
  rng_.restore(j.at("rng").get<std::string>());
  order_ = j.at("order").get<std::vector<std::size_t>>();
  pos_ = j.at("pos").get<std::size_t>();
  passes_ = j.at("passes").get<std::size_t>();
}

void write_mask_csv(std::ostream& out, const IatMaskSet& masks, std::size_t n_layers, std::size_t n_heads) {
  out << "task,layer,head,mask\n";
  for (std::size_t t = 0; t < masks.masks.size(); ++t)
    for (std::size_t l = 0; l < n_layers; ++l)
      for (std::size_t h = 0; h < n_heads; ++h)
        out << masks.sets[t].task << ',' << l << ',' << h << ',' << int(masks.masks[t][l * n_heads + h]) << '\n';
}

IatMaskSet build_iat_masks(const Model& model, std::span<const TrainTask> tasks, double alpha, SelectMode mode,
                           std::uint64_t seed, const ImportanceOptions& importance, std::size_t start_step) {
  const auto& cfg = model.config();
  IatMaskSet out;
  out.start_step = start_step;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& name = model.task(tasks[i].task).name;
    std::vector<double> scores(cfg.head_count(), 0.0);
    if (mode != SelectMode::Random) scores = head_importance(model, tasks[i].task, tasks[i].examples, importance).scores;
    auto set = select_heads(scores, cfg.n_layers, cfg.n_heads, alpha, mode, Rng::derive(seed, i), name);
    out.masks.push_back(membership(set, cfg.n_layers, cfg.n_heads));
    out.sets.push_back(std::move(set));
  }
  return out;
}

Json to_json(const StepRecord& r, const Model& model) {
  return Json{{"step", r.step},
              {"epoch", r.epoch},
              {"task", model.task(r.task).name},
              {"loss", r.loss},
              {"lr", r.lr},
              {"phase", r.iat ? "iat" : "mtl"}};
}

double accumulate_batch_gradient(Model& model, std::size_t task, std::span<const Example> examples,
                                 std::span<const std::size_t> batch, Rng& dropout_rng) {
  if (batch.empty()) throw ShapeError("empty batch");
  model.zero_grad();
  Tape tape;
  auto gates = model.bind_gates(tape, model.gates(), false);
  ForwardOptions opts;
  opts.training = true;
  opts.dropout_rng = &dropout_rng;
  Var total{};
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const auto& ex = examples[batch[k]];
    Var out = model.forward_trainable(tape, ex.input, task, gates, opts);
    Var l = model.loss(tape, out, task, ex.label);
    total = k == 0 ? l : tape.add(total, l);
  }
  Var mean = tape.scale(total, 1.0f / static_cast<float>(batch.size()));
  const double value = tape.value(mean)[0];
  if (!std::isfinite(value)) throw NumericalError("non-finite loss on task '" + model.task(task).name + "'");
  tape.backward(mean);
  return value;
}

namespace {

std::size_t mask_row(const IatMaskSet& masks, std::span<const TrainTask> tasks, std::size_t task) {
  for (std::size_t i = 0; i < tasks.size() && i < masks.masks.size(); ++i)
    if (tasks[i].task == task) return i;
  throw ShapeError("IAT masks hold no entry for task " + std::to_string(task));
}

}  // namespace

double iat_step(Model& model, Adam& optimizer, std::size_t task, std::span<const Example> examples,
                std::span<const std::size_t> batch, const IatMaskSet& masks, std::span<const TrainTask> tasks,
                Rng& dropout_rng) {
  const std::size_t row = mask_row(masks, tasks, task);
  if (masks.masks[row].size() != model.config().head_count()) throw ShapeError("IAT mask width differs from the model");
  const double loss = accumulate_batch_gradient(model, task, examples, batch, dropout_rng);
  const auto update = model.update_masks(masks.masks[row]);
  optimizer.step(model.params(), update);
  return loss;
}

namespace {

AdamConfig planned(AdamConfig c, std::size_t total) {
  c.total_steps = total;
  return c;
}

std::size_t checked_steps(const std::vector<TrainTask>& tasks, const TrainSchedule& s) {
  s.validate();
  if (tasks.empty()) throw ConfigError("training needs at least one task");
  std::size_t n = 0;
  for (const auto& t : tasks) {
    if (t.examples.empty()) throw DataError("training set of task " + std::to_string(t.task) + " is empty");
    n += t.examples.size();
  }
  return (n + s.batch_size - 1) / s.batch_size;
}

}  // namespace

MultitaskTrainer::MultitaskTrainer(Model& model, std::vector<TrainTask> tasks, TrainSchedule schedule)
    : model_(model),
      tasks_(std::move(tasks)),
      schedule_(schedule),
      steps_per_epoch_(checked_steps(tasks_, schedule_)),
      total_steps_(steps_per_epoch_ * schedule_.epochs),
      iat_start_(static_cast<std::size_t>(
          std::ceil((1.0 - schedule_.iat_fraction) * static_cast<double>(total_steps_) - 1e-9))),
      adam_(planned(schedule_.adam, total_steps_), model.params()),
      sampler_(Rng::derive(schedule_.seed, 1)),
      dropout_(Rng::derive(schedule_.seed, 2)) {
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    if (tasks_[i].task >= model_.task_count()) throw ConfigError("training task index out of range");
    streams_.emplace_back(tasks_[i].examples.size(), Rng::derive(schedule_.seed, 100 + i));
    sizes_.push_back(tasks_[i].examples.size());
  }
}

std::size_t MultitaskTrainer::epoch() const {
  return std::min(step_ / steps_per_epoch_ + 1, schedule_.epochs);
}

StepRecord MultitaskTrainer::step_once() {
  if (finished()) throw std::logic_error("training already finished");
  if (step_ >= iat_start_ && !masks_) {
    masks_ = build_iat_masks(model_, tasks_, schedule_.iat_alpha, schedule_.iat_select,
                             Rng::derive(schedule_.seed, 3), schedule_.importance, step_);
  }
  StepRecord rec;
  rec.step = step_;
  rec.epoch = epoch();
  const auto probs = sampling_probs(sizes_, schedule_.sampling, rec.epoch, schedule_.epochs);
  const std::size_t i = draw_index(probs, sampler_);
  const auto batch = streams_[i].next(schedule_.batch_size);
  rec.task = tasks_[i].task;
  rec.lr = adam_.current_rate();
  rec.iat = masks_.has_value();
  if (rec.iat) {
    rec.loss = iat_step(model_, adam_, rec.task, tasks_[i].examples, batch, *masks_, tasks_, dropout_);
  } else {
    rec.loss = accumulate_batch_gradient(model_, rec.task, tasks_[i].examples, batch, dropout_);
    adam_.step(model_.params());
  }
  ++step_;
  return rec;
}

void MultitaskTrainer::run(std::size_t max_steps, std::ostream* log) {
  for (std::size_t n = 0; n < max_steps && !finished(); ++n) {
    const auto rec = step_once();
    if (log) *log << to_json(rec, model_).dump() << '\n';
  }
}

CheckpointExtras MultitaskTrainer::extras() const {
  CheckpointExtras e;
  const auto& params = model_.params();
  for (std::size_t p = 0; p < params.size(); ++p)
    e.tensors.emplace_back("optim.m." + params[p].name, adam_.first_moments()[p]);
  for (std::size_t p = 0; p < params.size(); ++p)
    e.tensors.emplace_back("optim.v." + params[p].name, adam_.second_moments()[p]);
  Json streams = Json::array();
  for (const auto& s : streams_) streams.push_back(s.state());
  Json state{{"step", step_},
             {"total_steps", total_steps_},
             {"optimizer_step", adam_.step_count()},
             {"schedule", to_json(schedule_)},
             {"sampler_rng", sampler_.state()},
             {"dropout_rng", dropout_.state()},
             {"streams", streams}};
  if (masks_) {
    Json sets = Json::array();
    for (std::size_t t = 0; t < masks_->sets.size(); ++t) {
      Json members = Json::array();
      for (auto h : masks_->sets[t].members) members.push_back({h.layer, h.head});
      sets.push_back({{"task", masks_->sets[t].task},
                      {"mode", to_string(masks_->sets[t].mode)},
                      {"alpha", masks_->sets[t].alpha},
                      {"seed", masks_->sets[t].seed},
                      {"members", members},
                      {"mask", masks_->masks[t]}});
    }
    state["iat"] = {{"start_step", masks_->start_step}, {"sets", sets}};
  }
  e.state = std::move(state);
  return e;
}

void MultitaskTrainer::save(const std::filesystem::path& dir, CheckpointExtras base) const {
  auto e = extras();
  base.tensors = std::move(e.tensors);
  base.state = std::move(e.state);
  save_checkpoint(dir, model_, base);
}

void MultitaskTrainer::restore(const CheckpointExtras& extras) {
  const auto& st = extras.state;
  try {
    if (st.at("total_steps").get<std::size_t>() != total_steps_) {
      throw CheckpointError("checkpoint plans " + st.at("total_steps").dump() + " steps, this run " +
                            std::to_string(total_steps_));
    }
    if (st.at("schedule") != to_json(schedule_)) throw CheckpointError("checkpoint was trained under another schedule");
    const auto& params = model_.params();
    if (extras.tensors.size() != 2 * params.size()) throw CheckpointError("checkpoint lacks optimizer moments");
    for (std::size_t p = 0; p < params.size(); ++p) {
      const auto& m = extras.tensors[p];
      const auto& v = extras.tensors[params.size() + p];
      if (m.name != "optim.m." + params[p].name || v.name != "optim.v." + params[p].name ||
          !m.value.same_shape(params[p].value) || !v.value.same_shape(params[p].value)) {
        throw CheckpointError("optimizer moments do not match parameter '" + params[p].name + "'");
      }
      adam_.first_moments()[p] = m.value;
      adam_.second_moments()[p] = v.value;
    }
    adam_.set_step_count(st.at("optimizer_step").get<std::size_t>());
    step_ = st.at("step").get<std::size_t>();
    sampler_.restore(st.at("sampler_rng").get<std::string>());
    dropout_.restore(st.at("dropout_rng").get<std::string>());
    const auto& streams = st.at("streams");
    if (streams.size() != streams_.size()) throw CheckpointError("checkpoint has a different number of tasks");
    for (std::size_t i = 0; i < streams_.size(); ++i) streams_[i].restore(streams[i]);
    masks_.reset();
    if (st.contains("iat")) {
      IatMaskSet m;
      m.start_step = st["iat"].at("start_step").get<std::size_t>();
      for (const auto& s : st["iat"].at("sets")) {
        HeadSet hs;
        hs.task = s.at("task").get<std::string>();
        hs.mode = select_mode_from_string(s.at("mode").get<std::string>());
        hs.alpha = s.at("alpha").get<double>();
        hs.seed = s.at("seed").get<std::uint64_t>();
        for (const auto& h : s.at("members")) hs.members.push_back({h.at(0).get<std::size_t>(), h.at(1).get<std::size_t>()});
        m.masks.push_back(s.at("mask").get<std::vector<std::uint8_t>>());
        m.sets.push_back(std::move(hs));
      }
      masks_ = std::move(m);
    }
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("training state unreadable: ") + e.what());
  }
}

double evaluate_task(const Model& model, std::size_t task, std::span<const Example> examples, Metric metric,
                     const GateVector& gates) {
  if (examples.empty()) throw DataError("evaluation set is empty");
  std::vector<double> preds, golds;
  preds.reserve(examples.size());
  golds.reserve(examples.size());
  for (const auto& e : examples) {
    preds.push_back(model.predict(e.input, task, gates));
    golds.push_back(e.label);
  }
  return evaluate(preds, golds, metric);
}

double transfer_finetune(const Model& pretrained, const TaskSpec& spec, std::span<const Example> train,
                         std::span<const Example> dev, const TransferOptions& options) {
  spec.validate();
  if (options.shots == 0 || options.shots > train.size()) {
    throw DataError("transfer: " + std::to_string(options.shots) + " shots requested from " +
                    std::to_string(train.size()) + " training examples");
  }
  if (options.epochs == 0 || options.batch_size == 0) throw ConfigError("transfer: epochs and batch size must be >= 1");
  Model model = pretrained;
  // Fresh head under its own name; the source model may already carry a head for this task.
  const std::size_t task = model.add_task("transfer:" + spec.name, spec.kind, spec.n_class, Pooling::First,
                                          Rng::derive(options.seed, 10));
  Rng pick(Rng::derive(options.seed, 11));
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  pick.shuffle(idx.begin(), idx.end());
  std::vector<Example> shots;
  for (std::size_t k = 0; k < options.shots; ++k) shots.push_back(train[idx[k]]);

  TrainSchedule s;
  s.epochs = options.epochs;
  s.batch_size = std::min(options.batch_size, shots.size());
  s.seed = Rng::derive(options.seed, 12);
  s.iat_fraction = 0.0;
  s.adam.learning_rate = options.learning_rate;
  MultitaskTrainer trainer(model, {TrainTask{task, std::move(shots)}}, s);
  trainer.run();
  return evaluate_task(model, task, dev, spec.metric, GateVector(model.config().n_layers, model.config().n_heads));
}

BootstrapResult paired_bootstrap(std::span<const double> a, std::span<const double> b, std::size_t resamples,
                                 std::uint64_t seed) {
  if (a.size() != b.size()) throw ShapeError("paired bootstrap: series lengths differ");
  if (a.size() < 2) throw ShapeError("paired bootstrap needs at least two pairs");
  if (resamples == 0) throw ConfigError("paired bootstrap needs at least one resample");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  BootstrapResult r;
  r.mean_difference = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  if (std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; })) {
    r.degenerate = true;
    r.p_value = 1.0;
    return r;
  }

  // n^n, or SIZE_MAX once it exceeds the budget.
  std::size_t space = 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (space > resamples / n) {
      space = SIZE_MAX;
      break;
    }
    space *= n;
  }
  std::size_t hits = 0;
  if (space <= resamples) {
    std::vector<std::size_t> pick(n, 0);
    for (std::size_t k = 0; k < space; ++k) {
      double s = 0.0;
      for (auto j : pick) s += d[j];
      hits += s <= 0.0;
      for (std::size_t pos = 0; pos < n && ++pick[pos] == n; ++pos) pick[pos] = 0;
    }
    r.exact = true;
    r.resamples = space;
  } else {
    Rng rng(seed);
    for (std::size_t k = 0; k < resamples; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += d[rng.below(n)];
      hits += s <= 0.0;
    }
    r.resamples = resamples;
  }
  r.p_value = static_cast<double>(hits) / static_cast<double>(r.resamples);
  return r;
}

}  // namespace headlab
