#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "headlab/checkpoint.hpp"
#include "headlab/error.hpp"
#include "headlab/trainer.hpp"
#include "test_support.hpp"

using namespace headlab;

namespace {

struct Setup {
  Vocabulary vocab;
  Model model;
  std::vector<TrainTask> tasks;
};

Setup small_setup(std::uint64_t seed, std::size_t size = 120, bool identical = false) {
  auto a = synth_task(SynthKind::Topic, size, seed, 3, "topic");
  auto b = identical ? synth_task(SynthKind::Topic, size, seed, 3, "copy")
                     : synth_task(SynthKind::MarkerParity, size, seed + 1, 2, "parity");
  auto texts = example_texts(a.examples);
  auto tb = example_texts(b.examples);
  texts.insert(texts.end(), tb.begin(), tb.end());
  auto vocab = Vocabulary::build(texts);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.max_seq_len = 16;
  Model m(cfg, seed);
  const auto ta = m.add_task(a.spec.name, a.spec.kind, a.spec.n_class, Pooling::First, seed + 10);
  const auto tb2 = m.add_task(b.spec.name, b.spec.kind, b.spec.n_class, Pooling::First, seed + 11);
  std::vector<TrainTask> tasks{{ta, encode_examples(a.examples, vocab, 16)}, {tb2, encode_examples(b.examples, vocab, 16)}};
  return {vocab, m, tasks};
}

TrainSchedule small_schedule(std::uint64_t seed) {
  TrainSchedule s;
  s.epochs = 2;
  s.batch_size = 8;
  s.seed = seed;
  s.importance.max_batches = 4;
  return s;
}

std::string digest_of(const Model& m) {
  headlab::testing::TempDir dir("digest");
  save_checkpoint(dir.path(), m);
  return file_digest(dir / "params.bin") + file_digest(dir / "manifest.json");
}

bool same_values(const Tensor& a, const Tensor& b) { return std::ranges::equal(a.values(), b.values()); }

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace

TEST_CASE("sampling probabilities") {
  const std::vector<std::size_t> n{100, 400};
  auto p = sampling_probs(n, SamplingMode::Proportional, 1, 5);
  CHECK(p[0] == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(0.8).epsilon(1e-12));
  auto first = sampling_probs(n, SamplingMode::Annealed, 1, 5);
  CHECK(first == p);
  // epsilon = 0.2 at the last epoch: 100^0.2 = 2.51189, 400^0.2 = 3.31445.
  auto last = sampling_probs(n, SamplingMode::Annealed, 5, 5);
  CHECK(last[0] == doctest::Approx(0.43126).epsilon(1e-4));
  CHECK(last[1] == doctest::Approx(0.56874).epsilon(1e-4));
  CHECK(sampling_exponent(SamplingMode::Annealed, 3, 5) == doctest::Approx(0.6));
  CHECK_THROWS_AS(sampling_probs(n, SamplingMode::Annealed, 1, 1), ConfigError);
  CHECK_NOTHROW(sampling_probs(n, SamplingMode::Proportional, 1, 1));
  CHECK_THROWS_AS(sampling_probs(n, SamplingMode::Proportional, 6, 5), ConfigError);
  const std::vector<std::size_t> with_empty{3, 0};
  CHECK_THROWS_AS(sampling_probs(with_empty, SamplingMode::Proportional, 1, 1), DataError);
}

TEST_CASE("sampling probabilities sum to one") {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::size_t> n(1 + rng.below(6));
    for (auto& x : n) x = 1 + rng.below(100000);
    const std::size_t e_total = 2 + rng.below(10);
    auto p = sampling_probs(n, SamplingMode::Annealed, 1 + rng.below(e_total), e_total);
    double s = 0.0;
    for (double x : p) s += x;
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("empirical task frequencies follow the sampling law") {
  const std::vector<std::size_t> n{100, 400};
  for (std::size_t e = 1; e <= 5; ++e) {
    auto p = sampling_probs(n, SamplingMode::Annealed, e, 5);
    Rng rng(e);
    std::size_t hits = 0;
    for (int k = 0; k < 100000; ++k) hits += draw_index(p, rng) == 0;
    CHECK(std::abs(static_cast<double>(hits) / 1e5 - p[0]) < 0.01);
  }
}

TEST_CASE("task stream passes are permutations and resume exactly") {
  TaskStream s(7, 3);
  for (int pass = 0; pass < 3; ++pass) {
    auto batch = s.next(7);
    std::sort(batch.begin(), batch.end());
    CHECK(batch == all_indices(7));
  }
  s.next(3);
  TaskStream copy(7, 99);
  copy.restore(s.state());
  CHECK(copy.next(20) == s.next(20));
}

TEST_CASE("schedule validation and json") {
  TrainSchedule s;
  s.iat_fraction = 1.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = TrainSchedule{};
  s.iat_alpha = 0.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = TrainSchedule{};
  s.sampling = SamplingMode::Annealed;
  s.epochs = 1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = TrainSchedule{};
  s.iat_fraction = 0.25;
  s.iat_select = SelectMode::Random;
  CHECK(to_json(train_schedule_from_json(to_json(s))) == to_json(s));
  CHECK_THROWS_AS(train_schedule_from_json(Json{{"epochs", 2}, {"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(train_schedule_from_json(Json{{"epochs", "two"}}), ConfigError);
}

TEST_CASE("step arithmetic") {
  auto su = small_setup(1);
  auto s = small_schedule(1);
  s.iat_fraction = 0.3;
  MultitaskTrainer t(su.model, su.tasks, s);
  CHECK(t.steps_per_epoch() == 30);  // ceil(240 / 8)
  CHECK(t.total_steps() == 60);
  CHECK(t.iat_start_step() == 42);  // ceil(0.7 * 60)
  s.iat_fraction = 0.0;
  MultitaskTrainer plain(su.model, su.tasks, s);
  CHECK(plain.iat_start_step() == 60);
}

TEST_CASE("training without IAT logs no IAT phase and lowers the loss") {
  auto su = small_setup(2, 200);
  auto s = small_schedule(2);
  s.epochs = 4;
  s.adam.learning_rate = 3e-3f;
  const auto before = su.model.params();
  MultitaskTrainer t(su.model, su.tasks, s);
  std::ostringstream log;
  double early = 0.0, late = 0.0;
  std::size_t n_early = 0, n_late = 0;
  while (!t.finished()) {
    const auto r = t.step_once();
    log << to_json(r, su.model).dump() << '\n';
    CHECK_FALSE(r.iat);
    if (r.step < 20) early += r.loss, ++n_early;
    if (r.step + 20 >= t.total_steps()) late += r.loss, ++n_late;
  }
  CHECK(late / static_cast<double>(n_late) < early / static_cast<double>(n_early));
  CHECK(log.str().find("\"iat\"") == std::string::npos);
  CHECK_FALSE(t.masks().has_value());
  for (const auto& th : su.model.tasks()) CHECK_FALSE(same_values(su.model.params()[th.weight_index].value, before[th.weight_index].value));

  std::istringstream lines(log.str());
  std::string line;
  std::getline(lines, line);
  const auto rec = Json::parse(line);
  for (const char* key : {"step", "epoch", "task", "loss", "lr", "phase"}) CHECK(rec.contains(key));
}

TEST_CASE("two identical tasks both receive updates") {
  auto su = small_setup(3, 120, true);
  const auto before = su.model.params();
  auto s = small_schedule(3);
  MultitaskTrainer t(su.model, su.tasks, s);
  t.run();
  for (const auto& th : su.model.tasks()) CHECK_FALSE(same_values(su.model.params()[th.weight_index].value, before[th.weight_index].value));
}

TEST_CASE("seeded runs are bit-identical") {
  auto a = small_setup(4), b = small_setup(4);
  MultitaskTrainer ta(a.model, a.tasks, small_schedule(4));
  MultitaskTrainer tb(b.model, b.tasks, small_schedule(4));
  ta.run();
  tb.run();
  CHECK(digest_of(a.model) == digest_of(b.model));
  auto c = small_setup(4);
  MultitaskTrainer tc(c.model, c.tasks, small_schedule(5));
  tc.run();
  CHECK(digest_of(a.model) != digest_of(c.model));
}

TEST_CASE("delta = 0 or alpha = 1 reduces to plain multi-task training") {
  auto plain = small_setup(6);
  MultitaskTrainer tp(plain.model, plain.tasks, small_schedule(6));
  tp.run();
  const auto reference = digest_of(plain.model);

  auto full = small_setup(6);
  auto s = small_schedule(6);
  s.iat_fraction = 0.5;
  s.iat_alpha = 1.0;
  MultitaskTrainer tf(full.model, full.tasks, s);
  tf.run();
  REQUIRE(tf.masks().has_value());
  for (const auto& m : tf.masks()->masks)
    for (auto v : m) CHECK(v == 1);
  CHECK(digest_of(full.model) == reference);

  auto none = small_setup(6);
  s.iat_fraction = 0.0;
  s.iat_alpha = 0.3;
  MultitaskTrainer tn(none.model, none.tasks, s);
  tn.run();
  CHECK_FALSE(tn.masks().has_value());
  CHECK(digest_of(none.model) == reference);

  auto iat = small_setup(6);
  s.iat_fraction = 0.5;
  MultitaskTrainer ti(iat.model, iat.tasks, s);
  ti.run();
  CHECK(digest_of(iat.model) != reference);
}

TEST_CASE("IAT masks have the selected cardinality") {
  auto su = small_setup(7);
  for (double alpha : {0.1, 0.3, 0.5, 0.75, 1.0}) {
    auto masks = build_iat_masks(su.model, su.tasks, alpha, SelectMode::Top, 1, {8, 2, 1.0, false}, 0);
    REQUIRE(masks.masks.size() == 2);
    for (const auto& m : masks.masks) {
      std::size_t on = 0;
      for (auto v : m) on += v;
      CHECK(on == head_count_for(alpha, 8));
    }
  }
  // Disjoint top sets give disjoint masks.
  std::vector<double> s1{9, 8, 7, 0, 0, 0, 0, 0}, s2{0, 0, 0, 0, 0, 9, 8, 7};
  auto m1 = membership(select_heads(s1, 2, 4, 0.3, SelectMode::Top), 2, 4);
  auto m2 = membership(select_heads(s2, 2, 4, 0.3, SelectMode::Top), 2, 4);
  for (std::size_t h = 0; h < 8; ++h) CHECK((m1[h] & m2[h]) == 0);

  std::ostringstream csv;
  auto masks = build_iat_masks(su.model, su.tasks, 0.3, SelectMode::Random, 1, {}, 0);
  write_mask_csv(csv, masks, 2, 4);
  CHECK(csv.str().rfind("task,layer,head,mask\ntopic,0,0,", 0) == 0);
}

TEST_CASE("iat_step freezes the slices of masked heads only") {
  auto su = small_setup(8);
  const auto& ex = su.tasks[0].examples;
  const auto batch = all_indices(8);
  const auto total = su.model.config().head_count();

  SUBCASE("all-ones mask equals a plain step") {
    Model plain = su.model;
    Adam ap(AdamConfig{1e-3f, 0.9f, 0.999f, 1e-8f, 0.0, 10}, plain.params());
    Rng r1(1);
    accumulate_batch_gradient(plain, su.tasks[0].task, ex, batch, r1);
    ap.step(plain.params());

    Model masked = su.model;
    Adam am(AdamConfig{1e-3f, 0.9f, 0.999f, 1e-8f, 0.0, 10}, masked.params());
    IatMaskSet ms;
    ms.masks.assign(2, std::vector<std::uint8_t>(total, 1));
    ms.sets.resize(2);
    Rng r2(1);
    iat_step(masked, am, su.tasks[0].task, ex, batch, ms, su.tasks, r2);
    CHECK(digest_of(plain) == digest_of(masked));
  }

  SUBCASE("masked head slices and moments stay put") {
    Model m = su.model;
    Adam opt(AdamConfig{1e-2f, 0.9f, 0.999f, 1e-8f, 0.0, 10}, m.params());
    IatMaskSet ms;
    ms.masks.assign(2, std::vector<std::uint8_t>(total, 1));
    ms.masks[0][1] = 0;  // layer 0, head 1 frozen for task 0
    ms.masks[0][6] = 0;  // layer 1, head 2
    ms.sets.resize(2);
    const auto before = m.params();
    Rng rng(3);
    for (int k = 0; k < 3; ++k) iat_step(m, opt, su.tasks[0].task, ex, batch, ms, su.tasks, rng);
    for (HeadId frozen : {HeadId{0, 1}, HeadId{1, 2}}) {
      for (const auto& s : m.head_slices(frozen)) {
        const auto& now = m.params()[s.param_index].value;
        const auto& old = before[s.param_index].value;
        const auto& mom = opt.first_moments()[s.param_index];
        const std::size_t rows = now.rows(), cols = now.cols();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            const bool in = s.axis == HeadSlice::Axis::Columns ? (c >= s.begin && c < s.begin + s.width)
                                                              : (r >= s.begin && r < s.begin + s.width);
            if (!in) continue;
            CHECK(now[r * cols + c] == old[r * cols + c]);
            CHECK(mom[r * cols + c] == 0.0f);
          }
      }
    }
    // An open head and a feed-forward weight moved.
    const auto open = m.head_slices({0, 0})[0].param_index;
    CHECK_FALSE(same_values(m.params()[open].value, before[open].value));
    const auto ff = *m.find_param("layers.0.ffn.in.weight");
    CHECK_FALSE(same_values(m.params()[ff].value, before[ff].value));
  }

  SUBCASE("a task without a mask entry is rejected") {
    Model m = su.model;
    Adam opt(AdamConfig{}, m.params());
    IatMaskSet ms;
    ms.masks.assign(1, std::vector<std::uint8_t>(total, 1));
    ms.sets.resize(1);
    Rng rng(1);
    CHECK_THROWS_AS(iat_step(m, opt, su.tasks[1].task, su.tasks[1].examples, batch, ms, su.tasks, rng), ShapeError);
  }
}

TEST_CASE("frozen heads stay unchanged on their task's steps during IAT") {
  auto su = small_setup(9);
  auto s = small_schedule(9);
  s.iat_fraction = 0.5;
  MultitaskTrainer t(su.model, su.tasks, s);
  while (!t.finished()) {
    const auto before = su.model.params();
    const auto r = t.step_once();
    if (!r.iat) continue;
    const std::size_t row = r.task == su.tasks[0].task ? 0 : 1;
    const auto& mask = t.masks()->masks[row];
    for (std::size_t flat = 0; flat < mask.size(); ++flat) {
      if (mask[flat]) continue;
      const HeadId h{flat / 4, flat % 4};
      for (const auto& sl : su.model.head_slices(h)) {
        const auto& now = su.model.params()[sl.param_index].value;
        const auto& old = before[sl.param_index].value;
        const std::size_t cols = now.cols();
        for (std::size_t rr = 0; rr < now.rows(); ++rr)
          for (std::size_t c = 0; c < cols; ++c) {
            const bool in = sl.axis == HeadSlice::Axis::Columns ? (c >= sl.begin && c < sl.begin + sl.width)
                                                               : (rr >= sl.begin && rr < sl.begin + sl.width);
            if (in && now[rr * cols + c] != old[rr * cols + c]) FAIL("frozen slice moved at step " << r.step);
          }
      }
    }
  }
}

TEST_CASE("resuming mid-IAT matches the uninterrupted run") {
  auto s = small_schedule(10);
  s.iat_fraction = 0.5;
  auto whole = small_setup(10);
  MultitaskTrainer tw(whole.model, whole.tasks, s);
  std::ostringstream log_whole;
  tw.run(SIZE_MAX, &log_whole);

  auto part = small_setup(10);
  headlab::testing::TempDir dir("resume");
  std::ostringstream log_part;
  {
    MultitaskTrainer tp(part.model, part.tasks, s);
    tp.run(tp.iat_start_step() + 5, &log_part);
    REQUIRE(tp.masks().has_value());
    tp.save(dir.path());
  }
  auto loaded = load_checkpoint(dir.path());
  MultitaskTrainer tr(loaded.model, part.tasks, s);
  tr.restore(loaded.extras);
  CHECK(tr.step() == tr.iat_start_step() + 5);
  tr.run(SIZE_MAX, &log_part);
  CHECK(log_part.str() == log_whole.str());
  CHECK(digest_of(loaded.model) == digest_of(whole.model));

  auto other = s;
  other.seed = 11;
  MultitaskTrainer wrong(loaded.model, part.tasks, other);
  CHECK_THROWS_AS(wrong.restore(loaded.extras), CheckpointError);
}

TEST_CASE("transfer fine-tuning") {
  auto su = small_setup(12);
  auto target = synth_task(SynthKind::Topic, 60, 77, 3, "new");
  auto train = encode_examples(std::span(target.examples).first(40), su.vocab, 16);
  auto dev = encode_examples(std::span(target.examples).subspan(40), su.vocab, 16);
  TransferOptions o;
  o.shots = 16;
  o.epochs = 3;
  o.seed = 5;
  const double a = transfer_finetune(su.model, target.spec, train, dev, o);
  const double b = transfer_finetune(su.model, target.spec, train, dev, o);
  CHECK(a == b);
  CHECK(a >= 0.0);
  CHECK(a <= 1.0);
  CHECK(su.model.task_count() == 2);
  o.shots = 40;
  CHECK_NOTHROW(transfer_finetune(su.model, target.spec, train, dev, o));
  o.shots = 41;
  CHECK_THROWS_AS(transfer_finetune(su.model, target.spec, train, dev, o), DataError);

  // Fine-tuning back onto a task the source model already has a head for.
  o.shots = 16;
  auto own = target.spec;
  own.name = su.model.task(0).name;
  CHECK_NOTHROW(transfer_finetune(su.model, own, train, dev, o));
}

TEST_CASE("paired bootstrap") {
  SUBCASE("three pairs enumerate 27 resamples") {
    // Diffs {+1, +1, -1}: the mean is <= 0 when the -1 is drawn at least twice:
    // 3 * 2 (exactly two) + 1 (three) = 7 of 27.
    std::vector<double> a{1, 1, -1}, b{0, 0, 0};
    std::size_t hits = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) hits += a[i] + a[j] + a[k] <= 0;
    REQUIRE(hits == 7);
    auto r = paired_bootstrap(a, b, 10000, 1);
    CHECK(r.exact);
    CHECK(r.resamples == 27);
    CHECK(r.p_value == doctest::Approx(7.0 / 27.0).epsilon(1e-12));
  }
  SUBCASE("monte carlo agrees with enumeration") {
    std::vector<double> d{0.5, -0.2, 0.1, -0.4, 0.3, 0.05};
    std::vector<double> zero(6, 0.0);
    std::size_t hits = 0, total = 0;
    std::vector<std::size_t> pick(6, 0);
    for (;;) {
      double s = 0;
      for (auto j : pick) s += d[j];
      hits += s <= 0;
      ++total;
      std::size_t pos = 0;
      while (pos < 6 && ++pick[pos] == 6) pick[pos++] = 0;
      if (pos == 6) break;
    }
    auto r = paired_bootstrap(d, zero, 20000, 3);
    CHECK_FALSE(r.exact);
    CHECK(std::abs(r.p_value - static_cast<double>(hits) / static_cast<double>(total)) < 0.01);
  }
  SUBCASE("constant advantage") {
    std::vector<double> a(30), b(30);
    for (int i = 0; i < 30; ++i) a[i] = 0.5 + 0.01 * i, b[i] = a[i] - 0.02;
    CHECK(paired_bootstrap(a, b, 10000, 1).p_value <= 1.0 / 10000);
  }
  SUBCASE("symmetric differences") {
    std::vector<double> a, b;
    for (int i = 1; i <= 25; ++i) {
      a.push_back(0.01 * i), b.push_back(0.0);
      a.push_back(0.0), b.push_back(0.01 * i);
    }
    CHECK(std::abs(paired_bootstrap(a, b, 10000, 2).p_value - 0.5) < 0.05);
  }
  SUBCASE("identical systems") {
    std::vector<double> a{0.3, 0.4, 0.5};
    auto r = paired_bootstrap(a, a, 1000, 1);
    CHECK(r.degenerate);
    CHECK(r.p_value == 1.0);
  }
  SUBCASE("contract") {
    std::vector<double> one{1.0}, two{1.0, 2.0};
    CHECK_THROWS_AS(paired_bootstrap(one, one, 100, 1), ShapeError);
    CHECK_THROWS_AS(paired_bootstrap(one, two, 100, 1), ShapeError);
  }
}
