#include "headlab/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "headlab/error.hpp"
#include "headlab/rng.hpp"
#include "headlab/stats.hpp"

namespace headlab {

std::string to_string(Paradigm p) { return p == Paradigm::Pair ? "pair" : "single"; }

std::string to_string(Metric m) {
  switch (m) {
    case Metric::Accuracy: return "accuracy";
    case Metric::F1: return "f1";
    case Metric::Matthews: return "matthews";
    case Metric::Spearman: return "spearman";
  }
  return "accuracy";
}

Paradigm paradigm_from_string(const std::string& s) {
  if (s == "single") return Paradigm::Single;
  if (s == "pair") return Paradigm::Pair;
  throw ConfigError("unknown paradigm '" + s + "' (single, pair)");
}

Metric metric_from_string(const std::string& s) {
  if (s == "accuracy") return Metric::Accuracy;
  if (s == "f1") return Metric::F1;
  if (s == "matthews") return Metric::Matthews;
  if (s == "spearman") return Metric::Spearman;
  throw ConfigError("unknown metric '" + s + "' (accuracy, f1, matthews, spearman)");
}

void TaskSpec::validate() const {
  if (name.empty()) throw ConfigError("task name must not be empty");
  const bool regression = kind == TaskKind::Regression;
  if (regression != (metric == Metric::Spearman)) {
    throw ConfigError("task '" + name + "': spearman is the metric for regression and only for regression");
  }
  if (!regression && n_class < 2) throw ConfigError("task '" + name + "': n_class must be >= 2");
  if ((metric == Metric::F1 || metric == Metric::Matthews) && n_class != 2) {
    throw ConfigError("task '" + name + "': f1 and matthews need a binary task");
  }
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_label(const std::string& field, const TaskSpec& spec, std::size_t line_no) {
  auto fail = [&](const std::string& why) {
    return DataError("line " + std::to_string(line_no) + ": " + why);
  };
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(field, &used);
  } catch (const std::exception&) {
    throw fail("label '" + field + "' is not a number");
  }
  if (used != field.size() || !std::isfinite(v)) throw fail("label '" + field + "' is not a number");
  if (spec.kind == TaskKind::Classification) {
    if (v != std::floor(v) || v < 0 || v >= static_cast<double>(spec.n_class)) {
      throw fail("label '" + field + "' is not a class index below " + std::to_string(spec.n_class));
    }
  }
  return v;
}

std::string format_label(double v, const TaskSpec& spec) {
  char buf[64];
  if (spec.kind == TaskKind::Classification) std::snprintf(buf, sizeof buf, "%d", static_cast<int>(v));
  else std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<LabeledExample> read_tsv(std::istream& in, const TaskSpec& spec) {
  const std::size_t columns = spec.paradigm == Paradigm::Pair ? 3 : 2;
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != columns) {
      throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(columns) +
                      " tab-separated columns for a " + to_string(spec.paradigm) + " task, found " +
                      std::to_string(fields.size()));
    }
    LabeledExample e;
    e.label = parse_label(fields[0], spec, line_no);
    e.text_a = fields[1];
    if (columns == 3) e.text_b = fields[2];
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<LabeledExample> read_tsv(const std::filesystem::path& path, const TaskSpec& spec) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return read_tsv(in, spec);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_tsv(std::ostream& out, const TaskSpec& spec, std::span<const LabeledExample> examples) {
  for (const auto& e : examples) {
    const bool pair = spec.paradigm == Paradigm::Pair;
    if (pair != e.text_b.has_value()) throw DataError("write_tsv: example does not match the task paradigm");
    auto check = [](const std::string& s) {
      if (s.find_first_of("\t\n\r") != std::string::npos) throw DataError("write_tsv: text contains a tab or newline");
    };
    check(e.text_a);
    out << format_label(e.label, spec) << '\t' << e.text_a;
    if (pair) {
      check(*e.text_b);
      out << '\t' << *e.text_b;
    }
    out << '\n';
  }
}

Dataset split_dataset(const TaskSpec& spec, std::vector<LabeledExample> examples, std::uint64_t seed,
                      double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
  Rng rng(seed);
  rng.shuffle(examples.begin(), examples.end());
  const std::size_t n = examples.size();
  auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 0.5));
  if (n >= 2) n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  Dataset d;
  d.spec = spec;
  d.train.assign(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.dev.assign(examples.begin() + static_cast<std::ptrdiff_t>(n_train), examples.end());
  return d;
}

Dataset load_tsv(const std::filesystem::path& path, const TaskSpec& spec, std::uint64_t seed,
                 double train_fraction, const std::optional<std::filesystem::path>& dev_path) {
  spec.validate();
  auto examples = read_tsv(path, spec);
  if (examples.empty()) throw DataError(path.string() + ": no examples");
  if (dev_path) {
    Dataset d{spec, std::move(examples), read_tsv(*dev_path, spec)};
    return d;
  }
  return split_dataset(spec, std::move(examples), seed, train_fraction);
}

std::vector<std::string> words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    out.push_back(std::move(w));
  }
  return out;
}

Vocabulary::Vocabulary() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[SEP]"} {
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<std::int32_t>(i));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  const std::vector<std::string> specials{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  if (tokens.empty()) tokens = specials;
  if (tokens.size() < 4 || !std::equal(specials.begin(), specials.end(), tokens.begin())) {
    throw DataError("vocabulary must start with [PAD] [UNK] [CLS] [SEP]");
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.index_.clear();
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<std::int32_t>(i)).second) {
      throw DataError("vocabulary lists '" + v.tokens_[i] + "' twice");
    }
  }
  return v;
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, std::size_t min_freq) {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts)
    for (auto& w : words(t)) ++counts[w];
  std::vector<std::string> tokens{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  for (const auto& [w, c] : counts)
    if (c >= std::max<std::size_t>(min_freq, 1) && std::find(tokens.begin(), tokens.end(), w) == tokens.end())
      tokens.push_back(w);
  return from_tokens(std::move(tokens));
}

std::int32_t Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::string> example_texts(std::span<const LabeledExample> examples) {
  std::vector<std::string> out;
  for (const auto& e : examples) {
    out.push_back(e.text_a);
    if (e.text_b) out.push_back(*e.text_b);
  }
  return out;
}

EncodedInput TokenizedInput::encoded() const {
  return {std::vector<std::int32_t>(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(length)),
          std::vector<std::int32_t>(segments.begin(), segments.begin() + static_cast<std::ptrdiff_t>(length))};
}

std::pair<std::size_t, std::size_t> pair_truncation(std::size_t len_a, std::size_t len_b, std::size_t budget) {
  while (len_a + len_b > budget) {
    if (len_a > len_b) --len_a;
    else --len_b;
  }
  return {len_a, len_b};
}

TokenizedInput tokenize(const std::string& text_a, const std::optional<std::string>& text_b,
                        const Vocabulary& vocab, std::size_t max_len) {
  const std::size_t specials = text_b ? 3 : 2;
  if (max_len < specials) {
    throw ShapeError("max_len " + std::to_string(max_len) + " leaves no room for the special tokens");
  }
  auto a = words(text_a);
  std::vector<std::string> b = text_b ? words(*text_b) : std::vector<std::string>{};
  if (text_b) {
    auto [ka, kb] = pair_truncation(a.size(), b.size(), max_len - specials);
    a.resize(ka);
    b.resize(kb);
  } else if (a.size() > max_len - specials) {
    a.resize(max_len - specials);
  }
  TokenizedInput t;
  t.ids.push_back(Vocabulary::kCls);
  for (const auto& w : a) t.ids.push_back(vocab.id(w));
  t.ids.push_back(Vocabulary::kSep);
  t.segments.assign(t.ids.size(), 0);
  if (text_b) {
    for (const auto& w : b) t.ids.push_back(vocab.id(w));
    t.ids.push_back(Vocabulary::kSep);
    t.segments.resize(t.ids.size(), 1);
  }
  t.length = t.ids.size();
  t.ids.resize(max_len, Vocabulary::kPad);
  t.segments.resize(max_len, 0);
  return t;
}

std::vector<Example> encode_examples(std::span<const LabeledExample> examples, const Vocabulary& vocab,
                                     std::size_t max_len) {
  std::vector<Example> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back({tokenize(e.text_a, e.text_b, vocab, max_len).encoded(), e.label});
  return out;
}

PairDataset make_pair_dataset(std::span<const LabeledExample> samples, std::uint64_t seed) {
  const std::size_t n = samples.size();
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) {
    if (samples[i].text_b) throw DataError("make_pair_dataset: input must be single-sentence");
    by_class[static_cast<int>(samples[i].label)].push_back(i);
  }
  if (by_class.size() < 2) throw DataError("make_pair_dataset: needs at least two classes");
  for (const auto& [c, idx] : by_class)
    if (idx.size() < 2) throw DataError("make_pair_dataset: class " + std::to_string(c) + " has fewer than two samples");

  Rng rng(seed);
  std::vector<std::vector<std::size_t>> classes;
  for (auto& [c, idx] : by_class) {
    rng.shuffle(idx.begin(), idx.end());
    classes.push_back(idx);
  }
  rng.shuffle(classes.begin(), classes.end());
  const std::size_t k = classes.size();

  // Each class starts as a cycle of same-class pairs giving every member two
  // slots. Cutting an edge frees its two endpoints for cross-class pairs, so
  // a class contributes an even number e_c of cross slots. With D cross pairs
  // wanted, the cross slots can all meet another class iff every e_c <= D.
  auto plan = [&](std::size_t d, bool capped) -> std::optional<std::vector<std::size_t>> {
    std::vector<std::size_t> e(k), cap(k);
    std::size_t total = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t m = classes[c].size();
      cap[c] = capped ? std::min(2 * m, d - d % 2) : 2 * m;
      e[c] = std::min(m - m % 2, cap[c]);
      total += e[c];
    }
    std::vector<std::size_t> by_size(k);
    std::iota(by_size.begin(), by_size.end(), 0);
    std::stable_sort(by_size.begin(), by_size.end(),
                     [&](std::size_t a, std::size_t b) { return classes[a].size() < classes[b].size(); });
    // Odd classes first get their extra slot, then any class with room.
    for (int pass = 0; pass < 2 && total < 2 * d; ++pass)
      for (bool grew = true; grew && total < 2 * d;) {
        grew = false;
        for (auto c : by_size) {
          if (total >= 2 * d) break;
          if (pass == 0 && (classes[c].size() % 2 == 0 || e[c] > classes[c].size())) continue;
          if (e[c] + 2 <= cap[c]) {
            e[c] += 2;
            total += 2;
            grew = true;
          }
        }
      }
    if (total != 2 * d) return std::nullopt;
    return e;
  };
  const std::size_t d_hi = n - n / 2, d_lo = n / 2;
  auto e = plan(d_hi, true);
  if (!e) e = plan(d_lo, true);
  if (!e) e = plan(d_hi, false);

  std::vector<std::pair<std::size_t, std::size_t>> same_pairs;
  std::vector<std::vector<std::size_t>> cross_slots(k);
  for (std::size_t c = 0; c < k; ++c) {
    const auto& m = classes[c];
    const std::size_t len = m.size();
    // Cut edges (m[i], m[i+1]) at even i first so freed slots land on distinct samples.
    std::vector<char> cut(len, 0);
    std::size_t cuts = (*e)[c] / 2;
    for (std::size_t start : {std::size_t{0}, std::size_t{1}})
      for (std::size_t i = start; i < len && cuts > 0; i += 2) {
        if (start == 0 && len % 2 == 1 && i == len - 1) continue;
        cut[i] = 1;
        --cuts;
      }
    if (cuts > 0) cut[len - 1] = 1;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t a = m[i], b = m[(i + 1) % len];
      if (cut[i]) {
        cross_slots[c].push_back(a);
        cross_slots[c].push_back(b);
      } else {
        same_pairs.emplace_back(a, b);
      }
    }
  }

  PairDataset out;
  out.usage.assign(n, 0);
  auto emit = [&](std::size_t a, std::size_t b) {
    if (rng.uniform() < 0.5) std::swap(a, b);
    out.index_pairs.emplace_back(a, b);
    ++out.usage[a];
    ++out.usage[b];
  };
  for (auto [a, b] : same_pairs) emit(a, b);

  // Cross slots grouped by class, largest group first; slot i meets slot
  // i + X/2, which lies in another group whenever no group exceeds X/2.
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return cross_slots[a].size() > cross_slots[b].size(); });
  std::vector<std::size_t> flat;
  for (auto c : order) flat.insert(flat.end(), cross_slots[c].begin(), cross_slots[c].end());
  const std::size_t half = flat.size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    std::size_t j = i + half;
    if (flat[i] == flat[j]) {
      // Only reachable with a dominant class: trade partners with a neighbour.
      const std::size_t t = (j + 1 < flat.size()) ? j + 1 : half;
      std::swap(flat[j], flat[t]);
    }
    emit(flat[i], flat[j]);
  }

  auto label_of = [&](std::size_t i) { return static_cast<int>(samples[i].label); };
  rng.shuffle(out.index_pairs.begin(), out.index_pairs.end());
  for (auto [a, b] : out.index_pairs) {
    const bool same = label_of(a) == label_of(b);
    out.pairs.push_back({samples[a].text_a, samples[b].text_a, same ? 1.0 : 0.0});
    ++(same ? out.same : out.different);
  }

  std::size_t wrong_usage = 0;
  for (auto u : out.usage) wrong_usage += u != 2;
  if (wrong_usage) out.violations.push_back(std::to_string(wrong_usage) + " samples not used exactly twice");
  const std::size_t lo = n / 2, hi = n - n / 2;
  if (!((out.same == lo && out.different == hi) || (out.same == hi && out.different == lo))) {
    out.violations.push_back("class balance " + std::to_string(out.same) + " same / " +
                             std::to_string(out.different) + " different (exact balance is infeasible for these class sizes)");
  }
  for (auto [a, b] : out.index_pairs)
    if (a == b) {
      out.violations.push_back("a sample was paired with itself");
      break;
    }
  return out;
}

std::string to_string(SynthKind k) {
  switch (k) {
    case SynthKind::Topic: return "topic";
    case SynthKind::MarkerParity: return "marker-parity";
    case SynthKind::PairEquality: return "pair-equality";
    case SynthKind::PairContainment: return "pair-containment";
    case SynthKind::LengthRatio: return "length-ratio";
  }
  return "topic";
}

SynthKind synth_kind_from_string(const std::string& s) {
  for (auto k : {SynthKind::Topic, SynthKind::MarkerParity, SynthKind::PairEquality, SynthKind::PairContainment,
                 SynthKind::LengthRatio})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown synthetic task kind '" + s +
                    "' (topic, marker-parity, pair-equality, pair-containment, length-ratio)");
}

namespace {

std::string join(const std::vector<std::string>& ws) {
  std::string s;
  for (const auto& w : ws) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

std::string word(const char* family, std::size_t i) { return std::string(family) + std::to_string(i); }

// Balanced labels in shuffled order.
std::vector<int> balanced_labels(std::size_t size, std::size_t n_class, Rng& rng) {
  std::vector<int> labels(size);
  for (std::size_t i = 0; i < size; ++i) labels[i] = static_cast<int>(i % n_class);
  rng.shuffle(labels.begin(), labels.end());
  return labels;
}

std::size_t uniform_int(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

}  // namespace

SynthTask synth_task(SynthKind kind, std::size_t size, std::uint64_t seed, std::size_t n_class,
                     const std::string& name) {
  SynthTask t;
  t.spec.name = name.empty() ? to_string(kind) : name;
  t.spec.kind = kind == SynthKind::LengthRatio ? TaskKind::Regression : TaskKind::Classification;
  t.spec.paradigm = (kind == SynthKind::Topic || kind == SynthKind::MarkerParity) ? Paradigm::Single : Paradigm::Pair;
  t.spec.n_class = kind == SynthKind::Topic ? n_class : (kind == SynthKind::LengthRatio ? 1 : 2);
  t.spec.metric = kind == SynthKind::LengthRatio ? Metric::Spearman : Metric::Accuracy;
  t.spec.validate();
  if (size < 2 * t.spec.n_class) {
    throw ConfigError("synthetic task '" + t.spec.name + "': size " + std::to_string(size) + " is below 2 * n_class");
  }
  Rng rng(seed);
  const auto labels = balanced_labels(size, t.spec.n_class, rng);
  for (std::size_t i = 0; i < size; ++i) {
    LabeledExample e;
    e.label = labels[i];
    switch (kind) {
      case SynthKind::Topic: {
        const std::size_t len = uniform_int(rng, 6, 12), topical = uniform_int(rng, 2, 4);
        std::vector<std::string> ws;
        for (std::size_t k = 0; k < topical; ++k)
          ws.push_back("topic" + std::to_string(labels[i]) + "_" + std::to_string(rng.below(8)));
        while (ws.size() < len) ws.push_back(word("fill", rng.below(30)));
        rng.shuffle(ws.begin(), ws.end());
        e.text_a = join(ws);
        break;
      }
      case SynthKind::MarkerParity: {
        // Marker count with the label's parity: {0, 2, ..., 10} or {1, 3, ..., 11}.
        // Wide count ranges keep the task from saturating within a few epochs.
        const std::size_t count = static_cast<std::size_t>(labels[i]) + 2 * rng.below(6);
        std::vector<std::string> ws;
        for (int k = 0; k < 12; ++k) ws.push_back(word("pad", rng.below(20)));
        for (std::size_t k = 0; k < count; ++k) ws.insert(ws.begin() + static_cast<std::ptrdiff_t>(rng.below(ws.size() + 1)), "marker");
        e.text_a = join(ws);
        break;
      }
      case SynthKind::PairEquality: {
        const std::size_t len = uniform_int(rng, 2, 4);
        std::vector<std::string> a(len), b;
        for (auto& w : a) w = word("eq", rng.below(16));
        b = a;
        if (labels[i] == 0) {
          do {
            for (auto& w : b) w = word("eq", rng.below(16));
          } while (b == a);
        }
        e.text_a = join(a);
        e.text_b = join(b);
        break;
      }
      case SynthKind::PairContainment: {
        std::vector<std::size_t> pool(16);
        std::iota(pool.begin(), pool.end(), 0);
        rng.shuffle(pool.begin(), pool.end());
        const std::size_t len = uniform_int(rng, 4, 6);
        std::vector<std::string> a, b;
        for (std::size_t k = 0; k < len; ++k) a.push_back(word("ct", pool[k]));
        b.push_back(a[rng.below(len)]);
        if (labels[i] == 1) b.push_back(a[rng.below(len)]);
        else b.push_back(word("ct", pool[len + rng.below(16 - len)]));
        rng.shuffle(b.begin(), b.end());
        e.text_a = join(a);
        e.text_b = join(b);
        break;
      }
      case SynthKind::LengthRatio: {
        const std::size_t la = uniform_int(rng, 1, 8), lb = uniform_int(rng, 1, 8);
        std::vector<std::string> a, b;
        for (std::size_t k = 0; k < la; ++k) a.push_back(word("len", rng.below(10)));
        for (std::size_t k = 0; k < lb; ++k) b.push_back(word("len", rng.below(10)));
        e.text_a = join(a);
        e.text_b = join(b);
        e.label = static_cast<double>(la) / static_cast<double>(la + lb);
        break;
      }
    }
    t.examples.push_back(std::move(e));
  }
  return t;
}

double evaluate(std::span<const double> predictions, std::span<const double> golds, Metric metric) {
  if (predictions.size() != golds.size()) {
    throw ShapeError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(golds.size()) + " golds");
  }
  if (golds.empty()) throw ShapeError("evaluate: no examples");
  const std::size_t n = golds.size();
  if (metric == Metric::Spearman) return spearman(predictions, golds).value_or(0.0);
  if (metric == Metric::Accuracy) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < n; ++i) hit += predictions[i] == golds[i];
    return static_cast<double>(hit) / static_cast<double>(n);
  }
  double tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool p = predictions[i] == 1.0, g = golds[i] == 1.0;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
    tn += !p && !g;
  }
  if (metric == Metric::F1) return tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  return denom == 0.0 ? 0.0 : (tp * tn - fp * fn) / std::sqrt(denom);
}

}  // namespace headlab
