#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "headlab/model.hpp"

namespace headlab {

enum class Paradigm { Single, Pair };
enum class Metric { Accuracy, F1, Matthews, Spearman };

std::string to_string(Paradigm p);
std::string to_string(Metric m);
Paradigm paradigm_from_string(const std::string& s);
Metric metric_from_string(const std::string& s);

struct TaskSpec {
  std::string name;
  Paradigm paradigm = Paradigm::Single;
  TaskKind kind = TaskKind::Classification;
  std::size_t n_class = 2;  // 1 for regression
  Metric metric = Metric::Accuracy;

  /// Spearman iff regression; n_class >= 2 for classification.
  void validate() const;
};

struct LabeledExample {
  std::string text_a;
  std::optional<std::string> text_b;
  double label = 0.0;
};

struct Dataset {
  TaskSpec spec;
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> dev;
};

/// `label<TAB>text` or `label<TAB>textA<TAB>textB`. Blank lines are skipped.
/// Errors name the 1-based line number.
std::vector<LabeledExample> read_tsv(std::istream& in, const TaskSpec& spec);
std::vector<LabeledExample> read_tsv(const std::filesystem::path& path, const TaskSpec& spec);
void write_tsv(std::ostream& out, const TaskSpec& spec, std::span<const LabeledExample> examples);

/// Seeded shuffle, then the first round(train_fraction * N) examples train
/// (at least one on each side when N >= 2).
Dataset split_dataset(const TaskSpec& spec, std::vector<LabeledExample> examples, std::uint64_t seed,
                      double train_fraction = 0.9);

/// Loads a training file and splits it, or uses dev_path as the dev split.
Dataset load_tsv(const std::filesystem::path& path, const TaskSpec& spec, std::uint64_t seed,
                 double train_fraction = 0.9, const std::optional<std::filesystem::path>& dev_path = {});

/// Lowercased whitespace-separated words.
std::vector<std::string> words(const std::string& text);

class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0, kUnk = 1, kCls = 2, kSep = 3;

  Vocabulary();
  /// Specials followed by every word seen at least min_freq times, sorted.
  static Vocabulary build(std::span<const std::string> texts, std::size_t min_freq = 1);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::int32_t id(const std::string& word) const;
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

/// Texts of the given examples (both halves of pairs), for vocabulary building.
std::vector<std::string> example_texts(std::span<const LabeledExample> examples);

/// Padded to max_len; `length` positions are real tokens.
struct TokenizedInput {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> segments;
  std::size_t length = 0;

  EncodedInput encoded() const;
};

/// Word counts kept after truncating a pair to the given budget: the longer
/// side loses a word until the pair fits; ties trim the second side.
std::pair<std::size_t, std::size_t> pair_truncation(std::size_t len_a, std::size_t len_b, std::size_t budget);

/// [CLS] a [SEP] or [CLS] a [SEP] b [SEP], segment 1 on the b half.
/// Requires max_len >= 2 (single) or >= 3 (pair).
TokenizedInput tokenize(const std::string& text_a, const std::optional<std::string>& text_b,
                        const Vocabulary& vocab, std::size_t max_len);

std::vector<Example> encode_examples(std::span<const LabeledExample> examples, const Vocabulary& vocab,
                                     std::size_t max_len);

/// Sample-pairing output. pairs[k] joins samples index_pairs[k]; label 1 = same class.
struct PairDataset {
  std::vector<LabeledExample> pairs;
  std::vector<std::pair<std::size_t, std::size_t>> index_pairs;
  std::vector<std::size_t> usage;
  std::size_t same = 0;
  std::size_t different = 0;
  std::vector<std::string> violations;
};

/// Every sample appears in exactly two pairs. Same and different pairs split
/// evenly (off by one for odd N) whenever the class sizes allow it; samples
/// mostly get one partner of each kind. Unreachable balance is listed in
/// `violations`.
PairDataset make_pair_dataset(std::span<const LabeledExample> samples, std::uint64_t seed);

enum class SynthKind { Topic, MarkerParity, PairEquality, PairContainment, LengthRatio };
std::string to_string(SynthKind k);
SynthKind synth_kind_from_string(const std::string& s);

struct SynthTask {
  TaskSpec spec;
  std::vector<LabeledExample> examples;
};

/// Generators with disjoint word families per kind:
///  topic             k topics of 8 words each plus 30 shared fillers; 6-12 words,
///                    2-4 of them from the label's topic.
///  marker-parity     12 filler words with 0-11 copies of the marker inserted;
///                    label = marker count mod 2.
///  pair-equality     a = 2-4 words over 16; b = a (label 1) or a fresh draw
///                    of the same length that differs from a (label 0).
///  pair-containment  a = 4-6 distinct words over 16; b = 2 words, label 1 iff
///                    both occur in a.
///  length-ratio      a, b of 1-8 filler words; label = |a| / (|a| + |b|).
/// Class labels are balanced (within one). Throws ConfigError if
/// size < 2 * n_class.
SynthTask synth_task(SynthKind kind, std::size_t size, std::uint64_t seed, std::size_t n_class = 4,
                     const std::string& name = {});

/// Predictions are class indices or real values.
double evaluate(std::span<const double> predictions, std::span<const double> golds, Metric metric);

}  // namespace headlab
