#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace metabridge::data {

/// One (profile, attribute value) pair. label: 1 = the value is incorrect for
/// the product (the positive class everywhere in this project), 0 = correct,
/// absent = unlabeled.
struct ProductRecord {
  std::string category_id;
  std::string product_id;
  std::string profile;
  std::string value;
  std::optional<int> label;

  bool operator==(const ProductRecord&) const = default;
};

/// A few-shot task for one category: N unlabeled support records plus K
/// labeled query records, disjoint by product_id.
struct Episode {
  std::string category_id;
  std::vector<ProductRecord> support;  // labels stripped on construction
  std::vector<ProductRecord> query;    // labels guaranteed present
};

/// Category-disjoint train/val/test partition.
struct DatasetSplit {
  std::map<std::string, std::vector<ProductRecord>> train;
  std::map<std::string, std::vector<ProductRecord>> val;
  std::map<std::string, std::vector<ProductRecord>> test;
};

/// Token table with fixed reserved ids. Unknown tokens map to [UNK].
class Vocab {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kCls = 1;
  static constexpr int32_t kUnk = 2;

  /// Reserved-only vocabulary.
  Vocab();
  /// Reserved ids followed by `tokens` in the given order.
  explicit Vocab(const std::vector<std::string>& tokens);

  int32_t id_of(const std::string& token) const;
  const std::string& token_of(int32_t id) const;
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  int64_t size() const { return static_cast<int64_t>(tokens_.size()); }

  /// One `token<TAB>id` line per id, UTF-8, LF endings.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int32_t> ids_;
};

/// Lowercase + whitespace split.
std::vector<std::string> tokenize(const std::string& text);

/// One JSON object per line with keys category, product_id, profile, value
/// and optional label (0, 1, or null). Errors name the offending line.
std::vector<ProductRecord> load_jsonl(const std::filesystem::path& path);
void save_jsonl(const std::filesystem::path& path, const std::vector<ProductRecord>& records);

/// Shuffle categories with the seeded RNG, then partition them in proportion
/// to `ratio` using largest-remainder rounding.
DatasetSplit split_by_category(const std::vector<ProductRecord>& records,
                               const std::array<int64_t, 3>& ratio, uint64_t seed);

/// Uniform support sample without replacement, query from the remainder.
Episode sample_episode(const std::vector<ProductRecord>& pool, const std::string& category_id,
                       int64_t n_support, int64_t n_query, uint64_t seed);

/// Synthetic correctness-validation tasks. Each category owns a private word
/// pool split into value words, context words, and distractor words; a record's
/// value is a two-marker phrase `m1 m2 word` whose markers come from a shared
/// valid/invalid marker inventory with a small per-marker ambiguity. Correct
/// records embed their value phrase verbatim in the profile; incorrect records
/// pair the profile either with one of its own context words (present, wrong
/// role) or with a distractor word (absent from every profile). Labels are
/// exact for noise_rate = 0 and per-category balance is an exact 50/50 split.
std::vector<ProductRecord> generate_synthetic(int64_t n_categories, int64_t per_category,
                                              int64_t vocab_size, double noise_rate,
                                              uint64_t seed);

/// Tokens with frequency >= min_freq across profiles and values, ordered by
/// (descending frequency, lexicographic), after the reserved ids.
Vocab build_vocab(const std::vector<ProductRecord>& records, int64_t min_freq);

}  // namespace metabridge::data
