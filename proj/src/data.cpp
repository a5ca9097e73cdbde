#include "metabridge/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"
#include "metabridge/rng.hpp"

namespace metabridge::data {

namespace {

using nlohmann::json;

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void line_error(const std::string& what, size_t line) {
  throw std::runtime_error(what + " at line " + std::to_string(line));
}

std::string require_string(const json& obj, const char* key, size_t line) {
  if (!obj.contains(key) || obj.at(key).is_null()) {
    line_error(std::string("missing field ") + key, line);
  }
  if (!obj.at(key).is_string()) {
    line_error(std::string("field ") + key + " must be a string", line);
  }
  return obj.at(key).get<std::string>();
}

}  // namespace

Vocab::Vocab() : tokens_{"[PAD]", "[CLS]", "[UNK]"} {
  for (size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<int32_t>(i));
}

Vocab::Vocab(const std::vector<std::string>& tokens) : Vocab() {
  for (const std::string& t : tokens) {
    if (!ids_.emplace(t, static_cast<int32_t>(tokens_.size())).second) {
      throw std::invalid_argument("vocab: duplicate token '" + t + "'");
    }
    tokens_.push_back(t);
  }
}

int32_t Vocab::id_of(const std::string& token) const {
  const auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocab::token_of(int32_t id) const {
  if (id < 0 || static_cast<size_t>(id) >= tokens_.size()) {
    throw std::invalid_argument("vocab: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<size_t>(id)];
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);  // binary keeps LF endings everywhere
  if (!out) throw std::runtime_error("vocab: cannot open " + path.string() + " for writing");
  for (size_t i = 0; i < tokens_.size(); ++i) {
    out << tokens_[i] << '\t' << i << '\n';
  }
  if (!out.good()) throw std::runtime_error("vocab: write to " + path.string() + " failed");
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("vocab: cannot open " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) line_error("vocab: missing tab separator", line_no);
    const std::string token = line.substr(0, tab);
    const int64_t id = std::stoll(line.substr(tab + 1));
    if (id != static_cast<int64_t>(tokens.size())) {
      line_error("vocab: ids must be contiguous from 0", line_no);
    }
    tokens.push_back(token);
  }
  if (tokens.size() < 3 || tokens[0] != "[PAD]" || tokens[1] != "[CLS]" || tokens[2] != "[UNK]") {
    throw std::runtime_error("vocab: " + path.string() + " lacks the reserved [PAD]/[CLS]/[UNK] header");
  }
  return Vocab(std::vector<std::string>(tokens.begin() + 3, tokens.end()));
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string current;
  for (const char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) {
        out.push_back(std::move(current));
        current.clear();
      }
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::vector<ProductRecord> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_jsonl: cannot open " + path.string());
  std::vector<ProductRecord> records;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      line_error(std::string("malformed JSON (") + e.what() + ")", line_no);
    }
    if (!obj.is_object()) line_error("record must be a JSON object", line_no);
    ProductRecord rec;
    rec.category_id = require_string(obj, "category", line_no);
    rec.profile = require_string(obj, "profile", line_no);
    rec.value = require_string(obj, "value", line_no);
    rec.product_id = require_string(obj, "product_id", line_no);
    if (trim(rec.category_id).empty()) line_error("empty field category", line_no);
    if (trim(rec.profile).empty()) line_error("empty field profile", line_no);
    if (trim(rec.value).empty()) line_error("empty field value", line_no);
    if (obj.contains("label") && !obj.at("label").is_null()) {
      const json& lab = obj.at("label");
      if (!lab.is_number_integer() || (lab.get<int64_t>() != 0 && lab.get<int64_t>() != 1)) {
        line_error("label must be 0, 1, or null", line_no);
      }
      rec.label = static_cast<int>(lab.get<int64_t>());
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void save_jsonl(const std::filesystem::path& path, const std::vector<ProductRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_jsonl: cannot open " + path.string() + " for writing");
  for (const ProductRecord& rec : records) {
    json obj;
    obj["category"] = rec.category_id;
    obj["product_id"] = rec.product_id;
    obj["profile"] = rec.profile;
    obj["value"] = rec.value;
    if (rec.label.has_value()) {
      obj["label"] = *rec.label;
    } else {
      obj["label"] = nullptr;
    }
    out << obj.dump() << '\n';
  }
  if (!out.good()) throw std::runtime_error("save_jsonl: write to " + path.string() + " failed");
}

DatasetSplit split_by_category(const std::vector<ProductRecord>& records,
                               const std::array<int64_t, 3>& ratio, uint64_t seed) {
  for (const int64_t r : ratio) {
    if (r <= 0) throw std::invalid_argument("split_by_category: ratio components must be positive");
  }
  std::set<std::string> category_set;
  for (const ProductRecord& rec : records) category_set.insert(rec.category_id);
  std::vector<std::string> categories(category_set.begin(), category_set.end());
  const int64_t n = static_cast<int64_t>(categories.size());
  if (n < 3) {
    throw std::invalid_argument("split_by_category: need at least 3 categories, got " +
                                std::to_string(n));
  }
  Rng rng(mix_seed(seed, rngtag::kSplit));
  rng.shuffle(categories);

  // Largest-remainder apportionment of n categories over the three parts.
  const double total = static_cast<double>(ratio[0] + ratio[1] + ratio[2]);
  std::array<int64_t, 3> counts{};
  std::array<double, 3> remainders{};
  int64_t assigned = 0;
  for (size_t i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * static_cast<double>(ratio[i]) / total;
    counts[i] = static_cast<int64_t>(exact);
    remainders[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  for (int64_t left = n - assigned; left > 0; --left) {
    size_t best = 0;
    for (size_t i = 1; i < 3; ++i) {
      if (remainders[i] > remainders[best]) best = i;
    }
    ++counts[best];
    remainders[best] = -1.0;
  }

  std::unordered_map<std::string, int> part_of;
  int64_t cursor = 0;
  for (size_t part = 0; part < 3; ++part) {
    for (int64_t i = 0; i < counts[part]; ++i) {
      part_of.emplace(categories[static_cast<size_t>(cursor++)], static_cast<int>(part));
    }
  }

  DatasetSplit split;
  for (const ProductRecord& rec : records) {
    switch (part_of.at(rec.category_id)) {
      case 0: split.train[rec.category_id].push_back(rec); break;
      case 1: split.val[rec.category_id].push_back(rec); break;
      default: split.test[rec.category_id].push_back(rec); break;
    }
  }
  return split;
}

Episode sample_episode(const std::vector<ProductRecord>& pool, const std::string& category_id,
                       int64_t n_support, int64_t n_query, uint64_t seed) {
  if (n_support < 1 || n_query < 1) {
    throw std::invalid_argument("sample_episode: support and query sizes must be >= 1");
  }
  const int64_t n = static_cast<int64_t>(pool.size());
  if (n < n_support + n_query) {
    throw std::invalid_argument("sample_episode: category " + category_id + " has " +
                                std::to_string(n) + " records, need " +
                                std::to_string(n_support + n_query));
  }
  for (const ProductRecord& rec : pool) {
    if (rec.category_id != category_id) {
      throw std::invalid_argument("sample_episode: record " + rec.product_id +
                                  " belongs to category " + rec.category_id + ", not " +
                                  category_id);
    }
  }
  Rng rng(seed);
  const std::vector<int64_t> picks = rng.sample_without_replacement(n, n_support + n_query);
  Episode ep;
  ep.category_id = category_id;
  ep.support.reserve(static_cast<size_t>(n_support));
  ep.query.reserve(static_cast<size_t>(n_query));
  for (int64_t i = 0; i < n_support; ++i) {
    ProductRecord rec = pool[static_cast<size_t>(picks[static_cast<size_t>(i)])];
    rec.label.reset();  // the support set is unlabeled by protocol
    ep.support.push_back(std::move(rec));
  }
  for (int64_t i = n_support; i < n_support + n_query; ++i) {
    const ProductRecord& rec = pool[static_cast<size_t>(picks[static_cast<size_t>(i)])];
    if (!rec.label.has_value()) {
      throw std::invalid_argument("sample_episode: query record " + rec.product_id +
                                  " has no label");
    }
    ep.query.push_back(rec);
  }
  return ep;
}

std::vector<ProductRecord> generate_synthetic(int64_t n_categories, int64_t per_category,
                                              int64_t vocab_size, double noise_rate,
                                              uint64_t seed) {
  if (n_categories < 1 || per_category < 1 || vocab_size < 1) {
    throw std::invalid_argument("generate_synthetic: counts must be positive");
  }
  if (noise_rate < 0.0 || noise_rate >= 0.5) {
    throw std::invalid_argument("generate_synthetic: noise_rate must be in [0, 0.5)");
  }

  // Shared inventory: filler words plus the valid/invalid marker tokens that
  // carry the transferable signal across categories.
  constexpr int64_t kFillers = 16;
  constexpr int64_t kMarkersPerClass = 6;
  // Probability that a phrase marker contradicts the record's correctness.
  constexpr double kMarkerAmbiguity = 0.12;
  const int64_t shared = kFillers + 2 * kMarkersPerClass;
  const int64_t pool_per_category = (vocab_size - shared) / n_categories;
  if (pool_per_category < 3) {
    throw std::invalid_argument(
        "generate_synthetic: vocab_size " + std::to_string(vocab_size) + " leaves fewer than 3 "
        "private words per category (need at least " +
        std::to_string(shared + 3 * n_categories) + ")");
  }
  const int64_t n_val = (pool_per_category + 2) / 3;
  const int64_t n_ctx = std::max<int64_t>(2, (pool_per_category - n_val + 1) / 2);
  const int64_t n_dist = std::max<int64_t>(1, pool_per_category - n_val - n_ctx);

  int width = 1;
  for (int64_t v = std::max<int64_t>(n_categories - 1, 1); v >= 10; v /= 10) ++width;
  const auto pad_num = [width](int64_t v) {
    std::string s = std::to_string(v);
    return std::string(static_cast<size_t>(width) - std::min<size_t>(s.size(), width), '0') + s;
  };

  std::vector<ProductRecord> records;
  records.reserve(static_cast<size_t>(n_categories * per_category));
  for (int64_t c = 0; c < n_categories; ++c) {
    Rng rng(mix_seed(seed, rngtag::kSynth, static_cast<uint64_t>(c)));
    const std::string cat = "c" + pad_num(c);
    const std::string stem = cat;
    const int64_t n_incorrect = per_category / 2;
    int64_t incorrect_used = 0;
    for (int64_t i = 0; i < per_category; ++i) {
      // True attribute value for this product.
      const std::string val_word = stem + "v" + std::to_string(rng.uniform_int(n_val));
      const auto marker = [&](bool correct_polarity) {
        const bool contradict = rng.uniform() < kMarkerAmbiguity;
        const bool valid = correct_polarity != contradict;
        return std::string(valid ? "vm" : "im") + std::to_string(rng.uniform_int(kMarkersPerClass));
      };
      const std::string m1 = marker(true);
      const std::string m2 = marker(true);

      // Two distinct context words for the profile.
      const auto ctx_pair = rng.sample_without_replacement(n_ctx, 2);
      const std::string ctx_a = stem + "x" + std::to_string(ctx_pair[0]);
      const std::string ctx_b = stem + "x" + std::to_string(ctx_pair[1]);

      std::vector<std::string> profile_tokens{m1, m2, val_word, ctx_a, ctx_b};
      const int64_t n_fill = 2 + rng.uniform_int(3);
      for (int64_t f = 0; f < n_fill; ++f) {
        profile_tokens.push_back("f" + std::to_string(rng.uniform_int(kFillers)));
      }
      rng.shuffle(profile_tokens);

      const bool incorrect = (i % 2 == 1 && incorrect_used < n_incorrect);
      ProductRecord rec;
      rec.category_id = cat;
      rec.product_id = cat + "_p" + std::to_string(i);
      std::ostringstream profile;
      for (size_t t = 0; t < profile_tokens.size(); ++t) {
        if (t > 0) profile << ' ';
        profile << profile_tokens[t];
      }
      rec.profile = profile.str();
      if (!incorrect) {
        rec.value = m1 + " " + m2 + " " + val_word;
        rec.label = 0;
      } else {
        ++incorrect_used;
        std::string wrong_word;
        if (incorrect_used % 2 == 1) {
          // Wrong role: one of this profile's own context words.
          wrong_word = rng.uniform_int(2) == 0 ? ctx_a : ctx_b;
        } else {
          // Absent from every profile: a distractor word.
          wrong_word = stem + "d" + std::to_string(rng.uniform_int(n_dist));
        }
        rec.value = marker(false) + " " + marker(false) + " " + wrong_word;
        rec.label = 1;
      }
      if (noise_rate > 0.0 && rng.uniform() < noise_rate) rec.label = 1 - *rec.label;
      records.push_back(std::move(rec));
    }
  }
  return records;
}

Vocab build_vocab(const std::vector<ProductRecord>& records, int64_t min_freq) {
  if (records.empty()) throw std::invalid_argument("build_vocab: no records");
  std::map<std::string, int64_t> freq;
  for (const ProductRecord& rec : records) {
    for (const std::string& tok : tokenize(rec.profile)) ++freq[tok];
    for (const std::string& tok : tokenize(rec.value)) ++freq[tok];
  }
  std::vector<std::pair<std::string, int64_t>> entries;
  entries.reserve(freq.size());
  for (auto& [tok, count] : freq) {
    if (count >= min_freq) entries.emplace_back(tok, count);
  }
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> tokens;
  tokens.reserve(entries.size());
  for (auto& [tok, count] : entries) tokens.push_back(tok);
  return Vocab(tokens);
}

}  // namespace metabridge::data
