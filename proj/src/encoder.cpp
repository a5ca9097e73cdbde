#include "metabridge/encoder.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace metabridge::enc {

namespace diffm = metabridge::diff;
using diffm::Graph;
using diffm::NodeMap;
using diffm::ParamSet;
using diffm::ValueId;

namespace {

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (const char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

/// Seeded by (run seed, parameter name) so the draw is independent of the
/// order parameters are created in.
Tensor uniform_init(Shape shape, uint64_t seed, std::string_view name) {
  Rng rng(mix_seed(seed, rngtag::kInit, fnv1a(name)));
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-0.1, 0.1);
  return t;
}

void add_transformer_side(ParamSet& params, const EncoderConfig& cfg, std::string_view side,
                          uint64_t seed) {
  const int64_t d = cfg.d_model;
  const int64_t f = cfg.ffn_mult * d;
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "enc/" + std::string(side) + "/l" + std::to_string(l) + "/";
    for (const char* w : {"attn/wq", "attn/wk", "attn/wv", "attn/wo"}) {
      params.emplace(p + w, uniform_init({d, d}, seed, p + w));
    }
    for (const char* b : {"attn/bq", "attn/bk", "attn/bv", "attn/bo"}) {
      params.emplace(p + b, Tensor::zeros({d}));
    }
    params.emplace(p + "ffn/w1", uniform_init({d, f}, seed, p + "ffn/w1"));
    params.emplace(p + "ffn/b1", Tensor::zeros({f}));
    params.emplace(p + "ffn/w2", uniform_init({f, d}, seed, p + "ffn/w2"));
    params.emplace(p + "ffn/b2", Tensor::zeros({d}));
    params.emplace(p + "ln1/gamma", Tensor::full({d}, 1.0));
    params.emplace(p + "ln1/beta", Tensor::zeros({d}));
    params.emplace(p + "ln2/gamma", Tensor::full({d}, 1.0));
    params.emplace(p + "ln2/beta", Tensor::zeros({d}));
  }
}

ParamSet shared_tail(const EncoderConfig& cfg, uint64_t seed) {
  ParamSet params;
  const int64_t d = cfg.d_model;
  add_transformer_side(params, cfg, "profile", seed);
  add_transformer_side(params, cfg, "value", seed);
  params.emplace("enc/head/wmu", uniform_init({2 * d, d}, seed, "enc/head/wmu"));
  params.emplace("enc/head/bmu", Tensor::zeros({d}));
  params.emplace("enc/head/wsigma", uniform_init({2 * d, d}, seed, "enc/head/wsigma"));
  // Start with tight latents (sigma ~ e^-1): sampled-latent training then
  // begins with a usable signal-to-noise ratio and the variance head widens
  // only where the data asks for it.
  params.emplace("enc/head/bsigma", Tensor::full({d}, -1.0));
  params.emplace("dec/wo", uniform_init({d, 2}, seed, "dec/wo"));
  params.emplace("dec/bo", Tensor::zeros({2}));
  return params;
}

/// Sinusoidal position table, shape (length, d).
Tensor position_encoding(int64_t length, int64_t d) {
  Tensor pe({length, d});
  for (int64_t pos = 0; pos < length; ++pos) {
    for (int64_t j = 0; j < d; j += 2) {
      const double rate = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      pe[pos * d + j] = std::sin(angle);
      if (j + 1 < d) pe[pos * d + j + 1] = std::cos(angle);
    }
  }
  return pe;
}

/// Additive attention mask, shape (batch, 1, 1, length): 0 over real tokens,
/// -1e9 over padding. After the softmax shift, padded columns underflow to
/// exactly 0, which is what makes padding bit-invariant.
Tensor attention_mask(const TokenBatch& batch) {
  Tensor mask = Tensor::zeros({batch.batch, 1, 1, batch.length});
  for (int64_t b = 0; b < batch.batch; ++b) {
    for (int64_t t = 0; t < batch.length; ++t) {
      if ((*batch.ids)[static_cast<size_t>(b * batch.length + t)] == data::Vocab::kPad) {
        mask[b * batch.length + t] = -1e9;
      }
    }
  }
  return mask;
}

ValueId dropout(Graph& g, ValueId x, double rate, bool deterministic, Rng* rng) {
  if (deterministic || rate <= 0.0) return x;
  if (rng == nullptr) {
    throw std::invalid_argument("encoder: dropout requires an RNG outside deterministic mode");
  }
  const double keep = 1.0 - rate;
  Tensor mask(g.val(x).shape());
  for (int64_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng->uniform() < rate ? 0.0 : 1.0 / keep;
  }
  return g.mul(x, g.constant(std::move(mask)));
}

ValueId layer_norm(Graph& g, const NodeMap& params, const std::string& prefix, ValueId x,
                   int64_t d) {
  Shape keep = g.val(x).shape();
  keep.back() = 1;
  const double inv_d = 1.0 / static_cast<double>(d);
  const ValueId mean = g.scale(g.sum_to(x, keep), inv_d);
  const ValueId centered = g.sub(x, mean);
  const ValueId var = g.scale(g.sum_to(g.mul(centered, centered), keep), inv_d);
  const ValueId inv_std = g.recip(g.sqrt(g.add_scalar(var, 1e-5)));
  const ValueId normed = g.mul(centered, inv_std);
  return g.add(g.mul(normed, params.at(prefix + "gamma")), params.at(prefix + "beta"));
}

ValueId linear(Graph& g, const NodeMap& params, ValueId x, const std::string& w,
               const std::string& b) {
  return g.add(g.matmul(x, params.at(w)), params.at(b));
}

}  // namespace

void EncoderConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || n_layers < 1 || ffn_mult < 1) {
    throw std::invalid_argument("encoder config: sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("encoder config: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw std::invalid_argument("encoder config: dropout must be in [0, 1)");
  }
  if (max_profile_len < 2 || max_value_len < 2) {
    throw std::invalid_argument("encoder config: max lengths must fit [CLS] plus one token");
  }
}

TokenBatch make_batch(const data::Vocab& vocab, std::span<const std::string> texts,
                      int64_t max_len) {
  if (texts.empty()) throw std::invalid_argument("make_batch: no sequences");
  std::vector<std::vector<int32_t>> rows;
  rows.reserve(texts.size());
  int64_t width = 0;
  for (const std::string& text : texts) {
    std::vector<int32_t> row{data::Vocab::kCls};
    for (const std::string& tok : data::tokenize(text)) {
      if (static_cast<int64_t>(row.size()) >= max_len) break;
      row.push_back(vocab.id_of(tok));
    }
    width = std::max<int64_t>(width, static_cast<int64_t>(row.size()));
    rows.push_back(std::move(row));
  }
  auto ids = std::make_shared<std::vector<int32_t>>();
  ids->reserve(static_cast<size_t>(width) * rows.size());
  for (const auto& row : rows) {
    ids->insert(ids->end(), row.begin(), row.end());
    ids->resize(ids->size() + static_cast<size_t>(width) - row.size(), data::Vocab::kPad);
  }
  TokenBatch batch;
  batch.batch = static_cast<int64_t>(rows.size());
  batch.length = width;
  batch.ids = std::move(ids);
  return batch;
}

ParamSet init_params(const EncoderConfig& cfg, int64_t vocab_size, uint64_t seed) {
  cfg.validate();
  if (vocab_size < 3) throw std::invalid_argument("init_params: vocab must hold the reserved ids");
  ParamSet params = shared_tail(cfg, seed);
  params.emplace("enc/emb", uniform_init({vocab_size, cfg.d_model}, seed, "enc/emb"));
  return params;
}

ParamSet init_params_pretrained(const EncoderConfig& cfg, const Tensor& embeddings,
                                uint64_t seed) {
  cfg.validate();
  if (embeddings.rank() != 2 || embeddings.dim(0) < 3) {
    throw std::invalid_argument("init_params_pretrained: embedding table must be (vocab, dim)");
  }
  ParamSet params = shared_tail(cfg, seed);
  params.emplace("enc/emb", embeddings);
  params.emplace("enc/proj",
                 uniform_init({embeddings.dim(1), cfg.d_model}, seed, "enc/proj"));
  return params;
}

ValueId encode_batch(Graph& g, const NodeMap& params, const EncoderConfig& cfg,
                     const TokenBatch& batch, std::string_view which, bool deterministic,
                     Rng* dropout_rng) {
  cfg.validate();
  if (which != "profile" && which != "value") {
    throw std::invalid_argument("encode_batch: side must be 'profile' or 'value'");
  }
  if (batch.batch < 1 || batch.length < 1 || !batch.ids) {
    throw std::invalid_argument("encode_batch: empty batch");
  }
  const int64_t d = cfg.d_model;
  const int64_t heads = cfg.n_heads;
  const int64_t hd = d / heads;
  const int64_t B = batch.batch;
  const int64_t L = batch.length;

  // Ids outside the table map to [UNK] rather than erroring.
  const int64_t vocab_rows = g.val(params.at("enc/emb")).dim(0);
  auto ids = batch.ids;
  for (const int32_t id : *ids) {
    if (id < 0 || id >= vocab_rows) {
      auto remapped = std::make_shared<std::vector<int32_t>>(*batch.ids);
      for (int32_t& v : *remapped) {
        if (v < 0 || v >= vocab_rows) v = data::Vocab::kUnk;
      }
      ids = std::move(remapped);
      break;
    }
  }

  ValueId x = g.gather_rows(params.at("enc/emb"), ids, {B, L});
  if (params.count("enc/proj") != 0) x = g.matmul(x, params.at("enc/proj"));
  x = g.add(x, g.constant(position_encoding(L, d)));
  x = dropout(g, x, cfg.dropout, deterministic, dropout_rng);
  const ValueId mask = g.constant(attention_mask(batch));

  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "enc/" + std::string(which) + "/l" + std::to_string(l) + "/";
    const auto split_heads = [&](ValueId v) {
      return g.swap_axes(g.reshape(v, {B, L, heads, hd}), 1, 2);  // (B,H,L,hd)
    };
    const ValueId q = split_heads(linear(g, params, x, p + "attn/wq", p + "attn/bq"));
    const ValueId k = split_heads(linear(g, params, x, p + "attn/wk", p + "attn/bk"));
    const ValueId v = split_heads(linear(g, params, x, p + "attn/wv", p + "attn/bv"));
    ValueId scores = g.scale(g.matmul(q, g.transpose_last2(k)),
                             1.0 / std::sqrt(static_cast<double>(hd)));  // (B,H,L,L)
    scores = g.add(scores, mask);
    const ValueId attn = g.softmax_last(scores);
    const ValueId ctx = g.reshape(g.swap_axes(g.matmul(attn, v), 1, 2), {B, L, d});
    ValueId attn_out = linear(g, params, ctx, p + "attn/wo", p + "attn/bo");
    attn_out = dropout(g, attn_out, cfg.dropout, deterministic, dropout_rng);
    x = layer_norm(g, params, p + "ln1/", g.add(x, attn_out), d);

    ValueId ffn = g.relu(linear(g, params, x, p + "ffn/w1", p + "ffn/b1"));
    ffn = linear(g, params, ffn, p + "ffn/w2", p + "ffn/b2");
    ffn = dropout(g, ffn, cfg.dropout, deterministic, dropout_rng);
    x = layer_norm(g, params, p + "ln2/", g.add(x, ffn), d);
  }
  return g.reshape(g.slice_axis(x, 1, 0, 1), {B, d});
}

Tensor encode_sequence(const ParamSet& params, const EncoderConfig& cfg,
                       std::span<const int32_t> ids, std::string_view which) {
  if (ids.empty()) throw std::invalid_argument("encode_sequence: empty sequence");
  const int64_t max_len = which == "value" ? cfg.max_value_len : cfg.max_profile_len;
  const int64_t len = std::min<int64_t>(static_cast<int64_t>(ids.size()), max_len);
  TokenBatch batch;
  batch.batch = 1;
  batch.length = len;
  batch.ids = std::make_shared<const std::vector<int32_t>>(
      std::vector<int32_t>(ids.begin(), ids.begin() + len));
  Graph g;
  NodeMap handles;
  for (const auto& [name, tensor] : params) handles.emplace(name, g.leaf(tensor));
  const ValueId cls = encode_batch(g, handles, cfg, batch, which, /*deterministic=*/true);
  Tensor out({cfg.d_model});
  for (int64_t i = 0; i < cfg.d_model; ++i) out[i] = g.val(cls)[i];
  return out;
}

ValueId gaussian_head_mu(Graph& g, const NodeMap& params, ValueId h) {
  return g.add(g.matmul(h, params.at("enc/head/wmu")), params.at("enc/head/bmu"));
}

ValueId gaussian_head_logsigma(Graph& g, const NodeMap& params, ValueId h) {
  const ValueId raw = g.add(g.matmul(h, params.at("enc/head/wsigma")), params.at("enc/head/bsigma"));
  return g.clamp(raw, -kLogSigmaClamp, kLogSigmaClamp);
}

ValueId decode_logits(Graph& g, const NodeMap& params, ValueId z) {
  return g.add(g.matmul(z, params.at("dec/wo")), params.at("dec/bo"));
}

ValueId decode_probs(Graph& g, const NodeMap& params, ValueId z) {
  return g.softmax_last(decode_logits(g, params, z));
}

Tensor load_pretrained_embeddings(const std::filesystem::path& path, const data::Vocab& vocab,
                                  uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_pretrained_embeddings: cannot open " + path.string());
  std::string header;
  if (!std::getline(in, header)) {
    throw std::runtime_error("load_pretrained_embeddings: missing header line");
  }
  std::istringstream hs(header);
  int64_t count = 0;
  int64_t dim = 0;
  if (!(hs >> count >> dim) || count < 0 || dim < 1) {
    throw std::runtime_error("load_pretrained_embeddings: bad header '" + header + "'");
  }
  Tensor table({vocab.size(), dim});
  for (int32_t id = 0; id < vocab.size(); ++id) {
    const Tensor row = uniform_init({dim}, seed, "enc/emb/" + vocab.token_of(id));
    for (int64_t j = 0; j < dim; ++j) table[id * dim + j] = row[j];
  }
  std::string line;
  int64_t row_no = 0;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string token;
    ls >> token;
    if (!vocab.contains(token)) continue;
    const int32_t id = vocab.id_of(token);
    for (int64_t j = 0; j < dim; ++j) {
      double v = 0.0;
      if (!(ls >> v)) {
        throw std::runtime_error("load_pretrained_embeddings: row " + std::to_string(row_no) +
                                 " ('" + token + "') has fewer than " + std::to_string(dim) +
                                 " values");
      }
      table[id * dim + j] = v;
    }
    double extra = 0.0;
    if (ls >> extra) {
      throw std::runtime_error("load_pretrained_embeddings: row " + std::to_string(row_no) +
                               " ('" + token + "') has more than " + std::to_string(dim) +
                               " values");
    }
  }
  return table;
}

}  // namespace metabridge::enc
