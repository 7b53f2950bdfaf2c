#include "qg/transformer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "qg/error.hpp"

namespace qg {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "parameter files assume a little-endian host");

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw InputError(std::string("model config: ") + name + " must be positive");
  };
  positive(d_model, "d_model");
  positive(num_heads, "num_heads");
  positive(encoder_layers, "encoder_layers");
  positive(decoder_layers, "decoder_layers");
  positive(ffn_dim, "ffn_dim");
  positive(vocab_size, "vocab_size");
  positive(max_positions, "max_positions");
  if (d_model % num_heads != 0) {
    throw InputError("model config: d_model " + std::to_string(d_model) + " not divisible by num_heads " +
                     std::to_string(num_heads));
  }
  if (d_model % 2 != 0) throw InputError("model config: d_model must be even");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InputError("model config: dropout must lie in [0, 1)");
  if (pad_id < 0 || static_cast<std::size_t>(pad_id) >= vocab_size) {
    throw InputError("model config: pad_id outside the vocabulary");
  }
}

namespace {

Parameter xavier(std::string name, std::size_t rows, std::size_t cols, std::size_t fan_in, std::size_t fan_out,
                 std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t({rows, cols});
  for (double& x : t.storage()) x = dist(rng);
  return Parameter(std::move(name), std::move(t));
}

Parameter filled(std::string name, std::size_t n, double value) {
  return Parameter(std::move(name), Tensor({1, n}, value));
}

LayerNormParams layer_norm_params(const std::string& prefix, std::size_t d) {
  return {filled(prefix + ".gain", d, 1.0), filled(prefix + ".bias", d, 0.0)};
}

FeedForwardParams ffn_params(const std::string& prefix, std::size_t d, std::size_t inner, std::mt19937_64& rng) {
  FeedForwardParams f;
  f.w1 = xavier(prefix + ".w1", d, inner, d, inner, rng);
  f.b1 = filled(prefix + ".b1", inner, 0.0);
  f.w2 = xavier(prefix + ".w2", inner, d, inner, d, rng);
  f.b2 = filled(prefix + ".b2", d, 0.0);
  return f;
}

Var apply_dropout(Var x, double rate, std::mt19937_64* rng) {
  if (rng == nullptr || rate <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const double kept = 1.0 / (1.0 - rate);
  Tensor mask(x.shape());
  for (double& m : mask.storage()) m = keep(*rng) ? kept : 0.0;
  return mul_constant(x, mask);
}

Var norm(Tape& tape, Var x, LayerNormParams& p) { return layer_norm(x, tape.param(p.gain), tape.param(p.bias)); }

Var feed_forward(Tape& tape, Var x, FeedForwardParams& f) {
  Var h = relu(add_row(matmul(x, tape.param(f.w1)), tape.param(f.b1)));
  return add_row(matmul(h, tape.param(f.w2)), tape.param(f.b2));
}

struct Segments {
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> lengths;
  std::size_t total = 0;
};

Segments segments_of(const std::vector<std::vector<TokenId>>& seqs) {
  Segments s;
  for (const auto& q : seqs) {
    s.offsets.push_back(s.total);
    s.lengths.push_back(q.size());
    s.total += q.size();
  }
  return s;
}

Var rows_of(Var x, std::size_t offset, std::size_t length) {
  if (offset == 0 && length == x.rows()) return x;
  return slice_rows(x, offset, length);
}

// Multi-head attention over stacked segments. Key/value segment b is used
// for query segment b, or segment 0 for all when kv holds a single segment.
// masks[b] may be empty for "no mask".
Var attend(Var xq, const std::vector<std::size_t>& q_off, const std::vector<std::size_t>& q_len, Var xkv,
           const std::vector<std::size_t>& kv_off, const std::vector<std::size_t>& kv_len, MultiHeadParams& p,
           const std::vector<Tensor>& masks) {
  Tape& tape = *xq.tape();
  const std::size_t h = p.heads();
  if (h == 0) throw ShapeError("multi_head: no heads");
  const std::size_t d = p.wo.value.rows();
  if (xq.cols() != d || xkv.cols() != d) {
    throw ShapeError("multi_head: expected " + std::to_string(d) + " columns, got " + std::to_string(xq.cols()) +
                     " and " + std::to_string(xkv.cols()));
  }
  std::vector<Var> q(h), k(h), v(h);
  for (std::size_t i = 0; i < h; ++i) {
    q[i] = matmul(xq, tape.param(p.wq[i]));
    k[i] = matmul(xkv, tape.param(p.wk[i]));
    v[i] = matmul(xkv, tape.param(p.wv[i]));
  }
  const bool shared_kv = kv_off.size() == 1;
  std::vector<Var> rows;
  rows.reserve(q_off.size());
  for (std::size_t b = 0; b < q_off.size(); ++b) {
    const std::size_t kb = shared_kv ? 0 : b;
    std::vector<Var> heads(h);
    for (std::size_t i = 0; i < h; ++i) {
      heads[i] = attention(rows_of(q[i], q_off[b], q_len[b]), rows_of(k[i], kv_off[kb], kv_len[kb]),
                           rows_of(v[i], kv_off[kb], kv_len[kb]), masks[b].empty() ? nullptr : &masks[b]);
    }
    rows.push_back(h == 1 ? heads[0] : concat_cols(heads));
  }
  Var joined = rows.size() == 1 ? rows[0] : concat_rows(rows);
  return matmul(joined, tape.param(p.wo));
}

Tensor key_mask(std::size_t queries, const std::vector<bool>& key_padding, bool causal) {
  bool any = causal;
  for (bool pad : key_padding) any = any || pad;
  if (!any) return {};
  Tensor m({queries, key_padding.size()});
  for (std::size_t i = 0; i < queries; ++i) {
    for (std::size_t j = 0; j < key_padding.size(); ++j) {
      if (key_padding[j] || (causal && j > i)) m.at(i, j) = kMaskValue;
    }
  }
  return m;
}

}  // namespace

Var attention(Var q, Var k, Var v, const Tensor* mask) {
  if (q.cols() != k.cols()) {
    throw ShapeError("attention: Q has " + std::to_string(q.cols()) + " columns but K has " +
                     std::to_string(k.cols()));
  }
  if (k.rows() != v.rows()) {
    throw ShapeError("attention: K has " + std::to_string(k.rows()) + " rows but V has " +
                     std::to_string(v.rows()));
  }
  Var scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  if (mask != nullptr) {
    if (mask->rows() != q.rows() || mask->cols() != k.rows()) throw ShapeError("attention: mask shape mismatch");
    scores = add_constant(scores, *mask);
  }
  return matmul(softmax_rows(scores), v);
}

Var multi_head(Var xq, Var xkv, MultiHeadParams& params, const Tensor* mask) {
  std::vector<Tensor> masks{mask ? *mask : Tensor()};
  return attend(xq, {0}, {xq.rows()}, xkv, {0}, {xkv.rows()}, params, masks);
}

MultiHeadParams MultiHeadParams::init(const std::string& prefix, std::size_t d_model, std::size_t heads,
                                      std::mt19937_64& rng) {
  if (heads == 0 || d_model % heads != 0) throw InputError("multi-head: d_model must be divisible by heads");
  const std::size_t dh = d_model / heads;
  MultiHeadParams p;
  for (std::size_t i = 0; i < heads; ++i) {
    const std::string n = std::to_string(i);
    p.wq.push_back(xavier(prefix + ".q." + n, d_model, dh, d_model, d_model, rng));
    p.wk.push_back(xavier(prefix + ".k." + n, d_model, dh, d_model, d_model, rng));
    p.wv.push_back(xavier(prefix + ".v." + n, d_model, dh, d_model, d_model, rng));
  }
  p.wo = xavier(prefix + ".o", d_model, d_model, d_model, d_model, rng);
  return p;
}

Tensor positional_encoding(std::size_t max_len, std::size_t d_model) {
  if (max_len == 0 || d_model == 0) throw InputError("positional_encoding: dimensions must be positive");
  if (d_model % 2 != 0) throw InputError("positional_encoding: d_model must be even");
  Tensor pe({max_len, d_model});
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
      pe.at(pos, i) = std::sin(angle);
      pe.at(pos, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

TokenMap::TokenMap(std::vector<TokenId> full_ids, TokenId full_unk) : full_(std::move(full_ids)), full_unk_(full_unk) {
  for (std::size_t i = 0; i < full_.size(); ++i) {
    if (!model_.emplace(full_[i], static_cast<TokenId>(i)).second) {
      throw InputError("token map: duplicate id " + std::to_string(full_[i]));
    }
  }
  if (!model_.count(full_unk_)) throw InputError("token map: [UNK] id missing");
}

TokenMap TokenMap::identity(std::size_t vocab_size, TokenId full_unk) {
  std::vector<TokenId> ids(vocab_size);
  for (std::size_t i = 0; i < vocab_size; ++i) ids[i] = static_cast<TokenId>(i);
  return TokenMap(std::move(ids), full_unk);
}

TokenId TokenMap::to_model(TokenId full) const {
  auto it = model_.find(full);
  return it == model_.end() ? model_.at(full_unk_) : it->second;
}

TokenId TokenMap::to_full(TokenId model) const {
  if (model < 0 || static_cast<std::size_t>(model) >= full_.size()) {
    throw InputError("token map: model id " + std::to_string(model) + " out of range");
  }
  return full_[static_cast<std::size_t>(model)];
}

std::vector<TokenId> TokenMap::to_model(const std::vector<TokenId>& full) const {
  std::vector<TokenId> out;
  out.reserve(full.size());
  for (TokenId t : full) out.push_back(to_model(t));
  return out;
}

std::vector<TokenId> TokenMap::to_full(const std::vector<TokenId>& model) const {
  std::vector<TokenId> out;
  out.reserve(model.size());
  for (TokenId t : model) out.push_back(to_full(t));
  return out;
}

Transformer::Transformer(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model;
  positions_ = positional_encoding(config_.max_positions, d);

  Tensor table({config_.vocab_size, d});
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  for (double& x : table.storage()) x = normal(rng);
  embedding_ = Parameter("embed.tokens", std::move(table));
  if (!config_.share_embeddings) {
    output_ = xavier("out.weight", config_.vocab_size, d, d, config_.vocab_size, rng);
  }

  for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    EncoderLayer layer;
    layer.ln1 = layer_norm_params(p + ".ln1", d);
    layer.self = MultiHeadParams::init(p + ".self", d, config_.num_heads, rng);
    layer.ln2 = layer_norm_params(p + ".ln2", d);
    layer.ffn = ffn_params(p + ".ffn", d, config_.ffn_dim, rng);
    encoder_.push_back(std::move(layer));
  }
  encoder_norm_ = layer_norm_params("enc.norm", d);
  for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecoderLayer layer;
    layer.ln1 = layer_norm_params(p + ".ln1", d);
    layer.self = MultiHeadParams::init(p + ".self", d, config_.num_heads, rng);
    layer.ln2 = layer_norm_params(p + ".ln2", d);
    layer.cross = MultiHeadParams::init(p + ".cross", d, config_.num_heads, rng);
    layer.ln3 = layer_norm_params(p + ".ln3", d);
    layer.ffn = ffn_params(p + ".ffn", d, config_.ffn_dim, rng);
    decoder_.push_back(std::move(layer));
  }
  decoder_norm_ = layer_norm_params("dec.norm", d);
  register_all();
}

Transformer::Transformer(const Transformer& other)
    : config_(other.config_),
      positions_(other.positions_),
      embedding_(other.embedding_),
      output_(other.output_),
      encoder_(other.encoder_),
      encoder_norm_(other.encoder_norm_),
      decoder_(other.decoder_),
      decoder_norm_(other.decoder_norm_) {
  register_all();
}

Transformer::Transformer(Transformer&& other) noexcept
    : config_(other.config_),
      positions_(std::move(other.positions_)),
      embedding_(std::move(other.embedding_)),
      output_(std::move(other.output_)),
      encoder_(std::move(other.encoder_)),
      encoder_norm_(std::move(other.encoder_norm_)),
      decoder_(std::move(other.decoder_)),
      decoder_norm_(std::move(other.decoder_norm_)) {
  register_all();
  other.params_.clear();
}

Transformer& Transformer::operator=(const Transformer& other) {
  if (this != &other) *this = Transformer(other);
  return *this;
}

Transformer& Transformer::operator=(Transformer&& other) noexcept {
  if (this != &other) {
    config_ = other.config_;
    positions_ = std::move(other.positions_);
    embedding_ = std::move(other.embedding_);
    output_ = std::move(other.output_);
    encoder_ = std::move(other.encoder_);
    encoder_norm_ = std::move(other.encoder_norm_);
    decoder_ = std::move(other.decoder_);
    decoder_norm_ = std::move(other.decoder_norm_);
    register_all();
    other.params_.clear();
  }
  return *this;
}

void Transformer::register_all() {
  params_.clear();
  auto mh = [&](MultiHeadParams& p) {
    for (std::size_t i = 0; i < p.heads(); ++i) {
      params_.push_back(&p.wq[i]);
      params_.push_back(&p.wk[i]);
      params_.push_back(&p.wv[i]);
    }
    params_.push_back(&p.wo);
  };
  auto ln = [&](LayerNormParams& p) {
    params_.push_back(&p.gain);
    params_.push_back(&p.bias);
  };
  auto ff = [&](FeedForwardParams& f) {
    for (Parameter* p : {&f.w1, &f.b1, &f.w2, &f.b2}) params_.push_back(p);
  };
  params_.push_back(&embedding_);
  if (!config_.share_embeddings) params_.push_back(&output_);
  for (auto& l : encoder_) {
    ln(l.ln1);
    mh(l.self);
    ln(l.ln2);
    ff(l.ffn);
  }
  ln(encoder_norm_);
  for (auto& l : decoder_) {
    ln(l.ln1);
    mh(l.self);
    ln(l.ln2);
    mh(l.cross);
    ln(l.ln3);
    ff(l.ffn);
  }
  ln(decoder_norm_);
}

std::vector<const Parameter*> Transformer::parameters() const {
  return {params_.begin(), params_.end()};
}

std::size_t Transformer::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : params_) n += p->value.numel();
  return n;
}

Var Transformer::embed(Tape& tape, const std::vector<std::vector<TokenId>>& seqs, std::mt19937_64* rng) {
  if (seqs.empty()) throw InputError("transformer: empty batch");
  const std::size_t d = config_.d_model;
  std::vector<std::int32_t> ids;
  for (const auto& s : seqs) {
    if (s.empty()) throw InputError("transformer: empty sequence");
    if (s.size() > config_.max_positions) {
      throw InputError("transformer: sequence length " + std::to_string(s.size()) + " exceeds max_positions " +
                       std::to_string(config_.max_positions));
    }
    for (TokenId t : s) {
      if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
        throw InputError("transformer: token id " + std::to_string(t) + " outside vocabulary of " +
                         std::to_string(config_.vocab_size));
      }
    }
    ids.insert(ids.end(), s.begin(), s.end());
  }
  Tensor pe({ids.size(), d});
  std::size_t row = 0;
  for (const auto& s : seqs) {
    for (std::size_t pos = 0; pos < s.size(); ++pos, ++row) {
      std::copy_n(positions_.data().begin() + static_cast<std::ptrdiff_t>(pos * d), d,
                  pe.data().begin() + static_cast<std::ptrdiff_t>(row * d));
    }
  }
  Var x = scale(embedding(tape.param(embedding_), ids), std::sqrt(static_cast<double>(d)));
  return apply_dropout(add_constant(x, pe), config_.dropout, rng);
}

Encoded Transformer::encode(Tape& tape, const std::vector<std::vector<TokenId>>& inputs, std::mt19937_64* rng) {
  Segments seg = segments_of(inputs);
  Encoded out;
  out.offsets = seg.offsets;
  out.lengths = seg.lengths;
  std::vector<Tensor> masks;
  for (const auto& s : inputs) {
    std::vector<bool> pad(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) pad[i] = s[i] == config_.pad_id;
    masks.push_back(key_mask(s.size(), pad, false));
    out.padding.push_back(std::move(pad));
  }
  Var x = embed(tape, inputs, rng);
  for (auto& layer : encoder_) {
    Var h = norm(tape, x, layer.ln1);
    x = add(x, apply_dropout(attend(h, seg.offsets, seg.lengths, h, seg.offsets, seg.lengths, layer.self, masks),
                             config_.dropout, rng));
    h = norm(tape, x, layer.ln2);
    x = add(x, apply_dropout(feed_forward(tape, h, layer.ffn), config_.dropout, rng));
  }
  out.states = norm(tape, x, encoder_norm_);
  return out;
}

Var Transformer::decode(Tape& tape, const Encoded& memory, const std::vector<std::vector<TokenId>>& decoder_inputs,
                        std::mt19937_64* rng) {
  if (memory.offsets.size() != 1 && memory.offsets.size() != decoder_inputs.size()) {
    throw ShapeError("decode: " + std::to_string(memory.offsets.size()) + " encoded sequences for " +
                     std::to_string(decoder_inputs.size()) + " decoder inputs");
  }
  Segments seg = segments_of(decoder_inputs);
  std::vector<Tensor> self_masks, cross_masks;
  for (std::size_t b = 0; b < decoder_inputs.size(); ++b) {
    const auto& s = decoder_inputs[b];
    std::vector<bool> pad(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) pad[i] = s[i] == config_.pad_id;
    self_masks.push_back(key_mask(s.size(), pad, true));
    const std::size_t mb = memory.offsets.size() == 1 ? 0 : b;
    cross_masks.push_back(key_mask(s.size(), memory.padding[mb], false));
  }
  Var x = embed(tape, decoder_inputs, rng);
  for (auto& layer : decoder_) {
    Var h = norm(tape, x, layer.ln1);
    x = add(x, apply_dropout(attend(h, seg.offsets, seg.lengths, h, seg.offsets, seg.lengths, layer.self,
                                    self_masks),
                             config_.dropout, rng));
    h = norm(tape, x, layer.ln2);
    x = add(x, apply_dropout(attend(h, seg.offsets, seg.lengths, memory.states, memory.offsets, memory.lengths,
                                    layer.cross, cross_masks),
                             config_.dropout, rng));
    h = norm(tape, x, layer.ln3);
    x = add(x, apply_dropout(feed_forward(tape, h, layer.ffn), config_.dropout, rng));
  }
  x = norm(tape, x, decoder_norm_);
  return matmul_nt(x, tape.param(config_.share_embeddings ? embedding_ : output_));
}

Var Transformer::forward(Tape& tape, const std::vector<TokenId>& input, const std::vector<TokenId>& decoder_input,
                         std::mt19937_64* rng) {
  Encoded memory = encode(tape, {input}, rng);
  return decode(tape, memory, {decoder_input}, rng);
}

namespace {

json config_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},
          {"num_heads", c.num_heads},
          {"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers},
          {"ffn_dim", c.ffn_dim},
          {"vocab_size", c.vocab_size},
          {"max_positions", c.max_positions},
          {"dropout", c.dropout},
          {"share_embeddings", c.share_embeddings},
          {"pad_id", c.pad_id}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.encoder_layers = j.at("encoder_layers").get<std::size_t>();
  c.decoder_layers = j.at("decoder_layers").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.share_embeddings = j.at("share_embeddings").get<bool>();
  c.pad_id = j.at("pad_id").get<TokenId>();
  return c;
}

constexpr char kParamMagic[8] = {'Q', 'G', 'P', 'A', 'R', 'A', 'M', '1'};

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in, const std::string& where) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw InputError(where + ": truncated parameter file");
  return v;
}

}  // namespace

void Transformer::save(const std::filesystem::path& dir, const TokenMap& map) const {
  if (map.size() != config_.vocab_size) throw InputError("save: token map size differs from vocab_size");
  json j{{"format", "qg-model"}, {"version", 1}, {"model", config_json(config_)},
         {"token_map", map.full_ids()}, {"unk_id", map.full_unk()}};
  std::ofstream out(dir / "config.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "config.json").string());
  out << j.dump(2) << '\n';
  if (!out.flush()) throw IoError("failed writing " + (dir / "config.json").string());
  write_parameters(dir / "params.bin", parameters());
}

Transformer Transformer::load(const std::filesystem::path& dir, TokenMap* map) {
  const auto cfg_path = dir / "config.json";
  std::ifstream in(cfg_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + cfg_path.string());
  ModelConfig config;
  std::vector<TokenId> ids;
  TokenId unk = 0;
  try {
    json j = json::parse(in);
    if (j.value("format", "") != "qg-model" || j.value("version", 0) != 1) {
      throw InputError(cfg_path.string() + ": not a version 1 model config");
    }
    config = config_from_json(j.at("model"));
    ids = j.at("token_map").get<std::vector<TokenId>>();
    unk = j.at("unk_id").get<TokenId>();
  } catch (const json::exception& e) {
    throw InputError(cfg_path.string() + ": " + e.what());
  }
  if (ids.size() != config.vocab_size) throw InputError(cfg_path.string() + ": token map size mismatch");
  Transformer model(config, 0);
  read_parameters(dir / "params.bin", model.parameters());
  if (map != nullptr) *map = TokenMap(std::move(ids), unk);
  return model;
}

void write_parameters(const std::filesystem::path& path, const std::vector<const Parameter*>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kParamMagic, sizeof kParamMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.ndim()));
    for (std::size_t dim : p->value.shape()) put<std::uint64_t>(out, dim);
    const auto data = p->value.data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
  }
  if (!out.flush()) throw IoError("failed writing " + path.string());
}

void read_parameters(const std::filesystem::path& path, const std::vector<Parameter*>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string where = path.string();
  char magic[sizeof kParamMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kParamMagic, sizeof magic) != 0) {
    throw InputError(where + ": not a parameter file");
  }
  std::unordered_map<std::string, Parameter*> by_name;
  for (Parameter* p : params) by_name[p->name] = p;
  const auto count = get<std::uint32_t>(in, where);
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint32_t>(in, where), '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw InputError(where + ": truncated");
    Shape shape(get<std::uint32_t>(in, where));
    for (auto& dim : shape) dim = static_cast<std::size_t>(get<std::uint64_t>(in, where));
    auto it = by_name.find(name);
    if (it == by_name.end()) throw InputError(where + ": unexpected parameter '" + name + "'");
    Parameter& p = *it->second;
    if (shape != p.value.shape()) throw InputError(where + ": shape mismatch for '" + name + "'");
    auto data = p.value.data();
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()))) {
      throw InputError(where + ": truncated data for '" + name + "'");
    }
    seen.insert(name);
  }
  if (seen.size() != params.size()) {
    for (Parameter* p : params) {
      if (!seen.count(p->name)) throw InputError(where + ": missing parameter '" + p->name + "'");
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw InputError(where + ": trailing bytes");
}

}  // namespace qg
