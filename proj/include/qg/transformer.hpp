#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "qg/autodiff.hpp"
#include "qg/wordpiece.hpp"

namespace qg {

struct ModelConfig {
  std::size_t d_model = 128;
  std::size_t num_heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t ffn_dim = 512;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 512;
  double dropout = 0.1;
  bool share_embeddings = true;
  TokenId pad_id = 0;

  std::size_t d_head() const { return d_model / num_heads; }
  // Throws InputError naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct MultiHeadParams {
  std::vector<Parameter> wq, wk, wv;  // one d_model × d_head matrix per head
  Parameter wo;                       // d_model × d_model

  static MultiHeadParams init(const std::string& prefix, std::size_t d_model, std::size_t heads,
                              std::mt19937_64& rng);
  std::size_t heads() const { return wq.size(); }
};

struct FeedForwardParams {
  Parameter w1, b1, w2, b2;
};

struct LayerNormParams {
  Parameter gain, bias;
};

// softmax(Q·Kᵀ/√d + mask)·V where d is the column count of Q. The mask is
// additive; disallowed positions hold kMaskValue.
Var attention(Var q, Var k, Var v, const Tensor* mask = nullptr);
inline constexpr double kMaskValue = -1e30;

// Concat(head_1..head_h)·W^O with head_i = attention(Xq·Wq_i, Xkv·Wk_i, Xkv·Wv_i).
Var multi_head(Var xq, Var xkv, MultiHeadParams& params, const Tensor* mask = nullptr);

// Sinusoidal table: PE[pos,2i] = sin(pos/10000^(2i/d)), PE[pos,2i+1] = cos(...).
Tensor positional_encoding(std::size_t max_len, std::size_t d_model);

// Compact output space: model id i stands for full vocabulary id full_ids()[i].
// Full ids missing from the map are sent to the model id of [UNK].
class TokenMap {
 public:
  TokenMap() = default;
  TokenMap(std::vector<TokenId> full_ids, TokenId full_unk);
  static TokenMap identity(std::size_t vocab_size, TokenId full_unk);

  TokenId to_model(TokenId full) const;
  TokenId to_full(TokenId model) const;
  std::vector<TokenId> to_model(const std::vector<TokenId>& full) const;
  std::vector<TokenId> to_full(const std::vector<TokenId>& model) const;
  std::size_t size() const { return full_.size(); }
  const std::vector<TokenId>& full_ids() const { return full_; }
  TokenId full_unk() const { return full_unk_; }

 private:
  std::vector<TokenId> full_;
  std::unordered_map<TokenId, TokenId> model_;
  TokenId full_unk_ = 0;
};

// Stacked rows of several sequences; segment b occupies rows
// [offsets[b], offsets[b] + lengths[b]).
struct Encoded {
  Var states;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> lengths;
  std::vector<std::vector<bool>> padding;
};

class Transformer {
 public:
  Transformer(const ModelConfig& config, std::uint64_t seed);
  Transformer(const Transformer& other);
  Transformer(Transformer&& other) noexcept;
  Transformer& operator=(const Transformer& other);
  Transformer& operator=(Transformer&& other) noexcept;

  const ModelConfig& config() const { return config_; }
  // Every learned tensor exactly once, in a fixed order.
  const std::vector<Parameter*>& parameters() { return params_; }
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;

  // Dropout runs only when rng is given and the rate is positive.
  Encoded encode(Tape& tape, const std::vector<std::vector<TokenId>>& inputs, std::mt19937_64* rng = nullptr);
  // Decoder inputs start with [BOS]. When `memory` holds a single sequence it
  // is shared by every decoder input. Returns stacked logits, one row per
  // decoder position.
  Var decode(Tape& tape, const Encoded& memory, const std::vector<std::vector<TokenId>>& decoder_inputs,
             std::mt19937_64* rng = nullptr);
  // logits [decoder_input.size() × vocab_size]
  Var forward(Tape& tape, const std::vector<TokenId>& input, const std::vector<TokenId>& decoder_input,
              std::mt19937_64* rng = nullptr);

  // Model files inside an existing directory: config.json (with the token
  // map) and params.bin.
  void save(const std::filesystem::path& dir, const TokenMap& map) const;
  static Transformer load(const std::filesystem::path& dir, TokenMap* map = nullptr);

 private:
  struct EncoderLayer {
    LayerNormParams ln1;
    MultiHeadParams self;
    LayerNormParams ln2;
    FeedForwardParams ffn;
  };
  struct DecoderLayer {
    LayerNormParams ln1;
    MultiHeadParams self;
    LayerNormParams ln2;
    MultiHeadParams cross;
    LayerNormParams ln3;
    FeedForwardParams ffn;
  };

  Var embed(Tape& tape, const std::vector<std::vector<TokenId>>& seqs, std::mt19937_64* rng);
  void register_all();

  ModelConfig config_;
  Tensor positions_;
  Parameter embedding_;
  Parameter output_;  // unused when embeddings are shared
  std::vector<EncoderLayer> encoder_;
  LayerNormParams encoder_norm_;
  std::vector<DecoderLayer> decoder_;
  LayerNormParams decoder_norm_;
  std::vector<Parameter*> params_;
};

// Binary parameter container: "QGPARAM1", count, then per tensor its name,
// shape and little-endian doubles.
void write_parameters(const std::filesystem::path& path, const std::vector<const Parameter*>& params);
// Fills params by name; every name must be present with a matching shape.
void read_parameters(const std::filesystem::path& path, const std::vector<Parameter*>& params);

}  // namespace qg
