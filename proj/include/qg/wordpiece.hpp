#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qg/error.hpp"

namespace qg {

using TokenId = std::int32_t;

// Names of the special tokens a vocabulary must contain.
struct ReservedTokens {
  std::string pad = "[PAD]";
  std::string unk = "[UNK]";
  std::string bos = "[BOS]";
  std::string eos = "[EOS]";
  std::string separator = "*";

  // Stock BERT vocabularies have no [BOS]/[EOS]; [CLS]/[SEP] stand in.
  static ReservedTokens bert();
};

class VocabularyError : public InputError {
 public:
  enum class Kind { kEmpty, kDuplicate, kMissingReserved };
  VocabularyError(Kind kind, const std::string& what) : InputError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// WordPiece inventory in BERT vocab.txt layout: one token per line, the
// line number is the id. Immutable once built.
class Vocabulary {
 public:
  static constexpr std::string_view kContinuation = "##";
  static constexpr std::size_t kMaxWordChars = 100;

  static Vocabulary load(const std::filesystem::path& path, ReservedTokens reserved = {});
  static Vocabulary from_tokens(std::vector<std::string> tokens, ReservedTokens reserved = {});

  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::optional<TokenId> find(std::string_view token) const;
  bool contains(std::string_view token) const { return find(token).has_value(); }
  // Id of the token, or the [UNK] id.
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId pad_id() const { return pad_; }
  TokenId unk_id() const { return unk_; }
  TokenId bos_id() const { return bos_; }
  TokenId eos_id() const { return eos_; }
  TokenId separator_id() const { return separator_; }
  const ReservedTokens& reserved() const { return reserved_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  ReservedTokens reserved_;
  TokenId pad_ = 0, unk_ = 0, bos_ = 0, eos_ = 0, separator_ = 0;
};

struct TokenSequence {
  std::vector<std::string> tokens;
  std::vector<TokenId> ids;

  std::size_t size() const { return tokens.size(); }
  void append(const TokenSequence& other);
  void push_back(std::string token, TokenId id);
};

// Greedy longest-match-first segmentation of a single whitespace-free word.
// Words that cannot be fully covered, or longer than kMaxWordChars code
// points, become a single [UNK].
TokenSequence tokenize(std::string_view word, const Vocabulary& vocab);
TokenSequence tokenize_words(const std::vector<std::string>& words, const Vocabulary& vocab);
TokenSequence sequence_from_ids(const std::vector<TokenId>& ids, const Vocabulary& vocab);

// Merges "##" continuations onto the preceding piece and joins pieces with
// single spaces. Throws InputError if the first piece is a continuation.
std::string detokenize(const std::vector<std::string>& tokens);
inline std::string detokenize(const TokenSequence& seq) { return detokenize(seq.tokens); }

}  // namespace qg
