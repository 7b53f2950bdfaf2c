#include "qg/wordpiece.hpp"

#include <fstream>

namespace qg {

namespace {

// Byte offsets of UTF-8 code point boundaries, including the end offset.
std::vector<std::size_t> char_boundaries(std::string_view s) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if ((static_cast<unsigned char>(s[i]) & 0xC0) != 0x80) out.push_back(i);
  }
  out.push_back(s.size());
  return out;
}

bool is_continuation(std::string_view token) {
  return token.size() > Vocabulary::kContinuation.size() &&
         token.substr(0, Vocabulary::kContinuation.size()) == Vocabulary::kContinuation;
}

}  // namespace

ReservedTokens ReservedTokens::bert() {
  ReservedTokens r;
  r.bos = "[CLS]";
  r.eos = "[SEP]";
  return r;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path, ReservedTokens reserved) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  if (in.bad()) throw IoError("failed reading vocabulary file " + path.string());
  return from_tokens(std::move(tokens), std::move(reserved));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens, ReservedTokens reserved) {
  if (tokens.empty()) throw VocabularyError(VocabularyError::Kind::kEmpty, "vocabulary is empty");
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.reserved_ = std::move(reserved);
  v.index_.reserve(v.tokens_.size());
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    auto [it, inserted] = v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i));
    if (!inserted) {
      throw VocabularyError(VocabularyError::Kind::kDuplicate,
                            "duplicate vocabulary token '" + v.tokens_[i] + "' at lines " +
                                std::to_string(it->second + 1) + " and " + std::to_string(i + 1));
    }
  }
  auto require = [&](const std::string& name) {
    auto id = v.find(name);
    if (!id) {
      throw VocabularyError(VocabularyError::Kind::kMissingReserved,
                            "vocabulary lacks reserved token '" + name + "'");
    }
    return *id;
  };
  v.pad_ = require(v.reserved_.pad);
  v.unk_ = require(v.reserved_.unk);
  v.bos_ = require(v.reserved_.bos);
  v.eos_ = require(v.reserved_.eos);
  v.separator_ = require(v.reserved_.separator);
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw IoError("failed writing vocabulary file " + path.string());
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const { return find(token).value_or(unk_); }

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

void TokenSequence::append(const TokenSequence& other) {
  tokens.insert(tokens.end(), other.tokens.begin(), other.tokens.end());
  ids.insert(ids.end(), other.ids.begin(), other.ids.end());
}

void TokenSequence::push_back(std::string token, TokenId id) {
  tokens.push_back(std::move(token));
  ids.push_back(id);
}

TokenSequence tokenize(std::string_view word, const Vocabulary& vocab) {
  TokenSequence out;
  const auto bounds = char_boundaries(word);
  const std::size_t nchars = bounds.size() - 1;
  if (nchars == 0) return out;
  auto unknown = [&] {
    TokenSequence unk;
    unk.push_back(vocab.reserved().unk, vocab.unk_id());
    return unk;
  };
  if (nchars > Vocabulary::kMaxWordChars) return unknown();

  std::size_t start = 0;
  std::string candidate;
  while (start < nchars) {
    std::size_t end = nchars;
    std::optional<TokenId> match;
    while (end > start) {
      candidate.clear();
      if (start > 0) candidate = Vocabulary::kContinuation;
      candidate.append(word.substr(bounds[start], bounds[end] - bounds[start]));
      match = vocab.find(candidate);
      if (match) break;
      --end;
    }
    if (!match) return unknown();
    out.push_back(candidate, *match);
    start = end;
  }
  return out;
}

TokenSequence tokenize_words(const std::vector<std::string>& words, const Vocabulary& vocab) {
  TokenSequence out;
  for (const auto& w : words) out.append(tokenize(w, vocab));
  return out;
}

TokenSequence sequence_from_ids(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  TokenSequence out;
  for (TokenId id : ids) out.push_back(vocab.token(id), id);
  return out;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    if (t.empty()) continue;
    if (is_continuation(t)) {
      if (out.empty()) {
        throw InputError("malformed token sequence: continuation '" + t + "' at position " +
                         std::to_string(i) + " has no preceding piece");
      }
      out.append(t, Vocabulary::kContinuation.size());
    } else {
      if (!out.empty()) out.push_back(' ');
      out.append(t);
    }
  }
  return out;
}

}  // namespace qg
