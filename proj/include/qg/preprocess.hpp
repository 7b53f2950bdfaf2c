#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "qg/wordpiece.hpp"

namespace qg {

// Named-entity classes. The enumerator order is the canonical listing order.
enum class EntityTag {
  kPerson,
  kNorp,
  kFac,
  kOrg,
  kGpe,
  kLoc,
  kProduct,
  kEvent,
  kWorkOfArt,
  kLaw,
  kLanguage,
  kDate,
  kTime,
  kPercent,
  kMoney,
  kQuantity,
  kOrdinal,
  kCardinal,
};

inline constexpr std::size_t kNumEntityTags = 18;

std::string_view tag_name(EntityTag tag);
std::optional<EntityTag> parse_tag(std::string_view name);
const std::array<EntityTag, kNumEntityTags>& all_tags();

struct EntitySpan {
  std::size_t start = 0;  // byte offsets into the raw text, end exclusive
  std::size_t end = 0;
  EntityTag tag = EntityTag::kPerson;
  std::string surface;

  bool operator==(const EntitySpan&) const = default;
};

class EntityTagger {
 public:
  virtual ~EntityTagger() = default;
  virtual std::vector<EntitySpan> tag(std::string_view text) const = 0;
};

// Dictionary tagger: surface form -> class, matched case-sensitively at word
// boundaries, longest surface first.
class GazetteerTagger : public EntityTagger {
 public:
  GazetteerTagger() = default;
  explicit GazetteerTagger(std::vector<std::pair<std::string, EntityTag>> entries);

  // TSV: surface<TAB>TAG per line. Blank lines and lines starting with '#'
  // are skipped.
  static GazetteerTagger load(const std::filesystem::path& path);

  void add(std::string surface, EntityTag tag);
  std::size_t size() const { return size_; }

  std::vector<EntitySpan> tag(std::string_view text) const override;

 private:
  // Entries bucketed by first byte, each bucket sorted longest first.
  std::unordered_map<char, std::vector<std::pair<std::string, EntityTag>>> by_first_;
  std::size_t size_ = 0;
};

// Per-class ordered surface forms; index i of class T renders as "T i".
class EntityMap {
 public:
  // Index of an existing (case-insensitive) surface, or appends it.
  std::size_t assign(EntityTag tag, std::string_view surface);
  std::optional<std::size_t> find(EntityTag tag, std::string_view surface) const;
  const std::vector<std::string>& surfaces(EntityTag tag) const;
  std::size_t count(EntityTag tag) const { return surfaces(tag).size(); }
  bool empty() const;

  bool operator==(const EntityMap&) const = default;

 private:
  std::map<EntityTag, std::vector<std::string>> surfaces_;
};

struct TaggedPassage {
  std::string text;
  EntityMap entity_map;
};

// Runs the tagger and validates what it returns: spans lie inside the text,
// do not overlap and come back sorted by start offset. `source_id` is
// prefixed to any error message.
std::vector<EntitySpan> tag_entities(std::string_view text, const EntityTagger& tagger,
                                     std::string_view source_id = {});

// Replaces every span by "TAG i" (index as its own space-separated word) and
// lowercases the rest. Indices come from `map`, which is extended in place,
// so a passage's map can be reused for its answer and question.
TaggedPassage replace_with_indexed_tags(std::string_view text, const std::vector<EntitySpan>& spans,
                                        EntityMap map = {});

// Whitespace split, then every punctuation character becomes its own word.
// Tag names such as WORK_OF_ART are kept whole.
std::vector<std::string> split_words(std::string_view text);

class Stoplist {
 public:
  Stoplist() = default;
  explicit Stoplist(std::vector<std::string> words);
  static Stoplist load(const std::filesystem::path& path);

  bool contains(std::string_view word) const { return words_.count(std::string(word)) != 0; }
  std::size_t size() const { return words_.size(); }

 private:
  std::unordered_set<std::string> words_;
};

// Drops stoplisted words, keeping order. Tag names and numeric indices are
// never dropped.
std::vector<std::string> remove_stopwords(const std::vector<std::string>& words,
                                          const Stoplist& stoplist);

struct PreprocessOptions {
  bool remove_stopwords = true;
};

struct PreprocessedPair {
  TokenSequence input;  // answer pieces, separator, passage pieces
  TaggedPassage passage;
  std::string answer_text;  // tagged, lowercased answer
};

// Everything a tagged string goes through after tag replacement: split into
// words, optional stop-word removal, WordPiece.
TokenSequence encode_tagged(std::string_view tagged_text, const Stoplist* stoplist,
                            const Vocabulary& vocab);

PreprocessedPair preprocess_pair(std::string_view answer, std::string_view passage,
                                 const EntityTagger& tagger, const Stoplist& stoplist,
                                 const Vocabulary& vocab, const PreprocessOptions& options = {});

// Question side: tagged against (and extending) the passage's entity map,
// lowercased, WordPiece-tokenized; stop words are kept.
TokenSequence preprocess_question(std::string_view question, EntityMap& map,
                                  const EntityTagger& tagger, const Vocabulary& vocab);

// Readable question text from model output: drops boundary and padding
// tokens, merges WordPieces and attaches '?' to the word before it.
std::string postprocess_question(const TokenSequence& seq, const ReservedTokens& reserved = {});

}  // namespace qg
