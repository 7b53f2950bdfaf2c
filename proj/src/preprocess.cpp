#include "qg/preprocess.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

namespace qg {

namespace {

constexpr std::array<std::string_view, kNumEntityTags> kTagNames = {
    "PERSON",   "NORP",     "FAC",  "ORG",  "GPE",     "LOC",   "PRODUCT",  "EVENT",   "WORK_OF_ART",
    "LAW",      "LANGUAGE", "DATE", "TIME", "PERCENT", "MONEY", "QUANTITY", "ORDINAL", "CARDINAL",
};

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

std::string lower_ascii(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && lower_ascii(a) == lower_ascii(b);
}

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

char32_t decode(std::string_view s) {
  const auto b = [&](std::size_t i) { return static_cast<unsigned char>(s[i]); };
  switch (s.size()) {
    case 1: return b(0);
    case 2: return ((b(0) & 0x1F) << 6) | (b(1) & 0x3F);
    case 3: return ((b(0) & 0x0F) << 12) | ((b(1) & 0x3F) << 6) | (b(2) & 0x3F);
    case 4: return ((b(0) & 0x07) << 18) | ((b(1) & 0x3F) << 12) | ((b(2) & 0x3F) << 6) | (b(3) & 0x3F);
    default: return 0;
  }
}

// ASCII symbols plus the Latin-1 and General Punctuation marks that show up
// in Wikipedia text (dashes, curly quotes, ellipsis).
bool is_punctuation(char32_t cp) {
  if (cp < 0x80) {
    return (cp >= 33 && cp <= 47) || (cp >= 58 && cp <= 64) || (cp >= 91 && cp <= 96) ||
           (cp >= 123 && cp <= 126);
  }
  switch (cp) {
    case 0xA1: case 0xA7: case 0xAB: case 0xB6: case 0xB7: case 0xBB: case 0xBF:
      return true;
    default:
      break;
  }
  return (cp >= 0x2010 && cp <= 0x2027) || (cp >= 0x2030 && cp <= 0x205E) ||
         (cp >= 0x3001 && cp <= 0x3003);
}

bool is_space(unsigned char c) { return std::isspace(c) != 0; }

bool is_index_word(std::string_view w) {
  return !w.empty() && std::all_of(w.begin(), w.end(), [](char c) {
    return std::isdigit(static_cast<unsigned char>(c));
  });
}

}  // namespace

std::string_view tag_name(EntityTag tag) { return kTagNames[static_cast<std::size_t>(tag)]; }

std::optional<EntityTag> parse_tag(std::string_view name) {
  for (std::size_t i = 0; i < kTagNames.size(); ++i) {
    if (kTagNames[i] == name) return static_cast<EntityTag>(i);
  }
  return std::nullopt;
}

const std::array<EntityTag, kNumEntityTags>& all_tags() {
  static const auto tags = [] {
    std::array<EntityTag, kNumEntityTags> t{};
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<EntityTag>(i);
    return t;
  }();
  return tags;
}

GazetteerTagger::GazetteerTagger(std::vector<std::pair<std::string, EntityTag>> entries) {
  for (auto& [surface, tag] : entries) add(std::move(surface), tag);
}

GazetteerTagger GazetteerTagger::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open gazetteer file " + path.string());
  GazetteerTagger g;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected surface<TAB>TAG");
    }
    const auto tag = parse_tag(line.substr(tab + 1));
    if (!tag) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": unknown entity tag '" +
                       line.substr(tab + 1) + "'");
    }
    g.add(line.substr(0, tab), *tag);
  }
  return g;
}

void GazetteerTagger::add(std::string surface, EntityTag tag) {
  if (surface.empty()) throw InputError("gazetteer surface form is empty");
  auto& bucket = by_first_[surface[0]];
  for (auto& entry : bucket) {
    if (entry.first == surface) {
      entry.second = tag;
      return;
    }
  }
  bucket.emplace_back(std::move(surface), tag);
  std::stable_sort(bucket.begin(), bucket.end(),
                   [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
  ++size_;
}

std::vector<EntitySpan> GazetteerTagger::tag(std::string_view text) const {
  std::vector<EntitySpan> spans;
  std::size_t i = 0;
  while (i < text.size()) {
    const bool at_boundary = i == 0 || !is_word_byte(static_cast<unsigned char>(text[i - 1])) ||
                             !is_word_byte(static_cast<unsigned char>(text[i]));
    auto it = at_boundary ? by_first_.find(text[i]) : by_first_.end();
    bool matched = false;
    if (it != by_first_.end()) {
      for (const auto& [surface, tag] : it->second) {
        const std::size_t end = i + surface.size();
        if (end > text.size() || text.compare(i, surface.size(), surface) != 0) continue;
        const bool right_ok = end == text.size() ||
                              !is_word_byte(static_cast<unsigned char>(text[end])) ||
                              !is_word_byte(static_cast<unsigned char>(text[end - 1]));
        if (!right_ok) continue;
        spans.push_back({i, end, tag, surface});
        i = end;
        matched = true;
        break;
      }
    }
    if (!matched) ++i;
  }
  return spans;
}

std::size_t EntityMap::assign(EntityTag tag, std::string_view surface) {
  if (auto idx = find(tag, surface)) return *idx;
  auto& list = surfaces_[tag];
  list.emplace_back(surface);
  return list.size() - 1;
}

std::optional<std::size_t> EntityMap::find(EntityTag tag, std::string_view surface) const {
  auto it = surfaces_.find(tag);
  if (it == surfaces_.end()) return std::nullopt;
  for (std::size_t i = 0; i < it->second.size(); ++i) {
    if (iequals(it->second[i], surface)) return i;
  }
  return std::nullopt;
}

const std::vector<std::string>& EntityMap::surfaces(EntityTag tag) const {
  static const std::vector<std::string> kNone;
  auto it = surfaces_.find(tag);
  return it == surfaces_.end() ? kNone : it->second;
}

bool EntityMap::empty() const {
  return std::all_of(surfaces_.begin(), surfaces_.end(),
                     [](const auto& kv) { return kv.second.empty(); });
}

std::vector<EntitySpan> tag_entities(std::string_view text, const EntityTagger& tagger,
                                     std::string_view source_id) {
  const std::string where = source_id.empty() ? std::string("tagging") : "tagging " + std::string(source_id);
  if (text.empty()) throw InputError(where + ": text is empty");
  std::vector<EntitySpan> spans;
  try {
    spans = tagger.tag(text);
  } catch (const std::exception& e) {
    throw InputError(where + ": tagger failed: " + e.what());
  }
  std::sort(spans.begin(), spans.end(),
            [](const EntitySpan& a, const EntitySpan& b) { return a.start < b.start; });
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const auto& s = spans[k];
    if (s.start >= s.end || s.end > text.size()) {
      throw InputError(where + ": span [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                       ") outside text of length " + std::to_string(text.size()));
    }
    if (k > 0 && spans[k - 1].end > s.start) {
      throw InputError(where + ": overlapping spans at offset " + std::to_string(s.start));
    }
  }
  return spans;
}

TaggedPassage replace_with_indexed_tags(std::string_view text, const std::vector<EntitySpan>& spans,
                                        EntityMap map) {
  TaggedPassage out;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const auto& s = spans[k];
    if (s.start >= s.end || s.end > text.size()) {
      throw InputError("span [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                       ") outside text of length " + std::to_string(text.size()));
    }
    if (s.start < pos) {
      throw InputError("overlapping or unsorted entity spans at offset " + std::to_string(s.start));
    }
    out.text += lower_ascii(text.substr(pos, s.start - pos));
    const std::size_t idx = map.assign(s.tag, text.substr(s.start, s.end - s.start));
    if (!out.text.empty() && is_word_byte(static_cast<unsigned char>(out.text.back()))) out.text += ' ';
    out.text += tag_name(s.tag);
    out.text += ' ';
    out.text += std::to_string(idx);
    if (s.end < text.size() && is_word_byte(static_cast<unsigned char>(text[s.end]))) out.text += ' ';
    pos = s.end;
  }
  out.text += lower_ascii(text.substr(pos));
  out.entity_map = std::move(map);
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    const std::string_view chunk = text.substr(i, j - i);
    if (parse_tag(chunk)) {
      words.emplace_back(chunk);
    } else {
      std::string current;
      for (std::size_t k = 0; k < chunk.size();) {
        const std::size_t len = std::min(utf8_length(static_cast<unsigned char>(chunk[k])), chunk.size() - k);
        const std::string_view ch = chunk.substr(k, len);
        if (is_punctuation(decode(ch))) {
          if (!current.empty()) words.push_back(std::move(current));
          current.clear();
          words.emplace_back(ch);
        } else {
          current.append(ch);
        }
        k += len;
      }
      if (!current.empty()) words.push_back(std::move(current));
    }
    i = j;
  }
  return words;
}

Stoplist::Stoplist(std::vector<std::string> words) {
  for (auto& w : words) words_.insert(lower_ascii(w));
}

Stoplist Stoplist::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open stop-word file " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && is_space(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty() && line[0] != '#') words.push_back(line);
  }
  return Stoplist(std::move(words));
}

std::vector<std::string> remove_stopwords(const std::vector<std::string>& words,
                                          const Stoplist& stoplist) {
  std::vector<std::string> out;
  out.reserve(words.size());
  for (const auto& w : words) {
    if (parse_tag(w) || is_index_word(w) || !stoplist.contains(w)) out.push_back(w);
  }
  return out;
}

TokenSequence encode_tagged(std::string_view tagged_text, const Stoplist* stoplist,
                            const Vocabulary& vocab) {
  auto words = split_words(tagged_text);
  if (stoplist != nullptr) words = remove_stopwords(words, *stoplist);
  return tokenize_words(words, vocab);
}

namespace {

TokenSequence without_separator(TokenSequence seq, TokenId separator) {
  TokenSequence out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.ids[i] != separator) out.push_back(std::move(seq.tokens[i]), seq.ids[i]);
  }
  return out;
}

template <typename F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw InputError(std::string("preprocess[") + name + "]: " + e.what());
  }
}

}  // namespace

PreprocessedPair preprocess_pair(std::string_view answer, std::string_view passage,
                                 const EntityTagger& tagger, const Stoplist& stoplist,
                                 const Vocabulary& vocab, const PreprocessOptions& options) {
  if (answer.empty()) throw InputError("preprocess: answer is empty");
  if (passage.empty()) throw InputError("preprocess: passage is empty");
  const Stoplist* stop = options.remove_stopwords ? &stoplist : nullptr;

  PreprocessedPair out;
  // The passage owns index assignment; the answer reuses (and may extend) it.
  auto passage_spans = stage("tag-passage", [&] { return tag_entities(passage, tagger, "passage"); });
  out.passage = stage("replace-passage", [&] { return replace_with_indexed_tags(passage, passage_spans); });
  auto answer_spans = stage("tag-answer", [&] { return tag_entities(answer, tagger, "answer"); });
  TaggedPassage tagged_answer = stage("replace-answer", [&] {
    return replace_with_indexed_tags(answer, answer_spans, out.passage.entity_map);
  });
  out.passage.entity_map = tagged_answer.entity_map;
  out.answer_text = tagged_answer.text;

  const TokenId sep = vocab.separator_id();
  TokenSequence answer_pieces =
      stage("wordpiece-answer", [&] { return without_separator(encode_tagged(tagged_answer.text, stop, vocab), sep); });
  TokenSequence passage_pieces =
      stage("wordpiece-passage", [&] { return without_separator(encode_tagged(out.passage.text, stop, vocab), sep); });
  out.input = std::move(answer_pieces);
  out.input.push_back(vocab.reserved().separator, sep);
  out.input.append(passage_pieces);
  return out;
}

TokenSequence preprocess_question(std::string_view question, EntityMap& map,
                                  const EntityTagger& tagger, const Vocabulary& vocab) {
  if (question.empty()) throw InputError("preprocess: question is empty");
  auto spans = stage("tag-question", [&] { return tag_entities(question, tagger, "question"); });
  TaggedPassage tagged = stage("replace-question", [&] { return replace_with_indexed_tags(question, spans, map); });
  map = tagged.entity_map;
  return stage("wordpiece-question", [&] { return encode_tagged(tagged.text, nullptr, vocab); });
}

std::string postprocess_question(const TokenSequence& seq, const ReservedTokens& reserved) {
  std::vector<std::string> kept;
  for (const auto& t : seq.tokens) {
    if (t == reserved.bos || t == reserved.eos || t == reserved.pad) continue;
    kept.push_back(t);
  }
  if (!kept.empty() && kept.front().size() > 2 && kept.front().rfind("##", 0) == 0) {
    kept.front().erase(0, 2);
  }
  const std::string joined = detokenize(kept);
  std::string out;
  out.reserve(joined.size());
  for (char c : joined) {
    if (c == ' ' && !out.empty() && out.back() == ' ') continue;
    if (c == '?' && !out.empty() && out.back() == ' ') out.pop_back();
    out.push_back(c);
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

}  // namespace qg
