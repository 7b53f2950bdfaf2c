#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "qg/preprocess.hpp"
#include "super_bowl.hpp"

namespace fs = std::filesystem;
using namespace qg;

namespace {

struct Env {
  Vocabulary vocab = Vocabulary::load(fs::path(QG_DATA) / "vocab.txt");
  GazetteerTagger tagger = GazetteerTagger::load(fs::path(QG_DATA) / "gazetteer.tsv");
  Stoplist stoplist = Stoplist::load(fs::path(QG_DATA) / "stopwords.txt");
};

const Env& env() {
  static const Env e;
  return e;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace

TEST(TagNames, RoundTripAllEighteen) {
  EXPECT_EQ(all_tags().size(), 18u);
  for (EntityTag t : all_tags()) EXPECT_EQ(parse_tag(tag_name(t)), t);
  EXPECT_EQ(tag_name(EntityTag::kWorkOfArt), "WORK_OF_ART");
  EXPECT_FALSE(parse_tag("ORGANIZATION"));
}

TEST(TagEntities, SingleGazetteerHit) {
  auto spans = tag_entities("Denver Broncos", env().tagger);
  ASSERT_EQ(spans.size(), 1u);
  EXPECT_EQ(spans[0].tag, EntityTag::kOrg);
  EXPECT_EQ(spans[0].start, 0u);
  EXPECT_EQ(spans[0].end, 14u);
}

TEST(TagEntities, NoHitsGivesEmptyList) {
  EXPECT_TRUE(tag_entities("nothing to see here", env().tagger).empty());
  EXPECT_THROW(tag_entities("", env().tagger), InputError);
}

TEST(TagEntities, LongestMatchWins) {
  GazetteerTagger g({{"New York", EntityTag::kGpe}, {"New York Times", EntityTag::kOrg}});
  auto spans = tag_entities("the New York Times", g);
  ASSERT_EQ(spans.size(), 1u);
  EXPECT_EQ(spans[0].tag, EntityTag::kOrg);
  EXPECT_EQ(spans[0].surface, "New York Times");
}

TEST(TagEntities, OnlyAtWordBoundaries) {
  GazetteerTagger g({{"50", EntityTag::kDate}, {"Rome", EntityTag::kGpe}});
  EXPECT_TRUE(tag_entities("the 50th Romeo 150", g).empty());
  EXPECT_EQ(tag_entities("(50) Rome.", g).size(), 2u);
}

TEST(TagEntities, TaggerFailureCarriesSourceId) {
  struct Broken : EntityTagger {
    std::vector<EntitySpan> tag(std::string_view) const override { throw std::runtime_error("boom"); }
  };
  try {
    tag_entities("text", Broken{}, "passage-17");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("passage-17"), std::string::npos);
  }
}

TEST(TagEntities, OverlappingSpansFromCustomTaggerRejected) {
  struct Overlap : EntityTagger {
    std::vector<EntitySpan> tag(std::string_view) const override {
      return {{0, 5, EntityTag::kOrg, "abcde"}, {3, 7, EntityTag::kOrg, "defg"}};
    }
  };
  EXPECT_THROW(tag_entities("abcdefgh", Overlap{}), InputError);
}

TEST(ReplaceTags, DistinctSurfacesGetDistinctIndices) {
  const std::string text = "the National Football League (NFL) met";
  auto tp = replace_with_indexed_tags(text, tag_entities(text, env().tagger));
  EXPECT_EQ(tp.text, "ORG 0 (ORG 1) met");
  EXPECT_EQ(tp.entity_map.surfaces(EntityTag::kOrg),
            (std::vector<std::string>{"the National Football League", "NFL"}));
}

TEST(ReplaceTags, RepeatedSurfaceSharesIndex) {
  auto tp = replace_with_indexed_tags(testdata::kSuperBowlPassage,
                                      tag_entities(testdata::kSuperBowlPassage, env().tagger));
  auto words = split_words(tp.text);
  int events = 0;
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    if (words[i] == "EVENT") {
      ++events;
      EXPECT_EQ(words[i + 1].substr(0, 1), "0");
    }
  }
  EXPECT_EQ(events, 5);
  EXPECT_EQ(tp.entity_map.count(EntityTag::kEvent), 1u);
}

TEST(ReplaceTags, NoSpansJustLowercases) {
  auto tp = replace_with_indexed_tags("Hello World", {});
  EXPECT_EQ(tp.text, "hello world");
  EXPECT_TRUE(tp.entity_map.empty());
}

TEST(ReplaceTags, CaseInsensitiveSurfaceSharing) {
  std::string text = "Apple and APPLE";
  std::vector<EntitySpan> spans{{0, 5, EntityTag::kOrg, "Apple"}, {10, 15, EntityTag::kOrg, "APPLE"}};
  auto tp = replace_with_indexed_tags(text, spans);
  EXPECT_EQ(tp.text, "ORG 0 and ORG 0");
}

TEST(ReplaceTags, OverlappingSpansRejected) {
  std::vector<EntitySpan> spans{{0, 5, EntityTag::kOrg, "abcde"}, {3, 7, EntityTag::kOrg, "defg"}};
  EXPECT_THROW(replace_with_indexed_tags("abcdefgh", spans), InputError);
}

TEST(ReplaceTags, IndicesAreCoherentAndDeterministic) {
  auto spans = tag_entities(testdata::kSuperBowlPassage, env().tagger);
  auto a = replace_with_indexed_tags(testdata::kSuperBowlPassage, spans);
  auto b = replace_with_indexed_tags(testdata::kSuperBowlPassage, spans);
  EXPECT_EQ(a.text, b.text);
  auto words = split_words(a.text);
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    if (auto tag = parse_tag(words[i])) {
      EXPECT_LT(std::stoul(words[i + 1]), a.entity_map.count(*tag)) << words[i];
    }
  }
  for (EntityTag t : all_tags()) {
    const auto& s = a.entity_map.surfaces(t);
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = i + 1; j < s.size(); ++j) EXPECT_NE(s[i], s[j]);
  }
}

TEST(SplitWords, PunctuationBecomesWords) {
  EXPECT_EQ(split_words("gold-themed (NFL) 24–10 \"l\"),"),
            (std::vector<std::string>{"gold", "-", "themed", "(", "NFL", ")", "24", "–", "10", "\"",
                                      "l", "\"", ")", ","}));
  EXPECT_EQ(split_words("WORK_OF_ART 3 x_y"),
            (std::vector<std::string>{"WORK_OF_ART", "3", "x", "_", "y"}));
  EXPECT_TRUE(split_words("   ").empty());
}

TEST(Stopwords, StandardListExamples) {
  const auto& s = env().stoplist;
  EXPECT_EQ(remove_stopwords({"the", "game", "was", "played"}, s),
            (std::vector<std::string>{"game", "played"}));
  EXPECT_TRUE(remove_stopwords({}, s).empty());
  EXPECT_EQ(remove_stopwords({"EVENT", "0", "the"}, s), (std::vector<std::string>{"EVENT", "0"}));
}

TEST(Stopwords, TagsSurviveEvenIfListed) {
  Stoplist s({"org", "0", "the"});
  EXPECT_EQ(remove_stopwords({"ORG", "0", "the", "x"}, s), (std::vector<std::string>{"ORG", "0", "x"}));
}

TEST(Stopwords, RemovalIsIdempotent) {
  std::mt19937_64 rng(4);
  const std::vector<std::string> pool{"the", "game", "a", "of", "ORG", "0", "was", "title", ",", "is"};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> words;
    const std::size_t n = rng() % 12;
    for (std::size_t i = 0; i < n; ++i) words.push_back(pool[rng() % pool.size()]);
    auto once = remove_stopwords(words, env().stoplist);
    EXPECT_EQ(remove_stopwords(once, env().stoplist), once);
  }
}

TEST(PreprocessPair, GoldenSuperBowlPassageWithStopwordsRetained) {
  PreprocessOptions keep{.remove_stopwords = false};
  auto pair = preprocess_pair("Denver Broncos", testdata::kSuperBowlPassage, env().tagger,
                              env().stoplist, env().vocab, keep);
  const auto expected = split_ws(testdata::kSuperBowlTagged);
  const auto& got = pair.input.tokens;
  // input = answer pieces, '*', passage pieces
  ASSERT_GE(got.size(), 3u);
  EXPECT_EQ(got[0], "ORG");
  EXPECT_EQ(got[1], "3");
  EXPECT_EQ(got[2], "*");
  std::vector<std::string> passage(got.begin() + 3, got.end());
  EXPECT_EQ(passage, expected);
}

TEST(PreprocessPair, StopwordsRemovedFromAnswerAndPassage) {
  auto pair = preprocess_pair("their third Super Bowl title", testdata::kSuperBowlPassage,
                              env().tagger, env().stoplist, env().vocab);
  std::vector<std::string> answer;
  for (const auto& t : pair.input.tokens) {
    if (t == "*") break;
    answer.push_back(t);
  }
  EXPECT_EQ(answer, (std::vector<std::string>{"ORDINAL", "0", "EVENT", "0", "title"}));
  for (const auto& t : pair.input.tokens) {
    EXPECT_NE(t, "the");
    EXPECT_NE(t, "was");
  }
}

TEST(PreprocessPair, ExactlyOneSeparator) {
  auto pair = preprocess_pair("a * b", "x * y * z Denver Broncos", env().tagger, env().stoplist,
                              env().vocab);
  EXPECT_EQ(std::count(pair.input.ids.begin(), pair.input.ids.end(), env().vocab.separator_id()), 1);
}

TEST(PreprocessPair, EmptyAnswerIsPreconditionError) {
  EXPECT_THROW(preprocess_pair("", testdata::kSuperBowlPassage, env().tagger, env().stoplist, env().vocab),
               InputError);
}

TEST(PreprocessQuestion, UsesPassageIndices) {
  auto pair = preprocess_pair("Denver Broncos", testdata::kSuperBowlPassage, env().tagger,
                              env().stoplist, env().vocab);
  EntityMap map = pair.passage.entity_map;
  auto q = preprocess_question("Which NFL team represented the AFC at Super Bowl 50?", map,
                               env().tagger, env().vocab);
  EXPECT_EQ(postprocess_question(q), "which ORG 1 team represented the ORG 2 at EVENT 0 DATE 0?");
}

TEST(Postprocess, StripsBoundaryTokensAndAttachesQuestionMark) {
  TokenSequence seq;
  for (std::string t : {"[BOS]", "where", "was", "PERSON", "8", "born", "?", "[EOS]"}) seq.push_back(t, 0);
  EXPECT_EQ(postprocess_question(seq), "where was PERSON 8 born?");

  TokenSequence empty;
  empty.push_back("[BOS]", 2);
  empty.push_back("[EOS]", 3);
  EXPECT_EQ(postprocess_question(empty), "");

  TokenSequence pieces;
  for (std::string t : {"suspend", "##ing", "?"}) pieces.push_back(t, 0);
  EXPECT_EQ(postprocess_question(pieces), "suspending?");
}

TEST(Postprocess, ToleratesLeadingContinuationAndPadding) {
  TokenSequence seq;
  for (std::string t : {"##ing", "what", "[PAD]", "[PAD]"}) seq.push_back(t, 0);
  EXPECT_EQ(postprocess_question(seq), "ing what");
}
