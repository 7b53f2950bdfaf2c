#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "qg/squad.hpp"

namespace fs = std::filesystem;
using namespace qg;

namespace {

struct Env {
  Vocabulary vocab = Vocabulary::load(fs::path(QG_DATA) / "vocab.txt");
  GazetteerTagger tagger = GazetteerTagger::load(fs::path(QG_DATA) / "gazetteer.tsv");
  Stoplist stoplist = Stoplist::load(fs::path(QG_DATA) / "stopwords.txt");
  std::vector<SquadRecord> records = load_squad(fs::path(QG_FIXTURES) / "super_bowl_50.json");
};

const Env& env() {
  static const Env e;
  return e;
}

std::string minimal(const std::string& qa) {
  return R"({"version":"1.1","data":[{"title":"T","paragraphs":[{"context":"Paris is in France.","qas":[)" + qa +
         "]}]}]}";
}

std::string expect_input_error(const std::string& text) {
  try {
    parse_squad(text);
  } catch (const InputError& e) {
    return e.what();
  }
  ADD_FAILURE() << "no InputError";
  return {};
}

InvertedExample example(std::string id, std::size_t in, std::size_t out) {
  return {std::move(id), std::vector<TokenId>(in, 7), std::vector<TokenId>(out, 9)};
}

}  // namespace

TEST(LoadSquad, FixtureHasOneRecordPerQuestion) {
  const auto& r = env().records;
  ASSERT_EQ(r.size(), 32u);
  EXPECT_EQ(r.front().id, "sb50-001");
  EXPECT_EQ(r.front().title, "Super_Bowl_50");
  EXPECT_EQ(r.front().answers.size(), 3u);
  // questions on one paragraph share the passage object
  EXPECT_EQ(r[0].passage.get(), r[14].passage.get());
  EXPECT_NE(r[0].passage.get(), r[15].passage.get());
}

TEST(LoadSquad, OffsetsAreCodePoints) {
  const auto& rec = env().records[10];
  ASSERT_EQ(rec.answers[0].text, "24–10");
  auto tail = parse_squad(R"({"data":[{"title":"t","paragraphs":[{"context":"é x","qas":[{"id":"a","question":"q?","answers":[{"text":"x","answer_start":2}]}]}]}]})");
  EXPECT_EQ(tail[0].answers[0].offset, 2u);
}

TEST(LoadSquad, MinimalSingleQuestion) {
  auto r = parse_squad(minimal(R"({"id":"q1","question":"Where is Paris?","answers":[{"text":"France","answer_start":12}]})"));
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].question, "Where is Paris?");
  EXPECT_EQ(r[0].answers[0], (SquadAnswer{"France", 12}));
}

TEST(LoadSquad, MissingAnswersNamesPath) {
  auto msg = expect_input_error(minimal(R"({"id":"q1","question":"Where is Paris?"})"));
  EXPECT_NE(msg.find("data[0].paragraphs[0].qas[0]"), std::string::npos) << msg;
  EXPECT_NE(msg.find("answers"), std::string::npos) << msg;
}

TEST(LoadSquad, SchemaErrors) {
  EXPECT_NE(expect_input_error("{not json").find("malformed"), std::string::npos);
  EXPECT_NE(expect_input_error(R"({"version":"1.1"})").find("'data'"), std::string::npos);
  auto bad_offset = expect_input_error(
      minimal(R"({"id":"q1","question":"q","answers":[{"text":"France","answer_start":3}]})"));
  EXPECT_NE(bad_offset.find("answers[0]"), std::string::npos);
  auto negative = expect_input_error(
      minimal(R"({"id":"q1","question":"q","answers":[{"text":"France","answer_start":-1}]})"));
  EXPECT_NE(negative.find("answer_start"), std::string::npos);
  EXPECT_THROW(load_squad("/nonexistent/squad.json"), IoError);
}

TEST(SelectAnswer, StrictMajority) {
  EXPECT_EQ(select_answer({{"Denver Broncos", 177}, {"Denver Broncos", 177}, {"Broncos", 184}}),
            (SquadAnswer{"Denver Broncos", 177}));
}

TEST(SelectAnswer, SingleAnswer) { EXPECT_EQ(select_answer({{"x", 4}}), (SquadAnswer{"x", 4})); }

TEST(SelectAnswer, DistinctAnswersSmallestOffsetWins) {
  EXPECT_EQ(select_answer({{"c", 30}, {"a", 10}, {"b", 20}}), (SquadAnswer{"a", 10}));
  EXPECT_EQ(select_answer({{"zz", 5}, {"aa", 5}}), (SquadAnswer{"aa", 5}));
}

TEST(SelectAnswer, CaseInsensitiveCounting) {
  EXPECT_EQ(select_answer({{"Gold", 3}, {"gold", 40}, {"silver", 1}}), (SquadAnswer{"Gold", 3}));
}

TEST(SelectAnswer, PermutationInvariant) {
  std::mt19937_64 rng(11);
  const std::vector<std::string> texts{"a", "A", "b", "c", "bb"};
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<SquadAnswer> answers;
    const std::size_t n = 1 + rng() % 5;
    for (std::size_t i = 0; i < n; ++i) answers.push_back({texts[rng() % texts.size()], rng() % 6});
    const auto expected = select_answer(answers);
    std::shuffle(answers.begin(), answers.end(), rng);
    EXPECT_EQ(select_answer(answers), expected);
  }
}

TEST(Invert, TargetIsBosQuestionEos) {
  auto ex = invert(env().records, env().tagger, env().stoplist, env().vocab);
  ASSERT_EQ(ex.size(), 32u);
  const auto& v = env().vocab;
  for (const auto& e : ex) {
    ASSERT_GE(e.target.size(), 2u);
    EXPECT_EQ(e.target.front(), v.bos_id());
    EXPECT_EQ(e.target.back(), v.eos_id());
    EXPECT_EQ(std::count(e.input.begin(), e.input.end(), v.separator_id()), 1) << e.id;
  }
  EXPECT_EQ(postprocess_question(sequence_from_ids(ex[0].target, v), v.reserved()),
            "which ORG 1 team represented the ORG 2 at EVENT 0 DATE 0?");
}

TEST(Invert, PersonIndexFromPassageMap) {
  std::vector<std::pair<std::string, EntityTag>> people;
  std::string passage;
  for (char c = 'A'; c <= 'I'; ++c) {
    const std::string name = std::string("Person") + c + " Smith";
    people.push_back({name, EntityTag::kPerson});
    passage += name + " met the committee. ";
  }
  passage += "PersonI Smith was born in Lyon.";
  GazetteerTagger tagger(people);
  tagger.add("Lyon", EntityTag::kGpe);
  SquadRecord rec{"t", std::make_shared<const std::string>(passage), "q", "Where was PersonI Smith born?",
                  {{"Lyon", passage.size() - 5}}};
  auto ex = invert({rec}, tagger, env().stoplist, env().vocab);
  ASSERT_EQ(ex.size(), 1u);
  EXPECT_EQ(postprocess_question(sequence_from_ids(ex[0].target, env().vocab), env().vocab.reserved()),
            "where was PERSON 8 born?");
}

TEST(Invert, SharedPassageGivesIdenticalPassageIds) {
  auto ex = invert(env().records, env().tagger, env().stoplist, env().vocab);
  const auto sep = env().vocab.separator_id();
  auto passage_part = [&](const InvertedExample& e) {
    auto it = std::find(e.input.begin(), e.input.end(), sep);
    return std::vector<TokenId>(it + 1, e.input.end());
  };
  EXPECT_EQ(passage_part(ex[0]), passage_part(ex[1]));
  EXPECT_NE(ex[0].input, ex[1].input);
}

TEST(Invert, DeterministicAcrossRunsAndWorkers) {
  InvertOptions one, four;
  four.workers = 4;
  InvertStats s1, s4;
  auto a = invert(env().records, env().tagger, env().stoplist, env().vocab, one, &s1);
  auto b = invert(env().records, env().tagger, env().stoplist, env().vocab, four, &s4);
  auto c = invert(env().records, env().tagger, env().stoplist, env().vocab, one);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end(), [](auto& x, auto& y) { return x.id < y.id; }));
  EXPECT_EQ(s1.tag_counts, s4.tag_counts);
  EXPECT_EQ(s1.records, 32u);
  EXPECT_EQ(s1.tagged_examples, 32u);
}

TEST(Invert, TruncatesToConfiguredLimits) {
  InvertOptions opt;
  opt.max_input = 20;
  opt.max_target = 5;
  InvertStats stats;
  auto ex = invert(env().records, env().tagger, env().stoplist, env().vocab, opt, &stats);
  for (const auto& e : ex) {
    EXPECT_LE(e.input.size(), 20u);
    EXPECT_LE(e.target.size(), 5u);
    EXPECT_EQ(e.target.back(), env().vocab.eos_id());
  }
  EXPECT_EQ(stats.truncated_inputs, 32u);
  EXPECT_GT(stats.truncated_targets, 0u);
}

TEST(Invert, ErrorsCarryQuestionId) {
  SquadRecord rec{"t", std::make_shared<const std::string>("short"), "bad-7", "q?", {{"much longer answer", 0}}};
  try {
    invert({rec}, env().tagger, env().stoplist, env().vocab);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("bad-7"), std::string::npos);
  }
}

TEST(Buckets, AllSmallGiveOneNonEmptyBucket) {
  std::vector<InvertedExample> ex{example("a", 10, 4), example("b", 64, 16)};
  auto b = bucket_by_length(ex, default_bucket_bounds(), 0);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b[0].examples.size(), 2u);
  for (std::size_t i = 1; i < b.size(); ++i) EXPECT_TRUE(b[i].examples.empty());
  EXPECT_EQ(b[0].examples[0].input.size(), 64u);
  EXPECT_EQ(b[0].examples[0].input.back(), 0);
  EXPECT_EQ(b[0].examples[0].target.size(), 16u);
}

TEST(Buckets, SmallestFitNeedsBothDimensions) {
  auto b = bucket_by_length({example("x", 300, 20)}, {{64, 16}, {256, 32}, {512, 48}}, 0);
  EXPECT_TRUE(b[0].examples.empty());
  EXPECT_TRUE(b[1].examples.empty());
  EXPECT_EQ(b[2].examples.size(), 1u);
}

TEST(Buckets, EmptyDataset) {
  for (const auto& b : bucket_by_length({}, default_bucket_bounds(), 0)) EXPECT_TRUE(b.examples.empty());
}

TEST(Buckets, OversizeAndBadBoundsRejected) {
  EXPECT_THROW(bucket_by_length({example("x", 600, 4)}, default_bucket_bounds(), 0), InputError);
  EXPECT_THROW(bucket_by_length({}, {{128, 24}, {64, 16}}, 0), InputError);
  EXPECT_THROW(bucket_by_length({}, {}, 0), InputError);
}

TEST(Buckets, PartitionProperty) {
  std::mt19937_64 rng(5);
  std::vector<InvertedExample> ex;
  for (int i = 0; i < 500; ++i) ex.push_back(example(std::to_string(i), 1 + rng() % 512, 2 + rng() % 47));
  auto buckets = bucket_by_length(ex, default_bucket_bounds(), 0);
  std::set<std::string> seen;
  std::size_t total = 0;
  for (std::size_t k = 0; k < buckets.size(); ++k) {
    for (const auto& e : buckets[k].examples) {
      EXPECT_TRUE(seen.insert(e.id).second);
      EXPECT_EQ(e.input.size(), buckets[k].bound.max_input);
      const auto& orig = ex[std::stoul(e.id)];
      // smallest fit: the previous bucket must not fit
      if (k > 0) {
        const auto& prev = buckets[k - 1].bound;
        EXPECT_TRUE(orig.input.size() > prev.max_input || orig.target.size() > prev.max_target);
      }
    }
    total += buckets[k].examples.size();
  }
  EXPECT_EQ(total, ex.size());
}

TEST(ExampleCache, RoundTrip) {
  auto ex = invert(env().records, env().tagger, env().stoplist, env().vocab);
  const auto path = fs::temp_directory_path() / "qg_examples_roundtrip.jsonl";
  write_examples(path, ex);
  EXPECT_EQ(read_examples(path), ex);
  {
    std::ofstream out(path);
    out << "{\"format\":\"other\"}\n";
  }
  EXPECT_THROW(read_examples(path), InputError);
  fs::remove(path);
}
