#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>

#include "qg/generation.hpp"
#include "qg/training.hpp"

namespace fs = std::filesystem;
using namespace qg;

namespace {

// Handcrafted next-token distributions keyed by prefix (without [BOS]).
class TableScorer : public StepScorer {
 public:
  TableScorer(std::size_t vocab, std::vector<double> fallback) : vocab_(vocab), fallback_(std::move(fallback)) {}

  void set(std::vector<TokenId> prefix, std::vector<double> probs) { table_[std::move(prefix)] = std::move(probs); }

  std::vector<double> log_probs(const std::vector<TokenId>& prefix) const {
    auto it = table_.find(prefix);
    const auto& p = it == table_.end() ? fallback_ : it->second;
    std::vector<double> out;
    for (double x : p) out.push_back(std::log(x));
    return out;
  }

  std::size_t vocab_size() const override { return vocab_; }
  std::vector<std::vector<double>> next_log_probs(const std::vector<std::vector<TokenId>>& prefixes) override {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) out.push_back(log_probs({p.begin() + 1, p.end()}));
    return out;
  }

 private:
  std::size_t vocab_;
  std::vector<double> fallback_;
  std::map<std::vector<TokenId>, std::vector<double>> table_;
};

constexpr TokenId kBos = 0, kEos = 1, kA = 2, kB = 3;

// Greedy takes `a` (0.5) and then stops at 0.34; `b` (0.4) then [EOS] at 0.9
// is the better sequence.
TableScorer trap_scorer() {
  TableScorer s(4, {0.25, 0.25, 0.25, 0.25});
  s.set({}, {0.05, 0.05, 0.5, 0.4});
  s.set({kA}, {0.02, 0.34, 0.32, 0.32});
  s.set({kB}, {0.02, 0.9, 0.04, 0.04});
  return s;
}

struct Scored {
  std::vector<TokenId> tokens;
  double score;
};

// Every sequence of at most max_len chosen tokens: either ended by a chosen
// [EOS] or cut at max_len.
Scored exhaustive_best(const TableScorer& s, std::size_t max_len, double alpha) {
  Scored best{{}, -INFINITY};
  std::function<void(std::vector<TokenId>&, double)> walk = [&](std::vector<TokenId>& prefix, double lp) {
    const auto next = s.log_probs(prefix);
    for (TokenId t = 0; t < 4; ++t) {
      prefix.push_back(t);
      const double total = lp + next[static_cast<std::size_t>(t)];
      const bool ends = t == kEos || prefix.size() == max_len;
      if (ends) {
        const double score = total / std::pow(static_cast<double>(prefix.size()), alpha);
        if (score > best.score) best = {prefix, score};
      } else {
        walk(prefix, total);
      }
      prefix.pop_back();
    }
  };
  std::vector<TokenId> prefix;
  walk(prefix, 0.0);
  if (best.tokens.back() != kEos) best.tokens.push_back(kEos);
  return best;
}

ModelConfig tiny(std::size_t vocab) {
  ModelConfig c;
  c.d_model = 16;
  c.num_heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.ffn_dim = 32;
  c.vocab_size = vocab;
  c.max_positions = 64;
  c.dropout = 0.0;
  return c;
}

std::vector<TokenId> random_input(std::mt19937_64& rng, std::size_t vocab) {
  std::vector<TokenId> in(3 + rng() % 12);
  for (auto& t : in) t = static_cast<TokenId>(4 + rng() % (vocab - 4));
  return in;
}

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

}  // namespace

TEST(BeamSearch, FindsExhaustiveOptimumWhereGreedyFails) {
  TableScorer s = trap_scorer();
  GenerationConfig c{4, 3, 0.6};
  const auto hyps = beam_search(s, kBos, kEos, c);
  const Scored oracle = exhaustive_best(s, 3, 0.6);
  ASSERT_FALSE(hyps.empty());
  EXPECT_EQ(hyps.front().tokens, oracle.tokens);
  EXPECT_NEAR(hyps.front().score, oracle.score, 1e-12);
  EXPECT_EQ(hyps.front().tokens, (std::vector<TokenId>{kB, kEos}));
  EXPECT_EQ(greedy_search(s, kBos, kEos, 3).tokens, (std::vector<TokenId>{kA, kEos}));
}

TEST(BeamSearch, MatchesExhaustiveOnRandomTables) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::size_t agree = 0;
  const std::size_t trials = 200;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    auto draw = [&] {
      std::vector<double> p(4);
      double sum = 0.0;
      for (auto& x : p) sum += x = u(rng);
      for (auto& x : p) x /= sum;
      return p;
    };
    TableScorer s(4, draw());
    s.set({}, draw());
    for (TokenId a = 0; a < 4; ++a) {
      s.set({a}, draw());
      for (TokenId b = 0; b < 4; ++b) s.set({a, b}, draw());
    }
    const auto top = beam_search(s, kBos, kEos, {4, 3, 0.6}).front();
    const Scored oracle = exhaustive_best(s, 3, 0.6);
    EXPECT_GE(oracle.score, top.score - 1e-12);
    agree += top.tokens == oracle.tokens;
  }
  // beam 4 over a 4-token vocabulary prunes little at this depth
  EXPECT_GE(agree, trials * 9 / 10);
}

TEST(BeamSearch, MaxLengthOneRanksByFirstStep) {
  TableScorer s = trap_scorer();
  const auto hyps = beam_search(s, kBos, kEos, {4, 1, 0.6});
  ASSERT_EQ(hyps.size(), 4u);
  const std::vector<TokenId> order{kA, kB, kBos, kEos};  // 0.5, 0.4, then ties by id
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(hyps[i].tokens.front(), order[i]);
    EXPECT_DOUBLE_EQ(hyps[i].score, s.log_probs({})[static_cast<std::size_t>(order[i])]);
    EXPECT_EQ(hyps[i].tokens.back(), kEos);
    EXPECT_EQ(hyps[i].forced_eos, order[i] != kEos);
  }
}

TEST(BeamSearch, HypothesesEndWithEosAndAreRanked) {
  TableScorer s = trap_scorer();
  const auto hyps = beam_search(s, kBos, kEos, {3, 5, 1.0});
  ASSERT_EQ(hyps.size(), 3u);
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    EXPECT_TRUE(hyps[i].finished);
    EXPECT_EQ(hyps[i].tokens.back(), kEos);
    EXPECT_EQ(std::count(hyps[i].tokens.begin(), hyps[i].tokens.end(), kEos), 1);
    EXPECT_LE(hyps[i].scored_length(), 5u);
    if (i > 0) {
      EXPECT_GE(hyps[i - 1].score, hyps[i].score);
    }
  }
}

TEST(BeamSearch, ConfigValidation) {
  TableScorer s = trap_scorer();
  EXPECT_THROW(beam_search(s, kBos, kEos, {0, 3, 0.6}), InputError);
  EXPECT_THROW(beam_search(s, kBos, kEos, {2, 0, 0.6}), InputError);
  EXPECT_THROW(beam_search(s, kBos, kEos, {2, 3, -0.1}), InputError);
}

TEST(ModelBeam, BeamOneEqualsGreedyOnFiftyInputs) {
  Transformer m(tiny(24), 5);
  std::mt19937_64 rng(12);
  for (int i = 0; i < 50; ++i) {
    const auto input = random_input(rng, 24);
    ModelScorer a(m, input), b(m, input);
    const auto beam = beam_search(a, 2, 3, {1, 12, 0.6});
    const auto greedy = greedy_search(b, 2, 3, 12);
    ASSERT_EQ(beam.size(), 1u);
    EXPECT_EQ(beam.front().tokens, greedy.tokens) << i;
    EXPECT_EQ(beam.front().log_prob, greedy.log_prob) << i;
  }
}

TEST(ModelBeam, WiderBeamNeverScoresBelowGreedy) {
  Transformer m(tiny(24), 6);
  std::mt19937_64 rng(13);
  for (int i = 0; i < 30; ++i) {
    const auto input = random_input(rng, 24);
    ModelScorer scorer(m, input);
    const double greedy = beam_search(scorer, 2, 3, {1, 8, 0.6}).front().score;
    for (std::size_t b : {2, 4, 6}) {
      EXPECT_GE(beam_search(scorer, 2, 3, {b, 8, 0.6}).front().score, greedy - 1e-12) << i << " beam " << b;
    }
  }
}

TEST(ModelBeam, StoredScoresMatchTeacherForcing) {
  Transformer m(tiny(24), 7);
  std::mt19937_64 rng(14);
  for (int i = 0; i < 10; ++i) {
    const auto input = random_input(rng, 24);
    ModelScorer scorer(m, input);
    for (const auto& h : beam_search(scorer, 2, 3, {4, 10, 0.6})) {
      ModelScorer fresh(m, input);
      EXPECT_NEAR(sequence_log_prob(fresh, 2, h), h.log_prob, 1e-9);
      EXPECT_DOUBLE_EQ(h.score, length_normalized(h.log_prob, h.scored_length(), 0.6));
    }
  }
}

TEST(ModelBeam, Deterministic) {
  Transformer m(tiny(24), 8);
  const std::vector<TokenId> input{5, 9, 11, 4, 7};
  ModelScorer a(m, input), b(m, input);
  const auto x = beam_search(a, 2, 3, {4, 10, 0.6}), y = beam_search(b, 2, 3, {4, 10, 0.6});
  ASSERT_EQ(x.size(), y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(x[i].tokens, y[i].tokens);
    EXPECT_EQ(x[i].score, y[i].score);
  }
}

TEST(Substitute, ReplacesKnownTags) {
  EntityMap map;
  for (int i = 0; i < 8; ++i) map.assign(EntityTag::kPerson, "p" + std::to_string(i));
  map.assign(EntityTag::kPerson, "tesla");
  map.assign(EntityTag::kGpe, "smiljan");
  EXPECT_EQ(substitute_entities("where was PERSON 8 born?", map), "where was tesla born?");
  EXPECT_EQ(substitute_entities("what is in GPE 0?", map), "what is in smiljan?");
  EXPECT_EQ(substitute_entities("what is this?", map), "what is this?");
  EXPECT_EQ(substitute_entities("who leads ORG 7?", map), "who leads ORG 7?");
  EXPECT_EQ(substitute_entities("PERSON 99 and PERSON", map), "PERSON 99 and PERSON");
  EXPECT_EQ(substitute_entities("", map), "");
}

TEST(GenerateQuestion, OutputIsClean) {
  const Env& e = env();
  const auto examples = invert(e.records, e.tagger, e.stoplist, e.vocab);
  const TokenMap map = build_token_map(examples, e.vocab);
  ModelConfig c = tiny(map.size());
  c.max_positions = 512;
  Transformer m(c, 9);
  Generator g{m, map, e.vocab, e.tagger, e.stoplist, {}};
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& r = e.records[i];
    const auto q = generate_question(g, *r.passage, select_answer(r.answers).text, {2, 12, 0.6});
    for (const char* bad : {"##", "[PAD]", "[BOS]", "[EOS]"}) EXPECT_EQ(q.question.find(bad), std::string::npos) << q.question;
    EXPECT_FALSE(q.entity_map.empty());
  }
  EXPECT_THROW(generate_question(g, "", "x", {}), InputError);
  EXPECT_THROW(generate_question(g, "x", "", {}), InputError);
}

TEST(GenerateQuestion, OverfitModelReproducesItsQuestion) {
  const Env& e = env();
  const std::vector<SquadRecord> one{e.records[0]};
  const auto examples = invert(one, e.tagger, e.stoplist, e.vocab);
  const TokenMap map = build_token_map(examples, e.vocab);
  ModelConfig c = tiny(map.size());
  c.d_model = 32;
  c.ffn_dim = 64;
  c.max_positions = 256;
  Transformer m(c, 10);
  TrainState state = TrainState::fresh(m, 0);
  TrainConfig tc;
  tc.learning_rate = 5e-3;
  tc.warmup_steps = 20;
  tc.total_steps = 150;
  tc.batch_size = 1;
  tc.checkpoint_every = 0;
  const auto model_examples = to_model_ids(examples, map);
  const fs::path dir = fs::temp_directory_path() / "qg_generation_overfit";
  train(m, map, bucket_by_length(model_examples, {{256, 48}}, 0), state, tc, {dir, {}, {}});
  fs::remove_all(dir);

  Generator g{m, map, e.vocab, e.tagger, e.stoplist, {}};
  const auto q = generate_question(g, *one[0].passage, select_answer(one[0].answers).text, {});
  const std::string expected = postprocess_question(sequence_from_ids(examples[0].target, e.vocab), e.vocab.reserved());
  EXPECT_EQ(q.question, expected);
  EXPECT_FALSE(q.best.forced_eos);
}

TEST(GenerateBatch, WorkersKeepInputOrderAndAgree) {
  const Env& e = env();
  const auto examples = invert(e.records, e.tagger, e.stoplist, e.vocab);
  const TokenMap map = build_token_map(examples, e.vocab);
  ModelConfig c = tiny(map.size());
  c.max_positions = 512;
  Transformer m(c, 11);
  Generator g{m, map, e.vocab, e.tagger, e.stoplist, {}};
  std::vector<GenerationRequest> requests;
  for (std::size_t i = 0; i < 6; ++i) {
    requests.push_back({e.records[i].id, *e.records[i].passage, select_answer(e.records[i].answers).text});
  }
  const GenerationConfig gc{2, 8, 0.6};
  const auto serial = generate_batch(g, requests, gc, 1);
  const auto parallel = generate_batch(g, requests, gc, 3);
  ASSERT_EQ(serial.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(serial[i].id, requests[i].id);
    EXPECT_EQ(serial[i].question_tagged, parallel[i].question_tagged);
    EXPECT_EQ(serial[i].score, parallel[i].score);
  }

  const fs::path dir = fs::temp_directory_path() / "qg_generation_io";
  fs::create_directories(dir);
  write_results(dir / "a.jsonl", serial);
  write_results(dir / "b.jsonl", parallel);
  std::ifstream a(dir / "a.jsonl"), b(dir / "b.jsonl");
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(a), {}), std::string(std::istreambuf_iterator<char>(b), {}));
  fs::remove_all(dir);
}

TEST(GenerateBatch, RequestFileErrorsNameTheLine) {
  const fs::path dir = fs::temp_directory_path() / "qg_generation_requests";
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "in.jsonl");
    out << R"({"id":"a","passage":"p","answer":"x"})" << "\n\n" << R"({"id":"b","passage":"p"})" << "\n";
  }
  try {
    read_requests(dir / "in.jsonl");
    FAIL();
  } catch (const InputError& err) {
    EXPECT_NE(std::string(err.what()).find("in.jsonl:3"), std::string::npos) << err.what();
    EXPECT_NE(std::string(err.what()).find("answer"), std::string::npos) << err.what();
  }
  EXPECT_THROW(read_requests(dir / "missing.jsonl"), IoError);
  fs::remove_all(dir);
}
