#include "qg/generation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <thread>

#include <nlohmann/json.hpp>

#include "qg/error.hpp"

namespace qg {

void GenerationConfig::validate() const {
  if (beam_width < 1) throw InputError("generation: beam width must be at least 1");
  if (max_length < 1) throw InputError("generation: max length must be at least 1");
  if (!(length_alpha >= 0.0) || !std::isfinite(length_alpha)) {
    throw InputError("generation: length alpha must be a finite value >= 0");
  }
}

ModelScorer::ModelScorer(Transformer& model, std::vector<TokenId> input) : model_(model) {
  memory_ = model_.encode(tape_, {std::move(input)});
  mark_ = tape_.size();
}

std::size_t ModelScorer::vocab_size() const { return model_.config().vocab_size; }

std::vector<std::vector<double>> ModelScorer::next_log_probs(const std::vector<std::vector<TokenId>>& prefixes) {
  tape_.truncate(mark_);
  const Tensor& logits = model_.decode(tape_, memory_, prefixes).value();
  const std::size_t v = logits.cols();
  std::vector<std::vector<double>> out;
  out.reserve(prefixes.size());
  std::size_t row = 0;
  for (const auto& p : prefixes) {
    row += p.size();
    const double* z = &logits.data()[(row - 1) * v];
    const double m = *std::max_element(z, z + v);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(z[j] - m);
    const double lse = m + std::log(sum);
    std::vector<double>& lp = out.emplace_back(v);
    for (std::size_t j = 0; j < v; ++j) lp[j] = z[j] - lse;
  }
  return out;
}

double length_normalized(double log_prob, std::size_t length, double alpha) {
  return log_prob / std::pow(static_cast<double>(std::max<std::size_t>(length, 1)), alpha);
}

namespace {

struct Live {
  std::vector<TokenId> tokens;  // without [BOS]
  double log_prob = 0.0;
};

BeamHypothesis finish(std::vector<TokenId> tokens, double log_prob, bool forced, TokenId eos, double alpha) {
  BeamHypothesis h;
  h.tokens = std::move(tokens);
  if (forced) h.tokens.push_back(eos);
  h.log_prob = log_prob;
  h.finished = true;
  h.forced_eos = forced;
  h.score = length_normalized(log_prob, h.scored_length(), alpha);
  return h;
}

std::vector<TokenId> with_bos(TokenId bos, const std::vector<TokenId>& tokens, std::size_t count) {
  std::vector<TokenId> p;
  p.reserve(count + 1);
  p.push_back(bos);
  p.insert(p.end(), tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(count));
  return p;
}

bool ranks_before(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

}  // namespace

std::vector<BeamHypothesis> beam_search(StepScorer& scorer, TokenId bos, TokenId eos, const GenerationConfig& config) {
  config.validate();
  const std::size_t beam = config.beam_width;
  const double best_denominator = std::pow(static_cast<double>(config.max_length), config.length_alpha);

  std::vector<Live> live{Live{}};
  std::vector<BeamHypothesis> finished;

  struct Candidate {
    std::size_t parent;
    TokenId token;
    double log_prob;
  };

  for (std::size_t step = 1; step <= config.max_length && !live.empty(); ++step) {
    std::vector<std::vector<TokenId>> prefixes;
    for (const Live& h : live) prefixes.push_back(with_bos(bos, h.tokens, h.tokens.size()));
    const auto log_probs = scorer.next_log_probs(prefixes);

    std::vector<Candidate> candidates;
    for (std::size_t i = 0; i < live.size(); ++i) {
      const auto& lp = log_probs[i];
      std::vector<TokenId> ids(lp.size());
      for (std::size_t j = 0; j < ids.size(); ++j) ids[j] = static_cast<TokenId>(j);
      const std::size_t k = std::min(beam, ids.size());
      std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                        [&](TokenId a, TokenId b) { return lp[a] != lp[b] ? lp[a] > lp[b] : a < b; });
      for (std::size_t j = 0; j < k; ++j) candidates.push_back({i, ids[j], live[i].log_prob + lp[ids[j]]});
    }
    std::sort(candidates.begin(), candidates.end(), [&](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.parent != b.parent) return live[a.parent].tokens < live[b.parent].tokens;
      return a.token < b.token;
    });

    std::vector<Live> next;
    for (std::size_t rank = 0; rank < candidates.size() && (rank < beam || next.size() < beam); ++rank) {
      const Candidate& c = candidates[rank];
      std::vector<TokenId> tokens = live[c.parent].tokens;
      tokens.push_back(c.token);
      if (c.token == eos) {
        if (rank < beam) finished.push_back(finish(std::move(tokens), c.log_prob, false, eos, config.length_alpha));
      } else if (next.size() < beam) {
        next.push_back({std::move(tokens), c.log_prob});
      }
    }
    live = std::move(next);

    // Log-probs only fall, so a live hypothesis can at best reach
    // log_prob / max_length^alpha.
    if (finished.size() >= beam && !live.empty()) {
      std::sort(finished.begin(), finished.end(), ranks_before);
      double best_live = -std::numeric_limits<double>::infinity();
      for (const Live& h : live) best_live = std::max(best_live, h.log_prob / best_denominator);
      if (finished[beam - 1].score > best_live) live.clear();
    }
  }
  for (Live& h : live) finished.push_back(finish(std::move(h.tokens), h.log_prob, true, eos, config.length_alpha));

  std::sort(finished.begin(), finished.end(), ranks_before);
  if (finished.size() > beam) finished.resize(beam);
  return finished;
}

BeamHypothesis greedy_search(StepScorer& scorer, TokenId bos, TokenId eos, std::size_t max_length) {
  if (max_length < 1) throw InputError("generation: max length must be at least 1");
  std::vector<TokenId> tokens;
  double log_prob = 0.0;
  for (std::size_t step = 1; step <= max_length; ++step) {
    const auto lp = scorer.next_log_probs({with_bos(bos, tokens, tokens.size())}).front();
    const auto best = std::max_element(lp.begin(), lp.end());  // first maximum: smallest id
    const TokenId token = static_cast<TokenId>(best - lp.begin());
    tokens.push_back(token);
    log_prob += *best;
    if (token == eos) return finish(std::move(tokens), log_prob, false, eos, 0.0);
  }
  return finish(std::move(tokens), log_prob, true, eos, 0.0);
}

double sequence_log_prob(StepScorer& scorer, TokenId bos, const BeamHypothesis& hypothesis) {
  const std::size_t n = hypothesis.scored_length();
  std::vector<std::vector<TokenId>> prefixes;
  for (std::size_t k = 0; k < n; ++k) prefixes.push_back(with_bos(bos, hypothesis.tokens, k));
  const auto lps = scorer.next_log_probs(prefixes);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) total += lps[k][static_cast<std::size_t>(hypothesis.tokens[k])];
  return total;
}

GeneratedQuestion generate_question(const Generator& g, const std::string& passage, const std::string& answer,
                                    const GenerationConfig& config) {
  if (passage.empty()) throw InputError("generate: empty passage");
  if (answer.empty()) throw InputError("generate: empty answer");
  PreprocessedPair pair = preprocess_pair(answer, passage, g.tagger, g.stoplist, g.vocab, g.preprocess);
  std::vector<TokenId> input = g.map.to_model(pair.input.ids);
  if (input.size() > g.model.config().max_positions) input.resize(g.model.config().max_positions);

  ModelScorer scorer(g.model, std::move(input));
  const TokenId bos = g.map.to_model(g.vocab.bos_id());
  const TokenId eos = g.map.to_model(g.vocab.eos_id());

  GeneratedQuestion out;
  out.best = beam_search(scorer, bos, eos, config).front();
  out.question = postprocess_question(sequence_from_ids(g.map.to_full(out.best.tokens), g.vocab), g.vocab.reserved());
  out.entity_map = std::move(pair.passage.entity_map);
  return out;
}

std::string substitute_entities(const std::string& question, const EntityMap& map) {
  std::vector<std::string> words;
  std::size_t start = 0;
  while (true) {
    const std::size_t space = question.find(' ', start);
    words.push_back(question.substr(start, space - start));
    if (space == std::string::npos) break;
    start = space + 1;
  }

  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i > 0) out += ' ';
    const auto tag = parse_tag(words[i]);
    if (tag && i + 1 < words.size()) {
      const std::string& next = words[i + 1];
      std::size_t digits = 0;
      while (digits < next.size() && std::isdigit(static_cast<unsigned char>(next[digits]))) ++digits;
      if (digits > 0 && digits <= 9) {
        const std::size_t index = std::stoul(next.substr(0, digits));
        if (index < map.count(*tag)) {
          out += map.surfaces(*tag)[index] + next.substr(digits);
          ++i;
          continue;
        }
      }
    }
    out += words[i];
  }
  return out;
}

std::vector<GenerationRequest> read_requests(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<GenerationRequest> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw InputError(where + ": " + e.what());
    }
    GenerationRequest r;
    for (auto [key, field] : {std::pair{"id", &r.id}, {"passage", &r.passage}, {"answer", &r.answer}}) {
      if (!j.is_object() || !j.contains(key) || !j[key].is_string()) {
        throw InputError(where + ": missing string '" + key + "'");
      }
      *field = j[key].get<std::string>();
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<GenerationResult> generate_batch(const Generator& generator, const std::vector<GenerationRequest>& requests,
                                             const GenerationConfig& config, std::size_t workers) {
  config.validate();
  std::vector<GenerationResult> results(requests.size());
  workers = std::max<std::size_t>(1, std::min(workers, requests.size()));
  std::vector<std::exception_ptr> errors(workers);

  auto run = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < requests.size(); i += workers) {
        const GenerationRequest& r = requests[i];
        GeneratedQuestion q;
        try {
          q = generate_question(generator, r.passage, r.answer, config);
        } catch (const InputError& e) {
          throw InputError("request " + r.id + ": " + e.what());
        }
        results[i] = {r.id, q.question, substitute_entities(q.question, q.entity_map), q.best.score};
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(run, w);
    for (auto& t : threads) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

void write_results(const std::filesystem::path& path, const std::vector<GenerationResult>& results) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : results) {
    nlohmann::ordered_json j = {{"id", r.id},
                                {"question_tagged", r.question_tagged},
                                {"question_substituted", r.question_substituted},
                                {"score", r.score}};
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace qg
