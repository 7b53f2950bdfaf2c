#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "qg/preprocess.hpp"
#include "qg/transformer.hpp"
#include "qg/wordpiece.hpp"

namespace qg {

struct GenerationConfig {
  std::size_t beam_width = 4;
  std::size_t max_length = 48;  // chosen tokens, a natural [EOS] included
  double length_alpha = 0.6;

  void validate() const;
};

struct BeamHypothesis {
  std::vector<TokenId> tokens;  // without [BOS]; always ends with [EOS]
  double log_prob = 0.0;        // sum over chosen tokens
  double score = 0.0;           // log_prob / length^alpha
  bool finished = false;
  bool forced_eos = false;  // [EOS] appended at the length limit, not scored

  // Tokens that contributed to log_prob.
  std::size_t scored_length() const { return tokens.size() - (forced_eos ? 1 : 0); }
};

// Next-token log-probabilities for a batch of decoder prefixes, each starting
// with [BOS].
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::vector<std::vector<double>> next_log_probs(const std::vector<std::vector<TokenId>>& prefixes) = 0;
};

// Scores prefixes against one encoded input. Ids are model ids.
class ModelScorer : public StepScorer {
 public:
  ModelScorer(Transformer& model, std::vector<TokenId> input);

  std::size_t vocab_size() const override;
  std::vector<std::vector<double>> next_log_probs(const std::vector<std::vector<TokenId>>& prefixes) override;

 private:
  Transformer& model_;
  Tape tape_{false};
  Encoded memory_;
  std::size_t mark_ = 0;
};

double length_normalized(double log_prob, std::size_t length, double alpha);

// Ranked best first. Ties are broken by the token sequence, smallest ids
// first.
std::vector<BeamHypothesis> beam_search(StepScorer& scorer, TokenId bos, TokenId eos, const GenerationConfig& config);
BeamHypothesis greedy_search(StepScorer& scorer, TokenId bos, TokenId eos, std::size_t max_length);

// Teacher-forced log-probability of a hypothesis' scored tokens.
double sequence_log_prob(StepScorer& scorer, TokenId bos, const BeamHypothesis& hypothesis);

// Everything generate_question needs besides the text itself.
struct Generator {
  Transformer& model;
  const TokenMap& map;
  const Vocabulary& vocab;
  const EntityTagger& tagger;
  const Stoplist& stoplist;
  PreprocessOptions preprocess;
};

struct GeneratedQuestion {
  std::string question;  // tagged, as the model produced it
  EntityMap entity_map;
  BeamHypothesis best;
};

GeneratedQuestion generate_question(const Generator& generator, const std::string& passage,
                                    const std::string& answer, const GenerationConfig& config);

// Replaces every "TAG i" word pair by the i-th surface of that class.
// Unknown classes or indices stay as written.
std::string substitute_entities(const std::string& question, const EntityMap& map);

struct GenerationRequest {
  std::string id;
  std::string passage;
  std::string answer;
};

struct GenerationResult {
  std::string id;
  std::string question_tagged;
  std::string question_substituted;
  double score = 0.0;
};

std::vector<GenerationRequest> read_requests(const std::filesystem::path& path);
// Output order follows the input order whatever the worker count.
std::vector<GenerationResult> generate_batch(const Generator& generator, const std::vector<GenerationRequest>& requests,
                                             const GenerationConfig& config, std::size_t workers = 1);
void write_results(const std::filesystem::path& path, const std::vector<GenerationResult>& results);

}  // namespace qg
