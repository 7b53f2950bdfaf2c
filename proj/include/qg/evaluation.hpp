#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace qg {

struct EditAlignment {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t correct = 0;

  std::size_t distance() const { return substitutions + deletions + insertions; }
  std::size_t reference_length() const { return substitutions + deletions + correct; }
  std::size_t hypothesis_length() const { return substitutions + insertions + correct; }
  bool operator==(const EditAlignment&) const = default;
};

// Lowercased whitespace words with punctuation split off as separate words,
// except a trailing '?', which stays on its word as in rendered questions.
std::vector<std::string> wer_words(std::string_view text);

// Unit-cost word Levenshtein. Among minimal alignments the backtrace takes
// correct, then substitution, then deletion, then insertion.
EditAlignment edit_alignment(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis);

// (S + D + I) / N; InputError when the reference is empty.
double wer_normalized(const EditAlignment& a);

struct QuestionPair {
  std::string id;
  std::string reference;
  std::string hypothesis;
};

struct PairScore {
  std::string id;
  EditAlignment alignment;
  double normalized = 0.0;
  std::string first_word_ref;
  std::string first_word_hyp;
};

using FrequencyTable = std::vector<std::pair<std::string, std::size_t>>;

struct WordCountHistogram {
  double mean = 0.0;  // rounded to two decimals
  std::map<std::size_t, std::size_t> counts;
};

inline constexpr std::array<const char*, 5> kDistanceBuckets{"<=5", "6-10", "11-15", "16-20", ">=21"};
std::size_t distance_bucket(std::size_t distance);

struct CorpusReport {
  std::vector<PairScore> pairs;  // input order
  double mean_distance = 0.0;
  double mean_normalized = 0.0;
  double exact_match_rate = 0.0;
  std::array<std::size_t, 5> bucket_counts{};
  std::array<double, 5> bucket_shares{};
  FrequencyTable first_words_hyp;
  FrequencyTable first_words_ref;
  WordCountHistogram lengths_hyp;
  WordCountHistogram lengths_ref;
};

// First whitespace word of every non-empty question, by count descending and
// then word ascending.
FrequencyTable first_word_frequency(const std::vector<std::string>& questions);
WordCountHistogram word_count_histogram(const std::vector<std::string>& questions);

// Raises InputError on an empty list, duplicate ids or an empty reference.
CorpusReport corpus_report(const std::vector<QuestionPair>& pairs, std::size_t workers = 1);

// JSON lines with a string "id" and a string `field`.
std::vector<std::pair<std::string, std::string>> read_questions(const std::filesystem::path& path,
                                                                const std::string& field);
// Pairs references with hypotheses in reference order. Ids missing on either
// side raise InputError listing up to ten of them.
std::vector<QuestionPair> join_by_id(const std::vector<std::pair<std::string, std::string>>& references,
                                     const std::vector<std::pair<std::string, std::string>>& hypotheses);

std::string report_json(const CorpusReport& report);
// Columns: id, distance, normalized, ref_len, hyp_len, first_word_ref, first_word_hyp.
std::string report_csv(const CorpusReport& report);
std::string report_text(const CorpusReport& report);

}  // namespace qg
