#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "qg/preprocess.hpp"
#include "qg/wordpiece.hpp"

namespace qg {

struct SquadAnswer {
  std::string text;
  std::size_t offset = 0;  // character (code point) offset into the passage

  bool operator==(const SquadAnswer&) const = default;
};

struct SquadRecord {
  std::string title;
  std::shared_ptr<const std::string> passage;  // shared by every question on the paragraph
  std::string id;
  std::string question;
  std::vector<SquadAnswer> answers;
};

// Reads a SQuAD v1.1 file (data -> paragraphs -> qas -> answers). One record
// per question, in file order. Schema violations raise InputError naming the
// JSON path, e.g. "data[0].paragraphs[0].qas[0]: missing 'answers'".
std::vector<SquadRecord> load_squad(const std::filesystem::path& path);
std::vector<SquadRecord> parse_squad(const std::string& json_text, const std::string& source = "<memory>");

// Most frequent answer text (case-insensitive); ties go to the smallest
// offset, then the lexicographically smallest text.
SquadAnswer select_answer(const std::vector<SquadAnswer>& answers);

struct InvertedExample {
  std::string id;
  std::vector<TokenId> input;   // answer, separator, passage
  std::vector<TokenId> target;  // [BOS] question [EOS]

  bool operator==(const InvertedExample&) const = default;
};

struct InvertOptions {
  std::size_t max_input = 512;
  std::size_t max_target = 48;
  std::size_t workers = 1;
  PreprocessOptions preprocess;
};

struct InvertStats {
  std::size_t records = 0;
  std::size_t truncated_inputs = 0;
  std::size_t truncated_targets = 0;
  std::size_t tagged_examples = 0;  // examples with at least one entity tag
  std::map<std::string, std::size_t> tag_counts;  // by tag name, over passages
};

// Builds (answer ⧺ * ⧺ passage) -> [BOS] question [EOS] examples. Output is
// sorted by question id whatever the worker count.
std::vector<InvertedExample> invert(const std::vector<SquadRecord>& records, const EntityTagger& tagger,
                                    const Stoplist& stoplist, const Vocabulary& vocab,
                                    const InvertOptions& options = {}, InvertStats* stats = nullptr);

struct BucketBound {
  std::size_t max_input = 0;
  std::size_t max_target = 0;

  bool operator==(const BucketBound&) const = default;
};

std::vector<BucketBound> default_bucket_bounds();

struct Bucket {
  BucketBound bound;
  std::vector<InvertedExample> examples;  // padded with [PAD] to the bound
};

// Places every example in the smallest bucket that fits both its input and
// target. Bounds must be strictly ascending in both components.
std::vector<Bucket> bucket_by_length(const std::vector<InvertedExample>& examples,
                                     const std::vector<BucketBound>& bounds, TokenId pad_id);

// JSON-lines cache: a header line {"format":"qg-examples","version":1,...}
// followed by one {"id","input","target"} object per example.
void write_examples(const std::filesystem::path& path, const std::vector<InvertedExample>& examples);
std::vector<InvertedExample> read_examples(const std::filesystem::path& path);

}  // namespace qg
