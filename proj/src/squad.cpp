#include "qg/squad.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace qg {

using nlohmann::json;

namespace {

constexpr int kCacheVersion = 1;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("failed reading " + path.string());
  return ss.str();
}

const json& field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw InputError(where + ": expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw InputError(where + ": missing '" + key + "'");
  return *it;
}

const json& array_field(const json& obj, const char* key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_array()) throw InputError(where + "." + key + ": expected an array");
  return v;
}

std::string string_field(const json& obj, const char* key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_string()) throw InputError(where + "." + key + ": expected a string");
  return v.get<std::string>();
}

// Byte offset of the n-th code point, or npos if the string is shorter.
std::size_t byte_offset(const std::string& s, std::size_t n) {
  std::size_t seen = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if ((static_cast<unsigned char>(s[i]) & 0xC0) == 0x80) continue;
    if (seen == n) return i;
    ++seen;
  }
  return seen == n ? s.size() : std::string::npos;
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

InvertedExample invert_one(const SquadRecord& r, const EntityTagger& tagger, const Stoplist& stoplist,
                           const Vocabulary& vocab, const InvertOptions& opt, InvertStats& stats) {
  if (r.answers.empty()) throw InputError(r.id + ": no answers");
  const SquadAnswer answer = select_answer(r.answers);
  if (answer.text.size() > r.passage->size()) {
    throw InputError(r.id + ": answer longer than its passage");
  }
  try {
    PreprocessedPair pair = preprocess_pair(answer.text, *r.passage, tagger, stoplist, vocab, opt.preprocess);
    EntityMap map = pair.passage.entity_map;
    TokenSequence question = preprocess_question(r.question, map, tagger, vocab);

    InvertedExample ex;
    ex.id = r.id;
    ex.input = std::move(pair.input.ids);
    if (ex.input.size() > opt.max_input) {
      ex.input.resize(opt.max_input);
      ++stats.truncated_inputs;
    }
    ex.target.reserve(question.size() + 2);
    ex.target.push_back(vocab.bos_id());
    ex.target.insert(ex.target.end(), question.ids.begin(), question.ids.end());
    if (ex.target.size() + 1 > opt.max_target) {
      ex.target.resize(opt.max_target - 1);
      ++stats.truncated_targets;
    }
    ex.target.push_back(vocab.eos_id());

    bool tagged = false;
    for (EntityTag t : all_tags()) {
      const std::size_t n = pair.passage.entity_map.count(t);
      if (n) {
        stats.tag_counts[std::string(tag_name(t))] += n;
        tagged = true;
      }
    }
    if (tagged) ++stats.tagged_examples;
    return ex;
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw InputError("question " + r.id + ": " + e.what());
  }
}

}  // namespace

std::vector<SquadRecord> parse_squad(const std::string& json_text, const std::string& source) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw InputError(source + ": malformed JSON: " + e.what());
  }
  std::vector<SquadRecord> records;
  const json& data = array_field(doc, "data", "$");
  for (std::size_t a = 0; a < data.size(); ++a) {
    const std::string aw = "data[" + std::to_string(a) + "]";
    const std::string title = string_field(data[a], "title", aw);
    const json& paragraphs = array_field(data[a], "paragraphs", aw);
    for (std::size_t p = 0; p < paragraphs.size(); ++p) {
      const std::string pw = aw + ".paragraphs[" + std::to_string(p) + "]";
      auto passage = std::make_shared<const std::string>(string_field(paragraphs[p], "context", pw));
      const json& qas = array_field(paragraphs[p], "qas", pw);
      for (std::size_t q = 0; q < qas.size(); ++q) {
        const std::string qw = pw + ".qas[" + std::to_string(q) + "]";
        SquadRecord rec;
        rec.title = title;
        rec.passage = passage;
        rec.id = string_field(qas[q], "id", qw);
        rec.question = string_field(qas[q], "question", qw);
        const json& answers = array_field(qas[q], "answers", qw);
        if (answers.empty()) throw InputError(qw + ".answers: empty");
        for (std::size_t k = 0; k < answers.size(); ++k) {
          const std::string kw = qw + ".answers[" + std::to_string(k) + "]";
          SquadAnswer ans;
          ans.text = string_field(answers[k], "text", kw);
          const json& start = field(answers[k], "answer_start", kw);
          if (!start.is_number_unsigned() && !(start.is_number_integer() && start.get<long long>() >= 0)) {
            throw InputError(kw + ".answer_start: expected a non-negative integer");
          }
          ans.offset = start.get<std::size_t>();
          const std::size_t b = byte_offset(*passage, ans.offset);
          if (b == std::string::npos || passage->compare(b, ans.text.size(), ans.text) != 0) {
            throw InputError(kw + ": answer text not found at offset " + std::to_string(ans.offset));
          }
          rec.answers.push_back(std::move(ans));
        }
        records.push_back(std::move(rec));
      }
    }
  }
  return records;
}

std::vector<SquadRecord> load_squad(const std::filesystem::path& path) {
  return parse_squad(read_file(path), path.string());
}

SquadAnswer select_answer(const std::vector<SquadAnswer>& answers) {
  if (answers.empty()) throw InputError("select_answer: no answers");
  struct Group {
    std::size_t count = 0;
    SquadAnswer best;  // smallest offset, then smallest text
  };
  std::map<std::string, Group> groups;
  for (const auto& a : answers) {
    Group& g = groups[lower(a.text)];
    if (g.count == 0 || a.offset < g.best.offset ||
        (a.offset == g.best.offset && a.text < g.best.text)) {
      g.best = a;
    }
    ++g.count;
  }
  const Group* winner = nullptr;
  for (const auto& [key, g] : groups) {
    if (winner == nullptr || g.count > winner->count ||
        (g.count == winner->count &&
         (g.best.offset < winner->best.offset ||
          (g.best.offset == winner->best.offset && g.best.text < winner->best.text)))) {
      winner = &g;
    }
  }
  return winner->best;
}

std::vector<InvertedExample> invert(const std::vector<SquadRecord>& records, const EntityTagger& tagger,
                                    const Stoplist& stoplist, const Vocabulary& vocab,
                                    const InvertOptions& options, InvertStats* stats) {
  if (options.max_target < 2) throw InputError("invert: max_target must be at least 2");
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, records.size()));
  std::vector<InvertedExample> out(records.size());
  std::vector<InvertStats> partial(workers);
  std::vector<std::exception_ptr> errors(workers);

  auto run = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < records.size(); i += workers) {
        out[i] = invert_one(records[i], tagger, stoplist, vocab, options, partial[w]);
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
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::sort(out.begin(), out.end(),
            [](const InvertedExample& a, const InvertedExample& b) { return a.id < b.id; });
  if (stats != nullptr) {
    *stats = InvertStats{};
    stats->records = records.size();
    for (const auto& p : partial) {
      stats->truncated_inputs += p.truncated_inputs;
      stats->truncated_targets += p.truncated_targets;
      stats->tagged_examples += p.tagged_examples;
      for (const auto& [k, v] : p.tag_counts) stats->tag_counts[k] += v;
    }
  }
  return out;
}

std::vector<BucketBound> default_bucket_bounds() { return {{64, 16}, {128, 24}, {256, 32}, {512, 48}}; }

std::vector<Bucket> bucket_by_length(const std::vector<InvertedExample>& examples,
                                     const std::vector<BucketBound>& bounds, TokenId pad_id) {
  if (bounds.empty()) throw InputError("bucket_by_length: no bucket bounds");
  for (std::size_t i = 1; i < bounds.size(); ++i) {
    if (bounds[i].max_input < bounds[i - 1].max_input || bounds[i].max_target < bounds[i - 1].max_target ||
        bounds[i] == bounds[i - 1]) {
      throw InputError("bucket_by_length: bounds must be ascending");
    }
  }
  std::vector<Bucket> buckets(bounds.size());
  for (std::size_t i = 0; i < bounds.size(); ++i) buckets[i].bound = bounds[i];
  for (const auto& ex : examples) {
    auto it = std::find_if(bounds.begin(), bounds.end(), [&](const BucketBound& b) {
      return ex.input.size() <= b.max_input && ex.target.size() <= b.max_target;
    });
    if (it == bounds.end()) {
      throw InputError("bucket_by_length: example " + ex.id + " (input " + std::to_string(ex.input.size()) +
                       ", target " + std::to_string(ex.target.size()) + ") exceeds the largest bucket");
    }
    Bucket& b = buckets[static_cast<std::size_t>(it - bounds.begin())];
    InvertedExample padded = ex;
    padded.input.resize(b.bound.max_input, pad_id);
    padded.target.resize(b.bound.max_target, pad_id);
    b.examples.push_back(std::move(padded));
  }
  return buckets;
}

void write_examples(const std::filesystem::path& path, const std::vector<InvertedExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << json{{"format", "qg-examples"}, {"version", kCacheVersion}, {"count", examples.size()}}.dump() << '\n';
  for (const auto& ex : examples) {
    out << json{{"id", ex.id}, {"input", ex.input}, {"target", ex.target}}.dump() << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<InvertedExample> read_examples(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open example cache " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InputError(path.string() + ": empty example cache");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ":1: malformed header: " + e.what());
  }
  if (header.value("format", "") != "qg-examples" || header.value("version", 0) != kCacheVersion) {
    throw InputError(path.string() + ": not a version " + std::to_string(kCacheVersion) + " example cache");
  }
  std::vector<InvertedExample> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("input").get<std::vector<TokenId>>(),
                     j.at("target").get<std::vector<TokenId>>()});
    } catch (const json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (header.contains("count") && header["count"].get<std::size_t>() != out.size()) {
    throw InputError(path.string() + ": header count " + header["count"].dump() + " but " +
                     std::to_string(out.size()) + " examples");
  }
  return out;
}

}  // namespace qg
