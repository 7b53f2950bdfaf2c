#include "qg/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "qg/error.hpp"

namespace qg {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

// ASCII punctuation other than '_', which belongs to tag names.
bool is_punct(char c) { return c != '_' && std::ispunct(static_cast<unsigned char>(c)) != 0; }

std::vector<std::string_view> whitespace_words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string format_fixed(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::vector<std::string> wer_words(std::string_view text) {
  std::vector<std::string> out;
  for (std::string_view w : whitespace_words(text)) {
    const bool question = w.size() > 1 && w.back() == '?';
    if (question) w.remove_suffix(1);
    const std::size_t first = out.size();
    std::string current;
    for (char c : w) {
      if (is_punct(c)) {
        if (!current.empty()) out.push_back(std::move(current));
        current.clear();
        out.emplace_back(1, c);
      } else {
        current += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      }
    }
    if (!current.empty()) out.push_back(std::move(current));
    if (question) {
      if (out.size() == first) out.emplace_back();
      out.back() += '?';
    }
  }
  return out;
}

EditAlignment edit_alignment(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }

  EditAlignment a;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    const std::size_t here = at(i, j);
    if (i > 0 && j > 0 && ref[i - 1] == hyp[j - 1] && at(i - 1, j - 1) == here) {
      ++a.correct;
      --i, --j;
    } else if (i > 0 && j > 0 && at(i - 1, j - 1) + 1 == here) {
      ++a.substitutions;
      --i, --j;
    } else if (i > 0 && at(i - 1, j) + 1 == here) {
      ++a.deletions;
      --i;
    } else {
      ++a.insertions;
      --j;
    }
  }
  return a;
}

double wer_normalized(const EditAlignment& a) {
  if (a.reference_length() == 0) throw InputError("WER undefined for an empty reference");
  return static_cast<double>(a.distance()) / static_cast<double>(a.reference_length());
}

std::size_t distance_bucket(std::size_t distance) {
  if (distance <= 5) return 0;
  if (distance >= 21) return 4;
  return (distance - 1) / 5;
}

FrequencyTable first_word_frequency(const std::vector<std::string>& questions) {
  std::map<std::string, std::size_t> counts;
  for (const auto& q : questions) {
    const auto words = whitespace_words(q);
    if (!words.empty()) ++counts[std::string(words.front())];
  }
  FrequencyTable out(counts.begin(), counts.end());
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

WordCountHistogram word_count_histogram(const std::vector<std::string>& questions) {
  WordCountHistogram h;
  std::size_t total = 0;
  for (const auto& q : questions) {
    const std::size_t n = whitespace_words(q).size();
    ++h.counts[n];
    total += n;
  }
  if (!questions.empty()) {
    h.mean = std::round(100.0 * static_cast<double>(total) / static_cast<double>(questions.size())) / 100.0;
  }
  return h;
}

CorpusReport corpus_report(const std::vector<QuestionPair>& pairs, std::size_t workers) {
  if (pairs.empty()) throw InputError("corpus report: no question pairs");
  std::unordered_set<std::string> seen;
  for (const auto& p : pairs) {
    if (!seen.insert(p.id).second) throw InputError("corpus report: duplicate id " + p.id);
  }

  CorpusReport r;
  r.pairs.resize(pairs.size());
  workers = std::max<std::size_t>(1, std::min(workers, pairs.size()));
  std::vector<std::exception_ptr> errors(workers);
  auto run = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < pairs.size(); i += workers) {
        const QuestionPair& p = pairs[i];
        PairScore& s = r.pairs[i];
        s.id = p.id;
        s.alignment = edit_alignment(wer_words(p.reference), wer_words(p.hypothesis));
        if (s.alignment.reference_length() == 0) throw InputError("question " + p.id + ": empty reference");
        s.normalized = wer_normalized(s.alignment);
        const auto ref = whitespace_words(p.reference), hyp = whitespace_words(p.hypothesis);
        if (!ref.empty()) s.first_word_ref = ref.front();
        if (!hyp.empty()) s.first_word_hyp = hyp.front();
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

  const double n = static_cast<double>(pairs.size());
  double distance = 0.0, normalized = 0.0;
  std::size_t exact = 0;
  for (const auto& s : r.pairs) {
    distance += static_cast<double>(s.alignment.distance());
    normalized += s.normalized;
    exact += s.alignment.distance() == 0;
    ++r.bucket_counts[distance_bucket(s.alignment.distance())];
  }
  r.mean_distance = distance / n;
  r.mean_normalized = normalized / n;
  r.exact_match_rate = static_cast<double>(exact) / n;
  for (std::size_t b = 0; b < r.bucket_counts.size(); ++b) {
    r.bucket_shares[b] = static_cast<double>(r.bucket_counts[b]) / n;
  }

  std::vector<std::string> refs, hyps;
  for (const auto& p : pairs) {
    refs.push_back(p.reference);
    hyps.push_back(p.hypothesis);
  }
  r.first_words_hyp = first_word_frequency(hyps);
  r.first_words_ref = first_word_frequency(refs);
  r.lengths_hyp = word_count_histogram(hyps);
  r.lengths_ref = word_count_histogram(refs);
  return r;
}

std::vector<std::pair<std::string, std::string>> read_questions(const std::filesystem::path& path,
                                                                const std::string& field) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
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
    for (const std::string& key : {std::string("id"), field}) {
      if (!j.is_object() || !j.contains(key) || !j[key].is_string()) {
        throw InputError(where + ": missing string '" + key + "'");
      }
    }
    out.emplace_back(j["id"].get<std::string>(), j[field].get<std::string>());
  }
  return out;
}

std::vector<QuestionPair> join_by_id(const std::vector<std::pair<std::string, std::string>>& references,
                                     const std::vector<std::pair<std::string, std::string>>& hypotheses) {
  std::unordered_map<std::string, const std::string*> hyp;
  for (const auto& [id, text] : hypotheses) {
    if (!hyp.emplace(id, &text).second) throw InputError("duplicate hypothesis id " + id);
  }
  std::vector<QuestionPair> out;
  std::vector<std::string> unmatched;
  std::unordered_set<std::string> ref_ids;
  for (const auto& [id, text] : references) {
    if (!ref_ids.insert(id).second) throw InputError("duplicate reference id " + id);
    auto it = hyp.find(id);
    if (it == hyp.end()) {
      unmatched.push_back(id);
    } else {
      out.push_back({id, text, *it->second});
    }
  }
  for (const auto& [id, text] : hypotheses) {
    if (!ref_ids.count(id)) unmatched.push_back(id);
  }
  if (!unmatched.empty()) {
    std::string msg = std::to_string(unmatched.size()) + " unmatched id(s):";
    for (std::size_t i = 0; i < std::min<std::size_t>(10, unmatched.size()); ++i) msg += " " + unmatched[i];
    if (unmatched.size() > 10) msg += " ...";
    throw InputError(msg);
  }
  return out;
}

std::string report_json(const CorpusReport& r) {
  using nlohmann::ordered_json;
  auto table = [](const FrequencyTable& t) {
    ordered_json a = ordered_json::array();
    for (const auto& [w, c] : t) a.push_back({w, c});
    return a;
  };
  auto histogram = [](const WordCountHistogram& h) {
    ordered_json counts = ordered_json::object();
    for (const auto& [len, c] : h.counts) counts[std::to_string(len)] = c;
    return ordered_json{{"mean", h.mean}, {"counts", counts}};
  };
  ordered_json buckets = ordered_json::array();
  for (std::size_t b = 0; b < kDistanceBuckets.size(); ++b) {
    buckets.push_back({{"range", kDistanceBuckets[b]}, {"count", r.bucket_counts[b]}, {"share", r.bucket_shares[b]}});
  }
  ordered_json j{{"questions", r.pairs.size()},
                 {"mean_wer", r.mean_distance},
                 {"mean_wer_normalized", r.mean_normalized},
                 {"exact_match_rate", r.exact_match_rate},
                 {"wer_buckets", buckets},
                 {"first_words_generated", table(r.first_words_hyp)},
                 {"first_words_reference", table(r.first_words_ref)},
                 {"word_counts_generated", histogram(r.lengths_hyp)},
                 {"word_counts_reference", histogram(r.lengths_ref)}};
  return j.dump(2) + "\n";
}

std::string report_csv(const CorpusReport& r) {
  std::string out = "id,distance,normalized,ref_len,hyp_len,first_word_ref,first_word_hyp\n";
  for (const auto& p : r.pairs) {
    out += csv_field(p.id) + ',' + std::to_string(p.alignment.distance()) + ',' + format_fixed(p.normalized, 6) + ',' +
           std::to_string(p.alignment.reference_length()) + ',' + std::to_string(p.alignment.hypothesis_length()) +
           ',' + csv_field(p.first_word_ref) + ',' + csv_field(p.first_word_hyp) + '\n';
  }
  return out;
}

std::string report_text(const CorpusReport& r) {
  std::ostringstream out;
  char line[160];
  auto row = [&](const char* label, const std::string& value) {
    std::snprintf(line, sizeof line, "%-28s %12s\n", label, value.c_str());
    out << line;
  };
  row("questions", std::to_string(r.pairs.size()));
  row("mean WER (words)", format_fixed(r.mean_distance, 2));
  row("mean WER (normalized)", format_fixed(r.mean_normalized, 4));
  row("exact match", format_fixed(100.0 * r.exact_match_rate, 2) + "%");
  row("mean words, generated", format_fixed(r.lengths_hyp.mean, 2));
  row("mean words, reference", format_fixed(r.lengths_ref.mean, 2));

  out << "\nWER range        count      share\n";
  for (std::size_t b = 0; b < kDistanceBuckets.size(); ++b) {
    std::snprintf(line, sizeof line, "%-12s %9zu %9s%%\n", kDistanceBuckets[b], r.bucket_counts[b],
                  format_fixed(100.0 * r.bucket_shares[b], 2).c_str());
    out << line;
  }

  out << "\nfirst word (generated)     count\n";
  for (std::size_t i = 0; i < std::min<std::size_t>(10, r.first_words_hyp.size()); ++i) {
    std::snprintf(line, sizeof line, "%-24s %8zu\n", r.first_words_hyp[i].first.c_str(), r.first_words_hyp[i].second);
    out << line;
  }
  return out.str();
}

}  // namespace qg
