// qgen: preprocess, train, generate and evaluate from one executable.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qg/error.hpp"
#include "qg/evaluation.hpp"
#include "qg/generation.hpp"
#include "qg/squad.hpp"
#include "qg/training.hpp"

namespace fs = std::filesystem;
using namespace qg;

namespace {

enum Exit { kOk = 0, kFailure = 1, kInput = 2, kIo = 3, kNumeric = 4 };

struct Settings {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  std::string squad;
  std::string vocab = "data/vocab.txt";
  std::string gazetteer = "data/gazetteer.tsv";
  std::string stoplist = "data/stopwords.txt";
  std::string reserved = "default";
  std::string output_dir = "out";
  std::string examples;
  std::string checkpoint;
  std::string metrics;
  std::string input;
  std::string output;
  std::string references;
  std::string hypotheses;
  std::string report_dir;

  std::size_t max_input = 512;
  std::size_t max_target = 48;
  bool remove_stopwords = true;

  ModelConfig model;
  TrainConfig train;
  bool resume = false;
  std::size_t log_every = 50;

  GenerationConfig generation;

  std::string reference_field = "question";
  std::string hypothesis_field = "question_tagged";
};

// "key = value" lines; "[section]" prefixes the following keys with
// "section.". Blank lines and lines starting with '#' or ';' are skipped.
std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  std::vector<std::pair<std::string, std::string>> out;
  std::string section;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw InputError(where + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError(where + ": expected key = value");
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw InputError(where + ": empty key");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    out.emplace_back(section.empty() ? key : section + "." + key, value);
  }
  return out;
}

ReservedTokens reserved_tokens(const Settings& s) {
  if (s.reserved == "bert") return ReservedTokens::bert();
  return {};
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw InputError("missing --" + what);
  if (!fs::is_regular_file(path)) throw IoError("cannot open " + what + " " + path);
}

void require_dir(const std::string& path, const std::string& what) {
  if (path.empty()) throw InputError("missing --" + what);
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec || !fs::is_directory(path)) throw IoError("cannot create " + what + " " + path);
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out) throw IoError("write failed: " + path.string());
}

void write_jsonl(const fs::path& path, const std::vector<nlohmann::json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_file(path, text);
}

int cmd_preprocess(const Settings& s) {
  require_file(s.squad, "paths.squad");
  require_file(s.vocab, "paths.vocab");
  require_file(s.gazetteer, "paths.gazetteer");
  require_file(s.stoplist, "paths.stoplist");
  require_dir(s.output_dir, "paths.output_dir");

  const Vocabulary vocab = Vocabulary::load(s.vocab, reserved_tokens(s));
  const GazetteerTagger tagger = GazetteerTagger::load(s.gazetteer);
  const Stoplist stoplist = Stoplist::load(s.stoplist);
  const std::vector<SquadRecord> records = load_squad(s.squad);

  InvertOptions options;
  options.max_input = s.max_input;
  options.max_target = s.max_target;
  options.workers = s.workers;
  options.preprocess.remove_stopwords = s.remove_stopwords;
  InvertStats stats;
  const std::vector<InvertedExample> examples = invert(records, tagger, stoplist, vocab, options, &stats);
  if (examples.empty()) std::cerr << "warning: " << s.squad << " contains no questions\n";

  const fs::path dir = s.output_dir;
  write_examples(dir / "examples.jsonl", examples);

  std::map<std::string, const SquadRecord*> by_id;
  for (const auto& r : records) by_id.emplace(r.id, &r);
  std::vector<nlohmann::json> inputs, refs;
  for (const auto& ex : examples) {
    const SquadRecord& r = *by_id.at(ex.id);
    inputs.push_back({{"id", ex.id}, {"passage", *r.passage}, {"answer", select_answer(r.answers).text}});
    const std::string question = postprocess_question(sequence_from_ids(ex.target, vocab), vocab.reserved());
    refs.push_back({{"id", ex.id}, {"question", question}});
  }
  write_jsonl(dir / "inputs.jsonl", inputs);
  write_jsonl(dir / "refs.jsonl", refs);

  const double n = examples.empty() ? 1.0 : static_cast<double>(examples.size());
  nlohmann::ordered_json summary{{"records", stats.records},
                                 {"examples", examples.size()},
                                 {"truncated_inputs", stats.truncated_inputs},
                                 {"truncated_targets", stats.truncated_targets},
                                 {"input_truncation_rate", static_cast<double>(stats.truncated_inputs) / n},
                                 {"target_truncation_rate", static_cast<double>(stats.truncated_targets) / n},
                                 {"tagged_examples", stats.tagged_examples},
                                 {"tag_coverage", static_cast<double>(stats.tagged_examples) / n},
                                 {"tag_counts", stats.tag_counts}};
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

int cmd_train(Settings s) {
  require_file(s.examples, "paths.examples");
  require_file(s.vocab, "paths.vocab");
  if (s.checkpoint.empty()) throw InputError("missing --paths.checkpoint_dir");
  const fs::path checkpoint = s.checkpoint;
  if (checkpoint.has_parent_path()) require_dir(checkpoint.parent_path().string(), "checkpoint parent directory");
  const fs::path metrics =
      s.metrics.empty() ? checkpoint.parent_path() / (checkpoint.filename().string() + ".metrics.jsonl") : fs::path(s.metrics);
  s.train.seed = s.seed;
  s.train.validate();

  const Vocabulary vocab = Vocabulary::load(s.vocab, reserved_tokens(s));
  const std::vector<InvertedExample> examples = read_examples(s.examples);
  if (examples.empty()) throw InputError(s.examples + " holds no examples");
  const TokenMap map = build_token_map(examples, vocab);
  const std::vector<InvertedExample> model_examples = to_model_ids(examples, map);

  s.model.vocab_size = map.size();
  s.model.pad_id = map.to_model(vocab.pad_id());
  std::optional<Checkpoint> resumed;
  if (s.resume && fs::exists(checkpoint / "state.json")) {
    resumed.emplace(load_checkpoint(checkpoint));
    if (resumed->map.full_ids() != map.full_ids()) {
      throw InputError("checkpoint " + checkpoint.string() + " was trained on a different vocabulary");
    }
    std::cout << "resuming from step " << resumed->state.step << "\n";
  }
  Transformer model = resumed ? std::move(resumed->model) : Transformer(s.model, s.seed);
  TrainState state = resumed ? std::move(resumed->state) : TrainState::fresh(model, s.seed);
  const std::vector<Bucket> buckets = bucket_by_length(model_examples, default_bucket_bounds(), model.config().pad_id);

  std::cout << "examples " << examples.size() << ", vocabulary " << map.size() << ", parameters "
            << model.parameter_count() << "\n";
  TrainOptions options{checkpoint, metrics, [&](const StepMetrics& m) {
                         if (s.log_every == 0 || (m.step % s.log_every != 0 && m.step != s.train.total_steps)) return;
                         std::printf("step %6zu  loss %.4f  lr %.3e  tokens/s %.0f\n", m.step, m.loss, m.lr,
                                     m.tokens_per_sec);
                         std::fflush(stdout);
                       }};
  train(model, map, buckets, state, s.train, options);
  std::cout << "checkpoint " << checkpoint.string() << " at step " << state.step << "\n";
  return kOk;
}

int cmd_generate(const Settings& s) {
  if (s.checkpoint.empty()) throw InputError("missing --paths.checkpoint_dir");
  require_file((fs::path(s.checkpoint) / "params.bin").string(), "checkpoint");
  require_file(s.vocab, "paths.vocab");
  require_file(s.gazetteer, "paths.gazetteer");
  require_file(s.stoplist, "paths.stoplist");
  require_file(s.input, "paths.input");
  if (s.output.empty()) throw InputError("missing --paths.output");
  if (fs::path(s.output).has_parent_path()) require_dir(fs::path(s.output).parent_path().string(), "output directory");
  s.generation.validate();

  const Vocabulary vocab = Vocabulary::load(s.vocab, reserved_tokens(s));
  const GazetteerTagger tagger = GazetteerTagger::load(s.gazetteer);
  const Stoplist stoplist = Stoplist::load(s.stoplist);
  TokenMap map = TokenMap::identity(1, 0);
  Transformer model = Transformer::load(s.checkpoint, &map);
  const std::vector<GenerationRequest> requests = read_requests(s.input);

  PreprocessOptions preprocess;
  preprocess.remove_stopwords = s.remove_stopwords;
  const Generator generator{model, map, vocab, tagger, stoplist, preprocess};
  const auto results = generate_batch(generator, requests, s.generation, s.workers);
  write_results(s.output, results);
  std::cout << "generated " << results.size() << " questions into " << s.output << "\n";
  return kOk;
}

int cmd_evaluate(const Settings& s) {
  require_file(s.references, "paths.references");
  require_file(s.hypotheses, "paths.hypotheses");
  require_dir(s.report_dir, "paths.report_dir");

  const auto pairs = join_by_id(read_questions(s.references, s.reference_field),
                                read_questions(s.hypotheses, s.hypothesis_field));
  const CorpusReport report = corpus_report(pairs, s.workers);
  const fs::path dir = s.report_dir;
  write_file(dir / "report.json", report_json(report));
  write_file(dir / "pairs.csv", report_csv(report));
  const std::string text = report_text(report);
  write_file(dir / "report.txt", text);
  std::cout << text;
  return kOk;
}

void add_common(CLI::App* cmd, Settings& s) {
  cmd->add_option("--config", s.config, "key = value settings file; flags override it");
  cmd->add_option("--seed", s.seed, "random seed")->capture_default_str();
}

void add_vocab(CLI::App* cmd, Settings& s) {
  cmd->add_option("--paths.vocab", s.vocab, "WordPiece vocabulary, one token per line")->capture_default_str();
  cmd->add_option("--vocab.reserved", s.reserved, "reserved token names: default ([BOS]/[EOS]) or bert ([CLS]/[SEP])")
      ->check(CLI::IsMember({"default", "bert"}))
      ->capture_default_str();
}

void add_tagging(CLI::App* cmd, Settings& s) {
  cmd->add_option("--paths.gazetteer", s.gazetteer, "entity gazetteer, surface<TAB>TAG per line")->capture_default_str();
  cmd->add_option("--paths.stoplist", s.stoplist, "stop words, one per line")->capture_default_str();
  cmd->add_option("--preprocess.remove_stopwords", s.remove_stopwords, "drop stop words from passage and answer")
      ->capture_default_str();
}

void add_workers(CLI::App* cmd, Settings& s) {
  cmd->add_option("--workers", s.workers, "parallel worker threads")->check(CLI::PositiveNumber)->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  Settings s;
  CLI::App app{"Question generation toolkit: preprocess SQuAD, train, generate, evaluate.", "qgen"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1, 1);

  auto* pre = app.add_subcommand("preprocess", "invert a SQuAD file into tagged, tokenized training examples");
  add_common(pre, s);
  add_workers(pre, s);
  pre->add_option("--paths.squad", s.squad, "SQuAD v1.1 JSON file");
  add_vocab(pre, s);
  add_tagging(pre, s);
  pre->add_option("--paths.output_dir", s.output_dir,
                  "writes examples.jsonl, inputs.jsonl, refs.jsonl and summary.json here")
      ->capture_default_str();
  pre->add_option("--preprocess.max_input", s.max_input, "input token limit")->capture_default_str();
  pre->add_option("--preprocess.max_target", s.max_target, "target token limit, [BOS] and [EOS] included")
      ->capture_default_str();

  auto* tr = app.add_subcommand("train", "train the encoder-decoder on an example cache");
  add_common(tr, s);
  tr->add_option("--paths.examples", s.examples, "example cache written by preprocess");
  add_vocab(tr, s);
  tr->add_option("--paths.checkpoint_dir", s.checkpoint, "checkpoint directory (replaced atomically)");
  tr->add_option("--paths.metrics", s.metrics, "metrics JSON lines (default: <checkpoint_dir>.metrics.jsonl)");
  tr->add_option("--model.d_model", s.model.d_model, "model width")->capture_default_str();
  tr->add_option("--model.num_heads", s.model.num_heads, "attention heads")->capture_default_str();
  tr->add_option("--model.encoder_layers", s.model.encoder_layers, "encoder layers")->capture_default_str();
  tr->add_option("--model.decoder_layers", s.model.decoder_layers, "decoder layers")->capture_default_str();
  tr->add_option("--model.ffn_dim", s.model.ffn_dim, "feed-forward inner width")->capture_default_str();
  tr->add_option("--model.max_positions", s.model.max_positions, "longest sequence")->capture_default_str();
  tr->add_option("--model.dropout", s.model.dropout, "dropout rate")->capture_default_str();
  tr->add_option("--train.learning_rate", s.train.learning_rate, "peak learning rate")->capture_default_str();
  tr->add_option("--train.warmup_steps", s.train.warmup_steps, "linear warmup steps")->capture_default_str();
  tr->add_option("--train.batch_size", s.train.batch_size, "examples per step")->capture_default_str();
  tr->add_option("--train.steps", s.train.total_steps, "total optimizer steps")->capture_default_str();
  tr->add_option("--train.checkpoint_every", s.train.checkpoint_every, "steps between checkpoints, 0 for final only")
      ->capture_default_str();
  tr->add_option("--train.clip_norm", s.train.clip_norm, "global gradient norm limit")->capture_default_str();
  tr->add_option("--train.label_smoothing", s.train.label_smoothing, "label smoothing")->capture_default_str();
  tr->add_option("--train.weight_decay", s.train.weight_decay, "decoupled weight decay")->capture_default_str();
  tr->add_option("--train.resume", s.resume, "continue from the checkpoint if it exists")->capture_default_str();
  tr->add_option("--train.log_every", s.log_every, "steps between progress lines, 0 to silence")
      ->capture_default_str();

  auto* gen = app.add_subcommand("generate", "generate questions for {id, passage, answer} JSON lines");
  add_common(gen, s);
  add_workers(gen, s);
  gen->add_option("--paths.checkpoint_dir", s.checkpoint, "trained checkpoint");
  add_vocab(gen, s);
  add_tagging(gen, s);
  gen->add_option("--paths.input", s.input, "requests, one {id, passage, answer} object per line");
  gen->add_option("--paths.output", s.output, "results, one {id, question_tagged, question_substituted, score} per line");
  gen->add_option("--generate.beam_width", s.generation.beam_width, "beam width")->capture_default_str();
  gen->add_option("--generate.max_length", s.generation.max_length, "longest question in tokens")->capture_default_str();
  gen->add_option("--generate.length_alpha", s.generation.length_alpha, "length normalization exponent")
      ->capture_default_str();

  auto* ev = app.add_subcommand("evaluate", "word error rate and corpus statistics for generated questions");
  add_common(ev, s);
  add_workers(ev, s);
  ev->add_option("--paths.references", s.references, "reference questions (JSON lines)");
  ev->add_option("--paths.hypotheses", s.hypotheses, "generated questions (JSON lines)");
  ev->add_option("--paths.report_dir", s.report_dir, "writes report.json, pairs.csv and report.txt here");
  ev->add_option("--evaluate.reference_field", s.reference_field, "question field in the references")
      ->capture_default_str();
  ev->add_option("--evaluate.hypothesis_field", s.hypothesis_field, "question field in the hypotheses")
      ->capture_default_str();

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    // Config entries become flags placed right after the subcommand, so
    // anything given on the command line comes later and wins.
    const auto sub_it = std::find_if(args.begin(), args.end(), [](const std::string& a) { return a[0] != '-'; });
    CLI::App* sub = nullptr;
    if (sub_it != args.end()) sub = app.get_subcommand_no_throw(*sub_it);
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
      if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
    }
    if (sub && !config_path.empty()) {
      std::vector<std::string> injected;
      for (const auto& [key, value] : read_config(config_path)) {
        if (key == "config") throw InputError(config_path + ": 'config' cannot be set from a config file");
        if (sub->get_option_no_throw("--" + key)) {
          injected.push_back("--" + key + "=" + value);
          continue;
        }
        bool known = false;
        for (const auto* other : app.get_subcommands({})) known = known || other->get_option_no_throw("--" + key);
        if (!known) throw InputError(config_path + ": unknown setting '" + key + "'");
      }
      args.insert(sub_it + 1, injected.begin(), injected.end());
    }
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  }

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInput;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  std::cerr << "qgen " << name << ": seed " << s.seed << "\n";
  try {
    if (name == "preprocess") return cmd_preprocess(s);
    if (name == "train") return cmd_train(s);
    if (name == "generate") return cmd_generate(s);
    return cmd_evaluate(s);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
