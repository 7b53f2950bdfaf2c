#include "qg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "qg/error.hpp"

namespace qg {

using nlohmann::json;
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw InputError("train config: learning_rate must be finite and non-negative");
  }
  if (warmup_steps == 0) throw InputError("train config: warmup_steps must be positive");
  if (batch_size == 0) throw InputError("train config: batch_size must be positive");
  if (total_steps > 0 && warmup_steps > total_steps) {
    throw InputError("train config: warmup_steps " + std::to_string(warmup_steps) + " exceeds total_steps " +
                     std::to_string(total_steps));
  }
  if (!(clip_norm > 0.0)) throw InputError("train config: clip_norm must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw InputError("train config: label_smoothing must lie in [0, 1)");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw InputError("train config: Adam betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw InputError("train config: epsilon must be positive");
  if (!(weight_decay >= 0.0)) throw InputError("train config: weight_decay must be non-negative");
}

double learning_rate_at(const TrainConfig& config, std::size_t step) {
  if (step == 0) return 0.0;
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(config.warmup_steps);
  return config.learning_rate * std::min(s / w, std::sqrt(w / s));
}

TrainState TrainState::fresh(const Transformer& model, std::uint64_t seed) {
  TrainState s;
  s.seed = seed;
  for (const Parameter* p : model.parameters()) {
    s.first_moment.emplace_back(p->value.shape());
    s.second_moment.emplace_back(p->value.shape());
  }
  return s;
}

Var sequence_loss(Var logits, const std::vector<TokenId>& targets, TokenId pad_id, double smoothing) {
  return cross_entropy(logits, targets, pad_id, smoothing);
}

namespace {

enum Stream : std::uint32_t { kSampling = 1, kDropout = 2 };

std::mt19937_64 stream_rng(std::uint64_t seed, std::size_t step, Stream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

std::vector<TokenId> strip_padding(const std::vector<TokenId>& ids, TokenId pad) {
  std::size_t n = ids.size();
  while (n > 0 && ids[n - 1] == pad) --n;
  return {ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n)};
}

struct Prepared {
  std::vector<std::vector<TokenId>> inputs;
  std::vector<std::vector<TokenId>> decoder_inputs;
  std::vector<TokenId> targets;
};

Prepared prepare(const std::vector<const InvertedExample*>& examples, TokenId pad) {
  Prepared p;
  for (const InvertedExample* ex : examples) {
    auto in = strip_padding(ex->input, pad);
    auto tgt = strip_padding(ex->target, pad);
    if (in.empty()) throw InputError("example " + ex->id + ": empty input");
    if (tgt.size() < 2) throw InputError("example " + ex->id + ": target shorter than 2 tokens");
    p.inputs.push_back(std::move(in));
    p.decoder_inputs.emplace_back(tgt.begin(), tgt.end() - 1);
    p.targets.insert(p.targets.end(), tgt.begin() + 1, tgt.end());
  }
  return p;
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

void write_state(const fs::path& dir, const Transformer& model, const TrainState& state) {
  json j{{"format", "qg-train-state"},
         {"version", 1},
         {"step", state.step},
         {"seed", state.seed},
         {"best_loss", std::isfinite(state.best_loss) ? json(state.best_loss) : json(nullptr)}};
  std::ofstream out(dir / "state.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "state.json").string());
  out << j.dump(2) << '\n';
  if (!out.flush()) throw IoError("failed writing " + (dir / "state.json").string());

  const auto params = model.parameters();
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw InputError("save_checkpoint: optimizer state does not match the model");
  }
  std::vector<Parameter> moments;
  moments.reserve(2 * params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    moments.emplace_back("m/" + params[i]->name, state.first_moment[i]);
    moments.emplace_back("v/" + params[i]->name, state.second_moment[i]);
  }
  std::vector<const Parameter*> ptrs;
  for (const auto& m : moments) ptrs.push_back(&m);
  write_parameters(dir / "state.bin", ptrs);
}

}  // namespace

double clip_gradients(const std::vector<Parameter*>& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->grad.data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (Parameter* p : params) {
      for (double& g : p->grad.data()) g *= factor;
    }
  }
  return norm;
}

void adam_update(const std::vector<Parameter*>& params, TrainState& state, const TrainConfig& config,
                 std::size_t step) {
  if (state.first_moment.size() != params.size()) throw InputError("adam_update: optimizer state mismatch");
  const double lr = learning_rate_at(config, step);
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i]->value.data();
    auto g = params[i]->grad.data();
    auto m = state.first_moment[i].data();
    auto v = state.second_moment[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + config.epsilon);
      w[k] -= lr * (update + config.weight_decay * w[k]);
    }
  }
}

StepResult train_step(Transformer& model, const Batch& batch, TrainState& state, const TrainConfig& config) {
  if (batch.examples.empty()) throw InputError("train_step: empty batch");
  auto& params = model.parameters();
  if (state.first_moment.size() != params.size()) throw InputError("train_step: optimizer state mismatch");
  const TokenId pad = model.config().pad_id;
  Prepared p = prepare(batch.examples, pad);

  const std::size_t step = state.step + 1;
  StepResult r;
  r.lr = learning_rate_at(config, step);
  for (TokenId t : p.targets) r.tokens += t != pad;

  std::mt19937_64 dropout_rng = stream_rng(state.seed, step, kDropout);
  std::mt19937_64* rng = model.config().dropout > 0.0 ? &dropout_rng : nullptr;
  {
    const std::string where =
        " at step " + std::to_string(step) + " (bucket " + std::to_string(batch.bucket) + ", lr " + fmt(r.lr) + ")";
    Tape tape(true);
    Var loss;
    try {
      Encoded memory = model.encode(tape, p.inputs, rng);
      Var logits = model.decode(tape, memory, p.decoder_inputs, rng);
      loss = sequence_loss(logits, p.targets, pad, config.label_smoothing);
    } catch (const NumericError& e) {
      throw NumericError(e.what() + where);
    }
    r.loss = loss.value().item();
    if (!std::isfinite(r.loss)) throw NumericError("non-finite loss " + fmt(r.loss) + where);
    tape.backward(loss);
  }
  r.grad_norm = clip_gradients(params, config.clip_norm);
  if (!std::isfinite(r.grad_norm)) {
    throw NumericError("non-finite gradient norm at step " + std::to_string(step) + " (bucket " +
                       std::to_string(batch.bucket) + ", lr " + fmt(r.lr) + ")");
  }

  adam_update(params, state, config, step);
  state.step = step;
  state.best_loss = std::min(state.best_loss, r.loss);
  return r;
}

Batch sample_batch(const std::vector<Bucket>& buckets, std::size_t batch_size, std::uint64_t seed,
                   std::size_t step) {
  std::size_t total = 0;
  for (const auto& b : buckets) total += b.examples.size();
  if (total == 0) throw InputError("sample_batch: no examples");
  std::mt19937_64 rng = stream_rng(seed, step, kSampling);
  std::size_t pick = std::uniform_int_distribution<std::size_t>(0, total - 1)(rng);
  std::size_t k = 0;
  while (pick >= buckets[k].examples.size()) pick -= buckets[k++].examples.size();

  const auto& members = buckets[k].examples;
  std::vector<std::size_t> order(members.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t n = std::min(batch_size, members.size());
  for (std::size_t i = 0; i < n && n < members.size(); ++i) {
    std::swap(order[i], order[std::uniform_int_distribution<std::size_t>(i, order.size() - 1)(rng)]);
  }
  order.resize(n);
  std::sort(order.begin(), order.end());
  Batch batch;
  batch.bucket = k;
  for (std::size_t i : order) batch.examples.push_back(&members[i]);
  return batch;
}

void save_checkpoint(const fs::path& dir, const Transformer& model, const TokenMap& map, const TrainState& state) {
  const fs::path parent = dir.has_parent_path() ? dir.parent_path() : fs::path(".");
  const fs::path tmp = parent / ("." + dir.filename().string() + ".tmp");
  const fs::path old = parent / ("." + dir.filename().string() + ".old");
  try {
    fs::create_directories(parent);
    fs::remove_all(tmp);
    fs::create_directory(tmp);
    model.save(tmp, map);
    write_state(tmp, model, state);
    fs::remove_all(old);
    if (fs::exists(dir)) fs::rename(dir, old);
    fs::rename(tmp, dir);
    fs::remove_all(old);
  } catch (const fs::filesystem_error& e) {
    throw IoError("checkpoint " + dir.string() + ": " + e.what());
  }
}

Checkpoint load_checkpoint(const fs::path& dir) {
  TokenMap map;
  Transformer model = Transformer::load(dir, &map);
  TrainState state;
  const fs::path path = dir / "state.json";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    json j = json::parse(in);
    if (j.value("format", "") != "qg-train-state" || j.value("version", 0) != 1) {
      throw InputError(path.string() + ": not a version 1 train state");
    }
    state.step = j.at("step").get<std::size_t>();
    state.seed = j.at("seed").get<std::uint64_t>();
    if (!j.at("best_loss").is_null()) state.best_loss = j.at("best_loss").get<double>();
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  std::vector<Parameter> moments;
  const auto params = model.parameters();
  moments.reserve(2 * params.size());
  for (const Parameter* p : params) {
    moments.emplace_back("m/" + p->name, Tensor(p->value.shape()));
    moments.emplace_back("v/" + p->name, Tensor(p->value.shape()));
  }
  std::vector<Parameter*> ptrs;
  for (auto& m : moments) ptrs.push_back(&m);
  read_parameters(dir / "state.bin", ptrs);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.first_moment.push_back(std::move(moments[2 * i].value));
    state.second_moment.push_back(std::move(moments[2 * i + 1].value));
  }
  return {std::move(model), std::move(map), std::move(state)};
}

void train(Transformer& model, const TokenMap& map, const std::vector<Bucket>& buckets, TrainState& state,
           const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (options.checkpoint_dir.empty()) throw InputError("train: checkpoint directory required");
  std::size_t total = 0;
  for (const auto& b : buckets) total += b.examples.size();
  if (total == 0) throw InputError("train: empty dataset");

  std::ofstream metrics;
  if (!options.metrics_path.empty()) {
    if (options.metrics_path.has_parent_path()) fs::create_directories(options.metrics_path.parent_path());
    metrics.open(options.metrics_path, state.step == 0 ? std::ios::trunc : std::ios::app);
    if (!metrics) throw IoError("cannot write " + options.metrics_path.string());
  }

  while (state.step < config.total_steps) {
    const Batch batch = sample_batch(buckets, config.batch_size, state.seed, state.step + 1);
    const auto start = std::chrono::steady_clock::now();
    const StepResult r = train_step(model, batch, state, config);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    StepMetrics m{state.step, r.loss, r.lr, seconds > 0.0 ? static_cast<double>(r.tokens) / seconds : 0.0};
    if (metrics.is_open()) {
      metrics << json{{"step", m.step}, {"loss", m.loss}, {"lr", m.lr}, {"tokens_per_sec", m.tokens_per_sec}}.dump()
              << '\n';
      if (!metrics.flush()) throw IoError("failed writing " + options.metrics_path.string());
    }
    if (options.on_step) options.on_step(m);
    if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 &&
        state.step != config.total_steps) {
      save_checkpoint(options.checkpoint_dir, model, map, state);
    }
  }
  save_checkpoint(options.checkpoint_dir, model, map, state);
}

TokenMap build_token_map(const std::vector<InvertedExample>& examples, const Vocabulary& vocab) {
  std::set<TokenId> ids{vocab.pad_id(), vocab.unk_id(), vocab.bos_id(), vocab.eos_id(), vocab.separator_id()};
  for (const auto& ex : examples) {
    ids.insert(ex.input.begin(), ex.input.end());
    ids.insert(ex.target.begin(), ex.target.end());
  }
  return TokenMap({ids.begin(), ids.end()}, vocab.unk_id());
}

std::vector<InvertedExample> to_model_ids(const std::vector<InvertedExample>& examples, const TokenMap& map) {
  std::vector<InvertedExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back({ex.id, map.to_model(ex.input), map.to_model(ex.target)});
  return out;
}

double token_accuracy(Transformer& model, const std::vector<InvertedExample>& examples) {
  constexpr std::size_t kChunk = 16;
  const TokenId pad = model.config().pad_id;
  std::size_t correct = 0, counted = 0;
  for (std::size_t start = 0; start < examples.size(); start += kChunk) {
    std::vector<const InvertedExample*> chunk;
    for (std::size_t i = start; i < std::min(examples.size(), start + kChunk); ++i) chunk.push_back(&examples[i]);
    Prepared p = prepare(chunk, pad);
    Tape tape(false);
    Encoded memory = model.encode(tape, p.inputs);
    const Tensor& logits = model.decode(tape, memory, p.decoder_inputs).value();
    for (std::size_t r = 0; r < p.targets.size(); ++r) {
      if (p.targets[r] == pad) continue;
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.cols(); ++c) {
        if (logits.at(r, c) > logits.at(r, best)) best = c;
      }
      correct += static_cast<TokenId>(best) == p.targets[r];
      ++counted;
    }
  }
  return counted == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(counted);
}

}  // namespace qg
