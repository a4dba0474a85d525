// SPDX-License-Identifier: Apache-2.0
#include "paracnn/cli.hpp"

#include "paracnn/checkpoint.hpp"
#include "paracnn/metrics.hpp"

#include "CLI11.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

namespace paracnn {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

void write_text(const fs::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out)
    throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Exclusive lock file held for the lifetime of a training run.
class DirectoryLock {
public:
  explicit DirectoryLock(fs::path path) : path_(std::move(path)) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw std::runtime_error(
          "checkpoint directory is locked by " + path_.string() +
          "; another run is active, or remove the file after a crash");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto written = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock &) = delete;
  DirectoryLock &operator=(const DirectoryLock &) = delete;

private:
  fs::path path_;
};

ordered_json optional_number(const std::optional<double> &v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

} // namespace

// --- make-corpus -------------------------------------------------------------

int cmd_make_corpus(const MakeCorpusOptions &options, std::ostream &out,
                    std::ostream &err) {
  const fs::path dir(options.out_dir);
  if (options.out_dir.empty()) {
    err << "make-corpus: --out is required\n";
    return 2;
  }
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!options.force) {
      err << "make-corpus: " << dir.string()
          << " is not empty; pass --force to overwrite\n";
      return 2;
    }
    fs::remove_all(dir);
  }
  fs::create_directories(dir / "features");
  const auto scenes =
      generate_synthetic_corpus(options.seed, options.size, options.synthetic);

  std::vector<ManifestRecord> records;
  for (const auto &s : scenes) {
    const std::string rel = "features/" + s.id + ".pfv";
    save_features(dir / rel, s.features);
    records.push_back({s.id, rel, s.paragraph});
  }
  write_manifest(dir / "manifest.jsonl", records);

  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(Rng::derive(options.seed, 77));
  rng.shuffle(order);
  const std::size_t n = records.size();
  const std::size_t n_train = n * 8 / 10, n_val = n / 10;
  auto split = [&](std::size_t from, std::size_t to) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(from),
                                 order.begin() + static_cast<std::ptrdiff_t>(to));
    std::sort(idx.begin(), idx.end());
    std::vector<ManifestRecord> part;
    for (auto i : idx)
      part.push_back(records[i]);
    return part;
  };
  write_manifest(dir / "train.jsonl", split(0, n_train));
  write_manifest(dir / "val.jsonl", split(n_train, n_train + n_val));
  write_manifest(dir / "test.jsonl", split(n_train + n_val, n));

  const SceneLexicon lexicon(options.synthetic);
  ordered_json echo;
  echo["seed"] = options.seed;
  echo["size"] = options.size;
  echo["grid"] = options.synthetic.grid;
  echo["vocab_size"] = options.synthetic.vocab_size;
  echo["min_objects"] = options.synthetic.min_objects;
  echo["max_objects"] = options.synthetic.max_objects;
  echo["noise"] = options.synthetic.noise;
  echo["feature_dim"] = lexicon.feature_dim();
  echo["split"] = {{"train", n_train}, {"val", n_val}, {"test", n - n_train - n_val}};
  write_text(dir / "corpus.json", echo.dump(2) + "\n");

  out << "wrote " << n << " scenes (" << n_train << " train, " << n_val
      << " val, " << n - n_train - n_val << " test), feature dim "
      << lexicon.feature_dim() << ", to " << dir.string() << "\n";
  return 0;
}

// --- train -------------------------------------------------------------------

namespace {

ordered_json epoch_record(const EpochStats &s, std::optional<double> val_ce,
                          bool wallclock) {
  ordered_json j;
  j["epoch"] = s.epoch;
  j["ce_fwd"] = s.ce_fwd;
  j["ce_bwd"] = optional_number(s.ce_bwd);
  j["twin_l2"] = optional_number(s.twin_l2);
  j["critic_loss"] = optional_number(s.critic_loss);
  j["count_loss"] = optional_number(s.count_loss);
  j["val_ce"] = optional_number(val_ce);
  j["critic_updates"] = s.critic_updates;
  j["generator_updates"] = s.generator_updates;
  j["max_critic_weight"] = s.critic_updates ? ordered_json(s.max_critic_weight)
                                            : ordered_json(nullptr);
  j["wallclock"] = wallclock ? ordered_json(s.wallclock) : ordered_json(nullptr);
  return j;
}

/// Keeps the log lines of epochs <= `epoch`.
void truncate_log(const fs::path &path, std::size_t epoch) {
  if (!fs::exists(path))
    return;
  std::istringstream in(read_text(path));
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty())
      continue;
    const auto j = nlohmann::json::parse(line);
    if (j.at("epoch").get<std::size_t>() <= epoch)
      kept += line + "\n";
  }
  write_text(path, kept);
}

void append_line(const fs::path &path, const std::string &line) {
  std::ofstream out(path, std::ios::app);
  if (!out)
    throw std::runtime_error("cannot append to " + path.string());
  out << line << '\n';
}

} // namespace

int cmd_train(const TrainOptions &options, std::ostream &out, std::ostream &err) {
  RunConfig config = resolve_run_config(options.config, options.overrides);
  if (config.paths.train_manifest.empty()) {
    err << "train: paths.train_manifest is not set\n";
    return 2;
  }
  const fs::path dir(config.paths.checkpoint_dir);
  fs::create_directories(dir);
  DirectoryLock lock(dir / ".lock");
  fs::path log_path(config.paths.log);
  if (log_path.is_relative())
    log_path = dir / log_path;

  std::vector<std::string> paragraphs;
  for (const auto &r : read_manifest(config.paths.train_manifest))
    paragraphs.push_back(r.paragraph);
  Vocab vocab = Vocab::build(paragraphs, config.min_word_freq);
  config.model.vocab_size = vocab.size();
  config.model.validate();

  const auto &m = config.model;
  auto train = load_examples(config.paths.train_manifest, vocab, m.max_sentences,
                             m.max_words, m.visual_dim);
  std::vector<Example> val;
  if (!config.paths.val_manifest.empty())
    val = load_examples(config.paths.val_manifest, vocab, m.max_sentences,
                        m.max_words, m.visual_dim);

  TwinTrainer trainer(config.model, config.twin, config.train, config.seed);
  std::optional<double> best;
  if (options.resume && fs::exists(dir / "last.ckpt")) {
    const auto ckpt = load_checkpoint(dir / "last.ckpt");
    if (to_json(ckpt.config) != to_json(config))
      out << "train: note, resumed checkpoint was written with a different "
             "config; continuing with the current one\n";
    if (ckpt.vocab != vocab.tokens()) {
      err << "train: checkpoint vocabulary differs from the training manifest\n";
      return 2;
    }
    restore(trainer, ckpt);
    best = ckpt.best_val_ce;
    truncate_log(log_path, trainer.epoch());
    out << "resumed from epoch " << trainer.epoch() << "\n";
  } else {
    write_text(log_path, "");
    EpochStats initial;
    initial.epoch = 0;
    initial.ce_fwd = trainer.evaluate_ce(train);
    std::optional<double> val_ce;
    if (!val.empty())
      val_ce = trainer.evaluate_ce(val);
    auto rec = epoch_record(initial, val_ce, false);
    append_line(log_path, rec.dump());
  }
  write_text(dir / "config.json", to_json(config).dump(2) + "\n");

  out << "training " << train.size() << " items, vocab " << vocab.size()
      << ", twin mode " << to_string(config.twin.mode) << "\n";
  while (trainer.epoch() < config.train.epochs) {
    EpochStats stats;
    try {
      stats = trainer.train_epoch(train);
    } catch (const TrainingDiverged &e) {
      err << "train: diverged in epoch " << trainer.epoch() + 1 << ": " << e.what()
          << "; last good checkpoint kept at " << (dir / "last.ckpt").string()
          << "\n";
      return 3;
    } catch (const NonFiniteGradient &e) {
      err << "train: diverged in epoch " << trainer.epoch() + 1 << ": " << e.what()
          << "; last good checkpoint kept at " << (dir / "last.ckpt").string()
          << "\n";
      return 3;
    }
    std::optional<double> val_ce;
    if (!val.empty())
      val_ce = trainer.evaluate_ce(val);
    const bool improved = val_ce && (!best || *val_ce < *best);
    if (improved)
      best = val_ce;
    append_line(log_path, epoch_record(stats, val_ce, config.log_wallclock).dump());
    const auto ckpt = snapshot(trainer, config, vocab, best);
    save_checkpoint(dir / "last.ckpt", ckpt);
    if (improved || val.empty())
      save_checkpoint(dir / "best.ckpt", ckpt);
    out << "epoch " << stats.epoch << " ce_fwd " << std::setprecision(6)
        << stats.ce_fwd;
    if (val_ce)
      out << " val_ce " << *val_ce << (improved ? " *" : "");
    out << "\n";
  }
  return 0;
}

// --- generate ----------------------------------------------------------------

int cmd_generate(const GenerateOptions &options, std::ostream &out,
                 std::ostream &err) {
  if (options.checkpoint.empty()) {
    err << "generate: --checkpoint is required\n";
    return 2;
  }
  const auto ckpt = load_checkpoint(options.checkpoint);
  RunConfig config = ckpt.config;
  if (!options.config.empty()) {
    const RunConfig user = load_run_config(options.config);
    auto a = to_json(user)["model"], b = to_json(ckpt.config)["model"];
    a.erase("vocab_size");
    b.erase("vocab_size");
    if (a != b) {
      err << "generate: model section of " << options.config
          << " does not match the checkpoint\n";
      return 2;
    }
    if (user.model.vocab_size != ckpt.vocab.size() &&
        user.model.vocab_size != ModelConfig{}.vocab_size) {
      err << "generate: config vocab_size " << user.model.vocab_size
          << " does not match the checkpoint vocabulary of " << ckpt.vocab.size()
          << "\n";
      return 2;
    }
    config.decode = user.decode;
  }
  if (ckpt.vocab.size() != config.model.vocab_size) {
    err << "generate: checkpoint vocabulary (" << ckpt.vocab.size()
        << ") disagrees with its model (" << config.model.vocab_size << ")\n";
    return 2;
  }
  auto &dc = config.decode;
  dc.max_words = config.model.max_words;
  if (options.sentences)
    dc.sentences = *options.sentences;
  if (options.adaptive)
    dc.adaptive = true;
  if (options.min_sentences)
    dc.min_sentences = *options.min_sentences;
  if (options.max_sentences)
    dc.max_sentences = *options.max_sentences;
  if (options.rep_penalty)
    dc.rep_penalty = *options.rep_penalty;
  if (options.block_trigrams)
    dc.block_trigrams = *options.block_trigrams;
  if (options.penalty_scope)
    dc.penalty_scope = parse_penalty_scope(*options.penalty_scope);
  dc.validate();

  const Vocab vocab = Vocab::from_tokens(ckpt.vocab, ckpt.min_word_freq);
  const ParaCnn model = load_generator(ckpt);
  std::optional<SentenceCountPredictor> predictor;
  if (dc.adaptive) {
    predictor = load_count_predictor(ckpt);
    if (!predictor) {
      err << "generate: --adaptive needs a checkpoint with a sentence-count "
             "predictor\n";
      return 2;
    }
  }

  std::vector<std::pair<std::string, fs::path>> items;
  if (!options.manifest.empty()) {
    const fs::path base = fs::path(options.manifest).parent_path();
    for (const auto &r : read_manifest(options.manifest)) {
      fs::path p(r.feature_path);
      items.emplace_back(r.id, p.is_relative() ? base / p : p);
    }
  }
  for (const auto &f : options.features)
    items.emplace_back(fs::path(f).stem().string(), fs::path(f));
  if (items.empty()) {
    err << "generate: nothing to describe; pass --manifest or feature files\n";
    return 2;
  }

  std::string text, ids;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Tensor features = load_features(items[i].second, config.model.visual_dim);
    const auto para = dc.adaptive
                          ? decode_adaptive(model, *predictor, features, dc)
                          : greedy_decode(model, features, dc.sentences, dc);
    if (i)
      text += '\n';
    text += format_paragraph(para, vocab);
    ids += items[i].first + '\n';
  }
  if (options.output.empty()) {
    out << text;
  } else {
    write_text(options.output, text);
    write_text(options.output + ".ids", ids);
    write_text(options.output + ".config.json", to_json(config).dump(2) + "\n");
    out << "wrote " << items.size() << " paragraphs to " << options.output << "\n";
  }
  return 0;
}

// --- eval --------------------------------------------------------------------

int cmd_eval(const EvalOptions &options, std::ostream &out, std::ostream &err) {
  const std::string ids_path =
      options.ids.empty() ? options.hypotheses + ".ids" : options.ids;
  const auto hyps = parse_paragraphs(read_text(options.hypotheses));
  if (hyps.empty()) {
    err << "eval: hypothesis file " << options.hypotheses << " is empty\n";
    return 2;
  }
  std::vector<std::string> ids;
  {
    std::istringstream in(read_text(ids_path));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty())
        ids.push_back(line);
  }
  if (ids.size() != hyps.size()) {
    err << "eval: " << hyps.size() << " hypotheses but " << ids.size()
        << " ids in " << ids_path << "\n";
    return 2;
  }
  std::map<std::string, std::string> refs;
  for (const auto &r : read_manifest(options.manifest))
    refs[r.id] = r.paragraph;
  std::vector<std::string> missing;
  for (const auto &id : ids)
    if (!refs.count(id))
      missing.push_back(id);
  if (!missing.empty()) {
    err << "eval: ids not in " << options.manifest << ":";
    for (const auto &id : missing)
      err << ' ' << id;
    err << "\n";
    return 2;
  }
  std::vector<EvalPair> pairs;
  for (std::size_t i = 0; i < hyps.size(); ++i)
    pairs.push_back({metric_tokens(hyps[i]), {metric_tokens(refs[ids[i]])}});
  const auto report = evaluate(pairs);
  for (const auto &w : report.warnings)
    err << "eval: warning: " << w << "\n";

  const std::vector<std::pair<std::string, double>> rows{
      {"BLEU-1", report.bleu[0]}, {"BLEU-2", report.bleu[1]},
      {"BLEU-3", report.bleu[2]}, {"BLEU-4", report.bleu[3]},
      {"ROUGE-L", report.rouge_l}, {"CIDEr", report.cider}};
  out << std::left << std::setw(10) << "metric" << std::right << std::setw(8)
      << "score" << "\n";
  ordered_json j;
  for (const auto &[name, v] : rows) {
    out << std::left << std::setw(10) << name << std::right << std::setw(8)
        << std::fixed << std::setprecision(1) << 100.0 * v << "\n";
    j[name] = 100.0 * v;
  }
  out.unsetf(std::ios::fixed);
  j["pairs"] = pairs.size();
  j["warnings"] = report.warnings;
  out << j.dump() << "\n";
  if (!options.json_out.empty())
    write_text(options.json_out, j.dump(2) + "\n");
  return 0;
}

// --- gradcheck ---------------------------------------------------------------

int cmd_gradcheck(const GradcheckOptions &options, std::ostream &out,
                  std::ostream &err) {
  debug::Fault fault = debug::Fault::none;
  if (options.fault == "sigmoid")
    fault = debug::Fault::sigmoid_backward;
  else if (options.fault == "matmul")
    fault = debug::Fault::matmul_backward;
  else if (options.fault != "none") {
    err << "gradcheck: unknown fault '" << options.fault
        << "' (none, sigmoid, matmul)\n";
    return 2;
  }
  debug::inject_fault(fault);
  std::vector<GradcheckEntry> entries;
  try {
    entries = run_gradcheck(options.seed);
  } catch (...) {
    debug::inject_fault(debug::Fault::none);
    throw;
  }
  debug::inject_fault(debug::Fault::none);

  bool ok = true;
  out << std::left << std::setw(40) << "component" << std::right << std::setw(14)
      << "max_rel_err" << std::setw(8) << "n" << "  status\n";
  for (const auto &e : entries) {
    const bool pass = e.max_rel_error < options.tolerance;
    ok = ok && pass;
    out << std::left << std::setw(40) << e.component << std::right
        << std::setw(14) << std::scientific << std::setprecision(3)
        << e.max_rel_error << std::setw(8) << e.checked << "  "
        << (pass ? "ok" : "FAIL") << "\n";
  }
  out.unsetf(std::ios::scientific);
  out << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance "
      << options.tolerance << ")\n";
  return ok ? 0 : 1;
}

// --- argument parsing --------------------------------------------------------

int run_cli(const std::vector<std::string> &args, std::ostream &out,
            std::ostream &err) {
  CLI::App app{"paracnn: convolutional paragraph generator"};
  app.require_subcommand(1);

  MakeCorpusOptions mc;
  auto *make = app.add_subcommand("make-corpus", "write a synthetic scene corpus");
  make->add_option("--seed", mc.seed, "corpus seed");
  make->add_option("--size", mc.size, "number of scenes")->check(CLI::PositiveNumber);
  make->add_option("--out", mc.out_dir, "output directory")->required();
  make->add_flag("--force", mc.force, "replace a non-empty output directory");
  make->add_option("--grid", mc.synthetic.grid, "grid side length");
  make->add_option("--vocab-size", mc.synthetic.vocab_size, "target vocabulary size");
  make->add_option("--min-objects", mc.synthetic.min_objects, "objects per scene, min");
  make->add_option("--max-objects", mc.synthetic.max_objects, "objects per scene, max");
  make->add_option("--noise", mc.synthetic.noise, "feature noise std-dev");

  TrainOptions tr;
  auto *train = app.add_subcommand("train", "train a model");
  train->add_option("--config", tr.config, "JSON run config");
  train->add_option("--set", tr.overrides, "override, e.g. twin.mode=l2");
  train->add_flag("--resume", tr.resume, "continue from last.ckpt");

  GenerateOptions gen;
  std::optional<std::size_t> sentences, min_s, max_s;
  std::optional<double> penalty;
  std::optional<std::string> scope;
  bool block = false, no_block = false;
  auto *generate = app.add_subcommand("generate", "describe images");
  generate->add_option("--checkpoint", gen.checkpoint, "checkpoint file")->required();
  generate->add_option("--manifest", gen.manifest, "manifest of images");
  generate->add_option("--out", gen.output, "output file (default stdout)");
  generate->add_option("--config", gen.config, "config whose decode section to use");
  generate->add_option("features", gen.features, "PFV1 feature files");
  auto *sent_opt = generate->add_option("--sentences", sentences, "fixed sentence count");
  auto *adapt = generate->add_flag("--adaptive", gen.adaptive,
                                   "predict the sentence count");
  sent_opt->excludes(adapt);
  generate->add_option("--min", min_s, "adaptive lower clamp");
  generate->add_option("--max", max_s, "adaptive upper clamp");
  generate->add_option("--rep-penalty", penalty, "repetition penalty gamma");
  auto *bt = generate->add_flag("--block-trigrams", block, "block repeated trigrams");
  auto *nbt = generate->add_flag("--no-block-trigrams", no_block,
                                 "allow repeated trigrams");
  bt->excludes(nbt);
  generate->add_option("--penalty-scope", scope, "paragraph or sentence");

  EvalOptions ev;
  auto *eval = app.add_subcommand("eval", "score hypotheses against references");
  eval->add_option("--hypotheses", ev.hypotheses, "generated paragraphs")->required();
  eval->add_option("--ids", ev.ids, "id per paragraph (default <hypotheses>.ids)");
  eval->add_option("--manifest", ev.manifest, "reference manifest")->required();
  eval->add_option("--json", ev.json_out, "also write JSON here");

  GradcheckOptions gc;
  auto *grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad->add_option("--seed", gc.seed, "seed for the random instances");
  grad->add_option("--inject-fault", gc.fault, "none, sigmoid or matmul");
  grad->add_option("--tolerance", gc.tolerance, "max relative error");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty())
    reversed.pop_back();
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError &e) {
    return app.exit(e, out, err);
  }

  try {
    if (*make)
      return cmd_make_corpus(mc, out, err);
    if (*train)
      return cmd_train(tr, out, err);
    if (*generate) {
      gen.sentences = sentences;
      gen.min_sentences = min_s;
      gen.max_sentences = max_s;
      gen.rep_penalty = penalty;
      gen.penalty_scope = scope;
      if (block)
        gen.block_trigrams = true;
      if (no_block)
        gen.block_trigrams = false;
      return cmd_generate(gen, out, err);
    }
    if (*eval)
      return cmd_eval(ev, out, err);
    if (*grad)
      return cmd_gradcheck(gc, out, err);
  } catch (const std::exception &e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

} // namespace paracnn
