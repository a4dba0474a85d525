// SPDX-License-Identifier: Apache-2.0
#include "paracnn/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

namespace paracnn {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string pooling_name(PoolingMode mode) {
  return mode == PoolingMode::mean ? "mean" : "self_attention";
}

PoolingMode parse_pooling(const std::string &text) {
  if (text == "mean")
    return PoolingMode::mean;
  if (text == "self_attention")
    return PoolingMode::self_attention;
  throw ConfigError("model.pooling must be 'mean' or 'self_attention', got '" +
                    text + "'");
}

/// Reads the keys of one section, rejecting any it does not know.
class Section {
public:
  Section(const json &root, std::string name) : name_(std::move(name)) {
    if (!root.contains(name_))
      return;
    node_ = &root.at(name_);
    if (!node_->is_object())
      throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <typename T> void read(const char *key, T &out) {
    seen_.insert(key);
    if (!node_ || !node_->contains(key))
      return;
    try {
      out = node_->at(key).get<T>();
    } catch (const json::exception &e) {
      throw ConfigError("config key " + name_ + "." + key + ": " + e.what());
    }
  }

  void finish() const {
    if (!node_)
      return;
    for (const auto &item : node_->items())
      if (!seen_.count(item.key()))
        throw ConfigError("unknown config key '" + name_ + "." + item.key() + "'");
  }

private:
  std::string name_;
  const json *node_ = nullptr;
  std::set<std::string> seen_;
};

} // namespace

void RunConfig::validate() const {
  model.validate();
  twin.validate();
  train.validate();
  decode.validate();
}

ordered_json to_json(const RunConfig &c) {
  ordered_json j;
  const auto &m = c.model;
  j["model"] = {{"max_sentences", m.max_sentences},
                {"max_words", m.max_words},
                {"vocab_size", m.vocab_size},
                {"visual_dim", m.visual_dim},
                {"projection_dim", m.projection_dim},
                {"topic_dim", m.topic_dim},
                {"embed_dim", m.embed_dim},
                {"context_dim", m.context_dim},
                {"conv_channels", m.conv_channels},
                {"topic_kernel", m.topic_kernel},
                {"word_kernel", m.word_kernel},
                {"topic_depth", m.topic_depth},
                {"word_depth", m.word_depth},
                {"pooling", pooling_name(m.pooling)},
                {"attention_layers", m.attention_layers},
                {"attention_heads", m.attention_heads},
                {"count_hidden1", m.count_hidden1},
                {"count_hidden2", m.count_hidden2}};
  const auto &t = c.twin;
  j["twin"] = {{"mode", to_string(t.mode)},
               {"lambda_l2", t.lambda_l2},
               {"lambda_adv", t.lambda_adv},
               {"critic_lr", t.critic_lr},
               {"critic_steps", t.critic_steps},
               {"clip", t.clip},
               {"critic_hidden", t.critic_hidden},
               {"reverse", to_string(t.reverse)}};
  const auto &d = c.decode;
  j["decode"] = {{"sentences", d.sentences},
                 {"adaptive", d.adaptive},
                 {"min_sentences", d.min_sentences},
                 {"max_sentences", d.max_sentences},
                 {"max_words", d.max_words},
                 {"rep_penalty", d.rep_penalty},
                 {"block_trigrams", d.block_trigrams},
                 {"penalty_scope", to_string(d.penalty_scope)}};
  const auto &tr = c.train;
  j["train"] = {{"epochs", tr.epochs},
                {"batch_size", tr.batch_size},
                {"lr", tr.lr},
                {"rms_alpha", tr.rms_alpha},
                {"rms_eps", tr.rms_eps},
                {"train_count_predictor", tr.train_count_predictor},
                {"min_word_freq", c.min_word_freq},
                {"log_wallclock", c.log_wallclock}};
  j["paths"] = {{"train_manifest", c.paths.train_manifest},
                {"val_manifest", c.paths.val_manifest},
                {"checkpoint_dir", c.paths.checkpoint_dir},
                {"log", c.paths.log}};
  j["seed"] = c.seed;
  return j;
}

RunConfig run_config_from_json(const json &root) {
  if (!root.is_object())
    throw ConfigError("config must be a JSON object");
  static const std::set<std::string> sections{"model", "twin",  "decode",
                                              "train", "paths", "seed"};
  for (const auto &item : root.items())
    if (!sections.count(item.key()))
      throw ConfigError("unknown config section '" + item.key() + "'");

  RunConfig c;
  {
    Section s(root, "model");
    auto &m = c.model;
    s.read("max_sentences", m.max_sentences);
    s.read("max_words", m.max_words);
    s.read("vocab_size", m.vocab_size);
    s.read("visual_dim", m.visual_dim);
    s.read("projection_dim", m.projection_dim);
    s.read("topic_dim", m.topic_dim);
    s.read("embed_dim", m.embed_dim);
    s.read("context_dim", m.context_dim);
    s.read("conv_channels", m.conv_channels);
    s.read("topic_kernel", m.topic_kernel);
    s.read("word_kernel", m.word_kernel);
    s.read("topic_depth", m.topic_depth);
    s.read("word_depth", m.word_depth);
    std::string pooling = pooling_name(m.pooling);
    s.read("pooling", pooling);
    m.pooling = parse_pooling(pooling);
    s.read("attention_layers", m.attention_layers);
    s.read("attention_heads", m.attention_heads);
    s.read("count_hidden1", m.count_hidden1);
    s.read("count_hidden2", m.count_hidden2);
    s.finish();
  }
  {
    Section s(root, "twin");
    auto &t = c.twin;
    std::string mode = to_string(t.mode), reverse = to_string(t.reverse);
    s.read("mode", mode);
    s.read("lambda_l2", t.lambda_l2);
    s.read("lambda_adv", t.lambda_adv);
    s.read("critic_lr", t.critic_lr);
    s.read("critic_steps", t.critic_steps);
    s.read("clip", t.clip);
    s.read("critic_hidden", t.critic_hidden);
    s.read("reverse", reverse);
    s.finish();
    try {
      t.mode = parse_twin_mode(mode);
      t.reverse = parse_reverse_scope(reverse);
    } catch (const std::invalid_argument &e) {
      throw ConfigError(e.what());
    }
  }
  {
    Section s(root, "decode");
    auto &d = c.decode;
    std::string scope = to_string(d.penalty_scope);
    s.read("sentences", d.sentences);
    s.read("adaptive", d.adaptive);
    s.read("min_sentences", d.min_sentences);
    s.read("max_sentences", d.max_sentences);
    s.read("max_words", d.max_words);
    s.read("rep_penalty", d.rep_penalty);
    s.read("block_trigrams", d.block_trigrams);
    s.read("penalty_scope", scope);
    s.finish();
    try {
      d.penalty_scope = parse_penalty_scope(scope);
    } catch (const std::invalid_argument &e) {
      throw ConfigError(e.what());
    }
  }
  {
    Section s(root, "train");
    auto &t = c.train;
    s.read("epochs", t.epochs);
    s.read("batch_size", t.batch_size);
    s.read("lr", t.lr);
    s.read("rms_alpha", t.rms_alpha);
    s.read("rms_eps", t.rms_eps);
    s.read("train_count_predictor", t.train_count_predictor);
    s.read("min_word_freq", c.min_word_freq);
    s.read("log_wallclock", c.log_wallclock);
    s.finish();
  }
  {
    Section s(root, "paths");
    s.read("train_manifest", c.paths.train_manifest);
    s.read("val_manifest", c.paths.val_manifest);
    s.read("checkpoint_dir", c.paths.checkpoint_dir);
    s.read("log", c.paths.log);
    s.finish();
  }
  if (root.contains("seed")) {
    try {
      c.seed = root.at("seed").get<std::uint64_t>();
    } catch (const json::exception &e) {
      throw ConfigError(std::string("config key seed: ") + e.what());
    }
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception &e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void apply_override(json &root, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override '" + std::string(assignment) +
                      "' is not of the form key=value");
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception &) {
    value = raw;
  }
  if (key == "seed") {
    root["seed"] = value;
    return;
  }
  const auto dot = key.find('.');
  if (dot == std::string::npos || key.find('.', dot + 1) != std::string::npos)
    throw ConfigError("override key '" + key + "' must be section.key or seed");
  root[key.substr(0, dot)][key.substr(dot + 1)] = value;
}

RunConfig resolve_run_config(const std::string &path,
                             const std::vector<std::string> &overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in)
      throw ConfigError("cannot open config file " + path);
    try {
      j = json::parse(in);
    } catch (const json::exception &e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
  for (const auto &o : overrides)
    apply_override(j, o);
  if (const char *env = std::getenv("PARACNN_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto seed = std::stoull(env, &used);
      if (used != std::string_view(env).size())
        throw std::invalid_argument("trailing characters");
      j["seed"] = seed;
    } catch (const std::exception &) {
      throw ConfigError("PARACNN_SEED='" + std::string(env) +
                        "' is not an unsigned integer");
    }
  }
  RunConfig c = run_config_from_json(j);
  c.validate();
  return c;
}

} // namespace paracnn
