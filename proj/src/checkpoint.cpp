// SPDX-License-Identifier: Apache-2.0
#include "paracnn/checkpoint.hpp"

#include <bit>
#include <fstream>

namespace paracnn {

namespace {

constexpr char kMagic[6] = {'P', 'C', 'K', 'P', 'T', '1'};

class Writer {
public:
  void u32(std::uint32_t v) { bytes(v, 4); }
  void u64(std::uint64_t v) { bytes(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { buf_.append(s); }
  void name(const std::string &s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  const std::string &buffer() const { return buf_; }

private:
  void bytes(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i)
      buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class Reader {
public:
  Reader(std::string data, std::string origin)
      : data_(std::move(data)), origin_(std::move(origin)) {}

  std::uint64_t u64() { return bytes(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(bytes(4)); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = data_.substr(at_, n);
    at_ += n;
    return s;
  }
  std::string name() { return raw(u32()); }
  bool done() const { return at_ == data_.size(); }

private:
  void need(std::size_t n) const {
    if (data_.size() - at_ < n)
      throw CheckpointError(origin_ + ": truncated at byte " +
                            std::to_string(at_));
  }
  std::uint64_t bytes(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[at_ + i]))
           << (8 * i);
    at_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string data_, origin_;
  std::size_t at_ = 0;
};

} // namespace

const StoredTensor *Checkpoint::find(std::string_view name) const {
  for (const auto &[n, t] : parameters)
    if (n == name)
      return &t;
  return nullptr;
}

void Checkpoint::erase_prefix(std::string_view prefix) {
  std::erase_if(parameters,
                [&](const auto &p) { return p.first.starts_with(prefix); });
  std::erase_if(optimizers,
                [&](const auto &p) { return p.first.starts_with(prefix); });
}

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt) {
  nlohmann::ordered_json meta;
  meta["config"] = to_json(ckpt.config);
  meta["vocab"] = ckpt.vocab;
  meta["min_word_freq"] = ckpt.min_word_freq;
  meta["seed"] = ckpt.seed;
  meta["epoch"] = ckpt.epoch;
  meta["best_val_ce"] =
      ckpt.best_val_ce ? nlohmann::ordered_json(*ckpt.best_val_ce) : nullptr;
  const std::string text = meta.dump();

  Writer w;
  w.raw(std::string_view(kMagic, sizeof kMagic));
  w.u64(text.size());
  w.raw(text);
  w.u64(ckpt.parameters.size());
  for (const auto &[name, t] : ckpt.parameters) {
    w.name(name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape)
      w.u64(e);
    for (double v : t.values)
      w.f64(v);
  }
  w.u64(ckpt.optimizers.size());
  for (const auto &[name, o] : ckpt.optimizers) {
    w.name(name);
    w.u64(o.steps);
    w.u64(o.averages.size());
    for (const auto &slot : o.averages) {
      w.u64(slot.size());
      for (double v : slot)
        w.f64(v);
    }
  }

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw CheckpointError("cannot write " + tmp.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out)
      throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw CheckpointError("cannot open checkpoint " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  Reader r(std::move(data), path.string());
  if (r.raw(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic))
    throw CheckpointError(path.string() + ": not a PCKPT1 checkpoint");
  Checkpoint ckpt;
  try {
    const auto meta = nlohmann::json::parse(r.raw(r.u64()));
    ckpt.config = run_config_from_json(meta.at("config"));
    ckpt.vocab = meta.at("vocab").get<std::vector<std::string>>();
    ckpt.min_word_freq = meta.at("min_word_freq").get<std::size_t>();
    ckpt.seed = meta.at("seed").get<std::uint64_t>();
    ckpt.epoch = meta.at("epoch").get<std::size_t>();
    if (!meta.at("best_val_ce").is_null())
      ckpt.best_val_ce = meta.at("best_val_ce").get<double>();
  } catch (const nlohmann::json::exception &e) {
    throw CheckpointError(path.string() + ": bad metadata: " + e.what());
  }
  const auto params = r.u64();
  for (std::uint64_t i = 0; i < params; ++i) {
    std::string name = r.name();
    StoredTensor t;
    const auto rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d)
      t.shape.push_back(r.u64());
    t.values.resize(numel_of(t.shape));
    for (auto &v : t.values)
      v = r.f64();
    ckpt.parameters.emplace_back(std::move(name), std::move(t));
  }
  const auto opts = r.u64();
  for (std::uint64_t i = 0; i < opts; ++i) {
    std::string name = r.name();
    StoredOptimizer o;
    o.steps = r.u64();
    o.averages.resize(r.u64());
    for (auto &slot : o.averages) {
      slot.resize(r.u64());
      for (auto &v : slot)
        v = r.f64();
    }
    ckpt.optimizers.emplace_back(std::move(name), std::move(o));
  }
  if (!r.done())
    throw CheckpointError(path.string() + ": trailing bytes after optimiser state");
  return ckpt;
}

Checkpoint snapshot(TwinTrainer &trainer, const RunConfig &config,
                    const Vocab &vocab, std::optional<double> best_val_ce) {
  Checkpoint c;
  c.config = config;
  c.config.model = trainer.model_config();
  c.vocab = vocab.tokens();
  c.min_word_freq = vocab.min_frequency();
  c.seed = trainer.seed();
  c.epoch = trainer.epoch();
  c.best_val_ce = best_val_ce;
  for (const auto &p : trainer.parameters())
    c.parameters.push_back(
        {p.name, StoredTensor{p.tensor.shape(), p.tensor.values()}});
  for (auto &[name, opt] : trainer.optimizers())
    c.optimizers.push_back({name, StoredOptimizer{opt->steps(), opt->averages()}});
  return c;
}

void load_parameters(const Checkpoint &ckpt, const std::string &prefix,
                     const ParameterList &params) {
  for (const auto &p : params) {
    const auto *stored = ckpt.find(prefix + p.name);
    if (!stored)
      throw CheckpointError("checkpoint lacks parameter " + prefix + p.name);
    if (stored->shape != p.tensor.shape())
      throw CheckpointError("parameter " + prefix + p.name + " has shape " +
                            to_string(stored->shape) + ", model expects " +
                            to_string(p.tensor.shape()));
    Tensor t = p.tensor;
    std::copy(stored->values.begin(), stored->values.end(), t.data().begin());
  }
}

void restore(TwinTrainer &trainer, const Checkpoint &ckpt) {
  const auto params = trainer.parameters();
  if (params.size() != ckpt.parameters.size())
    throw CheckpointError("checkpoint holds " +
                          std::to_string(ckpt.parameters.size()) +
                          " parameters, trainer has " +
                          std::to_string(params.size()));
  load_parameters(ckpt, "", params);
  for (auto &[name, opt] : trainer.optimizers()) {
    const StoredOptimizer *stored = nullptr;
    for (const auto &[n, o] : ckpt.optimizers)
      if (n == name)
        stored = &o;
    if (!stored || stored->averages.size() != opt->averages().size())
      throw CheckpointError("checkpoint optimiser state '" + name +
                            "' missing or mismatched");
    for (std::size_t i = 0; i < stored->averages.size(); ++i) {
      if (stored->averages[i].size() != opt->averages()[i].size())
        throw CheckpointError("optimiser slot size mismatch in '" + name + "'");
      opt->averages()[i] = stored->averages[i];
    }
    opt->set_steps(stored->steps);
  }
  trainer.set_epoch(ckpt.epoch);
}

ParaCnn load_generator(const Checkpoint &ckpt) {
  Rng rng(0);
  ParaCnn model(ckpt.config.model, rng);
  load_parameters(ckpt, "fwd.", model.parameters());
  return model;
}

std::optional<SentenceCountPredictor> load_count_predictor(const Checkpoint &ckpt) {
  const auto &m = ckpt.config.model;
  Rng rng(0);
  SentenceCountPredictor p(m.projection_dim, m.count_hidden1, m.count_hidden2,
                           m.max_sentences, rng);
  for (const auto &q : p.parameters())
    if (!ckpt.find("count." + q.name))
      return std::nullopt;
  load_parameters(ckpt, "count.", p.parameters());
  return p;
}

} // namespace paracnn
