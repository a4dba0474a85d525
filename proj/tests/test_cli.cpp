// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"
#include "paracnn/cli.hpp"
#include "paracnn/metrics.hpp"

#include "doctest.h"

#include <fstream>
#include <sstream>

using namespace paracnn;
using namespace fixtures;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "paracnn");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t lines_in(const fs::path &p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);)
    n += !line.empty();
  return n;
}

std::map<std::string, std::string> tree(const fs::path &root) {
  std::map<std::string, std::string> out;
  for (const auto &e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file())
      out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

/// Small config over a synthetic corpus in `dir`.
fs::path write_config(const fs::path &dir, std::size_t epochs, const std::string &mode) {
  auto c = R"({
  "model": {"max_sentences": 6, "max_words": 10, "visual_dim": 64,
            "projection_dim": 16, "topic_dim": 16, "embed_dim": 16,
            "context_dim": 16, "conv_channels": 16, "topic_kernel": 3,
            "word_kernel": 3, "topic_depth": 2, "word_depth": 3,
            "attention_layers": [1, 2], "attention_heads": 2,
            "count_hidden1": 8, "count_hidden2": 8},
  "twin": {"mode": ")" + mode + R"(", "critic_hidden": 8},
  "train": {"epochs": )" + std::to_string(epochs) + R"(, "batch_size": 4,
            "min_word_freq": 1, "log_wallclock": false},
  "paths": {"train_manifest": ")" + (dir / "corpus" / "train.jsonl").string() + R"(",
            "val_manifest": ")" + (dir / "corpus" / "val.jsonl").string() + R"(",
            "checkpoint_dir": ")" + (dir / "ck").string() + R"("},
  "seed": 4
})";
  std::ofstream(dir / "config.json") << c;
  return dir / "config.json";
}

} // namespace

TEST_CASE("make-corpus") {
  auto dir = scratch_dir("cli-corpus");
  auto r = cli({"make-corpus", "--seed", "3", "--size", "10", "--out", (dir / "a").string()});
  REQUIRE(r.code == 0);
  CHECK(lines_in(dir / "a" / "train.jsonl") == 8);
  CHECK(lines_in(dir / "a" / "val.jsonl") == 1);
  CHECK(lines_in(dir / "a" / "test.jsonl") == 1);
  CHECK(lines_in(dir / "a" / "manifest.jsonl") == 10);
  CHECK(fs::exists(dir / "a" / "corpus.json"));

  REQUIRE(cli({"make-corpus", "--seed", "3", "--size", "10", "--out", (dir / "b").string()})
              .code == 0);
  CHECK(tree(dir / "a") == tree(dir / "b"));

  auto again = cli({"make-corpus", "--seed", "4", "--size", "10", "--out", (dir / "a").string()});
  CHECK(again.code != 0);
  CHECK(again.err.find("--force") != std::string::npos);
  CHECK(tree(dir / "a") == tree(dir / "b"));
  CHECK(cli({"make-corpus", "--seed", "4", "--size", "10", "--out", (dir / "a").string(),
             "--force"})
            .code == 0);
  CHECK(tree(dir / "a") != tree(dir / "b"));
  CHECK(cli({"make-corpus", "--size", "0", "--out", (dir / "c").string()}).code != 0);
}

TEST_CASE("train, generate and eval") {
  auto dir = scratch_dir("cli-run");
  REQUIRE(cli({"make-corpus", "--seed", "5", "--size", "20", "--out",
               (dir / "corpus").string()})
              .code == 0);
  auto cfg = write_config(dir, 2, "l2_plus_adversarial");
  auto t = cli({"train", "--config", cfg.string()});
  INFO(t.err);
  REQUIRE(t.code == 0);
  CHECK(fs::exists(dir / "ck" / "last.ckpt"));
  CHECK(fs::exists(dir / "ck" / "best.ckpt"));
  CHECK_FALSE(fs::exists(dir / "ck" / ".lock"));
  CHECK(lines_in(dir / "ck" / "metrics.jsonl") == 3);
  {
    std::ifstream log(dir / "ck" / "metrics.jsonl");
    std::string line;
    std::getline(log, line);
    auto first = nlohmann::json::parse(line);
    CHECK(first["epoch"] == 0);
    std::getline(log, line);
    auto second = nlohmann::json::parse(line);
    CHECK(second["critic_updates"] == 5 * second["generator_updates"].get<int>());
    CHECK(second["max_critic_weight"].get<double>() <= 0.01);
    CHECK(second["wallclock"].is_null());
  }
  const auto ckpt = (dir / "ck" / "last.ckpt").string();
  const auto test = (dir / "corpus" / "test.jsonl").string();

  SUBCASE("fixed sentence counts, including beyond M") {
    for (int k : {6, 7}) {
      auto out = dir / ("gen" + std::to_string(k) + ".txt");
      auto g = cli({"generate", "--checkpoint", ckpt, "--manifest",
                    (dir / "corpus" / "val.jsonl").string(), "--out", out.string(),
                    "--sentences", std::to_string(k)});
      INFO(g.err);
      REQUIRE(g.code == 0);
      // two validation scenes
      CHECK(lines_in(out) == static_cast<std::size_t>(2 * k));
      CHECK(parse_paragraphs(slurp(out)).size() == 2);
      for (const auto &p : parse_paragraphs(slurp(out)))
        CHECK(split_sentences(p).size() == static_cast<std::size_t>(k));
      CHECK(lines_in(out.string() + ".ids") == 2);
    }
  }
  SUBCASE("generation is deterministic") {
    auto a = cli({"generate", "--checkpoint", ckpt, "--manifest", test});
    auto b = cli({"generate", "--checkpoint", ckpt, "--manifest", test});
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    auto adaptive = cli({"generate", "--checkpoint", ckpt, "--manifest", test,
                         "--adaptive", "--min", "2", "--max", "3"});
    REQUIRE(adaptive.code == 0);
    const auto n = parse_paragraphs(adaptive.out).size();
    CHECK(n == 2);
    CHECK(cli({"generate", "--checkpoint", ckpt, "--manifest", test, "--sentences", "2",
               "--adaptive"})
              .code != 0);
  }
  SUBCASE("eval against the references themselves") {
    auto records = read_manifest(dir / "corpus" / "test.jsonl");
    std::ofstream hyp(dir / "hyp.txt"), ids(dir / "hyp.txt.ids");
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (i)
        hyp << "\n";
      for (const auto &s : split_sentences(records[i].paragraph))
        hyp << s << "\n";
      ids << records[i].id << "\n";
    }
    hyp.close();
    ids.close();
    auto e = cli({"eval", "--hypotheses", (dir / "hyp.txt").string(), "--manifest", test,
                  "--json", (dir / "scores.json").string()});
    REQUIRE(e.code == 0);
    auto scores = nlohmann::json::parse(slurp(dir / "scores.json"));
    CHECK(scores["BLEU-1"].get<double>() == doctest::Approx(100.0));
    CHECK(scores["ROUGE-L"].get<double>() == doctest::Approx(100.0));
    CHECK(e.out.find("BLEU-1       100.0") != std::string::npos);

    std::ofstream(dir / "empty.txt") << "";
    std::ofstream(dir / "empty.txt.ids") << "";
    CHECK(cli({"eval", "--hypotheses", (dir / "empty.txt").string(), "--manifest", test})
              .code != 0);
  }
  SUBCASE("resume continues from the last checkpoint") {
    auto longer = cli({"train", "--config", cfg.string(), "--resume", "--set",
                       "train.epochs=3"});
    REQUIRE(longer.code == 0);
    CHECK(longer.out.find("resumed from epoch 2") != std::string::npos);
    CHECK(lines_in(dir / "ck" / "metrics.jsonl") == 4);
  }
  SUBCASE("bad invocations") {
    CHECK(cli({}).code != 0);
    CHECK(cli({"train", "--config", (dir / "missing.json").string()}).code != 0);
    CHECK(cli({"train", "--config", cfg.string(), "--set", "model.bogus=1"}).code != 0);
    CHECK(cli({"generate", "--checkpoint", ckpt}).code != 0);
    CHECK(cli({"gradcheck", "--inject-fault", "bogus"}).code == 2);
  }
}
