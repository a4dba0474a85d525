// SPDX-License-Identifier: Apache-2.0
#include "paracnn/metrics.hpp"

#include "paracnn/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

namespace paracnn {

namespace {

using NgramCounts = std::map<Tokens, std::size_t>;

NgramCounts count_ngrams(const Tokens &tokens, std::size_t n) {
  NgramCounts out;
  if (tokens.size() < n)
    return out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++out[Tokens(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                 tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

void check_pairs(const std::vector<EvalPair> &pairs) {
  if (pairs.empty())
    throw std::invalid_argument("metrics need at least one pair");
  for (const auto &p : pairs)
    if (p.references.empty())
      throw std::invalid_argument("every hypothesis needs a reference");
}

} // namespace

Tokens metric_tokens(std::string_view paragraph) {
  Tokens out;
  for (auto &sentence : tokenize_paragraph(paragraph))
    for (auto &w : sentence)
      out.push_back(std::move(w));
  return out;
}

double bleu(const std::vector<EvalPair> &pairs, int n, Warnings *warnings) {
  if (n < 1 || n > 4)
    throw std::invalid_argument("BLEU order must lie in 1..4");
  check_pairs(pairs);
  std::vector<double> matched(static_cast<std::size_t>(n), 0.0);
  std::vector<double> total(static_cast<std::size_t>(n), 0.0);
  double hyp_len = 0.0, ref_len = 0.0;
  std::size_t empty = 0;
  for (const auto &p : pairs) {
    const auto c = p.hypothesis.size();
    if (c == 0)
      ++empty;
    hyp_len += static_cast<double>(c);
    // closest reference length, shorter on ties
    std::size_t best = p.references.front().size();
    for (const auto &r : p.references) {
      const auto d = r.size() > c ? r.size() - c : c - r.size();
      const auto db = best > c ? best - c : c - best;
      if (d < db || (d == db && r.size() < best))
        best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (int k = 1; k <= n; ++k) {
      const auto hyp = count_ngrams(p.hypothesis, static_cast<std::size_t>(k));
      NgramCounts max_ref;
      for (const auto &r : p.references)
        for (const auto &[g, cnt] : count_ngrams(r, static_cast<std::size_t>(k)))
          max_ref[g] = std::max(max_ref[g], cnt);
      for (const auto &[g, cnt] : hyp) {
        total[static_cast<std::size_t>(k - 1)] += static_cast<double>(cnt);
        auto it = max_ref.find(g);
        if (it != max_ref.end())
          matched[static_cast<std::size_t>(k - 1)] +=
              static_cast<double>(std::min(cnt, it->second));
      }
    }
  }
  if (warnings && empty)
    warnings->push_back("BLEU: " + std::to_string(empty) +
                        " empty hypothesis(es)");
  if (hyp_len == 0.0)
    return 0.0;
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    if (matched[static_cast<std::size_t>(k)] == 0.0)
      return 0.0;
    log_sum += std::log(matched[static_cast<std::size_t>(k)] /
                        total[static_cast<std::size_t>(k)]);
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return bp * std::exp(log_sum / n);
}

std::size_t lcs_length(const Tokens &a, const Tokens &b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                    : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const std::vector<EvalPair> &pairs, double beta) {
  check_pairs(pairs);
  const double b2 = beta * beta;
  double acc = 0.0;
  for (const auto &p : pairs) {
    double prec = 0.0, rec = 0.0;
    for (const auto &r : p.references) {
      const double l = static_cast<double>(lcs_length(p.hypothesis, r));
      if (!p.hypothesis.empty())
        prec = std::max(prec, l / static_cast<double>(p.hypothesis.size()));
      if (!r.empty())
        rec = std::max(rec, l / static_cast<double>(r.size()));
    }
    if (prec > 0.0 && rec > 0.0)
      acc += (1.0 + b2) * prec * rec / (rec + b2 * prec);
  }
  return acc / static_cast<double>(pairs.size());
}

namespace {

struct TfIdf {
  std::array<std::map<Tokens, double>, 4> vec;
  std::array<double, 4> norm{};
  double length = 0.0;
};

TfIdf tfidf(const Tokens &tokens, const std::map<Tokens, double> &df,
            double log_docs) {
  TfIdf out;
  out.length = static_cast<double>(tokens.size());
  for (std::size_t n = 1; n <= 4; ++n) {
    for (const auto &[g, tf] : count_ngrams(tokens, n)) {
      auto it = df.find(g);
      const double d = std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
      const double v = static_cast<double>(tf) * (log_docs - d);
      out.vec[n - 1][g] = v;
      out.norm[n - 1] += v * v;
    }
    out.norm[n - 1] = std::sqrt(out.norm[n - 1]);
  }
  return out;
}

} // namespace

double cider_d(const std::vector<EvalPair> &pairs, Warnings *warnings,
               double sigma) {
  check_pairs(pairs);
  if (pairs.size() == 1 && warnings)
    warnings->push_back("CIDEr: single-document corpus, every idf weight is 0");
  std::map<Tokens, double> df;
  for (const auto &p : pairs) {
    std::set<Tokens> seen;
    for (const auto &r : p.references)
      for (std::size_t n = 1; n <= 4; ++n)
        for (const auto &entry : count_ngrams(r, n))
          seen.insert(entry.first);
    for (const auto &g : seen)
      df[g] += 1.0;
  }
  const double log_docs = std::log(static_cast<double>(pairs.size()));
  double acc = 0.0;
  for (const auto &p : pairs) {
    const TfIdf hyp = tfidf(p.hypothesis, df, log_docs);
    std::array<double, 4> score{};
    for (const auto &r : p.references) {
      const TfIdf ref = tfidf(r, df, log_docs);
      const double delta = hyp.length - ref.length;
      for (std::size_t n = 0; n < 4; ++n) {
        double val = 0.0;
        for (const auto &[g, v] : hyp.vec[n]) {
          auto it = ref.vec[n].find(g);
          if (it != ref.vec[n].end())
            val += std::min(v, it->second) * it->second;
        }
        if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0)
          val /= hyp.norm[n] * ref.norm[n];
        val *= std::exp(-(delta * delta) / (2.0 * sigma * sigma));
        score[n] += val;
      }
    }
    double mean = 0.0;
    for (double s : score)
      mean += s;
    mean /= 4.0;
    acc += mean / static_cast<double>(p.references.size()) * 10.0;
  }
  return acc / static_cast<double>(pairs.size());
}

MetricReport evaluate(const std::vector<EvalPair> &pairs) {
  MetricReport out;
  for (int n = 1; n <= 4; ++n)
    out.bleu[static_cast<std::size_t>(n - 1)] =
        bleu(pairs, n, n == 1 ? &out.warnings : nullptr);
  out.rouge_l = rouge_l(pairs);
  out.cider = cider_d(pairs, &out.warnings);
  return out;
}

} // namespace paracnn
