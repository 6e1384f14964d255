#include "refinecap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "refinecap/errors.hpp"

namespace refinecap::metrics {

namespace {

std::string join_key(const Tokens& tokens, std::size_t start, int n) {
  std::string key;
  for (int i = 0; i < n; ++i) {
    if (i) key.push_back('\x1f');
    key += tokens[start + static_cast<std::size_t>(i)];
  }
  return key;
}

}  // namespace

NGramCounts NGramCounts::from(const Tokens& tokens) {
  NGramCounts out;
  out.length = static_cast<int>(tokens.size());
  for (int n = 1; n <= kMaxN; ++n) {
    auto& m = out.counts[static_cast<std::size_t>(n - 1)];
    const std::int64_t upper = static_cast<std::int64_t>(tokens.size()) - n + 1;
    for (std::int64_t s = 0; s < upper; ++s) {
      ++m[join_key(tokens, static_cast<std::size_t>(s), n)];
    }
  }
  return out;
}

CorpusIdf CorpusIdf::build(
    const std::vector<std::vector<Tokens>>& reference_sets) {
  CorpusIdf idf;
  idf.num_docs_ = reference_sets.size();
  if (idf.num_docs_ == 0) {
    throw ContractError("idf: empty reference corpus");
  }
  idf.log_num_docs_ = std::log(static_cast<double>(idf.num_docs_));
  for (const auto& refs : reference_sets) {
    // Document frequency counts each image once however many of its
    // references contain the n-gram.
    std::array<std::map<std::string, int>, kMaxN> seen;
    for (const Tokens& ref : refs) {
      const NGramCounts c = NGramCounts::from(ref);
      for (int n = 0; n < kMaxN; ++n) {
        for (const auto& [key, cnt] : c.counts[static_cast<std::size_t>(n)]) {
          seen[static_cast<std::size_t>(n)][key] = 1;
        }
      }
    }
    for (int n = 0; n < kMaxN; ++n) {
      for (const auto& [key, one] : seen[static_cast<std::size_t>(n)]) {
        idf.df_[static_cast<std::size_t>(n)][key] += one;
      }
    }
  }
  return idf;
}

int CorpusIdf::doc_frequency(int n, const std::string& key) const {
  const auto& m = df_[static_cast<std::size_t>(n - 1)];
  auto it = m.find(key);
  return it == m.end() ? 0 : it->second;
}

double CorpusIdf::value(int n, const std::string& key) const {
  const double df = std::max(1.0, static_cast<double>(doc_frequency(n, key)));
  return log_num_docs_ - std::log(df);
}

double cider_d(const Tokens& candidate, const std::vector<Tokens>& references,
               const CorpusIdf& idf, double sigma) {
  if (references.empty()) {
    throw ContractError("cider-d: candidate with no references");
  }
  const NGramCounts cand = NGramCounts::from(candidate);

  // TF-IDF weights and squared norms for the candidate, per n.
  std::array<std::map<std::string, double>, kMaxN> cand_vec;
  std::array<double, kMaxN> cand_norm_sq{};
  for (int n = 0; n < kMaxN; ++n) {
    for (const auto& [key, cnt] : cand.counts[static_cast<std::size_t>(n)]) {
      const double w = static_cast<double>(cnt) * idf.value(n + 1, key);
      cand_vec[static_cast<std::size_t>(n)][key] = w;
      cand_norm_sq[static_cast<std::size_t>(n)] += w * w;
    }
  }

  std::array<double, kMaxN> acc{};
  for (const Tokens& ref : references) {
    const NGramCounts rc = NGramCounts::from(ref);
    const double delta = static_cast<double>(cand.length - rc.length);
    const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
    for (int n = 0; n < kMaxN; ++n) {
      double ref_norm_sq = 0.0;
      for (const auto& [key, cnt] : rc.counts[static_cast<std::size_t>(n)]) {
        const double w = static_cast<double>(cnt) * idf.value(n + 1, key);
        ref_norm_sq += w * w;
      }
      double dot = 0.0;
      for (const auto& [key, wc] : cand_vec[static_cast<std::size_t>(n)]) {
        auto it = rc.counts[static_cast<std::size_t>(n)].find(key);
        if (it == rc.counts[static_cast<std::size_t>(n)].end()) continue;
        const double wr = static_cast<double>(it->second) * idf.value(n + 1, key);
        dot += std::min(wc, wr) * wr;
      }
      double sim = 0.0;
      const double denom_sq = cand_norm_sq[static_cast<std::size_t>(n)] * ref_norm_sq;
      if (denom_sq > 0.0) sim = dot / std::sqrt(denom_sq);
      acc[static_cast<std::size_t>(n)] += penalty * sim;
    }
  }

  double score = 0.0;
  for (int n = 0; n < kMaxN; ++n) {
    score += acc[static_cast<std::size_t>(n)] /
             static_cast<double>(references.size());
  }
  return 10.0 * score / static_cast<double>(kMaxN);
}

namespace {

int lcs_length(const Tokens& a, const Tokens& b) {
  const std::size_t n = a.size(), m = b.size();
  if (n == 0 || m == 0) return 0;
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      if (a[i - 1] == b[j - 1]) {
        cur[j] = prev[j - 1] + 1;
      } else {
        cur[j] = std::max(prev[j], cur[j - 1]);
      }
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

}  // namespace

double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references,
               double beta) {
  if (candidate.empty()) return 0.0;
  double best = 0.0;
  const double b2 = beta * beta;
  for (const Tokens& ref : references) {
    if (ref.empty()) continue;
    const int lcs = lcs_length(candidate, ref);
    if (lcs == 0) continue;
    const double recall = static_cast<double>(lcs) / static_cast<double>(ref.size());
    const double precision =
        static_cast<double>(lcs) / static_cast<double>(candidate.size());
    const double f =
        (1.0 + b2) * recall * precision / (recall + b2 * precision);
    best = std::max(best, f);
  }
  return best;
}

namespace {

struct BleuTally {
  std::array<std::int64_t, kMaxN> matched{};
  std::array<std::int64_t, kMaxN> total{};
  std::int64_t cand_len = 0;
  std::int64_t ref_len = 0;  // closest reference length, accumulated
  int empty_candidates = 0;

  void accumulate(const Tokens& cand, const std::vector<Tokens>& refs) {
    if (cand.empty()) {
      ++empty_candidates;
      // An empty candidate contributes nothing but still pulls the brevity
      // penalty down through its closest reference length.
    }
    cand_len += static_cast<std::int64_t>(cand.size());
    std::int64_t closest = 0;
    std::int64_t best_gap = std::numeric_limits<std::int64_t>::max();
    for (const Tokens& ref : refs) {
      const std::int64_t len = static_cast<std::int64_t>(ref.size());
      const std::int64_t gap =
          std::llabs(len - static_cast<std::int64_t>(cand.size()));
      if (gap < best_gap || (gap == best_gap && len < closest)) {
        best_gap = gap;
        closest = len;
      }
    }
    ref_len += closest;

    const NGramCounts cc = NGramCounts::from(cand);
    std::array<std::map<std::string, int>, kMaxN> max_ref;
    for (const Tokens& ref : refs) {
      const NGramCounts rc = NGramCounts::from(ref);
      for (int n = 0; n < kMaxN; ++n) {
        for (const auto& [key, cnt] : rc.counts[static_cast<std::size_t>(n)]) {
          auto& slot = max_ref[static_cast<std::size_t>(n)][key];
          slot = std::max(slot, cnt);
        }
      }
    }
    for (int n = 0; n < kMaxN; ++n) {
      for (const auto& [key, cnt] : cc.counts[static_cast<std::size_t>(n)]) {
        const auto& m = max_ref[static_cast<std::size_t>(n)];
        auto it = m.find(key);
        const int clip = it == m.end() ? 0 : it->second;
        matched[static_cast<std::size_t>(n)] += std::min(cnt, clip);
        total[static_cast<std::size_t>(n)] += cnt;
      }
    }
  }

  BleuScores finish() const {
    BleuScores out;
    out.empty_candidates = empty_candidates;
    double bp = 1.0;
    if (cand_len == 0) {
      out.bleu.fill(0.0);
      return out;
    }
    if (cand_len < ref_len) {
      bp = std::exp(1.0 - static_cast<double>(ref_len) /
                              static_cast<double>(cand_len));
    }
    double log_acc = 0.0;
    for (int n = 0; n < kMaxN; ++n) {
      const auto i = static_cast<std::size_t>(n);
      if (matched[i] == 0 || total[i] == 0) {
        // Zero precision at any order kills this and all higher orders.
        for (int k = n; k < kMaxN; ++k) out.bleu[static_cast<std::size_t>(k)] = 0.0;
        break;
      }
      log_acc += std::log(static_cast<double>(matched[i]) /
                          static_cast<double>(total[i]));
      out.bleu[i] = bp * std::exp(log_acc / static_cast<double>(n + 1));
    }
    return out;
  }
};

}  // namespace

BleuScores corpus_bleu(const std::vector<Tokens>& candidates,
                       const std::vector<std::vector<Tokens>>& reference_sets) {
  if (candidates.size() != reference_sets.size()) {
    throw ContractError("bleu: " + std::to_string(candidates.size()) +
                        " candidates vs " +
                        std::to_string(reference_sets.size()) +
                        " reference sets");
  }
  BleuTally tally;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (reference_sets[i].empty()) {
      throw ContractError("bleu: candidate " + std::to_string(i) +
                          " has no references");
    }
    tally.accumulate(candidates[i], reference_sets[i]);
  }
  return tally.finish();
}

BleuScores sentence_bleu(const Tokens& candidate,
                         const std::vector<Tokens>& references) {
  BleuTally tally;
  tally.accumulate(candidate, references);
  return tally.finish();
}

MetricReport evaluate_with_idf(
    const std::vector<Tokens>& candidates,
    const std::vector<std::vector<Tokens>>& reference_sets,
    const CorpusIdf& idf) {
  if (candidates.size() != reference_sets.size()) {
    throw ContractError("evaluate: candidate/reference count mismatch");
  }
  MetricReport report;
  report.per_candidate.reserve(candidates.size());
  double rouge_acc = 0.0, cider_acc = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    CandidateScores cs;
    cs.empty = candidates[i].empty();
    cs.bleu = sentence_bleu(candidates[i], reference_sets[i]).bleu;
    cs.rouge_l = rouge_l(candidates[i], reference_sets[i]);
    cs.cider_d = cider_d(candidates[i], reference_sets[i], idf);
    rouge_acc += cs.rouge_l;
    cider_acc += cs.cider_d;
    report.per_candidate.push_back(cs);
  }
  const BleuScores corpus = corpus_bleu(candidates, reference_sets);
  report.corpus_bleu = corpus.bleu;
  report.empty_candidates = corpus.empty_candidates;
  const double n = candidates.empty() ? 1.0 : static_cast<double>(candidates.size());
  report.corpus_rouge_l = rouge_acc / n;
  report.corpus_cider_d = cider_acc / n;
  return report;
}

MetricReport evaluate(const std::vector<Tokens>& candidates,
                      const std::vector<std::vector<Tokens>>& reference_sets) {
  return evaluate_with_idf(candidates, reference_sets,
                           CorpusIdf::build(reference_sets));
}

std::string report_to_json(const MetricReport& report) {
  nlohmann::json j;
  j["per_candidate"] = nlohmann::json::array();
  for (const CandidateScores& cs : report.per_candidate) {
    nlohmann::json row;
    row["bleu1"] = cs.bleu[0];
    row["bleu2"] = cs.bleu[1];
    row["bleu3"] = cs.bleu[2];
    row["bleu4"] = cs.bleu[3];
    row["rouge_l"] = cs.rouge_l;
    row["cider_d"] = cs.cider_d;
    row["empty"] = cs.empty;
    j["per_candidate"].push_back(row);
  }
  j["corpus"]["bleu1"] = report.corpus_bleu[0];
  j["corpus"]["bleu2"] = report.corpus_bleu[1];
  j["corpus"]["bleu3"] = report.corpus_bleu[2];
  j["corpus"]["bleu4"] = report.corpus_bleu[3];
  j["corpus"]["rouge_l"] = report.corpus_rouge_l;
  j["corpus"]["cider_d"] = report.corpus_cider_d;
  j["corpus"]["empty_candidates"] = report.empty_candidates;
  return j.dump(2);
}

}  // namespace refinecap::metrics
