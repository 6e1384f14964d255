#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

namespace refinecap::metrics {

using Tokens = std::vector<std::string>;

constexpr int kMaxN = 4;

// N-gram multisets for n = 1..4, keyed by tokens joined with '\x1f'.
struct NGramCounts {
  std::array<std::map<std::string, int>, kMaxN> counts;
  int length = 0;

  static NGramCounts from(const Tokens& tokens);
};

// log(#documents / document-frequency), document = one reference set.
// Unseen n-grams fall back to df=1 as in the reference CIDEr-D scorer.
class CorpusIdf {
 public:
  static CorpusIdf build(const std::vector<std::vector<Tokens>>& reference_sets);

  double value(int n, const std::string& key) const;
  double log_num_docs() const { return log_num_docs_; }
  std::size_t num_docs() const { return num_docs_; }
  int doc_frequency(int n, const std::string& key) const;

 private:
  std::array<std::map<std::string, int>, kMaxN> df_;
  double log_num_docs_ = 0.0;
  std::size_t num_docs_ = 0;
};

// CIDEr-D: per n, min-clipped TF-IDF cosine against each reference with a
// Gaussian length penalty, averaged over references and n, scaled by 10.
double cider_d(const Tokens& candidate, const std::vector<Tokens>& references,
               const CorpusIdf& idf, double sigma = 6.0);

// ROUGE-L F-measure from the longest common subsequence, recall-weighted
// (beta), max over references.
double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references,
               double beta = 1.2);

struct BleuScores {
  std::array<double, kMaxN> bleu{};  // BLEU-1..4
  int empty_candidates = 0;          // flagged, not an error
};

// Corpus-level BLEU: pooled clipped precisions, geometric mean over 1..n,
// brevity penalty with the closest-reference-length convention.
BleuScores corpus_bleu(const std::vector<Tokens>& candidates,
                       const std::vector<std::vector<Tokens>>& reference_sets);

// Same formula restricted to one sentence (no smoothing).
BleuScores sentence_bleu(const Tokens& candidate,
                         const std::vector<Tokens>& references);

struct CandidateScores {
  std::array<double, kMaxN> bleu{};
  double rouge_l = 0.0;
  double cider_d = 0.0;
  bool empty = false;
};

struct MetricReport {
  std::vector<CandidateScores> per_candidate;
  std::array<double, kMaxN> corpus_bleu{};
  double corpus_rouge_l = 0.0;  // mean over candidates
  double corpus_cider_d = 0.0;  // mean over candidates
  int empty_candidates = 0;
};

// Full report; idf is built from `reference_sets` (the evaluation corpus).
MetricReport evaluate(const std::vector<Tokens>& candidates,
                      const std::vector<std::vector<Tokens>>& reference_sets);

// Same but with a caller-supplied idf (e.g. the frozen training-split idf
// used as the RL reward corpus).
MetricReport evaluate_with_idf(
    const std::vector<Tokens>& candidates,
    const std::vector<std::vector<Tokens>>& reference_sets,
    const CorpusIdf& idf);

std::string report_to_json(const MetricReport& report);

}  // namespace refinecap::metrics
