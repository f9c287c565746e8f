#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace beard {

struct WERResult {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference_words = 0;

  std::size_t errors() const { return substitutions + deletions + insertions; }
  /// (S + D + I) / N; requires N > 0.
  double wer() const;
  WERResult& operator+=(const WERResult& o);
};

/// Scoring normalization applied identically to references and hypotheses.
struct NormalizationRules {
  int version = 1;
  bool lowercase = true;
  std::string punctuation = ".,!?;:\"()[]{}";
};

std::vector<std::string> normalize_words(const std::string& text, const NormalizationRules& rules = {});

/// Minimum edit distance alignment with unit costs. When several alignments are
/// optimal the backtrace prefers substitution/match, then insertion, then deletion.
/// Throws std::invalid_argument for an empty reference.
WERResult wer(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis);
WERResult wer_text(const std::string& reference, const std::string& hypothesis, const NormalizationRules& rules = {});

struct SegmentPair {
  std::string id;
  long errors_a = 0;
  long errors_b = 0;
};

struct MatchedPairResult {
  double z = 0.0;
  double p_value = 1.0;
  bool significant = false;
  std::size_t segments = 0;
  double mean_difference = 0.0;
};

/// Matched-pair sentence-segment word error test, one segment per utterance.
/// d_i = errors_a - errors_b, Z = mean(d) / (sd(d) / sqrt(n)) with the unbiased
/// sd, two-tailed normal p-value. All-zero differences give Z = 0, p = 1. A
/// constant non-zero difference (sd = 0) gives Z = +-inf, p = 0. Throws
/// std::invalid_argument when fewer than two segments are given.
MatchedPairResult matched_pair_test(const std::vector<SegmentPair>& pairs, double alpha = 0.001);

struct SNRBin {
  double low = 0.0;
  double high = 0.0;
  bool closed_high = false;  // the last default bin includes its upper edge
  WERResult result;
  std::size_t utterances = 0;

  bool contains(double snr_db) const { return snr_db >= low && (snr_db < high || (closed_high && snr_db == high)); }
  /// Pooled WER, or nullopt for a bin without reference words.
  std::optional<double> wer() const;
};

struct SNRBinReport {
  std::vector<SNRBin> bins;
  SNRBin other;  // utterances outside every bin; reported, not binned
};

/// [-10,0), [0,10), [10,20), [20,30), [30,40].
std::vector<SNRBin> default_snr_bins();

SNRBinReport snr_binned_wer(const std::vector<std::pair<double, WERResult>>& entries,
                            std::vector<SNRBin> bins = default_snr_bins());

struct FoldAggregate {
  WERResult pooled;
  std::vector<WERResult> folds;
};

/// Sums S, D, I and N over folds, then computes one WER.
FoldAggregate aggregate_folds(const std::vector<WERResult>& folds);

/// (id, text) pairs from a JSONL file with fields "id" and "text", in file order.
std::vector<std::pair<std::string, std::string>> load_texts(const std::filesystem::path& path);
void save_texts(const std::filesystem::path& path, const std::vector<std::pair<std::string, std::string>>& rows);

}  // namespace beard
