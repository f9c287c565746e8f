#pragma once

#include "beard/features.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace beard {

struct ManifestEntry {
  std::string id;
  std::string audio_path;  // relative paths resolve against the manifest's directory
  double duration_s = 0.0;
  std::optional<std::string> transcript;
  std::optional<double> snr_db;

  bool operator==(const ManifestEntry&) const = default;
};

/// One JSON object per line. Blank lines are skipped. Throws DataError naming
/// the 1-based line number on malformed or invalid lines and on duplicate ids.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);
std::vector<ManifestEntry> parse_manifest(const std::string& text);
std::string serialize_manifest(const std::vector<ManifestEntry>& entries);
void save_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

/// Checks the labeled/unlabeled contract: transcripts present iff `labeled`.
void validate_split(const std::vector<ManifestEntry>& entries, bool labeled);

std::filesystem::path resolve_audio(const std::filesystem::path& manifest_path, const ManifestEntry& e);

struct FoldPlan {
  int k = 0;
  std::map<std::string, int> assignments;

  std::vector<std::string> fold_members(int fold) const;
};

/// Shuffles the labeled entries with the seed and deals them round-robin into k folds.
FoldPlan make_folds(const std::vector<ManifestEntry>& entries, int k, std::uint64_t seed);

struct FoldSplit {
  std::vector<ManifestEntry> train;
  std::vector<ManifestEntry> val;
  std::vector<ManifestEntry> test;
};

/// Fold `test_fold` is the test set. From the remaining entries (in manifest
/// order), the leading ones are moved to validation until their duration reaches
/// `val_fraction` of the remaining duration; at least one entry stays in each role.
FoldSplit split_for_fold(const std::vector<ManifestEntry>& entries, const FoldPlan& plan, int test_fold,
                         double val_fraction = 0.2);

struct SyntheticSpec {
  std::vector<std::string> vocab;
  int utterance_count = 1;  // labeled utterances
  int unlabeled_count = 0;
  double snr_low_db = 40.0;
  double snr_high_db = 40.0;
  std::uint64_t seed = 0;
  int min_tokens = 1;
  int max_tokens = 1;
  double token_ms = 200.0;
  double gap_ms = 50.0;
  double amplitude = 0.1;
  /// Multiplies every token frequency; values != 1 simulate a channel shift.
  double freq_scale = 1.0;
};

/// Frequency assigned to vocabulary index `i` (strictly increasing in i).
double token_frequency(std::size_t i, std::size_t vocab_size, double freq_scale = 1.0);

struct SyntheticUtterance {
  std::vector<double> clean;
  std::vector<double> noise;
  std::vector<std::string> tokens;
  double snr_db = 0.0;

  Waveform mixture() const;
};

/// Deterministic function of (spec, index); index streams are independent.
SyntheticUtterance synthesize_utterance(const SyntheticSpec& spec, std::uint64_t index);

struct CorpusPaths {
  std::filesystem::path unlabeled;
  std::filesystem::path labeled;
};

/// Writes out_dir/{wav/*.wav, unlabeled.jsonl, labeled.jsonl}.
CorpusPaths generate_synthetic_corpus(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

/// Token vocabulary with reserved ids PAD=0, BOS=1, EOS=2.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;

  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> words);

  int size() const { return static_cast<int>(words_.size()) + 3; }
  const std::vector<std::string>& words() const { return words_; }
  /// Whitespace-split words to ids without BOS/EOS. Throws DataError on unknown words.
  std::vector<int> encode(const std::string& text) const;
  /// Drops special ids.
  std::string decode(const std::vector<int>& ids) const;
  bool covers(const std::string& text) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

/// Log-mel features for every entry, in manifest order. Extraction may use
/// `threads` workers; the result does not depend on the thread count.
std::vector<FeatureMatrix> load_features(const std::filesystem::path& manifest_path,
                                         const std::vector<ManifestEntry>& entries, const FeatureConfig& cfg,
                                         int threads = 1);

}  // namespace beard
