#include "beard/eval.hpp"

#include "beard/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace beard {

double WERResult::wer() const {
  if (reference_words == 0) throw std::invalid_argument("WERResult: no reference words");
  return static_cast<double>(errors()) / static_cast<double>(reference_words);
}

WERResult& WERResult::operator+=(const WERResult& o) {
  substitutions += o.substitutions;
  deletions += o.deletions;
  insertions += o.insertions;
  reference_words += o.reference_words;
  return *this;
}

std::vector<std::string> normalize_words(const std::string& text, const NormalizationRules& rules) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char c : text) {
    if (rules.punctuation.find(c) != std::string::npos) {
      cleaned += ' ';
      continue;
    }
    cleaned += rules.lowercase ? static_cast<char>(std::tolower(static_cast<unsigned char>(c))) : c;
  }
  std::vector<std::string> words;
  std::istringstream in(cleaned);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

WERResult wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  if (ref.empty()) throw std::invalid_argument("wer: empty reference");
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::vector<std::size_t>> d(n + 1, std::vector<std::size_t>(m + 1));
  for (std::size_t i = 0; i <= n; ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= m; ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      d[i][j] = std::min({d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0u : 1u), d[i][j - 1] + 1, d[i - 1][j] + 1});

  WERResult r;
  r.reference_words = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      if (d[i][j] == d[i - 1][j - 1] + (same ? 0u : 1u)) {
        if (!same) ++r.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (j > 0 && d[i][j] == d[i][j - 1] + 1) {
      ++r.insertions;
      --j;
    } else {
      ++r.deletions;
      --i;
    }
  }
  return r;
}

WERResult wer_text(const std::string& reference, const std::string& hypothesis, const NormalizationRules& rules) {
  return wer(normalize_words(reference, rules), normalize_words(hypothesis, rules));
}

MatchedPairResult matched_pair_test(const std::vector<SegmentPair>& pairs, double alpha) {
  if (pairs.size() < 2) throw std::invalid_argument("matched_pair_test: need at least two segments");
  const auto n = static_cast<double>(pairs.size());
  MatchedPairResult r;
  r.segments = pairs.size();
  double sum = 0.0;
  bool all_zero = true;
  for (const auto& p : pairs) {
    const double d = static_cast<double>(p.errors_a - p.errors_b);
    sum += d;
    all_zero = all_zero && d == 0.0;
  }
  if (all_zero) return r;
  const double mean = sum / n;
  double ss = 0.0;
  for (const auto& p : pairs) {
    const double d = static_cast<double>(p.errors_a - p.errors_b) - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / (n - 1.0));
  r.mean_difference = mean;
  if (sd == 0.0) {
    r.z = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p_value = 0.0;
  } else {
    r.z = mean / (sd / std::sqrt(n));
    r.p_value = std::erfc(std::abs(r.z) / std::sqrt(2.0));
  }
  r.significant = r.p_value < alpha;
  return r;
}

std::optional<double> SNRBin::wer() const {
  if (result.reference_words == 0) return std::nullopt;
  return result.wer();
}

std::vector<SNRBin> default_snr_bins() {
  std::vector<SNRBin> bins;
  for (int lo = -10; lo < 40; lo += 10) bins.push_back({static_cast<double>(lo), static_cast<double>(lo + 10), lo == 30, {}, 0});
  return bins;
}

SNRBinReport snr_binned_wer(const std::vector<std::pair<double, WERResult>>& entries, std::vector<SNRBin> bins) {
  for (std::size_t i = 0; i < bins.size(); ++i) {
    if (!(bins[i].low < bins[i].high)) throw std::invalid_argument("snr_binned_wer: empty bin range");
    if (i > 0 && bins[i].low < bins[i - 1].high) throw std::invalid_argument("snr_binned_wer: bins overlap or are unordered");
  }
  SNRBinReport report;
  report.other.low = -std::numeric_limits<double>::infinity();
  report.other.high = std::numeric_limits<double>::infinity();
  for (auto& b : bins) {
    b.result = {};
    b.utterances = 0;
  }
  report.bins = std::move(bins);
  for (const auto& [snr, w] : entries) {
    auto it = std::find_if(report.bins.begin(), report.bins.end(), [snr](const SNRBin& b) { return b.contains(snr); });
    SNRBin& target = it == report.bins.end() ? report.other : *it;
    target.result += w;
    ++target.utterances;
  }
  return report;
}

FoldAggregate aggregate_folds(const std::vector<WERResult>& folds) {
  if (folds.empty()) throw std::invalid_argument("aggregate_folds: need at least one fold");
  FoldAggregate a;
  a.folds = folds;
  for (const auto& f : folds) a.pooled += f;
  return a;
}

std::vector<std::pair<std::string, std::string>> load_texts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open text file: " + path.string());
  std::vector<std::pair<std::string, std::string>> rows;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path.string() + " line " + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + "invalid JSON");
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("text") || !j["id"].is_string() || !j["text"].is_string())
      throw DataError(where + "expected {\"id\": string, \"text\": string}");
    auto id = j["id"].get<std::string>();
    if (!seen.insert(id).second) throw DataError(where + "duplicate id '" + id + "'");
    rows.emplace_back(std::move(id), j["text"].get<std::string>());
  }
  return rows;
}

void save_texts(const std::filesystem::path& path, const std::vector<std::pair<std::string, std::string>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& [id, text] : rows) {
    nlohmann::ordered_json j;
    j["id"] = id;
    j["text"] = text;
    out << j.dump() << '\n';
  }
}

}  // namespace beard
