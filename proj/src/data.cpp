#include "beard/data.hpp"

#include "beard/rng.hpp"
#include "beard/wav.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

namespace beard {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

ManifestEntry parse_entry(const std::string& line, std::size_t lineno) {
  const auto where = "manifest line " + std::to_string(lineno) + ": ";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(where + "invalid JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw DataError(where + "expected a JSON object");
  ManifestEntry e;
  auto require = [&](const char* key) -> const nlohmann::json& {
    if (!j.contains(key)) throw DataError(where + "missing field '" + key + "'");
    return j.at(key);
  };
  const auto& id = require("id");
  const auto& audio = require("audio_path");
  const auto& dur = require("duration_s");
  if (!id.is_string() || id.get<std::string>().empty()) throw DataError(where + "'id' must be a non-empty string");
  if (!audio.is_string()) throw DataError(where + "'audio_path' must be a string");
  if (!dur.is_number()) throw DataError(where + "'duration_s' must be a number");
  e.id = id.get<std::string>();
  e.audio_path = audio.get<std::string>();
  e.duration_s = dur.get<double>();
  if (!(e.duration_s > 0.0)) throw DataError(where + "'duration_s' must be positive");
  if (j.contains("transcript") && !j.at("transcript").is_null()) {
    if (!j.at("transcript").is_string()) throw DataError(where + "'transcript' must be a string");
    e.transcript = j.at("transcript").get<std::string>();
  }
  if (j.contains("snr_db") && !j.at("snr_db").is_null()) {
    if (!j.at("snr_db").is_number()) throw DataError(where + "'snr_db' must be a number");
    e.snr_db = j.at("snr_db").get<double>();
  }
  return e;
}

}  // namespace

std::vector<ManifestEntry> parse_manifest(const std::string& text) {
  std::vector<ManifestEntry> entries;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto e = parse_entry(line, lineno);
    if (!seen.insert(e.id).second)
      throw DataError("manifest line " + std::to_string(lineno) + ": duplicate id '" + e.id + "'");
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<ManifestEntry> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_manifest(ss.str());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string serialize_manifest(const std::vector<ManifestEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    ordered_json j;
    j["id"] = e.id;
    j["audio_path"] = e.audio_path;
    j["duration_s"] = e.duration_s;
    if (e.transcript) j["transcript"] = *e.transcript;
    if (e.snr_db) j["snr_db"] = *e.snr_db;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest: " + path.string());
  out << serialize_manifest(entries);
  if (!out) throw DataError("failed writing manifest: " + path.string());
}

void validate_split(const std::vector<ManifestEntry>& entries, bool labeled) {
  for (const auto& e : entries) {
    if (e.transcript.has_value() != labeled)
      throw DataError("entry '" + e.id + (labeled ? "' in a labeled split has no transcript"
                                                  : "' in an unlabeled split carries a transcript"));
  }
}

fs::path resolve_audio(const fs::path& manifest_path, const ManifestEntry& e) {
  fs::path p(e.audio_path);
  if (p.is_absolute()) return p;
  return manifest_path.parent_path() / p;
}

std::vector<std::string> FoldPlan::fold_members(int fold) const {
  std::vector<std::string> ids;
  for (const auto& [id, f] : assignments)
    if (f == fold) ids.push_back(id);
  return ids;
}

FoldPlan make_folds(const std::vector<ManifestEntry>& entries, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("make_folds: k must be >= 2");
  std::vector<std::string> ids;
  for (const auto& e : entries)
    if (e.transcript) ids.push_back(e.id);
  if (static_cast<std::size_t>(k) > ids.size())
    throw std::invalid_argument("make_folds: k=" + std::to_string(k) + " exceeds labeled count " +
                                std::to_string(ids.size()));
  Rng rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
  FoldPlan plan;
  plan.k = k;
  for (std::size_t i = 0; i < ids.size(); ++i) plan.assignments[ids[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  return plan;
}

FoldSplit split_for_fold(const std::vector<ManifestEntry>& entries, const FoldPlan& plan, int test_fold,
                         double val_fraction) {
  if (test_fold < 0 || test_fold >= plan.k) throw std::invalid_argument("split_for_fold: fold index out of range");
  FoldSplit split;
  std::vector<ManifestEntry> rest;
  for (const auto& e : entries) {
    auto it = plan.assignments.find(e.id);
    if (it == plan.assignments.end()) continue;
    (it->second == test_fold ? split.test : rest).push_back(e);
  }
  if (rest.size() < 2) throw DataError("split_for_fold: need at least two non-test entries");
  double total = 0.0;
  for (const auto& e : rest) total += e.duration_s;
  double taken = 0.0;
  std::size_t n_val = 0;
  while (n_val + 1 < rest.size() && (n_val == 0 || taken < val_fraction * total)) {
    taken += rest[n_val].duration_s;
    ++n_val;
  }
  split.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
  split.train.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
  return split;
}

double token_frequency(std::size_t i, std::size_t vocab_size, double freq_scale) {
  const double step = vocab_size > 1 ? std::min(0.5, std::log2(7000.0 / 300.0) / static_cast<double>(vocab_size - 1)) : 0.5;
  return freq_scale * 300.0 * std::exp2(static_cast<double>(i) * step);
}

Waveform SyntheticUtterance::mixture() const {
  Waveform w;
  w.samples.resize(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) w.samples[i] = clean[i] + noise[i];
  return w;
}

SyntheticUtterance synthesize_utterance(const SyntheticSpec& spec, std::uint64_t index) {
  if (spec.vocab.empty()) throw std::invalid_argument("synthetic corpus: vocab must be non-empty");
  if (spec.min_tokens < 1 || spec.max_tokens < spec.min_tokens)
    throw std::invalid_argument("synthetic corpus: invalid token count range");
  Rng rng(derive_seed(spec.seed, index));
  SyntheticUtterance u;
  const auto n_tokens = static_cast<int>(spec.min_tokens + rng.below(static_cast<std::uint64_t>(spec.max_tokens - spec.min_tokens + 1)));
  const double ms = kSampleRate / 1000.0;
  auto silence = [&](double dur_ms) { u.clean.insert(u.clean.end(), static_cast<std::size_t>(dur_ms * ms), 0.0); };

  silence(spec.gap_ms);
  for (int t = 0; t < n_tokens; ++t) {
    const auto tok = rng.below(spec.vocab.size());
    u.tokens.push_back(spec.vocab[tok]);
    const double freq = token_frequency(tok, spec.vocab.size(), spec.freq_scale);
    const double dur = spec.token_ms * (0.75 + 0.5 * rng.uniform());
    const double phase = 2.0 * std::numbers::pi * rng.uniform();
    const auto n = static_cast<std::size_t>(dur * ms);
    const auto fade = std::min<std::size_t>(static_cast<std::size_t>(10.0 * ms), n / 2);
    for (std::size_t i = 0; i < n; ++i) {
      double env = 1.0;
      if (i < fade) env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / static_cast<double>(fade));
      if (n - 1 - i < fade) env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(n - 1 - i) / static_cast<double>(fade));
      u.clean.push_back(spec.amplitude * env * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / kSampleRate + phase));
    }
    silence(spec.gap_ms * (0.5 + rng.uniform()));
  }

  u.snr_db = spec.snr_low_db + (spec.snr_high_db - spec.snr_low_db) * rng.uniform();
  u.noise.resize(u.clean.size());
  double p_clean = 0.0, p_noise = 0.0;
  for (std::size_t i = 0; i < u.clean.size(); ++i) {
    u.noise[i] = rng.normal();
    p_clean += u.clean[i] * u.clean[i];
    p_noise += u.noise[i] * u.noise[i];
  }
  const double scale = std::sqrt(p_clean / (p_noise * std::pow(10.0, u.snr_db / 10.0)));
  for (double& x : u.noise) x *= scale;
  return u;
}

CorpusPaths generate_synthetic_corpus(const SyntheticSpec& spec, const fs::path& out_dir) {
  if (spec.vocab.empty()) throw std::invalid_argument("synthetic corpus: vocab must be non-empty");
  if (spec.utterance_count < 1) throw std::invalid_argument("synthetic corpus: utterance_count must be >= 1");
  std::error_code ec;
  fs::create_directories(out_dir / "wav", ec);
  if (ec) throw DataError("cannot create corpus directory " + out_dir.string() + ": " + ec.message());

  std::vector<ManifestEntry> labeled, unlabeled;
  const int total = spec.utterance_count + spec.unlabeled_count;
  for (int i = 0; i < total; ++i) {
    const bool is_labeled = i < spec.utterance_count;
    const auto u = synthesize_utterance(spec, static_cast<std::uint64_t>(i));
    char name[32];
    std::snprintf(name, sizeof(name), "%s%06d", is_labeled ? "lab" : "unl", i);
    ManifestEntry e;
    e.id = name;
    e.audio_path = "wav/" + e.id + ".wav";
    e.duration_s = static_cast<double>(u.clean.size()) / kSampleRate;
    e.snr_db = u.snr_db;
    if (is_labeled) {
      std::string text;
      for (const auto& t : u.tokens) text += (text.empty() ? "" : " ") + t;
      e.transcript = text;
    }
    write_wav(out_dir / e.audio_path, u.mixture());
    (is_labeled ? labeled : unlabeled).push_back(std::move(e));
  }
  CorpusPaths paths{out_dir / "unlabeled.jsonl", out_dir / "labeled.jsonl"};
  save_manifest(paths.unlabeled, unlabeled);
  save_manifest(paths.labeled, labeled);
  return paths;
}

Tokenizer::Tokenizer(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<int>(i) + 3).second)
      throw std::invalid_argument("Tokenizer: duplicate word '" + words_[i] + "'");
  }
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream in(text);
  std::string w;
  while (in >> w) {
    auto it = index_.find(w);
    if (it == index_.end()) throw DataError("Tokenizer: unknown word '" + w + "'");
    ids.push_back(it->second);
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 3 || id >= size()) continue;
    if (!out.empty()) out += ' ';
    out += words_[static_cast<std::size_t>(id - 3)];
  }
  return out;
}

bool Tokenizer::covers(const std::string& text) const {
  std::istringstream in(text);
  std::string w;
  while (in >> w)
    if (!index_.contains(w)) return false;
  return true;
}

std::vector<FeatureMatrix> load_features(const fs::path& manifest_path, const std::vector<ManifestEntry>& entries,
                                         const FeatureConfig& cfg, int threads) {
  std::vector<FeatureMatrix> out(entries.size());
  std::vector<std::string> errors(entries.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < entries.size(); i = next++) {
      try {
        out[i] = compute_logmel(read_wav(resolve_audio(manifest_path, entries[i])), cfg);
      } catch (const std::exception& e) {
        errors[i] = entries[i].id + ": " + e.what();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(entries.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (!e.empty()) throw DataError(e);
  return out;
}

}  // namespace beard
