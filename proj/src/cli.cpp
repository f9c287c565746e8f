#include "beard/cli.hpp"

#include "beard/rng.hpp"
#include "beard/wav.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

namespace beard {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

LogLevel log_level() {
  const char* v = std::getenv("BEARD_LOG");
  if (!v) return LogLevel::kInfo;
  const std::string s(v);
  if (s == "error") return LogLevel::kError;
  if (s == "debug") return LogLevel::kDebug;
  return LogLevel::kInfo;
}

class Logger {
 public:
  explicit Logger(std::ostream& err) : err_(err), level_(log_level()) {}
  void info(const std::string& msg) const {
    if (level_ >= LogLevel::kInfo) err_ << "[info] " << msg << '\n';
  }
  void debug(const std::string& msg) const {
    if (level_ >= LogLevel::kDebug) err_ << "[debug] " << msg << '\n';
  }
  void error(const std::string& msg) const { err_ << "[error] " << msg << '\n'; }

 private:
  std::ostream& err_;
  LogLevel level_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
}

/// Flags shared by the training subcommands.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> tap;
  std::optional<double> lambda;
  std::optional<double> beta;
  std::optional<int> mask_span;
  std::optional<double> mask_prob;
  std::optional<int> codebook_size;
  std::optional<int> threads;
  std::string out = "runs";

  void attach(CLI::App* app) {
    app->add_option("--config", config, "Experiment config (JSON)");
    app->add_option("--seed", seed, "Seed for re-training and fine-tuning");
    app->add_option("--tap", tap, "Encoder layer feeding the projection head (1-based)");
    app->add_option("--lambda", lambda, "Distillation weight");
    app->add_option("--beta", beta, "Down-weight of the output-layer distillation term");
    app->add_option("--mask-span", mask_span, "Mask span in input frames");
    app->add_option("--mask-prob", mask_prob, "Per-frame span start probability");
    app->add_option("--codebook-size", codebook_size, "Quantizer codebook size");
    app->add_option("--threads", threads, "Feature-extraction threads");
    app->add_option("--out", out, "Output root directory");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c;
    if (!config.empty()) {
      if (!fs::exists(config)) throw DataError("config file not found: " + config);
      c = experiment_from_json(read_json(config));
    }
    apply(c);
    return c;
  }

  void apply(ExperimentConfig& c) const {
    if (seed) c.retrain.seed = c.finetune.seed = *seed;
    if (tap) c.retrain.tap.ell = *tap;
    if (lambda) c.retrain.weights.lambda = *lambda;
    if (beta) c.retrain.weights.beta = *beta;
    if (mask_span) c.retrain.mask_span = *mask_span;
    if (mask_prob) c.retrain.mask_prob = *mask_prob;
    if (codebook_size) c.model.codebook_size = *codebook_size;
    if (threads) c.threads = *threads;
  }
};

std::vector<std::string> vocabulary_of(const std::vector<ManifestEntry>& entries) {
  std::set<std::string> words;
  for (const auto& e : entries) {
    if (!e.transcript) continue;
    std::istringstream in(*e.transcript);
    std::string w;
    while (in >> w) words.insert(w);
  }
  return {words.begin(), words.end()};
}

/// Starts from a checkpoint when given (its architecture wins over the config),
/// otherwise from fresh parameters with a vocabulary read from `labeled`.
ModelBundle initial_bundle(const std::string& init, const ExperimentConfig& cfg, const std::vector<ManifestEntry>* labeled) {
  if (!init.empty()) {
    ModelBundle b = load_bundle(init);
    ExperimentConfig merged = cfg;
    merged.model.features = b.config.model.features;
    merged.model.encoder = b.config.model.encoder;
    merged.model.decoder = b.config.model.decoder;
    merged.model.init_seed = b.config.model.init_seed;
    b.config = merged;
    return b;
  }
  if (!labeled) throw DataError("a vocabulary source is required: pass --init or --labeled");
  ModelBundle b;
  b.config = cfg;
  b.tokenizer = Tokenizer(vocabulary_of(*labeled));
  if (b.tokenizer.words().empty()) throw DataError("labeled manifest has no transcript words");
  b.config.model.encoder.n_mels = b.config.model.features.mel_bins;
  b.config.model.decoder.vocab_size = b.tokenizer.size();
  b.params = init_model(b.config.model);
  return b;
}

void ensure_projection_head(ModelBundle& b) {
  const auto& m = b.config.model;
  if (b.params.contains("head.w") && b.params.at("head.w").value.cols() == m.codebook_size) return;
  ParameterSet fresh;
  for (const auto& p : b.params)
    if (!p->name.starts_with("head.")) fresh.add(p->name, p->value);
  init_projection_head(fresh, m.encoder, m.codebook_size, derive_seed(m.init_seed, 2));
  b.params = std::move(fresh);
}

void write_config_snapshot(const fs::path& dir, const ExperimentConfig& cfg, const std::string& command,
                           const std::vector<std::string>& args) {
  ordered_json j;
  j["command"] = command;
  j["args"] = args;
  j["config"] = to_json(cfg);
  j["config_hash"] = hex64(config_hash(cfg));
  write_text(dir / "config.json", j.dump(2) + "\n");
}

ordered_json wer_json(const WERResult& w) {
  ordered_json j;
  j["substitutions"] = w.substitutions;
  j["deletions"] = w.deletions;
  j["insertions"] = w.insertions;
  j["reference_words"] = w.reference_words;
  if (w.reference_words > 0)
    j["wer"] = w.wer();
  else
    j["wer"] = nullptr;
  return j;
}

ordered_json bin_json(const SNRBin& b) {
  ordered_json j;
  j["low"] = b.low;
  j["high"] = b.high;
  j["utterances"] = b.utterances;
  j["reference_words"] = b.result.reference_words;
  j["errors"] = b.result.errors();
  if (auto w = b.wer())
    j["wer"] = *w;
  else
    j["wer"] = nullptr;
  return j;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

std::string snr_csv(const SNRBinReport& r) {
  std::string out = "bin,low,high,utterances,reference_words,errors,wer\n";
  auto row = [&](const std::string& name, const SNRBin& b) {
    out += name + "," + fmt(b.low) + "," + fmt(b.high) + "," + std::to_string(b.utterances) + "," +
           std::to_string(b.result.reference_words) + "," + std::to_string(b.result.errors()) + ",";
    if (auto w = b.wer()) out += fmt(*w);
    out += "\n";
  };
  for (const auto& b : r.bins) {
    std::ostringstream name;
    name << "[" << b.low << "," << b.high << (b.closed_high ? "]" : ")");
    row(name.str(), b);
  }
  row("other", r.other);
  return out;
}

/// Scores (id, hypothesis) against references and writes eval.json + snr_bins.csv.
ordered_json write_eval(const fs::path& dir, const std::vector<std::pair<std::string, std::string>>& refs,
                        const std::vector<std::pair<std::string, std::string>>& hyps,
                        const std::map<std::string, double>& snr, ordered_json header,
                        const std::vector<std::pair<std::string, std::string>>* hyps_b = nullptr) {
  std::map<std::string, std::string> hyp_by_id(hyps.begin(), hyps.end());
  std::map<std::string, std::string> hyp_b_by_id;
  if (hyps_b) hyp_b_by_id.insert(hyps_b->begin(), hyps_b->end());
  WERResult total;
  std::vector<std::pair<double, WERResult>> binned;
  std::vector<SegmentPair> pairs;
  ordered_json per_utt = ordered_json::array();
  for (const auto& [id, ref] : refs) {
    auto it = hyp_by_id.find(id);
    if (it == hyp_by_id.end()) throw DataError("no hypothesis for reference id '" + id + "'");
    const auto w = wer_text(ref, it->second);
    total += w;
    if (auto s = snr.find(id); s != snr.end()) binned.emplace_back(s->second, w);
    if (hyps_b) {
      auto jt = hyp_b_by_id.find(id);
      if (jt == hyp_b_by_id.end()) throw DataError("no system-B hypothesis for id '" + id + "'");
      pairs.push_back({id, static_cast<long>(w.errors()), static_cast<long>(wer_text(ref, jt->second).errors())});
    }
    per_utt.push_back({{"id", id}, {"errors", w.errors()}, {"reference_words", w.reference_words}});
  }
  if (total.reference_words == 0) throw DataError("no reference words to score");
  const auto bins = snr_binned_wer(binned);
  header["wer"] = total.wer();
  header["counts"] = wer_json(total);
  header["normalization_version"] = NormalizationRules{}.version;
  ordered_json jb = ordered_json::array();
  for (const auto& b : bins.bins) jb.push_back(bin_json(b));
  header["snr_bins"] = jb;
  header["snr_other"] = bin_json(bins.other);
  if (hyps_b) {
    const auto mp = matched_pair_test(pairs);
    header["matched_pair"] = {{"z", std::isfinite(mp.z) ? ordered_json(mp.z) : ordered_json(mp.z > 0 ? "inf" : "-inf")},
                              {"p_value", mp.p_value},
                              {"significant", mp.significant},
                              {"alpha", 0.001},
                              {"segments", mp.segments}};
  }
  header["utterances"] = per_utt;
  write_text(dir / "eval.json", header.dump(2) + "\n");
  write_text(dir / "snr_bins.csv", snr_csv(bins));
  return header;
}

std::map<std::string, double> snr_map(const std::vector<ManifestEntry>& entries) {
  std::map<std::string, double> m;
  for (const auto& e : entries)
    if (e.snr_db) m[e.id] = *e.snr_db;
  return m;
}

struct FoldData {
  std::vector<LabeledUtterance> train, val, test;
  std::vector<ManifestEntry> test_entries;
};

FoldData load_fold(const fs::path& manifest, const ExperimentConfig& cfg, const Tokenizer& tok, int fold, const Logger& log) {
  const auto entries = load_manifest(manifest);
  validate_split(entries, true);
  if (entries.empty()) throw DataError("labeled manifest is empty: " + manifest.string());
  const auto plan = make_folds(entries, cfg.folds, cfg.finetune.seed);
  const auto split = split_for_fold(entries, plan, fold, cfg.val_fraction);
  log.info("fold " + std::to_string(fold) + ": train=" + std::to_string(split.train.size()) + " val=" +
           std::to_string(split.val.size()) + " test=" + std::to_string(split.test.size()));
  FoldData d;
  d.train = make_labeled(split.train, load_features(manifest, split.train, cfg.model.features, cfg.threads), tok);
  d.val = make_labeled(split.val, load_features(manifest, split.val, cfg.model.features, cfg.threads), tok);
  d.test = make_labeled(split.test, load_features(manifest, split.test, cfg.model.features, cfg.threads), tok);
  d.test_entries = split.test;
  return d;
}

ordered_json method_header(const ModelBundle& b) {
  ordered_json h;
  const bool beard = std::find(b.lineage.begin(), b.lineage.end(), "retrain") != b.lineage.end();
  h["method"] = beard ? "BEARD + FT" : "FT";
  if (beard) {
    h["tap"] = b.config.retrain.tap.ell;
    h["lambda"] = b.config.retrain.weights.lambda;
    h["flags"] = b.config.retrain.flags.label();
  } else {
    h["tap"] = nullptr;
    h["lambda"] = nullptr;
    h["flags"] = nullptr;
  }
  h["lineage"] = b.lineage;
  return h;
}

/// Fine-tunes `b` on one fold, writes artifacts to `dir`, returns the test WER counts.
WERResult finetune_fold(ModelBundle& b, const FoldData& d, const fs::path& dir, const Logger& log) {
  Finetuner ft(b.params, b.config.model, b.tokenizer, b.config.finetune);
  auto rec = ft.run(d.train, d.val);
  rec.config_hash = hex64(config_hash(b.config));
  b.lineage.push_back("finetune");
  save_bundle(dir / "best.ckpt", b);
  rec.checkpoints.push_back((dir / "best.ckpt").string());
  write_text(dir / "loss.csv", rec.loss_csv());
  write_text(dir / "record.json", rec.to_json().dump(2) + "\n");
  const auto hyps = transcribe(b.params, b.config.model, b.tokenizer, d.test, b.config.finetune.max_decode_len);
  std::vector<std::pair<std::string, std::string>> refs_rows, hyp_rows;
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    refs_rows.emplace_back(d.test[i].id, d.test[i].transcript);
    hyp_rows.emplace_back(d.test[i].id, hyps[i]);
  }
  save_texts(dir / "refs.jsonl", refs_rows);
  save_texts(dir / "hyps.jsonl", hyp_rows);
  const auto report = write_eval(dir, refs_rows, hyp_rows, snr_map(d.test_entries), method_header(b));
  log.info("test WER " + fmt(report["wer"].get<double>()) + " (" + dir.string() + ")");
  return pooled(score(d.test, hyps));
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_gen_corpus(const fs::path& out, SyntheticSpec spec, const std::string& vocab, const Logger& log) {
  spec.vocab.clear();
  std::istringstream in(vocab);
  std::string w;
  while (std::getline(in, w, ','))
    if (!w.empty()) spec.vocab.push_back(w);
  const auto paths = generate_synthetic_corpus(spec, out);
  ordered_json j;
  j["vocab"] = spec.vocab;
  j["labeled"] = spec.utterance_count;
  j["unlabeled"] = spec.unlabeled_count;
  j["snr_db"] = {spec.snr_low_db, spec.snr_high_db};
  j["tokens"] = {spec.min_tokens, spec.max_tokens};
  j["token_ms"] = spec.token_ms;
  j["gap_ms"] = spec.gap_ms;
  j["amplitude"] = spec.amplitude;
  j["freq_scale"] = spec.freq_scale;
  j["seed"] = spec.seed;
  write_text(out / "corpus_spec.json", j.dump(2) + "\n");
  log.info("wrote " + paths.labeled.string() + " and " + paths.unlabeled.string());
  return kExitOk;
}

int cmd_quantize_stats(const Overrides& ov, const std::string& manifest, int code_dim, const std::vector<std::string>& args,
                       std::ostream& out, const Logger& log) {
  auto cfg = ov.resolve();
  if (code_dim > 0) cfg.model.code_dim = code_dim;
  const auto entries = load_manifest(manifest);
  if (entries.empty()) throw DataError("manifest is empty: " + manifest);
  const auto dir = make_run_dir(ov.out, config_hash(cfg));
  write_config_snapshot(dir, cfg, "quantize-stats", args);
  const int factor = cfg.model.encoder.downsample_factor;
  const QuantizerState q = build_quantizer(cfg.model.features.mel_bins * factor, cfg.model.code_dim, cfg.model.codebook_size,
                                           cfg.model.quantizer_seed);
  q.save(dir / "quantizer.brq");
  LabelSequence with, without;
  for (const auto& f : load_features(manifest, entries, cfg.model.features, cfg.threads)) {
    const auto stacked = stack_frames(f, factor);
    const auto a = quantize(q, stacked, true);
    const auto b = quantize(q, stacked, false);
    with.insert(with.end(), a.begin(), a.end());
    without.insert(without.end(), b.begin(), b.end());
  }
  const auto sw = codebook_utilization(with, q.codebook_size());
  const auto so = codebook_utilization(without, q.codebook_size());
  ordered_json j;
  j["codebook_size"] = q.codebook_size();
  j["frames"] = with.size();
  j["quantizer_hash"] = hex64(q.content_hash());
  j["normalized"] = {{"entropy_bits", sw.entropy_bits}, {"fraction_used", sw.fraction_used}};
  j["unnormalized"] = {{"entropy_bits", so.entropy_bits}, {"fraction_used", so.fraction_used}};
  write_text(dir / "stats.json", j.dump(2) + "\n");
  out << j.dump(2) << "\n";
  log.info("run directory " + dir.string());
  return kExitOk;
}

int cmd_retrain(const Overrides& ov, const std::string& unlabeled, const std::string& labeled, const std::string& init,
                const std::string& resume, long steps, const std::vector<std::string>& args, const Logger& log) {
  auto cfg = ov.resolve();
  std::vector<ManifestEntry> lab;
  if (!labeled.empty()) lab = load_manifest(labeled);
  ModelBundle b = initial_bundle(resume.empty() ? init : resume, cfg, labeled.empty() ? nullptr : &lab);
  if (!resume.empty()) {
    // Continuing a run: its own configuration is authoritative.
    const auto stored = nlohmann::json::parse(load_checkpoint(resume).config_json);
    b.config = experiment_from_json(stored.at("experiment"));
    ov.apply(b.config);
  }
  ensure_projection_head(b);
  const auto& mc = b.config.model;
  const auto entries = load_manifest(unlabeled);
  validate_split(entries, false);
  if (entries.empty()) throw DataError("unlabeled manifest is empty: " + unlabeled);
  const auto feats = load_features(unlabeled, entries, mc.features, b.config.threads);

  const auto dir = make_run_dir(ov.out, config_hash(b.config));
  write_config_snapshot(dir, b.config, "retrain", args);
  const QuantizerState q = build_quantizer(mc.features.mel_bins * mc.encoder.downsample_factor, mc.code_dim,
                                           mc.codebook_size, mc.quantizer_seed);
  q.save(dir / "quantizer.brq");
  Retrainer re(b.params, mc, q, b.config.retrain);
  if (!resume.empty()) re.restore(load_checkpoint(resume));
  const long total = steps > 0 ? steps : re.planned_steps(feats.size());
  log.info("re-training for " + std::to_string(total) + " steps on " + std::to_string(feats.size()) + " utterances");
  auto rec = re.run(feats, total);
  rec.config_hash = hex64(config_hash(b.config));
  b.lineage.push_back("retrain");
  auto ck = re.checkpoint(bundle_config_json(b));
  save_checkpoint(dir / "final.ckpt", ck);
  rec.checkpoints.push_back((dir / "final.ckpt").string());
  write_text(dir / "loss.csv", rec.loss_csv());
  write_text(dir / "record.json", rec.to_json().dump(2) + "\n");
  log.info("run directory " + dir.string());
  return kExitOk;
}

int cmd_finetune(const Overrides& ov, const std::string& labeled, const std::string& init, int fold, bool all_folds,
                 const std::vector<std::string>& args, const Logger& log) {
  auto cfg = ov.resolve();
  const auto entries = load_manifest(labeled);
  ModelBundle base = initial_bundle(init, cfg, &entries);
  if (!init.empty()) base.config.finetune = cfg.finetune, base.config.folds = cfg.folds, base.config.val_fraction = cfg.val_fraction;
  for (const auto& e : entries)
    if (e.transcript && !base.tokenizer.covers(*e.transcript))
      throw DataError("model vocabulary does not cover transcript of '" + e.id + "'");
  const auto dir = make_run_dir(ov.out, config_hash(base.config));
  write_config_snapshot(dir, base.config, "finetune", args);
  if (!all_folds) {
    auto d = load_fold(labeled, base.config, base.tokenizer, fold, log);
    ModelBundle b = base;
    finetune_fold(b, d, dir, log);
  } else {
    std::vector<WERResult> per_fold;
    std::vector<std::pair<std::string, std::string>> refs, hyps;
    for (int k = 0; k < base.config.folds; ++k) {
      const auto sub = dir / ("fold" + std::to_string(k));
      fs::create_directories(sub);
      auto d = load_fold(labeled, base.config, base.tokenizer, k, log);
      ModelBundle b = base;
      per_fold.push_back(finetune_fold(b, d, sub, log));
      for (const auto& r : load_texts(sub / "refs.jsonl")) refs.push_back(r);
      for (const auto& h : load_texts(sub / "hyps.jsonl")) hyps.push_back(h);
    }
    const auto agg = aggregate_folds(per_fold);
    ModelBundle b = base;
    b.lineage.push_back("finetune");
    auto header = method_header(b);
    ordered_json folds = ordered_json::array();
    for (const auto& f : agg.folds) folds.push_back(wer_json(f));
    header["folds"] = folds;
    save_texts(dir / "refs.jsonl", refs);
    save_texts(dir / "hyps.jsonl", hyps);
    write_eval(dir, refs, hyps, snr_map(entries), header);
    write_text(dir / "loss.csv", "");
    log.info("pooled cross-validation WER " + fmt(agg.pooled.wer()));
  }
  log.info("run directory " + dir.string());
  return kExitOk;
}

int cmd_evaluate(const std::string& refs, const std::string& hyps, const std::string& hyps_b, const std::string& manifest,
                 const std::string& out_root, const std::vector<std::string>& args, std::ostream& out, const Logger& log) {
  const auto ref_rows = load_texts(refs);
  const auto hyp_rows = load_texts(hyps);
  std::vector<std::pair<std::string, std::string>> hyp_b_rows;
  if (!hyps_b.empty()) hyp_b_rows = load_texts(hyps_b);
  std::map<std::string, double> snr;
  if (!manifest.empty()) snr = snr_map(load_manifest(manifest));
  Fnv1a h;
  for (const auto& a : args) h.update(a);
  const auto dir = make_run_dir(out_root, h.digest());
  ordered_json snap;
  snap["command"] = "evaluate";
  snap["args"] = args;
  write_text(dir / "config.json", snap.dump(2) + "\n");
  ordered_json header;
  header["method"] = "evaluate";
  header["tap"] = nullptr;
  header["lambda"] = nullptr;
  const auto report = write_eval(dir, ref_rows, hyp_rows, snr, header, hyps_b.empty() ? nullptr : &hyp_b_rows);
  out << "WER " << fmt(report["wer"].get<double>()) << "\n";
  log.info("run directory " + dir.string());
  return kExitOk;
}

std::vector<AblationFlags> parse_variants(const std::string& spec) {
  if (spec == "all") return all_ablation_variants();
  std::vector<AblationFlags> out;
  std::istringstream in(spec);
  std::string v;
  while (std::getline(in, v, ',')) {
    if (v.size() != 2 || (v[0] != 'Y' && v[0] != 'N') || (v[1] != 'Y' && v[1] != 'N'))
      throw CLI::ValidationError("--variants", "expected 'all' or a comma list of NN, YN, NY, YY");
    out.push_back({v[0] == 'Y', v[1] == 'Y'});
  }
  return out;
}

int cmd_ablate(const Overrides& ov, const std::string& corpus, const std::string& init, const std::string& variants_spec,
               long steps, int fold, const std::vector<std::string>& args, const Logger& log) {
  const auto variants = parse_variants(variants_spec);
  auto cfg = ov.resolve();
  const fs::path cdir(corpus);
  const auto labeled_path = cdir / "labeled.jsonl";
  const auto unlabeled_path = cdir / "unlabeled.jsonl";
  const auto labeled = load_manifest(labeled_path);
  ModelBundle base = initial_bundle(init, cfg, &labeled);
  if (!init.empty()) {
    base.config.retrain = cfg.retrain;
    base.config.finetune = cfg.finetune;
    base.config.model.codebook_size = cfg.model.codebook_size;
    base.config.model.code_dim = cfg.model.code_dim;
    base.config.model.quantizer_seed = cfg.model.quantizer_seed;
  }
  ensure_projection_head(base);
  const auto& mc = base.config.model;
  const auto unl_entries = load_manifest(unlabeled_path);
  validate_split(unl_entries, false);
  const auto unl = load_features(unlabeled_path, unl_entries, mc.features, base.config.threads);
  const auto d = load_fold(labeled_path, base.config, base.tokenizer, fold, log);
  const QuantizerState q = build_quantizer(mc.features.mel_bins * mc.encoder.downsample_factor, mc.code_dim,
                                           mc.codebook_size, mc.quantizer_seed);

  const auto dir = make_run_dir(ov.out, config_hash(base.config));
  write_config_snapshot(dir, base.config, "ablate", args);
  AblationInputs in{&base.params, &q, &unl, &d.train, &d.val, &d.test, &base.tokenizer, steps};
  const auto rows = run_ablation_grid(base.config, variants, in);

  std::string csv = "use_l_d_ell,use_l_d_n,tap,lambda,beta,wer,seed\n";
  std::string md = "| Using L_d^l | Using L_d^n | Layer / lambda | WER (%) |\n|---|---|---|---|\n";
  for (const auto& r : rows) {
    const auto sub = dir / ("variant-" + std::string(r.flags.use_l_d_ell ? "Y" : "N") + (r.flags.use_l_d_n ? "Y" : "N"));
    fs::create_directories(sub);
    ModelBundle vb = base;
    vb.config.retrain.flags = r.flags;
    vb.lineage.push_back("retrain");
    vb.lineage.push_back("finetune");
    write_text(sub / "loss.csv", r.retrain.loss_csv());
    write_text(sub / "finetune_loss.csv", r.finetune.loss_csv());
    write_text(sub / "record.json", ordered_json{{"retrain", r.retrain.to_json()}, {"finetune", r.finetune.to_json()}}.dump(2) + "\n");
    std::vector<std::pair<std::string, std::string>> ref_rows, hyp_rows;
    for (std::size_t i = 0; i < d.test.size(); ++i) {
      ref_rows.emplace_back(d.test[i].id, d.test[i].transcript);
      hyp_rows.emplace_back(d.test[i].id, r.hypotheses[i]);
    }
    save_texts(sub / "refs.jsonl", ref_rows);
    save_texts(sub / "hyps.jsonl", hyp_rows);
    auto header = method_header(vb);
    header["method"] = "BEARD + FT (" + r.flags.label() + ")";
    write_eval(sub, ref_rows, hyp_rows, snr_map(d.test_entries), header);
    csv += std::string(r.flags.use_l_d_ell ? "Y" : "N") + "," + (r.flags.use_l_d_n ? "Y" : "N") + "," +
           std::to_string(vb.config.retrain.tap.ell) + "," + fmt(vb.config.retrain.weights.lambda) + "," +
           fmt(vb.config.retrain.weights.beta) + "," + fmt(r.test_wer) + "," + std::to_string(vb.config.retrain.seed) + "\n";
    md += std::string("| ") + (r.flags.use_l_d_ell ? "Yes" : "No") + " | " + (r.flags.use_l_d_n ? "Yes" : "No") + " | " +
          std::to_string(vb.config.retrain.tap.ell) + " / " + fmt(vb.config.retrain.weights.lambda) + " | " +
          fmt(100.0 * r.test_wer) + " |\n";
    log.info("variant " + r.flags.label() + ": WER " + fmt(r.test_wer));
  }
  write_text(dir / "ablation.csv", csv);
  write_text(dir / "ablation.md", md);
  log.info("run directory " + dir.string());
  return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------------------
// Bundles, run directories, reports

std::string bundle_config_json(const ModelBundle& b) {
  ordered_json j;
  j["experiment"] = to_json(b.config);
  j["tokenizer"] = b.tokenizer.words();
  j["lineage"] = b.lineage;
  j["vocab_size"] = b.config.model.decoder.vocab_size;
  return j.dump();
}

void save_bundle(const fs::path& path, const ModelBundle& b) {
  CheckpointData c;
  c.config_json = bundle_config_json(b);
  c.rng_seed = b.config.finetune.seed;
  pack_params(c, b.params);
  save_checkpoint(path, c);
}

ModelBundle load_bundle(const fs::path& path) {
  const auto c = load_checkpoint(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(c.config_json);
  } catch (const nlohmann::json::parse_error&) {
    throw DataError(path.string() + ": checkpoint config block is not JSON");
  }
  if (!j.contains("experiment") || !j.contains("tokenizer"))
    throw DataError(path.string() + ": checkpoint lacks model metadata");
  ModelBundle b;
  b.config = experiment_from_json(j.at("experiment"));
  b.tokenizer = Tokenizer(j.at("tokenizer").get<std::vector<std::string>>());
  b.config.model.decoder.vocab_size = b.tokenizer.size();
  if (j.contains("lineage")) b.lineage = j.at("lineage").get<std::vector<std::string>>();
  b.params = unpack_params(c);
  return b;
}

fs::path make_run_dir(const fs::path& root, std::uint64_t hash) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
  const std::string base = std::string("run-") + stamp + "-" + hex64(hash).substr(0, 8);
  fs::path dir = root / base;
  for (int k = 1; fs::exists(dir); ++k) dir = root / (base + "." + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

void write_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  std::vector<std::string> missing;
  for (const auto& d : run_dirs)
    for (const char* f : {"eval.json", "snr_bins.csv"})
      if (!fs::exists(d / f)) missing.push_back((d / f).string());
  if (!missing.empty()) {
    std::string msg = "missing eval outputs:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw DataError(msg);
  }
  fs::create_directories(out_dir);
  std::string csv = "run,adaptation_method,tap,lambda,wer\n";
  std::string md = "| Run | Adaptation method | Layer l | Distillation weight lambda | WER (%) |\n|---|---|---|---|---|\n";
  std::string snr = "run,bin,low,high,utterances,reference_words,errors,wer\n";
  std::string loss = "run,step,l_q,l_d_ell,l_d_n,total\n";
  auto opt = [](const nlohmann::json& v) { return v.is_null() ? std::string() : v.dump(); };
  for (const auto& d : run_dirs) {
    const auto j = read_json(d / "eval.json");
    const std::string name = d.filename().string();
    const std::string method = j.value("method", "");
    csv += name + "," + method + "," + opt(j.value("tap", nlohmann::json())) + "," + opt(j.value("lambda", nlohmann::json())) +
           "," + fmt(j.at("wer").get<double>()) + "\n";
    md += "| " + name + " | " + method + " | " + opt(j.value("tap", nlohmann::json())) + " | " +
          opt(j.value("lambda", nlohmann::json())) + " | " + fmt(100.0 * j.at("wer").get<double>()) + " |\n";
    std::ifstream in(d / "snr_bins.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty()) snr += name + "," + line + "\n";
    std::ifstream lin(d / "loss.csv");
    if (lin && std::getline(lin, line) && line == loss_csv_header())
      while (std::getline(lin, line))
        if (!line.empty()) loss += name + "," + line + "\n";
  }
  write_text(out_dir / "table.csv", csv);
  write_text(out_dir / "table.md", md);
  write_text(out_dir / "snr_bins.csv", snr);
  write_text(out_dir / "loss_curves.csv", loss);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Logger log(err);
  CLI::App app{"BEARD: self-supervised encoder re-training with distillation, fine-tuning and ASR scoring", "beard"};
  app.require_subcommand(1, 1);

  std::string out_flag = ".";
  SyntheticSpec spec;
  spec.utterance_count = 40;
  spec.unlabeled_count = 200;
  spec.snr_low_db = -10.0;
  spec.snr_high_db = 40.0;
  spec.min_tokens = 2;
  spec.max_tokens = 4;
  std::string vocab = "alpha,bravo,charlie,delta,echo,foxtrot,golf,hotel";
  auto* gen = app.add_subcommand("gen-corpus", "Write a synthetic tonal corpus (WAV + JSONL manifests)");
  gen->add_option("--out", out_flag, "Corpus directory")->required();
  gen->add_option("--seed", spec.seed, "Generator seed");
  gen->add_option("--labeled", spec.utterance_count, "Labeled utterances");
  gen->add_option("--unlabeled", spec.unlabeled_count, "Unlabeled utterances");
  gen->add_option("--vocab", vocab, "Comma-separated token list");
  gen->add_option("--snr-low", spec.snr_low_db, "Lowest SNR (dB)");
  gen->add_option("--snr-high", spec.snr_high_db, "Highest SNR (dB)");
  gen->add_option("--min-tokens", spec.min_tokens, "Minimum tokens per utterance");
  gen->add_option("--max-tokens", spec.max_tokens, "Maximum tokens per utterance");
  gen->add_option("--freq-scale", spec.freq_scale, "Multiplier on every token frequency");

  Overrides ov_q, ov_r, ov_f, ov_a;
  std::string manifest;
  int code_dim = 0;
  auto* qs = app.add_subcommand("quantize-stats", "Codebook utilization with and without input normalization");
  ov_q.attach(qs);
  qs->add_option("--manifest", manifest, "Manifest to quantize")->required();
  qs->add_option("--code-dim", code_dim, "Projection width");

  std::string unlabeled, labeled, init, resume;
  long steps = 0;
  auto* rt = app.add_subcommand("retrain", "Self-supervised re-training of the encoder");
  ov_r.attach(rt);
  rt->add_option("--unlabeled", unlabeled, "Unlabeled manifest")->required();
  rt->add_option("--labeled", labeled, "Labeled manifest (vocabulary source without --init)");
  rt->add_option("--init", init, "Model checkpoint to adapt");
  rt->add_option("--resume", resume, "Re-training checkpoint to continue");
  rt->add_option("--steps", steps, "Total optimizer steps (default: configured epochs)");

  int fold = 0;
  bool all_folds = false;
  auto* fts = app.add_subcommand("finetune", "Supervised fine-tuning with early stopping on validation WER");
  ov_f.attach(fts);
  fts->add_option("--labeled", labeled, "Labeled manifest")->required();
  fts->add_option("--init", init, "Model checkpoint (default: fresh model)");
  fts->add_option("--fold", fold, "Cross-validation fold used as test set");
  fts->add_flag("--all-folds", all_folds, "Run every fold and pool the WER");

  std::string refs, hyps, hyps_b, eval_out = "runs";
  auto* ev = app.add_subcommand("evaluate", "Score hypotheses: WER, SNR bins, matched-pair test");
  ev->add_option("--refs", refs, "Reference JSONL (id, text)")->required();
  ev->add_option("--hyps", hyps, "Hypothesis JSONL (id, text)")->required();
  ev->add_option("--hyps-b", hyps_b, "Second system for the matched-pair test");
  ev->add_option("--manifest", manifest, "Manifest with snr_db metadata");
  ev->add_option("--out", eval_out, "Output root directory");

  std::string corpus, variants = "all";
  auto* ab = app.add_subcommand("ablate", "Re-train + fine-tune for each distillation variant");
  ov_a.attach(ab);
  ab->add_option("--corpus", corpus, "Corpus directory with labeled.jsonl and unlabeled.jsonl")->required();
  ab->add_option("--init", init, "Model checkpoint to adapt");
  ab->add_option("--variants", variants, "'all' or a comma list of NN, YN, NY, YY");
  ab->add_option("--steps", steps, "Re-training steps per variant");
  ab->add_option("--fold", fold, "Cross-validation fold used as test set");

  std::vector<std::string> run_dirs;
  std::string report_out = "report";
  auto* rp = app.add_subcommand("report", "Collect run directories into comparison tables");
  rp->add_option("runs", run_dirs, "Run directories")->required();
  rp->add_option("--out", report_out, "Report directory");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_corpus(out_flag, spec, vocab, log);
    if (*qs) return cmd_quantize_stats(ov_q, manifest, code_dim, args, out, log);
    if (*rt) return cmd_retrain(ov_r, unlabeled, labeled, init, resume, steps, args, log);
    if (*fts) return cmd_finetune(ov_f, labeled, init, fold, all_folds, args, log);
    if (*ev) return cmd_evaluate(refs, hyps, hyps_b, manifest, eval_out, args, out, log);
    if (*ab) return cmd_ablate(ov_a, corpus, init, variants, steps, fold, args, log);
    if (*rp) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      write_report(dirs, report_out);
      out << "report written to " << report_out << "\n";
      return kExitOk;
    }
  } catch (const CLI::ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    log.error(e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    log.error(e.what());
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace beard
