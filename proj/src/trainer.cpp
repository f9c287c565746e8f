#include "beard/trainer.hpp"

#include "beard/rng.hpp"

#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace beard {

using ordered_json = nlohmann::ordered_json;

std::string AblationFlags::label() const {
  return std::string(use_l_d_ell ? "Y" : "N") + "/" + (use_l_d_n ? "Y" : "N");
}

std::vector<AblationFlags> all_ablation_variants() {
  return {{false, false}, {true, false}, {false, true}, {true, true}};
}

void RetrainConfig::validate(const EncoderConfig& enc) const {
  if (tap.ell < 1 || tap.ell > enc.n_layers)
    throw std::invalid_argument("retrain: tap layer " + std::to_string(tap.ell) + " outside [1, " +
                                std::to_string(enc.n_layers) + "]");
  if (!(lr_encoder > 0.0) || !(lr_projection > 0.0)) throw std::invalid_argument("retrain: learning rates must be > 0");
  if (batch_size < 1 || epochs < 1 || max_steps < 0) throw std::invalid_argument("retrain: invalid batch/epoch settings");
  if (mask_span < 1 || !(mask_prob >= 0.0 && mask_prob <= 1.0)) throw std::invalid_argument("retrain: invalid mask settings");
  if (!(weights.lambda >= 0.0) || !(weights.beta >= 0.0) || !std::isfinite(weights.lambda) || !std::isfinite(weights.beta))
    throw std::invalid_argument("retrain: loss weights must be finite and non-negative");
}

void FinetuneConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("finetune: learning rate must be > 0");
  if (batch_size < 1 || max_epochs < 1 || evals_per_epoch < 1 || max_decode_len < 1)
    throw std::invalid_argument("finetune: invalid batch/epoch settings");
  if (patience < 1) throw std::invalid_argument("finetune: patience must be >= 1");
}

// ---------------------------------------------------------------------------
// Config JSON

namespace {

template <typename T>
void read_field(const nlohmann::json& obj, const std::string& section, const char* key,
                T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw DataError("config: field '" + section + "." + key + "' has the wrong type");
  }
}

void reject_unknown(const nlohmann::json& obj, const std::string& section, const std::set<std::string>& known) {
  if (!obj.is_object()) throw DataError("config: section '" + section + "' must be an object");
  for (const auto& [k, v] : obj.items())
    if (!known.contains(k)) throw DataError("config: unknown field '" + section + "." + k + "'");
}

}  // namespace

ordered_json to_json(const ExperimentConfig& c) {
  ordered_json j;
  const auto& m = c.model;
  j["features"] = {{"window", m.features.window}, {"hop", m.features.hop},       {"n_fft", m.features.n_fft},
                   {"mel_bins", m.features.mel_bins}, {"log_eps", m.features.log_eps}, {"f_min", m.features.f_min},
                   {"f_max", m.features.f_max}};
  j["encoder"] = {{"n_layers", m.encoder.n_layers}, {"d_model", m.encoder.d_model}, {"n_heads", m.encoder.n_heads},
                  {"ff_mult", m.encoder.ff_mult},   {"downsample_factor", m.encoder.downsample_factor},
                  {"max_frames", m.encoder.max_frames}};
  j["decoder"] = {{"n_layers", m.decoder.n_layers}, {"n_heads", m.decoder.n_heads}, {"ff_mult", m.decoder.ff_mult},
                  {"max_len", m.decoder.max_len}};
  j["quantizer"] = {{"codebook_size", m.codebook_size}, {"code_dim", m.code_dim}, {"seed", m.quantizer_seed}};
  j["init_seed"] = m.init_seed;
  const auto& r = c.retrain;
  j["retrain"] = {{"tap", r.tap.ell},
                  {"lambda", r.weights.lambda},
                  {"beta", r.weights.beta},
                  {"mask_span", r.mask_span},
                  {"mask_prob", r.mask_prob},
                  {"lr_encoder", r.lr_encoder},
                  {"lr_projection", r.lr_projection},
                  {"batch_size", r.batch_size},
                  {"epochs", r.epochs},
                  {"max_steps", r.max_steps},
                  {"seed", r.seed},
                  {"use_l_d_ell", r.flags.use_l_d_ell},
                  {"use_l_d_n", r.flags.use_l_d_n}};
  const auto& f = c.finetune;
  j["finetune"] = {{"lr", f.lr},           {"batch_size", f.batch_size}, {"max_epochs", f.max_epochs},
                   {"patience", f.patience}, {"evals_per_epoch", f.evals_per_epoch},
                   {"max_decode_len", f.max_decode_len}, {"seed", f.seed}};
  j["folds"] = c.folds;
  j["val_fraction"] = c.val_fraction;
  j["threads"] = c.threads;
  return j;
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  reject_unknown(j, "<root>",
                 {"features", "encoder", "decoder", "quantizer", "init_seed", "retrain", "finetune", "folds", "val_fraction",
                  "threads"});
  auto section = [&](const char* name, const std::set<std::string>& known) -> const nlohmann::json* {
    if (!j.contains(name)) return nullptr;
    reject_unknown(j.at(name), name, known);
    return &j.at(name);
  };
  auto& m = c.model;
  if (const auto* s = section("features", {"window", "hop", "n_fft", "mel_bins", "log_eps", "f_min", "f_max"})) {
    read_field(*s, "features", "window", m.features.window);
    read_field(*s, "features", "hop", m.features.hop);
    read_field(*s, "features", "n_fft", m.features.n_fft);
    read_field(*s, "features", "mel_bins", m.features.mel_bins);
    read_field(*s, "features", "log_eps", m.features.log_eps);
    read_field(*s, "features", "f_min", m.features.f_min);
    read_field(*s, "features", "f_max", m.features.f_max);
  }
  if (const auto* s = section("encoder", {"n_layers", "d_model", "n_heads", "ff_mult", "downsample_factor", "max_frames"})) {
    read_field(*s, "encoder", "n_layers", m.encoder.n_layers);
    read_field(*s, "encoder", "d_model", m.encoder.d_model);
    read_field(*s, "encoder", "n_heads", m.encoder.n_heads);
    read_field(*s, "encoder", "ff_mult", m.encoder.ff_mult);
    read_field(*s, "encoder", "downsample_factor", m.encoder.downsample_factor);
    read_field(*s, "encoder", "max_frames", m.encoder.max_frames);
  }
  if (const auto* s = section("decoder", {"n_layers", "n_heads", "ff_mult", "max_len"})) {
    read_field(*s, "decoder", "n_layers", m.decoder.n_layers);
    read_field(*s, "decoder", "n_heads", m.decoder.n_heads);
    read_field(*s, "decoder", "ff_mult", m.decoder.ff_mult);
    read_field(*s, "decoder", "max_len", m.decoder.max_len);
  }
  if (const auto* s = section("quantizer", {"codebook_size", "code_dim", "seed"})) {
    read_field(*s, "quantizer", "codebook_size", m.codebook_size);
    read_field(*s, "quantizer", "code_dim", m.code_dim);
    read_field(*s, "quantizer", "seed", m.quantizer_seed);
  }
  read_field(j, "<root>", "init_seed", m.init_seed);
  if (const auto* s = section("retrain", {"tap", "lambda", "beta", "mask_span", "mask_prob", "lr_encoder", "lr_projection",
                                          "batch_size", "epochs", "max_steps", "seed", "use_l_d_ell", "use_l_d_n"})) {
    auto& r = c.retrain;
    read_field(*s, "retrain", "tap", r.tap.ell);
    read_field(*s, "retrain", "lambda", r.weights.lambda);
    read_field(*s, "retrain", "beta", r.weights.beta);
    read_field(*s, "retrain", "mask_span", r.mask_span);
    read_field(*s, "retrain", "mask_prob", r.mask_prob);
    read_field(*s, "retrain", "lr_encoder", r.lr_encoder);
    read_field(*s, "retrain", "lr_projection", r.lr_projection);
    read_field(*s, "retrain", "batch_size", r.batch_size);
    read_field(*s, "retrain", "epochs", r.epochs);
    read_field(*s, "retrain", "max_steps", r.max_steps);
    read_field(*s, "retrain", "seed", r.seed);
    read_field(*s, "retrain", "use_l_d_ell", r.flags.use_l_d_ell);
    read_field(*s, "retrain", "use_l_d_n", r.flags.use_l_d_n);
  }
  if (const auto* s = section("finetune", {"lr", "batch_size", "max_epochs", "patience", "evals_per_epoch", "max_decode_len", "seed"})) {
    auto& f = c.finetune;
    read_field(*s, "finetune", "lr", f.lr);
    read_field(*s, "finetune", "batch_size", f.batch_size);
    read_field(*s, "finetune", "max_epochs", f.max_epochs);
    read_field(*s, "finetune", "patience", f.patience);
    read_field(*s, "finetune", "evals_per_epoch", f.evals_per_epoch);
    read_field(*s, "finetune", "max_decode_len", f.max_decode_len);
    read_field(*s, "finetune", "seed", f.seed);
  }
  read_field(j, "<root>", "folds", c.folds);
  read_field(j, "<root>", "val_fraction", c.val_fraction);
  read_field(j, "<root>", "threads", c.threads);
  m.encoder.n_mels = m.features.mel_bins;
  return c;
}

std::uint64_t config_hash(const ExperimentConfig& c) {
  Fnv1a h;
  h.update(to_json(c).dump());
  return h.digest();
}

// ---------------------------------------------------------------------------
// Data plumbing

std::vector<LabeledUtterance> make_labeled(const std::vector<ManifestEntry>& entries, std::vector<FeatureMatrix> features,
                                           const Tokenizer& tokenizer) {
  if (entries.size() != features.size()) throw std::invalid_argument("make_labeled: entry/feature count mismatch");
  std::vector<LabeledUtterance> out;
  out.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].transcript) throw DataError("make_labeled: entry '" + entries[i].id + "' has no transcript");
    LabeledUtterance u;
    u.id = entries[i].id;
    u.features = std::move(features[i]);
    u.transcript = *entries[i].transcript;
    u.tokens = tokenizer.encode(u.transcript);
    u.snr_db = entries[i].snr_db;
    out.push_back(std::move(u));
  }
  return out;
}

ordered_json RunRecord::to_json() const {
  ordered_json j;
  j["stage"] = stage;
  j["config_hash"] = config_hash;
  j["steps"] = stage == "retrain" ? retrain_log.size() : finetune_log.size();
  j["checkpoints"] = checkpoints;
  if (stage == "retrain") {
    j["teacher_hash_before"] = hex64(teacher_hash_before);
    j["teacher_hash_after"] = hex64(teacher_hash_after);
    j["quantizer_hash_before"] = hex64(quantizer_hash_before);
    j["quantizer_hash_after"] = hex64(quantizer_hash_after);
  }
  j["metrics"] = metrics;
  return j;
}

std::string RunRecord::loss_csv() const {
  std::string out;
  if (stage == "retrain") {
    out = loss_csv_header() + "\n";
    for (const auto& [step, b] : retrain_log) out += loss_csv_row(step, b) + "\n";
  } else {
    out = "step,ce_loss,val_wer\n";
    char buf[96];
    for (const auto& r : finetune_log) {
      std::snprintf(buf, sizeof(buf), "%ld,%.17g,", r.step, r.ce_loss);
      out += buf;
      if (r.val_wer) {
        std::snprintf(buf, sizeof(buf), "%.17g", *r.val_wer);
        out += buf;
      }
      out += "\n";
    }
  }
  return out;
}

ParameterSet init_model(const ModelConfig& cfg) {
  ParameterSet ps;
  init_encoder(ps, cfg.encoder, derive_seed(cfg.init_seed, 1));
  init_projection_head(ps, cfg.encoder, cfg.codebook_size, derive_seed(cfg.init_seed, 2));
  init_decoder(ps, cfg.encoder, cfg.decoder, derive_seed(cfg.init_seed, 3));
  return ps;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x0e90c4, epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

namespace {

// Indices of the batch used at `step` when every epoch is split into
// ceil(n / batch) batches of a seeded permutation.
std::vector<std::size_t> batch_at(std::size_t n, int batch_size, std::uint64_t seed, long step) {
  const auto bs = static_cast<std::size_t>(batch_size);
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const auto epoch = static_cast<std::uint64_t>(step) / per_epoch;
  const std::size_t b = static_cast<std::size_t>(step) % per_epoch;
  const auto order = epoch_order(n, seed, epoch);
  const std::size_t end = std::min(n, (b + 1) * bs);
  return {order.begin() + static_cast<std::ptrdiff_t>(b * bs), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

std::vector<ParamGroup> retrain_groups(const RetrainConfig& cfg) {
  return {{"encoder", {"enc."}, cfg.lr_encoder}, {"projection", {"head."}, cfg.lr_projection}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Retrainer

Retrainer::Retrainer(ParameterSet& params, const ModelConfig& model, const QuantizerState& quantizer, RetrainConfig cfg)
    : params_(params),
      model_(model),
      quantizer_(quantizer),
      cfg_(cfg),
      teacher_(snapshot_teacher(params)),
      adam_(retrain_groups(cfg)) {
  model_.encoder.validate();
  cfg_.validate(model_.encoder);
  const int stacked = model_.encoder.n_mels * model_.encoder.downsample_factor;
  if (quantizer_.d_in() != stacked)
    throw std::invalid_argument("retrain: quantizer input " + std::to_string(quantizer_.d_in()) +
                                " != stacked feature width " + std::to_string(stacked));
  if (!params_.contains("head.w") || params_.at("head.w").value.cols() != quantizer_.codebook_size())
    throw std::invalid_argument("retrain: projection head width does not match codebook size " +
                                std::to_string(quantizer_.codebook_size()));
  if (params_.at("head.w").value.rows() != model_.encoder.d_model)
    throw std::invalid_argument("retrain: projection head input does not match d_model");
}

long Retrainer::planned_steps(std::size_t n) const {
  if (cfg_.max_steps > 0) return cfg_.max_steps;
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  return static_cast<long>((n + bs - 1) / bs) * cfg_.epochs;
}

const LabelSequence& Retrainer::labels_for(std::size_t index, const FeatureMatrix& f) {
  auto it = label_cache_.find(index);
  if (it == label_cache_.end())
    it = label_cache_.emplace(index, quantize(quantizer_, stack_frames(f, model_.encoder.downsample_factor))).first;
  return it->second;
}

const EncoderOutputs& Retrainer::teacher_for(std::size_t index, const FeatureMatrix& f) {
  auto it = teacher_cache_.find(index);
  if (it == teacher_cache_.end())
    it = teacher_cache_.emplace(index, encoder_forward(teacher_.params(), model_.encoder, f, cfg_.tap)).first;
  return it->second;
}

LossBreakdown Retrainer::step(const std::vector<FeatureMatrix>& corpus) {
  if (corpus.empty()) throw DataError("retrain: empty unlabeled corpus");
  const auto batch = batch_at(corpus.size(), cfg_.batch_size, cfg_.seed, step_);
  const bool need_teacher = cfg_.flags.use_l_d_ell || cfg_.flags.use_l_d_n;

  Tape tape;
  Binder student(tape, params_);
  std::vector<Var> logits, s_tap, s_final, t_tap, t_final;
  LabelSequence labels;
  FrameMask mask;
  for (std::size_t slot = 0; slot < batch.size(); ++slot) {
    const std::size_t idx = batch[slot];
    const FeatureMatrix& f = corpus[idx];
    const auto& lab = labels_for(idx, f);
    const auto plan = sample_mask(static_cast<std::size_t>(f.num_frames()), cfg_.mask_span, cfg_.mask_prob,
                                  derive_seed(cfg_.seed, static_cast<std::uint64_t>(step_), 2 * slot + 1),
                                  model_.encoder.downsample_factor);
    const auto corrupted = apply_mask(f, plan, derive_seed(cfg_.seed, static_cast<std::uint64_t>(step_), 2 * slot + 2));
    const auto s = encoder_forward(student, model_.encoder, tape.constant(corrupted.frames), cfg_.tap);
    logits.push_back(projection_head(student, s.tap));
    s_tap.push_back(s.tap);
    s_final.push_back(s.final);
    if (need_teacher) {
      const auto& t = teacher_for(idx, f);
      t_tap.push_back(tape.constant(t.tap));
      t_final.push_back(tape.constant(t.final));
    }
    labels.insert(labels.end(), lab.begin(), lab.end());
    mask.insert(mask.end(), plan.output_mask.begin(), plan.output_mask.end());
  }

  const std::size_t masked = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  const std::size_t unmasked = mask.size() - masked;
  const Var zero = tape.constant(Matrix::Zero(1, 1));
  // A batch without masked frames has no prediction target; the term is skipped.
  const Var l_q = masked > 0 ? prediction_loss(concat_rows(logits), labels, mask) : zero;
  const Var l_d_ell = cfg_.flags.use_l_d_ell ? distill_loss(concat_rows(s_tap), concat_rows(t_tap), mask) : zero;
  const Var l_d_n = cfg_.flags.use_l_d_n ? distill_loss(concat_rows(s_final), concat_rows(t_final), mask) : zero;
  const double lam = cfg_.weights.lambda, beta = cfg_.weights.beta;
  const Var total = add(add(l_q, scale(l_d_ell, lam)), scale(l_d_n, lam * beta));

  LossBreakdown b;
  try {
    b = combine(l_q.scalar(), l_d_ell.scalar(), l_d_n.scalar(), cfg_.weights);
  } catch (const std::invalid_argument&) {
    throw NumericError("retrain: non-finite loss at step " + std::to_string(step_));
  }
  b.masked_count = masked;
  b.unmasked_count = unmasked;
  if (!std::isfinite(total.scalar())) throw NumericError("retrain: non-finite loss at step " + std::to_string(step_));

  params_.zero_grad();
  tape.backward(total);
  adam_.step(params_);
  log_.emplace_back(step_, b);
  ++step_;
  return b;
}

RunRecord Retrainer::run(const std::vector<FeatureMatrix>& corpus, long total_steps) {
  RunRecord rec;
  rec.stage = "retrain";
  rec.teacher_hash_before = teacher_.recorded_hash();
  rec.quantizer_hash_before = quantizer_.content_hash();
  while (step_ < total_steps) step(corpus);
  rec.retrain_log = log_;
  rec.teacher_hash_after = teacher_.params().content_hash();
  rec.quantizer_hash_after = quantizer_.content_hash();
  if (rec.teacher_hash_after != rec.teacher_hash_before) throw std::logic_error("retrain: teacher parameters changed");
  if (rec.quantizer_hash_after != rec.quantizer_hash_before) throw std::logic_error("retrain: quantizer changed");
  rec.metrics["steps"] = step_;
  if (!log_.empty()) rec.metrics["final_total"] = log_.back().second.total;
  return rec;
}

void pack_params(CheckpointData& c, const ParameterSet& params, const std::string& prefix) {
  for (const auto& p : params) c.tensors.push_back({prefix + p->name, p->value, TensorDType::kFloat64});
}

ParameterSet unpack_params(const CheckpointData& c, const std::string& prefix) {
  ParameterSet ps;
  for (const auto& t : c.tensors) {
    if (!t.name.starts_with(prefix)) continue;
    const auto name = t.name.substr(prefix.size());
    if (prefix.empty() && (name.starts_with("teacher/") || name.starts_with("adam."))) continue;
    ps.add(name, t.value);
  }
  return ps;
}

CheckpointData Retrainer::checkpoint(const std::string& config_json) const {
  CheckpointData c;
  c.config_json = config_json;
  c.rng_seed = cfg_.seed;
  c.rng_counter = static_cast<std::uint64_t>(step_);
  c.step = static_cast<std::uint64_t>(step_);
  pack_params(c, params_);
  pack_params(c, teacher_.params(), "teacher/");
  for (const auto& [name, mom] : adam_.state()) {
    c.tensors.push_back({"adam.m/" + name, mom.m, TensorDType::kFloat64});
    c.tensors.push_back({"adam.v/" + name, mom.v, TensorDType::kFloat64});
  }
  Matrix steps(1, 1);
  steps(0, 0) = static_cast<double>(adam_.steps());
  c.tensors.push_back({"adam.steps", steps, TensorDType::kFloat64});
  return c;
}

void Retrainer::restore(const CheckpointData& c) {
  const ParameterSet loaded = unpack_params(c);
  for (auto& p : params_) {
    if (!loaded.contains(p->name)) throw DataError("checkpoint: missing parameter '" + p->name + "'");
    const auto& v = loaded.at(p->name).value;
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols())
      throw DataError("checkpoint: shape mismatch for '" + p->name + "'");
    p->value = v;
  }
  ParameterSet teacher = unpack_params(c, "teacher/");
  if (teacher.size() == 0) throw DataError("checkpoint: no teacher parameters");
  teacher_ = snapshot_teacher(teacher);
  teacher_cache_.clear();
  std::map<std::string, Adam::Moments> state;
  for (const auto& t : c.tensors) {
    if (t.name.starts_with("adam.m/")) state[t.name.substr(7)].m = t.value;
    if (t.name.starts_with("adam.v/")) state[t.name.substr(7)].v = t.value;
  }
  const auto* steps = c.find("adam.steps");
  adam_.restore(steps ? static_cast<long>(steps->value(0, 0)) : 0, std::move(state));
  step_ = static_cast<long>(c.step);
  log_.clear();
}

// ---------------------------------------------------------------------------
// Fine-tuning

EarlyStopper::EarlyStopper(int patience) : patience_(patience) {
  if (patience < 1) throw std::invalid_argument("EarlyStopper: patience must be >= 1");
}

bool EarlyStopper::update(double wer) {
  ++evals_;
  if (best_eval_ == 0 || wer < best_) {
    best_ = wer;
    best_eval_ = evals_;
    bad_ = 0;
    return true;
  }
  ++bad_;
  return false;
}

Var seq2seq_loss(Binder& w, const ModelConfig& model, const std::vector<const LabeledUtterance*>& batch) {
  std::vector<Var> logits;
  std::vector<int> targets;
  for (const auto* u : batch) {
    const auto enc = encoder_forward(w, model.encoder, w.tape().constant(u->features.frames), LayerTap{model.encoder.n_layers});
    std::vector<int> prefix{Tokenizer::kBos};
    prefix.insert(prefix.end(), u->tokens.begin(), u->tokens.end());
    logits.push_back(decoder_forward(w, model.decoder, enc.final, prefix));
    targets.insert(targets.end(), u->tokens.begin(), u->tokens.end());
    targets.push_back(Tokenizer::kEos);
  }
  return cross_entropy_rows(concat_rows(logits), targets, FrameMask(targets.size(), true));
}

Finetuner::Finetuner(ParameterSet& params, const ModelConfig& model, const Tokenizer& tokenizer, FinetuneConfig cfg)
    : params_(params),
      model_(model),
      tokenizer_(tokenizer),
      cfg_(cfg),
      adam_({{"encoder+decoder", {"enc.", "dec."}, cfg.lr}}) {
  cfg_.validate();
  if (tokenizer_.size() != model_.decoder.vocab_size)
    throw std::invalid_argument("finetune: tokenizer size does not match decoder vocab");
}

double Finetuner::step(const std::vector<LabeledUtterance>& train) {
  if (train.empty()) throw DataError("finetune: empty labeled set");
  const auto idx = batch_at(train.size(), cfg_.batch_size, cfg_.seed, step_);
  std::vector<const LabeledUtterance*> batch;
  for (auto i : idx) batch.push_back(&train[i]);
  Tape tape;
  Binder w(tape, params_);
  const Var loss = seq2seq_loss(w, model_, batch);
  if (!std::isfinite(loss.scalar())) throw NumericError("finetune: non-finite loss at step " + std::to_string(step_));
  params_.zero_grad();
  tape.backward(loss);
  adam_.step(params_);
  ++step_;
  return loss.scalar();
}

RunRecord Finetuner::run(const std::vector<LabeledUtterance>& train, const std::vector<LabeledUtterance>& val,
                         const Validator& validator) {
  if (train.empty()) throw DataError("finetune: empty labeled set");
  for (const auto& u : train)
    if (!tokenizer_.covers(u.transcript)) throw DataError("finetune: tokenizer does not cover '" + u.id + "'");
  Validator validate = validator;
  if (!validate) {
    if (val.empty()) throw DataError("finetune: empty validation set");
    validate = [&](const ParameterSet& ps) {
      return pooled(score(val, transcribe(ps, model_, tokenizer_, val, cfg_.max_decode_len))).wer();
    };
  }
  RunRecord rec;
  rec.stage = "finetune";
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  const long per_epoch = static_cast<long>((train.size() + bs - 1) / bs);
  const long interval = std::max(1L, per_epoch / cfg_.evals_per_epoch);
  EarlyStopper stopper(cfg_.patience);
  ParameterSet best = params_;
  const long limit = per_epoch * cfg_.max_epochs;
  while (step_ < limit && !stopper.stop()) {
    FinetuneLogRow row;
    row.step = step_;
    row.ce_loss = step(train);
    if (step_ % interval == 0 || step_ == limit) {
      row.val_wer = validate(params_);
      if (stopper.update(*row.val_wer)) best = params_;
    }
    rec.finetune_log.push_back(row);
  }
  params_ = best;
  for (auto& p : params_) p->zero_grad();
  rec.metrics["steps"] = step_;
  rec.metrics["evaluations"] = stopper.evaluations();
  rec.metrics["best_eval"] = stopper.best_eval();
  rec.metrics["best_val_wer"] = stopper.best();
  rec.metrics["early_stopped"] = stopper.stop();
  return rec;
}

std::vector<std::string> transcribe(const ParameterSet& params, const ModelConfig& model, const Tokenizer& tokenizer,
                                    const std::vector<LabeledUtterance>& set, int max_len) {
  std::vector<std::string> hyps;
  hyps.reserve(set.size());
  for (const auto& u : set) {
    const auto enc = encoder_forward(params, model.encoder, u.features, LayerTap{model.encoder.n_layers});
    hyps.push_back(tokenizer.decode(greedy_decode(params, model.decoder, enc.final, max_len)));
  }
  return hyps;
}

std::vector<WERResult> score(const std::vector<LabeledUtterance>& set, const std::vector<std::string>& hyps,
                             const NormalizationRules& rules) {
  if (set.size() != hyps.size()) throw std::invalid_argument("score: hypothesis count mismatch");
  std::vector<WERResult> out;
  for (std::size_t i = 0; i < set.size(); ++i) out.push_back(wer_text(set[i].transcript, hyps[i], rules));
  return out;
}

WERResult pooled(const std::vector<WERResult>& per_utt) {
  WERResult r;
  for (const auto& w : per_utt) r += w;
  return r;
}

// ---------------------------------------------------------------------------
// Ablation grid

std::vector<AblationRow> run_ablation_grid(const ExperimentConfig& base, const std::vector<AblationFlags>& variants,
                                           const AblationInputs& in) {
  std::vector<AblationRow> rows;
  if (variants.empty()) return rows;
  if (!in.initial || !in.quantizer || !in.unlabeled || !in.train || !in.val || !in.test || !in.tokenizer)
    throw std::invalid_argument("run_ablation_grid: missing inputs");
  for (std::size_t i = 0; i < variants.size(); ++i)
    for (std::size_t j = i + 1; j < variants.size(); ++j)
      if (variants[i] == variants[j]) throw std::invalid_argument("run_ablation_grid: duplicate variant");
  for (const auto& flags : variants) {
    ExperimentConfig cfg = base;
    cfg.retrain.flags = flags;
    ParameterSet params = *in.initial;
    Retrainer re(params, cfg.model, *in.quantizer, cfg.retrain);
    const long steps = in.retrain_steps > 0 ? in.retrain_steps : re.planned_steps(in.unlabeled->size());
    AblationRow row;
    row.flags = flags;
    row.retrain = re.run(*in.unlabeled, steps);
    row.retrain.config_hash = hex64(config_hash(cfg));
    Finetuner ft(params, cfg.model, *in.tokenizer, cfg.finetune);
    row.finetune = ft.run(*in.train, *in.val);
    row.finetune.config_hash = row.retrain.config_hash;
    row.hypotheses = transcribe(params, cfg.model, *in.tokenizer, *in.test, cfg.finetune.max_decode_len);
    row.result = pooled(score(*in.test, row.hypotheses));
    row.test_wer = row.result.wer();
    row.final_hash = params.content_hash();
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace beard
