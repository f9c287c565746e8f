#pragma once

#include "beard/checkpoint.hpp"
#include "beard/data.hpp"
#include "beard/eval.hpp"
#include "beard/losses.hpp"
#include "beard/model.hpp"
#include "beard/optim.hpp"
#include "beard/quantizer.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace beard {

/// Which distillation terms enter the re-training objective. The prediction
/// term is always on.
struct AblationFlags {
  bool use_l_d_ell = true;
  bool use_l_d_n = true;

  bool operator==(const AblationFlags&) const = default;
  std::string label() const;  // "Y/Y", "N/Y", ...
};

/// The four Table-2 style variants in the order (N,N), (Y,N), (N,Y), (Y,Y).
std::vector<AblationFlags> all_ablation_variants();

struct RetrainConfig {
  LayerTap tap{4};
  LossWeights weights;
  int mask_span = 4;
  double mask_prob = 0.10;
  double lr_encoder = 1e-5;
  double lr_projection = 5e-4;
  int batch_size = 32;
  int epochs = 1;
  long max_steps = 0;  // > 0 caps the run; 0 runs `epochs` full passes
  std::uint64_t seed = 0;
  AblationFlags flags;

  void validate(const EncoderConfig& enc) const;
};

struct FinetuneConfig {
  double lr = 1e-5;
  int batch_size = 16;
  int max_epochs = 10;
  int patience = 3;
  int evals_per_epoch = 4;
  int max_decode_len = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Everything needed to rebuild a model and its frontend.
struct ModelConfig {
  FeatureConfig features;
  EncoderConfig encoder;
  DecoderConfig decoder;
  int codebook_size = 2048;
  int code_dim = 16;
  std::uint64_t quantizer_seed = 1234;
  std::uint64_t init_seed = 7;
};

struct ExperimentConfig {
  ModelConfig model;
  RetrainConfig retrain;
  FinetuneConfig finetune;
  int folds = 4;
  double val_fraction = 0.2;
  int threads = 1;
};

nlohmann::ordered_json to_json(const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown keys throw DataError.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
std::uint64_t config_hash(const ExperimentConfig& c);

/// One labeled example ready for training: features and target token ids.
struct LabeledUtterance {
  std::string id;
  FeatureMatrix features;
  std::string transcript;
  std::vector<int> tokens;
  std::optional<double> snr_db;
};

std::vector<LabeledUtterance> make_labeled(const std::vector<ManifestEntry>& entries,
                                           std::vector<FeatureMatrix> features, const Tokenizer& tokenizer);

struct FinetuneLogRow {
  long step = 0;
  double ce_loss = 0.0;
  std::optional<double> val_wer;
};

struct RunRecord {
  std::string stage;  // "retrain" or "finetune"
  std::string config_hash;
  std::vector<std::pair<long, LossBreakdown>> retrain_log;
  std::vector<FinetuneLogRow> finetune_log;
  std::vector<std::string> checkpoints;
  std::uint64_t teacher_hash_before = 0, teacher_hash_after = 0;
  std::uint64_t quantizer_hash_before = 0, quantizer_hash_after = 0;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();

  nlohmann::ordered_json to_json() const;
  std::string loss_csv() const;
};

/// Fresh parameters: encoder, projection head, and decoder.
ParameterSet init_model(const ModelConfig& cfg);

/// Batch order for one epoch: a permutation that depends only on (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

/// Self-supervised re-training of the student encoder against its frozen
/// teacher snapshot and the frozen quantizer.
class Retrainer {
 public:
  /// Snapshots the teacher from `params` and checks every dimension before step 0.
  Retrainer(ParameterSet& params, const ModelConfig& model, const QuantizerState& quantizer, RetrainConfig cfg);

  /// One optimizer step on the batch selected by the current step counter.
  LossBreakdown step(const std::vector<FeatureMatrix>& corpus);
  /// Runs until `total_steps` steps have been taken (counting restored steps).
  RunRecord run(const std::vector<FeatureMatrix>& corpus, long total_steps);
  /// Steps in the configured epochs / max_steps for a corpus of `n` utterances.
  long planned_steps(std::size_t n) const;

  long steps_taken() const { return step_; }
  const FrozenEncoder& teacher() const { return teacher_; }
  const Adam& optimizer() const { return adam_; }
  const RetrainConfig& config() const { return cfg_; }
  const std::vector<std::pair<long, LossBreakdown>>& log() const { return log_; }

  CheckpointData checkpoint(const std::string& config_json) const;
  /// Restores parameters, teacher, optimizer state and step counter.
  void restore(const CheckpointData& c);

 private:
  const LabelSequence& labels_for(std::size_t index, const FeatureMatrix& f);
  const EncoderOutputs& teacher_for(std::size_t index, const FeatureMatrix& f);

  ParameterSet& params_;
  ModelConfig model_;
  const QuantizerState& quantizer_;
  RetrainConfig cfg_;
  FrozenEncoder teacher_;
  Adam adam_;
  long step_ = 0;
  std::vector<std::pair<long, LossBreakdown>> log_;
  std::map<std::size_t, LabelSequence> label_cache_;
  std::map<std::size_t, EncoderOutputs> teacher_cache_;
};

/// Tracks validation WER; stop() turns true after `patience` evaluations
/// without strict improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience);
  /// Returns true if `wer` is a new best.
  bool update(double wer);
  bool stop() const { return bad_ >= patience_; }
  int best_eval() const { return best_eval_; }  // 1-based, 0 before any update
  double best() const { return best_; }
  int evaluations() const { return evals_; }

 private:
  int patience_;
  int bad_ = 0;
  int evals_ = 0;
  int best_eval_ = 0;
  double best_ = 0.0;
};

using Validator = std::function<double(const ParameterSet&)>;

/// Supervised encoder + decoder training with teacher forcing and early
/// stopping on validation WER. No re-training losses are computed here.
class Finetuner {
 public:
  Finetuner(ParameterSet& params, const ModelConfig& model, const Tokenizer& tokenizer, FinetuneConfig cfg);

  double step(const std::vector<LabeledUtterance>& train);
  /// Trains until early stopping or max_epochs, then restores the best
  /// parameters. `validator` overrides the default greedy-decoding WER on `val`.
  RunRecord run(const std::vector<LabeledUtterance>& train, const std::vector<LabeledUtterance>& val,
                const Validator& validator = {});

  long steps_taken() const { return step_; }

 private:
  ParameterSet& params_;
  ModelConfig model_;
  const Tokenizer& tokenizer_;
  FinetuneConfig cfg_;
  Adam adam_;
  long step_ = 0;
};

/// Teacher-forced cross-entropy per target token (mean over the batch).
Var seq2seq_loss(Binder& w, const ModelConfig& model, const std::vector<const LabeledUtterance*>& batch);

std::vector<std::string> transcribe(const ParameterSet& params, const ModelConfig& model, const Tokenizer& tokenizer,
                                    const std::vector<LabeledUtterance>& set, int max_len);
/// Per-utterance scores in set order.
std::vector<WERResult> score(const std::vector<LabeledUtterance>& set, const std::vector<std::string>& hyps,
                             const NormalizationRules& rules = {});
WERResult pooled(const std::vector<WERResult>& per_utt);

struct AblationRow {
  AblationFlags flags;
  double test_wer = 0.0;
  WERResult result;
  std::vector<std::string> hypotheses;  // test-set order
  RunRecord retrain;
  RunRecord finetune;
  std::uint64_t final_hash = 0;
};

struct AblationInputs {
  const ParameterSet* initial = nullptr;  // encoder + head + decoder before re-training
  const QuantizerState* quantizer = nullptr;
  const std::vector<FeatureMatrix>* unlabeled = nullptr;
  const std::vector<LabeledUtterance>* train = nullptr;
  const std::vector<LabeledUtterance>* val = nullptr;
  const std::vector<LabeledUtterance>* test = nullptr;
  const Tokenizer* tokenizer = nullptr;
  long retrain_steps = 0;
};

/// Re-train then fine-tune once per variant, all from the same initial
/// parameters and seeds.
std::vector<AblationRow> run_ablation_grid(const ExperimentConfig& base, const std::vector<AblationFlags>& variants,
                                           const AblationInputs& inputs);

/// Checkpoint helpers shared by both stages and the CLI.
void pack_params(CheckpointData& c, const ParameterSet& params, const std::string& prefix = "");
ParameterSet unpack_params(const CheckpointData& c, const std::string& prefix = "");

}  // namespace beard
