#pragma once

#include "beard/losses.hpp"
#include "beard/masking.hpp"
#include "beard/model.hpp"
#include "beard/quantizer.hpp"
#include "beard/trainer.hpp"
#include "support.hpp"

namespace beard::test {

inline ModelConfig tiny_model_config(int layers = 2, int d_model = 8, int codebook = 8) {
  ModelConfig m;
  m.features.mel_bins = 4;
  m.encoder.n_mels = 4;
  m.encoder.n_layers = layers;
  m.encoder.d_model = d_model;
  m.encoder.n_heads = 2;
  m.encoder.ff_mult = 2;
  m.encoder.downsample_factor = 2;
  m.encoder.max_frames = 200;
  m.decoder.vocab_size = 6;
  m.decoder.n_layers = 1;
  m.decoder.n_heads = 2;
  m.decoder.ff_mult = 2;
  m.decoder.max_len = 12;
  m.codebook_size = codebook;
  m.code_dim = 4;
  return m;
}

/// One utterance worth of re-training inputs with a student that has already
/// drifted from its teacher, so every loss term has a non-trivial gradient.
struct BeardProblem {
  ModelConfig model;
  LayerTap tap;
  LossWeights weights;
  ParameterSet student;  // encoder + projection head
  FeatureMatrix corrupted;
  LabelSequence labels;
  FrameMask mask;
  EncoderOutputs teacher;
};

inline BeardProblem make_problem(const ModelConfig& model, int ell, std::uint64_t seed, int frames = 14) {
  BeardProblem p;
  p.model = model;
  p.tap.ell = ell;
  init_encoder(p.student, model.encoder, derive_seed(seed, 1));
  init_projection_head(p.student, model.encoder, model.codebook_size, derive_seed(seed, 2));
  FeatureMatrix clean;
  clean.frames = random_matrix(frames, model.encoder.n_mels, seed, 2.0);
  const auto teacher = snapshot_teacher(p.student);
  p.teacher = encoder_forward(teacher.params(), model.encoder, clean, p.tap);
  for (auto& prm : p.student) prm->value += random_matrix(prm->value.rows(), prm->value.cols(), seed + 99, 0.05);
  const auto q = build_quantizer(model.encoder.n_mels * model.encoder.downsample_factor, model.code_dim,
                                 model.codebook_size, seed + 3);
  p.labels = quantize(q, stack_frames(clean, model.encoder.downsample_factor));
  auto plan = sample_mask(static_cast<std::size_t>(frames), 4, 0.2, seed + 4, model.encoder.downsample_factor);
  // Guarantee both regions are present.
  if (plan.masked_outputs() == 0) {
    plan.input_mask[0] = true;
    plan.output_mask = project_mask(plan.input_mask, model.encoder.downsample_factor);
  }
  p.mask = plan.output_mask;
  p.corrupted = apply_mask(clean, plan, seed + 5);
  return p;
}

/// Total re-training objective on `params`, with individually switchable terms.
inline Var beard_objective(Tape& tape, ParameterSet& params, const BeardProblem& p, bool use_q = true,
                           bool use_ell = true, bool use_n = true) {
  Binder w(tape, params);
  const auto s = encoder_forward(w, p.model.encoder, tape.constant(p.corrupted.frames), p.tap);
  Var total = tape.constant(Matrix::Zero(1, 1));
  if (use_q) total = add(total, prediction_loss(projection_head(w, s.tap), p.labels, p.mask));
  if (use_ell) total = add(total, scale(distill_loss(s.tap, tape.constant(p.teacher.tap), p.mask), p.weights.lambda));
  if (use_n)
    total = add(total, scale(distill_loss(s.final, tape.constant(p.teacher.final), p.mask),
                             p.weights.lambda * p.weights.beta));
  return total;
}

/// Parameters that live strictly above block `ell`: later blocks and the output norm.
inline bool above_layer(const std::string& name, int ell, int n_layers) {
  if (name.starts_with("enc.ln_post.")) return true;
  for (int i = ell + 1; i <= n_layers; ++i)
    if (name.starts_with("enc.block" + std::to_string(i) + ".")) return true;
  return false;
}

}  // namespace beard::test
