#pragma once

#include "beard/autograd.hpp"
#include "beard/features.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace beard {

struct EncoderConfig {
  int n_mels = 80;
  int n_layers = 8;
  int d_model = 64;
  int n_heads = 4;
  int ff_mult = 4;
  int downsample_factor = 2;
  int max_frames = 3000;

  void validate() const;
  /// Encoder output frames for `input_frames` feature frames: ceil(T / factor).
  Eigen::Index output_frames(Eigen::Index input_frames) const;
};

struct DecoderConfig {
  int vocab_size = 0;  // includes PAD/BOS/EOS
  int n_layers = 2;
  int n_heads = 4;
  int ff_mult = 4;
  int max_len = 64;

  void validate() const;
};

/// 1-based transformer layer index whose residual stream feeds the projection
/// head and the layer-level distillation term.
struct LayerTap {
  int ell = 1;
};

/// tap: residual stream after block ell (before any output LayerNorm).
/// final: output of the last block after the encoder's output LayerNorm.
struct EncoderOutputs {
  Matrix tap;
  Matrix final;
};

/// Resolves parameter names to tape nodes, once per name and tape. A binder over
/// a mutable set creates trainable leaves; over a const set, constants.
class Binder {
 public:
  Binder(Tape& tape, ParameterSet& params) : tape_(tape), mutable_(&params), params_(&params) {}
  Binder(Tape& tape, const ParameterSet& params) : tape_(tape), params_(&params) {}

  Var operator()(const std::string& name);
  Tape& tape() { return tape_; }
  bool trainable() const { return mutable_ != nullptr; }

 private:
  Tape& tape_;
  ParameterSet* mutable_ = nullptr;
  const ParameterSet* params_;
  std::map<std::string, Var> cache_;
};

struct EncoderVars {
  Var tap;
  Var final;
};

/// Parameter names: enc.conv{1,2}.{w,b}; enc.block<i>.{ln1,ln2}.{g,b},
/// enc.block<i>.attn.{wq,bq,wk,bk,wv,bv,wo,bo}, enc.block<i>.ff.{w1,b1,w2,b2}
/// for i in 1..n; enc.ln_post.{g,b}.
void init_encoder(ParameterSet& params, const EncoderConfig& cfg, std::uint64_t seed);
/// head.w (d_model x V), head.b.
void init_projection_head(ParameterSet& params, const EncoderConfig& cfg, int codebook_size, std::uint64_t seed);
/// dec.embed, dec.block<i>.{ln1,ln2,ln3,attn,xattn,ff}.*, dec.ln_post.*, dec.out.{w,b}.
void init_decoder(ParameterSet& params, const EncoderConfig& enc, const DecoderConfig& cfg, std::uint64_t seed);

/// Conv frontend (k=3 conv + GELU, then k=3 conv with stride = downsample
/// factor + GELU), sinusoidal positions, n pre-norm transformer blocks.
/// Throws std::invalid_argument on shape errors and NumericError naming the
/// layer when an activation is non-finite.
EncoderVars encoder_forward(Binder& w, const EncoderConfig& cfg, Var features, LayerTap tap);
EncoderOutputs encoder_forward(const ParameterSet& params, const EncoderConfig& cfg, const FeatureMatrix& f,
                               LayerTap tap);
std::vector<EncoderOutputs> encoder_forward_batch(const ParameterSet& params, const EncoderConfig& cfg,
                                                  std::span<const FeatureMatrix> batch, LayerTap tap);

/// Row-standardized tap activations mapped to codebook logits.
Var projection_head(Binder& w, Var tap);

/// Causal next-token logits, one row per prefix position. `prefix` must start
/// with BOS and be at most max_len long.
Var decoder_forward(Binder& w, const DecoderConfig& cfg, Var encoder_final, const std::vector<int>& prefix);
Matrix decoder_forward(const ParameterSet& params, const DecoderConfig& cfg, const Matrix& encoder_final,
                       const std::vector<int>& prefix);

/// Appends the argmax token (lowest id on ties) until EOS or max_len tokens.
/// Returns the generated tokens without BOS/EOS.
std::vector<int> greedy_decode(const ParameterSet& params, const DecoderConfig& cfg, const Matrix& encoder_final,
                               int max_len);

/// Index of the largest entry, lowest index on ties.
int argmax_lowest(const RowVector& row);

/// Frozen copy of the encoder parameters (names starting with "enc.").
class FrozenEncoder {
 public:
  const ParameterSet& params() const { return params_; }
  std::uint64_t recorded_hash() const { return hash_; }
  bool intact() const { return params_.content_hash() == hash_; }

  friend FrozenEncoder snapshot_teacher(const ParameterSet& student);

 private:
  ParameterSet params_;
  std::uint64_t hash_ = 0;
};

FrozenEncoder snapshot_teacher(const ParameterSet& student);

Matrix sinusoidal_positions(Eigen::Index rows, int width);

}  // namespace beard
