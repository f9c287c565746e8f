#include "beard/model.hpp"

#include "beard/data.hpp"
#include "beard/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace beard {

void EncoderConfig::validate() const {
  if (n_mels < 1) throw std::invalid_argument("EncoderConfig: n_mels must be >= 1");
  if (n_layers < 2) throw std::invalid_argument("EncoderConfig: n_layers must be >= 2");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    throw std::invalid_argument("EncoderConfig: d_model must be a positive multiple of n_heads");
  if (ff_mult < 1) throw std::invalid_argument("EncoderConfig: ff_mult must be >= 1");
  if (downsample_factor < 1) throw std::invalid_argument("EncoderConfig: downsample_factor must be >= 1");
  if (max_frames < 1) throw std::invalid_argument("EncoderConfig: max_frames must be >= 1");
}

Eigen::Index EncoderConfig::output_frames(Eigen::Index input_frames) const {
  return (input_frames + downsample_factor - 1) / downsample_factor;
}

void DecoderConfig::validate() const {
  if (vocab_size < 4) throw std::invalid_argument("DecoderConfig: vocab must hold PAD/BOS/EOS and one word");
  if (n_layers < 1 || n_heads < 1 || ff_mult < 1 || max_len < 2)
    throw std::invalid_argument("DecoderConfig: invalid dimensions");
}

Var Binder::operator()(const std::string& name) {
  if (auto it = cache_.find(name); it != cache_.end()) return it->second;
  Var v = mutable_ ? tape_.param(mutable_->at(name)) : tape_.constant(params_->at(name).value);
  cache_.emplace(name, v);
  return v;
}

Matrix sinusoidal_positions(Eigen::Index rows, int width) {
  Matrix pe(rows, width);
  for (Eigen::Index p = 0; p < rows; ++p)
    for (int i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / width);
      pe(p, i) = (i % 2 == 0) ? std::sin(static_cast<double>(p) * rate) : std::cos(static_cast<double>(p) * rate);
    }
  return pe;
}

namespace {

Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double std) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng.normal();
  return m;
}

void add_linear(ParameterSet& ps, Rng& rng, const std::string& w, const std::string& b, Eigen::Index in, Eigen::Index out) {
  ps.add(w, gaussian(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in))));
  ps.add(b, Matrix::Zero(1, out));
}

void add_norm(ParameterSet& ps, const std::string& prefix, Eigen::Index d) {
  ps.add(prefix + ".g", Matrix::Ones(1, d));
  ps.add(prefix + ".b", Matrix::Zero(1, d));
}

void add_attention(ParameterSet& ps, Rng& rng, const std::string& prefix, Eigen::Index d) {
  for (const char* p : {"q", "k", "v", "o"})
    add_linear(ps, rng, prefix + ".w" + p, prefix + ".b" + p, d, d);
}

void add_ff(ParameterSet& ps, Rng& rng, const std::string& prefix, Eigen::Index d, int mult) {
  add_linear(ps, rng, prefix + ".w1", prefix + ".b1", d, d * mult);
  add_linear(ps, rng, prefix + ".w2", prefix + ".b2", d * mult, d);
}

Var linear(Binder& w, Var x, const std::string& prefix, const char* wn, const char* bn) {
  return add_row(matmul(x, w(prefix + wn)), w(prefix + bn));
}

Var norm(Binder& w, Var x, const std::string& prefix) {
  return add_row(mul_row(layer_norm_rows(x), w(prefix + ".g")), w(prefix + ".b"));
}

Var attention(Binder& w, const std::string& prefix, Var xq, Var xkv, int n_heads, const Matrix* additive_mask) {
  const Var q = linear(w, xq, prefix, ".wq", ".bq");
  const Var k = linear(w, xkv, prefix, ".wk", ".bk");
  const Var v = linear(w, xkv, prefix, ".wv", ".bv");
  const Eigen::Index dh = q.cols() / n_heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  for (int h = 0; h < n_heads; ++h) {
    Var s = scale(matmul_nt(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh)), inv);
    if (additive_mask) s = add_const(s, *additive_mask);
    heads.push_back(matmul(softmax_rows(s), slice_cols(v, h * dh, dh)));
  }
  Var o = heads.size() == 1 ? heads.front() : concat_cols(heads);
  return linear(w, o, prefix, ".wo", ".bo");
}

Var feed_forward(Binder& w, const std::string& prefix, Var x) {
  return linear(w, gelu(linear(w, x, prefix, ".w1", ".b1")), prefix, ".w2", ".b2");
}

void check_finite(Var v, const std::string& where) {
  if (!v.value().allFinite()) throw NumericError("non-finite activation at " + where);
}

std::string block_name(const char* stack, int i) { return std::string(stack) + ".block" + std::to_string(i); }

}  // namespace

void init_encoder(ParameterSet& ps, const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const Eigen::Index d = cfg.d_model;
  add_linear(ps, rng, "enc.conv1.w", "enc.conv1.b", 3 * cfg.n_mels, d);
  add_linear(ps, rng, "enc.conv2.w", "enc.conv2.b", 3 * d, d);
  for (int i = 1; i <= cfg.n_layers; ++i) {
    const auto p = block_name("enc", i);
    add_norm(ps, p + ".ln1", d);
    add_attention(ps, rng, p + ".attn", d);
    add_norm(ps, p + ".ln2", d);
    add_ff(ps, rng, p + ".ff", d, cfg.ff_mult);
  }
  add_norm(ps, "enc.ln_post", d);
}

void init_projection_head(ParameterSet& ps, const EncoderConfig& cfg, int codebook_size, std::uint64_t seed) {
  if (codebook_size < 1) throw std::invalid_argument("projection head: codebook size must be >= 1");
  Rng rng(seed);
  add_linear(ps, rng, "head.w", "head.b", cfg.d_model, codebook_size);
}

void init_decoder(ParameterSet& ps, const EncoderConfig& enc, const DecoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (enc.d_model % cfg.n_heads != 0) throw std::invalid_argument("DecoderConfig: d_model must be a multiple of n_heads");
  Rng rng(seed);
  const Eigen::Index d = enc.d_model;
  ps.add("dec.embed", Matrix(gaussian(rng, cfg.vocab_size, d, 1.0)));
  for (int i = 1; i <= cfg.n_layers; ++i) {
    const auto p = block_name("dec", i);
    add_norm(ps, p + ".ln1", d);
    add_attention(ps, rng, p + ".attn", d);
    add_norm(ps, p + ".ln2", d);
    add_attention(ps, rng, p + ".xattn", d);
    add_norm(ps, p + ".ln3", d);
    add_ff(ps, rng, p + ".ff", d, cfg.ff_mult);
  }
  add_norm(ps, "dec.ln_post", d);
  add_linear(ps, rng, "dec.out.w", "dec.out.b", d, cfg.vocab_size);
}

EncoderVars encoder_forward(Binder& w, const EncoderConfig& cfg, Var features, LayerTap tap) {
  if (features.cols() != cfg.n_mels)
    throw std::invalid_argument("encoder_forward: feature width " + std::to_string(features.cols()) +
                                " != n_mels " + std::to_string(cfg.n_mels));
  if (features.rows() < 1 || features.rows() > cfg.max_frames)
    throw std::invalid_argument("encoder_forward: frame count " + std::to_string(features.rows()) +
                                " outside [1, " + std::to_string(cfg.max_frames) + "]");
  if (tap.ell < 1 || tap.ell > cfg.n_layers)
    throw std::invalid_argument("encoder_forward: tap layer " + std::to_string(tap.ell) + " outside [1, " +
                                std::to_string(cfg.n_layers) + "]");
  Var x = gelu(add_row(matmul(im2col(features, 3, 1, 1), w("enc.conv1.w")), w("enc.conv1.b")));
  x = gelu(add_row(matmul(im2col(x, 3, cfg.downsample_factor, 1), w("enc.conv2.w")), w("enc.conv2.b")));
  x = add_const(x, sinusoidal_positions(x.rows(), cfg.d_model));
  check_finite(x, "conv frontend");
  EncoderVars out;
  for (int i = 1; i <= cfg.n_layers; ++i) {
    const auto p = block_name("enc", i);
    const Var h = norm(w, x, p + ".ln1");
    x = add(x, attention(w, p + ".attn", h, h, cfg.n_heads, nullptr));
    x = add(x, feed_forward(w, p + ".ff", norm(w, x, p + ".ln2")));
    check_finite(x, "encoder layer " + std::to_string(i));
    if (i == tap.ell) out.tap = x;
  }
  out.final = norm(w, x, "enc.ln_post");
  check_finite(out.final, "encoder output norm");
  return out;
}

EncoderOutputs encoder_forward(const ParameterSet& params, const EncoderConfig& cfg, const FeatureMatrix& f,
                               LayerTap tap) {
  Tape tape;
  Binder w(tape, params);
  const auto vars = encoder_forward(w, cfg, tape.constant(f.frames), tap);
  return {vars.tap.value(), vars.final.value()};
}

std::vector<EncoderOutputs> encoder_forward_batch(const ParameterSet& params, const EncoderConfig& cfg,
                                                  std::span<const FeatureMatrix> batch, LayerTap tap) {
  std::vector<EncoderOutputs> out;
  out.reserve(batch.size());
  for (const auto& f : batch) out.push_back(encoder_forward(params, cfg, f, tap));
  return out;
}

Var projection_head(Binder& w, Var tap) {
  return add_row(matmul(standardize_rows(tap), w("head.w")), w("head.b"));
}

Var decoder_forward(Binder& w, const DecoderConfig& cfg, Var encoder_final, const std::vector<int>& prefix) {
  if (prefix.empty() || prefix.front() != Tokenizer::kBos)
    throw std::invalid_argument("decoder_forward: prefix must start with BOS");
  if (static_cast<int>(prefix.size()) > cfg.max_len)
    throw std::invalid_argument("decoder_forward: prefix length " + std::to_string(prefix.size()) +
                                " exceeds max_len " + std::to_string(cfg.max_len));
  const Var embed = w("dec.embed");
  const auto L = static_cast<Eigen::Index>(prefix.size());
  Var x = add_const(gather_rows(embed, prefix), sinusoidal_positions(L, static_cast<int>(embed.cols())));
  Matrix causal = Matrix::Zero(L, L);
  for (Eigen::Index i = 0; i < L; ++i)
    for (Eigen::Index j = i + 1; j < L; ++j) causal(i, j) = -1e30;
  for (int i = 1; i <= cfg.n_layers; ++i) {
    const auto p = block_name("dec", i);
    const Var h = norm(w, x, p + ".ln1");
    x = add(x, attention(w, p + ".attn", h, h, cfg.n_heads, &causal));
    x = add(x, attention(w, p + ".xattn", norm(w, x, p + ".ln2"), encoder_final, cfg.n_heads, nullptr));
    x = add(x, feed_forward(w, p + ".ff", norm(w, x, p + ".ln3")));
  }
  return linear(w, norm(w, x, "dec.ln_post"), "dec.out", ".w", ".b");
}

Matrix decoder_forward(const ParameterSet& params, const DecoderConfig& cfg, const Matrix& encoder_final,
                       const std::vector<int>& prefix) {
  Tape tape;
  Binder w(tape, params);
  return decoder_forward(w, cfg, tape.constant(encoder_final), prefix).value();
}

int argmax_lowest(const RowVector& row) {
  int best = 0;
  for (Eigen::Index i = 1; i < row.size(); ++i)
    if (row(i) > row(best)) best = static_cast<int>(i);
  return best;
}

std::vector<int> greedy_decode(const ParameterSet& params, const DecoderConfig& cfg, const Matrix& encoder_final,
                               int max_len) {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  std::vector<int> prefix{Tokenizer::kBos};
  std::vector<int> out;
  while (static_cast<int>(out.size()) < max_len && static_cast<int>(prefix.size()) <= cfg.max_len) {
    const Matrix logits = decoder_forward(params, cfg, encoder_final, prefix);
    const int next = argmax_lowest(logits.row(logits.rows() - 1));
    if (next == Tokenizer::kEos) break;
    out.push_back(next);
    prefix.push_back(next);
  }
  return out;
}

FrozenEncoder snapshot_teacher(const ParameterSet& student) {
  FrozenEncoder t;
  for (const auto& p : student)
    if (p->name.starts_with("enc.")) t.params_.add(p->name, p->value);
  if (t.params_.size() == 0) throw std::invalid_argument("snapshot_teacher: student has no encoder parameters");
  t.hash_ = t.params_.content_hash();
  return t;
}

}  // namespace beard
