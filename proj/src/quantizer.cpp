#include "beard/quantizer.hpp"

#include "beard/binio.hpp"
#include "beard/rng.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace beard {

RowVector normalize_vector(std::span<const double> v) {
  if (v.size() < 2) throw std::invalid_argument("normalize_vector: length must be >= 2");
  const auto n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double denom = std::max(std::sqrt(var / n), kNormStdFloor);
  RowVector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = (v[i] - mean) / denom;
  return out;
}

RowVector normalize_vector(const RowVector& v) {
  return normalize_vector(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

QuantizerState::QuantizerState(int d_in, int d_code, int codebook_size, std::uint64_t seed) : seed_(seed) {
  if (d_in < 1 || d_code < 1 || codebook_size < 1)
    throw std::invalid_argument("build_quantizer: all dimensions must be >= 1");
  Rng rng(seed);
  projection_.resize(d_in, d_code);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (int i = 0; i < d_in; ++i)
    for (int j = 0; j < d_code; ++j) projection_(i, j) = static_cast<float>(rng.normal() * scale);
  codebook_.resize(codebook_size, d_code);
  for (int r = 0; r < codebook_size; ++r) {
    RowVector row(d_code);
    for (int j = 0; j < d_code; ++j) row(j) = rng.normal();
    row /= row.norm();
    for (int j = 0; j < d_code; ++j) codebook_(r, j) = static_cast<float>(row(j));
  }
  validate();
}

QuantizerState::QuantizerState(Matrix projection, Matrix codebook, std::uint64_t seed)
    : projection_(std::move(projection)), codebook_(std::move(codebook)), seed_(seed) {
  if (projection_.rows() < 1 || projection_.cols() < 1 || codebook_.rows() < 1)
    throw std::invalid_argument("QuantizerState: all dimensions must be >= 1");
  if (codebook_.cols() != projection_.cols())
    throw std::invalid_argument("QuantizerState: codebook width must equal projection width");
  validate();
}

void QuantizerState::validate() const {
  if (!projection_.allFinite() || !codebook_.allFinite())
    throw std::invalid_argument("QuantizerState: non-finite entries");
  // Sorting by first coordinate keeps the duplicate scan near-linear for random codebooks.
  std::multimap<double, Eigen::Index> by_first;
  for (Eigen::Index r = 0; r < codebook_.rows(); ++r) by_first.emplace(codebook_(r, 0), r);
  for (auto it = by_first.begin(); it != by_first.end(); ++it) {
    for (auto jt = std::next(it); jt != by_first.end() && jt->first - it->first <= 1e-9; ++jt) {
      if ((codebook_.row(it->second) - codebook_.row(jt->second)).cwiseAbs().maxCoeff() <= 1e-9)
        throw std::invalid_argument("QuantizerState: duplicate codebook rows " + std::to_string(it->second) +
                                    " and " + std::to_string(jt->second));
    }
  }
}

std::uint64_t QuantizerState::content_hash() const {
  Fnv1a h;
  h.update(projection_);
  h.update(codebook_);
  h.update(&seed_, sizeof(seed_));
  return h.digest();
}

std::vector<char> QuantizerState::serialize() const {
  std::vector<char> out;
  binio::put_bytes(out, "BRQ1");
  binio::put_u32(out, static_cast<std::uint32_t>(d_in()));
  binio::put_u32(out, static_cast<std::uint32_t>(d_code()));
  binio::put_u32(out, static_cast<std::uint32_t>(codebook_size()));
  binio::put_u64(out, seed_);
  for (Eigen::Index i = 0; i < projection_.size(); ++i) binio::put_f32(out, static_cast<float>(projection_.data()[i]));
  for (Eigen::Index i = 0; i < codebook_.size(); ++i) binio::put_f32(out, static_cast<float>(codebook_.data()[i]));
  return out;
}

QuantizerState QuantizerState::deserialize(const std::vector<char>& bytes) {
  binio::Reader r(bytes);
  if (r.bytes(4) != "BRQ1") throw DataError("quantizer blob: bad magic");
  const auto d_in = r.u32(), d_code = r.u32(), v = r.u32();
  const auto seed = r.u64();
  Matrix projection(d_in, d_code), codebook(v, d_code);
  for (Eigen::Index i = 0; i < projection.size(); ++i) projection.data()[i] = r.f32();
  for (Eigen::Index i = 0; i < codebook.size(); ++i) codebook.data()[i] = r.f32();
  if (!r.done()) throw DataError("quantizer blob: trailing bytes");
  return QuantizerState(std::move(projection), std::move(codebook), seed);
}

void QuantizerState::save(const std::filesystem::path& path) const { binio::write_file(path.string(), serialize()); }

QuantizerState QuantizerState::load(const std::filesystem::path& path) {
  return deserialize(binio::read_file(path.string()));
}

QuantizerState build_quantizer(int d_in, int d_code, int codebook_size, std::uint64_t seed) {
  return QuantizerState(d_in, d_code, codebook_size, seed);
}

LabelSequence quantize(const QuantizerState& q, const FeatureMatrix& f, bool normalize) {
  if (f.mel_bins() != q.d_in())
    throw std::invalid_argument("quantize: feature width " + std::to_string(f.mel_bins()) +
                                " does not match quantizer input " + std::to_string(q.d_in()));
  const Matrix& cb = q.codebook();
  LabelSequence labels(static_cast<std::size_t>(f.num_frames()));
  for (Eigen::Index t = 0; t < f.num_frames(); ++t) {
    const RowVector x = normalize ? normalize_vector(RowVector(f.frames.row(t))) : RowVector(f.frames.row(t));
    const RowVector z = x * q.projection();
    int best = 0;
    double best_d = (cb.row(0) - z).squaredNorm();
    for (Eigen::Index j = 1; j < cb.rows(); ++j) {
      const double d = (cb.row(j) - z).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(j);
      }
    }
    labels[static_cast<std::size_t>(t)] = best;
  }
  return labels;
}

UtilizationStats codebook_utilization(const LabelSequence& labels, int codebook_size) {
  if (labels.empty()) throw std::invalid_argument("codebook_utilization: empty label sequence");
  if (codebook_size < 1) throw std::invalid_argument("codebook_utilization: codebook size must be >= 1");
  std::vector<std::size_t> counts(static_cast<std::size_t>(codebook_size), 0);
  for (int l : labels) {
    if (l < 0 || l >= codebook_size) throw std::invalid_argument("codebook_utilization: label out of range");
    ++counts[static_cast<std::size_t>(l)];
  }
  UtilizationStats s;
  std::size_t used = 0;
  const auto n = static_cast<double>(labels.size());
  for (auto c : counts) {
    if (c == 0) continue;
    ++used;
    const double p = static_cast<double>(c) / n;
    s.entropy_bits -= p * std::log2(p);
  }
  s.fraction_used = static_cast<double>(used) / codebook_size;
  return s;
}

}  // namespace beard
