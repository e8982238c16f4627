#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "stdemand/common.hpp"

namespace stdemand {

/// Precomputed per-region location encodings (one row per region).
struct EncodingTable {
  std::vector<std::string> region_ids;
  MatF values;  // N x D_llm

  std::size_t size() const { return region_ids.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(values.cols()); }
  void validate() const;

  /// Rows reordered to follow `ids`; throws if an id is missing.
  EncodingTable reorder(const std::vector<std::string>& ids) const;
  EncodingTable select(const std::vector<std::size_t>& rows) const;
};

void write_encodings(const EncodingTable& table, std::ostream& out);
EncodingTable read_encodings(std::istream& in);
void write_encodings(const EncodingTable& table, const std::filesystem::path& path);
EncodingTable read_encodings(const std::filesystem::path& path);

template <typename Derived>
auto leaky_relu(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return x.unaryExpr([](S v) { return v > S(0) ? v : S(kLeakySlope) * v; });
}

template <typename Derived>
auto leaky_relu_grad(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return x.unaryExpr([](S v) { return v > S(0) ? S(1) : S(kLeakySlope); });
}

/// v_phi = H * W_prob
template <typename Scalar>
Mat<Scalar> probe(const Mat<Scalar>& encodings, const Mat<Scalar>& w_prob) {
  if (encodings.cols() != w_prob.rows()) throw ConfigError("probe: encoding width does not match probe rows");
  return row_product(encodings, w_prob);
}

/// Closed-form ridge probe (H^T H + lambda I)^{-1} H^T E.
MatD ridge_init(const MatD& encodings, const MatD& target, double lambda);

inline constexpr double kNormEps = 1e-5;

/// Intermediates of LeakyReLU followed by per-column normalization over the node axis.
template <typename Scalar>
struct NormalizedEmbedding {
  Mat<Scalar> activated;   // LeakyReLU(v)
  Mat<Scalar> normalized;  // before scale/shift
  RowVec<Scalar> inv_std;
  Mat<Scalar> output;      // normalized * gamma + beta
};

/// Statistics are recomputed on every call; there are no running averages.
template <typename Scalar>
NormalizedEmbedding<Scalar> process_embedding(const Mat<Scalar>& v, const RowVec<Scalar>& gamma,
                                              const RowVec<Scalar>& beta) {
  if (v.rows() < 2) throw ConfigError("embedding normalization needs at least two nodes");
  if (gamma.size() != v.cols() || beta.size() != v.cols()) throw ConfigError("normalization parameter width mismatch");
  NormalizedEmbedding<Scalar> r;
  r.activated = leaky_relu(v);
  const Scalar n = static_cast<Scalar>(v.rows());
  const RowVec<Scalar> mean = r.activated.colwise().sum() / n;
  Mat<Scalar> centered = r.activated.rowwise() - mean;
  const RowVec<Scalar> var = centered.cwiseAbs2().colwise().sum() / n;
  r.inv_std = (var.array() + Scalar(kNormEps)).rsqrt().matrix();
  r.normalized = centered.array().rowwise() * r.inv_std.array();
  r.output = (r.normalized.array().rowwise() * gamma.array()).rowwise() + beta.array();
  return r;
}

/// Gradients of process_embedding. Returns dL/dv and accumulates into d_gamma, d_beta.
template <typename Scalar>
Mat<Scalar> process_embedding_backward(const Mat<Scalar>& v, const NormalizedEmbedding<Scalar>& fwd,
                                       const RowVec<Scalar>& gamma, const Mat<Scalar>& d_out, RowVec<Scalar>& d_gamma,
                                       RowVec<Scalar>& d_beta) {
  d_gamma += (d_out.array() * fwd.normalized.array()).colwise().sum().matrix();
  d_beta += d_out.colwise().sum();
  const Scalar n = static_cast<Scalar>(v.rows());
  const Mat<Scalar> dz = d_out.array().rowwise() * gamma.array();
  const RowVec<Scalar> mean_dz = dz.colwise().sum() / n;
  const RowVec<Scalar> mean_dz_z = (dz.array() * fwd.normalized.array()).colwise().sum().matrix() / n;
  Mat<Scalar> da = dz.rowwise() - mean_dz;
  da.array() -= fwd.normalized.array().rowwise() * mean_dz_z.array();
  da.array().rowwise() *= fwd.inv_std.array();
  return da.cwiseProduct(leaky_relu_grad(v));
}

/// Row-wise LeakyReLU(D v_i); `adapter` is D_graph x D_node.
template <typename Scalar>
Mat<Scalar> adapt(const Mat<Scalar>& v, const Mat<Scalar>& adapter) {
  if (v.cols() != adapter.cols()) throw ConfigError("adapter width does not match the node embedding");
  return leaky_relu(row_product(v, adapter.transpose()));
}

}  // namespace stdemand
