#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "stdemand/common.hpp"
#include "stdemand/encodings.hpp"
#include "stdemand/parameters.hpp"

namespace stdemand {

enum class LayerOrder { mp_then_ffn, ffn_then_mp };

struct ForwardConfig {
  std::size_t window = 24;
  std::size_t horizon = 24;
  std::size_t mp_layers = 1;
  std::size_t ffn_layers = 3;
  std::size_t hidden = 64;
  std::size_t node_dim = 32;
  std::size_t graph_dim = 16;
  std::size_t diffusion_hops = 2;
  std::size_t encoding_dim = 64;  // D_llm
  std::size_t n_features = 1;     // d_x
  std::size_t n_covariates = 4;   // d_u
  int neighbor_order = 1;
  bool use_llm_graph = true;
  bool use_adjacency_graph = true;
  bool use_encoding = true;
  bool skip_message_passing = false;
  LayerOrder layer_order = LayerOrder::mp_then_ffn;
  int functional_top_k = 8;
  std::size_t dense_functional_limit = 64;  // above this node count the functional graph is top-k sparsified

  void validate() const;
  std::size_t temporal_input_dim() const { return window * n_features + node_dim + window * n_covariates; }
  std::size_t message_input_dim() const { return 2 * hidden + node_dim + 2; }
  std::size_t readout_input_dim() const { return hidden + horizon * n_covariates + node_dim; }
  bool functional_graph_active() const { return use_llm_graph && use_encoding && !skip_message_passing; }
  bool adjacency_active() const { return use_adjacency_graph && !skip_message_passing; }

  std::map<std::string, std::string> to_map() const;
  static ForwardConfig from_map(const std::map<std::string, std::string>& kv);
};

/// Glorot-uniform weights, zero biases, unit normalization scale.
template <typename Scalar>
Parameters<Scalar> init_parameters(const ForwardConfig& config, std::uint64_t seed);

/// Inputs of one window. Hidden nodes must already be zero-filled in `history`.
template <typename Scalar>
struct ModelInput {
  Mat<Scalar> history;          // N x (W * d_x), feature-major then step
  RowVec<Scalar> cov_history;   // W * d_u, step-major
  RowVec<Scalar> cov_future;    // H * d_u, step-major
  Mat<Scalar> encodings;        // N x D_llm

  std::size_t n_nodes() const { return static_cast<std::size_t>(history.rows()); }
};

/// Static per-graph data shared by all windows of a node set.
template <typename Scalar>
struct GraphContext {
  Mat<Scalar> adjacency;
  Mat<Scalar> diffusion;  // row-normalized adjacency
  std::vector<std::vector<int>> adjacency_neighbors;

  static GraphContext build(const MatD& adjacency, int neighbor_order);
  std::size_t n_nodes() const { return static_cast<std::size_t>(adjacency.rows()); }
};

/// Directed edges j -> i grouped by target i (CSR). Each edge carries an adjacency and a functional scalar.
template <typename Scalar>
struct EdgeList {
  std::vector<int> offsets;  // size N + 1
  std::vector<int> source;
  std::vector<Scalar> adjacency_weight;
  std::vector<Scalar> functional_weight;
  std::vector<char> functional;  // 1 if the functional graph contributed this edge

  std::size_t n_edges() const { return source.size(); }
  std::size_t degree(std::size_t i) const { return static_cast<std::size_t>(offsets[i + 1] - offsets[i]); }
};

/// Unites the adjacency neighborhoods with the (optional) functional neighborhoods.
/// `functional_neighbors` empty means the functional graph is disabled.
template <typename Scalar>
EdgeList<Scalar> unite_edges(const GraphContext<Scalar>* adjacency, const Mat<Scalar>* functional,
                             const std::vector<std::vector<int>>& functional_neighbors, std::size_t n_nodes);

// ---------------------------------------------------------------------------
// Layers. Weights follow the (out x in) convention unless stated otherwise.

template <typename Scalar>
struct TemporalCache {
  Mat<Scalar> input;
  Mat<Scalar> pre;
};

/// Concatenates [history_i | v_tilde_i | flatten(U)] per node.
template <typename Scalar>
Mat<Scalar> temporal_input(const Mat<Scalar>& history, const Mat<Scalar>& v_tilde, const RowVec<Scalar>& cov_history);

template <typename Scalar>
Mat<Scalar> temporal_encode(const Mat<Scalar>& input, const Mat<Scalar>& weight, const Mat<Scalar>& bias,
                            TemporalCache<Scalar>* cache);

template <typename Scalar>
struct MessagePassWeights {
  const Mat<Scalar>& w_m;  // D x (2D + D_node + 2)
  const Mat<Scalar>& b_m;  // 1 x D
  const Mat<Scalar>& w_e;  // 1 x D
  const Mat<Scalar>& b_e;  // 1 x 1
  const Mat<Scalar>& w_n;  // D x D
};

template <typename Scalar>
struct MessagePassGrads {
  Mat<Scalar>& w_m;
  Mat<Scalar>& b_m;
  Mat<Scalar>& w_e;
  Mat<Scalar>& b_e;
  Mat<Scalar>& w_n;
};

template <typename Scalar>
struct MessagePassCache {
  Mat<Scalar> h_in;
  Mat<Scalar> v_tilde;
  EdgeList<Scalar> edges;
  Mat<Scalar> z;  // E x D, message pre-activations
  std::vector<Scalar> gate;
  Mat<Scalar> node_pre;
};

/// Anisotropic message passing: m = ReLU(W_m [h_i | v_i | h_j | a_ij | f_ij] + b_m),
/// gate = sigmoid(W_e m + b_e), h_i' = ReLU(W_n h_i + mean_j gate * m).
template <typename Scalar>
Mat<Scalar> message_pass(const Mat<Scalar>& h, const Mat<Scalar>& v_tilde, const EdgeList<Scalar>& edges,
                         const MessagePassWeights<Scalar>& w, MessagePassCache<Scalar>* cache);

/// Returns dL/dh; accumulates weight grads, dL/dv_tilde and per-edge dL/df.
template <typename Scalar>
Mat<Scalar> message_pass_backward(const MessagePassCache<Scalar>& cache, const MessagePassWeights<Scalar>& w,
                                  const Mat<Scalar>& d_out, MessagePassGrads<Scalar> grads, Mat<Scalar>& d_v_tilde,
                                  std::vector<Scalar>& d_functional_weight);

template <typename Scalar>
struct DiffusionCache {
  Mat<Scalar> h_in;
  std::vector<Mat<Scalar>> powers;  // A~^k h for k = 1..K
  Mat<Scalar> pre;
};

/// h' = ReLU(sum_k A~^k h Theta1_k + h Theta2); thetas are D x D applied on the right.
template <typename Scalar>
Mat<Scalar> diffusion_conv(const Mat<Scalar>& h, const Mat<Scalar>& diffusion, const std::vector<const Mat<Scalar>*>& theta1,
                           const Mat<Scalar>& theta2, DiffusionCache<Scalar>* cache);

template <typename Scalar>
Mat<Scalar> diffusion_conv_backward(const DiffusionCache<Scalar>& cache, const Mat<Scalar>& diffusion,
                                    const std::vector<const Mat<Scalar>*>& theta1, const Mat<Scalar>& theta2,
                                    const Mat<Scalar>& d_out, const std::vector<Mat<Scalar>*>& d_theta1,
                                    Mat<Scalar>& d_theta2);

template <typename Scalar>
struct ResidualCache {
  Mat<Scalar> h_in;
  Mat<Scalar> pre;
};

/// h' = ReLU(W_r h + b_r) + h
template <typename Scalar>
Mat<Scalar> residual_block(const Mat<Scalar>& h, const Mat<Scalar>& weight, const Mat<Scalar>& bias,
                           ResidualCache<Scalar>* cache);

template <typename Scalar>
struct ReadoutCache {
  Mat<Scalar> input;
  Mat<Scalar> pre;
  Mat<Scalar> hidden;
};

/// Shared two-layer head over [h_i | flatten(U_future) | v_i]; output N x (H * d_x), feature-major.
template <typename Scalar>
Mat<Scalar> readout(const Mat<Scalar>& h, const RowVec<Scalar>& cov_future, const Mat<Scalar>& v, const Mat<Scalar>& w1,
                    const Mat<Scalar>& b1, const Mat<Scalar>& w2, const Mat<Scalar>& b2, ReadoutCache<Scalar>* cache);

// ---------------------------------------------------------------------------

template <typename Scalar>
struct FunctionalCache {
  Mat<Scalar> adapted_pre;  // v D^T
  Mat<Scalar> adapted;      // LeakyReLU(v D^T)
  Mat<Scalar> weights;      // N x N inner products
};

template <typename Scalar>
struct ForwardTape {
  Mat<Scalar> v;        // probe output
  NormalizedEmbedding<Scalar> norm;
  Mat<Scalar> v_tilde;
  TemporalCache<Scalar> temporal;

  struct MpStage {
    std::size_t layer;
    FunctionalCache<Scalar> functional;
    MessagePassCache<Scalar> cache;
  };
  struct DiffusionStage {
    std::size_t layer;
    DiffusionCache<Scalar> cache;
  };
  struct ResidualStage {
    std::size_t layer;
    ResidualCache<Scalar> cache;
  };
  std::vector<std::variant<MpStage, DiffusionStage, ResidualStage>> stages;

  Mat<Scalar> final_hidden;
  ReadoutCache<Scalar> readout;
};

template <typename Scalar>
struct ForwardOutput {
  Mat<Scalar> recon;  // N x (W * d_x)
  Mat<Scalar> pred;   // N x (H * d_x)
};

template <typename Scalar>
ForwardOutput<Scalar> forward(const Parameters<Scalar>& params, const ForwardConfig& config,
                              const ModelInput<Scalar>& input, const GraphContext<Scalar>& graph,
                              ForwardTape<Scalar>* tape = nullptr);

/// Exact reverse-mode gradients of a scalar loss given dL/drecon and dL/dpred. `grads` is overwritten.
template <typename Scalar>
void backward(const Parameters<Scalar>& params, const ForwardConfig& config, const ModelInput<Scalar>& input,
              const GraphContext<Scalar>& graph, const ForwardTape<Scalar>& tape, const Mat<Scalar>& d_recon,
              const Mat<Scalar>& d_pred, Parameters<Scalar>& grads);

}  // namespace stdemand
