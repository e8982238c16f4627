#include "stdemand/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <random>

#include <Eigen/SparseCore>

#include "stdemand/graphs.hpp"

namespace stdemand {

namespace {

template <typename Derived>
auto relu(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return x.cwiseMax(S(0));
}

template <typename Derived>
auto relu_mask(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return x.unaryExpr([](S v) { return v > S(0) ? S(1) : S(0); });
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

std::string mp_name(std::size_t layer, const char* what) { return "mp" + std::to_string(layer) + "." + what; }

std::string theta_name(std::size_t layer, std::size_t hop) {
  return "mp" + std::to_string(layer) + ".theta1_" + std::to_string(hop);
}

std::string ffn_name(std::size_t layer, const char* what) { return "ffn" + std::to_string(layer) + "." + what; }

bool parse_bool(const std::string& s) {
  if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "off" || s == "no") return false;
  throw ConfigError("not a boolean: " + s);
}

}  // namespace

void ForwardConfig::validate() const {
  if (window < 1 || horizon < 1 || ffn_layers < 1 || hidden < 1 || diffusion_hops < 1) {
    throw ConfigError("window, horizon, ffn_layers, hidden and diffusion_hops must be >= 1");
  }
  if (mp_layers < 1) throw ConfigError("mp_layers must be >= 1");
  if (node_dim < 1 || graph_dim < 1 || encoding_dim < 1 || n_features < 1) {
    throw ConfigError("node_dim, graph_dim, encoding_dim and n_features must be >= 1");
  }
  if (neighbor_order < 1) throw ConfigError("neighbor_order must be >= 1");
  if (functional_top_k < 1) throw ConfigError("functional_top_k must be >= 1");
  if (!skip_message_passing && !adjacency_active() && !functional_graph_active()) {
    throw ConfigError("message passing needs the adjacency graph or the functional graph");
  }
}

std::map<std::string, std::string> ForwardConfig::to_map() const {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"window", std::to_string(window)},
      {"horizon", std::to_string(horizon)},
      {"mp_layers", std::to_string(mp_layers)},
      {"ffn_layers", std::to_string(ffn_layers)},
      {"hidden", std::to_string(hidden)},
      {"node_dim", std::to_string(node_dim)},
      {"graph_dim", std::to_string(graph_dim)},
      {"diffusion_hops", std::to_string(diffusion_hops)},
      {"encoding_dim", std::to_string(encoding_dim)},
      {"n_features", std::to_string(n_features)},
      {"n_covariates", std::to_string(n_covariates)},
      {"neighbor_order", std::to_string(neighbor_order)},
      {"use_llm_graph", b(use_llm_graph)},
      {"use_adjacency_graph", b(use_adjacency_graph)},
      {"use_encoding", b(use_encoding)},
      {"skip_message_passing", b(skip_message_passing)},
      {"layer_order", layer_order == LayerOrder::mp_then_ffn ? "mp-then-ffn" : "ffn-then-mp"},
      {"functional_top_k", std::to_string(functional_top_k)},
      {"dense_functional_limit", std::to_string(dense_functional_limit)},
  };
}

ForwardConfig ForwardConfig::from_map(const std::map<std::string, std::string>& kv) {
  ForwardConfig c;
  auto parse = [&](const char* key, auto& dst) {
    if (auto it = kv.find(key); it != kv.end()) {
      const auto& text = it->second;
      const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), dst);
      if (ec != std::errc() || end != text.data() + text.size()) throw ConfigError("bad value for " + std::string(key));
    }
  };
  auto get_size = [&](const char* key, std::size_t& dst) { parse(key, dst); };
  auto get_int = [&](const char* key, int& dst) { parse(key, dst); };
  auto get_bool = [&](const char* key, bool& dst) {
    if (auto it = kv.find(key); it != kv.end()) dst = parse_bool(it->second);
  };
  get_size("window", c.window);
  get_size("horizon", c.horizon);
  get_size("mp_layers", c.mp_layers);
  get_size("ffn_layers", c.ffn_layers);
  get_size("hidden", c.hidden);
  get_size("node_dim", c.node_dim);
  get_size("graph_dim", c.graph_dim);
  get_size("diffusion_hops", c.diffusion_hops);
  get_size("encoding_dim", c.encoding_dim);
  get_size("n_features", c.n_features);
  get_size("n_covariates", c.n_covariates);
  get_int("neighbor_order", c.neighbor_order);
  get_bool("use_llm_graph", c.use_llm_graph);
  get_bool("use_adjacency_graph", c.use_adjacency_graph);
  get_bool("use_encoding", c.use_encoding);
  get_bool("skip_message_passing", c.skip_message_passing);
  get_int("functional_top_k", c.functional_top_k);
  get_size("dense_functional_limit", c.dense_functional_limit);
  if (auto it = kv.find("layer_order"); it != kv.end()) {
    if (it->second == "mp-then-ffn") {
      c.layer_order = LayerOrder::mp_then_ffn;
    } else if (it->second == "ffn-then-mp") {
      c.layer_order = LayerOrder::ffn_then_mp;
    } else {
      throw ConfigError("layer_order must be mp-then-ffn or ffn-then-mp");
    }
  }
  return c;
}

template <typename Scalar>
Parameters<Scalar> init_parameters(const ForwardConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  Parameters<Scalar> p;
  const auto d = static_cast<Eigen::Index>(config.hidden);
  const auto dn = static_cast<Eigen::Index>(config.node_dim);

  auto glorot = [&](Mat<Scalar>& m, double fan_in, double fan_out) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-a, a);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<Scalar>(u(rng));
  };
  auto weight = [&](const std::string& name, Eigen::Index out, Eigen::Index in) {
    glorot(p.add(name, out, in), static_cast<double>(in), static_cast<double>(out));
  };

  {
    auto& w = p.add("probe.W", static_cast<Eigen::Index>(config.encoding_dim), dn);
    glorot(w, static_cast<double>(config.encoding_dim), static_cast<double>(config.node_dim));
  }
  p.add("norm.gamma", 1, dn, 1).setOnes();
  p.add("norm.beta", 1, dn, 1);

  weight("temp.W", d, static_cast<Eigen::Index>(config.temporal_input_dim()));
  p.add("temp.b", 1, d, 1);

  for (std::size_t l = 0; l < config.mp_layers; ++l) {
    weight(mp_name(l, "adapter"), static_cast<Eigen::Index>(config.graph_dim), dn);
    weight(mp_name(l, "W_m"), d, static_cast<Eigen::Index>(config.message_input_dim()));
    p.add(mp_name(l, "b_m"), 1, d, 1);
    weight(mp_name(l, "W_e"), 1, d);
    p.add(mp_name(l, "b_e"), 1, 1, 1);
    weight(mp_name(l, "W_n"), d, d);
    for (std::size_t k = 1; k <= config.diffusion_hops; ++k) weight(theta_name(l, k), d, d);
    weight(mp_name(l, "theta2"), d, d);
  }
  for (std::size_t r = 0; r < config.ffn_layers; ++r) {
    weight(ffn_name(r, "W"), d, d);
    p.add(ffn_name(r, "b"), 1, d, 1);
  }
  weight("out.W1", d, static_cast<Eigen::Index>(config.readout_input_dim()));
  p.add("out.b1", 1, d, 1);
  weight("out.W2", static_cast<Eigen::Index>(config.horizon * config.n_features), d);
  p.add("out.b2", 1, static_cast<Eigen::Index>(config.horizon * config.n_features), 1);
  weight("recon.W", static_cast<Eigen::Index>(config.window * config.n_features), d);
  p.add("recon.b", 1, static_cast<Eigen::Index>(config.window * config.n_features), 1);
  return p;
}

template <typename Scalar>
GraphContext<Scalar> GraphContext<Scalar>::build(const MatD& adjacency, int neighbor_order) {
  GraphContext ctx;
  ctx.adjacency = adjacency.cast<Scalar>();
  ctx.diffusion = row_normalize(ctx.adjacency);
  ctx.adjacency_neighbors = k_hop_neighbors(adjacency, neighbor_order);
  return ctx;
}

template <typename Scalar>
EdgeList<Scalar> unite_edges(const GraphContext<Scalar>* adjacency, const Mat<Scalar>* functional,
                             const std::vector<std::vector<int>>& functional_neighbors, std::size_t n_nodes) {
  EdgeList<Scalar> e;
  e.offsets.assign(n_nodes + 1, 0);
  static const std::vector<int> kNone;
  for (std::size_t i = 0; i < n_nodes; ++i) {
    const auto& adj = adjacency ? adjacency->adjacency_neighbors[i] : kNone;
    const auto& fun = functional ? functional_neighbors[i] : kNone;
    std::size_t a = 0;
    std::size_t f = 0;
    while (a < adj.size() || f < fun.size()) {
      int j;
      const bool take_a = a < adj.size() && (f >= fun.size() || adj[a] <= fun[f]);
      const bool take_f = f < fun.size() && (a >= adj.size() || fun[f] <= adj[a]);
      j = take_a ? adj[a] : fun[f];
      e.source.push_back(j);
      e.adjacency_weight.push_back(take_a ? adjacency->adjacency(static_cast<Eigen::Index>(i), j) : Scalar(0));
      e.functional_weight.push_back(take_f ? (*functional)(static_cast<Eigen::Index>(i), j) : Scalar(0));
      e.functional.push_back(take_f ? 1 : 0);
      if (take_a) ++a;
      if (take_f) ++f;
    }
    e.offsets[i + 1] = static_cast<int>(e.source.size());
  }
  return e;
}

template <typename Scalar>
Mat<Scalar> temporal_input(const Mat<Scalar>& history, const Mat<Scalar>& v_tilde, const RowVec<Scalar>& cov_history) {
  if (history.rows() != v_tilde.rows()) throw ConfigError("temporal input: node count mismatch");
  const auto n = history.rows();
  Mat<Scalar> x(n, history.cols() + v_tilde.cols() + cov_history.size());
  x.leftCols(history.cols()) = history;
  x.middleCols(history.cols(), v_tilde.cols()) = v_tilde;
  x.rightCols(cov_history.size()) = cov_history.replicate(n, 1);
  return x;
}

template <typename Scalar>
Mat<Scalar> temporal_encode(const Mat<Scalar>& input, const Mat<Scalar>& weight, const Mat<Scalar>& bias,
                            TemporalCache<Scalar>* cache) {
  if (input.cols() != weight.cols()) throw ConfigError("temporal encoder: input width mismatch");
  Mat<Scalar> pre = row_product(input, weight.transpose()).rowwise() + bias.row(0);
  Mat<Scalar> out = relu(pre);
  if (cache) {
    cache->input = input;
    cache->pre = std::move(pre);
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> message_pass(const Mat<Scalar>& h, const Mat<Scalar>& v_tilde, const EdgeList<Scalar>& edges,
                         const MessagePassWeights<Scalar>& w, MessagePassCache<Scalar>* cache) {
  const auto n = h.rows();
  const auto d = h.cols();
  const auto dn = v_tilde.cols();
  if (w.w_m.cols() != 2 * d + dn + 2 || w.w_m.rows() != d) throw ConfigError("message weight shape mismatch");
  if (static_cast<Eigen::Index>(edges.offsets.size()) != n + 1) throw ConfigError("edge list node count mismatch");

  const Mat<Scalar> p =
      ((row_product(h, w.w_m.leftCols(d).transpose()) + row_product(v_tilde, w.w_m.middleCols(d, dn).transpose())).rowwise() +
       w.b_m.row(0))
          .eval();
  const Mat<Scalar> q = row_product(h, w.w_m.middleCols(d + dn, d).transpose());
  const RowVec<Scalar> w_a = w.w_m.col(2 * d + dn).transpose();
  const RowVec<Scalar> w_f = w.w_m.col(2 * d + dn + 1).transpose();
  const Scalar b_e = w.b_e(0, 0);

  const auto n_edges = static_cast<Eigen::Index>(edges.n_edges());
  Mat<Scalar> z(n_edges, d);
  std::vector<Scalar> gate(edges.n_edges());
  Mat<Scalar> agg = Mat<Scalar>::Zero(n, d);
  RowVec<Scalar> m(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int lo = edges.offsets[static_cast<std::size_t>(i)];
    const int hi = edges.offsets[static_cast<std::size_t>(i) + 1];
    if (lo == hi) continue;
    for (int e = lo; e < hi; ++e) {
      const auto es = static_cast<std::size_t>(e);
      z.row(e) = p.row(i) + q.row(edges.source[es]) + edges.adjacency_weight[es] * w_a +
                 edges.functional_weight[es] * w_f;
      m = relu(z.row(e));
      const Scalar g = sigmoid(m.dot(w.w_e.row(0)) + b_e);
      gate[es] = g;
      agg.row(i) += g * m;
    }
    agg.row(i) /= static_cast<Scalar>(hi - lo);
  }
  Mat<Scalar> node_pre = row_product(h, w.w_n.transpose()) + agg;
  Mat<Scalar> out = relu(node_pre);
  if (cache) {
    cache->h_in = h;
    cache->v_tilde = v_tilde;
    cache->edges = edges;
    cache->z = std::move(z);
    cache->gate = std::move(gate);
    cache->node_pre = std::move(node_pre);
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> message_pass_backward(const MessagePassCache<Scalar>& cache, const MessagePassWeights<Scalar>& w,
                                  const Mat<Scalar>& d_out, MessagePassGrads<Scalar> grads, Mat<Scalar>& d_v_tilde,
                                  std::vector<Scalar>& d_functional_weight) {
  const Mat<Scalar>& h = cache.h_in;
  const auto n = h.rows();
  const auto d = h.cols();
  const auto dn = cache.v_tilde.cols();
  const auto& edges = cache.edges;

  const Mat<Scalar> d_pre = d_out.cwiseProduct(relu_mask(cache.node_pre));
  grads.w_n += d_pre.transpose() * h;
  Mat<Scalar> d_h = d_pre * w.w_n;

  Mat<Scalar> dp = Mat<Scalar>::Zero(n, d);
  Mat<Scalar> dq = Mat<Scalar>::Zero(n, d);
  RowVec<Scalar> d_wa = RowVec<Scalar>::Zero(d);
  RowVec<Scalar> d_wf = RowVec<Scalar>::Zero(d);
  const RowVec<Scalar> w_e = w.w_e.row(0);
  const RowVec<Scalar> w_f = w.w_m.col(2 * d + dn + 1).transpose();
  d_functional_weight.assign(edges.n_edges(), Scalar(0));

  RowVec<Scalar> m(d), dm(d), dz(d), g(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int lo = edges.offsets[static_cast<std::size_t>(i)];
    const int hi = edges.offsets[static_cast<std::size_t>(i) + 1];
    if (lo == hi) continue;
    g = d_pre.row(i) / static_cast<Scalar>(hi - lo);
    for (int e = lo; e < hi; ++e) {
      const auto es = static_cast<std::size_t>(e);
      m = relu(cache.z.row(e));
      const Scalar gate = cache.gate[es];
      const Scalar d_s = g.dot(m) * gate * (Scalar(1) - gate);
      dm = gate * g + d_s * w_e;
      grads.w_e.row(0) += d_s * m;
      grads.b_e(0, 0) += d_s;
      dz = dm.cwiseProduct(relu_mask(cache.z.row(e)));
      dp.row(i) += dz;
      dq.row(edges.source[es]) += dz;
      d_wa += edges.adjacency_weight[es] * dz;
      d_wf += edges.functional_weight[es] * dz;
      d_functional_weight[es] = dz.dot(w_f);
    }
  }
  grads.w_m.leftCols(d) += dp.transpose() * h;
  grads.w_m.middleCols(d, dn) += dp.transpose() * cache.v_tilde;
  grads.w_m.middleCols(d + dn, d) += dq.transpose() * h;
  grads.w_m.col(2 * d + dn) += d_wa.transpose();
  grads.w_m.col(2 * d + dn + 1) += d_wf.transpose();
  grads.b_m.row(0) += dp.colwise().sum();
  d_v_tilde += dp * w.w_m.middleCols(d, dn);
  d_h += dp * w.w_m.leftCols(d) + dq * w.w_m.middleCols(d + dn, d);
  return d_h;
}

template <typename Scalar>
Mat<Scalar> diffusion_conv(const Mat<Scalar>& h, const Mat<Scalar>& diffusion, const std::vector<const Mat<Scalar>*>& theta1,
                           const Mat<Scalar>& theta2, DiffusionCache<Scalar>* cache) {
  if (diffusion.rows() != h.rows()) throw ConfigError("diffusion: node count mismatch");
  std::vector<Mat<Scalar>> powers;
  powers.reserve(theta1.size());
  Mat<Scalar> pre = row_product(h, theta2);
  const Eigen::SparseMatrix<Scalar, Eigen::RowMajor> sparse = diffusion.sparseView();
  Mat<Scalar> cur = h;
  for (const Mat<Scalar>* theta : theta1) {
    cur = sparse * cur;
    pre += row_product(cur, *theta);
    powers.push_back(cur);
  }
  Mat<Scalar> out = relu(pre);
  if (cache) {
    cache->h_in = h;
    cache->powers = std::move(powers);
    cache->pre = std::move(pre);
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> diffusion_conv_backward(const DiffusionCache<Scalar>& cache, const Mat<Scalar>& diffusion,
                                    const std::vector<const Mat<Scalar>*>& theta1, const Mat<Scalar>& theta2,
                                    const Mat<Scalar>& d_out, const std::vector<Mat<Scalar>*>& d_theta1,
                                    Mat<Scalar>& d_theta2) {
  const Mat<Scalar> d_pre = d_out.cwiseProduct(relu_mask(cache.pre));
  d_theta2 += cache.h_in.transpose() * d_pre;
  Mat<Scalar> d_h = d_pre * theta2.transpose();
  const std::size_t k_max = theta1.size();
  for (std::size_t k = 0; k < k_max; ++k) *d_theta1[k] += cache.powers[k].transpose() * d_pre;
  // Horner evaluation of sum_k (A~^T)^k (d_pre Theta1_k^T).
  Mat<Scalar> acc = d_pre * theta1[k_max - 1]->transpose();
  for (std::size_t k = k_max - 1; k-- > 0;) {
    acc = diffusion.transpose() * acc + d_pre * theta1[k]->transpose();
  }
  d_h += diffusion.transpose() * acc;
  return d_h;
}

template <typename Scalar>
Mat<Scalar> residual_block(const Mat<Scalar>& h, const Mat<Scalar>& weight, const Mat<Scalar>& bias,
                           ResidualCache<Scalar>* cache) {
  Mat<Scalar> pre = row_product(h, weight.transpose()).rowwise() + bias.row(0);
  Mat<Scalar> out = relu(pre) + h;
  if (cache) {
    cache->h_in = h;
    cache->pre = std::move(pre);
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> readout(const Mat<Scalar>& h, const RowVec<Scalar>& cov_future, const Mat<Scalar>& v, const Mat<Scalar>& w1,
                    const Mat<Scalar>& b1, const Mat<Scalar>& w2, const Mat<Scalar>& b2, ReadoutCache<Scalar>* cache) {
  const auto n = h.rows();
  Mat<Scalar> input(n, h.cols() + cov_future.size() + v.cols());
  input.leftCols(h.cols()) = h;
  input.middleCols(h.cols(), cov_future.size()) = cov_future.replicate(n, 1);
  input.rightCols(v.cols()) = v;
  if (input.cols() != w1.cols()) throw ConfigError("readout: input width mismatch");
  Mat<Scalar> pre = row_product(input, w1.transpose()).rowwise() + b1.row(0);
  Mat<Scalar> hidden = relu(pre);
  Mat<Scalar> out = row_product(hidden, w2.transpose()).rowwise() + b2.row(0);
  if (cache) {
    cache->input = std::move(input);
    cache->pre = std::move(pre);
    cache->hidden = std::move(hidden);
  }
  return out;
}

namespace {

template <typename Scalar>
std::vector<std::vector<int>> functional_neighbors(const Mat<Scalar>& weights, const ForwardConfig& config) {
  const auto n = static_cast<int>(weights.rows());
  if (static_cast<std::size_t>(n) > config.dense_functional_limit) {
    return top_k_pattern(weights.template cast<double>(), config.functional_top_k);
  }
  std::vector<std::vector<int>> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (j != i) all[static_cast<std::size_t>(i)].push_back(j);
    }
  }
  return all;
}

template <typename Scalar>
MessagePassWeights<Scalar> mp_weights(const Parameters<Scalar>& p, std::size_t l) {
  return {p[mp_name(l, "W_m")], p[mp_name(l, "b_m")], p[mp_name(l, "W_e")], p[mp_name(l, "b_e")],
          p[mp_name(l, "W_n")]};
}

template <typename Scalar>
std::vector<const Mat<Scalar>*> thetas(const Parameters<Scalar>& p, const ForwardConfig& c, std::size_t l) {
  std::vector<const Mat<Scalar>*> out;
  for (std::size_t k = 1; k <= c.diffusion_hops; ++k) out.push_back(&p[theta_name(l, k)]);
  return out;
}

template <typename Scalar>
void check_input(const ForwardConfig& c, const ModelInput<Scalar>& in, const GraphContext<Scalar>& g) {
  const auto n = in.history.rows();
  if (static_cast<std::size_t>(in.history.cols()) != c.window * c.n_features) {
    throw ConfigError("history width does not match window * n_features");
  }
  if (static_cast<std::size_t>(in.cov_history.size()) != c.window * c.n_covariates ||
      static_cast<std::size_t>(in.cov_future.size()) != c.horizon * c.n_covariates) {
    throw ConfigError("covariate block width mismatch");
  }
  if (in.encodings.rows() != n || static_cast<std::size_t>(in.encodings.cols()) != c.encoding_dim) {
    throw ConfigError("encoding table does not match nodes x encoding_dim");
  }
  if (g.adjacency.rows() != n) throw ConfigError("graph node count does not match the input");
}

}  // namespace

template <typename Scalar>
ForwardOutput<Scalar> forward(const Parameters<Scalar>& params, const ForwardConfig& config,
                              const ModelInput<Scalar>& input, const GraphContext<Scalar>& graph,
                              ForwardTape<Scalar>* tape) {
  config.validate();
  check_input(config, input, graph);
  const auto n = input.history.rows();
  const auto dn = static_cast<Eigen::Index>(config.node_dim);

  Mat<Scalar> v;
  Mat<Scalar> v_tilde;
  NormalizedEmbedding<Scalar> norm;
  if (config.use_encoding) {
    v = probe(input.encodings, params["probe.W"]);
    norm = process_embedding<Scalar>(v, params["norm.gamma"].row(0), params["norm.beta"].row(0));
    v_tilde = norm.output;
  } else {
    v = Mat<Scalar>::Zero(n, dn);
    v_tilde = Mat<Scalar>::Zero(n, dn);
  }

  TemporalCache<Scalar> temporal;
  Mat<Scalar> h = temporal_encode(temporal_input(input.history, v_tilde, input.cov_history), params["temp.W"],
                                  params["temp.b"], tape ? &temporal : nullptr);

  auto run_mp = [&] {
    if (config.skip_message_passing) return;
    for (std::size_t l = 0; l < config.mp_layers; ++l) {
      typename ForwardTape<Scalar>::MpStage stage{l, {}, {}};
      std::vector<std::vector<int>> fn;
      if (config.functional_graph_active()) {
        stage.functional.adapted_pre = row_product(v, params[mp_name(l, "adapter")].transpose());
        stage.functional.adapted = leaky_relu(stage.functional.adapted_pre);
        stage.functional.weights = functional_edges(stage.functional.adapted);
        fn = functional_neighbors(stage.functional.weights, config);
      }
      const auto edges = unite_edges<Scalar>(config.adjacency_active() ? &graph : nullptr,
                                             config.functional_graph_active() ? &stage.functional.weights : nullptr,
                                             fn, static_cast<std::size_t>(n));
      h = message_pass(h, v_tilde, edges, mp_weights(params, l), tape ? &stage.cache : nullptr);
      if (tape) tape->stages.emplace_back(std::move(stage));
      if (config.adjacency_active()) {
        typename ForwardTape<Scalar>::DiffusionStage ds{l, {}};
        h = diffusion_conv(h, graph.diffusion, thetas(params, config, l), params[mp_name(l, "theta2")],
                           tape ? &ds.cache : nullptr);
        if (tape) tape->stages.emplace_back(std::move(ds));
      }
    }
  };
  auto run_ffn = [&] {
    for (std::size_t r = 0; r < config.ffn_layers; ++r) {
      typename ForwardTape<Scalar>::ResidualStage rs{r, {}};
      h = residual_block(h, params[ffn_name(r, "W")], params[ffn_name(r, "b")], tape ? &rs.cache : nullptr);
      if (tape) tape->stages.emplace_back(std::move(rs));
    }
  };

  if (tape) tape->stages.clear();
  if (config.layer_order == LayerOrder::mp_then_ffn) {
    run_mp();
    run_ffn();
  } else {
    run_ffn();
    run_mp();
  }

  ForwardOutput<Scalar> out;
  ReadoutCache<Scalar> rc;
  out.pred = readout(h, input.cov_future, v, params["out.W1"], params["out.b1"], params["out.W2"], params["out.b2"],
                     tape ? &rc : nullptr);
  out.recon = row_product(h, params["recon.W"].transpose()).rowwise() + params["recon.b"].row(0);

  if (tape) {
    tape->v = std::move(v);
    tape->norm = std::move(norm);
    tape->v_tilde = std::move(v_tilde);
    tape->temporal = std::move(temporal);
    tape->final_hidden = std::move(h);
    tape->readout = std::move(rc);
  }
  return out;
}

template <typename Scalar>
void backward(const Parameters<Scalar>& params, const ForwardConfig& config, const ModelInput<Scalar>& input,
              const GraphContext<Scalar>& graph, const ForwardTape<Scalar>& tape, const Mat<Scalar>& d_recon,
              const Mat<Scalar>& d_pred, Parameters<Scalar>& grads) {
  grads.set_zero();
  const auto n = input.history.rows();
  const auto d = static_cast<Eigen::Index>(config.hidden);
  const auto dn = static_cast<Eigen::Index>(config.node_dim);

  Mat<Scalar> d_v = Mat<Scalar>::Zero(n, dn);
  Mat<Scalar> d_v_tilde = Mat<Scalar>::Zero(n, dn);

  // Readout and reconstruction heads.
  const auto& rc = tape.readout;
  grads["out.W2"] += d_pred.transpose() * rc.hidden;
  grads["out.b2"].row(0) += d_pred.colwise().sum();
  const Mat<Scalar> d_ro_pre = (d_pred * params["out.W2"]).cwiseProduct(relu_mask(rc.pre));
  grads["out.W1"] += d_ro_pre.transpose() * rc.input;
  grads["out.b1"].row(0) += d_ro_pre.colwise().sum();
  const Mat<Scalar> d_ro_in = d_ro_pre * params["out.W1"];
  Mat<Scalar> d_h = d_ro_in.leftCols(d);
  if (config.use_encoding) d_v += d_ro_in.rightCols(dn);

  grads["recon.W"] += d_recon.transpose() * tape.final_hidden;
  grads["recon.b"].row(0) += d_recon.colwise().sum();
  d_h += d_recon * params["recon.W"];

  for (auto it = tape.stages.rbegin(); it != tape.stages.rend(); ++it) {
    if (const auto* mp = std::get_if<typename ForwardTape<Scalar>::MpStage>(&*it)) {
      const std::size_t l = mp->layer;
      std::vector<Scalar> d_fw;
      d_h = message_pass_backward(
          mp->cache, mp_weights(params, l), d_h,
          MessagePassGrads<Scalar>{grads[mp_name(l, "W_m")], grads[mp_name(l, "b_m")], grads[mp_name(l, "W_e")],
                                   grads[mp_name(l, "b_e")], grads[mp_name(l, "W_n")]},
          d_v_tilde, d_fw);
      if (config.functional_graph_active()) {
        const auto& fc = mp->functional;
        const auto& edges = mp->cache.edges;
        Mat<Scalar> d_adapted = Mat<Scalar>::Zero(fc.adapted.rows(), fc.adapted.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
          for (int e = edges.offsets[static_cast<std::size_t>(i)]; e < edges.offsets[static_cast<std::size_t>(i) + 1];
               ++e) {
            const auto es = static_cast<std::size_t>(e);
            if (!edges.functional[es]) continue;
            const int j = edges.source[es];
            d_adapted.row(i) += d_fw[es] * fc.adapted.row(j);
            d_adapted.row(j) += d_fw[es] * fc.adapted.row(i);
          }
        }
        const Mat<Scalar> d_adapt_pre = d_adapted.cwiseProduct(leaky_relu_grad(fc.adapted_pre));
        grads[mp_name(l, "adapter")] += d_adapt_pre.transpose() * tape.v;
        d_v += d_adapt_pre * params[mp_name(l, "adapter")];
      }
    } else if (const auto* ds = std::get_if<typename ForwardTape<Scalar>::DiffusionStage>(&*it)) {
      const std::size_t l = ds->layer;
      std::vector<Mat<Scalar>*> d_theta1;
      for (std::size_t k = 1; k <= config.diffusion_hops; ++k) d_theta1.push_back(&grads[theta_name(l, k)]);
      d_h = diffusion_conv_backward(ds->cache, graph.diffusion, thetas(params, config, l),
                                    params[mp_name(l, "theta2")], d_h, d_theta1, grads[mp_name(l, "theta2")]);
    } else {
      const auto& rs = std::get<typename ForwardTape<Scalar>::ResidualStage>(*it);
      const auto& w = params[ffn_name(rs.layer, "W")];
      const Mat<Scalar> d_pre = d_h.cwiseProduct(relu_mask(rs.cache.pre));
      grads[ffn_name(rs.layer, "W")] += d_pre.transpose() * rs.cache.h_in;
      grads[ffn_name(rs.layer, "b")].row(0) += d_pre.colwise().sum();
      d_h += d_pre * w;
    }
  }

  // Temporal encoder.
  const Mat<Scalar> d_t_pre = d_h.cwiseProduct(relu_mask(tape.temporal.pre));
  grads["temp.W"] += d_t_pre.transpose() * tape.temporal.input;
  grads["temp.b"].row(0) += d_t_pre.colwise().sum();

  if (config.use_encoding) {
    const auto hist_w = static_cast<Eigen::Index>(config.window * config.n_features);
    d_v_tilde += (d_t_pre * params["temp.W"]).middleCols(hist_w, dn);
    RowVec<Scalar> d_gamma = RowVec<Scalar>::Zero(dn);
    RowVec<Scalar> d_beta = RowVec<Scalar>::Zero(dn);
    d_v += process_embedding_backward<Scalar>(tape.v, tape.norm, params["norm.gamma"].row(0), d_v_tilde, d_gamma,
                                              d_beta);
    grads["norm.gamma"].row(0) += d_gamma;
    grads["norm.beta"].row(0) += d_beta;
    grads["probe.W"] += input.encodings.transpose() * d_v;
  }
}

#define STDEMAND_INSTANTIATE(S)                                                                                       \
  template Parameters<S> init_parameters<S>(const ForwardConfig&, std::uint64_t);                                     \
  template struct GraphContext<S>;                                                                                    \
  template EdgeList<S> unite_edges<S>(const GraphContext<S>*, const Mat<S>*, const std::vector<std::vector<int>>&,   \
                                      std::size_t);                                                                   \
  template Mat<S> temporal_input<S>(const Mat<S>&, const Mat<S>&, const RowVec<S>&);                                 \
  template Mat<S> temporal_encode<S>(const Mat<S>&, const Mat<S>&, const Mat<S>&, TemporalCache<S>*);                \
  template Mat<S> message_pass<S>(const Mat<S>&, const Mat<S>&, const EdgeList<S>&, const MessagePassWeights<S>&,    \
                                  MessagePassCache<S>*);                                                              \
  template Mat<S> message_pass_backward<S>(const MessagePassCache<S>&, const MessagePassWeights<S>&, const Mat<S>&,  \
                                           MessagePassGrads<S>, Mat<S>&, std::vector<S>&);                            \
  template Mat<S> diffusion_conv<S>(const Mat<S>&, const Mat<S>&, const std::vector<const Mat<S>*>&, const Mat<S>&,  \
                                    DiffusionCache<S>*);                                                              \
  template Mat<S> diffusion_conv_backward<S>(const DiffusionCache<S>&, const Mat<S>&,                                \
                                             const std::vector<const Mat<S>*>&, const Mat<S>&, const Mat<S>&,        \
                                             const std::vector<Mat<S>*>&, Mat<S>&);                                   \
  template Mat<S> residual_block<S>(const Mat<S>&, const Mat<S>&, const Mat<S>&, ResidualCache<S>*);                 \
  template Mat<S> readout<S>(const Mat<S>&, const RowVec<S>&, const Mat<S>&, const Mat<S>&, const Mat<S>&,          \
                             const Mat<S>&, const Mat<S>&, ReadoutCache<S>*);                                         \
  template ForwardOutput<S> forward<S>(const Parameters<S>&, const ForwardConfig&, const ModelInput<S>&,             \
                                       const GraphContext<S>&, ForwardTape<S>*);                                      \
  template void backward<S>(const Parameters<S>&, const ForwardConfig&, const ModelInput<S>&, const GraphContext<S>&, \
                            const ForwardTape<S>&, const Mat<S>&, const Mat<S>&, Parameters<S>&);

STDEMAND_INSTANTIATE(float)
STDEMAND_INSTANTIATE(double)

#undef STDEMAND_INSTANTIATE

}  // namespace stdemand
