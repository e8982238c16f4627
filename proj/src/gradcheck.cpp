#include "stdemand/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace stdemand {

MicroInstance make_micro_instance(std::uint64_t seed) {
  MicroInstance m;
  auto& c = m.config;
  c.window = 2;
  c.horizon = 2;
  c.mp_layers = 1;
  c.ffn_layers = 1;
  c.hidden = 4;
  c.node_dim = 3;
  c.graph_dim = 2;
  c.diffusion_hops = 2;
  c.encoding_dim = 5;
  c.n_features = 1;
  c.n_covariates = 4;
  c.use_llm_graph = true;
  c.use_adjacency_graph = true;
  c.use_encoding = true;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto fill = [&](Mat<double>& x, double scale) {
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = scale * u(rng);
  };

  m.params = init_parameters<double>(c, seed);
  for (auto& t : m.params) {
    Mat<double> noise(t.value.rows(), t.value.cols());
    fill(noise, 0.2);
    t.value += noise;
  }

  const Eigen::Index n = 3;
  MatD adjacency = MatD::Zero(n, n);
  adjacency(0, 1) = adjacency(1, 0) = 0.7;
  adjacency(1, 2) = adjacency(2, 1) = 0.4;
  m.graph = GraphContext<double>::build(adjacency, 1);

  auto& w = m.window;
  w.history_target.resize(n, 2);
  fill(w.history_target, 1.0);
  w.history_observed = Mat<double>::Ones(n, 2);
  w.future_target.resize(n, 2);
  fill(w.future_target, 1.0);
  w.future_observed = Mat<double>::Ones(n, 2);
  w.future_observed(2, 1) = 0.0;
  m.masked = {1};
  w.input.history = w.history_target;
  w.input.history.row(1).setZero();
  w.input.cov_history.resize(8);
  w.input.cov_future.resize(8);
  for (Eigen::Index i = 0; i < 8; ++i) {
    w.input.cov_history(i) = u(rng);
    w.input.cov_future(i) = u(rng);
  }
  w.input.encodings.resize(n, 5);
  fill(w.input.encodings, 1.0);
  return m;
}

namespace {

double loss_at(const MicroInstance& m, const Parameters<double>& params) {
  const auto out = forward(params, m.config, m.window.input, m.graph);
  return joint_loss(out.recon, out.pred, m.window.history_target, m.window.history_observed, m.window.future_target,
                    m.window.future_observed, m.masked, m.config.n_features, m.loss)
      .total;
}

}  // namespace

std::vector<TensorCheck> gradient_check(const MicroInstance& m, double step, double floor) {
  auto grads = m.params.zeros_like();
  window_gradient(m.params, m.config, m.window, m.graph, m.masked, m.loss, grads);
  Parameters<double> probe = m.params.cast<double>();
  std::vector<TensorCheck> out;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    TensorCheck check;
    check.name = probe.tensor(k).name;
    auto& value = probe.tensor(k).value;
    const auto& g = grads.tensor(k).value;
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      const double saved = value.data()[i];
      value.data()[i] = saved + step;
      const double up = loss_at(m, probe);
      value.data()[i] = saved - step;
      const double down = loss_at(m, probe);
      value.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = g.data()[i];
      const double abs_err = std::abs(analytic - numeric);
      const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), floor});
      check.max_abs_error = std::max(check.max_abs_error, abs_err);
      check.max_rel_error = std::max(check.max_rel_error, rel);
      ++check.coordinates;
    }
    out.push_back(check);
  }
  return out;
}

}  // namespace stdemand
