#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>

#include "model_oracle.hpp"
#include "stdemand/checkpoint.hpp"
#include "stdemand/evaluation.hpp"
#include "stdemand/gradcheck.hpp"
#include "test_util.hpp"

using namespace stdemand;

namespace {

int failures = 0;

void report(bool pass, const std::string& name, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void gradient_correctness() {
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::size_t tensors = 0;
  for (const auto& c : gradient_check(make_micro_instance(7))) {
    worst = std::max(worst, c.max_rel_error);
    ++tensors;
  }
  const double secs = seconds_since(start);
  report(worst < 1e-4 && secs < 10.0 && tensors > 0, "gradient correctness",
         fmt("max relative error %.2e over %.0f tensors in %.2f s (limits 1e-4, 10 s)", worst,
             static_cast<double>(tensors), secs));
}

ExperimentSpec recovery_spec() {
  ExperimentSpec spec;
  spec.n_new_regions = 10;
  spec.seed = 3;
  spec.train.seed = 5;
  spec.train.epochs = 50;
  return spec;
}

// Synthetic city A trained once; reused by the ablation and transfer checks.
void synthetic_experiments() {
  const auto city = make_city(30, 11).dataset();
  auto start = std::chrono::steady_clock::now();
  const auto full = run_joint(city, recovery_spec());
  const double secs = seconds_since(start);
  const double mae_all = full.get("model", "all").mae;
  const double ha_all = full.get("ha", "all").mae;
  const double mae_new = full.get("model", "new").mae;
  const double nb_new = full.get("neighbor_mean", "new").mae;
  report(mae_all <= 0.8 * ha_all && mae_new <= 0.9 * nb_new && secs < 600.0, "GPVAR recovery",
         fmt("MAE(all) %.4f vs 0.8 x HA %.4f; ", mae_all, 0.8 * ha_all) +
             fmt("MAE(new) %.4f vs 0.9 x neighbor mean %.4f; ", mae_new, 0.9 * nb_new) +
             fmt("%.0f epochs in %.0f s (limit 600 s)", static_cast<double>(full.log.size()), secs));

  auto ablated_spec = recovery_spec();
  ablated_spec.model.use_encoding = false;
  const auto ablated = run_joint(city, ablated_spec);
  const double ablated_new = ablated.get("model", "new").mae;
  report(ablated_new >= 1.1 * mae_new, "encoding ablation",
         fmt("MAE(new) without encodings %.4f vs full %.4f (+%.1f%%, need >= 10%%)", ablated_new, mae_new,
             100.0 * (ablated_new / mae_new - 1.0)));

  testutil::TempDir dir;
  const auto checkpoint = dir / "city_a.ickp";
  full.model->save(checkpoint);
  const auto before = file_hash(checkpoint);
  const auto bytes = testutil::file_bytes(checkpoint);
  const auto bundle = ModelBundle::load(checkpoint);
  const auto city_b = make_city(30, 12).dataset();
  ExperimentSpec transfer_spec;
  transfer_spec.scenario = Scenario::transfer_full;
  transfer_spec.checkpoint = checkpoint;
  const auto transfer = run_transfer(bundle, city_b, transfer_spec);
  const bool unchanged = file_hash(checkpoint) == before && testutil::file_bytes(checkpoint) == bytes;
  const bool graphs_differ = city_b.graph.adjacency != city.graph.adjacency;
  const double mae_b = transfer.get("model", "all").mae;
  const double ha_b = transfer.get("ha", "all").mae;
  report(mae_b <= ha_b && unchanged && graphs_differ, "zero-shot transfer",
         fmt("MAE(B) %.4f vs HA(B) %.4f; ", mae_b, ha_b) + "checkpoint hash " + (unchanged ? "unchanged" : "CHANGED"));
}

ForwardConfig random_instance_config() {
  ForwardConfig c;
  c.window = 4;
  c.horizon = 3;
  c.hidden = 8;
  c.node_dim = 5;
  c.graph_dim = 4;
  c.encoding_dim = 6;
  c.mp_layers = 2;
  c.ffn_layers = 2;
  return c;
}

void permutation_equivariance() {
  const double dev = oracle::permutation_deviation<float>(random_instance_config(), 12, 31, 100);
  report(dev < 1e-5, "permutation equivariance", fmt("max deviation %.2e over 100 permutations (32-bit, limit 1e-5)", dev));
}

template <typename S>
ForwardOutput<S> grown_forward(const Parameters<S>& p, const ForwardConfig& c, const ModelInput<S>& in, const MatD& adj,
                               std::mt19937_64& rng) {
  const auto n = in.history.rows();
  ModelInput<S> grown = in;
  grown.history.conservativeResize(n + 1, Eigen::NoChange);
  grown.history.row(n) = testutil::random_matrix<S>(1, in.history.cols(), rng);
  grown.encodings.conservativeResize(n + 1, Eigen::NoChange);
  grown.encodings.row(n) = testutil::random_matrix<S>(1, in.encodings.cols(), rng);
  MatD bigger = MatD::Zero(n + 1, n + 1);
  bigger.topLeftCorner(n, n) = adj;
  return forward(p, c, grown, GraphContext<S>::build(bigger, c.neighbor_order));
}

void non_interference() {
  auto c = random_instance_config();
  c.use_llm_graph = false;
  c.use_encoding = false;
  std::mt19937_64 rng(41);
  const auto p = oracle::perturbed_params<float>(c, 42, 0.1);
  const auto in = oracle::random_input<float>(c, 9, rng);
  const MatD adj = oracle::random_adjacency(9, rng, 0.5);
  const auto base = forward(p, c, in, GraphContext<float>::build(adj, 1));
  const auto out = grown_forward(p, c, in, adj, rng);
  const bool exact = out.pred.topRows(9) == base.pred && out.recon.topRows(9) == base.recon;
  report(exact, "non-interference",
         fmt("added isolated node, functional graph and encodings off: max change %.1e (must be exactly 0)",
             testutil::max_abs_diff(out.pred.topRows(9), base.pred)));

  // With encodings on, their node-axis normalization sees the new node, so only report the size of the effect.
  auto ce = c;
  ce.use_encoding = true;
  const auto pe = oracle::perturbed_params<float>(ce, 43, 0.1);
  const auto base_e = forward(pe, ce, in, GraphContext<float>::build(adj, 1));
  const auto out_e = grown_forward(pe, ce, in, adj, rng);
  std::cout << "INFO non-interference with encodings on (functional graph off): max change "
            << testutil::max_abs_diff(out_e.pred.topRows(9), base_e.pred) << std::endl;
}

std::string log_without_seconds(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& e : log) os << e.epoch << ' ' << e.train_loss << ' ' << e.val_mae << ' ' << e.val_rmse << '\n';
  return os.str();
}

template <typename Write, typename Read>
bool round_trips(const Write& write, const Read& read) {
  std::stringstream first;
  write(first);
  const auto bytes = first.str();
  const auto back = read(first);
  std::stringstream second;
  back(second);
  return second.str() == bytes;
}

void determinism_and_persistence() {
  CityOptions opt;
  opt.n_steps = 240;
  opt.encoding_dim = 8;
  const auto city = make_city(8, 2, opt);
  const auto data = city.dataset();
  ExperimentSpec spec;
  spec.model.window = 6;
  spec.model.horizon = 3;
  spec.model.hidden = 8;
  spec.model.node_dim = 4;
  spec.model.graph_dim = 3;
  spec.model.ffn_layers = 1;
  spec.train.epochs = 3;
  spec.train.mask_count = 2;
  spec.train.seed = 4;
  spec.n_new_regions = 2;
  spec.seed = 9;
  const auto a = run_joint(data, spec);
  const auto b = run_joint(data, spec);
  const bool same_log = log_without_seconds(a.log) == log_without_seconds(b.log) && !a.log.empty();

  testutil::TempDir dir;
  a.model->save(dir / "m.ickp");
  const auto loaded = ModelBundle::load(dir / "m.ickp");
  std::vector<std::size_t> all(data.n_nodes());
  std::iota(all.begin(), all.end(), std::size_t{0});
  WindowSource<float> source(data, all, a.model->scaler, spec.model.window, spec.model.horizon);
  const auto window = source.make(100, {1, 5});
  const auto& graph = source.graph_context(1);
  const auto fa = forward(a.model->params, a.model->config, window.input, graph);
  const auto fb = forward(loaded.params, loaded.config, window.input, graph);
  const bool same_forward =
      std::memcmp(fa.pred.data(), fb.pred.data(), sizeof(float) * fa.pred.size()) == 0 &&
      std::memcmp(fa.recon.data(), fb.recon.data(), sizeof(float) * fa.recon.size()) == 0;

  const bool idt = round_trips([&](std::ostream& o) { write_demand(city.demand, o); },
                               [](std::istream& i) {
                                 auto d = read_demand(i);
                                 return [d](std::ostream& o) { write_demand(d, o); };
                               });
  const bool igr = round_trips([&](std::ostream& o) { write_graph(city.graph, o); },
                               [](std::istream& i) {
                                 auto g = read_graph(i);
                                 return [g](std::ostream& o) { write_graph(g, o); };
                               });
  const bool iemb = round_trips([&](std::ostream& o) { write_encodings(city.encodings, o); },
                                [](std::istream& i) {
                                  auto e = read_encodings(i);
                                  return [e](std::ostream& o) { write_encodings(e, o); };
                                });
  const bool ickp = round_trips([&](std::ostream& o) { write_checkpoint(a.model->params, o); },
                                [](std::istream& i) {
                                  auto p = read_checkpoint(i);
                                  return [p](std::ostream& o) { write_checkpoint(p, o); };
                                });
  std::string detail = std::string("metric logs ") + (same_log ? "identical" : "DIFFER") + "; forward after reload " +
                       (same_forward ? "identical" : "DIFFERS") + "; round trips IDT1 " + (idt ? "ok" : "BAD") +
                       ", IGR1 " + (igr ? "ok" : "BAD") + ", IEMB " + (iemb ? "ok" : "BAD") + ", ICKP " +
                       (ickp ? "ok" : "BAD");
  report(same_log && same_forward && idt && igr && iemb && ickp, "determinism and persistence", detail);
}

double gpvar_oracle_error() {
  std::mt19937_64 rng(51);
  const int n = 5;
  const MatD adj = oracle::random_adjacency(n, rng, 0.6);
  const MatD s = build_shift(adj);
  auto p = seasonal_family(n, rng);
  p.noise_sigma = 0.0;
  const int lags = static_cast<int>(p.lags());
  const MatD init = testutil::random_matrix(n, lags, rng);
  const int steps = 100;
  const MatD x = gpvar_series(p, s, static_cast<std::size_t>(steps), 0, init);
  const auto q = p.stabilized();

  std::vector<MatD> powers{MatD::Identity(n, n)};
  for (std::size_t l = 1; l <= p.orders(); ++l) {
    MatD next = MatD::Zero(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) next(i, j) += powers.back()(i, k) * s(k, j);
    powers.push_back(next);
  }
  std::vector<std::vector<double>> hist;
  for (int t = 0; t < lags; ++t) {
    std::vector<double> col(n);
    for (int i = 0; i < n; ++i) col[i] = init(i, t);
    hist.push_back(col);
  }
  const int burn = 10 * lags;
  for (int step = 0; step < burn + steps; ++step) {
    std::vector<double> next(n);
    for (int i = 0; i < n; ++i) {
      double h = 0.0;
      for (int lag = 1; lag <= lags; ++lag) {
        const auto& past = hist[hist.size() - static_cast<std::size_t>(lag)];
        for (std::size_t l = 0; l <= p.orders(); ++l) {
          const double coef = q.psi(lag - 1, static_cast<int>(l));
          if (coef == 0.0) continue;
          for (int j = 0; j < n; ++j) h += coef * powers[l](i, j) * past[j];
        }
      }
      next[i] = p.gain(i) * std::tanh(h);
    }
    hist.push_back(next);
  }
  double worst = 0.0;
  for (int t = 0; t < steps; ++t)
    for (int i = 0; i < n; ++i)
      worst = std::max(worst, std::abs(x(i, t) - hist[static_cast<std::size_t>(lags + burn + t)][i]));
  return worst;
}

void oracle_equivalence() {
  const double gp = gpvar_oracle_error();
  std::mt19937_64 rng(61);
  double fe = 0.0, sh = 0.0, mp = 0.0;
  for (int n = 1; n <= 5; ++n) {
    const MatD v = testutil::random_matrix(n, 4, rng);
    const MatD e = functional_edges(v);
    const MatD adj = oracle::random_adjacency(n, rng, 0.6);
    const MatD s = build_shift(adj);
    std::vector<double> deg(n, 1.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) deg[i] += adj(i, j);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        double dot = 0.0;
        for (int k = 0; k < 4; ++k) dot += v(i, k) * v(j, k);
        fe = std::max(fe, std::abs(e(i, j) - dot));
        const double expect = (adj(i, j) + (i == j ? 1.0 : 0.0)) / std::sqrt(deg[i] * deg[j]);
        sh = std::max(sh, std::abs(s(i, j) - expect));
      }
    }
    const auto w = oracle::random_mp(4, 3, rng);
    const MatD h = testutil::random_matrix(n, 4, rng, 0.0, 1.0);
    const MatD vt = testutil::random_matrix(n, 3, rng);
    oracle::EdgeLists lists(n);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (j != i && u(rng) < 0.7) lists[i].emplace_back(j, adj(i, j), u(rng) - 0.5);
    const MatD out = message_pass<double>(h, vt, oracle::make_edges(lists), w.weights(), nullptr);
    mp = std::max(mp, testutil::max_abs_diff(out, oracle::naive_message_pass(h, vt, lists, w)));
  }
  report(gp < 1e-10 && fe < 1e-10 && sh < 1e-10 && mp < 1e-10, "oracle equivalence",
         fmt("gpvar %.1e, functional_edges %.1e, build_shift %.1e, ", gp, fe, sh) +
             fmt("message_pass %.1e (limit 1e-10)", mp));
}

void loss_guard() {
  const auto micro = make_micro_instance(7);
  const auto& w = micro.window;
  Mat<double> d_recon, d_pred;
  const auto loss = joint_loss<double>(MatD::Constant(w.history_target.rows(), w.history_target.cols(), 3.0),
                                       MatD::Zero(w.future_target.rows(), w.future_target.cols()), w.history_target,
                                       w.history_observed, w.future_target, w.future_observed, {}, 1, LossKind::l1,
                                       &d_recon, &d_pred);
  Parameters<double> grads = micro.params;
  window_gradient(micro.params, micro.config, w, micro.graph, {}, LossKind::l1, grads);
  const double recon_grad = std::max({d_recon.cwiseAbs().maxCoeff(), grads["recon.W"].cwiseAbs().maxCoeff(),
                                      grads["recon.b"].cwiseAbs().maxCoeff()});
  report(loss.recon_loss == 0.0 && recon_grad == 0.0, "loss guard",
         fmt("no masked nodes: recon_loss %.1e, max reconstruction-path gradient %.1e (both must be 0)",
             loss.recon_loss, recon_grad));
}

}  // namespace

int main() {
  const auto start = std::chrono::steady_clock::now();
  try {
    gradient_correctness();
    permutation_equivariance();
    non_interference();
    oracle_equivalence();
    loss_guard();
    determinism_and_persistence();
    synthetic_experiments();
  } catch (const std::exception& e) {
    std::cout << "FAIL aborted: " << e.what() << std::endl;
    return 1;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << " in "
            << static_cast<int>(seconds_since(start)) << " s" << std::endl;
  return failures == 0 ? 0 : 1;
}
