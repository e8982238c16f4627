#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "stdemand/gradcheck.hpp"
#include "stdemand/synth.hpp"
#include "stdemand/training.hpp"
#include "test_util.hpp"

using namespace stdemand;

namespace {

struct TinyProblem {
  Dataset data;
  ForwardConfig config;
  Scaler scaler;
  std::unique_ptr<WindowSource<float>> source;
  TrainingData td;
};

std::unique_ptr<TinyProblem> tiny_problem(std::size_t n_train_windows, std::uint64_t seed = 3) {
  CityOptions opt;
  opt.n_steps = 120;
  opt.encoding_dim = 8;
  auto p = std::make_unique<TinyProblem>();
  p->data = make_city(6, seed, opt).dataset();
  auto& c = p->config;
  c.window = 4;
  c.horizon = 2;
  c.hidden = 8;
  c.node_dim = 4;
  c.graph_dim = 3;
  c.encoding_dim = 8;
  c.mp_layers = 1;
  c.ffn_layers = 1;
  std::vector<std::size_t> nodes(6);
  std::iota(nodes.begin(), nodes.end(), std::size_t{0});
  p->scaler = Scaler::fit(p->data.demand, nodes, {0, 80});
  p->source = std::make_unique<WindowSource<float>>(p->data, nodes, p->scaler, c.window, c.horizon);
  p->td.train = p->source.get();
  p->td.val = p->source.get();
  const auto all = p->source->starts_within({0, 80});
  p->td.train_starts.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train_windows));
  p->td.val_starts = p->source->starts_forecasting({80, 100});
  p->td.scaler = p->scaler;
  return p;
}

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.patience = 100;
  t.mask_count = 2;
  t.seed = 17;
  return t;
}

std::string log_without_seconds(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& e : log) os << e.epoch << ',' << e.train_loss << ',' << e.val_mae << ',' << e.val_rmse << '\n';
  return os.str();
}

}  // namespace

TEST(JointLoss, PerfectForecast) {
  MatD pred(2, 2);
  pred << 1, 2, 3, 4;
  const MatD ones = MatD::Ones(2, 2);
  const auto r = joint_loss<double>(pred, pred, pred, ones, pred, ones, {0}, 1, LossKind::l1);
  EXPECT_EQ(r.pred_loss, 0.0);
  EXPECT_EQ(r.recon_loss, 0.0);
}

TEST(JointLoss, NoMaskedNodesGivesForecastLossOnly) {
  MatD recon(2, 2), target(2, 2), pred(2, 2), fut(2, 2);
  recon << 5, 5, 5, 5;
  target << 0, 0, 0, 0;
  pred << 1, 2, 3, 4;
  fut << 0, 0, 0, 0;
  const MatD ones = MatD::Ones(2, 2);
  MatD d_recon, d_pred;
  const auto r = joint_loss<double>(recon, pred, target, ones, fut, ones, {}, 1, LossKind::l1, &d_recon, &d_pred);
  EXPECT_EQ(r.recon_loss, 0.0);
  EXPECT_EQ(r.total, r.pred_loss);
  EXPECT_DOUBLE_EQ(r.pred_loss, 2.5);
  EXPECT_EQ(d_recon, MatD::Zero(2, 2));
  EXPECT_EQ(r.n_masked_entries, 0u);
}

TEST(JointLoss, HandComputedTwoNodesTwoSteps) {
  MatD recon(2, 2), hist(2, 2), hobs(2, 2), pred(2, 2), fut(2, 2), fobs(2, 2);
  recon << 1, 2, 5, 5;
  hist << 0, 4, 0, 0;
  hobs << 1, 1, 1, 0;
  pred << 1, 1, 2, 2;
  fut << 1, 0, 4, 2;
  fobs << 1, 1, 1, 0;
  MatD d_recon, d_pred;

  // Node 0 alone: step errors 1 and 2, each the only entry of its step.
  auto r = joint_loss<double>(recon, pred, hist, hobs, fut, fobs, {0}, 1, LossKind::l1);
  EXPECT_DOUBLE_EQ(r.recon_loss, 1.5);
  EXPECT_DOUBLE_EQ(r.pred_loss, 1.0);  // errors 0, 1, 2 over three observed entries
  EXPECT_DOUBLE_EQ(r.total, 2.5);

  // Both nodes: step 0 has errors {1, 5}, step 1 only node 0's 2 (node 1 unobserved there).
  r = joint_loss<double>(recon, pred, hist, hobs, fut, fobs, {0, 1}, 1, LossKind::l1, &d_recon, &d_pred);
  EXPECT_DOUBLE_EQ(r.recon_loss, (3.0 + 2.0) / 2);
  EXPECT_EQ(r.n_masked_entries, 3u);
  EXPECT_DOUBLE_EQ(d_recon(0, 0), 0.25);
  EXPECT_DOUBLE_EQ(d_recon(1, 0), 0.25);
  EXPECT_DOUBLE_EQ(d_recon(0, 1), -0.5);
  EXPECT_DOUBLE_EQ(d_recon(1, 1), 0.0);
  EXPECT_DOUBLE_EQ(d_pred(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(d_pred(0, 1), 1.0 / 3);
  EXPECT_DOUBLE_EQ(d_pred(1, 0), -1.0 / 3);
  EXPECT_DOUBLE_EQ(d_pred(1, 1), 0.0);

  r = joint_loss<double>(recon, pred, hist, hobs, fut, fobs, {0}, 1, LossKind::mse);
  EXPECT_DOUBLE_EQ(r.recon_loss, (1.0 + 4.0) / 2);
  EXPECT_DOUBLE_EQ(r.pred_loss, 5.0 / 3);
}

TEST(JointLoss, ShapeErrors) {
  const MatD a = MatD::Zero(2, 2);
  const MatD b = MatD::Zero(2, 3);
  EXPECT_THROW(joint_loss<double>(a, a, b, b, a, a, {}, 1, LossKind::l1), ConfigError);
  EXPECT_THROW(joint_loss<double>(b, a, b, b, a, a, {}, 2, LossKind::l1), ConfigError);
}

TEST(Backward, ZeroLossGivesZeroGradients) {
  auto micro = make_micro_instance(7);
  const auto out = forward(micro.params, micro.config, micro.window.input, micro.graph);
  micro.window.history_target = out.recon;
  micro.window.future_target = out.pred;
  for (auto kind : {LossKind::l1, LossKind::mse}) {
    auto grads = micro.params.zeros_like();
    const auto r = window_gradient(micro.params, micro.config, micro.window, micro.graph, micro.masked, kind, grads);
    EXPECT_EQ(r.total, 0.0);
    for (const auto& t : grads) EXPECT_EQ(t.value.cwiseAbs().maxCoeff(), 0.0) << t.name;
  }
}

TEST(Backward, LinearHeadGradientIsClosedForm) {
  const auto micro = make_micro_instance(8);
  ForwardTape<double> tape;
  const auto out = forward(micro.params, micro.config, micro.window.input, micro.graph, &tape);
  MatD d_recon, d_pred;
  joint_loss<double>(out.recon, out.pred, micro.window.history_target, micro.window.history_observed,
                     micro.window.future_target, micro.window.future_observed, micro.masked, 1, LossKind::mse, &d_recon,
                     &d_pred);
  auto grads = micro.params.zeros_like();
  window_gradient(micro.params, micro.config, micro.window, micro.graph, micro.masked, LossKind::mse, grads);
  const MatD expect_w = d_recon.transpose() * tape.final_hidden;
  EXPECT_LT(testutil::max_abs_diff(grads["recon.W"], expect_w), 1e-14);
  EXPECT_LT(testutil::max_abs_diff(grads["recon.b"], d_recon.colwise().sum()), 1e-14);
  EXPECT_GT(expect_w.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, EmptyMaskContributesNoReconstructionGradient) {
  const auto micro = make_micro_instance(9);
  auto grads = micro.params.zeros_like();
  const auto r = window_gradient(micro.params, micro.config, micro.window, micro.graph, {}, LossKind::l1, grads);
  EXPECT_EQ(r.recon_loss, 0.0);
  EXPECT_EQ(r.total, r.pred_loss);
  EXPECT_EQ(grads["recon.W"].cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(grads["recon.b"].cwiseAbs().maxCoeff(), 0.0);

  // The remaining gradients equal those of the forecast term alone.
  ForwardTape<double> tape;
  const auto out = forward(micro.params, micro.config, micro.window.input, micro.graph, &tape);
  MatD d_recon, d_pred;
  joint_loss<double>(out.recon, out.pred, micro.window.history_target, micro.window.history_observed,
                     micro.window.future_target, micro.window.future_observed, {}, 1, LossKind::l1, &d_recon, &d_pred);
  auto pred_only = micro.params.zeros_like();
  backward(micro.params, micro.config, micro.window.input, micro.graph, tape, MatD::Zero(3, 2).eval(), d_pred,
           pred_only);
  for (std::size_t i = 0; i < grads.size(); ++i) EXPECT_EQ(grads.tensor(i).value, pred_only.tensor(i).value);
}

TEST(Backward, MatchesFiniteDifferences) {
  for (std::uint64_t seed : {7u, 11u}) {
    for (const auto& c : gradient_check(make_micro_instance(seed))) {
      EXPECT_LT(c.max_rel_error, 1e-4) << c.name;
      EXPECT_EQ(c.coordinates, static_cast<std::size_t>(make_micro_instance(seed).params[c.name].size()));
    }
  }
}

TEST(Backward, FiniteDifferencesWithMseAndFfnFirst) {
  auto micro = make_micro_instance(13);
  micro.loss = LossKind::mse;
  micro.config.layer_order = LayerOrder::ffn_then_mp;
  for (const auto& c : gradient_check(micro)) EXPECT_LT(c.max_rel_error, 1e-4) << c.name;
}

TEST(CheckFinite, NamesTheTensor) {
  Parameters<float> p;
  p.add("good", 1, 2);
  p.add("bad", 2, 2)(1, 0) = std::nanf("");
  try {
    check_finite(p, "gradient");
    FAIL() << "expected an error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Parameters<double> p;
  p.add("w", 2, 3).setConstant(0.7);
  auto g = p.zeros_like();
  AdamOptimizer<double> opt(p, {});
  const auto before = p["w"];
  opt.step(p, g);
  EXPECT_EQ(p["w"], before);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, HandComputedStepFromKnownMoments) {
  AdamConfig cfg;
  cfg.lr = 0.01;
  Parameters<double> p;
  p.add("w", 1, 2) << 1.0, -2.0;
  Parameters<double> g = p.zeros_like();
  g["w"] << 0.5, -0.25;
  AdamOptimizer<double> opt(p, cfg);
  opt.first_moment()["w"] << 0.1, 0.2;
  opt.second_moment()["w"] << 0.01, 0.03;
  opt.set_steps(2);
  opt.step(p, g);
  const double m0 = 0.9 * 0.1 + 0.1 * 0.5, m1 = 0.9 * 0.2 + 0.1 * -0.25;
  const double v0 = 0.999 * 0.01 + 0.001 * 0.25, v1 = 0.999 * 0.03 + 0.001 * 0.0625;
  const double c1 = 1 - 0.9 * 0.9 * 0.9, c2 = 1 - 0.999 * 0.999 * 0.999;
  EXPECT_NEAR(p["w"](0, 0), 1.0 - 0.01 * (m0 / c1) / (std::sqrt(v0 / c2) + 1e-8), 1e-15);
  EXPECT_NEAR(p["w"](0, 1), -2.0 - 0.01 * (m1 / c1) / (std::sqrt(v1 / c2) + 1e-8), 1e-15);
  EXPECT_NEAR(opt.first_moment()["w"](0, 0), m0, 1e-15);
  EXPECT_NEAR(opt.second_moment()["w"](0, 1), v1, 1e-15);
}

TEST(Adam, ConstantGradientStepsApproachLearningRate) {
  AdamConfig cfg;
  cfg.lr = 0.001;
  Parameters<double> p;
  p.add("w", 1, 3);
  Parameters<double> g = p.zeros_like();
  g["w"] << 3.0, -0.02, 0.5;
  AdamOptimizer<double> opt(p, cfg);
  for (int i = 0; i < 999; ++i) opt.step(p, g);
  const MatD before = p["w"];
  opt.step(p, g);
  const MatD delta = p["w"] - before;
  EXPECT_NEAR(delta(0, 0), -0.001, 1e-8);
  EXPECT_NEAR(delta(0, 1), 0.001, 1e-8);
  EXPECT_NEAR(delta(0, 2), -0.001, 1e-8);
}

TEST(Adam, ClipsToGlobalNorm) {
  AdamConfig cfg;
  cfg.clip_norm = 5.0;
  Parameters<double> p;
  p.add("a", 1, 1);
  p.add("b", 1, 1);
  Parameters<double> g = p.zeros_like();
  g["a"](0, 0) = 6.0;
  g["b"](0, 0) = 8.0;
  AdamOptimizer<double> opt(p, cfg);
  EXPECT_DOUBLE_EQ(opt.step(p, g), 10.0);
  EXPECT_NEAR(opt.first_moment()["a"](0, 0), 0.1 * 3.0, 1e-15);
  EXPECT_NEAR(opt.first_moment()["b"](0, 0), 0.1 * 4.0, 1e-15);
  EXPECT_THROW(AdamOptimizer<double>(p, AdamConfig{0.001, 0.9, 0.999, 1e-8, 0.0}), ConfigError);
}

TEST(TrainConfig, KeyValueRoundTrip) {
  TrainConfig t;
  t.apply({{"epochs", "7"}, {"mask_mode", "bernoulli:0.3"}, {"loss", "mse"}, {"lr", "0.005"}, {"workers", "2"}});
  EXPECT_EQ(t.epochs, 7u);
  EXPECT_EQ(t.mask_mode, MaskMode::bernoulli);
  EXPECT_DOUBLE_EQ(t.mask_beta, 0.3);
  EXPECT_EQ(t.loss, LossKind::mse);
  TrainConfig u;
  u.apply(t.to_map());
  EXPECT_EQ(u.to_map(), t.to_map());
  EXPECT_THROW(t.apply({{"epochs", "-1"}}), ConfigError);
  EXPECT_THROW(t.apply({{"lr", "fast"}}), ConfigError);
  EXPECT_THROW(t.apply({{"mask_mode", "random"}}), ConfigError);
  TrainConfig bad;
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(DeriveSeed, DistinctStreams) {
  EXPECT_EQ(derive_seed(1, 2), derive_seed(1, 2));
  EXPECT_NE(derive_seed(1, 2), derive_seed(1, 3));
  EXPECT_NE(derive_seed(1, 2), derive_seed(2, 2));
}

TEST(Trainer, OneStepPerWindow) {
  auto p = tiny_problem(3);
  Trainer trainer(p->config, tiny_train(1), p->td, init_parameters<float>(p->config, 1));
  trainer.run();
  EXPECT_EQ(trainer.steps(), 3u);
  EXPECT_EQ(trainer.epoch(), 1u);
  ASSERT_EQ(trainer.log().size(), 1u);
  EXPECT_TRUE(std::isfinite(trainer.log()[0].val_mae));
  EXPECT_GE(trainer.log()[0].val_rmse, trainer.log()[0].val_mae);
}

TEST(Trainer, WorkersAverageWindowsPerStep) {
  auto p = tiny_problem(5);
  auto cfg = tiny_train(2);
  cfg.workers = 2;
  Trainer a(p->config, cfg, p->td, init_parameters<float>(p->config, 1));
  a.run();
  EXPECT_EQ(a.steps(), 6u);  // ceil(5 / 2) per epoch
  Trainer b(p->config, cfg, p->td, init_parameters<float>(p->config, 1));
  b.run();
  EXPECT_EQ(log_without_seconds(a.log()), log_without_seconds(b.log()));
}

TEST(Trainer, SameSeedSameLog) {
  auto p = tiny_problem(12);
  Trainer a(p->config, tiny_train(3), p->td, init_parameters<float>(p->config, 1));
  a.run();
  Trainer b(p->config, tiny_train(3), p->td, init_parameters<float>(p->config, 1));
  b.run();
  EXPECT_EQ(log_without_seconds(a.log()), log_without_seconds(b.log()));
  for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params().tensor(i).value, b.params().tensor(i).value);

  auto other = tiny_train(3);
  other.seed = 18;
  Trainer c(p->config, other, p->td, init_parameters<float>(p->config, 1));
  c.run();
  EXPECT_NE(log_without_seconds(a.log()), log_without_seconds(c.log()));
}

TEST(Trainer, ResumeIsBitIdentical) {
  testutil::TempDir dir;
  auto p = tiny_problem(10);
  Trainer full(p->config, tiny_train(4), p->td, init_parameters<float>(p->config, 2));
  full.run();

  Trainer first(p->config, tiny_train(4), p->td, init_parameters<float>(p->config, 2));
  first.run_epoch();
  first.run_epoch();
  first.save_state(dir / "state.ickp");

  Trainer resumed(p->config, tiny_train(4), p->td, init_parameters<float>(p->config, 99));
  resumed.load_state(dir / "state.ickp");
  EXPECT_EQ(resumed.epoch(), 2u);
  EXPECT_EQ(resumed.steps(), 20u);
  resumed.run();
  ASSERT_EQ(resumed.log().size(), 4u);
  for (std::size_t e = 2; e < 4; ++e) {
    EXPECT_EQ(resumed.log()[e].train_loss, full.log()[e].train_loss);
    EXPECT_EQ(resumed.log()[e].val_mae, full.log()[e].val_mae);
  }
  for (std::size_t i = 0; i < full.params().size(); ++i) {
    EXPECT_EQ(resumed.params().tensor(i).value, full.params().tensor(i).value) << full.params().tensor(i).name;
    EXPECT_EQ(resumed.best().tensor(i).value, full.best().tensor(i).value);
  }
  EXPECT_EQ(resumed.best_epoch(), full.best_epoch());
}

TEST(Trainer, EarlyStoppingHonorsPatience) {
  auto p = tiny_problem(4);
  auto cfg = tiny_train(200);
  cfg.patience = 1;
  cfg.adam.lr = 0.5;  // noisy enough that validation stops improving quickly
  Trainer t(p->config, cfg, p->td, init_parameters<float>(p->config, 3));
  t.run();
  EXPECT_LT(t.epoch(), 200u);
  EXPECT_TRUE(t.finished());
  EXPECT_LE(t.best_epoch(), t.epoch());
}

TEST(Trainer, DivergenceReportsLastGoodParameters) {
  auto p = tiny_problem(3);
  auto init = init_parameters<float>(p->config, 1);
  init["temp.b"](0, 0) = std::numeric_limits<float>::quiet_NaN();
  Trainer t(p->config, tiny_train(2), p->td, init);
  try {
    t.run();
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.epoch, 1u);
    EXPECT_EQ(e.last_good.size(), init.size());
  }
}

TEST(Trainer, RejectsImpossibleMaskCount) {
  auto p = tiny_problem(3);
  auto cfg = tiny_train(1);
  cfg.mask_count = 6;
  EXPECT_THROW(Trainer(p->config, cfg, p->td, init_parameters<float>(p->config, 1)), ConfigError);
}

TEST(Trainer, LearnsNoiselessLinearProcess) {
  // Identity nonlinearity, no noise: the next value is a fixed linear map of the window.
  CityOptions opt;
  opt.n_steps = 300;
  opt.encoding_dim = 8;
  auto city = make_city(6, 5, opt);
  GpvarParams gp;
  gp.psi = MatD(2, 2);
  gp.psi << 0.5, 0.2, -0.15, 0.05;
  gp.gain = VecD::Ones(6);
  gp.noise_sigma = 0.0;
  gp.xi = Nonlinearity::identity;
  city.demand = gpvar_generate(gp, city.graph.shift, 300, 9);
  const auto data = city.dataset();

  ForwardConfig c;
  c.window = 4;
  c.horizon = 1;
  c.hidden = 16;
  c.node_dim = 4;
  c.graph_dim = 3;
  c.encoding_dim = 8;
  c.mp_layers = 1;
  c.ffn_layers = 1;
  std::vector<std::size_t> nodes{0, 1, 2, 3, 4, 5};
  const auto scaler = Scaler::fit(data.demand, nodes, {0, 60});
  WindowSource<float> source(data, nodes, scaler, c.window, c.horizon);
  const auto& graph = source.graph_context(1);
  const auto starts = source.starts_within({0, 60});
  auto params = init_parameters<float>(c, 4);

  auto mean_loss = [&] {
    double s = 0;
    for (auto t : starts) {
      const auto w = source.make(t, {});
      const auto out = forward(params, c, w.input, graph);
      s += joint_loss<float>(out.recon, out.pred, w.history_target, w.history_observed, w.future_target,
                             w.future_observed, {}, 1, LossKind::l1)
               .total;
    }
    return s / static_cast<double>(starts.size());
  };
  const double initial = mean_loss();
  AdamConfig cfg;
  cfg.lr = 3e-3;
  AdamOptimizer<float> adam(params, cfg);
  auto grads = params.zeros_like();
  for (int step = 0; step < 200; ++step) {
    const auto t = starts[static_cast<std::size_t>(step) % starts.size()];
    const auto w = source.make(t, {});
    window_gradient(params, c, w, graph, {}, LossKind::l1, grads);
    adam.step(params, grads);
  }
  const double after = mean_loss();
  EXPECT_LT(after, 0.5 * initial) << "initial " << initial << " after " << after;
}

TEST(MetricLog, CsvLayout) {
  std::ostringstream os;
  write_metric_log({{1, 0.5, 0.25, 0.3, 1.23456}}, os);
  EXPECT_EQ(os.str(), "epoch,train_loss,val_mae,val_rmse,seconds\n1,0.5,0.25,0.3,1.235\n");
}
