#include "stdemand/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include "stdemand/checkpoint.hpp"

namespace stdemand {

LossKind parse_loss_kind(const std::string& text) {
  if (text == "l1" || text == "mae") return LossKind::l1;
  if (text == "mse" || text == "l2") return LossKind::mse;
  throw ConfigError("unknown loss " + text);
}

std::string to_string(LossKind kind) { return kind == LossKind::l1 ? "l1" : "mse"; }

namespace {

template <typename Scalar>
Scalar loss_value(Scalar e, LossKind kind) {
  return kind == LossKind::l1 ? std::abs(e) : e * e;
}

template <typename Scalar>
Scalar loss_slope(Scalar e, LossKind kind) {
  if (kind == LossKind::mse) return Scalar(2) * e;
  return e > Scalar(0) ? Scalar(1) : (e < Scalar(0) ? Scalar(-1) : Scalar(0));
}

}  // namespace

template <typename Scalar>
LossReport joint_loss(const Mat<Scalar>& recon, const Mat<Scalar>& pred, const Mat<Scalar>& history_target,
                      const Mat<Scalar>& history_observed, const Mat<Scalar>& future_target,
                      const Mat<Scalar>& future_observed, const std::vector<int>& masked, std::size_t n_features,
                      LossKind kind, Mat<Scalar>* d_recon, Mat<Scalar>* d_pred) {
  if (recon.rows() != history_target.rows() || recon.cols() != history_target.cols() ||
      history_observed.rows() != recon.rows() || history_observed.cols() != recon.cols()) {
    throw ConfigError("reconstruction and history target shapes differ");
  }
  if (pred.rows() != future_target.rows() || pred.cols() != future_target.cols() ||
      future_observed.rows() != pred.rows() || future_observed.cols() != pred.cols()) {
    throw ConfigError("forecast and future target shapes differ");
  }
  const auto dx = static_cast<Eigen::Index>(n_features);
  if (dx < 1 || recon.cols() % dx != 0 || pred.cols() % dx != 0) throw ConfigError("feature count does not divide width");
  const Eigen::Index w = recon.cols() / dx;

  LossReport r;
  if (d_recon) *d_recon = Mat<Scalar>::Zero(recon.rows(), recon.cols());
  if (d_pred) *d_pred = Mat<Scalar>::Zero(pred.rows(), pred.cols());

  // Reconstruction: per step, mean over masked-and-observed entries; then mean over steps that have any.
  std::vector<double> step_sum(static_cast<std::size_t>(w), 0.0);
  std::vector<double> step_count(static_cast<std::size_t>(w), 0.0);
  for (int i : masked) {
    for (Eigen::Index d = 0; d < dx; ++d) {
      for (Eigen::Index s = 0; s < w; ++s) {
        const Eigen::Index c = d * w + s;
        if (history_observed(i, c) == Scalar(0)) continue;
        step_sum[static_cast<std::size_t>(s)] += static_cast<double>(loss_value(recon(i, c) - history_target(i, c), kind));
        step_count[static_cast<std::size_t>(s)] += 1.0;
      }
    }
  }
  std::size_t active_steps = 0;
  for (std::size_t s = 0; s < step_count.size(); ++s) {
    if (step_count[s] == 0.0) continue;
    ++active_steps;
    r.recon_loss += step_sum[s] / step_count[s];
    r.n_masked_entries += static_cast<std::size_t>(step_count[s]);
  }
  if (active_steps > 0) {
    r.recon_loss /= static_cast<double>(active_steps);
    if (d_recon) {
      for (int i : masked) {
        for (Eigen::Index d = 0; d < dx; ++d) {
          for (Eigen::Index s = 0; s < w; ++s) {
            const Eigen::Index c = d * w + s;
            if (history_observed(i, c) == Scalar(0)) continue;
            const double denom = step_count[static_cast<std::size_t>(s)] * static_cast<double>(active_steps);
            (*d_recon)(i, c) = loss_slope(recon(i, c) - history_target(i, c), kind) / static_cast<Scalar>(denom);
          }
        }
      }
    }
  }

  double pred_sum = 0.0;
  std::size_t pred_count = 0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    for (Eigen::Index c = 0; c < pred.cols(); ++c) {
      if (future_observed(i, c) == Scalar(0)) continue;
      pred_sum += static_cast<double>(loss_value(pred(i, c) - future_target(i, c), kind));
      ++pred_count;
    }
  }
  if (pred_count > 0) {
    r.pred_loss = pred_sum / static_cast<double>(pred_count);
    if (d_pred) {
      const auto inv = static_cast<Scalar>(1.0 / static_cast<double>(pred_count));
      for (Eigen::Index i = 0; i < pred.rows(); ++i) {
        for (Eigen::Index c = 0; c < pred.cols(); ++c) {
          if (future_observed(i, c) == Scalar(0)) continue;
          (*d_pred)(i, c) = loss_slope(pred(i, c) - future_target(i, c), kind) * inv;
        }
      }
    }
  }
  r.total = r.recon_loss + r.pred_loss;
  return r;
}

template <typename Scalar>
AdamOptimizer<Scalar>::AdamOptimizer(const Parameters<Scalar>& like, AdamConfig config)
    : config_(config), m_(like.zeros_like()), v_(like.zeros_like()) {
  if (!(config_.clip_norm > 0.0)) throw ConfigError("gradient clip norm must be positive");
  if (!(config_.lr > 0.0)) throw ConfigError("learning rate must be positive");
}

template <typename Scalar>
double global_norm_impl(const Parameters<Scalar>& grads) {
  double sq = 0.0;
  for (const auto& t : grads) sq += t.value.template cast<double>().squaredNorm();
  return std::sqrt(sq);
}

double global_norm(const Parameters<float>& grads) { return global_norm_impl(grads); }
double global_norm(const Parameters<double>& grads) { return global_norm_impl(grads); }

template <typename Scalar>
double AdamOptimizer<Scalar>::step(Parameters<Scalar>& params, const Parameters<Scalar>& grads) {
  if (params.size() != grads.size() || params.size() != m_.size()) throw ConfigError("optimizer parameter layout mismatch");
  const double norm = global_norm_impl(grads);
  const Scalar scale = norm > config_.clip_norm ? static_cast<Scalar>(config_.clip_norm / norm) : Scalar(1);
  ++steps_;
  const auto b1 = static_cast<Scalar>(config_.beta1);
  const auto b2 = static_cast<Scalar>(config_.beta2);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(config_.beta1, static_cast<double>(steps_)));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(config_.beta2, static_cast<double>(steps_)));
  const auto lr = static_cast<Scalar>(config_.lr);
  const auto eps = static_cast<Scalar>(config_.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params.tensor(k).value;
    auto& m = m_.tensor(k).value;
    auto& v = v_.tensor(k).value;
    const auto& g = grads.tensor(k).value;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const Scalar gi = g.data()[i] * scale;
      m.data()[i] = b1 * m.data()[i] + (Scalar(1) - b1) * gi;
      v.data()[i] = b2 * v.data()[i] + (Scalar(1) - b2) * gi * gi;
      const Scalar m_hat = m.data()[i] / c1;
      const Scalar v_hat = v.data()[i] / c2;
      p.data()[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
  return norm;
}

template <typename Scalar>
void check_finite(const Parameters<Scalar>& grads, const char* what) {
  for (const auto& t : grads) {
    if (!t.value.allFinite()) throw NumericalError(std::string("non-finite ") + what + " in tensor " + t.name);
  }
}

template <typename Scalar>
LossReport window_gradient(const Parameters<Scalar>& params, const ForwardConfig& config, const WindowData<Scalar>& window,
                           const GraphContext<Scalar>& graph, const std::vector<int>& masked, LossKind kind,
                           Parameters<Scalar>& grads) {
  ForwardTape<Scalar> tape;
  const auto out = forward(params, config, window.input, graph, &tape);
  Mat<Scalar> d_recon;
  Mat<Scalar> d_pred;
  const auto report = joint_loss(out.recon, out.pred, window.history_target, window.history_observed,
                                 window.future_target, window.future_observed, masked, config.n_features, kind,
                                 &d_recon, &d_pred);
  backward(params, config, window.input, graph, tape, d_recon, d_pred, grads);
  return report;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over a combination of both inputs
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (val_stride < 1) throw ConfigError("val_stride must be >= 1");
  if (mask_mode == MaskMode::bernoulli && !(mask_beta >= 0.0 && mask_beta < 1.0)) {
    throw ConfigError("bernoulli mask rate must lie in [0, 1)");
  }
  if (!(adam.clip_norm > 0.0) || !(adam.lr > 0.0)) throw ConfigError("learning rate and clip norm must be positive");
}

namespace {

double to_double(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw ConfigError("bad number for " + key + ": " + s);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("bad number for " + key + ": " + s);
  }
}

std::uint64_t to_count(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    if (!s.empty() && s[0] == '-') throw ConfigError("negative value for " + key);
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw ConfigError("bad integer for " + key + ": " + s);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("bad integer for " + key + ": " + s);
  }
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void TrainConfig::apply(const std::map<std::string, std::string>& kv) {
  for (const auto& [key, value] : kv) {
    if (key == "epochs") epochs = to_count(key, value);
    else if (key == "patience") patience = to_count(key, value);
    else if (key == "mask_count") mask_count = to_count(key, value);
    else if (key == "mask_mode") {
      // "fixed" or "bernoulli:<beta>"
      if (value == "fixed") {
        mask_mode = MaskMode::fixed_count;
      } else if (value.rfind("bernoulli:", 0) == 0) {
        mask_mode = MaskMode::bernoulli;
        mask_beta = to_double(key, value.substr(10));
      } else {
        throw ConfigError("unknown mask mode " + value);
      }
    } else if (key == "loss") loss = parse_loss_kind(value);
    else if (key == "seed") seed = to_count(key, value);
    else if (key == "workers") workers = to_count(key, value);
    else if (key == "val_stride") val_stride = to_count(key, value);
    else if (key == "lr") adam.lr = to_double(key, value);
    else if (key == "beta1") adam.beta1 = to_double(key, value);
    else if (key == "beta2") adam.beta2 = to_double(key, value);
    else if (key == "adam_eps") adam.eps = to_double(key, value);
    else if (key == "clip_norm") adam.clip_norm = to_double(key, value);
  }
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {
      {"epochs", std::to_string(epochs)},
      {"patience", std::to_string(patience)},
      {"mask_count", std::to_string(mask_count)},
      {"mask_mode", mask_mode == MaskMode::fixed_count ? "fixed" : "bernoulli:" + format_double(mask_beta)},
      {"loss", to_string(loss)},
      {"seed", std::to_string(seed)},
      {"workers", std::to_string(workers)},
      {"val_stride", std::to_string(val_stride)},
      {"lr", format_double(adam.lr)},
      {"beta1", format_double(adam.beta1)},
      {"beta2", format_double(adam.beta2)},
      {"adam_eps", format_double(adam.eps)},
      {"clip_norm", format_double(adam.clip_norm)},
  };
}

void write_metric_log(const std::vector<EpochLog>& log, std::ostream& out) {
  out << "epoch,train_loss,val_mae,val_rmse,seconds\n";
  out << std::setprecision(9);
  for (const auto& e : log) {
    out << e.epoch << ',' << e.train_loss << ',' << e.val_mae << ',' << e.val_rmse << ',' << std::fixed
        << std::setprecision(3) << e.seconds << std::defaultfloat << std::setprecision(9) << '\n';
  }
}

void write_metric_log(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_metric_log(log, out);
}

double ErrorSums::mae() const { return count ? abs / static_cast<double>(count) : 0.0; }
double ErrorSums::rmse() const { return count ? std::sqrt(sq / static_cast<double>(count)) : 0.0; }

ErrorSums validation_error(const Parameters<float>& params, const ForwardConfig& config, const TrainConfig& train_config,
                           const TrainingData& data) {
  ErrorSums sums;
  const auto& source = *data.val;
  const auto& graph = source.graph_context(config.neighbor_order);
  const std::size_t n = source.n_nodes();
  const std::size_t n_hide = std::min(train_config.mask_count, n > 0 ? n - 1 : 0);
  for (std::size_t k = 0; k < data.val_starts.size(); k += train_config.val_stride) {
    const std::size_t t = data.val_starts[k];
    const auto plan = sample_mask(n, n_hide, {t, t + config.window},
                                  derive_seed(train_config.seed ^ 0x5EEDF00DULL, t));
    const auto window = source.make(t, plan.masked_node_ids);
    const auto out = forward(params, config, window.input, graph);
    for (Eigen::Index i = 0; i < out.pred.rows(); ++i) {
      for (Eigen::Index c = 0; c < out.pred.cols(); ++c) {
        if (window.future_observed(i, c) == 0.0f) continue;
        const double e = (static_cast<double>(out.pred(i, c)) - static_cast<double>(window.future_target(i, c))) *
                         data.scaler.scale;
        sums.abs += std::abs(e);
        sums.sq += e * e;
        ++sums.count;
      }
    }
  }
  return sums;
}

Trainer::Trainer(ForwardConfig config, TrainConfig train_config, const TrainingData& data, Parameters<float> init)
    : config_(config),
      train_config_(train_config),
      data_(data),
      params_(std::move(init)),
      best_(params_.cast<float>()),
      optimizer_(params_, train_config.adam) {
  config_.validate();
  train_config_.validate();
  if (!data_.train || data_.train_starts.empty()) throw ConfigError("no training windows");
  if (!data_.val || data_.val_starts.empty()) throw ConfigError("no validation windows");
  if (train_config_.mask_mode == MaskMode::fixed_count && train_config_.mask_count >= data_.train->n_nodes()) {
    throw ConfigError("mask_count must be smaller than the number of observed training regions");
  }
}

bool Trainer::finished() const {
  if (epoch_ >= train_config_.epochs) return true;
  return has_best_ && stale_epochs_ >= train_config_.patience;
}

std::vector<int> Trainer::draw_mask(std::mt19937_64& rng) const {
  const auto n = data_.train->n_nodes();
  if (train_config_.mask_mode == MaskMode::bernoulli) {
    return sample_mask_bernoulli(n, train_config_.mask_beta, {0, config_.window}, rng).masked_node_ids;
  }
  return sample_mask(n, train_config_.mask_count, {0, config_.window}, rng).masked_node_ids;
}

double Trainer::train_epoch(std::uint64_t epoch_seed) {
  std::mt19937_64 rng(epoch_seed);
  std::vector<std::size_t> order = data_.train_starts;
  std::shuffle(order.begin(), order.end(), rng);
  const auto& source = *data_.train;
  const auto& graph = source.graph_context(config_.neighbor_order);
  const std::size_t k = train_config_.workers;

  double loss_sum = 0.0;
  std::size_t windows = 0;
  Parameters<float> grads = params_.zeros_like();

  auto diverged = [&](const std::string& what) {
    throw TrainingDiverged(what + " at epoch " + std::to_string(epoch_ + 1), has_best_ ? best_ : params_, epoch_ + 1);
  };

  if (k == 1) {
    for (std::size_t t : order) {
      const auto masked = draw_mask(rng);
      const auto window = source.make(t, masked);
      const auto report = window_gradient(params_, config_, window, graph, masked, train_config_.loss, grads);
      if (!std::isfinite(report.total)) diverged("loss is not finite");
      check_finite(grads, "gradient");
      optimizer_.step(params_, grads);
      loss_sum += report.total;
      ++windows;
    }
  } else {
    std::vector<Parameters<float>> worker_grads(k, params_.zeros_like());
    std::vector<LossReport> reports(k);
    std::vector<std::exception_ptr> errors(k);
    for (std::size_t begin = 0; begin < order.size(); begin += k) {
      const std::size_t count = std::min(k, order.size() - begin);
      // masks are drawn up front in window order so the draw sequence does not depend on scheduling
      std::vector<std::vector<int>> masks(count);
      for (std::size_t j = 0; j < count; ++j) masks[j] = draw_mask(rng);
      std::vector<std::thread> pool;
      for (std::size_t j = 0; j < count; ++j) {
        pool.emplace_back([&, j] {
          try {
            const auto window = source.make(order[begin + j], masks[j]);
            reports[j] = window_gradient(params_, config_, window, graph, masks[j], train_config_.loss, worker_grads[j]);
          } catch (...) {
            errors[j] = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      for (std::size_t j = 0; j < count; ++j) {
        if (errors[j]) std::rethrow_exception(errors[j]);
      }
      grads.set_zero();
      for (std::size_t j = 0; j < count; ++j) {
        if (!std::isfinite(reports[j].total)) diverged("loss is not finite");
        for (std::size_t p = 0; p < grads.size(); ++p) grads.tensor(p).value += worker_grads[j].tensor(p).value;
        loss_sum += reports[j].total;
        ++windows;
      }
      for (auto& t : grads) t.value /= static_cast<float>(count);
      check_finite(grads, "gradient");
      optimizer_.step(params_, grads);
    }
  }
  if (!params_.all_finite()) diverged("parameters are not finite");
  return windows ? loss_sum / static_cast<double>(windows) : 0.0;
}

bool Trainer::run_epoch() {
  if (finished()) return false;
  const auto start = std::chrono::steady_clock::now();
  EpochLog entry;
  entry.epoch = epoch_ + 1;
  entry.train_loss = train_epoch(derive_seed(train_config_.seed, epoch_));
  const auto val = validation_error(params_, config_, train_config_, data_);
  entry.val_mae = val.mae();
  entry.val_rmse = val.rmse();
  if (!std::isfinite(entry.val_mae)) {
    throw TrainingDiverged("validation error is not finite at epoch " + std::to_string(entry.epoch),
                           has_best_ ? best_ : params_, entry.epoch);
  }
  entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ++epoch_;
  // the comparison runs on the f32 value so a resumed run (which stores it as f32) decides identically
  const auto val_f = static_cast<float>(entry.val_mae);
  if (!has_best_ || val_f < best_val_) {
    has_best_ = true;
    best_val_ = val_f;
    best_ = params_.cast<float>();
    best_epoch_ = epoch_;
    stale_epochs_ = 0;
  } else {
    ++stale_epochs_;
  }
  log_.push_back(entry);
  if (on_epoch) on_epoch(entry);
  return true;
}

void Trainer::run() {
  while (run_epoch()) {
  }
}

namespace {

constexpr const char* kParamPrefix = "param/";
constexpr const char* kBestPrefix = "best/";
constexpr const char* kFirstPrefix = "adam.m/";
constexpr const char* kSecondPrefix = "adam.v/";

void append(Parameters<float>& out, const Parameters<float>& src, const std::string& prefix) {
  for (const auto& t : src) out.add(prefix + t.name, t.value.rows(), t.value.cols(), t.rank) = t.value;
}

void extract(Parameters<float>& dst, const Parameters<float>& state, const std::string& prefix) {
  for (auto& t : dst) {
    const auto& src = state[prefix + t.name];
    if (src.rows() != t.value.rows() || src.cols() != t.value.cols()) {
      throw DataError("training state tensor " + prefix + t.name + " has the wrong shape");
    }
    t.value = src;
  }
}

}  // namespace

void Trainer::save_state(const std::filesystem::path& path) const {
  Parameters<float> state;
  append(state, params_, kParamPrefix);
  append(state, best_, kBestPrefix);
  append(state, optimizer_.first_moment(), kFirstPrefix);
  append(state, optimizer_.second_moment(), kSecondPrefix);
  auto& counters = state.add("trainer.counters", 1, 5, 1);
  counters << static_cast<float>(epoch_), static_cast<float>(optimizer_.steps()), static_cast<float>(best_epoch_),
      static_cast<float>(stale_epochs_), has_best_ ? 1.0f : 0.0f;
  state.add("trainer.best_val", 1, 1, 1)(0, 0) = best_val_;
  auto& log = state.add("trainer.log", static_cast<Eigen::Index>(log_.size()), 4);
  for (std::size_t i = 0; i < log_.size(); ++i) {
    log.row(static_cast<Eigen::Index>(i)) << static_cast<float>(log_[i].train_loss), static_cast<float>(log_[i].val_mae),
        static_cast<float>(log_[i].val_rmse), static_cast<float>(log_[i].seconds);
  }
  write_checkpoint(state, path);
}

void Trainer::load_state(const std::filesystem::path& path) {
  const auto state = read_checkpoint(path);
  extract(params_, state, kParamPrefix);
  extract(best_, state, kBestPrefix);
  extract(optimizer_.first_moment(), state, kFirstPrefix);
  extract(optimizer_.second_moment(), state, kSecondPrefix);
  const auto& counters = state["trainer.counters"];
  if (counters.size() != 5) throw DataError("malformed training state counters");
  epoch_ = static_cast<std::size_t>(counters(0, 0));
  optimizer_.set_steps(static_cast<std::uint64_t>(counters(0, 1)));
  best_epoch_ = static_cast<std::size_t>(counters(0, 2));
  stale_epochs_ = static_cast<std::size_t>(counters(0, 3));
  has_best_ = counters(0, 4) != 0.0f;
  best_val_ = state["trainer.best_val"](0, 0);
  const auto& log = state["trainer.log"];
  log_.clear();
  for (Eigen::Index i = 0; i < log.rows(); ++i) {
    log_.push_back({static_cast<std::size_t>(i + 1), log(i, 0), log(i, 1), log(i, 2), log(i, 3)});
  }
}

#define STDEMAND_TRAINING(S)                                                                                       \
  template LossReport joint_loss<S>(const Mat<S>&, const Mat<S>&, const Mat<S>&, const Mat<S>&, const Mat<S>&,      \
                                    const Mat<S>&, const std::vector<int>&, std::size_t, LossKind, Mat<S>*, Mat<S>*); \
  template class AdamOptimizer<S>;                                                                                  \
  template void check_finite<S>(const Parameters<S>&, const char*);                                                 \
  template LossReport window_gradient<S>(const Parameters<S>&, const ForwardConfig&, const WindowData<S>&,          \
                                         const GraphContext<S>&, const std::vector<int>&, LossKind, Parameters<S>&);

STDEMAND_TRAINING(float)
STDEMAND_TRAINING(double)

}  // namespace stdemand
