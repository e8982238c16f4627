#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "stdemand/dataset.hpp"
#include "stdemand/graphs.hpp"
#include "stdemand/model.hpp"
#include "stdemand/parameters.hpp"

namespace stdemand {

enum class LossKind { l1, mse };

LossKind parse_loss_kind(const std::string& text);
std::string to_string(LossKind kind);

struct LossReport {
  double recon_loss = 0.0;
  double pred_loss = 0.0;
  double total = 0.0;
  std::size_t n_masked_entries = 0;
};

/// Reconstruction error over masked-and-observed history entries (normalized per step by that step's count,
/// then averaged over steps with a nonzero count) plus forecast error over all observed future entries.
/// Matrices are N x (steps * d_x), feature-major. Gradients are written when the pointers are non-null.
template <typename Scalar>
LossReport joint_loss(const Mat<Scalar>& recon, const Mat<Scalar>& pred, const Mat<Scalar>& history_target,
                      const Mat<Scalar>& history_observed, const Mat<Scalar>& future_target,
                      const Mat<Scalar>& future_observed, const std::vector<int>& masked, std::size_t n_features,
                      LossKind kind, Mat<Scalar>* d_recon = nullptr, Mat<Scalar>* d_pred = nullptr);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;
};

template <typename Scalar>
class AdamOptimizer {
 public:
  AdamOptimizer(const Parameters<Scalar>& like, AdamConfig config);

  /// Clips `grads` to the global norm limit, then applies one bias-corrected update. Returns the pre-clip norm.
  double step(Parameters<Scalar>& params, const Parameters<Scalar>& grads);

  const AdamConfig& config() const { return config_; }
  std::uint64_t steps() const { return steps_; }
  Parameters<Scalar>& first_moment() { return m_; }
  Parameters<Scalar>& second_moment() { return v_; }
  const Parameters<Scalar>& first_moment() const { return m_; }
  const Parameters<Scalar>& second_moment() const { return v_; }
  void set_steps(std::uint64_t steps) { steps_ = steps; }

 private:
  AdamConfig config_;
  Parameters<Scalar> m_;
  Parameters<Scalar> v_;
  std::uint64_t steps_ = 0;
};

double global_norm(const Parameters<float>& grads);
double global_norm(const Parameters<double>& grads);

/// Throws NumericalError naming the first tensor holding a NaN or infinity.
template <typename Scalar>
void check_finite(const Parameters<Scalar>& grads, const char* what);

/// Forward, loss and backward for one window. `grads` is overwritten.
template <typename Scalar>
LossReport window_gradient(const Parameters<Scalar>& params, const ForwardConfig& config, const WindowData<Scalar>& window,
                           const GraphContext<Scalar>& graph, const std::vector<int>& masked, LossKind kind,
                           Parameters<Scalar>& grads);

/// Stateless 64-bit mixing used to derive per-epoch and per-window seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t patience = 15;
  std::size_t mask_count = 6;
  MaskMode mask_mode = MaskMode::fixed_count;
  double mask_beta = 0.2;
  LossKind loss = LossKind::l1;
  std::uint64_t seed = 0;
  std::size_t workers = 1;  // > 1 averages gradients of that many windows per step, computed in parallel
  std::size_t val_stride = 1;
  AdamConfig adam;

  void validate() const;
  void apply(const std::map<std::string, std::string>& kv);
  std::map<std::string, std::string> to_map() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mae = 0.0;
  double val_rmse = 0.0;
  double seconds = 0.0;
};

void write_metric_log(const std::vector<EpochLog>& log, std::ostream& out);
void write_metric_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

/// Raised when the loss stops being finite; carries the best parameters seen so far.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, Parameters<float> last_good, std::size_t epoch)
      : NumericalError(what), last_good(std::move(last_good)), epoch(epoch) {}
  Parameters<float> last_good;
  std::size_t epoch;
};

/// Windows used for fitting and for model selection. Starts index forecast positions in the sources.
struct TrainingData {
  const WindowSource<float>* train = nullptr;
  std::vector<std::size_t> train_starts;
  const WindowSource<float>* val = nullptr;
  std::vector<std::size_t> val_starts;
  Scaler scaler;
};

struct ErrorSums {
  double abs = 0.0;
  double sq = 0.0;
  std::size_t count = 0;

  double mae() const;
  double rmse() const;
};

/// Forecast error (original units) over all nodes of the validation windows, with a seeded
/// set of nodes hidden in each window.
ErrorSums validation_error(const Parameters<float>& params, const ForwardConfig& config, const TrainConfig& train_config,
                           const TrainingData& data);

class Trainer {
 public:
  Trainer(ForwardConfig config, TrainConfig train_config, const TrainingData& data, Parameters<float> init);

  /// Runs one epoch and records its log line. Returns false once training has finished.
  bool run_epoch();
  /// Runs epochs until the budget is spent or early stopping triggers.
  void run();

  bool finished() const;
  std::size_t epoch() const { return epoch_; }
  std::uint64_t steps() const { return optimizer_.steps(); }
  const Parameters<float>& params() const { return params_; }
  const Parameters<float>& best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  const std::vector<EpochLog>& log() const { return log_; }
  std::function<void(const EpochLog&)> on_epoch;

  /// Everything needed to continue bit-identically, stored in the ICKP layout.
  void save_state(const std::filesystem::path& path) const;
  void load_state(const std::filesystem::path& path);

 private:
  double train_epoch(std::uint64_t epoch_seed);
  std::vector<int> draw_mask(std::mt19937_64& rng) const;

  ForwardConfig config_;
  TrainConfig train_config_;
  const TrainingData& data_;
  Parameters<float> params_;
  Parameters<float> best_;
  AdamOptimizer<float> optimizer_;
  std::vector<EpochLog> log_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t stale_epochs_ = 0;
  float best_val_ = 0.0f;
  bool has_best_ = false;
};

}  // namespace stdemand
