#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "censor/schedule.hpp"
#include "censor/types.hpp"

namespace censor {

enum class Head { sigmoid, linear };

std::string to_string(Head head);
Head head_from_string(const std::string& s);

/// Fully connected tanh network with a sigmoid or linear output head.
///
/// Parameters live in one flat vector, layer by layer: the weight matrix
/// (out x in, column-major) followed by the bias. Inputs and outputs are
/// batched column-wise. All evaluation methods are const and keep no state.
class Mlp {
 public:
  Mlp() = default;
  /// Glorot-uniform weights from `seed`, zero biases.
  Mlp(std::vector<int> widths, Head head, std::uint64_t seed);

  static Mlp zeros(std::vector<int> widths, Head head);

  const std::vector<int>& widths() const { return widths_; }
  Head head() const { return head_; }
  std::uint64_t seed() const { return seed_; }
  int input_width() const { return widths_.front(); }
  int output_width() const { return widths_.back(); }
  std::size_t num_layers() const { return widths_.size() - 1; }
  std::size_t num_params() const { return static_cast<std::size_t>(params_.size()); }

  const Vec& params() const { return params_; }
  void set_params(const Vec& params);

  /// Pre-head output.
  Mat logits(const Mat& inputs) const;
  /// Post-head output; sigmoid outputs lie strictly in (0, 1) for finite logits.
  Mat forward(const Mat& inputs) const;

  struct Tape {
    std::vector<Mat> activations;  // activations[0] is the input
    Mat logits;
  };
  Mat logits(const Mat& inputs, Tape& tape) const;

  /// Pull a cotangent on the logits back through the network. Returns the
  /// input cotangent; when `dparams` is given, adds the parameter cotangent.
  Mat backward(const Tape& tape, const Mat& dlogits, Vec* dparams) const;

  /// v^T d(forward)/d(input) per column.
  Mat vjp_input(const Mat& inputs, const Mat& cotangent) const;

  /// Gradient of log(sigmoid output) w.r.t. the inputs. Sigmoid head only;
  /// uses d log sigma(z) = sigma(-z) dz.
  Mat grad_log_output(const Mat& inputs) const;
  /// log(sigmoid output) computed as -softplus(-z).
  Vec log_output(const Mat& inputs) const;

  nlohmann::json to_json() const;
  static Mlp from_json(const nlohmann::json& j);

 private:
  Eigen::Map<const Mat> weight(std::size_t layer) const;
  Eigen::Map<const Vec> bias(std::size_t layer) const;
  std::size_t offset(std::size_t layer) const { return offsets_[layer]; }

  std::vector<int> widths_;
  std::vector<std::size_t> offsets_;
  Head head_ = Head::linear;
  std::uint64_t seed_ = 0;
  Vec params_;
};

/// Stacks inputs with a time feature row t/T (omitted when t is empty).
Mat with_time(const Points& x, std::optional<double> t_over_horizon);

/// -alpha y log p - (1 - y) log(1 - p) with p clamped to [clamp, 1 - clamp].
/// Throws std::domain_error when p is not a probability.
double bce_alpha(double p, int y, double alpha, double clamp = 1e-7);

struct TrainConfig {
  double learning_rate = 3e-4;
  double weight_decay = 0.05;
  std::size_t iterations = 1000;
  std::size_t batch_size = 128;
  double alpha = 1.0;  // BCE weight on the benign term
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double ema_decay = 0.0;  // 0 disables parameter averaging
  double clamp = 1e-7;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Binary examples for a reward head: inputs (already time-stacked) and 0/1 labels.
struct BinaryDataset {
  Mat inputs;
  Vec labels;

  std::size_t size() const { return static_cast<std::size_t>(labels.size()); }
};

/// Mean BCE_alpha over the dataset.
double mean_bce(const Mlp& net, const BinaryDataset& data, double alpha, double clamp = 1e-7);

/// Gradient of mean_bce w.r.t. the parameters.
Vec grad_params(const Mlp& net, const BinaryDataset& data, double alpha);

/// Decoupled-weight-decay Adam.
class AdamW {
 public:
  AdamW(std::size_t n, const TrainConfig& config);
  void step(Vec& params, const Vec& grad);

 private:
  TrainConfig config_;
  Vec m_, v_;
  std::size_t t_ = 0;
};

struct TrainResult {
  std::vector<double> loss_trace;
};

/// Minibatch AdamW on mean BCE_alpha. Deterministic given config.seed.
/// Throws NumericError on a non-finite loss.
TrainResult train(Mlp& net, const BinaryDataset& data, const TrainConfig& config);

/// Denoising objective E|eps_net(x_t, t/T) - eps|^2 with t uniform over the
/// grid's positive indices. The net must take d+1 inputs and emit d outputs.
TrainResult train_score(Mlp& net, const Points& data, const DiffusionGrid& grid,
                        const TrainConfig& config);

}  // namespace censor
