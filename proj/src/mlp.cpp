#include "censor/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace censor {

std::string to_string(Head head) { return head == Head::sigmoid ? "sigmoid" : "linear"; }

Head head_from_string(const std::string& s) {
  if (s == "sigmoid") return Head::sigmoid;
  if (s == "linear") return Head::linear;
  throw ConfigError("unknown head '" + s + "'");
}

namespace {

std::vector<std::size_t> layer_offsets(const std::vector<int>& widths) {
  if (widths.size() < 2) throw ConfigError("mlp needs at least input and output widths");
  std::vector<std::size_t> off(widths.size());
  off[0] = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    if (widths[l] < 1 || widths[l + 1] < 1) throw ConfigError("mlp widths must be positive");
    off[l + 1] = off[l] + static_cast<std::size_t>(widths[l] + 1) * static_cast<std::size_t>(widths[l + 1]);
  }
  return off;
}

inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

inline double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

}  // namespace

Mlp::Mlp(std::vector<int> widths, Head head, std::uint64_t seed)
    : widths_(std::move(widths)), head_(head), seed_(seed) {
  offsets_ = layer_offsets(widths_);
  params_ = Vec::Zero(static_cast<Eigen::Index>(offsets_.back()));
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const int in = widths_[l], out = widths_[l + 1];
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double limit = std::sqrt(6.0 / (in + out));
    for (int i = 0; i < in * out; ++i) params_[static_cast<Eigen::Index>(offsets_[l]) + i] = limit * u(rng);
  }
}

Mlp Mlp::zeros(std::vector<int> widths, Head head) {
  Mlp net(std::move(widths), head, 0);
  net.params_.setZero();
  return net;
}

void Mlp::set_params(const Vec& params) {
  require_shape(params.size() == params_.size(), "mlp: parameter count mismatch");
  params_ = params;
}

Eigen::Map<const Mat> Mlp::weight(std::size_t layer) const {
  return {params_.data() + offsets_[layer], widths_[layer + 1], widths_[layer]};
}

Eigen::Map<const Vec> Mlp::bias(std::size_t layer) const {
  return {params_.data() + offsets_[layer] + static_cast<std::size_t>(widths_[layer]) * widths_[layer + 1],
          widths_[layer + 1]};
}

Mat Mlp::logits(const Mat& inputs, Tape& tape) const {
  require_shape(inputs.rows() == input_width(),
                "mlp: input width " + std::to_string(inputs.rows()) + " != " + std::to_string(input_width()));
  tape.activations.resize(num_layers());
  tape.activations[0] = inputs;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    Mat z = weight(l) * tape.activations[l];
    z.colwise() += bias(l);
    if (l + 1 < num_layers()) {
      tape.activations[l + 1] = z.array().tanh().matrix();
    } else {
      tape.logits = std::move(z);
    }
  }
  return tape.logits;
}

Mat Mlp::logits(const Mat& inputs) const {
  Tape tape;
  return logits(inputs, tape);
}

Mat Mlp::forward(const Mat& inputs) const {
  Mat z = logits(inputs);
  if (head_ == Head::sigmoid) z = z.unaryExpr([](double v) { return sigmoid(v); });
  return z;
}

Mat Mlp::backward(const Tape& tape, const Mat& dlogits, Vec* dparams) const {
  Mat dz = dlogits;
  for (std::size_t l = num_layers(); l-- > 0;) {
    const Mat& a = tape.activations[l];
    if (dparams) {
      const auto in = widths_[l], out = widths_[l + 1];
      Eigen::Map<Mat> dw(dparams->data() + offsets_[l], out, in);
      Eigen::Map<Vec> db(dparams->data() + offsets_[l] + static_cast<std::size_t>(in) * out, out);
      dw.noalias() += dz * a.transpose();
      db += dz.rowwise().sum();
    }
    Mat da = weight(l).transpose() * dz;
    if (l == 0) return da;
    dz = (da.array() * (1.0 - a.array().square())).matrix();
  }
  return dz;  // unreachable
}

Mat Mlp::vjp_input(const Mat& inputs, const Mat& cotangent) const {
  Tape tape;
  logits(inputs, tape);
  require_shape(cotangent.rows() == output_width() && cotangent.cols() == inputs.cols(),
                "vjp_input: cotangent shape mismatch");
  Mat dz = cotangent;
  if (head_ == Head::sigmoid) {
    dz = (cotangent.array() * tape.logits.unaryExpr([](double z) {
                                 const double p = sigmoid(z);
                                 return p * (1.0 - p);
                               }).array())
             .matrix();
  }
  return backward(tape, dz, nullptr);
}

Mat Mlp::grad_log_output(const Mat& inputs) const {
  if (head_ != Head::sigmoid) throw ConfigError("grad_log_output needs a sigmoid head");
  Tape tape;
  logits(inputs, tape);
  const Mat dz = tape.logits.unaryExpr([](double z) { return sigmoid(-z); });
  return backward(tape, dz, nullptr);
}

Vec Mlp::log_output(const Mat& inputs) const {
  if (head_ != Head::sigmoid || output_width() != 1) throw ConfigError("log_output needs a scalar sigmoid head");
  return logits(inputs).row(0).unaryExpr([](double z) { return log_sigmoid(z); }).transpose();
}

nlohmann::json Mlp::to_json() const {
  nlohmann::json j;
  j["widths"] = widths_;
  j["head"] = to_string(head_);
  j["activation"] = "tanh";
  j["seed"] = seed_;
  j["params"] = std::vector<double>(params_.data(), params_.data() + params_.size());
  return j;
}

Mlp Mlp::from_json(const nlohmann::json& j) {
  if (j.value("activation", "tanh") != "tanh") throw ConfigError("unsupported activation");
  Mlp net = Mlp::zeros(j.at("widths").get<std::vector<int>>(), head_from_string(j.at("head")));
  net.seed_ = j.value("seed", std::uint64_t{0});
  const auto p = j.at("params").get<std::vector<double>>();
  net.set_params(Eigen::Map<const Vec>(p.data(), static_cast<Eigen::Index>(p.size())));
  return net;
}

Mat with_time(const Points& x, std::optional<double> t_over_horizon) {
  if (!t_over_horizon) return x;
  Mat out(x.rows() + 1, x.cols());
  out.topRows(x.rows()) = x;
  out.row(x.rows()).setConstant(*t_over_horizon);
  return out;
}

double bce_alpha(double p, int y, double alpha, double clamp) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::domain_error("bce_alpha: prediction outside [0, 1]");
  p = std::clamp(p, clamp, 1.0 - clamp);
  return y == 1 ? -alpha * std::log(p) : -std::log(1.0 - p);
}

void TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (!(learning_rate > 0.0)) bad.push_back("learning_rate must be > 0");
  if (!(alpha > 0.0 && alpha <= 1.0)) bad.push_back("alpha must lie in (0, 1]");
  if (!(weight_decay >= 0.0)) bad.push_back("weight_decay must be >= 0");
  if (batch_size == 0) bad.push_back("batch_size must be >= 1");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) bad.push_back("ema_decay must lie in [0, 1)");
  if (!bad.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
          {"iterations", c.iterations},       {"batch_size", c.batch_size},
          {"alpha", c.alpha},                 {"seed", c.seed},
          {"beta1", c.beta1},                 {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},           {"ema_decay", c.ema_decay},
          {"clamp", c.clamp}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.alpha = j.value("alpha", c.alpha);
  c.seed = j.value("seed", c.seed);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.clamp = j.value("clamp", c.clamp);
  return c;
}

namespace {

// dL/dz of BCE_alpha through a sigmoid, computed from the logit.
Mat bce_dlogits(const Mat& z, const Vec& labels, double alpha, double scale) {
  Mat d(1, z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const double p = sigmoid(z(0, j));
    d(0, j) = scale * (labels[j] > 0.5 ? -alpha * (1.0 - p) : p);
  }
  return d;
}

double bce_from_logits(const Mat& z, const Vec& labels, double alpha, double clamp) {
  // a blown-up net; let the caller's finiteness check report it
  if (!z.allFinite()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (Eigen::Index j = 0; j < z.cols(); ++j) total += bce_alpha(sigmoid(z(0, j)), labels[j] > 0.5 ? 1 : 0, alpha, clamp);
  return total / static_cast<double>(z.cols());
}

class BatchCursor {
 public:
  BatchCursor(std::size_t n, std::size_t batch, std::mt19937_64& rng)
      : order_(n), batch_(std::min(batch, n)), rng_(rng) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<Eigen::Index> next() {
    if (pos_ + batch_ > order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    std::vector<Eigen::Index> idx(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return idx;
  }

 private:
  std::vector<Eigen::Index> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64& rng_;
};

void check_finite(double loss, std::size_t it) {
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << "training diverged: non-finite loss at iteration " << it;
    throw NumericError(os.str());
  }
}

}  // namespace

double mean_bce(const Mlp& net, const BinaryDataset& data, double alpha, double clamp) {
  return bce_from_logits(net.logits(data.inputs), data.labels, alpha, clamp);
}

Vec grad_params(const Mlp& net, const BinaryDataset& data, double alpha) {
  if (data.size() == 0) throw std::invalid_argument("grad_params: empty batch");
  Mlp::Tape tape;
  const Mat z = net.logits(data.inputs, tape);
  Vec g = Vec::Zero(static_cast<Eigen::Index>(net.num_params()));
  net.backward(tape, bce_dlogits(z, data.labels, alpha, 1.0 / static_cast<double>(data.size())), &g);
  return g;
}

AdamW::AdamW(std::size_t n, const TrainConfig& config)
    : config_(config), m_(Vec::Zero(static_cast<Eigen::Index>(n))), v_(Vec::Zero(static_cast<Eigen::Index>(n))) {}

void AdamW::step(Vec& params, const Vec& grad) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  m_ = b1 * m_ + (1.0 - b1) * grad;
  v_ = b2 * v_ + (1.0 - b2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  params *= 1.0 - config_.learning_rate * config_.weight_decay;
  params.array() -= config_.learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + config_.adam_eps);
}

TrainResult train(Mlp& net, const BinaryDataset& data, const TrainConfig& config) {
  config.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  require_shape(data.inputs.cols() == data.labels.size(), "train: inputs and labels differ in count");
  if (net.head() != Head::sigmoid || net.output_width() != 1)
    throw ConfigError("train: reward training needs a scalar sigmoid head");

  std::mt19937_64 rng(config.seed);
  BatchCursor cursor(data.size(), config.batch_size, rng);
  AdamW opt(net.num_params(), config);
  Vec params = net.params();
  Vec ema = params;
  TrainResult result;
  result.loss_trace.reserve(config.iterations);
  Mlp::Tape tape;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const auto idx = cursor.next();
    const Mat inputs = data.inputs(Eigen::all, idx);
    const Vec labels = data.labels(idx);
    const Mat z = net.logits(inputs, tape);
    const double loss = bce_from_logits(z, labels, config.alpha, config.clamp);
    check_finite(loss, it);
    result.loss_trace.push_back(loss);
    Vec g = Vec::Zero(params.size());
    net.backward(tape, bce_dlogits(z, labels, config.alpha, 1.0 / static_cast<double>(idx.size())), &g);
    opt.step(params, g);
    net.set_params(params);
    if (config.ema_decay > 0.0) ema = config.ema_decay * ema + (1.0 - config.ema_decay) * params;
  }
  if (config.ema_decay > 0.0 && config.iterations > 0) net.set_params(ema);
  return result;
}

TrainResult train_score(Mlp& net, const Points& data, const DiffusionGrid& grid,
                        const TrainConfig& config) {
  config.validate();
  const auto d = data.rows();
  if (data.cols() == 0) throw std::invalid_argument("train_score: empty dataset");
  if (net.input_width() != d + 1 || net.output_width() != d || net.head() != Head::linear)
    throw ConfigError("train_score: net must map d+1 inputs to d linear outputs");

  std::mt19937_64 rng(config.seed);
  BatchCursor cursor(static_cast<std::size_t>(data.cols()), config.batch_size, rng);
  std::uniform_int_distribution<std::size_t> pick_step(1, grid.num_steps());
  std::normal_distribution<double> normal;
  AdamW opt(net.num_params(), config);
  Vec params = net.params();
  Vec ema = params;
  TrainResult result;
  Mlp::Tape tape;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const auto idx = cursor.next();
    const auto b = static_cast<Eigen::Index>(idx.size());
    Mat inputs(d + 1, b);
    Mat eps(d, b);
    for (Eigen::Index j = 0; j < b; ++j) {
      const std::size_t k = pick_step(rng);
      const double a = grid.alpha(k);
      for (Eigen::Index r = 0; r < d; ++r) eps(r, j) = normal(rng);
      inputs.col(j).head(d) = std::sqrt(a) * data.col(idx[static_cast<std::size_t>(j)]) + std::sqrt(1.0 - a) * eps.col(j);
      inputs(d, j) = grid.time(k) / grid.schedule().horizon;
    }
    const Mat out = net.logits(inputs, tape);
    const Mat resid = out - eps;
    const double loss = resid.squaredNorm() / static_cast<double>(b);
    check_finite(loss, it);
    result.loss_trace.push_back(loss);
    Vec g = Vec::Zero(params.size());
    net.backward(tape, (2.0 / static_cast<double>(b)) * resid, &g);
    opt.step(params, g);
    net.set_params(params);
    if (config.ema_decay > 0.0) ema = config.ema_decay * ema + (1.0 - config.ema_decay) * params;
  }
  if (config.ema_decay > 0.0 && config.iterations > 0) net.set_params(ema);
  return result;
}

}  // namespace censor
