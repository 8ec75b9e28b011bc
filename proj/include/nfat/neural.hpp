#pragma once

// One-hidden-layer feed-forward network with tanh hidden units and logistic
// outputs, trained on sum-of-squares error by Levenberg-Marquardt.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <json.hpp>

#include "nfat/util.hpp"

namespace nfat {

enum class Trainer { LevenbergMarquardt, GradientDescent };

struct MlpConfig {
  int input_dim = 10;
  int hidden_neurons = 20;
  int output_dim = 1;
  int epochs = 100;
  double lm_lambda0 = 1e-3;
  double lambda_up = 10.0;
  double lambda_down = 0.1;
  int max_retries = 10;
  Trainer trainer = Trainer::LevenbergMarquardt;
  // Gradient-descent fallback only.
  double learning_rate = 0.5;
  double momentum = 0.9;
  std::uint64_t seed = 1;

  bool operator==(const MlpConfig&) const = default;
};

inline void validate(const MlpConfig& cfg) {
  if (cfg.input_dim < 1) throw ContractViolation("MlpConfig: input_dim must be >= 1");
  if (cfg.hidden_neurons < 10 || cfg.hidden_neurons > 30)
    throw ContractViolation("MlpConfig: hidden_neurons must be in [10, 30]");
  if (cfg.output_dim < 1) throw ContractViolation("MlpConfig: output_dim must be >= 1");
  if (cfg.epochs < 1) throw ContractViolation("MlpConfig: epochs must be >= 1");
  if (!(cfg.lm_lambda0 > 0) || !(cfg.lambda_up > 1) || !(cfg.lambda_down > 0 && cfg.lambda_down < 1))
    throw ContractViolation("MlpConfig: invalid damping schedule");
  if (cfg.max_retries < 0) throw ContractViolation("MlpConfig: max_retries must be >= 0");
}

struct Mlp {
  Eigen::MatrixXd w1;  // hidden x input
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;  // output x hidden
  Eigen::VectorXd b2;
  Eigen::VectorXd norm_mean;
  Eigen::VectorXd norm_std;
  MlpConfig config;

  int input_dim() const { return static_cast<int>(w1.cols()); }
  int hidden() const { return static_cast<int>(w1.rows()); }
  int output_dim() const { return static_cast<int>(w2.rows()); }
  std::size_t parameter_count() const {
    return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size());
  }

  bool operator==(const Mlp& o) const {
    return w1 == o.w1 && b1 == o.b1 && w2 == o.w2 && b2 == o.b2 && norm_mean == o.norm_mean &&
           norm_std == o.norm_std && config == o.config;
  }

  // A network with every weight and bias zero and identity normalization.
  static Mlp zeros(int input_dim, int hidden, int outputs = 1) {
    Mlp m;
    m.w1 = Eigen::MatrixXd::Zero(hidden, input_dim);
    m.b1 = Eigen::VectorXd::Zero(hidden);
    m.w2 = Eigen::MatrixXd::Zero(outputs, hidden);
    m.b2 = Eigen::VectorXd::Zero(outputs);
    m.norm_mean = Eigen::VectorXd::Zero(input_dim);
    m.norm_std = Eigen::VectorXd::Ones(input_dim);
    m.config.input_dim = input_dim;
    m.config.hidden_neurons = hidden;
    m.config.output_dim = outputs;
    return m;
  }

  // Parameter layout: w1 row-major, b1, w2 row-major, b2.
  Eigen::VectorXd parameters() const {
    Eigen::VectorXd p(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < w1.rows(); ++r)
      for (Eigen::Index c = 0; c < w1.cols(); ++c) p[k++] = w1(r, c);
    for (Eigen::Index r = 0; r < b1.size(); ++r) p[k++] = b1[r];
    for (Eigen::Index r = 0; r < w2.rows(); ++r)
      for (Eigen::Index c = 0; c < w2.cols(); ++c) p[k++] = w2(r, c);
    for (Eigen::Index r = 0; r < b2.size(); ++r) p[k++] = b2[r];
    return p;
  }

  void set_parameters(const Eigen::VectorXd& p) {
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < w1.rows(); ++r)
      for (Eigen::Index c = 0; c < w1.cols(); ++c) w1(r, c) = p[k++];
    for (Eigen::Index r = 0; r < b1.size(); ++r) b1[r] = p[k++];
    for (Eigen::Index r = 0; r < w2.rows(); ++r)
      for (Eigen::Index c = 0; c < w2.cols(); ++c) w2(r, c) = p[k++];
    for (Eigen::Index r = 0; r < b2.size(); ++r) b2[r] = p[k++];
  }
};

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

namespace detail {

inline Eigen::VectorXd normalized(const Mlp& m, std::span<const double> x) {
  if (static_cast<int>(x.size()) != m.input_dim())
    throw ContractViolation("mlp: input dimension " + std::to_string(x.size()) + " != " +
                            std::to_string(m.input_dim()));
  Eigen::VectorXd v(m.input_dim());
  for (int k = 0; k < m.input_dim(); ++k) v[k] = (x[static_cast<std::size_t>(k)] - m.norm_mean[k]) / m.norm_std[k];
  return v;
}

}  // namespace detail

// Output pre-activations for an already-normalized input.
inline Eigen::VectorXd forward_logits_normalized(const Mlp& m, const Eigen::VectorXd& xn) {
  const Eigen::VectorXd h = (m.w1 * xn + m.b1).array().tanh().matrix();
  return m.w2 * h + m.b2;
}

inline Eigen::VectorXd forward_logits(const Mlp& m, std::span<const double> x) {
  return forward_logits_normalized(m, detail::normalized(m, x));
}

// Logistic output per unit, each in (0, 1).
inline Eigen::VectorXd forward_all(const Mlp& m, std::span<const double> x) {
  return forward_logits(m, x).unaryExpr([](double z) { return logistic(z); });
}

// Score of a single-output (2-class) network.
inline double forward(const Mlp& m, std::span<const double> x) {
  if (m.output_dim() != 1) throw ContractViolation("forward: network has " + std::to_string(m.output_dim()) + " outputs");
  return logistic(forward_logits(m, x)[0]);
}

// d(output o)/d(parameters) at normalized input xn; row o of the result.
inline Eigen::MatrixXd output_jacobian(const Mlp& m, const Eigen::VectorXd& xn) {
  const int H = m.hidden(), D = m.input_dim(), O = m.output_dim();
  const Eigen::VectorXd h = (m.w1 * xn + m.b1).array().tanh().matrix();
  const Eigen::VectorXd z = m.w2 * h + m.b2;
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(O, static_cast<Eigen::Index>(m.parameter_count()));
  const Eigen::Index off_b1 = H * D, off_w2 = off_b1 + H, off_b2 = off_w2 + O * H;
  for (int o = 0; o < O; ++o) {
    const double y = logistic(z[o]);
    const double s = y * (1.0 - y);
    for (int j = 0; j < H; ++j) {
      const double dh = s * m.w2(o, j) * (1.0 - h[j] * h[j]);
      for (int k = 0; k < D; ++k) jac(o, j * D + k) = dh * xn[k];
      jac(o, off_b1 + j) = dh;
      jac(o, off_w2 + o * H + j) = s * h[j];
    }
    jac(o, off_b2 + o) = s;
  }
  return jac;
}

struct TrainingReport {
  std::vector<double> epoch_error;  // sum-of-squares error after each epoch
  int accepted_epochs = 0;
  int skipped_epochs = 0;
  double initial_error = 0.0;
};

namespace detail {

// Normalized samples (n x dim) and targets (n x outputs).
struct TrainingSet {
  Eigen::MatrixXd x;
  Eigen::MatrixXd t;
};

// Batched forward pass: hidden activations (n x H) and outputs (n x O).
inline void forward_batch(const Mlp& m, const Eigen::MatrixXd& x, Eigen::MatrixXd& hidden, Eigen::MatrixXd& out) {
  hidden.noalias() = x * m.w1.transpose();
  hidden.rowwise() += m.b1.transpose();
  hidden = hidden.array().tanh().matrix();
  out.noalias() = hidden * m.w2.transpose();
  out.rowwise() += m.b2.transpose();
  out = out.unaryExpr([](double v) { return logistic(v); });
}

inline double sse(const Mlp& m, const TrainingSet& data) {
  Eigen::MatrixXd hidden, out;
  forward_batch(m, data.x, hidden, out);
  return (data.t - out).squaredNorm();
}

inline void train_lm(Mlp& m, const TrainingSet& data, TrainingReport& report) {
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto& cfg = m.config;
  const Eigen::Index P = static_cast<Eigen::Index>(m.parameter_count());
  const Eigen::Index O = m.output_dim(), H = m.hidden(), D = m.input_dim();
  const Eigen::Index n = data.x.rows();
  const Eigen::Index off_b1 = H * D, off_w2 = off_b1 + H, off_b2 = off_w2 + O * H;
  RowMatrix jac = RowMatrix::Zero(n * O, P);
  Eigen::VectorXd residual(n * O);
  Eigen::MatrixXd hidden, out;
  Eigen::MatrixXd normal(P, P);
  double lambda = cfg.lm_lambda0;
  double error = sse(m, data);
  report.initial_error = error;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    forward_batch(m, data.x, hidden, out);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index o = 0; o < O; ++o) {
        const double y = out(i, o);
        const double s = y * (1.0 - y);
        auto row = jac.row(i * O + o);
        for (Eigen::Index j = 0; j < H; ++j) {
          const double h = hidden(i, j);
          const double dh = s * m.w2(o, j) * (1.0 - h * h);
          row.segment(j * D, D) = dh * data.x.row(i);
          row[off_b1 + j] = dh;
          row[off_w2 + o * H + j] = s * h;
        }
        row[off_b2 + o] = s;
        residual[i * O + o] = data.t(i, o) - y;
      }
    }
    normal.setZero();
    normal.selfadjointView<Eigen::Lower>().rankUpdate(jac.transpose());
    const Eigen::VectorXd gradient = jac.transpose() * residual;
    const Eigen::VectorXd theta = m.parameters();

    bool accepted = false;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
      Eigen::MatrixXd damped = normal;
      damped.diagonal().array() += lambda;
      Eigen::LLT<Eigen::MatrixXd, Eigen::Lower> llt(damped);
      if (llt.info() == Eigen::Success) {
        const Eigen::VectorXd step = llt.solve(gradient);
        if (step.allFinite()) {
          m.set_parameters(theta + step);
          const double candidate = sse(m, data);
          if (std::isfinite(candidate) && candidate < error) {
            error = candidate;
            lambda = std::max(lambda * cfg.lambda_down, 1e-15);
            accepted = true;
            break;
          }
        }
      }
      m.set_parameters(theta);
      lambda = std::min(lambda * cfg.lambda_up, 1e15);
    }
    if (accepted) ++report.accepted_epochs;
    else ++report.skipped_epochs;
    report.epoch_error.push_back(error);
  }
}

inline void train_gd(Mlp& m, const TrainingSet& data, TrainingReport& report) {
  const auto& cfg = m.config;
  const Eigen::Index n = data.x.rows();
  const int H = m.hidden(), O = m.output_dim();
  report.initial_error = sse(m, data);
  Eigen::MatrixXd v_w1 = Eigen::MatrixXd::Zero(m.w1.rows(), m.w1.cols());
  Eigen::VectorXd v_b1 = Eigen::VectorXd::Zero(H);
  Eigen::MatrixXd v_w2 = Eigen::MatrixXd::Zero(O, H);
  Eigen::VectorXd v_b2 = Eigen::VectorXd::Zero(O);
  const double scale = 1.0 / static_cast<double>(std::max<Eigen::Index>(n, 1));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Batched backprop of the mean squared error.
    const Eigen::MatrixXd a = (data.x * m.w1.transpose()).rowwise() + m.b1.transpose();
    const Eigen::MatrixXd h = a.array().tanh().matrix();
    const Eigen::MatrixXd z = (h * m.w2.transpose()).rowwise() + m.b2.transpose();
    const Eigen::MatrixXd y = z.unaryExpr([](double v) { return logistic(v); });
    const Eigen::MatrixXd dz = ((y - data.t).array() * y.array() * (1.0 - y.array())).matrix() * (2.0 * scale);
    const Eigen::MatrixXd dh = ((dz * m.w2).array() * (1.0 - h.array().square())).matrix();
    v_w2 = cfg.momentum * v_w2 - cfg.learning_rate * (dz.transpose() * h);
    v_b2 = cfg.momentum * v_b2 - cfg.learning_rate * dz.colwise().sum().transpose();
    v_w1 = cfg.momentum * v_w1 - cfg.learning_rate * (dh.transpose() * data.x);
    v_b1 = cfg.momentum * v_b1 - cfg.learning_rate * dh.colwise().sum().transpose();
    m.w2 += v_w2;
    m.b2 += v_b2;
    m.w1 += v_w1;
    m.b1 += v_b1;
    report.epoch_error.push_back(sse(m, data));
    ++report.accepted_epochs;
  }
}

inline void check_finite(std::span<const std::vector<double>> rows, int dim, const char* which) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<int>(rows[i].size()) != dim)
      throw ContractViolation(std::string("train: ") + which + " sample " + std::to_string(i) + " has wrong dimension");
    for (double v : rows[i])
      if (!std::isfinite(v)) throw DomainError(std::string("train: non-finite feature in ") + which + " sample " + std::to_string(i));
  }
}

}  // namespace detail

// Multi-output training: `targets[i]` has output_dim entries in [0, 1].
inline Mlp train_multi(const MlpConfig& cfg, std::span<const std::vector<double>> samples,
                       std::span<const std::vector<double>> targets, TrainingReport* report_out = nullptr) {
  validate(cfg);
  if (samples.empty()) throw ContractViolation("train: no samples");
  if (samples.size() != targets.size()) throw ContractViolation("train: samples/targets size mismatch");
  detail::check_finite(samples, cfg.input_dim, "input");
  detail::check_finite(targets, cfg.output_dim, "target");

  const auto n = static_cast<Eigen::Index>(samples.size());
  const int D = cfg.input_dim;
  Mlp m = Mlp::zeros(D, cfg.hidden_neurons, cfg.output_dim);
  m.config = cfg;

  // z-score statistics from the training samples only.
  for (int k = 0; k < D; ++k) {
    double mean = 0;
    for (const auto& s : samples) mean += s[static_cast<std::size_t>(k)];
    mean /= static_cast<double>(n);
    double var = 0;
    for (const auto& s : samples) var += (s[static_cast<std::size_t>(k)] - mean) * (s[static_cast<std::size_t>(k)] - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    m.norm_mean[k] = mean;
    m.norm_std[k] = sd > 1e-12 ? sd : 1.0;
  }

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> init(-0.5, 0.5);
  Eigen::VectorXd theta(static_cast<Eigen::Index>(m.parameter_count()));
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] = init(rng);
  m.set_parameters(theta);

  detail::TrainingSet data;
  data.x.resize(n, D);
  data.t.resize(n, cfg.output_dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    for (int k = 0; k < D; ++k) data.x(i, k) = (s[static_cast<std::size_t>(k)] - m.norm_mean[k]) / m.norm_std[k];
    for (int o = 0; o < cfg.output_dim; ++o) data.t(i, o) = targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(o)];
  }

  TrainingReport report;
  if (cfg.trainer == Trainer::LevenbergMarquardt) detail::train_lm(m, data, report);
  else detail::train_gd(m, data, report);
  if (report_out) *report_out = std::move(report);
  return m;
}

// 2-class training: target 1 for positives, 0 for negatives.
inline Mlp train(const MlpConfig& cfg, std::span<const std::vector<double>> positives,
                 std::span<const std::vector<double>> negatives, TrainingReport* report = nullptr) {
  if (positives.empty() || negatives.empty())
    throw ContractViolation("train: positives and negatives must be non-empty");
  if (cfg.output_dim != 1) throw ContractViolation("train: 2-class training needs output_dim == 1");
  detail::check_finite(positives, cfg.input_dim, "positive");
  detail::check_finite(negatives, cfg.input_dim, "negative");
  std::vector<std::vector<double>> samples;
  std::vector<std::vector<double>> targets;
  samples.reserve(positives.size() + negatives.size());
  for (const auto& p : positives) {
    samples.push_back(p);
    targets.push_back({1.0});
  }
  for (const auto& q : negatives) {
    samples.push_back(q);
    targets.push_back({0.0});
  }
  return train_multi(cfg, samples, targets, report);
}

// Largest relative gap between analytic and central-difference derivatives
// of the first output with respect to every parameter. Derivatives below
// 1e-6 in magnitude are compared on an absolute scale.
inline double jacobian_check(const Mlp& m, std::span<const double> x, double h = 1e-5) {
  const Eigen::VectorXd xn = detail::normalized(m, x);
  const Eigen::VectorXd analytic = output_jacobian(m, xn).row(0).transpose();
  Mlp probe = m;
  const Eigen::VectorXd theta = m.parameters();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    Eigen::VectorXd t = theta;
    t[i] = theta[i] + h;
    probe.set_parameters(t);
    const double up = logistic(forward_logits_normalized(probe, xn)[0]);
    t[i] = theta[i] - h;
    probe.set_parameters(t);
    const double down = logistic(forward_logits_normalized(probe, xn)[0]);
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// --- serialization -------------------------------------------------------------

inline constexpr int kMlpFormatVersion = 1;

inline nlohmann::json to_json(const MlpConfig& c) {
  return {{"input_dim", c.input_dim},
          {"hidden_neurons", c.hidden_neurons},
          {"output_dim", c.output_dim},
          {"epochs", c.epochs},
          {"lm_lambda0", c.lm_lambda0},
          {"lambda_up", c.lambda_up},
          {"lambda_down", c.lambda_down},
          {"max_retries", c.max_retries},
          {"trainer", c.trainer == Trainer::LevenbergMarquardt ? "levenberg_marquardt" : "gradient_descent"},
          {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"seed", c.seed}};
}

// Missing fields keep the values already in `base`, so config files may be partial.
inline MlpConfig mlp_config_from_json(const nlohmann::json& j, MlpConfig base = {}) {
  try {
    base.input_dim = j.value("input_dim", base.input_dim);
    base.hidden_neurons = j.value("hidden_neurons", base.hidden_neurons);
    base.output_dim = j.value("output_dim", base.output_dim);
    base.epochs = j.value("epochs", base.epochs);
    base.lm_lambda0 = j.value("lm_lambda0", base.lm_lambda0);
    base.lambda_up = j.value("lambda_up", base.lambda_up);
    base.lambda_down = j.value("lambda_down", base.lambda_down);
    base.max_retries = j.value("max_retries", base.max_retries);
    if (j.contains("trainer")) {
      const auto t = j.at("trainer").get<std::string>();
      if (t == "levenberg_marquardt") base.trainer = Trainer::LevenbergMarquardt;
      else if (t == "gradient_descent") base.trainer = Trainer::GradientDescent;
      else throw ParseError("mlp config: unknown trainer '" + t + "'");
    }
    base.learning_rate = j.value("learning_rate", base.learning_rate);
    base.momentum = j.value("momentum", base.momentum);
    base.seed = j.value("seed", base.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("mlp config: ") + e.what());
  }
  return base;
}

namespace detail {

inline nlohmann::json row_major(const Eigen::MatrixXd& m) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) a.push_back(m(r, c));
  return a;
}

inline nlohmann::json vec(const Eigen::VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline void fill(const nlohmann::json& a, Eigen::MatrixXd& m, const char* what) {
  if (!a.is_array() || a.size() != static_cast<std::size_t>(m.size()))
    throw ParseError(std::string("mlp document: bad size for ") + what);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = a[k++].get<double>();
}

inline void fill(const nlohmann::json& a, Eigen::VectorXd& v, const char* what) {
  if (!a.is_array() || a.size() != static_cast<std::size_t>(v.size()))
    throw ParseError(std::string("mlp document: bad size for ") + what);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = a[static_cast<std::size_t>(i)].get<double>();
}

}  // namespace detail

inline nlohmann::json to_json(const Mlp& m) {
  return {{"format", "nfat-mlp"},
          {"version", kMlpFormatVersion},
          {"input_dim", m.input_dim()},
          {"hidden", m.hidden()},
          {"output_dim", m.output_dim()},
          {"w1", detail::row_major(m.w1)},
          {"b1", detail::vec(m.b1)},
          {"w2", detail::row_major(m.w2)},
          {"b2", detail::vec(m.b2)},
          {"norm_mean", detail::vec(m.norm_mean)},
          {"norm_std", detail::vec(m.norm_std)},
          {"config", to_json(m.config)}};
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "nfat-mlp" || j.value("version", 0) != kMlpFormatVersion)
      throw ParseError("mlp document: unsupported format or version");
    Mlp m = Mlp::zeros(j.at("input_dim").get<int>(), j.at("hidden").get<int>(), j.at("output_dim").get<int>());
    detail::fill(j.at("w1"), m.w1, "w1");
    detail::fill(j.at("b1"), m.b1, "b1");
    detail::fill(j.at("w2"), m.w2, "w2");
    detail::fill(j.at("b2"), m.b2, "b2");
    detail::fill(j.at("norm_mean"), m.norm_mean, "norm_mean");
    detail::fill(j.at("norm_std"), m.norm_std, "norm_std");
    m.config = mlp_config_from_json(j.at("config"));
    if ((m.norm_std.array() <= 0).any()) throw ParseError("mlp document: norm_std must be > 0");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("mlp document: ") + e.what());
  }
}

}  // namespace nfat
