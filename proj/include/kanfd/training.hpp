#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <utility>
#include <vector>

#include "kanfd/common.hpp"
#include "kanfd/kan.hpp"
#include "kanfd/metrics.hpp"
#include "kanfd/rng.hpp"

namespace kanfd {

struct TrainConfig {
  int epochs = 80;
  double learning_rate = 0.01;
  double lambda = 0.0;  // attribution regularizer weight
  bool adaptive = false;
  int grid_update_every = 10;
  int grid_update_until = 150;
  std::uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  void validate() const {
    if (epochs < 0) throw ConfigError("TrainConfig: epochs must be >= 0");
    if (lambda < 0.0) throw ConfigError("TrainConfig: lambda must be >= 0");
    if (adaptive && grid_update_until > epochs)
      throw ConfigError("TrainConfig: grid_update_until must be <= epochs");
    if (adaptive && grid_update_every < 1)
      throw ConfigError("TrainConfig: grid_update_every must be >= 1");
  }
};

// E_{l,i,j}, A_{l,i} and per-level sums. node_scores has one vector per node
// level 0..L; level L is the output level whose scores are 1 by definition.
struct AttributionReport {
  std::vector<Matrix> edge_std;
  std::vector<Vector> node_scores;
  std::vector<double> layer_sums;

  const Vector& input_scores() const { return node_scores.front(); }
};

struct TrainHistory {
  std::vector<double> loss;  // cross-entropy
  std::vector<double> reg;   // lambda-weighted regularizer value
  std::vector<double> val_f1;  // per-epoch validation F1 when a val set is given

  void to_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << "epoch,loss,reg,val_f1\n";
    for (std::size_t e = 0; e < loss.size(); ++e) {
      out << (e + 1) << "," << format_double(loss[e]) << "," << format_double(reg[e]) << ",";
      if (e < val_f1.size()) out << format_double(val_f1[e]);
      out << "\n";
    }
  }
};

// Population standard deviation of each activation over the batch.
inline Matrix edge_std(const KanLayer& layer, const Matrix& inputs) {
  const Eigen::Index n = inputs.rows();
  Matrix mean = Matrix::Zero(layer.n_in(), layer.n_out());
  Matrix var = Matrix::Zero(layer.n_in(), layer.n_out());
  for (Eigen::Index s = 0; s < n; ++s)
    for (int i = 0; i < layer.n_in(); ++i) {
      const double x = inputs(s, i);
      for (int j = 0; j < layer.n_out(); ++j) mean(i, j) += eval_edge(layer.edge(i, j), layer.grid(i), x);
    }
  mean /= static_cast<double>(n);
  for (Eigen::Index s = 0; s < n; ++s)
    for (int i = 0; i < layer.n_in(); ++i) {
      const double x = inputs(s, i);
      for (int j = 0; j < layer.n_out(); ++j) {
        const double d = eval_edge(layer.edge(i, j), layer.grid(i), x) - mean(i, j);
        var(i, j) += d * d;
      }
    }
  return (var / static_cast<double>(n)).cwiseSqrt();
}

namespace detail {

// Backward recursion from output-level unit scores; columns whose incoming
// deviations sum to zero contribute nothing.
inline void scores_from_edge_std(const std::vector<Matrix>& E, std::vector<Vector>& scores,
                                 std::vector<double>& sums) {
  const int L = static_cast<int>(E.size());
  scores.assign(L + 1, Vector());
  sums.assign(L, 0.0);
  scores[L] = Vector::Ones(E[L - 1].cols());
  for (int l = L - 1; l >= 0; --l) {
    scores[l] = Vector::Zero(E[l].rows());
    for (Eigen::Index j = 0; j < E[l].cols(); ++j) {
      const double colsum = E[l].col(j).sum();
      if (colsum <= 0.0) continue;
      const double w = scores[l + 1][j] / colsum;
      for (Eigen::Index i = 0; i < E[l].rows(); ++i) scores[l][i] += E[l](i, j) * w;
    }
    sums[l] = scores[l].sum();
  }
}

}  // namespace detail

inline AttributionReport attribution(const KanModel& model, const Matrix& inputs) {
  AttributionReport report;
  Matrix cur = inputs;
  for (int l = 0; l < model.num_layers(); ++l) {
    report.edge_std.push_back(edge_std(model.layer(l), cur));
    cur = model.layer(l).forward(cur);
  }
  detail::scores_from_edge_std(report.edge_std, report.node_scores, report.layer_sums);
  return report;
}

// lambda * sum_l [ A_l + H(A_l) ] with H the entropy of the normalized
// scores; 0*ln 0 = 0 and all-zero levels contribute nothing.
inline double regularization(const AttributionReport& report, double lambda) {
  double acc = 0.0;
  for (std::size_t l = 0; l < report.layer_sums.size(); ++l) {
    const double total = report.layer_sums[l];
    if (total <= 0.0) continue;
    acc += total;
    for (Eigen::Index i = 0; i < report.node_scores[l].size(); ++i) {
      const double p = report.node_scores[l][i] / total;
      if (p > 0.0) acc -= p * std::log(p);
    }
  }
  return lambda * acc;
}

namespace detail {

// Full-batch trainer. The loss is cross-entropy plus the attribution
// regularizer; the regularizer gradient flows through every E_{l,i,j}
// (deviations are differentiable in the edge outputs), including the effect
// of earlier layers on later layers' inputs.
class Trainer {
 public:
  Trainer(KanModel model, const Matrix& X, const std::vector<int>& y, TrainConfig cfg)
      : model_(std::move(model)), X_(X), y_(y), cfg_(cfg) {
    const int L = model_.num_layers();
    n_ = X.rows();
    layers_.resize(L);
    std::size_t total = 0;
    for (int l = 0; l < L; ++l) {
      LayerState& st = layers_[l];
      st.n_in = model_.layer(l).n_in();
      st.n_out = model_.layer(l).n_out();
      st.nb = model_.spline_config().grid_intervals + model_.spline_config().order;
      st.param_base = total;
      total += static_cast<std::size_t>(st.n_in) * st.n_out * (2 + st.nb);
    }
    n_params_ = total;
    adam_m_ = Vector::Zero(total);
    adam_v_ = Vector::Zero(total);
  }

  std::pair<KanModel, TrainHistory> run(const Matrix* X_val, const std::vector<int>* y_val) {
    TrainHistory history;
    for (int epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      if (cfg_.adaptive && epoch % cfg_.grid_update_every == 0 &&
          epoch <= cfg_.grid_update_until)
        update_grids();
      const auto [ce, reg] = forward(cfg_.lambda > 0.0);
      if (!std::isfinite(ce) || !std::isfinite(reg))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
      Vector grad = backward();
      adam_step(grad);
      history.loss.push_back(ce);
      history.reg.push_back(reg);
      if (X_val && y_val)
        history.val_f1.push_back(
            f1_score(argmax_rows(model_.forward(*X_val)), *y_val,
                     model_.widths().back()));
    }
    return {std::move(model_), std::move(history)};
  }

  double loss_once() {
    const auto [ce, reg] = forward(cfg_.lambda > 0.0);
    return ce + reg;
  }

  Vector gradient_once() {
    forward(cfg_.lambda > 0.0);
    return backward();
  }

 private:
  struct LayerState {
    int n_in = 0, n_out = 0, nb = 0;
    std::size_t param_base = 0;
    Matrix in;          // N x n_in
    Matrix silu_vals;   // N x n_in
    Matrix basis;       // N x (n_in*(k+1))
    Eigen::MatrixXi basis_first;  // N x n_in
    Matrix spline_vals; // N x (n_in*n_out)
    Matrix out;         // N x n_out
    Matrix mean_phi, E; // n_in x n_out
    bool basis_valid = false;
  };

  std::size_t param_index(const LayerState& st, int i, int j) const {
    return st.param_base + (static_cast<std::size_t>(i) * st.n_out + j) * (2 + st.nb);
  }

  void compute_basis(int l) {
    LayerState& st = layers_[l];
    const KanLayer& layer = model_.layer(l);
    const int k = model_.spline_config().order;
    st.silu_vals.resize(n_, st.n_in);
    st.basis.resize(n_, st.n_in * (k + 1));
    st.basis_first.resize(n_, st.n_in);
    double vals[32];
    for (Eigen::Index s = 0; s < n_; ++s)
      for (int i = 0; i < st.n_in; ++i) {
        const double x = st.in(s, i);
        st.silu_vals(s, i) = silu(x);
        st.basis_first(s, i) = basis_nonzero(layer.grid(i), x, vals);
        for (int m = 0; m <= k; ++m) st.basis(s, i * (k + 1) + m) = vals[m];
      }
    st.basis_valid = true;
  }

  // Returns (cross-entropy, lambda-weighted regularizer).
  std::pair<double, double> forward(bool with_attribution) {
    const int L = model_.num_layers();
    const int k = model_.spline_config().order;
    for (int l = 0; l < L; ++l) {
      LayerState& st = layers_[l];
      st.in = (l == 0) ? X_ : layers_[l - 1].out;
      if (l > 0 || !st.basis_valid) compute_basis(l);
      const KanLayer& layer = model_.layer(l);
      st.spline_vals.resize(n_, st.n_in * st.n_out);
      st.out = Matrix::Zero(n_, st.n_out);
      for (Eigen::Index s = 0; s < n_; ++s)
        for (int i = 0; i < st.n_in; ++i) {
          const int first = st.basis_first(s, i);
          const double* b = &st.basis(s, i * (k + 1));
          const double r = st.silu_vals(s, i);
          for (int j = 0; j < st.n_out; ++j) {
            const ActivationEdge& e = layer.edge(i, j);
            double spl = 0.0;
            for (int m = 0; m <= k; ++m) spl += e.coef[first + m] * b[m];
            st.spline_vals(s, i * st.n_out + j) = spl;
            st.out(s, j) += e.silu_weight * r + e.spline_weight * spl;
          }
        }
      if (with_attribution) compute_edge_std(l);
    }
    const double ce = cross_entropy(layers_[L - 1].out, y_);
    double reg = 0.0;
    if (with_attribution) {
      std::vector<Matrix> E;
      for (const LayerState& st : layers_) E.push_back(st.E);
      detail::scores_from_edge_std(E, scores_, sums_);
      AttributionReport tmp;
      tmp.edge_std = std::move(E);
      tmp.node_scores = scores_;
      tmp.layer_sums = sums_;
      reg = regularization(tmp, cfg_.lambda);
    }
    return {ce, reg};
  }

  void compute_edge_std(int l) {
    LayerState& st = layers_[l];
    const KanLayer& layer = model_.layer(l);
    st.mean_phi = Matrix::Zero(st.n_in, st.n_out);
    st.E = Matrix::Zero(st.n_in, st.n_out);
    for (Eigen::Index s = 0; s < n_; ++s)
      for (int i = 0; i < st.n_in; ++i) {
        const double r = st.silu_vals(s, i);
        for (int j = 0; j < st.n_out; ++j) {
          const ActivationEdge& e = layer.edge(i, j);
          st.mean_phi(i, j) += e.silu_weight * r + e.spline_weight * st.spline_vals(s, i * st.n_out + j);
        }
      }
    st.mean_phi /= static_cast<double>(n_);
    for (Eigen::Index s = 0; s < n_; ++s)
      for (int i = 0; i < st.n_in; ++i) {
        const double r = st.silu_vals(s, i);
        for (int j = 0; j < st.n_out; ++j) {
          const ActivationEdge& e = layer.edge(i, j);
          const double d = e.silu_weight * r + e.spline_weight * st.spline_vals(s, i * st.n_out + j) -
                           st.mean_phi(i, j);
          st.E(i, j) += d * d;
        }
      }
    st.E = (st.E / static_cast<double>(n_)).cwiseSqrt();
  }

  // Adjoints of the regularizer w.r.t. each E_{l,i,j}, reverse-accumulated
  // through the score recursion (levels increase away from the inputs).
  std::vector<Matrix> regularizer_edge_std_adjoints() {
    const int L = model_.num_layers();
    std::vector<Matrix> barE(L);
    std::vector<Vector> barA(L + 1);
    auto direct = [&](int l) -> Vector {
      Vector d = Vector::Zero(scores_[l].size());
      const double total = sums_[l];
      if (total <= 0.0) return d;
      double entropy = 0.0;
      for (Eigen::Index i = 0; i < scores_[l].size(); ++i) {
        const double p = scores_[l][i] / total;
        if (p > 0.0) entropy -= p * std::log(p);
      }
      for (Eigen::Index i = 0; i < scores_[l].size(); ++i) {
        const double p = scores_[l][i] / total;
        d[i] = p > 0.0 ? cfg_.lambda * (1.0 - (std::log(p) + entropy) / total) : 0.0;
      }
      return d;
    };
    barA[0] = direct(0);
    for (int l = 0; l < L; ++l) {
      const Matrix& E = layers_[l].E;
      barE[l] = Matrix::Zero(E.rows(), E.cols());
      Vector prop = Vector::Zero(E.cols());
      for (Eigen::Index j = 0; j < E.cols(); ++j) {
        const double colsum = E.col(j).sum();
        if (colsum <= 0.0) continue;
        double t = 0.0;
        for (Eigen::Index i = 0; i < E.rows(); ++i) t += barA[l][i] * E(i, j);
        const double a_next = scores_[l + 1][j];
        for (Eigen::Index p = 0; p < E.rows(); ++p)
          barE[l](p, j) = a_next * (barA[l][p] / colsum - t / (colsum * colsum));
        prop[j] = t / colsum;
      }
      barA[l + 1] = (l + 1 < L) ? (direct(l + 1) + prop).eval() : prop;
    }
    return barE;
  }

  Vector backward() {
    const int L = model_.num_layers();
    const int k = model_.spline_config().order;
    Vector grad = Vector::Zero(n_params_);
    const bool with_reg = cfg_.lambda > 0.0;
    std::vector<Matrix> barE;
    if (with_reg) barE = regularizer_edge_std_adjoints();

    // dCE/dlogits = (softmax - onehot)/N
    const Matrix& logits = layers_[L - 1].out;
    Matrix delta(n_, logits.cols());
    for (Eigen::Index s = 0; s < n_; ++s) {
      const double mx = logits.row(s).maxCoeff();
      double sum = 0.0;
      for (Eigen::Index c = 0; c < logits.cols(); ++c) sum += std::exp(logits(s, c) - mx);
      for (Eigen::Index c = 0; c < logits.cols(); ++c)
        delta(s, c) = std::exp(logits(s, c) - mx) / sum / static_cast<double>(n_);
      delta(s, y_[s]) -= 1.0 / static_cast<double>(n_);
    }

    double vals[32], derivs[32];
    for (int l = L - 1; l >= 0; --l) {
      LayerState& st = layers_[l];
      const KanLayer& layer = model_.layer(l);
      const bool need_input_grad = l > 0;
      Matrix delta_prev;
      if (need_input_grad) delta_prev = Matrix::Zero(n_, st.n_in);
      for (Eigen::Index s = 0; s < n_; ++s)
        for (int i = 0; i < st.n_in; ++i) {
          const double x = st.in(s, i);
          const double r = st.silu_vals(s, i);
          const int first = st.basis_first(s, i);
          const double* b = &st.basis(s, i * (k + 1));
          double dx = 0.0;
          double rp = 0.0;
          if (need_input_grad) rp = silu_deriv(x);
          bool have_derivs = false;
          for (int j = 0; j < st.n_out; ++j) {
            const ActivationEdge& e = layer.edge(i, j);
            const double spl = st.spline_vals(s, i * st.n_out + j);
            double g = delta(s, j);
            if (with_reg) {
              const double ev = st.E(i, j);
              if (ev > 0.0 && barE[l](i, j) != 0.0) {
                const double phi = e.silu_weight * r + e.spline_weight * spl;
                g += barE[l](i, j) * (phi - st.mean_phi(i, j)) / (static_cast<double>(n_) * ev);
              }
            }
            const std::size_t base = param_index(st, i, j);
            grad[base] += g * r;
            grad[base + 1] += g * spl;
            const double gb = g * e.spline_weight;
            for (int m = 0; m <= k; ++m) grad[base + 2 + first + m] += gb * b[m];
            if (need_input_grad) {
              if (!have_derivs) {
                basis_nonzero_deriv(layer.grid(i), x, vals, derivs);
                have_derivs = true;
              }
              double dspl = 0.0;
              for (int m = 0; m <= k; ++m) dspl += e.coef[first + m] * derivs[m];
              dx += g * (e.silu_weight * rp + e.spline_weight * dspl);
            }
          }
          if (need_input_grad) delta_prev(s, i) = dx;
        }
      if (need_input_grad) delta = std::move(delta_prev);
    }
    return grad;
  }

  void adam_step(const Vector& grad) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
    std::size_t idx = 0;
    for (int l = 0; l < model_.num_layers(); ++l) {
      LayerState& st = layers_[l];
      KanLayer& layer = model_.layer(l);
      for (int i = 0; i < st.n_in; ++i)
        for (int j = 0; j < st.n_out; ++j) {
          ActivationEdge& e = layer.edge(i, j);
          auto update = [&](double& p) {
            adam_m_[idx] = cfg_.beta1 * adam_m_[idx] + (1.0 - cfg_.beta1) * grad[idx];
            adam_v_[idx] = cfg_.beta2 * adam_v_[idx] + (1.0 - cfg_.beta2) * grad[idx] * grad[idx];
            p -= cfg_.learning_rate * (adam_m_[idx] / bc1) /
                 (std::sqrt(adam_v_[idx] / bc2) + cfg_.adam_eps);
            ++idx;
          };
          update(e.silu_weight);
          update(e.spline_weight);
          for (int m = 0; m < st.nb; ++m) update(e.coef[m]);
        }
    }
  }

  // Rebuild each layer's grids from its current inputs and carry the spline
  // parts over by least squares.
  void update_grids() {
    forward(false);  // refresh per-layer inputs under current parameters
    const SplineConfig& cfg = model_.spline_config();
    for (int l = 0; l < model_.num_layers(); ++l) {
      LayerState& st = layers_[l];
      KanLayer& layer = model_.layer(l);
      for (int i = 0; i < st.n_in; ++i) {
        std::vector<double> samples(n_);
        for (Eigen::Index s = 0; s < n_; ++s) samples[s] = st.in(s, i);
        SplineGrid fresh = make_grid(samples, cfg);
        Matrix design = Matrix::Zero(n_, fresh.num_basis());
        double vals[32];
        for (Eigen::Index s = 0; s < n_; ++s) {
          const int first = basis_nonzero(fresh, samples[s], vals);
          for (int m = 0; m <= fresh.order; ++m) design(s, first + m) = vals[m];
        }
        Eigen::CompleteOrthogonalDecomposition<Matrix> cod(design);
        Matrix targets(n_, st.n_out);
        for (int j = 0; j < st.n_out; ++j)
          for (Eigen::Index s = 0; s < n_; ++s)
            targets(s, j) = eval_spline(layer.edge(i, j), layer.grid(i), samples[s]);
        Matrix solved = cod.solve(targets);
        for (int j = 0; j < st.n_out; ++j) layer.edge(i, j).coef = solved.col(j);
        layer.grid(i) = std::move(fresh);
      }
      st.basis_valid = false;
    }
  }

  KanModel model_;
  Matrix X_;
  std::vector<int> y_;
  TrainConfig cfg_;
  Eigen::Index n_ = 0;
  std::size_t n_params_ = 0;
  std::vector<LayerState> layers_;
  std::vector<Vector> scores_;
  std::vector<double> sums_;
  Vector adam_m_, adam_v_;
  long step_ = 0;
};

}  // namespace detail

// Full-batch Adam on cross-entropy + attribution regularizer. Returns the
// trained copy; the input model is untouched.
inline std::pair<KanModel, TrainHistory> train(const KanModel& model, const Matrix& features,
                                               const std::vector<int>& labels,
                                               const TrainConfig& config,
                                               const Matrix* val_features = nullptr,
                                               const std::vector<int>* val_labels = nullptr) {
  config.validate();
  if (features.rows() == 0) throw DataError("train: empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != features.rows())
    throw DataError("train: label count mismatch");
  if (config.epochs == 0) return {model, TrainHistory{}};
  detail::Trainer trainer(model, features, labels, config);
  return trainer.run(val_features, val_labels);
}

inline std::vector<int> predict(const KanModel& model, const Matrix& features,
                                bool apply_standardizer = false) {
  return argmax_rows(model.forward(features, apply_standardizer));
}

// Analytic gradient of the total loss over all parameters, flattened per
// layer as [silu_weight, spline_weight, coef...] per edge (exposed for
// verification against finite differences).
inline Vector loss_gradient(const KanModel& model, const Matrix& features,
                            const std::vector<int>& labels, double lambda) {
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.lambda = lambda;
  cfg.learning_rate = 0.0;
  detail::Trainer trainer(model, features, labels, cfg);
  return trainer.gradient_once();
}

inline double total_loss(const KanModel& model, const Matrix& features,
                         const std::vector<int>& labels, double lambda) {
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.lambda = lambda;
  detail::Trainer trainer(model, features, labels, cfg);
  return trainer.loss_once();
}

}  // namespace kanfd
