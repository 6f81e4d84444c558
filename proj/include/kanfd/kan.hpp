#pragma once

#include <cmath>
#include <fstream>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kanfd/bspline.hpp"
#include "kanfd/common.hpp"
#include "kanfd/rng.hpp"

namespace kanfd {

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_deriv(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

// One trainable activation: phi(x) = silu_weight * silu(x) + spline_weight * sum_i coef_i B_i(x).
struct ActivationEdge {
  double silu_weight = 1.0;
  double spline_weight = 1.0;
  Vector coef;  // length G + k, on the owning input dimension's grid
};

// Evaluates only the spline part sum_i coef_i B_i(x).
inline double eval_spline(const ActivationEdge& edge, const SplineGrid& grid, double x) {
  double vals[32];
  const int first = basis_nonzero(grid, x, vals);
  double s = 0.0;
  for (int r = 0; r <= grid.order; ++r) s += edge.coef[first + r] * vals[r];
  return s;
}

inline double eval_edge(const ActivationEdge& edge, const SplineGrid& grid, double x) {
  return edge.silu_weight * silu(x) + edge.spline_weight * eval_spline(edge, grid, x);
}

class KanLayer {
 public:
  KanLayer() = default;
  KanLayer(int n_in, int n_out) : n_in_(n_in), n_out_(n_out), grids_(n_in), edges_(n_in * n_out) {}

  int n_in() const { return n_in_; }
  int n_out() const { return n_out_; }
  ActivationEdge& edge(int i, int j) { return edges_[i * n_out_ + j]; }
  const ActivationEdge& edge(int i, int j) const { return edges_[i * n_out_ + j]; }
  SplineGrid& grid(int i) { return grids_[i]; }
  const SplineGrid& grid(int i) const { return grids_[i]; }

  // output[s][j] = sum_i phi_{i,j}(batch[s][i])
  Matrix forward(const Matrix& batch) const {
    if (batch.cols() != n_in_) throw DataError("KanLayer::forward: input width mismatch");
    Matrix out = Matrix::Zero(batch.rows(), n_out_);
    double vals[32];
    for (Eigen::Index s = 0; s < batch.rows(); ++s) {
      for (int i = 0; i < n_in_; ++i) {
        const double x = batch(s, i);
        const int first = basis_nonzero(grids_[i], x, vals);
        const double r = silu(x);
        const int k = grids_[i].order;
        for (int j = 0; j < n_out_; ++j) {
          const ActivationEdge& e = edges_[i * n_out_ + j];
          double spl = 0.0;
          for (int m = 0; m <= k; ++m) spl += e.coef[first + m] * vals[m];
          out(s, j) += e.silu_weight * r + e.spline_weight * spl;
        }
      }
    }
    return out;
  }

 private:
  int n_in_ = 0, n_out_ = 0;
  std::vector<SplineGrid> grids_;
  std::vector<ActivationEdge> edges_;
};

struct Standardizer {
  std::vector<double> mean, std;

  Matrix apply(const Matrix& raw) const {
    if (static_cast<std::size_t>(raw.cols()) != mean.size())
      throw DataError("Standardizer: feature width mismatch");
    Matrix out(raw.rows(), raw.cols());
    for (Eigen::Index c = 0; c < raw.cols(); ++c) {
      const double s = std[c];
      if (s < 1e-12)
        out.col(c).setZero();
      else
        out.col(c) = (raw.col(c).array() - mean[c]) / s;
    }
    return out;
  }
};

class KanModel {
 public:
  KanModel() = default;

  const std::vector<int>& widths() const { return widths_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  KanLayer& layer(int l) { return layers_[l]; }
  const KanLayer& layer(int l) const { return layers_[l]; }
  const SplineConfig& spline_config() const { return spline_; }
  Standardizer& standardizer() { return standardizer_; }
  const Standardizer& standardizer() const { return standardizer_; }

  // Random initialization with grids adapted progressively to the data each
  // layer actually sees. Expects standardized inputs.
  static KanModel init(const std::vector<int>& widths, const SplineConfig& config,
                       const Matrix& inputs, Rng& rng) {
    if (widths.size() < 2) throw ConfigError("KanModel: widths needs at least [n_0, n_1]");
    config.validate();
    if (inputs.cols() != widths[0]) throw DataError("KanModel::init: input width mismatch");

    KanModel model;
    model.widths_ = widths;
    model.spline_ = config;
    model.standardizer_.mean.assign(widths[0], 0.0);
    model.standardizer_.std.assign(widths[0], 1.0);
    const int nb = config.grid_intervals + config.order;
    const double coef_std = 0.1 / nb;

    Matrix cur = inputs;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      KanLayer layer(widths[l], widths[l + 1]);
      for (int i = 0; i < widths[l]; ++i) {
        std::vector<double> col(cur.rows());
        for (Eigen::Index s = 0; s < cur.rows(); ++s) col[s] = cur(s, i);
        layer.grid(i) = make_grid(col, config);
      }
      for (int i = 0; i < widths[l]; ++i)
        for (int j = 0; j < widths[l + 1]; ++j) {
          ActivationEdge& e = layer.edge(i, j);
          e.silu_weight = 1.0;
          e.spline_weight = 1.0;
          e.coef = Vector(nb);
          for (int m = 0; m < nb; ++m) e.coef[m] = rng.normal(0.0, coef_std);
        }
      cur = layer.forward(cur);
      model.layers_.push_back(std::move(layer));
    }
    return model;
  }

  // Assembles a model from explicit parts (tests, deserialization).
  static KanModel from_parts(std::vector<int> widths, SplineConfig config,
                             std::vector<KanLayer> layers, Standardizer standardizer) {
    KanModel m;
    m.widths_ = std::move(widths);
    m.spline_ = config;
    m.layers_ = std::move(layers);
    m.standardizer_ = std::move(standardizer);
    for (std::size_t l = 0; l + 1 < m.widths_.size(); ++l)
      if (m.layers_[l].n_in() != m.widths_[l] || m.layers_[l].n_out() != m.widths_[l + 1])
        throw ConfigError("KanModel: layer dimensions do not match widths");
    return m;
  }

  Matrix forward(const Matrix& batch, bool apply_standardizer = false) const {
    Matrix cur = apply_standardizer ? standardizer_.apply(batch) : batch;
    for (const KanLayer& layer : layers_) cur = layer.forward(cur);
    return cur;
  }

 private:
  std::vector<int> widths_;
  SplineConfig spline_;
  std::vector<KanLayer> layers_;
  Standardizer standardizer_;
};

inline Matrix model_forward(const KanModel& model, const Matrix& batch,
                            bool apply_standardizer = false) {
  return model.forward(batch, apply_standardizer);
}

inline Matrix layer_forward(const KanLayer& layer, const Matrix& batch) {
  return layer.forward(batch);
}

// Re-expresses an edge's spline part on a new grid by least squares over the
// given sample points; the SiLU weight is untouched. Rank-deficient systems
// fall back to the minimal-norm solution.
inline ActivationEdge refit_edge_to_grid(const ActivationEdge& edge, const SplineGrid& old_grid,
                                         const SplineGrid& new_grid,
                                         const std::vector<double>& samples) {
  const Eigen::Index n = static_cast<Eigen::Index>(samples.size());
  const int nb = new_grid.num_basis();
  Matrix design = Matrix::Zero(n, nb);
  Vector target(n);
  double vals[32];
  for (Eigen::Index s = 0; s < n; ++s) {
    const int first = basis_nonzero(new_grid, samples[s], vals);
    for (int m = 0; m <= new_grid.order; ++m) design(s, first + m) = vals[m];
    target[s] = eval_spline(edge, old_grid, samples[s]);
  }
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(design);
  ActivationEdge out = edge;
  out.coef = cod.solve(target);
  return out;
}

// --- JSON serialization -----------------------------------------------------
// Doubles are emitted in shortest-exact decimal form, so a round trip is
// bit-lossless for 64-bit floats.

inline nlohmann::json model_to_json(const KanModel& model) {
  nlohmann::json j;
  j["widths"] = model.widths();
  j["spline_config"] = {{"order", model.spline_config().order},
                        {"grid_intervals", model.spline_config().grid_intervals},
                        {"adaptivity", model.spline_config().adaptivity}};
  j["standardizer"] = {{"mean", model.standardizer().mean}, {"std", model.standardizer().std}};
  nlohmann::json layers = nlohmann::json::array();
  for (int l = 0; l < model.num_layers(); ++l) {
    const KanLayer& layer = model.layer(l);
    nlohmann::json jl;
    nlohmann::json grids = nlohmann::json::array();
    for (int i = 0; i < layer.n_in(); ++i) grids.push_back(layer.grid(i).knots);
    jl["grids"] = grids;
    nlohmann::json edges = nlohmann::json::array();
    for (int i = 0; i < layer.n_in(); ++i)
      for (int jj = 0; jj < layer.n_out(); ++jj) {
        const ActivationEdge& e = layer.edge(i, jj);
        std::vector<double> coef(e.coef.data(), e.coef.data() + e.coef.size());
        edges.push_back({{"silu_weight", e.silu_weight},
                         {"spline_weight", e.spline_weight},
                         {"coef", coef}});
      }
    jl["edges"] = edges;
    layers.push_back(jl);
  }
  j["layers"] = layers;
  return j;
}

inline KanModel model_from_json(const nlohmann::json& j) {
  std::vector<int> widths = j.at("widths").get<std::vector<int>>();
  SplineConfig config;
  config.order = j.at("spline_config").at("order").get<int>();
  config.grid_intervals = j.at("spline_config").at("grid_intervals").get<int>();
  config.adaptivity = j.at("spline_config").at("adaptivity").get<double>();
  Standardizer std_;
  std_.mean = j.at("standardizer").at("mean").get<std::vector<double>>();
  std_.std = j.at("standardizer").at("std").get<std::vector<double>>();

  std::vector<KanLayer> layers;
  const auto& jlayers = j.at("layers");
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    KanLayer layer(widths[l], widths[l + 1]);
    const auto& jl = jlayers.at(l);
    for (int i = 0; i < widths[l]; ++i) {
      layer.grid(i).knots = jl.at("grids").at(i).get<std::vector<double>>();
      layer.grid(i).order = config.order;
      layer.grid(i).validate();
    }
    for (int i = 0; i < widths[l]; ++i)
      for (int jj = 0; jj < widths[l + 1]; ++jj) {
        const auto& je = jl.at("edges").at(i * widths[l + 1] + jj);
        ActivationEdge& e = layer.edge(i, jj);
        e.silu_weight = je.at("silu_weight").get<double>();
        e.spline_weight = je.at("spline_weight").get<double>();
        std::vector<double> coef = je.at("coef").get<std::vector<double>>();
        e.coef = Eigen::Map<Vector>(coef.data(), coef.size());
      }
    layers.push_back(std::move(layer));
  }
  return KanModel::from_parts(std::move(widths), config, std::move(layers), std::move(std_));
}

inline void save_model(const KanModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << model_to_json(model).dump(2) << "\n";
}

inline KanModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file: " + path);
  nlohmann::json j;
  in >> j;
  return model_from_json(j);
}

}  // namespace kanfd
