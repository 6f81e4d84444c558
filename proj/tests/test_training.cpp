#include <catch2/catch_amalgamated.hpp>

#include "kanfd/training.hpp"
#include "oracles.hpp"

using namespace kanfd;

namespace {

SplineGrid toy_grid(int k, int g, double lo, double hi) {
  SplineConfig cfg;
  cfg.order = k;
  cfg.grid_intervals = g;
  cfg.adaptivity = 1.0;
  return make_grid({lo, hi}, cfg);
}

std::vector<double*> parameter_pointers(KanModel& model) {
  std::vector<double*> ptrs;
  for (int l = 0; l < model.num_layers(); ++l) {
    KanLayer& layer = model.layer(l);
    for (int i = 0; i < layer.n_in(); ++i)
      for (int j = 0; j < layer.n_out(); ++j) {
        ActivationEdge& e = layer.edge(i, j);
        ptrs.push_back(&e.silu_weight);
        ptrs.push_back(&e.spline_weight);
        for (Eigen::Index m = 0; m < e.coef.size(); ++m) ptrs.push_back(&e.coef[m]);
      }
  }
  return ptrs;
}

void check_gradient(KanModel& model, const Matrix& X, const std::vector<int>& y,
                    double lambda, double tol) {
  const Vector analytic = loss_gradient(model, X, y, lambda);
  auto ptrs = parameter_pointers(model);
  REQUIRE(static_cast<Eigen::Index>(ptrs.size()) == analytic.size());
  const double h = 1e-5;
  for (std::size_t p = 0; p < ptrs.size(); ++p) {
    const double saved = *ptrs[p];
    *ptrs[p] = saved + h;
    const double up = total_loss(model, X, y, lambda);
    *ptrs[p] = saved - h;
    const double dn = total_loss(model, X, y, lambda);
    *ptrs[p] = saved;
    const double fd = (up - dn) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(analytic[p]), 1e-6});
    REQUIRE(std::abs(fd - analytic[p]) / denom < tol);
  }
}

Matrix gaussian_clusters(Rng& rng, int per_class, double sep, std::vector<int>& labels) {
  Matrix X(2 * per_class, 1);
  labels.resize(2 * per_class);
  for (int s = 0; s < per_class; ++s) {
    X(s, 0) = rng.normal(-sep, 0.5);
    labels[s] = 0;
    X(per_class + s, 0) = rng.normal(sep, 0.5);
    labels[per_class + s] = 1;
  }
  return X;
}

}  // namespace

TEST_CASE("cross entropy basics") {
  Matrix saturated(1, 3);
  saturated << 1000.0, 0.0, 0.0;
  REQUIRE(cross_entropy(saturated, {0}) == Catch::Approx(0.0).margin(1e-12));

  Matrix uniform(2, 2);
  uniform.setConstant(0.7);
  REQUIRE(cross_entropy(uniform, {0, 1}) == Catch::Approx(std::log(2.0)).epsilon(1e-12));

  REQUIRE_THROWS_AS(cross_entropy(Matrix(0, 2), {}), DataError);
}

TEST_CASE("cross entropy matches the naive oracle") {
  Rng rng(1);
  Matrix logits(4, 3);
  std::vector<int> labels(4);
  for (Eigen::Index s = 0; s < 4; ++s) {
    for (Eigen::Index c = 0; c < 3; ++c) logits(s, c) = rng.uniform(-3.0, 3.0);
    labels[s] = static_cast<int>(rng.next_below(3));
  }
  REQUIRE(std::abs(cross_entropy(logits, labels) - oracle::cross_entropy(logits, labels)) < 1e-10);
}

TEST_CASE("edge_std zero cases") {
  KanLayer layer(1, 1);
  layer.grid(0) = toy_grid(3, 4, -1.0, 1.0);
  layer.edge(0, 0).silu_weight = 0.0;
  layer.edge(0, 0).spline_weight = 0.0;
  layer.edge(0, 0).coef = Vector::Zero(7);
  Matrix batch(5, 1);
  batch << -1.0, -0.5, 0.0, 0.5, 1.0;
  REQUIRE(edge_std(layer, batch)(0, 0) == 0.0);

  // single sample: zero deviation for any edge
  Rng rng(2);
  KanLayer live(2, 2);
  for (int i = 0; i < 2; ++i) live.grid(i) = toy_grid(3, 4, -1.0, 1.0);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      live.edge(i, j).coef = Vector(7);
      for (int m = 0; m < 7; ++m) live.edge(i, j).coef[m] = rng.normal();
    }
  REQUIRE(edge_std(live, Matrix::Random(1, 2)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("edge_std matches the two-pass oracle") {
  Rng rng(3);
  KanLayer layer(1, 1);
  layer.grid(0) = toy_grid(3, 5, -2.0, 2.0);
  layer.edge(0, 0).silu_weight = rng.normal();
  layer.edge(0, 0).spline_weight = rng.normal();
  layer.edge(0, 0).coef = Vector(8);
  for (int m = 0; m < 8; ++m) layer.edge(0, 0).coef[m] = rng.normal();
  Matrix batch(10, 1);
  std::vector<double> phis;
  for (int s = 0; s < 10; ++s) {
    batch(s, 0) = rng.uniform(-2.0, 2.0);
    phis.push_back(eval_edge(layer.edge(0, 0), layer.grid(0), batch(s, 0)));
  }
  REQUIRE(std::abs(edge_std(layer, batch)(0, 0) - oracle::population_std(phis)) < 1e-10);
}

TEST_CASE("edge_std scales linearly with spline coefficients when silu weight is zero") {
  Rng rng(4);
  KanLayer layer(1, 1);
  layer.grid(0) = toy_grid(3, 5, -2.0, 2.0);
  layer.edge(0, 0).silu_weight = 0.0;
  layer.edge(0, 0).spline_weight = 1.0;
  layer.edge(0, 0).coef = Vector(8);
  for (int m = 0; m < 8; ++m) layer.edge(0, 0).coef[m] = rng.normal();
  Matrix batch = Matrix::Random(20, 1) * 2.0;
  const double base = edge_std(layer, batch)(0, 0);
  layer.edge(0, 0).coef *= 3.5;
  REQUIRE(edge_std(layer, batch)(0, 0) == Catch::Approx(3.5 * base).epsilon(1e-9));
}

TEST_CASE("attribution output level is all ones and dead edges get no credit") {
  Rng rng(5);
  Matrix X = Matrix::Random(32, 2) * 2.0;
  SplineConfig cfg;
  cfg.order = 3;
  cfg.grid_intervals = 5;
  KanModel model = KanModel::init({2, 1}, cfg, X, rng);
  // kill the first input's edge entirely
  model.layer(0).edge(0, 0).silu_weight = 0.0;
  model.layer(0).edge(0, 0).spline_weight = 0.0;
  model.layer(0).edge(0, 0).coef.setZero();

  AttributionReport report = attribution(model, X);
  REQUIRE(report.node_scores.back().size() == 1);
  REQUIRE(report.node_scores.back()[0] == 1.0);
  REQUIRE(report.input_scores()[0] == 0.0);
  REQUIRE(report.input_scores()[1] == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("attribution matches the independent recursion oracle") {
  Rng rng(6);
  Matrix X = Matrix::Random(24, 3) * 2.0;
  SplineConfig cfg;
  cfg.order = 3;
  cfg.grid_intervals = 4;
  KanModel model = KanModel::init({3, 2}, cfg, X, rng);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j)
      for (int m = 0; m < 7; ++m) model.layer(0).edge(i, j).coef[m] = rng.normal(0.0, 0.8);

  AttributionReport report = attribution(model, X);
  const auto A = oracle::attribution_scores(report.edge_std);
  for (int i = 0; i < 3; ++i)
    REQUIRE(std::abs(report.input_scores()[i] - A[0][i]) < 1e-10);
}

TEST_CASE("single-layer attribution closed form up to [5,4]") {
  Rng rng(7);
  for (int n_in = 2; n_in <= 5; ++n_in)
    for (int n_out = 2; n_out <= 4; ++n_out) {
      Matrix X = Matrix::Random(16, n_in) * 2.0;
      SplineConfig cfg;
      cfg.order = 3;
      cfg.grid_intervals = 4;
      KanModel model = KanModel::init({n_in, n_out}, cfg, X, rng);
      AttributionReport report = attribution(model, X);
      const Matrix& E = report.edge_std[0];
      for (int i = 0; i < n_in; ++i) {
        double want = 0.0;
        for (int j = 0; j < n_out; ++j) {
          const double colsum = E.col(j).sum();
          if (colsum > 0.0) want += E(i, j) / colsum;
        }
        REQUIRE(std::abs(report.input_scores()[i] - want) < 1e-10);
      }
    }
}

TEST_CASE("attribution scores are nonnegative on random models") {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix X = Matrix::Random(20, 2) * 2.0;
    SplineConfig cfg;
    cfg.order = 3;
    cfg.grid_intervals = 4;
    KanModel model = KanModel::init({2, 3, 2}, cfg, X, rng);
    AttributionReport report = attribution(model, X);
    for (const Vector& level : report.node_scores) REQUIRE(level.minCoeff() >= 0.0);
    for (std::size_t l = 0; l < report.layer_sums.size(); ++l)
      REQUIRE(report.layer_sums[l] == Catch::Approx(report.node_scores[l].sum()));
  }
}

TEST_CASE("regularization closed forms") {
  AttributionReport report;
  report.node_scores = {Vector(2), Vector::Ones(1)};
  report.node_scores[0] << 0.7, 0.0;
  report.layer_sums = {0.7};
  REQUIRE(regularization(report, 0.0) == 0.0);
  // single nonzero score: entropy of a point mass vanishes
  REQUIRE(regularization(report, 2.0) == Catch::Approx(2.0 * 0.7).epsilon(1e-12));

  AttributionReport two;
  two.node_scores = {Vector(2), Vector::Ones(1)};
  two.node_scores[0] << 0.3, 0.3;
  two.layer_sums = {0.6};
  REQUIRE(regularization(two, 1.5) ==
          Catch::Approx(1.5 * (0.6 + std::log(2.0))).epsilon(1e-12));

  AttributionReport empty;
  empty.node_scores = {Vector::Zero(3), Vector::Ones(2)};
  empty.layer_sums = {0.0};
  REQUIRE(regularization(empty, 1.0) == 0.0);
}

TEST_CASE("analytic gradient matches central differences on [2,2] and [3,2]") {
  Rng rng(9);
  for (int n_in : {2, 3}) {
    Matrix X = Matrix::Random(8, n_in) * 1.5;
    std::vector<int> y(8);
    for (int s = 0; s < 8; ++s) y[s] = static_cast<int>(rng.next_below(2));
    SplineConfig cfg;
    cfg.order = 3;
    cfg.grid_intervals = 5;
    KanModel model = KanModel::init({n_in, 2}, cfg, X, rng);
    check_gradient(model, X, y, 0.01, 1e-4);
    check_gradient(model, X, y, 0.0, 1e-4);
  }
}

TEST_CASE("analytic gradient survives a two-layer model") {
  Rng rng(10);
  const int n = 8;
  Matrix X = Matrix::Random(n, 2) * 1.5;
  std::vector<int> y = {0, 1, 1, 0, 1, 0, 0, 1};
  SplineConfig cfg;
  cfg.order = 3;
  cfg.grid_intervals = 4;
  // wide grids so hidden activations stay away from the clamped span edges
  std::vector<KanLayer> layers;
  for (auto [n_in, n_out] : std::vector<std::pair<int, int>>{{2, 3}, {3, 2}}) {
    KanLayer layer(n_in, n_out);
    for (int i = 0; i < n_in; ++i) layer.grid(i) = toy_grid(3, 4, -8.0, 8.0);
    for (int i = 0; i < n_in; ++i)
      for (int j = 0; j < n_out; ++j) {
        layer.edge(i, j).silu_weight = rng.normal(1.0, 0.2);
        layer.edge(i, j).spline_weight = rng.normal(1.0, 0.2);
        layer.edge(i, j).coef = Vector(7);
        for (int m = 0; m < 7; ++m) layer.edge(i, j).coef[m] = rng.normal(0.0, 0.3);
      }
    layers.push_back(layer);
  }
  Standardizer st;
  st.mean = {0.0, 0.0};
  st.std = {1.0, 1.0};
  KanModel model = KanModel::from_parts({2, 3, 2}, cfg, layers, st);
  check_gradient(model, X, y, 0.01, 2e-4);
}

TEST_CASE("training separates two Gaussian clusters") {
  Rng rng(11);
  std::vector<int> labels;
  Matrix X = gaussian_clusters(rng, 40, 3.0, labels);
  SplineConfig scfg;
  scfg.order = 3;
  scfg.grid_intervals = 5;
  scfg.adaptivity = 0.05;
  Rng init_rng(123);
  KanModel model = KanModel::init({1, 2}, scfg, X, init_rng);
  TrainConfig tcfg;
  tcfg.epochs = 60;
  tcfg.seed = 123;
  auto [trained, history] = train(model, X, labels, tcfg);
  REQUIRE(history.loss.size() == 60);
  for (int e = 0; e + 1 < 10; ++e) REQUIRE(history.loss[e + 1] <= history.loss[e] + 1e-6);
  REQUIRE(f1_score(predict(trained, X), labels, 2) == 1.0);
  for (double r : history.reg) REQUIRE(r == 0.0);
}

TEST_CASE("zero epochs returns the model unchanged") {
  Rng rng(12);
  Matrix X = Matrix::Random(16, 2);
  SplineConfig cfg;
  cfg.order = 3;
  cfg.grid_intervals = 4;
  KanModel model = KanModel::init({2, 2}, cfg, X, rng);
  TrainConfig tcfg;
  tcfg.epochs = 0;
  auto [same, history] = train(model, X, std::vector<int>(16, 0), tcfg);
  REQUIRE(history.loss.empty());
  REQUIRE(model_to_json(same) == model_to_json(model));
}

TEST_CASE("training is deterministic for a fixed seed") {
  Rng rng(13);
  std::vector<int> labels;
  Matrix X = gaussian_clusters(rng, 20, 2.0, labels);
  SplineConfig scfg;
  scfg.order = 3;
  scfg.grid_intervals = 5;
  TrainConfig tcfg;
  tcfg.epochs = 25;
  tcfg.lambda = 0.005;

  auto run = [&]() {
    Rng init_rng(999);
    KanModel model = KanModel::init({1, 2}, scfg, X, init_rng);
    return train(model, X, labels, tcfg).second;
  };
  const TrainHistory a = run();
  const TrainHistory b = run();
  REQUIRE(a.loss == b.loss);
  REQUIRE(a.reg == b.reg);
}

TEST_CASE("adaptive training refreshes grids on schedule and stays stable") {
  Rng rng(14);
  std::vector<int> labels;
  Matrix X = gaussian_clusters(rng, 30, 2.5, labels);
  SplineConfig scfg;
  scfg.order = 4;
  scfg.grid_intervals = 8;
  scfg.adaptivity = 0.0;
  Rng init_rng(77);
  KanModel model = KanModel::init({1, 2}, scfg, X, init_rng);
  const std::vector<double> before = model.layer(0).grid(0).knots;
  TrainConfig tcfg;
  tcfg.epochs = 40;
  tcfg.adaptive = true;
  tcfg.grid_update_every = 10;
  tcfg.grid_update_until = 30;
  auto [trained, history] = train(model, X, labels, tcfg);
  REQUIRE(trained.layer(0).grid(0).knots != before);
  REQUIRE(std::isfinite(history.loss.back()));
  REQUIRE(f1_score(predict(trained, X), labels, 2) == 1.0);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  Matrix X(4, 1);
  X << -1.0, -0.5, 0.5, 1.0;
  SplineConfig cfg;
  cfg.order = 3;
  cfg.grid_intervals = 4;
  Rng rng(15);
  KanModel model = KanModel::init({1, 2}, cfg, X, rng);
  model.layer(0).edge(0, 0).silu_weight = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tcfg;
  tcfg.epochs = 1;
  REQUIRE_THROWS_AS(train(model, X, {0, 0, 1, 1}, tcfg), NumericError);
}

TEST_CASE("predict argmax and tie-breaking") {
  Matrix logits(3, 2);
  logits << 3.0, 1.0, 2.0, 2.0, -1.0, 0.0;
  const auto picks = argmax_rows(logits);
  REQUIRE(picks == std::vector<int>{0, 0, 1});
}

TEST_CASE("predict matches a per-row argmax oracle") {
  Rng rng(16);
  Matrix X = Matrix::Random(12, 2);
  SplineConfig cfg;
  cfg.order = 3;
  cfg.grid_intervals = 4;
  KanModel model = KanModel::init({2, 3}, cfg, X, rng);
  const Matrix logits = model.forward(X);
  const auto got = predict(model, X);
  for (Eigen::Index s = 0; s < X.rows(); ++s) {
    int best = 0;
    for (int c = 1; c < 3; ++c)
      if (logits(s, c) > logits(s, best)) best = c;
    REQUIRE(got[s] == best);
  }
}

TEST_CASE("macro F1 hand cases and oracle") {
  REQUIRE(f1_score({0, 1, 0, 1}, {0, 1, 0, 1}, 2) == 1.0);

  // all predicted class 1, labels half and half -> (0 + 2/3)/2
  std::vector<int> pred(10, 1), truth(10, 1);
  for (int i = 0; i < 5; ++i) truth[i] = 0;
  REQUIRE(f1_score(pred, truth, 2) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));

  Rng rng(17);
  std::vector<int> p(50), t(50);
  for (int i = 0; i < 50; ++i) {
    p[i] = static_cast<int>(rng.next_below(4));
    t[i] = static_cast<int>(rng.next_below(4));
  }
  REQUIRE(f1_score(p, t, 4) == Catch::Approx(oracle::macro_f1(p, t, 4)).margin(1e-12));

  REQUIRE_THROWS_AS(f1_score({}, {}, 2), DataError);
}

TEST_CASE("history CSV export") {
  TrainHistory h;
  h.loss = {0.5, 0.25};
  h.reg = {0.1, 0.05};
  h.val_f1 = {0.9, 1.0};
  const std::string path = "history_test.csv";
  h.to_csv(path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  REQUIRE(line == "epoch,loss,reg,val_f1");
  std::getline(in, line);
  REQUIRE(line.rfind("1,0.5,0.1,0.9", 0) == 0);
  std::remove(path.c_str());
}
