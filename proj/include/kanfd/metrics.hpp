#pragma once

#include <cmath>
#include <vector>

#include "kanfd/common.hpp"

namespace kanfd {

// Mean negative log softmax of the labeled class, log-sum-exp stabilized.
inline double cross_entropy(const Matrix& logits, const std::vector<int>& labels) {
  const Eigen::Index n = logits.rows();
  const Eigen::Index c = logits.cols();
  if (n == 0) throw DataError("cross_entropy: empty batch");
  if (c < 2) throw DataError("cross_entropy: needs at least two classes");
  if (static_cast<Eigen::Index>(labels.size()) != n)
    throw DataError("cross_entropy: label count mismatch");
  double total = 0.0;
  for (Eigen::Index s = 0; s < n; ++s) {
    if (labels[s] < 0 || labels[s] >= c) throw DataError("cross_entropy: label out of range");
    const double mx = logits.row(s).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index k = 0; k < c; ++k) sum += std::exp(logits(s, k) - mx);
    total += mx + std::log(sum) - logits(s, labels[s]);
  }
  return total / static_cast<double>(n);
}

// Row-wise argmax; ties go to the lowest class index.
inline std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(logits.rows());
  for (Eigen::Index s = 0; s < logits.rows(); ++s) {
    int best = 0;
    for (Eigen::Index k = 1; k < logits.cols(); ++k)
      if (logits(s, k) > logits(s, best)) best = static_cast<int>(k);
    out[s] = best;
  }
  return out;
}

inline std::vector<std::vector<int>> confusion_matrix(const std::vector<int>& predictions,
                                                      const std::vector<int>& labels,
                                                      int n_classes) {
  if (predictions.size() != labels.size())
    throw DataError("confusion_matrix: length mismatch");
  std::vector<std::vector<int>> cm(n_classes, std::vector<int>(n_classes, 0));
  for (std::size_t s = 0; s < labels.size(); ++s) {
    if (labels[s] < 0 || labels[s] >= n_classes || predictions[s] < 0 ||
        predictions[s] >= n_classes)
      throw DataError("confusion_matrix: class index out of range");
    cm[labels[s]][predictions[s]]++;
  }
  return cm;
}

// Macro-averaged F1 over the classes present in the labels; a class whose
// precision/recall denominator is zero scores 0.
inline double f1_score(const std::vector<int>& predictions, const std::vector<int>& labels,
                       int n_classes) {
  if (labels.empty()) throw DataError("f1_score: empty input");
  const auto cm = confusion_matrix(predictions, labels, n_classes);
  double sum = 0.0;
  int present = 0;
  for (int k = 0; k < n_classes; ++k) {
    int tp = cm[k][k], fp = 0, fn = 0, support = 0;
    for (int m = 0; m < n_classes; ++m) {
      if (m != k) {
        fp += cm[m][k];
        fn += cm[k][m];
      }
      support += cm[k][m];
    }
    if (support == 0) continue;
    ++present;
    const double denom = 2.0 * tp + fp + fn;
    sum += denom > 0.0 ? 2.0 * tp / denom : 0.0;
  }
  return present > 0 ? sum / present : 0.0;
}

}  // namespace kanfd
