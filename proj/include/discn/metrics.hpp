#pragma once

#include <optional>
#include <vector>

#include "discn/common.hpp"

namespace discn {

struct RocPoint {
  double fpr = 0, tpr = 0;
};

// labels: 1 = positive class. Threshold rule: prob > 0.5 predicts positive
// (exactly 0.5 predicts negative).
struct BinaryMetrics {
  double accuracy = 0;
  double recall = 0;
  double precision = 0;
  double f1 = 0;
  std::optional<double> auc;  // empty when the fold is single-class
  std::vector<RocPoint> roc;
};

BinaryMetrics compute_metrics(const std::vector<double>& probs, const std::vector<int>& labels);

// Probability that a random positive outranks a random negative (ties count
// half). Empty when only one class is present.
std::optional<double> auc_concordance(const std::vector<double>& probs, const std::vector<int>& labels);

// Threshold-sweep ROC from (0,0) to (1,1), ties grouped.
std::vector<RocPoint> roc_points(const std::vector<double>& probs, const std::vector<int>& labels);

double auc_trapezoid(const std::vector<RocPoint>& roc);

}  // namespace discn
