#include "discn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace discn {

std::optional<double> auc_concordance(const std::vector<double>& probs, const std::vector<int>& labels) {
  long np = 0, nn = 0;
  for (int l : labels) (l == 1 ? np : nn)++;
  if (np == 0 || nn == 0) return std::nullopt;
  double concordant = 0;
  for (size_t i = 0; i < probs.size(); ++i) {
    if (labels[i] != 1) continue;
    for (size_t j = 0; j < probs.size(); ++j) {
      if (labels[j] == 1) continue;
      if (probs[i] > probs[j])
        concordant += 1.0;
      else if (probs[i] == probs[j])
        concordant += 0.5;
    }
  }
  return concordant / (static_cast<double>(np) * static_cast<double>(nn));
}

std::vector<RocPoint> roc_points(const std::vector<double>& probs, const std::vector<int>& labels) {
  long np = 0, nn = 0;
  for (int l : labels) (l == 1 ? np : nn)++;
  std::vector<size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return probs[a] > probs[b]; });

  std::vector<RocPoint> roc;
  roc.push_back({0.0, 0.0});
  long tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    double thr = probs[order[i]];
    while (i < order.size() && probs[order[i]] == thr) {
      (labels[order[i]] == 1 ? tp : fp)++;
      ++i;
    }
    roc.push_back({nn > 0 ? static_cast<double>(fp) / nn : 0.0, np > 0 ? static_cast<double>(tp) / np : 0.0});
  }
  if (roc.back().fpr != 1.0 || roc.back().tpr != 1.0) roc.push_back({1.0, 1.0});
  return roc;
}

double auc_trapezoid(const std::vector<RocPoint>& roc) {
  double area = 0;
  for (size_t i = 1; i < roc.size(); ++i)
    area += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) * 0.5;
  return area;
}

BinaryMetrics compute_metrics(const std::vector<double>& probs, const std::vector<int>& labels) {
  require(probs.size() == labels.size() && !probs.empty(), ErrorKind::Contract,
          "compute_metrics: probs and labels must be equal-length and non-empty");
  long tp = 0, tn = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < probs.size(); ++i) {
    bool pred = probs[i] > 0.5;  // exactly 0.5 predicts negative
    bool pos = labels[i] == 1;
    if (pred && pos)
      ++tp;
    else if (pred && !pos)
      ++fp;
    else if (!pred && pos)
      ++fn;
    else
      ++tn;
  }
  BinaryMetrics m;
  m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(probs.size());
  m.recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.f1 = (m.precision + m.recall) > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.auc = auc_concordance(probs, labels);
  m.roc = roc_points(probs, labels);
  return m;
}

}  // namespace discn
