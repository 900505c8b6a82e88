#pragma once

#include <json.hpp>

#include "discn/data.hpp"
#include "discn/metrics.hpp"
#include "discn/model.hpp"

namespace discn {

struct TrainConfig {
  double lr = 5e-3;
  double momentum = 0.9;
  long batch_size = 16;
  double weight_decay = 1e-4;
  long max_epochs = 20;
  long strip_length = 5;   // early-stopping strip length
  long up_strips = 2;      // successive rising strips before stopping
  double val_fraction = 0.2;
  std::uint64_t seed = 1;
  long folds = 5;
  Variant variant = Variant::DISCN;
  FuserKind fuser = FuserKind::SEA;
  SaaConfig saa;
  HeadConfig head;

  void validate() const;
};

nlohmann::ordered_json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct Fold {
  std::vector<long> train_idx;
  std::vector<long> test_idx;
};

struct FoldPlan {
  std::vector<Fold> folds;
};

// Stratified k-fold partition of the subject set, deterministic under seed.
FoldPlan split_folds(const DatasetManifest& manifest, std::uint64_t seed, long k = 5);

// UP criterion: epochs are grouped into strips of strip_length; training
// stops once validation error has risen at the end of up_strips successive
// strips. The curve holds one error value per completed epoch.
bool early_stop_check(const std::vector<double>& val_curve, long strip_length, long up_strips);

struct TrainResult {
  std::vector<double> train_loss_curve;
  std::vector<double> val_error_curve;
  long epochs_run = 0;
  long best_epoch = 0;  // 1-based; 0 when no epoch ran
};

using Model = DiscnModel<float>;

// Mini-batch SGD over subjects; shared saliency recomputed per batch; best
// validation weights restored on return.
TrainResult train_fold(Model& model, const Dataset& ds, const Fold& fold, const TrainConfig& cfg);

struct EvalResult {
  BinaryMetrics metrics;
  std::vector<double> probs;   // P(AD), aligned with ids
  std::vector<int> labels01;   // 1 = AD (positive)
  std::vector<std::string> ids;
};

EvalResult evaluate(Model& model, const Dataset& ds, const std::vector<long>& subject_idx);

struct FoldResult {
  long fold = 0;
  BinaryMetrics metrics;
  std::vector<std::string> test_ids;
  long epochs_run = 0;
  long best_epoch = 0;
  std::vector<double> val_error_curve;
};

struct AggregateStat {
  double mean = 0, stddev = 0;
  bool valid = false;
};

struct ExperimentReport {
  TrainConfig config;
  std::uint64_t dataset_hash = 0;
  std::vector<FoldResult> folds;
  bool failed = false;
  std::string failure;

  AggregateStat aggregate(const std::string& metric) const;
};

nlohmann::ordered_json report_to_json(const ExperimentReport& r);

// Runs k-fold cross-validation for one configuration. Folds run in parallel
// up to DISCN_THREADS (default: min(hardware, fold count)); results are
// deterministic regardless of scheduling. When out_dir is non-empty, writes
// report.json, roc_fold<k>.csv and a timing.json sidecar there.
ExperimentReport run_experiment(const Dataset& ds, const TrainConfig& cfg, const std::string& out_dir);

struct SuiteEntry {
  std::string name;
  TrainConfig config;
};

// Runs each configuration over the same dataset and emits a comparison table
// (rows = metrics, columns = entries) as CSV, plus per-entry reports under
// out_dir/<name>/.
std::string run_suite(const Dataset& ds, const std::vector<SuiteEntry>& entries, const std::string& out_dir);

// Reads a report.json and writes roc_fold<k>.csv files with the given prefix.
// Returns the number of files written.
int roc_export(const std::string& report_path, const std::string& out_prefix);

long thread_cap(long folds);

}  // namespace discn
