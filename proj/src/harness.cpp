#include "discn/harness.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace discn {

void TrainConfig::validate() const {
  require(lr > 0, ErrorKind::Config, "lr must be positive");
  require(momentum >= 0, ErrorKind::Config, "momentum must be non-negative");
  require(batch_size >= 1, ErrorKind::Config, "batch_size must be positive");
  require(weight_decay >= 0, ErrorKind::Config, "weight_decay must be non-negative");
  require(max_epochs >= 0, ErrorKind::Config, "max_epochs must be non-negative");
  require(strip_length >= 1 && up_strips >= 1, ErrorKind::Config, "early-stopping strips must be positive");
  require(val_fraction >= 0 && val_fraction < 1, ErrorKind::Config, "val_fraction must be in [0,1)");
  require(folds >= 2, ErrorKind::Config, "need at least 2 folds");
}

static ordered_json saa_config_to_json(const SaaConfig& c) {
  ordered_json j;
  j["image_size"] = c.image_size;
  j["channels"] = c.channels;
  json splits = json::array();
  for (const auto& sp : c.splits) splits.push_back({{"k", sp.k}, {"p", sp.p}, {"s", sp.s}});
  j["splits"] = splits;
  j["heads"] = c.heads;
  j["ff_ratio"] = c.ff_ratio;
  j["positional_encoding"] = c.use_positional_encoding;
  return j;
}

static SaaConfig saa_config_from_json(const json& j) {
  SaaConfig c;
  if (j.contains("image_size")) c.image_size = j["image_size"].get<long>();
  if (j.contains("channels")) c.channels = j["channels"].get<long>();
  if (j.contains("splits")) {
    auto arr = j["splits"];
    require(arr.size() == 3, ErrorKind::Config, "saa.splits must have 3 entries");
    for (int i = 0; i < 3; ++i) {
      c.splits[i].k = arr[i].at("k").get<long>();
      c.splits[i].p = arr[i].at("p").get<long>();
      c.splits[i].s = arr[i].at("s").get<long>();
    }
  }
  if (j.contains("heads")) c.heads = j["heads"].get<long>();
  if (j.contains("ff_ratio")) c.ff_ratio = j["ff_ratio"].get<double>();
  if (j.contains("positional_encoding")) c.use_positional_encoding = j["positional_encoding"].get<bool>();
  return c;
}

static ordered_json head_config_to_json(const HeadConfig& c) {
  ordered_json j;
  j["blocks"] = c.blocks;
  j["channels"] = c.channels;
  j["embed_dim"] = c.embed_dim;
  j["attn_dim"] = c.attn_dim;
  j["hidden_dim"] = c.hidden_dim;
  return j;
}

static HeadConfig head_config_from_json(const json& j) {
  HeadConfig c;
  if (j.contains("blocks")) c.blocks = j["blocks"].get<long>();
  if (j.contains("channels")) c.channels = j["channels"].get<std::vector<long>>();
  if (j.contains("embed_dim")) c.embed_dim = j["embed_dim"].get<long>();
  if (j.contains("attn_dim")) c.attn_dim = j["attn_dim"].get<long>();
  if (j.contains("hidden_dim")) c.hidden_dim = j["hidden_dim"].get<long>();
  return c;
}

ordered_json train_config_to_json(const TrainConfig& cfg) {
  ordered_json j;
  j["lr"] = cfg.lr;
  j["momentum"] = cfg.momentum;
  j["batch_size"] = cfg.batch_size;
  j["weight_decay"] = cfg.weight_decay;
  j["max_epochs"] = cfg.max_epochs;
  j["strip_length"] = cfg.strip_length;
  j["up_strips"] = cfg.up_strips;
  j["val_fraction"] = cfg.val_fraction;
  j["seed"] = cfg.seed;
  j["folds"] = cfg.folds;
  j["variant"] = variant_name(cfg.variant);
  j["fuser"] = fuser_name(cfg.fuser);
  j["saa"] = saa_config_to_json(cfg.saa);
  j["head"] = head_config_to_json(cfg.head);
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  if (j.contains("lr")) c.lr = j["lr"].get<double>();
  if (j.contains("momentum")) c.momentum = j["momentum"].get<double>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<long>();
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"].get<long>();
  if (j.contains("strip_length")) c.strip_length = j["strip_length"].get<long>();
  if (j.contains("up_strips")) c.up_strips = j["up_strips"].get<long>();
  if (j.contains("val_fraction")) c.val_fraction = j["val_fraction"].get<double>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("folds")) c.folds = j["folds"].get<long>();
  if (j.contains("variant")) c.variant = parse_variant(j["variant"].get<std::string>());
  if (j.contains("fuser")) c.fuser = parse_fuser(j["fuser"].get<std::string>());
  if (j.contains("saa")) c.saa = saa_config_from_json(j["saa"]);
  if (j.contains("head")) c.head = head_config_from_json(j["head"]);
  c.validate();
  return c;
}

FoldPlan split_folds(const DatasetManifest& manifest, std::uint64_t seed, long k) {
  require(k >= 2, ErrorKind::Config, "need at least 2 folds");
  std::vector<long> ad, nc;
  for (size_t i = 0; i < manifest.subjects.size(); ++i)
    (manifest.subjects[i].label == 0 ? ad : nc).push_back(static_cast<long>(i));
  require(ad.size() == nc.size() && !ad.empty(), ErrorKind::Config,
          "split_folds requires a balanced subject set, got " + std::to_string(ad.size()) + " AD vs " +
              std::to_string(nc.size()) + " NC");
  require(static_cast<long>(ad.size()) >= k, ErrorKind::Config, "fewer subjects per class than folds");

  std::mt19937_64 rng(derive_seed(seed, 0x666f6c64ULL));
  std::shuffle(ad.begin(), ad.end(), rng);
  std::shuffle(nc.begin(), nc.end(), rng);

  auto chunk = [&](const std::vector<long>& ids, long fold) {
    long n = static_cast<long>(ids.size());
    long base = n / k, rem = n % k;
    long start = fold * base + std::min(fold, rem);
    long len = base + (fold < rem ? 1 : 0);
    return std::vector<long>(ids.begin() + start, ids.begin() + start + len);
  };

  FoldPlan plan;
  for (long f = 0; f < k; ++f) {
    Fold fold;
    auto ta = chunk(ad, f), tn = chunk(nc, f);
    fold.test_idx.insert(fold.test_idx.end(), ta.begin(), ta.end());
    fold.test_idx.insert(fold.test_idx.end(), tn.begin(), tn.end());
    std::sort(fold.test_idx.begin(), fold.test_idx.end());
    for (size_t i = 0; i < manifest.subjects.size(); ++i)
      if (!std::binary_search(fold.test_idx.begin(), fold.test_idx.end(), static_cast<long>(i)))
        fold.train_idx.push_back(static_cast<long>(i));
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

bool early_stop_check(const std::vector<double>& val_curve, long strip_length, long up_strips) {
  require(strip_length >= 1 && up_strips >= 1, ErrorKind::Config, "invalid early-stopping parameters");
  long t = static_cast<long>(val_curve.size());
  if (t == 0 || t % strip_length != 0) return false;
  long strips = t / strip_length;
  if (strips < up_strips + 1) return false;
  for (long j = 0; j < up_strips; ++j) {
    double cur = val_curve[static_cast<size_t>((strips - j) * strip_length - 1)];
    double prev = val_curve[static_cast<size_t>((strips - j - 1) * strip_length - 1)];
    if (!(cur > prev)) return false;
  }
  return true;
}

namespace {

int positive_label(int stored_label) { return stored_label == 0 ? 1 : 0; }  // AD is positive

struct ModelInputs {
  Tensor<float> rgb, depth;
  std::vector<Tensor<float>> normals;
  std::vector<Tensor<float>> subjects;  // aligned with manifest.subjects
  long image_size = 0;
};

ModelInputs prepare_inputs(const Dataset& ds) {
  ModelInputs in;
  in.rgb = center_crop(ds.stimuli.rgb, 224);
  in.depth = center_crop(ds.stimuli.depth, 224);
  for (const auto& h : ds.normal_heatmaps) in.normals.push_back(center_crop(h.maps, 224));
  for (const auto& h : ds.subject_heatmaps) in.subjects.push_back(center_crop(h.maps, 224));
  in.image_size = in.rgb.shape()[2];
  return in;
}

ModelConfig model_config(const Dataset& ds, const TrainConfig& cfg, std::uint64_t model_seed, long image_size) {
  ModelConfig mc;
  mc.saa = cfg.saa;
  mc.saa.image_size = image_size;
  mc.saa.channels = ds.manifest.channels;
  mc.head = cfg.head;
  mc.head.fuser = cfg.fuser;
  mc.variant = cfg.variant;
  mc.n_stimuli = ds.manifest.n_stimuli;
  mc.seed = model_seed;
  return mc;
}

double eval_mean_bce(Model& model, const ModelInputs& in, const Dataset& ds, const std::vector<long>& idx) {
  NoGradGuard ng;
  model.set_training(false);
  auto shared = model.compute_shared(in.rgb, in.depth, in.normals);
  double total = 0;
  for (long i : idx) {
    Tensor<float> prob = model.subject_prob(shared, in.subjects[static_cast<size_t>(i)]);
    int t = positive_label(ds.manifest.subjects[static_cast<size_t>(i)].label);
    total += bce_loss(prob, t).item();
  }
  model.set_training(true);
  return idx.empty() ? 0.0 : total / static_cast<double>(idx.size());
}

}  // namespace

TrainResult train_fold(Model& model, const Dataset& ds, const Fold& fold, const TrainConfig& cfg) {
  cfg.validate();
  ModelInputs in = prepare_inputs(ds);
  TrainResult res;

  // stratified validation split carved from the training subjects
  std::vector<long> train_ad, train_nc;
  for (long i : fold.train_idx)
    (ds.manifest.subjects[static_cast<size_t>(i)].label == 0 ? train_ad : train_nc).push_back(i);
  std::mt19937_64 split_rng(derive_seed(cfg.seed, 0x76616cULL));
  std::shuffle(train_ad.begin(), train_ad.end(), split_rng);
  std::shuffle(train_nc.begin(), train_nc.end(), split_rng);
  long val_ad = std::lround(cfg.val_fraction * static_cast<double>(train_ad.size()));
  long val_nc = std::lround(cfg.val_fraction * static_cast<double>(train_nc.size()));
  std::vector<long> val_idx(train_ad.begin(), train_ad.begin() + val_ad);
  val_idx.insert(val_idx.end(), train_nc.begin(), train_nc.begin() + val_nc);
  std::vector<long> train_idx(train_ad.begin() + val_ad, train_ad.end());
  train_idx.insert(train_idx.end(), train_nc.begin() + val_nc, train_nc.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());

  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 0x65706f6368ULL));
  auto best = model.snapshot();
  double best_err = std::numeric_limits<double>::infinity();

  model.set_training(true);
  for (long epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::vector<long> order = train_idx;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0;
    long batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<long> batch(order.begin() + start, order.begin() + end);
      model.zero_grad();
      auto shared = model.compute_shared(in.rgb, in.depth, in.normals);
      std::vector<Tensor<float>> losses;
      for (long i : batch) {
        Tensor<float> prob = model.subject_prob(shared, in.subjects[static_cast<size_t>(i)]);
        int t = positive_label(ds.manifest.subjects[static_cast<size_t>(i)].label);
        losses.push_back(bce_loss(prob, t));
      }
      Tensor<float> loss = mean_all(concat(losses, 0));
      float lv = loss.item();
      if (!std::isfinite(lv)) {
        std::ostringstream os;
        os << "non-finite loss " << lv << " at epoch " << epoch << " batch " << batches << "; subjects:";
        for (long i : batch) os << ' ' << ds.manifest.subjects[static_cast<size_t>(i)].id;
        throw NumericError(os.str());
      }
      loss.backward();
      sgd_step(model.parameters(), static_cast<float>(cfg.lr), static_cast<float>(cfg.momentum),
               static_cast<float>(cfg.weight_decay));
      epoch_loss += lv;
      ++batches;
    }
    res.train_loss_curve.push_back(batches ? epoch_loss / batches : 0.0);
    res.epochs_run = epoch;

    if (!val_idx.empty()) {
      double err = eval_mean_bce(model, in, ds, val_idx);
      res.val_error_curve.push_back(err);
      if (err < best_err) {
        best_err = err;
        best = model.snapshot();
        res.best_epoch = epoch;
      }
      if (early_stop_check(res.val_error_curve, cfg.strip_length, cfg.up_strips)) break;
    } else {
      best = model.snapshot();
      res.best_epoch = epoch;
    }
  }
  model.restore(best);
  return res;
}

EvalResult evaluate(Model& model, const Dataset& ds, const std::vector<long>& subject_idx) {
  ModelInputs in = prepare_inputs(ds);
  NoGradGuard ng;
  bool was_training = model.training();
  model.set_training(false);
  auto shared = model.compute_shared(in.rgb, in.depth, in.normals);
  EvalResult r;
  for (long i : subject_idx) {
    Tensor<float> prob = model.subject_prob(shared, in.subjects[static_cast<size_t>(i)]);
    r.probs.push_back(static_cast<double>(prob.item()));
    r.labels01.push_back(positive_label(ds.manifest.subjects[static_cast<size_t>(i)].label));
    r.ids.push_back(ds.manifest.subjects[static_cast<size_t>(i)].id);
  }
  r.metrics = compute_metrics(r.probs, r.labels01);
  model.set_training(was_training);
  return r;
}

AggregateStat ExperimentReport::aggregate(const std::string& metric) const {
  std::vector<double> vals;
  for (const auto& f : folds) {
    if (metric == "accuracy")
      vals.push_back(f.metrics.accuracy);
    else if (metric == "recall")
      vals.push_back(f.metrics.recall);
    else if (metric == "precision")
      vals.push_back(f.metrics.precision);
    else if (metric == "f1")
      vals.push_back(f.metrics.f1);
    else if (metric == "auc") {
      if (f.metrics.auc) vals.push_back(*f.metrics.auc);
    } else
      throw ContractError("unknown metric: " + metric);
  }
  AggregateStat s;
  if (vals.empty()) return s;
  s.valid = true;
  for (double v : vals) s.mean += v;
  s.mean /= static_cast<double>(vals.size());
  for (double v : vals) s.stddev += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(vals.size()));
  return s;
}

static ordered_json metrics_to_json(const BinaryMetrics& m) {
  ordered_json j;
  j["accuracy"] = m.accuracy;
  j["recall"] = m.recall;
  j["precision"] = m.precision;
  j["f1"] = m.f1;
  if (m.auc)
    j["auc"] = *m.auc;
  else
    j["auc"] = nullptr;
  json roc = json::array();
  for (const auto& p : m.roc) roc.push_back({p.fpr, p.tpr});
  j["roc"] = roc;
  return j;
}

ordered_json report_to_json(const ExperimentReport& r) {
  ordered_json j;
  j["format"] = "discn-report/1";
  j["config"] = train_config_to_json(r.config);
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(r.dataset_hash));
  j["dataset_hash"] = hash;
  if (r.failed) {
    j["failed"] = true;
    j["failure"] = r.failure;
  }
  ordered_json folds = ordered_json::array();
  for (const auto& f : r.folds) {
    ordered_json fj;
    fj["fold"] = f.fold;
    fj["test_ids"] = f.test_ids;
    fj["epochs_run"] = f.epochs_run;
    fj["best_epoch"] = f.best_epoch;
    fj["val_error_curve"] = f.val_error_curve;
    fj["metrics"] = metrics_to_json(f.metrics);
    folds.push_back(fj);
  }
  j["folds"] = folds;
  ordered_json agg;
  for (const char* m : {"accuracy", "recall", "precision", "f1", "auc"}) {
    AggregateStat s = r.aggregate(m);
    if (s.valid)
      agg[m] = {{"mean", s.mean}, {"std", s.stddev}};
    else
      agg[m] = nullptr;
  }
  j["aggregate"] = agg;
  return j;
}

long thread_cap(long folds) {
  long cap = folds;
  if (const char* env = std::getenv("DISCN_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) cap = std::min(cap, v);
  }
  long hw = static_cast<long>(std::thread::hardware_concurrency());
  if (hw >= 1) cap = std::min(cap, hw);
  return std::max<long>(1, cap);
}

namespace {

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& roc) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << "fpr,tpr\n";
  f.precision(17);
  for (const auto& p : roc) f << p.fpr << ',' << p.tpr << '\n';
}

}  // namespace

ExperimentReport run_experiment(const Dataset& ds, const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  auto t0 = std::chrono::steady_clock::now();
  ExperimentReport report;
  report.config = cfg;
  report.dataset_hash = dataset_content_hash(ds);

  FoldPlan plan = split_folds(ds.manifest, cfg.seed, cfg.folds);
  ModelInputs in = prepare_inputs(ds);
  long image_size = in.image_size;

  std::vector<FoldResult> results(plan.folds.size());
  std::vector<std::string> errors(plan.folds.size());
  long cap = thread_cap(static_cast<long>(plan.folds.size()));

  auto run_one = [&](long f) {
    try {
      TrainConfig fold_cfg = cfg;
      fold_cfg.seed = derive_seed(cfg.seed, 0x666f6c64ULL, static_cast<std::uint64_t>(f));
      Model model(model_config(ds, cfg, fold_cfg.seed, image_size));
      TrainResult tr = train_fold(model, ds, plan.folds[static_cast<size_t>(f)], fold_cfg);
      EvalResult ev = evaluate(model, ds, plan.folds[static_cast<size_t>(f)].test_idx);
      FoldResult fr;
      fr.fold = f;
      fr.metrics = ev.metrics;
      fr.test_ids = ev.ids;
      fr.epochs_run = tr.epochs_run;
      fr.best_epoch = tr.best_epoch;
      fr.val_error_curve = tr.val_error_curve;
      results[static_cast<size_t>(f)] = std::move(fr);
    } catch (const std::exception& e) {
      errors[static_cast<size_t>(f)] = e.what();
    }
  };

  for (size_t start = 0; start < plan.folds.size(); start += static_cast<size_t>(cap)) {
    std::vector<std::thread> threads;
    size_t end = std::min(plan.folds.size(), start + static_cast<size_t>(cap));
    for (size_t f = start; f < end; ++f) threads.emplace_back(run_one, static_cast<long>(f));
    for (auto& t : threads) t.join();
  }

  std::string first_error;
  for (size_t f = 0; f < plan.folds.size(); ++f) {
    if (!errors[f].empty()) {
      if (first_error.empty()) first_error = "fold " + std::to_string(f) + ": " + errors[f];
      continue;
    }
    report.folds.push_back(results[f]);
  }
  if (!first_error.empty()) {
    report.failed = true;
    report.failure = first_error;
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    {
      std::ofstream f(out_dir + "/report.json");
      if (!f) throw IoError("cannot write " + out_dir + "/report.json");
      f << report_to_json(report).dump(2) << '\n';
    }
    for (const auto& fr : report.folds)
      write_roc_csv(out_dir + "/roc_fold" + std::to_string(fr.fold) + ".csv", fr.metrics.roc);
    auto t1 = std::chrono::steady_clock::now();
    std::ofstream tf(out_dir + "/timing.json");
    tf << "{\"wall_seconds\": " << std::chrono::duration<double>(t1 - t0).count() << "}\n";
  }
  if (report.failed) throw NumericError("experiment failed: " + report.failure);
  return report;
}

std::string run_suite(const Dataset& ds, const std::vector<SuiteEntry>& entries, const std::string& out_dir) {
  require(!entries.empty(), ErrorKind::Contract, "run_suite: no entries");
  std::vector<ExperimentReport> reports;
  for (const auto& e : entries) {
    std::string sub = out_dir.empty() ? "" : out_dir + "/" + e.name;
    reports.push_back(run_experiment(ds, e.config, sub));
  }
  std::ostringstream csv;
  csv << "metric";
  for (const auto& e : entries) csv << ',' << e.name;
  csv << '\n';
  for (const char* m : {"accuracy", "recall", "precision", "f1", "auc"}) {
    csv << m;
    for (const auto& r : reports) {
      AggregateStat s = r.aggregate(m);
      char cell[64];
      if (s.valid)
        std::snprintf(cell, sizeof(cell), "%.3f±%.3f", s.mean, s.stddev);
      else
        std::snprintf(cell, sizeof(cell), "n/a");
      csv << ',' << cell;
    }
    csv << '\n';
  }
  std::string table = csv.str();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream f(out_dir + "/table.csv");
    if (!f) throw IoError("cannot write " + out_dir + "/table.csv");
    f << table;
  }
  return table;
}

int roc_export(const std::string& report_path, const std::string& out_prefix) {
  std::ifstream f(report_path);
  if (!f) throw IoError("cannot read " + report_path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("bad report json: ") + e.what());
  }
  int written = 0;
  for (const auto& fold : j.at("folds")) {
    long idx = fold.at("fold").get<long>();
    std::vector<RocPoint> roc;
    for (const auto& p : fold.at("metrics").at("roc")) roc.push_back({p[0].get<double>(), p[1].get<double>()});
    write_roc_csv(out_prefix + "roc_fold" + std::to_string(idx) + ".csv", roc);
    ++written;
  }
  return written;
}

}  // namespace discn
