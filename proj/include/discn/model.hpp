#pragma once

#include <filesystem>
#include <map>
#include <optional>

#include "discn/head.hpp"
#include "discn/saa.hpp"
#include "discn/serialize.hpp"

namespace discn {

enum class Variant { DISCN, NoDep, NoNor, NoRes, NoSea };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::DISCN: return "DISCN";
    case Variant::NoDep: return "noDEP";
    case Variant::NoNor: return "noNOR";
    case Variant::NoRes: return "noRES";
    case Variant::NoSea: return "noSEA";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "DISCN" || s == "discn") return Variant::DISCN;
  if (s == "noDEP" || s == "nodep") return Variant::NoDep;
  if (s == "noNOR" || s == "nonor") return Variant::NoNor;
  if (s == "noRES" || s == "nores") return Variant::NoRes;
  if (s == "noSEA" || s == "nosea") return Variant::NoSea;
  throw ConfigError("unknown model variant: " + s);
}

struct ModelConfig {
  SaaConfig saa;
  HeadConfig head;
  Variant variant = Variant::DISCN;
  long n_stimuli = 5;
  std::uint64_t seed = 0;

  // noSEA swaps the fuser for an MLP and noRES drops the trunk skips.
  ModelConfig normalized() const {
    ModelConfig c = *this;
    if (c.variant == Variant::NoSea) c.head.fuser = FuserKind::MLP;
    if (c.variant == Variant::NoRes) c.head.residual = false;
    return c;
  }
};

// Full network: two salient-attention instances (RGBxdepth and
// saliency-by-heatmap, the latter shared between normal-control fusion and
// subject fusion), a siamese residual trunk, stream embeddings, a serial
// fuser and the 2-way classifier.
template <class T>
class DiscnModel {
 public:
  explicit DiscnModel(const ModelConfig& cfg) : cfg_(cfg.normalized()) {
    std::mt19937_64 rng(derive_seed(cfg_.seed, 0x6d6f64656cULL));
    if (cfg_.variant != Variant::NoDep)
      saa_depth_ = std::make_unique<SaaBlock<T>>("saa_depth", cfg_.saa, rng);
    saa_gaze_ = std::make_unique<SaaBlock<T>>("saa_gaze", cfg_.saa, rng);
    trunk_ = ResidualTrunk<T>("trunk", cfg_.head, cfg_.saa.channels, cfg_.saa.image_size, rng);
    embed_com_ = LinearLayer<T>("embed_com", trunk_.out_dim, cfg_.head.embed_dim, rng, false);
    embed_sub_ = LinearLayer<T>("embed_sub", trunk_.out_dim, cfg_.head.embed_dim, rng, false);
    switch (cfg_.head.fuser) {
      case FuserKind::SEA:
        sea_ = std::make_unique<SeaFuser<T>>("fuser_sea", cfg_.head.embed_dim, cfg_.head.attn_dim, rng);
        break;
      case FuserKind::MLP:
        mlp_ = std::make_unique<MlpFuser<T>>("fuser_mlp", cfg_.n_stimuli, cfg_.head.embed_dim,
                                             cfg_.head.attn_dim, rng);
        break;
      case FuserKind::GRU:
        rec_ = std::make_unique<RecurrentFuser<T>>("fuser_gru", false, cfg_.head.embed_dim,
                                                   cfg_.head.attn_dim, rng);
        break;
      case FuserKind::LSTM:
        rec_ = std::make_unique<RecurrentFuser<T>>("fuser_lstm", true, cfg_.head.embed_dim,
                                                   cfg_.head.attn_dim, rng);
        break;
    }
    classifier_ = Classifier<T>("classifier", 2 * cfg_.head.attn_dim, cfg_.head.hidden_dim, rng);
    collect_params();
  }

  const ModelConfig& config() const { return cfg_; }
  bool training() const { return training_; }
  void set_training(bool b) { training_ = b; }

  SaaBlock<T>* saa_depth() { return saa_depth_.get(); }
  SaaBlock<T>& saa_gaze() { return *saa_gaze_; }
  ResidualTrunk<T>& trunk() { return trunk_; }

  // Preliminary saliency: RGB fused with depth (bypassed by noDEP).
  Tensor<T> compute_pre(const Tensor<T>& rgb, const Tensor<T>& depth) {
    if (cfg_.variant == Variant::NoDep) return rgb;
    return saa_depth_->forward(rgb, depth);
  }

  // Iterative normal-control fusion (bypassed by noNOR).
  Tensor<T> compute_comprehensive(const Tensor<T>& pre, const std::vector<Tensor<T>>& normal_heatmaps) {
    if (cfg_.variant == Variant::NoNor) return pre;
    Tensor<T> acc = pre;
    for (const auto& h : normal_heatmaps) acc = saa_gaze_->forward(acc, h);
    return acc;
  }

  // Batch-shared forward state: the comprehensive stream embedded once.
  struct Shared {
    Tensor<T> pre;
    Tensor<T> comprehensive;
    Tensor<T> f_com;  // [N, d1]
  };

  Shared compute_shared(const Tensor<T>& rgb, const Tensor<T>& depth,
                        const std::vector<Tensor<T>>& normal_heatmaps) {
    Shared s;
    s.pre = compute_pre(rgb, depth);
    s.comprehensive = compute_comprehensive(s.pre, normal_heatmaps);
    s.f_com = embed_com_.forward(trunk_.forward(s.comprehensive, training_));
    return s;
  }

  // P(positive class) for one subject's heatmap stack.
  Tensor<T> subject_prob(const Shared& shared, const Tensor<T>& subject_heatmaps) {
    Tensor<T> sub_maps = saa_gaze_->forward(shared.pre, subject_heatmaps);
    Tensor<T> f_sub = embed_sub_.forward(trunk_.forward(sub_maps, training_));
    Tensor<T> fused = fuse(shared.f_com, f_sub);
    return classifier_.prob_positive(fused);
  }

  Tensor<T> fuse(const Tensor<T>& f_com, const Tensor<T>& f_sub) const {
    switch (cfg_.head.fuser) {
      case FuserKind::SEA: return sea_->forward(f_com, f_sub);
      case FuserKind::MLP: return mlp_->forward(f_com, f_sub);
      case FuserKind::GRU:
      case FuserKind::LSTM: return rec_->forward(f_com, f_sub);
    }
    throw ConfigError("unknown fuser kind");
  }

  std::vector<Parameter<T>*>& parameters() { return params_; }

  void zero_grad() {
    for (auto* p : params_) p->tensor.zero_grad();
  }

  // Deep value copy of all parameters (weights, running stats).
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> snap;
    snap.reserve(params_.size());
    for (auto* p : params_) snap.push_back(p->tensor.data());
    return snap;
  }

  void restore(const std::vector<std::vector<T>>& snap) {
    require(snap.size() == params_.size(), ErrorKind::Contract, "snapshot size mismatch");
    for (size_t i = 0; i < snap.size(); ++i) {
      require(snap[i].size() == params_[i]->tensor.data().size(), ErrorKind::Contract,
              "snapshot tensor size mismatch at " + params_[i]->name);
      params_[i]->tensor.mutable_data() = snap[i];
    }
  }

  void save_checkpoint(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "discn-ckpt/1";
    manifest["variant"] = variant_name(cfg_.variant);
    manifest["fuser"] = fuser_name(cfg_.head.fuser);
    manifest["n_stimuli"] = cfg_.n_stimuli;
    manifest["image_size"] = cfg_.saa.image_size;
    nlohmann::json tensors = nlohmann::json::array();
    int idx = 0;
    for (const auto* p : params_) {
      std::string fname = std::to_string(idx++) + ".dscnt";
      write_tensor(dir + "/" + fname, p->tensor);
      tensors.push_back({{"name", p->name}, {"file", fname}, {"trainable", p->trainable}});
    }
    manifest["tensors"] = tensors;
    std::ofstream f(dir + "/manifest.json");
    if (!f) throw IoError("cannot write checkpoint manifest in " + dir);
    f << manifest.dump(2) << '\n';
  }

  void load_checkpoint(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw IoError("cannot read checkpoint manifest in " + dir);
    nlohmann::json manifest;
    try {
      f >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw IntegrityError(std::string("bad checkpoint manifest: ") + e.what());
    }
    std::map<std::string, std::string> files;
    for (const auto& t : manifest.at("tensors"))
      files[t.at("name").get<std::string>()] = t.at("file").get<std::string>();
    for (auto* p : params_) {
      auto it = files.find(p->name);
      if (it == files.end()) throw IntegrityError("checkpoint missing tensor: " + p->name);
      Tensor<T> t = read_tensor<T>(dir + "/" + it->second);
      if (t.shape() != p->tensor.shape())
        throw IntegrityError("checkpoint shape mismatch for " + p->name + ": " + shape_str(t.shape()) +
                             " vs " + shape_str(p->tensor.shape()));
      p->tensor.mutable_data() = t.data();
    }
  }

 private:
  void collect_params() {
    if (saa_depth_) saa_depth_->collect(params_);
    saa_gaze_->collect(params_);
    trunk_.collect(params_);
    embed_com_.collect(params_);
    embed_sub_.collect(params_);
    if (sea_) sea_->collect(params_);
    if (mlp_) mlp_->collect(params_);
    if (rec_) rec_->collect(params_);
    classifier_.collect(params_);
  }

  ModelConfig cfg_;
  bool training_ = true;
  std::unique_ptr<SaaBlock<T>> saa_depth_;
  std::unique_ptr<SaaBlock<T>> saa_gaze_;
  ResidualTrunk<T> trunk_;
  LinearLayer<T> embed_com_, embed_sub_;
  std::unique_ptr<SeaFuser<T>> sea_;
  std::unique_ptr<MlpFuser<T>> mlp_;
  std::unique_ptr<RecurrentFuser<T>> rec_;
  Classifier<T> classifier_;
  std::vector<Parameter<T>*> params_;
};

}  // namespace discn
