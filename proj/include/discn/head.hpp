#pragma once

#include <memory>

#include "discn/nn.hpp"

namespace discn {

enum class FuserKind { SEA, MLP, GRU, LSTM };

inline std::string fuser_name(FuserKind k) {
  switch (k) {
    case FuserKind::SEA: return "SEA";
    case FuserKind::MLP: return "MLP";
    case FuserKind::GRU: return "GRU";
    case FuserKind::LSTM: return "LSTM";
  }
  return "?";
}

inline FuserKind parse_fuser(const std::string& s) {
  if (s == "SEA" || s == "sea") return FuserKind::SEA;
  if (s == "MLP" || s == "mlp") return FuserKind::MLP;
  if (s == "GRU" || s == "gru") return FuserKind::GRU;
  if (s == "LSTM" || s == "lstm") return FuserKind::LSTM;
  throw ConfigError("unknown fuser kind: " + s);
}

struct HeadConfig {
  long blocks = 3;                          // residual block count r
  std::vector<long> channels = {16, 32, 64};
  long embed_dim = 128;                     // d1
  long attn_dim = 64;                       // d2 (output is 2*d2)
  long hidden_dim = 32;                     // d4
  FuserKind fuser = FuserKind::SEA;
  bool residual = true;                     // false: plain conv stack of same depth
};

// conv-BN-ReLU, conv-BN-ReLU, conv-BN with a 1x1 projected skip and a final
// ReLU; first conv and the skip downsample by 2. With residual=false the
// same three conv-BN-ReLU layers run without the skip.
template <class T>
struct ResidualBlock {
  Conv2dLayer<T> conv1, conv2, conv3, skip;
  BatchNorm2dLayer<T> bn1, bn2, bn3;
  bool residual = true;

  ResidualBlock() = default;
  ResidualBlock(const std::string& name, long cin, long cout, bool residual_, std::mt19937_64& rng)
      : residual(residual_) {
    conv1 = Conv2dLayer<T>(name + "/conv1", cin, cout, 3, 2, 1, rng);
    conv2 = Conv2dLayer<T>(name + "/conv2", cout, cout, 3, 1, 1, rng);
    conv3 = Conv2dLayer<T>(name + "/conv3", cout, cout, 3, 1, 1, rng);
    bn1 = BatchNorm2dLayer<T>(name + "/bn1", cout);
    bn2 = BatchNorm2dLayer<T>(name + "/bn2", cout);
    bn3 = BatchNorm2dLayer<T>(name + "/bn3", cout);
    if (residual) skip = Conv2dLayer<T>(name + "/skip", cin, cout, 1, 2, 0, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    Tensor<T> f1 = relu(bn1.forward(conv1.forward(x), training));
    Tensor<T> f2 = relu(bn2.forward(conv2.forward(f1), training));
    Tensor<T> f3 = bn3.forward(conv3.forward(f2), training);
    if (!residual) return relu(f3);
    return relu(add(skip.forward(x), f3));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    conv1.collect(out);
    bn1.collect(out);
    conv2.collect(out);
    bn2.collect(out);
    conv3.collect(out);
    bn3.collect(out);
    if (residual) skip.collect(out);
  }
};

// Shared (siamese) feature trunk applied to both saliency streams.
template <class T>
struct ResidualTrunk {
  std::vector<ResidualBlock<T>> blocks;
  long in_channels = 0, in_size = 0;
  long out_dim = 0;  // flattened feature length per stimulus

  ResidualTrunk() = default;
  ResidualTrunk(const std::string& name, const HeadConfig& cfg, long in_ch, long in_size_,
                std::mt19937_64& rng)
      : in_channels(in_ch), in_size(in_size_) {
    require(cfg.blocks >= 1, ErrorKind::Config, "trunk needs at least one block");
    require(static_cast<long>(cfg.channels.size()) == cfg.blocks, ErrorKind::Config,
            "channel schedule length must equal block count");
    long c = in_ch;
    long size = in_size_;
    for (long j = 0; j < cfg.blocks; ++j) {
      blocks.emplace_back(name + "/block" + std::to_string(j), c, cfg.channels[static_cast<size_t>(j)],
                          cfg.residual, rng);
      c = cfg.channels[static_cast<size_t>(j)];
      size = axis_windows(size, 3, 1, 2);  // stride-2 conv output extent
      require(size >= 1, ErrorKind::Config,
              "spatial size collapses below 1 after block " + std::to_string(j));
    }
    out_dim = c * size * size;
  }

  // [N,C,H,W] -> [N, out_dim]
  Tensor<T> forward(const Tensor<T>& maps, bool training) const {
    Tensor<T> x = maps;
    for (const auto& b : blocks) x = b.forward(x, training);
    const Shape& s = x.shape();
    return reshape(x, {s[0], s[1] * s[2] * s[3]});
  }

  void collect(std::vector<Parameter<T>*>& out) {
    for (auto& b : blocks) b.collect(out);
  }
};

// Gated serial recurrence, one chain per stream: the running query is gated
// against each key in stimulus order and replaced by the gated value. A
// sigmoid with 1/sqrt(d2) scaling replaces the degenerate scalar softmax.
template <class T>
struct SeaFuser {
  long d1 = 0, d2 = 0;
  LinearLayer<T> wk_com, wv_com, wk_sub, wv_sub;
  Parameter<T> q0_com, q0_sub;

  SeaFuser() = default;
  SeaFuser(const std::string& name, long d1_, long d2_, std::mt19937_64& rng) : d1(d1_), d2(d2_) {
    wk_com = LinearLayer<T>(name + "/wk_com", d1, d2, rng, false);
    wv_com = LinearLayer<T>(name + "/wv_com", d1, d2, rng, false);
    wk_sub = LinearLayer<T>(name + "/wk_sub", d1, d2, rng, false);
    wv_sub = LinearLayer<T>(name + "/wv_sub", d1, d2, rng, false);
    Tensor<T> qc = Tensor<T>::zeros({1, d2});
    he_normal_fill(qc, d2, rng);
    q0_com = Parameter<T>(name + "/q0_com", qc);
    Tensor<T> qs = Tensor<T>::zeros({1, d2});
    he_normal_fill(qs, d2, rng);
    q0_sub = Parameter<T>(name + "/q0_sub", qs);
  }

  Tensor<T> chain(const Tensor<T>& f, const LinearLayer<T>& wk, const LinearLayer<T>& wv,
                  const Parameter<T>& q0) const {
    long n = f.shape()[0];
    require(n >= 1, ErrorKind::Contract, "serial attention needs at least one feature");
    Tensor<T> keys = wk.forward(f);    // [N,d2]
    Tensor<T> values = wv.forward(f);  // [N,d2]
    T sc = T(1) / std::sqrt(static_cast<T>(d2));
    Tensor<T> q = q0.tensor;  // [1,d2]
    for (long j = 0; j < n; ++j) {
      Tensor<T> kj = slice(keys, 0, j, 1);    // [1,d2]
      Tensor<T> vj = slice(values, 0, j, 1);  // [1,d2]
      Tensor<T> gate = sigmoid(scale(matmul(q, transpose_last2(kj)), sc));  // [1,1]
      q = mul(gate, vj);
    }
    return q;
  }

  // f_com, f_sub: [N, d1] -> [1, 2*d2]
  Tensor<T> forward(const Tensor<T>& f_com, const Tensor<T>& f_sub) const {
    require_dim(f_com.shape() == f_sub.shape(), "sea_fuse: stream shapes differ");
    Tensor<T> qc = chain(f_com, wk_com, wv_com, q0_com);
    Tensor<T> qs = chain(f_sub, wk_sub, wv_sub, q0_sub);
    return concat<T>({qc, qs}, 1);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    wk_com.collect(out);
    wv_com.collect(out);
    wk_sub.collect(out);
    wv_sub.collect(out);
    out.push_back(&q0_com);
    out.push_back(&q0_sub);
  }
};

// Orderless baseline: all N features of a stream are concatenated and pushed
// through one linear+ReLU to d2.
template <class T>
struct MlpFuser {
  long n = 0, d1 = 0, d2 = 0;
  LinearLayer<T> w_com, w_sub;

  MlpFuser() = default;
  MlpFuser(const std::string& name, long n_, long d1_, long d2_, std::mt19937_64& rng)
      : n(n_), d1(d1_), d2(d2_) {
    w_com = LinearLayer<T>(name + "/w_com", n * d1, d2, rng);
    w_sub = LinearLayer<T>(name + "/w_sub", n * d1, d2, rng);
  }

  Tensor<T> forward(const Tensor<T>& f_com, const Tensor<T>& f_sub) const {
    require_dim(f_com.shape() == f_sub.shape(), "alt_fuse: stream shapes differ");
    require_dim(f_com.shape()[0] == n, "alt_fuse: stimulus count mismatch");
    Tensor<T> a = relu(w_com.forward(reshape(f_com, {1, n * d1})));
    Tensor<T> b = relu(w_sub.forward(reshape(f_sub, {1, n * d1})));
    return concat<T>({a, b}, 1);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    w_com.collect(out);
    w_sub.collect(out);
  }
};

// Standard gated recurrent cell over the N-step serial, one per stream.
template <class T>
struct GruCell {
  LinearLayer<T> wz, uz, wr, ur, wh, uh;

  GruCell() = default;
  GruCell(const std::string& name, long in, long hidden, std::mt19937_64& rng) {
    wz = LinearLayer<T>(name + "/wz", in, hidden, rng);
    uz = LinearLayer<T>(name + "/uz", hidden, hidden, rng, false);
    wr = LinearLayer<T>(name + "/wr", in, hidden, rng);
    ur = LinearLayer<T>(name + "/ur", hidden, hidden, rng, false);
    wh = LinearLayer<T>(name + "/wh", in, hidden, rng);
    uh = LinearLayer<T>(name + "/uh", hidden, hidden, rng, false);
  }

  Tensor<T> step(const Tensor<T>& x, const Tensor<T>& h) const {
    Tensor<T> z = sigmoid(add(wz.forward(x), uz.forward(h)));
    Tensor<T> r = sigmoid(add(wr.forward(x), ur.forward(h)));
    Tensor<T> hc = tanh_op(add(wh.forward(x), uh.forward(mul(r, h))));
    // h' = (1-z)*h + z*hc
    Tensor<T> one = Tensor<T>::ones(z.shape());
    return add(mul(sub(one, z), h), mul(z, hc));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    wz.collect(out);
    uz.collect(out);
    wr.collect(out);
    ur.collect(out);
    wh.collect(out);
    uh.collect(out);
  }
};

template <class T>
struct LstmCell {
  LinearLayer<T> wi, ui, wf, uf, wo, uo, wg, ug;

  LstmCell() = default;
  LstmCell(const std::string& name, long in, long hidden, std::mt19937_64& rng) {
    wi = LinearLayer<T>(name + "/wi", in, hidden, rng);
    ui = LinearLayer<T>(name + "/ui", hidden, hidden, rng, false);
    wf = LinearLayer<T>(name + "/wf", in, hidden, rng);
    uf = LinearLayer<T>(name + "/uf", hidden, hidden, rng, false);
    wo = LinearLayer<T>(name + "/wo", in, hidden, rng);
    uo = LinearLayer<T>(name + "/uo", hidden, hidden, rng, false);
    wg = LinearLayer<T>(name + "/wg", in, hidden, rng);
    ug = LinearLayer<T>(name + "/ug", hidden, hidden, rng, false);
  }

  std::pair<Tensor<T>, Tensor<T>> step(const Tensor<T>& x, const Tensor<T>& h, const Tensor<T>& c) const {
    Tensor<T> i = sigmoid(add(wi.forward(x), ui.forward(h)));
    Tensor<T> f = sigmoid(add(wf.forward(x), uf.forward(h)));
    Tensor<T> o = sigmoid(add(wo.forward(x), uo.forward(h)));
    Tensor<T> g = tanh_op(add(wg.forward(x), ug.forward(h)));
    Tensor<T> c2 = add(mul(f, c), mul(i, g));
    Tensor<T> h2 = mul(o, tanh_op(c2));
    return {h2, c2};
  }

  void collect(std::vector<Parameter<T>*>& out) {
    wi.collect(out);
    ui.collect(out);
    wf.collect(out);
    uf.collect(out);
    wo.collect(out);
    uo.collect(out);
    wg.collect(out);
    ug.collect(out);
  }
};

template <class T>
struct RecurrentFuser {
  bool lstm = false;
  long d2 = 0;
  GruCell<T> gru_com, gru_sub;
  LstmCell<T> lstm_com, lstm_sub;

  RecurrentFuser() = default;
  RecurrentFuser(const std::string& name, bool lstm_, long d1, long d2_, std::mt19937_64& rng)
      : lstm(lstm_), d2(d2_) {
    if (lstm) {
      lstm_com = LstmCell<T>(name + "/lstm_com", d1, d2, rng);
      lstm_sub = LstmCell<T>(name + "/lstm_sub", d1, d2, rng);
    } else {
      gru_com = GruCell<T>(name + "/gru_com", d1, d2, rng);
      gru_sub = GruCell<T>(name + "/gru_sub", d1, d2, rng);
    }
  }

  Tensor<T> run(const Tensor<T>& f, const GruCell<T>& gcell, const LstmCell<T>& lcell) const {
    long n = f.shape()[0];
    Tensor<T> h = Tensor<T>::zeros({1, d2});
    Tensor<T> c = Tensor<T>::zeros({1, d2});
    for (long j = 0; j < n; ++j) {
      Tensor<T> x = slice(f, 0, j, 1);
      if (lstm) {
        auto [h2, c2] = lcell.step(x, h, c);
        h = h2;
        c = c2;
      } else {
        h = gcell.step(x, h);
      }
    }
    return h;
  }

  Tensor<T> forward(const Tensor<T>& f_com, const Tensor<T>& f_sub) const {
    require_dim(f_com.shape() == f_sub.shape(), "alt_fuse: stream shapes differ");
    Tensor<T> a = run(f_com, gru_com, lstm_com);
    Tensor<T> b = run(f_sub, gru_sub, lstm_sub);
    return concat<T>({a, b}, 1);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    if (lstm) {
      lstm_com.collect(out);
      lstm_sub.collect(out);
    } else {
      gru_com.collect(out);
      gru_sub.collect(out);
    }
  }
};

// Two-layer MLP onto a 2-way softmax; the first component is taken as the
// positive-class probability.
template <class T>
struct Classifier {
  LinearLayer<T> w1, w2;

  Classifier() = default;
  Classifier(const std::string& name, long d3, long d4, std::mt19937_64& rng) {
    w1 = LinearLayer<T>(name + "/w1", d3, d4, rng, false);
    w2 = LinearLayer<T>(name + "/w2", d4, 2, rng, false);
  }

  // q: [1, d3] -> probability pair [1,2]
  Tensor<T> forward(const Tensor<T>& q) const {
    return softmax(w2.forward(relu(w1.forward(q))), -1);
  }

  // scalar P(positive)
  Tensor<T> prob_positive(const Tensor<T>& q) const { return reshape(slice(forward(q), 1, 0, 1), {1}); }

  void collect(std::vector<Parameter<T>*>& out) {
    w1.collect(out);
    w2.collect(out);
  }
};

}  // namespace discn
