#pragma once

#include <random>
#include <string>

#include "discn/ops.hpp"

namespace discn {

// He-normal fill: std = sqrt(2 / fan_in). Draws in double so float and
// double instantiations share the same scheme.
template <class T>
void he_normal_fill(Tensor<T>& t, long fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

template <class T>
void uniform_fill(Tensor<T>& t, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

// Classic sinusoidal position table, [n, d]; constant, not trained.
template <class T>
Tensor<T> sinusoidal_encoding(long n, long d) {
  Tensor<T> pe = Tensor<T>::zeros({n, d});
  auto& v = pe.mutable_data();
  for (long pos = 0; pos < n; ++pos) {
    for (long i = 0; i < d; i += 2) {
      double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      v[pos * d + i] = static_cast<T>(std::sin(pos * freq));
      if (i + 1 < d) v[pos * d + i + 1] = static_cast<T>(std::cos(pos * freq));
    }
  }
  return pe;
}

// Test hook: when enabled, attention blocks push their softmax weight
// tensors here so row-stochasticity can be asserted from outside.
template <class T>
struct AttnProbe {
  static bool& enabled() {
    thread_local bool e = false;
    return e;
  }
  static std::vector<Tensor<T>>& captured() {
    thread_local std::vector<Tensor<T>> v;
    return v;
  }
  static void record(const Tensor<T>& attn) {
    if (enabled()) captured().push_back(attn.detach());
  }
};

template <class T>
struct LinearLayer {
  Parameter<T> w, b;
  bool has_bias = true;

  LinearLayer() = default;
  LinearLayer(const std::string& name, long in, long out, std::mt19937_64& rng, bool bias = true)
      : has_bias(bias) {
    Tensor<T> wt = Tensor<T>::zeros({in, out});
    he_normal_fill(wt, in, rng);
    w = Parameter<T>(name + "/w", wt);
    if (bias) b = Parameter<T>(name + "/b", Tensor<T>::zeros({out}));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return linear(x, w.tensor, has_bias ? b.tensor : Tensor<T>::zeros({0}));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&w);
    if (has_bias) out.push_back(&b);
  }
};

template <class T>
struct LayerNormLayer {
  Parameter<T> gamma, beta;

  LayerNormLayer() = default;
  LayerNormLayer(const std::string& name, long d)
      : gamma(name + "/g", Tensor<T>::ones({d})), beta(name + "/b", Tensor<T>::zeros({d})) {}

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma.tensor, beta.tensor); }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

template <class T>
struct Conv2dLayer {
  Parameter<T> w, b;
  long stride = 1, pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, long cin, long cout, long k, long stride_, long pad_,
              std::mt19937_64& rng)
      : stride(stride_), pad(pad_) {
    Tensor<T> wt = Tensor<T>::zeros({cout, cin, k, k});
    he_normal_fill(wt, cin * k * k, rng);
    w = Parameter<T>(name + "/w", wt);
    b = Parameter<T>(name + "/b", Tensor<T>::zeros({cout}));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w.tensor, b.tensor, stride, pad); }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <class T>
struct BatchNorm2dLayer {
  Parameter<T> gamma, beta;
  Parameter<T> running_mean, running_var;  // tracked, not trained

  BatchNorm2dLayer() = default;
  BatchNorm2dLayer(const std::string& name, long c)
      : gamma(name + "/g", Tensor<T>::ones({c})),
        beta(name + "/b", Tensor<T>::zeros({c})),
        running_mean(name + "/rm", Tensor<T>::zeros({c}), false),
        running_var(name + "/rv", Tensor<T>::ones({c}), false) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    auto* self = const_cast<BatchNorm2dLayer*>(this);
    return batchnorm2d(x, gamma.tensor, beta.tensor, &self->running_mean.tensor.mutable_data(),
                       &self->running_var.tensor.mutable_data(), training);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
    out.push_back(&running_mean);
    out.push_back(&running_var);
  }
};

// Pre-norm single/multi-head self-attention + feed-forward block.
template <class T>
struct TransformerLayer {
  long dim = 0;
  long heads = 1;
  LayerNormLayer<T> ln1, ln2;
  LinearLayer<T> wq, wk, wv, wo, ff1, ff2;

  TransformerLayer() = default;
  TransformerLayer(const std::string& name, long d, long heads_, double ff_ratio, std::mt19937_64& rng)
      : dim(d), heads(heads_) {
    require(heads >= 1 && d % heads == 0, ErrorKind::Config,
            "transformer dim " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
    ln1 = LayerNormLayer<T>(name + "/ln1", d);
    ln2 = LayerNormLayer<T>(name + "/ln2", d);
    wq = LinearLayer<T>(name + "/wq", d, d, rng);
    wk = LinearLayer<T>(name + "/wk", d, d, rng);
    wv = LinearLayer<T>(name + "/wv", d, d, rng);
    wo = LinearLayer<T>(name + "/wo", d, d, rng);
    long hidden = std::max<long>(1, static_cast<long>(std::lround(ff_ratio * static_cast<double>(d))));
    ff1 = LinearLayer<T>(name + "/ff1", d, hidden, rng);
    ff2 = LinearLayer<T>(name + "/ff2", hidden, d, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = ln1.forward(x);
    Tensor<T> q = wq.forward(h), k = wk.forward(h), v = wv.forward(h);
    Tensor<T> attn_out;
    if (heads == 1) {
      T sc = T(1) / std::sqrt(static_cast<T>(dim));
      Tensor<T> a = softmax(scale(matmul(q, transpose_last2(k)), sc), -1);
      AttnProbe<T>::record(a);
      attn_out = matmul(a, v);
    } else {
      long hd = dim / heads;
      T sc = T(1) / std::sqrt(static_cast<T>(hd));
      std::vector<Tensor<T>> outs;
      for (long i = 0; i < heads; ++i) {
        Tensor<T> qi = slice(q, -1, i * hd, hd);
        Tensor<T> ki = slice(k, -1, i * hd, hd);
        Tensor<T> vi = slice(v, -1, i * hd, hd);
        Tensor<T> a = softmax(scale(matmul(qi, transpose_last2(ki)), sc), -1);
        AttnProbe<T>::record(a);
        outs.push_back(matmul(a, vi));
      }
      attn_out = concat(outs, -1);
    }
    Tensor<T> x1 = add(x, wo.forward(attn_out));
    Tensor<T> f = ff2.forward(relu(ff1.forward(ln2.forward(x1))));
    return add(x1, f);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    ln1.collect(out);
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
    ln2.collect(out);
    ff1.collect(out);
    ff2.collect(out);
  }
};

}  // namespace discn
