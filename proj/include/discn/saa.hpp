#pragma once

#include <array>

#include "discn/nn.hpp"

namespace discn {

struct SplitSpec {
  long k = 2, p = 0, s = 2;
};

// Split schedule: splits[0] drives the image-to-token step, splits[1] and
// splits[2] the two token re-splitting levels.
struct SaaConfig {
  long image_size = 64;
  long channels = 3;
  std::array<SplitSpec, 3> splits{{{4, 0, 4}, {2, 0, 2}, {2, 0, 2}}};
  long heads = 1;
  double ff_ratio = 1.0;
  bool use_positional_encoding = true;
};

struct LevelInfo {
  long grid = 0;   // tokens per axis
  long tokens = 0; // grid * grid
  long dim = 0;    // token dimension
};

// Per-axis window count via the floored sliding-window rule; token count is
// the square of the per-axis count. Every pixel of every level must be
// covered by at least one window or the reverse path loses information.
inline std::array<LevelInfo, 3> compute_levels(const SaaConfig& cfg) {
  std::array<LevelInfo, 3> levels;
  long extent = cfg.image_size;
  long dim = cfg.channels;
  for (int i = 0; i < 3; ++i) {
    const SplitSpec& sp = cfg.splits[static_cast<size_t>(i)];
    require(sp.k >= 1 && sp.s >= 1 && sp.p >= 0, ErrorKind::Config,
            "invalid split (k,p,s) at level " + std::to_string(i));
    require(extent + 2 * sp.p >= sp.k, ErrorKind::Config,
            "split window exceeds padded extent at level " + std::to_string(i));
    long grid = axis_windows(extent, sp.k, sp.p, sp.s);
    require(grid >= 1, ErrorKind::Config, "empty token grid at level " + std::to_string(i));
    auto counts = fold_counts(extent, extent, sp.k, sp.p, sp.s);
    for (int c : counts)
      require(c > 0, ErrorKind::Config,
              "split schedule leaves uncovered pixels at level " + std::to_string(i) +
                  " (k=" + std::to_string(sp.k) + ",p=" + std::to_string(sp.p) + ",s=" + std::to_string(sp.s) +
                  ")");
    dim *= sp.k * sp.k;
    levels[static_cast<size_t>(i)] = {grid, grid * grid, dim};
    extent = grid;
  }
  return levels;
}

template <class T>
struct TokenSet {
  Tensor<T> tokens;  // [B, n, d]
  int level = 0;
  long grid_side = 0;
};

// [B, n, d] token matrix viewed as a d-channel map on the token grid.
template <class T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, long grid) {
  const Shape& s = tokens.shape();
  require_dim(s.size() == 3 && s[1] == grid * grid,
              "tokens_to_map: " + shape_str(s) + " does not form a " + std::to_string(grid) + "-grid");
  return reshape(transpose_last2(tokens), {s[0], s[2], grid, grid});
}

template <class T>
Tensor<T> map_to_tokens(const Tensor<T>& map) {
  const Shape& s = map.shape();
  require_dim(s.size() == 4 && s[2] == s[3], "map_to_tokens expects [B,d,g,g], got " + shape_str(s));
  return transpose_last2(reshape(map, {s[0], s[1], s[2] * s[3]}));
}

// Image-to-token split+flatten with optional additive position table.
template <class T>
struct ImageToTokens {
  SplitSpec split;
  long image_size = 0, channels = 0;
  LevelInfo level;
  Tensor<T> pos;  // [n0, d0] or empty
  bool use_pos = true;

  ImageToTokens() = default;
  ImageToTokens(const SaaConfig& cfg, const LevelInfo& lvl)
      : split(cfg.splits[0]), image_size(cfg.image_size), channels(cfg.channels), level(lvl),
        use_pos(cfg.use_positional_encoding) {
    if (use_pos) pos = sinusoidal_encoding<T>(level.tokens, level.dim);
  }

  TokenSet<T> forward(const Tensor<T>& images) const {
    const Shape& s = images.shape();
    require_dim(s.size() == 4 && s[1] == channels && s[2] == image_size && s[3] == image_size,
                "image_to_tokens: expected [B," + std::to_string(channels) + "," + std::to_string(image_size) +
                    "," + std::to_string(image_size) + "], got " + shape_str(s));
    Tensor<T> t = unfold(images, split.k, split.p, split.s);
    if (use_pos) t = add(t, pos);
    return {t, 0, level.grid};
  }
};

// Inner transformer -> reshape to a spatial map -> soft split -> outer
// transformer. Token dim grows by k^2, token count shrinks per the grid rule.
template <class T>
struct TokensToToken {
  SplitSpec split;
  LevelInfo in_level, out_level;
  TransformerLayer<T> inner, outer;

  TokensToToken() = default;
  TokensToToken(const std::string& name, const SaaConfig& cfg, const LevelInfo& in, const LevelInfo& out,
                const SplitSpec& sp, std::mt19937_64& rng)
      : split(sp), in_level(in), out_level(out) {
    inner = TransformerLayer<T>(name + "/inner", in.dim, cfg.heads, cfg.ff_ratio, rng);
    outer = TransformerLayer<T>(name + "/outer", out.dim, cfg.heads, cfg.ff_ratio, rng);
  }

  TokenSet<T> forward(const TokenSet<T>& t) const {
    require_dim(t.grid_side == in_level.grid && t.tokens.dim(2) == in_level.dim,
                "tokens_to_token: input level mismatch");
    Tensor<T> x = inner.forward(t.tokens);
    Tensor<T> map = tokens_to_map(x, in_level.grid);
    Tensor<T> split_tokens = unfold(map, split.k, split.p, split.s);
    Tensor<T> y = outer.forward(split_tokens);
    return {y, t.level + 1, out_level.grid};
  }

  void collect(std::vector<Parameter<T>*>& out) {
    inner.collect(out);
    outer.collect(out);
  }
};

// Each modality queries the other's keys/values; the two attended streams are
// concatenated along the token axis and projected back to n tokens.
template <class T>
struct CrossModalityTransformer {
  long dim = 0, tokens = 0;
  Parameter<T> wq_o, wk_o, wv_o, wq_d, wk_d, wv_d, wc;

  CrossModalityTransformer() = default;
  CrossModalityTransformer(const std::string& name, long n, long d, std::mt19937_64& rng) : dim(d), tokens(n) {
    auto mk = [&](const std::string& nm, long rows, long cols, long fan_in) {
      Tensor<T> t = Tensor<T>::zeros({rows, cols});
      he_normal_fill(t, fan_in, rng);
      return Parameter<T>(nm, t);
    };
    wq_o = mk(name + "/wq_o", d, d, d);
    wk_o = mk(name + "/wk_o", d, d, d);
    wv_o = mk(name + "/wv_o", d, d, d);
    wq_d = mk(name + "/wq_d", d, d, d);
    wk_d = mk(name + "/wk_d", d, d, d);
    wv_d = mk(name + "/wv_d", d, d, d);
    wc = mk(name + "/wc", n, 2 * n, 2 * n);
  }

  // The two cross-attended token sets before the token-axis projection.
  std::pair<Tensor<T>, Tensor<T>> cross_pair(const Tensor<T>& t_o, const Tensor<T>& t_d) const {
    T sc = T(1) / std::sqrt(static_cast<T>(dim));
    Tensor<T> q_o = matmul(t_o, wq_o.tensor), k_o = matmul(t_o, wk_o.tensor), v_o = matmul(t_o, wv_o.tensor);
    Tensor<T> q_d = matmul(t_d, wq_d.tensor), k_d = matmul(t_d, wk_d.tensor), v_d = matmul(t_d, wv_d.tensor);
    Tensor<T> a_od = softmax(scale(matmul(q_o, transpose_last2(k_d)), sc), -1);
    Tensor<T> a_do = softmax(scale(matmul(q_d, transpose_last2(k_o)), sc), -1);
    AttnProbe<T>::record(a_od);
    AttnProbe<T>::record(a_do);
    return {matmul(a_od, v_d), matmul(a_do, v_o)};
  }

  Tensor<T> forward(const Tensor<T>& t_o, const Tensor<T>& t_d) const {
    require_dim(t_o.shape() == t_d.shape(),
                "cross_modality_transformer: shape mismatch " + shape_str(t_o.shape()) + " vs " +
                    shape_str(t_d.shape()));
    require_dim(t_o.dim(1) == tokens && t_o.dim(2) == dim, "cross_modality_transformer: unexpected token shape");
    auto [c_o, c_d] = cross_pair(t_o, t_d);
    Tensor<T> cat = concat<T>({c_o, c_d}, 1);          // [B, 2n, d]
    return matmul(wc.tensor, cat);                     // [n,2n] x [B,2n,d] -> [B,n,d]
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&wq_o);
    out.push_back(&wk_o);
    out.push_back(&wv_o);
    out.push_back(&wq_d);
    out.push_back(&wk_d);
    out.push_back(&wv_d);
    out.push_back(&wc);
  }
};

// Count-normalized fold back to the lower level followed by a transformer.
// The caller adds the skip stream.
template <class T>
struct ReverseTokensToToken {
  SplitSpec split;
  LevelInfo low, high;
  TransformerLayer<T> tr;

  ReverseTokensToToken() = default;
  ReverseTokensToToken(const std::string& name, const SaaConfig& cfg, const LevelInfo& low_,
                       const LevelInfo& high_, const SplitSpec& sp, std::mt19937_64& rng)
      : split(sp), low(low_), high(high_) {
    tr = TransformerLayer<T>(name + "/tr", low.dim, cfg.heads, cfg.ff_ratio, rng);
  }

  TokenSet<T> forward(const TokenSet<T>& t) const {
    require_dim(t.tokens.dim(1) == high.tokens && t.tokens.dim(2) == high.dim,
                "reverse_t2t: input shape " + shape_str(t.tokens.shape()) + " does not match level");
    Tensor<T> map = fold(t.tokens, split.k, split.p, split.s, low.dim, low.grid, low.grid);
    Tensor<T> x = map_to_tokens(map);
    Tensor<T> y = tr.forward(x);
    return {y, t.level - 1, low.grid};
  }

  void collect(std::vector<Parameter<T>*>& out) { tr.collect(out); }
};

// Gates every token by its affinity to the designated salient token (the
// first one). A sigmoid gate stands in for the degenerate one-key softmax
// and the gated salient value is added onto the original token.
template <class T>
struct TokenAttention {
  long dim = 0, tokens = 0;
  Parameter<T> ws_q, ws_k, ws_v;  // salient-token projections
  Parameter<T> w_rest;            // [n-1, d, d] per-token query projections

  TokenAttention() = default;
  TokenAttention(const std::string& name, long n, long d, std::mt19937_64& rng) : dim(d), tokens(n) {
    auto mk = [&](const std::string& nm, Shape shape, long fan_in) {
      Tensor<T> t = Tensor<T>::zeros(shape);
      he_normal_fill(t, fan_in, rng);
      return Parameter<T>(nm, t);
    };
    ws_q = mk(name + "/ws_q", {d, d}, d);
    ws_k = mk(name + "/ws_k", {d, d}, d);
    ws_v = mk(name + "/ws_v", {d, d}, d);
    w_rest = mk(name + "/w_rest", {n - 1, d, d}, d);
  }

  // gate for the salient token itself and gates for the remaining tokens
  std::pair<Tensor<T>, Tensor<T>> gates(const Tensor<T>& t) const {
    const Shape& s = t.shape();
    require(s.size() == 3 && s[1] >= 2, ErrorKind::Contract,
            "token_attention requires at least 2 tokens, got " + shape_str(s));
    require_dim(s[1] == tokens && s[2] == dim, "token_attention: unexpected token shape " + shape_str(s));
    T sc = T(1) / std::sqrt(static_cast<T>(dim));
    Tensor<T> t_s = slice(t, 1, 0, 1);
    Tensor<T> rest = slice(t, 1, 1, s[1] - 1);
    Tensor<T> q_s = matmul(t_s, ws_q.tensor);
    Tensor<T> k_s = matmul(t_s, ws_k.tensor);
    Tensor<T> q_i = per_token_linear(rest, w_rest.tensor);
    Tensor<T> gate_s = sigmoid(scale(matmul(q_s, transpose_last2(k_s)), sc));  // [B,1,1]
    Tensor<T> gate_i = sigmoid(scale(matmul(q_i, transpose_last2(k_s)), sc));  // [B,n-1,1]
    return {gate_s, gate_i};
  }

  Tensor<T> forward(const Tensor<T>& t) const {
    auto [gate_s, gate_i] = gates(t);
    const Shape& s = t.shape();
    Tensor<T> t_s = slice(t, 1, 0, 1);
    Tensor<T> rest = slice(t, 1, 1, s[1] - 1);
    Tensor<T> v_s = matmul(t_s, ws_v.tensor);
    Tensor<T> hat_i = add(mul(gate_i, v_s), rest);
    Tensor<T> hat_s = add(mul(gate_s, v_s), t_s);
    return concat<T>({hat_s, hat_i}, 1);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&ws_q);
    out.push_back(&ws_k);
    out.push_back(&ws_v);
    out.push_back(&w_rest);
  }
};

// Full salient-attention block: two tokenized streams, two T2T levels each,
// cross-modality fusion at the top, reverse path with stream-a skips, token
// attention, and a fold back to image shape.
template <class T>
class SaaBlock {
 public:
  SaaBlock() = default;
  SaaBlock(const std::string& name, const SaaConfig& cfg, std::mt19937_64& rng)
      : cfg_(cfg), levels_(compute_levels(cfg)), name_(name) {
    i2t_ = ImageToTokens<T>(cfg, levels_[0]);
    t2t_a_[0] = TokensToToken<T>(name + "/t2t_a0", cfg, levels_[0], levels_[1], cfg.splits[1], rng);
    t2t_a_[1] = TokensToToken<T>(name + "/t2t_a1", cfg, levels_[1], levels_[2], cfg.splits[2], rng);
    t2t_b_[0] = TokensToToken<T>(name + "/t2t_b0", cfg, levels_[0], levels_[1], cfg.splits[1], rng);
    t2t_b_[1] = TokensToToken<T>(name + "/t2t_b1", cfg, levels_[1], levels_[2], cfg.splits[2], rng);
    cmt_ = CrossModalityTransformer<T>(name + "/cmt", levels_[2].tokens, levels_[2].dim, rng);
    rev_[1] = ReverseTokensToToken<T>(name + "/rev1", cfg, levels_[1], levels_[2], cfg.splits[2], rng);
    rev_[0] = ReverseTokensToToken<T>(name + "/rev0", cfg, levels_[0], levels_[1], cfg.splits[1], rng);
    ta_ = TokenAttention<T>(name + "/ta", levels_[0].tokens, levels_[0].dim, rng);
  }

  const SaaConfig& config() const { return cfg_; }
  const std::array<LevelInfo, 3>& levels() const { return levels_; }
  const std::string& name() const { return name_; }

  // Number of forward calls since construction (instrumentation hook).
  long call_count() const { return calls_; }
  void reset_call_count() { calls_ = 0; }

  Tensor<T> forward(const Tensor<T>& a, const Tensor<T>& b) {
    require_dim(a.shape() == b.shape(),
                "saa_forward: stream shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    ++calls_;
    TokenSet<T> ta0 = i2t_.forward(a);
    TokenSet<T> tb0 = i2t_.forward(b);
    TokenSet<T> ta1 = t2t_a_[0].forward(ta0);
    TokenSet<T> ta2 = t2t_a_[1].forward(ta1);
    TokenSet<T> tb1 = t2t_b_[0].forward(tb0);
    TokenSet<T> tb2 = t2t_b_[1].forward(tb1);
    Tensor<T> tod2 = cmt_.forward(ta2.tokens, tb2.tokens);
    TokenSet<T> r1 = rev_[1].forward({tod2, 2, levels_[2].grid});
    Tensor<T> tod1 = add(r1.tokens, ta1.tokens);
    TokenSet<T> r0 = rev_[0].forward({tod1, 1, levels_[1].grid});
    Tensor<T> tod0 = add(r0.tokens, ta0.tokens);
    Tensor<T> sal = ta_.forward(tod0);
    const SplitSpec& sp = cfg_.splits[0];
    return fold(sal, sp.k, sp.p, sp.s, cfg_.channels, cfg_.image_size, cfg_.image_size);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    t2t_a_[0].collect(out);
    t2t_a_[1].collect(out);
    t2t_b_[0].collect(out);
    t2t_b_[1].collect(out);
    cmt_.collect(out);
    rev_[1].collect(out);
    rev_[0].collect(out);
    ta_.collect(out);
  }

  ImageToTokens<T>& i2t() { return i2t_; }
  TokensToToken<T>& t2t_a(int i) { return t2t_a_[static_cast<size_t>(i)]; }
  TokensToToken<T>& t2t_b(int i) { return t2t_b_[static_cast<size_t>(i)]; }
  CrossModalityTransformer<T>& cmt() { return cmt_; }
  ReverseTokensToToken<T>& rev(int i) { return rev_[static_cast<size_t>(i)]; }
  TokenAttention<T>& ta() { return ta_; }

 private:
  SaaConfig cfg_;
  std::array<LevelInfo, 3> levels_;
  std::string name_;
  ImageToTokens<T> i2t_;
  std::array<TokensToToken<T>, 2> t2t_a_, t2t_b_;
  CrossModalityTransformer<T> cmt_;
  std::array<ReverseTokensToToken<T>, 2> rev_;
  TokenAttention<T> ta_;
  long calls_ = 0;
};

}  // namespace discn
