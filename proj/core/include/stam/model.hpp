#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stam/errors.hpp"
#include "stam/rng.hpp"
#include "stam/tape.hpp"
#include "stam/tensor.hpp"

namespace stam {

enum class QueryFusion : uint8_t { kSubtract = 0, kAdd = 1, kConcat = 2 };

inline const char* fusion_name(QueryFusion f) {
  switch (f) {
    case QueryFusion::kSubtract: return "subtract";
    case QueryFusion::kAdd: return "add";
    case QueryFusion::kConcat: return "concat";
  }
  return "?";
}

struct ModelConfig {
  int64_t d = 256;
  int64_t heads = 8;
  int64_t layers = 2;
  int64_t ffn_dim = 1024;
  int64_t appearance_dim = 256;
  int64_t window_T = 150;
  QueryFusion fusion = QueryFusion::kSubtract;
  bool use_aspe = true;   // absolute spatial encoding of box coordinates
  bool use_rstpe = true;  // pairwise attention bias from frame/box deltas

  void validate() const {
    if (d < 1 || heads < 1 || layers < 1 || ffn_dim < 1 || appearance_dim < 1 || window_T < 1) {
      throw ContractError("model config: all dimensions must be >= 1");
    }
    if (d % heads != 0) {
      throw ContractError("model config: d=" + std::to_string(d) +
                          " not divisible by heads=" + std::to_string(heads));
    }
  }

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.d == b.d && a.heads == b.heads && a.layers == b.layers && a.ffn_dim == b.ffn_dim &&
           a.appearance_dim == b.appearance_dim && a.window_T == b.window_T &&
           a.fusion == b.fusion && a.use_aspe == b.use_aspe && a.use_rstpe == b.use_rstpe;
  }
};

/// Named parameter blocks in a fixed canonical order. The order doubles as the
/// checkpoint block order, so it must never change silently.
template <typename S>
struct ModelParamsT {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Tensor<S>> values;

  int64_t census() const {
    int64_t n = 0;
    for (const auto& v : values) n += v.numel();
    return n;
  }

  int find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return static_cast<int>(i);
    }
    throw ContractError("unknown parameter block: " + name);
  }

  template <typename T>
  ModelParamsT<T> cast() const {
    ModelParamsT<T> out;
    out.config = config;
    out.names = names;
    for (const auto& v : values) out.values.push_back(v.template cast<T>());
    return out;
  }
};

using ModelParams = ModelParamsT<float>;

namespace detail {

template <typename S>
void add_block(ModelParamsT<S>& p, const std::string& name, Tensor<S> v) {
  p.names.push_back(name);
  p.values.push_back(std::move(v));
}

template <typename S>
Tensor<S> xavier(Rng& rng, int64_t fan_in, int64_t fan_out) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<S> t({fan_in, fan_out});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.uniform(-limit, limit));
  return t;
}

template <typename S>
void add_linear(ModelParamsT<S>& p, Rng& rng, const std::string& stem, int64_t in, int64_t out) {
  add_block(p, stem + ".w", xavier<S>(rng, in, out));
  add_block(p, stem + ".b", Tensor<S>({1, out}));
}

template <typename S>
void add_layer_norm(ModelParamsT<S>& p, const std::string& stem, int64_t d) {
  add_block(p, stem + ".g", Tensor<S>({1, d}, S(1)));
  add_block(p, stem + ".b", Tensor<S>({1, d}));
}

template <typename S>
void add_attention(ModelParamsT<S>& p, Rng& rng, const std::string& stem, int64_t d) {
  add_linear(p, rng, stem + ".q", d, d);
  add_linear(p, rng, stem + ".k", d, d);
  add_linear(p, rng, stem + ".v", d, d);
  add_linear(p, rng, stem + ".o", d, d);
}

}  // namespace detail

/// Fresh parameters: Xavier-uniform linear maps, zero biases, unit layer-norm
/// gains, and a small uniform pairwise-bias map so relative geometry shapes
/// attention from the first step instead of waiting on a dead zero block.
template <typename S>
ModelParamsT<S> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelParamsT<S> p;
  p.config = cfg;
  Rng rng(seed);
  detail::add_linear(p, rng, "app_proj", cfg.appearance_dim, cfg.d);
  detail::add_linear(p, rng, "aspe.1", 4, cfg.d);
  detail::add_linear(p, rng, "aspe.2", cfg.d, cfg.d);
  detail::add_linear(p, rng, "aspe.3", cfg.d, cfg.d);
  Tensor<S> rstpe_w({cfg.heads, 5});
  for (int64_t i = 0; i < rstpe_w.numel(); ++i) {
    rstpe_w.data()[i] = static_cast<S>(rng.uniform(-0.1, 0.1));
  }
  detail::add_block(p, "rstpe.w", rstpe_w);
  for (int64_t l = 0; l < cfg.layers; ++l) {
    std::string stem = "enc." + std::to_string(l);
    detail::add_attention(p, rng, stem + ".attn", cfg.d);
    detail::add_layer_norm(p, stem + ".ln1", cfg.d);
    detail::add_linear(p, rng, stem + ".ffn.1", cfg.d, cfg.ffn_dim);
    detail::add_linear(p, rng, stem + ".ffn.2", cfg.ffn_dim, cfg.d);
    detail::add_layer_norm(p, stem + ".ln2", cfg.d);
  }
  for (int64_t l = 0; l < cfg.layers; ++l) {
    std::string stem = "dec." + std::to_string(l);
    detail::add_attention(p, rng, stem + ".self", cfg.d);
    detail::add_layer_norm(p, stem + ".ln1", cfg.d);
    detail::add_attention(p, rng, stem + ".cross", cfg.d);
    detail::add_layer_norm(p, stem + ".ln2", cfg.d);
    detail::add_linear(p, rng, stem + ".ffn.1", cfg.d, cfg.ffn_dim);
    detail::add_linear(p, rng, stem + ".ffn.2", cfg.ffn_dim, cfg.d);
    detail::add_layer_norm(p, stem + ".ln3", cfg.d);
  }
  detail::add_linear(p, rng, "head.1", cfg.d, 4 * cfg.d);
  detail::add_linear(p, rng, "head.2", 4 * cfg.d, 2);
  if (cfg.fusion == QueryFusion::kConcat) {
    detail::add_linear(p, rng, "fuse", 2 * cfg.d, cfg.d);
  }
  return p;
}

/// One tracklet's observations inside the temporal window.
template <typename S>
struct TrackletInput {
  Tensor<S> appearances;    // K x appearance_dim
  Tensor<S> geoms;          // K x 4, normalized (cx, cy, w, h)
  std::vector<int> frames;  // K absolute frame stamps
};

template <typename S>
struct DetectionsInput {
  Tensor<S> appearances;  // M x appearance_dim
  Tensor<S> geoms;        // M x 4
  int frame = 0;
};

/// Optional capture of every post-softmax attention matrix (all layers, all
/// heads, encoder then decoder order) for diagnostics.
template <typename S>
struct ForwardTrace {
  std::vector<Tensor<S>> attentions;
};

/// Signed relative features between two detection lists, target minus source:
/// row-major [5 x (ra*rb)] with rows (dt, dx, dy, dw, dh), dt scaled by the
/// temporal window. Entry (a, b) describes landing on b when looking from a.
template <typename S>
Tensor<S> relative_features(const std::vector<int>& frames_a, const Tensor<S>& geoms_a,
                            const std::vector<int>& frames_b, const Tensor<S>& geoms_b,
                            int64_t window_T) {
  int64_t ra = geoms_a.rows(), rb = geoms_b.rows();
  if (static_cast<int64_t>(frames_a.size()) != ra ||
      static_cast<int64_t>(frames_b.size()) != rb) {
    throw ShapeError("relative_features: frame stamps do not match geometry rows");
  }
  Tensor<S> rel({5, ra * rb});
  S inv_t = S(1) / static_cast<S>(window_T);
  for (int64_t i = 0; i < ra; ++i) {
    for (int64_t j = 0; j < rb; ++j) {
      int64_t k = i * rb + j;
      rel(0, k) = static_cast<S>(frames_b[static_cast<size_t>(j)] -
                                 frames_a[static_cast<size_t>(i)]) *
                  inv_t;
      rel(1, k) = geoms_b(j, 0) - geoms_a(i, 0);
      rel(2, k) = geoms_b(j, 1) - geoms_a(i, 1);
      rel(3, k) = geoms_b(j, 2) - geoms_a(i, 2);
      rel(4, k) = geoms_b(j, 3) - geoms_a(i, 3);
    }
  }
  return rel;
}

/// Dot product of one head's bias map with a single relative feature.
template <typename S>
S rstpe_bias(const ModelParamsT<S>& params, const std::array<S, 5>& rel, int64_t head) {
  const Tensor<S>& w = params.values[static_cast<size_t>(params.find("rstpe.w"))];
  if (head < 0 || head >= w.rows()) throw ContractError("rstpe_bias: head out of range");
  S acc = S(0);
  for (int64_t c = 0; c < 5; ++c) acc += w(head, c) * rel[static_cast<size_t>(c)];
  return acc;
}

/// Model bound to a tape: parameters lifted as leaves (trainable or frozen),
/// forward methods build the graph.
template <typename S>
class BoundModel {
 public:
  BoundModel(Tape<S>& tape, const ModelParamsT<S>& params, bool trainable)
      : cfg_(params.config), tape_(&tape) {
    cfg_.validate();
    vars_.reserve(params.values.size());
    for (const auto& v : params.values) vars_.push_back(tape.leaf(v, trainable));
    index_ = build_index(params);
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<Var<S>>& param_vars() const { return vars_; }

  struct Embedded {
    Var<S> fused;       // rows x d
    Var<S> appearance;  // rows x d (projected)
    Var<S> aspe;        // rows x d (zero contribution when ASPE is off)
    bool has_aspe = false;
  };

  /// Projects appearance vectors and box coordinates into the shared width and
  /// fuses them by addition.
  Embedded embed(const Tensor<S>& appearances, const Tensor<S>& geoms) {
    if (appearances.cols() != cfg_.appearance_dim) {
      throw ShapeError("embed: appearance width " + appearances.shape_str() + " does not match " +
                       std::to_string(cfg_.appearance_dim));
    }
    if (geoms.cols() != 4 || geoms.rows() != appearances.rows()) {
      throw ShapeError("embed: geometry " + geoms.shape_str() + " does not pair with " +
                       appearances.shape_str());
    }
    for (int64_t i = 0; i < geoms.rows(); ++i) {
      for (int64_t c = 0; c < 4; ++c) {
        S v = geoms(i, c);
        if (v < S(-0.5) || v > S(1.5)) {
          throw ContractError("embed: box coordinate " + std::to_string(double(v)) +
                              " outside the normalized guard band [-0.5, 1.5]");
        }
      }
      if (geoms(i, 2) <= S(0) || geoms(i, 3) <= S(0)) {
        throw ContractError("embed: box width/height must be positive");
      }
    }
    Embedded e;
    Var<S> app = tape_->constant(appearances);
    e.appearance = linear(app, index_.app_w, index_.app_b);
    if (cfg_.use_aspe) {
      Var<S> g = tape_->constant(geoms);
      Var<S> h1 = relu(linear(g, index_.aspe_w1, index_.aspe_b1));
      Var<S> h2 = relu(linear(h1, index_.aspe_w2, index_.aspe_b2));
      e.aspe = linear(h2, index_.aspe_w3, index_.aspe_b3);
      e.fused = add(e.appearance, e.aspe);
      e.has_aspe = true;
    } else {
      e.fused = e.appearance;
    }
    return e;
  }

  /// Self-attention encoder over one tracklet; every pre-softmax logit gets
  /// the pairwise bias when enabled. Detections need not be frame-sorted.
  Var<S> encode_tracklet(const TrackletInput<S>& t, ForwardTrace<S>* trace = nullptr) {
    if (t.geoms.rows() < 1) throw ContractError("encode_tracklet: empty tracklet");
    Embedded e = embed(t.appearances, t.geoms);
    return encode_rows(e.fused, t.frames, t.geoms, trace);
  }

  /// Full assignment forward: encode tracklets, build fused queries, decode
  /// against the concatenated memory, and emit match probabilities.
  Var<S> forward_assignment(const std::vector<TrackletInput<S>>& tracklets,
                            const DetectionsInput<S>& dets, ForwardTrace<S>* trace = nullptr) {
    int64_t n = static_cast<int64_t>(tracklets.size());
    int64_t m = dets.geoms.rows();
    if (n < 1) throw ContractError("forward_assignment: need at least one tracklet");
    if (m < 1) throw ContractError("forward_assignment: need at least one detection");

    // Encode each tracklet independently; collect memory and query-side PE.
    std::vector<Var<S>> encoded, pes;
    std::vector<int> mem_frames;
    Tensor<S> mem_geoms({total_rows(tracklets), 4});
    int64_t mem_off = 0;
    for (const auto& t : tracklets) {
      Embedded e = embed(t.appearances, t.geoms);
      encoded.push_back(encode_rows(e.fused, t.frames, t.geoms, trace));
      pes.push_back(ape_vector(e, t.frames));
      for (int64_t r = 0; r < t.geoms.rows(); ++r, ++mem_off) {
        mem_frames.push_back(t.frames[static_cast<size_t>(r)]);
        for (int64_t c = 0; c < 4; ++c) mem_geoms(mem_off, c) = t.geoms(r, c);
      }
    }
    Var<S> memory = n == 1 ? encoded[0] : concat_rows(encoded);
    Var<S> pe = n == 1 ? pes[0] : concat_rows(pes);

    Embedded de = embed(dets.appearances, dets.geoms);
    Var<S> queries = build_queries(de.fused, pe, n, m);

    // Query (i,j) carries detection j's stamp for the cross-attention bias.
    std::vector<int> q_frames;
    Tensor<S> q_geoms({n * m, 4});
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < m; ++j) {
        q_frames.push_back(dets.frame);
        for (int64_t c = 0; c < 4; ++c) q_geoms(i * m + j, c) = dets.geoms(j, c);
      }
    }
    std::vector<Var<S>> cross_bias;
    if (cfg_.use_rstpe) {
      cross_bias = bias_heads(relative_features(q_frames, q_geoms, mem_frames, mem_geoms,
                                                cfg_.window_T),
                              n * m, mem_geoms.rows());
    }

    Var<S> x = queries;
    for (int64_t l = 0; l < cfg_.layers; ++l) {
      const DecLayerIx& ix = index_.dec[static_cast<size_t>(l)];
      Var<S> self_out = attention(ix.self_attn, x, x, nullptr, trace);
      x = layer_norm(add(x, self_out), vars_[ix.ln1g], vars_[ix.ln1b]);
      Var<S> cross_out =
          attention(ix.cross_attn, x, memory, cfg_.use_rstpe ? &cross_bias : nullptr, trace);
      x = layer_norm(add(x, cross_out), vars_[ix.ln2g], vars_[ix.ln2b]);
      Var<S> f = linear(relu(linear(x, ix.f1w, ix.f1b)), ix.f2w, ix.f2b);
      x = layer_norm(add(x, f), vars_[ix.ln3g], vars_[ix.ln3b]);
    }

    Var<S> h = relu(linear(x, index_.head1w, index_.head1b));
    Var<S> logits = linear(h, index_.head2w, index_.head2b);
    Var<S> probs2 = softmax_rows(logits);
    return reshape(slice_cols(probs2, 1, 2), {n, m});
  }

  /// Per-tracklet positional vector for queries: mean of the projected
  /// appearance rows plus the spatial embedding of the newest detection.
  Var<S> ape_vector(const Embedded& e, const std::vector<int>& frames) {
    Var<S> mean_app = mean_rows(e.appearance);
    if (!e.has_aspe) return mean_app;
    int64_t latest = 0;
    for (size_t i = 1; i < frames.size(); ++i) {
      if (frames[i] >= frames[static_cast<size_t>(latest)]) latest = static_cast<int64_t>(i);
    }
    return add(mean_app, slice_rows(e.aspe, latest, latest + 1));
  }

  /// q_(i,j) = fuse(detection j, tracklet i's positional vector), i outer.
  Var<S> build_queries(Var<S> det_f, Var<S> pe, int64_t n, int64_t m) {
    Var<S> tiled = tile_rows(det_f, n);
    Var<S> repeated = repeat_rows_each(pe, m);
    switch (cfg_.fusion) {
      case QueryFusion::kSubtract: return subtract(tiled, repeated);
      case QueryFusion::kAdd: return add(tiled, repeated);
      case QueryFusion::kConcat:
        return linear(concat_cols<S>({tiled, repeated}), index_.fuse_w, index_.fuse_b);
    }
    throw ContractError("build_queries: unknown fusion");
  }

 private:
  struct AttnIx {
    int qw, qb, kw, kb, vw, vb, ow, ob;
  };
  struct EncLayerIx {
    AttnIx attn;
    int ln1g, ln1b, f1w, f1b, f2w, f2b, ln2g, ln2b;
  };
  struct DecLayerIx {
    AttnIx self_attn;
    int ln1g, ln1b;
    AttnIx cross_attn;
    int ln2g, ln2b, f1w, f1b, f2w, f2b, ln3g, ln3b;
  };
  struct ParamIndex {
    int app_w, app_b;
    int aspe_w1, aspe_b1, aspe_w2, aspe_b2, aspe_w3, aspe_b3;
    int rstpe;
    std::vector<EncLayerIx> enc;
    std::vector<DecLayerIx> dec;
    int head1w, head1b, head2w, head2b;
    int fuse_w = -1, fuse_b = -1;
  };

  static int64_t total_rows(const std::vector<TrackletInput<S>>& ts) {
    int64_t r = 0;
    for (const auto& t : ts) r += t.geoms.rows();
    return r;
  }

  ParamIndex build_index(const ModelParamsT<S>& p) const {
    ParamIndex ix;
    ix.app_w = p.find("app_proj.w");
    ix.app_b = p.find("app_proj.b");
    ix.aspe_w1 = p.find("aspe.1.w");
    ix.aspe_b1 = p.find("aspe.1.b");
    ix.aspe_w2 = p.find("aspe.2.w");
    ix.aspe_b2 = p.find("aspe.2.b");
    ix.aspe_w3 = p.find("aspe.3.w");
    ix.aspe_b3 = p.find("aspe.3.b");
    ix.rstpe = p.find("rstpe.w");
    auto attn = [&p](const std::string& stem) {
      AttnIx a;
      a.qw = p.find(stem + ".q.w");
      a.qb = p.find(stem + ".q.b");
      a.kw = p.find(stem + ".k.w");
      a.kb = p.find(stem + ".k.b");
      a.vw = p.find(stem + ".v.w");
      a.vb = p.find(stem + ".v.b");
      a.ow = p.find(stem + ".o.w");
      a.ob = p.find(stem + ".o.b");
      return a;
    };
    for (int64_t l = 0; l < cfg_.layers; ++l) {
      std::string stem = "enc." + std::to_string(l);
      EncLayerIx e;
      e.attn = attn(stem + ".attn");
      e.ln1g = p.find(stem + ".ln1.g");
      e.ln1b = p.find(stem + ".ln1.b");
      e.f1w = p.find(stem + ".ffn.1.w");
      e.f1b = p.find(stem + ".ffn.1.b");
      e.f2w = p.find(stem + ".ffn.2.w");
      e.f2b = p.find(stem + ".ffn.2.b");
      e.ln2g = p.find(stem + ".ln2.g");
      e.ln2b = p.find(stem + ".ln2.b");
      ix.enc.push_back(e);
    }
    for (int64_t l = 0; l < cfg_.layers; ++l) {
      std::string stem = "dec." + std::to_string(l);
      DecLayerIx d;
      d.self_attn = attn(stem + ".self");
      d.ln1g = p.find(stem + ".ln1.g");
      d.ln1b = p.find(stem + ".ln1.b");
      d.cross_attn = attn(stem + ".cross");
      d.ln2g = p.find(stem + ".ln2.g");
      d.ln2b = p.find(stem + ".ln2.b");
      d.f1w = p.find(stem + ".ffn.1.w");
      d.f1b = p.find(stem + ".ffn.1.b");
      d.f2w = p.find(stem + ".ffn.2.w");
      d.f2b = p.find(stem + ".ffn.2.b");
      d.ln3g = p.find(stem + ".ln3.g");
      d.ln3b = p.find(stem + ".ln3.b");
      ix.dec.push_back(d);
    }
    ix.head1w = p.find("head.1.w");
    ix.head1b = p.find("head.1.b");
    ix.head2w = p.find("head.2.w");
    ix.head2b = p.find("head.2.b");
    if (cfg_.fusion == QueryFusion::kConcat) {
      ix.fuse_w = p.find("fuse.w");
      ix.fuse_b = p.find("fuse.b");
    }
    return ix;
  }

  Var<S> linear(Var<S> x, int w, int b) { return add_rowvec(matmul(x, vars_[w]), vars_[b]); }

  /// One per-head bias matrix from the shared 5-vector map.
  std::vector<Var<S>> bias_heads(const Tensor<S>& rel5, int64_t rq, int64_t rk) {
    std::vector<Var<S>> out;
    Var<S> rel = tape_->constant(rel5);
    for (int64_t h = 0; h < cfg_.heads; ++h) {
      Var<S> wh = slice_rows(vars_[index_.rstpe], h, h + 1);
      out.push_back(reshape(matmul(wh, rel), {rq, rk}));
    }
    return out;
  }

  /// Multi-head attention; bias (when present) is added to the pre-softmax
  /// logits of each head.
  Var<S> attention(const AttnIx& ix, Var<S> q_in, Var<S> kv_in, const std::vector<Var<S>>* bias,
                   ForwardTrace<S>* trace) {
    int64_t dh = cfg_.d / cfg_.heads;
    Var<S> q = linear(q_in, ix.qw, ix.qb);
    Var<S> k = linear(kv_in, ix.kw, ix.kb);
    Var<S> v = linear(kv_in, ix.vw, ix.vb);
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var<S>> heads;
    for (int64_t h = 0; h < cfg_.heads; ++h) {
      Var<S> qh = slice_cols(q, h * dh, (h + 1) * dh);
      Var<S> kh = slice_cols(k, h * dh, (h + 1) * dh);
      Var<S> vh = slice_cols(v, h * dh, (h + 1) * dh);
      Var<S> logits = scale(matmul(qh, transpose(kh)), inv_sqrt);
      if (bias != nullptr) logits = add(logits, (*bias)[static_cast<size_t>(h)]);
      Var<S> attn = softmax_rows(logits);
      if (trace != nullptr) trace->attentions.push_back(attn.value());
      heads.push_back(matmul(attn, vh));
    }
    Var<S> merged = cfg_.heads == 1 ? heads[0] : concat_cols(heads);
    return linear(merged, ix.ow, ix.ob);
  }

  Var<S> encode_rows(Var<S> fused, const std::vector<int>& frames, const Tensor<S>& geoms,
                     ForwardTrace<S>* trace) {
    int64_t k = geoms.rows();
    std::vector<Var<S>> bias;
    if (cfg_.use_rstpe) {
      bias = bias_heads(relative_features(frames, geoms, frames, geoms, cfg_.window_T), k, k);
    }
    Var<S> x = fused;
    for (int64_t l = 0; l < cfg_.layers; ++l) {
      const EncLayerIx& ix = index_.enc[static_cast<size_t>(l)];
      Var<S> a = attention(ix.attn, x, x, cfg_.use_rstpe ? &bias : nullptr, trace);
      x = layer_norm(add(x, a), vars_[ix.ln1g], vars_[ix.ln1b]);
      Var<S> f = linear(relu(linear(x, ix.f1w, ix.f1b)), ix.f2w, ix.f2b);
      x = layer_norm(add(x, f), vars_[ix.ln2g], vars_[ix.ln2b]);
    }
    return x;
  }

  ModelConfig cfg_;
  Tape<S>* tape_;
  std::vector<Var<S>> vars_;
  ParamIndex index_;
};

}  // namespace stam
