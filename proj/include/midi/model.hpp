/*
 * Copyright 2026 The midi-tune Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "midi/memory.hpp"
#include "midi/ops.hpp"
#include "midi/rng.hpp"

namespace midi {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 512;
  std::size_t max_positions = 2048;
  double rope_base = 10000.0;
  double norm_epsilon = 1e-5;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0 || max_positions == 0) {
      throw ConfigError("model config: extents must be positive");
    }
    if (d_model % n_heads != 0) throw ConfigError("model config: d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw ConfigError("model config: head dimension must be even for rotary pairing");
    if (!(rope_base > 1.0)) throw ConfigError("model config: rope_base must exceed 1");
    if (!(norm_epsilon > 0.0)) throw ConfigError("model config: norm_epsilon must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

enum class Role : std::uint8_t { agent = 0, user = 1 };
enum class Projection : std::uint8_t { q = 0, k = 1, v = 2, o = 3 };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::agent: return "agent";
    case Role::user: return "user";
  }
  throw ContractError("unknown role " + std::to_string(int(r)));
}

inline const char* projection_name(Projection p) {
  switch (p) {
    case Projection::q: return "q";
    case Projection::k: return "k";
    case Projection::v: return "v";
    case Projection::o: return "o";
  }
  throw ContractError("unknown projection");
}

template <Scalar T>
struct LayerWeights {
  Array<T> wq, wk, wv, wo;          // [d, d]
  Array<T> w_gate, w_up;            // [d_ff, d]
  Array<T> w_down;                  // [d, d_ff]
  Array<T> attn_norm, ffn_norm;     // [d]
};

/// Frozen backbone. The LM head is tied to the token embedding.
template <Scalar T>
struct BaseWeights {
  /// Embedding rows are N(0, (scale/sqrt(d))²). The tied head can then reach
  /// logit gaps large enough for a frozen random base to fit sharp
  /// next-token distributions through the adapters alone.
  static constexpr double kEmbeddingScale = 2.0;

  Array<T> embedding;  // [V, d]
  std::vector<LayerWeights<T>> layers;
  Array<T> final_norm;  // [d]

  static BaseWeights init(const ModelConfig& cfg, Rng rng) {
    cfg.validate();
    const std::size_t d = cfg.d_model, f = cfg.d_ff;
    auto normal = [&rng](Shape s, double std) {
      Array<T> a(std::move(s));
      for (auto& v : a.data()) v = T(rng.normal() * std);
      return a;
    };
    BaseWeights w;
    w.embedding = normal({cfg.vocab_size, d}, kEmbeddingScale / std::sqrt(double(d)));
    const double proj = 1.0 / std::sqrt(double(d));
    const double resid = proj / std::sqrt(2.0 * double(cfg.n_layers));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      LayerWeights<T> lw;
      lw.wq = normal({d, d}, proj);
      lw.wk = normal({d, d}, proj);
      lw.wv = normal({d, d}, proj);
      lw.wo = normal({d, d}, resid);
      lw.w_gate = normal({f, d}, proj);
      lw.w_up = normal({f, d}, proj);
      lw.w_down = normal({d, f}, 1.0 / std::sqrt(double(f)) / std::sqrt(2.0 * double(cfg.n_layers)));
      lw.attn_norm = Array<T>({d}, T{1});
      lw.ffn_norm = Array<T>({d}, T{1});
      w.layers.push_back(std::move(lw));
    }
    w.final_norm = Array<T>({d}, T{1});
    return w;
  }

  /// Visits every array with a stable name, in serialisation order.
  template <class Self, class Fn>
  static void visit(Self& self, Fn&& fn) {
    fn(std::string("embedding"), self.embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& lw = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      fn(p + "wq", lw.wq);
      fn(p + "wk", lw.wk);
      fn(p + "wv", lw.wv);
      fn(p + "wo", lw.wo);
      fn(p + "w_gate", lw.w_gate);
      fn(p + "w_up", lw.w_up);
      fn(p + "w_down", lw.w_down);
      fn(p + "attn_norm", lw.attn_norm);
      fn(p + "ffn_norm", lw.ffn_norm);
    }
    fn(std::string("final_norm"), self.final_norm);
  }

  bool bitwise_equal(const BaseWeights& o) const {
    bool eq = embedding.bitwise_equal(o.embedding) && final_norm.bitwise_equal(o.final_norm) &&
              layers.size() == o.layers.size();
    for (std::size_t l = 0; eq && l < layers.size(); ++l) {
      const auto& a = layers[l];
      const auto& b = o.layers[l];
      eq = a.wq.bitwise_equal(b.wq) && a.wk.bitwise_equal(b.wk) && a.wv.bitwise_equal(b.wv) &&
           a.wo.bitwise_equal(b.wo) && a.w_gate.bitwise_equal(b.w_gate) && a.w_up.bitwise_equal(b.w_up) &&
           a.w_down.bitwise_equal(b.w_down) && a.attn_norm.bitwise_equal(b.attn_norm) &&
           a.ffn_norm.bitwise_equal(b.ffn_norm);
    }
    return eq;
  }
};

/// Low-rank update ΔW = (alpha / r)·B·A for a frozen [out × in] projection.
template <Scalar T>
struct LoraDelta {
  Array<T> a;  // [r, in]
  Array<T> b;  // [out, r]
  double alpha = 16.0;

  std::size_t rank() const { return a.dim(0); }
  T scale() const { return T(alpha / double(rank())); }
  std::size_t parameter_count() const { return a.size() + b.size(); }
};

struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 16.0;
  std::vector<Projection> agent_targets{Projection::q, Projection::v};
  std::vector<Projection> user_targets{Projection::q};

  void validate(const ModelConfig& m) const {
    if (rank == 0 || rank > m.d_model) throw ConfigError("lora: rank must be in [1, d_model]");
    if (!(alpha > 0.0)) throw ConfigError("lora: alpha must be positive");
    for (auto p : user_targets) {
      if (p == Projection::v) {
        throw ConfigError("lora: the user role may not adapt the value projection (context value protection)");
      }
    }
  }
};

struct AdapterKey {
  Role role;
  std::size_t layer;
  Projection proj;
  auto operator<=>(const AdapterKey&) const = default;
};

inline std::string adapter_name(const AdapterKey& k) {
  return std::string(role_name(k.role)) + "." + std::to_string(k.layer) + "." + projection_name(k.proj);
}

/// Two role-specific sets of low-rank deltas over one shared frozen base.
template <Scalar T>
class RoleAdapters {
 public:
  RoleAdapters() = default;

  /// Fresh deltas: A uniform in ±1/sqrt(in), B zero. `roles` selects which
  /// roles exist (single-role baselines use only the agent).
  static RoleAdapters init(const ModelConfig& m, const LoraConfig& cfg, std::vector<Role> roles, Rng rng) {
    cfg.validate(m);
    RoleAdapters out;
    for (Role role : roles) {
      out.roles_.push_back(role);
      const auto& targets = role == Role::agent ? cfg.agent_targets : cfg.user_targets;
      for (std::size_t l = 0; l < m.n_layers; ++l) {
        for (Projection p : targets) {
          AdapterKey key{role, l, p};
          Rng r = rng.fork(adapter_name(key));
          const double bound = 1.0 / std::sqrt(double(m.d_model));
          LoraDelta<T> d;
          d.alpha = cfg.alpha;
          d.a = Array<T>({cfg.rank, m.d_model});
          for (auto& v : d.a.data()) v = T(r.uniform(-bound, bound));
          d.b = Array<T>({m.d_model, cfg.rank});
          out.deltas_.emplace(key, std::move(d));
        }
      }
    }
    return out;
  }

  bool has_role(Role r) const { return std::find(roles_.begin(), roles_.end(), r) != roles_.end(); }
  const std::vector<Role>& roles() const { return roles_; }

  const LoraDelta<T>* find(Role r, std::size_t layer, Projection p) const {
    auto it = deltas_.find(AdapterKey{r, layer, p});
    return it == deltas_.end() ? nullptr : &it->second;
  }

  void insert(const AdapterKey& key, LoraDelta<T> d) {
    if (key.role == Role::user && key.proj == Projection::v) {
      throw ConfigError("lora: the user role may not adapt the value projection (context value protection)");
    }
    if (d.b.dim(1) != d.a.dim(0)) {
      throw ConfigError("lora: rank mismatch between A " + shape_string(d.a.shape()) + " and B " +
                        shape_string(d.b.shape()));
    }
    if (!has_role(key.role)) roles_.push_back(key.role);
    deltas_.insert_or_assign(key, std::move(d));
  }

  std::map<AdapterKey, LoraDelta<T>>& deltas() { return deltas_; }
  const std::map<AdapterKey, LoraDelta<T>>& deltas() const { return deltas_; }

  /// Adapted projections of one role.
  std::size_t projection_count(Role r) const {
    std::size_t n = 0;
    for (const auto& [k, _] : deltas_) n += k.role == r ? 1 : 0;
    return n;
  }

  std::size_t parameter_count(Role r) const {
    std::size_t n = 0;
    for (const auto& [k, d] : deltas_) n += k.role == r ? d.parameter_count() : 0;
    return n;
  }

  /// Visits "<role>.<layer>.<proj>.A" / ".B" arrays.
  template <class Self, class Fn>
  static void visit(Self& self, Fn&& fn) {
    for (auto& [k, d] : self.deltas_) {
      fn(adapter_name(k) + ".A", d.a);
      fn(adapter_name(k) + ".B", d.b);
    }
  }

 private:
  std::vector<Role> roles_;
  std::map<AdapterKey, LoraDelta<T>> deltas_;
};

/// Everything needed to run the model: config, frozen base, role deltas.
template <Scalar T>
struct ModelState {
  ModelConfig config;
  LoraConfig lora;
  BaseWeights<T> base;
  RoleAdapters<T> adapters;

  /// Base from the "init/base" stream and deltas from "init/adapters", so two
  /// runs with the same seed share their starting point whatever the mode.
  static ModelState init(const ModelConfig& cfg, const LoraConfig& lora, std::vector<Role> roles, std::uint64_t seed) {
    Rng root(seed);
    return ModelState{cfg, lora, BaseWeights<T>::init(cfg, root.fork("init/base")),
                      RoleAdapters<T>::init(cfg, lora, std::move(roles), root.fork("init/adapters"))};
  }
};

template <Scalar T>
struct LoraVars {
  Var<T> a, b;
  T scale;
};

/// y = x·Wᵀ + (alpha/r)·x·Aᵀ·Bᵀ; plain projection when no delta is given.
template <Scalar T>
Var<T> lora_linear(Var<T> x, Var<T> w, const std::optional<LoraVars<T>>& delta) {
  Var<T> y = linear(x, w);
  if (!delta) return y;
  const auto& a = delta->a.value();
  const auto& b = delta->b.value();
  if (a.rank() != 2 || b.rank() != 2 || b.dim(1) != a.dim(0)) {
    throw ConfigError("lora_linear: rank mismatch between A " + shape_string(a.shape()) + " and B " +
                      shape_string(b.shape()));
  }
  Var<T> low = linear(linear(x, delta->a), delta->b);
  return add(y, scale(low, delta->scale));
}

/// Rotates adjacent pairs (2i, 2i+1) of the last axis of x [B, H, S, Dh] by
/// position·base^(-2i/Dh). Padding positions (negative) are left unrotated.
template <Scalar T>
Var<T> rope_apply(Var<T> x, std::span<const int> positions, double base) {
  const auto& xv = x.value();
  if (xv.rank() != 4 || xv.dim(3) % 2 != 0) {
    throw DimensionError("rope_apply: expected [B,H,S,Dh] with even Dh, got " + shape_string(xv.shape()));
  }
  const std::size_t B = xv.dim(0), H = xv.dim(1), S = xv.dim(2), D = xv.dim(3);
  if (positions.size() != B * S) {
    throw ContractError("rope_apply: " + std::to_string(positions.size()) + " positions for " +
                        std::to_string(B * S) + " slots");
  }
  auto table = std::make_shared<std::vector<T>>(B * S * D);  // cos, sin interleaved per pair
  for (std::size_t bs = 0; bs < B * S; ++bs) {
    const double p = positions[bs] < 0 ? 0.0 : double(positions[bs]);
    for (std::size_t i = 0; i < D / 2; ++i) {
      const double ang = p * std::pow(base, -2.0 * double(i) / double(D));
      (*table)[bs * D + 2 * i] = T(std::cos(ang));
      (*table)[bs * D + 2 * i + 1] = T(std::sin(ang));
    }
  }
  auto rotate = [B, H, S, D, table](const T* src, T* dst, bool inverse, bool acc) {
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t s = 0; s < S; ++s) {
          const T* cs = table->data() + (b * S + s) * D;
          const std::size_t off = ((b * H + h) * S + s) * D;
          for (std::size_t i = 0; i < D; i += 2) {
            const T c = cs[i];
            const T sn = inverse ? -cs[i + 1] : cs[i + 1];
            const T x0 = src[off + i], x1 = src[off + i + 1];
            const T y0 = x0 * c - x1 * sn, y1 = x0 * sn + x1 * c;
            if (acc) {
              dst[off + i] += y0;
              dst[off + i + 1] += y1;
            } else {
              dst[off + i] = y0;
              dst[off + i + 1] = y1;
            }
          }
        }
      }
    }
  };
  Array<T> out(xv.shape());
  rotate(xv.ptr(), out.ptr(), false, false);
  return x.tape().emit(std::move(out), {x}, [x, rotate](Tape<T>& t, Var<T> y) {
    rotate(t.grad(y).ptr(), t.grad(x).ptr(), true, true);
  });
}

/// Base weights and deltas bound to one tape. Base arrays are constants;
/// deltas become named trainable leaves when `train_adapters` is set.
template <Scalar T>
class BoundModel {
 public:
  BoundModel(Tape<T>& tape, const ModelConfig& cfg, const BaseWeights<T>& base, const RoleAdapters<T>& adapters,
             bool train_adapters)
      : tape_(tape), cfg_(cfg), adapters_(adapters) {
    embedding_ = tape.constant(base.embedding);
    final_norm_ = tape.constant(base.final_norm);
    for (const auto& lw : base.layers) {
      layers_.push_back(Layer{tape.constant(lw.wq), tape.constant(lw.wk), tape.constant(lw.wv),
                              tape.constant(lw.wo), tape.constant(lw.w_gate), tape.constant(lw.w_up),
                              tape.constant(lw.w_down), tape.constant(lw.attn_norm),
                              tape.constant(lw.ffn_norm)});
    }
    for (const auto& [key, d] : adapters.deltas()) {
      const std::string n = adapter_name(key);
      Var<T> a = train_adapters ? tape.param(n + ".A", d.a) : tape.constant(d.a);
      Var<T> b = train_adapters ? tape.param(n + ".B", d.b) : tape.constant(d.b);
      deltas_.emplace(key, LoraVars<T>{a, b, d.scale()});
    }
  }

  Tape<T>& tape() { return tape_; }
  const ModelConfig& config() const { return cfg_; }
  const RoleAdapters<T>& adapters() const { return adapters_; }

  std::optional<LoraVars<T>> delta(Role r, std::size_t layer, Projection p) const {
    auto it = deltas_.find(AdapterKey{r, layer, p});
    if (it == deltas_.end()) return std::nullopt;
    return it->second;
  }

  struct Layer {
    Var<T> wq, wk, wv, wo, w_gate, w_up, w_down, attn_norm, ffn_norm;
  };
  const Layer& layer(std::size_t l) const { return layers_.at(l); }
  Var<T> embedding() const { return embedding_; }
  Var<T> final_norm() const { return final_norm_; }

 private:
  Tape<T>& tape_;
  ModelConfig cfg_;
  const RoleAdapters<T>& adapters_;
  Var<T> embedding_, final_norm_;
  std::vector<Layer> layers_;
  std::map<AdapterKey, LoraVars<T>> deltas_;
};

/// One batched segment of tokens; row-major [batch × length] grids.
struct Segment {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> tokens;
  std::vector<int> positions;
};

/// Attention context for one layer: [B, H, L, Dh] keys/values on the tape.
template <Scalar T>
struct ContextKV {
  Var<T> keys, values;
};

template <Scalar T>
struct SegmentOutput {
  Var<T> logits;                  // [B, S, V]
  std::vector<ContextKV<T>> kv;   // per layer, this segment only, post-rotation
};

/// Runs every layer over a segment with the role's deltas applied to its
/// target projections, attending to `context` (may be empty) followed by the
/// segment itself as allowed by `mask`. Does not touch any memory.
template <Scalar T>
SegmentOutput<T> forward_segment(BoundModel<T>& m, const Segment& seg, Role role,
                                 std::span<const ContextKV<T>> context, const AttentionMask& mask) {
  const ModelConfig& cfg = m.config();
  if (role != Role::agent && role != Role::user) throw ContractError("forward_segment: unknown role");
  if (!m.adapters().has_role(role) && !m.adapters().deltas().empty()) {
    throw ContractError(std::string("forward_segment: role '") + role_name(role) + "' has no adapters");
  }
  const std::size_t B = seg.batch, S = seg.length, D = cfg.d_model, H = cfg.n_heads, Dh = cfg.head_dim();
  if (B == 0 || S == 0 || seg.tokens.size() != B * S || seg.positions.size() != B * S) {
    throw ContractError("forward_segment: tokens/positions do not match a " + std::to_string(B) + "x" +
                        std::to_string(S) + " segment");
  }
  if (!context.empty() && context.size() != cfg.n_layers) {
    throw ContractError("forward_segment: memory has " + std::to_string(context.size()) + " layers, model has " +
                        std::to_string(cfg.n_layers));
  }
  const std::size_t L = context.empty() ? 0 : context[0].keys.value().dim(2);
  if (mask.batch != B || mask.queries != S || mask.keys != L + S) {
    throw ContractError("forward_segment: attention mask does not match segment and memory");
  }
  for (int p : seg.positions) {
    if (p >= 0 && std::size_t(p) >= cfg.max_positions) {
      throw CapacityError("context overflow: position " + std::to_string(p) + " exceeds max_positions " +
                          std::to_string(cfg.max_positions));
    }
  }

  const T attn_scale = T(1.0 / std::sqrt(double(Dh)));
  const T eps = T(cfg.norm_epsilon);
  Var<T> x = embedding(m.embedding(), seg.tokens, Shape{B, S});
  SegmentOutput<T> out;
  auto heads = [&](Var<T> v) { return permute(reshape(v, Shape{B, S, H, Dh}), {0, 2, 1, 3}); };

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& w = m.layer(l);
    Var<T> h = rms_norm(x, w.attn_norm, eps);
    Var<T> q = heads(lora_linear(h, w.wq, m.delta(role, l, Projection::q)));
    Var<T> k = heads(lora_linear(h, w.wk, m.delta(role, l, Projection::k)));
    Var<T> v = heads(lora_linear(h, w.wv, m.delta(role, l, Projection::v)));
    q = rope_apply(q, seg.positions, cfg.rope_base);
    k = rope_apply(k, seg.positions, cfg.rope_base);
    out.kv.push_back(ContextKV<T>{k, v});

    Var<T> keys = k, values = v;
    if (L > 0) {
      keys = concat(context[l].keys, k, 2);
      values = concat(context[l].values, v, 2);
    }
    Var<T> scores = scale(bmm(q, keys, false, true), attn_scale);
    Var<T> probs = masked_softmax(scores, mask.allow);
    Var<T> attn = reshape(permute(bmm(probs, values), {0, 2, 1, 3}), Shape{B, S, D});
    x = add(x, lora_linear(attn, w.wo, m.delta(role, l, Projection::o)));

    Var<T> h2 = rms_norm(x, w.ffn_norm, eps);
    Var<T> ff = mul(silu(linear(h2, w.w_gate)), linear(h2, w.w_up));
    x = add(x, linear(ff, w.w_down));
  }
  out.logits = linear(rms_norm(x, m.final_norm(), eps), m.embedding());
  return out;
}

/// Cached memory as detached tape constants.
template <Scalar T>
std::vector<ContextKV<T>> memory_context(Tape<T>& tape, const RoundMemory<T>& mem) {
  std::vector<ContextKV<T>> ctx;
  if (mem.empty()) return ctx;
  for (std::size_t l = 0; l < mem.layers(); ++l) {
    ctx.push_back(ContextKV<T>{tape.constant(mem.keys(l)), tape.constant(mem.values(l))});
  }
  return ctx;
}

template <Scalar T>
SegmentOutput<T> forward_segment(BoundModel<T>& m, const Segment& seg, Role role, const RoundMemory<T>& memory,
                                 const AttentionMask& mask) {
  if (memory.layers() != m.config().n_layers) {
    throw ContractError("forward_segment: memory layer count does not match the model");
  }
  if (memory.batch() != seg.batch) throw ContractError("forward_segment: memory batch does not match segment");
  auto ctx = memory_context(m.tape(), memory);
  return forward_segment(m, seg, role, std::span<const ContextKV<T>>(ctx), mask);
}

/// Segment K/V values ready for RoundMemory::append.
template <Scalar T>
std::vector<LayerKV<T>> kv_arrays(const SegmentOutput<T>& out) {
  std::vector<LayerKV<T>> kv;
  for (const auto& c : out.kv) kv.push_back(LayerKV<T>{c.keys.value(), c.values.value()});
  return kv;
}

}  // namespace midi
