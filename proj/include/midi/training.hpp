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

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "midi/data.hpp"
#include "midi/memory.hpp"
#include "midi/model.hpp"
#include "midi/optim.hpp"

namespace midi {

/// midi: round-level memory with role adapters; concat: whole dialogue as
/// one causal sample; split: one (context, response) sample per round.
enum class TuneMode { midi, concat, split };

inline const char* mode_name(TuneMode m) {
  switch (m) {
    case TuneMode::midi: return "midi";
    case TuneMode::concat: return "concat";
    case TuneMode::split: return "split";
  }
  return "?";
}

inline TuneMode parse_mode(const std::string& s) {
  if (s == "midi") return TuneMode::midi;
  if (s == "concat") return TuneMode::concat;
  if (s == "split") return TuneMode::split;
  throw ConfigError("unknown tuning mode '" + s + "' (expected midi, concat or split)");
}

struct TrainConfig {
  TuneMode mode = TuneMode::midi;
  double beta = 1.0;
  double lr = 2e-5;
  double warmup_ratio = 0.03;
  std::string schedule = "cosine";
  std::size_t global_batch = 16;
  std::size_t micro_batch = 16;
  std::size_t epochs = 3;
  std::size_t max_rounds = 10;
  std::uint64_t seed = 0;
  /// Ablation: keep cached K/V attached so gradients cross rounds.
  bool backprop_through_rounds = false;
  /// Ablation: queries see cached slots only, not their own segment.
  bool strictly_cross_round = false;
  /// Ablation: the user role does not attend to instruction slots.
  bool user_hides_instruction = false;
  AdamWConfig adamw;

  void validate() const {
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("train config: beta must lie in (0, 1]");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ConfigError("train config: warmup ratio must lie in [0, 1)");
    if (!(lr >= 0.0)) throw ConfigError("train config: lr must be non-negative");
    if (schedule != "cosine") throw ConfigError("train config: only the cosine schedule is supported");
    if (micro_batch == 0 || global_batch == 0 || global_batch % micro_batch != 0) {
      throw ConfigError("train config: global_batch must be a positive multiple of micro_batch");
    }
    if (epochs == 0 || max_rounds == 0) throw ConfigError("train config: epochs and max_rounds must be positive");
  }

  std::size_t accumulation() const { return global_batch / micro_batch; }
};

/// Per-role losses of one batch as tape values.
template <Scalar T>
struct RoleLosses {
  Var<T> agent;  // L_s, token mean over agent targets
  Var<T> user;   // L_u, token mean over user targets
  Var<T> total;  // L_s + beta·L_u
  std::size_t agent_tokens = 0;
  std::size_t user_tokens = 0;
  std::size_t tokens_seen = 0;
  std::size_t skipped_segments = 0;
};

namespace detail {

template <Scalar T>
Var<T> token_mean(Tape<T>& tape, std::optional<Var<T>> nll, std::size_t count) {
  if (!nll || count == 0) return tape.constant(Array<T>::scalar(T{0}));
  return scale(*nll, T{1} / T(count));
}

template <Scalar T>
void accumulate_nll(std::optional<Var<T>>& acc, Var<T> v) {
  acc = acc ? add(*acc, v) : v;
}

template <Scalar T>
Var<T> segment_nll(const SegmentOutput<T>& out, const SegmentGrid& g, std::size_t vocab) {
  auto [tgt, mask] = g.shifted_targets();
  return nll_sum(reshape(out.logits, Shape{g.batch * g.length, vocab}), tgt, mask);
}

}  // namespace detail

/// Builds the joint loss of one round batch: the instruction under the agent
/// role seeds the memory, then each round runs the user segment under the
/// user role and the agent segment under the agent role, caching every
/// segment's keys/values for the segments after it.
template <Scalar T>
RoleLosses<T> midi_loss(BoundModel<T>& m, const RoundBatch& batch, const TrainConfig& cfg) {
  const ModelConfig& mc = m.config();
  Tape<T>& tape = m.tape();
  const bool bptt = cfg.backprop_through_rounds;
  RoundMemory<T> mem(mc.n_layers, batch.batch(), mc.n_heads, mc.head_dim());
  std::vector<ContextKV<T>> live;
  std::optional<Var<T>> nll_agent, nll_user;
  RoleLosses<T> res;

  auto run = [&](const SegmentGrid& g, Role role, SlotKind kind, bool train) {
    std::size_t valid = 0;
    for (std::size_t b = 0; b < g.batch; ++b) valid += g.validity.row_count(b);
    if (valid == 0) {
      ++res.skipped_segments;
      return;
    }
    MaskOptions opts;
    opts.attend_current = !cfg.strictly_cross_round;
    opts.hide_instruction = role == Role::user && cfg.user_hides_instruction;
    const AttentionMask mask = build_mask(mem, g.validity, opts);
    SegmentOutput<T> out = bptt ? forward_segment(m, g.segment(), role, std::span<const ContextKV<T>>(live), mask)
                                : forward_segment(m, g.segment(), role, mem, mask);
    res.tokens_seen += valid;
    if (train) {
      Var<T> nll = detail::segment_nll(out, g, mc.vocab_size);
      if (role == Role::agent) {
        detail::accumulate_nll(nll_agent, nll);
        res.agent_tokens += g.loss_tokens();
      } else {
        detail::accumulate_nll(nll_user, nll);
        res.user_tokens += g.loss_tokens();
      }
    }
    if (bptt) {
      for (std::size_t l = 0; l < mc.n_layers; ++l) {
        if (live.size() <= l) {
          live.push_back(out.kv[l]);
        } else {
          live[l] = ContextKV<T>{concat(live[l].keys, out.kv[l].keys, 2), concat(live[l].values, out.kv[l].values, 2)};
        }
      }
    }
    mem = append(mem, std::span<const LayerKV<T>>(kv_arrays(out)), g.validity, kind);
  };

  run(batch.instruction, Role::agent, SlotKind::instruction, false);
  for (std::size_t t = 0; t < batch.rounds.size(); ++t) {
    const std::size_t rows = bptt ? batch.batch() : batch.active_rows(t);
    if (rows == 0) break;
    if (rows < mem.batch()) mem = mem.take_rows(rows);
    const auto& r = batch.rounds[t];
    run(rows < r.user.batch ? r.user.take_rows(rows) : r.user, Role::user, SlotKind::user, true);
    run(rows < r.agent.batch ? r.agent.take_rows(rows) : r.agent, Role::agent, SlotKind::agent, true);
  }
  res.agent = detail::token_mean(tape, nll_agent, res.agent_tokens);
  res.user = detail::token_mean(tape, nll_user, res.user_tokens);
  res.total = add(res.agent, scale(res.user, T(cfg.beta)));
  return res;
}

/// Causal-LM loss over a padded grid of sequences under the agent role;
/// targets are the grid's loss-mask slots. Shared by concat and split modes.
template <Scalar T>
RoleLosses<T> sequence_loss(BoundModel<T>& m, const SegmentGrid& grid) {
  Tape<T>& tape = m.tape();
  RoundMemory<T> empty(m.config().n_layers, grid.batch, m.config().n_heads, m.config().head_dim());
  SegmentOutput<T> out = forward_segment(m, grid.segment(), Role::agent, empty, build_mask(empty, grid.validity));
  RoleLosses<T> res;
  res.agent_tokens = grid.loss_tokens();
  for (std::size_t b = 0; b < grid.batch; ++b) res.tokens_seen += grid.validity.row_count(b);
  res.agent = detail::token_mean(tape, std::optional<Var<T>>(detail::segment_nll(out, grid, m.config().vocab_size)),
                                 res.agent_tokens);
  res.user = tape.constant(Array<T>::scalar(T{0}));
  res.total = res.agent;
  return res;
}

struct StepLosses {
  double agent = 0.0;
  double user = 0.0;
  double total = 0.0;
  std::size_t tokens_seen = 0;
};

/// Trainable arrays of the adapters keyed by their tape names.
template <Scalar T>
std::map<std::string, Array<T>*> trainable_arrays(RoleAdapters<T>& adapters) {
  std::map<std::string, Array<T>*> out;
  RoleAdapters<T>::visit(adapters, [&](const std::string& name, Array<T>& a) { out.emplace(name, &a); });
  return out;
}

namespace detail {

template <Scalar T>
void add_scaled(GradMap<T>& acc, const GradMap<T>& g, T factor) {
  for (const auto& [name, arr] : g) {
    auto [it, fresh] = acc.try_emplace(name, Array<T>(arr.shape()));
    for (std::size_t i = 0; i < arr.size(); ++i) it->second[i] += factor * arr[i];
  }
}

inline void require_finite_loss(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what + " loss; aborting");
}

}  // namespace detail

/// One optimizer update from a list of micro-batches: losses are computed per
/// micro-batch, gradients averaged over them, then AdamW updates the deltas.
/// `loss_fn` builds the loss of micro-batch i on the supplied bound model.
template <Scalar T>
StepLosses optimizer_step(ModelState<T>& state, AdamW<T>& opt, double lr, std::size_t micro_batches,
                          const std::function<RoleLosses<T>(BoundModel<T>&, std::size_t)>& loss_fn) {
  GradMap<T> acc;
  StepLosses out;
  const T inv = T{1} / T(micro_batches);
  for (std::size_t i = 0; i < micro_batches; ++i) {
    Tape<T> tape;
    BoundModel<T> bound(tape, state.config, state.base, state.adapters, true);
    RoleLosses<T> l = loss_fn(bound, i);
    const double ls = double(l.agent.value().item()), lu = double(l.user.value().item());
    const double lt = double(l.total.value().item());
    detail::require_finite_loss(lt, "training");
    out.agent += ls / double(micro_batches);
    out.user += lu / double(micro_batches);
    out.total += lt / double(micro_batches);
    out.tokens_seen += l.tokens_seen;
    detail::add_scaled(acc, tape.backward(l.total), inv);
  }
  opt.step(trainable_arrays(state.adapters), acc, lr);
  return out;
}

/// Single-batch MIDI update: joint loss, backward, one AdamW step.
template <Scalar T>
StepLosses midi_step(ModelState<T>& state, AdamW<T>& opt, const RoundBatch& batch, const TrainConfig& cfg, double lr) {
  return optimizer_step<T>(state, opt, lr, 1, [&](BoundModel<T>& m, std::size_t) { return midi_loss(m, batch, cfg); });
}

template <Scalar T>
StepLosses concat_step(ModelState<T>& state, AdamW<T>& opt, std::span<const SequenceSample> samples, double lr) {
  const SegmentGrid grid = pack_sequences(samples);
  return optimizer_step<T>(state, opt, lr, 1, [&](BoundModel<T>& m, std::size_t) { return sequence_loss(m, grid); });
}

/// Split samples train exactly like concat samples; only their construction
/// differs.
template <Scalar T>
StepLosses split_step(ModelState<T>& state, AdamW<T>& opt, std::span<const SequenceSample> samples, double lr) {
  return concat_step(state, opt, samples, lr);
}

struct LossRecord {
  std::size_t step = 0;
  double agent = 0.0;
  double user = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

template <Scalar T>
struct TrainResult {
  ModelState<T> state;
  std::vector<LossRecord> log;
  std::size_t tokens_seen = 0;
  std::size_t steps = 0;
};

/// Roles that carry adapters in a mode.
inline std::vector<Role> mode_roles(TuneMode m) {
  return m == TuneMode::midi ? std::vector<Role>{Role::agent, Role::user} : std::vector<Role>{Role::agent};
}

/// Runs the configured mode to completion from `state`. Deterministic under
/// cfg.seed: the data order comes from the "data-order" stream.
template <Scalar T>
TrainResult<T> train(std::span<const DialogueSample> corpus, ModelState<T> state, const TrainConfig& cfg,
                     const std::function<void(const LossRecord&)>& on_step = {}) {
  cfg.validate();
  if (corpus.empty()) throw ContractError("train: empty corpus");
  const std::size_t maxpos = state.config.max_positions;

  // Training units: dialogues for midi/concat, (context, response) pairs for split.
  std::vector<SequenceSample> sequences;
  if (cfg.mode == TuneMode::concat) {
    for (const auto& d : corpus) sequences.push_back(make_concat_sample(d, cfg.max_rounds, maxpos));
  } else if (cfg.mode == TuneMode::split) {
    for (const auto& d : corpus) {
      auto s = make_split_samples(d, cfg.max_rounds, maxpos);
      sequences.insert(sequences.end(), s.begin(), s.end());
    }
  }
  const std::size_t units = cfg.mode == TuneMode::midi ? corpus.size() : sequences.size();
  const std::size_t steps_per_epoch = (units + cfg.global_batch - 1) / cfg.global_batch;
  const std::size_t total = steps_per_epoch * cfg.epochs;

  TrainResult<T> res{std::move(state), {}, 0, 0};
  AdamW<T> opt(cfg.adamw);
  Rng order_rng = Rng(cfg.seed).fork("data-order");
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(units);
    for (std::size_t i = 0; i < units; ++i) order[i] = i;
    order_rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < units; start += cfg.global_batch) {
      const std::size_t end = std::min(units, start + cfg.global_batch);
      const std::span<const std::size_t> chunk(order.data() + start, end - start);
      const double lr = warmup_cosine_lr(step, total, cfg.lr, cfg.warmup_ratio);
      StepLosses sl;
      if (cfg.mode == TuneMode::midi) {
        BatchOptions bo{cfg.micro_batch, cfg.max_rounds, maxpos};
        auto micro = build_round_batches(corpus, bo, chunk);
        sl = optimizer_step<T>(res.state, opt, lr, micro.size(),
                               [&](BoundModel<T>& m, std::size_t i) { return midi_loss(m, micro[i], cfg); });
      } else {
        std::vector<SegmentGrid> micro;
        for (std::size_t s = 0; s < chunk.size(); s += cfg.micro_batch) {
          std::vector<SequenceSample> rows;
          for (std::size_t i = s; i < std::min(chunk.size(), s + cfg.micro_batch); ++i) rows.push_back(sequences[chunk[i]]);
          micro.push_back(pack_sequences(rows));
        }
        sl = optimizer_step<T>(res.state, opt, lr, micro.size(),
                               [&](BoundModel<T>& m, std::size_t i) { return sequence_loss(m, micro[i]); });
      }
      LossRecord rec{step, sl.agent, sl.user, sl.total, lr};
      res.log.push_back(rec);
      res.tokens_seen += sl.tokens_seen;
      if (on_step) on_step(rec);
      ++step;
    }
  }
  res.steps = step;
  return res;
}

}  // namespace midi
