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

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "midi/array.hpp"

namespace midi {

template <Scalar T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid for the
/// lifetime of the tape that produced it.
template <Scalar T>
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  const Array<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* t, std::uint32_t id) : tape_(t), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = std::numeric_limits<std::uint32_t>::max();
};

template <Scalar T>
using GradMap = std::map<std::string, Array<T>>;

/// Reverse-mode recorder. Every differentiable op appends one entry whose
/// inputs were recorded earlier, so the entry list is already in topological
/// order and backward is a single reverse sweep.
///
/// A tape built with record=false evaluates values only; nothing is kept for
/// differentiation. Not thread-safe: one tape per executing forward pass.
template <Scalar T>
class Tape {
 public:
  /// Receives the tape and the op's output handle; accumulates into the
  /// gradients of the op's inputs.
  using BackwardFn = std::function<void(Tape&, Var<T>)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  /// Non-differentiable leaf.
  Var<T> constant(Array<T> v) { return push(std::move(v), false); }

  /// Differentiable leaf unless the array carries the stop-gradient marker.
  /// Its gradient is available through grad_of() after backward().
  Var<T> input(Array<T> v) {
    const bool rg = record_ && !v.stop_gradient();
    return push(std::move(v), rg);
  }

  /// Named trainable leaf reported in the gradient map. Registering the same
  /// name twice returns the existing handle.
  Var<T> param(const std::string& name, const Array<T>& v) {
    if (auto it = params_.find(name); it != params_.end()) return Var<T>(this, it->second);
    Var<T> out = push(v, record_ && !v.stop_gradient());
    params_.emplace(name, out.id());
    return out;
  }

  /// Same value, cut from the graph.
  Var<T> detach(Var<T> x) { return push(x.value().detached(), false); }

  const Array<T>& value(Var<T> v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id()).requires_grad; }

  /// Records an op result. When no input needs a gradient the result is a
  /// plain constant and no entry is kept.
  Var<T> emit(Array<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool rg = false;
    std::vector<std::uint32_t> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) {
      if (in.tape_ != this) throw ContractError("op input belongs to a different tape");
      rg = rg || nodes_[in.id()].requires_grad;
      ids.push_back(in.id());
    }
    rg = rg && record_;
    Var<T> out = push(std::move(value), rg);
    if (rg) entries_.push_back(Entry{std::move(ids), out.id(), std::move(fn)});
    return out;
  }

  /// Gradient accumulator of a node; zero-initialised on first access.
  Array<T>& grad(Var<T> v) {
    auto& n = nodes_.at(v.id());
    if (!n.has_grad) {
      n.grad = Array<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool has_grad(Var<T> v) const { return nodes_.at(v.id()).has_grad; }

  std::optional<Array<T>> grad_of(Var<T> v) const {
    const auto& n = nodes_.at(v.id());
    if (!n.has_grad || !n.requires_grad) return std::nullopt;
    return n.grad;
  }

  /// Runs the reverse sweep from a scalar loss and returns gradients of the
  /// named trainable leaves. Leaves that the loss does not reach get a zero
  /// array; frozen and detached leaves are absent.
  GradMap<T> backward(Var<T> loss) {
    if (loss.tape_ != this) throw ContractError("backward: loss recorded on a different tape");
    if (loss.value().size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_string(loss.value().shape()));
    }
    if (backward_done_) throw ContractError("backward already ran on this tape");
    backward_done_ = true;
    visits_.assign(entries_.size(), 0);
    if (nodes_[loss.id()].requires_grad) grad(loss)[0] = T{1};
    for (std::size_t i = entries_.size(); i-- > 0;) {
      ++visits_[i];
      const Entry& e = entries_[i];
      if (!nodes_[e.output].has_grad) continue;
      e.fn(*this, Var<T>(this, e.output));
    }
    GradMap<T> out;
    for (const auto& [name, id] : params_) {
      const auto& n = nodes_[id];
      if (!n.requires_grad) continue;
      out.emplace(name, n.has_grad ? n.grad : Array<T>(n.value.shape()));
    }
    return out;
  }

  std::size_t entry_count() const { return entries_.size(); }
  std::size_t node_count() const { return nodes_.size(); }
  /// Per-entry visit counts of the last backward sweep.
  const std::vector<std::size_t>& visit_counts() const { return visits_; }

 private:
  struct Node {
    Array<T> value;
    Array<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
  };
  struct Entry {
    std::vector<std::uint32_t> inputs;
    std::uint32_t output;
    BackwardFn fn;
  };

  Var<T> push(Array<T> v, bool rg) {
    nodes_.push_back(Node{std::move(v), Array<T>(), rg, false});
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  bool record_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;
  std::vector<Entry> entries_;
  std::map<std::string, std::uint32_t> params_;
  std::vector<std::size_t> visits_;
};

}  // namespace midi
