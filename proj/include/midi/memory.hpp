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
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "midi/array.hpp"

namespace midi {

/// Row-major 0/1 grid, one row per batch sequence.
struct Bitmap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  Bitmap() = default;
  Bitmap(std::size_t r, std::size_t c, std::uint8_t fill = 0) : rows(r), cols(c), bits(r * c, fill) {}

  std::uint8_t& at(std::size_t r, std::size_t c) { return bits[r * cols + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return bits[r * cols + c]; }

  std::size_t row_count(std::size_t r) const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < cols; ++c) n += bits[r * cols + c] ? 1 : 0;
    return n;
  }
};

/// Which kind of segment produced a cached slot.
enum class SlotKind : std::uint8_t { instruction, user, agent };

/// Position id given to padding slots.
inline constexpr int kPadPosition = -1;

template <Scalar T>
struct LayerKV {
  Array<T> keys;    // [B, H, S, Dh]
  Array<T> values;  // [B, H, S, Dh]
};

/// Append-only round-level key/value store. Keys are cached after rotary
/// rotation. Every stored array carries the stop-gradient marker.
template <Scalar T>
class RoundMemory {
 public:
  RoundMemory(std::size_t n_layers, std::size_t batch, std::size_t heads, std::size_t head_dim)
      : n_layers_(n_layers), batch_(batch), heads_(heads), head_dim_(head_dim), layers_(n_layers),
        validity_(batch, 0), counts_(batch, 0) {}

  std::size_t layers() const { return n_layers_; }
  std::size_t batch() const { return batch_; }
  std::size_t heads() const { return heads_; }
  std::size_t head_dim() const { return head_dim_; }
  std::size_t stored_length() const { return validity_.cols; }
  bool empty() const { return stored_length() == 0; }

  /// [B, H, L, Dh]; only meaningful when !empty().
  const Array<T>& keys(std::size_t layer) const { return layers_.at(layer).keys; }
  const Array<T>& values(std::size_t layer) const { return layers_.at(layer).values; }

  const Bitmap& validity() const { return validity_; }
  /// Valid tokens stored per sequence; also the next position id.
  std::span<const std::size_t> counts() const { return counts_; }
  const std::vector<SlotKind>& slot_kinds() const { return kinds_; }

  /// Keeps the first `rows` sequences. Used when later rounds only involve
  /// the longest dialogues of a round-sorted batch.
  RoundMemory take_rows(std::size_t rows) const {
    if (rows == 0 || rows > batch_) throw ContractError("take_rows: invalid row count " + std::to_string(rows));
    RoundMemory out(n_layers_, rows, heads_, head_dim_);
    out.counts_.assign(counts_.begin(), counts_.begin() + std::ptrdiff_t(rows));
    out.kinds_ = kinds_;
    out.validity_ = Bitmap(rows, validity_.cols);
    std::copy_n(validity_.bits.begin(), rows * validity_.cols, out.validity_.bits.begin());
    if (!empty()) {
      for (std::size_t l = 0; l < n_layers_; ++l) {
        out.layers_[l].keys = prefix_rows(layers_[l].keys, rows);
        out.layers_[l].values = prefix_rows(layers_[l].values, rows);
      }
    }
    return out;
  }

  template <Scalar U>
  friend RoundMemory<U> append(const RoundMemory<U>&, std::span<const LayerKV<U>>, const Bitmap&, SlotKind);

 private:
  static Array<T> prefix_rows(const Array<T>& a, std::size_t rows) {
    Shape s = a.shape();
    const std::size_t per = a.size() / s[0];
    s[0] = rows;
    std::vector<T> d(a.ptr(), a.ptr() + rows * per);
    return Array<T>(s, std::move(d)).detached();
  }

  std::size_t n_layers_, batch_, heads_, head_dim_;
  std::vector<LayerKV<T>> layers_;
  Bitmap validity_;
  std::vector<std::size_t> counts_;
  std::vector<SlotKind> kinds_;
};

namespace detail {

/// Concatenates [B, H, L, D] and [B, H, S, D] along the slot axis.
template <Scalar T>
Array<T> join_slots(const Array<T>& a, const Array<T>& b) {
  const std::size_t B = b.dim(0), H = b.dim(1), S = b.dim(2), D = b.dim(3), L = a.dim(2);
  Array<T> out({B, H, L + S, D});
  for (std::size_t bh = 0; bh < B * H; ++bh) {
    std::copy_n(a.ptr() + bh * L * D, L * D, out.ptr() + bh * (L + S) * D);
    std::copy_n(b.ptr() + bh * S * D, S * D, out.ptr() + bh * (L + S) * D + L * D);
  }
  return out;
}

}  // namespace detail

/// Returns a new memory holding the old slots followed by the segment's
/// keys/values. Stored arrays are detached copies, so later losses never
/// reach the computation that produced them.
template <Scalar T>
RoundMemory<T> append(const RoundMemory<T>& mem, std::span<const LayerKV<T>> segment, const Bitmap& segment_validity,
                      SlotKind kind) {
  if (segment.size() != mem.layers()) {
    throw ContractError("append: segment has " + std::to_string(segment.size()) + " layers, memory has " +
                        std::to_string(mem.layers()));
  }
  if (segment_validity.rows != mem.batch()) {
    throw ContractError("append: segment batch " + std::to_string(segment_validity.rows) + " vs memory batch " +
                        std::to_string(mem.batch()));
  }
  const std::size_t S = segment_validity.cols;
  for (const auto& kv : segment) {
    const Shape want{mem.batch(), mem.heads(), S, mem.head_dim()};
    if (kv.keys.shape() != want || kv.values.shape() != want) {
      throw ContractError("append: segment K/V shape " + shape_string(kv.keys.shape()) + " expected " +
                          shape_string(want));
    }
  }
  RoundMemory<T> out(mem.layers(), mem.batch(), mem.heads(), mem.head_dim());
  for (std::size_t l = 0; l < mem.layers(); ++l) {
    if (mem.empty()) {
      out.layers_[l].keys = segment[l].keys.detached();
      out.layers_[l].values = segment[l].values.detached();
    } else {
      out.layers_[l].keys = detail::join_slots(mem.keys(l), segment[l].keys).detached();
      out.layers_[l].values = detail::join_slots(mem.values(l), segment[l].values).detached();
    }
  }
  const std::size_t L = mem.stored_length();
  out.validity_ = Bitmap(mem.batch(), L + S);
  for (std::size_t b = 0; b < mem.batch(); ++b) {
    for (std::size_t j = 0; j < L; ++j) out.validity_.at(b, j) = mem.validity().at(b, j);
    for (std::size_t j = 0; j < S; ++j) out.validity_.at(b, L + j) = segment_validity.at(b, j) ? 1 : 0;
    out.counts_[b] = mem.counts()[b] + segment_validity.row_count(b);
  }
  out.kinds_ = mem.slot_kinds();
  out.kinds_.insert(out.kinds_.end(), S, kind);
  return out;
}

/// Position ids for a segment: valid slots continue each sequence's count,
/// padding slots get kPadPosition.
inline std::vector<int> next_positions(std::span<const std::size_t> counts, const Bitmap& segment_validity) {
  if (counts.size() != segment_validity.rows) {
    throw ContractError("next_positions: validity batch " + std::to_string(segment_validity.rows) +
                        " vs memory batch " + std::to_string(counts.size()));
  }
  std::vector<int> pos(segment_validity.bits.size(), kPadPosition);
  for (std::size_t b = 0; b < segment_validity.rows; ++b) {
    int next = int(counts[b]);
    for (std::size_t j = 0; j < segment_validity.cols; ++j) {
      if (segment_validity.at(b, j)) pos[b * segment_validity.cols + j] = next++;
    }
  }
  return pos;
}

template <Scalar T>
std::vector<int> next_positions(const RoundMemory<T>& mem, const Bitmap& segment_validity) {
  return next_positions(mem.counts(), segment_validity);
}

struct MaskOptions {
  /// Let queries see earlier slots of their own segment. Off gives strictly
  /// cross-round attention over cached slots only.
  bool attend_current = true;
  /// Hide cached instruction slots from the query segment.
  bool hide_instruction = false;
};

/// allow[b, j, k] over keys [cached..., current...]; rows with no allowed
/// key are inert.
struct AttentionMask {
  std::size_t batch = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::shared_ptr<const std::vector<std::uint8_t>> allow;

  bool allowed(std::size_t b, std::size_t q, std::size_t k) const { return (*allow)[(b * queries + q) * keys + k]; }
  bool inert(std::size_t b, std::size_t q) const {
    for (std::size_t k = 0; k < keys; ++k) {
      if (allowed(b, q, k)) return false;
    }
    return true;
  }
};

inline AttentionMask build_mask(const Bitmap& cached_validity, std::span<const SlotKind> kinds,
                                const Bitmap& segment_validity, MaskOptions opts = {}) {
  if (cached_validity.rows != segment_validity.rows) {
    throw ContractError("build_mask: memory batch " + std::to_string(cached_validity.rows) + " vs segment batch " +
                        std::to_string(segment_validity.rows));
  }
  const std::size_t B = segment_validity.rows, S = segment_validity.cols, L = cached_validity.cols;
  auto allow = std::make_shared<std::vector<std::uint8_t>>(B * S * (L + S), 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t q = 0; q < S; ++q) {
      if (!segment_validity.at(b, q)) continue;
      std::uint8_t* row = allow->data() + (b * S + q) * (L + S);
      for (std::size_t k = 0; k < L; ++k) {
        const bool hidden = opts.hide_instruction && kinds[k] == SlotKind::instruction;
        row[k] = cached_validity.at(b, k) && !hidden ? 1 : 0;
      }
      if (opts.attend_current) {
        for (std::size_t k = 0; k <= q; ++k) row[L + k] = segment_validity.at(b, k);
      }
    }
  }
  return AttentionMask{B, S, L + S, std::move(allow)};
}

template <Scalar T>
AttentionMask build_mask(const RoundMemory<T>& mem, const Bitmap& segment_validity, MaskOptions opts = {}) {
  return build_mask(mem.validity(), mem.slot_kinds(), segment_validity, opts);
}

}  // namespace midi
