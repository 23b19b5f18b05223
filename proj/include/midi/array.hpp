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
#include <cstring>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "midi/errors.hpp"

namespace midi {

using Shape = std::vector<std::size_t>;

template <class T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <Scalar T>
constexpr std::string_view dtype_name() {
  return std::is_same_v<T, float> ? "f32" : "f64";
}

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array. Extents are strictly positive; a rank-0 array is a
/// scalar holding one element. The stop-gradient marker travels with the
/// value: a tape never differentiates through an array that carries it.
template <Scalar T>
class Array {
 public:
  using value_type = T;

  Array() : data_(1, T{0}) {}

  explicit Array(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_size(shape_), fill);
  }

  Array(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("array data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Array scalar(T v) { return Array(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  T item() const {
    if (data_.size() != 1) throw ContractError("item() on array of shape " + shape_string(shape_));
    return data_[0];
  }

  bool stop_gradient() const { return stop_gradient_; }

  /// Copy carrying the stop-gradient marker.
  Array detached() const {
    Array out = *this;
    out.stop_gradient_ = true;
    return out;
  }

  Array reshaped(Shape s) const {
    if (shape_size(s) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(s));
    }
    Array out = *this;
    out.shape_ = std::move(s);
    out.check_extents();
    return out;
  }

  template <Scalar U>
  Array<U> cast() const {
    std::vector<U> d(data_.begin(), data_.end());
    return Array<U>(shape_, std::move(d));
  }

  bool bitwise_equal(const Array& o) const {
    return shape_ == o.shape_ &&
           std::equal(data_.begin(), data_.end(), o.data_.begin(), [](T a, T b) {
             return std::memcmp(&a, &b, sizeof(T)) == 0;
           });
  }

 private:
  void check_extents() const {
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("zero extent in shape " + shape_string(shape_));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw DimensionError("index rank mismatch for " + shape_string(shape_));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      if (i >= shape_[axis]) throw IndexError("index out of range for " + shape_string(shape_));
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
  bool stop_gradient_ = false;
};

}  // namespace midi
