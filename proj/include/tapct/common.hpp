// SPDX-License-Identifier: Apache-2.0
//
// Shared value types: 3D extents, dense rank-3 grids, the error hierarchy and
// the seeded random stream every stochastic operation draws from.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tapct {

/// Bad input or configuration. The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure while doing valid work (I/O, numerics). The CLI maps this to exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

/// Extents or indices along (depth z, height y, width x).
struct Extent3 {
  int z = 0;
  int y = 0;
  int x = 0;

  [[nodiscard]] std::int64_t count() const {
    return static_cast<std::int64_t>(z) * y * x;
  }
  [[nodiscard]] bool positive() const { return z >= 1 && y >= 1 && x >= 1; }
  [[nodiscard]] int operator[](int axis) const { return axis == 0 ? z : (axis == 1 ? y : x); }
  int& operator[](int axis) { return axis == 0 ? z : (axis == 1 ? y : x); }

  friend bool operator==(const Extent3&, const Extent3&) = default;
};

std::string to_string(const Extent3& e);

/// Dense row-major rank-3 grid, z-major then y then x.
template <typename T>
class Grid3 {
 public:
  Grid3() = default;
  explicit Grid3(Extent3 shape, T fill = T{})
      : shape_(shape), data_(static_cast<std::size_t>(shape.count()), fill) {}
  Grid3(Extent3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_.count()) {
      throw ValidationError("grid payload size mismatch: shape " + to_string(shape_) +
                            " needs " + std::to_string(shape_.count()) + " values, got " +
                            std::to_string(data_.size()));
    }
  }

  [[nodiscard]] const Extent3& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * shape_.y + y) * shape_.x + x;
  }
  T& operator()(int z, int y, int x) { return data_[index(z, y, x)]; }
  const T& operator()(int z, int y, int x) const { return data_[index(z, y, x)]; }

  [[nodiscard]] std::vector<T>& values() { return data_; }
  [[nodiscard]] const std::vector<T>& values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  friend bool operator==(const Grid3&, const Grid3&) = default;

 private:
  Extent3 shape_{};
  std::vector<T> data_;
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// Seeded 64-bit Mersenne Twister stream with portable draw primitives.
///
/// Every primitive consumes a fixed number of engine outputs: uniform(),
/// uniform(a,b), uniform_int() and bernoulli() take one, normal() takes two.
/// Sub-streams are derived by hashing (seed, keys...) so that independent
/// consumers never share state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> keys);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in the closed range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  [[nodiscard]] std::string serialize() const;
  void deserialize(const std::string& state);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Log-uniform draw in [lo, hi]: exp(U[ln lo, ln hi]). One draw.
double log_uniform(Rng& rng, double lo, double hi);

}  // namespace tapct
