// SPDX-License-Identifier: Apache-2.0

#include "tapct/common.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace tapct {

std::string to_string(const Extent3& e) {
  return "(" + std::to_string(e.z) + "," + std::to_string(e.y) + "," + std::to_string(e.x) + ")";
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng Rng::derive(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t k : keys) {
    h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  }
  return Rng(h);
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi <= lo) {
    engine_();
    return lo;
  }
  const auto range = static_cast<unsigned __int128>(hi - lo) + 1;
  const auto r = static_cast<unsigned __int128>(engine_()) * range;
  return lo + static_cast<std::int64_t>(r >> 64);
}

double Rng::normal() {
  // Box-Muller, cosine branch only.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::deserialize(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  if (!is) {
    throw ValidationError("malformed rng state");
  }
}

double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(rng.uniform(std::log(lo), std::log(hi)));
}

}  // namespace tapct
