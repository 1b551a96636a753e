#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace peftlab {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

template <class Real>
void fill_normal(std::span<Real> out, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : out) v = static_cast<Real>(dist(rng));
}

template <class Real>
void fill_uniform(std::span<Real> out, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : out) v = static_cast<Real>(dist(rng));
}

// Uniform integer in [0, n) without relying on the distribution
// implementation, so shuffles are stable across standard libraries.
std::size_t uniform_index(Rng& rng, std::size_t n);
double uniform01(Rng& rng);

template <class T>
void shuffle_in_place(std::span<T> items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = uniform_index(rng, i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace peftlab
