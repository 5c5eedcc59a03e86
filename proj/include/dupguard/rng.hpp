#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dupguard {

using Rng = std::mt19937_64;

/// Expands a global seed into an independent per-stream seed.
///
/// The stream name is hashed (FNV-1a) and mixed with the seed through
/// SplitMix64, so each component draws from its own generator and adding
/// draws in one component never perturbs another.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) noexcept;

inline Rng make_rng(std::uint64_t seed, std::string_view stream) {
  return Rng(derive_seed(seed, stream));
}

}  // namespace dupguard
