#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace lsdr {

using Rng = std::mt19937_64;

/// Seed for a named sub-stream of a master seed, e.g. ("synth"), ("batch"),
/// ("mc", 17). Streams with different names are statistically independent.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream);
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream, std::uint64_t index);

inline Rng make_rng(std::uint64_t master, std::string_view stream) {
  return Rng(derive_seed(master, stream));
}

inline Rng make_rng(std::uint64_t master, std::string_view stream, std::uint64_t index) {
  return Rng(derive_seed(master, stream, index));
}

}  // namespace lsdr
