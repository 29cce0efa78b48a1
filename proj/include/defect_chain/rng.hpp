#ifndef DEFECT_CHAIN_RNG_HPP
#define DEFECT_CHAIN_RNG_HPP

#include <cstdint>
#include <random>

namespace defect_chain {

using Rng = std::mt19937_64;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Seed for an independent stream, derived from (master seed, stream tag, index).
/// Streams depend only on these three values, never on the order in which
/// they are created.
constexpr std::uint64_t stream_seed(std::uint64_t master, std::uint64_t tag,
                                    std::uint64_t index = 0) noexcept {
  return detail::splitmix64(detail::splitmix64(detail::splitmix64(master) ^ tag) +
                            index);
}

inline Rng make_stream(std::uint64_t master, std::uint64_t tag, std::uint64_t index = 0) {
  return Rng(stream_seed(master, tag, index));
}

/// Stream tags. Arbitrary distinct constants.
namespace stream {
inline constexpr std::uint64_t synth = 0x53594e54;
inline constexpr std::uint64_t extract = 0x45585452;
inline constexpr std::uint64_t chain = 0x4348414e;
inline constexpr std::uint64_t tune = 0x54554e45;
inline constexpr std::uint64_t compare = 0x434d5052;
inline constexpr std::uint64_t cell = 0x43454c4c;
}  // namespace stream

}  // namespace defect_chain

#endif  // DEFECT_CHAIN_RNG_HPP
