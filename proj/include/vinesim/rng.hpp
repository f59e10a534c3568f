#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vinesim {

/// Named-stream RNG splitter. Every consumer derives its own independent
/// mt19937_64 from (root seed, purpose string, index), so adding a batch
/// element or a new draw site never perturbs the draws of any other stream.
class RngSplitter {
public:
  explicit RngSplitter(std::uint64_t seed) : seed_(seed) {}

  std::mt19937_64 stream(std::string_view purpose, std::uint64_t index = 0) const {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a over the purpose name
    for (char c : purpose) {
      h ^= static_cast<std::uint8_t>(c);
      h *= 0x100000001b3ull;
    }
    return std::mt19937_64(splitmix(splitmix(seed_ ^ h) + index));
  }

  std::uint64_t seed() const { return seed_; }

private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
};

/// FNV-1a digest of a byte buffer; used for input provenance in run manifests.
inline std::uint64_t fnv1a(const void* data, std::size_t size) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace vinesim
