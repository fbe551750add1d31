#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace dive {

/// Mixes a list of 64-bit tags into one key (splitmix64 chain).
std::uint64_t hash_tags(std::initializer_list<std::uint64_t> tags);
std::uint64_t hash_string(std::string_view s);

/// Philox4x32-10 counter-based generator. The stream is fully determined by
/// (key, counter), so substreams derived from a tag list never depend on how
/// many draws other streams have made.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  /// Independent stream keyed by this stream's key and `tag`.
  Rng substream(std::uint64_t tag) const;
  Rng substream(std::string_view tag) const { return substream(hash_string(tag)); }

  std::uint64_t key() const noexcept { return key_; }

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint32_t uniform_int(std::uint32_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  static std::array<std::uint32_t, 4> philox(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key);

 private:
  void refill();

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dive
