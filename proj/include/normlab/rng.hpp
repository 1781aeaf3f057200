#pragma once

#include <cstdint>
#include <string_view>

namespace normlab {

// Counter-based stream generator (Philox4x32-10). Every draw is a pure
// function of (key, stream, block counter), so a stream can be reproduced
// in isolation from just its key, and interleaving streams never
// perturbs one another. Weight tensors get their own stream keyed by
// hash(global_seed, tensor_name); see the README for the exact derivation.
class Philox {
 public:
  explicit Philox(std::uint64_t key, std::uint64_t stream = 0);

  // Stream for one named tensor: key = splitmix64(splitmix64(seed) ^ fnv1a64(name)).
  static Philox for_tensor(std::uint64_t global_seed, std::string_view tensor_name);

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  // 53-bit mantissa uniform in [0, 1).
  double uniform01();

  // Standard normal via Box-Muller on the uniform stream. The second
  // variate of each pair is cached, so draw parity is part of the stream
  // state (intentional: sequences stay reproducible draw-by-draw).
  double normal();

 private:
  void refill();

  std::uint64_t key_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::uint32_t block_[4] = {0, 0, 0, 0};
  int pos_ = 4;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace normlab
