#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace metastab {

/// Deterministic RNG. Wraps mt19937_64 but implements its own
/// uniform/normal transforms so streams are identical across stdlib versions.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : eng_(seed ^ 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [0, n).
  int64_t uniform_int(int64_t n) {
    return n <= 0 ? 0 : static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  /// Derive an independent child stream (for per-task seeding).
  Rng fork() { return Rng(next_u64()); }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// Static-partition parallel loop. `workers <= 1` runs inline. Each index is
/// visited exactly once; callers must write disjoint slots for determinism.
void parallel_for(int64_t begin, int64_t end, int workers,
                  const std::function<void(int64_t)>& fn);

/// Default worker count (hardware concurrency, at least 1).
int default_workers();

/// FNV-1a 64-bit over a byte buffer.
uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull);

/// Content hash of a file (FNV-1a), as 16 hex chars. Throws on I/O failure.
std::string hash_file(const std::filesystem::path& p);

std::string hash_bytes(const void* data, size_t len);

class Stopwatch {
 public:
  Stopwatch() : t0_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_;
};

}  // namespace metastab
