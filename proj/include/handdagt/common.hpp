#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hdagt {

// ---------------------------------------------------------------- errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// operand extents do not line up
class DimensionError : public Error {
 public:
  using Error::Error;
};

// argument outside its valid range (axis, count, index)
class DomainError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where a finite value is required
class NumericError : public Error {
 public:
  using Error::Error;
};

// malformed on-disk data
class FormatError : public Error {
 public:
  using Error::Error;
};

// an API precondition was violated by the caller
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// bad key/value in a run configuration
class ConfigError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------- shapes

using Shape = std::vector<int>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);
void require_valid_shape(const Shape& s, const char* what);

// ---------------------------------------------------------------- seeding

// splitmix64; used to derive independent substream seeds from a master seed
std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                       std::uint64_t d);

// Deterministic RNG with platform-independent uniform/normal construction.
// std::*_distribution is implementation-defined, so draws are built from
// raw engine output here.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // [0, 1), 53-bit resolution
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive [lo, hi]
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t r;
    do {
      r = eng_();
    } while (r >= limit);
    return lo + static_cast<int>(r % span);
  }

  // standard normal, Box-Muller with a cached spare
  double normal();

  bool coin(double p) { return uniform() < p; }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace hdagt
