#ifndef TWOPC_COMMON_HPP
#define TWOPC_COMMON_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace twopc {

/// Caller broke a documented precondition (frame mismatch, wrong iteration, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// NaN/Inf in activations, losses or parameters.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by operations that require at least one input element.
class EmptyInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Derives a child seed from a parent seed and any number of stream ids.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b);
std::uint64_t derive_seed(std::string_view label, std::uint64_t seed);

/// Seeded random source. Every derived draw goes through uniform(), so
/// tests can script the stream by overriding that one function.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}
  virtual ~Rng() = default;
  Rng(const Rng&) = default;
  Rng& operator=(const Rng&) = default;

  /// Uniform in [0, 1).
  virtual double uniform();

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  int uniform_int(int n);
  /// Standard normal (Box-Muller, no cached second value).
  double normal();
  double normal(double mean, double sigma) { return mean + sigma * normal(); }
  /// A 64-bit value built from two uniform draws, used to seed child streams.
  std::uint64_t next_seed();

 protected:
  std::uint64_t next_u64();

 private:
  std::uint64_t state_;
};

}  // namespace twopc

#endif  // TWOPC_COMMON_HPP
