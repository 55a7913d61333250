#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace airfeel {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Rejected input: bad dimensions, out-of-range parameters, violated hypotheses.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A power-control instance whose constraints cannot all be met.
class Infeasible : public std::runtime_error {
 public:
  Infeasible(const std::string& what, double level)
      : std::runtime_error(what), level_(level) {}
  double level() const { return level_; }

 private:
  double level_;
};

/// Problems reading or writing artifacts on disk.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent, order-free substream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for substream `tag` of `master` (e.g. trial index, round index).
constexpr std::uint64_t substream_seed(std::uint64_t master, std::uint64_t tag) {
  return mix_seed(mix_seed(master) ^ mix_seed(tag + 0x632be59bd9b4e019ULL));
}

inline Rng make_rng(std::uint64_t master, std::uint64_t tag) {
  return Rng(substream_seed(master, tag));
}

inline void require(bool cond, const std::string& message) {
  if (!cond) throw InvalidArgument(message);
}

}  // namespace airfeel
