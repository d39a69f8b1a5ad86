#pragma once

// Dense real vectors, probability distributions and the deterministic RNG
// used everywhere else in the library. All arithmetic is 64-bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hyspec {

/// Library-wide error type. Every precondition violation throws this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw Error(what);
}

using Vec = std::vector<double>;
using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

/// A probability vector over token indices. Construction validates that every
/// entry is non-negative and that the entries sum to one within 1e-9.
class Distribution {
 public:
  static constexpr double kSumTolerance = 1e-9;

  Distribution() = default;
  explicit Distribution(Vec probs) : probs_(std::move(probs)) {
    require(!probs_.empty(), "Distribution: empty probability vector");
    double total = 0.0;
    for (double p : probs_) {
      require(std::isfinite(p) && p >= 0.0,
              "Distribution: entries must be finite and non-negative");
      total += p;
    }
    require(std::abs(total - 1.0) <= kSumTolerance,
            "Distribution: entries must sum to 1 (got " + std::to_string(total) + ")");
  }

  [[nodiscard]] std::size_t size() const noexcept { return probs_.size(); }
  [[nodiscard]] double operator[](std::size_t i) const { return probs_[i]; }
  [[nodiscard]] std::span<const double> probs() const noexcept { return probs_; }
  [[nodiscard]] const Vec& values() const noexcept { return probs_; }

  static Distribution one_hot(std::size_t size, std::size_t index) {
    require(index < size, "Distribution::one_hot: index out of range");
    Vec p(size, 0.0);
    p[index] = 1.0;
    return Distribution(std::move(p));
  }
  static Distribution uniform(std::size_t size) {
    require(size > 0, "Distribution::uniform: empty vocabulary");
    return Distribution(Vec(size, 1.0 / static_cast<double>(size)));
  }

 private:
  Vec probs_;
};

// ---------------------------------------------------------------------------
// RNG

namespace detail {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
}  // namespace detail

/// Counter-based generator: draw i of stream `seed` is mix64(seed + (i+1)*golden),
/// i.e. SplitMix64. Identical on every platform. `split` derives an independent
/// child stream keyed by an integer, which is how per-prompt and per-cell
/// substreams are obtained.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept : seed_(seed) {}

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return detail::mix64(seed_ + counter_ * detail::kGolden);
  }

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  /// Standard normal via Box-Muller (no cached second value, so the draw
  /// sequence depends only on the counter).
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  [[nodiscard]] Rng split(std::uint64_t stream) const noexcept {
    return Rng(detail::mix64(seed_ ^ detail::mix64(stream + 0x632BE59BD9B4E019ULL)));
  }

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
  [[nodiscard]] std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Probability

/// Index of the largest entry; equal maxima go to the lowest index.
inline std::size_t argmax_tiebreak(std::span<const double> values) {
  require(!values.empty(), "argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

inline std::size_t argmax_tiebreak(const Distribution& d) { return argmax_tiebreak(d.probs()); }

/// Temperature softmax. T = 0 yields the one-hot greedy distribution.
inline Distribution softmax(std::span<const double> logits, double temperature = 1.0) {
  require(!logits.empty(), "softmax: empty logits");
  require(temperature >= 0.0 && std::isfinite(temperature), "softmax: temperature must be >= 0");
  for (double v : logits) require(std::isfinite(v), "softmax: non-finite logit");
  if (temperature == 0.0) return Distribution::one_hot(logits.size(), argmax_tiebreak(logits));

  const double mx = *std::max_element(logits.begin(), logits.end());
  Vec p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return Distribution(std::move(p));
}

/// log-softmax at temperature 1, used for likelihood scoring.
inline Vec log_softmax(std::span<const double> logits) {
  require(!logits.empty(), "log_softmax: empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - mx);
  const double lse = mx + std::log(total);
  Vec out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

/// Draw an index proportional to non-negative weights (need not be normalized).
inline std::size_t sample_weights(std::span<const double> weights, Rng& rng) {
  require(!weights.empty(), "sample: empty weights");
  double total = 0.0;
  for (double w : weights) {
    require(std::isfinite(w) && w >= 0.0, "sample: weights must be finite and non-negative");
    total += w;
  }
  require(total > 0.0, "sample: all-zero distribution");
  const double target = rng.uniform() * total;
  double cum = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    cum += weights[i];
    last_nonzero = i;
    if (target < cum) return i;
  }
  return last_nonzero;
}

inline std::size_t sample_categorical(const Distribution& d, Rng& rng) {
  return sample_weights(d.probs(), rng);
}

// ---------------------------------------------------------------------------
// Dense kernels

/// y = x / sqrt(mean(x^2) + eps) * gain
inline Vec rms_norm(std::span<const double> x, std::span<const double> gain, double eps) {
  require(x.size() == gain.size(), "rms_norm: length mismatch");
  require(!x.empty(), "rms_norm: empty input");
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  const double denom = std::sqrt(ms + eps);
  Vec y(x.size());
  if (denom == 0.0) {
    std::fill(y.begin(), y.end(), 0.0);
    return y;
  }
  const double inv = 1.0 / denom;
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * gain[i];
  return y;
}

/// y = x * W for a row-major W of shape (in, out). Accumulates row by row so
/// the summation order per output is fixed (0..in-1) regardless of how the
/// caller batches positions; batched and incremental passes agree bitwise.
inline void matvec_rowmajor(std::span<const double> x, const double* w, std::size_t in,
                            std::size_t out, double* y) {
  std::fill(y, y + out, 0.0);
  std::size_t k = 0;
  // Four rows per pass keep y[j] in a register; the additions still happen
  // in order k, k+1, k+2, k+3, so results equal the plain loop bitwise.
  for (; k + 4 <= in; k += 4) {
    const double x0 = x[k], x1 = x[k + 1], x2 = x[k + 2], x3 = x[k + 3];
    const double* r0 = w + k * out;
    const double* r1 = r0 + out;
    const double* r2 = r1 + out;
    const double* r3 = r2 + out;
    for (std::size_t j = 0; j < out; ++j) {
      double acc = y[j];
      acc += x0 * r0[j];
      acc += x1 * r1[j];
      acc += x2 * r2[j];
      acc += x3 * r3[j];
      y[j] = acc;
    }
  }
  for (; k < in; ++k) {
    const double xk = x[k];
    const double* row = w + k * out;
    for (std::size_t j = 0; j < out; ++j) y[j] += xk * row[j];
  }
}

inline double sigmoid(double x) noexcept { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) noexcept { return x * sigmoid(x); }

inline bool all_finite(std::span<const double> v) noexcept {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace hyspec
