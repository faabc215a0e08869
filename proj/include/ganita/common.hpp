#pragma once

// Shared error types, deterministic RNG, and small binary-IO helpers.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ganita {

// Error classes map to distinct CLI exit codes.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic RNG built on std::mt19937_64 (bit-identical across
// platforms, unlike std::uniform_*_distribution). All derived draws use
// explicit arithmetic so streams are reproducible everywhere.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 bits of entropy.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Unbiased-enough modulo draw; n must be > 0.
    uint64_t below(uint64_t n) { return gen_() % n; }

    // Box-Muller; one value per call (the twin is discarded so the
    // stream layout stays trivial to reason about).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << gen_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
        if (is.fail()) throw DataError("rng state deserialization failed");
    }

  private:
    std::mt19937_64 gen_;
};

// Explicit Fisher-Yates so shuffles do not depend on the standard
// library's std::shuffle implementation.
template <typename T>
void seeded_shuffle(std::vector<T>& v, uint64_t seed) {
    Rng rng(seed);
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace ganita
