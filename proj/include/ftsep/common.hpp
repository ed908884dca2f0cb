#ifndef FTSEP_COMMON_HPP
#define FTSEP_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ftsep {

// Error categories used to pick CLI exit codes.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Deterministic RNG. Wraps mt19937_64 but derives all floating-point draws
/// from raw 64-bit words so sequences are identical across standard library
/// implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), state_(seed) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() { return state_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive integer range
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi < lo) throw ConfigError("uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

    // Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    /// splitmix64 fan-out over (seed, stream id); documented sub-seeding used
    /// everywhere randomness is forked (per mixture, per epoch, ...).
    static uint64_t derive_seed(uint64_t seed, uint64_t stream) {
        uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    Rng child(uint64_t stream) const { return Rng(derive_seed(seed_, stream)); }

private:
    uint64_t seed_;
    std::mt19937_64 state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

/// Worker count used by parallel_for. 0 = hardware concurrency.
void set_thread_count(int n);
int thread_count();

/// True while the calling thread is executing inside a parallel_for worker.
bool inside_parallel_region();
/// Marks the calling thread as an outer-parallelism worker so nested
/// parallel_for calls run inline.
void enter_parallel_region(bool on);

/// Splits [0, n) into contiguous chunks, one thread per chunk. Each index must
/// be computable independently of the others, so results do not depend on the
/// chunking.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body);

inline double db_to_pow(double db) { return std::pow(10.0, db / 10.0); }
inline double pow_to_db(double p) { return 10.0 * std::log10(p); }

}  // namespace ftsep

#endif  // FTSEP_COMMON_HPP
