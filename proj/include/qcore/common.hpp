#ifndef QCORE_COMMON_HPP
#define QCORE_COMMON_HPP

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace qcore {

// Bad inputs, violated preconditions, missing files. CLI maps these to exit 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incomposable or mismatched tensor shapes.
class ShapeError : public UsageError {
public:
    using UsageError::UsageError;
};

// Non-finite values or violated numeric postconditions. CLI maps these to exit 1.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Rounds half away from zero; the rounding used for quantization codes and quotas.
inline long long round_half_away(double x) {
    return std::llround(x);
}

// splitmix64 finalizer over (seed, stream); distinct rng streams per pipeline stage.
inline std::int64_t mix_seed(std::int64_t seed, std::int64_t stream) noexcept {
    std::uint64_t z = static_cast<std::uint64_t>(seed) + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(stream) + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return static_cast<std::int64_t>(z ^ (z >> 31));
}

// mt19937_64 with hand-rolled uniform/normal draws. std::uniform_real_distribution
// and std::normal_distribution are implementation-defined, which would break the
// bit-exact reproducibility contract across standard libraries.
class Rng {
public:
    explicit Rng(std::int64_t seed) : engine_(static_cast<std::uint64_t>(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller with two fresh uniforms per draw (no cached spare).
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.28318530717958647692 * u2);
    }

    // Unbiased integer in [0, n) via rejection.
    std::size_t below(std::size_t n) {
        if (n <= 1) return 0;
        const std::uint64_t m = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % m;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<std::size_t>(x % m);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Operation counters. Every multiply-accumulate executed by the engine is
// attributed to the phase active on the calling thread, so a pipeline run can
// prove e.g. that bit-flip calibration performs zero gradient computations.
// ---------------------------------------------------------------------------

enum class Phase {
    FpTraining,
    MissTracking,
    CoreBuild,
    BpCalibration,
    BfTraining,
    CoreUpdate,
    BfCalibration,
    Evaluation,
    Other,
};

inline constexpr std::size_t kPhaseCount = 9;

inline const char* phase_name(Phase p) {
    switch (p) {
        case Phase::FpTraining: return "fp_training";
        case Phase::MissTracking: return "miss_tracking";
        case Phase::CoreBuild: return "core_build";
        case Phase::BpCalibration: return "bp_calibration";
        case Phase::BfTraining: return "bf_training";
        case Phase::CoreUpdate: return "core_update";
        case Phase::BfCalibration: return "bf_calibration";
        case Phase::Evaluation: return "evaluation";
        case Phase::Other: return "other";
    }
    return "?";
}

struct PhaseTotals {
    std::array<unsigned long long, kPhaseCount> macs{};
    std::array<unsigned long long, kPhaseCount> gradient_calls{};

    unsigned long long total_macs() const {
        unsigned long long t = 0;
        for (auto v : macs) t += v;
        return t;
    }
    unsigned long long total_gradient_calls() const {
        unsigned long long t = 0;
        for (auto v : gradient_calls) t += v;
        return t;
    }
    unsigned long long macs_in(Phase p) const { return macs[static_cast<std::size_t>(p)]; }
    unsigned long long gradient_calls_in(Phase p) const { return gradient_calls[static_cast<std::size_t>(p)]; }
};

namespace detail {

struct CounterBank {
    std::array<std::atomic<unsigned long long>, kPhaseCount> macs{};
    std::array<std::atomic<unsigned long long>, kPhaseCount> gradient_calls{};
};

inline CounterBank& counter_bank() {
    static CounterBank bank;
    return bank;
}

inline Phase& current_phase() {
    thread_local Phase phase = Phase::Other;
    return phase;
}

}  // namespace detail

inline void count_macs(unsigned long long n) {
    detail::counter_bank().macs[static_cast<std::size_t>(detail::current_phase())].fetch_add(n, std::memory_order_relaxed);
}

inline void count_gradient_call() {
    detail::counter_bank().gradient_calls[static_cast<std::size_t>(detail::current_phase())].fetch_add(1, std::memory_order_relaxed);
}

inline PhaseTotals counters_snapshot() {
    PhaseTotals t;
    for (std::size_t i = 0; i < kPhaseCount; ++i) {
        t.macs[i] = detail::counter_bank().macs[i].load(std::memory_order_relaxed);
        t.gradient_calls[i] = detail::counter_bank().gradient_calls[i].load(std::memory_order_relaxed);
    }
    return t;
}

inline void reset_counters() {
    for (std::size_t i = 0; i < kPhaseCount; ++i) {
        detail::counter_bank().macs[i].store(0, std::memory_order_relaxed);
        detail::counter_bank().gradient_calls[i].store(0, std::memory_order_relaxed);
    }
}

// RAII phase attribution for the calling thread.
class PhaseScope {
public:
    explicit PhaseScope(Phase p) : previous_(detail::current_phase()) { detail::current_phase() = p; }
    ~PhaseScope() { detail::current_phase() = previous_; }
    PhaseScope(const PhaseScope&) = delete;
    PhaseScope& operator=(const PhaseScope&) = delete;

private:
    Phase previous_;
};

// ---------------------------------------------------------------------------
// Little-endian binary IO for the checkpoint formats.
// ---------------------------------------------------------------------------

namespace io {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw UsageError("checkpoint: truncated file");
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    write_bytes(os, b, 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    read_bytes(is, b, 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    write_u32(os, static_cast<std::uint32_t>(v));
    write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t read_u64(std::istream& is) {
    const std::uint64_t lo = read_u32(is);
    const std::uint64_t hi = read_u32(is);
    return lo | (hi << 32);
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

inline float read_f32(std::istream& is) {
    const std::uint32_t bits = read_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(os, bits);
}

inline double read_f64(std::istream& is) {
    const std::uint64_t bits = read_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
    const std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    if (n > 0) read_bytes(is, s.data(), n);
    return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
    char got[4];
    read_bytes(is, got, 4);
    if (std::memcmp(got, magic, 4) != 0) {
        throw UsageError(what + ": bad magic, not a " + std::string(magic, 4) + " file");
    }
}

}  // namespace io

}  // namespace qcore

#endif  // QCORE_COMMON_HPP
