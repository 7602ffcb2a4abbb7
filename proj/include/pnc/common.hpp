#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pnc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Error hierarchy. Each condition named by the module contracts gets its own
// type so callers can catch precisely; all derive from Error.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define PNC_DEFINE_ERROR(Name)                  \
    struct Name : Error {                       \
        using Error::Error;                     \
    }

PNC_DEFINE_ERROR(ShapeMismatch);
PNC_DEFINE_ERROR(SingularSystem);
PNC_DEFINE_ERROR(InvalidRank);
PNC_DEFINE_ERROR(InvalidLayer);
PNC_DEFINE_ERROR(NonFiniteValue);
PNC_DEFINE_ERROR(NonFiniteResult);
PNC_DEFINE_ERROR(DivergedTraining);
PNC_DEFINE_ERROR(EmptyCalibration);
PNC_DEFINE_ERROR(OverlappingLayers);
PNC_DEFINE_ERROR(InvalidFraction);
PNC_DEFINE_ERROR(InvalidGeometry);
PNC_DEFINE_ERROR(ZeroMatrix);
PNC_DEFINE_ERROR(NotPsd);
PNC_DEFINE_ERROR(DegenerateCovariance);
PNC_DEFINE_ERROR(RejectionStarvation);
PNC_DEFINE_ERROR(NoConvergence);
PNC_DEFINE_ERROR(EmptyEnsemble);
PNC_DEFINE_ERROR(NonPositiveVariance);
PNC_DEFINE_ERROR(EmptyInput);
PNC_DEFINE_ERROR(LengthMismatch);
PNC_DEFINE_ERROR(ZeroVariance);
PNC_DEFINE_ERROR(InvalidConfig);
PNC_DEFINE_ERROR(CorruptFile);
PNC_DEFINE_ERROR(VersionMismatch);

#undef PNC_DEFINE_ERROR

// 64-bit seed mixing (splitmix64). Every random stream in the library is
// derived from an explicit seed plus integer tags; there is no global RNG.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t mix_seed(std::uint64_t seed) { return splitmix64(seed); }

template <typename... Tags>
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag, Tags... rest) {
    return mix_seed(splitmix64(seed ^ splitmix64(tag + 0x632be59bd9b4e019ULL)), rest...);
}

// Seeded generator with portable uniform/normal draws. std::mt19937_64 output
// is fully specified by the standard; the distributions are hand-rolled since
// std::normal_distribution is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)), spare_valid_(false) {}

    std::uint64_t next_u64() {
        // xorshift* keeps the generator header-only and byte-for-byte portable.
        std::uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545f4914f6cdd1dULL;
    }

    // Uniform on [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform on [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection sampling to kill modulo bias.
        const std::uint64_t threshold = (~n + 1) % n;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller (cached spare).
    double gaussian() {
        if (spare_valid_) {
            spare_valid_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(angle);
        spare_valid_ = true;
        return radius * std::cos(angle);
    }

    Vector gaussian_vector(Index n) {
        Vector v(n);
        for (Index i = 0; i < n; ++i) v[i] = gaussian();
        return v;
    }

    Matrix gaussian_matrix(Index rows, Index cols) {
        Matrix m(rows, cols);
        for (Index j = 0; j < cols; ++j)
            for (Index i = 0; i < rows; ++i) m(i, j) = gaussian();
        return m;
    }

private:
    std::uint64_t state_;
    bool spare_valid_;
    double spare_ = 0.0;
};

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

inline void require_finite(const Eigen::Ref<const Matrix>& m, const char* what) {
    if (!m.allFinite()) throw NonFiniteValue(std::string(what) + ": non-finite entries");
}

// FNV-1a over raw bytes; used for content-addressing model files.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string base64_encode(const void* data, std::size_t n);
std::vector<unsigned char> base64_decode(const std::string& text);

// Doubles <-> base64, little-endian 64-bit payload, bit-exact round trip.
std::string encode_doubles(const double* data, std::size_t n);
std::vector<double> decode_doubles(const std::string& text);

}  // namespace pnc
