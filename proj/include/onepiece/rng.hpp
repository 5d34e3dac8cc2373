#pragma once
// Deterministic random utilities. All sampling in the project goes through
// Rng so that runs are reproducible from seeds alone, independent of the
// standard library's distribution implementations.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace onepiece {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Mixes a base seed with up to three stream indices into a fresh seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t s = splitmix64(base ^ 0x6a09e667f3bcc909ull);
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ (b + 0x3c6ef372fe94f82bull));
    s = splitmix64(s ^ (c + 0xa54ff53a5f1d36f1ull));
    return s;
}

// Hash of a raw categorical id into [0, vocab). Salted per feature so that
// distinct features collide differently.
inline int hash_bucket(std::uint64_t raw_id, int vocab, std::uint64_t salt) {
    return static_cast<int>(splitmix64(raw_id ^ splitmix64(salt)) %
                            static_cast<std::uint64_t>(vocab));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t u64() { return engine_(); }

    // 53-bit uniform in [0, 1).
    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller with cached spare.
    double normal(double mu = 0.0, double sigma = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mu + sigma * spare_;
        }
        double u1 = 1.0 - uniform();  // avoid log(0)
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mu + sigma * r * std::cos(theta);
    }

    double gumbel() { return -std::log(-std::log(1.0 - uniform())); }

    bool bernoulli(double p) { return uniform() < p; }

    // Uniform integer in [0, n). Modulo bias is irrelevant at this scale.
    std::size_t below(std::size_t n) { return n == 0 ? 0 : u64() % n; }

    int int_below(int n) { return static_cast<int>(below(static_cast<std::size_t>(n))); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // Sample k distinct indices from [0, n) (k <= n), order randomized.
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        shuffle(idx);
        idx.resize(static_cast<std::size_t>(k < n ? k : n));
        return idx;
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace onepiece
