#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "patchflow/tensor.hpp"

namespace patchflow {

/// Derive an independent stream seed from (seed, tag). Streams for data order,
/// weight init, noise draws etc. are split by tag so that adding one consumer
/// never shifts another stream.
uint64_t mix_seed(uint64_t seed, std::string_view tag);

/// Deterministic RNG used everywhere. Gaussians come from a cache-free
/// Box-Muller so each sample consumes exactly two engine draws.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    double uniform();  // [0, 1)
    double gaussian(); // N(0, 1)
    double gaussian(double mu, double sigma) { return mu + sigma * gaussian(); }
    int uniform_int(int n);  // [0, n)

    /// Fisher-Yates permutation of 0..n-1.
    std::vector<int> permutation(int n);

    void fill_gaussian(Tensor& t, double stddev);
    void fill_uniform(Tensor& t, double lo, double hi);

    std::string state() const;
    void set_state(const std::string& s);

    std::mt19937_64& engine() { return eng_; }

private:
    std::mt19937_64 eng_;
};

/// Rejection-sampled truncated normal. sigma == 0 degenerates to clamp(mu).
double truncated_normal(Rng& rng, double mu, double sigma, double lo, double hi);

/// Mean of N(mu, sigma^2) truncated to [lo, hi], via the standard phi/Phi formula.
double truncated_normal_mean(double mu, double sigma, double lo, double hi);
/// Standard deviation of the same truncated normal.
double truncated_normal_std(double mu, double sigma, double lo, double hi);

double normal_pdf(double z);
double normal_cdf(double z);

}  // namespace patchflow
