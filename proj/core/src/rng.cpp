#include "patchflow/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace patchflow {

uint64_t mix_seed(uint64_t seed, std::string_view tag) {
    uint64_t h = fnv1a(tag.data(), tag.size());
    h = fnv1a(&seed, sizeof(seed), h);
    // splitmix64 finalizer
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

double Rng::uniform() {
    // 53-bit mantissa in [0,1)
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Rng::gaussian() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

int Rng::uniform_int(int n) {
    PF_CHECK(n > 0, "uniform_int needs n > 0");
    // modulo-rejection for unbiased draws
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % un;
    uint64_t x;
    do {
        x = eng_();
    } while (x >= limit);
    return static_cast<int>(x % un);
}

std::vector<int> Rng::permutation(int n) {
    std::vector<int> p(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i) {
        const int j = uniform_int(i + 1);
        std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
    }
    return p;
}

void Rng::fill_gaussian(Tensor& t, double stddev) {
    for (auto& x : t.v) x = stddev * gaussian();
}

void Rng::fill_uniform(Tensor& t, double lo, double hi) {
    for (auto& x : t.v) x = lo + (hi - lo) * uniform();
}

std::string Rng::state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
}

void Rng::set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    PF_CHECK(!is.fail(), "bad rng state string");
}

double truncated_normal(Rng& rng, double mu, double sigma, double lo, double hi) {
    PF_CHECK(lo <= hi, "truncated_normal bounds inverted");
    if (sigma == 0.0) return std::min(hi, std::max(lo, mu));
    double x;
    do {
        x = rng.gaussian(mu, sigma);
    } while (x < lo || x > hi);
    return x;
}

double normal_pdf(double z) {
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

double normal_cdf(double z) {
    return 0.5 * std::erfc(-z / std::numbers::sqrt2);
}

double truncated_normal_mean(double mu, double sigma, double lo, double hi) {
    if (sigma == 0.0) return std::min(hi, std::max(lo, mu));
    const double a = (lo - mu) / sigma;
    const double b = (hi - mu) / sigma;
    const double z = normal_cdf(b) - normal_cdf(a);
    return mu + sigma * (normal_pdf(a) - normal_pdf(b)) / z;
}

double truncated_normal_std(double mu, double sigma, double lo, double hi) {
    if (sigma == 0.0) return 0.0;
    const double a = (lo - mu) / sigma;
    const double b = (hi - mu) / sigma;
    const double z = normal_cdf(b) - normal_cdf(a);
    const double r = (normal_pdf(a) - normal_pdf(b)) / z;
    const double var = sigma * sigma * (1.0 + (a * normal_pdf(a) - b * normal_pdf(b)) / z - r * r);
    return std::sqrt(var);
}

}  // namespace patchflow
