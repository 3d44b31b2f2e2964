#include "patchflow/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace patchflow {

void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(numel_of(shape)), 0.0);
}

int Tensor::numel_of(const std::vector<int>& s) {
    int n = 1;
    for (int d : s) {
        PF_CHECK(d > 0, "tensor dims must be positive");
        n *= d;
    }
    return n;
}

Tensor Tensor::full(std::vector<int> s, double x) {
    Tensor t(std::move(s));
    for (auto& e : t.v) e = x;
    return t;
}

Tensor Tensor::scalar(double x) {
    Tensor t({1});
    t.v[0] = x;
    return t;
}

Tensor Tensor::from(std::vector<int> s, std::vector<double> data) {
    Tensor t;
    t.shape = std::move(s);
    PF_CHECK(static_cast<int>(data.size()) == numel_of(t.shape),
             "tensor data size does not match shape");
    t.v = std::move(data);
    return t;
}

bool Tensor::all_finite() const {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

void matmul(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& c,
            bool accumulate) {
    PF_CHECK(a.ndim() == 2 && b.ndim() == 2, "matmul expects 2-D tensors");
    const int m = ta ? a.dim(1) : a.dim(0);
    const int k = ta ? a.dim(0) : a.dim(1);
    const int kb = tb ? b.dim(1) : b.dim(0);
    const int n = tb ? b.dim(0) : b.dim(1);
    PF_CHECK(k == kb, "matmul inner dims mismatch: " + a.shape_str() + " x " + b.shape_str());

    if (c.shape != std::vector<int>{m, n}) {
        PF_CHECK(!accumulate, "matmul accumulate needs a preshaped output");
        c = Tensor({m, n});
    } else if (!accumulate) {
        std::fill(c.v.begin(), c.v.end(), 0.0);
    }

    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();

    if (!ta && !tb) {
        // C[m,n] += A[m,k] * B[k,n], i-k-j keeps B and C rows contiguous.
        for (int i = 0; i < m; ++i) {
            double* crow = pc + static_cast<size_t>(i) * n;
            const double* arow = pa + static_cast<size_t>(i) * k;
            for (int kk = 0; kk < k; ++kk) {
                const double av = arow[kk];
                if (av == 0.0) continue;
                const double* brow = pb + static_cast<size_t>(kk) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!ta && tb) {
        // C[m,n] += A[m,k] * B[n,k]^T, dot of contiguous rows.
        for (int i = 0; i < m; ++i) {
            const double* arow = pa + static_cast<size_t>(i) * k;
            double* crow = pc + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const double* brow = pb + static_cast<size_t>(j) * k;
                double s = 0.0;
                for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
                crow[j] += s;
            }
        }
    } else if (ta && !tb) {
        // C[m,n] += A[k,m]^T * B[k,n]
        for (int kk = 0; kk < k; ++kk) {
            const double* arow = pa + static_cast<size_t>(kk) * m;
            const double* brow = pb + static_cast<size_t>(kk) * n;
            for (int i = 0; i < m; ++i) {
                const double av = arow[i];
                if (av == 0.0) continue;
                double* crow = pc + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        // C[m,n] += A[k,m]^T * B[n,k]^T
        for (int i = 0; i < m; ++i) {
            double* crow = pc + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const double* brow = pb + static_cast<size_t>(j) * k;
                double s = 0.0;
                for (int kk = 0; kk < k; ++kk) s += pa[static_cast<size_t>(kk) * m + i] * brow[kk];
                crow[j] += s;
            }
        }
    }
}

uint64_t fnv1a(const void* data, size_t n, uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t fnv1a_str(const std::string& s, uint64_t seed) {
    return fnv1a(s.data(), s.size(), seed);
}

uint64_t tensor_checksum(const Tensor& t) {
    uint64_t h = fnv1a(t.shape.data(), t.shape.size() * sizeof(int));
    return fnv1a(t.v.data(), t.v.size() * sizeof(double), h);
}

}  // namespace patchflow
