#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace patchflow {

[[noreturn]] void fail(const std::string& msg);

#define PF_CHECK(cond, msg)                \
    do {                                   \
        if (!(cond)) ::patchflow::fail(msg); \
    } while (0)

/// Dense row-major tensor of doubles. All numerics in this project run in
/// double precision; 32-bit floats appear only in the on-disk grid format.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);

    static int numel_of(const std::vector<int>& s);
    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double x);
    static Tensor scalar(double x);
    static Tensor from(std::vector<int> s, std::vector<double> data);

    int numel() const { return static_cast<int>(v.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    // 2-D helpers (rows x cols)
    int rows() const { return shape[0]; }
    int cols() const { return shape[1]; }
    double& at2(int i, int j) { return v[static_cast<size_t>(i) * shape[1] + j]; }
    double at2(int i, int j) const { return v[static_cast<size_t>(i) * shape[1] + j]; }

    // 3-D helper (c, h, w)
    double& at3(int c, int i, int j) {
        return v[(static_cast<size_t>(c) * shape[1] + i) * shape[2] + j];
    }
    double at3(int c, int i, int j) const {
        return v[(static_cast<size_t>(c) * shape[1] + i) * shape[2] + j];
    }

    bool all_finite() const;
    std::string shape_str() const;
};

/// C = op(A) * op(B), 2-D only. `accumulate` adds into C instead of overwriting.
void matmul(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& c,
            bool accumulate = false);

uint64_t fnv1a(const void* data, size_t n, uint64_t seed = 1469598103934665603ull);
uint64_t fnv1a_str(const std::string& s, uint64_t seed = 1469598103934665603ull);
uint64_t tensor_checksum(const Tensor& t);

}  // namespace patchflow
