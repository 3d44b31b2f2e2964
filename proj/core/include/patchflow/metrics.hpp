#pragma once

#include <string>
#include <vector>

#include "patchflow/encoder.hpp"
#include "patchflow/grid.hpp"

namespace patchflow {

struct MetricReport {
    double masked_mse = 0.0;   // embedding-space MSE (bridge fidelity)
    double psnr = 0.0;         // dB, capped at 100 (MSE floor 1e-10)
    double ssim = 0.0;
    double frechet = 0.0;      // toy-Fréchet over frozen encoder features
    double wall_clock_sec = 0.0;  // reported separately, never in deterministic outputs

    std::string to_json() const;
};

double mse_images(const Image& a, const Image& b);
/// 10*log10(1/MSE) for [0,1] images; MSE floored at 1e-10 so the value stays finite.
double psnr_images(const Image& a, const Image& b);
/// Standard windowed SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
/// L=1, valid windows only, averaged over channels.
double ssim_images(const Image& a, const Image& b);

/// Per-image feature for the Fréchet proxy: per-channel spatial mean and std of
/// the frozen encoder grid (2d values).
std::vector<double> frechet_feature(const Image& img, const ToyEncoderParams& enc);

/// Fréchet distance between Gaussian fits of encoder features of two image
/// sets. Features are standardized per dimension over the union of both sets
/// and scaled by 1/sqrt(dim), making the metric scale-free; result clamped >= 0.
double toy_frechet(const std::vector<Image>& a, const std::vector<Image>& b,
                   const ToyEncoderParams& enc);

/// Pairwise PSNR/SSIM means plus set-level toy-Fréchet; masked_mse is the mean
/// per-cell squared distance between encoder grids of paired images.
MetricReport compute_metrics(const std::vector<Image>& generated,
                             const std::vector<Image>& reference,
                             const ToyEncoderParams& enc);

/// Symmetric Jacobi eigendecomposition (helper exposed for tests).
void jacobi_eigen(const Tensor& sym, Tensor& eigvals, Tensor& eigvecs);

}  // namespace patchflow
