#include "patchflow/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace patchflow {

std::string MetricReport::to_json() const {
    nlohmann::json j;
    j["masked_mse"] = masked_mse;
    j["psnr"] = psnr;
    j["ssim"] = ssim;
    j["frechet"] = frechet;
    return j.dump();
}

double mse_images(const Image& a, const Image& b) {
    PF_CHECK(a.h == b.h && a.w == b.w, "image shape mismatch");
    double s = 0.0;
    for (int i = 0; i < a.pixels.numel(); ++i) {
        const double d = a.pixels.v[static_cast<size_t>(i)] - b.pixels.v[static_cast<size_t>(i)];
        s += d * d;
    }
    return s / a.pixels.numel();
}

double psnr_images(const Image& a, const Image& b) {
    return 10.0 * std::log10(1.0 / std::max(mse_images(a, b), 1e-10));
}

namespace {

std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<size_t>(size) * size);
    const int c = size / 2;
    double sum = 0.0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double d2 = (y - c) * (y - c) + (x - c) * (x - c);
            w[static_cast<size_t>(y) * size + x] = std::exp(-d2 / (2.0 * sigma * sigma));
            sum += w[static_cast<size_t>(y) * size + x];
        }
    for (auto& v : w) v /= sum;
    return w;
}

}  // namespace

double ssim_images(const Image& a, const Image& b) {
    PF_CHECK(a.h == b.h && a.w == b.w, "image shape mismatch");
    constexpr int kWin = 11;
    constexpr double kC1 = 0.01 * 0.01;
    constexpr double kC2 = 0.03 * 0.03;
    PF_CHECK(a.h >= kWin && a.w >= kWin, "image too small for ssim window");
    static const std::vector<double> win = gaussian_window(kWin, 1.5);

    double total = 0.0;
    int count = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y + kWin <= a.h; ++y)
            for (int x = 0; x + kWin <= a.w; ++x) {
                double ma = 0, mb = 0;
                for (int wy = 0; wy < kWin; ++wy)
                    for (int wx = 0; wx < kWin; ++wx) {
                        const double wgt = win[static_cast<size_t>(wy) * kWin + wx];
                        ma += wgt * a.pixels.at3(c, y + wy, x + wx);
                        mb += wgt * b.pixels.at3(c, y + wy, x + wx);
                    }
                double va = 0, vb = 0, cov = 0;
                for (int wy = 0; wy < kWin; ++wy)
                    for (int wx = 0; wx < kWin; ++wx) {
                        const double wgt = win[static_cast<size_t>(wy) * kWin + wx];
                        const double da = a.pixels.at3(c, y + wy, x + wx) - ma;
                        const double db = b.pixels.at3(c, y + wy, x + wx) - mb;
                        va += wgt * da * da;
                        vb += wgt * db * db;
                        cov += wgt * da * db;
                    }
                const double num = (2.0 * ma * mb + kC1) * (2.0 * cov + kC2);
                const double den = (ma * ma + mb * mb + kC1) * (va + vb + kC2);
                total += num / den;
                ++count;
            }
    return total / count;
}

std::vector<double> frechet_feature(const Image& img, const ToyEncoderParams& enc) {
    const PatchGrid g = encode_image(img, enc);
    std::vector<double> f(static_cast<size_t>(2 * g.d));
    const int cells = g.cells();
    for (int c = 0; c < g.d; ++c) {
        double mean = 0.0;
        for (int i = 0; i < g.h; ++i)
            for (int j = 0; j < g.w; ++j) mean += g.at(c, i, j);
        mean /= cells;
        double var = 0.0;
        for (int i = 0; i < g.h; ++i)
            for (int j = 0; j < g.w; ++j) {
                const double d = g.at(c, i, j) - mean;
                var += d * d;
            }
        f[static_cast<size_t>(c)] = mean;
        f[static_cast<size_t>(g.d + c)] = std::sqrt(var / cells);
    }
    return f;
}

void jacobi_eigen(const Tensor& sym, Tensor& eigvals, Tensor& eigvecs) {
    PF_CHECK(sym.ndim() == 2 && sym.rows() == sym.cols(), "jacobi wants a square matrix");
    const int n = sym.rows();
    Tensor a = sym;
    eigvecs = Tensor({n, n});
    for (int i = 0; i < n; ++i) eigvecs.at2(i, i) = 1.0;

    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a.at2(p, q) * a.at2(p, q);
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = a.at2(p, q);
                if (std::abs(apq) < 1e-18) continue;
                const double theta = (a.at2(q, q) - a.at2(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a.at2(k, p), akq = a.at2(k, q);
                    a.at2(k, p) = c * akp - s * akq;
                    a.at2(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a.at2(p, k), aqk = a.at2(q, k);
                    a.at2(p, k) = c * apk - s * aqk;
                    a.at2(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = eigvecs.at2(k, p), vkq = eigvecs.at2(k, q);
                    eigvecs.at2(k, p) = c * vkp - s * vkq;
                    eigvecs.at2(k, q) = s * vkp + c * vkq;
                }
            }
    }
    eigvals = Tensor({n});
    for (int i = 0; i < n; ++i) eigvals.v[static_cast<size_t>(i)] = a.at2(i, i);
}

namespace {

Tensor sqrtm_psd(const Tensor& sym) {
    Tensor vals, vecs;
    jacobi_eigen(sym, vals, vecs);
    const int n = sym.rows();
    Tensor out({n, n});
    for (int k = 0; k < n; ++k) {
        const double s = std::sqrt(std::max(0.0, vals.v[static_cast<size_t>(k)]));
        if (s == 0.0) continue;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) out.at2(i, j) += s * vecs.at2(i, k) * vecs.at2(j, k);
    }
    return out;
}

struct GaussianFit {
    std::vector<double> mean;
    Tensor cov;
};

GaussianFit fit_gaussian(const std::vector<std::vector<double>>& feats) {
    const int n = static_cast<int>(feats.size());
    const int d = static_cast<int>(feats[0].size());
    GaussianFit fit;
    fit.mean.assign(static_cast<size_t>(d), 0.0);
    for (const auto& f : feats)
        for (int j = 0; j < d; ++j) fit.mean[static_cast<size_t>(j)] += f[static_cast<size_t>(j)];
    for (auto& m : fit.mean) m /= n;
    fit.cov = Tensor({d, d});
    for (const auto& f : feats)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                fit.cov.at2(i, j) += (f[static_cast<size_t>(i)] - fit.mean[static_cast<size_t>(i)]) *
                                     (f[static_cast<size_t>(j)] - fit.mean[static_cast<size_t>(j)]);
    for (auto& v : fit.cov.v) v /= n;
    return fit;
}

}  // namespace

double toy_frechet(const std::vector<Image>& a, const std::vector<Image>& b,
                   const ToyEncoderParams& enc) {
    PF_CHECK(!a.empty() && !b.empty(), "toy_frechet with empty image set");
    std::vector<std::vector<double>> fa, fb;
    fa.reserve(a.size());
    fb.reserve(b.size());
    for (const auto& img : a) fa.push_back(frechet_feature(img, enc));
    for (const auto& img : b) fb.push_back(frechet_feature(img, enc));
    const int d = static_cast<int>(fa[0].size());

    // standardize per dimension over the union, then scale by 1/sqrt(d)
    std::vector<double> mu(static_cast<size_t>(d), 0.0), sd(static_cast<size_t>(d), 0.0);
    const int total = static_cast<int>(fa.size() + fb.size());
    for (const auto* set : {&fa, &fb})
        for (const auto& f : *set)
            for (int j = 0; j < d; ++j) mu[static_cast<size_t>(j)] += f[static_cast<size_t>(j)];
    for (auto& m : mu) m /= total;
    for (const auto* set : {&fa, &fb})
        for (const auto& f : *set)
            for (int j = 0; j < d; ++j) {
                const double e = f[static_cast<size_t>(j)] - mu[static_cast<size_t>(j)];
                sd[static_cast<size_t>(j)] += e * e;
            }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& s : sd) s = std::sqrt(s / total) + 1e-8;
    for (auto* set : {&fa, &fb})
        for (auto& f : *set)
            for (int j = 0; j < d; ++j)
                f[static_cast<size_t>(j)] =
                    (f[static_cast<size_t>(j)] - mu[static_cast<size_t>(j)]) /
                    sd[static_cast<size_t>(j)] * inv_sqrt_d;

    const GaussianFit ga = fit_gaussian(fa);
    const GaussianFit gb = fit_gaussian(fb);

    double mean_term = 0.0;
    for (int j = 0; j < d; ++j) {
        const double e = ga.mean[static_cast<size_t>(j)] - gb.mean[static_cast<size_t>(j)];
        mean_term += e * e;
    }
    double tr_a = 0.0, tr_b = 0.0;
    for (int j = 0; j < d; ++j) {
        tr_a += ga.cov.at2(j, j);
        tr_b += gb.cov.at2(j, j);
    }
    // tr((Sa Sb)^1/2) via the symmetric form sqrt(Sa)^T Sb sqrt(Sa)
    const Tensor sa = sqrtm_psd(ga.cov);
    Tensor tmp, m;
    matmul(sa, false, gb.cov, false, tmp);
    matmul(tmp, false, sa, false, m);
    // symmetrize against roundoff
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            const double s = 0.5 * (m.at2(i, j) + m.at2(j, i));
            m.at2(i, j) = s;
            m.at2(j, i) = s;
        }
    Tensor vals, vecs;
    jacobi_eigen(m, vals, vecs);
    double tr_sqrt = 0.0;
    for (int j = 0; j < d; ++j) tr_sqrt += std::sqrt(std::max(0.0, vals.v[static_cast<size_t>(j)]));

    return std::max(0.0, mean_term + tr_a + tr_b - 2.0 * tr_sqrt);
}

MetricReport compute_metrics(const std::vector<Image>& generated,
                             const std::vector<Image>& reference,
                             const ToyEncoderParams& enc) {
    PF_CHECK(!generated.empty() && !reference.empty(), "compute_metrics with empty set");
    PF_CHECK(generated.size() == reference.size(), "compute_metrics needs equal counts");
    MetricReport r;
    double grid_mse = 0.0;
    for (size_t i = 0; i < generated.size(); ++i) {
        PF_CHECK(generated[i].h == reference[i].h && generated[i].w == reference[i].w,
                 "compute_metrics needs equal shapes");
        r.psnr += psnr_images(generated[i], reference[i]);
        r.ssim += ssim_images(generated[i], reference[i]);
        const PatchGrid pg = encode_image(generated[i], enc);
        const PatchGrid rg = encode_image(reference[i], enc);
        double s = 0.0;
        for (int k = 0; k < pg.data.numel(); ++k) {
            const double e = pg.data.v[static_cast<size_t>(k)] - rg.data.v[static_cast<size_t>(k)];
            s += e * e;
        }
        grid_mse += s / pg.data.numel();
    }
    const double n = static_cast<double>(generated.size());
    r.psnr /= n;
    r.ssim /= n;
    r.masked_mse = grid_mse / n;
    r.frechet = toy_frechet(generated, reference, enc);
    PF_CHECK(std::isfinite(r.psnr) && std::isfinite(r.ssim) && std::isfinite(r.frechet),
             "metric report contains non-finite values");
    return r;
}

}  // namespace patchflow
