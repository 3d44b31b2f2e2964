#pragma once

#include <string>
#include <vector>

#include "patchflow/tensor.hpp"

namespace patchflow {

/// RGB image, values in [0,1], stored [3,H,W].
struct Image {
    int h = 0, w = 0;
    Tensor pixels;

    static Image zeros(int h, int w);
    void validate(int patch = 0) const;
};

/// d-dimensional embedding per cell of an H' x W' grid, stored [d,H',W'].
/// The canonical flatten order is raster (row-major): cell (i,j) -> token i*W'+j.
struct PatchGrid {
    int d = 0, h = 0, w = 0;
    Tensor data;

    static PatchGrid zeros(int d, int h, int w);
    static PatchGrid from_tensor(Tensor t);  // [d,h,w]
    int cells() const { return h * w; }
    double& at(int c, int i, int j) { return data.at3(c, i, j); }
    double at(int c, int i, int j) const { return data.at3(c, i, j); }
};

/// Grid -> [cells, d] token matrix in raster order.
Tensor flatten_grid(const PatchGrid& g);
/// Token matrix [h*w, d] -> grid; errors on count mismatch.
PatchGrid reshape_to_grid(const Tensor& tokens, int h, int w);

/// Rearrange [3,H,W] pixels into a [3*P*P, H/P, W/P] grid; exact inverse below.
/// Cell channel layout: (c, py, px) -> c*P*P + py*P + px.
PatchGrid space_to_depth(const Image& img, int patch);
Image depth_to_space(const PatchGrid& g, int patch);

/// 2x2 mean pooling; halves both spatial dims. Used to derive coarser
/// token-count grids from the native one.
PatchGrid pool2x2_mean(const PatchGrid& g);

Image clamp01(const Image& img);

// --- binary grid format -----------------------------------------------------
// Little-endian layout:
//   bytes 0..3   magic "PGRD"
//   bytes 4..7   u32 d
//   bytes 8..11  u32 H'
//   bytes 12..15 u32 W'
//   then d*H'*W' IEEE-754 float32 values, channel-major raster order:
//   value (c,i,j) at element (c*H' + i)*W' + j.
void save_grid(const PatchGrid& g, const std::string& path);
PatchGrid load_grid(const std::string& path);

// --- 8-bit image dumps -------------------------------------------------------
// Binary PPM (P6), 255 maxval; channel value = round(pixel * 255) clamped.
void save_ppm(const Image& img, const std::string& path);
Image load_ppm(const std::string& path);

}  // namespace patchflow
