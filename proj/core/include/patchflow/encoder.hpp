#pragma once

#include <vector>

#include "patchflow/autograd.hpp"
#include "patchflow/grid.hpp"
#include "patchflow/rng.hpp"

namespace patchflow {

struct ToyEncoderConfig {
    int patch = 4;
    int d = 16;
    int image = 32;
    int mixing_layers = 2;

    int grid_h() const { return image / patch; }
    int grid_w() const { return image / patch; }
    int cells() const { return grid_h() * grid_w(); }
    int patch_dim() const { return 3 * patch * patch; }
};

/// Patch projection + local 3x3 mixing layers + learned positional table.
/// The positional table doubles as the transformer's image positional
/// embedding; it is registered as `<prefix>.pos` with shape [cells, d].
struct ToyEncoderParams {
    ToyEncoderConfig cfg;
    ParamStore* ps = nullptr;
    int patch_w = -1, patch_b = -1;  // [d, 3P^2], [d]
    std::vector<std::pair<int, int>> mix;  // conv [d,d,3,3], bias [d]
    int pos = -1;  // [cells, d]

    static ToyEncoderParams create(ParamStore& ps, const ToyEncoderConfig& cfg,
                                   const std::string& prefix, Rng& rng);
    /// Same layer shapes, all weights zero (shape/linearity tests).
    static ToyEncoderParams create_zero(ParamStore& ps, const ToyEncoderConfig& cfg,
                                        const std::string& prefix);
    const Tensor& pos_table() const { return ps->at(pos).value; }
};

/// Differentiable encoder forward; output grid layout [d, H', W'].
Var encode_image_t(Tape& tape, const Image& img, const ToyEncoderParams& enc);
/// Pure wrapper over a no-grad tape. Deterministic given params.
PatchGrid encode_image(const Image& img, const ToyEncoderParams& enc);

/// Strided 2x2 convolution, stride 2, no padding.
struct DownsampleParams {
    ParamStore* ps = nullptr;
    int w = -1, b = -1;  // [dout, din, 2, 2], [dout]

    static DownsampleParams create(ParamStore& ps, int din, int dout,
                                   const std::string& prefix, Rng& rng);
    /// 2x2 mean kernel per channel, zero bias (constant-preserving).
    static DownsampleParams create_averaging(ParamStore& ps, int d, const std::string& prefix);
};

Var downsample_grid_t(Tape& tape, Var grid_chw, const DownsampleParams& p);
PatchGrid downsample_grid(const PatchGrid& g, const DownsampleParams& p);

/// Learnable mask token; bookkeeping lives in an explicit boolean plane.
struct MaskToken {
    ParamStore* ps = nullptr;
    int embedding = -1;  // [d]

    static MaskToken create(ParamStore& ps, int d, const std::string& prefix, Rng& rng);
    const Tensor& value() const { return ps->at(embedding).value; }
};

struct MaskedGrid {
    PatchGrid grid;
    std::vector<uint8_t> plane;  // cells() entries, raster order, true = masked
};

/// Replace the listed cells with the mask token embedding. Indices are raster
/// cell indices; they must be valid and unique.
MaskedGrid substitute_masks(const PatchGrid& g, const std::vector<int>& mask_set,
                            const MaskToken& m);

/// Differentiable variant used in branch training: returns the [cells, d]
/// token matrix with masked rows tied to the (trainable) mask token.
Var substitute_masks_t(Tape& tape, const PatchGrid& g, const std::vector<int>& mask_set,
                       const MaskToken& m);

}  // namespace patchflow
