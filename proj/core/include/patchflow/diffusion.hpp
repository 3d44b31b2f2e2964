#pragma once

#include <optional>
#include <string>
#include <vector>

#include "patchflow/autograd.hpp"
#include "patchflow/encoder.hpp"
#include "patchflow/grid.hpp"

namespace patchflow {

/// Rectified-flow transformer over packed pixel latents: the image is
/// rearranged into a latent grid (no VAE), double blocks run separate
/// image/text streams under one joint attention, single blocks run the
/// concatenated stream.
struct DiffusionConfig {
    int d = 32;  // model width
    int heads = 2;
    int double_blocks = 6;
    int single_blocks = 2;
    int image = 32;
    int latent_patch = 4;
    int vocab = 64;
    int text_len = 12;
    int control_d = 16;  // width of incoming control grids (MLLM embedding width)
    int cn_double = 4;
    int cn_single = 1;

    int mlp_hidden() const { return 4 * d; }
    int latent_grid() const { return image / latent_patch; }
    int latent_cells() const { return latent_grid() * latent_grid(); }
    int latent_dim() const { return 3 * latent_patch * latent_patch; }
};

/// Per-stream block parameters; modulation maps the time embedding to
/// (shift, scale) pairs for the two pre-norms.
struct StreamParamIds {
    int mod_w = -1, mod_b = -1;  // [4d, d], [4d]
    int norm1 = -1;
    int wqkv = -1, bqkv = -1;
    int wo = -1, bo = -1;
    int norm2 = -1;
    int w1 = -1, b1 = -1;
    int w2 = -1, b2 = -1;
};

struct DoubleBlockIds {
    StreamParamIds img, txt;
};

struct BackboneParams {
    DiffusionConfig cfg;
    ParamStore* ps = nullptr;

    int x_embed_w = -1, x_embed_b = -1;  // [d, latent_dim]
    int img_pos = -1;                    // [cells, d]
    int txt_emb = -1;                    // [vocab, d]
    int txt_pos = -1;                    // [text_len, d]
    int time_w1 = -1, time_b1 = -1, time_w2 = -1, time_b2 = -1;
    std::vector<DoubleBlockIds> doubles;
    std::vector<StreamParamIds> singles;
    int final_norm = -1;
    int final_mod_w = -1, final_mod_b = -1;  // [2d, d]
    int head_w = -1, head_b = -1;            // [latent_dim, d]

    static BackboneParams create(ParamStore& ps, const DiffusionConfig& cfg,
                                 const std::string& prefix, Rng& rng);
};

/// Trainable copy of the input embedders and the first cn_double double /
/// cn_single single backbone blocks, plus the control path: a 2x2/2
/// downsample conv, an input projection control_d -> d, and zero-initialized
/// per-block output projections. All residuals are exactly zero at init.
struct LatentControlNet {
    DiffusionConfig cfg;
    ParamStore* ps = nullptr;

    int x_embed_w = -1, x_embed_b = -1;
    int img_pos = -1;
    int txt_emb = -1;
    int txt_pos = -1;
    int time_w1 = -1, time_b1 = -1, time_w2 = -1, time_b2 = -1;
    DownsampleParams down;          // control_d -> control_d, spatial /2
    int in_proj_w = -1, in_proj_b = -1;  // [d, control_d]
    std::vector<DoubleBlockIds> doubles;
    std::vector<StreamParamIds> singles;
    std::vector<std::pair<int, int>> zero_proj;  // one [d,d]+[d] per controlled block

    int blocks_controlled() const { return cfg.cn_double + cfg.cn_single; }

    /// Fresh ControlNet with weights copied from `bb` and zero output
    /// projections. `control_d` overrides the incoming control grid width
    /// (harness variants feed non-native grids).
    static LatentControlNet create(ParamStore& ps, const BackboneParams& bb,
                                   const std::string& prefix, Rng& rng, int control_d = -1);
};

struct ControlState {
    Tensor z_t;                // [latent_dim, g, g]
    double t = 0.0;            // flow time in [0,1]
    std::vector<int> caption;  // text condition
    PatchGrid c_grid;          // control grid, width control_d
    double scale = 1.0;        // conditioning scale, >= 0
};

// --- flow primitives ---------------------------------------------------------

/// z_t = (1-t) z0 + t eps; errors when t outside [0,1].
Tensor flow_forward_process(const Tensor& z0, const Tensor& eps, double t);
/// MSE between v_pred and the target velocity eps - z0.
double flow_matching_loss(const Tensor& v_pred, const Tensor& z0, const Tensor& eps);
Var flow_matching_loss_t(Tape& tape, Var v_pred, const Tensor& z0, const Tensor& eps);
/// Euler update z_{t-dt} = z_t - dt * v.
Tensor euler_step(const Tensor& z_t, const Tensor& v, double dt);
/// t values visited by a `steps`-step sampling loop: 1, 1-1/steps, ..., 1/steps.
std::vector<double> flow_time_grid(int steps);

// --- forward passes ----------------------------------------------------------

/// Cross-attention conditioning adapters (harness variant): per double block,
/// image-stream queries over external tokens, zero-initialized output
/// projection so the variant starts as the unconditional backbone.
struct CrossAttnAdapter {
    DiffusionConfig cfg;
    ParamStore* ps = nullptr;
    int in_proj_w = -1, in_proj_b = -1;  // [d, token_d]
    struct Block {
        int norm = -1;
        int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1;
        int wo = -1, bo = -1;  // zero init
    };
    std::vector<Block> blocks;

    static CrossAttnAdapter create(ParamStore& ps, const DiffusionConfig& cfg, int token_d,
                                   const std::string& prefix, Rng& rng);
};

/// Velocity prediction. `residuals` (optional) must hold one [cells, d] value
/// per controlled block and is added to the image stream after that block.
/// `xattn`+`tokens` (optional) adds cross-attention conditioning instead.
Var backbone_forward_t(Tape& tape, const BackboneParams& bb, const Tensor& z_t, double t,
                       const std::vector<int>& caption,
                       const std::vector<Var>* residuals = nullptr,
                       const CrossAttnAdapter* xattn = nullptr, Var tokens = nullptr);

/// Tape-level residual computation; `ctrl_chw` is the control grid (possibly a
/// tape value for end-to-end training). Residuals are scaled by `scale` as the
/// final operation, so residuals(s) == s * residuals(1) holds exactly.
std::vector<Var> controlnet_forward_t(Tape& tape, const LatentControlNet& cn,
                                      const Tensor& z_t, double t,
                                      const std::vector<int>& caption, Var ctrl_chw,
                                      double scale);

/// Pure API over a no-grad tape: one residual tensor per controlled block.
std::vector<Tensor> controlnet_forward(const LatentControlNet& cn, const ControlState& state);

/// One guided Euler step: backbone forward with residuals injected, then
/// z_{t-dt} = z_t - dt * v_pred.
Tensor guided_denoise_step(const BackboneParams& bb, const std::vector<Tensor>& residuals,
                           const Tensor& z_t, double t, double dt,
                           const std::vector<int>& caption);

struct SampleOptions {
    int steps = 28;
    double scale = 0.7;
    uint64_t seed = 0;
};

/// Full sampling loop; cn == nullptr gives the unconditional backbone sample.
Image sample_image(const BackboneParams& bb, const LatentControlNet* cn,
                   const PatchGrid* c_grid, const std::vector<int>& caption,
                   const SampleOptions& opts);

/// Sampling with cross-attention conditioning on `tokens` ([cells, token_d]).
Image sample_image_cross_attn(const BackboneParams& bb, const CrossAttnAdapter& xattn,
                              const Tensor& tokens, const std::vector<int>& caption,
                              const SampleOptions& opts);

}  // namespace patchflow
