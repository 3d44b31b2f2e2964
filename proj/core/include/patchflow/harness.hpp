#pragma once

#include <string>
#include <vector>

#include "patchflow/metrics.hpp"
#include "patchflow/train.hpp"

namespace patchflow {

struct GenOptions {
    int mar_steps = 64;
    int diff_steps = 28;
    double scale = 0.7;
    uint64_t seed = 0;
    int token_count = 64;
};

struct GenTiming {
    double mar_seconds = 0.0;
    double diffusion_seconds = 0.0;
};

/// Full pipeline: MAR-decode a latent grid from the caption, pool it to the
/// ControlNet's token count, then run guided rectified-flow sampling.
/// cnm == nullptr produces the unconditional backbone sample.
Image generate_image(const MllmStack& stack, const DiffusionModel& dm,
                     const ControlNetModel* cnm, const std::vector<int>& caption,
                     const GenOptions& opts, PatchGrid* grid_out = nullptr,
                     GenTiming* timing = nullptr);

/// Copy base into gen again and reseed the vision head and mask token;
/// used to give every harness run an identical starting branch.
void reset_generation_branch(MllmStack& stack, uint64_t seed);

// ---------------------------------------------------------------------------
// Table-style comparisons
// ---------------------------------------------------------------------------

extern const std::vector<std::string> kVariantIds;
// clip-latent      masked-AR patch latents from the native encoder + ControlNet
// query-tokens     learnable 2-D query grid, trained end-to-end through the ControlNet
// raw-pixel-latent RGB thumbnail grid as the bridge currency (VAE stand-in)
// nonaligned-encoder  independently initialized second encoder as the bridge
// cross-attn       patch latents injected via cross-attention instead of ControlNet

struct HarnessContext {
    const SyntheticDataset* train = nullptr;
    const SyntheticDataset* val = nullptr;
    MllmStack* stack = nullptr;     // pretrained, base frozen
    DiffusionModel* dm = nullptr;   // pretrained, frozen
    int eval_n = 48;
    int diff_steps = 28;
    double scale = 0.7;
    int mar_steps = 64;
};

struct ReportRow {
    std::string sweep;  // variants | token-count | decode-steps
    std::string key;    // variant id, token count or step count
    uint64_t seed = 0;
    MetricReport metrics;
    uint64_t config_hash = 0;   // hash with the swept field masked out
    uint64_t batch_chain = 0;   // data-order fairness witness
    double wall_clock = 0.0;    // written to timings.csv only
    std::string note;
};

/// Train one bridging variant at the given budget (total optimizer steps,
/// identical data order across variants) and evaluate caption-conditional
/// generation on the validation slice.
ReportRow run_variant(const std::string& variant, int budget_steps, uint64_t seed,
                      const TrainConfig& base_cfg, HarnessContext& ctx);

/// Teacher-forced reconstruction quality as a function of control token count.
std::vector<ReportRow> sweep_token_count(const std::vector<int>& counts, int budget_steps,
                                         const std::vector<uint64_t>& seeds,
                                         const TrainConfig& base_cfg, HarnessContext& ctx);

/// Generation quality and MAR decode time as a function of unmasking steps.
/// Trains one clip-latent pipeline per seed, then sweeps K at fixed weights.
std::vector<ReportRow> sweep_decoding_steps(const std::vector<int>& steps_list, int budget_steps,
                                            const std::vector<uint64_t>& seeds,
                                            const TrainConfig& base_cfg, HarnessContext& ctx);

/// metrics.csv (deterministic), timings.csv (wall clock), report_long.jsonl.
void write_reports(const std::string& out_dir, const std::vector<ReportRow>& rows);

/// RGB thumbnail of the image as a 3-channel grid (mean over patch pixels).
PatchGrid thumbnail_grid(const Image& img, int patch);

}  // namespace patchflow
