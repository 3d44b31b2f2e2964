#pragma once

#include <optional>
#include <string>
#include <vector>

#include "patchflow/checkpoint.hpp"
#include "patchflow/dataset.hpp"
#include "patchflow/diffusion.hpp"
#include "patchflow/encoder.hpp"
#include "patchflow/mar.hpp"
#include "patchflow/optim.hpp"
#include "patchflow/transformer.hpp"

namespace patchflow {

struct ToyDims {
    ToyEncoderConfig enc;
    MllmConfig mllm;
    DiffusionConfig dm;

    static ToyDims defaults();
};

struct TrainConfig {
    uint64_t seed = 0;
    std::string phase;  // pretrain-mllm | pretrain-backbone | train-branch | train-controlnet
    int steps = 0;
    int batch = 8;
    double lr = 1e-3;
    uint64_t data_seed = 7;
    int data_n = 1024;
    int token_count = 64;  // control grid cells fed to the ControlNet (pooled from 64)
    ToyDims dims;

    std::string to_json() const;
    static TrainConfig from_json(const std::string& s);
    uint64_t config_hash() const;
    /// Hash with one named field replaced by a placeholder; sweeps use it to
    /// assert that everything else stayed fixed.
    uint64_t config_hash_excluding(const std::string& field) const;
};

/// Encoder + branched transformer + mask token + an auxiliary patch
/// reconstruction head used only during pretraining. Holds interior pointers
/// into its own ParamStore, hence non-copyable.
struct MllmStack {
    ToyDims dims;
    ParamStore ps;
    ToyEncoderParams enc;
    MllmParams mllm;
    MaskToken mask_token;
    int recon_w = -1, recon_b = -1;

    MllmStack() = default;
    MllmStack(const MllmStack&) = delete;
    MllmStack& operator=(const MllmStack&) = delete;

    void init(const ToyDims& dims, uint64_t seed);
    /// Freeze encoder, base transformer and aux head (after pretraining).
    void freeze_base();
    bool base_frozen() const;
};

struct DiffusionModel {
    DiffusionConfig cfg;
    ParamStore ps;
    BackboneParams bb;

    DiffusionModel() = default;
    DiffusionModel(const DiffusionModel&) = delete;
    DiffusionModel& operator=(const DiffusionModel&) = delete;

    void init(const DiffusionConfig& cfg, uint64_t seed);
    void freeze() { ps.set_frozen_prefix("dm.", true); }
};

struct ControlNetModel {
    ParamStore ps;
    LatentControlNet cn;

    ControlNetModel() = default;
    ControlNetModel(const ControlNetModel&) = delete;
    ControlNetModel& operator=(const ControlNetModel&) = delete;

    void init(const DiffusionModel& dm, uint64_t seed, int control_d = -1);
};

struct TrainResult {
    CheckpointData checkpoint;
    std::vector<double> losses;
    double first_loss = 0.0;
    double last_loss = 0.0;
    uint64_t batch_chain_hash = 0;
};

struct PhaseOptions {
    const CheckpointData* resume = nullptr;  // continue a saved trajectory
    int checkpoint_at = -1;                  // also snapshot after this step
    CheckpointData* mid_checkpoint = nullptr;
};

/// Captioning (next-token CE) plus per-cell patch reconstruction; trains the
/// encoder and the base transformer jointly, producing the frozen "native"
/// stack later phases build on.
TrainResult pretrain_mllm_stack(const TrainConfig& cfg, const SyntheticDataset& data,
                                MllmStack& stack, const PhaseOptions& opts = {});

/// Flow-matching pretraining of the diffusion backbone.
TrainResult pretrain_toy_backbone(const TrainConfig& cfg, const SyntheticDataset& data,
                                  DiffusionModel& dm, const PhaseOptions& opts = {});

/// Masked-MSE training of the generation branch (gen.* tensors only); the
/// base must already be frozen.
TrainResult train_generation_branch(const TrainConfig& cfg, const SyntheticDataset& data,
                                    MllmStack& stack, const PhaseOptions& opts = {});

/// Flow-matching training of the latent ControlNet, teacher-forced on frozen
/// encoder grids (pooled to cfg.token_count cells).
TrainResult train_latent_controlnet(const TrainConfig& cfg, const SyntheticDataset& data,
                                    ControlNetModel& cnm, const DiffusionModel& dm,
                                    const MllmStack& stack, const PhaseOptions& opts = {});

/// Pool a native encoder grid down to `token_count` cells (64, 16, 4 or 1).
PatchGrid pool_to_count(const PatchGrid& g, int token_count);

/// Deterministic byte blob of all model outputs for a Text(/ImgU) prompt:
/// text logits plus final hidden states. Used by the invariance checks.
std::vector<double> prompt_outputs(const MllmStack& stack, const std::vector<int>& caption,
                                   const PatchGrid* img_u);

/// MAR predictor closure over the branched transformer.
GridPredictor mllm_predictor(const MllmStack& stack, std::vector<int> caption);

}  // namespace patchflow
