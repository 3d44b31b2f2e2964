#pragma once

#include <functional>
#include <string>
#include <vector>

#include "patchflow/grid.hpp"
#include "patchflow/rng.hpp"

namespace patchflow {

/// Truncated-normal mask ratio: N(1.0, 0.25^2) rejection-sampled into
/// [0.7, 1.0]. sigma = 0 is the degenerate sanity mode (all samples clamp(mu)).
struct MaskRatioSampler {
    double mean = 1.0;
    double stddev = 0.25;
    double lo = 0.7;
    double hi = 1.0;
    Rng rng;

    explicit MaskRatioSampler(uint64_t seed) : rng(seed) {}
    MaskRatioSampler(uint64_t seed, double mean, double stddev, double lo, double hi)
        : mean(mean), stddev(stddev), lo(lo), hi(hi), rng(seed) {}

    double sample();
};

/// Uniformly random size-round(ratio*n) subset of {0..n-1}, at least 1 index.
std::vector<int> sample_training_mask(Rng& rng, int n_tokens, double ratio);

/// Mean over masked cells and channels of squared error; unmasked cells
/// contribute nothing.
double masked_mse_loss(const PatchGrid& pred, const PatchGrid& target,
                       const std::vector<int>& mask_set);

/// Ordered partition of {0..n-1} into K disjoint unmask steps.
struct InferenceSchedule {
    std::vector<std::vector<int>> steps;

    int total() const;
    void validate(int n_tokens) const;
    std::string to_json() const;
    static InferenceSchedule from_json(const std::string& s);
};

/// Random-order schedule with cosine-shaped step sizes: few tokens early,
/// many late; sizes nondecreasing, each >= 1, summing to n_tokens.
InferenceSchedule build_inference_schedule(Rng& rng, int n_tokens, int k_steps);

/// Predictor: given the current grid and the mask plane (true = still masked),
/// return a full prediction grid. The MLLM wrapper lives in train.hpp; tests
/// may pass toy closures.
using GridPredictor =
    std::function<PatchGrid(const PatchGrid& current, const std::vector<uint8_t>& mask_plane)>;

struct MarTraceStep {
    std::vector<int> unmasked;  // cells written this step
};

/// Iterative unmasking: start fully masked, run K predictor passes, commit the
/// scheduled cells after each pass. Returns the fully unmasked grid.
PatchGrid mar_generate(const GridPredictor& predict, int d, int h, int w,
                       const Tensor& mask_embedding, const InferenceSchedule& schedule,
                       std::vector<MarTraceStep>* trace = nullptr);

}  // namespace patchflow
