#include "patchflow/mar.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

namespace patchflow {

double MaskRatioSampler::sample() {
    return truncated_normal(rng, mean, stddev, lo, hi);
}

std::vector<int> sample_training_mask(Rng& rng, int n_tokens, double ratio) {
    PF_CHECK(n_tokens > 0, "sample_training_mask needs n_tokens > 0");
    PF_CHECK(ratio > 0.0 && ratio <= 1.0, "mask ratio out of (0,1]");
    int count = static_cast<int>(std::lround(ratio * n_tokens));
    count = std::max(1, std::min(n_tokens, count));
    std::vector<int> perm = rng.permutation(n_tokens);
    perm.resize(static_cast<size_t>(count));
    std::sort(perm.begin(), perm.end());
    return perm;
}

double masked_mse_loss(const PatchGrid& pred, const PatchGrid& target,
                       const std::vector<int>& mask_set) {
    PF_CHECK(pred.d == target.d && pred.h == target.h && pred.w == target.w,
             "masked_mse_loss shape mismatch");
    PF_CHECK(!mask_set.empty(), "masked_mse_loss with empty mask set");
    double s = 0.0;
    for (int idx : mask_set) {
        PF_CHECK(idx >= 0 && idx < pred.cells(), "mask index out of range");
        const int i = idx / pred.w, j = idx % pred.w;
        for (int c = 0; c < pred.d; ++c) {
            const double e = pred.at(c, i, j) - target.at(c, i, j);
            s += e * e;
        }
    }
    return s / (static_cast<double>(mask_set.size()) * pred.d);
}

int InferenceSchedule::total() const {
    int n = 0;
    for (const auto& s : steps) n += static_cast<int>(s.size());
    return n;
}

void InferenceSchedule::validate(int n_tokens) const {
    PF_CHECK(!steps.empty(), "schedule has no steps");
    std::vector<uint8_t> seen(static_cast<size_t>(n_tokens), 0);
    for (const auto& s : steps) {
        PF_CHECK(!s.empty(), "schedule step is empty");
        for (int idx : s) {
            PF_CHECK(idx >= 0 && idx < n_tokens, "schedule index out of range");
            PF_CHECK(!seen[static_cast<size_t>(idx)], "schedule index repeated");
            seen[static_cast<size_t>(idx)] = 1;
        }
    }
    for (auto v : seen) PF_CHECK(v, "schedule does not cover all tokens");
}

std::string InferenceSchedule::to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : steps) j.push_back(s);
    return j.dump();
}

InferenceSchedule InferenceSchedule::from_json(const std::string& s) {
    InferenceSchedule sched;
    const auto j = nlohmann::json::parse(s);
    for (const auto& arr : j) sched.steps.push_back(arr.get<std::vector<int>>());
    return sched;
}

/// Cosine step sizes. Real-valued increments n*(cos(pi/2*k/K) - cos(pi/2*(k+1)/K))
/// are strictly increasing; flooring keeps them nondecreasing, the remainder is
/// distributed over the largest steps, and a final repair lifts zero-sized
/// steps while preserving monotonicity and the total.
InferenceSchedule build_inference_schedule(Rng& rng, int n_tokens, int k_steps) {
    PF_CHECK(n_tokens > 0, "schedule needs tokens");
    PF_CHECK(k_steps >= 1 && k_steps <= n_tokens, "step count K out of range");

    std::vector<int> sizes(static_cast<size_t>(k_steps));
    int assigned = 0;
    for (int k = 0; k < k_steps; ++k) {
        const double a = std::cos(std::numbers::pi / 2.0 * k / k_steps);
        const double b = std::cos(std::numbers::pi / 2.0 * (k + 1) / k_steps);
        sizes[static_cast<size_t>(k)] = static_cast<int>(std::floor(n_tokens * (a - b)));
        assigned += sizes[static_cast<size_t>(k)];
    }
    int deficit = n_tokens - assigned;  // in [0, K)
    for (int k = k_steps - deficit; k < k_steps; ++k) sizes[static_cast<size_t>(k)] += 1;

    // lift the zero-size prefix to 1 each, then drain the excess from the
    // first occurrence of the current maximum (keeps sizes nondecreasing)
    int zeros = 0;
    while (zeros < k_steps && sizes[static_cast<size_t>(zeros)] == 0) ++zeros;
    for (int k = 0; k < zeros; ++k) sizes[static_cast<size_t>(k)] = 1;
    for (int excess = zeros; excess > 0; --excess) {
        const int mx = *std::max_element(sizes.begin(), sizes.end());
        for (auto& s : sizes)
            if (s == mx) {
                s -= 1;
                break;
            }
    }

    const std::vector<int> perm = rng.permutation(n_tokens);
    InferenceSchedule sched;
    int at = 0;
    for (int k = 0; k < k_steps; ++k) {
        std::vector<int> step(perm.begin() + at, perm.begin() + at + sizes[static_cast<size_t>(k)]);
        at += sizes[static_cast<size_t>(k)];
        sched.steps.push_back(std::move(step));
    }
    sched.validate(n_tokens);
    return sched;
}

PatchGrid mar_generate(const GridPredictor& predict, int d, int h, int w,
                       const Tensor& mask_embedding, const InferenceSchedule& schedule,
                       std::vector<MarTraceStep>* trace) {
    PF_CHECK(mask_embedding.numel() == d, "mask embedding width mismatch");
    PF_CHECK(schedule.total() == h * w, "schedule/grid size mismatch");
    schedule.validate(h * w);

    PatchGrid current = PatchGrid::zeros(d, h, w);
    std::vector<uint8_t> masked(static_cast<size_t>(h * w), 1);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < d; ++c) current.at(c, i, j) = mask_embedding.v[static_cast<size_t>(c)];

    for (const auto& step : schedule.steps) {
        const PatchGrid pred = predict(current, masked);
        PF_CHECK(pred.d == d && pred.h == h && pred.w == w, "predictor returned wrong shape");
        MarTraceStep ts;
        for (int idx : step) {
            PF_CHECK(masked[static_cast<size_t>(idx)], "schedule revisits an unmasked cell");
            const int i = idx / w, j = idx % w;
            for (int c = 0; c < d; ++c) current.at(c, i, j) = pred.at(c, i, j);
            masked[static_cast<size_t>(idx)] = 0;
            ts.unmasked.push_back(idx);
        }
        if (trace) trace->push_back(std::move(ts));
    }
    for (auto m : masked) PF_CHECK(!m, "cells left masked after schedule");
    return current;
}

}  // namespace patchflow
