#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "patchflow/autograd.hpp"
#include "patchflow/tensor.hpp"

namespace patchflow {

struct NamedTensor {
    std::string name;
    bool frozen = false;
    Tensor t;
};

/// Named-tensor container with a config snapshot, step counter and RNG states.
/// Saving and restoring one mid-run reproduces the training trajectory
/// bit-for-bit (optimizer state rides along as opt.* tensors).
struct CheckpointData {
    std::string config_json;
    uint64_t step = 0;
    std::vector<std::pair<std::string, std::string>> rng_states;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
};

// Binary layout (little-endian):
//   "PFCK", u32 version=1,
//   u32 config length + bytes, u64 step,
//   u32 rng count, each { u32 len + name, u32 len + state },
//   u32 tensor count, each { u32 len + name, u8 frozen, u32 ndim, u32 dims[],
//                            f64 data[] }.
void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

/// Snapshot every param of a store, preserving order and frozen flags.
void append_store(CheckpointData& data, const ParamStore& ps, const std::string& prefix = "");
/// Restore values and frozen flags into an existing store by name; every store
/// param prefixed with `prefix` must be present in the checkpoint.
void restore_store(const CheckpointData& data, ParamStore& ps, const std::string& prefix = "");

}  // namespace patchflow
