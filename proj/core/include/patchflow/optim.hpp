#pragma once

#include <functional>
#include <vector>

#include "patchflow/autograd.hpp"
#include "patchflow/checkpoint.hpp"
#include "patchflow/rng.hpp"

namespace patchflow {

/// Plain Adam, fixed learning rate, no schedule. Registering a frozen tensor
/// is a hard error; frozen params therefore can never be updated through it.
class Adam {
public:
    Adam(ParamStore& ps, std::vector<int> param_ids, double lr, double beta1 = 0.9,
         double beta2 = 0.999, double eps = 1e-8);

    void step();
    void zero_grad();
    int64_t steps_taken() const { return t_; }

    void append_state(CheckpointData& data, const std::string& prefix) const;
    void restore_state(const CheckpointData& data, const std::string& prefix);

private:
    ParamStore* ps_;
    std::vector<int> ids_;
    std::vector<Tensor> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

struct FdReport {
    double max_rel_err = 0.0;
    int entries_checked = 0;
};

/// Central finite-difference check of analytic gradients over a random subset
/// of entries of the given params. `loss_fn(true)` must zero grads, run the
/// backward pass and return the loss; `loss_fn(false)` must only return the
/// loss. Relative error uses denominator max(|analytic|, |numeric|, 1e-6).
FdReport finite_difference_check(const std::function<double(bool)>& loss_fn, ParamStore& ps,
                                 const std::vector<int>& ids, int entries_per_param,
                                 double step, Rng& rng);

}  // namespace patchflow
