#include "patchflow/optim.hpp"

#include <algorithm>
#include <cmath>

namespace patchflow {

Adam::Adam(ParamStore& ps, std::vector<int> param_ids, double lr, double beta1, double beta2,
           double eps)
    : ps_(&ps), ids_(std::move(param_ids)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (int id : ids_) {
        const Param& p = ps_->at(id);
        PF_CHECK(!p.frozen, "optimizer refuses frozen tensor: " + p.name);
        m_.push_back(Tensor::zeros(p.value.shape));
        v_.push_back(Tensor::zeros(p.value.shape));
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t k = 0; k < ids_.size(); ++k) {
        Param& p = ps_->at(ids_[k]);
        PF_CHECK(!p.frozen, "optimizer refuses frozen tensor: " + p.name);
        Tensor& m = m_[k];
        Tensor& v = v_[k];
        for (int i = 0; i < p.value.numel(); ++i) {
            const double g = p.grad.v[static_cast<size_t>(i)];
            m.v[static_cast<size_t>(i)] = beta1_ * m.v[static_cast<size_t>(i)] + (1.0 - beta1_) * g;
            v.v[static_cast<size_t>(i)] = beta2_ * v.v[static_cast<size_t>(i)] + (1.0 - beta2_) * g * g;
            const double mh = m.v[static_cast<size_t>(i)] / bc1;
            const double vh = v.v[static_cast<size_t>(i)] / bc2;
            p.value.v[static_cast<size_t>(i)] -= lr_ * mh / (std::sqrt(vh) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (int id : ids_) {
        Param& p = ps_->at(id);
        std::fill(p.grad.v.begin(), p.grad.v.end(), 0.0);
    }
}

void Adam::append_state(CheckpointData& data, const std::string& prefix) const {
    Tensor tt({1});
    tt.v[0] = static_cast<double>(t_);
    data.tensors.push_back({prefix + ".t", false, tt});
    for (size_t k = 0; k < ids_.size(); ++k) {
        const std::string& name = ps_->at(ids_[k]).name;
        data.tensors.push_back({prefix + ".m." + name, false, m_[k]});
        data.tensors.push_back({prefix + ".v." + name, false, v_[k]});
    }
}

void Adam::restore_state(const CheckpointData& data, const std::string& prefix) {
    const NamedTensor* tt = data.find(prefix + ".t");
    PF_CHECK(tt != nullptr, "checkpoint missing optimizer step counter");
    t_ = static_cast<int64_t>(tt->t.v[0]);
    for (size_t k = 0; k < ids_.size(); ++k) {
        const std::string& name = ps_->at(ids_[k]).name;
        const NamedTensor* m = data.find(prefix + ".m." + name);
        const NamedTensor* v = data.find(prefix + ".v." + name);
        PF_CHECK(m != nullptr && v != nullptr, "checkpoint missing optimizer state for " + name);
        m_[k] = m->t;
        v_[k] = v->t;
    }
}

FdReport finite_difference_check(const std::function<double(bool)>& loss_fn, ParamStore& ps,
                                 const std::vector<int>& ids, int entries_per_param,
                                 double step, Rng& rng) {
    loss_fn(true);  // populate analytic grads
    // snapshot grads: later loss_fn(false) calls must not rely on them
    std::vector<Tensor> analytic;
    analytic.reserve(ids.size());
    for (int id : ids) analytic.push_back(ps.at(id).grad);

    FdReport report;
    for (size_t k = 0; k < ids.size(); ++k) {
        Param& p = ps.at(ids[k]);
        const int n = p.value.numel();
        const int checks = std::min(entries_per_param, n);
        for (int c = 0; c < checks; ++c) {
            const int i = (checks == n) ? c : rng.uniform_int(n);
            const double orig = p.value.v[static_cast<size_t>(i)];
            p.value.v[static_cast<size_t>(i)] = orig + step;
            const double lp = loss_fn(false);
            p.value.v[static_cast<size_t>(i)] = orig - step;
            const double lm = loss_fn(false);
            p.value.v[static_cast<size_t>(i)] = orig;
            const double fd = (lp - lm) / (2.0 * step);
            const double an = analytic[k].v[static_cast<size_t>(i)];
            const double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
            report.max_rel_err = std::max(report.max_rel_err, std::abs(an - fd) / denom);
            ++report.entries_checked;
        }
    }
    return report;
}

}  // namespace patchflow
