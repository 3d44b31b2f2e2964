#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "patchflow/tensor.hpp"

namespace patchflow {

/// A named model tensor. `frozen` tensors never accumulate gradients and are
/// rejected by optimizers; training code verifies this with checksums.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool frozen = false;
};

class ParamStore {
public:
    int add(const std::string& name, Tensor init, bool frozen = false);
    Param& at(int id) { return params_[static_cast<size_t>(id)]; }
    const Param& at(int id) const { return params_[static_cast<size_t>(id)]; }
    int find(const std::string& name) const;  // -1 when absent
    int size() const { return static_cast<int>(params_.size()); }

    void zero_grads();
    void set_frozen(int id, bool frozen) { params_[static_cast<size_t>(id)].frozen = frozen; }
    void set_frozen_prefix(const std::string& prefix, bool frozen);
    std::vector<int> ids_with_prefix(const std::string& prefix) const;

    /// Checksum over values of all params whose name starts with `prefix`,
    /// in registration order.
    uint64_t checksum(const std::string& prefix = "") const;

private:
    std::deque<Param> params_;  // deque: stable addresses for leaf nodes
    std::unordered_map<std::string, int> index_;
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // allocated lazily on first contribution
    bool needs_grad = false;
    Param* leaf = nullptr;
    std::vector<Var> parents;
    std::function<void(Node&)> back;

    Tensor& g();
    bool has_grad() const { return !grad.v.empty(); }
};

struct AttentionMask;  // segments.hpp

/// Reverse-mode tape. One tape per forward pass; `backward` walks nodes in
/// reverse creation order and accumulates into non-frozen Param grads.
/// Construct with grad_enabled=false for inference (no closures, no parents).
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_(grad_enabled) {}

    bool grad_enabled() const { return grad_; }
    size_t node_count() const { return nodes_.size(); }

    Var param(ParamStore& ps, int id);
    Var constant(Tensor t);

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_rowvec(Var x, Var b);   // [n,d] + [d]
    Var linear(Var x, Var w, Var b);  // x:[n,din] w:[dout,din] b:[dout] (b may be null)
    Var matmul(Var a, Var b);
    Var rmsnorm(Var x, Var gain, double eps = 1e-6);
    Var gelu(Var x);
    Var silu(Var x);
    Var split_cols(Var x, int start, int len);
    Var concat_rows(const std::vector<Var>& parts);
    Var select_rows(Var x, std::vector<int> idx);
    /// Inverse of a partition into row subsets: out[idx[k][i]] = parts[k][i].
    Var merge_rows(int n_rows, const std::vector<std::pair<std::vector<int>, Var>>& parts);
    /// out[r] = x[src_of_out[r]]; rows may repeat (nearest-neighbour upsampling).
    Var map_rows(Var x, std::vector<int> src_of_out);
    Var repeat_row(Var row, int n);  // [d] -> [n,d]
    Var embedding(Var table, std::vector<int> ids);
    /// x * (1 + scale) + shift with [d] vectors broadcast over rows.
    Var affine_rows(Var x, Var scale, Var shift);

    /// Multi-head attention. q: [nq, d]; k,v: [nk, d]; mask: nullptr = full
    /// attention (required shape nq x nk otherwise). Disallowed keys get
    /// probability exactly 0. `probs_out` (tests only) receives the
    /// [heads, nq, nk] probability tensor.
    Var attention(Var q, Var k, Var v, int heads, const AttentionMask* mask,
                  Tensor* probs_out = nullptr);

    Var reshape(Var x, std::vector<int> shape);
    /// out = big; out[start .. start+delta.rows) += delta (2-D, same width).
    Var add_rows_at(Var big, Var delta, int start);

    Var conv3x3_same(Var x, Var w, Var b);  // x:[C,H,W] w:[Cout,Cin,3,3]
    Var conv2x2_s2(Var x, Var w, Var b);    // x:[C,H,W] -> [Cout,H/2,W/2]

    /// [h*w, d] raster token rows -> [d, h, w] grid layout and back.
    Var rows_to_chw(Var x, int h, int w);
    Var chw_to_rows(Var x);

    Var mean_all(Var x);
    Var mse(Var a, Var b);
    /// Mean squared error over masked rows only; rows are grid cells.
    Var masked_row_mse(Var pred, Var target, const std::vector<uint8_t>& row_mask);
    /// Mean cross entropy of logit rows against integer targets (-1 = skip row).
    Var cross_entropy_rows(Var logits, const std::vector<int>& targets);

    void backward(Var loss);

private:
    Var make(Tensor val, std::vector<Var> parents, std::function<void(Node&)> back);

    std::vector<Var> nodes_;
    bool grad_;
};

}  // namespace patchflow
