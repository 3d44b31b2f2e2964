#include "patchflow/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "patchflow/segments.hpp"

namespace patchflow {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_bwd(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

int ParamStore::add(const std::string& name, Tensor init, bool frozen) {
    PF_CHECK(index_.find(name) == index_.end(), "duplicate param name: " + name);
    Param p;
    p.name = name;
    p.grad = Tensor::zeros(init.shape);
    p.value = std::move(init);
    p.frozen = frozen;
    params_.push_back(std::move(p));
    const int id = static_cast<int>(params_.size()) - 1;
    index_[name] = id;
    return id;
}

int ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
}

void ParamStore::zero_grads() {
    for (auto& p : params_) std::fill(p.grad.v.begin(), p.grad.v.end(), 0.0);
}

void ParamStore::set_frozen_prefix(const std::string& prefix, bool frozen) {
    for (auto& p : params_)
        if (p.name.rfind(prefix, 0) == 0) p.frozen = frozen;
}

std::vector<int> ParamStore::ids_with_prefix(const std::string& prefix) const {
    std::vector<int> out;
    for (size_t i = 0; i < params_.size(); ++i)
        if (params_[i].name.rfind(prefix, 0) == 0) out.push_back(static_cast<int>(i));
    return out;
}

uint64_t ParamStore::checksum(const std::string& prefix) const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& p : params_) {
        if (p.name.rfind(prefix, 0) != 0) continue;
        h = fnv1a_str(p.name, h);
        h = fnv1a(p.value.v.data(), p.value.v.size() * sizeof(double), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor& Node::g() {
    if (grad.v.empty()) grad = Tensor::zeros(val.shape);
    return grad;
}

Var Tape::make(Tensor val, std::vector<Var> parents, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    if (grad_) {
        for (const auto& p : parents)
            if (p->needs_grad) n->needs_grad = true;
        if (n->needs_grad) {
            n->parents = std::move(parents);
            n->back = std::move(back);
        }
    }
    nodes_.push_back(n);
    return n;
}

Var Tape::param(ParamStore& ps, int id) {
    Param& p = ps.at(id);
    auto n = std::make_shared<Node>();
    n->val = p.value;  // copy: tape must not alias mutable storage
    if (grad_ && !p.frozen) {
        n->needs_grad = true;
        n->leaf = &p;
    }
    nodes_.push_back(n);
    return n;
}

Var Tape::constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    nodes_.push_back(n);
    return n;
}

void Tape::backward(Var loss) {
    PF_CHECK(grad_, "backward on a no-grad tape");
    PF_CHECK(loss->val.numel() == 1, "backward expects a scalar loss");
    loss->g().v[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (!n.needs_grad || !n.has_grad()) continue;
        if (n.leaf != nullptr) {
            Tensor& g = n.leaf->grad;
            for (int i = 0; i < g.numel(); ++i) g.v[static_cast<size_t>(i)] += n.grad.v[static_cast<size_t>(i)];
        } else if (n.back) {
            n.back(n);
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise / broadcast ops
// ---------------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
    PF_CHECK(a->val.same_shape(b->val), "add shape mismatch");
    Tensor out = a->val;
    for (int i = 0; i < out.numel(); ++i) out.v[static_cast<size_t>(i)] += b->val.v[static_cast<size_t>(i)];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) {
            Tensor& ga = a->g();
            for (int i = 0; i < ga.numel(); ++i) ga.v[static_cast<size_t>(i)] += n.grad.v[static_cast<size_t>(i)];
        }
        if (b->needs_grad) {
            Tensor& gb = b->g();
            for (int i = 0; i < gb.numel(); ++i) gb.v[static_cast<size_t>(i)] += n.grad.v[static_cast<size_t>(i)];
        }
    });
}

Var Tape::sub(Var a, Var b) {
    PF_CHECK(a->val.same_shape(b->val), "sub shape mismatch");
    Tensor out = a->val;
    for (int i = 0; i < out.numel(); ++i) out.v[static_cast<size_t>(i)] -= b->val.v[static_cast<size_t>(i)];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) {
            Tensor& ga = a->g();
            for (int i = 0; i < ga.numel(); ++i) ga.v[static_cast<size_t>(i)] += n.grad.v[static_cast<size_t>(i)];
        }
        if (b->needs_grad) {
            Tensor& gb = b->g();
            for (int i = 0; i < gb.numel(); ++i) gb.v[static_cast<size_t>(i)] -= n.grad.v[static_cast<size_t>(i)];
        }
    });
}

Var Tape::mul(Var a, Var b) {
    PF_CHECK(a->val.same_shape(b->val), "mul shape mismatch");
    Tensor out = a->val;
    for (int i = 0; i < out.numel(); ++i) out.v[static_cast<size_t>(i)] *= b->val.v[static_cast<size_t>(i)];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) {
            Tensor& ga = a->g();
            for (int i = 0; i < ga.numel(); ++i)
                ga.v[static_cast<size_t>(i)] += n.grad.v[static_cast<size_t>(i)] * b->val.v[static_cast<size_t>(i)];
        }
        if (b->needs_grad) {
            Tensor& gb = b->g();
            for (int i = 0; i < gb.numel(); ++i)
                gb.v[static_cast<size_t>(i)] += n.grad.v[static_cast<size_t>(i)] * a->val.v[static_cast<size_t>(i)];
        }
    });
}

Var Tape::scale(Var a, double s) {
    Tensor out = a->val;
    for (auto& x : out.v) x *= s;
    return make(std::move(out), {a}, [a, s](Node& n) {
        Tensor& ga = a->g();
        for (int i = 0; i < ga.numel(); ++i) ga.v[static_cast<size_t>(i)] += s * n.grad.v[static_cast<size_t>(i)];
    });
}

Var Tape::add_rowvec(Var x, Var b) {
    PF_CHECK(x->val.ndim() == 2 && b->val.ndim() == 1, "add_rowvec wants [n,d] + [d]");
    PF_CHECK(x->val.cols() == b->val.dim(0), "add_rowvec width mismatch");
    Tensor out = x->val;
    const int n = out.rows(), d = out.cols();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.at2(i, j) += b->val.v[static_cast<size_t>(j)];
    return make(std::move(out), {x, b}, [x, b, n, d](Node& nn) {
        if (x->needs_grad) {
            Tensor& gx = x->g();
            for (int i = 0; i < gx.numel(); ++i) gx.v[static_cast<size_t>(i)] += nn.grad.v[static_cast<size_t>(i)];
        }
        if (b->needs_grad) {
            Tensor& gb = b->g();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) gb.v[static_cast<size_t>(j)] += nn.grad.at2(i, j);
        }
    });
}

Var Tape::linear(Var x, Var w, Var b) {
    PF_CHECK(x->val.ndim() == 2 && w->val.ndim() == 2, "linear wants 2-D inputs");
    PF_CHECK(x->val.cols() == w->val.cols(),
             "linear width mismatch: " + x->val.shape_str() + " vs " + w->val.shape_str());
    Tensor out;
    matmul(x->val, false, w->val, true, out);
    std::vector<Var> parents = {x, w};
    if (b) {
        PF_CHECK(b->val.ndim() == 1 && b->val.dim(0) == w->val.rows(), "linear bias shape");
        const int n = out.rows(), d = out.cols();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) out.at2(i, j) += b->val.v[static_cast<size_t>(j)];
        parents.push_back(b);
    }
    return make(std::move(out), std::move(parents), [x, w, b](Node& n) {
        if (x->needs_grad) matmul(n.grad, false, w->val, false, x->g(), true);
        if (w->needs_grad) matmul(n.grad, true, x->val, false, w->g(), true);
        if (b && b->needs_grad) {
            Tensor& gb = b->g();
            const int rows = n.grad.rows(), d = n.grad.cols();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < d; ++j) gb.v[static_cast<size_t>(j)] += n.grad.at2(i, j);
        }
    });
}

Var Tape::matmul(Var a, Var b) {
    Tensor out;
    patchflow::matmul(a->val, false, b->val, false, out);
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) patchflow::matmul(n.grad, false, b->val, true, a->g(), true);
        if (b->needs_grad) patchflow::matmul(a->val, true, n.grad, false, b->g(), true);
    });
}

Var Tape::rmsnorm(Var x, Var gain, double eps) {
    PF_CHECK(x->val.ndim() == 2, "rmsnorm wants [n,d]");
    const int n = x->val.rows(), d = x->val.cols();
    PF_CHECK(gain->val.ndim() == 1 && gain->val.dim(0) == d, "rmsnorm gain shape");
    Tensor out({n, d});
    auto rinv = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        double ss = 0.0;
        for (int j = 0; j < d; ++j) ss += x->val.at2(i, j) * x->val.at2(i, j);
        const double r = 1.0 / std::sqrt(ss / d + eps);
        (*rinv)[static_cast<size_t>(i)] = r;
        for (int j = 0; j < d; ++j)
            out.at2(i, j) = x->val.at2(i, j) * r * gain->val.v[static_cast<size_t>(j)];
    }
    return make(std::move(out), {x, gain}, [x, gain, rinv, n, d](Node& nn) {
        for (int i = 0; i < n; ++i) {
            const double r = (*rinv)[static_cast<size_t>(i)];
            if (gain->needs_grad) {
                Tensor& gg = gain->g();
                for (int j = 0; j < d; ++j)
                    gg.v[static_cast<size_t>(j)] += nn.grad.at2(i, j) * x->val.at2(i, j) * r;
            }
            if (x->needs_grad) {
                // y_j = x_j * r * g_j, r = (mean(x^2)+eps)^-1/2
                double dot = 0.0;  // sum_j dy_j * g_j * x_j
                for (int j = 0; j < d; ++j)
                    dot += nn.grad.at2(i, j) * gain->val.v[static_cast<size_t>(j)] * x->val.at2(i, j);
                const double k = dot * r * r * r / d;
                Tensor& gx = x->g();
                for (int j = 0; j < d; ++j)
                    gx.at2(i, j) += nn.grad.at2(i, j) * gain->val.v[static_cast<size_t>(j)] * r -
                                    k * x->val.at2(i, j);
            }
        }
    });
}

Var Tape::gelu(Var x) {
    Tensor out = x->val;
    for (auto& v : out.v) v = gelu_fwd(v);
    return make(std::move(out), {x}, [x](Node& n) {
        Tensor& gx = x->g();
        for (int i = 0; i < gx.numel(); ++i)
            gx.v[static_cast<size_t>(i)] += n.grad.v[static_cast<size_t>(i)] * gelu_bwd(x->val.v[static_cast<size_t>(i)]);
    });
}

Var Tape::silu(Var x) {
    Tensor out = x->val;
    for (auto& v : out.v) v = v * sigmoid(v);
    return make(std::move(out), {x}, [x](Node& n) {
        Tensor& gx = x->g();
        for (int i = 0; i < gx.numel(); ++i) {
            const double v = x->val.v[static_cast<size_t>(i)];
            const double s = sigmoid(v);
            gx.v[static_cast<size_t>(i)] += n.grad.v[static_cast<size_t>(i)] * (s + v * s * (1.0 - s));
        }
    });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

Var Tape::split_cols(Var x, int start, int len) {
    PF_CHECK(x->val.ndim() == 2, "split_cols wants [n,d]");
    const int n = x->val.rows(), d = x->val.cols();
    PF_CHECK(start >= 0 && start + len <= d, "split_cols out of range");
    Tensor out({n, len});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < len; ++j) out.at2(i, j) = x->val.at2(i, start + j);
    return make(std::move(out), {x}, [x, start, len, n](Node& nn) {
        Tensor& gx = x->g();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < len; ++j) gx.at2(i, start + j) += nn.grad.at2(i, j);
    });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    PF_CHECK(!parts.empty(), "concat_rows of nothing");
    const int d = parts[0]->val.cols();
    int n = 0;
    for (const auto& p : parts) {
        PF_CHECK(p->val.ndim() == 2 && p->val.cols() == d, "concat_rows width mismatch");
        n += p->val.rows();
    }
    Tensor out({n, d});
    int r = 0;
    for (const auto& p : parts) {
        std::copy(p->val.v.begin(), p->val.v.end(), out.v.begin() + static_cast<long>(r) * d);
        r += p->val.rows();
    }
    auto ps = parts;
    return make(std::move(out), ps, [ps, d](Node& nn) {
        int r = 0;
        for (const auto& p : ps) {
            const int pr = p->val.rows();
            if (p->needs_grad) {
                Tensor& g = p->g();
                for (int i = 0; i < pr * d; ++i)
                    g.v[static_cast<size_t>(i)] += nn.grad.v[static_cast<size_t>(r) * d + i];
            }
            r += pr;
        }
    });
}

Var Tape::select_rows(Var x, std::vector<int> idx) {
    PF_CHECK(x->val.ndim() == 2, "select_rows wants [n,d]");
    const int d = x->val.cols();
    Tensor out({static_cast<int>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i) {
        PF_CHECK(idx[i] >= 0 && idx[i] < x->val.rows(), "select_rows index out of range");
        for (int j = 0; j < d; ++j) out.at2(static_cast<int>(i), j) = x->val.at2(idx[i], j);
    }
    auto id = std::make_shared<std::vector<int>>(std::move(idx));
    return make(std::move(out), {x}, [x, id, d](Node& nn) {
        Tensor& gx = x->g();
        for (size_t i = 0; i < id->size(); ++i)
            for (int j = 0; j < d; ++j) gx.at2((*id)[i], j) += nn.grad.at2(static_cast<int>(i), j);
    });
}

Var Tape::merge_rows(int n_rows, const std::vector<std::pair<std::vector<int>, Var>>& parts) {
    PF_CHECK(!parts.empty(), "merge_rows of nothing");
    const int d = parts[0].second->val.cols();
    Tensor out({n_rows, d});
    std::vector<uint8_t> seen(static_cast<size_t>(n_rows), 0);
    for (const auto& [idx, var] : parts) {
        PF_CHECK(static_cast<int>(idx.size()) == var->val.rows(), "merge_rows count mismatch");
        PF_CHECK(var->val.cols() == d, "merge_rows width mismatch");
        for (size_t i = 0; i < idx.size(); ++i) {
            const int r = idx[i];
            PF_CHECK(r >= 0 && r < n_rows && !seen[static_cast<size_t>(r)], "merge_rows bad/duplicate row");
            seen[static_cast<size_t>(r)] = 1;
            for (int j = 0; j < d; ++j) out.at2(r, j) = var->val.at2(static_cast<int>(i), j);
        }
    }
    for (auto s : seen) PF_CHECK(s, "merge_rows does not cover all rows");

    std::vector<Var> parents;
    auto idxs = std::make_shared<std::vector<std::vector<int>>>();
    for (const auto& [idx, var] : parts) {
        parents.push_back(var);
        idxs->push_back(idx);
    }
    return make(std::move(out), parents, [parents, idxs, d](Node& nn) {
        for (size_t k = 0; k < parents.size(); ++k) {
            if (!parents[k]->needs_grad) continue;
            Tensor& g = parents[k]->g();
            const auto& idx = (*idxs)[k];
            for (size_t i = 0; i < idx.size(); ++i)
                for (int j = 0; j < d; ++j) g.at2(static_cast<int>(i), j) += nn.grad.at2(idx[i], j);
        }
    });
}

Var Tape::map_rows(Var x, std::vector<int> src_of_out) {
    PF_CHECK(x->val.ndim() == 2, "map_rows wants [n,d]");
    const int d = x->val.cols();
    Tensor out({static_cast<int>(src_of_out.size()), d});
    for (size_t r = 0; r < src_of_out.size(); ++r) {
        const int s = src_of_out[r];
        PF_CHECK(s >= 0 && s < x->val.rows(), "map_rows index out of range");
        for (int j = 0; j < d; ++j) out.at2(static_cast<int>(r), j) = x->val.at2(s, j);
    }
    auto map = std::make_shared<std::vector<int>>(std::move(src_of_out));
    return make(std::move(out), {x}, [x, map, d](Node& nn) {
        Tensor& gx = x->g();
        for (size_t r = 0; r < map->size(); ++r)
            for (int j = 0; j < d; ++j) gx.at2((*map)[r], j) += nn.grad.at2(static_cast<int>(r), j);
    });
}

Var Tape::repeat_row(Var row, int n) {
    PF_CHECK(row->val.ndim() == 1, "repeat_row wants [d]");
    const int d = row->val.dim(0);
    Tensor out({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.at2(i, j) = row->val.v[static_cast<size_t>(j)];
    return make(std::move(out), {row}, [row, n, d](Node& nn) {
        Tensor& g = row->g();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) g.v[static_cast<size_t>(j)] += nn.grad.at2(i, j);
    });
}

Var Tape::embedding(Var table, std::vector<int> ids) {
    PF_CHECK(table->val.ndim() == 2, "embedding table wants [vocab,d]");
    const int d = table->val.cols();
    Tensor out({static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        PF_CHECK(ids[i] >= 0 && ids[i] < table->val.rows(), "embedding id out of range");
        for (int j = 0; j < d; ++j) out.at2(static_cast<int>(i), j) = table->val.at2(ids[i], j);
    }
    auto id = std::make_shared<std::vector<int>>(std::move(ids));
    return make(std::move(out), {table}, [table, id, d](Node& nn) {
        Tensor& g = table->g();
        for (size_t i = 0; i < id->size(); ++i)
            for (int j = 0; j < d; ++j) g.at2((*id)[i], j) += nn.grad.at2(static_cast<int>(i), j);
    });
}

Var Tape::affine_rows(Var x, Var scale_v, Var shift_v) {
    PF_CHECK(x->val.ndim() == 2, "affine_rows wants [n,d]");
    const int n = x->val.rows(), d = x->val.cols();
    PF_CHECK(scale_v->val.numel() == d && shift_v->val.numel() == d, "affine_rows vector shapes");
    Tensor out({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out.at2(i, j) = x->val.at2(i, j) * (1.0 + scale_v->val.v[static_cast<size_t>(j)]) +
                            shift_v->val.v[static_cast<size_t>(j)];
    return make(std::move(out), {x, scale_v, shift_v}, [x, scale_v, shift_v, n, d](Node& nn) {
        if (x->needs_grad) {
            Tensor& gx = x->g();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j)
                    gx.at2(i, j) += nn.grad.at2(i, j) * (1.0 + scale_v->val.v[static_cast<size_t>(j)]);
        }
        if (scale_v->needs_grad) {
            Tensor& gs = scale_v->g();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) gs.v[static_cast<size_t>(j)] += nn.grad.at2(i, j) * x->val.at2(i, j);
        }
        if (shift_v->needs_grad) {
            Tensor& gb = shift_v->g();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) gb.v[static_cast<size_t>(j)] += nn.grad.at2(i, j);
        }
    });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

Var Tape::attention(Var q, Var k, Var v, int heads, const AttentionMask* mask,
                    Tensor* probs_out) {
    PF_CHECK(q->val.ndim() == 2 && k->val.ndim() == 2 && v->val.ndim() == 2,
             "attention wants 2-D q/k/v");
    const int nq = q->val.rows(), d = q->val.cols();
    const int nk = k->val.rows();
    PF_CHECK(v->val.rows() == nk && k->val.cols() == d && v->val.cols() == d,
             "attention q/k/v shape mismatch");
    PF_CHECK(d % heads == 0, "attention width not divisible by head count");
    if (mask) PF_CHECK(mask->n == nq && nq == nk, "attention mask/sequence length mismatch");
    const int dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    auto probs = std::make_shared<Tensor>(Tensor({heads, nq, nk}));
    Tensor out({nq, d});
    std::vector<double> scores(static_cast<size_t>(nk));
    for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        for (int i = 0; i < nq; ++i) {
            double mx = -1e300;
            for (int j = 0; j < nk; ++j) {
                if (mask && !mask->at(i, j)) continue;
                double s = 0.0;
                for (int c = 0; c < dh; ++c) s += q->val.at2(i, off + c) * k->val.at2(j, off + c);
                s *= sc;
                scores[static_cast<size_t>(j)] = s;
                if (s > mx) mx = s;
            }
            PF_CHECK(mx > -1e299, "attention row has no allowed keys");
            double z = 0.0;
            for (int j = 0; j < nk; ++j) {
                if (mask && !mask->at(i, j)) {
                    probs->at3(h, i, j) = 0.0;
                    continue;
                }
                const double e = std::exp(scores[static_cast<size_t>(j)] - mx);
                probs->at3(h, i, j) = e;
                z += e;
            }
            const double zi = 1.0 / z;
            for (int j = 0; j < nk; ++j) probs->at3(h, i, j) *= zi;
            for (int c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (int j = 0; j < nk; ++j) acc += probs->at3(h, i, j) * v->val.at2(j, off + c);
                out.at2(i, off + c) = acc;
            }
        }
    }
    if (probs_out) *probs_out = *probs;

    return make(std::move(out), {q, k, v}, [q, k, v, probs, heads, nq, nk, dh, sc](Node& nn) {
        std::vector<double> dp(static_cast<size_t>(nk));
        for (int h = 0; h < heads; ++h) {
            const int off = h * dh;
            for (int i = 0; i < nq; ++i) {
                // dP[i,j] = dot(dO_i, V_j); dS = P .* (dP - sum_j dP*P)
                double row_dot = 0.0;
                for (int j = 0; j < nk; ++j) {
                    const double p = probs->at3(h, i, j);
                    if (p == 0.0) {
                        dp[static_cast<size_t>(j)] = 0.0;
                        continue;
                    }
                    double s = 0.0;
                    for (int c = 0; c < dh; ++c) s += nn.grad.at2(i, off + c) * v->val.at2(j, off + c);
                    dp[static_cast<size_t>(j)] = s;
                    row_dot += s * p;
                }
                for (int j = 0; j < nk; ++j) {
                    const double p = probs->at3(h, i, j);
                    if (p == 0.0) continue;
                    const double ds = p * (dp[static_cast<size_t>(j)] - row_dot) * sc;
                    if (q->needs_grad) {
                        Tensor& gq = q->g();
                        for (int c = 0; c < dh; ++c) gq.at2(i, off + c) += ds * k->val.at2(j, off + c);
                    }
                    if (k->needs_grad) {
                        Tensor& gk = k->g();
                        for (int c = 0; c < dh; ++c) gk.at2(j, off + c) += ds * q->val.at2(i, off + c);
                    }
                    if (v->needs_grad) {
                        Tensor& gv = v->g();
                        for (int c = 0; c < dh; ++c) gv.at2(j, off + c) += p * nn.grad.at2(i, off + c);
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

Var Tape::conv3x3_same(Var x, Var w, Var b) {
    PF_CHECK(x->val.ndim() == 3, "conv3x3 wants [C,H,W]");
    PF_CHECK(w->val.ndim() == 4 && w->val.dim(2) == 3 && w->val.dim(3) == 3, "conv3x3 kernel shape");
    const int ci = x->val.dim(0), hh = x->val.dim(1), ww = x->val.dim(2);
    const int co = w->val.dim(0);
    PF_CHECK(w->val.dim(1) == ci, "conv3x3 channel mismatch");
    PF_CHECK(b->val.numel() == co, "conv3x3 bias shape");

    auto wat = [&](const Tensor& t, int o, int i, int ky, int kx) -> double {
        return t.v[((static_cast<size_t>(o) * ci + i) * 3 + ky) * 3 + kx];
    };
    Tensor out({co, hh, ww});
    for (int o = 0; o < co; ++o)
        for (int y = 0; y < hh; ++y)
            for (int x2 = 0; x2 < ww; ++x2) {
                double acc = b->val.v[static_cast<size_t>(o)];
                for (int i = 0; i < ci; ++i)
                    for (int ky = 0; ky < 3; ++ky) {
                        const int sy = y + ky - 1;
                        if (sy < 0 || sy >= hh) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int sx = x2 + kx - 1;
                            if (sx < 0 || sx >= ww) continue;
                            acc += wat(w->val, o, i, ky, kx) * x->val.at3(i, sy, sx);
                        }
                    }
                out.at3(o, y, x2) = acc;
            }
    return make(std::move(out), {x, w, b}, [x, w, b, ci, co, hh, ww, wat](Node& nn) {
        for (int o = 0; o < co; ++o)
            for (int y = 0; y < hh; ++y)
                for (int x2 = 0; x2 < ww; ++x2) {
                    const double go = nn.grad.at3(o, y, x2);
                    if (go == 0.0) continue;
                    if (b->needs_grad) b->g().v[static_cast<size_t>(o)] += go;
                    for (int i = 0; i < ci; ++i)
                        for (int ky = 0; ky < 3; ++ky) {
                            const int sy = y + ky - 1;
                            if (sy < 0 || sy >= hh) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sx = x2 + kx - 1;
                                if (sx < 0 || sx >= ww) continue;
                                if (w->needs_grad)
                                    w->g().v[((static_cast<size_t>(o) * ci + i) * 3 + ky) * 3 + kx] +=
                                        go * x->val.at3(i, sy, sx);
                                if (x->needs_grad)
                                    x->g().at3(i, sy, sx) += go * wat(w->val, o, i, ky, kx);
                            }
                        }
                }
    });
}

Var Tape::conv2x2_s2(Var x, Var w, Var b) {
    PF_CHECK(x->val.ndim() == 3, "conv2x2 wants [C,H,W]");
    const int ci = x->val.dim(0), hh = x->val.dim(1), ww = x->val.dim(2);
    PF_CHECK(hh % 2 == 0 && ww % 2 == 0, "conv2x2_s2 needs even spatial dims");
    PF_CHECK(w->val.ndim() == 4 && w->val.dim(1) == ci && w->val.dim(2) == 2 && w->val.dim(3) == 2,
             "conv2x2 kernel shape");
    const int co = w->val.dim(0);
    PF_CHECK(b->val.numel() == co, "conv2x2 bias shape");
    const int ho = hh / 2, wo = ww / 2;

    auto wat = [&](const Tensor& t, int o, int i, int ky, int kx) -> double {
        return t.v[((static_cast<size_t>(o) * ci + i) * 2 + ky) * 2 + kx];
    };
    Tensor out({co, ho, wo});
    for (int o = 0; o < co; ++o)
        for (int y = 0; y < ho; ++y)
            for (int x2 = 0; x2 < wo; ++x2) {
                double acc = b->val.v[static_cast<size_t>(o)];
                for (int i = 0; i < ci; ++i)
                    for (int ky = 0; ky < 2; ++ky)
                        for (int kx = 0; kx < 2; ++kx)
                            acc += wat(w->val, o, i, ky, kx) * x->val.at3(i, 2 * y + ky, 2 * x2 + kx);
                out.at3(o, y, x2) = acc;
            }
    return make(std::move(out), {x, w, b}, [x, w, b, ci, co, ho, wo, wat](Node& nn) {
        for (int o = 0; o < co; ++o)
            for (int y = 0; y < ho; ++y)
                for (int x2 = 0; x2 < wo; ++x2) {
                    const double go = nn.grad.at3(o, y, x2);
                    if (go == 0.0) continue;
                    if (b->needs_grad) b->g().v[static_cast<size_t>(o)] += go;
                    for (int i = 0; i < ci; ++i)
                        for (int ky = 0; ky < 2; ++ky)
                            for (int kx = 0; kx < 2; ++kx) {
                                if (w->needs_grad)
                                    w->g().v[((static_cast<size_t>(o) * ci + i) * 2 + ky) * 2 + kx] +=
                                        go * x->val.at3(i, 2 * y + ky, 2 * x2 + kx);
                                if (x->needs_grad)
                                    x->g().at3(i, 2 * y + ky, 2 * x2 + kx) += go * wat(w->val, o, i, ky, kx);
                            }
                }
    });
}

Var Tape::reshape(Var x, std::vector<int> shape) {
    PF_CHECK(Tensor::numel_of(shape) == x->val.numel(), "reshape element count mismatch");
    Tensor out;
    out.shape = shape;
    out.v = x->val.v;
    return make(std::move(out), {x}, [x](Node& nn) {
        Tensor& gx = x->g();
        for (int i = 0; i < gx.numel(); ++i) gx.v[static_cast<size_t>(i)] += nn.grad.v[static_cast<size_t>(i)];
    });
}

Var Tape::add_rows_at(Var big, Var delta, int start) {
    PF_CHECK(big->val.ndim() == 2 && delta->val.ndim() == 2, "add_rows_at wants 2-D tensors");
    PF_CHECK(big->val.cols() == delta->val.cols(), "add_rows_at width mismatch");
    PF_CHECK(start >= 0 && start + delta->val.rows() <= big->val.rows(), "add_rows_at range");
    Tensor out = big->val;
    const int d = out.cols(), dr = delta->val.rows();
    for (int i = 0; i < dr; ++i)
        for (int j = 0; j < d; ++j) out.at2(start + i, j) += delta->val.at2(i, j);
    return make(std::move(out), {big, delta}, [big, delta, start, d, dr](Node& nn) {
        if (big->needs_grad) {
            Tensor& g = big->g();
            for (int i = 0; i < g.numel(); ++i) g.v[static_cast<size_t>(i)] += nn.grad.v[static_cast<size_t>(i)];
        }
        if (delta->needs_grad) {
            Tensor& g = delta->g();
            for (int i = 0; i < dr; ++i)
                for (int j = 0; j < d; ++j) g.at2(i, j) += nn.grad.at2(start + i, j);
        }
    });
}

Var Tape::rows_to_chw(Var x, int h, int w) {
    PF_CHECK(x->val.ndim() == 2 && x->val.rows() == h * w, "rows_to_chw shape mismatch");
    const int d = x->val.cols();
    Tensor out({d, h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < d; ++c) out.at3(c, i, j) = x->val.at2(i * w + j, c);
    return make(std::move(out), {x}, [x, h, w, d](Node& nn) {
        Tensor& gx = x->g();
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                for (int c = 0; c < d; ++c) gx.at2(i * w + j, c) += nn.grad.at3(c, i, j);
    });
}

Var Tape::chw_to_rows(Var x) {
    PF_CHECK(x->val.ndim() == 3, "chw_to_rows wants [d,h,w]");
    const int d = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    Tensor out({h * w, d});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < d; ++c) out.at2(i * w + j, c) = x->val.at3(c, i, j);
    return make(std::move(out), {x}, [x, h, w, d](Node& nn) {
        Tensor& gx = x->g();
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                for (int c = 0; c < d; ++c) gx.at3(c, i, j) += nn.grad.at2(i * w + j, c);
    });
}

// ---------------------------------------------------------------------------
// Reductions / losses
// ---------------------------------------------------------------------------

Var Tape::mean_all(Var x) {
    const int n = x->val.numel();
    double s = 0.0;
    for (double e : x->val.v) s += e;
    return make(Tensor::scalar(s / n), {x}, [x, n](Node& nn) {
        const double g = nn.grad.v[0] / n;
        Tensor& gx = x->g();
        for (auto& e : gx.v) e += g;
    });
}

Var Tape::mse(Var a, Var b) {
    PF_CHECK(a->val.same_shape(b->val), "mse shape mismatch");
    const int n = a->val.numel();
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = a->val.v[static_cast<size_t>(i)] - b->val.v[static_cast<size_t>(i)];
        s += d * d;
    }
    return make(Tensor::scalar(s / n), {a, b}, [a, b, n](Node& nn) {
        const double g = 2.0 * nn.grad.v[0] / n;
        for (int i = 0; i < n; ++i) {
            const double d = a->val.v[static_cast<size_t>(i)] - b->val.v[static_cast<size_t>(i)];
            if (a->needs_grad) a->g().v[static_cast<size_t>(i)] += g * d;
            if (b->needs_grad) b->g().v[static_cast<size_t>(i)] -= g * d;
        }
    });
}

Var Tape::masked_row_mse(Var pred, Var target, const std::vector<uint8_t>& row_mask) {
    PF_CHECK(pred->val.same_shape(target->val), "masked_row_mse shape mismatch");
    PF_CHECK(pred->val.ndim() == 2, "masked_row_mse wants [n,d]");
    const int n = pred->val.rows(), d = pred->val.cols();
    PF_CHECK(static_cast<int>(row_mask.size()) == n, "masked_row_mse mask length");
    int m = 0;
    for (auto b : row_mask) m += b ? 1 : 0;
    PF_CHECK(m > 0, "masked_row_mse with empty mask");
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        if (!row_mask[static_cast<size_t>(i)]) continue;
        for (int j = 0; j < d; ++j) {
            const double e = pred->val.at2(i, j) - target->val.at2(i, j);
            s += e * e;
        }
    }
    const double denom = static_cast<double>(m) * d;
    auto mask = std::make_shared<std::vector<uint8_t>>(row_mask);
    return make(Tensor::scalar(s / denom), {pred, target}, [pred, target, mask, n, d, denom](Node& nn) {
        const double g = 2.0 * nn.grad.v[0] / denom;
        for (int i = 0; i < n; ++i) {
            if (!(*mask)[static_cast<size_t>(i)]) continue;
            for (int j = 0; j < d; ++j) {
                const double e = pred->val.at2(i, j) - target->val.at2(i, j);
                if (pred->needs_grad) pred->g().at2(i, j) += g * e;
                if (target->needs_grad) target->g().at2(i, j) -= g * e;
            }
        }
    });
}

Var Tape::cross_entropy_rows(Var logits, const std::vector<int>& targets) {
    PF_CHECK(logits->val.ndim() == 2, "cross_entropy wants [n,vocab]");
    const int n = logits->val.rows(), vsz = logits->val.cols();
    PF_CHECK(static_cast<int>(targets.size()) == n, "cross_entropy target length");
    auto probs = std::make_shared<Tensor>(Tensor({n, vsz}));
    int counted = 0;
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        if (targets[static_cast<size_t>(i)] < 0) continue;
        ++counted;
        double mx = -1e300;
        for (int j = 0; j < vsz; ++j) mx = std::max(mx, logits->val.at2(i, j));
        double z = 0.0;
        for (int j = 0; j < vsz; ++j) {
            const double e = std::exp(logits->val.at2(i, j) - mx);
            probs->at2(i, j) = e;
            z += e;
        }
        for (int j = 0; j < vsz; ++j) probs->at2(i, j) /= z;
        loss -= std::log(std::max(probs->at2(i, targets[static_cast<size_t>(i)]), 1e-300));
    }
    PF_CHECK(counted > 0, "cross_entropy with no targets");
    loss /= counted;
    auto tg = std::make_shared<std::vector<int>>(targets);
    return make(Tensor::scalar(loss), {logits}, [logits, probs, tg, n, vsz, counted](Node& nn) {
        const double g = nn.grad.v[0] / counted;
        Tensor& gl = logits->g();
        for (int i = 0; i < n; ++i) {
            const int t = (*tg)[static_cast<size_t>(i)];
            if (t < 0) continue;
            for (int j = 0; j < vsz; ++j)
                gl.at2(i, j) += g * (probs->at2(i, j) - (j == t ? 1.0 : 0.0));
        }
    });
}

}  // namespace patchflow
