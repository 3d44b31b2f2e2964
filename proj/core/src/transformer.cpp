#include "patchflow/transformer.hpp"

#include <cmath>

namespace patchflow {

namespace {

Tensor gaussian_init(Rng& rng, std::vector<int> shape, double stddev) {
    Tensor t(std::move(shape));
    rng.fill_gaussian(t, stddev);
    return t;
}

BlockParamIds create_block(ParamStore& ps, const MllmConfig& cfg, const std::string& prefix,
                           Rng* rng) {
    const int d = cfg.d, hid = cfg.mlp_hidden();
    auto init = [&](std::vector<int> shape, double stddev) {
        return rng ? gaussian_init(*rng, std::move(shape), stddev) : Tensor(std::move(shape));
    };
    const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double s_h = 1.0 / std::sqrt(static_cast<double>(hid));
    BlockParamIds b;
    b.norm1 = ps.add(prefix + ".norm1", Tensor::full({d}, rng ? 1.0 : 0.0));
    b.wqkv = ps.add(prefix + ".wqkv", init({3 * d, d}, s_d));
    b.bqkv = ps.add(prefix + ".bqkv", Tensor({3 * d}));
    b.wo = ps.add(prefix + ".wo", init({d, d}, s_d));
    b.bo = ps.add(prefix + ".bo", Tensor({d}));
    b.norm2 = ps.add(prefix + ".norm2", Tensor::full({d}, rng ? 1.0 : 0.0));
    b.w1 = ps.add(prefix + ".w1", init({hid, d}, s_d));
    b.b1 = ps.add(prefix + ".b1", Tensor({hid}));
    b.w2 = ps.add(prefix + ".w2", init({d, hid}, s_h));
    b.b2 = ps.add(prefix + ".b2", Tensor({d}));
    return b;
}

void copy_param(ParamStore& ps, int src, int dst) {
    PF_CHECK(ps.at(src).value.same_shape(ps.at(dst).value), "branch copy shape mismatch");
    ps.at(dst).value = ps.at(src).value;
}

}  // namespace

MllmParams MllmParams::create(ParamStore& ps, const MllmConfig& cfg, Rng& rng) {
    MllmParams p;
    p.cfg = cfg;
    p.ps = &ps;
    p.tok_emb = ps.add("base.tok_emb", gaussian_init(rng, {cfg.vocab, cfg.d}, 0.1));
    p.text_pos = ps.add("base.text_pos", gaussian_init(rng, {cfg.text_len, cfg.d}, 0.1));
    for (int l = 0; l < cfg.layers; ++l)
        p.base.push_back(create_block(ps, cfg, "base.blocks." + std::to_string(l), &rng));
    p.base_final_norm = ps.add("base.final_norm", Tensor::full({cfg.d}, 1.0));
    const double s_d = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    p.text_head_w = ps.add("base.text_head.w", gaussian_init(rng, {cfg.vocab, cfg.d}, s_d));
    p.text_head_b = ps.add("base.text_head.b", Tensor({cfg.vocab}));

    // gen branch allocated with matching shapes, filled by init_generation_branch
    for (int l = 0; l < cfg.layers; ++l)
        p.gen.push_back(create_block(ps, cfg, "gen.blocks." + std::to_string(l), nullptr));
    p.gen_final_norm = ps.add("gen.final_norm", Tensor({cfg.d}));
    p.vision_head_w = ps.add("gen.vision_head.w", Tensor({cfg.d, cfg.d}));
    p.vision_head_b = ps.add("gen.vision_head.b", Tensor({cfg.d}));
    return p;
}

void init_generation_branch(MllmParams& p, Rng& rng) {
    ParamStore& ps = *p.ps;
    for (size_t l = 0; l < p.base.size(); ++l) {
        const BlockParamIds& a = p.base[l];
        const BlockParamIds& b = p.gen[l];
        copy_param(ps, a.norm1, b.norm1);
        copy_param(ps, a.wqkv, b.wqkv);
        copy_param(ps, a.bqkv, b.bqkv);
        copy_param(ps, a.wo, b.wo);
        copy_param(ps, a.bo, b.bo);
        copy_param(ps, a.norm2, b.norm2);
        copy_param(ps, a.w1, b.w1);
        copy_param(ps, a.b1, b.b1);
        copy_param(ps, a.w2, b.w2);
        copy_param(ps, a.b2, b.b2);
    }
    copy_param(ps, p.base_final_norm, p.gen_final_norm);
    Tensor w({p.cfg.d, p.cfg.d});
    rng.fill_gaussian(w, 1.0 / std::sqrt(static_cast<double>(p.cfg.d)));
    ps.at(p.vision_head_w).value = std::move(w);
    ps.at(p.vision_head_b).value = Tensor({p.cfg.d});
}

std::vector<int> positions_of(const std::vector<Segment>& segments, bool img_g) {
    std::vector<int> out;
    for (const auto& s : segments) {
        const bool is_g = s.modality == Modality::ImgG;
        if (is_g != img_g) continue;
        for (int t = s.start; t < s.start + s.length; ++t) out.push_back(t);
    }
    return out;
}

namespace {

/// Apply `fn` separately per branch and merge the rows back in order.
template <typename Fn>
Var routed(Tape& tape, Var h, const std::vector<int>& tu, const std::vector<int>& g, Fn&& fn) {
    std::vector<std::pair<std::vector<int>, Var>> parts;
    if (!tu.empty()) parts.emplace_back(tu, fn(tape.select_rows(h, tu), false));
    if (!g.empty()) parts.emplace_back(g, fn(tape.select_rows(h, g), true));
    if (parts.size() == 1 && parts[0].first.size() == static_cast<size_t>(h->val.rows())) {
        bool identity = true;
        for (size_t i = 0; i < parts[0].first.size(); ++i)
            if (parts[0].first[i] != static_cast<int>(i)) identity = false;
        if (identity) return parts[0].second;
    }
    return tape.merge_rows(h->val.rows(), parts);
}

}  // namespace

Var block_forward(Tape& tape, Var h, const std::vector<Segment>& segments,
                  const AttentionMask& mask, const MllmParams& p, int layer,
                  Tensor* attn_probs) {
    PF_CHECK(layer >= 0 && layer < p.cfg.layers, "layer index out of range");
    PF_CHECK(h->val.ndim() == 2 && h->val.cols() == p.cfg.d, "token width does not match params");
    PF_CHECK(mask.n == h->val.rows(), "mask/sequence length mismatch");
    PF_CHECK(total_length(segments) == h->val.rows(), "segments do not tile the sequence");
    ParamStore& ps = *p.ps;
    const BlockParamIds& base = p.base[static_cast<size_t>(layer)];
    const BlockParamIds& gen = p.gen[static_cast<size_t>(layer)];
    const std::vector<int> tu = positions_of(segments, false);
    const std::vector<int> g = positions_of(segments, true);
    const int d = p.cfg.d;

    Var qkv = routed(tape, h, tu, g, [&](Var rows, bool is_g) {
        const BlockParamIds& b = is_g ? gen : base;
        Var n = tape.rmsnorm(rows, tape.param(ps, b.norm1));
        return tape.linear(n, tape.param(ps, b.wqkv), tape.param(ps, b.bqkv));
    });
    Var q = tape.split_cols(qkv, 0, d);
    Var k = tape.split_cols(qkv, d, d);
    Var v = tape.split_cols(qkv, 2 * d, d);
    Var att = tape.attention(q, k, v, p.cfg.heads, &mask, attn_probs);
    Var o = routed(tape, att, tu, g, [&](Var rows, bool is_g) {
        const BlockParamIds& b = is_g ? gen : base;
        return tape.linear(rows, tape.param(ps, b.wo), tape.param(ps, b.bo));
    });
    h = tape.add(h, o);

    Var m = routed(tape, h, tu, g, [&](Var rows, bool is_g) {
        const BlockParamIds& b = is_g ? gen : base;
        Var n = tape.rmsnorm(rows, tape.param(ps, b.norm2));
        Var hid = tape.gelu(tape.linear(n, tape.param(ps, b.w1), tape.param(ps, b.b1)));
        return tape.linear(hid, tape.param(ps, b.w2), tape.param(ps, b.b2));
    });
    return tape.add(h, m);
}

Var vision_head(Tape& tape, Var hidden, const MllmParams& p) {
    PF_CHECK(hidden->val.ndim() == 2 && hidden->val.cols() == p.cfg.d, "vision head width mismatch");
    return tape.linear(hidden, tape.param(*p.ps, p.vision_head_w),
                       tape.param(*p.ps, p.vision_head_b));
}

Var text_head(Tape& tape, Var hidden, const MllmParams& p) {
    PF_CHECK(hidden->val.ndim() == 2 && hidden->val.cols() == p.cfg.d, "text head width mismatch");
    return tape.linear(hidden, tape.param(*p.ps, p.text_head_w), tape.param(*p.ps, p.text_head_b));
}

MllmOutput mllm_forward(Tape& tape, const MllmParams& p, const ToyEncoderParams& enc,
                        const SequenceInput& in) {
    ParamStore& ps = *p.ps;
    PF_CHECK(!in.caption.empty(), "caption must not be empty");
    PF_CHECK(static_cast<int>(in.caption.size()) <= p.cfg.text_len, "caption longer than text_len");
    PF_CHECK(p.cfg.d == enc.cfg.d, "transformer and encoder widths differ");

    MllmOutput out;
    const int n_text = static_cast<int>(in.caption.size());
    std::vector<Var> rows;

    std::vector<int> text_positions(static_cast<size_t>(n_text));
    for (int i = 0; i < n_text; ++i) text_positions[static_cast<size_t>(i)] = i;
    Var text_rows = tape.add(tape.embedding(tape.param(ps, p.tok_emb), in.caption),
                             tape.select_rows(tape.param(ps, p.text_pos), text_positions));
    rows.push_back(text_rows);
    out.segments.push_back({Modality::Text, 0, n_text});
    int pos = n_text;

    if (in.img_u != nullptr) {
        PF_CHECK(in.img_u->d == p.cfg.d, "ImgU grid width mismatch");
        const int cells = in.img_u->cells();
        PF_CHECK(cells == enc.cfg.cells(), "ImgU cell count mismatch");
        Var u = tape.add(tape.constant(flatten_grid(*in.img_u)), tape.param(ps, enc.pos));
        rows.push_back(u);
        out.segments.push_back({Modality::ImgU, pos, cells});
        pos += cells;
    }
    if (in.img_g_rows) {
        PF_CHECK(in.img_g_rows->val.ndim() == 2 && in.img_g_rows->val.cols() == p.cfg.d,
                 "ImgG rows width mismatch");
        const int cells = in.img_g_rows->val.rows();
        PF_CHECK(cells == enc.cfg.cells(), "ImgG cell count mismatch");
        Var g = tape.add(in.img_g_rows, tape.param(ps, enc.pos));
        rows.push_back(g);
        out.segments.push_back({Modality::ImgG, pos, cells});
        pos += cells;
    }

    Var h = tape.concat_rows(rows);
    const AttentionMask mask = build_attention_mask(out.segments);
    for (int l = 0; l < p.cfg.layers; ++l)
        h = block_forward(tape, h, out.segments, mask, p, l);

    const std::vector<int> tu = positions_of(out.segments, false);
    const std::vector<int> g = positions_of(out.segments, true);
    out.hidden = routed(tape, h, tu, g, [&](Var r, bool is_g) {
        return tape.rmsnorm(r, tape.param(ps, is_g ? p.gen_final_norm : p.base_final_norm));
    });

    std::vector<int> text_idx(static_cast<size_t>(n_text));
    for (int i = 0; i < n_text; ++i) text_idx[static_cast<size_t>(i)] = i;
    out.text_logits = text_head(tape, tape.select_rows(out.hidden, text_idx), p);
    if (in.img_g_rows) out.img_g_pred = vision_head(tape, tape.select_rows(out.hidden, g), p);
    return out;
}

}  // namespace patchflow
