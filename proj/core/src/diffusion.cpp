#include "patchflow/diffusion.hpp"

#include <cmath>

namespace patchflow {

namespace {

Tensor gaussian_init(Rng& rng, std::vector<int> shape, double stddev) {
    Tensor t(std::move(shape));
    rng.fill_gaussian(t, stddev);
    return t;
}

StreamParamIds create_stream(ParamStore& ps, const DiffusionConfig& cfg,
                             const std::string& prefix, Rng& rng) {
    const int d = cfg.d, hid = cfg.mlp_hidden();
    const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double s_h = 1.0 / std::sqrt(static_cast<double>(hid));
    StreamParamIds s;
    s.mod_w = ps.add(prefix + ".mod_w", gaussian_init(rng, {4 * d, d}, 0.02));
    s.mod_b = ps.add(prefix + ".mod_b", Tensor({4 * d}));
    s.norm1 = ps.add(prefix + ".norm1", Tensor::full({d}, 1.0));
    s.wqkv = ps.add(prefix + ".wqkv", gaussian_init(rng, {3 * d, d}, s_d));
    s.bqkv = ps.add(prefix + ".bqkv", Tensor({3 * d}));
    s.wo = ps.add(prefix + ".wo", gaussian_init(rng, {d, d}, s_d));
    s.bo = ps.add(prefix + ".bo", Tensor({d}));
    s.norm2 = ps.add(prefix + ".norm2", Tensor::full({d}, 1.0));
    s.w1 = ps.add(prefix + ".w1", gaussian_init(rng, {hid, d}, s_d));
    s.b1 = ps.add(prefix + ".b1", Tensor({hid}));
    s.w2 = ps.add(prefix + ".w2", gaussian_init(rng, {d, hid}, s_h));
    s.b2 = ps.add(prefix + ".b2", Tensor({d}));
    return s;
}

void copy_stream(const ParamStore& src_ps, const StreamParamIds& src, ParamStore& dst_ps,
                 const StreamParamIds& dst) {
    auto cp = [&](int from, int to) {
        PF_CHECK(src_ps.at(from).value.same_shape(dst_ps.at(to).value), "copy shape mismatch");
        dst_ps.at(to).value = src_ps.at(from).value;
    };
    cp(src.mod_w, dst.mod_w);
    cp(src.mod_b, dst.mod_b);
    cp(src.norm1, dst.norm1);
    cp(src.wqkv, dst.wqkv);
    cp(src.bqkv, dst.bqkv);
    cp(src.wo, dst.wo);
    cp(src.bo, dst.bo);
    cp(src.norm2, dst.norm2);
    cp(src.w1, dst.w1);
    cp(src.b1, dst.b1);
    cp(src.w2, dst.w2);
    cp(src.b2, dst.b2);
}

Tensor time_features(double t, int dim) {
    Tensor f({1, dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        const double arg = t * 1000.0 * freq;
        f.at2(0, 2 * i) = std::sin(arg);
        f.at2(0, 2 * i + 1) = std::cos(arg);
    }
    return f;
}

struct Modulation {
    Var shift1, scale1, shift2, scale2;
};

Modulation stream_modulation(Tape& tape, ParamStore& ps, const StreamParamIds& s, Var cond_row,
                             int d) {
    Var m = tape.linear(cond_row, tape.param(ps, s.mod_w), tape.param(ps, s.mod_b));  // [1,4d]
    Modulation out;
    out.shift1 = tape.reshape(tape.split_cols(m, 0, d), {d});
    out.scale1 = tape.reshape(tape.split_cols(m, d, d), {d});
    out.shift2 = tape.reshape(tape.split_cols(m, 2 * d, d), {d});
    out.scale2 = tape.reshape(tape.split_cols(m, 3 * d, d), {d});
    return out;
}

/// Attention half of a stream: modulated pre-norm + fused QKV.
Var stream_qkv(Tape& tape, ParamStore& ps, const StreamParamIds& s, Var x, const Modulation& m) {
    Var n = tape.affine_rows(tape.rmsnorm(x, tape.param(ps, s.norm1)), m.scale1, m.shift1);
    return tape.linear(n, tape.param(ps, s.wqkv), tape.param(ps, s.bqkv));
}

Var stream_mlp(Tape& tape, ParamStore& ps, const StreamParamIds& s, Var x, const Modulation& m) {
    Var n = tape.affine_rows(tape.rmsnorm(x, tape.param(ps, s.norm2)), m.scale2, m.shift2);
    Var h = tape.gelu(tape.linear(n, tape.param(ps, s.w1), tape.param(ps, s.b1)));
    return tape.linear(h, tape.param(ps, s.w2), tape.param(ps, s.b2));
}

struct DoubleStreams {
    Var img, txt;
};

DoubleStreams double_block(Tape& tape, ParamStore& ps, const DiffusionConfig& cfg,
                           const DoubleBlockIds& blk, Var img, Var txt, Var cond_row) {
    const int d = cfg.d;
    const int ni = img->val.rows();
    const Modulation mi = stream_modulation(tape, ps, blk.img, cond_row, d);
    const Modulation mt = stream_modulation(tape, ps, blk.txt, cond_row, d);

    Var qkv_i = stream_qkv(tape, ps, blk.img, img, mi);
    Var qkv_t = stream_qkv(tape, ps, blk.txt, txt, mt);
    Var qkv = tape.concat_rows({qkv_i, qkv_t});
    Var q = tape.split_cols(qkv, 0, d);
    Var k = tape.split_cols(qkv, d, d);
    Var v = tape.split_cols(qkv, 2 * d, d);
    Var att = tape.attention(q, k, v, cfg.heads, nullptr);

    std::vector<int> idx_i(static_cast<size_t>(ni));
    for (int i = 0; i < ni; ++i) idx_i[static_cast<size_t>(i)] = i;
    std::vector<int> idx_t(static_cast<size_t>(txt->val.rows()));
    for (int i = 0; i < txt->val.rows(); ++i) idx_t[static_cast<size_t>(i)] = ni + i;

    Var att_i = tape.select_rows(att, idx_i);
    Var att_t = tape.select_rows(att, idx_t);
    img = tape.add(img, tape.linear(att_i, tape.param(ps, blk.img.wo), tape.param(ps, blk.img.bo)));
    txt = tape.add(txt, tape.linear(att_t, tape.param(ps, blk.txt.wo), tape.param(ps, blk.txt.bo)));

    img = tape.add(img, stream_mlp(tape, ps, blk.img, img, mi));
    txt = tape.add(txt, stream_mlp(tape, ps, blk.txt, txt, mt));
    return {img, txt};
}

Var single_block(Tape& tape, ParamStore& ps, const DiffusionConfig& cfg,
                 const StreamParamIds& blk, Var x, Var cond_row) {
    const int d = cfg.d;
    const Modulation m = stream_modulation(tape, ps, blk, cond_row, d);
    Var qkv = stream_qkv(tape, ps, blk, x, m);
    Var q = tape.split_cols(qkv, 0, d);
    Var k = tape.split_cols(qkv, d, d);
    Var v = tape.split_cols(qkv, 2 * d, d);
    Var att = tape.attention(q, k, v, cfg.heads, nullptr);
    x = tape.add(x, tape.linear(att, tape.param(ps, blk.wo), tape.param(ps, blk.bo)));
    return tape.add(x, stream_mlp(tape, ps, blk, x, m));
}

struct EmbeddedInputs {
    Var img, txt, cond_row;
};

/// Shared input embedding used by both the backbone and the ControlNet copy.
template <typename P>
EmbeddedInputs embed_inputs(Tape& tape, ParamStore& ps, const P& p, const DiffusionConfig& cfg,
                            const Tensor& z_t, double t, const std::vector<int>& caption) {
    PF_CHECK(z_t.shape == (std::vector<int>{cfg.latent_dim(), cfg.latent_grid(), cfg.latent_grid()}),
             "z_t shape mismatch");
    PF_CHECK(!caption.empty() && static_cast<int>(caption.size()) <= cfg.text_len,
             "caption length out of range");
    PF_CHECK(t >= 0.0 && t <= 1.0, "flow time outside [0,1]");

    const PatchGrid zg = PatchGrid::from_tensor(z_t);
    Var img = tape.linear(tape.constant(flatten_grid(zg)), tape.param(ps, p.x_embed_w),
                          tape.param(ps, p.x_embed_b));
    img = tape.add(img, tape.param(ps, p.img_pos));

    std::vector<int> tpos(caption.size());
    for (size_t i = 0; i < caption.size(); ++i) tpos[i] = static_cast<int>(i);
    Var txt = tape.add(tape.embedding(tape.param(ps, p.txt_emb), caption),
                       tape.select_rows(tape.param(ps, p.txt_pos), tpos));

    Var tf = tape.constant(time_features(t, cfg.d));
    Var c = tape.silu(tape.linear(tf, tape.param(ps, p.time_w1), tape.param(ps, p.time_b1)));
    c = tape.linear(c, tape.param(ps, p.time_w2), tape.param(ps, p.time_b2));  // [1,d]
    return {img, txt, c};
}

}  // namespace

BackboneParams BackboneParams::create(ParamStore& ps, const DiffusionConfig& cfg,
                                      const std::string& prefix, Rng& rng) {
    BackboneParams p;
    p.cfg = cfg;
    p.ps = &ps;
    const int d = cfg.d;
    const double s_in = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim()));
    const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
    p.x_embed_w = ps.add(prefix + ".x_embed.w", gaussian_init(rng, {d, cfg.latent_dim()}, s_in));
    p.x_embed_b = ps.add(prefix + ".x_embed.b", Tensor({d}));
    p.img_pos = ps.add(prefix + ".img_pos", gaussian_init(rng, {cfg.latent_cells(), d}, 0.1));
    p.txt_emb = ps.add(prefix + ".txt_emb", gaussian_init(rng, {cfg.vocab, d}, 0.1));
    p.txt_pos = ps.add(prefix + ".txt_pos", gaussian_init(rng, {cfg.text_len, d}, 0.1));
    p.time_w1 = ps.add(prefix + ".time.w1", gaussian_init(rng, {d, d}, s_d));
    p.time_b1 = ps.add(prefix + ".time.b1", Tensor({d}));
    p.time_w2 = ps.add(prefix + ".time.w2", gaussian_init(rng, {d, d}, s_d));
    p.time_b2 = ps.add(prefix + ".time.b2", Tensor({d}));
    for (int b = 0; b < cfg.double_blocks; ++b) {
        DoubleBlockIds blk;
        blk.img = create_stream(ps, cfg, prefix + ".double." + std::to_string(b) + ".img", rng);
        blk.txt = create_stream(ps, cfg, prefix + ".double." + std::to_string(b) + ".txt", rng);
        p.doubles.push_back(blk);
    }
    for (int b = 0; b < cfg.single_blocks; ++b)
        p.singles.push_back(create_stream(ps, cfg, prefix + ".single." + std::to_string(b), rng));
    p.final_norm = ps.add(prefix + ".final_norm", Tensor::full({d}, 1.0));
    p.final_mod_w = ps.add(prefix + ".final_mod.w", gaussian_init(rng, {2 * d, d}, 0.02));
    p.final_mod_b = ps.add(prefix + ".final_mod.b", Tensor({2 * d}));
    p.head_w = ps.add(prefix + ".head.w", gaussian_init(rng, {cfg.latent_dim(), d}, s_d));
    p.head_b = ps.add(prefix + ".head.b", Tensor({cfg.latent_dim()}));
    return p;
}

LatentControlNet LatentControlNet::create(ParamStore& ps, const BackboneParams& bb,
                                          const std::string& prefix, Rng& rng, int control_d) {
    DiffusionConfig cfg = bb.cfg;
    if (control_d > 0) cfg.control_d = control_d;
    PF_CHECK(cfg.cn_double <= cfg.double_blocks && cfg.cn_single <= cfg.single_blocks,
             "controlnet copies more blocks than the backbone has");
    LatentControlNet cn;
    cn.cfg = cfg;
    cn.ps = &ps;
    const int d = cfg.d;
    ParamStore& src = *bb.ps;

    cn.x_embed_w = ps.add(prefix + ".x_embed.w", src.at(bb.x_embed_w).value);
    cn.x_embed_b = ps.add(prefix + ".x_embed.b", src.at(bb.x_embed_b).value);
    cn.img_pos = ps.add(prefix + ".img_pos", src.at(bb.img_pos).value);
    cn.txt_emb = ps.add(prefix + ".txt_emb", src.at(bb.txt_emb).value);
    cn.txt_pos = ps.add(prefix + ".txt_pos", src.at(bb.txt_pos).value);
    cn.time_w1 = ps.add(prefix + ".time.w1", src.at(bb.time_w1).value);
    cn.time_b1 = ps.add(prefix + ".time.b1", src.at(bb.time_b1).value);
    cn.time_w2 = ps.add(prefix + ".time.w2", src.at(bb.time_w2).value);
    cn.time_b2 = ps.add(prefix + ".time.b2", src.at(bb.time_b2).value);

    cn.down = DownsampleParams::create(ps, cfg.control_d, cfg.control_d, prefix + ".down", rng);
    cn.in_proj_w = ps.add(prefix + ".in_proj.w",
                          gaussian_init(rng, {d, cfg.control_d},
                                        1.0 / std::sqrt(static_cast<double>(cfg.control_d))));
    cn.in_proj_b = ps.add(prefix + ".in_proj.b", Tensor({d}));

    // trainable copies of the first cn_double / cn_single backbone blocks
    for (int b = 0; b < cfg.cn_double; ++b) {
        DoubleBlockIds blk;
        blk.img = create_stream(ps, cfg, prefix + ".double." + std::to_string(b) + ".img", rng);
        blk.txt = create_stream(ps, cfg, prefix + ".double." + std::to_string(b) + ".txt", rng);
        copy_stream(src, bb.doubles[static_cast<size_t>(b)].img, ps, blk.img);
        copy_stream(src, bb.doubles[static_cast<size_t>(b)].txt, ps, blk.txt);
        cn.doubles.push_back(blk);
    }
    for (int b = 0; b < cfg.cn_single; ++b) {
        StreamParamIds blk = create_stream(ps, cfg, prefix + ".single." + std::to_string(b), rng);
        copy_stream(src, bb.singles[static_cast<size_t>(b)], ps, blk);
        cn.singles.push_back(blk);
    }
    for (int b = 0; b < cn.blocks_controlled(); ++b) {
        const std::string base = prefix + ".zero_proj." + std::to_string(b);
        cn.zero_proj.emplace_back(ps.add(base + ".w", Tensor({d, d})),
                                  ps.add(base + ".b", Tensor({d})));
    }
    return cn;
}

CrossAttnAdapter CrossAttnAdapter::create(ParamStore& ps, const DiffusionConfig& cfg, int token_d,
                                          const std::string& prefix, Rng& rng) {
    CrossAttnAdapter a;
    a.cfg = cfg;
    a.ps = &ps;
    const int d = cfg.d;
    const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
    a.in_proj_w = ps.add(prefix + ".in_proj.w",
                         gaussian_init(rng, {d, token_d}, 1.0 / std::sqrt(static_cast<double>(token_d))));
    a.in_proj_b = ps.add(prefix + ".in_proj.b", Tensor({d}));
    for (int b = 0; b < cfg.double_blocks; ++b) {
        const std::string base = prefix + ".block." + std::to_string(b);
        Block blk;
        blk.norm = ps.add(base + ".norm", Tensor::full({d}, 1.0));
        blk.wq = ps.add(base + ".wq", gaussian_init(rng, {d, d}, s_d));
        blk.bq = ps.add(base + ".bq", Tensor({d}));
        blk.wk = ps.add(base + ".wk", gaussian_init(rng, {d, d}, s_d));
        blk.bk = ps.add(base + ".bk", Tensor({d}));
        blk.wv = ps.add(base + ".wv", gaussian_init(rng, {d, d}, s_d));
        blk.bv = ps.add(base + ".bv", Tensor({d}));
        blk.wo = ps.add(base + ".wo", Tensor({d, d}));  // zero init: no-op at start
        blk.bo = ps.add(base + ".bo", Tensor({d}));
        a.blocks.push_back(blk);
    }
    return a;
}

Tensor flow_forward_process(const Tensor& z0, const Tensor& eps, double t) {
    PF_CHECK(z0.same_shape(eps), "flow_forward_process shape mismatch");
    PF_CHECK(t >= 0.0 && t <= 1.0, "flow time outside [0,1]");
    Tensor out = z0;
    for (int i = 0; i < out.numel(); ++i)
        out.v[static_cast<size_t>(i)] =
            (1.0 - t) * z0.v[static_cast<size_t>(i)] + t * eps.v[static_cast<size_t>(i)];
    return out;
}

double flow_matching_loss(const Tensor& v_pred, const Tensor& z0, const Tensor& eps) {
    PF_CHECK(v_pred.same_shape(z0) && z0.same_shape(eps), "flow_matching_loss shape mismatch");
    double s = 0.0;
    for (int i = 0; i < v_pred.numel(); ++i) {
        const double d = v_pred.v[static_cast<size_t>(i)] -
                         (eps.v[static_cast<size_t>(i)] - z0.v[static_cast<size_t>(i)]);
        s += d * d;
    }
    return s / v_pred.numel();
}

Var flow_matching_loss_t(Tape& tape, Var v_pred, const Tensor& z0, const Tensor& eps) {
    PF_CHECK(z0.same_shape(eps), "flow_matching_loss shape mismatch");
    Tensor target = eps;
    for (int i = 0; i < target.numel(); ++i) target.v[static_cast<size_t>(i)] -= z0.v[static_cast<size_t>(i)];
    return tape.mse(v_pred, tape.constant(std::move(target)));
}

Tensor euler_step(const Tensor& z_t, const Tensor& v, double dt) {
    PF_CHECK(z_t.same_shape(v), "euler_step shape mismatch");
    PF_CHECK(dt > 0.0, "euler_step needs dt > 0");
    Tensor out = z_t;
    for (int i = 0; i < out.numel(); ++i) out.v[static_cast<size_t>(i)] -= dt * v.v[static_cast<size_t>(i)];
    return out;
}

std::vector<double> flow_time_grid(int steps) {
    PF_CHECK(steps > 0, "sampling needs steps > 0");
    std::vector<double> t(static_cast<size_t>(steps));
    for (int k = 0; k < steps; ++k) t[static_cast<size_t>(k)] = 1.0 - static_cast<double>(k) / steps;
    return t;
}

Var backbone_forward_t(Tape& tape, const BackboneParams& bb, const Tensor& z_t, double t,
                       const std::vector<int>& caption, const std::vector<Var>* residuals,
                       const CrossAttnAdapter* xattn, Var tokens) {
    const DiffusionConfig& cfg = bb.cfg;
    ParamStore& ps = *bb.ps;
    if (residuals)
        PF_CHECK(static_cast<int>(residuals->size()) == cfg.cn_double + cfg.cn_single,
                 "residual count mismatch");
    PF_CHECK((xattn == nullptr) == (tokens == nullptr), "cross-attn needs tokens");

    auto in = embed_inputs(tape, ps, bb, cfg, z_t, t, caption);
    Var img = in.img, txt = in.txt, cond = in.cond_row;
    const int ni = img->val.rows();

    Var xtok;
    if (xattn)
        xtok = tape.linear(tokens, tape.param(*xattn->ps, xattn->in_proj_w),
                           tape.param(*xattn->ps, xattn->in_proj_b));

    for (int b = 0; b < cfg.double_blocks; ++b) {
        auto s = double_block(tape, ps, cfg, bb.doubles[static_cast<size_t>(b)], img, txt, cond);
        img = s.img;
        txt = s.txt;
        if (residuals && b < cfg.cn_double) img = tape.add(img, (*residuals)[static_cast<size_t>(b)]);
        if (xattn) {
            const auto& blk = xattn->blocks[static_cast<size_t>(b)];
            ParamStore& xs = *xattn->ps;
            Var nq = tape.rmsnorm(img, tape.param(xs, blk.norm));
            Var q = tape.linear(nq, tape.param(xs, blk.wq), tape.param(xs, blk.bq));
            Var k = tape.linear(xtok, tape.param(xs, blk.wk), tape.param(xs, blk.bk));
            Var v = tape.linear(xtok, tape.param(xs, blk.wv), tape.param(xs, blk.bv));
            Var att = tape.attention(q, k, v, cfg.heads, nullptr);
            img = tape.add(img, tape.linear(att, tape.param(xs, blk.wo), tape.param(xs, blk.bo)));
        }
    }

    Var x = tape.concat_rows({img, txt});
    for (int b = 0; b < cfg.single_blocks; ++b) {
        x = single_block(tape, ps, cfg, bb.singles[static_cast<size_t>(b)], x, cond);
        if (residuals && b < cfg.cn_single)
            x = tape.add_rows_at(x, (*residuals)[static_cast<size_t>(cfg.cn_double + b)], 0);
    }

    std::vector<int> idx(static_cast<size_t>(ni));
    for (int i = 0; i < ni; ++i) idx[static_cast<size_t>(i)] = i;
    Var out_img = tape.select_rows(x, idx);

    Var fm = tape.linear(cond, tape.param(ps, bb.final_mod_w), tape.param(ps, bb.final_mod_b));
    Var f_shift = tape.reshape(tape.split_cols(fm, 0, cfg.d), {cfg.d});
    Var f_scale = tape.reshape(tape.split_cols(fm, cfg.d, cfg.d), {cfg.d});
    Var f = tape.affine_rows(tape.rmsnorm(out_img, tape.param(ps, bb.final_norm)), f_scale, f_shift);
    Var v_rows = tape.linear(f, tape.param(ps, bb.head_w), tape.param(ps, bb.head_b));
    return tape.rows_to_chw(v_rows, cfg.latent_grid(), cfg.latent_grid());
}

std::vector<Var> controlnet_forward_t(Tape& tape, const LatentControlNet& cn, const Tensor& z_t,
                                      double t, const std::vector<int>& caption, Var ctrl_chw,
                                      double scale) {
    const DiffusionConfig& cfg = cn.cfg;
    ParamStore& ps = *cn.ps;
    PF_CHECK(scale >= 0.0, "conditioning scale must be >= 0");
    PF_CHECK(ctrl_chw->val.ndim() == 3 && ctrl_chw->val.dim(0) == cfg.control_d,
             "control grid width mismatch");
    PF_CHECK(ctrl_chw->val.dim(1) % 2 == 0 && ctrl_chw->val.dim(2) % 2 == 0,
             "control grid spatial dims must be even");

    auto in = embed_inputs(tape, ps, cn, cfg, z_t, t, caption);
    Var img = in.img, txt = in.txt, cond = in.cond_row;
    const int ni = img->val.rows();
    const int g = cfg.latent_grid();

    // control path: downsample by 2, project to model width, broadcast back
    // onto the latent grid (nearest neighbour), add to the image stream
    Var down = downsample_grid_t(tape, ctrl_chw, cn.down);
    const int ch = down->val.dim(1), cw = down->val.dim(2);
    Var crow = tape.linear(tape.chw_to_rows(down), tape.param(ps, cn.in_proj_w),
                           tape.param(ps, cn.in_proj_b));
    std::vector<int> up_map(static_cast<size_t>(g) * g);
    for (int i = 0; i < g; ++i)
        for (int j = 0; j < g; ++j)
            up_map[static_cast<size_t>(i) * g + j] = (i * ch / g) * cw + (j * cw / g);
    img = tape.add(img, tape.map_rows(crow, up_map));

    std::vector<Var> residuals;
    for (int b = 0; b < cfg.cn_double; ++b) {
        auto s = double_block(tape, ps, cfg, cn.doubles[static_cast<size_t>(b)], img, txt, cond);
        img = s.img;
        txt = s.txt;
        const auto& [zw, zb] = cn.zero_proj[static_cast<size_t>(b)];
        residuals.push_back(
            tape.scale(tape.linear(img, tape.param(ps, zw), tape.param(ps, zb)), scale));
    }
    Var x = tape.concat_rows({img, txt});
    for (int b = 0; b < cfg.cn_single; ++b) {
        x = single_block(tape, ps, cfg, cn.singles[static_cast<size_t>(b)], x, cond);
        std::vector<int> idx(static_cast<size_t>(ni));
        for (int i = 0; i < ni; ++i) idx[static_cast<size_t>(i)] = i;
        const auto& [zw, zb] = cn.zero_proj[static_cast<size_t>(cfg.cn_double + b)];
        residuals.push_back(tape.scale(
            tape.linear(tape.select_rows(x, idx), tape.param(ps, zw), tape.param(ps, zb)), scale));
    }
    return residuals;
}

std::vector<Tensor> controlnet_forward(const LatentControlNet& cn, const ControlState& state) {
    Tape tape(false);
    auto vars = controlnet_forward_t(tape, cn, state.z_t, state.t, state.caption,
                                     tape.constant(state.c_grid.data), state.scale);
    std::vector<Tensor> out;
    out.reserve(vars.size());
    for (const auto& v : vars) out.push_back(v->val);
    return out;
}

Tensor guided_denoise_step(const BackboneParams& bb, const std::vector<Tensor>& residuals,
                           const Tensor& z_t, double t, double dt,
                           const std::vector<int>& caption) {
    PF_CHECK(dt > 0.0 && t - dt >= -1e-12, "guided step leaves [0,1]");
    Tape tape(false);
    std::vector<Var> res;
    res.reserve(residuals.size());
    for (const auto& r : residuals) res.push_back(tape.constant(r));
    Var v = backbone_forward_t(tape, bb, z_t, t, caption, res.empty() ? nullptr : &res);
    return euler_step(z_t, v->val, dt);
}

namespace {
Tensor draw_noise(const DiffusionConfig& cfg, uint64_t seed) {
    Rng rng(mix_seed(seed, "sample-noise"));
    Tensor eps({cfg.latent_dim(), cfg.latent_grid(), cfg.latent_grid()});
    rng.fill_gaussian(eps, 1.0);
    return eps;
}
}  // namespace

Image sample_image(const BackboneParams& bb, const LatentControlNet* cn,
                   const PatchGrid* c_grid, const std::vector<int>& caption,
                   const SampleOptions& opts) {
    const DiffusionConfig& cfg = bb.cfg;
    PF_CHECK(cn == nullptr || c_grid != nullptr, "controlnet sampling needs a control grid");
    Tensor z = draw_noise(cfg, opts.seed);
    const double dt = 1.0 / opts.steps;
    for (double t : flow_time_grid(opts.steps)) {
        Tape tape(false);
        Var v;
        if (cn) {
            auto res = controlnet_forward_t(tape, *cn, z, t, caption,
                                            tape.constant(c_grid->data), opts.scale);
            v = backbone_forward_t(tape, bb, z, t, caption, &res);
        } else {
            v = backbone_forward_t(tape, bb, z, t, caption);
        }
        z = euler_step(z, v->val, dt);
    }
    return clamp01(depth_to_space(PatchGrid::from_tensor(z), cfg.latent_patch));
}

Image sample_image_cross_attn(const BackboneParams& bb, const CrossAttnAdapter& xattn,
                              const Tensor& tokens, const std::vector<int>& caption,
                              const SampleOptions& opts) {
    const DiffusionConfig& cfg = bb.cfg;
    Tensor z = draw_noise(cfg, opts.seed);
    const double dt = 1.0 / opts.steps;
    for (double t : flow_time_grid(opts.steps)) {
        Tape tape(false);
        Var v = backbone_forward_t(tape, bb, z, t, caption, nullptr, &xattn,
                                   tape.constant(tokens));
        z = euler_step(z, v->val, dt);
    }
    return clamp01(depth_to_space(PatchGrid::from_tensor(z), cfg.latent_patch));
}

}  // namespace patchflow
