#include "patchflow/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace patchflow {

namespace {
Tensor gaussian_init(Rng& rng, std::vector<int> shape, double stddev) {
    Tensor t(std::move(shape));
    rng.fill_gaussian(t, stddev);
    return t;
}
}  // namespace

ToyEncoderParams ToyEncoderParams::create(ParamStore& ps, const ToyEncoderConfig& cfg,
                                          const std::string& prefix, Rng& rng) {
    ToyEncoderParams p;
    p.cfg = cfg;
    p.ps = &ps;
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim()));
    p.patch_w = ps.add(prefix + ".patch_w", gaussian_init(rng, {cfg.d, cfg.patch_dim()}, proj_std));
    p.patch_b = ps.add(prefix + ".patch_b", Tensor({cfg.d}));
    const double conv_std = 1.0 / std::sqrt(9.0 * cfg.d);
    for (int l = 0; l < cfg.mixing_layers; ++l) {
        const std::string base = prefix + ".mix" + std::to_string(l);
        const int w = ps.add(base + ".w", gaussian_init(rng, {cfg.d, cfg.d, 3, 3}, conv_std));
        const int b = ps.add(base + ".b", Tensor({cfg.d}));
        p.mix.emplace_back(w, b);
    }
    p.pos = ps.add(prefix + ".pos", gaussian_init(rng, {cfg.cells(), cfg.d}, 0.1));
    return p;
}

ToyEncoderParams ToyEncoderParams::create_zero(ParamStore& ps, const ToyEncoderConfig& cfg,
                                               const std::string& prefix) {
    ToyEncoderParams p;
    p.cfg = cfg;
    p.ps = &ps;
    p.patch_w = ps.add(prefix + ".patch_w", Tensor({cfg.d, cfg.patch_dim()}));
    p.patch_b = ps.add(prefix + ".patch_b", Tensor({cfg.d}));
    for (int l = 0; l < cfg.mixing_layers; ++l) {
        const std::string base = prefix + ".mix" + std::to_string(l);
        const int w = ps.add(base + ".w", Tensor({cfg.d, cfg.d, 3, 3}));
        const int b = ps.add(base + ".b", Tensor({cfg.d}));
        p.mix.emplace_back(w, b);
    }
    p.pos = ps.add(prefix + ".pos", Tensor({cfg.cells(), cfg.d}));
    return p;
}

Var encode_image_t(Tape& tape, const Image& img, const ToyEncoderParams& enc) {
    img.validate(enc.cfg.patch);
    PF_CHECK(img.h == enc.cfg.image && img.w == enc.cfg.image,
             "image size does not match encoder config");
    const PatchGrid patches = space_to_depth(img, enc.cfg.patch);

    Var rows = tape.constant(flatten_grid(patches));  // [cells, 3P^2]
    Var x = tape.linear(rows, tape.param(*enc.ps, enc.patch_w), tape.param(*enc.ps, enc.patch_b));
    x = tape.add(x, tape.param(*enc.ps, enc.pos));

    Var g = tape.rows_to_chw(x, enc.cfg.grid_h(), enc.cfg.grid_w());
    for (const auto& [w, b] : enc.mix) {
        Var h = tape.conv3x3_same(g, tape.param(*enc.ps, w), tape.param(*enc.ps, b));
        g = tape.add(g, tape.gelu(h));
    }
    return g;  // [d, H', W']
}

PatchGrid encode_image(const Image& img, const ToyEncoderParams& enc) {
    Tape tape(false);
    Var g = encode_image_t(tape, img, enc);
    return PatchGrid::from_tensor(g->val);
}

DownsampleParams DownsampleParams::create(ParamStore& ps, int din, int dout,
                                          const std::string& prefix, Rng& rng) {
    DownsampleParams p;
    p.ps = &ps;
    Tensor w({dout, din, 2, 2});
    rng.fill_gaussian(w, 1.0 / std::sqrt(4.0 * din));
    p.w = ps.add(prefix + ".w", std::move(w));
    p.b = ps.add(prefix + ".b", Tensor({dout}));
    return p;
}

DownsampleParams DownsampleParams::create_averaging(ParamStore& ps, int d,
                                                    const std::string& prefix) {
    DownsampleParams p;
    p.ps = &ps;
    Tensor w({d, d, 2, 2});
    for (int c = 0; c < d; ++c)
        for (int ky = 0; ky < 2; ++ky)
            for (int kx = 0; kx < 2; ++kx)
                w.v[((static_cast<size_t>(c) * d + c) * 2 + ky) * 2 + kx] = 0.25;
    p.w = ps.add(prefix + ".w", std::move(w));
    p.b = ps.add(prefix + ".b", Tensor({d}));
    return p;
}

Var downsample_grid_t(Tape& tape, Var grid_chw, const DownsampleParams& p) {
    return tape.conv2x2_s2(grid_chw, tape.param(*p.ps, p.w), tape.param(*p.ps, p.b));
}

PatchGrid downsample_grid(const PatchGrid& g, const DownsampleParams& p) {
    PF_CHECK(g.h % 2 == 0 && g.w % 2 == 0, "downsample_grid needs even spatial dims");
    Tape tape(false);
    Var out = downsample_grid_t(tape, tape.constant(g.data), p);
    return PatchGrid::from_tensor(out->val);
}

MaskToken MaskToken::create(ParamStore& ps, int d, const std::string& prefix, Rng& rng) {
    MaskToken m;
    m.ps = &ps;
    Tensor t({d});
    rng.fill_gaussian(t, 0.1);
    m.embedding = ps.add(prefix + ".mask_token", std::move(t));
    return m;
}

namespace {
std::vector<uint8_t> make_plane(int cells, const std::vector<int>& mask_set) {
    std::vector<uint8_t> plane(static_cast<size_t>(cells), 0);
    for (int idx : mask_set) {
        PF_CHECK(idx >= 0 && idx < cells, "mask index out of range");
        PF_CHECK(!plane[static_cast<size_t>(idx)], "duplicate mask index");
        plane[static_cast<size_t>(idx)] = 1;
    }
    return plane;
}
}  // namespace

MaskedGrid substitute_masks(const PatchGrid& g, const std::vector<int>& mask_set,
                            const MaskToken& m) {
    const Tensor& tok = m.value();
    PF_CHECK(tok.numel() == g.d, "mask token width does not match grid");
    MaskedGrid out;
    out.grid = g;
    out.plane = make_plane(g.cells(), mask_set);
    for (int idx : mask_set) {
        const int i = idx / g.w, j = idx % g.w;
        for (int c = 0; c < g.d; ++c) out.grid.at(c, i, j) = tok.v[static_cast<size_t>(c)];
    }
    return out;
}

Var substitute_masks_t(Tape& tape, const PatchGrid& g, const std::vector<int>& mask_set,
                       const MaskToken& m) {
    const auto plane = make_plane(g.cells(), mask_set);
    std::vector<int> kept;
    for (int i = 0; i < g.cells(); ++i)
        if (!plane[static_cast<size_t>(i)]) kept.push_back(i);

    const Tensor rows = flatten_grid(g);
    std::vector<std::pair<std::vector<int>, Var>> parts;
    if (!kept.empty())
        parts.emplace_back(kept, tape.select_rows(tape.constant(rows), kept));
    if (!mask_set.empty())
        parts.emplace_back(mask_set, tape.repeat_row(tape.param(*m.ps, m.embedding),
                                                     static_cast<int>(mask_set.size())));
    return tape.merge_rows(g.cells(), parts);
}

}  // namespace patchflow
