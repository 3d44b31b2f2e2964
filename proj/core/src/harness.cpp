#include "patchflow/harness.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace patchflow {

namespace {

double now_sec() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

/// Identical batch stream for every variant at a given (seed, budget, batch).
struct BatchPlan {
    std::vector<std::vector<int>> per_step;
    uint64_t chain = 1469598103934665603ull;
};

BatchPlan make_batch_plan(uint64_t seed, int steps, int batch, int n) {
    BatchPlan plan;
    Rng rng(mix_seed(seed, "variant-data"));
    for (int s = 0; s < steps; ++s) {
        std::vector<int> idx(static_cast<size_t>(batch));
        for (auto& i : idx) i = rng.uniform_int(n);
        plan.chain = fnv1a(&s, sizeof(s), plan.chain);
        plan.chain = fnv1a(idx.data(), idx.size() * sizeof(int), plan.chain);
        plan.per_step.push_back(std::move(idx));
    }
    return plan;
}

Var batch_mean(Tape& tape, const std::vector<Var>& losses) {
    Var sum = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) sum = tape.add(sum, losses[i]);
    return tape.scale(sum, 1.0 / static_cast<double>(losses.size()));
}

void check_finite(double loss, const std::string& what, int step) {
    PF_CHECK(std::isfinite(loss),
             "training diverged (non-finite loss) in " + what + " at step " + std::to_string(step));
}

/// Masked-MSE bridge training over [Text][ImgG] sequences; targets come from
/// `bridge_enc` grids (d = transformer width). Shared by the clip-latent,
/// nonaligned-encoder and cross-attn variants.
void train_bridge_masked(MllmStack& stack, const ToyEncoderParams& bridge_enc,
                         const SyntheticDataset& data, const BatchPlan& plan, int step_begin,
                         int step_end, double lr, uint64_t seed, const std::string& what) {
    ParamStore& ps = stack.ps;
    Adam adam(ps, ps.ids_with_prefix("gen."), lr);
    Rng ratio_rng(mix_seed(seed, "variant-ratio"));
    Rng mask_rng(mix_seed(seed, "variant-mask"));
    const int cells = stack.enc.cfg.cells();
    std::vector<std::optional<PatchGrid>> cache(static_cast<size_t>(data.size()));
    auto target_of = [&](int i) -> const PatchGrid& {
        auto& slot = cache[static_cast<size_t>(i)];
        if (!slot) slot = encode_image(data.render(i), bridge_enc);
        return *slot;
    };

    for (int step = step_begin; step < step_end; ++step) {
        Tape tape;
        std::vector<Var> batch_losses;
        for (int i : plan.per_step[static_cast<size_t>(step)]) {
            const PatchGrid& target = target_of(i);
            const double ratio = truncated_normal(ratio_rng, 1.0, 0.25, 0.7, 1.0);
            const auto mask_set = sample_training_mask(mask_rng, cells, ratio);
            std::vector<uint8_t> plane(static_cast<size_t>(cells), 0);
            for (int m : mask_set) plane[static_cast<size_t>(m)] = 1;
            SequenceInput in;
            in.caption = data.caption_ids(i);
            in.img_g_rows = substitute_masks_t(tape, target, mask_set, stack.mask_token);
            MllmOutput out = mllm_forward(tape, stack.mllm, stack.enc, in);
            batch_losses.push_back(
                tape.masked_row_mse(out.img_g_pred, tape.constant(flatten_grid(target)), plane));
        }
        Var loss = batch_mean(tape, batch_losses);
        check_finite(loss->val.v[0], what, step);
        ps.zero_grads();
        tape.backward(loss);
        adam.step();
    }
}

/// Teacher-forced flow-matching training of a conditioner. `residual_fn`
/// produces the conditioning for one sample inside the step tape (ControlNet
/// residuals or cross-attention tokens folded into the velocity prediction).
template <typename StepFn>
void train_flow_conditioner(ParamStore& ps, const std::vector<int>& trainable,
                            const DiffusionModel& dm, const SyntheticDataset& data,
                            const BatchPlan& plan, int step_begin, int step_end, double lr,
                            uint64_t seed, const std::string& what, StepFn&& velocity_fn) {
    Adam adam(ps, trainable, lr);
    Rng noise_rng(mix_seed(seed, "variant-noise"));
    Rng time_rng(mix_seed(seed, "variant-time"));
    for (int step = step_begin; step < step_end; ++step) {
        Tape tape;
        std::vector<Var> batch_losses;
        for (int i : plan.per_step[static_cast<size_t>(step)]) {
            const Image img = data.render(i);
            const Tensor z0 = space_to_depth(img, dm.cfg.latent_patch).data;
            Tensor eps(z0.shape);
            noise_rng.fill_gaussian(eps, 1.0);
            const double t = time_rng.uniform();
            const Tensor z_t = flow_forward_process(z0, eps, t);
            Var v = velocity_fn(tape, i, z_t, t, data.caption_ids(i));
            batch_losses.push_back(flow_matching_loss_t(tape, v, z0, eps));
        }
        Var loss = batch_mean(tape, batch_losses);
        check_finite(loss->val.v[0], what, step);
        ps.zero_grads();
        tape.backward(loss);
        adam.step();
    }
}

MetricReport eval_generation(HarnessContext& ctx, uint64_t seed,
                             const std::function<Image(int, uint64_t)>& gen_fn) {
    std::vector<Image> gen, ref;
    for (int i = 0; i < ctx.eval_n; ++i) {
        gen.push_back(gen_fn(i, mix_seed(seed, "eval-" + std::to_string(i))));
        ref.push_back(ctx.val->render(i));
    }
    return compute_metrics(gen, ref, ctx.stack->enc);
}

}  // namespace

PatchGrid thumbnail_grid(const Image& img, int patch) {
    img.validate(patch);
    PatchGrid g = PatchGrid::zeros(3, img.h / patch, img.w / patch);
    const double inv = 1.0 / (patch * patch);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < g.h; ++i)
            for (int j = 0; j < g.w; ++j) {
                double s = 0.0;
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        s += img.pixels.at3(c, i * patch + py, j * patch + px);
                g.at(c, i, j) = s * inv;
            }
    return g;
}

Image generate_image(const MllmStack& stack, const DiffusionModel& dm,
                     const ControlNetModel* cnm, const std::vector<int>& caption,
                     const GenOptions& opts, PatchGrid* grid_out, GenTiming* timing) {
    Rng order_rng(mix_seed(opts.seed, "mar-order"));
    const int g = stack.enc.cfg.grid_h();
    const InferenceSchedule schedule =
        build_inference_schedule(order_rng, g * g, opts.mar_steps);

    const double t0 = now_sec();
    const PatchGrid grid = mar_generate(mllm_predictor(stack, caption), stack.enc.cfg.d, g, g,
                                        stack.mask_token.value(), schedule);
    const double t1 = now_sec();
    if (grid_out) *grid_out = grid;

    SampleOptions so;
    so.steps = opts.diff_steps;
    so.scale = opts.scale;
    so.seed = opts.seed;
    Image img;
    if (cnm) {
        const PatchGrid ctrl = pool_to_count(grid, opts.token_count);
        img = sample_image(dm.bb, &cnm->cn, &ctrl, caption, so);
    } else {
        img = sample_image(dm.bb, nullptr, nullptr, caption, so);
    }
    if (timing) {
        timing->mar_seconds = t1 - t0;
        timing->diffusion_seconds = now_sec() - t1;
    }
    return img;
}

void reset_generation_branch(MllmStack& stack, uint64_t seed) {
    Rng rng(mix_seed(seed, "branch-init"));
    init_generation_branch(stack.mllm, rng);
    Tensor m({stack.mllm.cfg.d});
    rng.fill_gaussian(m, 0.1);
    stack.ps.at(stack.mask_token.embedding).value = std::move(m);
}

const std::vector<std::string> kVariantIds = {
    "clip-latent", "query-tokens", "raw-pixel-latent", "nonaligned-encoder", "cross-attn"};

ReportRow run_variant(const std::string& variant, int budget_steps, uint64_t seed,
                      const TrainConfig& base_cfg, HarnessContext& ctx) {
    PF_CHECK(std::find(kVariantIds.begin(), kVariantIds.end(), variant) != kVariantIds.end(),
             "unknown variant id: " + variant);
    PF_CHECK(ctx.stack != nullptr && ctx.dm != nullptr && ctx.train != nullptr && ctx.val != nullptr,
             "harness context incomplete");
    PF_CHECK(ctx.stack->base_frozen(), "variant runs require a frozen pretrained base");
    for (int id : ctx.dm->ps.ids_with_prefix("dm."))
        PF_CHECK(ctx.dm->ps.at(id).frozen, "variant runs require a frozen backbone");

    MllmStack& stack = *ctx.stack;
    const DiffusionModel& dm = *ctx.dm;
    const SyntheticDataset& data = *ctx.train;
    const double lr = base_cfg.lr;
    const int bridge_steps = budget_steps * 2 / 3;
    const BatchPlan plan = make_batch_plan(seed, budget_steps, base_cfg.batch, data.size());

    ReportRow row;
    row.sweep = "variants";
    row.key = variant;
    row.seed = seed;
    row.batch_chain = plan.chain;
    row.config_hash = base_cfg.config_hash();
    const double wall0 = now_sec();

    reset_generation_branch(stack, seed);

    if (variant == "clip-latent" || variant == "cross-attn" || variant == "nonaligned-encoder") {
        // bridge phase: masked-AR prediction of patch latents
        ParamStore enc_b_store;
        std::optional<ToyEncoderParams> enc_b;
        const ToyEncoderParams* bridge_enc = &stack.enc;
        if (variant == "nonaligned-encoder") {
            Rng enc_rng(mix_seed(seed, "nonaligned-enc"));
            enc_b = ToyEncoderParams::create(enc_b_store, stack.enc.cfg, "encb", enc_rng);
            enc_b_store.set_frozen_prefix("encb.", true);
            bridge_enc = &*enc_b;
            row.note = "bridge grids from an encoder the base was never trained with";
        }
        train_bridge_masked(stack, *bridge_enc, data, plan, 0, bridge_steps, lr, seed,
                            variant + "/bridge");

        if (variant == "cross-attn") {
            ParamStore xs;
            Rng xr(mix_seed(seed, "xattn-init"));
            CrossAttnAdapter xattn =
                CrossAttnAdapter::create(xs, dm.cfg, stack.enc.cfg.d, "xattn", xr);
            train_flow_conditioner(
                xs, xs.ids_with_prefix("xattn."), dm, data, plan, bridge_steps, budget_steps, lr,
                seed, variant + "/xattn",
                [&](Tape& tape, int i, const Tensor& z_t, double t, const std::vector<int>& cap) {
                    Var tokens = tape.constant(flatten_grid(encode_image(data.render(i), stack.enc)));
                    return backbone_forward_t(tape, dm.bb, z_t, t, cap, nullptr, &xattn, tokens);
                });
            row.metrics = eval_generation(ctx, seed, [&](int i, uint64_t s) {
                const std::vector<int> cap = ctx.val->caption_ids(i);
                Rng order_rng(mix_seed(s, "mar-order"));
                const int g = stack.enc.cfg.grid_h();
                const InferenceSchedule schedule =
                    build_inference_schedule(order_rng, g * g, ctx.mar_steps);
                const PatchGrid grid = mar_generate(mllm_predictor(stack, cap), stack.enc.cfg.d,
                                                    g, g, stack.mask_token.value(), schedule);
                SampleOptions so{ctx.diff_steps, ctx.scale, s};
                return sample_image_cross_attn(dm.bb, xattn, flatten_grid(grid), cap, so);
            });
        } else {
            ControlNetModel cnm;
            cnm.init(dm, mix_seed(seed, variant));
            train_flow_conditioner(
                cnm.ps, cnm.ps.ids_with_prefix("cn."), dm, data, plan, bridge_steps, budget_steps,
                lr, seed, variant + "/cn",
                [&](Tape& tape, int i, const Tensor& z_t, double t, const std::vector<int>& cap) {
                    const PatchGrid ctrl = pool_to_count(encode_image(data.render(i), *bridge_enc),
                                                         base_cfg.token_count);
                    auto res = controlnet_forward_t(tape, cnm.cn, z_t, t, cap,
                                                    tape.constant(ctrl.data), 1.0);
                    return backbone_forward_t(tape, dm.bb, z_t, t, cap, &res);
                });
            row.metrics = eval_generation(ctx, seed, [&](int i, uint64_t s) {
                GenOptions go{ctx.mar_steps, ctx.diff_steps, ctx.scale, s, base_cfg.token_count};
                return generate_image(stack, dm, &cnm, ctx.val->caption_ids(i), go);
            });
        }
    } else if (variant == "query-tokens") {
        // learnable 2-D query grid in place of masked patch embeddings,
        // trained end-to-end through the ControlNet with the flow loss
        ParamStore qs;
        Rng qr(mix_seed(seed, "query-init"));
        Tensor qinit({stack.enc.cfg.cells(), stack.enc.cfg.d});
        qr.fill_gaussian(qinit, 0.1);
        const int queries = qs.add("var.queries", std::move(qinit));
        ControlNetModel cnm;
        cnm.init(dm, mix_seed(seed, variant));

        Adam adam_gen(stack.ps, stack.ps.ids_with_prefix("gen."), lr);
        Adam adam_var(qs, {queries}, lr);
        Adam adam_cn(cnm.ps, cnm.ps.ids_with_prefix("cn."), lr);
        Rng noise_rng(mix_seed(seed, "variant-noise"));
        Rng time_rng(mix_seed(seed, "variant-time"));
        for (int step = 0; step < budget_steps; ++step) {
            Tape tape;
            std::vector<Var> batch_losses;
            for (int i : plan.per_step[static_cast<size_t>(step)]) {
                const Image img = data.render(i);
                const Tensor z0 = space_to_depth(img, dm.cfg.latent_patch).data;
                Tensor eps(z0.shape);
                noise_rng.fill_gaussian(eps, 1.0);
                const double t = time_rng.uniform();
                const Tensor z_t = flow_forward_process(z0, eps, t);
                const std::vector<int> cap = data.caption_ids(i);
                SequenceInput in;
                in.caption = cap;
                in.img_g_rows = tape.param(qs, queries);
                MllmOutput out = mllm_forward(tape, stack.mllm, stack.enc, in);
                Var ctrl = tape.rows_to_chw(out.img_g_pred, stack.enc.cfg.grid_h(),
                                            stack.enc.cfg.grid_w());
                auto res = controlnet_forward_t(tape, cnm.cn, z_t, t, cap, ctrl, 1.0);
                Var v = backbone_forward_t(tape, dm.bb, z_t, t, cap, &res);
                batch_losses.push_back(flow_matching_loss_t(tape, v, z0, eps));
            }
            Var loss = batch_mean(tape, batch_losses);
            check_finite(loss->val.v[0], "query-tokens", step);
            stack.ps.zero_grads();
            qs.zero_grads();
            cnm.ps.zero_grads();
            tape.backward(loss);
            adam_gen.step();
            adam_var.step();
            adam_cn.step();
        }
        row.metrics = eval_generation(ctx, seed, [&](int i, uint64_t s) {
            Tape tape(false);
            SequenceInput in;
            in.caption = ctx.val->caption_ids(i);
            in.img_g_rows = tape.param(qs, queries);
            MllmOutput out = mllm_forward(tape, stack.mllm, stack.enc, in);
            const PatchGrid grid = reshape_to_grid(out.img_g_pred->val, stack.enc.cfg.grid_h(),
                                                   stack.enc.cfg.grid_w());
            const PatchGrid ctrl = pool_to_count(grid, base_cfg.token_count);
            SampleOptions so{ctx.diff_steps, ctx.scale, s};
            return sample_image(dm.bb, &cnm.cn, &ctrl, in.caption, so);
        });
    } else {  // raw-pixel-latent
        row.note = "vae stand-in: bridge currency is the raw downsampled pixel grid";
        ParamStore vs;
        Rng vr(mix_seed(seed, "raw-init"));
        const int d = stack.enc.cfg.d;
        Tensor inw({d, 3});
        vr.fill_gaussian(inw, 1.0 / std::sqrt(3.0));
        Tensor hw({3, d});
        vr.fill_gaussian(hw, 1.0 / std::sqrt(static_cast<double>(d)));
        Tensor m3({3});
        vr.fill_gaussian(m3, 0.1);
        const int in_w = vs.add("var.in_proj.w", std::move(inw));
        const int in_b = vs.add("var.in_proj.b", Tensor({d}));
        const int head_w = vs.add("var.head.w", std::move(hw));
        const int head_b = vs.add("var.head.b", Tensor({3}));
        const int mask3 = vs.add("var.mask_token", std::move(m3));
        MaskToken raw_mask;
        raw_mask.ps = &vs;
        raw_mask.embedding = mask3;

        const int cells = stack.enc.cfg.cells();
        const int patch = stack.enc.cfg.patch;
        ControlNetModel cnm;
        cnm.init(dm, mix_seed(seed, variant), 3);

        auto imgg_hidden = [&](Tape& tape, const std::vector<int>& cap, Var rows3) {
            Var proj = tape.linear(rows3, tape.param(vs, in_w), tape.param(vs, in_b));
            SequenceInput in;
            in.caption = cap;
            in.img_g_rows = proj;
            MllmOutput out = mllm_forward(tape, stack.mllm, stack.enc, in);
            std::vector<int> gidx = positions_of(out.segments, true);
            return tape.select_rows(out.hidden, gidx);
        };

        // bridge phase: masked prediction of thumbnail cells
        {
            Adam adam_gen(stack.ps, stack.ps.ids_with_prefix("gen."), lr);
            Adam adam_var(vs, vs.ids_with_prefix("var."), lr);
            Rng ratio_rng(mix_seed(seed, "variant-ratio"));
            Rng mask_rng(mix_seed(seed, "variant-mask"));
            for (int step = 0; step < bridge_steps; ++step) {
                Tape tape;
                std::vector<Var> batch_losses;
                for (int i : plan.per_step[static_cast<size_t>(step)]) {
                    const PatchGrid thumb = thumbnail_grid(data.render(i), patch);
                    const double ratio = truncated_normal(ratio_rng, 1.0, 0.25, 0.7, 1.0);
                    const auto mask_set = sample_training_mask(mask_rng, cells, ratio);
                    std::vector<uint8_t> plane(static_cast<size_t>(cells), 0);
                    for (int mi : mask_set) plane[static_cast<size_t>(mi)] = 1;
                    Var rows3 = substitute_masks_t(tape, thumb, mask_set, raw_mask);
                    Var hid = imgg_hidden(tape, data.caption_ids(i), rows3);
                    Var pred = tape.linear(hid, tape.param(vs, head_w), tape.param(vs, head_b));
                    batch_losses.push_back(
                        tape.masked_row_mse(pred, tape.constant(flatten_grid(thumb)), plane));
                }
                Var loss = batch_mean(tape, batch_losses);
                check_finite(loss->val.v[0], "raw-pixel-latent/bridge", step);
                stack.ps.zero_grads();
                vs.zero_grads();
                tape.backward(loss);
                adam_gen.step();
                adam_var.step();
            }
        }
        train_flow_conditioner(
            cnm.ps, cnm.ps.ids_with_prefix("cn."), dm, data, plan, bridge_steps, budget_steps, lr,
            seed, "raw-pixel-latent/cn",
            [&](Tape& tape, int i, const Tensor& z_t, double t, const std::vector<int>& cap) {
                const PatchGrid ctrl =
                    pool_to_count(thumbnail_grid(data.render(i), patch), base_cfg.token_count);
                auto res =
                    controlnet_forward_t(tape, cnm.cn, z_t, t, cap, tape.constant(ctrl.data), 1.0);
                return backbone_forward_t(tape, dm.bb, z_t, t, cap, &res);
            });

        row.metrics = eval_generation(ctx, seed, [&](int i, uint64_t s) {
            const std::vector<int> cap = ctx.val->caption_ids(i);
            GridPredictor pred3 = [&](const PatchGrid& current, const std::vector<uint8_t>&) {
                Tape tape(false);
                Var hid = imgg_hidden(tape, cap, tape.constant(flatten_grid(current)));
                Var pred = tape.linear(hid, tape.param(vs, head_w), tape.param(vs, head_b));
                return reshape_to_grid(pred->val, current.h, current.w);
            };
            Rng order_rng(mix_seed(s, "mar-order"));
            const int g = stack.enc.cfg.grid_h();
            const InferenceSchedule schedule =
                build_inference_schedule(order_rng, cells, ctx.mar_steps);
            const PatchGrid grid =
                mar_generate(pred3, 3, g, g, vs.at(mask3).value, schedule);
            const PatchGrid ctrl = pool_to_count(grid, base_cfg.token_count);
            SampleOptions so{ctx.diff_steps, ctx.scale, s};
            return sample_image(dm.bb, &cnm.cn, &ctrl, cap, so);
        });
    }

    row.wall_clock = now_sec() - wall0;
    return row;
}

std::vector<ReportRow> sweep_token_count(const std::vector<int>& counts, int budget_steps,
                                         const std::vector<uint64_t>& seeds,
                                         const TrainConfig& base_cfg, HarnessContext& ctx) {
    std::vector<ReportRow> rows;
    for (int count : counts) {
        PF_CHECK(count == 1 || count == 4 || count == 16 || count == 64,
                 "token count must be a pooled square of the 8x8 grid");
        for (uint64_t seed : seeds) {
            TrainConfig cfg = base_cfg;
            cfg.token_count = count;
            const double wall0 = now_sec();
            const BatchPlan plan =
                make_batch_plan(seed, budget_steps, cfg.batch, ctx.train->size());
            ControlNetModel cnm;
            cnm.init(*ctx.dm, mix_seed(seed, "tc-" + std::to_string(count)));
            train_flow_conditioner(
                cnm.ps, cnm.ps.ids_with_prefix("cn."), *ctx.dm, *ctx.train, plan, 0, budget_steps,
                cfg.lr, seed, "token-count/cn",
                [&](Tape& tape, int i, const Tensor& z_t, double t, const std::vector<int>& cap) {
                    const PatchGrid ctrl =
                        pool_to_count(encode_image(ctx.train->render(i), ctx.stack->enc), count);
                    auto res = controlnet_forward_t(tape, cnm.cn, z_t, t, cap,
                                                    tape.constant(ctrl.data), 1.0);
                    return backbone_forward_t(tape, ctx.dm->bb, z_t, t, cap, &res);
                });
            // teacher-forced reconstruction of validation images
            ReportRow row;
            row.sweep = "token-count";
            row.key = std::to_string(count);
            row.seed = seed;
            row.batch_chain = plan.chain;
            row.config_hash = cfg.config_hash_excluding("token_count");
            row.metrics = eval_generation(ctx, seed, [&](int i, uint64_t s) {
                const PatchGrid ctrl =
                    pool_to_count(encode_image(ctx.val->render(i), ctx.stack->enc), count);
                SampleOptions so{ctx.diff_steps, ctx.scale, s};
                return sample_image(ctx.dm->bb, &cnm.cn, &ctrl, ctx.val->caption_ids(i), so);
            });
            row.wall_clock = now_sec() - wall0;
            rows.push_back(std::move(row));
        }
    }
    for (const auto& r : rows)
        PF_CHECK(r.config_hash == rows[0].config_hash, "token-count sweep varied a fixed field");
    return rows;
}

std::vector<ReportRow> sweep_decoding_steps(const std::vector<int>& steps_list, int budget_steps,
                                            const std::vector<uint64_t>& seeds,
                                            const TrainConfig& base_cfg, HarnessContext& ctx) {
    std::vector<ReportRow> rows;
    const int cells = ctx.stack->enc.cfg.cells();
    for (int k : steps_list)
        PF_CHECK(k >= 1 && k <= cells, "decoding steps must lie in [1, token count]");

    for (uint64_t seed : seeds) {
        // one trained clip-latent pipeline per seed, swept at fixed weights
        const BatchPlan plan = make_batch_plan(seed, budget_steps, base_cfg.batch, ctx.train->size());
        const int bridge_steps = budget_steps * 2 / 3;
        reset_generation_branch(*ctx.stack, seed);
        train_bridge_masked(*ctx.stack, ctx.stack->enc, *ctx.train, plan, 0, bridge_steps,
                            base_cfg.lr, seed, "decode-steps/bridge");
        ControlNetModel cnm;
        cnm.init(*ctx.dm, mix_seed(seed, "decode-steps"));
        train_flow_conditioner(
            cnm.ps, cnm.ps.ids_with_prefix("cn."), *ctx.dm, *ctx.train, plan, bridge_steps,
            budget_steps, base_cfg.lr, seed, "decode-steps/cn",
            [&](Tape& tape, int i, const Tensor& z_t, double t, const std::vector<int>& cap) {
                const PatchGrid ctrl = pool_to_count(
                    encode_image(ctx.train->render(i), ctx.stack->enc), base_cfg.token_count);
                auto res = controlnet_forward_t(tape, cnm.cn, z_t, t, cap,
                                                tape.constant(ctrl.data), 1.0);
                return backbone_forward_t(tape, ctx.dm->bb, z_t, t, cap, &res);
            });

        for (int k : steps_list) {
            ReportRow row;
            row.sweep = "decode-steps";
            row.key = std::to_string(k);
            row.seed = seed;
            row.batch_chain = plan.chain;
            row.config_hash = base_cfg.config_hash();
            double mar_total = 0.0;
            row.metrics = eval_generation(ctx, seed ^ static_cast<uint64_t>(k), [&](int i, uint64_t s) {
                GenOptions go{k, ctx.diff_steps, ctx.scale, s, base_cfg.token_count};
                GenTiming timing;
                Image img = generate_image(*ctx.stack, *ctx.dm, &cnm, ctx.val->caption_ids(i), go,
                                           nullptr, &timing);
                mar_total += timing.mar_seconds;
                return img;
            });
            row.wall_clock = mar_total;
            rows.push_back(std::move(row));
        }
    }
    for (const auto& r : rows)
        PF_CHECK(r.config_hash == rows[0].config_hash, "decode-steps sweep varied a fixed field");
    return rows;
}

void write_reports(const std::string& out_dir, const std::vector<ReportRow>& rows) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    std::ofstream csv(fs::path(out_dir) / "metrics.csv");
    PF_CHECK(csv.good(), "cannot write metrics.csv in " + out_dir);
    csv << "# quality proxies: toy-frechet = Frechet distance between Gaussian fits of frozen\n"
           "# toy-encoder features (stand-in for FID/sFID/IS); psnr/ssim standard; lpips dropped.\n"
           "# raw-pixel-latent rows are a VAE stand-in. wall clock lives in timings.csv.\n";
    csv << "sweep,key,seed,config_hash,batch_chain,masked_mse,psnr,ssim,frechet,note\n";
    csv.precision(10);
    for (const auto& r : rows)
        csv << r.sweep << ',' << r.key << ',' << r.seed << ',' << std::hex << r.config_hash << ','
            << r.batch_chain << std::dec << ',' << r.metrics.masked_mse << ',' << r.metrics.psnr
            << ',' << r.metrics.ssim << ',' << r.metrics.frechet << ',' << r.note << '\n';
    PF_CHECK(csv.good(), "write failed: metrics.csv");

    std::ofstream tcsv(fs::path(out_dir) / "timings.csv");
    tcsv << "sweep,key,seed,wall_clock_sec\n";
    for (const auto& r : rows)
        tcsv << r.sweep << ',' << r.key << ',' << r.seed << ',' << r.wall_clock << '\n';

    std::ofstream jl(fs::path(out_dir) / "report_long.jsonl");
    for (const auto& r : rows) {
        const std::pair<const char*, double> metrics[] = {{"masked_mse", r.metrics.masked_mse},
                                                          {"psnr", r.metrics.psnr},
                                                          {"ssim", r.metrics.ssim},
                                                          {"frechet", r.metrics.frechet}};
        for (const auto& [name, value] : metrics) {
            nlohmann::json j;
            j["sweep"] = r.sweep;
            j["key"] = r.key;
            j["seed"] = r.seed;
            j["metric"] = name;
            j["value"] = value;
            jl << j.dump() << '\n';
        }
    }
}

}  // namespace patchflow
