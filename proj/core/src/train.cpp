#include "patchflow/train.hpp"

#include <cmath>
#include <cstring>
#include <map>

#include <nlohmann/json.hpp>

namespace patchflow {

ToyDims ToyDims::defaults() {
    ToyDims d;
    d.enc = ToyEncoderConfig{};
    d.mllm = MllmConfig{};
    d.dm = DiffusionConfig{};
    d.dm.control_d = d.mllm.d;
    return d;
}

std::string TrainConfig::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["phase"] = phase;
    j["steps"] = steps;
    j["batch"] = batch;
    j["lr"] = lr;
    j["data_seed"] = data_seed;
    j["data_n"] = data_n;
    j["token_count"] = token_count;
    j["dims"]["enc"] = {{"patch", dims.enc.patch}, {"d", dims.enc.d}, {"image", dims.enc.image},
                        {"mixing_layers", dims.enc.mixing_layers}};
    j["dims"]["mllm"] = {{"d", dims.mllm.d}, {"layers", dims.mllm.layers},
                         {"heads", dims.mllm.heads}, {"vocab", dims.mllm.vocab},
                         {"text_len", dims.mllm.text_len}};
    j["dims"]["dm"] = {{"d", dims.dm.d}, {"heads", dims.dm.heads},
                       {"double_blocks", dims.dm.double_blocks},
                       {"single_blocks", dims.dm.single_blocks}, {"image", dims.dm.image},
                       {"latent_patch", dims.dm.latent_patch}, {"vocab", dims.dm.vocab},
                       {"text_len", dims.dm.text_len}, {"control_d", dims.dm.control_d},
                       {"cn_double", dims.dm.cn_double}, {"cn_single", dims.dm.cn_single}};
    return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& s) {
    const auto j = nlohmann::json::parse(s);
    TrainConfig c;
    c.seed = j.value("seed", 0ull);
    c.phase = j.value("phase", std::string());
    c.steps = j.value("steps", 0);
    c.batch = j.value("batch", 8);
    c.lr = j.value("lr", 1e-3);
    c.data_seed = j.value("data_seed", 7ull);
    c.data_n = j.value("data_n", 1024);
    c.token_count = j.value("token_count", 64);
    c.dims = ToyDims::defaults();
    if (j.contains("dims")) {
        const auto& d = j["dims"];
        if (d.contains("enc")) {
            c.dims.enc.patch = d["enc"].value("patch", c.dims.enc.patch);
            c.dims.enc.d = d["enc"].value("d", c.dims.enc.d);
            c.dims.enc.image = d["enc"].value("image", c.dims.enc.image);
            c.dims.enc.mixing_layers = d["enc"].value("mixing_layers", c.dims.enc.mixing_layers);
        }
        if (d.contains("mllm")) {
            c.dims.mllm.d = d["mllm"].value("d", c.dims.mllm.d);
            c.dims.mllm.layers = d["mllm"].value("layers", c.dims.mllm.layers);
            c.dims.mllm.heads = d["mllm"].value("heads", c.dims.mllm.heads);
            c.dims.mllm.vocab = d["mllm"].value("vocab", c.dims.mllm.vocab);
            c.dims.mllm.text_len = d["mllm"].value("text_len", c.dims.mllm.text_len);
        }
        if (d.contains("dm")) {
            c.dims.dm.d = d["dm"].value("d", c.dims.dm.d);
            c.dims.dm.heads = d["dm"].value("heads", c.dims.dm.heads);
            c.dims.dm.double_blocks = d["dm"].value("double_blocks", c.dims.dm.double_blocks);
            c.dims.dm.single_blocks = d["dm"].value("single_blocks", c.dims.dm.single_blocks);
            c.dims.dm.image = d["dm"].value("image", c.dims.dm.image);
            c.dims.dm.latent_patch = d["dm"].value("latent_patch", c.dims.dm.latent_patch);
            c.dims.dm.vocab = d["dm"].value("vocab", c.dims.dm.vocab);
            c.dims.dm.text_len = d["dm"].value("text_len", c.dims.dm.text_len);
            c.dims.dm.control_d = d["dm"].value("control_d", c.dims.dm.control_d);
            c.dims.dm.cn_double = d["dm"].value("cn_double", c.dims.dm.cn_double);
            c.dims.dm.cn_single = d["dm"].value("cn_single", c.dims.dm.cn_single);
        }
    }
    return c;
}

uint64_t TrainConfig::config_hash() const { return fnv1a_str(to_json()); }

uint64_t TrainConfig::config_hash_excluding(const std::string& field) const {
    auto j = nlohmann::json::parse(to_json());
    PF_CHECK(j.contains(field), "config_hash_excluding: no field " + field);
    j[field] = "<swept>";
    return fnv1a_str(j.dump());
}

// ---------------------------------------------------------------------------
// Model bundles
// ---------------------------------------------------------------------------

void MllmStack::init(const ToyDims& d, uint64_t seed) {
    PF_CHECK(ps.size() == 0, "stack already initialized");
    dims = d;
    PF_CHECK(d.enc.d == d.mllm.d, "encoder and transformer widths must match");
    Rng rng(mix_seed(seed, "stack-init"));
    enc = ToyEncoderParams::create(ps, d.enc, "enc", rng);
    mllm = MllmParams::create(ps, d.mllm, rng);
    mask_token = MaskToken::create(ps, d.mllm.d, "gen", rng);
    Tensor rw({d.enc.patch_dim(), d.enc.d});
    rng.fill_gaussian(rw, 1.0 / std::sqrt(static_cast<double>(d.enc.d)));
    recon_w = ps.add("aux.recon.w", std::move(rw));
    recon_b = ps.add("aux.recon.b", Tensor({d.enc.patch_dim()}));
    init_generation_branch(mllm, rng);
}

void MllmStack::freeze_base() {
    ps.set_frozen_prefix("enc.", true);
    ps.set_frozen_prefix("base.", true);
    ps.set_frozen_prefix("aux.", true);
}

bool MllmStack::base_frozen() const {
    for (const std::string& prefix : {std::string("enc."), std::string("base."), std::string("aux.")})
        for (int id : ps.ids_with_prefix(prefix))
            if (!ps.at(id).frozen) return false;
    return true;
}

void DiffusionModel::init(const DiffusionConfig& c, uint64_t seed) {
    PF_CHECK(ps.size() == 0, "diffusion model already initialized");
    cfg = c;
    Rng rng(mix_seed(seed, "dm-init"));
    bb = BackboneParams::create(ps, cfg, "dm", rng);
}

void ControlNetModel::init(const DiffusionModel& dm, uint64_t seed, int control_d) {
    PF_CHECK(ps.size() == 0, "controlnet already initialized");
    Rng rng(mix_seed(seed, "cn-init"));
    cn = LatentControlNet::create(ps, dm.bb, "cn", rng, control_d);
}

// ---------------------------------------------------------------------------
// Shared loop machinery
// ---------------------------------------------------------------------------

namespace {

struct Loop {
    const TrainConfig& cfg;
    ParamStore& ps;
    std::vector<int> trainable;
    Adam adam;
    std::map<std::string, Rng> rngs;  // ordered for deterministic serialization
    int start_step = 0;
    uint64_t chain = 1469598103934665603ull;

    Loop(const TrainConfig& cfg, ParamStore& ps, std::vector<int> ids,
         const std::vector<std::string>& rng_tags)
        : cfg(cfg), ps(ps), trainable(ids), adam(ps, std::move(ids), cfg.lr) {
        for (const auto& tag : rng_tags)
            rngs.emplace(tag, Rng(mix_seed(cfg.seed, cfg.phase + "." + tag)));
    }

    Rng& rng(const std::string& tag) {
        auto it = rngs.find(tag);
        PF_CHECK(it != rngs.end(), "unknown rng stream: " + tag);
        return it->second;
    }

    void resume(const CheckpointData& ck) {
        restore_store(ck, ps);
        adam.restore_state(ck, "opt");
        for (auto& [tag, r] : rngs) {
            bool found = false;
            for (const auto& [name, state] : ck.rng_states)
                if (name == tag) {
                    r.set_state(state);
                    found = true;
                }
            PF_CHECK(found, "checkpoint missing rng stream: " + tag);
        }
        start_step = static_cast<int>(ck.step);
        uint64_t saved_chain = 0;
        const NamedTensor* c = ck.find("meta.batch_chain");
        if (c) {
            std::memcpy(&saved_chain, c->t.v.data(), sizeof(uint64_t));
            chain = saved_chain;
        }
    }

    std::vector<int> draw_batch(int step, int n) {
        std::vector<int> idx(static_cast<size_t>(cfg.batch));
        Rng& r = rng("data");
        for (auto& i : idx) i = r.uniform_int(n);
        chain = fnv1a(&step, sizeof(step), chain);
        chain = fnv1a(idx.data(), idx.size() * sizeof(int), chain);
        return idx;
    }

    CheckpointData snapshot(int step) const {
        CheckpointData ck;
        ck.config_json = cfg.to_json();
        ck.step = static_cast<uint64_t>(step);
        for (const auto& [tag, r] : rngs) ck.rng_states.emplace_back(tag, r.state());
        append_store(ck, ps);
        adam.append_state(ck, "opt");
        Tensor c({1});
        std::memcpy(c.v.data(), &chain, sizeof(uint64_t));
        ck.tensors.push_back({"meta.batch_chain", false, c});
        return ck;
    }
};

void check_loss(double loss, const TrainConfig& cfg, int step) {
    PF_CHECK(std::isfinite(loss), "training diverged (non-finite loss) in phase " + cfg.phase +
                                      " at step " + std::to_string(step));
}

Var batch_mean(Tape& tape, const std::vector<Var>& losses) {
    Var sum = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) sum = tape.add(sum, losses[i]);
    return tape.scale(sum, 1.0 / static_cast<double>(losses.size()));
}

/// Frozen-encoder grids are reused across steps.
class GridCache {
public:
    GridCache(const SyntheticDataset& data, const ToyEncoderParams& enc)
        : data_(data), enc_(enc), cache_(static_cast<size_t>(data.size())) {}

    const PatchGrid& get(int i) {
        auto& slot = cache_[static_cast<size_t>(i)];
        if (!slot.has_value()) slot = encode_image(data_.render(i), enc_);
        return *slot;
    }

private:
    const SyntheticDataset& data_;
    const ToyEncoderParams& enc_;
    std::vector<std::optional<PatchGrid>> cache_;
};

TrainResult finish(Loop& loop, const TrainConfig& cfg, std::vector<double> losses) {
    TrainResult res;
    res.losses = std::move(losses);
    res.first_loss = res.losses.empty() ? 0.0 : res.losses.front();
    res.last_loss = res.losses.empty() ? 0.0 : res.losses.back();
    res.batch_chain_hash = loop.chain;
    res.checkpoint = loop.snapshot(cfg.steps);
    return res;
}

}  // namespace

PatchGrid pool_to_count(const PatchGrid& g, int token_count) {
    PatchGrid out = g;
    while (out.cells() > token_count) {
        PF_CHECK(out.h % 2 == 0 && out.w % 2 == 0, "cannot pool grid to requested token count");
        out = pool2x2_mean(out);
    }
    PF_CHECK(out.cells() == token_count, "token count must be cells/4^k");
    return out;
}

// ---------------------------------------------------------------------------
// Phase: pretrain-mllm
// ---------------------------------------------------------------------------

TrainResult pretrain_mllm_stack(const TrainConfig& cfg, const SyntheticDataset& data,
                                MllmStack& stack, const PhaseOptions& opts) {
    PF_CHECK(data.size() > 0, "dataset is empty");
    ParamStore& ps = stack.ps;
    std::vector<int> ids = ps.ids_with_prefix("enc.");
    for (int id : ps.ids_with_prefix("base.")) ids.push_back(id);
    for (int id : ps.ids_with_prefix("aux.")) ids.push_back(id);
    Loop loop(cfg, ps, ids, {"data"});
    if (opts.resume) loop.resume(*opts.resume);

    std::vector<double> losses;
    for (int step = loop.start_step; step < cfg.steps; ++step) {
        const auto batch = loop.draw_batch(step, data.size());
        Tape tape;
        std::vector<Var> batch_losses;
        for (int i : batch) {
            const Image img = data.render(i);
            const std::vector<int> cap = data.caption_ids(i);
            Var grid = encode_image_t(tape, img, stack.enc);

            // next-token captioning; the image precedes the text, so the
            // sequence is assembled here rather than via mllm_forward
            Var grid_rows = tape.chw_to_rows(grid);
            Var u_rows = tape.add(grid_rows, tape.param(ps, stack.enc.pos));
            std::vector<int> tpos(cap.size());
            for (size_t t = 0; t < cap.size(); ++t) tpos[t] = static_cast<int>(t);
            Var t_rows = tape.add(tape.embedding(tape.param(ps, stack.mllm.tok_emb), cap),
                                  tape.select_rows(tape.param(ps, stack.mllm.text_pos), tpos));
            const int cells = stack.enc.cfg.cells();
            const int n_text = static_cast<int>(cap.size());
            std::vector<Segment> segs = {{Modality::ImgU, 0, cells},
                                         {Modality::Text, cells, n_text}};
            Var h = tape.concat_rows({u_rows, t_rows});
            const AttentionMask mask = build_attention_mask(segs);
            for (int l = 0; l < stack.mllm.cfg.layers; ++l)
                h = block_forward(tape, h, segs, mask, stack.mllm, l);
            std::vector<int> text_idx(static_cast<size_t>(n_text));
            for (int t = 0; t < n_text; ++t) text_idx[static_cast<size_t>(t)] = cells + t;
            Var ht = tape.rmsnorm(tape.select_rows(h, text_idx),
                                  tape.param(ps, stack.mllm.base_final_norm));
            Var logits = text_head(tape, ht, stack.mllm);
            std::vector<int> targets(cap.size(), -1);
            for (size_t t = 0; t + 1 < cap.size(); ++t) targets[t] = cap[t + 1];
            Var ce = tape.cross_entropy_rows(logits, targets);

            // patch reconstruction straight off the encoder grid
            Var rec = tape.linear(grid_rows, tape.param(ps, stack.recon_w),
                                  tape.param(ps, stack.recon_b));
            Var target = tape.constant(flatten_grid(space_to_depth(img, stack.enc.cfg.patch)));
            Var rmse = tape.mse(rec, target);
            batch_losses.push_back(tape.add(ce, rmse));
        }
        Var loss = batch_mean(tape, batch_losses);
        check_loss(loss->val.v[0], cfg, step);
        losses.push_back(loss->val.v[0]);
        ps.zero_grads();
        tape.backward(loss);
        loop.adam.step();
        if (opts.checkpoint_at == step + 1 && opts.mid_checkpoint)
            *opts.mid_checkpoint = loop.snapshot(step + 1);
    }
    return finish(loop, cfg, std::move(losses));
}

// ---------------------------------------------------------------------------
// Phase: pretrain-backbone
// ---------------------------------------------------------------------------

TrainResult pretrain_toy_backbone(const TrainConfig& cfg, const SyntheticDataset& data,
                                  DiffusionModel& dm, const PhaseOptions& opts) {
    PF_CHECK(data.size() > 0, "dataset is empty");
    ParamStore& ps = dm.ps;
    Loop loop(cfg, ps, ps.ids_with_prefix("dm."), {"data", "noise", "time"});
    if (opts.resume) loop.resume(*opts.resume);

    std::vector<double> losses;
    for (int step = loop.start_step; step < cfg.steps; ++step) {
        const auto batch = loop.draw_batch(step, data.size());
        Tape tape;
        std::vector<Var> batch_losses;
        for (int i : batch) {
            const Image img = data.render(i);
            const Tensor z0 = space_to_depth(img, dm.cfg.latent_patch).data;
            Tensor eps(z0.shape);
            loop.rng("noise").fill_gaussian(eps, 1.0);
            const double t = loop.rng("time").uniform();
            const Tensor z_t = flow_forward_process(z0, eps, t);
            Var v = backbone_forward_t(tape, dm.bb, z_t, t, data.caption_ids(i));
            batch_losses.push_back(flow_matching_loss_t(tape, v, z0, eps));
        }
        Var loss = batch_mean(tape, batch_losses);
        check_loss(loss->val.v[0], cfg, step);
        losses.push_back(loss->val.v[0]);
        ps.zero_grads();
        tape.backward(loss);
        loop.adam.step();
        if (opts.checkpoint_at == step + 1 && opts.mid_checkpoint)
            *opts.mid_checkpoint = loop.snapshot(step + 1);
    }
    return finish(loop, cfg, std::move(losses));
}

// ---------------------------------------------------------------------------
// Phase: train-branch
// ---------------------------------------------------------------------------

TrainResult train_generation_branch(const TrainConfig& cfg, const SyntheticDataset& data,
                                    MllmStack& stack, const PhaseOptions& opts) {
    PF_CHECK(data.size() > 0, "dataset is empty");
    PF_CHECK(stack.base_frozen(), "generation-branch training requires a frozen base");
    ParamStore& ps = stack.ps;
    const uint64_t base_sum_before = ps.checksum("base.");
    const uint64_t enc_sum_before = ps.checksum("enc.");

    Loop loop(cfg, ps, ps.ids_with_prefix("gen."), {"data", "ratio", "mask", "ctx"});
    if (opts.resume) loop.resume(*opts.resume);
    GridCache grids(data, stack.enc);
    const int cells = stack.enc.cfg.cells();

    std::vector<double> losses;
    for (int step = loop.start_step; step < cfg.steps; ++step) {
        const auto batch = loop.draw_batch(step, data.size());
        Tape tape;
        std::vector<Var> batch_losses;
        for (int i : batch) {
            const PatchGrid& target = grids.get(i);
            const double ratio =
                truncated_normal(loop.rng("ratio"), 1.0, 0.25, 0.7, 1.0);
            const auto mask_set = sample_training_mask(loop.rng("mask"), cells, ratio);
            std::vector<uint8_t> plane(static_cast<size_t>(cells), 0);
            for (int m : mask_set) plane[static_cast<size_t>(m)] = 1;

            SequenceInput in;
            in.caption = data.caption_ids(i);
            // optional unrelated ImgU context
            const PatchGrid* ctx = nullptr;
            if (loop.rng("ctx").uniform() < 0.5) {
                const int j = loop.rng("ctx").uniform_int(data.size());
                ctx = &grids.get(j);
                in.img_u = ctx;
            }
            in.img_g_rows = substitute_masks_t(tape, target, mask_set, stack.mask_token);
            MllmOutput out = mllm_forward(tape, stack.mllm, stack.enc, in);
            batch_losses.push_back(tape.masked_row_mse(
                out.img_g_pred, tape.constant(flatten_grid(target)), plane));
        }
        Var loss = batch_mean(tape, batch_losses);
        check_loss(loss->val.v[0], cfg, step);
        losses.push_back(loss->val.v[0]);
        ps.zero_grads();
        tape.backward(loss);
        loop.adam.step();
        if (opts.checkpoint_at == step + 1 && opts.mid_checkpoint)
            *opts.mid_checkpoint = loop.snapshot(step + 1);
    }
    PF_CHECK(ps.checksum("base.") == base_sum_before, "frozen base tensors changed");
    PF_CHECK(ps.checksum("enc.") == enc_sum_before, "frozen encoder tensors changed");
    return finish(loop, cfg, std::move(losses));
}

// ---------------------------------------------------------------------------
// Phase: train-controlnet
// ---------------------------------------------------------------------------

TrainResult train_latent_controlnet(const TrainConfig& cfg, const SyntheticDataset& data,
                                    ControlNetModel& cnm, const DiffusionModel& dm,
                                    const MllmStack& stack, const PhaseOptions& opts) {
    PF_CHECK(data.size() > 0, "dataset is empty");
    for (int id : dm.ps.ids_with_prefix("dm."))
        PF_CHECK(dm.ps.at(id).frozen, "controlnet training requires a frozen backbone");
    const uint64_t bb_sum_before = dm.ps.checksum("dm.");
    ParamStore& ps = cnm.ps;

    Loop loop(cfg, ps, ps.ids_with_prefix("cn."), {"data", "noise", "time"});
    if (opts.resume) loop.resume(*opts.resume);
    GridCache grids(data, stack.enc);

    std::vector<double> losses;
    for (int step = loop.start_step; step < cfg.steps; ++step) {
        const auto batch = loop.draw_batch(step, data.size());
        Tape tape;
        std::vector<Var> batch_losses;
        for (int i : batch) {
            const Image img = data.render(i);
            const Tensor z0 = space_to_depth(img, dm.cfg.latent_patch).data;
            Tensor eps(z0.shape);
            loop.rng("noise").fill_gaussian(eps, 1.0);
            const double t = loop.rng("time").uniform();
            const Tensor z_t = flow_forward_process(z0, eps, t);
            const PatchGrid ctrl = pool_to_count(grids.get(i), cfg.token_count);
            const std::vector<int> cap = data.caption_ids(i);
            auto res = controlnet_forward_t(tape, cnm.cn, z_t, t, cap,
                                            tape.constant(ctrl.data), 1.0);
            Var v = backbone_forward_t(tape, dm.bb, z_t, t, cap, &res);
            batch_losses.push_back(flow_matching_loss_t(tape, v, z0, eps));
        }
        Var loss = batch_mean(tape, batch_losses);
        check_loss(loss->val.v[0], cfg, step);
        losses.push_back(loss->val.v[0]);
        ps.zero_grads();
        tape.backward(loss);
        loop.adam.step();
        if (opts.checkpoint_at == step + 1 && opts.mid_checkpoint)
            *opts.mid_checkpoint = loop.snapshot(step + 1);
    }
    PF_CHECK(dm.ps.checksum("dm.") == bb_sum_before, "frozen backbone tensors changed");
    return finish(loop, cfg, std::move(losses));
}

// ---------------------------------------------------------------------------
// Inference helpers
// ---------------------------------------------------------------------------

std::vector<double> prompt_outputs(const MllmStack& stack, const std::vector<int>& caption,
                                   const PatchGrid* img_u) {
    Tape tape(false);
    SequenceInput in;
    in.caption = caption;
    in.img_u = img_u;
    MllmOutput out = mllm_forward(tape, stack.mllm, stack.enc, in);
    std::vector<double> blob = out.text_logits->val.v;
    blob.insert(blob.end(), out.hidden->val.v.begin(), out.hidden->val.v.end());
    return blob;
}

GridPredictor mllm_predictor(const MllmStack& stack, std::vector<int> caption) {
    const MllmStack* s = &stack;
    return [s, caption = std::move(caption)](const PatchGrid& current,
                                             const std::vector<uint8_t>&) {
        Tape tape(false);
        SequenceInput in;
        in.caption = caption;
        in.img_g_rows = tape.constant(flatten_grid(current));
        MllmOutput out = mllm_forward(tape, s->mllm, s->enc, in);
        return reshape_to_grid(out.img_g_pred->val, current.h, current.w);
    };
}

}  // namespace patchflow
