#pragma once

#include <optional>
#include <string>
#include <vector>

#include "patchflow/autograd.hpp"
#include "patchflow/encoder.hpp"
#include "patchflow/grid.hpp"
#include "patchflow/segments.hpp"

namespace patchflow {

struct MllmConfig {
    int d = 16;
    int layers = 4;
    int heads = 2;
    int vocab = 64;
    int text_len = 12;

    int mlp_hidden() const { return 4 * d; }
};

/// One layer's parameter ids: pre-norm gains, fused QKV, output projection,
/// and a 2-layer GELU MLP. The base set is frozen after pretraining; the gen
/// set is its trainable copy used by ImgG tokens only.
struct BlockParamIds {
    int norm1 = -1;
    int wqkv = -1, bqkv = -1;  // [3d, d], [3d]
    int wo = -1, bo = -1;      // [d, d], [d]
    int norm2 = -1;
    int w1 = -1, b1 = -1;      // [hidden, d], [hidden]
    int w2 = -1, b2 = -1;      // [d, hidden], [d]
};

struct MllmParams {
    MllmConfig cfg;
    ParamStore* ps = nullptr;

    int tok_emb = -1;   // base.tok_emb  [vocab, d]
    int text_pos = -1;  // base.text_pos [text_len, d]
    std::vector<BlockParamIds> base, gen;
    int base_final_norm = -1, gen_final_norm = -1;
    int text_head_w = -1, text_head_b = -1;      // base, [vocab, d]
    int vision_head_w = -1, vision_head_b = -1;  // gen,  [d, d]

    static MllmParams create(ParamStore& ps, const MllmConfig& cfg, Rng& rng);
};

/// Copy every base block tensor (QKV, output proj, MLP, norms) into the gen
/// branch and reinitialize the vision head from `rng` — the only randomly
/// initialized generation-side parameter.
void init_generation_branch(MllmParams& p, Rng& rng);

std::vector<int> positions_of(const std::vector<Segment>& segments, bool img_g);

/// One branched block: Text/ImgU rows run on base weights, ImgG rows on gen
/// weights, with a single joint attention under `mask`.
Var block_forward(Tape& tape, Var h, const std::vector<Segment>& segments,
                  const AttentionMask& mask, const MllmParams& p, int layer,
                  Tensor* attn_probs = nullptr);

Var vision_head(Tape& tape, Var hidden, const MllmParams& p);
Var text_head(Tape& tape, Var hidden, const MllmParams& p);

struct SequenceInput {
    std::vector<int> caption;            // token ids, 0 < len <= cfg.text_len
    const PatchGrid* img_u = nullptr;    // optional understanding grid
    Var img_g_rows;                      // optional [cells, d] ImgG input rows
};

struct MllmOutput {
    std::vector<Segment> segments;
    Var hidden;        // [N, d] after the routed final norm
    Var text_logits;   // [text_len(caption), vocab]
    Var img_g_pred;    // [cells, d] vision head output; null without ImgG
};

/// Sequence layout: [Text][ImgU?][ImgG?]. Image tokens (both kinds) get the
/// encoder's 2-D positional table added at input; text gets learned absolute
/// positions.
MllmOutput mllm_forward(Tape& tape, const MllmParams& p, const ToyEncoderParams& enc,
                        const SequenceInput& in);

}  // namespace patchflow
