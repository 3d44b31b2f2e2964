#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace patchflow {

enum class Modality : uint8_t { Text = 0, ImgU = 1, ImgG = 2 };

const char* modality_name(Modality m);

/// Contiguous run of same-modality tokens. A valid segment list is ordered,
/// non-overlapping and tiles [0, N).
struct Segment {
    Modality modality;
    int start = 0;
    int length = 0;
};

void validate_segments(const std::vector<Segment>& segments);
int total_length(const std::vector<Segment>& segments);

/// Boolean N x N matrix; (q, k) true iff query q may attend key k.
struct AttentionMask {
    int n = 0;
    std::vector<uint8_t> allowed;  // row-major

    bool at(int q, int k) const { return allowed[static_cast<size_t>(q) * n + k] != 0; }
    void set(int q, int k, bool v) { allowed[static_cast<size_t>(q) * n + k] = v ? 1 : 0; }
    static AttentionMask full(int n);
};

/// Cross-modal visibility rules:
///   - a Text query at position i sees every non-ImgG token at positions <= i;
///   - an ImgU query sees all non-ImgG tokens of earlier segments plus its own
///     segment bidirectionally;
///   - an ImgG query sees every token;
///   - no Text or ImgU query ever sees an ImgG key.
AttentionMask build_attention_mask(const std::vector<Segment>& segments);

}  // namespace patchflow
