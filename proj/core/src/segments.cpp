#include "patchflow/segments.hpp"

#include "patchflow/tensor.hpp"

namespace patchflow {

const char* modality_name(Modality m) {
    switch (m) {
        case Modality::Text: return "text";
        case Modality::ImgU: return "img-u";
        case Modality::ImgG: return "img-g";
    }
    return "?";
}

void validate_segments(const std::vector<Segment>& segments) {
    PF_CHECK(!segments.empty(), "segment list is empty");
    int pos = 0;
    for (const auto& s : segments) {
        PF_CHECK(s.length > 0, "segment length must be positive");
        PF_CHECK(s.start == pos, "segments must tile the sequence contiguously");
        pos += s.length;
    }
}

int total_length(const std::vector<Segment>& segments) {
    int n = 0;
    for (const auto& s : segments) n += s.length;
    return n;
}

AttentionMask AttentionMask::full(int n) {
    AttentionMask m;
    m.n = n;
    m.allowed.assign(static_cast<size_t>(n) * n, 1);
    return m;
}

AttentionMask build_attention_mask(const std::vector<Segment>& segments) {
    validate_segments(segments);
    const int n = total_length(segments);

    // per-token modality and segment index
    std::vector<Modality> mod(static_cast<size_t>(n));
    std::vector<int> seg(static_cast<size_t>(n));
    for (size_t si = 0; si < segments.size(); ++si) {
        const auto& s = segments[si];
        for (int t = s.start; t < s.start + s.length; ++t) {
            mod[static_cast<size_t>(t)] = s.modality;
            seg[static_cast<size_t>(t)] = static_cast<int>(si);
        }
    }

    AttentionMask m;
    m.n = n;
    m.allowed.assign(static_cast<size_t>(n) * n, 0);
    for (int q = 0; q < n; ++q) {
        const Modality qm = mod[static_cast<size_t>(q)];
        for (int k = 0; k < n; ++k) {
            const Modality km = mod[static_cast<size_t>(k)];
            bool ok = false;
            if (qm == Modality::ImgG) {
                ok = true;
            } else if (km == Modality::ImgG) {
                ok = false;
            } else if (qm == Modality::Text) {
                ok = k <= q;
            } else {
                // ImgU query: earlier segments fully visible, own segment
                // bidirectional, later segments hidden
                ok = seg[static_cast<size_t>(k)] <= seg[static_cast<size_t>(q)];
            }
            m.set(q, k, ok);
        }
    }
    return m;
}

}  // namespace patchflow
