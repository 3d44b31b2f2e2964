#pragma once

#include <array>
#include <string>
#include <vector>

#include "patchflow/grid.hpp"
#include "patchflow/rng.hpp"

namespace patchflow {

/// Fixed word-level vocabulary shared by the transformer and the diffusion
/// text conditioning. Unknown words are an error.
struct Vocab {
    static constexpr int kSize = 64;  // table size; only the listed words are used
    static const std::vector<std::string>& words();
    static int bos();
    static int id(const std::string& word);
    static std::string word(int id);
    static std::vector<int> encode(const std::string& caption, bool with_bos = true);
    static std::string decode(const std::vector<int>& ids, bool skip_bos = true);
};

constexpr int kNumShapes = 4;   // circle square triangle cross
constexpr int kNumColors = 6;   // red green blue yellow magenta cyan
constexpr int kNumAnchors = 9;  // 3x3 grid of cell centers

struct SceneObject {
    int shape = 0;
    int color = 0;
    int anchor = 0;  // row-major cell index on the 3x3 anchor grid
    int jy = 0, jx = 0;  // centre jitter in {-1,0,1}; not captioned
    int shade = 4;       // shade level 0..4; not captioned
};

/// Two non-overlapping objects on a black background. Captions describe shape,
/// colour and anchor cell; jitter and shade stay irreducible given the caption.
struct Scene {
    std::array<SceneObject, 2> objects;
};

struct SyntheticDataset {
    uint64_t seed = 0;
    int image_size = 32;
    std::vector<Scene> scenes;

    static SyntheticDataset make(uint64_t seed, int n, int image_size = 32);

    int size() const { return static_cast<int>(scenes.size()); }
    Image render(int i) const;
    std::string caption(int i) const;
    std::vector<int> caption_ids(int i) const;  // BOS + 11 words = 12 ids
    /// Discrete class id over (shape, colour, anchor) of both objects.
    int64_t label(int i) const;
};

Image render_scene(const Scene& s, int image_size);
std::string scene_caption(const Scene& s);

/// Materialize a dataset directory: images/NNNNNN.ppm, captions.tsv
/// (id<TAB>caption<TAB>label) and meta.json. Byte-deterministic given (seed, n).
void write_dataset_dir(const SyntheticDataset& ds, const std::string& dir);

}  // namespace patchflow
