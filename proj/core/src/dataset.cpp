#include "patchflow/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace patchflow {

namespace {

const std::vector<std::string> kWords = {
    "<bos>", "a",      "and",      "red",    "green", "blue",  "yellow", "magenta",
    "cyan",  "circle", "square",   "triangle", "cross", "top",  "middle", "bottom",
    "left",  "center", "right",
};

constexpr int kColorBase = 3;   // index of "red"
constexpr int kShapeBase = 9;   // index of "circle"
constexpr int kVposBase = 13;   // index of "top"
constexpr int kHposBase = 16;   // index of "left"

const int kShadeLevels[5] = {200, 216, 232, 244, 255};

// colour channel patterns: red green blue yellow magenta cyan
const int kColorPattern[kNumColors][3] = {
    {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1},
};

int anchor_coord(int idx, int image_size) {
    // cell centres at 6, 16, 26 for the default 32x32 canvas
    const int step = image_size == 32 ? 10 : image_size / 3;
    const int first = image_size == 32 ? 6 : step / 2;
    return first + idx * step;
}

bool inside_shape(int shape, double dy, double dx) {
    switch (shape) {
        case 0:  // circle
            return dy * dy + dx * dx <= 3.5 * 3.5;
        case 1:  // square
            return std::abs(dx) <= 3.0 && std::abs(dy) <= 3.0;
        case 2:  // triangle, apex up
            return dy >= -3.0 && dy <= 3.0 && std::abs(dx) <= (dy + 3.0) / 2.0;
        case 3:  // cross
            return (std::abs(dx) <= 1.0 && std::abs(dy) <= 3.0) ||
                   (std::abs(dy) <= 1.0 && std::abs(dx) <= 3.0);
        default:
            PF_CHECK(false, "unknown shape id");
    }
    return false;
}

uint64_t scene_signature(const Scene& s) {
    uint64_t sig = 0;
    for (const auto& o : s.objects) {
        sig = sig * 1315423911u + static_cast<uint64_t>(o.shape);
        sig = sig * 1315423911u + static_cast<uint64_t>(o.color);
        sig = sig * 1315423911u + static_cast<uint64_t>(o.anchor);
        sig = sig * 1315423911u + static_cast<uint64_t>(o.jy + 1);
        sig = sig * 1315423911u + static_cast<uint64_t>(o.jx + 1);
        sig = sig * 1315423911u + static_cast<uint64_t>(o.shade);
    }
    return sig;
}

}  // namespace

const std::vector<std::string>& Vocab::words() { return kWords; }
int Vocab::bos() { return 0; }

int Vocab::id(const std::string& word) {
    for (size_t i = 0; i < kWords.size(); ++i)
        if (kWords[i] == word) return static_cast<int>(i);
    PF_CHECK(false, "unknown word: " + word);
    return -1;
}

std::string Vocab::word(int id) {
    PF_CHECK(id >= 0 && id < static_cast<int>(kWords.size()), "word id out of range");
    return kWords[static_cast<size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& caption, bool with_bos) {
    std::vector<int> ids;
    if (with_bos) ids.push_back(bos());
    std::istringstream is(caption);
    std::string w;
    while (is >> w) ids.push_back(id(w));
    return ids;
}

std::string Vocab::decode(const std::vector<int>& ids, bool skip_bos) {
    std::string out;
    for (int id : ids) {
        if (skip_bos && id == bos()) continue;
        if (!out.empty()) out += ' ';
        out += word(id);
    }
    return out;
}

SyntheticDataset SyntheticDataset::make(uint64_t seed, int n, int image_size) {
    PF_CHECK(n > 0, "dataset size must be positive");
    SyntheticDataset ds;
    ds.seed = seed;
    ds.image_size = image_size;
    Rng rng(mix_seed(seed, "dataset"));
    std::set<uint64_t> seen;
    while (static_cast<int>(ds.scenes.size()) < n) {
        Scene s;
        for (auto& o : s.objects) {
            o.shape = rng.uniform_int(kNumShapes);
            o.color = rng.uniform_int(kNumColors);
            o.anchor = rng.uniform_int(kNumAnchors);
            o.jy = rng.uniform_int(3) - 1;
            o.jx = rng.uniform_int(3) - 1;
            o.shade = rng.uniform_int(5);
        }
        if (s.objects[0].anchor == s.objects[1].anchor) continue;
        if (s.objects[0].anchor > s.objects[1].anchor) std::swap(s.objects[0], s.objects[1]);
        const uint64_t sig = scene_signature(s);
        if (!seen.insert(sig).second) continue;  // keep scenes distinct
        ds.scenes.push_back(s);
    }
    return ds;
}

Image render_scene(const Scene& s, int image_size) {
    Image img = Image::zeros(image_size, image_size);
    for (const auto& o : s.objects) {
        const int cy = anchor_coord(o.anchor / 3, image_size) + o.jy;
        const int cx = anchor_coord(o.anchor % 3, image_size) + o.jx;
        const double shade = static_cast<double>(kShadeLevels[o.shade]) / 255.0;
        for (int y = 0; y < image_size; ++y)
            for (int x = 0; x < image_size; ++x) {
                if (!inside_shape(o.shape, y - cy, x - cx)) continue;
                for (int c = 0; c < 3; ++c)
                    img.pixels.at3(c, y, x) = kColorPattern[o.color][c] ? shade : 0.0;
            }
    }
    return img;
}

std::string scene_caption(const Scene& s) {
    std::string out;
    for (size_t i = 0; i < s.objects.size(); ++i) {
        const auto& o = s.objects[i];
        if (i > 0) out += " and";
        out += " a " + kWords[static_cast<size_t>(kColorBase + o.color)] + " " +
               kWords[static_cast<size_t>(kShapeBase + o.shape)] + " " +
               kWords[static_cast<size_t>(kVposBase + o.anchor / 3)] + " " +
               kWords[static_cast<size_t>(kHposBase + o.anchor % 3)];
    }
    return out.substr(1);  // drop leading space
}

Image SyntheticDataset::render(int i) const {
    PF_CHECK(i >= 0 && i < size(), "dataset index out of range");
    return render_scene(scenes[static_cast<size_t>(i)], image_size);
}

std::string SyntheticDataset::caption(int i) const {
    PF_CHECK(i >= 0 && i < size(), "dataset index out of range");
    return scene_caption(scenes[static_cast<size_t>(i)]);
}

std::vector<int> SyntheticDataset::caption_ids(int i) const {
    return Vocab::encode(caption(i));
}

int64_t SyntheticDataset::label(int i) const {
    PF_CHECK(i >= 0 && i < size(), "dataset index out of range");
    int64_t label = 0;
    for (const auto& o : scenes[static_cast<size_t>(i)].objects)
        label = ((label * kNumShapes + o.shape) * kNumColors + o.color) * kNumAnchors + o.anchor;
    return label;
}

void write_dataset_dir(const SyntheticDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");

    std::ofstream tsv(fs::path(dir) / "captions.tsv");
    PF_CHECK(tsv.good(), "cannot write captions.tsv in " + dir);
    for (int i = 0; i < ds.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%06d.ppm", i);
        save_ppm(ds.render(i), (fs::path(dir) / "images" / name).string());
        tsv << i << '\t' << ds.caption(i) << '\t' << ds.label(i) << '\n';
    }

    nlohmann::json meta;
    meta["seed"] = ds.seed;
    meta["n"] = ds.size();
    meta["image_size"] = ds.image_size;
    meta["vocab"] = Vocab::words();
    std::ofstream mj(fs::path(dir) / "meta.json");
    mj << meta.dump(2) << '\n';
    PF_CHECK(mj.good(), "cannot write meta.json in " + dir);
}

}  // namespace patchflow
