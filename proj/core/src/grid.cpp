#include "patchflow/grid.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace patchflow {

Image Image::zeros(int h, int w) {
    Image img;
    img.h = h;
    img.w = w;
    img.pixels = Tensor({3, h, w});
    return img;
}

void Image::validate(int patch) const {
    PF_CHECK(h > 0 && w > 0, "image dims must be positive");
    PF_CHECK(pixels.shape == (std::vector<int>{3, h, w}), "image tensor shape mismatch");
    PF_CHECK(pixels.all_finite(), "image contains non-finite values");
    if (patch > 0)
        PF_CHECK(h % patch == 0 && w % patch == 0,
                 "image dims not divisible by patch size");
}

PatchGrid PatchGrid::zeros(int d, int h, int w) {
    PatchGrid g;
    g.d = d;
    g.h = h;
    g.w = w;
    g.data = Tensor({d, h, w});
    return g;
}

PatchGrid PatchGrid::from_tensor(Tensor t) {
    PF_CHECK(t.ndim() == 3, "grid tensor must be [d,h,w]");
    PatchGrid g;
    g.d = t.dim(0);
    g.h = t.dim(1);
    g.w = t.dim(2);
    g.data = std::move(t);
    return g;
}

Tensor flatten_grid(const PatchGrid& g) {
    Tensor out({g.h * g.w, g.d});
    for (int i = 0; i < g.h; ++i)
        for (int j = 0; j < g.w; ++j) {
            const int t = i * g.w + j;
            for (int c = 0; c < g.d; ++c) out.at2(t, c) = g.at(c, i, j);
        }
    return out;
}

PatchGrid reshape_to_grid(const Tensor& tokens, int h, int w) {
    PF_CHECK(tokens.ndim() == 2, "token matrix must be [cells,d]");
    PF_CHECK(tokens.rows() == h * w, "token count does not match grid dims");
    PatchGrid g = PatchGrid::zeros(tokens.cols(), h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const int t = i * w + j;
            for (int c = 0; c < g.d; ++c) g.at(c, i, j) = tokens.at2(t, c);
        }
    return g;
}

PatchGrid space_to_depth(const Image& img, int patch) {
    img.validate(patch);
    const int gh = img.h / patch, gw = img.w / patch;
    PatchGrid g = PatchGrid::zeros(3 * patch * patch, gh, gw);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                const int gi = y / patch, gj = x / patch;
                const int ch = c * patch * patch + (y % patch) * patch + (x % patch);
                g.at(ch, gi, gj) = img.pixels.at3(c, y, x);
            }
    return g;
}

Image depth_to_space(const PatchGrid& g, int patch) {
    PF_CHECK(g.d == 3 * patch * patch, "grid depth does not match patch size");
    Image img = Image::zeros(g.h * patch, g.w * patch);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                const int gi = y / patch, gj = x / patch;
                const int ch = c * patch * patch + (y % patch) * patch + (x % patch);
                img.pixels.at3(c, y, x) = g.at(ch, gi, gj);
            }
    return img;
}

PatchGrid pool2x2_mean(const PatchGrid& g) {
    PF_CHECK(g.h % 2 == 0 && g.w % 2 == 0, "pool2x2 needs even grid dims");
    PatchGrid out = PatchGrid::zeros(g.d, g.h / 2, g.w / 2);
    for (int c = 0; c < g.d; ++c)
        for (int i = 0; i < out.h; ++i)
            for (int j = 0; j < out.w; ++j)
                out.at(c, i, j) = 0.25 * (g.at(c, 2 * i, 2 * j) + g.at(c, 2 * i, 2 * j + 1) +
                                          g.at(c, 2 * i + 1, 2 * j) + g.at(c, 2 * i + 1, 2 * j + 1));
    return out;
}

Image clamp01(const Image& img) {
    Image out = img;
    for (auto& x : out.pixels.v) x = std::min(1.0, std::max(0.0, x));
    return out;
}

// ---------------------------------------------------------------------------
// Binary formats
// ---------------------------------------------------------------------------

namespace {
void put_u32(std::ofstream& os, uint32_t x) {
    unsigned char b[4] = {static_cast<unsigned char>(x & 0xff),
                          static_cast<unsigned char>((x >> 8) & 0xff),
                          static_cast<unsigned char>((x >> 16) & 0xff),
                          static_cast<unsigned char>((x >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
uint32_t get_u32(std::ifstream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
}  // namespace

void save_grid(const PatchGrid& g, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    PF_CHECK(os.good(), "cannot open for write: " + path);
    os.write("PGRD", 4);
    put_u32(os, static_cast<uint32_t>(g.d));
    put_u32(os, static_cast<uint32_t>(g.h));
    put_u32(os, static_cast<uint32_t>(g.w));
    for (double x : g.data.v) {
        const float f = static_cast<float>(x);
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(os, bits);
    }
    PF_CHECK(os.good(), "write failed: " + path);
}

PatchGrid load_grid(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    PF_CHECK(is.good(), "cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    PF_CHECK(is.good() && std::memcmp(magic, "PGRD", 4) == 0, "bad grid magic in " + path);
    const int d = static_cast<int>(get_u32(is));
    const int h = static_cast<int>(get_u32(is));
    const int w = static_cast<int>(get_u32(is));
    PF_CHECK(d > 0 && h > 0 && w > 0, "bad grid header in " + path);
    PatchGrid g = PatchGrid::zeros(d, h, w);
    for (auto& x : g.data.v) {
        const uint32_t bits = get_u32(is);
        float f;
        std::memcpy(&f, &bits, 4);
        x = static_cast<double>(f);
    }
    PF_CHECK(is.good(), "truncated grid file: " + path);
    return g;
}

void save_ppm(const Image& img, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    PF_CHECK(os.good(), "cannot open for write: " + path);
    os << "P6\n" << img.w << " " << img.h << "\n255\n";
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = img.pixels.at3(c, y, x);
                const int q = static_cast<int>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
                const unsigned char b = static_cast<unsigned char>(q);
                os.write(reinterpret_cast<const char*>(&b), 1);
            }
    PF_CHECK(os.good(), "write failed: " + path);
}

Image load_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    PF_CHECK(is.good(), "cannot open: " + path);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    is >> magic >> w >> h >> maxv;
    PF_CHECK(magic == "P6" && maxv == 255 && w > 0 && h > 0, "unsupported ppm: " + path);
    is.get();  // single whitespace after header
    Image img = Image::zeros(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                unsigned char b;
                is.read(reinterpret_cast<char*>(&b), 1);
                img.pixels.at3(c, y, x) = static_cast<double>(b) / 255.0;
            }
    PF_CHECK(is.good(), "truncated ppm: " + path);
    return img;
}

}  // namespace patchflow
