#include "patchflow/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace patchflow {

namespace {

void put_u32(std::ofstream& os, uint32_t x) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}
void put_u64(std::ofstream& os, uint64_t x) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}
void put_str(std::ofstream& os, const std::string& s) {
    put_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
uint32_t get_u32(std::ifstream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<uint32_t>(b[i]) << (8 * i);
    return x;
}
uint64_t get_u64(std::ifstream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(b[i]) << (8 * i);
    return x;
}
std::string get_str(std::ifstream& is) {
    const uint32_t n = get_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

}  // namespace

const NamedTensor* CheckpointData::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
    std::ofstream os(path, std::ios::binary);
    PF_CHECK(os.good(), "cannot open for write: " + path);
    os.write("PFCK", 4);
    put_u32(os, 1);
    put_str(os, data.config_json);
    put_u64(os, data.step);
    put_u32(os, static_cast<uint32_t>(data.rng_states.size()));
    for (const auto& [name, state] : data.rng_states) {
        put_str(os, name);
        put_str(os, state);
    }
    put_u32(os, static_cast<uint32_t>(data.tensors.size()));
    for (const auto& nt : data.tensors) {
        put_str(os, nt.name);
        const unsigned char frozen = nt.frozen ? 1 : 0;
        os.write(reinterpret_cast<const char*>(&frozen), 1);
        put_u32(os, static_cast<uint32_t>(nt.t.shape.size()));
        for (int d : nt.t.shape) put_u32(os, static_cast<uint32_t>(d));
        // doubles written verbatim; the build targets little-endian hosts
        os.write(reinterpret_cast<const char*>(nt.t.v.data()),
                 static_cast<std::streamsize>(nt.t.v.size() * sizeof(double)));
    }
    PF_CHECK(os.good(), "write failed: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    PF_CHECK(is.good(), "cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    PF_CHECK(is.good() && std::memcmp(magic, "PFCK", 4) == 0, "bad checkpoint magic: " + path);
    PF_CHECK(get_u32(is) == 1, "unsupported checkpoint version: " + path);
    CheckpointData data;
    data.config_json = get_str(is);
    data.step = get_u64(is);
    const uint32_t n_rng = get_u32(is);
    for (uint32_t i = 0; i < n_rng; ++i) {
        std::string name = get_str(is);
        std::string state = get_str(is);
        data.rng_states.emplace_back(std::move(name), std::move(state));
    }
    const uint32_t n_tensors = get_u32(is);
    for (uint32_t i = 0; i < n_tensors; ++i) {
        NamedTensor nt;
        nt.name = get_str(is);
        unsigned char frozen = 0;
        is.read(reinterpret_cast<char*>(&frozen), 1);
        nt.frozen = frozen != 0;
        const uint32_t ndim = get_u32(is);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(get_u32(is));
        nt.t = Tensor(shape);
        is.read(reinterpret_cast<char*>(nt.t.v.data()),
                static_cast<std::streamsize>(nt.t.v.size() * sizeof(double)));
        data.tensors.push_back(std::move(nt));
    }
    PF_CHECK(is.good(), "truncated checkpoint: " + path);
    return data;
}

void append_store(CheckpointData& data, const ParamStore& ps, const std::string& prefix) {
    for (int i = 0; i < ps.size(); ++i) {
        const Param& p = ps.at(i);
        data.tensors.push_back({prefix + p.name, p.frozen, p.value});
    }
}

void restore_store(const CheckpointData& data, ParamStore& ps, const std::string& prefix) {
    for (int i = 0; i < ps.size(); ++i) {
        Param& p = ps.at(i);
        const NamedTensor* nt = data.find(prefix + p.name);
        PF_CHECK(nt != nullptr, "checkpoint missing tensor: " + prefix + p.name);
        PF_CHECK(nt->t.same_shape(p.value), "checkpoint shape mismatch for " + p.name);
        p.value = nt->t;
        p.frozen = nt->frozen;
    }
}

}  // namespace patchflow
