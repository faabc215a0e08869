#pragma once

// Checkpoint binary format "GCKP": header, model config (JSON), tensor
// table + raw little-endian float64 data, optimizer section, cursor/seed
// section. Load failures name the section that broke.

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ganita/common.hpp"
#include "ganita/model.hpp"

namespace ganita {

constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelState model;
    GradMap adam_m;  // empty until the first optimizer step
    GradMap adam_v;
    uint64_t adam_step = 0;
    uint64_t step = 0;
    uint64_t tokens_seen = 0;
    uint64_t data_cursor = 0;   // sequences consumed since training start
    uint64_t data_seed = 0;     // seed of the epoch permutation stream
    std::string rng_state;      // serialized sampling RNG
};

namespace detail {

inline void put_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ofstream& f, uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_str(std::ofstream& f, const std::string& s) {
    put_u32(f, static_cast<uint32_t>(s.size()));
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline uint32_t get_u32(std::ifstream& f, const char* section) {
    uint32_t v;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw DataError(std::string("checkpoint: truncated ") + section);
    return v;
}
inline uint64_t get_u64(std::ifstream& f, const char* section) {
    uint64_t v;
    f.read(reinterpret_cast<char*>(&v), 8);
    if (!f) throw DataError(std::string("checkpoint: truncated ") + section);
    return v;
}
inline std::string get_str(std::ifstream& f, const char* section) {
    uint32_t len = get_u32(f, section);
    std::string s(len, '\0');
    f.read(s.data(), len);
    if (!f) throw DataError(std::string("checkpoint: truncated ") + section);
    return s;
}

inline void write_tensor_block(std::ofstream& f, const std::map<std::string, Tensor>& tensors) {
    put_u32(f, static_cast<uint32_t>(tensors.size()));
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        put_str(f, name);
        f.put(0);  // dtype 0 = float64
        f.put(static_cast<char>(t.shape.size()));
        for (size_t dim : t.shape) put_u64(f, dim);
        put_u64(f, offset);
        offset += t.size() * sizeof(double);
    }
    put_u64(f, offset);  // total data bytes
    for (const auto& [name, t] : tensors)
        f.write(reinterpret_cast<const char*>(t.ptr()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline std::map<std::string, Tensor> read_tensor_block(std::ifstream& f, const char* section,
                                                       bool check_finite) {
    uint32_t count = get_u32(f, section);
    struct Entry {
        std::string name;
        std::vector<size_t> shape;
        uint64_t offset;
    };
    std::vector<Entry> entries;
    uint64_t expected_offset = 0;
    for (uint32_t i = 0; i < count; ++i) {
        Entry e;
        e.name = get_str(f, section);
        int dtype = f.get();
        int ndim = f.get();
        if (!f || dtype != 0 || ndim < 0)
            throw DataError(std::string("checkpoint: bad tensor entry in ") + section);
        for (int k = 0; k < ndim; ++k) e.shape.push_back(get_u64(f, section));
        e.offset = get_u64(f, section);
        if (e.offset != expected_offset)
            throw DataError(std::string("checkpoint: inconsistent tensor table in ") + section);
        expected_offset += Tensor::numel(e.shape) * sizeof(double);
        entries.push_back(std::move(e));
    }
    uint64_t data_bytes = get_u64(f, section);
    if (data_bytes != expected_offset)
        throw DataError(std::string("checkpoint: tensor table/data size mismatch in ") + section);
    std::map<std::string, Tensor> out;
    for (auto& e : entries) {
        Tensor t(e.shape);
        f.read(reinterpret_cast<char*>(t.ptr()),
               static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!f) throw DataError(std::string("checkpoint: truncated tensor data in ") + section);
        if (check_finite && !t.all_finite())
            throw DataError("checkpoint: non-finite values in tensor " + e.name);
        out.emplace(e.name, std::move(t));
    }
    return out;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint: " + path);
    f.write("GCKP", 4);
    detail::put_u32(f, kCheckpointVersion);
    detail::put_str(f, ck.model.config.to_json().dump());
    detail::write_tensor_block(f, ck.model.tensors);
    f.write("OPT0", 4);
    detail::put_u64(f, ck.adam_step);
    detail::write_tensor_block(f, ck.adam_m);
    detail::write_tensor_block(f, ck.adam_v);
    f.write("CUR0", 4);
    detail::put_u64(f, ck.step);
    detail::put_u64(f, ck.tokens_seen);
    detail::put_u64(f, ck.data_cursor);
    detail::put_u64(f, ck.data_seed);
    detail::put_str(f, ck.rng_state);
    if (!f) throw DataError("short write to checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "GCKP") throw DataError("checkpoint: bad magic (header)");
    uint32_t version = detail::get_u32(f, "header");
    if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version (header)");

    Checkpoint ck;
    ck.model.config = ModelConfig::from_json(nlohmann::json::parse(detail::get_str(f, "header")));
    ck.model.tensors = detail::read_tensor_block(f, "model tensors", true);

    // shapes must match the declared config exactly
    auto shapes = tensor_shapes(ck.model.config);
    if (shapes.size() != ck.model.tensors.size())
        throw DataError("checkpoint: tensor count does not match config (model tensors)");
    for (const auto& [name, shape] : shapes) {
        auto it = ck.model.tensors.find(name);
        if (it == ck.model.tensors.end() || it->second.shape != shape)
            throw DataError("checkpoint: tensor " + name + " missing or misshapen (model tensors)");
    }

    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "OPT0") throw DataError("checkpoint: bad optimizer marker");
    ck.adam_step = detail::get_u64(f, "optimizer");
    ck.adam_m = detail::read_tensor_block(f, "optimizer", true);
    ck.adam_v = detail::read_tensor_block(f, "optimizer", true);

    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "CUR0") throw DataError("checkpoint: bad cursor marker");
    ck.step = detail::get_u64(f, "cursor");
    ck.tokens_seen = detail::get_u64(f, "cursor");
    ck.data_cursor = detail::get_u64(f, "cursor");
    ck.data_seed = detail::get_u64(f, "cursor");
    ck.rng_state = detail::get_str(f, "cursor");
    return ck;
}

}  // namespace ganita
