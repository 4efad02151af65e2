#include "mugv/params.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace mugv {

using nlohmann::json;

size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 8; }

const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

Dtype dtype_from(const std::string& name) {
    if (name == "f32") return Dtype::f32;
    if (name == "f64") return Dtype::f64;
    throw CheckpointError(CheckpointError::Kind::BadHeader, "unknown dtype \"" + name + "\"");
}

Tensor& ParameterSet::at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw InputError("no parameter named \"" + name + "\"");
    return it->second.value;
}

const Tensor& ParameterSet::at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw InputError("no parameter named \"" + name + "\"");
    return it->second.value;
}

Param& ParameterSet::entry(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw InputError("no parameter named \"" + name + "\"");
    return it->second;
}

void ParameterSet::set(std::string name, Tensor value, Dtype dtype) {
    map_[std::move(name)] = Param{std::move(value), dtype};
}

int64_t ParameterSet::total_elements() const {
    int64_t n = 0;
    for (const auto& [name, p] : map_) n += p.value.numel();
    return n;
}

int64_t ParameterSet::total_elements(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& [name, p] : map_)
        if (name.rfind(prefix, 0) == 0) n += p.value.numel();
    return n;
}

std::vector<std::string> ParameterSet::names() const {
    std::vector<std::string> out;
    out.reserve(map_.size());
    for (const auto& [name, p] : map_) out.push_back(name);
    return out;
}

namespace {

constexpr char kMagic[8] = {'M', 'U', 'G', 'V', 'C', 'K', 'P', 'T'};

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

uint32_t get_u32(const unsigned char* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const ParameterSet& params, const std::string& path) {
    if (params.has("__meta__")) throw InputError("tensor name \"__meta__\" is reserved");

    std::string payload;
    json header = json::object();
    uint64_t offset = 0;
    for (const auto& [name, p] : params.entries()) {
        uint64_t length = static_cast<uint64_t>(p.value.numel()) * dtype_size(p.dtype);
        header[name] = {{"dtype", dtype_name(p.dtype)},
                        {"shape", p.value.shape()},
                        {"offset", offset},
                        {"length", length}};
        payload.reserve(payload.size() + length);
        if (p.dtype == Dtype::f32) {
            for (int64_t i = 0; i < p.value.numel(); ++i)
                put_u32(payload, std::bit_cast<uint32_t>(static_cast<float>(p.value[i])));
        } else {
            for (int64_t i = 0; i < p.value.numel(); ++i) put_u64(payload, std::bit_cast<uint64_t>(p.value[i]));
        }
        offset += length;
    }
    header["__meta__"] = params.metadata;

    std::string head = header.dump();
    std::string out;
    out.reserve(8 + 8 + head.size() + payload.size());
    out.append(kMagic, 8);
    put_u64(out, head.size());
    out += head;
    out += payload;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError(CheckpointError::Kind::Io, "write failed for " + path);
}

ParameterSet load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + path);
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(raw.data());

    if (raw.size() < 8) throw CheckpointError(CheckpointError::Kind::Truncated, path + ": shorter than the magic");
    if (std::memcmp(raw.data(), kMagic, 8) != 0)
        throw CheckpointError(CheckpointError::Kind::BadMagic, path + ": bad magic");
    if (raw.size() < 16) throw CheckpointError(CheckpointError::Kind::Truncated, path + ": missing header length");
    uint64_t head_len = get_u64(bytes + 8);
    if (16 + head_len > raw.size())
        throw CheckpointError(CheckpointError::Kind::Truncated, path + ": header exceeds file size");

    json header;
    try {
        header = json::parse(raw.begin() + 16, raw.begin() + 16 + static_cast<ptrdiff_t>(head_len));
    } catch (const json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::BadHeader, path + ": header is not valid JSON: " + e.what());
    }
    if (!header.is_object())
        throw CheckpointError(CheckpointError::Kind::BadHeader, path + ": header is not a JSON object");

    uint64_t payload_size = raw.size() - 16 - head_len;
    const unsigned char* payload = bytes + 16 + head_len;

    ParameterSet ps;
    struct Extent {
        uint64_t offset, length;
        std::string name;
    };
    std::vector<Extent> extents;

    for (const auto& [name, desc] : header.items()) {
        if (name == "__meta__") {
            if (!desc.is_object())
                throw CheckpointError(CheckpointError::Kind::BadHeader, path + ": __meta__ is not an object");
            for (const auto& [k, v] : desc.items()) {
                if (!v.is_string())
                    throw CheckpointError(CheckpointError::Kind::BadHeader,
                                          path + ": metadata value for \"" + k + "\" is not a string");
                ps.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        if (!desc.is_object() || !desc.contains("dtype") || !desc.contains("shape") || !desc.contains("offset") ||
            !desc.contains("length"))
            throw CheckpointError(CheckpointError::Kind::BadHeader,
                                  path + ": tensor \"" + name + "\" has an incomplete descriptor");
        Dtype dt = dtype_from(desc["dtype"].get<std::string>());
        std::vector<int64_t> shape;
        for (const auto& d : desc["shape"]) {
            if (!d.is_number_integer() || d.get<int64_t>() < 0)
                throw CheckpointError(CheckpointError::Kind::BadHeader,
                                      path + ": tensor \"" + name + "\" has a bad shape entry");
            shape.push_back(d.get<int64_t>());
        }
        uint64_t off = desc["offset"].get<uint64_t>();
        uint64_t len = desc["length"].get<uint64_t>();
        uint64_t want = static_cast<uint64_t>(Tensor::shape_numel(shape)) * dtype_size(dt);
        if (len != want)
            throw CheckpointError(CheckpointError::Kind::BadHeader,
                                  path + ": tensor \"" + name + "\" length " + std::to_string(len) +
                                      " does not match shape " + Tensor::shape_str(shape));
        if (off + len > payload_size)
            throw CheckpointError(CheckpointError::Kind::Truncated,
                                  path + ": payload for \"" + name + "\" runs past end of file");
        extents.push_back({off, len, name});

        Tensor t(shape);
        if (dt == Dtype::f32) {
            for (int64_t i = 0; i < t.numel(); ++i)
                t[i] = static_cast<real>(std::bit_cast<float>(get_u32(payload + off + 4 * static_cast<uint64_t>(i))));
        } else {
            for (int64_t i = 0; i < t.numel(); ++i)
                t[i] = std::bit_cast<real>(get_u64(payload + off + 8 * static_cast<uint64_t>(i)));
        }
        ps.set(name, std::move(t), dt);
    }

    // the payload must be tiled exactly: sorted extents contiguous from 0
    std::sort(extents.begin(), extents.end(), [](const Extent& a, const Extent& b) { return a.offset < b.offset; });
    uint64_t cursor = 0;
    for (const Extent& e : extents) {
        if (e.offset < cursor)
            throw CheckpointError(CheckpointError::Kind::BadOffsets,
                                  path + ": tensor \"" + e.name + "\" overlaps the previous payload");
        if (e.offset > cursor)
            throw CheckpointError(CheckpointError::Kind::BadOffsets,
                                  path + ": gap in payload before tensor \"" + e.name + "\"");
        cursor = e.offset + e.length;
    }
    if (cursor != payload_size)
        throw CheckpointError(CheckpointError::Kind::BadOffsets,
                              path + ": payload has " + std::to_string(payload_size - cursor) + " trailing bytes");
    return ps;
}

}  // namespace mugv
