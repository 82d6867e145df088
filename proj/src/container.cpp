#include "mmkd/container.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "mmkd/errors.hpp"

using nlohmann::json;

namespace mmkd::io {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'K', 'D'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ofstream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ofstream& out, uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::ifstream& in, const std::string& path) {
    uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
        throw IoError("truncated container '" + path + "'");
    }
    return v;
}

uint64_t read_u64(std::ifstream& in, const std::string& path) {
    uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
        throw IoError("truncated container '" + path + "'");
    }
    return v;
}

} // namespace

void write_container(const std::string& path, const std::string& kind, const json& meta,
                     const std::vector<ArrayRecord>& arrays) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");

    json header{{"kind", kind}, {"meta", meta}, {"arrays", json::array()}};
    for (const auto& a : arrays) {
        if (ad::numel(a.shape) != static_cast<int64_t>(a.data.size())) {
            throw ContractError("container array '" + a.name + "': shape " + ad::shape_str(a.shape) +
                                " does not match " + std::to_string(a.data.size()) + " values");
        }
        header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}});
    }
    const std::string header_text = header.dump();

    out.write(kMagic, sizeof(kMagic));
    write_u32(out, kVersion);
    write_u64(out, header_text.size());
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& a : arrays) {
        out.write(reinterpret_cast<const char*>(a.data.data()),
                  static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    }
    if (!out) throw IoError("failed while writing '" + path + "'");
}

Container read_container(const std::string& path, const std::string& expected_kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open container '" + path + "'");

    char magic[4] = {};
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError("'" + path + "' is not a checkpoint container");
    }
    const uint32_t version = read_u32(in, path);
    if (version != kVersion) {
        throw IoError("container '" + path + "' has unsupported version " + std::to_string(version));
    }
    const uint64_t header_len = read_u64(in, path);
    std::string header_text(header_len, '\0');
    if (!in.read(header_text.data(), static_cast<std::streamsize>(header_len))) {
        throw IoError("truncated container '" + path + "'");
    }

    Container c;
    json header;
    try {
        header = json::parse(header_text);
        c.meta = header.at("meta");
        if (header.at("kind").get<std::string>() != expected_kind) {
            throw IoError("container '" + path + "' holds a '" +
                          header.at("kind").get<std::string>() + "', expected a '" + expected_kind +
                          "'");
        }
        for (const json& a : header.at("arrays")) {
            ArrayRecord rec;
            rec.name = a.at("name").get<std::string>();
            rec.shape = a.at("shape").get<ad::Shape>();
            c.arrays.push_back(std::move(rec));
        }
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw IoError("container '" + path + "' header: " + e.what());
    }

    for (auto& a : c.arrays) {
        a.data.resize(static_cast<size_t>(ad::numel(a.shape)));
        if (!in.read(reinterpret_cast<char*>(a.data.data()),
                     static_cast<std::streamsize>(a.data.size() * sizeof(double)))) {
            throw IoError("container '" + path + "': truncated array '" + a.name + "'");
        }
    }
    return c;
}

const ArrayRecord& Container::array(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return a;
    }
    throw IoError("container has no array named '" + name + "'");
}

} // namespace mmkd::io
