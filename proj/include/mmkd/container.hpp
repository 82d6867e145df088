#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "mmkd/tensor.hpp"

namespace mmkd::io {

// Versioned binary container: magic, version, a JSON metadata header, then the
// named float64 arrays back to back in header order. Round-trips are bit-exact.
struct ArrayRecord {
    std::string name;
    ad::Shape shape;
    std::vector<double> data;
};

void write_container(const std::string& path, const std::string& kind, const nlohmann::json& meta,
                     const std::vector<ArrayRecord>& arrays);

struct Container {
    nlohmann::json meta;
    std::vector<ArrayRecord> arrays;

    const ArrayRecord& array(const std::string& name) const;
};

Container read_container(const std::string& path, const std::string& expected_kind);

} // namespace mmkd::io
