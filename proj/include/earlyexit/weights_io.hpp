#pragma once

// Weight container: 8-byte magic, little-endian u64 header length, JSON
// header (config + tensor directory with name/shape/offset), then raw
// little-endian float32 data. Byte layout is documented in docs/formats.md.

#include <stdexcept>
#include <string>

#include "earlyexit/model.hpp"

namespace earlyexit {

inline constexpr char kWeightsMagic[8] = {'E', 'E', 'W', 'T', 'S', '0', '1', '\n'};

struct WeightsIoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void save_weights(const Weights& w, const std::string& path);

// Validates the directory against the embedded config; errors name the
// offending tensor.
Weights load_weights(const std::string& path);

}  // namespace earlyexit
