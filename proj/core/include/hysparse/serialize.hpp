#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "hysparse/model.hpp"

namespace hysparse {

// Weights container:
//   8 bytes   magic "HYSPWT01"
//   8 bytes   little-endian u64 header length n
//   n bytes   canonical JSON {"config", "schema_version", "tensors": [{"name", "shape"}]}
//   then every tensor's values as little-endian float64, in header order.

inline constexpr int kWeightsSchemaVersion = 1;

void save_weights(const Model& model, std::ostream& out);
void save_weights(const Model& model, const std::string& path);

/// Rebuilds a model from a container. Throws ConfigError when the header is
/// malformed or a tensor's name or shape disagrees with the stored config.
Model load_weights(std::istream& in);
Model load_weights(const std::string& path);

}  // namespace hysparse
