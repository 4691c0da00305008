#include "hysparse/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace hysparse {

namespace {

constexpr std::array<char, 8> kMagic = {'H', 'Y', 'S', 'P', 'W', 'T', '0', '1'};

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw ConfigError("weights: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_weights(const Model& model, std::ostream& out) {
  const auto params = model.named_parameters();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : params) tensors.push_back({{"name", name}, {"shape", t.shape()}});
  const nlohmann::json header = {
      {"config", to_json(model.config())}, {"schema_version", kWeightsSchemaVersion}, {"tensors", tensors}};
  const std::string text = header.dump();
  out.write(kMagic.data(), kMagic.size());
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : params)
    for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw Error("weights: write failed");
}

void save_weights(const Model& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("weights: cannot open " + path);
  save_weights(model, f);
}

Model load_weights(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw ConfigError("weights: bad magic");
  const std::uint64_t n = get_u64(in);
  if (n > (1u << 26)) throw ConfigError("weights: header too large");
  std::string text(n, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(n))) throw ConfigError("weights: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("weights: header is not JSON: ") + e.what());
  }
  if (header.value("schema_version", -1) != kWeightsSchemaVersion)
    throw ConfigError("weights: unsupported schema_version");
  Model model(model_config_from_json(header.at("config")), 0);
  auto params = model.named_parameters();
  const auto& listed = header.at("tensors");
  if (listed.size() != params.size()) throw ConfigError("weights: tensor count does not match config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    if (listed[i].at("name").get<std::string>() != name)
      throw ConfigError("weights: expected tensor " + name + ", found " + listed[i].at("name").get<std::string>());
    if (listed[i].at("shape").get<Shape>() != t.shape())
      throw ConfigError("weights: " + name + " has shape " + shape_str(listed[i].at("shape").get<Shape>()) +
                        ", config implies " + shape_str(t.shape()));
  }
  for (auto& [name, t] : params) {
    auto dst = t.data();
    for (auto& v : dst) v = std::bit_cast<double>(get_u64(in));
    check_finite(dst, name.c_str());
  }
  return model;
}

Model load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("weights: cannot open " + path);
  return load_weights(f);
}

}  // namespace hysparse
