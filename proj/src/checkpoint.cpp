#include "cmrlm/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cmrlm {

namespace {

using nlohmann::json;
using Kind = LoadError::Kind;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
}

void put_floats(std::vector<std::uint8_t>& out, const Tensor<float>& t) {
  for (float f : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

void get_floats(const std::uint8_t* p, Tensor<float>& t) {
  for (float& f : t.data()) {
    f = std::bit_cast<float>(get_u32(p));
    p += 4;
  }
}

// Every tensor in file order, paired with its table name.
template <class Model, class Fn>
void for_each_tensor(Model& m, Fn&& fn) {
  for (auto& p : m.parameters()) fn(p.name, p.value);
  for (auto& n : m.norm_states()) {
    fn(n.name + ".running_mean", n.state.running_mean);
    fn(n.name + ".running_var", n.state.running_var);
  }
}

}  // namespace

json arch_to_json(const ArchConfig& a) {
  return {{"num_layers", a.num_layers},   {"blocks_per_layer", a.blocks_per_layer},
          {"base_filters", a.base_filters}, {"in_channels", a.in_channels},
          {"out_channels", a.out_channels}, {"leaky_slope", a.leaky_slope}};
}

ArchConfig arch_from_json(const json& j) {
  ArchConfig a;
  try {
    a.num_layers = j.at("num_layers").get<int>();
    a.blocks_per_layer = j.at("blocks_per_layer").get<std::vector<int>>();
    a.base_filters = j.at("base_filters").get<int>();
    a.in_channels = j.value("in_channels", 1);
    a.out_channels = j.value("out_channels", 4);
    a.leaky_slope = j.value("leaky_slope", 0.01);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("arch: ") + e.what());
  }
  a.validate();
  return a;
}

std::string config_digest(const json& config) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  static const char* hex = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[i] = hex[h & 0xf];
  return s;
}

std::vector<std::uint8_t> encode_checkpoint(const ModelCheckpoint& ckpt) {
  const UNet<float>& m = ckpt.model;
  json table = json::array();
  json initialized = json::array();
  for_each_tensor(m, [&](const std::string& name, const Tensor<float>& t) {
    table.push_back({{"name", name}, {"shape", t.shape()}});
  });
  for (const auto& n : m.norm_states()) initialized.push_back(n.state.initialized);

  const Provenance& p = ckpt.provenance;
  json header = {
      {"arch", arch_to_json(m.arch())},
      {"tensors", table},
      {"norm_initialized", initialized},
      {"provenance",
       {{"config_digest", p.config_digest},
        {"epoch", p.epoch},
        {"val_loss", p.has_val_loss ? json(p.val_loss) : json(nullptr)},
        {"settings", p.settings}}},
  };
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for_each_tensor(m, [&](const std::string&, const Tensor<float>& t) { put_floats(out, t); });
  return out;
}

ModelCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  const std::size_t n = bytes.size();
  if (n < 4) throw LoadError(Kind::Truncated, "checkpoint: file too short for magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw LoadError(Kind::BadMagic, "checkpoint: bad magic");
  if (n < 12) throw LoadError(Kind::Truncated, "checkpoint: file too short for header prefix");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kCheckpointVersion) {
    throw LoadError(Kind::Version, "checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                                       std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t header_len = get_u32(bytes.data() + 8);
  if (header_len > n - 12) throw LoadError(Kind::Truncated, "checkpoint: header extends past end of file");

  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw LoadError(Kind::Corrupt, std::string("checkpoint: header is not valid JSON: ") + e.what());
  }

  ModelCheckpoint ckpt;
  std::vector<std::pair<std::string, Shape>> table;
  std::vector<bool> initialized;
  try {
    const ArchConfig arch = arch_from_json(header.at("arch"));
    for (const auto& e : header.at("tensors")) {
      table.emplace_back(e.at("name").get<std::string>(), e.at("shape").get<Shape>());
    }
    initialized = header.at("norm_initialized").get<std::vector<bool>>();
    const json& p = header.at("provenance");
    ckpt.provenance.config_digest = p.value("config_digest", "");
    ckpt.provenance.epoch = p.value("epoch", -1);
    if (p.contains("val_loss") && p["val_loss"].is_number()) {
      ckpt.provenance.val_loss = p["val_loss"].get<double>();
      ckpt.provenance.has_val_loss = true;
    }
    ckpt.provenance.settings = p.value("settings", json::object());
    ckpt.model = UNet<float>::build(arch, 0);
  } catch (const json::exception& e) {
    throw LoadError(Kind::Corrupt, std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(Kind::Corrupt, std::string("checkpoint: invalid architecture: ") + e.what());
  }

  // The name/shape table must be exactly the one the architecture implies.
  std::size_t index = 0;
  std::size_t payload = 0;
  for_each_tensor(ckpt.model, [&](const std::string& name, const Tensor<float>& t) {
    if (index >= table.size()) throw LoadError(Kind::Consistency, "checkpoint: missing tensor " + name);
    const auto& [tname, tshape] = table[index++];
    if (tname != name) {
      throw LoadError(Kind::Consistency, "checkpoint: expected tensor " + name + ", found " + tname);
    }
    if (tshape != t.shape()) {
      throw LoadError(Kind::Consistency, "checkpoint: tensor " + name + " has shape " + shape_string(tshape) +
                                             " but the architecture requires " + shape_string(t.shape()));
    }
    payload += t.size() * 4;
  });
  if (index != table.size()) {
    throw LoadError(Kind::Consistency, "checkpoint: orphan tensor " + table[index].first);
  }
  if (initialized.size() != ckpt.model.norm_states().size()) {
    throw LoadError(Kind::Consistency, "checkpoint: norm_initialized length does not match the architecture");
  }

  const std::size_t start = 12 + header_len;
  if (n - start < payload) {
    throw LoadError(Kind::Truncated, "checkpoint: payload has " + std::to_string(n - start) + " bytes, expected " +
                                         std::to_string(payload));
  }
  if (n - start > payload) throw LoadError(Kind::Corrupt, "checkpoint: trailing bytes after payload");

  const std::uint8_t* cursor = bytes.data() + start;
  for_each_tensor(ckpt.model, [&](const std::string& name, Tensor<float>& t) {
    get_floats(cursor, t);
    cursor += t.size() * 4;
    if (!t.all_finite()) throw LoadError(Kind::Corrupt, "checkpoint: non-finite values in " + name);
  });
  for (std::size_t i = 0; i < initialized.size(); ++i) ckpt.model.norm_states()[i].state.initialized = initialized[i];
  return ckpt;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(Kind::Io, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace cmrlm
