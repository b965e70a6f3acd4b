#include "mmtl/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "mmtl/fsio.hpp"

namespace mmtl {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'T', 'L'};
constexpr uint32_t kVersion = 1;

// The format fixes little-endian on disk; this library targets LE hosts.
static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

void put_u32(std::string& out, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

void put_u64(std::string& out, uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw CheckpointError("checkpoint: truncated file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["n_layers"] = cfg.n_layers;
  j["n_heads"] = cfg.n_heads;
  j["d_model"] = cfg.d_model;
  j["d_mlp"] = cfg.d_mlp;
  j["vocab_size"] = cfg.vocab_size;
  j["patch_grid"] = cfg.patch_grid;
  j["patch_dim"] = cfg.patch_dim;
  j["d_vis"] = cfg.d_vis;
  j["max_text_len"] = cfg.max_text_len;
  j["eos_token"] = cfg.eos_token;
  j["seed"] = cfg.seed;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad config JSON: ") + e.what());
  }
  ModelConfig cfg;
  try {
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.d_mlp = j.at("d_mlp").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.patch_grid = j.at("patch_grid").get<int>();
    cfg.patch_dim = j.at("patch_dim").get<int>();
    cfg.d_vis = j.at("d_vis").get<int>();
    cfg.max_text_len = j.at("max_text_len").get<int>();
    cfg.eos_token = j.at("eos_token").get<int>();
    cfg.seed = j.at("seed").get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: incomplete config JSON: ") + e.what());
  }
  return cfg;
}

std::string serialize_checkpoint(const MultiModalLM& model) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);

  const std::string cfg = model_config_to_json(model.config());
  put_u32(out, static_cast<uint32_t>(cfg.size()));
  out += cfg;

  const auto& names = model.parameter_names();
  const auto& params = model.parameters();
  put_u32(out, static_cast<uint32_t>(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    put_u32(out, static_cast<uint32_t>(names[i].size()));
    out += names[i];
    const auto& shape = params[i].shape();
    put_u32(out, static_cast<uint32_t>(shape.size()));
    for (int dim : shape) put_u64(out, static_cast<uint64_t>(dim));
    const auto data = params[i].data();
    std::vector<float> narrow(data.begin(), data.end());
    out.append(reinterpret_cast<const char*>(narrow.data()), narrow.size() * sizeof(float));
  }

  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(out.data()),
              static_cast<uInt>(out.size()));
  put_u32(out, static_cast<uint32_t>(crc));
  return out;
}

MultiModalLM deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12) throw CheckpointError("checkpoint: file too small");
  uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()),
              static_cast<uInt>(bytes.size() - 4));
  if (static_cast<uint32_t>(crc) != stored_crc)
    throw CheckpointError("checkpoint: CRC mismatch (corrupt file)");

  Reader r{bytes};
  if (r.bytes(4) != std::string(kMagic, 4))
    throw CheckpointError("checkpoint: bad magic");
  const uint32_t version = r.u32();
  if (version != kVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));

  const uint32_t cfg_len = r.u32();
  ModelConfig cfg = model_config_from_json(r.bytes(cfg_len));
  cfg.validate();
  MultiModalLM model(cfg);

  const uint32_t n_params = r.u32();
  const auto& names = model.parameter_names();
  auto& params = model.parameters();
  if (n_params != params.size())
    throw CheckpointError("checkpoint: parameter count mismatch");
  for (uint32_t i = 0; i < n_params; ++i) {
    const uint32_t name_len = r.u32();
    const std::string name = r.bytes(name_len);
    if (name != names[i])
      throw CheckpointError("checkpoint: parameter order mismatch at '" + name + "'");
    const uint32_t ndim = r.u32();
    std::vector<int> shape;
    for (uint32_t dd = 0; dd < ndim; ++dd) shape.push_back(static_cast<int>(r.u64()));
    const auto& expect = params[i].shape();
    if (shape.size() != expect.size() ||
        !std::equal(shape.begin(), shape.end(), expect.begin()))
      throw CheckpointError("checkpoint: shape mismatch for '" + name + "'");
    const size_t n = params[i].numel();
    const std::string raw = r.bytes(n * sizeof(float));
    auto dst = params[i].mutable_data();
    const float* src = reinterpret_cast<const float*>(raw.data());
    for (size_t k = 0; k < n; ++k) dst[k] = static_cast<double>(src[k]);
  }
  if (r.pos != bytes.size() - 4)
    throw CheckpointError("checkpoint: trailing bytes");
  return model;
}

void save_checkpoint(const MultiModalLM& model, const std::string& path) {
  atomic_write_file(path, serialize_checkpoint(model));
}

MultiModalLM load_checkpoint(const std::string& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  return deserialize_checkpoint(bytes);
}

}  // namespace mmtl
