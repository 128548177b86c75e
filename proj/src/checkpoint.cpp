#include "medlab/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

namespace medlab {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'M', 'E', 'D', 'C', 'K', 'P', 'T', '1'};
constexpr int kFormatVersion = 1;
}  // namespace

uint32_t crc32(const void* data, size_t len) {
  static uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    init = true;
  }
  uint32_t c = 0xFFFFFFFFu;
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  json index = json::array();
  std::string payload;
  for (const auto& [name, t] : ck.tensors) {
    if (t.dtype() != DType::F32)
      throw ContractError("checkpoint tensors must be f32, got " + std::string(dtype_name(t.dtype())) +
                          " for '" + name + "'");
    auto span = t.data<float>();
    size_t nbytes = span.size() * sizeof(float);
    json shape = json::array();
    for (int64_t d : t.shape()) shape.push_back(d);
    index.push_back({{"name", name},
                     {"shape", shape},
                     {"dtype", "f32"},
                     {"offset", payload.size()},
                     {"nbytes", nbytes},
                     {"crc32", crc32(span.data(), nbytes)}});
    payload.append(reinterpret_cast<const char*>(span.data()), nbytes);
  }
  json header;
  header["format_version"] = kFormatVersion;
  header["manifest"] = json::parse(manifest_to_json(ck.manifest));
  header["tensors"] = index;
  header["optim_step"] = ck.optim_step;
  std::string hs = header.dump();

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f.good()) throw IntegrityError("cannot write checkpoint '" + path + "'");
    f.write(kMagic, 8);
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw IntegrityError("cannot read checkpoint '" + path + "'");
  char magic[8];
  f.read(magic, 8);
  if (f.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
    throw IntegrityError("'" + path + "' is not a checkpoint (bad magic)");
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (f.gcount() != 8) throw IntegrityError("checkpoint truncated in header length");
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (static_cast<uint64_t>(f.gcount()) != hlen)
    throw IntegrityError("checkpoint truncated in header");
  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  int version = header.at("format_version").get<int>();
  if (version != kFormatVersion)
    throw VersionError("checkpoint format version " + std::to_string(version) +
                       " not supported (expected " + std::to_string(kFormatVersion) + ")");
  Checkpoint ck;
  ck.manifest = manifest_from_json(header.at("manifest").dump());
  ck.optim_step = header.value("optim_step", int64_t{0});

  std::string payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  for (const auto& entry : header.at("tensors")) {
    std::string name = entry.at("name").get<std::string>();
    Shape shape;
    for (const auto& d : entry.at("shape")) shape.push_back(d.get<int64_t>());
    size_t offset = entry.at("offset").get<size_t>();
    size_t nbytes = entry.at("nbytes").get<size_t>();
    if (offset + nbytes > payload.size())
      throw IntegrityError("checkpoint truncated: tensor '" + name + "' extends past end of file");
    uint32_t want_crc = entry.at("crc32").get<uint32_t>();
    uint32_t got_crc = crc32(payload.data() + offset, nbytes);
    if (want_crc != got_crc)
      throw IntegrityError("checksum mismatch on tensor '" + name + "'");
    Tensor t = Tensor::zeros(shape, DType::F32);
    auto span = t.data<float>();
    if (span.size() * sizeof(float) != nbytes)
      throw IntegrityError("tensor '" + name + "' byte count disagrees with shape " +
                           shape_str(shape));
    std::memcpy(span.data(), payload.data() + offset, nbytes);
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

Checkpoint snapshot_state(const MEDModel& m, const DistillProjections* proj, const AdamW* opt,
                          const RunManifest& manifest) {
  Checkpoint ck;
  ck.manifest = manifest;
  m.for_each_param([&](const std::string& name, const Tensor& t) {
    ck.tensors.emplace(name, t.to_dtype(DType::F32));
  });
  if (proj) {
    const_cast<DistillProjections*>(proj)->for_each_param(
        [&](const std::string& name, Tensor& t) {
          ck.tensors.emplace(name, t.to_dtype(DType::F32));
        });
  }
  if (opt) {
    ck.optim_step = opt->step_count();
    for (const auto& slot : const_cast<AdamW*>(opt)->slots()) {
      ck.tensors.emplace("optim.m." + slot.name, slot.m.to_dtype(DType::F32));
      ck.tensors.emplace("optim.v." + slot.name, slot.v.to_dtype(DType::F32));
    }
  }
  return ck;
}

namespace {

void load_named(Tensor& dst, const std::string& name, const Checkpoint& ck) {
  auto it = ck.tensors.find(name);
  if (it == ck.tensors.end())
    throw ContractError("checkpoint is missing tensor '" + name + "'");
  if (it->second.shape() != dst.shape())
    throw ShapeError("checkpoint tensor '" + name + "' has shape " +
                     shape_str(it->second.shape()) + ", model expects " + shape_str(dst.shape()));
  Tensor conv = it->second.to_dtype(dst.dtype());
  conv.set_requires_grad(dst.requires_grad());
  dst = std::move(conv);
}

}  // namespace

void restore_model(MEDModel& m, const Checkpoint& ck) {
  m.for_each_param([&](const std::string& name, Tensor& t) { load_named(t, name, ck); });
}

void restore_projections(DistillProjections& proj, const Checkpoint& ck) {
  proj.for_each_param([&](const std::string& name, Tensor& t) { load_named(t, name, ck); });
}

void restore_optimizer(AdamW& opt, const Checkpoint& ck) {
  opt.set_step_count(ck.optim_step);
  for (auto& slot : opt.slots()) {
    auto mit = ck.tensors.find("optim.m." + slot.name);
    auto vit = ck.tensors.find("optim.v." + slot.name);
    if (mit == ck.tensors.end() || vit == ck.tensors.end())
      throw ContractError("checkpoint is missing optimizer state for '" + slot.name + "'");
    slot.m = mit->second.to_dtype(DType::F64);
    slot.v = vit->second.to_dtype(DType::F64);
  }
}

void restore_model_subset(MEDModel& m, const Checkpoint& ck, const std::string& prefix) {
  int loaded = 0;
  m.for_each_param([&](const std::string& name, Tensor& t) {
    if (name.rfind(prefix, 0) != 0) return;
    load_named(t, name, ck);
    ++loaded;
  });
  if (loaded == 0)
    throw ContractError("checkpoint provided no tensors under prefix '" + prefix + "'");
}

}  // namespace medlab
