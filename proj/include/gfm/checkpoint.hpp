#pragma once

// Checkpoint directory layout:
//   manifest.json  JSON array of {name, shape, dtype: "f32", byte_offset, byte_len}
//   tensors.bin    little-endian float32 payloads concatenated in manifest order

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfm/optim.hpp"
#include "gfm/tensor.hpp"

namespace gfm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

struct Checkpoint {
  std::vector<NamedTensor<float>> tensors;  // manifest order

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.tensor;
    return nullptr;
  }
};

template <class T>
Checkpoint make_checkpoint(const ParamList<T>& params) {
  Checkpoint ck;
  for (const auto& p : params) ck.tensors.push_back({p.name, p.tensor.template cast<float>().detach()});
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  std::ofstream bin(dir / "tensors.bin", std::ios::binary);
  if (!bin) throw FormatError("cannot write " + (dir / "tensors.bin").string());
  std::uint64_t offset = 0;
  std::set<std::string> seen;
  for (const auto& t : ck.tensors) {
    if (!seen.insert(t.name).second) throw UsageError("duplicate tensor name '" + t.name + "'");
    const std::uint64_t len = t.tensor.numel() * sizeof(float);
    manifest.push_back({{"name", t.name},
                        {"shape", t.tensor.shape()},
                        {"dtype", "f32"},
                        {"byte_offset", offset},
                        {"byte_len", len}});
    bin.write(reinterpret_cast<const char*>(t.tensor.data().data()),
              static_cast<std::streamsize>(len));
    offset += len;
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw FormatError("missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  if (!manifest.is_array()) throw FormatError("manifest.json must be a JSON array");
  std::ifstream bin(dir / "tensors.bin", std::ios::binary);
  if (!bin) throw FormatError("missing tensors.bin in " + dir.string());
  std::vector<char> payload((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  Checkpoint ck;
  for (const auto& e : manifest) {
    const std::string name = e.at("name").get<std::string>();
    if (e.at("dtype").get<std::string>() != "f32")
      throw FormatError("tensor '" + name + "': unsupported dtype " + e.at("dtype").dump());
    const Shape shape = e.at("shape").get<Shape>();
    const auto off = e.at("byte_offset").get<std::uint64_t>();
    const auto len = e.at("byte_len").get<std::uint64_t>();
    if (len != static_cast<std::uint64_t>(shape_numel(shape)) * sizeof(float))
      throw FormatError("tensor '" + name + "': byte_len " + std::to_string(len) +
                        " does not match shape " + shape_str(shape));
    if (off + len > payload.size())
      throw FormatError("tensor '" + name + "': payload truncated at byte offset " +
                        std::to_string(payload.size()));
    std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
    std::memcpy(data.data(), payload.data() + off, len);
    ck.tensors.push_back({name, Tensor<float>::from(shape, std::move(data))});
  }
  return ck;
}

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> missing;     // parameters absent from the checkpoint
  std::vector<std::string> unexpected;  // checkpoint tensors with no parameter
};

// Copies checkpoint values into matching parameters. Strict mode requires
// every parameter to be present; shape mismatches always fail.
template <class T>
LoadReport load_into(ParamList<T>& params, const Checkpoint& ck, bool strict) {
  LoadReport rep;
  std::set<std::string> names;
  for (auto& p : params) {
    names.insert(p.name);
    const Tensor<float>* src = ck.find(p.name);
    if (!src) {
      rep.missing.push_back(p.name);
      continue;
    }
    if (src->shape() != p.tensor.shape())
      throw LoadError("tensor '" + p.name + "': checkpoint shape " + shape_str(src->shape()) +
                      " vs parameter shape " + shape_str(p.tensor.shape()));
  }
  if (strict && !rep.missing.empty()) {
    std::string all;
    for (const auto& m : rep.missing) all += (all.empty() ? "" : ", ") + m;
    throw LoadError("missing tensors: " + all);
  }
  for (auto& p : params) {
    const Tensor<float>* src = ck.find(p.name);
    if (!src) continue;
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src->data()[i]);
    rep.loaded.push_back(p.name);
  }
  for (const auto& t : ck.tensors)
    if (!names.count(t.name)) rep.unexpected.push_back(t.name);
  return rep;
}

}  // namespace gfm
