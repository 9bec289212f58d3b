#pragma once

// Binary formats. All integers and floats are little-endian.
//
// Checkpoint: magic "VITMERGE-CKPT-1\0", u32 version, str kind ("vit" or
// "gate"), str config JSON, str lineage, u64 seed, u32 entry count, then per
// entry: str name, u32 rank, u64 extents[rank], f32 values.
// Grams: magic "VITMERGE-GRAM-1\0", u32 version, u32 count, then per layer:
// str name, u64 samples, u64 d, f64 values[d*d].
// Datasets: magic "VITMERGE-DATA-1\0", u32 version, str meta JSON, u32 rank,
// u64 extents, f32 images, i32 labels.
// A str is a u32 byte length followed by UTF-8 bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "vitmerge/data.hpp"
#include "vitmerge/gatenet.hpp"
#include "vitmerge/merge.hpp"
#include "vitmerge/vit.hpp"

namespace vitmerge {

inline constexpr std::uint32_t kFormatVersion = 1;

namespace io {

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <class U>
  void le(U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void i32(std::int32_t v) { le(static_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string bytes, std::string source) : buf_(std::move(bytes)), source_(std::move(source)) {}

  void expect_magic(const char (&magic)[17]) {
    need(16);
    if (std::memcmp(buf_.data() + pos_, magic, 16) != 0)
      throw IoError(source_ + ": not a " + std::string(magic) + " file (bad magic)");
    pos_ += 16;
    const auto v = u32();
    if (v != kFormatVersion)
      throw IoError(source_ + ": unsupported format version " + std::to_string(v));
  }
  template <class U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::int32_t i32() { return static_cast<std::int32_t>(le<std::uint32_t>()); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void finish() const {
    if (pos_ != buf_.size()) throw IoError(source_ + ": trailing bytes after payload");
  }
  const std::string& source() const { return source_; }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw IoError(source_ + ": file is truncated");
  }
  std::string buf_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

template <class T>
void tensor_entry(Writer& w, const std::string& name, const Tensor<T>& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) w.u64(e);
  for (T v : t.data()) w.f32(static_cast<float>(v));
}

inline std::pair<std::string, Tensor<float>> tensor_entry(Reader& r) {
  std::string name = r.str();
  const auto rank = r.u32();
  if (rank > 8) throw IoError(r.source() + ": implausible rank for '" + name + "'");
  Shape shape(rank);
  for (auto& e : shape) e = r.u64();
  Tensor<float> t(shape);
  for (auto& v : t.data()) v = r.f32();
  return {std::move(name), std::move(t)};
}

}  // namespace io

inline nlohmann::json to_json(const ViTConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
          {"dim", c.dim},               {"depth", c.depth},           {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}};
}

inline ViTConfig vit_config_from_json(const nlohmann::json& j) {
  ViTConfig c;
  c.image_size = j.at("image_size");
  c.patch_size = j.at("patch_size");
  c.channels = j.at("channels");
  c.dim = j.at("dim");
  c.depth = j.at("depth");
  c.heads = j.at("heads");
  c.mlp_ratio = j.at("mlp_ratio");
  c.num_classes = j.at("num_classes");
  return c;
}

inline nlohmann::json to_json(const GateConfig& g) {
  return {{"input_dim", g.input_dim}, {"hidden", g.hidden}, {"num_tasks", g.num_tasks}};
}

inline GateConfig gate_config_from_json(const nlohmann::json& j) {
  return {j.at("input_dim"), j.at("hidden").get<std::vector<std::size_t>>(), j.at("num_tasks")};
}

inline std::string checkpoint_bytes(const ViTParams& p) {
  io::Writer w;
  w.raw("VITMERGE-CKPT-1\0", 16);
  w.u32(kFormatVersion);
  w.str("vit");
  nlohmann::json echo = to_json(p.config);
  echo["task_id"] = p.meta.task_id;
  w.str(echo.dump());
  w.str(p.meta.lineage);
  w.u64(p.meta.seed);
  w.u32(static_cast<std::uint32_t>(p.params.size()));
  for (const auto& item : p.params) io::tensor_entry(w, item.name, item.value);
  return w.bytes();
}

inline std::string checkpoint_bytes(const GateNet& g, const std::string& lineage = "gate",
                                    std::uint64_t seed = 0) {
  io::Writer w;
  w.raw("VITMERGE-CKPT-1\0", 16);
  w.u32(kFormatVersion);
  w.str("gate");
  w.str(to_json(g.config).dump());
  w.str(lineage);
  w.u64(seed);
  w.u32(static_cast<std::uint32_t>(g.params.size()));
  for (const auto& item : g.params) io::tensor_entry(w, item.name, item.value);
  return w.bytes();
}

namespace detail {

struct CheckpointHeader {
  std::string kind;
  nlohmann::json config;
  std::string lineage;
  std::uint64_t seed = 0;
};

inline CheckpointHeader read_header(io::Reader& r) {
  r.expect_magic("VITMERGE-CKPT-1\0");
  CheckpointHeader h;
  h.kind = r.str();
  try {
    h.config = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(r.source() + ": corrupt config header (" + e.what() + ")");
  }
  h.lineage = r.str();
  h.seed = r.u64();
  return h;
}

}  // namespace detail

/// Loads a ViT checkpoint; names and shapes are audited against the layout
/// implied by the echoed config.
inline ViTParams load_vit(const std::filesystem::path& path) {
  io::Reader r(io::read_file(path), path.string());
  const auto h = detail::read_header(r);
  if (h.kind != "vit") throw IoError(path.string() + ": expected a vit checkpoint, found " + h.kind);
  ViTParams p;
  try {
    p.config = vit_config_from_json(h.config);
    p.meta.task_id = h.config.at("task_id");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": config header missing fields (" + e.what() + ")");
  }
  p.meta.lineage = h.lineage;
  p.meta.seed = h.seed;
  const auto layout = vit_layout(p.config);
  const auto count = r.u32();
  if (count != layout.size())
    throw IoError(path.string() + ": " + std::to_string(count) + " tensors, layout expects " +
                  std::to_string(layout.size()));
  for (const auto& entry : layout) {
    auto [name, t] = io::tensor_entry(r);
    if (name != entry.name)
      throw IoError(path.string() + ": found tensor '" + name + "' where '" + entry.name +
                    "' was expected");
    p.params.add(name, entry.group, std::move(t), entry.decay);
  }
  r.finish();
  audit_shapes(p);
  return p;
}

inline GateNet load_gate(const std::filesystem::path& path) {
  io::Reader r(io::read_file(path), path.string());
  const auto h = detail::read_header(r);
  if (h.kind != "gate") throw IoError(path.string() + ": expected a gate checkpoint, found " + h.kind);
  GateNet g;
  try {
    g.config = gate_config_from_json(h.config);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": config header missing fields (" + e.what() + ")");
  }
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = io::tensor_entry(r);
    g.params.add(name, {GroupKind::Gate, -1}, std::move(t), name.ends_with(".weight"));
  }
  r.finish();
  audit_gate(g);
  return g;
}

inline void save_vit(const std::filesystem::path& path, const ViTParams& p) {
  io::write_file(path, checkpoint_bytes(p));
}

inline void save_gate(const std::filesystem::path& path, const GateNet& g, std::uint64_t seed = 0) {
  io::write_file(path, checkpoint_bytes(g, "gate", seed));
}

inline std::string gram_bytes(const GramStats& g) {
  io::Writer w;
  w.raw("VITMERGE-GRAM-1\0", 16);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(g.layers.size()));
  for (const auto& [name, e] : g.layers) {
    w.str(name);
    w.u64(e.samples);
    w.u64(e.gram.dim(0));
    for (double v : e.gram.data()) w.f64(v);
  }
  return w.bytes();
}

inline void save_grams(const std::filesystem::path& path, const GramStats& g) {
  io::write_file(path, gram_bytes(g));
}

inline GramStats load_grams(const std::filesystem::path& path) {
  io::Reader r(io::read_file(path), path.string());
  r.expect_magic("VITMERGE-GRAM-1\0");
  GramStats g;
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    GramEntry e;
    e.samples = r.u64();
    const auto d = r.u64();
    if (d > (1u << 16)) throw IoError(path.string() + ": implausible gram size");
    e.gram = Tensor<double>({d, d});
    for (auto& v : e.gram.data()) v = r.f64();
    g.layers.emplace(std::move(name), std::move(e));
  }
  r.finish();
  return g;
}

inline std::string dataset_bytes(const Dataset& ds) {
  io::Writer w;
  w.raw("VITMERGE-DATA-1\0", 16);
  w.u32(kFormatVersion);
  w.str(nlohmann::json{{"task_id", ds.task_id},
                       {"num_classes", ds.num_classes},
                       {"split", split_name(ds.split)}}
            .dump());
  w.u32(static_cast<std::uint32_t>(ds.images.rank()));
  for (auto e : ds.images.shape()) w.u64(e);
  for (float v : ds.images.data()) w.f32(v);
  for (int y : ds.labels) w.i32(y);
  return w.bytes();
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  io::write_file(path, dataset_bytes(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  io::Reader r(io::read_file(path), path.string());
  r.expect_magic("VITMERGE-DATA-1\0");
  Dataset ds;
  try {
    const auto meta = nlohmann::json::parse(r.str());
    ds.task_id = meta.at("task_id");
    ds.num_classes = meta.at("num_classes");
    ds.split = meta.at("split") == "train" ? Split::Train : Split::Test;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": corrupt dataset header (" + e.what() + ")");
  }
  const auto rank = r.u32();
  if (rank != 4) throw IoError(path.string() + ": dataset images must have rank 4");
  Shape shape(rank);
  for (auto& e : shape) e = r.u64();
  ds.images = Tensor<float>(shape);
  for (auto& v : ds.images.data()) v = r.f32();
  ds.labels.resize(shape[0]);
  for (auto& y : ds.labels) y = r.i32();
  r.finish();
  return ds;
}

}  // namespace vitmerge
