#pragma once

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include "json.hpp"
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "encoding.hpp"
#include "error.hpp"
#include "layers.hpp"
#include "models.hpp"
#include "tensor.hpp"

namespace pmk::io {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

using json = nlohmann::json;
namespace fs = std::filesystem;

enum class IoErrorKind { io, bad_magic, bad_version, truncated, dtype_mismatch, bad_header, schema, missing_file };

inline const char* to_string(IoErrorKind k) {
  switch (k) {
    case IoErrorKind::io: return "io";
    case IoErrorKind::bad_magic: return "bad_magic";
    case IoErrorKind::bad_version: return "bad_version";
    case IoErrorKind::truncated: return "truncated";
    case IoErrorKind::dtype_mismatch: return "dtype_mismatch";
    case IoErrorKind::bad_header: return "bad_header";
    case IoErrorKind::schema: return "schema";
    case IoErrorKind::missing_file: return "missing_file";
  }
  return "io";
}

class IoError : public Error {
 public:
  IoError(IoErrorKind kind, const std::string& msg) : Error(std::string(to_string(kind)) + ": " + msg), kind_(kind) {}
  [[nodiscard]] IoErrorKind kind() const { return kind_; }

 private:
  IoErrorKind kind_;
};

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::array<char, 4> kMagic{'P', 'M', 'K', 'T'};
inline constexpr std::uint32_t kVersion = 1;

inline std::string sha256_hex(std::span<const std::uint8_t> data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string sha256_hex(std::string_view s) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

// nlohmann's default object type is a std::map, so dump() already sorts keys.
inline std::string canonical(const json& j) { return j.dump(); }

inline Bytes read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fs::exists(path) ? IoErrorKind::io : IoErrorKind::missing_file, "cannot open " + path.string());
  Bytes b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return b;
}

inline void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError(IoErrorKind::io, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError(IoErrorKind::io, "rename " + tmp.string() + ": " + ec.message());
}

inline void write_text_atomic(const fs::path& path, std::string_view s) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string read_text(const fs::path& path) {
  const auto b = read_file(path);
  return {b.begin(), b.end()};
}

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

namespace detail {
inline void put_u32(Bytes& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
}  // namespace detail

template <typename T>
Bytes encode_tensor(const Tensor<T>& t, const json& meta = json::object()) {
  json header = {{"dtype", dtype_name<T>()}, {"shape", t.shape()}, {"order", "row-major"}, {"meta", meta}};
  const std::string h = canonical(header);
  Bytes b;
  b.reserve(12 + h.size() + t.size() * sizeof(T));
  b.insert(b.end(), kMagic.begin(), kMagic.end());
  detail::put_u32(b, kVersion);
  detail::put_u32(b, static_cast<std::uint32_t>(h.size()));
  b.insert(b.end(), h.begin(), h.end());
  const auto* p = reinterpret_cast<const std::uint8_t*>(t.ptr());
  b.insert(b.end(), p, p + t.size() * sizeof(T));
  return b;
}

struct Decoded {
  json header;
  std::size_t payload_offset = 0;
  std::size_t end = 0;  // one past the payload
};

inline Decoded parse_container(std::span<const std::uint8_t> b, std::size_t offset = 0) {
  if (b.size() < offset + 12) throw IoError(IoErrorKind::truncated, "container shorter than fixed header");
  if (std::memcmp(b.data() + offset, kMagic.data(), 4) != 0) throw IoError(IoErrorKind::bad_magic, "expected PMKT");
  const auto version = detail::get_u32(b.data() + offset + 4);
  if (version != kVersion) throw IoError(IoErrorKind::bad_version, "version " + std::to_string(version));
  const std::size_t hlen = detail::get_u32(b.data() + offset + 8);
  if (b.size() < offset + 12 + hlen) throw IoError(IoErrorKind::truncated, "header cut short");
  Decoded d;
  try {
    d.header = json::parse(b.begin() + static_cast<std::ptrdiff_t>(offset + 12),
                           b.begin() + static_cast<std::ptrdiff_t>(offset + 12 + hlen));
  } catch (const json::exception& e) {
    throw IoError(IoErrorKind::bad_header, e.what());
  }
  const auto& h = d.header;
  if (!h.is_object() || !h.contains("dtype") || !h.contains("shape") || h.value("order", "") != "row-major")
    throw IoError(IoErrorKind::bad_header, "missing dtype/shape/order");
  const std::string dt = h["dtype"];
  if (dt != "f32" && dt != "f64") throw IoError(IoErrorKind::bad_header, "dtype " + dt);
  Shape shape;
  try {
    shape = h["shape"].get<Shape>();
  } catch (const json::exception& e) {
    throw IoError(IoErrorKind::bad_header, e.what());
  }
  const std::size_t bytes = numel(shape) * (dt == "f32" ? 4 : 8);
  d.payload_offset = offset + 12 + hlen;
  if (b.size() < d.payload_offset + bytes)
    throw IoError(IoErrorKind::truncated, "payload has " + std::to_string(b.size() - d.payload_offset) + " of " +
                                              std::to_string(bytes) + " bytes");
  d.end = d.payload_offset + bytes;
  return d;
}

template <typename T>
Tensor<T> decode_tensor(std::span<const std::uint8_t> b, json* meta = nullptr, std::size_t offset = 0,
                        bool exact_length = true) {
  const auto d = parse_container(b, offset);
  if (d.header["dtype"] != dtype_name<T>())
    throw IoError(IoErrorKind::dtype_mismatch,
                  "stored " + d.header["dtype"].get<std::string>() + ", requested " + dtype_name<T>());
  if (exact_length && d.end != b.size()) throw IoError(IoErrorKind::bad_header, "trailing bytes after payload");
  Tensor<T> t(d.header["shape"].get<Shape>());
  if (t.size()) std::memcpy(t.ptr(), b.data() + d.payload_offset, t.size() * sizeof(T));
  if (meta) *meta = d.header.value("meta", json::object());
  return t;
}

template <typename T>
void write_tensor(const fs::path& path, const Tensor<T>& t, const json& meta = json::object()) {
  write_file_atomic(path, encode_tensor(t, meta));
}

template <typename T>
Tensor<T> read_tensor(const fs::path& path, json* meta = nullptr) {
  const auto b = read_file(path);
  return decode_tensor<T>(b, meta);
}

// ---- pose data files ----

inline void write_sequence(const fs::path& path, const HeatmapSequence& s, const json& meta = json::object()) {
  write_tensor(path, Tensor<float>(Shape{s.frames, s.joints, s.height, s.width}, s.values), meta);
}

inline HeatmapSequence read_sequence(const fs::path& path) {
  auto t = read_tensor<float>(path);
  if (t.rank() != 4) throw IoError(IoErrorKind::bad_header, path.string() + ": sequence must be rank 4 (T,J,H,W)");
  HeatmapSequence s(t.dim(0), t.dim(1), t.dim(2), t.dim(3));
  s.values = std::move(t.storage());
  return s;
}

inline void write_pose(const fs::path& path, const PoseRepresentation& p) {
  write_tensor(path, Tensor<float>(Shape{p.channels, p.joints, p.height, p.width}, p.values),
               {{"norm", to_string(p.tag)}, {"source_frames", p.source_frames}});
}

inline PoseRepresentation read_pose(const fs::path& path) {
  json meta;
  auto t = read_tensor<float>(path, &meta);
  if (t.rank() != 4) throw IoError(IoErrorKind::bad_header, path.string() + ": pose must be rank 4 (C,J,H,W)");
  PoseRepresentation p{t.dim(0), t.dim(1), t.dim(2), t.dim(3), std::move(t.storage()),
                       parse_norm_tag(meta.value("norm", "raw")), meta.value("source_frames", std::size_t{0})};
  return p;
}

// ---- run configuration ----

struct RunConfig {
  // encoding
  std::size_t channels = 3;
  std::string norm = "tan";
  std::size_t height = 64, width = 64;
  // augmentation
  int beta = 2, gamma = 1;
  double flip_prob = 0.5;
  bool augment = true;
  // model
  std::string model = "jmrn";
  std::size_t c_dim = 32;
  double tau = 2.0 / 3.0;
  double prior_a = 0.6, prior_b = 0.4;
  double lambda_reg = 0.1;
  // optimization
  double lr = 1e-4;
  std::size_t patience = 3;
  double decay = 0.5;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  bool multi_label = false;
  // clip selection
  std::size_t oracle_k = 6;
  std::size_t k_select = 14;
  std::string consensus = "avg";
  std::string rank_loss = "logistic";
  double margin = 1.0;

  void validate() const;
  [[nodiscard]] json to_json() const;
  static RunConfig from_json(const json& j);
  [[nodiscard]] std::string hash() const { return sha256_hex(canonical(to_json())); }
};

#define PMK_CONFIG_FIELDS(X)                                                                                    \
  X(channels) X(norm) X(height) X(width) X(beta) X(gamma) X(flip_prob) X(augment) X(model) X(c_dim) X(tau)    \
      X(prior_a) X(prior_b) X(lambda_reg) X(lr) X(patience) X(decay) X(epochs) X(batch_size) X(seed)          \
          X(multi_label) X(oracle_k) X(k_select) X(consensus) X(rank_loss) X(margin)

inline json RunConfig::to_json() const {
  json j = json::object();
#define PMK_PUT(f) j[#f] = f;
  PMK_CONFIG_FIELDS(PMK_PUT)
#undef PMK_PUT
  return j;
}

inline RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw IoError(IoErrorKind::schema, "config must be a JSON object");
  static const std::set<std::string> known = [] {
    std::set<std::string> s;
#define PMK_NAME(f) s.insert(#f);
    PMK_CONFIG_FIELDS(PMK_NAME)
#undef PMK_NAME
    return s;
  }();
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw IoError(IoErrorKind::schema, "unknown config key '" + k + "'");
  RunConfig c;
  try {
#define PMK_GET(f) \
  if (j.contains(#f)) j.at(#f).get_to(c.f);
    PMK_CONFIG_FIELDS(PMK_GET)
#undef PMK_GET
  } catch (const json::exception& e) {
    throw IoError(IoErrorKind::schema, e.what());
  }
  c.validate();
  return c;
}

inline void RunConfig::validate() const {
  auto bad = [](const std::string& m) { throw IoError(IoErrorKind::schema, m); };
  if (channels < 2) bad("channels must be >= 2");
  if (norm != "tan" && norm != "max" && norm != "raw") bad("norm must be tan|max|raw");
  if (height < 16 || width < 16) bad("height/width must be >= 16");
  if (beta < 0 || gamma < 0) bad("beta/gamma must be >= 0");
  if (flip_prob < 0 || flip_prob > 1) bad("flip_prob outside [0,1]");
  if (model != "jmrn" && model != "baseline") bad("model must be jmrn|baseline");
  if (c_dim < 1) bad("c_dim must be >= 1");
  if (!(tau > 0)) bad("tau must be > 0");
  if (!(prior_a > 0) || !(prior_b > 0)) bad("prior parameters must be > 0");
  if (lambda_reg < 0) bad("lambda_reg must be >= 0");
  if (!(lr > 0)) bad("lr must be > 0");
  if (!(decay > 0) || decay >= 1) bad("decay must be in (0,1)");
  if (batch_size < 2) bad("batch_size must be >= 2");
  if (oracle_k < 1 || k_select < 1) bad("oracle_k and k_select must be >= 1");
  if (consensus != "avg" && consensus != "max") bad("consensus must be avg|max");
  if (rank_loss != "logistic" && rank_loss != "margin") bad("rank_loss must be logistic|margin");
}

#undef PMK_CONFIG_FIELDS

inline RunConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw IoError(IoErrorKind::schema, path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

// ---- checkpoints ----

template <typename T>
void save_checkpoint(const fs::path& dir, const std::string& stem, Network<T>& net, const std::string& config_hash,
                     std::size_t step) {
  Bytes blob;
  json index = {{"config_hash", config_hash}, {"step", step}, {"model", net.kind()}, {"tensors", json::array()}};
  auto add = [&](const std::string& name, const Tensor<T>& t) {
    index["tensors"].push_back({{"name", name}, {"offset", blob.size()}, {"shape", t.shape()}});
    const auto b = encode_tensor(t, {{"name", name}});
    blob.insert(blob.end(), b.begin(), b.end());
  };
  nn::StateVisitor<T> v{[&](const std::string& n, Parameter<T>& p) { add(n, p.value); },
                        [&](const std::string& n, Tensor<T>& t) { add(n, t); }};
  net.visit(v);
  write_file_atomic(dir / (stem + ".bin"), blob);
  write_text_atomic(dir / (stem + ".json"), index.dump(1));
}

inline json read_checkpoint_index(const fs::path& dir, const std::string& stem) {
  try {
    return json::parse(read_text(dir / (stem + ".json")));
  } catch (const json::parse_error& e) {
    throw IoError(IoErrorKind::bad_header, e.what());
  }
}

// Loads every tensor named by the network; shapes must match exactly.
template <typename T>
json load_checkpoint(const fs::path& dir, const std::string& stem, Network<T>& net) {
  const json index = read_checkpoint_index(dir, stem);
  if (index.value("model", "") != net.kind())
    throw IoError(IoErrorKind::schema, "checkpoint holds a " + index.value("model", std::string("?")) + " model, expected " + net.kind());
  const Bytes blob = read_file(dir / (stem + ".bin"));
  std::map<std::string, std::size_t> offsets;
  for (const auto& e : index["tensors"]) offsets[e["name"]] = e["offset"];
  auto load = [&](const std::string& name, Tensor<T>& dst) {
    const auto it = offsets.find(name);
    if (it == offsets.end()) throw IoError(IoErrorKind::schema, "checkpoint lacks tensor " + name);
    auto t = decode_tensor<T>(blob, nullptr, it->second, false);
    if (t.shape() != dst.shape())
      throw IoError(IoErrorKind::schema, name + ": stored " + shape_str(t.shape()) + ", model has " + shape_str(dst.shape()));
    dst = std::move(t);
  };
  nn::StateVisitor<T> v{[&](const std::string& n, Parameter<T>& p) { load(n, p.value); },
                        [&](const std::string& n, Tensor<T>& t) { load(n, t); }};
  net.visit(v);
  return index;
}

// ---- manifest ----

struct ManifestRecord {
  std::string id;
  std::string path;  // relative to the manifest directory unless absolute
  int label = 0;
  std::vector<int> labels;  // multi-label targets; empty for single-label data
  std::string split;
  std::size_t frames = 0;
  json annotations;  // null when absent
};

struct Manifest {
  fs::path root;
  std::vector<ManifestRecord> records;

  [[nodiscard]] fs::path resolve(const ManifestRecord& r) const {
    const fs::path p(r.path);
    return p.is_absolute() ? p : root / p;
  }
  [[nodiscard]] std::vector<const ManifestRecord*> split(const std::string& name) const {
    std::vector<const ManifestRecord*> out;
    for (const auto& r : records)
      if (r.split == name) out.push_back(&r);
    return out;
  }
  [[nodiscard]] std::size_t num_classes() const {
    int mx = -1;
    for (const auto& r : records) {
      mx = std::max(mx, r.label);
      for (int l : r.labels) mx = std::max(mx, l);
    }
    return static_cast<std::size_t>(mx + 1);
  }
};

inline json to_json(const ManifestRecord& r) {
  json j = {{"id", r.id}, {"path", r.path}, {"class", r.label}, {"split", r.split}, {"T", r.frames}};
  if (!r.labels.empty()) j["labels"] = r.labels;
  if (!r.annotations.is_null()) j["annotations"] = r.annotations;
  return j;
}

inline Manifest parse_manifest(const json& j, const fs::path& root, bool check_files = true) {
  if (!j.is_array()) throw IoError(IoErrorKind::schema, "manifest must be a JSON array");
  if (j.empty()) throw IoError(IoErrorKind::schema, "manifest is empty");
  Manifest m{root, {}};
  std::set<std::string> seen;
  std::vector<std::string> dups, dangling;
  for (const auto& e : j) {
    ManifestRecord r;
    try {
      r.id = e.at("id").get<std::string>();
      r.path = e.at("path").get<std::string>();
      r.label = e.at("class").get<int>();
      r.split = e.at("split").get<std::string>();
      r.frames = e.at("T").get<std::size_t>();
      if (e.contains("labels")) r.labels = e["labels"].get<std::vector<int>>();
      if (e.contains("annotations")) r.annotations = e["annotations"];
    } catch (const json::exception& ex) {
      throw IoError(IoErrorKind::schema, std::string("manifest record: ") + ex.what());
    }
    if (!seen.insert(r.id).second) dups.push_back(r.id);
    m.records.push_back(std::move(r));
    if (check_files && !fs::exists(m.resolve(m.records.back()))) dangling.push_back(m.records.back().path);
  }
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
    return s;
  };
  if (!dups.empty()) throw IoError(IoErrorKind::schema, "duplicate ids: " + join(dups));
  if (!dangling.empty()) throw IoError(IoErrorKind::missing_file, "dangling paths: " + join(dangling));
  return m;
}

inline Manifest load_manifest(const fs::path& path, bool check_files = true) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw IoError(IoErrorKind::schema, path.string() + ": " + e.what());
  }
  return parse_manifest(j, path.parent_path(), check_files);
}

inline void save_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
  json j = json::array();
  for (const auto& r : records) j.push_back(to_json(r));
  write_text_atomic(path, j.dump(1));
}

}  // namespace pmk::io
