#include "pyrvit/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>

namespace pyrvit {

namespace {

constexpr char kMagic[8] = {'P', 'Y', 'R', 'V', 'C', 'K', 'P', 'T'};

template <typename T>
void write_raw(std::ostream& os, const T& value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw CheckpointError("corrupt checkpoint: unexpected end of file");
  return value;
}

}  // namespace

void Checkpoint::set_meta(const std::string& key, const std::string& value) {
  for (auto& [k, v] : meta_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  meta_.emplace_back(key, value);
}

std::string Checkpoint::meta(const std::string& key) const {
  for (const auto& [k, v] : meta_) {
    if (k == key) return v;
  }
  throw CheckpointError("missing checkpoint metadata key: " + key);
}

bool Checkpoint::has_meta(const std::string& key) const {
  return std::any_of(meta_.begin(), meta_.end(), [&](const auto& kv) { return kv.first == key; });
}

void Checkpoint::add_array(const std::string& name, std::vector<Eigen::Index> shape,
                           const double* data) {
  Eigen::Index count = 1;
  for (Eigen::Index d : shape) count *= d;
  Array arr;
  arr.name = name;
  arr.shape = std::move(shape);
  arr.data.assign(data, data + count);
  arrays_.push_back(std::move(arr));
}

bool Checkpoint::has_array(const std::string& name) const {
  return std::any_of(arrays_.begin(), arrays_.end(),
                     [&](const Array& a) { return a.name == name; });
}

const Checkpoint::Array& Checkpoint::array(const std::string& name) const {
  for (const auto& a : arrays_) {
    if (a.name == name) return a;
  }
  throw CheckpointError("missing checkpoint array: " + name);
}

std::vector<std::string> Checkpoint::array_names() const {
  std::vector<std::string> names;
  names.reserve(arrays_.size());
  for (const auto& a : arrays_) names.push_back(a.name);
  return names;
}

void Checkpoint::add_params(const ParamList& params, const std::string& ns) {
  for (const auto& p : params) {
    add_array(ns + p.name, {p.rows, p.cols}, p.value);
  }
}

void Checkpoint::load_params(const ParamList& params, const std::string& ns) const {
  for (const auto& p : params) {
    const Array& arr = array(ns + p.name);
    if (static_cast<Eigen::Index>(arr.data.size()) != p.size) {
      throw CheckpointError("size mismatch for array " + arr.name);
    }
    std::memcpy(p.value, arr.data.data(), sizeof(double) * static_cast<std::size_t>(p.size));
  }
}

void Checkpoint::write(const std::string& path) const {
  nlohmann::ordered_json header;
  header["version"] = kCheckpointVersion;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  for (const auto& [k, v] : meta_) meta[k] = v;
  header["meta"] = std::move(meta);
  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  std::uint64_t payload_doubles = 0;
  for (const auto& a : arrays_) {
    nlohmann::ordered_json e;
    e["name"] = a.name;
    e["shape"] = a.shape;
    e["offset"] = payload_doubles;
    e["count"] = a.data.size();
    dir.push_back(std::move(e));
    payload_doubles += a.data.size();
  }
  header["arrays"] = std::move(dir);
  const std::string header_str = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_raw<std::uint32_t>(os, kCheckpointVersion);
  write_raw<std::uint64_t>(os, header_str.size());
  os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (const auto& a : arrays_) {
    os.write(reinterpret_cast<const char*>(a.data.data()),
             static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    hash = fnv1a(a.data.data(), a.data.size() * sizeof(double), hash);
  }
  write_raw<std::uint64_t>(os, hash);
  if (!os) throw CheckpointError("write failed: " + path);
}

Checkpoint Checkpoint::read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);

  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint file: " + path);
  }
  const auto version = read_raw<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = read_raw<std::uint64_t>(is);
  std::string header_str(header_len, '\0');
  is.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw CheckpointError("corrupt checkpoint: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::parse_error&) {
    throw CheckpointError("corrupt checkpoint: bad header");
  }

  Checkpoint ck;
  for (auto it = header["meta"].begin(); it != header["meta"].end(); ++it) {
    ck.meta_.emplace_back(it.key(), it.value().get<std::string>());
  }
  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (const auto& e : header["arrays"]) {
    Array arr;
    arr.name = e["name"].get<std::string>();
    for (const auto& d : e["shape"]) arr.shape.push_back(d.get<Eigen::Index>());
    arr.data.resize(e["count"].get<std::size_t>());
    is.read(reinterpret_cast<char*>(arr.data.data()),
            static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
    if (!is) throw CheckpointError("corrupt checkpoint: truncated payload");
    hash = fnv1a(arr.data.data(), arr.data.size() * sizeof(double), hash);
    ck.arrays_.push_back(std::move(arr));
  }
  const auto stored_hash = read_raw<std::uint64_t>(is);
  if (stored_hash != hash) throw CheckpointError("corrupt checkpoint: payload hash mismatch");
  return ck;
}

}  // namespace pyrvit
