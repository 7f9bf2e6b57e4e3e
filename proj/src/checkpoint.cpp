#include "ktrans/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

namespace ktrans {

namespace {

struct Entry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t bytes = 0;
};

struct Manifest {
  int version = 0;
  std::string dtype;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> meta;
  std::map<std::string, Entry> blobs;
  std::vector<Entry> tensors;
  std::map<std::string, std::string> adam;
  std::size_t buffer_bytes = 0;
};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string shape_field(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out.push_back(',');
    out += std::to_string(shape[i]);
  }
  return out.empty() ? "-" : out;
}

std::size_t parse_size(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return static_cast<std::size_t>(v);
  } catch (const std::logic_error&) {
    throw CheckpointError("checkpoint manifest: bad " + what + " '" + text + "'");
  }
}

double parse_double(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::logic_error&) {
    throw CheckpointError("checkpoint manifest: bad " + what + " '" + text + "'");
  }
}

Shape parse_shape(const std::string& text) {
  Shape shape;
  if (text == "-") return shape;
  std::istringstream in(text);
  std::string dim;
  while (std::getline(in, dim, ',')) shape.push_back(parse_size(dim, "shape"));
  return shape;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool take_line(std::string_view& rest, std::string& line) {
  const auto nl = rest.find('\n');
  if (nl == std::string_view::npos) return false;
  line.assign(rest.substr(0, nl));
  rest.remove_prefix(nl + 1);
  return true;
}

Manifest parse_manifest(std::string_view text) {
  Manifest m;
  std::string line;
  while (take_line(text, line)) {
    std::istringstream in(line);
    std::string kind;
    in >> kind;
    if (kind == "version") {
      std::string v;
      in >> v;
      m.version = static_cast<int>(parse_size(v, "version"));
    } else if (kind == "dtype") {
      in >> m.dtype;
    } else if (kind == "config" || kind == "adam") {
      std::string key, value;
      in >> key >> value;
      (kind == "config" ? m.config : m.adam)[key] = value;
    } else if (kind == "meta") {
      std::string key;
      in >> key;
      std::string value;
      std::getline(in, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      m.meta[key] = value;
    } else if (kind == "blob" || kind == "tensor") {
      Entry e;
      std::string shape, offset, bytes;
      in >> e.name;
      if (kind == "tensor") in >> shape;
      in >> offset >> bytes;
      if (e.name.empty() || offset.empty() || bytes.empty()) {
        throw CheckpointError("checkpoint manifest: malformed line '" + line + "'");
      }
      e.shape = kind == "tensor" ? parse_shape(shape) : Shape{};
      e.offset = parse_size(offset, "offset");
      e.bytes = parse_size(bytes, "byte count");
      if (kind == "blob") {
        m.blobs[e.name] = e;
      } else {
        m.tensors.push_back(e);
      }
    } else if (kind == "buffer_bytes") {
      std::string v;
      in >> v;
      m.buffer_bytes = parse_size(v, "buffer size");
    } else if (!kind.empty()) {
      throw CheckpointError("checkpoint manifest: unknown record '" + kind + "'");
    }
  }
  return m;
}

struct Container {
  Manifest manifest;
  std::string_view buffer;
};

// Validates header, sizes, checksum and entry bounds.
Container open_container(const std::string& file, const std::filesystem::path& path) {
  std::string_view rest(file);
  std::string l1, l2, l3;
  if (!take_line(rest, l1) || l1.rfind("ktrans-checkpoint ", 0) != 0) {
    throw CheckpointError(path.string() + ": not a ktrans checkpoint");
  }
  const auto version = parse_size(l1.substr(18), "version");
  if (version != static_cast<std::size_t>(kCheckpointVersion)) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " +
                          std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  if (!take_line(rest, l2) || l2.rfind("manifest_bytes ", 0) != 0 || !take_line(rest, l3) ||
      l3.rfind("checksum ", 0) != 0) {
    throw CheckpointError(path.string() + ": truncated or malformed checkpoint header");
  }
  const auto manifest_bytes = parse_size(l2.substr(15), "manifest size");
  if (rest.size() < manifest_bytes) {
    throw CheckpointError(path.string() + ": truncated checkpoint (manifest incomplete)");
  }
  Container c;
  c.manifest = parse_manifest(rest.substr(0, manifest_bytes));
  if (c.manifest.version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": manifest version mismatch");
  }
  c.buffer = rest.substr(manifest_bytes);
  if (c.buffer.size() < c.manifest.buffer_bytes) {
    throw CheckpointError(path.string() + ": truncated checkpoint (" +
                          std::to_string(c.buffer.size()) + " of " +
                          std::to_string(c.manifest.buffer_bytes) + " buffer bytes)");
  }
  if (c.buffer.size() > c.manifest.buffer_bytes) {
    throw CheckpointError(path.string() + ": unexpected trailing bytes after buffer");
  }
  char expected[20];
  std::snprintf(expected, sizeof expected, "%016llx",
                static_cast<unsigned long long>(detail::fnv1a64(rest)));
  if (l3.substr(9) != expected) {
    throw CheckpointError(path.string() + ": integrity check failed (checksum mismatch)");
  }
  const std::size_t elem = c.manifest.dtype == "f32" ? 4 : c.manifest.dtype == "f64" ? 8 : 0;
  if (elem == 0) throw CheckpointError(path.string() + ": unknown dtype '" + c.manifest.dtype + "'");
  auto check = [&](const Entry& e, std::size_t expected_bytes) {
    if (e.offset > c.buffer.size() || e.bytes > c.buffer.size() - e.offset ||
        e.bytes != expected_bytes) {
      throw CheckpointError(path.string() + ": manifest/buffer inconsistency at '" + e.name + "'");
    }
  };
  for (const auto& e : c.manifest.tensors) check(e, shape_numel(e.shape) * elem);
  for (const auto& [name, e] : c.manifest.blobs) check(e, e.bytes);
  return c;
}

std::vector<std::string> split_blob(std::string_view blob) {
  std::vector<std::string> out;
  std::string line;
  while (take_line(blob, line)) out.push_back(line);
  return out;
}

}  // namespace

namespace detail {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash) {
  for (unsigned char b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

template <typename T>
void append_le(std::string& out, std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : values) {
    const auto bits = std::bit_cast<Bits>(v);
    for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
  }
}

template <typename T>
std::vector<T> read_le(std::string_view bytes) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  if (bytes.size() % sizeof(T) != 0) throw CheckpointError("read_le: ragged byte count");
  std::vector<T> out(bytes.size() / sizeof(T));
  for (std::size_t i = 0; i < out.size(); ++i) {
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b)
      bits |= static_cast<Bits>(static_cast<unsigned char>(bytes[i * sizeof(T) + b])) << (8 * b);
    out[i] = std::bit_cast<T>(bits);
  }
  return out;
}

template void append_le<float>(std::string&, std::span<const float>);
template void append_le<double>(std::string&, std::span<const double>);
template std::vector<float> read_le<float>(std::string_view);
template std::vector<double> read_le<double>(std::string_view);

}  // namespace detail

template <>
std::string_view dtype_name<float>() {
  return "f32";
}
template <>
std::string_view dtype_name<double>() {
  return "f64";
}

std::vector<std::pair<std::string, std::string>> config_fields(const ModelConfig& c) {
  return {{"d_model", std::to_string(c.d_model)},
          {"heads", std::to_string(c.heads)},
          {"d_ff", std::to_string(c.d_ff)},
          {"layers_enc", std::to_string(c.layers_enc)},
          {"layers_dec", std::to_string(c.layers_dec)},
          {"dropout", format_double(c.dropout)},
          {"max_len", std::to_string(c.max_len)},
          {"clusters_k", std::to_string(c.clusters_k)},
          {"cluster_mode", std::string(to_string(c.cluster_mode))},
          {"src_vocab", std::to_string(c.src_vocab)},
          {"tgt_vocab", std::to_string(c.tgt_vocab)},
          {"seed", std::to_string(c.seed)},
          {"kmeans_max_iter", std::to_string(c.kmeans_max_iter)},
          {"kmeans_tol", format_double(c.kmeans_tol)}};
}

ModelConfig config_from_fields(const std::map<std::string, std::string>& f) {
  auto get = [&](const char* key) -> const std::string& {
    const auto it = f.find(key);
    if (it == f.end()) throw CheckpointError(std::string("checkpoint manifest: missing config ") + key);
    return it->second;
  };
  ModelConfig c;
  c.d_model = parse_size(get("d_model"), "d_model");
  c.heads = parse_size(get("heads"), "heads");
  c.d_ff = parse_size(get("d_ff"), "d_ff");
  c.layers_enc = parse_size(get("layers_enc"), "layers_enc");
  c.layers_dec = parse_size(get("layers_dec"), "layers_dec");
  c.dropout = parse_double(get("dropout"), "dropout");
  c.max_len = parse_size(get("max_len"), "max_len");
  c.clusters_k = parse_size(get("clusters_k"), "clusters_k");
  try {
    c.cluster_mode = parse_cluster_mode(get("cluster_mode"));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint manifest: ") + e.what());
  }
  c.src_vocab = parse_size(get("src_vocab"), "src_vocab");
  c.tgt_vocab = parse_size(get("tgt_vocab"), "tgt_vocab");
  c.seed = parse_size(get("seed"), "seed");
  c.kmeans_max_iter = parse_size(get("kmeans_max_iter"), "kmeans_max_iter");
  c.kmeans_tol = parse_double(get("kmeans_tol"), "kmeans_tol");
  return c;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const KTransformer<T>& model,
                     const AdamState<T>* adam, const CheckpointExtras& extras) {
  std::string manifest = "version " + std::to_string(kCheckpointVersion) + "\n";
  manifest += "dtype " + std::string(dtype_name<T>()) + "\n";
  for (const auto& [k, v] : config_fields(model.config())) manifest += "config " + k + " " + v + "\n";
  for (const auto& [k, v] : extras.meta) {
    if (k.empty() || k.find_first_of(" \t\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint meta '" + k + "' is not a single-line key/value");
    }
    manifest += "meta " + k + " " + v + "\n";
  }

  std::string buffer;
  auto add_blob = [&](const std::string& name, const std::vector<std::string>& lines) {
    const auto offset = buffer.size();
    for (const auto& l : lines) {
      if (l.find('\n') != std::string::npos) throw std::invalid_argument("vocabulary token holds a newline");
      buffer += l;
      buffer.push_back('\n');
    }
    manifest += "blob " + name + " " + std::to_string(offset) + " " +
                std::to_string(buffer.size() - offset) + "\n";
  };
  add_blob("source_vocab", extras.source_vocab);
  add_blob("target_vocab", extras.target_vocab);

  auto add_tensor = [&](const std::string& name, const Shape& shape, std::span<const T> values) {
    const auto offset = buffer.size();
    detail::append_le<T>(buffer, values);
    manifest += "tensor " + name + " " + shape_field(shape) + " " + std::to_string(offset) + " " +
                std::to_string(buffer.size() - offset) + "\n";
  };
  const auto params = model.parameters();
  for (const auto& p : params) add_tensor(p.name, p.tensor.shape(), p.tensor.data());
  if (adam) {
    if (adam->m.size() != params.size() || adam->v.size() != params.size()) {
      throw std::invalid_argument("save_checkpoint: Adam state does not match the model");
    }
    manifest += "adam step " + std::to_string(adam->step) + "\n";
    manifest += "adam learning_rate " + format_double(adam->learning_rate) + "\n";
    manifest += "adam beta1 " + format_double(adam->beta1) + "\n";
    manifest += "adam beta2 " + format_double(adam->beta2) + "\n";
    manifest += "adam epsilon " + format_double(adam->epsilon) + "\n";
    for (std::size_t i = 0; i < params.size(); ++i) {
      add_tensor("adam.m." + params[i].name, params[i].tensor.shape(), adam->m[i]);
      add_tensor("adam.v." + params[i].name, params[i].tensor.shape(), adam->v[i]);
    }
  }
  manifest += "buffer_bytes " + std::to_string(buffer.size()) + "\n";

  std::string body = manifest + buffer;
  char sum[20];
  std::snprintf(sum, sizeof sum, "%016llx", static_cast<unsigned long long>(detail::fnv1a64(body)));
  const std::string header = "ktrans-checkpoint " + std::to_string(kCheckpointVersion) +
                             "\nmanifest_bytes " + std::to_string(manifest.size()) +
                             "\nchecksum " + sum + "\n";

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    out << header << body;
    if (!out.flush()) throw CheckpointError("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const auto file = read_file(path);
  const auto c = open_container(file, path);
  if (c.manifest.dtype != dtype_name<T>()) {
    throw CheckpointError(path.string() + ": stored dtype " + c.manifest.dtype +
                          " does not match requested " + std::string(dtype_name<T>()));
  }
  const auto config = config_from_fields(c.manifest.config);
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(path.string() + ": invalid stored config: " + e.what());
  }

  Checkpoint<T> ck{KTransformer<T>(config), std::nullopt, {}};
  std::map<std::string, const Entry*> by_name;
  for (const auto& e : c.manifest.tensors) {
    if (!by_name.emplace(e.name, &e).second) {
      throw CheckpointError(path.string() + ": duplicate tensor '" + e.name + "'");
    }
  }
  auto fetch = [&](const std::string& name, const Shape& shape) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError(path.string() + ": missing tensor '" + name + "'");
    if (it->second->shape != shape) {
      throw CheckpointError(path.string() + ": tensor '" + name + "' stored as " +
                            shape_to_string(it->second->shape) + ", model expects " +
                            shape_to_string(shape));
    }
    return detail::read_le<T>(c.buffer.substr(it->second->offset, it->second->bytes));
  };

  const auto params = ck.model.parameters();
  std::set<std::string> used;
  for (const auto& p : params) {
    auto values = fetch(p.name, p.tensor.shape());
    auto dst = Tensor<T>(p.tensor).mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
    used.insert(p.name);
  }
  if (!c.manifest.adam.empty()) {
    AdamState<T> s;
    auto scalar = [&](const char* key) {
      const auto it = c.manifest.adam.find(key);
      if (it == c.manifest.adam.end()) throw CheckpointError(path.string() + ": missing adam " + key);
      return it->second;
    };
    s.step = parse_size(scalar("step"), "adam step");
    s.learning_rate = parse_double(scalar("learning_rate"), "learning rate");
    s.beta1 = parse_double(scalar("beta1"), "beta1");
    s.beta2 = parse_double(scalar("beta2"), "beta2");
    s.epsilon = parse_double(scalar("epsilon"), "epsilon");
    for (const auto& p : params) {
      s.m.push_back(fetch("adam.m." + p.name, p.tensor.shape()));
      s.v.push_back(fetch("adam.v." + p.name, p.tensor.shape()));
      used.insert("adam.m." + p.name);
      used.insert("adam.v." + p.name);
    }
    ck.adam = std::move(s);
  }
  if (used.size() != by_name.size()) {
    for (const auto& [name, e] : by_name)
      if (!used.count(name)) throw CheckpointError(path.string() + ": unexpected tensor '" + name + "'");
  }
  ck.extras.meta = c.manifest.meta;
  for (const auto& [name, e] : c.manifest.blobs) {
    auto lines = split_blob(c.buffer.substr(e.offset, e.bytes));
    if (name == "source_vocab") {
      ck.extras.source_vocab = std::move(lines);
    } else if (name == "target_vocab") {
      ck.extras.target_vocab = std::move(lines);
    }
  }
  return ck;
}

CheckpointInfo inspect_checkpoint(const std::filesystem::path& path) {
  const auto file = read_file(path);
  const auto c = open_container(file, path);
  CheckpointInfo info;
  info.version = c.manifest.version;
  info.dtype = c.manifest.dtype;
  info.config = config_from_fields(c.manifest.config);
  info.meta = c.manifest.meta;
  return info;
}

template void save_checkpoint<float>(const std::filesystem::path&, const KTransformer<float>&,
                                     const AdamState<float>*, const CheckpointExtras&);
template void save_checkpoint<double>(const std::filesystem::path&, const KTransformer<double>&,
                                      const AdamState<double>*, const CheckpointExtras&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace ktrans
