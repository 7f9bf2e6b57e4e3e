#pragma once

// Checkpoint container:
//
//   ktrans-checkpoint <version>\n
//   manifest_bytes <N>\n
//   checksum <16 hex digits>\n        FNV-1a 64 over manifest + buffer
//   <manifest: N bytes of text>
//   <buffer: little-endian row-major values and text blobs>
//
// Manifest lines are "key value..." records: config fields, free-form meta,
// blob and tensor entries with byte offsets into the buffer, Adam scalars.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ktrans/adam.hpp"
#include "ktrans/model.hpp"

namespace ktrans {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointExtras {
  std::map<std::string, std::string> meta;  // values must not contain newlines
  std::vector<std::string> source_vocab;    // regular tokens, id order from 4
  std::vector<std::string> target_vocab;
};

template <typename T>
struct Checkpoint {
  KTransformer<T> model;
  std::optional<AdamState<T>> adam;
  CheckpointExtras extras;
};

struct CheckpointInfo {
  int version = 0;
  std::string dtype;  // "f32" | "f64"
  ModelConfig config;
  std::map<std::string, std::string> meta;
};

template <typename T>
std::string_view dtype_name();

// Written to `path.tmp` first and renamed, so an interrupted save never
// replaces an existing checkpoint.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const KTransformer<T>& model,
                     const AdamState<T>* adam = nullptr, const CheckpointExtras& extras = {});

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

// Header and manifest only; verifies the checksum.
CheckpointInfo inspect_checkpoint(const std::filesystem::path& path);

std::vector<std::pair<std::string, std::string>> config_fields(const ModelConfig& config);
ModelConfig config_from_fields(const std::map<std::string, std::string>& fields);

namespace detail {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);

// Explicit little-endian encoding independent of the host byte order.
template <typename T>
void append_le(std::string& out, std::span<const T> values);
template <typename T>
std::vector<T> read_le(std::string_view bytes);

}  // namespace detail

}  // namespace ktrans
