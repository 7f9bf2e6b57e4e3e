#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "ktrans/cli.hpp"

namespace ktrans::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw UsageError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  try {
    return static_cast<std::size_t>(std::stoull(v));
  } catch (const std::out_of_range&) {
    throw UsageError("config key '" + key + "' is out of range: '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size() && std::isfinite(d)) return d;
  } catch (const std::logic_error&) {
  }
  throw UsageError("config key '" + key + "' expects a finite number, got '" + v + "'");
}

// Shortest decimal that parses back to the same double.
std::string shortest(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace

std::vector<std::string> RunConfig::keys() {
  return {"d_model",      "heads",        "d_ff",          "layers_enc",   "layers_dec",
          "dropout",      "max_len",      "clusters_k",    "cluster_mode", "kmeans_max_iter",
          "kmeans_tol",   "seed",         "learning_rate", "warmup_steps", "max_steps",
          "batch_size",   "val_interval", "val_max_pairs", "clip_norm",    "dtype",
          "data_dir",     "out_dir"};
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto v = trim(value);
  if (key == "d_model") model.d_model = to_size(key, v);
  else if (key == "heads") model.heads = to_size(key, v);
  else if (key == "d_ff") model.d_ff = to_size(key, v);
  else if (key == "layers_enc") model.layers_enc = to_size(key, v);
  else if (key == "layers_dec") model.layers_dec = to_size(key, v);
  else if (key == "dropout") model.dropout = to_double(key, v);
  else if (key == "max_len") model.max_len = to_size(key, v);
  else if (key == "clusters_k") model.clusters_k = to_size(key, v);
  else if (key == "cluster_mode") {
    try {
      model.cluster_mode = parse_cluster_mode(v);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  } else if (key == "kmeans_max_iter") model.kmeans_max_iter = to_size(key, v);
  else if (key == "kmeans_tol") model.kmeans_tol = to_double(key, v);
  else if (key == "seed") {
    model.seed = to_size(key, v);
    train.seed = model.seed;
  } else if (key == "learning_rate") train.learning_rate = to_double(key, v);
  else if (key == "warmup_steps") train.warmup_steps = to_size(key, v);
  else if (key == "max_steps") train.max_steps = to_size(key, v);
  else if (key == "batch_size") train.batch_size = to_size(key, v);
  else if (key == "val_interval") train.val_interval = to_size(key, v);
  else if (key == "val_max_pairs") train.val_max_pairs = to_size(key, v);
  else if (key == "clip_norm") train.clip_norm = to_double(key, v);
  else if (key == "dtype") {
    if (v != "f64" && v != "f32") throw UsageError("dtype must be f64 or f32, got '" + v + "'");
    dtype = v;
  } else if (key == "data_dir") data_dir = v;
  else if (key == "out_dir") out_dir = v;
  else throw UsageError("unknown config key '" + key + "'");
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(n) + ": expected 'key = value'");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const UsageError& e) {
      throw UsageError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  RunConfig c;
  c.apply_file(path);
  return c;
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  out << "# ktrans run configuration (key = value)\n";
  out << "d_model = " << model.d_model << "\n";
  out << "heads = " << model.heads << "\n";
  out << "d_ff = " << model.d_ff << "\n";
  out << "layers_enc = " << model.layers_enc << "\n";
  out << "layers_dec = " << model.layers_dec << "\n";
  out << "dropout = " << shortest(model.dropout) << "\n";
  out << "max_len = " << model.max_len << "\n";
  out << "clusters_k = " << model.clusters_k << "\n";
  out << "cluster_mode = " << to_string(model.cluster_mode) << "\n";
  out << "kmeans_max_iter = " << model.kmeans_max_iter << "\n";
  out << "kmeans_tol = " << shortest(model.kmeans_tol) << "\n";
  out << "seed = " << model.seed << "\n";
  out << "learning_rate = " << shortest(train.learning_rate) << "\n";
  out << "warmup_steps = " << train.warmup_steps << "\n";
  out << "max_steps = " << train.max_steps << "\n";
  out << "batch_size = " << train.batch_size << "\n";
  out << "val_interval = " << train.val_interval << "\n";
  out << "val_max_pairs = " << train.val_max_pairs << "\n";
  out << "clip_norm = " << shortest(train.clip_norm) << "\n";
  out << "dtype = " << dtype << "\n";
  out << "data_dir = " << data_dir.string() << "\n";
  out << "out_dir = " << out_dir.string() << "\n";
  return out.str();
}

std::filesystem::path default_run_dir(const std::filesystem::path& fallback) {
  const char* env = std::getenv(kRunDirEnv);
  return env && *env ? std::filesystem::path(env) : fallback;
}

}  // namespace ktrans::cli
