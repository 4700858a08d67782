#pragma once

// Checkpoint container:
//   bytes 0..7   magic "ICVLAB01"
//   bytes 8..15  manifest length n (uint64, little endian)
//   n bytes      JSON manifest {kind, meta, tensors: [{name, shape, dtype, offset, bytes}]}
//   blobs        raw little-endian IEEE-754 data, row-major, in manifest order;
//                offsets are relative to the first blob byte.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icvlab/intervention.hpp"
#include "icvlab/model.hpp"

namespace icvlab {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'I', 'C', 'V', 'L', 'A', 'B', '0', '1'};

struct NamedTensor {
  std::string name;
  Matrix values;
  std::string dtype = "f64";  // "f64" or "f32"
};

struct Container {
  std::string kind;  // "model", "icv_bundle", "extracted_vector", "lora_head"
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
  }
};

/// Writes to a temporary sibling, then renames over `path`.
inline void write_container(const std::filesystem::path& path, const Container& c) {
  nlohmann::json manifest;
  manifest["kind"] = c.kind;
  manifest["meta"] = c.meta;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    if (t.dtype != "f64" && t.dtype != "f32") throw std::invalid_argument("checkpoint: unsupported dtype " + t.dtype);
    const std::uint64_t bytes = static_cast<std::uint64_t>(t.values.size()) * (t.dtype == "f64" ? 8 : 4);
    manifest["tensors"].push_back({{"name", t.name},
                                   {"shape", {t.values.rows(), t.values.cols()}},
                                   {"dtype", t.dtype},
                                   {"offset", offset},
                                   {"bytes", bytes}});
    offset += bytes;
  }
  const std::string text = manifest.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + tmp.string());
    out.write(kCheckpointMagic, 8);
    const std::uint64_t n = text.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : c.tensors) {
      if (t.dtype == "f64") {
        out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * 8));
      } else {
        const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f = t.values.cast<float>();
        out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
      }
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw std::runtime_error("checkpoint: bad magic in " + path.string());
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), 8);
  if (!in || n > (1ULL << 30)) throw std::runtime_error("checkpoint: bad manifest length in " + path.string());
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("checkpoint: truncated manifest in " + path.string());
  const auto manifest = nlohmann::json::parse(text);
  const std::streamoff base = in.tellg();

  Container c;
  c.kind = manifest.at("kind").get<std::string>();
  c.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("tensors")) {
    NamedTensor t;
    t.name = e.at("name").get<std::string>();
    t.dtype = e.at("dtype").get<std::string>();
    const auto rows = e.at("shape").at(0).get<Index>();
    const auto cols = e.at("shape").at(1).get<Index>();
    in.seekg(base + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    t.values.resize(rows, cols);
    if (t.dtype == "f64") {
      in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(rows * cols * 8));
    } else if (t.dtype == "f32") {
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f(rows, cols);
      in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(rows * cols * 4));
      t.values = f.cast<double>();
    } else {
      throw std::runtime_error("checkpoint: unsupported dtype " + t.dtype);
    }
    if (!in) throw std::runtime_error("checkpoint: truncated tensor '" + t.name + "' in " + path.string());
    c.tensors.push_back(std::move(t));
  }
  return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model},         {"n_heads", c.n_heads},
          {"d_mlp", c.d_mlp},       {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.validate();
  return c;
}

inline void save_model(const std::filesystem::path& path, const Parameters<double>& p, nlohmann::json meta = {}) {
  Container c;
  c.kind = "model";
  c.meta = meta.is_object() ? std::move(meta) : nlohmann::json::object();
  c.meta["config"] = to_json(p.config);
  p.for_each([&](const std::string& name, const Tensor<double>& t) { c.tensors.push_back({name, t.values, "f64"}); });
  write_container(path, c);
}

inline Parameters<double> load_model(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.kind != "model") throw std::runtime_error("checkpoint: " + path.string() + " holds '" + c.kind + "', not a model");
  auto p = init_model<double>(model_config_from_json(c.meta.at("config")), 0);
  p.for_each([&](const std::string& name, Tensor<double>& t) {
    const auto& src = c.get(name);
    if (src.values.rows() != t.rows() || src.values.cols() != t.cols()) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    }
    t.values = src.values;
  });
  return p;
}

inline Container bundle_container(const ICVBundle& b) {
  Container c;
  c.kind = "icv_bundle";
  c.meta["shared_mode"] = b.shared_mode;
  c.tensors.push_back({"vectors", b.vectors, "f64"});
  Matrix a(1, static_cast<Index>(b.alphas.size()));
  for (std::size_t i = 0; i < b.alphas.size(); ++i) a(0, static_cast<Index>(i)) = b.alphas[i];
  c.tensors.push_back({"alphas", a, "f64"});
  return c;
}

inline ICVBundle bundle_from_container(const Container& c) {
  if (c.kind != "icv_bundle") throw std::runtime_error("checkpoint: expected icv_bundle, found '" + c.kind + "'");
  ICVBundle b;
  b.shared_mode = c.meta.value("shared_mode", false);
  b.vectors = c.get("vectors").values;
  const Matrix& a = c.get("alphas").values;
  b.alphas.assign(a.data(), a.data() + a.size());
  return b;
}

inline void save_bundle(const std::filesystem::path& path, const ICVBundle& b, const nlohmann::json& meta = {}) {
  Container c = bundle_container(b);
  if (meta.is_object()) c.meta.update(meta);
  write_container(path, c);
}

inline ICVBundle load_bundle(const std::filesystem::path& path) { return bundle_from_container(read_container(path)); }

/// Stores any intervention; add_per_layer specs go through the bundle tensors.
inline void save_intervention(const std::filesystem::path& path, const InterventionSpec& s, const nlohmann::json& meta = {}) {
  Container c;
  if (s.kind == InterventionSpec::Kind::kAddPerLayer) {
    c = bundle_container(s.bundle);
  } else {
    c.kind = "extracted_vector";
    c.tensors.push_back({"vectors", s.vectors, "f64"});
  }
  if (meta.is_object()) c.meta.update(meta);
  c.meta["mode"] = to_string(s.kind);
  c.meta["layer"] = s.layer;
  c.meta["strength"] = s.strength;
  c.meta["renormalize"] = s.renormalize;
  write_container(path, c);
}

inline InterventionSpec load_intervention(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.kind == "icv_bundle") return InterventionSpec::add_per_layer(bundle_from_container(c));
  if (c.kind != "extracted_vector") throw std::runtime_error("checkpoint: " + path.string() + " holds no intervention");
  const std::string mode = c.meta.at("mode").get<std::string>();
  const Matrix& v = c.get("vectors").values;
  const int layer = c.meta.value("layer", 0);
  if (mode == "replace_last_token") return InterventionSpec::replace_last_token(layer, v);
  if (mode == "add_last_token") return InterventionSpec::add_last_token(layer, v);
  if (mode == "add_all_tokens") {
    return InterventionSpec::add_all_tokens(v, c.meta.value("strength", 0.0), c.meta.value("renormalize", true));
  }
  if (mode == "none") return {};
  throw std::runtime_error("checkpoint: unknown intervention mode '" + mode + "'");
}

}  // namespace icvlab
