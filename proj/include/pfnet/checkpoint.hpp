#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "pfnet/dataset.hpp"
#include "pfnet/error.hpp"
#include "pfnet/model.hpp"
#include "pfnet/optim.hpp"

namespace pfnet {

// A trained model on disk: configuration, named parameter tensors, the
// normalization statistics keyed by dataset-topology fingerprint, and
// (optionally) the optimizer moments for exact training resumption.
struct Checkpoint {
  ModelParams params;
  std::vector<std::pair<std::uint64_t, NormStats>> norms;
  bool has_optim = false;
  AdamW optim;

  const NormStats& norm_for(std::uint64_t fingerprint) const {
    for (const auto& [fp, stats] : norms)
      if (fp == fingerprint) return stats;
    throw ValidationError("checkpoint: no normalization stats for this graph topology — "
                          "the model was trained on a different grid");
  }
};

namespace detail {

constexpr char kCheckpointMagic[4] = {'P', 'F', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  put_bytes(os, s.data(), s.size());
}

inline std::string get_str(std::istream& is) {
  const std::uint32_t len = get_u32(is);
  if (len > (1u << 20)) throw IoError("checkpoint: unreasonable string length");
  std::string s(len, '\0');
  get_bytes(is, s.data(), len);
  return s;
}

inline void put_norm(std::ostream& os, const NormStats& n) {
  for (double v : n.mean) put_f64(os, v);
  for (double v : n.stdev) put_f64(os, v);
  for (double v : n.edge_mean) put_f64(os, v);
  for (double v : n.edge_stdev) put_f64(os, v);
}

inline NormStats get_norm(std::istream& is) {
  NormStats n;
  for (double& v : n.mean) v = get_f64(is);
  for (double& v : n.stdev) v = get_f64(is);
  for (double& v : n.edge_mean) v = get_f64(is);
  for (double& v : n.edge_stdev) v = get_f64(is);
  return n;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  using namespace detail;
  put_bytes(os, kCheckpointMagic, 4);
  put_u32(os, kCheckpointVersion);

  const ModelConfig& cfg = ck.params.cfg;
  put_str(os, cfg.arch);
  put_i32(os, cfg.n_layers);
  put_i32(os, cfg.hidden);
  put_i32(os, cfg.tag_order);
  put_f64(os, cfg.dropout_p);
  os.put(cfg.message_passing ? '\1' : '\0');
  put_i32(os, cfg.fixed_nodes);

  put_u32(os, static_cast<std::uint32_t>(ck.norms.size()));
  for (const auto& [fp, stats] : ck.norms) {
    put_u64(os, fp);
    put_norm(os, stats);
  }

  const auto& names = ck.params.names();
  const auto& tensors = ck.params.tensors();
  put_u32(os, static_cast<std::uint32_t>(names.size()));
  for (std::size_t i = 0; i < names.size(); ++i) {
    put_str(os, names[i]);
    put_i32(os, tensors[i].rows());
    put_i32(os, tensors[i].cols());
    for (std::size_t k = 0; k < tensors[i].size(); ++k) put_f64(os, tensors[i].data()[k]);
  }

  os.put(ck.has_optim ? '\1' : '\0');
  if (ck.has_optim) {
    if (ck.optim.m.size() != tensors.size())
      throw ValidationError("checkpoint: optimizer state does not match parameter list");
    put_u64(os, static_cast<std::uint64_t>(ck.optim.step));
    put_f64(os, ck.optim.lr);
    put_f64(os, ck.optim.weight_decay);
    for (const auto& buf : ck.optim.m)
      for (double v : buf) put_f64(os, v);
    for (const auto& buf : ck.optim.v)
      for (double v : buf) put_f64(os, v);
  }
  if (!os) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  using namespace detail;
  char magic[4];
  get_bytes(is, magic, 4);
  if (std::string(magic, 4) != std::string(kCheckpointMagic, 4))
    throw IoError("not a checkpoint file: " + path);
  const std::uint32_t version = get_u32(is);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);

  Checkpoint ck;
  ModelConfig cfg;
  cfg.arch = get_str(is);
  cfg.n_layers = get_i32(is);
  cfg.hidden = get_i32(is);
  cfg.tag_order = get_i32(is);
  cfg.dropout_p = get_f64(is);
  char flag;
  get_bytes(is, &flag, 1);
  cfg.message_passing = flag != '\0';
  cfg.fixed_nodes = get_i32(is);

  const std::uint32_t n_norms = get_u32(is);
  for (std::uint32_t i = 0; i < n_norms; ++i) {
    const std::uint64_t fp = get_u64(is);
    ck.norms.emplace_back(fp, get_norm(is));
  }

  // Rebuild the parameter store with the saved layout, then overwrite values.
  ck.params = init_model(cfg, 0);
  const std::uint32_t n_params = get_u32(is);
  if (n_params != ck.params.names().size())
    throw IoError("checkpoint: parameter list does not match the configuration");
  for (std::uint32_t i = 0; i < n_params; ++i) {
    const std::string name = get_str(is);
    const int rows = get_i32(is);
    const int cols = get_i32(is);
    if (name != ck.params.names()[i]) throw IoError("checkpoint: unexpected parameter '" + name + "'");
    Tensor t = ck.params.tensors()[i];
    if (rows != t.rows() || cols != t.cols())
      throw IoError("checkpoint: shape mismatch for parameter '" + name + "'");
    for (std::size_t k = 0; k < t.size(); ++k) t.data()[k] = get_f64(is);
  }

  get_bytes(is, &flag, 1);
  ck.has_optim = flag != '\0';
  if (ck.has_optim) {
    ck.optim.init(ck.params.tensors());
    ck.optim.step = static_cast<std::int64_t>(get_u64(is));
    ck.optim.lr = get_f64(is);
    ck.optim.weight_decay = get_f64(is);
    for (auto& buf : ck.optim.m)
      for (double& v : buf) v = get_f64(is);
    for (auto& buf : ck.optim.v)
      for (double& v : buf) v = get_f64(is);
  }
  return ck;
}

}  // namespace pfnet
