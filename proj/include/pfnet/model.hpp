#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pfnet/dataset.hpp"
#include "pfnet/error.hpp"
#include "pfnet/graph.hpp"
#include "pfnet/rng.hpp"
#include "pfnet/tensor.hpp"

namespace pfnet {

struct ModelConfig {
  std::string arch = "pfnet";  // "pfnet" | "mlp" | "gcn"
  int n_layers = 4;
  int hidden = 128;
  int tag_order = 3;  // K
  double dropout_p = 0.2;
  bool message_passing = true;  // false: drop the per-edge message step (ablation)
  int fixed_nodes = 0;          // mlp only: the node count the net was built for
};

inline void validate(const ModelConfig& cfg) {
  if (cfg.arch != "pfnet" && cfg.arch != "mlp" && cfg.arch != "gcn")
    throw ValidationError("model: unknown architecture '" + cfg.arch + "'");
  if (cfg.n_layers < 1) throw ValidationError("model: n_layers must be at least 1");
  if (cfg.tag_order < 1) throw ValidationError("model: tag_order must be at least 1");
  if (cfg.hidden < 4) throw ValidationError("model: hidden width must be at least 4");
  if (cfg.dropout_p < 0.0 || cfg.dropout_p >= 1.0) throw ValidationError("model: dropout must be in [0, 1)");
  if (cfg.arch == "mlp" && cfg.fixed_nodes < 1)
    throw ValidationError("model: the mlp baseline needs fixed_nodes set");
}

inline ModelConfig model_preset(const std::string& name) {
  ModelConfig cfg;
  if (name == "small") {
    cfg.n_layers = 2;
    cfg.hidden = 64;
  } else if (name == "medium") {
    cfg.n_layers = 4;
    cfg.hidden = 128;
  } else if (name == "large") {
    cfg.n_layers = 5;
    cfg.hidden = 512;
  } else {
    throw ValidationError("model: unknown preset '" + name + "' (small, medium, large)");
  }
  return cfg;
}

// Named parameter store. Creation order is the initialization draw order and
// the optimizer slot order, so it is part of the determinism contract.
class ModelParams {
 public:
  ModelConfig cfg;

  Tensor add(const std::string& name, int rows, int cols, int fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(rows, cols, true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t k = 0; k < t.size(); ++k) t.data()[k] = rng.uniform(-bound, bound);
    names_.push_back(name);
    tensors_.push_back(t);
    return t;
  }

  const Tensor& at(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return tensors_[i];
    throw ValidationError("model: no parameter named '" + name + "'");
  }

  bool has(const std::string& name) const {
    for (const auto& n : names_)
      if (n == name) return true;
    return false;
  }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  std::size_t param_count() const {
    std::size_t total = 0;
    for (const Tensor& t : tensors_) total += t.size();
    return total;
  }

  void zero_grad() {
    for (Tensor& t : tensors_) t.zero_grad();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

namespace detail {

inline void add_mask_encoder(ModelParams& p, int hidden, Rng& rng) {
  p.add("mask.W0", 4, hidden, 4, rng);
  p.add("mask.b0", 1, hidden, 4, rng);
  p.add("mask.W1", hidden, 4, hidden, rng);
  p.add("mask.b1", 1, 4, hidden, rng);
}

inline void add_message_mlp(ModelParams& p, const std::string& prefix, int in_dim, int hidden, int out_dim,
                            Rng& rng) {
  const int cat = 2 * in_dim + 2;
  p.add(prefix + ".W0", cat, hidden, cat, rng);
  p.add(prefix + ".b0", 1, hidden, cat, rng);
  p.add(prefix + ".W1", hidden, out_dim, hidden, rng);
  p.add(prefix + ".b1", 1, out_dim, hidden, rng);
}

inline void add_tag(ModelParams& p, const std::string& prefix, int in_dim, int out_dim, int order, Rng& rng) {
  for (int k = 0; k < order; ++k) p.add(prefix + ".W" + std::to_string(k), in_dim, out_dim, in_dim, rng);
  p.add(prefix + ".b", 1, out_dim, in_dim, rng);
}

}  // namespace detail

inline ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  ModelParams p;
  p.cfg = cfg;
  Rng rng(derive_stream(seed, 0x6d6f64656cULL));  // independent init stream
  const int h = cfg.hidden;
  detail::add_mask_encoder(p, h, rng);

  if (cfg.arch == "pfnet") {
    for (int l = 0; l + 1 < cfg.n_layers; ++l) {
      const int in_dim = l == 0 ? 4 : h;
      const std::string conv = "conv" + std::to_string(l);
      if (cfg.message_passing) detail::add_message_mlp(p, conv + ".mp", in_dim, h, h, rng);
      detail::add_tag(p, conv + ".tag", cfg.message_passing ? h : in_dim, h, cfg.tag_order, rng);
    }
    const int head_in = cfg.n_layers == 1 ? 4 : h;
    if (cfg.message_passing) {
      detail::add_message_mlp(p, "head.mp", head_in, h, 4, rng);
    } else {
      detail::add_tag(p, "head.tag", head_in, 4, cfg.tag_order, rng);
    }
  } else if (cfg.arch == "mlp") {
    const int flat = 4 * cfg.fixed_nodes;
    p.add("mlp.W0", flat, h, flat, rng);
    p.add("mlp.b0", 1, h, flat, rng);
    p.add("mlp.W1", h, h, h, rng);
    p.add("mlp.b1", 1, h, h, rng);
    p.add("mlp.W2", h, flat, h, rng);
    p.add("mlp.b2", 1, flat, h, rng);
  } else {  // gcn
    const int dims[4] = {4, h, h, 4};
    for (int l = 0; l < 3; ++l) {
      const std::string name = "gcn" + std::to_string(l);
      p.add(name + ".W", dims[l], dims[l + 1], dims[l], rng);
      p.add(name + ".b", 1, dims[l + 1], dims[l], rng);
    }
  }
  return p;
}

// S = D^{-1/2} A D^{-1/2} for the 0/1 undirected adjacency, no self-loops.
inline SparseMatrix build_shift(const PFGraph& g) {
  if (g.n < 1) throw ValidationError("shift operator: empty graph");
  std::vector<std::vector<int>> adj(g.n);
  for (const auto& [i, j] : g.edges) {
    if (i == j) throw ValidationError("shift operator: self-loop at node " + std::to_string(i));
    adj[i].push_back(j);
    adj[j].push_back(i);
  }
  std::vector<double> inv_sqrt_deg(g.n);
  for (int i = 0; i < g.n; ++i) {
    if (adj[i].empty()) throw ValidationError("shift operator: isolated node " + std::to_string(i));
    std::sort(adj[i].begin(), adj[i].end());
    inv_sqrt_deg[i] = 1.0 / std::sqrt(static_cast<double>(adj[i].size()));
  }
  SparseMatrix s;
  s.rows = g.n;
  s.cols = g.n;
  s.row_ptr.reserve(g.n + 1);
  s.row_ptr.push_back(0);
  for (int i = 0; i < g.n; ++i) {
    for (int j : adj[i]) {
      s.col_idx.push_back(j);
      s.vals.push_back(inv_sqrt_deg[i] * inv_sqrt_deg[j]);
    }
    s.row_ptr.push_back(static_cast<int>(s.col_idx.size()));
  }
  return s;
}

// Each undirected line contributes a message in both directions with the same
// edge features: row d receives at dst[d] from src[d].
struct DirectedEdges {
  std::vector<int> dst, src;
  Tensor attr;  // 2E x 2
};

inline DirectedEdges directed_edges(const PFGraph& g) {
  DirectedEdges de;
  const std::size_t e = g.edges.size();
  de.dst.reserve(2 * e);
  de.src.reserve(2 * e);
  de.attr = Tensor::zeros(static_cast<int>(2 * e), 2);
  for (std::size_t k = 0; k < e; ++k) {
    const auto& [a, b] = g.edges[k];
    de.dst.push_back(a);
    de.src.push_back(b);
    de.dst.push_back(b);
    de.src.push_back(a);
    for (int c = 0; c < 2; ++c) {
      de.attr.data()[(2 * k) * 2 + c] = g.edge_attr[k * 2 + c];
      de.attr.data()[(2 * k + 1) * 2 + c] = g.edge_attr[k * 2 + c];
    }
  }
  return de;
}

namespace detail {

inline Tensor two_layer_mlp(Tape& tape, const Tensor& x, const Tensor& w0, const Tensor& b0, const Tensor& w1,
                            const Tensor& b1) {
  Tensor hidden = relu(tape, add(tape, matmul(tape, x, w0), b0));
  return add(tape, matmul(tape, hidden, w1), b1);
}

inline Tensor tag_conv(Tape& tape, const SparseMatrix& s, const Tensor& x, const ModelParams& p,
                       const std::string& prefix, int order, bool activate) {
  Tensor z = x;
  Tensor acc = matmul(tape, z, p.at(prefix + ".W0"));
  for (int k = 1; k < order; ++k) {
    z = spmm(tape, s, z);
    acc = add(tape, acc, matmul(tape, z, p.at(prefix + ".W" + std::to_string(k))));
  }
  acc = add(tape, acc, p.at(prefix + ".b"));
  return activate ? relu(tape, acc) : acc;
}

inline Tensor message_step(Tape& tape, const Tensor& x, const DirectedEdges& de, const ModelParams& p,
                           const std::string& prefix, int n_nodes) {
  Tensor xi = index_select(tape, x, de.dst);
  Tensor xj = index_select(tape, x, de.src);
  Tensor cat = concat_cols(tape, {xi, xj, de.attr});
  Tensor msg = two_layer_mlp(tape, cat, p.at(prefix + ".W0"), p.at(prefix + ".b0"), p.at(prefix + ".W1"),
                             p.at(prefix + ".b1"));
  return scatter_add(tape, msg, de.dst, n_nodes);
}

}  // namespace detail

inline Tensor mask_encode(Tape& tape, const ModelParams& p, const Tensor& mask) {
  return detail::two_layer_mlp(tape, mask, p.at("mask.W0"), p.at("mask.b0"), p.at("mask.W1"), p.at("mask.b1"));
}

// The full stack: mask-encoded shift, L-1 PowerFlowConv layers (one-hop
// edge-aware message passing, residual, K-order graph convolution, dropout),
// and a message-passing-only head mapping hidden -> 4. The first layer's
// message MLP performs the 4 -> hidden lift, so no residual is added there.
inline Tensor forward_pfnet(Tape& tape, const ModelParams& p, const PFGraph& g, const SparseMatrix& s,
                            bool train, Rng& rng) {
  const ModelConfig& cfg = p.cfg;
  Tensor x = Tensor::from(g.n, 4, g.x);
  Tensor mask = Tensor::from(g.n, 4, g.mask);
  Tensor state = add(tape, x, mask_encode(tape, p, mask));

  DirectedEdges de;
  if (cfg.message_passing) de = directed_edges(g);

  for (int l = 0; l + 1 < cfg.n_layers; ++l) {
    const std::string conv = "conv" + std::to_string(l);
    Tensor mixed = state;
    if (cfg.message_passing) {
      Tensor agg = detail::message_step(tape, state, de, p, conv + ".mp", g.n);
      mixed = state.cols() == agg.cols() ? add(tape, state, agg) : agg;
    }
    state = detail::tag_conv(tape, s, mixed, p, conv + ".tag", cfg.tag_order, true);
    if (train && cfg.dropout_p > 0.0) state = dropout(tape, state, cfg.dropout_p, true, rng);
  }

  if (cfg.message_passing) return detail::message_step(tape, state, de, p, "head.mp", g.n);
  return detail::tag_conv(tape, s, state, p, "head.tag", cfg.tag_order, false);
}

inline Tensor forward_mlp(Tape& tape, const ModelParams& p, const PFGraph& g) {
  if (g.n != p.cfg.fixed_nodes)
    throw ShapeError("mlp baseline built for " + std::to_string(p.cfg.fixed_nodes) + " nodes, got " +
                     std::to_string(g.n));
  Tensor x = Tensor::from(g.n, 4, g.x);
  Tensor mask = Tensor::from(g.n, 4, g.mask);
  Tensor state = add(tape, x, mask_encode(tape, p, mask));
  Tensor flat = reshape(tape, state, 1, 4 * g.n);
  Tensor h0 = relu(tape, add(tape, matmul(tape, flat, p.at("mlp.W0")), p.at("mlp.b0")));
  Tensor h1 = relu(tape, add(tape, matmul(tape, h0, p.at("mlp.W1")), p.at("mlp.b1")));
  Tensor out = add(tape, matmul(tape, h1, p.at("mlp.W2")), p.at("mlp.b2"));
  return reshape(tape, out, g.n, 4);
}

// One graph-convolution layer of the baseline: sigma((sum_k S^k X) W + b) —
// a single weight matrix over the summed hop terms, unlike the tag form.
inline Tensor gcn_layer(Tape& tape, const SparseMatrix& s, const Tensor& x, const Tensor& w, const Tensor& b,
                        int order, bool activate) {
  Tensor z = x;
  Tensor total = x;
  for (int k = 1; k < order; ++k) {
    z = spmm(tape, s, z);
    total = add(tape, total, z);
  }
  Tensor out = add(tape, matmul(tape, total, w), b);
  return activate ? relu(tape, out) : out;
}

inline Tensor forward_gcn(Tape& tape, const ModelParams& p, const PFGraph& g, const SparseMatrix& s) {
  Tensor x = Tensor::from(g.n, 4, g.x);
  Tensor mask = Tensor::from(g.n, 4, g.mask);
  Tensor state = add(tape, x, mask_encode(tape, p, mask));
  const int order = 2;
  for (int l = 0; l < 3; ++l) {
    const std::string name = "gcn" + std::to_string(l);
    state = gcn_layer(tape, s, state, p.at(name + ".W"), p.at(name + ".b"), order, l < 2);
  }
  return state;
}

inline Tensor forward_model(Tape& tape, const ModelParams& p, const PFGraph& g, const SparseMatrix& s,
                            bool train, Rng& rng) {
  if (p.cfg.arch == "pfnet") return forward_pfnet(tape, p, g, s, train, rng);
  if (p.cfg.arch == "mlp") return forward_mlp(tape, p, g);
  return forward_gcn(tape, p, g, s);
}

// ---- losses -----------------------------------------------------------

// Mean over nodes of the squared error norm: sum of squared entries / N.
inline Tensor loss_mse(Tape& tape, const Tensor& pred, const Tensor& target) {
  Tensor d = sub(tape, pred, target);
  return scale(tape, sum(tape, square(tape, d)), 1.0 / static_cast<double>(pred.rows()));
}

// Squared error over unknown slots only, averaged over the count of unknown
// entries. An all-known mask selects nothing and scores zero.
inline Tensor loss_masked_l2(Tape& tape, const Tensor& pred, const Tensor& target, const Tensor& mask) {
  double count = 0.0;
  for (std::size_t k = 0; k < mask.size(); ++k) count += mask.data()[k] != 0.0 ? 1.0 : 0.0;
  if (count == 0.0) return Tensor::scalar(0.0);
  Tensor d = mul(tape, mask, sub(tape, pred, target));
  return scale(tape, sum(tape, square(tape, d)), 1.0 / count);
}

// Undoes channel normalization on the tape so physical quantities reach the
// physics residual while gradients still flow to the raw predictions.
inline Tensor denormalize_on_tape(Tape& tape, const Tensor& pred, const NormStats& norm) {
  std::vector<Tensor> channels;
  channels.reserve(4);
  for (int c = 0; c < 4; ++c) {
    Tensor ch = scale(tape, slice_cols(tape, pred, c, c + 1), norm.stdev[c]);
    Tensor mean_col = Tensor::zeros(pred.rows(), 1);
    for (std::size_t k = 0; k < mean_col.size(); ++k) mean_col.data()[k] = norm.mean[c];
    channels.push_back(add(tape, ch, mean_col));
  }
  return concat_cols(tape, channels);
}

// Kirchhoff residual of a predicted state, averaged over nodes:
// (1/N) * sum_i (dP_i^2 + dQ_i^2). The predicted P, Q are net drawn powers;
// branch flows are recomputed from predicted voltages through the series
// admittance of each line, so the loss is zero exactly on solver labels.
// `pred` and `edge_attr` must be in plain per-unit (denormalized) terms.
inline Tensor loss_physical(Tape& tape, const Tensor& pred, const PFGraph& g,
                            const std::vector<double>& edge_attr) {
  const int n = g.n;
  const std::size_t e = g.edges.size();
  if (pred.rows() != n || pred.cols() != 4) throw ShapeError("physical loss: prediction must be n x 4");
  if (edge_attr.size() != e * 2) throw ShapeError("physical loss: edge attribute size mismatch");

  Tensor vm = slice_cols(tape, pred, 0, 1);
  Tensor th = slice_cols(tape, pred, 1, 2);
  Tensor pw = slice_cols(tape, pred, 2, 3);
  Tensor qw = slice_cols(tape, pred, 3, 4);

  std::vector<int> at, other;
  at.reserve(2 * e);
  other.reserve(2 * e);
  Tensor gcond = Tensor::zeros(static_cast<int>(2 * e), 1);
  Tensor bsusc = Tensor::zeros(static_cast<int>(2 * e), 1);
  for (std::size_t k = 0; k < e; ++k) {
    const double r = edge_attr[k * 2 + 0];
    const double x = edge_attr[k * 2 + 1];
    const double mag2 = r * r + x * x;
    const double gk = r / mag2;
    const double bk = -x / mag2;
    const auto& [a, b] = g.edges[k];
    at.push_back(a);
    other.push_back(b);
    at.push_back(b);
    other.push_back(a);
    gcond.data()[2 * k] = gk;
    gcond.data()[2 * k + 1] = gk;
    bsusc.data()[2 * k] = bk;
    bsusc.data()[2 * k + 1] = bk;
  }

  Tensor vm_i = index_select(tape, vm, at);
  Tensor vm_j = index_select(tape, vm, other);
  Tensor dth = sub(tape, index_select(tape, th, at), index_select(tape, th, other));
  Tensor cos_ij = pfnet::cos(tape, dth);
  Tensor sin_ij = pfnet::sin(tape, dth);
  Tensor vv = mul(tape, vm_i, vm_j);
  Tensor vi2 = square(tape, vm_i);

  // drawn flow into the line at its "at" end:
  //   P = g (VmVm cos - Vm_i^2) + b (VmVm sin)
  //   Q = b (Vm_i^2 - VmVm cos) + g (VmVm sin)
  Tensor vv_cos = mul(tape, vv, cos_ij);
  Tensor vv_sin = mul(tape, vv, sin_ij);
  Tensor p_line = add(tape, mul(tape, gcond, sub(tape, vv_cos, vi2)), mul(tape, bsusc, vv_sin));
  Tensor q_line = add(tape, mul(tape, bsusc, sub(tape, vi2, vv_cos)), mul(tape, gcond, vv_sin));

  Tensor p_calc = scatter_add(tape, p_line, at, n);
  Tensor q_calc = scatter_add(tape, q_line, at, n);
  Tensor dp = sub(tape, pw, p_calc);
  Tensor dq = sub(tape, qw, q_calc);
  Tensor total = add(tape, sum(tape, square(tape, dp)), sum(tape, square(tape, dq)));
  return scale(tape, total, 1.0 / static_cast<double>(n));
}

// w * MSE + tau * (1 - w) * physical, both terms already on the tape.
inline Tensor loss_mixed(Tape& tape, const Tensor& mse_term, const Tensor& physical_term, double w,
                         double tau) {
  return add(tape, scale(tape, mse_term, w), scale(tape, physical_term, tau * (1.0 - w)));
}

}  // namespace pfnet
