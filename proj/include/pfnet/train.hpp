#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "pfnet/checkpoint.hpp"
#include "pfnet/dataset.hpp"
#include "pfnet/error.hpp"
#include "pfnet/graph.hpp"
#include "pfnet/model.hpp"
#include "pfnet/optim.hpp"
#include "pfnet/rng.hpp"
#include "pfnet/solver.hpp"
#include "pfnet/tensor.hpp"

namespace pfnet {

enum class LossKind { mse, physical, mixed };

inline LossKind parse_loss(const std::string& name) {
  if (name == "mse") return LossKind::mse;
  if (name == "physical") return LossKind::physical;
  if (name == "mixed") return LossKind::mixed;
  throw ValidationError("unknown loss '" + name + "' (mse, physical, mixed)");
}

inline const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::mse: return "mse";
    case LossKind::physical: return "physical";
    default: return "mixed";
  }
}

struct TrainConfig {
  int epochs = 300;
  int batch_size = 128;
  double lr = 1e-3;
  double weight_decay = 0.01;
  LossKind loss = LossKind::mse;
  double w = 0.5;
  double tau = 0.02;
  std::uint64_t seed = 0;
  int early_stop_patience = 100;
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ValidationError("training: epochs must be at least 1");
  if (cfg.batch_size < 1) throw ValidationError("training: batch size must be at least 1");
  if (cfg.w < 0.0 || cfg.w > 1.0) throw ValidationError("training: loss weight w must lie in [0, 1]");
  if (cfg.early_stop_patience < 1) throw ValidationError("training: patience must be at least 1");
}

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_masked_l2 = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;  // best-validation parameters
  std::vector<EpochMetrics> history;
  double best_val = 0.0;
  int best_epoch = 0;
};

namespace detail {

struct SampleRef {
  int dataset = 0;
  std::size_t index = 0;
};

// Per-row normalization constants for a (possibly mixed-topology) batch, so
// denormalization on the tape works when samples come from different grids.
struct BatchStats {
  Tensor mean_rows, std_rows;
};

inline BatchStats batch_row_stats(const std::vector<const NormStats*>& stats, const std::vector<int>& sizes) {
  int total = 0;
  for (int n : sizes) total += n;
  BatchStats bs;
  bs.mean_rows = Tensor::zeros(total, 4);
  bs.std_rows = Tensor::zeros(total, 4);
  int row = 0;
  for (std::size_t s = 0; s < stats.size(); ++s) {
    for (int i = 0; i < sizes[s]; ++i, ++row)
      for (int c = 0; c < 4; ++c) {
        bs.mean_rows.data()[static_cast<std::size_t>(row) * 4 + c] = stats[s]->mean[c];
        bs.std_rows.data()[static_cast<std::size_t>(row) * 4 + c] = stats[s]->stdev[c];
      }
  }
  return bs;
}

// Masked L2 of one sample from plain prediction values (metric, not a tape op).
inline double masked_l2_value(const std::vector<double>& pred, const PFGraph& g) {
  double total = 0.0;
  double count = 0.0;
  for (std::size_t k = 0; k < g.mask.size(); ++k)
    if (g.mask[k] != 0.0) {
      const double d = pred[k] - g.y[k];
      total += d * d;
      count += 1.0;
    }
  return count > 0.0 ? total / count : 0.0;
}

inline std::string param_norm_snapshot(const ModelParams& p) {
  std::string out;
  for (std::size_t i = 0; i < p.names().size(); ++i) {
    double ss = 0.0;
    const Tensor& t = p.tensors()[i];
    for (std::size_t k = 0; k < t.size(); ++k) ss += t.data()[k] * t.data()[k];
    if (!out.empty()) out += ", ";
    out += p.names()[i] + "=" + std::to_string(std::sqrt(ss));
  }
  return out;
}

}  // namespace detail

// Trains on one or more datasets (mixed-topology training normalizes each
// sample with its own dataset's statistics). Returns the best-validation
// checkpoint along with the full metric history.
inline TrainResult train(const std::vector<const Dataset*>& datasets, const ModelConfig& model_cfg,
                         const TrainConfig& cfg) {
  validate(cfg);
  validate(model_cfg);
  if (datasets.empty()) throw ValidationError("training: no datasets given");
  for (const Dataset* d : datasets) {
    if (d->graphs.empty() || d->train.count == 0 || d->val.count == 0)
      throw ValidationError("training: dataset needs non-empty train and val splits");
    for (const PFGraph& g : d->graphs)
      if (!g.labeled()) throw ValidationError("training: dataset sample lacks labels");
  }
  if (model_cfg.arch == "mlp" && datasets.size() > 1)
    throw ValidationError("training: the mlp baseline has a fixed input width and cannot mix grids");

  // Pre-normalize every sample with its dataset's stats; keep originals for
  // the physics term (plain per-unit quantities).
  std::vector<std::vector<PFGraph>> normed(datasets.size());
  std::vector<std::uint64_t> fingerprints(datasets.size());
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    normed[d].reserve(datasets[d]->graphs.size());
    for (const PFGraph& g : datasets[d]->graphs) normed[d].push_back(normalize(g, datasets[d]->norm));
    fingerprints[d] = topology_fingerprint(datasets[d]->graphs.front());
  }

  std::vector<detail::SampleRef> train_refs;
  for (std::size_t d = 0; d < datasets.size(); ++d)
    for (std::size_t i = datasets[d]->train.start; i < datasets[d]->train.start + datasets[d]->train.count; ++i)
      train_refs.push_back({static_cast<int>(d), i});

  ModelParams params = init_model(model_cfg, cfg.seed);
  AdamW optim;
  optim.lr = cfg.lr;
  optim.weight_decay = cfg.weight_decay;
  optim.init(params.tensors());

  TrainResult result;
  result.best_val = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_values, best_m, best_v;
  std::int64_t best_step = 0;

  const bool needs_physics = cfg.loss != LossKind::mse;
  const bool per_sample = model_cfg.arch == "mlp";  // fixed input width: no disjoint unions

  auto batch_loss = [&](Tape& tape, const std::vector<detail::SampleRef>& members, bool train_mode,
                        Rng& drop_rng) {
    std::vector<PFGraph> norm_members, orig_members;
    std::vector<const NormStats*> stats;
    std::vector<int> sizes;
    for (const auto& ref : members) {
      norm_members.push_back(normed[ref.dataset][ref.index]);
      orig_members.push_back(datasets[ref.dataset]->graphs[ref.index]);
      stats.push_back(&datasets[ref.dataset]->norm);
      sizes.push_back(norm_members.back().n);
    }
    Tensor loss;
    if (per_sample) {
      for (std::size_t i = 0; i < norm_members.size(); ++i) {
        const PFGraph& g = norm_members[i];
        Tensor pred = forward_mlp(tape, params, g);
        Tensor y = Tensor::from(g.n, 4, g.y);
        Tensor term;
        if (cfg.loss == LossKind::mse) {
          term = loss_mse(tape, pred, y);
        } else {
          Tensor denorm = denormalize_on_tape(tape, pred, *stats[i]);
          Tensor phys = loss_physical(tape, denorm, orig_members[i], orig_members[i].edge_attr);
          term = cfg.loss == LossKind::physical
                     ? phys
                     : loss_mixed(tape, loss_mse(tape, pred, y), phys, cfg.w, cfg.tau);
        }
        loss = loss.defined() ? add(tape, loss, term) : term;
      }
      return scale(tape, loss, 1.0 / static_cast<double>(norm_members.size()));
    }
    PFGraph batch = disjoint_union(norm_members);
    SparseMatrix s = build_shift(batch);
    Tensor pred = forward_model(tape, params, batch, s, train_mode, drop_rng);
    Tensor y = Tensor::from(batch.n, 4, batch.y);
    if (cfg.loss == LossKind::mse) return loss_mse(tape, pred, y);

    PFGraph orig_batch = disjoint_union(orig_members);
    detail::BatchStats bs = detail::batch_row_stats(stats, sizes);
    Tensor denorm = add(tape, mul(tape, pred, bs.std_rows), bs.mean_rows);
    Tensor phys = loss_physical(tape, denorm, orig_batch, orig_batch.edge_attr);
    if (cfg.loss == LossKind::physical) return phys;
    return loss_mixed(tape, loss_mse(tape, pred, y), phys, cfg.w, cfg.tau);
  };

  auto validation_score = [&]() {
    double total = 0.0;
    std::size_t n_val = 0;
    Rng no_drop(0);
    for (std::size_t d = 0; d < datasets.size(); ++d) {
      const SplitRange& val = datasets[d]->val;
      for (std::size_t i = val.start; i < val.start + val.count; ++i) {
        const PFGraph& g = normed[d][i];
        Tape tape;
        Tensor pred = per_sample ? forward_mlp(tape, params, g)
                                 : forward_model(tape, params, g, build_shift(g), false, no_drop);
        total += detail::masked_l2_value(pred.values(), g);
        ++n_val;
      }
    }
    return total / static_cast<double>(n_val);
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Fisher-Yates with our own generator keeps the order platform-stable.
    Rng shuffle_rng(derive_stream(cfg.seed, static_cast<std::uint64_t>(epoch), 0x73687566ULL));
    for (std::size_t i = train_refs.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(shuffle_rng.next_u64() % i);
      std::swap(train_refs[i - 1], train_refs[j]);
    }

    double epoch_loss = 0.0;
    int n_batches = 0;
    for (std::size_t start = 0; start < train_refs.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(train_refs.size(), start + cfg.batch_size);
      std::vector<detail::SampleRef> members(train_refs.begin() + start, train_refs.begin() + end);
      Rng drop_rng(derive_stream(derive_stream(cfg.seed, 0x64726f70ULL),
                                 static_cast<std::uint64_t>(epoch) * 0x100000ULL + n_batches));
      Tape tape;
      params.zero_grad();
      Tensor loss = batch_loss(tape, members, true, drop_rng);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw TrainingError("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(n_batches) +
                            "; parameter norms: " + detail::param_norm_snapshot(params));
      tape.backward(loss);
      optim.apply(params.tensors());
      epoch_loss += value;
      ++n_batches;
    }
    epoch_loss /= static_cast<double>(n_batches);

    const double val_score = validation_score();
    result.history.push_back({epoch, epoch_loss, val_score});

    if (val_score < result.best_val) {
      result.best_val = val_score;
      result.best_epoch = epoch;
      best_values.clear();
      for (const Tensor& t : params.tensors()) best_values.push_back(t.values());
      best_m = optim.m;
      best_v = optim.v;
      best_step = optim.step;
    }
    if (epoch - result.best_epoch >= cfg.early_stop_patience) break;
  }

  // Materialize the best snapshot into the returned checkpoint.
  Checkpoint ck;
  ck.params = std::move(params);
  for (std::size_t i = 0; i < best_values.size(); ++i) ck.params.tensors()[i].values() = best_values[i];
  for (std::size_t d = 0; d < datasets.size(); ++d)
    ck.norms.emplace_back(fingerprints[d], datasets[d]->norm);
  ck.has_optim = true;
  ck.optim = optim;
  ck.optim.m = std::move(best_m);
  ck.optim.v = std::move(best_v);
  ck.optim.step = best_step;
  result.checkpoint = std::move(ck);
  return result;
}

inline TrainResult train(const Dataset& dataset, const ModelConfig& model_cfg, const TrainConfig& cfg) {
  std::vector<const Dataset*> one = {&dataset};
  return train(one, model_cfg, cfg);
}

// ---- evaluation ---------------------------------------------------------

struct EvalReport {
  double masked_l2 = 0.0;  // normalized space, unknown slots only
  double mse = 0.0;        // normalized space, all slots
  double physical = 0.0;   // per-unit space
  std::array<double, 4> denorm_err_mean{};  // |error| on unknown slots: p.u., degrees, MW, Mvar
  std::array<double, 4> denorm_err_std{};
  double wall_ms_per_sample = 0.0;
  std::size_t n_samples = 0;
};

inline SplitRange dataset_split(const Dataset& ds, const std::string& name) {
  if (name == "train") return ds.train;
  if (name == "val") return ds.val;
  if (name == "test") return ds.test;
  throw ValidationError("unknown split '" + name + "' (train, val, test)");
}

namespace detail {

// Channel scale from per-unit to reporting units: Vm stays p.u., angles in
// degrees, powers in MW/Mvar on the standard 100 MVA base.
inline double report_unit_scale(int channel) {
  if (channel == 1) return 180.0 / 3.14159265358979323846;
  if (channel >= 2) return 100.0;
  return 1.0;
}

// Shared metric accumulation over one split given a per-sample normalized
// prediction source. The predictor receives the normalized graph and its
// index and returns normalized N x 4 values.
template <typename Predict>
EvalReport eval_with(const Dataset& ds, const SplitRange& split, const NormStats& norm, Predict&& predict) {
  EvalReport rep;
  std::array<double, 4> err_sum{}, err_sq{};
  std::array<std::size_t, 4> err_n{};
  double wall_ms = 0.0;

  for (std::size_t i = split.start; i < split.start + split.count; ++i) {
    const PFGraph& orig = ds.graphs[i];
    PFGraph g = normalize(orig, norm);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> pred = predict(g, i);
    const auto t1 = std::chrono::steady_clock::now();
    wall_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();

    rep.masked_l2 += masked_l2_value(pred, g);
    double se = 0.0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
      const double d = pred[k] - g.y[k];
      se += d * d;
    }
    rep.mse += se / static_cast<double>(g.n);

    std::vector<double> denorm = denormalize_prediction(pred, norm);
    Tape tape;
    Tensor dn = Tensor::from(g.n, 4, denorm);
    rep.physical += loss_physical(tape, dn, orig, orig.edge_attr).item();

    for (int node = 0; node < g.n; ++node)
      for (int c = 0; c < 4; ++c) {
        const std::size_t k = static_cast<std::size_t>(node) * 4 + c;
        if (orig.mask[k] == 0.0) continue;
        const double err = std::abs(denorm[k] - orig.y[k]) * report_unit_scale(c);
        err_sum[c] += err;
        err_sq[c] += err * err;
        ++err_n[c];
      }
    ++rep.n_samples;
  }
  if (rep.n_samples == 0) throw ValidationError("evaluation: empty split");
  const double ns = static_cast<double>(rep.n_samples);
  rep.masked_l2 /= ns;
  rep.mse /= ns;
  rep.physical /= ns;
  rep.wall_ms_per_sample = wall_ms / ns;
  for (int c = 0; c < 4; ++c) {
    if (err_n[c] == 0) continue;
    const double mean = err_sum[c] / static_cast<double>(err_n[c]);
    rep.denorm_err_mean[c] = mean;
    rep.denorm_err_std[c] = std::sqrt(std::max(0.0, err_sq[c] / static_cast<double>(err_n[c]) - mean * mean));
  }
  return rep;
}

}  // namespace detail

// Scores a trained model on one split. Normalization comes from the
// checkpoint (keyed by the dataset's topology fingerprint), so a mismatched
// grid is rejected before any forward pass.
inline EvalReport evaluate(const Checkpoint& ck, const Dataset& ds, const SplitRange& split) {
  const std::uint64_t fp = topology_fingerprint(ds.graphs.front());
  const NormStats& norm = ck.norm_for(fp);
  Rng no_drop(0);
  return detail::eval_with(ds, split, norm, [&](const PFGraph& g, std::size_t) {
    Tape tape;
    Tensor pred = ck.params.cfg.arch == "mlp"
                      ? forward_mlp(tape, ck.params, g)
                      : forward_model(tape, ck.params, g, build_shift(g), false, no_drop);
    return pred.values();
  });
}

// Scores the DC power flow approximation as if it were a model, in the same
// normalized metric space (predictions are normalized with the dataset stats).
inline EvalReport evaluate_dc(const Dataset& ds, const SplitRange& split) {
  const NormStats& norm = ds.norm;
  return detail::eval_with(ds, split, norm, [&](const PFGraph&, std::size_t i) {
    std::vector<double> plain = dc_predict(ds.graphs[i]);
    std::vector<double> normalized(plain.size());
    for (std::size_t k = 0; k < plain.size(); ++k) {
      const int c = static_cast<int>(k % 4);
      normalized[k] = (plain[k] - norm.mean[c]) / norm.stdev[c];
    }
    return normalized;
  });
}

// Scores ground-truth labels as predictions — the oracle self-test.
inline EvalReport evaluate_labels(const Dataset& ds, const SplitRange& split) {
  return detail::eval_with(ds, split, ds.norm,
                           [&](const PFGraph& g, std::size_t) { return g.y; });
}

inline void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& history) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "# schema pfnet.metrics.v1\n";
  os << "epoch,train_loss,val_masked_l2\n";
  char buf[160];
  for (const EpochMetrics& m : history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", m.epoch, m.train_loss, m.val_masked_l2);
    os << buf;
  }
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace pfnet
