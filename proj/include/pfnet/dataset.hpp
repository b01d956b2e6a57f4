#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pfnet/error.hpp"
#include "pfnet/graph.hpp"
#include "pfnet/grid.hpp"
#include "pfnet/rng.hpp"
#include "pfnet/solver.hpp"

namespace pfnet {

struct PerturbSpec {
  double line_scale_lo = 0.8;
  double line_scale_hi = 1.2;
  double gen_vm_lo = 1.00;
  double gen_vm_hi = 1.05;
  double gen_p_sigma_frac = 0.1;
  double load_sigma_frac = 0.1;
  std::uint64_t seed = 0;
};

inline void validate(const PerturbSpec& spec) {
  if (!(spec.line_scale_lo < spec.line_scale_hi))
    throw ValidationError("perturbation: line scale bounds must satisfy lo < hi");
  if (!(spec.gen_vm_lo < spec.gen_vm_hi))
    throw ValidationError("perturbation: generator voltage bounds must satisfy lo < hi");
  if (spec.gen_p_sigma_frac < 0.0 || spec.load_sigma_frac < 0.0)
    throw ValidationError("perturbation: sigma fractions must be non-negative");
}

// Draw order is part of the determinism contract: branches in file order
// (r scale, then x scale), generators in file order (vm_set; p_set only for
// non-slack units, the slack absorbs imbalance), buses in file order
// (p_demand, then q_demand). Generators sharing a bus reuse the first unit's
// voltage draw so the setpoints stay consistent.
inline GridCase perturb_case(const GridCase& base, const PerturbSpec& spec, Rng& rng) {
  GridCase out = base;
  for (auto& br : out.branches) {
    br.r = rng.uniform(spec.line_scale_lo * br.r, spec.line_scale_hi * br.r);
    br.x = rng.uniform(spec.line_scale_lo * br.x, spec.line_scale_hi * br.x);
  }
  const int slack = out.slack_index();
  std::vector<double> bus_vm(out.n(), 0.0);
  std::vector<bool> bus_drawn(out.n(), false);
  for (auto& gen : out.gens) {
    if (!bus_drawn[gen.bus]) {
      bus_vm[gen.bus] = rng.uniform(spec.gen_vm_lo, spec.gen_vm_hi);
      bus_drawn[gen.bus] = true;
    }
    gen.vm_set = bus_vm[gen.bus];
    if (gen.bus != slack) gen.p_set = rng.normal(gen.p_set, spec.gen_p_sigma_frac * std::abs(gen.p_set));
  }
  for (auto& bus : out.buses) {
    bus.p_demand = rng.normal(bus.p_demand, spec.load_sigma_frac * std::abs(bus.p_demand));
    bus.q_demand = rng.normal(bus.q_demand, spec.load_sigma_frac * std::abs(bus.q_demand));
  }
  return out;
}

struct NormStats {
  std::array<double, 4> mean{0.0, 0.0, 0.0, 0.0};
  std::array<double, 4> stdev{1.0, 1.0, 1.0, 1.0};
  std::array<double, 2> edge_mean{0.0, 0.0};
  std::array<double, 2> edge_stdev{1.0, 1.0};
};

struct SplitRange {
  std::size_t start = 0;
  std::size_t count = 0;
};

struct Dataset {
  std::vector<PFGraph> graphs;
  NormStats norm;
  SplitRange train, val, test;
};

struct ScenarioResult {
  GridCase grid;
  PFSolution solution;
  int attempts = 0;
};

// Perturbs and solves scenario k, resampling on non-convergence. The random
// stream for a try is a pure function of (seed, k, attempt), so the result at
// index k never depends on other scenarios or on scheduling.
inline ScenarioResult solve_scenario(const GridCase& simplified, const PerturbSpec& spec, std::uint64_t k,
                                     int max_attempts) {
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    Rng rng(derive_stream(spec.seed, k, static_cast<std::uint64_t>(attempt)));
    GridCase grid = perturb_case(simplified, spec, rng);
    try {
      PFSolution sol = newton_raphson(grid, SolverConfig{});
      if (sol.converged) return {std::move(grid), std::move(sol), attempt + 1};
    } catch (const SolverError&) {
      // singular system at this draw; treat like non-convergence and resample
    }
  }
  throw SolverError("scenario " + std::to_string(k) + ": no convergent sample in " +
                    std::to_string(max_attempts) + " attempts");
}

// Labeled graph for one solved scenario. Known slots of y are copied from x
// verbatim, so inputs and ground truth agree exactly where the value was given.
inline PFGraph labeled_graph(const GridCase& grid, const PFSolution& sol) {
  PFGraph g = case_to_graph(grid);
  const int n = g.n;
  g.y.assign(static_cast<std::size_t>(n) * 4, 0.0);
  for (int i = 0; i < n; ++i) {
    const std::size_t row = static_cast<std::size_t>(i) * 4;
    g.y[row + 0] = sol.vm[i];
    g.y[row + 1] = sol.va[i];
    g.y[row + 2] = sol.p[i];
    g.y[row + 3] = sol.q[i];
    for (int c = 0; c < 4; ++c)
      if (g.mask[row + c] == 0.0) g.y[row + c] = g.x[row + c];
  }
  return g;
}

inline NormStats compute_norm_stats(const std::vector<PFGraph>& graphs, const SplitRange& over) {
  NormStats norm;
  for (int c = 0; c < 4; ++c) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t s = over.start; s < over.start + over.count; ++s) {
      const PFGraph& g = graphs[s];
      for (int i = 0; i < g.n; ++i) {
        const std::size_t k = static_cast<std::size_t>(i) * 4 + c;
        if (g.mask[k] == 0.0) {
          sum += g.x[k];
          ++count;
        }
      }
    }
    const double mean = count ? sum / static_cast<double>(count) : 0.0;
    double ss = 0.0;
    for (std::size_t s = over.start; s < over.start + over.count; ++s) {
      const PFGraph& g = graphs[s];
      for (int i = 0; i < g.n; ++i) {
        const std::size_t k = static_cast<std::size_t>(i) * 4 + c;
        if (g.mask[k] == 0.0) ss += (g.x[k] - mean) * (g.x[k] - mean);
      }
    }
    const double sd = count ? std::sqrt(ss / static_cast<double>(count)) : 0.0;
    norm.mean[c] = mean;
    norm.stdev[c] = sd > 1e-12 ? sd : 1.0;
  }
  for (int c = 0; c < 2; ++c) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t s = over.start; s < over.start + over.count; ++s)
      for (std::size_t e = 0; e < graphs[s].edges.size(); ++e) {
        sum += graphs[s].edge_attr[e * 2 + c];
        ++count;
      }
    const double mean = count ? sum / static_cast<double>(count) : 0.0;
    double ss = 0.0;
    for (std::size_t s = over.start; s < over.start + over.count; ++s)
      for (std::size_t e = 0; e < graphs[s].edges.size(); ++e) {
        const double d = graphs[s].edge_attr[e * 2 + c] - mean;
        ss += d * d;
      }
    const double sd = count ? std::sqrt(ss / static_cast<double>(count)) : 0.0;
    norm.edge_mean[c] = mean;
    norm.edge_stdev[c] = sd > 1e-12 ? sd : 1.0;
  }
  return norm;
}

// Channel-wise (v - mean)/std on x, y, and edge attributes. Unknown x slots
// are zero placeholders, not values, so they are re-zeroed afterwards.
inline PFGraph normalize(const PFGraph& g, const NormStats& norm) {
  PFGraph out = g;
  for (int i = 0; i < g.n; ++i)
    for (int c = 0; c < 4; ++c) {
      const std::size_t k = static_cast<std::size_t>(i) * 4 + c;
      out.x[k] = g.mask[k] != 0.0 ? 0.0 : (g.x[k] - norm.mean[c]) / norm.stdev[c];
      if (!out.y.empty()) out.y[k] = (g.y[k] - norm.mean[c]) / norm.stdev[c];
    }
  for (std::size_t e = 0; e < g.edges.size(); ++e)
    for (int c = 0; c < 2; ++c)
      out.edge_attr[e * 2 + c] = (g.edge_attr[e * 2 + c] - norm.edge_mean[c]) / norm.edge_stdev[c];
  return out;
}

inline PFGraph denormalize(const PFGraph& g, const NormStats& norm) {
  PFGraph out = g;
  for (int i = 0; i < g.n; ++i)
    for (int c = 0; c < 4; ++c) {
      const std::size_t k = static_cast<std::size_t>(i) * 4 + c;
      out.x[k] = g.mask[k] != 0.0 ? 0.0 : g.x[k] * norm.stdev[c] + norm.mean[c];
      if (!out.y.empty()) out.y[k] = g.y[k] * norm.stdev[c] + norm.mean[c];
    }
  for (std::size_t e = 0; e < g.edges.size(); ++e)
    for (int c = 0; c < 2; ++c)
      out.edge_attr[e * 2 + c] = g.edge_attr[e * 2 + c] * norm.edge_stdev[c] + norm.edge_mean[c];
  return out;
}

// Denormalizes a prediction matrix (n x 4 row-major) with the node-channel
// stats; plain values in, plain values out — no mask handling.
inline std::vector<double> denormalize_prediction(const std::vector<double>& pred, const NormStats& norm) {
  std::vector<double> out(pred.size());
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const int c = static_cast<int>(k % 4);
    out[k] = pred[k] * norm.stdev[c] + norm.mean[c];
  }
  return out;
}

inline Dataset generate_dataset(const GridCase& base, const PerturbSpec& spec, std::size_t count,
                                std::array<double, 3> splits = {0.5, 0.2, 0.3}, int workers = 1) {
  validate(spec);
  if (count < 1) throw ValidationError("dataset: count must be at least 1");
  const double total = splits[0] + splits[1] + splits[2];
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("dataset: split fractions must sum to 1");
  for (double f : splits)
    if (f < 0.0) throw ValidationError("dataset: split fractions must be non-negative");

  const GridCase simplified = simplify_case(base);
  const int budget = static_cast<int>(10 * count);

  Dataset ds;
  ds.graphs.resize(count);
  std::vector<int> attempts(count, 0);
  std::vector<std::exception_ptr> errors(count);

  const int n_workers = std::max(1, std::min<int>(workers, static_cast<int>(count)));
  auto run_chunk = [&](int worker) {
    for (std::size_t k = worker; k < count; k += n_workers) {
      try {
        ScenarioResult res = solve_scenario(simplified, spec, k, budget);
        ds.graphs[k] = labeled_graph(res.grid, res.solution);
        attempts[k] = res.attempts;
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  if (n_workers == 1) {
    run_chunk(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(run_chunk, w);
    for (auto& t : pool) t.join();
  }
  for (std::size_t k = 0; k < count; ++k)
    if (errors[k]) std::rethrow_exception(errors[k]);
  long long spent = 0;
  for (int a : attempts) spent += a;
  if (spent > budget)
    throw SolverError("dataset: resample budget exhausted (" + std::to_string(spent) + " attempts for " +
                      std::to_string(count) + " scenarios)");

  const auto part = [count](double f) {
    return static_cast<std::size_t>(std::floor(f * static_cast<double>(count) + 1e-9));
  };
  std::size_t n_train = part(splits[0]);
  const std::size_t n_val = part(splits[1]);
  const std::size_t n_test = part(splits[2]);
  n_train += count - (n_train + n_val + n_test);  // remainder goes to train
  ds.train = {0, n_train};
  ds.val = {n_train, n_val};
  ds.test = {n_train + n_val, n_test};
  ds.norm = compute_norm_stats(ds.graphs, ds.train);
  return ds;
}

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  put_bytes(os, b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  put_bytes(os, b, 8);
}

inline void put_i32(std::ostream& os, std::int32_t v) { put_u32(os, static_cast<std::uint32_t>(v)); }

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void get_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw IoError("dataset file truncated");
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  get_bytes(is, b, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  get_bytes(is, b, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::int32_t get_i32(std::istream& is) { return static_cast<std::int32_t>(get_u32(is)); }

inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

constexpr std::uint32_t kDatasetVersion = 1;
constexpr char kDatasetMagic[4] = {'P', 'F', 'D', 'S'};

}  // namespace detail

inline void save_dataset(const std::string& path, const Dataset& ds) {
  if (ds.graphs.empty()) throw ValidationError("dataset: nothing to save");
  const PFGraph& first = ds.graphs.front();
  for (const PFGraph& g : ds.graphs) {
    if (g.n != first.n || g.edges != first.edges || g.mask != first.mask)
      throw ValidationError("dataset: samples must share one topology");
    if (!g.labeled()) throw ValidationError("dataset: unlabeled sample");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);

  using namespace detail;
  put_bytes(os, kDatasetMagic, 4);
  put_u32(os, kDatasetVersion);
  put_u32(os, static_cast<std::uint32_t>(first.n));
  put_u32(os, static_cast<std::uint32_t>(first.edges.size()));
  put_u32(os, 4);  // node feature channels
  put_u32(os, 2);  // edge feature channels
  put_u64(os, ds.graphs.size());
  for (const SplitRange* r : {&ds.train, &ds.val, &ds.test}) {
    put_u64(os, r->start);
    put_u64(os, r->count);
  }
  for (const auto& [from, to] : first.edges) {
    put_i32(os, from);
    put_i32(os, to);
  }
  for (double m : first.mask) os.put(m != 0.0 ? '\1' : '\0');
  for (double v : ds.norm.mean) put_f64(os, v);
  for (double v : ds.norm.stdev) put_f64(os, v);
  for (double v : ds.norm.edge_mean) put_f64(os, v);
  for (double v : ds.norm.edge_stdev) put_f64(os, v);
  for (const PFGraph& g : ds.graphs) {
    for (double v : g.x) put_f64(os, v);
    for (double v : g.y) put_f64(os, v);
    for (double v : g.edge_attr) put_f64(os, v);
  }
  if (!os) throw IoError("write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);

  using namespace detail;
  char magic[4];
  get_bytes(is, magic, 4);
  if (std::string(magic, 4) != std::string(kDatasetMagic, 4)) throw IoError("not a dataset file: " + path);
  const std::uint32_t version = get_u32(is);
  if (version != kDatasetVersion)
    throw IoError("unsupported dataset version " + std::to_string(version) + " in " + path);
  const int n = static_cast<int>(get_u32(is));
  const std::size_t n_edges = get_u32(is);
  const std::uint32_t x_ch = get_u32(is);
  const std::uint32_t e_ch = get_u32(is);
  if (x_ch != 4 || e_ch != 2) throw IoError("unexpected feature layout in " + path);
  const std::uint64_t n_samples = get_u64(is);

  Dataset ds;
  for (SplitRange* r : {&ds.train, &ds.val, &ds.test}) {
    r->start = get_u64(is);
    r->count = get_u64(is);
  }
  PFGraph proto;
  proto.n = n;
  proto.edges.resize(n_edges);
  for (auto& [from, to] : proto.edges) {
    from = get_i32(is);
    to = get_i32(is);
  }
  proto.mask.resize(static_cast<std::size_t>(n) * 4);
  for (double& m : proto.mask) {
    char c;
    get_bytes(is, &c, 1);
    m = c ? 1.0 : 0.0;
  }
  for (double& v : ds.norm.mean) v = get_f64(is);
  for (double& v : ds.norm.stdev) v = get_f64(is);
  for (double& v : ds.norm.edge_mean) v = get_f64(is);
  for (double& v : ds.norm.edge_stdev) v = get_f64(is);

  ds.graphs.reserve(n_samples);
  for (std::uint64_t s = 0; s < n_samples; ++s) {
    PFGraph g = proto;
    g.x.resize(static_cast<std::size_t>(n) * 4);
    g.y.resize(static_cast<std::size_t>(n) * 4);
    g.edge_attr.resize(n_edges * 2);
    for (double& v : g.x) v = get_f64(is);
    for (double& v : g.y) v = get_f64(is);
    for (double& v : g.edge_attr) v = get_f64(is);
    ds.graphs.push_back(std::move(g));
  }
  return ds;
}

}  // namespace pfnet
