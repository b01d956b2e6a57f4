#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <cmath>
#include <complex>
#include <vector>

#include "pfnet/error.hpp"
#include "pfnet/graph.hpp"
#include "pfnet/grid.hpp"

namespace pfnet {

using Complex = std::complex<double>;

struct YBus {
  int n = 0;
  Eigen::SparseMatrix<Complex> entries;
};

struct SolverConfig {
  double tol = 1e-8;   // max per-unit power mismatch
  int max_iter = 50;
  bool flat_start = true;
};

struct PFSolution {
  std::vector<double> vm;  // per-unit
  std::vector<double> va;  // radians
  std::vector<double> p;   // per-unit net drawn (load minus generation)
  std::vector<double> q;   // per-unit net drawn
  int iterations = 0;
  double max_mismatch = 0.0;
  bool converged = false;
};

// Standard pi-model admittance assembly including line charging, off-nominal
// tap ratio and phase shift. For simplified cases this reduces to
// Y[i][j] = -1/z off-diagonal with zero row sums.
inline YBus build_ybus(const GridCase& c) {
  const int n = static_cast<int>(c.n());
  std::vector<Eigen::Triplet<Complex>> trip;
  trip.reserve(c.branches.size() * 4 + c.n());
  for (const Branch& br : c.branches) {
    if (br.r == 0.0 && br.x == 0.0) throw SolverError("zero-impedance branch in Ybus assembly");
    const Complex ys = 1.0 / Complex(br.r, br.x);
    const Complex ysh(0.0, br.b_charging / 2.0);
    const Complex tap = std::polar(br.tap, br.shift);
    const int f = br.from_bus, t = br.to_bus;
    trip.emplace_back(f, f, (ys + ysh) / (tap * std::conj(tap)));
    trip.emplace_back(t, t, ys + ysh);
    trip.emplace_back(f, t, -ys / std::conj(tap));
    trip.emplace_back(t, f, -ys / tap);
  }
  YBus y;
  y.n = n;
  y.entries.resize(n, n);
  y.entries.setFromTriplets(trip.begin(), trip.end());  // duplicate triplets sum
  y.entries.makeCompressed();
  return y;
}

namespace detail {

// Complex bus injections S = V .* conj(Y V) (generation-positive convention).
inline void bus_injections(const YBus& y, const Eigen::VectorXcd& v, Eigen::VectorXd& p_calc,
                           Eigen::VectorXd& q_calc) {
  Eigen::VectorXcd s = v.array() * (y.entries * v).conjugate().array();
  p_calc = s.real();
  q_calc = s.imag();
}

}  // namespace detail

// Polar-form Newton-Raphson on the mismatch vector [dP at PV+PQ; dQ at PQ].
// The Jacobian is rebuilt and refactorized (sparse LU) every iteration.
// Generator reactive limits are never enforced. Non-convergence is reported
// through the returned diagnostics, not an exception.
inline PFSolution newton_raphson(const GridCase& c, const SolverConfig& cfg = {}) {
  if (!(cfg.tol > 0.0)) throw ValidationError("solver tol must be positive");
  if (cfg.max_iter < 1) throw ValidationError("solver max_iter must be >= 1");

  const int n = static_cast<int>(c.n());
  const YBus y = build_ybus(c);

  // Variable ordering: angles of all non-slack buses, then magnitudes of PQ.
  std::vector<int> ang_of(n, -1), vm_of(n, -1);
  int n_ang = 0, n_vm = 0;
  for (int i = 0; i < n; ++i) {
    if (c.buses[i].kind != BusKind::Slack) ang_of[i] = n_ang++;
    if (c.buses[i].kind == BusKind::PQ) vm_of[i] = n_vm++;
  }
  const int n_var = n_ang + n_vm;

  Eigen::VectorXd vm(n), va(n), p_sched(n), q_sched(n);
  for (int i = 0; i < n; ++i) {
    const Bus& b = c.buses[i];
    const bool known_vm = b.kind != BusKind::PQ;
    vm[i] = known_vm ? vm_setpoint(c, i) : (cfg.flat_start ? 1.0 : c.buses[i].vm);
    va[i] = b.kind == BusKind::Slack ? b.va : (cfg.flat_start ? 0.0 : b.va);
    p_sched[i] = -p_drawn(c, i);  // scheduled net injection
    q_sched[i] = -q_drawn(c, i);
  }

  Eigen::VectorXd p_calc(n), q_calc(n), f(n_var);
  auto refresh = [&](double& max_mis) {
    Eigen::VectorXcd v(n);
    for (int i = 0; i < n; ++i) v[i] = std::polar(vm[i], va[i]);
    detail::bus_injections(y, v, p_calc, q_calc);
    for (int i = 0; i < n; ++i) {
      if (ang_of[i] >= 0) f[ang_of[i]] = p_sched[i] - p_calc[i];
      if (vm_of[i] >= 0) f[n_ang + vm_of[i]] = q_sched[i] - q_calc[i];
    }
    max_mis = n_var == 0 ? 0.0 : f.lpNorm<Eigen::Infinity>();
  };

  PFSolution sol;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  bool analyzed = false;
  double max_mis = 0.0;
  refresh(max_mis);
  int iter = 0;
  while (max_mis >= cfg.tol && iter < cfg.max_iter) {
    // Jacobian of calculated injections w.r.t. [theta; vm].
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(y.entries.nonZeros()) * 4);
    for (int k = 0; k < y.entries.outerSize(); ++k) {
      for (Eigen::SparseMatrix<Complex>::InnerIterator it(y.entries, k); it; ++it) {
        const int i = static_cast<int>(it.row());
        const double g = it.value().real(), b = it.value().imag();
        const double tik = va[i] - va[k];
        const double ct = std::cos(tik), st = std::sin(tik);
        const bool diag = i == k;
        if (ang_of[i] >= 0) {
          if (ang_of[k] >= 0)
            trip.emplace_back(ang_of[i], ang_of[k],
                              diag ? -q_calc[i] - b * vm[i] * vm[i]
                                   : vm[i] * vm[k] * (g * st - b * ct));
          if (vm_of[k] >= 0)
            trip.emplace_back(ang_of[i], n_ang + vm_of[k],
                              diag ? p_calc[i] / vm[i] + g * vm[i]
                                   : vm[i] * (g * ct + b * st));
        }
        if (vm_of[i] >= 0) {
          if (ang_of[k] >= 0)
            trip.emplace_back(n_ang + vm_of[i], ang_of[k],
                              diag ? p_calc[i] - g * vm[i] * vm[i]
                                   : -vm[i] * vm[k] * (g * ct + b * st));
          if (vm_of[k] >= 0)
            trip.emplace_back(n_ang + vm_of[i], n_ang + vm_of[k],
                              diag ? q_calc[i] / vm[i] - b * vm[i]
                                   : vm[i] * (g * st - b * ct));
        }
      }
    }
    Eigen::SparseMatrix<double> jac(n_var, n_var);
    jac.setFromTriplets(trip.begin(), trip.end());
    jac.makeCompressed();
    if (!analyzed) {
      lu.analyzePattern(jac);
      analyzed = true;
    }
    lu.factorize(jac);
    if (lu.info() != Eigen::Success) throw SolverError("singular Jacobian in Newton-Raphson");
    Eigen::VectorXd dx = lu.solve(f);
    if (lu.info() != Eigen::Success) throw SolverError("Jacobian solve failed in Newton-Raphson");
    for (int i = 0; i < n; ++i) {
      if (ang_of[i] >= 0) va[i] += dx[ang_of[i]];
      if (vm_of[i] >= 0) vm[i] += dx[n_ang + vm_of[i]];
    }
    ++iter;
    refresh(max_mis);
  }

  {
    Eigen::VectorXcd v(n);
    for (int i = 0; i < n; ++i) v[i] = std::polar(vm[i], va[i]);
    detail::bus_injections(y, v, p_calc, q_calc);
  }
  sol.vm.assign(vm.data(), vm.data() + n);
  sol.va.assign(va.data(), va.data() + n);
  sol.p.resize(n);
  sol.q.resize(n);
  for (int i = 0; i < n; ++i) {
    sol.p[i] = -p_calc[i];  // report net drawn
    sol.q[i] = -q_calc[i];
  }
  sol.iterations = iter;
  sol.max_mismatch = max_mis;
  sol.converged = max_mis < cfg.tol && std::isfinite(max_mis);
  return sol;
}

// Linear DC approximation: P = B' theta with B' built from 1/x per branch,
// slack angle fixed. Vm reported as 1.0 at PQ buses and the setpoint at
// PV/slack; Q is identically zero.
inline PFSolution dc_power_flow(const GridCase& c) {
  const int n = static_cast<int>(c.n());
  const int s = static_cast<int>(c.slack_index());

  std::vector<int> red_of(n, -1);
  int n_red = 0;
  for (int i = 0; i < n; ++i)
    if (i != s) red_of[i] = n_red++;

  std::vector<Eigen::Triplet<double>> trip;
  std::vector<double> b_slack_col(n_red, 0.0);  // reduced rows, slack column
  for (const Branch& br : c.branches) {
    if (br.x == 0.0) throw SolverError("zero-reactance branch in DC power flow");
    const double w = 1.0 / br.x;
    const int i = br.from_bus, j = br.to_bus;
    for (int a : {i, j}) {
      if (red_of[a] >= 0) trip.emplace_back(red_of[a], red_of[a], w);
    }
    if (red_of[i] >= 0 && red_of[j] >= 0) {
      trip.emplace_back(red_of[i], red_of[j], -w);
      trip.emplace_back(red_of[j], red_of[i], -w);
    } else if (red_of[i] >= 0) {
      b_slack_col[red_of[i]] -= w;
    } else if (red_of[j] >= 0) {
      b_slack_col[red_of[j]] -= w;
    }
  }
  Eigen::SparseMatrix<double> b_red(n_red, n_red);
  b_red.setFromTriplets(trip.begin(), trip.end());
  b_red.makeCompressed();

  const double theta_s = c.buses[s].va;
  Eigen::VectorXd rhs(n_red);
  for (int i = 0; i < n; ++i)
    if (red_of[i] >= 0) rhs[red_of[i]] = -p_drawn(c, i) - b_slack_col[red_of[i]] * theta_s;

  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(b_red);
  if (lu.info() != Eigen::Success) throw SolverError("singular B' matrix in DC power flow");
  Eigen::VectorXd theta_red = lu.solve(rhs);
  if (lu.info() != Eigen::Success) throw SolverError("B' solve failed in DC power flow");

  PFSolution sol;
  sol.vm.resize(n);
  sol.va.resize(n);
  sol.p.assign(n, 0.0);
  sol.q.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    sol.vm[i] = c.buses[i].kind == BusKind::PQ ? 1.0 : vm_setpoint(c, i);
    sol.va[i] = i == s ? theta_s : theta_red[red_of[i]];
  }
  double max_mis = 0.0;
  for (const Branch& br : c.branches) {
    const double flow = (sol.va[br.to_bus] - sol.va[br.from_bus]) / br.x;  // drawn at from side
    sol.p[br.from_bus] += flow;
    sol.p[br.to_bus] -= flow;
  }
  for (int i = 0; i < n; ++i)
    if (i != s) max_mis = std::max(max_mis, std::abs(sol.p[i] - p_drawn(c, i)));
  sol.iterations = 1;
  sol.max_mismatch = max_mis;
  sol.converged = true;
  return sol;
}

// DC solve driven purely by a PFGraph (used to score DCPF against datasets):
// known P rows feed the linear system, the slack angle is the known theta.
// Returns an N x 4 prediction matrix; known slots are passed through, unknown
// Vm is 1.0 and unknown Q is 0.
inline std::vector<double> dc_predict(const PFGraph& g) {
  const int n = g.n;
  int s = -1;
  for (int i = 0; i < n; ++i) {
    const double* m = &g.mask[static_cast<std::size_t>(i) * 4];
    if (m[0] == 0.0 && m[1] == 0.0) s = i;
  }
  if (s < 0) throw ValidationError("graph has no slack node");

  std::vector<int> red_of(n, -1);
  int n_red = 0;
  for (int i = 0; i < n; ++i)
    if (i != s) red_of[i] = n_red++;

  std::vector<Eigen::Triplet<double>> trip;
  std::vector<double> b_slack_col(n_red, 0.0);
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const double xe = g.edge_attr[e * 2 + 1];
    if (xe == 0.0) throw SolverError("zero-reactance edge in DC power flow");
    const double w = 1.0 / xe;
    const int i = g.edges[e].first, j = g.edges[e].second;
    for (int a : {i, j})
      if (red_of[a] >= 0) trip.emplace_back(red_of[a], red_of[a], w);
    if (red_of[i] >= 0 && red_of[j] >= 0) {
      trip.emplace_back(red_of[i], red_of[j], -w);
      trip.emplace_back(red_of[j], red_of[i], -w);
    } else if (red_of[i] >= 0) {
      b_slack_col[red_of[i]] -= w;
    } else if (red_of[j] >= 0) {
      b_slack_col[red_of[j]] -= w;
    }
  }
  Eigen::SparseMatrix<double> b_red(n_red, n_red);
  b_red.setFromTriplets(trip.begin(), trip.end());
  b_red.makeCompressed();

  const double theta_s = g.x[static_cast<std::size_t>(s) * 4 + 1];
  Eigen::VectorXd rhs(n_red);
  for (int i = 0; i < n; ++i)
    if (red_of[i] >= 0)
      rhs[red_of[i]] = -g.x[static_cast<std::size_t>(i) * 4 + 2] - b_slack_col[red_of[i]] * theta_s;

  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(b_red);
  if (lu.info() != Eigen::Success) throw SolverError("singular B' matrix in DC power flow");
  Eigen::VectorXd theta_red = lu.solve(rhs);

  std::vector<double> pred(g.x);
  double p_slack = 0.0;
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const int i = g.edges[e].first, j = g.edges[e].second;
    const double ti = i == s ? theta_s : theta_red[red_of[i]];
    const double tj = j == s ? theta_s : theta_red[red_of[j]];
    const double flow = (tj - ti) / g.edge_attr[e * 2 + 1];
    if (i == s) p_slack += flow;
    if (j == s) p_slack -= flow;
  }
  for (int i = 0; i < n; ++i) {
    double* row = &pred[static_cast<std::size_t>(i) * 4];
    const double* m = &g.mask[static_cast<std::size_t>(i) * 4];
    if (m[0] != 0.0) row[0] = 1.0;  // PQ voltage magnitude
    if (m[1] != 0.0) row[1] = i == s ? theta_s : theta_red[red_of[i]];
    if (m[2] != 0.0) row[2] = p_slack;  // only the slack has unknown P
    if (m[3] != 0.0) row[3] = 0.0;
  }
  return pred;
}

// Per-bus mismatch between the case's scheduled drawn powers and the powers
// implied by (vm, va) under the series-impedance-only physics — a code path
// deliberately independent of the Ybus/Jacobian machinery. Entries without a
// scheduled value (slack P and Q; PV bus Q) are reported as zero.
inline std::pair<std::vector<double>, std::vector<double>> evaluate_residual(
    const GridCase& c, const std::vector<double>& vm, const std::vector<double>& va) {
  const int n = static_cast<int>(c.n());
  if (static_cast<int>(vm.size()) != n || static_cast<int>(va.size()) != n)
    throw ShapeError("evaluate_residual: voltage vectors must have length n");
  std::vector<Complex> s_drawn(n, Complex(0.0, 0.0));
  for (const Branch& br : c.branches) {
    const int i = br.from_bus, j = br.to_bus;
    const Complex vi = std::polar(vm[i], va[i]);
    const Complex vj = std::polar(vm[j], va[j]);
    const Complex z(br.r, br.x);
    s_drawn[i] += vi * std::conj((vj - vi) / z);
    s_drawn[j] += vj * std::conj((vi - vj) / z);
  }
  std::vector<double> dp(n, 0.0), dq(n, 0.0);
  for (int i = 0; i < n; ++i) {
    switch (c.buses[i].kind) {
      case BusKind::PQ:
        dp[i] = p_drawn(c, i) - s_drawn[i].real();
        dq[i] = q_drawn(c, i) - s_drawn[i].imag();
        break;
      case BusKind::PV:
        dp[i] = p_drawn(c, i) - s_drawn[i].real();
        break;
      case BusKind::Slack:
        break;
    }
  }
  return {dp, dq};
}

}  // namespace pfnet
