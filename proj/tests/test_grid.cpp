#include "catch_amalgamated.hpp"

#include <cmath>
#include <string>

#include "pfnet/graph.hpp"
#include "pfnet/grid.hpp"
#include "pfnet/matpower.hpp"

using namespace pfnet;
using Catch::Matchers::WithinAbs;

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string case_dir() { return PFNET_CASE_DIR; }

GridCase three_bus() {
  // slack -- pv -- pq chain with explicit drawn-power features
  GridCase c;
  c.name = "three_bus";
  c.buses = {
      {1, BusKind::Slack, 0.0, 0.0, 1.06, 0.0, 0.0},
      {2, BusKind::PV, 0.0, 0.0, 1.0, 0.0, 0.0},
      {3, BusKind::PQ, 0.5, 0.1, 1.0, 0.0, 0.0},
  };
  c.branches = {
      {0, 1, 0.01, 0.05, 0.0, 1.0, 0.0},
      {1, 2, 0.02, 0.06, 0.0, 1.0, 0.0},
  };
  c.gens = {
      {0, 0.0, 1.06},
      {1, 0.4, 1.02},
  };
  return c;
}

const char* kTwoBusText = R"(function mpc = twobus
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	0	1	1.1	0.9;
	2	1	10	5	0	0	1	1.0	0	0	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	0	0	1.0	100	1	0	0;
];
mpc.branch = [
	1	2	0.01	0.1	0	0	0	0	0	0	1;
];
)";

}  // namespace

TEST_CASE("parses the bundled 14-bus case") {
  GridCase c = load_case(case_dir() + "/case14.m");
  REQUIRE(c.buses.size() == 14);
  REQUIRE(c.branches.size() == 20);
  REQUIRE(c.gens.size() == 5);
  REQUIRE(c.base_mva == 100.0);
  int slack_count = 0;
  for (const auto& b : c.buses)
    if (b.kind == BusKind::Slack) ++slack_count;
  REQUIRE(slack_count == 1);
  REQUIRE(c.slack_index() == 0);

  // MW -> per-unit and degrees -> radians conversions
  REQUIRE_THAT(c.buses[1].p_demand, WithinAbs(0.217, 1e-15));
  REQUIRE_THAT(c.buses[1].q_demand, WithinAbs(0.127, 1e-15));
  REQUIRE_THAT(c.buses[1].va, WithinAbs(-4.98 * kPi / 180.0, 1e-15));
  REQUIRE_THAT(c.gens[0].p_set, WithinAbs(2.324, 1e-15));
  REQUIRE(c.gens[0].vm_set == 1.06);

  // transformer branch 4-7 keeps its off-nominal ratio; tap 0 means 1.0
  REQUIRE(c.branches[7].tap == 0.978);
  REQUIRE(c.branches[0].tap == 1.0);
}

TEST_CASE("parses a minimal two-bus case") {
  GridCase c = parse_matpower(kTwoBusText);
  REQUIRE(c.n() == 2);
  REQUIRE(c.branches.size() == 1);
  REQUIRE(c.name == "twobus");
  REQUIRE_THAT(c.buses[1].p_demand, WithinAbs(0.10, 1e-15));
}

TEST_CASE("rejects a branch referencing an unknown bus") {
  std::string text = kTwoBusText;
  auto pos = text.find("1\t2\t0.01");
  text.replace(pos, 3, "1\t99");
  REQUIRE_THROWS_AS(parse_matpower(text), ParseError);
}

TEST_CASE("reports syntax errors with a line number") {
  try {
    parse_matpower("function mpc = bad\nmpc.baseMVA = 100;\nmpc.bus = [\n\t1\t3\toops\n];\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    REQUIRE(e.line() == 4);
  }
}

TEST_CASE("canonical serialization round-trips exactly") {
  GridCase a = load_case(case_dir() + "/case14.m");
  GridCase b = parse_matpower(serialize_case(a));
  REQUIRE(b.name == a.name);
  REQUIRE(b.base_mva == a.base_mva);
  REQUIRE(b.buses.size() == a.buses.size());
  for (std::size_t i = 0; i < a.buses.size(); ++i) {
    REQUIRE(b.buses[i].id == a.buses[i].id);
    REQUIRE(b.buses[i].kind == a.buses[i].kind);
    REQUIRE(b.buses[i].p_demand == a.buses[i].p_demand);
    REQUIRE(b.buses[i].q_demand == a.buses[i].q_demand);
    REQUIRE(b.buses[i].vm == a.buses[i].vm);
    REQUIRE(b.buses[i].va == a.buses[i].va);
    REQUIRE(b.buses[i].base_kv == a.buses[i].base_kv);
  }
  REQUIRE(b.branches.size() == a.branches.size());
  for (std::size_t i = 0; i < a.branches.size(); ++i) {
    REQUIRE(b.branches[i].from_bus == a.branches[i].from_bus);
    REQUIRE(b.branches[i].to_bus == a.branches[i].to_bus);
    REQUIRE(b.branches[i].r == a.branches[i].r);
    REQUIRE(b.branches[i].x == a.branches[i].x);
    REQUIRE(b.branches[i].b_charging == a.branches[i].b_charging);
    REQUIRE(b.branches[i].tap == a.branches[i].tap);
    REQUIRE(b.branches[i].shift == a.branches[i].shift);
  }
  REQUIRE(b.gens.size() == a.gens.size());
  for (std::size_t i = 0; i < a.gens.size(); ++i) {
    REQUIRE(b.gens[i].bus == a.gens[i].bus);
    REQUIRE(b.gens[i].p_set == a.gens[i].p_set);
    REQUIRE(b.gens[i].vm_set == a.gens[i].vm_set);
  }
}

TEST_CASE("validation rejects structural defects") {
  SECTION("no slack bus") {
    GridCase c = three_bus();
    c.buses[0].kind = BusKind::PV;
    REQUIRE_THROWS_AS(validate(c), ValidationError);
  }
  SECTION("two slack buses") {
    GridCase c = three_bus();
    c.buses[1].kind = BusKind::Slack;
    REQUIRE_THROWS_AS(validate(c), ValidationError);
  }
  SECTION("disconnected graph") {
    GridCase c = three_bus();
    c.branches.pop_back();
    REQUIRE_THROWS_AS(validate(c), ValidationError);
  }
  SECTION("self loop") {
    GridCase c = three_bus();
    c.branches[1].to_bus = 1;
    REQUIRE_THROWS_AS(validate(c), ValidationError);
  }
  SECTION("zero series impedance") {
    GridCase c = three_bus();
    c.branches[0].r = 0.0;
    c.branches[0].x = 0.0;
    REQUIRE_THROWS_AS(validate(c), ValidationError);
  }
  SECTION("generator on a PQ bus") {
    GridCase c = three_bus();
    c.gens.push_back({2, 0.1, 1.0});
    REQUIRE_THROWS_AS(validate(c), ValidationError);
  }
  SECTION("conflicting voltage setpoints on one bus") {
    GridCase c = three_bus();
    c.gens.push_back({1, 0.1, 1.03});  // second gen on bus 2 disagrees on vm
    REQUIRE_THROWS_AS(validate(c), ValidationError);
  }
  SECTION("aggregated generators with agreeing setpoints pass") {
    GridCase c = three_bus();
    c.gens.push_back({1, 0.1, 1.02});
    REQUIRE_NOTHROW(validate(c));
    REQUIRE_THAT(p_drawn(c, 1), WithinAbs(-0.5, 1e-15));
  }
}

TEST_CASE("graph encoding carries known features and mask patterns") {
  GridCase c = three_bus();
  PFGraph g = case_to_graph(c);
  REQUIRE(g.n == 3);
  REQUIRE(g.edges.size() == 2);

  // slack: (Vm, theta) known
  REQUIRE(g.x[0] == 1.06);
  REQUIRE(g.x[1] == 0.0);
  REQUIRE(g.mask[0] == 0.0);
  REQUIRE(g.mask[1] == 0.0);
  REQUIRE(g.mask[2] == 1.0);
  REQUIRE(g.mask[3] == 1.0);

  // PV: (Vm, P) known, P in drawn convention -> -0.4
  REQUIRE(g.x[4] == 1.02);
  REQUIRE_THAT(g.x[6], WithinAbs(-0.4, 1e-15));
  REQUIRE(g.mask[4] == 0.0);
  REQUIRE(g.mask[5] == 1.0);
  REQUIRE(g.mask[6] == 0.0);
  REQUIRE(g.mask[7] == 1.0);

  // PQ: (P, Q) known
  REQUIRE_THAT(g.x[10], WithinAbs(0.5, 1e-15));
  REQUIRE_THAT(g.x[11], WithinAbs(0.1, 1e-15));
  REQUIRE(g.mask[8] == 1.0);
  REQUIRE(g.mask[9] == 1.0);

  // x is zero wherever the mask marks an unknown
  for (std::size_t i = 0; i < g.x.size(); ++i)
    if (g.mask[i] != 0.0) REQUIRE(g.x[i] == 0.0);
}

TEST_CASE("graph of the 14-bus case uses only the three mask patterns") {
  PFGraph g = case_to_graph(load_case(case_dir() + "/case14.m"));
  REQUIRE(g.edges.size() == 20);
  for (int i = 0; i < g.n; ++i) {
    const double* m = &g.mask[static_cast<std::size_t>(i) * 4];
    const bool pq = m[0] == 1 && m[1] == 1 && m[2] == 0 && m[3] == 0;
    const bool pv = m[0] == 0 && m[1] == 1 && m[2] == 0 && m[3] == 1;
    const bool slack = m[0] == 0 && m[1] == 0 && m[2] == 1 && m[3] == 1;
    REQUIRE((pq || pv || slack));
  }
  auto hops = bfs_hops(g, 0);
  for (int h : hops) REQUIRE(h >= 0);
}

TEST_CASE("parallel branches merge into one equivalent edge") {
  GridCase c;
  c.buses = {
      {1, BusKind::Slack, 0.0, 0.0, 1.0, 0.0, 0.0},
      {2, BusKind::PQ, 0.1, 0.0, 1.0, 0.0, 0.0},
  };
  c.branches = {
      {0, 1, 0.01, 0.1, 0.0, 1.0, 0.0},
      {1, 0, 0.01, 0.1, 0.0, 1.0, 0.0},  // same pair, opposite orientation
  };
  validate(c);
  PFGraph g = case_to_graph(c);
  REQUIRE(g.edges.size() == 1);
  // two identical impedances in parallel halve
  REQUIRE_THAT(g.edge_attr[0], WithinAbs(0.005, 1e-15));
  REQUIRE_THAT(g.edge_attr[1], WithinAbs(0.05, 1e-15));
}

TEST_CASE("simplify zeroes shunt and transformer fields and is idempotent") {
  GridCase c = three_bus();
  c.branches[0].b_charging = 0.05;
  c.branches[0].tap = 0.98;
  c.branches[0].shift = 0.1;
  GridCase s = simplify_case(c);
  REQUIRE(s.branches[0].b_charging == 0.0);
  REQUIRE(s.branches[0].tap == 1.0);
  REQUIRE(s.branches[0].shift == 0.0);
  REQUIRE(s.branches[0].r == c.branches[0].r);
  GridCase s2 = simplify_case(s);
  REQUIRE(s2.branches[0].b_charging == 0.0);
  REQUIRE(s2.branches[0].tap == 1.0);
  for (std::size_t i = 0; i < s.branches.size(); ++i) {
    REQUIRE(s2.branches[i].r == s.branches[i].r);
    REQUIRE(s2.branches[i].x == s.branches[i].x);
  }
}

TEST_CASE("topology fingerprint is stable and sensitive") {
  GridCase c = three_bus();
  PFGraph g1 = case_to_graph(c);
  PFGraph g2 = case_to_graph(c);
  REQUIRE(topology_fingerprint(g1) == topology_fingerprint(g2));

  GridCase d = three_bus();
  d.branches.push_back({0, 2, 0.03, 0.09, 0.0, 1.0, 0.0});
  REQUIRE(topology_fingerprint(case_to_graph(d)) != topology_fingerprint(g1));

  // same edges, different mask (PV bus demoted to PQ)
  GridCase e = three_bus();
  e.buses[1].kind = BusKind::PQ;
  e.gens.pop_back();
  REQUIRE(topology_fingerprint(case_to_graph(e)) != topology_fingerprint(g1));
}
