#include "catch_amalgamated.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pfnet/dataset.hpp"
#include "pfnet/matpower.hpp"
#include "pfnet/model.hpp"

using namespace pfnet;
using Catch::Matchers::WithinAbs;

namespace {

std::string case_path(const std::string& name) { return std::string(PFNET_CASE_DIR) + "/" + name; }

GridCase three_bus() {
  GridCase c;
  c.name = "three_bus";
  c.buses = {
      {1, BusKind::Slack, 0.0, 0.0, 1.0, 0.0, 135.0},
      {2, BusKind::PV, 0.1, 0.0, 1.0, 0.0, 135.0},
      {3, BusKind::PQ, 0.5, 0.2, 1.0, 0.0, 135.0},
  };
  c.branches = {
      {0, 1, 0.01, 0.08, 0.0, 1.0, 0.0},
      {1, 2, 0.02, 0.12, 0.0, 1.0, 0.0},
  };
  c.gens = {{0, 0.0, 1.06}, {1, 0.4, 1.02}};
  return c;
}

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden = 4;
  cfg.tag_order = 2;
  cfg.dropout_p = 0.0;
  return cfg;
}

PFGraph toy_path_graph() {
  PFGraph g;
  g.n = 3;
  g.edges = {{0, 1}, {1, 2}};
  g.edge_attr = {0.1, 0.2, 0.3, 0.4};
  g.x = {0.5, -0.2, 0.3, 0.1, 1.0, 0.4, -0.5, 0.2, -0.3, 0.7, 0.6, -0.1};
  g.mask = {0, 0, 1, 1, 0, 1, 0, 1, 1, 1, 0, 0};
  return g;
}

// Deterministic non-random fill so the hand oracle and the model share weights.
void pattern_fill(ModelParams& p) {
  int t = 1;
  for (Tensor tensor : p.tensors()) {
    for (std::size_t k = 0; k < tensor.size(); ++k)
      tensor.data()[k] = 0.05 * static_cast<double>((k + t) % 7) - 0.12 + 0.01 * t;
    ++t;
  }
}

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j) m[i][j] = t.data()[static_cast<std::size_t>(i) * t.cols() + j];
  return m;
}

Mat mat_mul(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

Mat mat_add_bias(Mat a, const Mat& bias) {
  for (auto& row : a)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[0][j];
  return a;
}

Mat mat_add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) a[i][j] += b[i][j];
  return a;
}

Mat mat_relu(Mat a) {
  for (auto& row : a)
    for (double& v : row) v = v > 0.0 ? v : 0.0;
  return a;
}

Mat mlp2(const Mat& x, const Mat& w0, const Mat& b0, const Mat& w1, const Mat& b1) {
  return mat_add_bias(mat_mul(mat_relu(mat_add_bias(mat_mul(x, w0), b0)), w1), b1);
}

double max_abs_diff(const Tensor& t, const Mat& m) {
  double worst = 0.0;
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j)
      worst = std::max(worst, std::abs(t.data()[static_cast<std::size_t>(i) * t.cols() + j] - m[i][j]));
  return worst;
}

}  // namespace

TEST_CASE("mask encoder is a row-wise map with the additive-shift identity") {
  ModelParams p = init_model(toy_config(), 5);
  Tape tape;
  SECTION("zero weights send every mask to zero") {
    for (const std::string& name : {"mask.W0", "mask.b0", "mask.W1", "mask.b1"}) {
      Tensor t = p.at(name);
      std::fill(t.values().begin(), t.values().end(), 0.0);
    }
    Tensor mask = Tensor::from(3, 4, {1, 1, 0, 0, 0, 1, 0, 1, 0, 0, 1, 1});
    Tensor encoded = mask_encode(tape, p, mask);
    for (std::size_t k = 0; k < encoded.size(); ++k) REQUIRE(encoded.data()[k] == 0.0);

    Tensor x = Tensor::from(3, 4, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    Tensor shifted = add(tape, x, encoded);
    REQUIRE(shifted.values() == x.values());
  }
  SECTION("distinct mask rows produce distinct encodings, identical rows identical ones") {
    Tensor mask = Tensor::from(3, 4, {1, 1, 0, 0, 0, 1, 0, 1, 1, 1, 0, 0});
    Tensor encoded = mask_encode(tape, p, mask);
    double pq_pv_diff = 0.0, pq_pq_diff = 0.0;
    for (int c = 0; c < 4; ++c) {
      pq_pv_diff = std::max(pq_pv_diff, std::abs(encoded.data()[c] - encoded.data()[4 + c]));
      pq_pq_diff = std::max(pq_pq_diff, std::abs(encoded.data()[c] - encoded.data()[8 + c]));
    }
    REQUIRE(pq_pv_diff > 1e-6);
    REQUIRE(pq_pq_diff == 0.0);
  }
}

TEST_CASE("powerflow conv stack matches a straight-line hand evaluation") {
  ModelConfig cfg = toy_config();
  ModelParams p = init_model(cfg, 1);
  pattern_fill(p);
  PFGraph g = toy_path_graph();
  SparseMatrix s = build_shift(g);

  Tape tape;
  Rng rng(0);
  Tensor out = forward_pfnet(tape, p, g, s, false, rng);
  REQUIRE(out.rows() == 3);
  REQUIRE(out.cols() == 4);

  // Independent re-computation with plain loops: mask encode and shift,
  // per-directed-edge message MLP, scatter-sum, residual, order-2 graph
  // convolution, then the message-passing-only head.
  Mat x = {{0.5, -0.2, 0.3, 0.1}, {1.0, 0.4, -0.5, 0.2}, {-0.3, 0.7, 0.6, -0.1}};
  Mat mask = {{0, 0, 1, 1}, {0, 1, 0, 1}, {1, 1, 0, 0}};
  Mat me = mlp2(mask, to_mat(p.at("mask.W0")), to_mat(p.at("mask.b0")), to_mat(p.at("mask.W1")),
                to_mat(p.at("mask.b1")));
  Mat x0 = mat_add(x, me);

  const int dst[4] = {0, 1, 1, 2};
  const int src[4] = {1, 0, 2, 1};
  const double er[4] = {0.1, 0.1, 0.3, 0.3};
  const double ex[4] = {0.2, 0.2, 0.4, 0.4};

  auto messages = [&](const Mat& state, const std::string& prefix, int out_dim) {
    Mat agg(3, std::vector<double>(out_dim, 0.0));
    for (int d = 0; d < 4; ++d) {
      Mat cat(1, std::vector<double>(2 * state[0].size() + 2));
      for (std::size_t c = 0; c < state[0].size(); ++c) {
        cat[0][c] = state[dst[d]][c];
        cat[0][state[0].size() + c] = state[src[d]][c];
      }
      cat[0][2 * state[0].size()] = er[d];
      cat[0][2 * state[0].size() + 1] = ex[d];
      Mat msg = mlp2(cat, to_mat(p.at(prefix + ".W0")), to_mat(p.at(prefix + ".b0")),
                     to_mat(p.at(prefix + ".W1")), to_mat(p.at(prefix + ".b1")));
      for (int c = 0; c < out_dim; ++c) agg[dst[d]][c] += msg[0][c];
    }
    return agg;
  };

  Mat agg = messages(x0, "conv0.mp", 4);
  Mat mixed = mat_add(x0, agg);  // hidden == input width, so the residual applies

  const double rhalf = 1.0 / std::sqrt(2.0);
  Mat shift = {{0, rhalf, 0}, {rhalf, 0, rhalf}, {0, rhalf, 0}};
  Mat hop1 = mat_mul(shift, mixed);
  Mat tag = mat_add(mat_mul(mixed, to_mat(p.at("conv0.tag.W0"))), mat_mul(hop1, to_mat(p.at("conv0.tag.W1"))));
  Mat state = mat_relu(mat_add_bias(tag, to_mat(p.at("conv0.tag.b"))));

  Mat expected = messages(state, "head.mp", 4);
  REQUIRE(max_abs_diff(out, expected) < 1e-12);
}

TEST_CASE("order-1 graph convolution has no neighbor mixing") {
  PFGraph g = toy_path_graph();
  SparseMatrix s = build_shift(g);
  ModelConfig cfg = toy_config();
  cfg.tag_order = 1;
  cfg.message_passing = false;
  cfg.n_layers = 1;  // single linear tag layer 4 -> 4
  ModelParams p = init_model(cfg, 9);

  Tape tape;
  Rng rng(0);
  Tensor out = forward_pfnet(tape, p, g, s, false, rng);

  // With K=1 only S^0 = I contributes: out = (x + mask_enc) W0 + b row-wise.
  Tensor x = Tensor::from(3, 4, g.x);
  Tensor mask = Tensor::from(3, 4, g.mask);
  Tape check;
  Tensor x0 = add(check, x, mask_encode(check, p, mask));
  Tensor direct = add(check, matmul(check, x0, p.at("head.tag.W0")), p.at("head.tag.b"));
  for (std::size_t k = 0; k < out.size(); ++k) REQUIRE_THAT(out.data()[k], WithinAbs(direct.data()[k], 1e-14));
}

TEST_CASE("shift operator is the symmetric-normalized adjacency") {
  PFGraph g = toy_path_graph();
  SparseMatrix s = build_shift(g);
  REQUIRE(s.rows == 3);
  REQUIRE(s.row_ptr == std::vector<int>{0, 1, 3, 4});
  REQUIRE(s.col_idx == std::vector<int>{1, 0, 2, 1});
  const double rhalf = 1.0 / std::sqrt(2.0);
  for (double v : s.vals) REQUIRE_THAT(v, WithinAbs(rhalf, 1e-15));

  PFGraph isolated = g;
  isolated.n = 4;  // node 3 has no incident edge
  isolated.x.resize(16, 0.0);
  isolated.mask.resize(16, 0.0);
  REQUIRE_THROWS_AS(build_shift(isolated), ValidationError);
}

TEST_CASE("untrained forward is well-formed on the bundled case") {
  GridCase c = load_case(case_path("case14.m"));
  PFGraph g = case_to_graph(simplify_case(c));
  SparseMatrix s = build_shift(g);
  ModelParams p = init_model(model_preset("small"), 3);
  Tape tape;
  Rng rng(7);
  Tensor out = forward_pfnet(tape, p, g, s, false, rng);
  REQUIRE(out.rows() == 14);
  REQUIRE(out.cols() == 4);
  for (std::size_t k = 0; k < out.size(); ++k) REQUIRE(std::isfinite(out.data()[k]));
}

TEST_CASE("forward is equivariant under node permutation") {
  GridCase c = load_case(case_path("case14.m"));
  PFGraph g = case_to_graph(simplify_case(c));
  const int n = g.n;

  std::vector<int> perm(n);  // perm[old] = new index
  for (int i = 0; i < n; ++i) perm[i] = (i * 5 + 3) % n;

  PFGraph pg;
  pg.n = n;
  pg.x.resize(g.x.size());
  pg.mask.resize(g.mask.size());
  for (int i = 0; i < n; ++i)
    for (int cch = 0; cch < 4; ++cch) {
      pg.x[static_cast<std::size_t>(perm[i]) * 4 + cch] = g.x[static_cast<std::size_t>(i) * 4 + cch];
      pg.mask[static_cast<std::size_t>(perm[i]) * 4 + cch] = g.mask[static_cast<std::size_t>(i) * 4 + cch];
    }
  for (const auto& [a, b] : g.edges) pg.edges.emplace_back(perm[a], perm[b]);
  pg.edge_attr = g.edge_attr;

  ModelParams p = init_model(model_preset("small"), 11);
  Tape t1, t2;
  Rng r1(0), r2(0);
  Tensor out = forward_pfnet(t1, p, g, build_shift(g), false, r1);
  Tensor pout = forward_pfnet(t2, p, pg, build_shift(pg), false, r2);

  double worst = 0.0;
  for (int i = 0; i < n; ++i)
    for (int cch = 0; cch < 4; ++cch)
      worst = std::max(worst, std::abs(out.data()[static_cast<std::size_t>(i) * 4 + cch] -
                                       pout.data()[static_cast<std::size_t>(perm[i]) * 4 + cch]));
  REQUIRE(worst < 1e-9);
}

TEST_CASE("batched forward equals concatenated per-graph forwards") {
  GridCase base = three_bus();
  PerturbSpec spec;
  spec.seed = 19;
  Dataset ds = generate_dataset(base, spec, 3);
  std::vector<PFGraph> pair = {ds.graphs[0], ds.graphs[1]};
  PFGraph batch = disjoint_union(pair);
  REQUIRE(batch.n == 6);
  REQUIRE(batch.edges.size() == 4);

  ModelParams p = init_model(toy_config(), 23);
  Tape tb;
  Rng rb(0);
  Tensor bout = forward_pfnet(tb, p, batch, build_shift(batch), false, rb);

  double worst = 0.0;
  std::size_t row_offset = 0;
  for (const PFGraph& g : pair) {
    Tape t;
    Rng r(0);
    Tensor out = forward_pfnet(t, p, g, build_shift(g), false, r);
    for (std::size_t k = 0; k < out.size(); ++k)
      worst = std::max(worst, std::abs(out.data()[k] - bout.data()[row_offset * 4 + k]));
    row_offset += g.n;
  }
  REQUIRE(worst < 1e-9);
}

TEST_CASE("loss endpoint identities") {
  GridCase base = three_bus();
  PerturbSpec spec;
  spec.seed = 29;
  Dataset ds = generate_dataset(base, spec, 2);
  const PFGraph& g = ds.graphs[0];

  Tape tape;
  Tensor y = Tensor::from(g.n, 4, g.y);
  Tensor pred = Tensor::from(g.n, 4, g.x);  // known slots right, unknowns zero — a wrong prediction
  Tensor mask = Tensor::from(g.n, 4, g.mask);

  Tensor mse = loss_mse(tape, pred, y);
  Tensor phys = loss_physical(tape, pred, g, g.edge_attr);
  REQUIRE(mse.item() > 0.0);

  SECTION("w = 1 reduces the mixed loss to MSE") {
    Tensor mixed = loss_mixed(tape, mse, phys, 1.0, 0.02);
    REQUIRE(mixed.item() == mse.item());
  }
  SECTION("w = 0 reduces the mixed loss to tau * physical") {
    Tensor mixed = loss_mixed(tape, mse, phys, 0.0, 0.02);
    REQUIRE_THAT(mixed.item(), WithinAbs(0.02 * phys.item(), 1e-15));
  }
  SECTION("exact predictions zero every loss") {
    Tensor exact = Tensor::from(g.n, 4, g.y);
    REQUIRE(loss_mse(tape, exact, y).item() == 0.0);
    REQUIRE(loss_masked_l2(tape, exact, y, mask).item() == 0.0);
    REQUIRE(loss_physical(tape, exact, g, g.edge_attr).item() < 1e-10);
  }
  SECTION("all-zero mask selects nothing") {
    Tensor none = Tensor::zeros(g.n, 4);
    REQUIRE(loss_masked_l2(tape, pred, y, none).item() == 0.0);
  }
}

TEST_CASE("ground-truth labels carry near-zero physical loss") {
  GridCase base = load_case(case_path("case14.m"));
  PerturbSpec spec;
  spec.seed = 31;
  Dataset ds = generate_dataset(base, spec, 10);
  for (const PFGraph& g : ds.graphs) {
    Tape tape;
    Tensor y = Tensor::from(g.n, 4, g.y);
    REQUIRE(loss_physical(tape, y, g, g.edge_attr).item() < 1e-10);
  }
}

TEST_CASE("tape denormalization matches the dataset inverse") {
  GridCase base = three_bus();
  PerturbSpec spec;
  spec.seed = 37;
  Dataset ds = generate_dataset(base, spec, 4);
  PFGraph norm_g = normalize(ds.graphs[0], ds.norm);
  Tape tape;
  Tensor y_norm = Tensor::from(norm_g.n, 4, norm_g.y);
  Tensor back = denormalize_on_tape(tape, y_norm, ds.norm);
  for (std::size_t k = 0; k < back.size(); ++k) REQUIRE_THAT(back.data()[k], WithinAbs(ds.graphs[0].y[k], 1e-12));
}

TEST_CASE("gcn identity layer and baseline contracts") {
  PFGraph g = toy_path_graph();
  SparseMatrix s = build_shift(g);
  SECTION("identity weights with order 1 pass the input through") {
    Tape tape;
    Tensor x = Tensor::from(3, 4, g.x);
    Tensor eye = Tensor::zeros(4, 4);
    for (int i = 0; i < 4; ++i) eye.data()[i * 4 + i] = 1.0;
    Tensor bias = Tensor::zeros(1, 4);
    Tensor out = gcn_layer(tape, s, x, eye, bias, 1, false);
    REQUIRE(out.values() == x.values());
  }
  SECTION("gcn forward is well-formed") {
    ModelConfig cfg;
    cfg.arch = "gcn";
    ModelParams p = init_model(cfg, 41);
    Tape tape;
    Tensor out = forward_gcn(tape, p, g, s);
    REQUIRE(out.rows() == 3);
    REQUIRE(out.cols() == 4);
    for (std::size_t k = 0; k < out.size(); ++k) REQUIRE(std::isfinite(out.data()[k]));
  }
  SECTION("mlp baseline rejects a foreign node count") {
    ModelConfig cfg;
    cfg.arch = "mlp";
    cfg.fixed_nodes = 5;
    cfg.n_layers = 3;
    ModelParams p = init_model(cfg, 43);
    Tape tape;
    REQUIRE_THROWS_AS(forward_mlp(tape, p, g), ShapeError);
    ModelConfig bad = cfg;
    bad.fixed_nodes = 0;
    REQUIRE_THROWS_AS(init_model(bad, 1), ValidationError);
  }
  SECTION("mlp baseline forward is well-formed at its design size") {
    ModelConfig cfg;
    cfg.arch = "mlp";
    cfg.fixed_nodes = 3;
    ModelParams p = init_model(cfg, 47);
    Tape tape;
    Tensor out = forward_mlp(tape, p, g);
    REQUIRE(out.rows() == 3);
    REQUIRE(out.cols() == 4);
  }
}

TEST_CASE("preset parameter counts stay near the reference sizes") {
  const struct {
    const char* name;
    std::size_t reference;
  } rows[] = {{"small", 32000}, {"medium", 357000}, {"large", 7375000}};
  for (const auto& row : rows) {
    ModelParams p = init_model(model_preset(row.name), 1);
    const double ratio = static_cast<double>(p.param_count()) / static_cast<double>(row.reference);
    INFO(row.name << " has " << p.param_count() << " parameters");
    REQUIRE(ratio > 0.8);
    REQUIRE(ratio < 1.2);
  }
}

TEST_CASE("model configuration validation") {
  REQUIRE_THROWS_AS(model_preset("huge"), ValidationError);
  ModelConfig cfg;
  cfg.n_layers = 0;
  REQUIRE_THROWS_AS(init_model(cfg, 1), ValidationError);
  ModelConfig cfg2;
  cfg2.dropout_p = 1.0;
  REQUIRE_THROWS_AS(init_model(cfg2, 1), ValidationError);
  ModelConfig cfg3;
  cfg3.arch = "transformer";
  REQUIRE_THROWS_AS(init_model(cfg3, 1), ValidationError);
}

TEST_CASE("whole-model gradient matches finite differences") {
  PFGraph g = toy_path_graph();
  SparseMatrix s = build_shift(g);
  NormStats norm;
  norm.mean = {0.9, 0.05, 0.2, 0.08};
  norm.stdev = {0.13, 0.21, 0.34, 0.55};

  for (int seed = 1; seed <= 20; ++seed) {
    ModelParams p = init_model(toy_config(), static_cast<std::uint64_t>(seed));
    Rng data_rng(1000 + seed);
    std::vector<double> yv(12);
    for (double& v : yv) v = data_rng.uniform(-1.0, 1.0);
    Tensor y = Tensor::from(3, 4, yv);

    auto eval_loss = [&](Tape& tape) {
      Rng drop(0);
      Tensor pred = forward_pfnet(tape, p, g, s, false, drop);
      Tensor mse = loss_mse(tape, pred, y);
      Tensor phys = loss_physical(tape, denormalize_on_tape(tape, pred, norm), g, g.edge_attr);
      return loss_mixed(tape, mse, phys, 0.5, 0.02);
    };

    Tape tape;
    p.zero_grad();
    Tensor loss = eval_loss(tape);
    tape.backward(loss);

    const double h = 1e-6;
    double worst = 0.0;
    for (Tensor t : p.tensors()) {
      for (std::size_t k = 0; k < t.size(); ++k) {
        const double orig = t.data()[k];
        t.data()[k] = orig + h;
        Tape tp;
        const double fp = eval_loss(tp).item();
        t.data()[k] = orig - h;
        Tape tm;
        const double fm = eval_loss(tm).item();
        t.data()[k] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double an = t.grad()[k];
        worst = std::max(worst, std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)}));
      }
    }
    REQUIRE(worst < 1e-4);
  }
}
