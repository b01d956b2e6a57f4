#include "catch_amalgamated.hpp"

#include <cmath>
#include <functional>
#include <vector>

#include "fd_check.hpp"
#include "pfnet/optim.hpp"
#include "pfnet/rng.hpp"
#include "pfnet/tensor.hpp"

using namespace pfnet;
using Catch::Matchers::WithinAbs;
using fdcheck::max_relative_error;
using fdcheck::probed_sum;
using fdcheck::random_offset_tensor;
using fdcheck::random_tensor;
using fdcheck::GraphFn;

namespace {

constexpr int kSeeds = 20;

}  // namespace

TEST_CASE("relu forward and gradient definition") {
  Tape tape;
  Tensor a = Tensor::from(1, 3, {-1.0, 0.0, 2.0}, true);
  Tensor out = relu(tape, a);
  REQUIRE(out.values() == std::vector<double>{0.0, 0.0, 2.0});
  tape.backward(sum(tape, out));
  REQUIRE(a.grads() == std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("scatter_add accumulates rows by target index") {
  Tape tape;
  Tensor msg = Tensor::from(2, 2, {1.0, 1.0, 2.0, 2.0});
  Tensor out = scatter_add(tape, msg, {0, 0}, 2);
  REQUIRE(out.values() == std::vector<double>{3.0, 3.0, 0.0, 0.0});
}

TEST_CASE("backward of a quadratic") {
  Tape tape;
  Tensor w = Tensor::from(1, 2, {1.0, 2.0}, true);
  Tensor loss = sum(tape, mul(tape, w, w));
  tape.backward(loss);
  REQUIRE(w.grads() == std::vector<double>{2.0, 4.0});
}

TEST_CASE("gradients accumulate until zero_grad") {
  Tape tape;
  Tensor w = Tensor::from(1, 2, {1.0, 2.0}, true);
  Tensor loss = sum(tape, mul(tape, w, w));
  tape.backward(loss);
  tape.backward(loss);
  REQUIRE(w.grads() == std::vector<double>{4.0, 8.0});
  w.zero_grad();
  tape.backward(loss);
  REQUIRE(w.grads() == std::vector<double>{2.0, 4.0});
}

TEST_CASE("backward rejects non-scalar losses") {
  Tape tape;
  Tensor w = Tensor::from(1, 2, {1.0, 2.0}, true);
  REQUIRE_THROWS_AS(tape.backward(w), ShapeError);
}

TEST_CASE("shape mismatches report both shapes") {
  Tape tape;
  Tensor a = Tensor::zeros(2, 3);
  Tensor b = Tensor::zeros(2, 3);
  try {
    matmul(tape, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches finite differences") {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Rng rng(seed);
    Tensor a = random_tensor(rng, 3, 4, true);
    Tensor b = random_tensor(rng, 4, 2, true);
    Tensor probe = random_tensor(rng, 3, 2, false);
    double err = max_relative_error({a, b}, [&](Tape& t, std::vector<Tensor>& in) {
      return probed_sum(t, matmul(t, in[0], in[1]), probe);
    });
    REQUIRE(err < 1e-6);
  }
}

TEST_CASE("elementwise op gradients match finite differences") {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Rng rng(100 + seed);
    const int r = 2 + static_cast<int>(rng.next_u64() % 3);
    const int c = 2 + static_cast<int>(rng.next_u64() % 3);
    Tensor a = random_tensor(rng, r, c, true);
    Tensor b = random_tensor(rng, r, c, true);
    Tensor probe = random_tensor(rng, r, c, false);

    auto check = [&](const GraphFn& f) { REQUIRE(max_relative_error({a, b}, f) < 1e-6); };
    check([&](Tape& t, std::vector<Tensor>& in) { return probed_sum(t, add(t, in[0], in[1]), probe); });
    check([&](Tape& t, std::vector<Tensor>& in) { return probed_sum(t, sub(t, in[0], in[1]), probe); });
    check([&](Tape& t, std::vector<Tensor>& in) { return probed_sum(t, mul(t, in[0], in[1]), probe); });
    check([&](Tape& t, std::vector<Tensor>& in) { return probed_sum(t, scale(t, in[0], -1.7), probe); });
    check([&](Tape& t, std::vector<Tensor>& in) { return probed_sum(t, pfnet::sin(t, in[0]), probe); });
    check([&](Tape& t, std::vector<Tensor>& in) { return probed_sum(t, pfnet::cos(t, in[0]), probe); });
    check([&](Tape& t, std::vector<Tensor>& in) { return probed_sum(t, square(t, in[0]), probe); });
  }
}

TEST_CASE("bias broadcast add gradient matches finite differences") {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Rng rng(200 + seed);
    Tensor a = random_tensor(rng, 4, 3, true);
    Tensor bias = random_tensor(rng, 1, 3, true);
    Tensor probe = random_tensor(rng, 4, 3, false);
    double err = max_relative_error({a, bias}, [&](Tape& t, std::vector<Tensor>& in) {
      return probed_sum(t, add(t, in[0], in[1]), probe);
    });
    REQUIRE(err < 1e-6);
  }
}

TEST_CASE("relu gradient matches finite differences away from the kink") {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Rng rng(300 + seed);
    Tensor a = random_offset_tensor(rng, 3, 4, true);
    Tensor probe = random_tensor(rng, 3, 4, false);
    double err = max_relative_error({a}, [&](Tape& t, std::vector<Tensor>& in) {
      return probed_sum(t, relu(t, in[0]), probe);
    });
    REQUIRE(err < 1e-6);
  }
}

TEST_CASE("concat and slice gradients match finite differences") {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Rng rng(400 + seed);
    Tensor a = random_tensor(rng, 3, 2, true);
    Tensor b = random_tensor(rng, 3, 3, true);
    Tensor c = random_tensor(rng, 3, 1, true);
    Tensor probe = random_tensor(rng, 3, 6, false);
    double err = max_relative_error({a, b, c}, [&](Tape& t, std::vector<Tensor>& in) {
      return probed_sum(t, concat_cols(t, {in[0], in[1], in[2]}), probe);
    });
    REQUIRE(err < 1e-6);

    Tensor probe2 = random_tensor(rng, 3, 2, false);
    double err2 = max_relative_error({b}, [&](Tape& t, std::vector<Tensor>& in) {
      return probed_sum(t, slice_cols(t, in[0], 1, 3), probe2);
    });
    REQUIRE(err2 < 1e-6);
  }
}

TEST_CASE("gather and scatter gradients match finite differences") {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Rng rng(500 + seed);
    Tensor a = random_tensor(rng, 4, 3, true);
    std::vector<int> pick = {2, 0, 2, 3, 1, 2};  // repeats exercise accumulation
    Tensor probe = random_tensor(rng, 6, 3, false);
    double err = max_relative_error({a}, [&](Tape& t, std::vector<Tensor>& in) {
      return probed_sum(t, index_select(t, in[0], pick), probe);
    });
    REQUIRE(err < 1e-6);

    Tensor msgs = random_tensor(rng, 5, 2, true);
    std::vector<int> targets = {1, 0, 1, 2, 1};
    Tensor probe2 = random_tensor(rng, 3, 2, false);
    double err2 = max_relative_error({msgs}, [&](Tape& t, std::vector<Tensor>& in) {
      return probed_sum(t, scatter_add(t, in[0], targets, 3), probe2);
    });
    REQUIRE(err2 < 1e-6);
  }
}

TEST_CASE("reduction gradients match finite differences") {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Rng rng(600 + seed);
    Tensor a = random_tensor(rng, 3, 5, true);
    double err = max_relative_error({a}, [&](Tape& t, std::vector<Tensor>& in) { return sum(t, in[0]); });
    REQUIRE(err < 1e-6);
    double err2 = max_relative_error({a}, [&](Tape& t, std::vector<Tensor>& in) { return mean(t, in[0]); });
    REQUIRE(err2 < 1e-6);
  }
}

TEST_CASE("spmm gradient matches finite differences") {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Rng rng(700 + seed);
    const int n = 4;
    SparseMatrix s;
    s.rows = n;
    s.cols = n;
    s.row_ptr.push_back(0);
    for (int i = 0; i < n; ++i) {
      const int start = static_cast<int>(rng.next_u64() % n);
      const int deg = 1 + static_cast<int>(rng.next_u64() % 2);
      for (int d = 0; d < deg; ++d) {
        s.col_idx.push_back((start + d * 2) % n);
        s.vals.push_back(rng.uniform(-1.0, 1.0));
      }
      s.row_ptr.push_back(static_cast<int>(s.col_idx.size()));
    }
    Tensor x = random_tensor(rng, n, 3, true);
    Tensor probe = random_tensor(rng, n, 3, false);
    double err = max_relative_error({x}, [&](Tape& t, std::vector<Tensor>& in) {
      return probed_sum(t, spmm(t, s, in[0]), probe);
    });
    REQUIRE(err < 1e-6);
  }
}

TEST_CASE("dropout gradient matches finite differences with a fixed stream") {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Rng rng(800 + seed);
    Tensor a = random_tensor(rng, 3, 4, true);
    Tensor probe = random_tensor(rng, 3, 4, false);
    double err = max_relative_error({a}, [&](Tape& t, std::vector<Tensor>& in) {
      Rng local(42 + seed);  // identical mask for every evaluation
      return probed_sum(t, dropout(t, in[0], 0.3, true, local), probe);
    });
    REQUIRE(err < 1e-6);
  }
}

TEST_CASE("reshape gradient matches finite differences") {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Rng rng(900 + seed);
    Tensor a = random_tensor(rng, 3, 4, true);
    Tensor probe = random_tensor(rng, 2, 6, false);
    double err = max_relative_error({a}, [&](Tape& t, std::vector<Tensor>& in) {
      return probed_sum(t, reshape(t, in[0], 2, 6), probe);
    });
    REQUIRE(err < 1e-6);
  }
}

TEST_CASE("a composite chain differentiates end to end") {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Rng rng(1000 + seed);
    Tensor x = random_offset_tensor(rng, 4, 3, true);
    Tensor w = random_tensor(rng, 3, 5, true);
    Tensor bias = random_tensor(rng, 1, 5, true);
    SparseMatrix s;
    s.rows = 4;
    s.cols = 4;
    s.row_ptr = {0, 1, 2, 3, 4};
    s.col_idx = {1, 0, 3, 2};
    s.vals = {0.5, 0.5, 0.7, 0.7};
    std::vector<int> gather = {0, 2, 1, 3, 2};
    std::vector<int> targets = {1, 1, 0, 3, 2};
    double err = max_relative_error({x, w, bias}, [&](Tape& t, std::vector<Tensor>& in) {
      Tensor h = relu(t, add(t, matmul(t, in[0], in[1]), in[2]));
      Tensor mixed = spmm(t, s, h);
      Tensor msgs = index_select(t, mixed, gather);
      Tensor agg = scatter_add(t, msgs, targets, 4);
      Tensor sq = square(t, slice_cols(t, agg, 1, 4));
      return mean(t, sq);
    });
    REQUIRE(err < 1e-4);
  }
}

TEST_CASE("dropout semantics") {
  Rng rng(7);
  Tensor a = Tensor::from(2, 3, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  Tape tape;
  SECTION("identity when not training") {
    Tensor out = dropout(tape, a, 0.5, false, rng);
    REQUIRE(out.values() == a.values());
  }
  SECTION("identity at p = 0") {
    Tensor out = dropout(tape, a, 0.0, true, rng);
    REQUIRE(out.values() == a.values());
  }
  SECTION("kept entries are scaled by 1/(1-p)") {
    Tensor out = dropout(tape, a, 0.5, true, rng);
    for (std::size_t k = 0; k < out.size(); ++k) {
      const bool dropped = out.data()[k] == 0.0;
      if (!dropped) REQUIRE_THAT(out.data()[k], WithinAbs(a.data()[k] * 2.0, 1e-12));
    }
  }
  SECTION("expected activation scale is preserved") {
    Rng wide(11);
    Tensor big = Tensor::zeros(100, 100);
    for (std::size_t k = 0; k < big.size(); ++k) big.data()[k] = 1.0;
    Tensor out = dropout(tape, big, 0.3, true, wide);
    double total = 0.0;
    for (std::size_t k = 0; k < out.size(); ++k) total += out.data()[k];
    REQUIRE_THAT(total / static_cast<double>(out.size()), WithinAbs(1.0, 0.02));
  }
  SECTION("invalid probability is rejected") {
    REQUIRE_THROWS_AS(dropout(tape, a, 1.0, true, rng), ValidationError);
    REQUIRE_THROWS_AS(dropout(tape, a, -0.1, true, rng), ValidationError);
  }
  SECTION("equal seeds give bitwise-equal masks") {
    Rng r1(99), r2(99);
    Tape t1, t2;
    Tensor o1 = dropout(t1, a, 0.4, true, r1);
    Tensor o2 = dropout(t2, a, 0.4, true, r2);
    REQUIRE(o1.values() == o2.values());
  }
}

TEST_CASE("AdamW update rule") {
  SECTION("first step with unit gradient moves by about lr") {
    std::vector<Tensor> params = {Tensor::from(1, 1, {1.0}, true)};
    params[0].grad()[0] = 1.0;
    AdamW opt;
    opt.weight_decay = 0.0;
    opt.init(params);
    opt.apply(params);
    REQUIRE_THAT(params[0].data()[0], WithinAbs(1.0 - opt.lr, 1e-6));
  }
  SECTION("zero gradient and zero decay is a fixed point") {
    std::vector<Tensor> params = {Tensor::from(1, 2, {0.5, -0.25}, true)};
    AdamW opt;
    opt.weight_decay = 0.0;
    opt.init(params);
    opt.apply(params);
    REQUIRE(params[0].data()[0] == 0.5);
    REQUIRE(params[0].data()[1] == -0.25);
  }
  SECTION("zero gradient with decay shrinks parameters") {
    std::vector<Tensor> params = {Tensor::from(1, 1, {2.0}, true)};
    AdamW opt;
    opt.weight_decay = 0.01;
    opt.init(params);
    opt.apply(params);
    REQUIRE_THAT(params[0].data()[0], WithinAbs(2.0 * (1.0 - opt.lr * opt.weight_decay), 1e-12));
  }
}
