#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pfnet/error.hpp"
#include "pfnet/tensor.hpp"

namespace pfnet {

// AdamW with decoupled weight decay:
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m, v;

  void init(const std::vector<Tensor>& params) {
    step = 0;
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.size(), 0.0);
      v.emplace_back(p.size(), 0.0);
    }
  }

  void apply(std::vector<Tensor>& params) {
    if (m.size() != params.size()) throw ShapeError("optimizer state does not match parameter list");
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i];
      if (m[i].size() != p.size()) throw ShapeError("optimizer moment shape does not match parameter");
      double* w = p.data();
      const double* g = p.grad();
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[i][k] = beta1 * m[i][k] + (1.0 - beta1) * g[k];
        v[i][k] = beta2 * v[i][k] + (1.0 - beta2) * g[k] * g[k];
        const double m_hat = m[i][k] / bc1;
        const double v_hat = v[i][k] / bc2;
        w[k] -= lr * (m_hat / (std::sqrt(v_hat) + eps)) + lr * weight_decay * w[k];
      }
    }
  }
};

}  // namespace pfnet
