#pragma once

// Test oracles: central-difference gradient checking and brute-force
// reference implementations.

#include "acestep/autodiff.hpp"
#include "acestep/params.hpp"

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace acestep::testing {

struct GradCheckReport {
  bool ok = true;
  std::size_t checked = 0;
  double worst = 0.0;
  std::string first_failure;
};

// Compares tape gradients of loss(tape) against central differences for every
// trainable entry of `store`. Tensors larger than `full_limit` scalars are
// checked on `sample` seeded positions. A scalar passes when
// |analytic - numeric| <= rel * max(|analytic|, |numeric|) + abs_floor.
inline GradCheckReport gradcheck(ParamStore<double>& store, const std::function<Var<double>(Tape<double>&)>& loss,
                                 double rel = 1e-3, double step = 1e-6, double abs_floor = 1e-8,
                                 std::size_t full_limit = 512, std::size_t sample = 48) {
  Tape<double> tape;
  Var<double> root = loss(tape);
  tape.backward(root);
  const auto grads = collect_grads(tape, store);

  GradCheckReport rep;
  std::size_t idx = 0;
  Rng rng(0x9c);
  for (auto& e : store) {
    const Matrix<double>& g = grads[idx++];
    if (!e.trainable) continue;
    std::vector<Index> positions;
    if (static_cast<std::size_t>(e.value.size()) <= full_limit) {
      for (Index i = 0; i < e.value.size(); ++i) positions.push_back(i);
    } else {
      for (std::size_t s = 0; s < sample; ++s) positions.push_back(static_cast<Index>(rng.next_u64() % e.value.size()));
    }
    for (Index i : positions) {
      double& x = e.value.data()[i];
      const double saved = x;
      x = saved + step;
      Tape<double> tp(false);
      const double up = loss(tp).value()(0, 0);
      x = saved - step;
      Tape<double> tm(false);
      const double down = loss(tm).value()(0, 0);
      x = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = g.data()[i];
      const double err = std::abs(analytic - numeric);
      const double bound = rel * std::max(std::abs(analytic), std::abs(numeric)) + abs_floor;
      ++rep.checked;
      const double scaled = err / std::max(bound, 1e-300);
      rep.worst = std::max(rep.worst, scaled);
      if (err > bound && rep.ok) {
        rep.ok = false;
        std::ostringstream os;
        os << e.name << "[" << i << "]: analytic " << analytic << " numeric " << numeric;
        rep.first_failure = os.str();
      }
    }
  }
  return rep;
}

// Softmax attention by explicit loops, one head.
inline Matrix<double> brute_linear_attention(const Matrix<double>& q, const Matrix<double>& k, const Matrix<double>& v,
                                             double eps) {
  auto phi = [](double a) { return a > 0 ? a + 1 : std::exp(a); };
  Matrix<double> out = Matrix<double>::Zero(q.rows(), v.cols());
  for (Index i = 0; i < q.rows(); ++i) {
    double den = 0.0;
    std::vector<double> num(static_cast<std::size_t>(v.cols()), 0.0);
    for (Index j = 0; j < k.rows(); ++j) {
      double s = 0.0;
      for (Index d = 0; d < q.cols(); ++d) s += phi(q(i, d)) * phi(k(j, d));
      den += s;
      for (Index c = 0; c < v.cols(); ++c) num[static_cast<std::size_t>(c)] += s * v(j, c);
    }
    for (Index c = 0; c < v.cols(); ++c) out(i, c) = num[static_cast<std::size_t>(c)] / (den + eps);
  }
  return out;
}

}  // namespace acestep::testing
