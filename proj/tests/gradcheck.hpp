#pragma once

// Finite-difference checks of loss gradients composed through whole encoders
// (affine + tanh layers, head, output normalization). Shared by the unit
// tests and the acceptance binary.

#include <algorithm>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "cona/encoder.hpp"
#include "cona/losses.hpp"
#include "cona/numerics.hpp"
#include "oracles.hpp"

namespace gradcheck {

enum class LossUnderTest { InfoNCE, FD, SD, KL };

inline const char* name(LossUnderTest l) {
  switch (l) {
    case LossUnderTest::InfoNCE: return "InfoNCE";
    case LossUnderTest::FD: return "FD";
    case LossUnderTest::SD: return "SD";
    case LossUnderTest::KL: return "KL-Div";
  }
  return "?";
}

inline void PrintTo(LossUnderTest l, std::ostream* os) { *os << name(l); }

struct Net {
  cona::EncoderSpec spec;
  cona::EncoderParams params;
  cona::Matrix input;
};

inline cona::LossValue apply(LossUnderTest which, const std::vector<cona::EmbeddingBatch>& e,
                             double tau, cona::KlDirection dir) {
  switch (which) {
    case LossUnderTest::InfoNCE: return cona::infonce(e[0], e[1], tau);
    case LossUnderTest::FD: return cona::feature_distance(e[0], e[1]);
    case LossUnderTest::SD: return cona::similarity_distance(e[0], e[1], e[2], e[3]);
    case LossUnderTest::KL: return cona::kl_div(e[0], e[1], e[2], e[3], tau, dir);
  }
  return {};
}

struct Result {
  double max_rel_err = 0.0;
  std::string worst;  // which tensor
};

/// One seeded instance: every argument slot comes from its own small encoder;
/// each parameter tensor and each input matrix is checked.
inline Result check_instance(LossUnderTest which, std::uint64_t seed,
                             cona::KlDirection dir = cona::KlDirection::Forward) {
  std::mt19937_64 rng(seed);
  const std::size_t n = 2 + seed % 7;          // 2..8
  const std::size_t d = 3 + (seed / 7) % 8;    // 3..10
  const std::size_t dt = which == LossUnderTest::SD ? 2 + seed % 5 : d;
  const double taus[] = {0.07, 0.25, 1.0};
  const double tau = taus[seed % 3];
  const std::size_t slots =
      which == LossUnderTest::InfoNCE || which == LossUnderTest::FD ? 2 : 4;

  std::vector<Net> nets;
  for (std::size_t s = 0; s < slots; ++s) {
    cona::EncoderSpec spec{4, 5, 1 + s % 2, s < 2 ? d : dt};
    nets.push_back({spec, cona::init_params(spec, rng), oracle::gaussian(n, 4, rng)});
  }

  auto value_of = [&](const std::vector<Net>& ns) {
    std::vector<cona::EmbeddingBatch> e;
    for (const Net& net : ns) e.push_back(cona::forward(net.params, net.spec, net.input));
    return apply(which, e, tau, dir).value;
  };

  std::vector<cona::ForwardCache> caches;
  std::vector<cona::EmbeddingBatch> e;
  for (const Net& net : nets) {
    caches.push_back(cona::forward_cached(net.params, net.spec, net.input));
    e.emplace_back(caches.back().embedding);
  }
  const cona::LossValue lv = apply(which, e, tau, dir);

  Result worst;
  auto consider = [&](const cona::Matrix& analytic, const cona::Matrix& numeric,
                      const std::string& label) {
    const double err = cona::compare_gradients(analytic, numeric).max_rel_err;
    if (err >= worst.max_rel_err) worst = {err, label};
  };
  for (std::size_t s = 0; s < slots; ++s) {
    const cona::EncoderGrads g =
        cona::backward(nets[s].params, nets[s].spec, caches[s], *lv.grads[s]);
    const auto analytic = g.tensors();
    for (std::size_t t = 0; t < analytic.size(); ++t) {
      auto f = [&](const cona::Matrix& m) {
        std::vector<Net> copy = nets;
        *copy[s].params.tensors()[t] = m;
        return value_of(copy);
      };
      consider(*analytic[t], cona::finite_diff_grad(f, *nets[s].params.tensors()[t]),
               "slot " + std::to_string(s) + " tensor " + std::to_string(t));
    }
    auto fin = [&](const cona::Matrix& m) {
      std::vector<Net> copy = nets;
      copy[s].input = m;
      return value_of(copy);
    };
    consider(g.input, cona::finite_diff_grad(fin, nets[s].input),
             "slot " + std::to_string(s) + " input");
  }
  return worst;
}

}  // namespace gradcheck
