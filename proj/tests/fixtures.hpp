#pragma once

#include <vector>

#include "cohesion/cohesion.hpp"

namespace fixtures {

// Small random instance: every user has at least one item and at least one
// non-interacted item; feature matrices are standard normal.
struct Tiny {
  cohesion::InteractionTable train;
  std::vector<cohesion::FeatureMatrix> features;
  cohesion::GraphInputs inputs;
  cohesion::ModelParams params;
};

inline Tiny make_tiny(std::size_t nu, std::size_t ni, const cohesion::ModelConfig& cfg,
                      std::vector<std::size_t> feat_dims, std::uint64_t seed, double edge_prob = 0.5) {
  using namespace cohesion;
  Rng rng(seed);
  Tiny t;
  for (std::size_t u = 0; u < nu; ++u) t.train.users.intern("u" + std::to_string(u));
  for (std::size_t i = 0; i < ni; ++i) t.train.items.intern("i" + std::to_string(i));
  for (Index u = 0; u < nu; ++u) {
    const auto forced = static_cast<Index>(uniform_index(rng, ni));
    std::size_t deg = 0;
    for (Index i = 0; i < ni; ++i) {
      const bool take = i == forced || uniform01(rng) < edge_prob;
      if (take && deg + 1 < ni) {
        t.train.pairs.push_back({u, i});
        ++deg;
      }
    }
  }
  const Modality kinds[] = {Modality::textual, Modality::visual};
  for (std::size_t m = 0; m < feat_dims.size(); ++m) {
    Matrix x(ni, feat_dims[m]);
    for (double& v : x.values()) v = standard_normal(rng);
    t.features.push_back({kinds[m % 2], std::move(x)});
  }
  t.inputs = make_inputs(t.train, t.features);
  t.params = init_params(nu, ni, t.features, cfg, rng);
  // Nonzero biases and logits so their gradients are exercised.
  for (auto& mlp : t.params.mlp) {
    for (double& v : mlp.b_in.values()) v = 0.1 * standard_normal(rng);
    for (double& v : mlp.b_out.values()) v = 0.1 * standard_normal(rng);
  }
  for (double& v : t.params.fusion_logits.values()) v = 0.3 * standard_normal(rng);
  return t;
}

}  // namespace fixtures
