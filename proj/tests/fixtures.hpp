#pragma once

// A small model pretrained briefly on a synthetic world, shared by the eval,
// loop and pipeline tests. Built once per test binary.

#include "au/corpus.hpp"
#include "au/model.hpp"
#include "au/pretrain.hpp"

namespace au::testing {

inline model::ModelConfig small_config() {
  model::ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.width = 32;
  c.mlp_mult = 2;
  return c;
}

struct TrainedFixture {
  corpus::World world;
  model::Parameters<double> base;
  std::vector<corpus::CorpusDocument> utility;
};

inline const TrainedFixture& trained_fixture() {
  static const TrainedFixture f = [] {
    TrainedFixture t;
    t.world = corpus::build_world(3);
    const auto train = corpus::generate_pretraining_corpus(t.world, 2000, 0.25, derive_seed(3, 1));
    const auto held = corpus::generate_pretraining_corpus(t.world, 50, 0.25, derive_seed(3, 2));
    pretrain::PretrainSettings s;
    s.lr = 3e-3;
    s.max_steps = 500;
    s.eval_every = 500;
    t.base = pretrain::train_base<double>(small_config(), 3, train, held, s).params;
    t.utility = corpus::split_utility_corpus(t.world, 60, derive_seed(3, 3));
    return t;
  }();
  return f;
}

}  // namespace au::testing
