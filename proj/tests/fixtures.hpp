#pragma once

#include <sstream>
#include <string>

#include "fedsurv/eif/influence.hpp"
#include "fedsurv/nuisance/bundle.hpp"
#include "fedsurv/simbench/dgp.hpp"

namespace fedsurv::fixtures {

struct Fitted {
  Dataset data;
  FoldAssignment folds;
  NuisanceBundle bundle;
  InfluenceTable table;
};

inline Fitted fit_scenario(Scenario scenario, int K, std::size_t n0, std::size_t nk, std::uint64_t seed,
                           const TimeGrid& grid, bool pooled = true, std::size_t M = 2) {
  ScenarioSpec spec;
  spec.scenario = scenario;
  spec.K = K;
  spec.n0 = n0;
  spec.n_source = nk;
  Fitted f;
  f.data = gen_dataset(spec, seed);
  f.folds = make_folds(f.data, M, seed);
  BundleOptions opt;
  if (pooled) opt.sharing = Sharing::Pooled;
  f.bundle = build_nuisance_bundle(f.data, f.folds, grid, true, pooled, opt, seed);
  f.table = build_influence_table(f.data, f.bundle);
  return f;
}

}  // namespace fedsurv::fixtures
