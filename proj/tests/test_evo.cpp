// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "matq/evo.hpp"
#include "toy_fixture.hpp"

using namespace matq;

namespace {

std::vector<LayerBudget> equal_layers(std::size_t n, std::int64_t params = 100) {
  std::vector<LayerBudget> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({"l" + std::to_string(i), params, kMaxBits});
  return out;
}

BitConfig make_config(const std::vector<LayerBudget>& layers, const std::vector<int>& bits, std::vector<int> ladder) {
  BitConfig c;
  c.ladder = std::move(ladder);
  for (std::size_t i = 0; i < layers.size(); ++i) c.assignment[layers[i].name] = bits[i];
  c.budget_bits = config_bits(c, layers);
  return c;
}

// Toy fitness: each layer has a sensitivity, error falls off as 2^-bits. Noise-free and
// deterministic, so the search outcome depends only on the seed.
FitnessFn sensitivity_fitness(const std::vector<LayerBudget>& layers, std::vector<double> sens) {
  return [layers, sens](const BitConfig& c, std::size_t) {
    double f = 0.0;
    for (std::size_t i = 0; i < layers.size(); ++i) f += sens[i] * std::ldexp(1.0, -2 * c.assignment.at(layers[i].name));
    return f;
  };
}

SearchParams quick_params(std::uint64_t seed, std::size_t generations = 20) {
  SearchParams p;
  p.generations = generations;
  p.offspring = 16;
  p.stages = {{4, 8}, {1, 32}};
  p.seed = seed;
  return p;
}

}  // namespace

TEST(Mutation, TwoEqualLayersAtThreeThree) {
  const auto layers = equal_layers(2);
  const BitConfig start = make_config(layers, {3, 3}, {2, 3, 4});
  std::set<std::pair<int, int>> seen;
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto m = mutate_level_switch(start, layers, rng);
    ASSERT_FALSE(m.stagnant);
    seen.insert({m.config.assignment.at("l0"), m.config.assignment.at("l1")});
  }
  EXPECT_EQ(seen, (std::set<std::pair<int, int>>{{2, 4}, {4, 2}}));
}

TEST(Mutation, ConservesBudgetOverThousandSteps) {
  // Mixed layer sizes: unequal layers force multi-layer compensation.
  std::vector<LayerBudget> layers = equal_layers(8);
  layers[1].params = 200;
  layers[4].params = 300;
  layers[6].params = 200;
  const std::vector<int> ladder{2, 3, 4, 6, 8};
  BitConfig cfg = make_config(layers, {4, 3, 4, 4, 3, 4, 4, 3}, ladder);
  const std::int64_t budget = cfg.budget_bits;
  Rng rng(7);
  std::set<std::map<std::string, int>> distinct;
  std::size_t stagnant = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto m = mutate_level_switch(cfg, layers, rng);
    ASSERT_EQ(config_bits(m.config, layers), budget) << "mutation " << i;
    for (const auto& [name, r] : m.config.assignment)
      ASSERT_TRUE(std::find(ladder.begin(), ladder.end(), r) != ladder.end());
    if (m.stagnant) {
      ++stagnant;
      EXPECT_EQ(m.config, cfg);
    }
    distinct.insert(m.config.assignment);
    cfg = m.config;
  }
  EXPECT_GE(distinct.size(), 2u);
  EXPECT_LT(stagnant, 1000u);
}

TEST(Mutation, StagnatesWhenNoMoveExists) {
  // All layers at the lowest level: nothing can step down.
  const auto layers = equal_layers(3);
  const BitConfig start = make_config(layers, {2, 2, 2}, {2, 3, 4});
  Rng rng(3);
  const auto m = mutate_level_switch(start, layers, rng, 4);
  EXPECT_TRUE(m.stagnant);
  EXPECT_EQ(m.config, start);
}

TEST(Mutation, SingleLayerIsImpossible) {
  const auto layers = equal_layers(1);
  Rng rng(0);
  try {
    mutate_level_switch(make_config(layers, {3}, {2, 3, 4}), layers, rng);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("mutation impossible"), std::string::npos);
  }
}

TEST(RandomConfig, HitsBudgetExactly) {
  std::vector<LayerBudget> layers = equal_layers(6);
  layers[2].params = 300;
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const auto c = random_config_at_budget(layers, {2, 3, 4, 6, 8}, 3 * 800, rng);
    ASSERT_TRUE(c.has_value());
    EXPECT_EQ(config_bits(*c, layers), 2400);
  }
  EXPECT_FALSE(random_config_at_budget(layers, {2, 3, 4}, 2 * 800 - 100, rng).has_value());
}

TEST(Search, InfeasibleBudget) {
  const auto layers = equal_layers(4);
  const auto fit = sensitivity_fitness(layers, {1, 1, 1, 1});
  SearchParams p = quick_params(0);
  p.ladder = {2, 3, 4};
  EXPECT_THROW(search(layers, 1.5, p, fit), Error);
  EXPECT_THROW(search(layers, 4.5, p, fit), Error);
  EXPECT_NO_THROW(search(layers, 4.0, p, fit));
}

TEST(Search, ParamsValidation) {
  SearchParams p;
  p.stages = {{4, 8}, {8, 16}, {1, 32}};
  EXPECT_THROW(p.validate(), Error);
  p.stages = {{4, 16}, {1, 8}};
  EXPECT_THROW(p.validate(), Error);
  p.stages = {{4, 8}, {2, 16}};
  EXPECT_THROW(p.validate(), Error);
  EXPECT_EQ(desk_stages(128), (std::vector<Stage>{{16, 16}, {4, 128}, {1, 1024}}));
  EXPECT_NO_THROW(SearchParams{}.validate());
}

TEST(Search, ElitismAndLogShape) {
  const auto layers = equal_layers(8);
  const auto fit = sensitivity_fitness(layers, {1, 50, 1, 2, 1, 1, 9, 1});
  const SearchResult r = search(layers, 3.0, quick_params(5, 30), fit);
  ASSERT_EQ(r.log.size(), 31u);
  for (std::size_t g = 1; g < r.log.size(); ++g) {
    EXPECT_EQ(r.log[g].generation, g);
    EXPECT_LE(r.log[g].best_fitness, r.log[g - 1].best_fitness);
  }
  EXPECT_EQ(config_bits(r.best.config, layers), 3 * 800);
  EXPECT_EQ(*r.best.fitness, r.log.back().best_fitness);
  // The uniform-3 seed is in the initial population, so the result is no worse.
  EXPECT_LE(*r.best.fitness, fit(make_config(layers, std::vector<int>(8, 3), default_ladder()), 0));
  // The most sensitive layer ends at or above the median.
  EXPECT_GE(r.best.config.assignment.at("l1"), 3);

  std::ostringstream os;
  write_search_log(os, r);
  std::istringstream is(os.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("generation").get<std::size_t>(), n);
    EXPECT_EQ(j.at("config").size(), 8u);
    ++n;
  }
  EXPECT_EQ(n, r.log.size());
}

TEST(Search, BestAtMaxBudgetIsUniformMax) {
  const auto layers = equal_layers(4);
  SearchParams p = quick_params(2, 5);
  p.ladder = {2, 3, 4};
  const SearchResult r = search(layers, 4.0, p, sensitivity_fitness(layers, {1, 2, 3, 4}));
  for (const auto& [name, bits] : r.best.config.assignment) EXPECT_EQ(bits, 4);
}

TEST(Search, DeterministicAcrossThreadCounts) {
  const auto layers = equal_layers(6);
  const auto fit = sensitivity_fitness(layers, {3, 1, 4, 1, 5, 9});
  SearchParams p = quick_params(9, 15);
  const SearchResult a = search(layers, 3.0, p, fit);
  p.threads = 4;
  const SearchResult b = search(layers, 3.0, p, fit);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].best_fitness, b.log[i].best_fitness);
    EXPECT_EQ(a.log[i].config, b.log[i].config);
  }
  EXPECT_EQ(a.stagnant_mutations, b.stagnant_mutations);
}

TEST(Search, ThreadedEvaluationPropagatesErrors) {
  const auto layers = equal_layers(4);
  SearchParams p = quick_params(1, 2);
  p.threads = 3;
  const FitnessFn bad = [](const BitConfig&, std::size_t) -> double { throw Error("boom"); };
  EXPECT_THROW(search(layers, 3.0, p, bad), Error);
}

TEST(FitnessKl, SelfDivergenceIsZero) {
  const auto& toy = testing_toy::small_toy(0);
  // A float model whose weights are the 8-bit reconstruction: slicing at 8 reproduces it exactly.
  ToyModel twin = toy.model;
  for (std::size_t i = 0; i < twin.layer_count(); ++i)
    twin.weights[i] = slice_layer(toy.ckpt.layer(twin.layer_names[i]), 8).dequantize();
  const KlFitness fit(twin, toy.ckpt, toy.calib.heldout, {2, 3, 4, 8});
  EXPECT_EQ(fit(uniform_config(toy.ckpt.layers, 8), toy.calib.heldout.rows()), 0.0);
  EXPECT_GT(fit(uniform_config(toy.ckpt.layers, 3), toy.calib.heldout.rows()), 0.0);
  EXPECT_EQ(eval_kl(toy.model, toy.ckpt, kFloatBits, toy.calib.heldout), 0.0);
}

TEST(FitnessKl, MatchesEvalKl) {
  const auto& toy = testing_toy::small_toy(0);
  const BitConfig u4 = uniform_config(toy.ckpt.layers, 4);
  EXPECT_NEAR(fitness_kl(toy.model, u4, toy.ckpt, toy.calib.heldout),
              eval_kl(toy.model, toy.ckpt, 4, toy.calib.heldout), 1e-12);
}

TEST(FitnessKl, ThreadSafeAndPrefixBased) {
  const auto& toy = testing_toy::small_toy(0);
  const KlFitness fit(toy.model, toy.ckpt, toy.calib.heldout, {2, 3, 4});
  const BitConfig u3 = uniform_config(toy.ckpt.layers, 3);
  const double serial = fit(u3, 16);
  std::vector<const BitConfig*> many(12, &u3);
  for (double v : evaluate_all(many, 16, std::cref(fit), 4)) EXPECT_EQ(v, serial);
  EXPECT_NE(fit(u3, 16), fit(u3, 128));
  BitConfig missing = u3;
  missing.assignment.erase(missing.assignment.begin());
  EXPECT_THROW(fit(missing, 4), Error);
}

TEST(FitnessKl, TwoBitsWorseThanThreeOnMostSeeds) {
  int holds = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto& toy = testing_toy::small_toy(seed);
    const KlFitness fit(toy.model, toy.ckpt, toy.calib.heldout, {2, 3});
    holds += fit(uniform_config(toy.ckpt.layers, 2), 128) >= fit(uniform_config(toy.ckpt.layers, 3), 128);
  }
  EXPECT_GE(holds, 9);
}

TEST(Budgets, FromCheckpoint) {
  const auto& toy = testing_toy::small_toy(0);
  const auto b = layer_budgets(toy.ckpt);
  ASSERT_EQ(b.size(), toy.ckpt.layers.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(b[i].name, toy.ckpt.layers[i].name);
    EXPECT_EQ(b[i].params, toy.ckpt.layers[i].parameter_count());
    EXPECT_EQ(b[i].max_bits, 8);
  }
  EXPECT_EQ(usable_levels({2, 3, 4, 6, 8}, 4), (std::vector<int>{2, 3, 4}));
  EXPECT_THROW(usable_levels({6, 8}, 4), Error);
}
