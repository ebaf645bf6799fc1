// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "matq/checkpoint.hpp"
#include "matq/common.hpp"
#include "matq/harness.hpp"
#include "matq/slice.hpp"

namespace matq {

/// Parameter count and highest sliceable width of one layer.
struct LayerBudget {
  std::string name;
  std::int64_t params = 0;
  int max_bits = kMaxBits;
};

inline std::vector<LayerBudget> layer_budgets(const Checkpoint& ckpt) {
  std::vector<LayerBudget> out;
  for (const auto& l : ckpt.layers)
    out.push_back({l.name, static_cast<std::int64_t>(l.parameter_count()), ckpt.header.master_bits()});
  return out;
}

inline std::int64_t config_bits(const BitConfig& config, const std::vector<LayerBudget>& layers) {
  std::int64_t total = 0;
  for (const auto& l : layers) {
    const auto it = config.assignment.find(l.name);
    if (it == config.assignment.end()) throw Error("incomplete config: missing layer " + l.name);
    total += static_cast<std::int64_t>(it->second) * l.params;
  }
  return total;
}

/// Ladder levels usable by a layer, ascending.
inline std::vector<int> usable_levels(const std::vector<int>& ladder, int max_bits) {
  std::vector<int> out;
  for (int r : ladder)
    if (r <= max_bits) out.push_back(r);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.empty()) throw Error("ladder has no level at or below " + std::to_string(max_bits) + " bits");
  return out;
}

struct Stage {
  std::size_t survivors = 1;
  std::size_t tokens = 1;
  friend bool operator==(const Stage&, const Stage&) = default;
};

/// Survivors 16 -> 4 -> 1 on 2048 -> 16384 -> 131072 tokens, divided by `scale_down`.
inline std::vector<Stage> desk_stages(std::size_t scale_down = 128) {
  if (scale_down == 0) throw Error("scale_down must be positive");
  auto t = [&](std::size_t n) { return std::max<std::size_t>(1, n / scale_down); };
  return {{16, t(2048)}, {4, t(16384)}, {1, t(131072)}};
}

struct SearchParams {
  std::size_t generations = 100;
  std::size_t offspring = 64;
  std::vector<Stage> stages = desk_stages();
  std::size_t initial_candidates = 10;
  int max_mutation_retries = 10;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::vector<int> ladder = default_ladder();

  void validate() const {
    if (stages.empty()) throw Error("search: at least one selection stage required");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (stages[i].survivors == 0 || stages[i].tokens == 0) throw Error("search: stage sizes must be positive");
      if (i > 0 && stages[i].survivors > stages[i - 1].survivors)
        throw Error("search: survivors must be non-increasing across stages");
      if (i > 0 && stages[i].tokens < stages[i - 1].tokens)
        throw Error("search: tokens must be non-decreasing across stages");
    }
    if (stages.back().survivors != 1) throw Error("search: final stage must keep exactly one survivor");
    if (offspring == 0) throw Error("search: offspring must be positive");
    if (max_mutation_retries < 1) throw Error("search: max_mutation_retries must be positive");
    if (ladder.empty()) throw Error("search: empty ladder");
  }
};

struct MutationOutcome {
  BitConfig config;
  bool stagnant = false;
};

/// Level-switch mutation: one layer steps down a ladder level, then randomly
/// chosen other layers step up one level at a time while the freed
/// parameter-bits allow. Succeeds only when the freed bits are consumed exactly.
inline MutationOutcome mutate_level_switch(const BitConfig& config, const std::vector<LayerBudget>& layers, Rng& rng,
                                           int max_retries = 10) {
  if (layers.size() < 2) throw Error("mutation impossible: need at least two layers");
  std::vector<std::vector<int>> levels;
  for (const auto& l : layers) levels.push_back(usable_levels(config.ladder, l.max_bits));
  auto level_of = [&](std::size_t i, int bits) {
    const auto& lv = levels[i];
    const auto it = std::find(lv.begin(), lv.end(), bits);
    if (it == lv.end()) throw Error("layer " + layers[i].name + " bit-width " + std::to_string(bits) + " is off the ladder");
    return static_cast<std::size_t>(it - lv.begin());
  };
  std::vector<std::size_t> start(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto it = config.assignment.find(layers[i].name);
    if (it == config.assignment.end()) throw Error("incomplete config: missing layer " + layers[i].name);
    start[i] = level_of(i, it->second);
  }

  for (int attempt = 0; attempt < max_retries; ++attempt) {
    std::vector<std::size_t> down;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (start[i] > 0) down.push_back(i);
    if (down.empty()) break;
    std::vector<std::size_t> lvl = start;
    const std::size_t d = down[uniform_index(rng, down.size())];
    --lvl[d];
    std::int64_t freed = (levels[d][start[d]] - levels[d][lvl[d]]) * layers[d].params;
    while (freed > 0) {
      std::vector<std::size_t> up;
      for (std::size_t i = 0; i < layers.size(); ++i) {
        if (i == d || lvl[i] + 1 >= levels[i].size()) continue;
        if ((levels[i][lvl[i] + 1] - levels[i][lvl[i]]) * layers[i].params <= freed) up.push_back(i);
      }
      if (up.empty()) break;
      const std::size_t u = up[uniform_index(rng, up.size())];
      freed -= (levels[u][lvl[u] + 1] - levels[u][lvl[u]]) * layers[u].params;
      ++lvl[u];
    }
    if (freed == 0) {
      BitConfig out = config;
      for (std::size_t i = 0; i < layers.size(); ++i) out.assignment[layers[i].name] = levels[i][lvl[i]];
      return {std::move(out), false};
    }
  }
  return {config, true};
}

/// Uniformly random ladder level per layer subject to hitting `budget` exactly,
/// via reachability over parameter counts in units of their gcd.
inline std::optional<BitConfig> random_config_at_budget(const std::vector<LayerBudget>& layers,
                                                        const std::vector<int>& ladder, std::int64_t budget,
                                                        Rng& rng) {
  if (layers.empty()) throw Error("no layers");
  std::int64_t unit = 0;
  for (const auto& l : layers) unit = std::gcd(unit, l.params);
  if (unit == 0 || budget < 0 || budget % unit != 0) return std::nullopt;
  const std::int64_t target = budget / unit;
  if (target > 50'000'000) throw Error("budget too fine-grained for exact sampling");
  const std::size_t n = layers.size();
  std::vector<std::vector<int>> levels;
  for (const auto& l : layers) levels.push_back(usable_levels(ladder, l.max_bits));

  // reach[i][b]: layers i..n-1 can sum to exactly b units.
  std::vector<std::vector<char>> reach(n + 1, std::vector<char>(static_cast<std::size_t>(target) + 1, 0));
  reach[n][0] = 1;
  for (std::size_t i = n; i-- > 0;) {
    const std::int64_t p = layers[i].params / unit;
    for (std::int64_t b = 0; b <= target; ++b)
      for (int r : levels[i])
        if (r * p <= b && reach[i + 1][static_cast<std::size_t>(b - r * p)]) {
          reach[i][static_cast<std::size_t>(b)] = 1;
          break;
        }
  }
  if (!reach[0][static_cast<std::size_t>(target)]) return std::nullopt;

  BitConfig cfg;
  cfg.ladder = ladder;
  cfg.budget_bits = budget;
  std::int64_t left = target;
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t p = layers[i].params / unit;
    std::vector<int> options;
    for (int r : levels[i])
      if (r * p <= left && reach[i + 1][static_cast<std::size_t>(left - r * p)]) options.push_back(r);
    const int r = options[uniform_index(rng, options.size())];
    cfg.assignment[layers[i].name] = r;
    left -= r * p;
  }
  return cfg;
}

struct Candidate {
  BitConfig config;
  std::optional<double> fitness;
};

struct GenerationRecord {
  std::size_t generation = 0;
  double best_fitness = 0.0;
  BitConfig config;
};

struct SearchResult {
  Candidate best;
  std::vector<GenerationRecord> log;
  std::size_t stagnant_mutations = 0;
};

/// fitness(config, tokens): lower is better, evaluated on the first `tokens` samples.
using FitnessFn = std::function<double(const BitConfig&, std::size_t)>;

/// Evaluate configs[i] for every i, optionally across threads; results land by index.
inline std::vector<double> evaluate_all(const std::vector<const BitConfig*>& configs, std::size_t tokens,
                                        const FitnessFn& fitness, std::size_t threads) {
  std::vector<double> out(configs.size());
  const std::size_t t = std::max<std::size_t>(1, std::min(threads, configs.size()));
  if (t == 1) {
    for (std::size_t i = 0; i < configs.size(); ++i) out[i] = fitness(*configs[i], tokens);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(t);
  for (std::size_t w = 0; w < t; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < configs.size(); i += t) out[i] = fitness(*configs[i], tokens);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

/// Budget in parameter-bits for an average bit-width, checked against the ladder.
inline std::int64_t budget_for(const std::vector<LayerBudget>& layers, const std::vector<int>& ladder,
                               double avg_bits) {
  std::int64_t params = 0, lo = 0, hi = 0;
  for (const auto& l : layers) {
    const auto lv = usable_levels(ladder, l.max_bits);
    params += l.params;
    lo += lv.front() * l.params;
    hi += lv.back() * l.params;
  }
  const double exact = avg_bits * static_cast<double>(params);
  const auto budget = static_cast<std::int64_t>(std::llround(exact));
  if (!(exact >= static_cast<double>(lo) - 0.5) || !(exact <= static_cast<double>(hi) + 0.5))
    throw Error("infeasible budget: average " + std::to_string(avg_bits) + " bits is outside the ladder range [" +
                std::to_string(static_cast<double>(lo) / params) + ", " +
                std::to_string(static_cast<double>(hi) / params) + "]");
  return budget;
}

/// (1 + lambda) elitist search with staged selection. The parent is replaced only
/// on strict improvement at the final stage, so logged best fitness never rises.
inline SearchResult search(const std::vector<LayerBudget>& layers, double avg_bits, const SearchParams& params,
                           const FitnessFn& fitness) {
  params.validate();
  const std::int64_t budget = budget_for(layers, params.ladder, avg_bits);
  Rng rng(params.seed);
  const std::size_t final_tokens = params.stages.back().tokens;

  std::vector<BitConfig> init;
  for (std::size_t i = 0; i < params.initial_candidates; ++i) {
    auto c = random_config_at_budget(layers, params.ladder, budget, rng);
    if (!c) throw Error("infeasible budget: no configuration hits " + std::to_string(budget) + " parameter-bits");
    init.push_back(std::move(*c));
  }
  // Closest uniform configuration at or below the budget.
  std::optional<int> uniform_bits;
  for (int r : params.ladder) {
    bool ok = true;
    std::int64_t bits = 0;
    for (const auto& l : layers) {
      ok = ok && r <= l.max_bits;
      bits += r * l.params;
    }
    if (ok && bits <= budget && (!uniform_bits || r > *uniform_bits)) uniform_bits = r;
  }
  if (uniform_bits) {
    BitConfig u;
    u.ladder = params.ladder;
    for (const auto& l : layers) u.assignment[l.name] = *uniform_bits;
    u.budget_bits = config_bits(u, layers);
    init.push_back(std::move(u));
  }
  if (init.empty()) {
    auto c = random_config_at_budget(layers, params.ladder, budget, rng);
    if (!c) throw Error("infeasible budget: no configuration hits " + std::to_string(budget) + " parameter-bits");
    init.push_back(std::move(*c));
  }

  std::vector<const BitConfig*> ptrs;
  for (const auto& c : init) ptrs.push_back(&c);
  const auto init_fit = evaluate_all(ptrs, final_tokens, fitness, params.threads);
  std::size_t best = 0;
  for (std::size_t i = 1; i < init.size(); ++i)
    if (init_fit[i] < init_fit[best]) best = i;

  SearchResult res;
  res.best = {init[best], init_fit[best]};
  res.log.push_back({0, init_fit[best], init[best]});

  for (std::size_t gen = 1; gen <= params.generations; ++gen) {
    std::vector<BitConfig> kids;
    kids.reserve(params.offspring);
    for (std::size_t i = 0; i < params.offspring; ++i) {
      auto m = mutate_level_switch(res.best.config, layers, rng, params.max_mutation_retries);
      if (m.stagnant) ++res.stagnant_mutations;
      kids.push_back(std::move(m.config));
    }
    std::vector<std::size_t> pool(kids.size());
    std::iota(pool.begin(), pool.end(), 0);
    std::vector<double> fit;
    for (const auto& stage : params.stages) {
      ptrs.clear();
      for (std::size_t i : pool) ptrs.push_back(&kids[i]);
      fit = evaluate_all(ptrs, stage.tokens, fitness, params.threads);
      std::vector<std::size_t> order(pool.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return fit[a] < fit[b] || (fit[a] == fit[b] && pool[a] < pool[b]);
      });
      order.resize(std::min(stage.survivors, order.size()));
      std::vector<std::size_t> next;
      std::vector<double> next_fit;
      for (std::size_t o : order) {
        next.push_back(pool[o]);
        next_fit.push_back(fit[o]);
      }
      pool = std::move(next);
      fit = std::move(next_fit);
    }
    if (fit.front() < *res.best.fitness) res.best = {kids[pool.front()], fit.front()};
    res.log.push_back({gen, *res.best.fitness, res.best.config});
  }
  return res;
}

// ---------------------------------------------------------------------------
// KL fitness against the float toy model
// ---------------------------------------------------------------------------

/// Mean output KL of a sliced configuration on a fixed token subset. Dequantized
/// weights for every (layer, ladder level) are built up front, so calls are
/// read-only and safe to run concurrently.
class KlFitness {
 public:
  KlFitness(const ToyModel& model, const Checkpoint& ckpt, MatrixF tokens, const std::vector<int>& ladder)
      : model_(&model), tokens_(std::move(tokens)) {
    if (tokens_.rows() == 0) throw Error("fitness needs at least one token");
    const ForwardWeights fp = fp_forward_weights(model);
    head_t_ = fp.head;
    fp_logp_ = log_softmax(model_logits(tokens_, pointers(fp.layers), head_t_));
    for (std::size_t i = 0; i < model.layer_count(); ++i) {
      const NestedLayer& l = ckpt.layer(model.layer_names[i]);
      for (int r : usable_levels(ladder, l.bits.master()))
        cache_.emplace(std::pair{i, r}, transposed_f32(slice_layer(l, r).dequantize()));
    }
  }

  std::size_t token_count() const noexcept { return tokens_.rows(); }

  double operator()(const BitConfig& config, std::size_t tokens) const {
    const std::size_t n = std::min(std::max<std::size_t>(tokens, 1), tokens_.rows());
    std::vector<const MatrixF*> layers(model_->layer_count());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto it = config.assignment.find(model_->layer_names[i]);
      if (it == config.assignment.end()) throw Error("incomplete config: missing layer " + model_->layer_names[i]);
      const auto w = cache_.find({i, it->second});
      if (w == cache_.end())
        throw Error("layer " + model_->layer_names[i] + " has no slice at " + std::to_string(it->second) + " bits");
      layers[i] = &w->second;
    }
    MatrixF x(n, tokens_.cols());
    std::copy_n(tokens_.data(), n * tokens_.cols(), x.data());
    MatrixD logp(n, fp_logp_.cols());
    std::copy_n(fp_logp_.data(), n * fp_logp_.cols(), logp.data());
    return mean_kl(logp, log_softmax(model_logits(x, layers, head_t_)));
  }

 private:
  const ToyModel* model_;
  MatrixF tokens_;
  MatrixF head_t_;
  MatrixD fp_logp_;
  std::map<std::pair<std::size_t, int>, MatrixF> cache_;
};

inline double fitness_kl(const ToyModel& fp_model, const BitConfig& config, const Checkpoint& ckpt,
                         const MatrixF& tokens) {
  std::vector<int> ladder;
  for (const auto& [name, r] : config.assignment) ladder.push_back(r);
  return KlFitness(fp_model, ckpt, tokens, ladder)(config, tokens.rows());
}

inline nlohmann::json config_to_json(const BitConfig& config) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, r] : config.assignment) j[name] = r;
  return j;
}

inline void write_search_log(std::ostream& os, const SearchResult& res) {
  for (const auto& g : res.log) {
    nlohmann::json rec{{"generation", g.generation}, {"best_fitness", g.best_fitness}, {"config", config_to_json(g.config)}};
    os << rec.dump() << '\n';
  }
}

}  // namespace matq
