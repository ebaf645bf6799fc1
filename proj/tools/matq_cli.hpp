// SPDX-License-Identifier: Apache-2.0
// Command-line front end. `run` is separate from main() so tests can drive it
// in-process and inspect stdout, stderr and the exit code.
#pragma once

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "matq/matq.hpp"

namespace matq::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Bad arguments detected after parsing; maps to exit code 2.
struct UsageError : Error {
  using Error::Error;
};

inline BitConfig read_config_json(const std::string& path, const std::vector<int>& ladder = default_ladder()) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw Error("config must be a JSON object mapping layer names to bits");
  BitConfig cfg;
  cfg.ladder = ladder;
  for (const auto& [name, v] : j.items()) {
    if (!v.is_number_integer()) throw Error("config entry for " + name + " is not an integer");
    cfg.assignment[name] = v.get<int>();
  }
  return cfg;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("write failed: " + path);
}

struct ModelContext {
  ToyModel model;
  CalibSet calib;
};

inline ModelContext load_context(const CheckpointHeader& h, const std::string& model_override,
                                 const std::string& calib_override) {
  ToyModel model = make_toy_model(parse_model_tag(model_override.empty() ? h.model_tag : model_override));
  CalibSet calib = load_calib(calib_override.empty() ? h.calib_tag : calib_override, model.config.dim);
  return {std::move(model), std::move(calib)};
}

inline nlohmann::json bench_json(const BenchReport& r) {
  return {{"m", r.m},
          {"k", r.k},
          {"batch", r.batch},
          {"bits", r.bits},
          {"reps", r.reps},
          {"median_ns", r.median_ns},
          {"dense_median_ns", r.dense_median_ns},
          {"weight_bytes", r.weight_bytes},
          {"bytes_moved", r.bytes_moved},
          {"gbps", r.gbps},
          {"speedup", r.speedup}};
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Nested multi-precision post-training quantization"};
  app.require_subcommand(1);

  // quantize
  auto* q = app.add_subcommand("quantize", "quantize the toy model into a nested checkpoint");
  std::string q_model = "toy:0", q_calib = "synthetic:0", q_out;
  std::vector<int> q_bits{3, 4, 8};
  std::vector<double> q_lambda;
  std::size_t q_group = 128, q_block = 128;
  double q_damp = 0.01;
  q->add_option("--model", q_model, "toy:<seed>[:plant=<layer>]")->capture_default_str();
  q->add_option("--calib", q_calib, "synthetic:<seed> or a raw activation file")->capture_default_str();
  q->add_option("--bits", q_bits, "target bit-widths")->delimiter(',')->capture_default_str();
  q->add_option("--lambda", q_lambda, "per-target weights (default all 1)")->delimiter(',');
  q->add_option("--group-size", q_group)->capture_default_str();
  q->add_option("--damp", q_damp)->capture_default_str();
  q->add_option("--block", q_block)->capture_default_str();
  q->add_option("--out", q_out)->required();

  // slice
  auto* s = app.add_subcommand("slice", "slice a checkpoint to one bit-width or a per-layer config");
  std::string s_ckpt, s_config, s_out;
  std::optional<int> s_bits;
  s->add_option("--ckpt", s_ckpt)->required();
  auto* s_bits_opt = s->add_option("--bits", s_bits);
  auto* s_cfg_opt = s->add_option("--config", s_config);
  s_bits_opt->excludes(s_cfg_opt);
  s->add_option("--out", s_out)->required();

  // search
  auto* se = app.add_subcommand("search", "evolutionary per-layer bit-width search");
  std::string se_ckpt, se_out, se_log, se_model, se_calib;
  double se_avg = 3.0;
  SearchParams sp;
  std::size_t se_scale = 128;
  se->add_option("--ckpt", se_ckpt)->required();
  se->add_option("--avg-bits", se_avg)->capture_default_str();
  se->add_option("--generations", sp.generations)->capture_default_str();
  se->add_option("--offspring", sp.offspring)->capture_default_str();
  se->add_option("--seed", sp.seed)->capture_default_str();
  se->add_option("--threads", sp.threads)->capture_default_str();
  se->add_option("--ladder", sp.ladder)->delimiter(',');
  se->add_option("--scale-down", se_scale, "divide the selection-stage token counts")->capture_default_str();
  se->add_option("--initial", sp.initial_candidates)->capture_default_str();
  se->add_option("--retries", sp.max_mutation_retries)->capture_default_str();
  se->add_option("--model", se_model, "override the checkpoint's model tag");
  se->add_option("--calib", se_calib, "override the checkpoint's calibration source");
  se->add_option("--out", se_out)->required();
  se->add_option("--log", se_log, "JSON-lines generation log");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint or sliced model");
  std::string ev_ckpt, ev_config, ev_metric = "kl", ev_model, ev_calib, ev_out;
  std::vector<int> ev_bits;
  ev->add_option("--ckpt", ev_ckpt)->required();
  auto* ev_bits_opt = ev->add_option("--bits", ev_bits)->delimiter(',');
  auto* ev_cfg_opt = ev->add_option("--config", ev_config);
  ev_bits_opt->excludes(ev_cfg_opt);
  ev->add_option("--metric", ev_metric)->check(CLI::IsMember({"kl", "recon"}))->capture_default_str();
  ev->add_option("--model", ev_model);
  ev->add_option("--calib", ev_calib);
  ev->add_option("--out", ev_out, "write the result here instead of stdout");

  // bench
  auto* b = app.add_subcommand("bench", "packed matmul benchmark");
  std::size_t b_m = 4096, b_k = 4096, b_batch = 1;
  int b_bits = 4, b_reps = 5;
  std::uint64_t b_seed = 0;
  b->add_option("--m", b_m)->capture_default_str();
  b->add_option("--k", b_k)->capture_default_str();
  b->add_option("--batch", b_batch)->capture_default_str();
  b->add_option("--bits", b_bits)->capture_default_str();
  b->add_option("--reps", b_reps)->capture_default_str();
  b->add_option("--seed", b_seed)->capture_default_str();

  // routing
  auto* ro = app.add_subcommand("routing", "per-token best block configuration analysis");
  std::string ro_ckpt, ro_out, ro_hist, ro_model, ro_calib;
  std::size_t ro_block = 0, ro_tokens = 512;
  ro->add_option("--ckpt", ro_ckpt)->required();
  ro->add_option("--block", ro_block)->capture_default_str();
  ro->add_option("--tokens", ro_tokens)->capture_default_str();
  ro->add_option("--out", ro_out, "per-token CSV (default stdout)");
  ro->add_option("--hist", ro_hist, "win-count CSV");
  ro->add_option("--model", ro_model);
  ro->add_option("--calib", ro_calib);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*q) {
      if (q_lambda.empty()) q_lambda.assign(q_bits.size(), 1.0);
      if (q_lambda.size() != q_bits.size()) throw UsageError("lambda/bits length mismatch");
      if (q_group == 0) throw UsageError("--group-size must be positive");
      if (q_block == 0) throw UsageError("--block must be positive");
      if (!(q_damp > 0.0)) throw UsageError("--damp must be positive");
      BitWidthSet bits;
      try {
        bits = BitWidthSet::make(q_bits, q_lambda);
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      const ToyModel model = make_toy_model(parse_model_tag(q_model));
      const CalibSet calib = load_calib(q_calib, model.config.dim);
      PipelineOptions opt;
      opt.bits = bits;
      opt.group_size = q_group;
      opt.damp_rel = q_damp;
      opt.block_size = q_block;
      const PipelineResult res = run_pipeline(model, calib, opt);
      write_checkpoint(res.checkpoint, q_out);
      out << "layer";
      for (int r : bits.targets()) out << ",err" << r;
      out << ",weighted\n";
      for (const auto& d : res.diagnostics) {
        out << d.name;
        for (double e : d.recon_error) out << ',' << e;
        out << ',' << d.weighted_error << '\n';
      }
      return kExitOk;
    }

    if (*s) {
      if (!s_bits && s_config.empty()) throw UsageError("slice needs --bits or --config");
      const Checkpoint ckpt = read_checkpoint(s_ckpt);
      const BitConfig cfg = s_bits ? uniform_config(ckpt.layers, *s_bits) : read_config_json(s_config);
      write_sliced(make_sliced_model(ckpt, cfg), s_out);
      out << "wrote " << s_out << " (" << config_bits(cfg, ckpt.layers) << " parameter-bits)\n";
      return kExitOk;
    }

    if (*se) {
      if (se_scale == 0) throw UsageError("--scale-down must be positive");
      sp.stages = desk_stages(se_scale);
      try {
        sp.validate();
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      const Checkpoint ckpt = read_checkpoint(se_ckpt);
      const ModelContext ctx = load_context(ckpt.header, se_model, se_calib);
      const KlFitness fit(ctx.model, ckpt, ctx.calib.calib, sp.ladder);
      const SearchResult res = search(layer_budgets(ckpt), se_avg, sp, std::cref(fit));
      write_text(se_out, config_to_json(res.best.config).dump(2) + "\n");
      if (!se_log.empty()) {
        std::ostringstream log;
        write_search_log(log, res);
        write_text(se_log, log.str());
      }
      nlohmann::json summary{{"best_fitness", *res.best.fitness},
                             {"generations", sp.generations},
                             {"stagnant_mutations", res.stagnant_mutations},
                             {"config", se_out}};
      out << summary.dump() << '\n';
      return kExitOk;
    }

    if (*ev) {
      std::ostringstream result;
      const FileKind kind = read_file_kind(ev_ckpt);
      if (kind == FileKind::sliced) {
        if (!ev_bits.empty() || !ev_config.empty())
          throw UsageError("a sliced model has fixed bit-widths; drop --bits/--config");
        if (ev_metric != "kl") throw UsageError("recon needs a parent checkpoint");
        const SlicedModel sm = read_sliced(ev_ckpt);
        const ModelContext ctx = load_context(sm.header, ev_model, ev_calib);
        result << nlohmann::json{{"metric", "kl"}, {"model", ev_ckpt}, {"kl", eval_kl(ctx.model, sm.layers, ctx.calib.heldout)}}
                      .dump()
               << '\n';
      } else {
        const Checkpoint ckpt = read_checkpoint(ev_ckpt);
        const ModelContext ctx = load_context(ckpt.header, ev_model, ev_calib);
        if (ev_metric == "recon") {
          if (!ev_bits.empty() || !ev_config.empty()) throw UsageError("recon covers every target; drop --bits/--config");
          write_recon_csv(result, eval_recon(ctx.model, ckpt, ctx.calib));
        } else if (!ev_config.empty()) {
          const BitConfig cfg = read_config_json(ev_config);
          result << nlohmann::json{{"metric", "kl"}, {"config", ev_config}, {"kl", eval_kl(ctx.model, ckpt, cfg, ctx.calib.heldout)}}
                        .dump()
                 << '\n';
        } else {
          if (ev_bits.empty()) ev_bits = ckpt.header.bits.targets();
          nlohmann::json rows = nlohmann::json::array();
          for (int r : ev_bits) rows.push_back({{"bits", r}, {"kl", eval_kl(ctx.model, ckpt, r, ctx.calib.heldout)}});
          result << nlohmann::json{{"metric", "kl"}, {"results", rows}}.dump() << '\n';
        }
      }
      if (ev_out.empty())
        out << result.str();
      else
        write_text(ev_out, result.str());
      return kExitOk;
    }

    if (*b) {
      if (b_bits < 2 || b_bits > 4) throw UsageError("unsupported bits " + std::to_string(b_bits) + " (packed kernels cover 2, 3 and 4)");
      if (b_reps < 3) throw UsageError("--reps must be at least 3");
      if (b_m == 0 || b_k == 0 || b_batch == 0) throw UsageError("--m, --k and --batch must be positive");
      out << bench_json(bench(b_m, b_k, b_batch, b_bits, b_reps, b_seed)).dump() << '\n';
      return kExitOk;
    }

    if (*ro) {
      if (ro_tokens == 0) throw UsageError("--tokens must be positive");
      const Checkpoint ckpt = read_checkpoint(ro_ckpt);
      const ModelContext ctx = load_context(ckpt.header, ro_model, ro_calib);
      const MatrixF& held = ctx.calib.heldout;
      const std::size_t n = std::min(ro_tokens, held.rows());
      MatrixF tokens(n, held.cols());
      std::copy_n(held.data(), n * held.cols(), tokens.data());
      const RoutingResult res = analyze_routing(ctx.model, ckpt, ro_block, tokens);
      std::ostringstream csv;
      write_routing_csv(csv, res);
      if (ro_out.empty())
        out << csv.str();
      else
        write_text(ro_out, csv.str());
      if (!ro_hist.empty()) {
        std::ostringstream hist;
        write_routing_histogram_csv(hist, res);
        write_text(ro_hist, hist.str());
      }
      const auto winner = res.plurality_winner();
      err << res.configs.size() << " configurations, plurality winner: "
          << (winner ? config_label(res.configs[*winner]) : std::string("none (tie)")) << '\n';
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace matq::cli
