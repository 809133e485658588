#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "vpr/commands.hpp"
#include "vpr/errors.hpp"

namespace {

void open_report(const std::string& path, std::ofstream& out) {
  out.open(path, std::ios::binary | std::ios::trunc);
  if (!out) throw vpr::InputError("cannot write report " + path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage visual place recognition: global VLAD retrieval with patch-level re-ranking"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "key=value file; command-line flags take precedence");

  vpr::RunConfig cfg;
  std::string mode = "fused";
  app.add_option("--weights", cfg.weights, "Weights file (default: seeded random weights)");
  app.add_option("--seed", cfg.seed, "Seed for random weights and probe inputs")->capture_default_str();
  app.add_option("--clusters", cfg.clusters, "VLAD clusters K")->capture_default_str();
  app.add_option("--patch-size", cfg.patch_size, "Square patch size in feature cells")->capture_default_str();
  app.add_option("--patch-stride", cfg.patch_stride, "Patch stride in feature cells")->capture_default_str();
  app.add_option("--pca-dim", cfg.pca_dim, "PCA output dimension, 0 disables")->capture_default_str();
  app.add_flag("--pca-whiten", cfg.pca_whiten, "Whiten PCA outputs");
  app.add_option("--attention-rounds", cfg.attention_rounds, "Attention layers L")->capture_default_str();
  app.add_option("--sinkhorn-reg", cfg.sinkhorn_reg, "Entropic regularization")->capture_default_str();
  app.add_option("--sinkhorn-tol", cfg.sinkhorn_tol, "Marginal tolerance, <= 0 runs all iterations")
      ->capture_default_str();
  app.add_option("--sinkhorn-iters", cfg.sinkhorn_iters, "Maximum Sinkhorn iterations")->capture_default_str();
  app.add_option("--candidates", cfg.candidates, "Candidates re-ranked per query")->capture_default_str();
  app.add_option("--radius", cfg.radius_m, "True-positive radius in meters")->capture_default_str();
  app.add_option("--threads", cfg.threads, "Worker threads")->envname("VPR_THREADS")->capture_default_str();
  app.add_option("--height", cfg.input_height, "Network input height")->capture_default_str();
  app.add_option("--width", cfg.input_width, "Network input width")->capture_default_str();
  app.add_option("--forward", mode, "Backbone form")
      ->check(CLI::IsMember({"fused", "multibranch"}))
      ->capture_default_str();

  std::string manifest, index, weights_in, weights_out, report;
  int bench_images = 2;
  bool inject_fault = false;

  auto* init = app.add_subcommand("init", "Write seeded random weights");
  init->add_option("weights_out", weights_out)->required();

  auto* extract = app.add_subcommand("extract", "Index the database split of a manifest");
  extract->add_option("manifest", manifest)->required()->check(CLI::ExistingFile);
  extract->add_option("index", index)->required();

  auto* eval = app.add_subcommand("eval", "Retrieve, re-rank and report Recall@{1,5,10}");
  eval->add_option("manifest", manifest)->required()->check(CLI::ExistingFile);
  eval->add_option("index", index)->required()->check(CLI::ExistingFile);
  eval->add_option("--report", report, "JSON-lines report path");

  auto* reparam = app.add_subcommand("reparam", "Fuse multi-branch blocks and verify on a probe batch");
  reparam->add_option("weights_in", weights_in)->required()->check(CLI::ExistingFile);
  reparam->add_option("weights_out", weights_out)->required();

  auto* bench = app.add_subcommand("bench", "Time extraction and matching; report params, FLOPs and size");
  bench->add_option("--manifest", manifest, "Use the database images of this manifest");
  bench->add_option("--images", bench_images, "Random images when no manifest is given")->capture_default_str();
  bench->add_option("--report", report, "JSON report path");

  auto* selfcheck = app.add_subcommand("selfcheck", "Run the oracle suites");
  selfcheck->add_flag("--inject-fault", inject_fault, "Perturb fused weights; the run must fail");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? vpr::kExitOk : vpr::kExitUsage;
  }
  cfg.mode = mode == "fused" ? vpr::ForwardMode::fused : vpr::ForwardMode::multibranch;

  try {
    if (init->parsed()) {
      vpr::cmd_init(weights_out, cfg);
      std::cout << "wrote " << weights_out << "\n";
    } else if (extract->parsed()) {
      vpr::cmd_extract(manifest, index, cfg, std::cout);
    } else if (eval->parsed()) {
      const vpr::EvalReport r = vpr::cmd_eval(manifest, index, cfg, std::cerr);
      vpr::print_recall_table(r, std::cout);
      if (!report.empty()) {
        std::ofstream out;
        open_report(report, out);
        vpr::write_eval_jsonl(r, cfg, out);
      }
    } else if (reparam->parsed()) {
      const vpr::ReparamReport r = vpr::cmd_reparam(weights_in, weights_out, cfg, std::cout);
      if (r.max_deviation > vpr::kReparamTolerance) return vpr::kExitVerifyFailed;
    } else if (bench->parsed()) {
      std::optional<std::filesystem::path> m;
      if (!manifest.empty()) m = manifest;
      const vpr::BenchReport r = vpr::cmd_bench(cfg, m, bench_images, std::cout);
      if (!report.empty()) {
        std::ofstream out;
        open_report(report, out);
        vpr::write_bench_json(r, out);
      }
    } else if (selfcheck->parsed()) {
      vpr::SelfCheckOptions o;
      o.seed = cfg.seed;
      o.inject_fault = inject_fault;
      return vpr::cmd_selfcheck(o, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return vpr::kExitUsage;
  }
  return vpr::kExitOk;
}
