#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "oracles.hpp"
#include "vpr/commands.hpp"

using namespace vpr;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.input_height = 64;
  c.input_width = 64;
  c.clusters = 8;
  c.pca_dim = 16;
  c.attention_rounds = 1;
  c.candidates = 5;
  c.threads = 2;
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(VPR_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, GeoTag> tags(std::initializer_list<std::pair<std::string, double>> eastings) {
  std::map<std::string, GeoTag> m;
  for (const auto& [id, e] : eastings) m[id] = GeoTag::utm(e, 0);
  return m;
}

CandidateList ranked(const std::string& q, std::vector<std::string> ids, RankingStage stage) {
  CandidateList c;
  c.query_id = q;
  c.stage = stage;
  for (auto& id : ids) c.ranked.push_back({std::move(id), 0.0, false});
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(RunConfig{}.validate());
  RunConfig c;
  c.patch_size = 0;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = RunConfig{};
  c.sinkhorn_reg = 0.0;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = RunConfig{};
  c.input_height = 100;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = RunConfig{};
  c.pca_dim = 0;
  CHECK_THROWS_AS(c.validate(), InputError);
  c.attention_rounds = 0;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("extract and eval on a small fixture") {
  oracle::TempDir dir("cmd");
  const auto manifest = oracle::write_fixture(dir / "data", 3, 64, 64);
  const RunConfig cfg = small_config();
  std::ostringstream log;

  const ExtractSummary s = cmd_extract(manifest, dir / "a.idx", cfg, log);
  CHECK(s.images == 3);
  const IndexFile idx = load_index(dir / "a.idx");
  CHECK(idx.index.size() == 3);
  CHECK(idx.index.dimension() == cfg.pca_dim);
  CHECK(idx.patches.size() == 3);
  CHECK(idx.meta.input_height == 64);
  CHECK(idx.meta.model_fingerprint == model_fingerprint(resolve_model(cfg)));

  cmd_extract(manifest, dir / "b.idx", cfg, log);
  CHECK(read_file(dir / "a.idx") == read_file(dir / "b.idx"));
  RunConfig one_thread = cfg;
  one_thread.threads = 1;
  cmd_extract(manifest, dir / "c.idx", one_thread, log);
  CHECK(read_file(dir / "a.idx") == read_file(dir / "c.idx"));

  const EvalReport r = cmd_eval(manifest, dir / "a.idx", cfg, log);
  REQUIRE(r.recalls.size() == 3);
  CHECK(r.recalls[0].k == 1);
  CHECK(r.recalls[0].initial == 1.0);
  CHECK(r.initial.size() == 3);
  CHECK(r.reranked.size() == 3);
  for (const auto& l : r.reranked) CHECK(l.stage == RankingStage::reranked);

  // shuffled manifest rows give the same recalls
  auto recs = load_manifest(manifest);
  std::reverse(recs.begin(), recs.end());
  save_manifest(dir / "data" / "shuffled.csv", recs);
  const EvalReport r2 = cmd_eval(dir / "data" / "shuffled.csv", dir / "a.idx", cfg, log);
  for (std::size_t i = 0; i < r.recalls.size(); ++i) {
    CHECK(r2.recalls[i].initial == r.recalls[i].initial);
    CHECK(r2.recalls[i].reranked == r.recalls[i].reranked);
  }

  std::ostringstream table, jsonl;
  print_recall_table(r, table);
  CHECK(table.str().find("reranked") != std::string::npos);
  write_eval_jsonl(r, cfg, jsonl);
  std::istringstream lines(jsonl.str());
  std::string line;
  int queries = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("schema") == kReportSchema);
    if (j.at("type") == "query") ++queries;
  }
  CHECK(queries == 3);

  RunConfig other = cfg;
  other.seed = 99;
  CHECK_THROWS_AS(cmd_eval(manifest, dir / "a.idx", other, log), InputError);
}

TEST_CASE("extract rejects an empty database") {
  oracle::TempDir dir("empty");
  save_manifest(dir / "m.csv", {});
  std::ostringstream log;
  CHECK_THROWS(cmd_extract(dir / "m.csv", dir / "x.idx", small_config(), log));
  CHECK_FALSE(std::filesystem::exists(dir / "x.idx"));
}

TEST_CASE("recall_table on a hand fixture") {
  const auto q = tags({{"q0", 0}, {"q1", 100}, {"q2", 200}, {"q3", 300}, {"q4", 400}, {"q5", 500}});
  const auto d = tags({{"d0", 0}, {"d1", 100}, {"d2", 200}, {"d3", 300}, {"d4", 400}, {"d5", 500}, {"far", 9000}});
  std::vector<CandidateList> init, rer;
  // initial: q0, q1 correct at rank 1; q2 at rank 3; q3 at rank 6; q4, q5 never
  init.push_back(ranked("q0", {"d0", "far"}, RankingStage::initial));
  init.push_back(ranked("q1", {"d1"}, RankingStage::initial));
  init.push_back(ranked("q2", {"far", "d5", "d2"}, RankingStage::initial));
  init.push_back(ranked("q3", {"far", "d0", "d1", "d2", "d4", "d3"}, RankingStage::initial));
  init.push_back(ranked("q4", {"far"}, RankingStage::initial));
  init.push_back(ranked("q5", {"d0"}, RankingStage::initial));
  // reranked: q0..q3 correct at rank 1
  rer.push_back(ranked("q0", {"d0", "far"}, RankingStage::reranked));
  rer.push_back(ranked("q1", {"d1"}, RankingStage::reranked));
  rer.push_back(ranked("q2", {"d2", "far", "d5"}, RankingStage::reranked));
  rer.push_back(ranked("q3", {"d3", "far", "d0", "d1", "d2", "d4"}, RankingStage::reranked));
  rer.push_back(ranked("q4", {"far"}, RankingStage::reranked));
  rer.push_back(ranked("q5", {"d0"}, RankingStage::reranked));

  const auto rows = recall_table(init, rer, q, d, 25.0);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].k == 1);
  CHECK(rows[0].initial == doctest::Approx(2.0 / 6.0));
  CHECK(rows[0].reranked == doctest::Approx(4.0 / 6.0));
  CHECK(rows[1].initial == doctest::Approx(3.0 / 6.0));
  CHECK(rows[1].reranked == doctest::Approx(4.0 / 6.0));
  CHECK(rows[2].initial == doctest::Approx(4.0 / 6.0));
  CHECK(rows[2].reranked == doctest::Approx(4.0 / 6.0));
}

TEST_CASE("reparam") {
  oracle::TempDir dir("reparam");
  const RunConfig cfg = small_config();
  std::ostringstream log;

  cmd_init(dir / "neutral.bin", cfg);
  const ReparamReport n = cmd_reparam(dir / "neutral.bin", dir / "neutral_fused.bin", cfg, log);
  CHECK_FALSE(n.already_fused);
  CHECK(n.max_deviation <= 1e-4);
  CHECK(n.fused.params == oracle::kFusedBackboneParams);
  CHECK(n.fused.params < n.multibranch.params);
  CHECK(n.fused.mult_adds < n.multibranch.mult_adds);

  Model m = random_model({.clusters = 8, .matcher_dim = 16, .attention_rounds = 1}, 5,
                         {.randomize_bn = true, .randomize_bias = true});
  save_model(dir / "random.bin", m);
  const ReparamReport r = cmd_reparam(dir / "random.bin", dir / "random_fused.bin", cfg, log);
  CHECK(r.max_deviation <= kReparamTolerance);
  const Model fused = load_model(dir / "random_fused.bin");
  CHECK_FALSE(fused.backbone.has_multibranch());

  std::ostringstream notice;
  const ReparamReport again = cmd_reparam(dir / "random_fused.bin", dir / "copy.bin", cfg, notice);
  CHECK(again.already_fused);
  CHECK(notice.str().find("already fused") != std::string::npos);
  CHECK(read_file(dir / "copy.bin") == read_file(dir / "random_fused.bin"));
}

TEST_CASE("bench report") {
  const RunConfig cfg = small_config();
  std::ostringstream log;
  const BenchReport a = cmd_bench(cfg, std::nullopt, 2, log);
  const BenchReport b = cmd_bench(cfg, std::nullopt, 2, log);
  CHECK(a.images == 2);
  CHECK(a.speed1_ms > 0.0);
  CHECK(a.speed2_ms > 0.0);
  CHECK(a.backbone_params == oracle::kFusedBackboneParams);
  CHECK(a.stage1_params == b.stage1_params);
  CHECK(a.stage2_params == b.stage2_params);
  CHECK(a.stage1_mult_adds == b.stage1_mult_adds);
  CHECK(a.stage2_mult_adds == b.stage2_mult_adds);
  CHECK(a.model_bytes == b.model_bytes);
  CHECK(a.patches_per_image == 9);

  const Model model = resolve_model(cfg);
  CHECK(a.stage1_mult_adds > count_params_flops(model.backbone, ForwardMode::fused, 64, 64).mult_adds);

  std::ostringstream out;
  write_bench_json(a, out);
  const auto j = nlohmann::json::parse(out.str());
  for (const char* key : {"speed1_ms", "speed2_ms", "params", "backbone_params", "model_size_mb", "theo_flops"})
    CHECK(j.contains(key));
  CHECK(j["params"]["stage1"] == a.stage1_params);
  CHECK(j["theo_flops"]["stage2"] == 2 * a.stage2_mult_adds);
}

TEST_CASE("selfcheck exit codes") {
  std::ostringstream out;
  CHECK(cmd_selfcheck({}, out) == kExitOk);
  CHECK(out.str().find("selfcheck passed") != std::string::npos);
  std::ostringstream bad;
  CHECK(cmd_selfcheck({.inject_fault = true}, bad) == kExitVerifyFailed);
  CHECK(bad.str().find("FAIL") != std::string::npos);
}

TEST_CASE("cli exit codes and config file") {
  oracle::TempDir dir("cli");
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == kExitUsage);
  CHECK(run_cli("frobnicate") == kExitUsage);
  CHECK(run_cli("--clusters nope init " + (dir / "w.bin").string()) == kExitUsage);
  CHECK(run_cli("eval " + (dir / "missing.csv").string() + " " + (dir / "missing.idx").string()) == kExitUsage);

  {
    std::ofstream(dir / "run.ini") << "clusters = 8\npca-dim = 16\nattention-rounds = 1\n";
  }
  CHECK(run_cli("--config " + (dir / "run.ini").string() + " init " + (dir / "w.bin").string()) == kExitOk);
  const Model m = load_model(dir / "w.bin");
  CHECK(m.vlad.cluster_count() == 8);
  CHECK(m.attention.layers.size() == 2);
  CHECK(m.attention.dim() == 16);

  CHECK(run_cli("--config " + (dir / "run.ini").string() + " --clusters 4 init " + (dir / "w4.bin").string()) ==
        kExitOk);
  CHECK(load_model(dir / "w4.bin").vlad.cluster_count() == 4);
}
