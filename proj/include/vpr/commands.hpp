#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vpr/backbone.hpp"
#include "vpr/io_store.hpp"
#include "vpr/model.hpp"
#include "vpr/retrieval.hpp"
#include "vpr/selfcheck.hpp"

namespace vpr {

inline constexpr const char* kReportSchema = "vpr.report.v1";

enum ExitCode : int { kExitOk = 0, kExitVerifyFailed = 1, kExitUsage = 2 };

struct RunConfig {
  /// Empty selects seeded random weights.
  std::string weights;
  std::uint64_t seed = 1;
  int clusters = 64;
  int patch_size = 2;
  int patch_stride = 1;
  /// 0 disables PCA; the matcher then runs on raw patch VLAD vectors.
  int pca_dim = 512;
  bool pca_whiten = false;
  int attention_rounds = 2;
  double sinkhorn_reg = 1.0;
  double sinkhorn_tol = 1e-6;
  int sinkhorn_iters = 100;
  int candidates = 100;
  double radius_m = 25.0;
  int threads = 1;
  int input_height = 480;
  int input_width = 640;
  ForwardMode mode = ForwardMode::fused;

  void validate() const;
  SinkhornConfig sinkhorn(double dustbin_score) const;
  ImageOptions image_options() const;
};

/// Loads `config.weights`, or builds the seeded random model it describes.
Model resolve_model(const RunConfig& config);
std::uint64_t model_fingerprint(const Model& model);

struct ExtractSummary {
  std::size_t images = 0;
  double seconds = 0.0;
  double images_per_second = 0.0;
};

/// Indexes the database split of `manifest`; image paths resolve against the
/// manifest's directory.
ExtractSummary cmd_extract(const std::filesystem::path& manifest, const std::filesystem::path& index_out,
                           const RunConfig& config, std::ostream& log);

struct RecallRow {
  int k = 0;
  double initial = 0.0;
  double reranked = 0.0;
};

std::vector<RecallRow> recall_table(const std::vector<CandidateList>& initial,
                                    const std::vector<CandidateList>& reranked,
                                    const std::map<std::string, GeoTag>& query_tags,
                                    const std::map<std::string, GeoTag>& database_tags, double radius_m,
                                    const std::vector<int>& ks = {1, 5, 10});

struct EvalReport {
  std::vector<CandidateList> initial;
  std::vector<CandidateList> reranked;
  std::vector<RecallRow> recalls;
  double seconds = 0.0;
};

EvalReport cmd_eval(const std::filesystem::path& manifest, const std::filesystem::path& index,
                    const RunConfig& config, std::ostream& log);

void print_recall_table(const EvalReport& report, std::ostream& out);
/// One JSON object per line: a header, one line per query, one per recall cell.
void write_eval_jsonl(const EvalReport& report, const RunConfig& config, std::ostream& out);

struct ReparamReport {
  bool already_fused = false;
  double max_deviation = 0.0;
  ModelCost multibranch;
  ModelCost fused;
};

inline constexpr double kReparamTolerance = 1e-3;

ReparamReport cmd_reparam(const std::filesystem::path& weights_in, const std::filesystem::path& weights_out,
                          const RunConfig& config, std::ostream& log);

struct BenchReport {
  double speed1_ms = 0.0;
  double speed2_ms = 0.0;
  std::int64_t stage1_params = 0;
  std::int64_t stage2_params = 0;
  std::int64_t stage1_mult_adds = 0;
  std::int64_t stage2_mult_adds = 0;
  std::int64_t backbone_params = 0;
  std::size_t model_bytes = 0;
  int images = 0;
  int patches_per_image = 0;
};

/// Uses the database split of `manifest` when given, otherwise `images` seeded
/// random inputs at the configured size.
BenchReport cmd_bench(const RunConfig& config, const std::optional<std::filesystem::path>& manifest, int images,
                      std::ostream& log);
void write_bench_json(const BenchReport& report, std::ostream& out);

void cmd_init(const std::filesystem::path& weights_out, const RunConfig& config);

int cmd_selfcheck(const SelfCheckOptions& options, std::ostream& out);

}  // namespace vpr
