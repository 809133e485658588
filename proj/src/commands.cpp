#include "vpr/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <iomanip>
#include <ostream>
#include <random>

#include <json.hpp>

#include "vpr/errors.hpp"
#include "vpr/pipeline.hpp"

namespace vpr {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw InputError("invalid configuration: " + what);
}

std::vector<ManifestRecord> split_records(const std::vector<ManifestRecord>& all, Split split) {
  std::vector<ManifestRecord> out;
  for (const auto& r : all) {
    if (r.split == split) out.push_back(r);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  return out;
}

std::filesystem::path resolve_path(const std::filesystem::path& manifest, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : manifest.parent_path() / path;
}

PcaModel fit_patch_pca(const std::vector<RawFeatures>& raw, int pca_dim, bool whiten) {
  Eigen::Index cols = 0;
  for (const auto& r : raw) cols += r.patches.cols();
  if (cols <= pca_dim) {
    throw DegenerateInputError("PCA to " + std::to_string(pca_dim) + " dimensions needs more than " +
                               std::to_string(pca_dim) + " patch descriptors, got " + std::to_string(cols));
  }
  Eigen::MatrixXf samples(raw.front().patches.rows(), cols);
  Eigen::Index at = 0;
  for (const auto& r : raw) {
    samples.middleCols(at, r.patches.cols()) = r.patches;
    at += r.patches.cols();
  }
  return pca_fit(samples, pca_dim, whiten);
}

Matcher make_matcher(const Model& model, const RunConfig& config) {
  return Matcher(model.attention.cast<double>(), config.sinkhorn(model.dustbin_score));
}

void check_matcher_dim(const Model& model, int descriptor_dim) {
  if (!model.attention.layers.empty() && model.attention.dim() != descriptor_dim) {
    throw InputError("matcher expects " + std::to_string(model.attention.dim()) + "-d descriptors but patches are " +
                     std::to_string(descriptor_dim) + "-d");
  }
}

}  // namespace

void RunConfig::validate() const {
  require(clusters > 0, "clusters must be positive");
  require(patch_size > 0, "patch size must be positive");
  require(patch_stride > 0, "patch stride must be positive");
  require(pca_dim >= 0, "pca dimension must be non-negative");
  require(attention_rounds >= 0, "attention rounds must be non-negative");
  require(pca_dim > 0 || attention_rounds == 0, "attention needs a PCA dimension");
  require(sinkhorn_reg > 0.0 && std::isfinite(sinkhorn_reg), "sinkhorn reg must be positive");
  require(sinkhorn_iters > 0, "sinkhorn iterations must be positive");
  require(std::isfinite(sinkhorn_tol), "sinkhorn tolerance must be finite");
  require(candidates > 0, "candidate depth must be positive");
  require(radius_m >= 0.0 && std::isfinite(radius_m), "radius must be non-negative");
  require(threads > 0, "thread count must be positive");
  require(input_height > 0 && input_width > 0, "input size must be positive");
  const int f = NetworkSpec::repvgg_lite().downsample_factor();
  require(input_height % f == 0 && input_width % f == 0,
          "input size must be a multiple of " + std::to_string(f));
  require(patch_size <= input_height / f && patch_size <= input_width / f, "patch larger than feature map");
}

SinkhornConfig RunConfig::sinkhorn(double dustbin_score) const {
  SinkhornConfig c;
  c.reg = sinkhorn_reg;
  c.tol = sinkhorn_tol;
  c.max_iters = sinkhorn_iters;
  c.dustbin_score = dustbin_score;
  return c;
}

ImageOptions RunConfig::image_options() const {
  ImageOptions o;
  o.height = input_height;
  o.width = input_width;
  return o;
}

Model resolve_model(const RunConfig& config) {
  if (!config.weights.empty()) return load_model(config.weights);
  ModelShape shape;
  shape.clusters = config.clusters;
  shape.matcher_dim = config.pca_dim;
  shape.attention_rounds = config.attention_rounds;
  return random_model(shape, config.seed);
}

std::uint64_t model_fingerprint(const Model& model) {
  return fnv1a64(encode_archive(model_to_archive(model), kWeightsMagic));
}

ExtractSummary cmd_extract(const std::filesystem::path& manifest, const std::filesystem::path& index_out,
                           const RunConfig& config, std::ostream& log) {
  config.validate();
  const auto records = split_records(load_manifest(manifest), Split::database);
  if (records.empty()) throw InputError(manifest.string() + ": no database images in manifest");
  const Model model = resolve_model(config);
  const PatchSettings patches{config.patch_size, config.patch_stride};
  const ImageOptions io = config.image_options();

  const auto t0 = Clock::now();
  std::vector<RawFeatures> raw(records.size());
  parallel_for(records.size(), config.threads, [&](std::size_t i) {
    raw[i] = extract_raw_features(model, load_image(resolve_path(manifest, records[i].path), io), config.mode, patches);
  });

  IndexFile file;
  if (config.pca_dim > 0) file.pca = fit_patch_pca(raw, config.pca_dim, config.pca_whiten);
  const PcaModel* pca = file.pca ? &*file.pca : nullptr;
  std::vector<ImageFeatures> features(records.size());
  parallel_for(records.size(), config.threads, [&](std::size_t i) { features[i] = project_features(raw[i], pca); });
  check_matcher_dim(model, static_cast<int>(features.front().patches.descriptors.rows()));

  file.index = DescriptorIndex(static_cast<int>(features.front().global.values.size()));
  for (std::size_t i = 0; i < records.size(); ++i) {
    file.index.add({records[i].image_id, features[i].global.values, records[i].geotag});
    file.patches.emplace(records[i].image_id, std::move(features[i].patches));
  }
  file.meta = {config.input_height, config.input_width, config.patch_size, config.patch_stride,
               model.vlad.cluster_count(), model_fingerprint(model)};
  save_index(index_out, file);

  ExtractSummary s;
  s.images = records.size();
  s.seconds = seconds_since(t0);
  s.images_per_second = s.seconds > 0.0 ? double(s.images) / s.seconds : 0.0;
  log << "indexed " << s.images << " images into " << index_out.string() << " (" << std::fixed
      << std::setprecision(2) << s.images_per_second << " images/sec)\n";
  return s;
}

std::vector<RecallRow> recall_table(const std::vector<CandidateList>& initial,
                                    const std::vector<CandidateList>& reranked,
                                    const std::map<std::string, GeoTag>& query_tags,
                                    const std::map<std::string, GeoTag>& database_tags, double radius_m,
                                    const std::vector<int>& ks) {
  std::vector<RecallRow> rows;
  for (int k : ks) {
    rows.push_back({k, recall_at_k(initial, query_tags, database_tags, k, radius_m),
                    recall_at_k(reranked, query_tags, database_tags, k, radius_m)});
  }
  return rows;
}

EvalReport cmd_eval(const std::filesystem::path& manifest, const std::filesystem::path& index_path,
                    const RunConfig& config, std::ostream& log) {
  config.validate();
  const auto queries = split_records(load_manifest(manifest), Split::query);
  if (queries.empty()) throw InputError(manifest.string() + ": no query images in manifest");
  const IndexFile file = load_index(index_path);
  if (file.index.empty()) throw InputError(index_path.string() + ": index is empty");
  const Model model = resolve_model(config);
  if (file.meta.model_fingerprint != model_fingerprint(model)) {
    throw InputError(index_path.string() + ": index was built with different weights");
  }
  const PcaModel* pca = file.pca ? &*file.pca : nullptr;
  check_matcher_dim(model, pca ? pca->output_dim() : file.index.dimension());
  const Matcher matcher = make_matcher(model, config);
  const PatchSettings patches{file.meta.patch_size, file.meta.patch_stride};
  ImageOptions io;
  io.height = file.meta.input_height;
  io.width = file.meta.input_width;
  const PatchLookup lookup = [&](const std::string& id) -> const PatchDescriptorSet* {
    const auto it = file.patches.find(id);
    return it == file.patches.end() ? nullptr : &it->second;
  };

  EvalReport report;
  report.initial.resize(queries.size());
  report.reranked.resize(queries.size());
  const auto t0 = Clock::now();
  parallel_for(queries.size(), config.threads, [&](std::size_t i) {
    const RawFeatures raw =
        extract_raw_features(model, load_image(resolve_path(manifest, queries[i].path), io), config.mode, patches);
    const ImageFeatures f = project_features(raw, pca);
    report.initial[i] = global_retrieve(f.global, file.index, config.candidates, queries[i].image_id);
    report.reranked[i] = rerank(f.patches, report.initial[i], lookup, matcher);
  });
  report.seconds = seconds_since(t0);

  std::map<std::string, GeoTag> qtags, dtags;
  for (const auto& q : queries) qtags[q.image_id] = q.geotag;
  for (const auto& e : file.index.entries()) dtags[e.image_id] = e.geotag;
  report.recalls = recall_table(report.initial, report.reranked, qtags, dtags, config.radius_m);
  log << "evaluated " << queries.size() << " queries in " << std::fixed << std::setprecision(2) << report.seconds
      << " s\n";
  return report;
}

void print_recall_table(const EvalReport& report, std::ostream& out) {
  out << std::left << std::setw(10) << "stage";
  for (const auto& r : report.recalls) out << std::right << std::setw(9) << ("R@" + std::to_string(r.k));
  out << '\n';
  out << std::fixed << std::setprecision(4);
  out << std::left << std::setw(10) << "global";
  for (const auto& r : report.recalls) out << std::right << std::setw(9) << r.initial;
  out << '\n' << std::left << std::setw(10) << "reranked";
  for (const auto& r : report.recalls) out << std::right << std::setw(9) << r.reranked;
  out << '\n';
}

void write_eval_jsonl(const EvalReport& report, const RunConfig& config, std::ostream& out) {
  using nlohmann::json;
  out << json{{"schema", kReportSchema},
              {"type", "eval"},
              {"queries", report.initial.size()},
              {"candidates", config.candidates},
              {"radius_m", config.radius_m},
              {"seconds", report.seconds}}
             .dump()
      << '\n';
  const auto ids = [](const CandidateList& l) {
    json a = json::array();
    for (const auto& r : l.ranked) a.push_back({{"id", r.image_id}, {"score", r.score}, {"flagged", r.flagged}});
    return a;
  };
  for (std::size_t i = 0; i < report.initial.size(); ++i) {
    out << json{{"schema", kReportSchema},
                {"type", "query"},
                {"query_id", report.initial[i].query_id},
                {"global", ids(report.initial[i])},
                {"reranked", ids(report.reranked[i])}}
               .dump()
        << '\n';
  }
  for (const auto& r : report.recalls) {
    out << json{{"schema", kReportSchema}, {"type", "recall"}, {"k", r.k}, {"global", r.initial}, {"reranked", r.reranked}}
               .dump()
        << '\n';
  }
}

ReparamReport cmd_reparam(const std::filesystem::path& weights_in, const std::filesystem::path& weights_out,
                          const RunConfig& config, std::ostream& log) {
  Model model = load_model(weights_in);
  ReparamReport r;
  r.fused = count_params_flops(model.backbone, ForwardMode::fused, config.input_height, config.input_width);
  if (!model.backbone.has_multibranch()) {
    r.already_fused = true;
    r.multibranch = r.fused;
    log << "notice: " << weights_in.string() << " is already fused; weights copied unchanged\n";
    if (std::filesystem::weakly_canonical(weights_in) != std::filesystem::weakly_canonical(weights_out)) {
      write_file_atomic(weights_out, read_file(weights_in));
    }
    return r;
  }
  r.multibranch = count_params_flops(model.backbone, ForwardMode::multibranch, config.input_height, config.input_width);

  const int f = model.backbone.spec().downsample_factor();
  const int side = std::max(64, f);
  Tensor4 probe({2, model.backbone.spec().input_channels, side, side});
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (float& v : probe.values()) v = dist(rng);
  Model fused = model;
  fused.backbone = model.backbone.fused();
  r.max_deviation = max_abs_diff(model.backbone.forward(probe, ForwardMode::multibranch),
                                 fused.backbone.forward(probe, ForwardMode::fused));
  save_model(weights_out, fused);

  log << "max deviation on probe batch: " << std::scientific << std::setprecision(3) << r.max_deviation
      << (r.max_deviation <= kReparamTolerance ? " (ok)\n" : " (exceeds tolerance)\n");
  log << "params:    " << r.multibranch.params << " -> " << r.fused.params << " ("
      << (r.fused.params - r.multibranch.params) << ")\n";
  log << "mult-adds: " << r.multibranch.mult_adds << " -> " << r.fused.mult_adds << " ("
      << (r.fused.mult_adds - r.multibranch.mult_adds) << ") at " << config.input_width << "x" << config.input_height
      << "\n";
  return r;
}

BenchReport cmd_bench(const RunConfig& config, const std::optional<std::filesystem::path>& manifest, int images,
                      std::ostream& log) {
  config.validate();
  const Model model = resolve_model(config);
  const ImageOptions io = config.image_options();
  std::vector<Tensor4> inputs;
  if (manifest) {
    for (const auto& r : split_records(load_manifest(*manifest), Split::database)) {
      inputs.push_back(load_image(resolve_path(*manifest, r.path), io));
    }
  } else {
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<float> dist(0.0f, 1.0f);
    for (int i = 0; i < images; ++i) {
      Tensor4 t({1, 3, config.input_height, config.input_width});
      for (float& v : t.values()) v = dist(rng);
      inputs.push_back(std::move(t));
    }
  }
  if (inputs.empty()) throw InputError("bench needs at least one image");

  const PatchSettings patches{config.patch_size, config.patch_stride};
  std::vector<RawFeatures> raw(inputs.size());
  auto t0 = Clock::now();
  for (std::size_t i = 0; i < inputs.size(); ++i) raw[i] = extract_raw_features(model, inputs[i], config.mode, patches);
  double extract_s = seconds_since(t0);

  std::optional<PcaModel> pca;
  if (config.pca_dim > 0) pca = fit_patch_pca(raw, config.pca_dim, config.pca_whiten);
  std::vector<ImageFeatures> features(inputs.size());
  t0 = Clock::now();
  for (std::size_t i = 0; i < inputs.size(); ++i) features[i] = project_features(raw[i], pca ? &*pca : nullptr);
  extract_s += seconds_since(t0);
  check_matcher_dim(model, static_cast<int>(features.front().patches.descriptors.rows()));

  const Matcher matcher = make_matcher(model, config);
  const std::size_t per_query = std::min<std::size_t>(static_cast<std::size_t>(config.candidates), inputs.size());
  t0 = Clock::now();
  double sink = 0.0;
  for (std::size_t q = 0; q < inputs.size(); ++q) {
    for (std::size_t c = 0; c < per_query; ++c) {
      sink += matcher.score(features[q].patches.descriptors, features[(q + c) % inputs.size()].patches.descriptors);
    }
  }
  const double match_s = seconds_since(t0);

  BenchReport r;
  r.images = static_cast<int>(inputs.size());
  r.patches_per_image = raw.front().grid.count();
  r.speed1_ms = 1000.0 * extract_s / double(inputs.size());
  r.speed2_ms = 1000.0 * match_s / double(inputs.size());
  const StageCosts costs = model_costs(model, config.mode, config.input_height, config.input_width, r.patches_per_image);
  r.stage1_params = costs.stage1_params;
  r.stage2_params = costs.stage2_params;
  r.stage1_mult_adds = costs.stage1_mult_adds;
  r.stage2_mult_adds = costs.stage2_mult_adds;
  r.backbone_params = count_params_flops(model.backbone, config.mode, config.input_height, config.input_width).params;
  r.model_bytes = encode_archive(model_to_archive(model), kWeightsMagic).size();

  log << std::fixed << std::setprecision(2) << "Speed1 " << r.speed1_ms << " ms/image  Speed2 " << r.speed2_ms
      << " ms/query (" << per_query << " candidates, " << r.patches_per_image << " patches)\n"
      << "Params " << double(r.stage1_params) / 1e6 << "M + " << double(r.stage2_params) / 1e6 << "M  "
      << "Size " << double(r.model_bytes) / (1024.0 * 1024.0) << " MB  "
      << "FLOPs " << 2.0 * double(r.stage1_mult_adds) / 1e9 << "G + " << 2.0 * double(r.stage2_mult_adds) / 1e9
      << "G\n";
  if (!std::isfinite(sink)) log << "warning: non-finite match score\n";
  return r;
}

void write_bench_json(const BenchReport& r, std::ostream& out) {
  out << nlohmann::json{{"schema", kReportSchema},
                        {"type", "bench"},
                        {"speed1_ms", r.speed1_ms},
                        {"speed2_ms", r.speed2_ms},
                        {"params", {{"stage1", r.stage1_params}, {"stage2", r.stage2_params}}},
                        {"backbone_params", r.backbone_params},
                        {"model_size_mb", double(r.model_bytes) / (1024.0 * 1024.0)},
                        {"theo_flops", {{"stage1", 2 * r.stage1_mult_adds}, {"stage2", 2 * r.stage2_mult_adds}}},
                        {"images", r.images},
                        {"patches_per_image", r.patches_per_image}}
             .dump()
      << '\n';
}

void cmd_init(const std::filesystem::path& weights_out, const RunConfig& config) {
  config.validate();
  RunConfig c = config;
  c.weights.clear();
  save_model(weights_out, resolve_model(c));
}

int cmd_selfcheck(const SelfCheckOptions& options, std::ostream& out) {
  const SelfCheckReport report = run_selfcheck(options);
  for (const auto& s : report.suites) {
    out << (s.passed ? "PASS " : "FAIL ") << std::left << std::setw(12) << s.module << ' ' << std::setw(34) << s.name
        << ' ' << s.detail << '\n';
  }
  out << (report.passed() ? "selfcheck passed\n" : "selfcheck FAILED\n");
  return report.passed() ? kExitOk : kExitVerifyFailed;
}

}  // namespace vpr
