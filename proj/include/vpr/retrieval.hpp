#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vpr/descriptor.hpp"
#include "vpr/matcher.hpp"

namespace vpr {

enum class GeoFrame { utm, wgs84 };

/// UTM easting/northing in meters, or WGS84 latitude/longitude in degrees.
struct GeoTag {
  GeoFrame frame = GeoFrame::utm;
  double a = 0.0;  // easting | latitude
  double b = 0.0;  // northing | longitude

  static GeoTag utm(double easting, double northing) { return {GeoFrame::utm, easting, northing}; }
  static GeoTag wgs84(double lat, double lon) { return {GeoFrame::wgs84, lat, lon}; }

  friend bool operator==(const GeoTag&, const GeoTag&) = default;
};

inline constexpr double kEarthRadiusMeters = 6371000.0;

/// Euclidean for UTM, haversine for WGS84. Mixed frames are rejected.
double geo_distance(const GeoTag& a, const GeoTag& b);

struct IndexEntry {
  std::string image_id;
  Eigen::VectorXf descriptor;
  GeoTag geotag;
};

/// Exhaustive global-descriptor index.
class DescriptorIndex {
 public:
  DescriptorIndex() = default;
  explicit DescriptorIndex(int dimension) : dimension_(dimension) {}

  void add(IndexEntry entry);

  int dimension() const { return dimension_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<IndexEntry>& entries() const { return entries_; }
  const IndexEntry* find(const std::string& image_id) const;

 private:
  int dimension_ = 0;
  std::vector<IndexEntry> entries_;
  std::map<std::string, std::size_t> by_id_;
};

enum class RankingStage { initial, reranked };

struct RankedImage {
  std::string image_id;
  double score = 0.0;
  /// Set by rerank when the candidate had no patch data and kept its initial score.
  bool flagged = false;
};

struct CandidateList {
  std::string query_id;
  std::vector<RankedImage> ranked;
  RankingStage stage = RankingStage::initial;
};

/// Top-k by descending inner product; ties go to the lexicographically lowest id.
CandidateList global_retrieve(const Eigen::VectorXf& query, const DescriptorIndex& index, int k,
                              const std::string& query_id = {});
CandidateList global_retrieve(const GlobalDescriptor& query, const DescriptorIndex& index, int k,
                              const std::string& query_id = {});

/// Returns nullptr when no patch data exists for the id.
using PatchLookup = std::function<const PatchDescriptorSet*(const std::string&)>;

/// Re-sorts candidates by matcher score, ties by initial rank.
CandidateList rerank(const PatchDescriptorSet& query, const CandidateList& candidates, const PatchLookup& patches,
                     const Matcher& matcher);

/// Fraction of queries with any of their top-k results within radius_m of the
/// query's geotag.
double recall_at_k(const std::vector<CandidateList>& results, const std::map<std::string, GeoTag>& query_tags,
                   const std::map<std::string, GeoTag>& database_tags, int k, double radius_m);

/// Pairs (i, j) whose query center mapped through `transform` lands within half
/// a cell of database center j.
GroundTruthMatches build_ground_truth_matches(const PatchGrid& query, const PatchGrid& database,
                                              const Eigen::Matrix3d& transform = Eigen::Matrix3d::Identity());

}  // namespace vpr
