#include "vpr/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace vpr {

double geo_distance(const GeoTag& a, const GeoTag& b) {
  if (a.frame != b.frame) throw InputError("geo_distance: geotags are in different frames");
  if (a.frame == GeoFrame::utm) return std::hypot(a.a - b.a, a.b - b.b);
  constexpr double rad = std::numbers::pi / 180.0;
  const double phi1 = a.a * rad;
  const double phi2 = b.a * rad;
  const double dphi = (b.a - a.a) * rad;
  const double dlambda = (b.b - a.b) * rad;
  const double s1 = std::sin(dphi / 2.0);
  const double s2 = std::sin(dlambda / 2.0);
  const double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  return 2.0 * kEarthRadiusMeters * std::asin(std::min(1.0, std::sqrt(h)));
}

void DescriptorIndex::add(IndexEntry entry) {
  if (entries_.empty() && dimension_ == 0) dimension_ = static_cast<int>(entry.descriptor.size());
  if (entry.descriptor.size() != dimension_) {
    throw ShapeError("DescriptorIndex: descriptor of dimension " + std::to_string(entry.descriptor.size()) +
                     " added to an index of dimension " + std::to_string(dimension_));
  }
  if (by_id_.contains(entry.image_id)) throw InputError("DescriptorIndex: duplicate image id '" + entry.image_id + "'");
  by_id_.emplace(entry.image_id, entries_.size());
  entries_.push_back(std::move(entry));
}

const IndexEntry* DescriptorIndex::find(const std::string& image_id) const {
  const auto it = by_id_.find(image_id);
  return it == by_id_.end() ? nullptr : &entries_[it->second];
}

CandidateList global_retrieve(const Eigen::VectorXf& query, const DescriptorIndex& index, int k,
                              const std::string& query_id) {
  if (index.empty()) throw InputError("global_retrieve: index is empty");
  if (k < 1) throw InputError("global_retrieve: k must be at least 1");
  if (query.size() != index.dimension()) {
    throw ShapeError("global_retrieve: query dimension " + std::to_string(query.size()) + ", index dimension " +
                     std::to_string(index.dimension()));
  }
  const auto& entries = index.entries();
  std::vector<double> scores(entries.size());
  const Eigen::VectorXd q = query.cast<double>();
  for (std::size_t i = 0; i < entries.size(); ++i) scores[i] = q.dot(entries[i].descriptor.cast<double>());

  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), 0);
  const auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return entries[a].image_id < entries[b].image_id;
  };
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), better);

  CandidateList out;
  out.query_id = query_id;
  out.stage = RankingStage::initial;
  for (std::size_t r = 0; r < keep; ++r) out.ranked.push_back({entries[order[r]].image_id, scores[order[r]], false});
  return out;
}

CandidateList global_retrieve(const GlobalDescriptor& query, const DescriptorIndex& index, int k,
                              const std::string& query_id) {
  return global_retrieve(query.values, index, k, query_id);
}

CandidateList rerank(const PatchDescriptorSet& query, const CandidateList& candidates, const PatchLookup& patches,
                     const Matcher& matcher) {
  struct Scored {
    RankedImage image;
    std::size_t initial_rank;
  };
  std::vector<Scored> scored;
  scored.reserve(candidates.ranked.size());
  for (std::size_t r = 0; r < candidates.ranked.size(); ++r) {
    RankedImage img = candidates.ranked[r];
    const PatchDescriptorSet* set = patches ? patches(img.image_id) : nullptr;
    if (set == nullptr) {
      img.flagged = true;
    } else {
      img.score = matcher.score(query.descriptors, set->descriptors);
      img.flagged = false;
    }
    scored.push_back({std::move(img), r});
  }
  std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.image.score != b.image.score) return a.image.score > b.image.score;
    return a.initial_rank < b.initial_rank;
  });
  CandidateList out;
  out.query_id = candidates.query_id;
  out.stage = RankingStage::reranked;
  for (auto& s : scored) out.ranked.push_back(std::move(s.image));
  return out;
}

double recall_at_k(const std::vector<CandidateList>& results, const std::map<std::string, GeoTag>& query_tags,
                   const std::map<std::string, GeoTag>& database_tags, int k, double radius_m) {
  if (results.empty()) throw InputError("recall_at_k: no queries");
  if (k < 1) throw InputError("recall_at_k: k must be at least 1");
  std::size_t correct = 0;
  for (const auto& list : results) {
    const auto q = query_tags.find(list.query_id);
    if (q == query_tags.end()) throw InputError("recall_at_k: query '" + list.query_id + "' has no geotag");
    const std::size_t depth = std::min<std::size_t>(static_cast<std::size_t>(k), list.ranked.size());
    for (std::size_t r = 0; r < depth; ++r) {
      const auto d = database_tags.find(list.ranked[r].image_id);
      if (d == database_tags.end()) {
        throw InputError("recall_at_k: retrieved image '" + list.ranked[r].image_id + "' has no geotag");
      }
      if (geo_distance(q->second, d->second) <= radius_m) {
        ++correct;
        break;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(results.size());
}

GroundTruthMatches build_ground_truth_matches(const PatchGrid& query, const PatchGrid& database,
                                              const Eigen::Matrix3d& transform) {
  GroundTruthMatches g;
  for (std::size_t i = 0; i < query.centers.size(); ++i) {
    const Eigen::Vector3d p = transform * Eigen::Vector3d(query.centers[i].x, query.centers[i].y, 1.0);
    if (std::abs(p.z()) < 1e-12) continue;
    const double x = p.x() / p.z();
    const double y = p.y() / p.z();
    for (std::size_t j = 0; j < database.centers.size(); ++j) {
      if (std::hypot(x - database.centers[j].x, y - database.centers[j].y) < 0.5) {
        g.pairs.emplace_back(static_cast<int>(i), static_cast<int>(j));
      }
    }
  }
  return g;
}

}  // namespace vpr
