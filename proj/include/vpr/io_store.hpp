#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vpr/descriptor.hpp"
#include "vpr/retrieval.hpp"
#include "vpr/tensor.hpp"

namespace vpr {

// Container layout (all integers little-endian):
//   magic[4] | u32 version | u32 count
//   count x { u32 name_len | name | u32 dtype | u32 rank | u64 dims[rank] | u64 offset | u64 nbytes }
//   payload (offsets relative to payload start, packed in table order)

inline constexpr std::string_view kWeightsMagic = "VPRW";
inline constexpr std::string_view kIndexMagic = "VPRI";
inline constexpr std::uint32_t kArchiveVersion = 1;

enum class DType : std::uint32_t { f32 = 0, f64 = 1, u8 = 2, i64 = 3 };

std::size_t dtype_size(DType t);

struct ArchiveTensor {
  DType dtype = DType::f32;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> bytes;

  friend bool operator==(const ArchiveTensor&, const ArchiveTensor&) = default;
};

/// Named tensors in insertion order.
class TensorArchive {
 public:
  void put_f32(const std::string& name, std::vector<std::uint64_t> dims, std::span<const float> values);
  void put_f64(const std::string& name, std::vector<std::uint64_t> dims, std::span<const double> values);
  void put_i64(const std::string& name, std::span<const std::int64_t> values);
  void put_string(const std::string& name, std::string_view text);
  void put(const std::string& name, ArchiveTensor tensor);

  bool contains(const std::string& name) const { return index_.contains(name); }
  const ArchiveTensor& at(const std::string& name) const;
  std::vector<float> get_f32(const std::string& name) const;
  std::vector<double> get_f64(const std::string& name) const;
  std::vector<std::int64_t> get_i64(const std::string& name) const;
  std::string get_string(const std::string& name) const;

  const std::vector<std::pair<std::string, ArchiveTensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  friend bool operator==(const TensorArchive& a, const TensorArchive& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<std::pair<std::string, ArchiveTensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive, std::string_view magic);
TensorArchive decode_archive(std::span<const std::uint8_t> bytes, std::string_view magic);

/// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

void save_weights(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_weights(const std::filesystem::path& path);

// Matrix helpers: stored row-major with dims (rows, cols).
void put_matrix(TensorArchive& archive, const std::string& name, const Eigen::MatrixXf& m);
Eigen::MatrixXf get_matrix(const TensorArchive& archive, const std::string& name);
void put_vector(TensorArchive& archive, const std::string& name, const Eigen::VectorXf& v);
Eigen::VectorXf get_vector(const TensorArchive& archive, const std::string& name);
void put_tensor(TensorArchive& archive, const std::string& name, const Tensor4& t);
Tensor4 get_tensor(const TensorArchive& archive, const std::string& name);

/// Patch-extraction settings recorded with an index so queries are processed identically.
struct ExtractionMeta {
  int input_height = 0;
  int input_width = 0;
  int patch_size = 2;
  int patch_stride = 1;
  int clusters = 0;
  /// FNV-1a hash of the encoded weights used for extraction.
  std::uint64_t model_fingerprint = 0;

  friend bool operator==(const ExtractionMeta&, const ExtractionMeta&) = default;
};

struct IndexFile {
  DescriptorIndex index;
  std::map<std::string, PatchDescriptorSet> patches;
  std::optional<PcaModel> pca;
  ExtractionMeta meta;
};

TensorArchive index_to_archive(const IndexFile& file);
IndexFile index_from_archive(const TensorArchive& archive, int expected_dim = -1);
void save_index(const std::filesystem::path& path, const IndexFile& file);
/// expected_dim < 0 accepts whatever dimension the file declares.
IndexFile load_index(const std::filesystem::path& path, int expected_dim = -1);

enum class Split { query, database };

struct ManifestRecord {
  std::string image_id;
  std::string path;
  GeoTag geotag;
  Split split = Split::database;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

/// CSV with header `image_id,path,easting,northing,split` (UTM) or
/// `image_id,path,lat,lon,split` (WGS84). `source` names the input in errors.
std::vector<ManifestRecord> parse_manifest(std::string_view text, const std::string& source = "manifest");
std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path);
/// All records must share one frame.
std::string format_manifest(const std::vector<ManifestRecord>& records);
void save_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);

struct ImageOptions {
  /// Target network input; 0 keeps the stored size.
  int height = 480;
  int width = 640;
  std::array<float, 3> mean = {0.485f, 0.456f, 0.406f};
  std::array<float, 3> stddev = {0.229f, 0.224f, 0.225f};
};

/// Binary PPM (P6, maxval <= 255) or a `.t4` tensor file. PPM pixels are
/// scaled to [0,1] and normalized per channel; both are resized when the
/// stored size differs from the target.
Tensor4 load_image(const std::filesystem::path& path, const ImageOptions& options = {});

void save_ppm(const std::filesystem::path& path, int height, int width, std::span<const std::uint8_t> rgb);

// .t4 layout: "VPT4" | u32 n | u32 c | u32 h | u32 w | little-endian f32 payload
void save_t4(const std::filesystem::path& path, const Tensor4& t);
Tensor4 load_t4(const std::filesystem::path& path);

}  // namespace vpr
