#include "vpr/io_store.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <system_error>

namespace vpr {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}
  void bytes(void* p, std::size_t n) {
    if (n > data_.size() - pos_) throw FormatError("archive: unexpected end of data at byte " + std::to_string(pos_));
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::uint64_t element_count(const std::vector<std::uint64_t>& dims) {
  std::uint64_t n = 1;
  for (auto d : dims) {
    if (d != 0 && n > UINT64_MAX / d) throw FormatError("archive: tensor dims overflow");
    n *= d;
  }
  return n;
}

template <typename T>
ArchiveTensor make_tensor(DType dtype, std::vector<std::uint64_t> dims, std::span<const T> values) {
  if (element_count(dims) != values.size()) {
    throw ShapeError("archive: " + std::to_string(values.size()) + " values do not match declared dims");
  }
  ArchiveTensor t;
  t.dtype = dtype;
  t.dims = std::move(dims);
  t.bytes.resize(values.size_bytes());
  if (!values.empty()) std::memcpy(t.bytes.data(), values.data(), values.size_bytes());
  return t;
}

template <typename T>
std::vector<T> read_values(const ArchiveTensor& t, DType expected, const std::string& name) {
  if (t.dtype != expected) throw FormatError("archive: tensor '" + name + "' has unexpected dtype");
  std::vector<T> out(t.bytes.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), t.bytes.data(), out.size() * sizeof(T));
  return out;
}

void check_magic(std::string_view magic) {
  if (magic.size() != 4) throw InputError("archive: magic must be four bytes");
}

std::string trim_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return std::string(s);
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

double parse_double(std::string_view field, const std::string& where) {
  double v = 0.0;
  const auto* first = field.data();
  const auto* last = field.data() + field.size();
  if (!field.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || field.empty()) {
    throw FormatError(where + ": '" + std::string(field) + "' is not a number");
  }
  if (!std::isfinite(v)) throw FormatError(where + ": coordinate is not finite");
  return v;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw FormatError("manifest: cannot format coordinate");
  return std::string(buf, ptr);
}

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
    case DType::i64: return 8;
  }
  throw FormatError("archive: unknown dtype code " + std::to_string(static_cast<std::uint32_t>(t)));
}

void TensorArchive::put(const std::string& name, ArchiveTensor tensor) {
  if (name.empty()) throw InputError("archive: tensor name is empty");
  if (element_count(tensor.dims) * dtype_size(tensor.dtype) != tensor.bytes.size()) {
    throw ShapeError("archive: tensor '" + name + "' byte size disagrees with dims");
  }
  if (const auto it = index_.find(name); it != index_.end()) {
    entries_[it->second].second = std::move(tensor);
    return;
  }
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(tensor));
}

void TensorArchive::put_f32(const std::string& name, std::vector<std::uint64_t> dims, std::span<const float> values) {
  put(name, make_tensor(DType::f32, std::move(dims), values));
}

void TensorArchive::put_f64(const std::string& name, std::vector<std::uint64_t> dims, std::span<const double> values) {
  put(name, make_tensor(DType::f64, std::move(dims), values));
}

void TensorArchive::put_i64(const std::string& name, std::span<const std::int64_t> values) {
  put(name, make_tensor(DType::i64, {values.size()}, values));
}

void TensorArchive::put_string(const std::string& name, std::string_view text) {
  std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
  put(name, make_tensor(DType::u8, {text.size()}, bytes));
}

const ArchiveTensor& TensorArchive::at(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw FormatError("archive: missing tensor '" + name + "'");
  return entries_[it->second].second;
}

std::vector<float> TensorArchive::get_f32(const std::string& name) const {
  return read_values<float>(at(name), DType::f32, name);
}
std::vector<double> TensorArchive::get_f64(const std::string& name) const {
  return read_values<double>(at(name), DType::f64, name);
}
std::vector<std::int64_t> TensorArchive::get_i64(const std::string& name) const {
  return read_values<std::int64_t>(at(name), DType::i64, name);
}
std::string TensorArchive::get_string(const std::string& name) const {
  const auto bytes = read_values<std::uint8_t>(at(name), DType::u8, name);
  return std::string(bytes.begin(), bytes.end());
}

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive, std::string_view magic) {
  check_magic(magic);
  Writer w;
  w.bytes(magic.data(), 4);
  w.u32(kArchiveVersion);
  w.u32(static_cast<std::uint32_t>(archive.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.entries()) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.dtype));
    w.u32(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) w.u64(d);
    w.u64(offset);
    w.u64(t.bytes.size());
    offset += t.bytes.size();
  }
  for (const auto& [name, t] : archive.entries()) w.bytes(t.bytes.data(), t.bytes.size());
  return w.take();
}

TensorArchive decode_archive(std::span<const std::uint8_t> bytes, std::string_view magic) {
  check_magic(magic);
  Reader r(bytes);
  char head[4];
  r.bytes(head, 4);
  if (std::string_view(head, 4) != magic) {
    throw FormatError("archive: bad magic, expected '" + std::string(magic) + "'");
  }
  const std::uint32_t version = r.u32();
  if (version != kArchiveVersion) {
    throw FormatError("archive: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kArchiveVersion) + ")");
  }
  const std::uint32_t count = r.u32();
  struct Row {
    std::string name;
    ArchiveTensor tensor;
    std::uint64_t offset;
    std::uint64_t nbytes;
  };
  std::vector<Row> rows;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    Row row;
    const std::uint32_t name_len = r.u32();
    if (name_len > r.remaining()) throw FormatError("archive: tensor name runs past end of data");
    row.name.resize(name_len);
    r.bytes(row.name.data(), name_len);
    if (!names.insert(row.name).second) throw FormatError("archive: duplicate tensor '" + row.name + "'");
    row.tensor.dtype = static_cast<DType>(r.u32());
    const std::size_t esize = dtype_size(row.tensor.dtype);
    const std::uint32_t rank = r.u32();
    if (rank > r.remaining() / 8) throw FormatError("archive: rank runs past end of data");
    for (std::uint32_t d = 0; d < rank; ++d) row.tensor.dims.push_back(r.u64());
    row.offset = r.u64();
    row.nbytes = r.u64();
    const std::uint64_t elems = element_count(row.tensor.dims);
    if (elems > UINT64_MAX / esize || elems * esize != row.nbytes) {
      throw FormatError("archive: tensor '" + row.name + "' declares " + std::to_string(row.nbytes) +
                        " bytes inconsistent with its dims");
    }
    rows.push_back(std::move(row));
  }
  const std::size_t payload_start = r.pos();
  const std::uint64_t payload_size = bytes.size() - payload_start;
  std::uint64_t expected_offset = 0;
  for (const auto& row : rows) {
    if (row.offset != expected_offset) throw FormatError("archive: tensor '" + row.name + "' has overlapping or gapped offset");
    if (row.nbytes > payload_size - row.offset) throw FormatError("archive: tensor '" + row.name + "' runs past end of payload");
    expected_offset += row.nbytes;
  }
  if (expected_offset != payload_size) throw FormatError("archive: payload size does not match tensor table");

  TensorArchive archive;
  for (auto& row : rows) {
    const auto* p = bytes.data() + payload_start + row.offset;
    row.tensor.bytes.assign(p, p + row.nbytes);
    archive.put(row.name, std::move(row.tensor));
  }
  return archive;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

void save_weights(const std::filesystem::path& path, const TensorArchive& archive) {
  write_file_atomic(path, encode_archive(archive, kWeightsMagic));
}

TensorArchive load_weights(const std::filesystem::path& path) { return decode_archive(read_file(path), kWeightsMagic); }

void put_matrix(TensorArchive& archive, const std::string& name, const Eigen::MatrixXf& m) {
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  archive.put_f32(name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
                  std::span<const float>(rm.data(), static_cast<std::size_t>(rm.size())));
}

Eigen::MatrixXf get_matrix(const TensorArchive& archive, const std::string& name) {
  const auto& t = archive.at(name);
  if (t.dims.size() != 2) throw FormatError("archive: '" + name + "' is not a matrix");
  const auto values = archive.get_f32(name);
  return Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), static_cast<Eigen::Index>(t.dims[0]), static_cast<Eigen::Index>(t.dims[1]));
}

void put_vector(TensorArchive& archive, const std::string& name, const Eigen::VectorXf& v) {
  archive.put_f32(name, {static_cast<std::uint64_t>(v.size())}, std::span<const float>(v.data(), static_cast<std::size_t>(v.size())));
}

Eigen::VectorXf get_vector(const TensorArchive& archive, const std::string& name) {
  const auto& t = archive.at(name);
  if (t.dims.size() != 1) throw FormatError("archive: '" + name + "' is not a vector");
  const auto values = archive.get_f32(name);
  return Eigen::Map<const Eigen::VectorXf>(values.data(), static_cast<Eigen::Index>(values.size()));
}

void put_tensor(TensorArchive& archive, const std::string& name, const Tensor4& t) {
  const auto& s = t.shape();
  archive.put_f32(name, {static_cast<std::uint64_t>(s.n), static_cast<std::uint64_t>(s.c),
                         static_cast<std::uint64_t>(s.h), static_cast<std::uint64_t>(s.w)},
                  t.values());
}

Tensor4 get_tensor(const TensorArchive& archive, const std::string& name) {
  const auto& t = archive.at(name);
  if (t.dims.size() != 4) throw FormatError("archive: '" + name + "' is not a rank-4 tensor");
  for (auto d : t.dims) {
    if (d > static_cast<std::uint64_t>(INT32_MAX)) throw FormatError("archive: '" + name + "' dimension too large");
  }
  return Tensor4({static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]), static_cast<int>(t.dims[2]),
                  static_cast<int>(t.dims[3])},
                 archive.get_f32(name));
}

TensorArchive index_to_archive(const IndexFile& file) {
  TensorArchive a;
  const auto& entries = file.index.entries();
  const int dim = file.index.dimension();
  std::string ids;
  std::vector<float> global;
  std::vector<double> tags;
  for (const auto& e : entries) {
    if (e.image_id.find('\0') != std::string::npos) throw InputError("index: image id contains NUL");
    ids += e.image_id;
    ids.push_back('\0');
    global.insert(global.end(), e.descriptor.data(), e.descriptor.data() + e.descriptor.size());
    tags.push_back(e.geotag.frame == GeoFrame::utm ? 0.0 : 1.0);
    tags.push_back(e.geotag.a);
    tags.push_back(e.geotag.b);
  }
  const std::int64_t header[] = {dim, static_cast<std::int64_t>(entries.size())};
  a.put_i64("index/header", header);
  a.put_string("index/ids", ids);
  a.put_f32("index/global", {entries.size(), static_cast<std::uint64_t>(dim)}, global);
  a.put_f64("index/geotags", {entries.size(), 3}, tags);

  const std::int64_t meta[] = {file.meta.input_height, file.meta.input_width, file.meta.patch_size,
                               file.meta.patch_stride, file.meta.clusters,
                               std::bit_cast<std::int64_t>(file.meta.model_fingerprint)};
  a.put_i64("meta/extraction", meta);

  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto it = file.patches.find(entries[i].image_id);
    if (it == file.patches.end()) continue;
    const PatchDescriptorSet& set = it->second;
    const std::string prefix = "patches/" + std::to_string(i);
    const std::int64_t grid[] = {set.grid.height, set.grid.width, set.grid.patch_w, set.grid.patch_h, set.grid.stride};
    a.put_i64(prefix + "/grid", grid);
    // column-major dim x n_p is row-major n_p x dim
    a.put_f32(prefix + "/descriptors",
              {static_cast<std::uint64_t>(set.count()), static_cast<std::uint64_t>(set.dim())},
              std::span<const float>(set.descriptors.data(), static_cast<std::size_t>(set.descriptors.size())));
  }
  for (const auto& [id, set] : file.patches) {
    if (file.index.find(id) == nullptr) throw InputError("index: patch set for unknown image '" + id + "'");
  }

  if (file.pca) {
    put_matrix(a, "pca/projection", file.pca->projection);
    put_vector(a, "pca/mean", file.pca->mean);
    a.put_f64("pca/eigenvalues", {static_cast<std::uint64_t>(file.pca->eigenvalues.size())},
              std::span<const double>(file.pca->eigenvalues.data(), static_cast<std::size_t>(file.pca->eigenvalues.size())));
    const std::int64_t whiten[] = {file.pca->whiten ? 1 : 0};
    a.put_i64("pca/whiten", whiten);
  }
  return a;
}

IndexFile index_from_archive(const TensorArchive& a, int expected_dim) {
  IndexFile file;
  const auto header = a.get_i64("index/header");
  if (header.size() != 2 || header[0] < 0 || header[1] < 0) throw FormatError("index: malformed header");
  const int dim = static_cast<int>(header[0]);
  const std::size_t count = static_cast<std::size_t>(header[1]);
  if (expected_dim >= 0 && dim != expected_dim) {
    throw ShapeError("index: descriptor dimension " + std::to_string(dim) + " does not match expected " +
                     std::to_string(expected_dim));
  }
  const auto& gt = a.at("index/global");
  if (gt.dims != std::vector<std::uint64_t>{count, static_cast<std::uint64_t>(dim)}) {
    throw ShapeError("index: global descriptor table does not match header dimension");
  }
  const auto global = a.get_f32("index/global");
  const auto tags = a.get_f64("index/geotags");
  if (tags.size() != 3 * count) throw FormatError("index: geotag table has wrong size");
  const std::string ids = a.get_string("index/ids");

  std::vector<std::string> id_list;
  std::size_t start = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == '\0') {
      id_list.push_back(ids.substr(start, i - start));
      start = i + 1;
    }
  }
  if (start != ids.size() || id_list.size() != count) throw FormatError("index: id table does not match entry count");

  const auto meta = a.get_i64("meta/extraction");
  if (meta.size() != 6) throw FormatError("index: malformed extraction metadata");
  file.meta = {static_cast<int>(meta[0]), static_cast<int>(meta[1]), static_cast<int>(meta[2]),
               static_cast<int>(meta[3]), static_cast<int>(meta[4]), std::bit_cast<std::uint64_t>(meta[5])};

  file.index = DescriptorIndex(dim);
  for (std::size_t i = 0; i < count; ++i) {
    IndexEntry e;
    e.image_id = id_list[i];
    e.descriptor = Eigen::Map<const Eigen::VectorXf>(global.data() + i * dim, dim);
    const double frame = tags[3 * i];
    if (frame != 0.0 && frame != 1.0) throw FormatError("index: unknown geotag frame");
    e.geotag = {frame == 0.0 ? GeoFrame::utm : GeoFrame::wgs84, tags[3 * i + 1], tags[3 * i + 2]};
    file.index.add(std::move(e));

    const std::string prefix = "patches/" + std::to_string(i);
    if (!a.contains(prefix + "/grid")) continue;
    const auto g = a.get_i64(prefix + "/grid");
    if (g.size() != 5) throw FormatError("index: malformed patch grid for entry " + std::to_string(i));
    PatchDescriptorSet set;
    set.grid = make_patch_grid(static_cast<int>(g[0]), static_cast<int>(g[1]), static_cast<int>(g[2]),
                               static_cast<int>(g[3]), static_cast<int>(g[4]));
    const auto& dt = a.at(prefix + "/descriptors");
    if (dt.dims.size() != 2 || dt.dims[0] != static_cast<std::uint64_t>(set.grid.count())) {
      throw ShapeError("index: patch descriptor count does not match grid for entry " + std::to_string(i));
    }
    if (dt.dims[1] != static_cast<std::uint64_t>(dim)) {
      throw ShapeError("index: patch descriptor dimension " + std::to_string(dt.dims[1]) + " differs from index dimension " +
                       std::to_string(dim));
    }
    const auto values = a.get_f32(prefix + "/descriptors");
    set.descriptors = Eigen::Map<const Eigen::MatrixXf>(values.data(), dim, set.grid.count());
    file.patches.emplace(id_list[i], std::move(set));
  }

  if (a.contains("pca/projection")) {
    PcaModel pca;
    pca.projection = get_matrix(a, "pca/projection");
    pca.mean = get_vector(a, "pca/mean");
    const auto ev = a.get_f64("pca/eigenvalues");
    pca.eigenvalues = Eigen::Map<const Eigen::VectorXd>(ev.data(), static_cast<Eigen::Index>(ev.size()));
    const auto whiten = a.get_i64("pca/whiten");
    pca.whiten = !whiten.empty() && whiten[0] != 0;
    pca.validate();
    if (pca.output_dim() != dim) throw ShapeError("index: PCA output dimension differs from index dimension");
    file.pca = std::move(pca);
  }
  return file;
}

void save_index(const std::filesystem::path& path, const IndexFile& file) {
  write_file_atomic(path, encode_archive(index_to_archive(file), kIndexMagic));
}

IndexFile load_index(const std::filesystem::path& path, int expected_dim) {
  return index_from_archive(decode_archive(read_file(path), kIndexMagic), expected_dim);
}

std::vector<ManifestRecord> parse_manifest(std::string_view text, const std::string& source) {
  std::vector<ManifestRecord> records;
  std::set<std::string> ids;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  GeoFrame frame = GeoFrame::utm;
  bool have_header = false;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string line = trim_cr(text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    if (!have_header) {
      if (line == "image_id,path,easting,northing,split") {
        frame = GeoFrame::utm;
      } else if (line == "image_id,path,lat,lon,split") {
        frame = GeoFrame::wgs84;
      } else {
        throw FormatError(where + ": expected header 'image_id,path,easting,northing,split'");
      }
      have_header = true;
      continue;
    }
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != 5) {
      throw FormatError(where + ": expected 5 fields, found " + std::to_string(fields.size()));
    }
    ManifestRecord rec;
    rec.image_id = std::string(fields[0]);
    rec.path = std::string(fields[1]);
    if (rec.image_id.empty()) throw FormatError(where + ": empty image_id");
    rec.geotag = {frame, parse_double(fields[2], where), parse_double(fields[3], where)};
    if (fields[4] == "query") {
      rec.split = Split::query;
    } else if (fields[4] == "database") {
      rec.split = Split::database;
    } else {
      throw FormatError(where + ": split must be 'query' or 'database'");
    }
    if (!ids.insert(rec.image_id).second) throw FormatError(where + ": duplicate image_id '" + rec.image_id + "'");
    records.push_back(std::move(rec));
  }
  if (!have_header) throw FormatError(source + ": empty manifest");
  return records;
}

std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_manifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), path.string());
}

std::string format_manifest(const std::vector<ManifestRecord>& records) {
  const GeoFrame frame = records.empty() ? GeoFrame::utm : records.front().geotag.frame;
  std::string out = frame == GeoFrame::utm ? "image_id,path,easting,northing,split\n" : "image_id,path,lat,lon,split\n";
  for (const auto& r : records) {
    if (r.geotag.frame != frame) throw InputError("manifest: records mix coordinate frames");
    for (const auto* s : {&r.image_id, &r.path}) {
      if (s->find_first_of(",\n\r") != std::string::npos) throw InputError("manifest: field contains a separator");
    }
    out += r.image_id + "," + r.path + "," + format_double(r.geotag.a) + "," + format_double(r.geotag.b) + "," +
           (r.split == Split::query ? "query" : "database") + "\n";
  }
  return out;
}

void save_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  const std::string text = format_manifest(records);
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

namespace {

Tensor4 decode_ppm(std::span<const std::uint8_t> bytes, const std::string& name, const ImageOptions& options) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') ++pos;
    if (start == pos) throw FormatError(name + ": truncated PPM header");
    return std::string(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.begin() + static_cast<std::ptrdiff_t>(pos));
  };
  auto header_int = [&](const char* what) {
    const std::string tok = next_token();
    int v = 0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size() || v <= 0) {
      throw FormatError(name + ": invalid PPM " + std::string(what) + " '" + tok + "'");
    }
    return v;
  };
  if (next_token() != "P6") throw FormatError(name + ": unsupported image format (expected binary PPM P6)");
  const int width = header_int("width");
  const int height = header_int("height");
  const int maxval = header_int("maxval");
  if (maxval > 255) throw FormatError(name + ": only 8-bit PPM is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError(name + ": truncated PPM header");
  ++pos;
  const std::size_t pixels = static_cast<std::size_t>(width) * height;
  if (bytes.size() - pos < pixels * 3) throw FormatError(name + ": truncated PPM pixel data");

  Tensor4 img({1, 3, height, width});
  for (int c = 0; c < 3; ++c) {
    float* plane = img.plane(0, c);
    for (std::size_t i = 0; i < pixels; ++i) {
      const float v = static_cast<float>(bytes[pos + 3 * i + c]) / static_cast<float>(maxval);
      plane[i] = (v - options.mean[c]) / options.stddev[c];
    }
  }
  return img;
}

Tensor4 decode_t4(std::span<const std::uint8_t> bytes, const std::string& name) {
  Reader r(bytes);
  char head[4];
  try {
    r.bytes(head, 4);
    if (std::string_view(head, 4) != "VPT4") throw FormatError(name + ": bad .t4 magic");
    Shape4 s;
    s.n = static_cast<int>(r.u32());
    s.c = static_cast<int>(r.u32());
    s.h = static_cast<int>(r.u32());
    s.w = static_cast<int>(r.u32());
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) throw FormatError(name + ": .t4 dimension too large");
    if (r.remaining() != s.count() * sizeof(float)) throw FormatError(name + ": .t4 payload size does not match dims");
    std::vector<float> values(s.count());
    r.bytes(values.data(), values.size() * sizeof(float));
    return Tensor4(s, std::move(values));
  } catch (const FormatError& e) {
    throw FormatError(std::string(e.what()).starts_with(name) ? e.what() : name + ": " + e.what());
  }
}

}  // namespace

Tensor4 load_image(const std::filesystem::path& path, const ImageOptions& options) {
  const auto bytes = read_file(path);
  const std::string name = path.string();
  Tensor4 img;
  if (path.extension() == ".t4") {
    img = decode_t4(bytes, name);
  } else if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') {
    img = decode_ppm(bytes, name, options);
  } else {
    throw FormatError(name + ": unsupported image format (expected binary PPM P6 or .t4)");
  }
  const int h = options.height > 0 ? options.height : img.height();
  const int w = options.width > 0 ? options.width : img.width();
  return resize_bilinear(img, h, w);
}

void save_ppm(const std::filesystem::path& path, int height, int width, std::span<const std::uint8_t> rgb) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3) throw ShapeError("save_ppm: pixel buffer size mismatch");
  const std::string header = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), rgb.begin(), rgb.end());
  write_file_atomic(path, bytes);
}

void save_t4(const std::filesystem::path& path, const Tensor4& t) {
  Writer w;
  w.bytes("VPT4", 4);
  w.u32(static_cast<std::uint32_t>(t.batch()));
  w.u32(static_cast<std::uint32_t>(t.channels()));
  w.u32(static_cast<std::uint32_t>(t.height()));
  w.u32(static_cast<std::uint32_t>(t.width()));
  w.bytes(t.values().data(), t.size() * sizeof(float));
  write_file_atomic(path, w.take());
}

Tensor4 load_t4(const std::filesystem::path& path) { return decode_t4(read_file(path), path.string()); }

}  // namespace vpr
