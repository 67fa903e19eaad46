#include "labelseg/nifti_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <type_traits>
#include <vector>

namespace labelseg {
namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kDataOffset = 352;

struct GzCloser {
  void operator()(gzFile_s* f) const {
    if (f != nullptr) gzclose(f);
  }
};
using GzHandle = std::unique_ptr<gzFile_s, GzCloser>;

GzHandle open_for_read(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw IoError("no such file: " + path.string());
  }
  GzHandle f(gzopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open for reading: " + path.string());
  return f;
}

void read_exact(gzFile_s* f, void* dst, std::size_t n, const std::filesystem::path& path) {
  auto* out = static_cast<unsigned char*>(dst);
  while (n > 0) {
    const auto chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
    const int got = gzread(f, out, chunk);
    if (got <= 0) throw FormatError("truncated NIfTI file: " + path.string());
    out += got;
    n -= static_cast<std::size_t>(got);
  }
}

template <typename T>
T load(const unsigned char* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if (swap && sizeof(T) > 1) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

template <typename T>
void store(unsigned char* p, T v) {
  std::memcpy(p, &v, sizeof(T));
}

std::size_t element_size(NiftiDatatype t) {
  switch (t) {
    case NiftiDatatype::kUInt8:
    case NiftiDatatype::kInt8:
      return 1;
    case NiftiDatatype::kInt16:
    case NiftiDatatype::kUInt16:
      return 2;
    case NiftiDatatype::kInt32:
    case NiftiDatatype::kUInt32:
    case NiftiDatatype::kFloat32:
      return 4;
    case NiftiDatatype::kFloat64:
    case NiftiDatatype::kInt64:
    case NiftiDatatype::kUInt64:
      return 8;
  }
  return 0;
}

bool is_known_datatype(std::int16_t code) {
  switch (code) {
    case 2: case 4: case 8: case 16: case 64: case 256: case 512: case 768: case 1024: case 1280:
      return true;
    default:
      return false;
  }
}

struct ParsedHeader {
  NiftiHeader header;
  bool swap = false;
};

ParsedHeader parse_header(const unsigned char* raw, const std::filesystem::path& path) {
  ParsedHeader ph;
  const auto size_native = load<std::int32_t>(raw, false);
  if (size_native == static_cast<std::int32_t>(kHeaderSize)) {
    ph.swap = false;
  } else if (load<std::int32_t>(raw, true) == static_cast<std::int32_t>(kHeaderSize)) {
    ph.swap = true;
  } else {
    throw FormatError("not a NIfTI-1 file (sizeof_hdr != 348): " + path.string());
  }
  if (std::memcmp(raw + 344, "n+1", 3) != 0 && std::memcmp(raw + 344, "ni1", 3) != 0) {
    throw FormatError("bad NIfTI-1 magic: " + path.string());
  }
  if (std::memcmp(raw + 344, "ni1", 3) == 0) {
    throw FormatError("detached .hdr/.img NIfTI pairs are not supported: " + path.string());
  }
  NiftiHeader& h = ph.header;
  const bool s = ph.swap;
  for (int i = 0; i < 8; ++i) h.dim[i] = load<std::int16_t>(raw + 40 + 2 * i, s);
  const auto dt = load<std::int16_t>(raw + 70, s);
  if (!is_known_datatype(dt)) {
    throw FormatError("unsupported NIfTI datatype " + std::to_string(dt) + ": " + path.string());
  }
  h.datatype = static_cast<NiftiDatatype>(dt);
  h.bitpix = load<std::int16_t>(raw + 72, s);
  for (int i = 0; i < 8; ++i) h.pixdim[i] = load<float>(raw + 76 + 4 * i, s);
  h.vox_offset = load<float>(raw + 108, s);
  h.scl_slope = load<float>(raw + 112, s);
  h.scl_inter = load<float>(raw + 116, s);
  h.descrip.assign(reinterpret_cast<const char*>(raw + 148),
                   strnlen(reinterpret_cast<const char*>(raw + 148), 80));
  h.qform_code = load<std::int16_t>(raw + 252, s);
  h.sform_code = load<std::int16_t>(raw + 254, s);
  for (int i = 0; i < 3; ++i) {
    h.quatern[i] = load<float>(raw + 256 + 4 * i, s);
    h.qoffset[i] = load<float>(raw + 268 + 4 * i, s);
  }
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) h.srow[r][c] = load<float>(raw + 280 + 16 * r + 4 * c, s);
  }
  if (h.dim[0] < 1 || h.dim[0] > 7) {
    throw FormatError("invalid dim[0] = " + std::to_string(h.dim[0]) + ": " + path.string());
  }
  for (int i = 1; i <= h.dim[0]; ++i) {
    if (h.dim[i] < 1) throw FormatError("non-positive dimension in header: " + path.string());
  }
  return ph;
}

Shape3 shape_from_header(const NiftiHeader& h, const std::filesystem::path& path) {
  const int ndim = h.dim[0];
  for (int i = 4; i <= ndim; ++i) {
    if (h.dim[i] != 1) {
      throw FormatError("expected a 3D volume, got " + std::to_string(ndim) + "D with dim[" +
                        std::to_string(i) + "] = " + std::to_string(h.dim[i]) + ": " +
                        path.string());
    }
  }
  Shape3 s;
  s.nx = h.dim[1];
  s.ny = ndim >= 2 ? h.dim[2] : 1;
  s.nz = ndim >= 3 ? h.dim[3] : 1;
  return s;
}

Geometry geometry_from_header(const NiftiHeader& h) {
  Geometry g;
  for (int a = 0; a < 3; ++a) {
    const double p = std::abs(static_cast<double>(h.pixdim[a + 1]));
    g.spacing[a] = p > 0.0 ? p : 1.0;
  }
  g.affine.setIdentity();
  if (h.sform_code > 0) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) g.affine(r, c) = h.srow[r][c];
    }
  } else if (h.qform_code > 0) {
    const double b = h.quatern[0];
    const double c = h.quatern[1];
    const double d = h.quatern[2];
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    Eigen::Matrix3d rot;
    rot << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),
        2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),
        2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
    const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    Eigen::Vector3d scale(g.spacing[0], g.spacing[1], g.spacing[2] * qfac);
    g.affine.topLeftCorner<3, 3>() = rot * scale.asDiagonal();
    for (int r = 0; r < 3; ++r) g.affine(r, 3) = h.qoffset[r];
  } else {
    for (int a = 0; a < 3; ++a) g.affine(a, a) = g.spacing[a];
  }
  return g;
}

template <typename Out>
std::vector<Out> decode_data(const unsigned char* raw, std::size_t n, NiftiDatatype t, bool swap) {
  std::vector<Out> out(n);
  auto convert = [&](auto tag) {
    using In = decltype(tag);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<Out>(load<In>(raw + i * sizeof(In), swap));
  };
  switch (t) {
    case NiftiDatatype::kUInt8: convert(std::uint8_t{}); break;
    case NiftiDatatype::kInt8: convert(std::int8_t{}); break;
    case NiftiDatatype::kInt16: convert(std::int16_t{}); break;
    case NiftiDatatype::kUInt16: convert(std::uint16_t{}); break;
    case NiftiDatatype::kInt32: convert(std::int32_t{}); break;
    case NiftiDatatype::kUInt32: convert(std::uint32_t{}); break;
    case NiftiDatatype::kFloat32: convert(float{}); break;
    case NiftiDatatype::kFloat64: convert(double{}); break;
    case NiftiDatatype::kInt64: convert(std::int64_t{}); break;
    case NiftiDatatype::kUInt64: convert(std::uint64_t{}); break;
  }
  return out;
}

struct RawImage {
  NiftiHeader header;
  Shape3 shape;
  Geometry geometry;
  std::vector<double> values;
};

RawImage read_raw(const std::filesystem::path& path) {
  auto f = open_for_read(path);
  unsigned char raw[kHeaderSize];
  read_exact(f.get(), raw, kHeaderSize, path);
  const ParsedHeader ph = parse_header(raw, path);
  RawImage img;
  img.header = ph.header;
  img.shape = shape_from_header(ph.header, path);
  img.geometry = geometry_from_header(ph.header);
  const auto offset = static_cast<std::size_t>(ph.header.vox_offset);
  if (offset < kHeaderSize) throw FormatError("vox_offset inside header: " + path.string());
  std::vector<unsigned char> skip(offset - kHeaderSize);
  if (!skip.empty()) read_exact(f.get(), skip.data(), skip.size(), path);
  const std::size_t n = img.shape.size();
  const std::size_t es = element_size(ph.header.datatype);
  std::vector<unsigned char> buf(n * es);
  read_exact(f.get(), buf.data(), buf.size(), path);
  img.values = decode_data<double>(buf.data(), n, ph.header.datatype, ph.swap);
  const double slope = ph.header.scl_slope;
  if (slope != 0.0 && std::isfinite(slope) && !(slope == 1.0 && ph.header.scl_inter == 0.0f)) {
    for (double& v : img.values) v = v * slope + ph.header.scl_inter;
  }
  return img;
}

std::array<float, 3> quaternion_from_affine(const Geometry& g, float& qfac) {
  Eigen::Matrix3d dir = g.affine.topLeftCorner<3, 3>();
  for (int a = 0; a < 3; ++a) dir.col(a) /= dir.col(a).norm();
  qfac = 1.0f;
  if (dir.determinant() < 0) {
    qfac = -1.0f;
    dir.col(2) = -dir.col(2);
  }
  Eigen::Quaterniond q(dir);
  q.normalize();
  if (q.w() < 0) q.coeffs() = -q.coeffs();
  return {static_cast<float>(q.x()), static_cast<float>(q.y()), static_cast<float>(q.z())};
}

void write_raw(const std::filesystem::path& path, const Shape3& shape, const Geometry& geometry,
               NiftiDatatype type, const std::vector<unsigned char>& payload,
               const std::string& descrip) {
  geometry.validate();
  std::vector<unsigned char> hdr(kDataOffset, 0);
  store<std::int32_t>(hdr.data(), static_cast<std::int32_t>(kHeaderSize));
  hdr[38] = 'r';
  const std::array<std::int16_t, 8> dim = {3, static_cast<std::int16_t>(shape.nx),
                                           static_cast<std::int16_t>(shape.ny),
                                           static_cast<std::int16_t>(shape.nz), 1, 1, 1, 1};
  if (shape.nx > 32767 || shape.ny > 32767 || shape.nz > 32767) {
    throw ValidationError("dimension exceeds NIfTI-1 limit: " + path.string());
  }
  for (int i = 0; i < 8; ++i) store<std::int16_t>(hdr.data() + 40 + 2 * i, dim[i]);
  store<std::int16_t>(hdr.data() + 70, static_cast<std::int16_t>(type));
  store<std::int16_t>(hdr.data() + 72, static_cast<std::int16_t>(8 * element_size(type)));
  float qfac = 1.0f;
  const auto quat = quaternion_from_affine(geometry, qfac);
  const std::array<float, 8> pixdim = {qfac,
                                       static_cast<float>(geometry.spacing[0]),
                                       static_cast<float>(geometry.spacing[1]),
                                       static_cast<float>(geometry.spacing[2]),
                                       0.0f, 0.0f, 0.0f, 0.0f};
  for (int i = 0; i < 8; ++i) store<float>(hdr.data() + 76 + 4 * i, pixdim[i]);
  store<float>(hdr.data() + 108, static_cast<float>(kDataOffset));
  store<float>(hdr.data() + 112, 1.0f);
  store<float>(hdr.data() + 116, 0.0f);
  hdr[123] = 2;  // mm
  std::strncpy(reinterpret_cast<char*>(hdr.data() + 148), descrip.c_str(), 79);
  store<std::int16_t>(hdr.data() + 252, 1);
  store<std::int16_t>(hdr.data() + 254, 1);
  for (int i = 0; i < 3; ++i) {
    store<float>(hdr.data() + 256 + 4 * i, quat[i]);
    store<float>(hdr.data() + 268 + 4 * i, static_cast<float>(geometry.affine(i, 3)));
  }
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      store<float>(hdr.data() + 280 + 16 * r + 4 * c, static_cast<float>(geometry.affine(r, c)));
    }
  }
  std::memcpy(hdr.data() + 344, "n+1\0", 4);

  const bool gz = path.extension() == ".gz";
  GzHandle f(gzopen(path.c_str(), gz ? "wb6" : "wbT"));
  if (!f) throw IoError("cannot open for writing: " + path.string());
  auto put = [&](const unsigned char* p, std::size_t n) {
    while (n > 0) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
      if (gzwrite(f.get(), p, chunk) != static_cast<int>(chunk)) {
        throw IoError("write failed: " + path.string());
      }
      p += chunk;
      n -= chunk;
    }
  };
  put(hdr.data(), hdr.size());
  put(payload.data(), payload.size());
  if (gzclose(f.release()) != Z_OK) throw IoError("write failed on close: " + path.string());
}

template <typename T, typename Src>
std::vector<unsigned char> encode(const std::vector<Src>& values) {
  std::vector<unsigned char> out(values.size() * sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) {
    store<T>(out.data() + i * sizeof(T), static_cast<T>(values[i]));
  }
  return out;
}

}  // namespace

NiftiHeader read_nifti_header(const std::filesystem::path& path) {
  auto f = open_for_read(path);
  unsigned char raw[kHeaderSize];
  read_exact(f.get(), raw, kHeaderSize, path);
  return parse_header(raw, path).header;
}

Volume3D read_volume(const std::filesystem::path& path) {
  RawImage raw = read_raw(path);
  raw.geometry.validate();
  Volume3D vol(raw.shape, raw.geometry);
  for (std::size_t i = 0; i < raw.values.size(); ++i) vol.data[i] = static_cast<float>(raw.values[i]);
  return vol;
}

LabelVolume read_label_volume(const std::filesystem::path& path, const std::string& protocol_id) {
  RawImage raw = read_raw(path);
  raw.geometry.validate();
  std::string protocol = protocol_id;
  if (protocol.empty() && raw.header.descrip.rfind("protocol=", 0) == 0) protocol = raw.header.descrip.substr(9);
  LabelVolume vol(raw.shape, raw.geometry, 0, protocol);
  for (std::size_t i = 0; i < raw.values.size(); ++i) {
    const double v = raw.values[i];
    if (!(v >= 0.0) || v != std::floor(v) || v > std::numeric_limits<std::int32_t>::max()) {
      throw FormatError("label map holds a non-integral or negative value: " + path.string());
    }
    vol.data[i] = static_cast<std::int32_t>(v);
  }
  return vol;
}

void write_volume(const Volume3D& vol, const std::filesystem::path& path) {
  write_raw(path, vol.shape, vol.geometry, NiftiDatatype::kFloat32, encode<float>(vol.data), "");
}

void write_volume(const LabelVolume& vol, const std::filesystem::path& path) {
  std::int32_t lo = 0;
  std::int32_t hi = 0;
  if (!vol.data.empty()) {
    const auto [mn, mx] = std::minmax_element(vol.data.begin(), vol.data.end());
    lo = *mn;
    hi = *mx;
  }
  const std::string descrip = vol.protocol_id.empty() ? "" : "protocol=" + vol.protocol_id;
  if (lo >= 0 && hi <= 255) {
    write_raw(path, vol.shape, vol.geometry, NiftiDatatype::kUInt8, encode<std::uint8_t>(vol.data),
              descrip);
  } else if (lo >= -32768 && hi <= 32767) {
    write_raw(path, vol.shape, vol.geometry, NiftiDatatype::kInt16, encode<std::int16_t>(vol.data),
              descrip);
  } else {
    write_raw(path, vol.shape, vol.geometry, NiftiDatatype::kInt32, encode<std::int32_t>(vol.data),
              descrip);
  }
}

}  // namespace labelseg
