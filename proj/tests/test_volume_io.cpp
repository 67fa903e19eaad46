#include <cstring>
#include <fstream>

#include "doctest.h"
#include "labelseg/manifest.hpp"
#include "labelseg/nifti_io.hpp"
#include "support.hpp"

using namespace labelseg;
using testing::TempDir;

namespace {

Geometry oblique_geometry() {
  Geometry g;
  g.spacing = {0.8, 0.9, 1.2};
  const Eigen::Matrix3d r = Eigen::AngleAxisd(0.3, Eigen::Vector3d(1, 2, 3).normalized()).toRotationMatrix();
  g.affine.setIdentity();
  g.affine.topLeftCorner<3, 3>() = r * g.spacing.asDiagonal();
  g.affine.topRightCorner<3, 1>() = Eigen::Vector3d(-40.5, 12.25, 7.0);
  return g;
}

Volume3D ramp(const Shape3& s, const Geometry& g) {
  Volume3D v(s, g);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(i) * 0.25f - 3.0f;
  return v;
}

// Minimal hand-rolled NIfTI-1 writer used as an independent reference for the reader.
template <typename T>
void put(std::vector<unsigned char>& buf, std::size_t off, T v, bool big_endian) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if (big_endian) std::reverse(bytes, bytes + sizeof(T));
  std::memcpy(buf.data() + off, bytes, sizeof(T));
}

std::vector<unsigned char> raw_header(const std::array<std::int16_t, 8>& dim, std::int16_t datatype,
                                      std::int16_t bitpix, bool big_endian, float slope = 0.0f,
                                      float inter = 0.0f) {
  std::vector<unsigned char> h(352, 0);
  put<std::int32_t>(h, 0, 348, big_endian);
  for (int i = 0; i < 8; ++i) put<std::int16_t>(h, 40 + 2 * static_cast<std::size_t>(i), dim[static_cast<std::size_t>(i)], big_endian);
  put<std::int16_t>(h, 70, datatype, big_endian);
  put<std::int16_t>(h, 72, bitpix, big_endian);
  const float pixdim[8] = {1.0f, 2.0f, 3.0f, 4.0f, 1.0f, 0, 0, 0};
  for (int i = 0; i < 8; ++i) put<float>(h, 76 + 4 * static_cast<std::size_t>(i), pixdim[i], big_endian);
  put<float>(h, 108, 352.0f, big_endian);
  put<float>(h, 112, slope, big_endian);
  put<float>(h, 116, inter, big_endian);
  put<std::int16_t>(h, 254, 1, big_endian);  // sform_code
  const float srow[3][4] = {{2, 0, 0, 10}, {0, 3, 0, 20}, {0, 0, 4, 30}};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) put<float>(h, 280 + 16 * static_cast<std::size_t>(r) + 4 * static_cast<std::size_t>(c), srow[r][c], big_endian);
  }
  std::memcpy(h.data() + 344, "n+1\0", 4);
  return h;
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_CASE("float volume round-trips through .nii and .nii.gz") {
  TempDir tmp;
  const Volume3D v = ramp({5, 4, 3}, oblique_geometry());
  for (const char* name : {"a.nii", "a.nii.gz"}) {
    write_volume(v, tmp / name);
    const Volume3D r = read_volume(tmp / name);
    CHECK(r.shape == v.shape);
    CHECK(r.data == v.data);
    CHECK(r.geometry.approx_equal(v.geometry, 1e-5));
    for (int a = 0; a < 3; ++a) CHECK(r.geometry.spacing[a] == doctest::Approx(v.geometry.spacing[a]).epsilon(1e-6));
  }
}

TEST_CASE("gzip output is actually compressed and byte-identical across writes") {
  TempDir tmp;
  const Volume3D v(Shape3{16, 16, 16}, Geometry{}, 0.0f);
  write_volume(v, tmp / "z.nii.gz");
  write_volume(v, tmp / "z2.nii.gz");
  write_volume(v, tmp / "z.nii");
  CHECK(std::filesystem::file_size(tmp / "z.nii.gz") < std::filesystem::file_size(tmp / "z.nii") / 4);
  std::ifstream a(tmp / "z.nii.gz", std::ios::binary), b(tmp / "z2.nii.gz", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
}

TEST_CASE("label volumes keep ids, choose a narrow type, and record the protocol") {
  TempDir tmp;
  LabelVolume l(Shape3{4, 3, 2}, oblique_geometry(), 0, "dhcp_partial");
  for (std::size_t i = 0; i < l.data.size(); ++i) l.data[i] = static_cast<std::int32_t>(i % 5);
  write_volume(l, tmp / "l.nii.gz");
  CHECK(read_nifti_header(tmp / "l.nii.gz").datatype == NiftiDatatype::kUInt8);
  const LabelVolume r = read_label_volume(tmp / "l.nii.gz");
  CHECK(r.data == l.data);
  CHECK(r.protocol_id == "dhcp_partial");

  l.data[0] = 300;
  write_volume(l, tmp / "wide.nii");
  CHECK(read_nifti_header(tmp / "wide.nii").datatype == NiftiDatatype::kInt16);
  CHECK(read_label_volume(tmp / "wide.nii").data == l.data);
}

TEST_CASE("big-endian float file is decoded") {
  TempDir tmp;
  auto bytes = raw_header({3, 2, 2, 1, 1, 1, 1, 1}, 16, 32, true);
  const float vals[4] = {1.5f, -2.0f, 3.25f, 1e6f};
  for (float v : vals) {
    unsigned char b[4];
    std::memcpy(b, &v, 4);
    std::reverse(b, b + 4);
    bytes.insert(bytes.end(), b, b + 4);
  }
  write_bytes(tmp / "be.nii", bytes);
  const Volume3D v = read_volume(tmp / "be.nii");
  CHECK(v.shape == Shape3{2, 2, 1});
  CHECK(v.data == std::vector<float>(vals, vals + 4));
  CHECK(v.geometry.voxel_to_world({1, 1, 0}).isApprox(Eigen::Vector3d(12, 23, 30)));
}

TEST_CASE("singleton fourth axis is squeezed and scaling applied") {
  TempDir tmp;
  auto bytes = raw_header({4, 2, 1, 1, 1, 1, 1, 1}, 4, 16, false, 2.0f, 1.0f);
  const std::int16_t vals[2] = {3, -4};
  bytes.resize(bytes.size() + 4);
  std::memcpy(bytes.data() + 352, vals, 4);
  write_bytes(tmp / "4d.nii", bytes);
  const Volume3D v = read_volume(tmp / "4d.nii");
  CHECK(v.shape == Shape3{2, 1, 1});
  CHECK(v.data == std::vector<float>{7.0f, -7.0f});
}

TEST_CASE("true 4D volumes and malformed files are rejected") {
  TempDir tmp;
  auto four_d = raw_header({4, 1, 1, 1, 2, 1, 1, 1}, 16, 32, false);
  four_d.resize(four_d.size() + 8);
  write_bytes(tmp / "t.nii", four_d);
  CHECK_THROWS_AS(read_volume(tmp / "t.nii"), FormatError);

  auto trunc = raw_header({3, 4, 4, 4, 1, 1, 1, 1}, 16, 32, false);
  write_bytes(tmp / "trunc.nii", trunc);
  CHECK_THROWS_AS(read_volume(tmp / "trunc.nii"), FormatError);

  write_bytes(tmp / "junk.nii", std::vector<unsigned char>(400, 7));
  CHECK_THROWS_AS(read_volume(tmp / "junk.nii"), FormatError);
  CHECK_THROWS_AS(read_volume(tmp / "missing.nii"), IoError);
}

TEST_CASE("non-integral or negative label values are rejected") {
  TempDir tmp;
  Volume3D v(Shape3{2, 1, 1}, Geometry{}, 1.0f);
  v.data[1] = 1.5f;
  write_volume(v, tmp / "frac.nii");
  CHECK_THROWS_AS(read_label_volume(tmp / "frac.nii"), FormatError);
  v.data[1] = -1.0f;
  write_volume(v, tmp / "neg.nii");
  CHECK_THROWS_AS(read_label_volume(tmp / "neg.nii"), FormatError);
}

TEST_CASE("manifest parsing resolves paths, optional columns, and comments") {
  TempDir tmp;
  std::ofstream(tmp / "m.tsv") << "# dataset\n"
                                  "case_id\timage\tlabels\tmask\tprotocol\tga_weeks\n"
                                  "c1\timg/c1.nii.gz\tseg/c1.nii.gz\t-\tfeta_full\t24.5\n"
                                  "c2\t/abs/c2.nii\t\t\tdhcp_partial\t\n";
  const auto reg = LabelRegistry::with_defaults();
  const DatasetManifest m = load_manifest(tmp / "m.tsv", reg);
  REQUIRE(m.size() == 2);
  CHECK(m.entries[0].image_path == tmp / "img/c1.nii.gz");
  CHECK(m.entries[0].label_path.value() == tmp / "seg/c1.nii.gz");
  CHECK_FALSE(m.entries[0].mask_path.has_value());
  CHECK(m.entries[0].gestational_age.value() == doctest::Approx(24.5));
  CHECK(m.entries[1].image_path == "/abs/c2.nii");
  CHECK_FALSE(m.entries[1].label_path.has_value());
  CHECK_FALSE(m.entries[1].gestational_age.has_value());
  CHECK(m.find("c2").protocol_id == "dhcp_partial");

  save_manifest(m, tmp / "again.tsv");
  const DatasetManifest back = load_manifest(tmp / "again.tsv", reg);
  CHECK(back.entries[0].label_path == m.entries[0].label_path);
  CHECK(back.entries[1].protocol_id == "dhcp_partial");
}

TEST_CASE("manifest errors") {
  TempDir tmp;
  const auto reg = LabelRegistry::with_defaults();
  std::ofstream(tmp / "dup.tsv") << "case_id\timage\tprotocol\nx\ta.nii\tfeta_full\nx\tb.nii\tfeta_full\n";
  CHECK_THROWS_AS(load_manifest(tmp / "dup.tsv", reg), ValidationError);
  std::ofstream(tmp / "proto.tsv") << "case_id\timage\tprotocol\nx\ta.nii\tnot_a_protocol\n";
  CHECK_THROWS_AS(load_manifest(tmp / "proto.tsv", reg), ValidationError);
  CHECK_THROWS(load_manifest(tmp / "absent.tsv", reg));
}

TEST_CASE("JSON manifests are accepted") {
  TempDir tmp;
  std::ofstream(tmp / "m.json") << R"([{"case_id": "a", "image": "a.nii", "protocol": "feta_full", "ga_weeks": 30}])";
  const auto m = load_manifest(tmp / "m.json", LabelRegistry::with_defaults());
  REQUIRE(m.size() == 1);
  CHECK(m.entries[0].image_path == tmp / "a.nii");
  CHECK(*m.entries[0].gestational_age == doctest::Approx(30.0));
}

TEST_CASE("load_case checks grids and label range") {
  TempDir tmp;
  const auto reg = LabelRegistry::with_defaults();
  const Geometry g = Geometry::axis_aligned({1, 1, 1});
  write_volume(ramp({3, 3, 3}, g), tmp / "img.nii");
  LabelVolume lab(Shape3{3, 3, 3}, g, 0);
  lab.data[4] = 4;
  write_volume(lab, tmp / "lab.nii");
  LabelVolume wrong(Shape3{3, 3, 2}, g, 0);
  write_volume(wrong, tmp / "wrong.nii");

  ManifestEntry e{"c", tmp / "img.nii", tmp / "lab.nii", std::nullopt, "dhcp_partial", std::nullopt};
  const CaseData d = load_case(e, reg);
  CHECK(d.labels->data[4] == 4);

  e.label_path = tmp / "wrong.nii";
  CHECK_THROWS_AS(load_case(e, reg), ShapeError);

  lab.data[4] = 5;  // dhcp_partial has ids 0..4
  write_volume(lab, tmp / "lab.nii");
  e.label_path = tmp / "lab.nii";
  CHECK_THROWS_AS(load_case(e, reg), ValidationError);
}
