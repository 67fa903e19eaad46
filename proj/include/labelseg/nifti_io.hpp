#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "labelseg/volume.hpp"

namespace labelseg {

/// NIfTI-1 on-disk element types handled by the reader.
enum class NiftiDatatype : std::int16_t {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUInt16 = 512,
  kUInt32 = 768,
  kInt64 = 1024,
  kUInt64 = 1280,
};

/// Subset of the NIfTI-1 header exposed for inspection.
struct NiftiHeader {
  std::array<std::int16_t, 8> dim{};
  std::array<float, 8> pixdim{};
  NiftiDatatype datatype = NiftiDatatype::kFloat32;
  std::int16_t bitpix = 32;
  float vox_offset = 352.0f;
  float scl_slope = 0.0f;
  float scl_inter = 0.0f;
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  std::array<float, 3> quatern{};
  std::array<float, 3> qoffset{};
  std::array<std::array<float, 4>, 3> srow{};
  std::string descrip;
};

/// Reads only the header; handles .nii and .nii.gz and either byte order.
NiftiHeader read_nifti_header(const std::filesystem::path& path);

/// Reads a 3D image (a 4D file with a singleton 4th axis is squeezed) as float intensities.
Volume3D read_volume(const std::filesystem::path& path);

/// Reads a label map; every stored value must be a non-negative integer. Without an explicit
/// protocol id, the one recorded by write_volume (if any) is used.
LabelVolume read_label_volume(const std::filesystem::path& path, const std::string& protocol_id = {});

/// Writes float32 data. A ".gz" suffix selects gzip compression.
void write_volume(const Volume3D& vol, const std::filesystem::path& path);

/// Writes labels with the narrowest unsigned/signed integer type holding their range.
void write_volume(const LabelVolume& vol, const std::filesystem::path& path);

}  // namespace labelseg
