// nifti.hpp — NIfTI-1 reader/writer and PGM slice export.
//
// Only single-phase 3D volumes are handled. The on-disk fastest-varying
// axis (dim[1]) maps to W, so the file body and the in-memory array share
// one linear order. Axis mapping:
//   dim[1] = W, dim[2] = H, dim[3] = D
//   pixdim[1] = sx, pixdim[2] = sy, pixdim[3] = sz
//   qoffset_x/y/z carry origin (x, y, z); orientation quaternions are ignored.
// Endianness is auto-detected from sizeof_hdr; the writer always emits
// little-endian single-file ("n+1") volumes with vox_offset = 352.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "liverformer/volume.hpp"

namespace liverformer {

struct NiftiError : VolumeError {
    using VolumeError::VolumeError;
};
struct TruncatedFile : NiftiError {
    using NiftiError::NiftiError;
};
struct BadMagic : NiftiError {
    using NiftiError::NiftiError;
};
struct UnsupportedDatatype : NiftiError {
    using NiftiError::NiftiError;
};
struct NonPositiveSpacing : NiftiError {
    using NiftiError::NiftiError;
};
struct MalformedHeader : NiftiError {
    using NiftiError::NiftiError;
};

// NIfTI-1 datatype codes we accept.
enum NiftiDatatype : std::int16_t {
    kDtUint8 = 2,
    kDtInt16 = 4,
    kDtInt32 = 8,
    kDtFloat32 = 16,
    kDtFloat64 = 64,
    kDtInt8 = 256,
    kDtUint16 = 512,
};

/// The header fields this library consumes, decoded to native endianness.
struct NiftiHeader {
    std::int32_t sizeof_hdr = 348;
    std::int16_t dim[8] = {0};
    std::int16_t datatype = 0;
    std::int16_t bitpix = 0;
    float pixdim[8] = {0};
    float vox_offset = 352.0f;
    float scl_slope = 0.0f;
    float scl_inter = 0.0f;
    float qoffset[3] = {0, 0, 0};  // x, y, z
    char magic[4] = {0};
    bool swapped = false;  // true when the file was byte-swapped on read
};

/// Parse and validate the 348-byte header (+4-byte extension flag).
NiftiHeader parse_nifti_header(const std::vector<std::uint8_t>& bytes);

ImageVolume read_image_nifti(const std::vector<std::uint8_t>& bytes);
LabelVolume read_label_nifti(const std::vector<std::uint8_t>& bytes);

/// float32 body, scl_slope = 0.
std::vector<std::uint8_t> write_nifti(const ImageVolume& v);
/// uint8 body.
std::vector<std::uint8_t> write_nifti(const LabelVolume& v);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

enum class SliceAxis { Axial, Coronal, Sagittal };

struct IndexOutOfRange : VolumeError {
    using VolumeError::VolumeError;
};

/// Binary PGM (P5), min-max scaled to 0..255 over the slice; constant slices
/// map to 0. Axial fixes d (rows=H, cols=W), coronal fixes h (rows=D,
/// cols=W), sagittal fixes w (rows=D, cols=H).
std::vector<std::uint8_t> export_slice(const ImageVolume& v, SliceAxis axis, std::size_t index);
std::vector<std::uint8_t> export_slice(const LabelVolume& v, SliceAxis axis, std::size_t index);

}  // namespace liverformer
