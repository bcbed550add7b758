// preprocess.hpp — isotropic resampling, intensity windowing, fixed-grid fit.
//
// Sampling convention: voxel (i, j, k) sits at physical position
// (i + 0.5) * spacing along each axis, and resampling maps target voxel
// centers into source continuous coordinates. Out-of-bounds samples clamp
// to the nearest edge voxel.

#pragma once

#include "liverformer/volume.hpp"

namespace liverformer {

struct NonPositiveWidth : VolumeError {
    using VolumeError::VolumeError;
};

enum class NormalizationMode { Window, MinMax };

struct PreprocessConfig {
    double target_spacing = 1.0;          // mm, isotropic
    double window_level = -60.0;          // HU
    double window_width = 300.0;          // HU
    Dims target_dims{32, 256, 256};
    NormalizationMode normalization = NormalizationMode::Window;
};

/// Trilinear resampling onto an isotropic grid. Output dims are
/// round(dims * spacing / target_spacing), at least 1 per axis.
ImageVolume resample_image(const ImageVolume& v, double target_spacing);

/// Nearest-neighbor variant; never invents class IDs.
LabelVolume resample_labels(const LabelVolume& v, double target_spacing);

/// out = clamp((in - (level - width/2)) / width, 0, 1)
ImageVolume normalize_intensity(const ImageVolume& v, double level, double width);

/// Per-volume min-max alternative; constant volumes map to 0.
ImageVolume normalize_minmax(const ImageVolume& v);

/// Center-crop where larger, symmetric pad where smaller; the off-by-one
/// extra voxel goes to the high-index side.
ImageVolume crop_or_pad(const ImageVolume& v, Dims target, float pad_value = 0.0f);
LabelVolume crop_or_pad(const LabelVolume& v, Dims target);

/// Full pipeline for one case: resample, normalize, fit to target grid.
ImageVolume preprocess_image(const ImageVolume& v, const PreprocessConfig& cfg);
LabelVolume preprocess_labels(const LabelVolume& v, const PreprocessConfig& cfg);

}  // namespace liverformer
