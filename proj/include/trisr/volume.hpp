#ifndef TRISR_VOLUME_HPP
#define TRISR_VOLUME_HPP

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "trisr/errors.hpp"

namespace trisr {

/// Dense 3-D scalar field. Data is stored x-fastest:
/// index = (d*H + h)*W + w for voxel (w, h, d).
struct Volume {
    std::array<int, 3> dims{0, 0, 0};            // (W, H, D) in voxels
    std::array<float, 3> spacing{1.f, 1.f, 1.f}; // mm per voxel
    std::vector<float> data;
    float range_min = 0.f; // observed intensity range
    float range_max = 0.f;

    Volume() = default;
    Volume(std::array<int, 3> dims_, std::array<float, 3> spacing_, std::vector<float> data_);

    std::size_t voxels() const { return data.size(); }
    int width() const { return dims[0]; }
    int height() const { return dims[1]; }
    int depth() const { return dims[2]; }

    std::size_t index(int w, int h, int d) const {
        return (static_cast<std::size_t>(d) * dims[1] + h) * dims[0] + w;
    }
    float at(int w, int h, int d) const { return data[index(w, h, d)]; }
    float& at(int w, int h, int d) { return data[index(w, h, d)]; }

    /// Recompute the observed intensity range from the data.
    void update_range();
};

/// Overlapping sliding-window decomposition of a volume.
/// Origins are stride multiples; the last origin per axis is the smallest
/// stride multiple p with p + window >= axis length. Out-of-bounds voxels
/// are zero-filled at extraction time.
struct PatchGrid {
    int window = 0;
    int stride = 0;
    std::array<int, 3> source_dims{0, 0, 0};
    std::vector<std::array<int, 3>> origins; // lexicographic (w fastest)

    std::size_t count() const { return origins.size(); }
};

struct NormalizeResult {
    Volume volume;   // values in [0, 1]
    float src_min;   // original range, kept for inversion
    float src_max;
};

/// Affine-map intensities onto [0, 1]. Throws DegenerateRange on constant input.
NormalizeResult normalize(const Volume& v);

/// Invert a previous normalize() using the recorded source range.
Volume denormalize(const Volume& v, float src_min, float src_max);

/// Trilinear sample at (x, y, z) in voxel coordinates (sample i sits at
/// coordinate i). Coordinates are clamped to the valid range.
float trilinear_sample(const Volume& v, float x, float y, float z);

/// Halve each axis. Output voxel v samples input coordinate 2*v + 0.5 per
/// axis (voxel-center alignment), so each output value is the trilinear
/// interpolant midway between the 2x2x2 input block. Spacing doubles.
/// Throws OddDimension unless every axis is even and >= 2.
Volume downsample_half(const Volume& v);

/// Double each axis by trilinear interpolation with the alignment inverse
/// to downsample_half: output voxel v samples input coordinate (v - 0.5)/2.
Volume upsample_double(const Volume& v);

/// Per-axis patch origins for the given axis length.
std::vector<int> patch_origins(int axis_len, int window, int stride);

PatchGrid make_patch_grid(const std::array<int, 3>& dims, int window, int stride);

/// Decompose into overlapping window^3 patches (zero-padded past the edge).
/// Patch order matches grid.origins.
std::pair<PatchGrid, std::vector<Volume>> extract_patches(const Volume& v, int window, int stride);

/// Reassemble patches produced at `scale` times the grid resolution.
/// Overlapping voxels are averaged uniformly; padded overflow is discarded.
/// Output dims = source_dims * scale.
Volume stitch_patches(const PatchGrid& grid, const std::vector<Volume>& patches, int scale);

} // namespace trisr

#endif
