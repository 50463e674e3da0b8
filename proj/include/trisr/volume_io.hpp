#ifndef TRISR_VOLUME_IO_HPP
#define TRISR_VOLUME_IO_HPP

#include <cstdint>
#include <string>

#include "trisr/volume.hpp"

namespace trisr {

enum class VolumeFormat { rvol, nifti };

/// NIfTI-1 header subset. The full header occupies 348 bytes on disk;
/// only the fields this reader interprets are surfaced here.
struct NiftiHeader {
    std::array<int16_t, 8> dim{};
    int16_t datatype = 0; // 4 = int16, 16 = float32, 64 = float64
    int16_t bitpix = 0;
    std::array<float, 8> pixdim{};
    float vox_offset = 0.f;
    float scl_slope = 0.f;
    float scl_inter = 0.f;
    char magic[4] = {0, 0, 0, 0}; // "n+1\0" or "ni1\0"
};

/// Pick a format from the file extension (.rvol / .nii / .hdr).
VolumeFormat format_from_path(const std::string& path);

Volume read_volume(const std::string& path, VolumeFormat format);
void write_volume(const Volume& v, const std::string& path, VolumeFormat format);

Volume read_rvol(const std::string& path);
void write_rvol(const Volume& v, const std::string& path);

NiftiHeader read_nifti_header(const std::string& path);
Volume read_nifti(const std::string& path);
/// Writes single-file NIfTI-1 ("n+1"), float32, scl_slope 1, data at offset 352.
void write_nifti(const Volume& v, const std::string& path);

} // namespace trisr

#endif
