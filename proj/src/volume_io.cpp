#include "trisr/volume_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace trisr {

namespace {

// All on-disk formats are little-endian. The engine targets little-endian
// hosts; fail loudly elsewhere rather than writing swapped files.
static_assert(std::endian::native == std::endian::little || sizeof(int) == 0,
              "little-endian host required");

template <typename T>
void put(std::string& buf, T v) {
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf.append(raw, sizeof(T));
}

template <typename T>
T get(const std::string& buf, std::size_t off) {
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    return v;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

void write_file(const std::string& path, const std::string& buf) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out)
        throw IoError("short write to " + path);
}

constexpr std::size_t kNiftiHeaderSize = 348;

} // namespace

VolumeFormat format_from_path(const std::string& path) {
    const auto dot = path.rfind('.');
    const std::string ext = dot == std::string::npos ? "" : path.substr(dot);
    if (ext == ".rvol")
        return VolumeFormat::rvol;
    if (ext == ".nii" || ext == ".hdr")
        return VolumeFormat::nifti;
    throw FormatError("cannot infer volume format from '" + path + "'");
}

Volume read_volume(const std::string& path, VolumeFormat format) {
    return format == VolumeFormat::rvol ? read_rvol(path) : read_nifti(path);
}

void write_volume(const Volume& v, const std::string& path, VolumeFormat format) {
    if (format == VolumeFormat::rvol)
        write_rvol(v, path);
    else
        write_nifti(v, path);
}

Volume read_rvol(const std::string& path) {
    const std::string buf = read_file(path);
    if (buf.size() < 36)
        throw TruncatedFile("RVOL file shorter than its header: " + path);
    if (std::memcmp(buf.data(), "RVOL", 4) != 0)
        throw FormatError("bad RVOL magic in " + path);
    if (get<uint32_t>(buf, 4) != 1)
        throw FormatError("unsupported RVOL version in " + path);
    const uint32_t w = get<uint32_t>(buf, 8);
    const uint32_t h = get<uint32_t>(buf, 12);
    const uint32_t d = get<uint32_t>(buf, 16);
    if (get<uint32_t>(buf, 20) != 1)
        throw UnsupportedDtype("RVOL dtype code must be 1 (float32)");
    const std::array<float, 3> spacing{get<float>(buf, 24), get<float>(buf, 28), get<float>(buf, 32)};
    const std::size_t n = static_cast<std::size_t>(w) * h * d;
    if (buf.size() != 36 + n * 4)
        throw TruncatedFile("RVOL payload size mismatch in " + path);
    std::vector<float> data(n);
    std::memcpy(data.data(), buf.data() + 36, n * 4);
    return Volume({static_cast<int>(w), static_cast<int>(h), static_cast<int>(d)}, spacing, std::move(data));
}

void write_rvol(const Volume& v, const std::string& path) {
    std::string buf;
    buf.reserve(36 + v.data.size() * 4);
    buf.append("RVOL", 4);
    put<uint32_t>(buf, 1);
    put<uint32_t>(buf, static_cast<uint32_t>(v.dims[0]));
    put<uint32_t>(buf, static_cast<uint32_t>(v.dims[1]));
    put<uint32_t>(buf, static_cast<uint32_t>(v.dims[2]));
    put<uint32_t>(buf, 1); // dtype float32
    put<float>(buf, v.spacing[0]);
    put<float>(buf, v.spacing[1]);
    put<float>(buf, v.spacing[2]);
    const std::size_t payload = buf.size();
    buf.resize(payload + v.data.size() * 4);
    std::memcpy(buf.data() + payload, v.data.data(), v.data.size() * 4);
    write_file(path, buf);
}

NiftiHeader read_nifti_header(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path);
    std::string buf(kNiftiHeaderSize, '\0');
    in.read(buf.data(), kNiftiHeaderSize);
    if (in.gcount() != static_cast<std::streamsize>(kNiftiHeaderSize))
        throw TruncatedFile("NIfTI header shorter than 348 bytes: " + path);

    NiftiHeader hdr;
    std::memcpy(hdr.magic, buf.data() + 344, 4);
    const bool single = std::memcmp(hdr.magic, "n+1", 4) == 0;
    const bool pair = std::memcmp(hdr.magic, "ni1", 4) == 0;
    if (!single && !pair)
        throw FormatError("bad NIfTI magic in " + path);
    if (get<int32_t>(buf, 0) != 348)
        throw FormatError("NIfTI sizeof_hdr != 348 (big-endian files unsupported)");

    for (int i = 0; i < 8; ++i)
        hdr.dim[i] = get<int16_t>(buf, 40 + 2 * i);
    hdr.datatype = get<int16_t>(buf, 70);
    hdr.bitpix = get<int16_t>(buf, 72);
    for (int i = 0; i < 8; ++i)
        hdr.pixdim[i] = get<float>(buf, 76 + 4 * i);
    hdr.vox_offset = get<float>(buf, 108);
    hdr.scl_slope = get<float>(buf, 112);
    hdr.scl_inter = get<float>(buf, 116);
    return hdr;
}

Volume read_nifti(const std::string& path) {
    const NiftiHeader hdr = read_nifti_header(path);
    if (hdr.dim[0] != 3 && !(hdr.dim[0] == 4 && hdr.dim[4] == 1))
        throw FormatError("only 3-D NIfTI volumes are supported");
    if (hdr.datatype != 4 && hdr.datatype != 16 && hdr.datatype != 64)
        throw UnsupportedDtype("unsupported NIfTI datatype code " + std::to_string(hdr.datatype));

    const bool single = std::memcmp(hdr.magic, "n+1", 4) == 0;
    std::string data_path = path;
    std::size_t offset = static_cast<std::size_t>(hdr.vox_offset);
    if (!single) {
        // .hdr/.img pair: voxel data lives in the sibling .img file.
        const auto dot = path.rfind('.');
        data_path = (dot == std::string::npos ? path : path.substr(0, dot)) + ".img";
        offset = 0;
    }

    const std::string buf = read_file(data_path);
    const std::size_t n =
        static_cast<std::size_t>(hdr.dim[1]) * static_cast<std::size_t>(hdr.dim[2]) * static_cast<std::size_t>(hdr.dim[3]);
    const std::size_t bytes_per = hdr.datatype == 4 ? 2 : (hdr.datatype == 16 ? 4 : 8);
    if (buf.size() < offset + n * bytes_per)
        throw TruncatedFile("NIfTI payload truncated in " + data_path);

    std::vector<float> data(n);
    const char* src = buf.data() + offset;
    switch (hdr.datatype) {
    case 4:
        for (std::size_t i = 0; i < n; ++i) {
            int16_t raw;
            std::memcpy(&raw, src + 2 * i, 2);
            data[i] = static_cast<float>(raw);
        }
        break;
    case 16:
        std::memcpy(data.data(), src, n * 4);
        break;
    case 64:
        for (std::size_t i = 0; i < n; ++i) {
            double raw;
            std::memcpy(&raw, src + 8 * i, 8);
            data[i] = static_cast<float>(raw);
        }
        break;
    }
    if (hdr.scl_slope != 0.f) {
        for (float& x : data)
            x = x * hdr.scl_slope + hdr.scl_inter;
    }
    return Volume({hdr.dim[1], hdr.dim[2], hdr.dim[3]},
                  {hdr.pixdim[1], hdr.pixdim[2], hdr.pixdim[3]}, std::move(data));
}

void write_nifti(const Volume& v, const std::string& path) {
    std::string hdr(kNiftiHeaderSize, '\0');
    const auto set = [&hdr](std::size_t off, auto value) {
        std::memcpy(hdr.data() + off, &value, sizeof(value));
    };
    set(0, int32_t{348});
    set(40, int16_t{3}); // dim[0]
    set(42, static_cast<int16_t>(v.dims[0]));
    set(44, static_cast<int16_t>(v.dims[1]));
    set(46, static_cast<int16_t>(v.dims[2]));
    for (std::size_t off = 48; off <= 54; off += 2)
        set(off, int16_t{1});
    set(70, int16_t{16}); // float32
    set(72, int16_t{32}); // bitpix
    set(76, 1.f);         // pixdim[0] (qfac)
    set(80, v.spacing[0]);
    set(84, v.spacing[1]);
    set(88, v.spacing[2]);
    set(108, 352.f); // vox_offset
    set(112, 1.f);   // scl_slope
    set(116, 0.f);   // scl_inter
    std::memcpy(hdr.data() + 344, "n+1\0", 4);

    std::string buf = hdr;
    buf.append(4, '\0'); // extension indicator
    const std::size_t payload = buf.size();
    buf.resize(payload + v.data.size() * 4);
    std::memcpy(buf.data() + payload, v.data.data(), v.data.size() * 4);
    write_file(path, buf);
}

} // namespace trisr
