#include "trisr/volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace trisr {

Volume::Volume(std::array<int, 3> dims_, std::array<float, 3> spacing_, std::vector<float> data_)
    : dims(dims_), spacing(spacing_), data(std::move(data_)) {
    for (int axis = 0; axis < 3; ++axis) {
        if (dims[axis] < 1)
            throw ShapeError("Volume dims must all be >= 1");
    }
    const std::size_t expect = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    if (data.size() != expect)
        throw ShapeError("Volume data length does not match dims");
    update_range();
}

void Volume::update_range() {
    if (data.empty()) {
        range_min = range_max = 0.f;
        return;
    }
    auto [lo, hi] = std::minmax_element(data.begin(), data.end());
    range_min = *lo;
    range_max = *hi;
}

NormalizeResult normalize(const Volume& v) {
    if (!(v.range_max > v.range_min))
        throw DegenerateRange("cannot normalize a constant volume");
    Volume out = v;
    const float lo = v.range_min;
    const float scale = 1.f / (v.range_max - v.range_min);
    for (float& x : out.data)
        x = (x - lo) * scale;
    out.update_range();
    return NormalizeResult{std::move(out), v.range_min, v.range_max};
}

Volume denormalize(const Volume& v, float src_min, float src_max) {
    Volume out = v;
    const float span = src_max - src_min;
    for (float& x : out.data)
        x = x * span + src_min;
    out.update_range();
    return out;
}

float trilinear_sample(const Volume& v, float x, float y, float z) {
    const auto clampf = [](float t, float hi) { return std::min(std::max(t, 0.f), hi); };
    x = clampf(x, static_cast<float>(v.dims[0] - 1));
    y = clampf(y, static_cast<float>(v.dims[1] - 1));
    z = clampf(z, static_cast<float>(v.dims[2] - 1));

    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const int z0 = static_cast<int>(std::floor(z));
    const int x1 = std::min(x0 + 1, v.dims[0] - 1);
    const int y1 = std::min(y0 + 1, v.dims[1] - 1);
    const int z1 = std::min(z0 + 1, v.dims[2] - 1);
    const float fx = x - x0, fy = y - y0, fz = z - z0;

    const float c000 = v.at(x0, y0, z0), c100 = v.at(x1, y0, z0);
    const float c010 = v.at(x0, y1, z0), c110 = v.at(x1, y1, z0);
    const float c001 = v.at(x0, y0, z1), c101 = v.at(x1, y0, z1);
    const float c011 = v.at(x0, y1, z1), c111 = v.at(x1, y1, z1);

    const float c00 = c000 + (c100 - c000) * fx;
    const float c10 = c010 + (c110 - c010) * fx;
    const float c01 = c001 + (c101 - c001) * fx;
    const float c11 = c011 + (c111 - c011) * fx;
    const float c0 = c00 + (c10 - c00) * fy;
    const float c1 = c01 + (c11 - c01) * fy;
    return c0 + (c1 - c0) * fz;
}

Volume downsample_half(const Volume& v) {
    for (int axis = 0; axis < 3; ++axis) {
        if (v.dims[axis] < 2 || v.dims[axis] % 2 != 0)
            throw OddDimension("downsample_half requires even axis lengths >= 2");
    }
    const std::array<int, 3> odims{v.dims[0] / 2, v.dims[1] / 2, v.dims[2] / 2};
    std::vector<float> out(static_cast<std::size_t>(odims[0]) * odims[1] * odims[2]);
    std::size_t i = 0;
    for (int d = 0; d < odims[2]; ++d)
        for (int h = 0; h < odims[1]; ++h)
            for (int w = 0; w < odims[0]; ++w)
                out[i++] = trilinear_sample(v, 2 * w + 0.5f, 2 * h + 0.5f, 2 * d + 0.5f);
    return Volume(odims, {v.spacing[0] * 2, v.spacing[1] * 2, v.spacing[2] * 2}, std::move(out));
}

Volume upsample_double(const Volume& v) {
    const std::array<int, 3> odims{v.dims[0] * 2, v.dims[1] * 2, v.dims[2] * 2};
    std::vector<float> out(static_cast<std::size_t>(odims[0]) * odims[1] * odims[2]);
    std::size_t i = 0;
    for (int d = 0; d < odims[2]; ++d)
        for (int h = 0; h < odims[1]; ++h)
            for (int w = 0; w < odims[0]; ++w)
                out[i++] = trilinear_sample(v, (w - 0.5f) * 0.5f, (h - 0.5f) * 0.5f, (d - 0.5f) * 0.5f);
    return Volume(odims, {v.spacing[0] * 0.5f, v.spacing[1] * 0.5f, v.spacing[2] * 0.5f}, std::move(out));
}

std::vector<int> patch_origins(int axis_len, int window, int stride) {
    std::vector<int> origins;
    int p = 0;
    while (true) {
        origins.push_back(p);
        if (p + window >= axis_len)
            break;
        p += stride;
    }
    return origins;
}

PatchGrid make_patch_grid(const std::array<int, 3>& dims, int window, int stride) {
    if (stride < 1 || window < stride)
        throw ShapeError("patch extraction requires window >= stride >= 1");
    PatchGrid grid;
    grid.window = window;
    grid.stride = stride;
    grid.source_dims = dims;
    const auto ow = patch_origins(dims[0], window, stride);
    const auto oh = patch_origins(dims[1], window, stride);
    const auto od = patch_origins(dims[2], window, stride);
    grid.origins.reserve(ow.size() * oh.size() * od.size());
    for (int d : od)
        for (int h : oh)
            for (int w : ow)
                grid.origins.push_back({w, h, d});
    return grid;
}

std::pair<PatchGrid, std::vector<Volume>> extract_patches(const Volume& v, int window, int stride) {
    PatchGrid grid = make_patch_grid(v.dims, window, stride);
    std::vector<Volume> patches;
    patches.reserve(grid.count());
    const std::size_t n = static_cast<std::size_t>(window) * window * window;
    for (const auto& org : grid.origins) {
        std::vector<float> buf(n, 0.f);
        std::size_t i = 0;
        for (int d = 0; d < window; ++d) {
            const int sd = org[2] + d;
            for (int h = 0; h < window; ++h) {
                const int sh = org[1] + h;
                if (sd >= v.dims[2] || sh >= v.dims[1]) {
                    i += window;
                    continue;
                }
                const int run = std::min(window, v.dims[0] - org[0]);
                const float* src = v.data.data() + v.index(org[0], sh, sd);
                std::copy(src, src + run, buf.begin() + i);
                i += window;
            }
        }
        patches.emplace_back(std::array<int, 3>{window, window, window}, v.spacing, std::move(buf));
    }
    return {std::move(grid), std::move(patches)};
}

Volume stitch_patches(const PatchGrid& grid, const std::vector<Volume>& patches, int scale) {
    if (patches.size() != grid.count())
        throw GridMismatch("patch count does not match grid origin count");
    const int pw = grid.window * scale;
    for (const auto& p : patches) {
        if (p.dims[0] != pw || p.dims[1] != pw || p.dims[2] != pw)
            throw GridMismatch("patch edge does not equal window * scale");
    }
    const std::array<int, 3> odims{grid.source_dims[0] * scale, grid.source_dims[1] * scale,
                                   grid.source_dims[2] * scale};
    const std::size_t n = static_cast<std::size_t>(odims[0]) * odims[1] * odims[2];
    std::vector<double> acc(n, 0.0);
    std::vector<uint32_t> hits(n, 0);
    for (std::size_t pi = 0; pi < patches.size(); ++pi) {
        const auto& org = grid.origins[pi];
        const auto& p = patches[pi];
        for (int d = 0; d < pw; ++d) {
            const int od = org[2] * scale + d;
            if (od >= odims[2])
                break;
            for (int h = 0; h < pw; ++h) {
                const int oh = org[1] * scale + h;
                if (oh >= odims[1])
                    break;
                const int run = std::min(pw, odims[0] - org[0] * scale);
                const std::size_t src = p.index(0, h, d);
                const std::size_t dst =
                    (static_cast<std::size_t>(od) * odims[1] + oh) * odims[0] + org[0] * scale;
                for (int w = 0; w < run; ++w) {
                    acc[dst + w] += p.data[src + w];
                    hits[dst + w] += 1;
                }
            }
        }
    }
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = static_cast<float>(acc[i] / hits[i]); // coverage guarantees hits >= 1
    const std::array<float, 3> sp = patches.empty() ? std::array<float, 3>{1.f, 1.f, 1.f} : patches[0].spacing;
    return Volume(odims, sp, std::move(out));
}

} // namespace trisr
