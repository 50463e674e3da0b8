#include "trisr/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <vector>

namespace trisr {

namespace {

void check_same_dims(const Volume& a, const Volume& b) {
    if (a.dims != b.dims)
        throw ShapeError("metric inputs must share dimensions");
}

double mse(const Volume& ref, const Volume& test) {
    double acc = 0.0;
    for (std::size_t i = 0; i < ref.data.size(); ++i) {
        const double d = static_cast<double>(ref.data[i]) - static_cast<double>(test.data[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(ref.data.size());
}

/// Inclusive-prefix integral volume with a zero border; sums of any box in
/// O(8) lookups.
class IntegralVolume {
public:
    IntegralVolume(const Volume& v, bool squared, const Volume* other = nullptr)
        : W_(v.dims[0] + 1), H_(v.dims[1] + 1), D_(v.dims[2] + 1),
          table_(static_cast<std::size_t>(W_) * H_ * D_, 0.0) {
        for (int d = 1; d < D_; ++d)
            for (int h = 1; h < H_; ++h) {
                double row = 0.0;
                for (int w = 1; w < W_; ++w) {
                    const std::size_t src = v.index(w - 1, h - 1, d - 1);
                    double val = static_cast<double>(v.data[src]);
                    if (other)
                        val *= static_cast<double>(other->data[src]);
                    else if (squared)
                        val *= val;
                    row += val;
                    table_[at(w, h, d)] = row + table_[at(w, h, d - 1)] + table_[at(w, h - 1, d)] -
                                          table_[at(w, h - 1, d - 1)];
                }
            }
    }

    /// Sum over the box with origin (w,h,d) (inclusive) and edge `n`.
    double box(int w, int h, int d, int n) const {
        const int w1 = w + n, h1 = h + n, d1 = d + n;
        return table_[at(w1, h1, d1)] - table_[at(w, h1, d1)] - table_[at(w1, h, d1)] -
               table_[at(w1, h1, d)] + table_[at(w, h, d1)] + table_[at(w, h1, d)] +
               table_[at(w1, h, d)] - table_[at(w, h, d)];
    }

private:
    std::size_t at(int w, int h, int d) const {
        return (static_cast<std::size_t>(d) * H_ + h) * W_ + w;
    }
    int W_, H_, D_;
    std::vector<double> table_;
};

} // namespace

double psnr(const Volume& ref, const Volume& test, double data_range) {
    check_same_dims(ref, test);
    if (!(data_range > 0.0))
        throw DegenerateRange("psnr requires a positive data range");
    const double err = mse(ref, test);
    const double cap = 99.0;
    if (err <= 0.0)
        return cap;
    const double value = 20.0 * std::log10(data_range) - 10.0 * std::log10(err);
    return value < cap ? value : cap;
}

double ssim3d(const Volume& ref, const Volume& test, double data_range, int window) {
    check_same_dims(ref, test);
    if (window < 1)
        throw ShapeError("ssim window must be >= 1");
    for (int axis = 0; axis < 3; ++axis)
        if (ref.dims[axis] < window)
            throw ShapeError("volume smaller than the ssim window");
    const double c1 = (0.01 * data_range) * (0.01 * data_range);
    const double c2 = (0.03 * data_range) * (0.03 * data_range);
    const double n = static_cast<double>(window) * window * window;

    const IntegralVolume sx(ref, false);
    const IntegralVolume sy(test, false);
    const IntegralVolume sxx(ref, true);
    const IntegralVolume syy(test, true);
    const IntegralVolume sxy(ref, false, &test);

    double acc = 0.0;
    std::size_t count = 0;
    for (int d = 0; d + window <= ref.dims[2]; ++d)
        for (int h = 0; h + window <= ref.dims[1]; ++h)
            for (int w = 0; w + window <= ref.dims[0]; ++w) {
                const double mx = sx.box(w, h, d, window) / n;
                const double my = sy.box(w, h, d, window) / n;
                const double vx = sxx.box(w, h, d, window) / n - mx * mx;
                const double vy = syy.box(w, h, d, window) / n - my * my;
                const double cov = sxy.box(w, h, d, window) / n - mx * my;
                const double num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
                const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
                acc += num / den;
                ++count;
            }
    return acc / static_cast<double>(count);
}

double nrmse(const Volume& ref, const Volume& test) {
    check_same_dims(ref, test);
    if (!(ref.range_max > ref.range_min))
        throw DegenerateRange("nrmse is undefined for a constant reference");
    return std::sqrt(mse(ref, test)) /
           (static_cast<double>(ref.range_max) - static_cast<double>(ref.range_min));
}

MetricReport evaluate(const Volume& ref, const Volume& test, const MetricConfig& config) {
    MetricReport r;
    r.config = config;
    r.psnr = psnr(ref, test, config.data_range);
    r.ssim = ssim3d(ref, test, config.data_range, config.ssim_window);
    r.nrmse = nrmse(ref, test);
    return r;
}

std::string MetricReport::csv_header() {
    return "ref,test,psnr,ssim,nrmse,data_range,ssim_window,k1,k2,psnr_cap";
}

std::string MetricReport::csv_row(const std::string& ref_name, const std::string& test_name) const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%s,%.9g,%.9g,%.9g,%.9g,%d,%.9g,%.9g,%.9g", ref_name.c_str(),
                  test_name.c_str(), psnr, ssim, nrmse, config.data_range, config.ssim_window,
                  config.k1, config.k2, config.psnr_cap);
    return std::string(buf);
}

} // namespace trisr
