#ifndef TRISR_METRICS_HPP
#define TRISR_METRICS_HPP

#include <string>

#include "trisr/volume.hpp"

namespace trisr {

struct MetricConfig {
    double data_range = 1.0;
    int ssim_window = 7;
    double k1 = 0.01;
    double k2 = 0.03;
    double psnr_cap = 99.0; // reported value for zero (or vanishing) MSE
};

struct MetricReport {
    double psnr = 0.0;
    double ssim = 0.0;
    double nrmse = 0.0;
    MetricConfig config;

    static std::string csv_header();
    std::string csv_row(const std::string& ref_name, const std::string& test_name) const;
};

/// 20*log10(range) - 10*log10(MSE), capped at config.psnr_cap.
double psnr(const Volume& ref, const Volume& test, double data_range);

/// Mean over all valid window^3 positions of the standard structural
/// similarity expression with uniform windows, population moments,
/// C1=(k1*range)^2, C2=(k2*range)^2.
double ssim3d(const Volume& ref, const Volume& test, double data_range, int window = 7,
              double k1 = 0.01, double k2 = 0.03);

/// sqrt(MSE) / (max(ref) - min(ref)). Throws DegenerateRange for constant ref.
double nrmse(const Volume& ref, const Volume& test);

MetricReport evaluate(const Volume& ref, const Volume& test, const MetricConfig& config = {});

} // namespace trisr

#endif
