#ifndef TRISR_LOSSES_HPP
#define TRISR_LOSSES_HPP

#include <cstdint>
#include <utility>

#include "trisr/tensor.hpp"

namespace trisr {

/// Paired minibatch fed to the adversarial losses. Shapes must match;
/// values are expected in [0,1] before instance noise is applied.
template <typename T>
struct BatchT {
    Tensor<T> real; // samples of the target distribution
    Tensor<T> fake; // generator outputs
};
using Batch = BatchT<float>;

/// Linearly annealed noise level: sigma(t) = max(0, sigma0 * (1 - t/T)).
struct NoiseSchedule {
    double sigma0 = 1.0;
    long total_iters = 1;

    double sigma(long t) const {
        const double s = sigma0 * (1.0 - static_cast<double>(t) / static_cast<double>(total_iters));
        return s > 0.0 ? s : 0.0;
    }
};

/// Stream tags so real/fake noise draws are independent and
/// order-independent.
enum class NoiseRole : uint64_t { real = 0, fake = 1 };

/// Mean absolute difference in image space.
template <typename T>
Tensor<T> pixel_loss(const Tensor<T>& x, const Tensor<T>& y) {
    return l1(x, y);
}

/// Mean absolute difference in feature space; differentiable through both
/// image paths and the extractor parameters.
template <typename T, typename FE>
Tensor<T> perceptual_loss(const FE& fe, const Tensor<T>& x, const Tensor<T>& y) {
    return l1(fe.forward(x), fe.forward(y));
}

/// Relativistic average discriminator outputs:
/// (sigmoid(c_real - mean(c_fake)), sigmoid(c_fake - mean(c_real))).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> d_ra(const Tensor<T>& c_real, const Tensor<T>& c_fake);

/// Discriminator loss: -mean log D_Ra(x,y) - mean log(1 - D_Ra(y,x)),
/// with logs clamped at `log_floor`.
template <typename T>
Tensor<T> ragan_d_loss(const Tensor<T>& c_real, const Tensor<T>& c_fake, T log_floor = T(1e-12));

/// Generator loss: the role-swapped mirror,
/// -mean log D_Ra(y,x) - mean log(1 - D_Ra(x,y)).
template <typename T>
Tensor<T> ragan_g_loss(const Tensor<T>& c_real, const Tensor<T>& c_fake, T log_floor = T(1e-12));

/// t + eps with eps ~ N(0, sigma(iter)) i.i.d. per element, drawn from the
/// stream keyed by (seed, iter, role). Returns t unchanged when sigma is 0.
template <typename T>
Tensor<T> add_instance_noise(const Tensor<T>& t, const NoiseSchedule& schedule, long iter,
                             uint64_t seed, NoiseRole role);

/// perc + alpha * pixel + beta * ragan_g.
template <typename T>
Tensor<T> generator_objective(const Tensor<T>& perc, const Tensor<T>& pix, const Tensor<T>& ragan_g,
                              T alpha = T(0.01), T beta = T(0.005));

} // namespace trisr

#endif
