#include "trisr/losses.hpp"

#include "trisr/rng.hpp"

namespace trisr {

template <typename T>
std::pair<Tensor<T>, Tensor<T>> d_ra(const Tensor<T>& c_real, const Tensor<T>& c_fake) {
    if (c_real.shape().size() != 1 || c_fake.shape().size() != 1)
        throw ShapeError("d_ra expects rank-1 logit tensors");
    Tensor<T> real_rel = sigmoid(sub(c_real, mean(c_fake)));
    Tensor<T> fake_rel = sigmoid(sub(c_fake, mean(c_real)));
    return {std::move(real_rel), std::move(fake_rel)};
}

template <typename T>
Tensor<T> ragan_d_loss(const Tensor<T>& c_real, const Tensor<T>& c_fake, T log_floor) {
    auto [real_rel, fake_rel] = d_ra(c_real, c_fake);
    Tensor<T> term_real = mean(log_clamped(real_rel, log_floor));
    Tensor<T> one_minus = add_scalar(mul_scalar(fake_rel, T(-1)), T(1));
    Tensor<T> term_fake = mean(log_clamped(one_minus, log_floor));
    return mul_scalar(add(term_real, term_fake), T(-1));
}

template <typename T>
Tensor<T> ragan_g_loss(const Tensor<T>& c_real, const Tensor<T>& c_fake, T log_floor) {
    return ragan_d_loss(c_fake, c_real, log_floor);
}

template <typename T>
Tensor<T> add_instance_noise(const Tensor<T>& t, const NoiseSchedule& schedule, long iter,
                             uint64_t seed, NoiseRole role) {
    if (iter < 0)
        throw ShapeError("add_instance_noise requires iter >= 0");
    const double sigma = schedule.sigma(iter);
    if (sigma == 0.0)
        return t;
    const uint64_t stream = rng::key(seed, 0x6e6f697365ull, static_cast<uint64_t>(iter),
                                     static_cast<uint64_t>(role));
    std::vector<T> eps(t.numel());
    for (std::size_t i = 0; i < eps.size(); ++i)
        eps[i] = static_cast<T>(rng::normal(stream, i) * sigma);
    return add(t, Tensor<T>::from(t.shape(), std::move(eps)));
}

template <typename T>
Tensor<T> generator_objective(const Tensor<T>& perc, const Tensor<T>& pix, const Tensor<T>& ragan_g,
                              T alpha, T beta) {
    if (perc.numel() != 1 || pix.numel() != 1 || ragan_g.numel() != 1)
        throw ShapeError("generator_objective expects scalar losses");
    return add(perc, add(mul_scalar(pix, alpha), mul_scalar(ragan_g, beta)));
}

#define TRISR_INSTANTIATE(T)                                                                        \
    template std::pair<Tensor<T>, Tensor<T>> d_ra<T>(const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> ragan_d_loss<T>(const Tensor<T>&, const Tensor<T>&, T);                     \
    template Tensor<T> ragan_g_loss<T>(const Tensor<T>&, const Tensor<T>&, T);                     \
    template Tensor<T> add_instance_noise<T>(const Tensor<T>&, const NoiseSchedule&, long,         \
                                             uint64_t, NoiseRole);                                 \
    template Tensor<T> generator_objective<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                              T, T);

TRISR_INSTANTIATE(float)
TRISR_INSTANTIATE(double)

#undef TRISR_INSTANTIATE

} // namespace trisr
