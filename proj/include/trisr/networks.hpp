#ifndef TRISR_NETWORKS_HPP
#define TRISR_NETWORKS_HPP

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "trisr/tensor.hpp"

namespace trisr {

struct NetworkSpec {
    enum class Kind { generator, critic, feature_extractor };
    Kind kind = Kind::generator;
    int base_channels = 16;
    int num_rrdb = 3;        // generator
    int growth_channels = 8; // generator
    int scale = 2;           // generator upsampling factor (this engine: exactly 2)
    std::vector<std::pair<int, int>> stages{{16, 2}, {32, 2}, {64, 2}}; // critic (channels, stride)

    static NetworkSpec generator(int base = 16, int growth = 8, int num_rrdb = 3);
    static NetworkSpec critic(std::vector<std::pair<int, int>> stages = {{16, 2}, {32, 2}, {64, 2}});
    static NetworkSpec feature_extractor(int base = 8);
};

/// Named weight collection for one player. Iteration order is the sorted
/// name order, which every consumer (init, Adam, checkpointing) relies on
/// for determinism.
template <typename T>
struct ParameterSetT {
    std::string owner; // "generator" | "critic" | "feature_extractor"
    std::map<std::string, Tensor<T>> tensors;

    void add(const std::string& name, Tensor<T> t) {
        if (!tensors.emplace(name, std::move(t)).second)
            throw ShapeError("duplicate parameter name: " + name);
    }
    Tensor<T>& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw ShapeError("unknown parameter: " + name);
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw ShapeError("unknown parameter: " + name);
        return it->second;
    }
    void zero_grad() {
        for (auto& [name, t] : tensors)
            t.zero_grad();
    }
    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [name, t] : tensors)
            n += t.numel();
        return n;
    }
};

using ParameterSet = ParameterSetT<float>;

/// RRDB trunk + sub-pixel upsampler mapping (N,1,d,h,w) -> (N,1,2d,2h,2w).
template <typename T>
struct GeneratorT {
    NetworkSpec spec;
    ParameterSetT<T> params;
    Tensor<T> forward(const Tensor<T>& x) const;
};

/// Strided conv + instance-norm critic emitting one unbounded logit per
/// sample. The input itself is instance-normalized first, so logits are
/// exactly invariant to per-sample intensity shifts.
template <typename T>
struct CriticT {
    NetworkSpec spec;
    ParameterSetT<T> params;
    Tensor<T> forward(const Tensor<T>& x) const; // (N,1,d,h,w) -> (N)
};

/// Convolutional trunk of a 10-layer residual classifier (stem + 4 basic
/// blocks, widths c,2c,4c,8c), cut before any pooling or linear layers.
template <typename T>
struct FeatureExtractorT {
    NetworkSpec spec;
    ParameterSetT<T> params;
    Tensor<T> forward(const Tensor<T>& x) const;
};

template <typename T>
GeneratorT<T> build_generator(const NetworkSpec& spec);
template <typename T>
CriticT<T> build_critic(const NetworkSpec& spec);
template <typename T>
FeatureExtractorT<T> build_feature_extractor(const NetworkSpec& spec);

/// D(x) = sigmoid(C(x)).
template <typename T>
Tensor<T> discriminator(const CriticT<T>& critic, const Tensor<T>& x) {
    return sigmoid(critic.forward(x));
}

/// Fan-in-scaled Gaussian init: conv weights ~ N(0, 2/((1+a^2)*fan_in)) with
/// fan_in = Cin*k^3 and a the downstream leaky-ReLU slope; biases zero.
/// Fully determined by (seed, sorted parameter order).
template <typename T>
void kaiming_init(ParameterSetT<T>& params, uint64_t seed, double negative_slope = 0.0);

// ---- TSRC checkpoint format -------------------------------------------------
// magic "TSRC", u32 version=1, u32 tensor count, then per tensor:
// u16 name length, name bytes, u8 rank, u32 dims[rank], float32 data (LE).
// Write -> read round-trips bit-exactly. Writes go to a temp file that is
// renamed into place.

void save_tsrc(const std::string& path, const std::map<std::string, Tensor<float>>& tensors);
std::map<std::string, Tensor<float>> load_tsrc(const std::string& path);

void save_parameter_set(const std::string& path, const ParameterSet& params);
void load_parameter_set_into(const std::string& path, ParameterSet& params);

extern template struct ParameterSetT<float>;
extern template struct ParameterSetT<double>;
extern template struct GeneratorT<float>;
extern template struct GeneratorT<double>;
extern template struct CriticT<float>;
extern template struct CriticT<double>;
extern template struct FeatureExtractorT<float>;
extern template struct FeatureExtractorT<double>;

using Generator = GeneratorT<float>;
using Critic = CriticT<float>;
using FeatureExtractor = FeatureExtractorT<float>;

} // namespace trisr

#endif
