#include "trisr/networks.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include "trisr/rng.hpp"

namespace trisr {

NetworkSpec NetworkSpec::generator(int base, int growth, int num_rrdb) {
    NetworkSpec s;
    s.kind = Kind::generator;
    s.base_channels = base;
    s.growth_channels = growth;
    s.num_rrdb = num_rrdb;
    s.scale = 2;
    if (base < 1 || growth < 1 || num_rrdb < 1)
        throw ShapeError("generator spec requires positive widths and num_rrdb >= 1");
    return s;
}

NetworkSpec NetworkSpec::critic(std::vector<std::pair<int, int>> stages) {
    NetworkSpec s;
    s.kind = Kind::critic;
    if (stages.empty())
        throw ShapeError("critic spec requires at least one stage");
    for (auto [c, st] : stages)
        if (c < 1 || st < 1)
            throw ShapeError("critic stage channels and stride must be >= 1");
    s.stages = std::move(stages);
    return s;
}

NetworkSpec NetworkSpec::feature_extractor(int base) {
    NetworkSpec s;
    s.kind = Kind::feature_extractor;
    if (base < 1)
        throw ShapeError("feature extractor base width must be >= 1");
    s.base_channels = base;
    return s;
}

namespace {

constexpr float kResidualScale = 0.2f;
constexpr float kLeakySlope = 0.2f;

template <typename T>
void add_conv(ParameterSetT<T>& p, const std::string& name, int cout, int cin, int k) {
    p.add(name + ".w", Tensor<T>::zeros({cout, cin, k, k, k}, true));
    p.add(name + ".b", Tensor<T>::zeros({cout}, true));
}

template <typename T>
Tensor<T> run_conv(const ParameterSetT<T>& p, const std::string& name, const Tensor<T>& x,
                   int stride, int pad) {
    return conv3d(x, p.at(name + ".w"), p.at(name + ".b"), stride, pad);
}

template <typename T>
void check_min_spatial(const Tensor<T>& x, int min_edge, const char* who) {
    if (x.shape().size() != 5 || x.shape()[1] != 1)
        throw ShapeError(std::string(who) + " expects a (N,1,D,H,W) tensor");
    for (int axis = 2; axis < 5; ++axis)
        if (x.shape()[axis] < min_edge)
            throw ShapeError(std::string(who) + " input spatial dims too small");
}

/// Five densely connected convs; the first four grow the working set by
/// `growth` channels each, the last projects back to `base`. Output is
/// input + 0.2 * projection.
template <typename T>
Tensor<T> dense_block(const ParameterSetT<T>& p, const std::string& prefix, const Tensor<T>& x) {
    std::vector<Tensor<T>> feats{x};
    for (int i = 0; i < 4; ++i) {
        Tensor<T> cat = feats.size() == 1 ? feats[0] : concat_channels(feats);
        feats.push_back(leaky_relu(run_conv(p, prefix + ".conv" + std::to_string(i), cat, 1, 1),
                                   T(kLeakySlope)));
    }
    Tensor<T> out = run_conv(p, prefix + ".conv4", concat_channels(feats), 1, 1);
    return add(x, mul_scalar(out, T(kResidualScale)));
}

} // namespace

template <typename T>
GeneratorT<T> build_generator(const NetworkSpec& spec) {
    if (spec.scale != 2)
        throw ShapeError("generator scale must be 2");
    if (spec.num_rrdb < 1 || spec.base_channels < 1 || spec.growth_channels < 1)
        throw ShapeError("invalid generator spec");
    GeneratorT<T> g;
    g.spec = spec;
    g.params.owner = "generator";
    const int b = spec.base_channels;
    const int gr = spec.growth_channels;
    add_conv(g.params, "head", b, 1, 3);
    for (int r = 0; r < spec.num_rrdb; ++r)
        for (int d = 0; d < 3; ++d) {
            const std::string prefix = "rrdb" + std::to_string(r) + ".dense" + std::to_string(d);
            for (int i = 0; i < 4; ++i)
                add_conv(g.params, prefix + ".conv" + std::to_string(i), gr, b + i * gr, 3);
            add_conv(g.params, prefix + ".conv4", b, b + 4 * gr, 3);
        }
    add_conv(g.params, "trunk", b, b, 3);
    add_conv(g.params, "up", b * 8, b, 3);
    add_conv(g.params, "tail", 1, b, 3);
    return g;
}

template <typename T>
Tensor<T> GeneratorT<T>::forward(const Tensor<T>& x) const {
    check_min_spatial(x, 4, "generator");
    Tensor<T> head = run_conv(params, "head", x, 1, 1);
    Tensor<T> t = head;
    for (int r = 0; r < spec.num_rrdb; ++r) {
        const std::string prefix = "rrdb" + std::to_string(r);
        Tensor<T> u = t;
        for (int d = 0; d < 3; ++d)
            u = dense_block(params, prefix + ".dense" + std::to_string(d), u);
        t = add(t, mul_scalar(u, T(kResidualScale)));
    }
    t = run_conv(params, "trunk", t, 1, 1);
    t = add(head, t);
    t = run_conv(params, "up", t, 1, 1);
    t = pixel_shuffle3d(t, 2);
    return run_conv(params, "tail", t, 1, 1);
}

template <typename T>
CriticT<T> build_critic(const NetworkSpec& spec) {
    if (spec.stages.empty())
        throw ShapeError("critic requires at least one stage");
    CriticT<T> c;
    c.spec = spec;
    c.params.owner = "critic";
    int cin = 1;
    for (std::size_t i = 0; i < spec.stages.size(); ++i) {
        add_conv(c.params, "stage" + std::to_string(i), spec.stages[i].first, cin, 3);
        cin = spec.stages[i].first;
    }
    add_conv(c.params, "logit", 1, cin, 1);
    return c;
}

template <typename T>
Tensor<T> CriticT<T>::forward(const Tensor<T>& x) const {
    check_min_spatial(x, 1 << spec.stages.size(), "critic");
    Tensor<T> t = instance_norm(x); // first norm: logits ignore per-sample shifts
    for (std::size_t i = 0; i < spec.stages.size(); ++i) {
        t = run_conv(params, "stage" + std::to_string(i), t, spec.stages[i].second, 1);
        t = instance_norm(t);
        t = leaky_relu(t, T(kLeakySlope));
    }
    t = global_avg_pool(t);
    t = run_conv(params, "logit", t, 1, 0);
    return reshape(t, {x.shape()[0]});
}

template <typename T>
FeatureExtractorT<T> build_feature_extractor(const NetworkSpec& spec) {
    if (spec.base_channels < 1)
        throw ShapeError("invalid feature extractor spec");
    FeatureExtractorT<T> fe;
    fe.spec = spec;
    fe.params.owner = "feature_extractor";
    const int c = spec.base_channels;
    add_conv(fe.params, "stem", c, 1, 3);
    int cin = c;
    for (int s = 1; s <= 4; ++s) {
        const int cout = s == 1 ? c : cin * 2;
        const std::string prefix = "block" + std::to_string(s);
        add_conv(fe.params, prefix + ".conv1", cout, cin, 3);
        add_conv(fe.params, prefix + ".conv2", cout, cout, 3);
        if (s > 1)
            add_conv(fe.params, prefix + ".proj", cout, cin, 1);
        cin = cout;
    }
    return fe;
}

template <typename T>
Tensor<T> FeatureExtractorT<T>::forward(const Tensor<T>& x) const {
    check_min_spatial(x, 16, "feature extractor");
    Tensor<T> t = leaky_relu(run_conv(params, "stem", x, 1, 1), T(kLeakySlope));
    for (int s = 1; s <= 4; ++s) {
        const std::string prefix = "block" + std::to_string(s);
        const int stride = s == 1 ? 1 : 2;
        Tensor<T> h = leaky_relu(run_conv(params, prefix + ".conv1", t, stride, 1), T(kLeakySlope));
        h = run_conv(params, prefix + ".conv2", h, 1, 1);
        Tensor<T> skip = s == 1 ? t : run_conv(params, prefix + ".proj", t, 2, 0);
        t = leaky_relu(add(h, skip), T(kLeakySlope));
    }
    return t;
}

template <typename T>
void kaiming_init(ParameterSetT<T>& params, uint64_t seed, double negative_slope) {
    std::size_t index = 0;
    for (auto& [name, t] : params.tensors) {
        const uint64_t stream = rng::key(seed, 0x6b61696dull, index);
        ++index;
        const bool is_weight = name.size() >= 2 && name.compare(name.size() - 2, 2, ".w") == 0;
        if (!is_weight) {
            std::fill(t.data().begin(), t.data().end(), T(0));
            continue;
        }
        const auto& s = t.shape();
        std::size_t fan_in = 1;
        for (std::size_t axis = 1; axis < s.size(); ++axis)
            fan_in *= static_cast<std::size_t>(s[axis]);
        const double stddev =
            std::sqrt(2.0 / ((1.0 + negative_slope * negative_slope) * static_cast<double>(fan_in)));
        for (std::size_t i = 0; i < t.numel(); ++i)
            t.data()[i] = static_cast<T>(rng::normal(stream, i) * stddev);
    }
}

// ---- TSRC ------------------------------------------------------------------

namespace {

template <typename V>
void put_raw(std::string& buf, V v) {
    char raw[sizeof(V)];
    std::memcpy(raw, &v, sizeof(V));
    buf.append(raw, sizeof(V));
}

} // namespace

void save_tsrc(const std::string& path, const std::map<std::string, Tensor<float>>& tensors) {
    std::string buf;
    buf.append("TSRC", 4);
    put_raw<uint32_t>(buf, 1);
    put_raw<uint32_t>(buf, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff)
            throw IoError("tensor name too long for TSRC");
        put_raw<uint16_t>(buf, static_cast<uint16_t>(name.size()));
        buf.append(name);
        put_raw<uint8_t>(buf, static_cast<uint8_t>(t.shape().size()));
        for (int d : t.shape())
            put_raw<uint32_t>(buf, static_cast<uint32_t>(d));
        const std::size_t at = buf.size();
        buf.resize(at + t.numel() * 4);
        std::memcpy(buf.data() + at, t.data().data(), t.numel() * 4);
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw IoError("cannot open " + tmp + " for writing");
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out)
            throw IoError("short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot rename " + tmp + " to " + path);
}

std::map<std::string, Tensor<float>> load_tsrc(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t off = 0;
    const auto need = [&](std::size_t n) {
        if (off + n > buf.size())
            throw TruncatedFile("TSRC file truncated: " + path);
    };
    need(12);
    if (std::memcmp(buf.data(), "TSRC", 4) != 0)
        throw FormatError("bad TSRC magic in " + path);
    uint32_t version, count;
    std::memcpy(&version, buf.data() + 4, 4);
    std::memcpy(&count, buf.data() + 8, 4);
    if (version != 1)
        throw FormatError("unsupported TSRC version in " + path);
    off = 12;
    std::map<std::string, Tensor<float>> out;
    for (uint32_t i = 0; i < count; ++i) {
        need(2);
        uint16_t name_len;
        std::memcpy(&name_len, buf.data() + off, 2);
        off += 2;
        need(name_len + 1);
        std::string name(buf.data() + off, name_len);
        off += name_len;
        const uint8_t rank = static_cast<uint8_t>(buf[off]);
        off += 1;
        need(static_cast<std::size_t>(rank) * 4);
        std::vector<int> shape(rank);
        std::size_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            uint32_t dim;
            std::memcpy(&dim, buf.data() + off, 4);
            off += 4;
            shape[d] = static_cast<int>(dim);
            numel *= dim;
        }
        need(numel * 4);
        std::vector<float> data(numel);
        std::memcpy(data.data(), buf.data() + off, numel * 4);
        off += numel * 4;
        out.emplace(std::move(name), Tensor<float>::from(std::move(shape), std::move(data)));
    }
    return out;
}

void save_parameter_set(const std::string& path, const ParameterSet& params) {
    save_tsrc(path, params.tensors);
}

void load_parameter_set_into(const std::string& path, ParameterSet& params) {
    auto loaded = load_tsrc(path);
    for (auto& [name, t] : params.tensors) {
        auto it = loaded.find(name);
        if (it == loaded.end())
            throw FormatError("checkpoint missing tensor " + name);
        if (it->second.shape() != t.shape())
            throw ShapeError("checkpoint shape mismatch for " + name);
        t.data() = it->second.data();
    }
}

// ---- explicit instantiations ------------------------------------------------

template struct ParameterSetT<float>;
template struct ParameterSetT<double>;
template struct GeneratorT<float>;
template struct GeneratorT<double>;
template struct CriticT<float>;
template struct CriticT<double>;
template struct FeatureExtractorT<float>;
template struct FeatureExtractorT<double>;

template GeneratorT<float> build_generator<float>(const NetworkSpec&);
template GeneratorT<double> build_generator<double>(const NetworkSpec&);
template CriticT<float> build_critic<float>(const NetworkSpec&);
template CriticT<double> build_critic<double>(const NetworkSpec&);
template FeatureExtractorT<float> build_feature_extractor<float>(const NetworkSpec&);
template FeatureExtractorT<double> build_feature_extractor<double>(const NetworkSpec&);
template void kaiming_init<float>(ParameterSetT<float>&, uint64_t, double);
template void kaiming_init<double>(ParameterSetT<double>&, uint64_t, double);

} // namespace trisr
