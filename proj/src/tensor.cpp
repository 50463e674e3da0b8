#include "trisr/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <thread>

namespace trisr {

namespace {
std::atomic<int> g_threads{1};
} // namespace

void set_num_threads(int n) { g_threads.store(n < 1 ? 1 : n); }
int num_threads() { return g_threads.load(); }

namespace detail {
int& no_grad_depth() {
    thread_local int depth = 0;
    return depth;
}

// Contiguous range split. Per-element accumulation order inside a range is
// sequential, and ranges never overlap on output, so results are identical
// for any thread count.
void parallel_for(std::size_t total, const std::function<void(std::size_t, std::size_t)>& fn) {
    const int nt = std::min<std::size_t>(num_threads(), total);
    if (nt <= 1 || total <= 1) {
        fn(0, total);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(nt);
    const std::size_t chunk = (total + nt - 1) / nt;
    for (int t = 0; t < nt; ++t) {
        const std::size_t b = t * chunk;
        const std::size_t e = std::min(total, b + chunk);
        if (b >= e)
            break;
        pool.emplace_back(fn, b, e);
    }
    for (auto& th : pool)
        th.join();
}
} // namespace detail

namespace {

template <typename T>
thread_local Graph<T>* g_current_graph = nullptr;

std::size_t numel_of(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape)
        n *= static_cast<std::size_t>(d);
    return n;
}

void validate_shape(const std::vector<int>& shape) {
    if (shape.size() > 5)
        throw ShapeError("tensor rank must be <= 5");
    for (int d : shape)
        if (d < 1)
            throw ShapeError("tensor dims must all be >= 1");
}

/// Buffer that gradient flowing to `p` should be accumulated into, or
/// nullptr when p does not take part in differentiation.
template <typename T>
T* grad_sink(TensorNode<T>& p) {
    if (!p.requires_grad)
        return nullptr;
    auto& buf = p.is_leaf ? p.grad : p.flow;
    if (buf.empty())
        buf.assign(p.data.size(), T(0));
    return buf.data();
}

template <typename T>
std::shared_ptr<TensorNode<T>> new_node(std::vector<int> shape, std::vector<T> data) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

/// Attach parents + backprop and record on the current graph when gradient
/// tracking applies; otherwise return a plain forward-only tensor.
template <typename T>
Tensor<T> finish_op(std::shared_ptr<TensorNode<T>> out, std::vector<Tensor<T>> parents,
                    std::function<void(TensorNode<T>&)> backprop) {
    bool track = detail::no_grad_depth() == 0 && Graph<T>::current() != nullptr;
    if (track) {
        bool any = false;
        for (const auto& p : parents)
            any = any || p.requires_grad();
        track = any;
    }
    if (track) {
        out->requires_grad = true;
        out->is_leaf = false;
        out->parents.reserve(parents.size());
        for (auto& p : parents)
            out->parents.push_back(p.ptr());
        out->backprop = std::move(backprop);
        Graph<T>::current()->record(out);
    }
    return Tensor<T>(out);
}

} // namespace

// ---- Tensor statics --------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<int> shape, bool requires_grad) {
    validate_shape(shape);
    auto n = new_node<T>(shape, std::vector<T>(numel_of(shape), T(0)));
    n->requires_grad = requires_grad;
    return Tensor<T>(n);
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<int> shape, T value, bool requires_grad) {
    validate_shape(shape);
    auto n = new_node<T>(shape, std::vector<T>(numel_of(shape), value));
    n->requires_grad = requires_grad;
    return Tensor<T>(n);
}

template <typename T>
Tensor<T> Tensor<T>::from(std::vector<int> shape, std::vector<T> data, bool requires_grad) {
    validate_shape(shape);
    if (data.size() != numel_of(shape))
        throw ShapeError("data length does not match shape");
    auto n = new_node<T>(std::move(shape), std::move(data));
    n->requires_grad = requires_grad;
    return Tensor<T>(n);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
    return from({1}, {value});
}

// ---- Graph -----------------------------------------------------------------

template <typename T>
Graph<T>::Graph() {
    prev_ = g_current_graph<T>;
    g_current_graph<T> = this;
}

template <typename T>
Graph<T>::~Graph() {
    g_current_graph<T> = prev_;
}

template <typename T>
Graph<T>* Graph<T>::current() {
    return g_current_graph<T>;
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward requires a scalar loss");
    const auto& ln = loss.ptr();
    if (ln->is_leaf) {
        if (ln->requires_grad) {
            if (ln->grad.empty())
                ln->grad.assign(1, T(0));
            ln->grad[0] += T(1);
        }
        return;
    }
    bool found = false;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->get() == ln.get()) {
            found = true;
            break;
        }
    }
    if (!found)
        throw ShapeError("graph does not contain the loss tensor");

    if (ln->flow.empty())
        ln->flow.assign(1, T(0));
    ln->flow[0] += T(1);

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        TensorNode<T>& node = **it;
        if (node.flow.empty())
            continue; // not reachable from the loss
        if (node.backprop)
            node.backprop(node);
        if (node.grad.empty())
            node.grad.assign(node.data.size(), T(0));
        for (std::size_t i = 0; i < node.flow.size(); ++i)
            node.grad[i] += node.flow[i];
        node.flow.clear();
    }
}

template <typename T>
void Graph<T>::zero_grad() {
    for (auto& n : nodes_) {
        n->grad.clear();
        n->flow.clear();
    }
}

// ---- conv3d ----------------------------------------------------------------

namespace {

template <typename T>
struct ConvDims {
    int N, Cin, D, H, W;
    int Cout, k, stride, pad;
    int Do, Ho, Wo;
    int Dp, Hp, Wp;
};

template <typename T>
ConvDims<T> conv_dims(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                      int pad) {
    if (x.shape().size() != 5 || w.shape().size() != 5)
        throw ShapeError("conv3d requires 5-D input and weight");
    if (b.shape().size() != 1)
        throw ShapeError("conv3d bias must be rank 1");
    ConvDims<T> d;
    d.N = x.shape()[0];
    d.Cin = x.shape()[1];
    d.D = x.shape()[2];
    d.H = x.shape()[3];
    d.W = x.shape()[4];
    d.Cout = w.shape()[0];
    d.k = w.shape()[2];
    if (w.shape()[1] != d.Cin)
        throw ShapeError("conv3d channel mismatch between input and weight");
    if (w.shape()[3] != d.k || w.shape()[4] != d.k)
        throw ShapeError("conv3d kernel must be cubic");
    if (b.shape()[0] != d.Cout)
        throw ShapeError("conv3d bias length must equal output channels");
    if (stride < 1 || pad < 0)
        throw ShapeError("conv3d requires stride >= 1 and padding >= 0");
    d.stride = stride;
    d.pad = pad;
    if (d.D + 2 * pad < d.k || d.H + 2 * pad < d.k || d.W + 2 * pad < d.k)
        throw ShapeError("conv3d spatial extent smaller than kernel");
    d.Do = (d.D + 2 * pad - d.k) / stride + 1;
    d.Ho = (d.H + 2 * pad - d.k) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.k) / stride + 1;
    d.Dp = d.D + 2 * pad;
    d.Hp = d.H + 2 * pad;
    d.Wp = d.W + 2 * pad;
    return d;
}

/// Zero-padded copy of the input, laid out (N, Cin, Dp, Hp, Wp).
template <typename T>
std::vector<T> pad_input(const T* x, const ConvDims<T>& c) {
    std::vector<T> out(static_cast<std::size_t>(c.N) * c.Cin * c.Dp * c.Hp * c.Wp, T(0));
    for (int n = 0; n < c.N; ++n)
        for (int ci = 0; ci < c.Cin; ++ci)
            for (int z = 0; z < c.D; ++z)
                for (int y = 0; y < c.H; ++y) {
                    const std::size_t src =
                        ((static_cast<std::size_t>(n) * c.Cin + ci) * c.D + z) * c.H * c.W +
                        static_cast<std::size_t>(y) * c.W;
                    const std::size_t dst =
                        (((static_cast<std::size_t>(n) * c.Cin + ci) * c.Dp + z + c.pad) * c.Hp +
                         y + c.pad) *
                            c.Wp +
                        c.pad;
                    std::memcpy(&out[dst], &x[src], sizeof(T) * c.W);
                }
    return out;
}

template <typename T>
void conv_forward(const std::vector<T>& padded, const T* w, const T* b, T* out,
                  const ConvDims<T>& c) {
    const std::size_t total = static_cast<std::size_t>(c.N) * c.Cout;
    detail::parallel_for(total, [&](std::size_t begin, std::size_t end) {
        std::vector<T> acc(static_cast<std::size_t>(c.Wo));
        for (std::size_t t = begin; t < end; ++t) {
            const int n = static_cast<int>(t) / c.Cout;
            const int co = static_cast<int>(t) % c.Cout;
            const T* wbase = w + static_cast<std::size_t>(co) * c.Cin * c.k * c.k * c.k;
            for (int z = 0; z < c.Do; ++z)
                for (int y = 0; y < c.Ho; ++y) {
                    std::fill(acc.begin(), acc.end(), b[co]);
                    for (int ci = 0; ci < c.Cin; ++ci) {
                        const T* pbase =
                            padded.data() +
                            ((static_cast<std::size_t>(n) * c.Cin + ci) * c.Dp) * c.Hp * c.Wp;
                        const T* wc = wbase + static_cast<std::size_t>(ci) * c.k * c.k * c.k;
                        for (int kd = 0; kd < c.k; ++kd)
                            for (int kh = 0; kh < c.k; ++kh) {
                                const T* row = pbase +
                                               (static_cast<std::size_t>(z * c.stride + kd) * c.Hp +
                                                (y * c.stride + kh)) *
                                                   c.Wp;
                                const T* wrow = wc + (kd * c.k + kh) * c.k;
                                for (int kw = 0; kw < c.k; ++kw) {
                                    const T wv = wrow[kw];
                                    const T* src = row + kw;
                                    if (c.stride == 1) {
                                        for (int xo = 0; xo < c.Wo; ++xo)
                                            acc[xo] += wv * src[xo];
                                    } else {
                                        for (int xo = 0; xo < c.Wo; ++xo)
                                            acc[xo] += wv * src[static_cast<std::size_t>(xo) * c.stride];
                                    }
                                }
                            }
                    }
                    T* dst = out + ((static_cast<std::size_t>(n) * c.Cout + co) * c.Do + z) *
                                       c.Ho * c.Wo +
                             static_cast<std::size_t>(y) * c.Wo;
                    std::memcpy(dst, acc.data(), sizeof(T) * c.Wo);
                }
        }
    });
}

template <typename T>
void conv_backward_weight(const std::vector<T>& padded, const T* gout, T* dw,
                          const ConvDims<T>& c) {
    detail::parallel_for(static_cast<std::size_t>(c.Cout), [&](std::size_t begin, std::size_t end) {
        for (std::size_t co = begin; co < end; ++co) {
            T* wbase = dw + co * c.Cin * c.k * c.k * c.k;
            for (int n = 0; n < c.N; ++n) {
                const T* gbase =
                    gout + ((static_cast<std::size_t>(n) * c.Cout + co) * c.Do) * c.Ho * c.Wo;
                for (int ci = 0; ci < c.Cin; ++ci) {
                    const T* pbase = padded.data() +
                                     ((static_cast<std::size_t>(n) * c.Cin + ci) * c.Dp) * c.Hp *
                                         c.Wp;
                    T* wc = wbase + static_cast<std::size_t>(ci) * c.k * c.k * c.k;
                    for (int kd = 0; kd < c.k; ++kd)
                        for (int kh = 0; kh < c.k; ++kh)
                            for (int kw = 0; kw < c.k; ++kw) {
                                T acc = T(0);
                                for (int z = 0; z < c.Do; ++z)
                                    for (int y = 0; y < c.Ho; ++y) {
                                        const T* g = gbase + (static_cast<std::size_t>(z) * c.Ho + y) * c.Wo;
                                        const T* src = pbase +
                                                       (static_cast<std::size_t>(z * c.stride + kd) * c.Hp +
                                                        (y * c.stride + kh)) *
                                                           c.Wp +
                                                       kw;
                                        if (c.stride == 1) {
                                            for (int xo = 0; xo < c.Wo; ++xo)
                                                acc += g[xo] * src[xo];
                                        } else {
                                            for (int xo = 0; xo < c.Wo; ++xo)
                                                acc += g[xo] * src[static_cast<std::size_t>(xo) * c.stride];
                                        }
                                    }
                                wc[(kd * c.k + kh) * c.k + kw] += acc;
                            }
                }
            }
        }
    });
}

template <typename T>
void conv_backward_input(const T* w, const T* gout, T* gx, const ConvDims<T>& c) {
    // Scatter into a padded scratch, then crop-accumulate into gx.
    std::vector<T> gpad(static_cast<std::size_t>(c.N) * c.Cin * c.Dp * c.Hp * c.Wp, T(0));
    const std::size_t total = static_cast<std::size_t>(c.N) * c.Cin;
    detail::parallel_for(total, [&](std::size_t begin, std::size_t end) {
        for (std::size_t t = begin; t < end; ++t) {
            const int n = static_cast<int>(t) / c.Cin;
            const int ci = static_cast<int>(t) % c.Cin;
            T* pbase = gpad.data() +
                       ((static_cast<std::size_t>(n) * c.Cin + ci) * c.Dp) * c.Hp * c.Wp;
            for (int co = 0; co < c.Cout; ++co) {
                const T* gbase =
                    gout + ((static_cast<std::size_t>(n) * c.Cout + co) * c.Do) * c.Ho * c.Wo;
                const T* wc = w + (static_cast<std::size_t>(co) * c.Cin + ci) * c.k * c.k * c.k;
                for (int kd = 0; kd < c.k; ++kd)
                    for (int kh = 0; kh < c.k; ++kh)
                        for (int kw = 0; kw < c.k; ++kw) {
                            const T wv = wc[(kd * c.k + kh) * c.k + kw];
                            for (int z = 0; z < c.Do; ++z)
                                for (int y = 0; y < c.Ho; ++y) {
                                    const T* g = gbase + (static_cast<std::size_t>(z) * c.Ho + y) * c.Wo;
                                    T* dst = pbase +
                                             (static_cast<std::size_t>(z * c.stride + kd) * c.Hp +
                                              (y * c.stride + kh)) *
                                                 c.Wp +
                                             kw;
                                    if (c.stride == 1) {
                                        for (int xo = 0; xo < c.Wo; ++xo)
                                            dst[xo] += wv * g[xo];
                                    } else {
                                        for (int xo = 0; xo < c.Wo; ++xo)
                                            dst[static_cast<std::size_t>(xo) * c.stride] += wv * g[xo];
                                    }
                                }
                        }
            }
            // crop
            for (int z = 0; z < c.D; ++z)
                for (int y = 0; y < c.H; ++y) {
                    const T* src = pbase + (static_cast<std::size_t>(z + c.pad) * c.Hp + y + c.pad) * c.Wp + c.pad;
                    T* dst = gx +
                             ((static_cast<std::size_t>(n) * c.Cin + ci) * c.D + z) * c.H * c.W +
                             static_cast<std::size_t>(y) * c.W;
                    for (int xo = 0; xo < c.W; ++xo)
                        dst[xo] += src[xo];
                }
        }
    });
}

} // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
    const ConvDims<T> c = conv_dims(x, weight, bias, stride, padding);
    std::vector<T> out(static_cast<std::size_t>(c.N) * c.Cout * c.Do * c.Ho * c.Wo);
    {
        const std::vector<T> padded = pad_input(x.data().data(), c);
        conv_forward(padded, weight.data().data(), bias.data().data(), out.data(), c);
    }
    auto node = new_node<T>({c.N, c.Cout, c.Do, c.Ho, c.Wo}, std::move(out));

    auto xn = x.ptr();
    auto wn = weight.ptr();
    auto bn = bias.ptr();
    return finish_op<T>(node, {x, weight, bias}, [xn, wn, bn, c](TensorNode<T>& self) {
        const T* gout = self.flow.data();
        if (T* db = grad_sink(*bn)) {
            for (int n = 0; n < c.N; ++n)
                for (int co = 0; co < c.Cout; ++co) {
                    const T* g = gout + ((static_cast<std::size_t>(n) * c.Cout + co) * c.Do) * c.Ho * c.Wo;
                    T acc = T(0);
                    const std::size_t plane = static_cast<std::size_t>(c.Do) * c.Ho * c.Wo;
                    for (std::size_t i = 0; i < plane; ++i)
                        acc += g[i];
                    db[co] += acc;
                }
        }
        if (T* dw = grad_sink(*wn)) {
            const std::vector<T> padded = pad_input(xn->data.data(), c);
            conv_backward_weight(padded, gout, dw, c);
        }
        if (T* gx = grad_sink(*xn)) {
            conv_backward_input(wn->data.data(), gout, gx, c);
        }
    });
}

// ---- elementwise -----------------------------------------------------------

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    std::vector<T> out(x.numel());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = xd[i] > T(0) ? xd[i] : slope * xd[i];
    auto node = new_node<T>(x.shape(), std::move(out));
    auto xn = x.ptr();
    return finish_op<T>(node, {x}, [xn, slope](TensorNode<T>& self) {
        if (T* gx = grad_sink(*xn)) {
            const auto& xd = xn->data;
            for (std::size_t i = 0; i < self.flow.size(); ++i)
                gx[i] += self.flow[i] * (xd[i] > T(0) ? T(1) : slope);
        }
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = xd[i];
        if (v >= T(0)) {
            const T e = std::exp(-v);
            out[i] = T(1) / (T(1) + e);
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    auto node = new_node<T>(x.shape(), std::move(out));
    auto xn = x.ptr();
    return finish_op<T>(node, {x}, [xn](TensorNode<T>& self) {
        if (T* gx = grad_sink(*xn)) {
            for (std::size_t i = 0; i < self.flow.size(); ++i) {
                const T s = self.data[i];
                gx[i] += self.flow[i] * s * (T(1) - s);
            }
        }
    });
}

namespace {

enum class Broadcast { none, scalar, channel };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape())
        return Broadcast::none;
    if (b.numel() == 1)
        return Broadcast::scalar;
    if (a.shape().size() == 5) {
        const int C = a.shape()[1];
        const auto& bs = b.shape();
        const bool flat = bs.size() == 1 && bs[0] == C;
        const bool keep = bs.size() == 5 && bs[0] == 1 && bs[1] == C && bs[2] == 1 && bs[3] == 1 && bs[4] == 1;
        if (flat || keep)
            return Broadcast::channel;
    }
    throw ShapeError("elementwise op shape mismatch");
}

/// Elements per channel step / index helpers for channel broadcast on a
/// 5-D left operand.
struct ChannelMap {
    std::size_t spatial; // D*H*W
    int C;
};

template <typename T>
ChannelMap channel_map(const Tensor<T>& a) {
    const auto& s = a.shape();
    return ChannelMap{static_cast<std::size_t>(s[2]) * s[3] * s[4], s[1]};
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd make_backprop) {
    const Broadcast bc = broadcast_kind(a, b);
    std::vector<T> out(a.numel());
    const auto& ad = a.data();
    const auto& bd = b.data();
    switch (bc) {
    case Broadcast::none:
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = fwd(ad[i], bd[i]);
        break;
    case Broadcast::scalar:
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = fwd(ad[i], bd[0]);
        break;
    case Broadcast::channel: {
        const ChannelMap m = channel_map(a);
        std::size_t i = 0;
        const int N = a.shape()[0];
        for (int n = 0; n < N; ++n)
            for (int ch = 0; ch < m.C; ++ch) {
                const T bv = bd[static_cast<std::size_t>(ch)];
                for (std::size_t s = 0; s < m.spatial; ++s, ++i)
                    out[i] = fwd(ad[i], bv);
            }
        break;
    }
    }
    auto node = new_node<T>(a.shape(), std::move(out));
    return finish_op<T>(node, {a, b}, make_backprop(bc));
}

} // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    auto an = a.ptr();
    auto bn = b.ptr();
    return binary_op<T>(
        a, b, [](T x, T y) { return x + y; },
        [an, bn, &a](Broadcast bc) {
            const ChannelMap m = bc == Broadcast::channel ? channel_map(a) : ChannelMap{0, 0};
            return [an, bn, bc, m](TensorNode<T>& self) {
                if (T* ga = grad_sink(*an))
                    for (std::size_t i = 0; i < self.flow.size(); ++i)
                        ga[i] += self.flow[i];
                if (T* gb = grad_sink(*bn)) {
                    switch (bc) {
                    case Broadcast::none:
                        for (std::size_t i = 0; i < self.flow.size(); ++i)
                            gb[i] += self.flow[i];
                        break;
                    case Broadcast::scalar: {
                        T acc = T(0);
                        for (T v : self.flow)
                            acc += v;
                        gb[0] += acc;
                        break;
                    }
                    case Broadcast::channel: {
                        std::size_t i = 0;
                        const std::size_t per = m.spatial;
                        const std::size_t groups = self.flow.size() / (per * m.C);
                        for (std::size_t n = 0; n < groups; ++n)
                            for (int ch = 0; ch < m.C; ++ch) {
                                T acc = T(0);
                                for (std::size_t s = 0; s < per; ++s, ++i)
                                    acc += self.flow[i];
                                gb[ch] += acc;
                            }
                        break;
                    }
                    }
                }
            };
        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    auto an = a.ptr();
    auto bn = b.ptr();
    return binary_op<T>(
        a, b, [](T x, T y) { return x - y; },
        [an, bn, &a](Broadcast bc) {
            const ChannelMap m = bc == Broadcast::channel ? channel_map(a) : ChannelMap{0, 0};
            return [an, bn, bc, m](TensorNode<T>& self) {
                if (T* ga = grad_sink(*an))
                    for (std::size_t i = 0; i < self.flow.size(); ++i)
                        ga[i] += self.flow[i];
                if (T* gb = grad_sink(*bn)) {
                    switch (bc) {
                    case Broadcast::none:
                        for (std::size_t i = 0; i < self.flow.size(); ++i)
                            gb[i] -= self.flow[i];
                        break;
                    case Broadcast::scalar: {
                        T acc = T(0);
                        for (T v : self.flow)
                            acc += v;
                        gb[0] -= acc;
                        break;
                    }
                    case Broadcast::channel: {
                        std::size_t i = 0;
                        const std::size_t per = m.spatial;
                        const std::size_t groups = self.flow.size() / (per * m.C);
                        for (std::size_t n = 0; n < groups; ++n)
                            for (int ch = 0; ch < m.C; ++ch) {
                                T acc = T(0);
                                for (std::size_t s = 0; s < per; ++s, ++i)
                                    acc += self.flow[i];
                                gb[ch] -= acc;
                            }
                        break;
                    }
                    }
                }
            };
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    auto an = a.ptr();
    auto bn = b.ptr();
    return binary_op<T>(
        a, b, [](T x, T y) { return x * y; },
        [an, bn, &a](Broadcast bc) {
            const ChannelMap m = bc == Broadcast::channel ? channel_map(a) : ChannelMap{0, 0};
            return [an, bn, bc, m](TensorNode<T>& self) {
                const auto& ad = an->data;
                const auto& bd = bn->data;
                T* ga = grad_sink(*an);
                T* gb = grad_sink(*bn);
                switch (bc) {
                case Broadcast::none:
                    for (std::size_t i = 0; i < self.flow.size(); ++i) {
                        if (ga)
                            ga[i] += self.flow[i] * bd[i];
                        if (gb)
                            gb[i] += self.flow[i] * ad[i];
                    }
                    break;
                case Broadcast::scalar: {
                    T acc = T(0);
                    for (std::size_t i = 0; i < self.flow.size(); ++i) {
                        if (ga)
                            ga[i] += self.flow[i] * bd[0];
                        acc += self.flow[i] * ad[i];
                    }
                    if (gb)
                        gb[0] += acc;
                    break;
                }
                case Broadcast::channel: {
                    std::size_t i = 0;
                    const std::size_t per = m.spatial;
                    const std::size_t groups = self.flow.size() / (per * m.C);
                    for (std::size_t n = 0; n < groups; ++n)
                        for (int ch = 0; ch < m.C; ++ch) {
                            T acc = T(0);
                            for (std::size_t s = 0; s < per; ++s, ++i) {
                                if (ga)
                                    ga[i] += self.flow[i] * bd[static_cast<std::size_t>(ch)];
                                acc += self.flow[i] * ad[i];
                            }
                            if (gb)
                                gb[ch] += acc;
                        }
                    break;
                }
                }
            };
        });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    std::vector<T> out(x.numel());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = xd[i] + c;
    auto node = new_node<T>(x.shape(), std::move(out));
    auto xn = x.ptr();
    return finish_op<T>(node, {x}, [xn](TensorNode<T>& self) {
        if (T* gx = grad_sink(*xn))
            for (std::size_t i = 0; i < self.flow.size(); ++i)
                gx[i] += self.flow[i];
    });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
    std::vector<T> out(x.numel());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = xd[i] * c;
    auto node = new_node<T>(x.shape(), std::move(out));
    auto xn = x.ptr();
    return finish_op<T>(node, {x}, [xn, c](TensorNode<T>& self) {
        if (T* gx = grad_sink(*xn))
            for (std::size_t i = 0; i < self.flow.size(); ++i)
                gx[i] += self.flow[i] * c;
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    double acc = 0.0;
    for (T v : x.data())
        acc += static_cast<double>(v);
    const std::size_t n = x.numel();
    auto node = new_node<T>({1}, {static_cast<T>(acc / static_cast<double>(n))});
    auto xn = x.ptr();
    return finish_op<T>(node, {x}, [xn, n](TensorNode<T>& self) {
        if (T* gx = grad_sink(*xn)) {
            const T g = self.flow[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i)
                gx[i] += g;
        }
    });
}

template <typename T>
Tensor<T> l1(const Tensor<T>& x, const Tensor<T>& y) {
    if (x.shape() != y.shape())
        throw ShapeError("l1 requires identical shapes");
    const auto& xd = x.data();
    const auto& yd = y.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < xd.size(); ++i)
        acc += std::abs(static_cast<double>(xd[i]) - static_cast<double>(yd[i]));
    const std::size_t n = x.numel();
    auto node = new_node<T>({1}, {static_cast<T>(acc / static_cast<double>(n))});
    auto xn = x.ptr();
    auto yn = y.ptr();
    return finish_op<T>(node, {x, y}, [xn, yn, n](TensorNode<T>& self) {
        const T g = self.flow[0] / static_cast<T>(n);
        T* gx = grad_sink(*xn);
        T* gy = grad_sink(*yn);
        const auto& xd = xn->data;
        const auto& yd = yn->data;
        for (std::size_t i = 0; i < n; ++i) {
            const T d = xd[i] - yd[i];
            const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
            if (gx)
                gx[i] += g * s;
            if (gy)
                gy[i] -= g * s;
        }
    });
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps) {
    if (x.shape().size() != 5)
        throw ShapeError("instance_norm requires a 5-D tensor");
    const int N = x.shape()[0], C = x.shape()[1];
    const std::size_t M = static_cast<std::size_t>(x.shape()[2]) * x.shape()[3] * x.shape()[4];
    const auto& xd = x.data();
    std::vector<T> out(x.numel());
    std::vector<T> inv_std(static_cast<std::size_t>(N) * C);
    for (int n = 0; n < N; ++n)
        for (int ch = 0; ch < C; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + ch) * M;
            double sum = 0.0;
            for (std::size_t i = 0; i < M; ++i)
                sum += static_cast<double>(xd[base + i]);
            const double mu = sum / static_cast<double>(M);
            double var = 0.0;
            for (std::size_t i = 0; i < M; ++i) {
                const double d = static_cast<double>(xd[base + i]) - mu;
                var += d * d;
            }
            var /= static_cast<double>(M);
            const double s = 1.0 / std::sqrt(var + static_cast<double>(eps));
            inv_std[static_cast<std::size_t>(n) * C + ch] = static_cast<T>(s);
            for (std::size_t i = 0; i < M; ++i)
                out[base + i] = static_cast<T>((static_cast<double>(xd[base + i]) - mu) * s);
        }
    auto node = new_node<T>(x.shape(), std::move(out));
    auto xn = x.ptr();
    return finish_op<T>(node, {x}, [xn, N, C, M, inv_std](TensorNode<T>& self) {
        if (T* gx = grad_sink(*xn)) {
            const auto& yd = self.data;
            for (int n = 0; n < N; ++n)
                for (int ch = 0; ch < C; ++ch) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + ch) * M;
                    const T s = inv_std[static_cast<std::size_t>(n) * C + ch];
                    double gsum = 0.0, gysum = 0.0;
                    for (std::size_t i = 0; i < M; ++i) {
                        gsum += static_cast<double>(self.flow[base + i]);
                        gysum += static_cast<double>(self.flow[base + i]) * static_cast<double>(yd[base + i]);
                    }
                    const double gmean = gsum / static_cast<double>(M);
                    const double gymean = gysum / static_cast<double>(M);
                    for (std::size_t i = 0; i < M; ++i) {
                        const double g = static_cast<double>(self.flow[base + i]);
                        gx[base + i] += static_cast<T>(
                            static_cast<double>(s) * (g - gmean - static_cast<double>(yd[base + i]) * gymean));
                    }
                }
        }
    });
}

// ---- pixel shuffle ---------------------------------------------------------

namespace {

/// shuffle=true maps (N,C*r^3,D,H,W) -> (N,C,Dr,Hr,Wr); false is the inverse.
template <typename T>
void shuffle_copy(const T* in, T* out, int N, int C, int D, int H, int W, int r, bool shuffle) {
    // C, D, H, W describe the compact side (the unshuffled layout).
    const int r3 = r * r * r;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < r; ++j)
                    for (int kk = 0; kk < r; ++kk) {
                        const int cin = c * r3 + i * r * r + j * r + kk;
                        for (int d = 0; d < D; ++d)
                            for (int h = 0; h < H; ++h) {
                                const std::size_t compact =
                                    ((((static_cast<std::size_t>(n) * C * r3 + cin) * D + d) * H + h) * W);
                                const std::size_t big =
                                    ((((static_cast<std::size_t>(n) * C + c) * (D * r) + d * r + i) *
                                          (H * r) +
                                      h * r + j) *
                                         (W * r) +
                                     kk);
                                if (shuffle) {
                                    for (int w = 0; w < W; ++w)
                                        out[big + static_cast<std::size_t>(w) * r] = in[compact + w];
                                } else {
                                    for (int w = 0; w < W; ++w)
                                        out[compact + w] = in[big + static_cast<std::size_t>(w) * r];
                                }
                            }
                    }
}

} // namespace

template <typename T>
Tensor<T> pixel_shuffle3d(const Tensor<T>& x, int r) {
    if (x.shape().size() != 5)
        throw ShapeError("pixel_shuffle3d requires a 5-D tensor");
    const int r3 = r * r * r;
    if (r < 1 || x.shape()[1] % r3 != 0)
        throw ShapeError("pixel_shuffle3d channel count not divisible by r^3");
    const int N = x.shape()[0], C = x.shape()[1] / r3;
    const int D = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    std::vector<T> out(x.numel());
    shuffle_copy(x.data().data(), out.data(), N, C, D, H, W, r, true);
    auto node = new_node<T>({N, C, D * r, H * r, W * r}, std::move(out));
    auto xn = x.ptr();
    return finish_op<T>(node, {x}, [xn, N, C, D, H, W, r](TensorNode<T>& self) {
        if (T* gx = grad_sink(*xn)) {
            std::vector<T> tmp(self.flow.size());
            shuffle_copy(self.flow.data(), tmp.data(), N, C, D, H, W, r, false);
            for (std::size_t i = 0; i < tmp.size(); ++i)
                gx[i] += tmp[i];
        }
    });
}

template <typename T>
Tensor<T> pixel_unshuffle3d(const Tensor<T>& x, int r) {
    if (x.shape().size() != 5)
        throw ShapeError("pixel_unshuffle3d requires a 5-D tensor");
    if (r < 1 || x.shape()[2] % r != 0 || x.shape()[3] % r != 0 || x.shape()[4] % r != 0)
        throw ShapeError("pixel_unshuffle3d spatial dims not divisible by r");
    const int N = x.shape()[0], C = x.shape()[1];
    const int D = x.shape()[2] / r, H = x.shape()[3] / r, W = x.shape()[4] / r;
    std::vector<T> out(x.numel());
    shuffle_copy(x.data().data(), out.data(), N, C, D, H, W, r, false);
    auto node = new_node<T>({N, C * r * r * r, D, H, W}, std::move(out));
    auto xn = x.ptr();
    return finish_op<T>(node, {x}, [xn, N, C, D, H, W, r](TensorNode<T>& self) {
        if (T* gx = grad_sink(*xn)) {
            std::vector<T> tmp(self.flow.size());
            shuffle_copy(self.flow.data(), tmp.data(), N, C, D, H, W, r, true);
            for (std::size_t i = 0; i < tmp.size(); ++i)
                gx[i] += tmp[i];
        }
    });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    if (parts.empty())
        throw ShapeError("concat_channels requires at least one tensor");
    const auto& first = parts[0].shape();
    if (first.size() != 5)
        throw ShapeError("concat_channels requires 5-D tensors");
    int Ctotal = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        if (s.size() != 5 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] || s[4] != first[4])
            throw ShapeError("concat_channels shape mismatch");
        Ctotal += s[1];
    }
    const int N = first[0];
    const std::size_t spatial = static_cast<std::size_t>(first[2]) * first[3] * first[4];
    std::vector<T> out(static_cast<std::size_t>(N) * Ctotal * spatial);
    std::vector<int> offsets;
    int off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const int Cp = p.shape()[1];
        for (int n = 0; n < N; ++n) {
            const std::size_t src = static_cast<std::size_t>(n) * Cp * spatial;
            const std::size_t dst = (static_cast<std::size_t>(n) * Ctotal + off) * spatial;
            std::memcpy(&out[dst], p.data().data() + src, sizeof(T) * Cp * spatial);
        }
        off += Cp;
    }
    auto node = new_node<T>({N, Ctotal, first[2], first[3], first[4]}, std::move(out));
    std::vector<std::shared_ptr<TensorNode<T>>> pnodes;
    std::vector<int> widths;
    for (const auto& p : parts) {
        pnodes.push_back(p.ptr());
        widths.push_back(p.shape()[1]);
    }
    return finish_op<T>(node, parts, [pnodes, widths, offsets, N, Ctotal, spatial](TensorNode<T>& self) {
        for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
            if (T* gp = grad_sink(*pnodes[pi])) {
                const int Cp = widths[pi];
                for (int n = 0; n < N; ++n) {
                    const std::size_t src = (static_cast<std::size_t>(n) * Ctotal + offsets[pi]) * spatial;
                    const std::size_t dst = static_cast<std::size_t>(n) * Cp * spatial;
                    for (std::size_t i = 0; i < static_cast<std::size_t>(Cp) * spatial; ++i)
                        gp[dst + i] += self.flow[src + i];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.shape().size() != 5)
        throw ShapeError("global_avg_pool requires a 5-D tensor");
    const int N = x.shape()[0], C = x.shape()[1];
    const std::size_t M = static_cast<std::size_t>(x.shape()[2]) * x.shape()[3] * x.shape()[4];
    std::vector<T> out(static_cast<std::size_t>(N) * C);
    const auto& xd = x.data();
    for (std::size_t nc = 0; nc < out.size(); ++nc) {
        double acc = 0.0;
        for (std::size_t i = 0; i < M; ++i)
            acc += static_cast<double>(xd[nc * M + i]);
        out[nc] = static_cast<T>(acc / static_cast<double>(M));
    }
    auto node = new_node<T>({N, C, 1, 1, 1}, std::move(out));
    auto xn = x.ptr();
    return finish_op<T>(node, {x}, [xn, M](TensorNode<T>& self) {
        if (T* gx = grad_sink(*xn)) {
            for (std::size_t nc = 0; nc < self.flow.size(); ++nc) {
                const T g = self.flow[nc] / static_cast<T>(M);
                for (std::size_t i = 0; i < M; ++i)
                    gx[nc * M + i] += g;
            }
        }
    });
}

template <typename T>
Tensor<T> log_clamped(const Tensor<T>& x, T floor) {
    std::vector<T> out(x.numel());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::log(std::max(xd[i], floor));
    auto node = new_node<T>(x.shape(), std::move(out));
    auto xn = x.ptr();
    return finish_op<T>(node, {x}, [xn, floor](TensorNode<T>& self) {
        if (T* gx = grad_sink(*xn)) {
            const auto& xd = xn->data;
            for (std::size_t i = 0; i < self.flow.size(); ++i)
                if (xd[i] > floor)
                    gx[i] += self.flow[i] / xd[i];
        }
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
    validate_shape(shape);
    if (numel_of(shape) != x.numel())
        throw ShapeError("reshape must preserve element count");
    auto node = new_node<T>(std::move(shape), x.data());
    auto xn = x.ptr();
    return finish_op<T>(node, {x}, [xn](TensorNode<T>& self) {
        if (T* gx = grad_sink(*xn))
            for (std::size_t i = 0; i < self.flow.size(); ++i)
                gx[i] += self.flow[i];
    });
}

template <typename T>
Tensor<T> downsample_half_nc(const Tensor<T>& x) {
    if (x.shape().size() != 5)
        throw ShapeError("downsample_half_nc requires a 5-D tensor");
    const int N = x.shape()[0], C = x.shape()[1];
    const int D = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    if (D % 2 || H % 2 || W % 2 || D < 2 || H < 2 || W < 2)
        throw OddDimension("downsample_half_nc requires even spatial dims");
    const int Do = D / 2, Ho = H / 2, Wo = W / 2;
    std::vector<T> out(static_cast<std::size_t>(N) * C * Do * Ho * Wo);
    const auto& xd = x.data();
    std::size_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int ch = 0; ch < C; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + ch) * D * H * W;
            for (int d = 0; d < Do; ++d)
                for (int h = 0; h < Ho; ++h)
                    for (int w = 0; w < Wo; ++w, ++o) {
                        double acc = 0.0;
                        for (int dz = 0; dz < 2; ++dz)
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx)
                                    acc += static_cast<double>(
                                        xd[base +
                                           (static_cast<std::size_t>(2 * d + dz) * H + 2 * h + dy) * W +
                                           2 * w + dx]);
                        out[o] = static_cast<T>(acc * 0.125);
                    }
        }
    auto node = new_node<T>({N, C, Do, Ho, Wo}, std::move(out));
    auto xn = x.ptr();
    return finish_op<T>(node, {x}, [xn, N, C, D, H, W, Do, Ho, Wo](TensorNode<T>& self) {
        if (T* gx = grad_sink(*xn)) {
            std::size_t o = 0;
            for (int n = 0; n < N; ++n)
                for (int ch = 0; ch < C; ++ch) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + ch) * D * H * W;
                    for (int d = 0; d < Do; ++d)
                        for (int h = 0; h < Ho; ++h)
                            for (int w = 0; w < Wo; ++w, ++o) {
                                const T g = self.flow[o] * T(0.125);
                                for (int dz = 0; dz < 2; ++dz)
                                    for (int dy = 0; dy < 2; ++dy)
                                        for (int dx = 0; dx < 2; ++dx)
                                            gx[base +
                                               (static_cast<std::size_t>(2 * d + dz) * H + 2 * h + dy) * W +
                                               2 * w + dx] += g;
                            }
                }
        }
    });
}

// ---- explicit instantiations ------------------------------------------------

#define TRISR_INSTANTIATE(T)                                                                       \
    template class Tensor<T>;                                                                      \
    template class Graph<T>;                                                                       \
    template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int); \
    template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                         \
    template Tensor<T> sigmoid<T>(const Tensor<T>&);                                               \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                         \
    template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                         \
    template Tensor<T> mean<T>(const Tensor<T>&);                                                  \
    template Tensor<T> l1<T>(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> instance_norm<T>(const Tensor<T>&, T);                                      \
    template Tensor<T> pixel_shuffle3d<T>(const Tensor<T>&, int);                                  \
    template Tensor<T> pixel_unshuffle3d<T>(const Tensor<T>&, int);                                \
    template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                          \
    template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                       \
    template Tensor<T> log_clamped<T>(const Tensor<T>&, T);                                        \
    template Tensor<T> reshape<T>(const Tensor<T>&, std::vector<int>);                             \
    template Tensor<T> downsample_half_nc<T>(const Tensor<T>&);

TRISR_INSTANTIATE(float)
TRISR_INSTANTIATE(double)

#undef TRISR_INSTANTIATE

} // namespace trisr
