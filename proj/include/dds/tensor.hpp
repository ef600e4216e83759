#pragma once

// Dense f64 tensors with reverse-mode automatic differentiation on an
// explicit tape. Everything here is deliberately CPU-only and desk-scale:
// values are immutable once created, gradients live on the tape's nodes,
// and a Tape is owned by a single thread.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dds {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Rng: splitmix64-based generator with hand-rolled distributions so that
// streams are bit-reproducible across platforms (std:: distributions are
// implementation-defined).
// ---------------------------------------------------------------------------
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // one warm-up step so seed=0 and seed=golden don't collide trivially
        next_u64();
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in the open interval (0, 1); rejects exact endpoints so that
    // log(u) and log(1-u) stay finite
    double uniform01_open() {
        double u = uniform01();
        while (u == 0.0) u = uniform01();
        return u;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01_open();
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // unbiased integer in [0, n)
    std::size_t below(std::size_t n) {
        if (n <= 1) return 0;
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return static_cast<std::size_t>(v % n);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

    // derive an independent deterministic stream
    Rng fork(std::uint64_t stream) const {
        return Rng(state_ ^ (0x9e3779b97f4a7c15ull * (stream + 0x632be59bd9b4e019ull)));
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

class Tape;

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized like data iff tracked
    Tape* tape = nullptr;
    std::size_t id = 0;  // nonzero iff tracked
    bool is_leaf = false;

    bool tracked() const { return tape != nullptr; }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor: immutable value handle. Untracked tensors are plain constants;
// tracked tensors belong to a Tape and carry a gradient buffer.
// ---------------------------------------------------------------------------
class Tensor {
public:
    Tensor() : n_(std::make_shared<detail::TensorNode>()) {}

    Tensor(Shape shape, std::vector<double> data) : n_(std::make_shared<detail::TensorNode>()) {
        if (numel(shape) != data.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
        n_->shape = std::move(shape);
        n_->data = std::move(data);
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor zeros(Shape shape) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor ones(Shape shape) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 1.0));
    }

    static Tensor full(Shape shape, double v) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }

    const Shape& shape() const { return n_->shape; }
    std::size_t size() const { return n_->data.size(); }

    std::span<const double> data() const { return n_->data; }
    double operator[](std::size_t i) const { return n_->data[i]; }

    double item() const {
        if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
        return n_->data[0];
    }

    bool tracked() const { return n_->tracked(); }
    std::size_t node_id() const { return n_->id; }
    Tape* tape() const { return n_->tape; }

    std::span<const double> grad() const {
        if (!tracked()) throw NumericError("grad: tensor is not gradient-tracked");
        return n_->grad;
    }

    // detached constant copy (drops tape association)
    Tensor detach() const { return Tensor(n_->shape, n_->data); }

    const std::shared_ptr<detail::TensorNode>& node() const { return n_; }

private:
    friend class Tape;
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : n_(std::move(n)) {}
    std::shared_ptr<detail::TensorNode> n_;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of operations. Entries are appended in forward order,
// so every operand of entry k was produced before k; backward() replays the
// entries exactly once in reverse.
// ---------------------------------------------------------------------------
class Tape {
public:
    struct EntryInfo {
        std::vector<std::size_t> operand_ids;  // 0 for untracked operands
        std::size_t output_id;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // a gradient-tracked leaf (parameter or instrumented input); leaf
    // gradients accumulate across backward() calls until zero_grad()
    Tensor leaf(Shape shape, std::vector<double> data) {
        Tensor t(std::move(shape), std::move(data));
        adopt(t.n_);
        t.n_->is_leaf = true;
        return t;
    }

    Tensor leaf(const Tensor& constant) { return leaf(constant.shape(), {constant.data().begin(), constant.data().end()}); }

    // used by op implementations to create tracked outputs
    Tensor track(Shape shape, std::vector<double> data) {
        Tensor t(std::move(shape), std::move(data));
        adopt(t.n_);
        return t;
    }

    void record(std::vector<std::size_t> operand_ids, std::size_t output_id, std::function<void()> pull) {
        infos_.push_back({std::move(operand_ids), output_id});
        entries_.push_back(std::move(pull));
    }

    void backward(const Tensor& loss) {
        if (!loss.tracked() || loss.tape() != this)
            throw NumericError("backward: loss was not produced on this tape");
        if (loss.size() != 1)
            throw NumericError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
        // interior grads are per-pass scratch; leaves keep accumulating
        for (auto& n : nodes_)
            if (!n->is_leaf) std::fill(n->grad.begin(), n->grad.end(), 0.0);
        loss.node()->grad[0] += 1.0;
        last_visit_count_ = 0;
        for (std::size_t i = entries_.size(); i-- > 0;) {
            entries_[i]();
            ++last_visit_count_;
        }
    }

    void zero_grad() {
        for (auto& n : nodes_) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }

    std::size_t entry_count() const { return entries_.size(); }
    std::size_t node_count() const { return nodes_.size(); }
    std::size_t last_visit_count() const { return last_visit_count_; }
    const std::vector<EntryInfo>& entry_infos() const { return infos_; }

private:
    void adopt(const std::shared_ptr<detail::TensorNode>& n) {
        n->tape = this;
        n->id = next_id_++;
        n->grad.assign(n->data.size(), 0.0);
        nodes_.push_back(n);
    }

    std::size_t next_id_ = 1;
    std::vector<std::shared_ptr<detail::TensorNode>> nodes_;
    std::vector<std::function<void()>> entries_;
    std::vector<EntryInfo> infos_;
    std::size_t last_visit_count_ = 0;
};

inline void backward(const Tensor& loss) {
    if (!loss.tracked()) throw NumericError("backward: loss is not gradient-tracked");
    loss.tape()->backward(loss);
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting. Supported combinations: equal
// shapes, either operand scalar, or b broadcast along a's leading batch axis.
// ---------------------------------------------------------------------------
namespace detail {

enum class Bcast { same, scalar_a, scalar_b, batch_b };

struct BcastMap {
    Bcast mode;
    std::size_t inner = 0;  // numel(b) for batch_b

    std::size_t a(std::size_t i) const { return mode == Bcast::scalar_a ? 0 : i; }
    std::size_t b(std::size_t i) const {
        switch (mode) {
            case Bcast::same:
            case Bcast::scalar_a: return i;
            case Bcast::scalar_b: return 0;
            case Bcast::batch_b: return i % inner;
        }
        return i;
    }
};

inline BcastMap broadcast_map(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return {Bcast::same, 0};
    if (numel(b) == 1) return {Bcast::scalar_b, 0};
    if (numel(a) == 1) return {Bcast::scalar_a, 0};
    if (a.size() == b.size() + 1 && std::equal(b.begin(), b.end(), a.begin() + 1))
        return {Bcast::batch_b, numel(b)};
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

inline Tape* common_tape(const Tensor& a, const Tensor& b) {
    Tape* ta = a.tape();
    Tape* tb = b.tape();
    if (ta && tb && ta != tb) throw NumericError("op: operands belong to different tapes");
    return ta ? ta : tb;
}

inline std::vector<std::size_t> ids(std::initializer_list<Tensor> ts) {
    std::vector<std::size_t> v;
    for (const auto& t : ts) v.push_back(t.node_id());
    return v;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    auto map = detail::broadcast_map(a.shape(), b.shape(), "add");
    const Shape& out_shape = (map.mode == detail::Bcast::scalar_a) ? b.shape() : a.shape();
    std::size_t n = numel(out_shape);
    std::vector<double> out(n);
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[map.a(i)] + bd[map.b(i)];

    Tape* t = detail::common_tape(a, b);
    if (!t) return Tensor(out_shape, std::move(out));
    Tensor o = t->track(out_shape, std::move(out));
    t->record(detail::ids({a, b}), o.node_id(), [an = a.node(), bn = b.node(), on = o.node(), map, n] {
        const auto& g = on->grad;
        if (an->tracked())
            for (std::size_t i = 0; i < n; ++i) an->grad[map.a(i)] += g[i];
        if (bn->tracked())
            for (std::size_t i = 0; i < n; ++i) bn->grad[map.b(i)] += g[i];
    });
    return o;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    auto map = detail::broadcast_map(a.shape(), b.shape(), "sub");
    const Shape& out_shape = (map.mode == detail::Bcast::scalar_a) ? b.shape() : a.shape();
    std::size_t n = numel(out_shape);
    std::vector<double> out(n);
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[map.a(i)] - bd[map.b(i)];

    Tape* t = detail::common_tape(a, b);
    if (!t) return Tensor(out_shape, std::move(out));
    Tensor o = t->track(out_shape, std::move(out));
    t->record(detail::ids({a, b}), o.node_id(), [an = a.node(), bn = b.node(), on = o.node(), map, n] {
        const auto& g = on->grad;
        if (an->tracked())
            for (std::size_t i = 0; i < n; ++i) an->grad[map.a(i)] += g[i];
        if (bn->tracked())
            for (std::size_t i = 0; i < n; ++i) bn->grad[map.b(i)] -= g[i];
    });
    return o;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    auto map = detail::broadcast_map(a.shape(), b.shape(), "mul");
    const Shape& out_shape = (map.mode == detail::Bcast::scalar_a) ? b.shape() : a.shape();
    std::size_t n = numel(out_shape);
    std::vector<double> out(n);
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[map.a(i)] * bd[map.b(i)];

    Tape* t = detail::common_tape(a, b);
    if (!t) return Tensor(out_shape, std::move(out));
    Tensor o = t->track(out_shape, std::move(out));
    t->record(detail::ids({a, b}), o.node_id(), [an = a.node(), bn = b.node(), on = o.node(), map, n] {
        const auto& g = on->grad;
        if (an->tracked())
            for (std::size_t i = 0; i < n; ++i) an->grad[map.a(i)] += g[i] * bn->data[map.b(i)];
        if (bn->tracked())
            for (std::size_t i = 0; i < n; ++i) bn->grad[map.b(i)] += g[i] * an->data[map.a(i)];
    });
    return o;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    auto map = detail::broadcast_map(a.shape(), b.shape(), "div");
    const Shape& out_shape = (map.mode == detail::Bcast::scalar_a) ? b.shape() : a.shape();
    std::size_t n = numel(out_shape);
    std::vector<double> out(n);
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[map.a(i)] / bd[map.b(i)];

    Tape* t = detail::common_tape(a, b);
    if (!t) return Tensor(out_shape, std::move(out));
    Tensor o = t->track(out_shape, std::move(out));
    t->record(detail::ids({a, b}), o.node_id(), [an = a.node(), bn = b.node(), on = o.node(), map, n] {
        const auto& g = on->grad;
        if (an->tracked())
            for (std::size_t i = 0; i < n; ++i) an->grad[map.a(i)] += g[i] / bn->data[map.b(i)];
        if (bn->tracked())
            for (std::size_t i = 0; i < n; ++i) {
                double bv = bn->data[map.b(i)];
                bn->grad[map.b(i)] -= g[i] * an->data[map.a(i)] / (bv * bv);
            }
    });
    return o;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }

// ---------------------------------------------------------------------------
// matmul: [r x k] . [k x c] -> [r x c]; backward dA = G.B^T, dB = A^T.G
// ---------------------------------------------------------------------------
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    std::size_t r = a.shape()[0], k = a.shape()[1];
    std::size_t k2 = b.shape()[0], c = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));

    std::vector<double> out(r * c, 0.0);
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            double av = ad[i * k + p];
            const double* brow = &bd[p * c];
            double* orow = &out[i * c];
            for (std::size_t j = 0; j < c; ++j) orow[j] += av * brow[j];
        }

    Shape out_shape{r, c};
    Tape* t = detail::common_tape(a, b);
    if (!t) return Tensor(out_shape, std::move(out));
    Tensor o = t->track(out_shape, std::move(out));
    t->record(detail::ids({a, b}), o.node_id(), [an = a.node(), bn = b.node(), on = o.node(), r, k, c] {
        const auto& g = on->grad;
        if (an->tracked()) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    const double* grow = &g[i * c];
                    const double* brow = &bn->data[p * c];
                    for (std::size_t j = 0; j < c; ++j) acc += grow[j] * brow[j];
                    an->grad[i * k + p] += acc;
                }
        }
        if (bn->tracked()) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double av = an->data[i * k + p];
                    const double* grow = &g[i * c];
                    double* brow = &bn->grad[p * c];
                    for (std::size_t j = 0; j < c; ++j) brow[j] += av * grow[j];
                }
        }
    });
    return o;
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation (no kernel flip), square stride, padding either
// zero-filled or circular (wrap). input [B x C x H x W], kernel
// [O x C x kh x kw] -> [B x O x H' x W'] with H' = (H + 2p - kh)/stride + 1.
// Wrap padding keeps the op translation-equivariant on the torus, so a
// wrap-padded network cannot encode absolute pixel position.
// ---------------------------------------------------------------------------
enum class PadMode { zero, wrap };

namespace detail {

inline std::size_t wrap_index(std::ptrdiff_t i, std::size_t n) {
    std::ptrdiff_t m = i % static_cast<std::ptrdiff_t>(n);
    if (m < 0) m += static_cast<std::ptrdiff_t>(n);
    return static_cast<std::size_t>(m);
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1,
                     std::size_t padding = 0, PadMode pad_mode = PadMode::zero) {
    const Shape& is = input.shape();
    const Shape& ks = kernel.shape();
    if (is.size() != 4 || ks.size() != 4)
        throw ShapeError("conv2d: expected rank-4 input and kernel, got " + shape_str(is) + " and " +
                         shape_str(ks));
    std::size_t B = is[0], C = is[1], H = is[2], W = is[3];
    std::size_t O = ks[0], KC = ks[1], kh = ks[2], kw = ks[3];
    if (C != KC)
        throw ShapeError("conv2d: channel mismatch, input " + shape_str(is) + " vs kernel " + shape_str(ks));
    if (kh > H + 2 * padding || kw > W + 2 * padding)
        throw ShapeError("conv2d: kernel " + shape_str(ks) + " larger than padded input " + shape_str(is));
    if ((H + 2 * padding - kh) % stride != 0 || (W + 2 * padding - kw) % stride != 0)
        throw ShapeError("conv2d: non-integral output size for input " + shape_str(is) + ", kernel " +
                         shape_str(ks) + ", stride " + std::to_string(stride) + ", padding " +
                         std::to_string(padding));
    std::size_t OH = (H + 2 * padding - kh) / stride + 1;
    std::size_t OW = (W + 2 * padding - kw) / stride + 1;
    std::size_t PH = H + 2 * padding, PW = W + 2 * padding;

    // Padding is materialized once per plane (zero borders or wrapped rows
    // and columns); the hot loops are then branch-free affine scans.
    auto fill_padded = [H, W, PH, PW, padding, pad_mode](const double* iplane, double* pplane) {
        if (padding == 0) {
            std::copy(iplane, iplane + H * W, pplane);
            return;
        }
        if (pad_mode == PadMode::zero) std::fill(pplane, pplane + PH * PW, 0.0);
        for (std::size_t py = 0; py < PH; ++py) {
            std::ptrdiff_t y = static_cast<std::ptrdiff_t>(py) - static_cast<std::ptrdiff_t>(padding);
            if (pad_mode == PadMode::zero) {
                if (y < 0 || y >= static_cast<std::ptrdiff_t>(H)) continue;
                std::copy(&iplane[static_cast<std::size_t>(y) * W], &iplane[static_cast<std::size_t>(y) * W] + W,
                          &pplane[py * PW + padding]);
            } else {
                const double* irow = &iplane[detail::wrap_index(y, H) * W];
                for (std::size_t px = 0; px < PW; ++px)
                    pplane[py * PW + px] =
                        irow[detail::wrap_index(static_cast<std::ptrdiff_t>(px) -
                                                    static_cast<std::ptrdiff_t>(padding),
                                                W)];
            }
        }
    };

    std::vector<double> out(B * O * OH * OW, 0.0);
    {
        auto in = input.data();
        auto kd = kernel.data();
        std::vector<double> pplane(PH * PW);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                fill_padded(&in[(b * C + c) * H * W], pplane.data());
                for (std::size_t o = 0; o < O; ++o) {
                    double* oplane = &out[(b * O + o) * OH * OW];
                    const double* kplane = &kd[(o * C + c) * kh * kw];
                    for (std::size_t ki = 0; ki < kh; ++ki)
                        for (std::size_t kj = 0; kj < kw; ++kj) {
                            double wv = kplane[ki * kw + kj];
                            if (wv == 0.0) continue;
                            for (std::size_t oh = 0; oh < OH; ++oh) {
                                const double* prow = &pplane[(oh * stride + ki) * PW + kj];
                                double* orow = &oplane[oh * OW];
                                if (stride == 1)
                                    for (std::size_t ow = 0; ow < OW; ++ow) orow[ow] += wv * prow[ow];
                                else
                                    for (std::size_t ow = 0; ow < OW; ++ow) orow[ow] += wv * prow[ow * stride];
                            }
                        }
                }
            }
    }

    Shape out_shape{B, O, OH, OW};
    Tape* t = detail::common_tape(input, kernel);
    if (!t) return Tensor(out_shape, std::move(out));
    Tensor res = t->track(out_shape, std::move(out));
    t->record(detail::ids({input, kernel}), res.node_id(),
              [in_n = input.node(), k_n = kernel.node(), o_n = res.node(), B, C, H, W, O, kh, kw, OH, OW,
               PH, PW, stride, padding, pad_mode, fill_padded] {
                  const auto& g = o_n->grad;
                  const bool din = in_n->tracked();
                  const bool dk = k_n->tracked();
                  std::vector<double> pplane(PH * PW);
                  std::vector<double> dpplane;
                  for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t c = 0; c < C; ++c) {
                          fill_padded(&in_n->data[(b * C + c) * H * W], pplane.data());
                          if (din) dpplane.assign(PH * PW, 0.0);
                          for (std::size_t o = 0; o < O; ++o) {
                              const double* gplane = &g[(b * O + o) * OH * OW];
                              const double* kplane = &k_n->data[(o * C + c) * kh * kw];
                              double* dkplane = dk ? &k_n->grad[(o * C + c) * kh * kw] : nullptr;
                              for (std::size_t ki = 0; ki < kh; ++ki)
                                  for (std::size_t kj = 0; kj < kw; ++kj) {
                                      double wv = kplane[ki * kw + kj];
                                      double dkv = 0.0;
                                      for (std::size_t oh = 0; oh < OH; ++oh) {
                                          const double* prow = &pplane[(oh * stride + ki) * PW + kj];
                                          double* dprow =
                                              din ? &dpplane[(oh * stride + ki) * PW + kj] : nullptr;
                                          const double* grow = &gplane[oh * OW];
                                          for (std::size_t ow = 0; ow < OW; ++ow) {
                                              double gv = grow[ow];
                                              dkv += prow[ow * stride] * gv;
                                              if (dprow) dprow[ow * stride] += wv * gv;
                                          }
                                      }
                                      if (dkplane) dkplane[ki * kw + kj] += dkv;
                                  }
                          }
                          if (din) {
                              // fold padded-plane gradients back onto the input
                              double* diplane = &in_n->grad[(b * C + c) * H * W];
                              for (std::size_t py = 0; py < PH; ++py) {
                                  std::ptrdiff_t y = static_cast<std::ptrdiff_t>(py) -
                                                     static_cast<std::ptrdiff_t>(padding);
                                  for (std::size_t px = 0; px < PW; ++px) {
                                      double v = dpplane[py * PW + px];
                                      if (v == 0.0) continue;
                                      std::ptrdiff_t x = static_cast<std::ptrdiff_t>(px) -
                                                         static_cast<std::ptrdiff_t>(padding);
                                      if (pad_mode == PadMode::zero) {
                                          if (y < 0 || y >= static_cast<std::ptrdiff_t>(H) || x < 0 ||
                                              x >= static_cast<std::ptrdiff_t>(W))
                                              continue;  // gradient of a constant zero border
                                          diplane[static_cast<std::size_t>(y) * W +
                                                  static_cast<std::size_t>(x)] += v;
                                      } else {
                                          diplane[detail::wrap_index(y, H) * W + detail::wrap_index(x, W)] += v;
                                      }
                                  }
                              }
                          }
                      }
              });
    return res;
}

// per-output-channel bias for conv activations: [B x O x H x W] + bias [O]
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    const Shape& xs = x.shape();
    if (xs.size() != 4 || bias.shape().size() != 1 || bias.shape()[0] != xs[1])
        throw ShapeError("add_channel_bias: incompatible shapes " + shape_str(xs) + " and " +
                         shape_str(bias.shape()));
    std::size_t B = xs[0], O = xs[1], HW = xs[2] * xs[3];
    std::vector<double> out(x.data().begin(), x.data().end());
    auto bd = bias.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o) {
            double bv = bd[o];
            double* row = &out[(b * O + o) * HW];
            for (std::size_t i = 0; i < HW; ++i) row[i] += bv;
        }

    Tape* t = detail::common_tape(x, bias);
    if (!t) return Tensor(xs, std::move(out));
    Tensor res = t->track(xs, std::move(out));
    t->record(detail::ids({x, bias}), res.node_id(), [xn = x.node(), bn = bias.node(), on = res.node(), B, O, HW] {
        const auto& g = on->grad;
        if (xn->tracked())
            for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
        if (bn->tracked())
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t o = 0; o < O; ++o) {
                    const double* row = &g[(b * O + o) * HW];
                    double acc = 0.0;
                    for (std::size_t i = 0; i < HW; ++i) acc += row[i];
                    bn->grad[o] += acc;
                }
    });
    return res;
}

// ---------------------------------------------------------------------------
// Elementwise activations. Subgradient conventions: relu'(0) = 0; clamp01
// passes gradient only strictly inside (0, 1) of its *input*.
// ---------------------------------------------------------------------------
inline Tensor relu(const Tensor& x) {
    std::size_t n = x.size();
    std::vector<double> out(n);
    auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;

    Tape* t = x.tape();
    if (!t) return Tensor(x.shape(), std::move(out));
    Tensor o = t->track(x.shape(), std::move(out));
    t->record(detail::ids({x}), o.node_id(), [xn = x.node(), on = o.node(), n] {
        const auto& g = on->grad;
        for (std::size_t i = 0; i < n; ++i)
            if (xn->data[i] > 0.0) xn->grad[i] += g[i];
    });
    return o;
}

namespace detail {
inline double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}
}  // namespace detail

inline Tensor sigmoid(const Tensor& x) {
    std::size_t n = x.size();
    std::vector<double> out(n);
    auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = detail::sigmoid_scalar(xd[i]);

    Tape* t = x.tape();
    if (!t) return Tensor(x.shape(), std::move(out));
    Tensor o = t->track(x.shape(), std::move(out));
    t->record(detail::ids({x}), o.node_id(), [xn = x.node(), on = o.node(), n] {
        const auto& g = on->grad;
        for (std::size_t i = 0; i < n; ++i) {
            double s = on->data[i];
            xn->grad[i] += g[i] * s * (1.0 - s);
        }
    });
    return o;
}

inline Tensor clamp01(const Tensor& x) {
    std::size_t n = x.size();
    std::vector<double> out(n);
    auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = std::min(1.0, std::max(0.0, xd[i]));

    Tape* t = x.tape();
    if (!t) return Tensor(x.shape(), std::move(out));
    Tensor o = t->track(x.shape(), std::move(out));
    t->record(detail::ids({x}), o.node_id(), [xn = x.node(), on = o.node(), n] {
        const auto& g = on->grad;
        for (std::size_t i = 0; i < n; ++i) {
            double v = xn->data[i];
            if (v > 0.0 && v < 1.0) xn->grad[i] += g[i];
        }
    });
    return o;
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------
inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;

    Tape* t = x.tape();
    if (!t) return Tensor::scalar(acc);
    Tensor o = t->track({1}, {acc});
    t->record(detail::ids({x}), o.node_id(), [xn = x.node(), on = o.node()] {
        double g = on->grad[0];
        for (double& gv : xn->grad) gv += g;
    });
    return o;
}

inline Tensor mse(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw ShapeError("mse: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    std::size_t n = pred.size();
    double acc = 0.0;
    auto pd = pred.data(), td = target.data();
    for (std::size_t i = 0; i < n; ++i) {
        double d = pd[i] - td[i];
        acc += d * d;
    }
    acc /= static_cast<double>(n);

    Tape* t = detail::common_tape(pred, target);
    if (!t) return Tensor::scalar(acc);
    Tensor o = t->track({1}, {acc});
    t->record(detail::ids({pred, target}), o.node_id(), [pn = pred.node(), tn = target.node(), on = o.node(), n] {
        double g = on->grad[0] * 2.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            double d = pn->data[i] - tn->data[i];
            if (pn->tracked()) pn->grad[i] += g * d;
            if (tn->tracked()) tn->grad[i] -= g * d;
        }
    });
    return o;
}

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (numel(new_shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    std::vector<double> out(x.data().begin(), x.data().end());

    Tape* t = x.tape();
    if (!t) return Tensor(std::move(new_shape), std::move(out));
    Tensor o = t->track(std::move(new_shape), std::move(out));
    t->record(detail::ids({x}), o.node_id(), [xn = x.node(), on = o.node()] {
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
    return o;
}

// nearest-neighbour 2x spatial upsampling of [B x C x H x W]
inline Tensor upsample_nearest2(const Tensor& x) {
    const Shape& xs = x.shape();
    if (xs.size() != 4) throw ShapeError("upsample_nearest2: expected rank-4 input, got " + shape_str(xs));
    std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    std::vector<double> out(B * C * 4 * H * W);
    auto xd = x.data();
    for (std::size_t p = 0; p < B * C; ++p) {
        const double* ip = &xd[p * H * W];
        double* op = &out[p * 4 * H * W];
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
                double v = ip[h * W + w];
                std::size_t base = (2 * h) * (2 * W) + 2 * w;
                op[base] = v;
                op[base + 1] = v;
                op[base + 2 * W] = v;
                op[base + 2 * W + 1] = v;
            }
    }

    Shape out_shape{B, C, 2 * H, 2 * W};
    Tape* t = x.tape();
    if (!t) return Tensor(out_shape, std::move(out));
    Tensor o = t->track(out_shape, std::move(out));
    t->record(detail::ids({x}), o.node_id(), [xn = x.node(), on = o.node(), B, C, H, W] {
        const auto& g = on->grad;
        for (std::size_t p = 0; p < B * C; ++p) {
            double* dip = &xn->grad[p * H * W];
            const double* gp = &g[p * 4 * H * W];
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    std::size_t base = (2 * h) * (2 * W) + 2 * w;
                    dip[h * W + w] += gp[base] + gp[base + 1] + gp[base + 2 * W] + gp[base + 2 * W + 1];
                }
        }
    });
    return o;
}

// broadcast a single-channel map [B x 1 x H x W] across C channels
inline Tensor repeat_channels(const Tensor& x, std::size_t channels) {
    const Shape& xs = x.shape();
    if (xs.size() != 4 || xs[1] != 1)
        throw ShapeError("repeat_channels: expected [B x 1 x H x W], got " + shape_str(xs));
    if (channels == 1) return x;
    std::size_t B = xs[0], HW = xs[2] * xs[3];
    std::vector<double> out(B * channels * HW);
    auto xd = x.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            std::copy(&xd[b * HW], &xd[b * HW] + HW, &out[(b * channels + c) * HW]);

    Shape out_shape{B, channels, xs[2], xs[3]};
    Tape* t = x.tape();
    if (!t) return Tensor(out_shape, std::move(out));
    Tensor o = t->track(out_shape, std::move(out));
    t->record(detail::ids({x}), o.node_id(), [xn = x.node(), on = o.node(), B, channels, HW] {
        const auto& g = on->grad;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < channels; ++c) {
                const double* gp = &g[(b * channels + c) * HW];
                double* dp = &xn->grad[b * HW];
                for (std::size_t i = 0; i < HW; ++i) dp[i] += gp[i];
            }
    });
    return o;
}

}  // namespace dds
