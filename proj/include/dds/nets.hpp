#pragma once

// Network definitions for this artifact: a shallow U-shaped selector with
// optional additive skip links, a convolutional autoencoder reconstructor
// with a dense bottleneck, and an Adam optimizer. Networks store parameter
// values as plain buffers; each training step mounts them on a fresh Tape
// as tracked leaves.

#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dds/bytes.hpp"
#include "dds/tensor.hpp"

namespace dds {

enum class LayerKind {
    conv,       // conv2d + channel bias
    dense,      // matmul + bias (batch broadcast)
    relu,
    sigmoid,
    save_skip,  // push current activation
    add_skip,   // pop and add
    flatten,    // [B,C,H,W] -> [B, C*H*W]
    unflatten,  // [B, C*H*W] -> [B,C,H,W]
    upsample2,  // nearest-neighbour x2
};

struct LayerSpec {
    LayerKind kind;
    std::size_t in_c = 0, out_c = 0;   // conv / dense widths
    std::size_t ksize = 0, stride = 1, pad = 0;
    Shape chw;                          // unflatten target (C, H, W)
    double init_scale = 1.0;            // multiplier on the fan-in init bound
    PadMode pad_mode = PadMode::zero;
};

struct ParamInfo {
    std::string name;
    Shape shape;
};

class Network {
public:
    Network() = default;
    Network(std::string name, std::vector<LayerSpec> layers) : name_(std::move(name)), layers_(std::move(layers)) {
        for (std::size_t li = 0; li < layers_.size(); ++li) {
            const LayerSpec& l = layers_[li];
            std::string tag = name_ + ".l" + std::to_string(li);
            if (l.kind == LayerKind::conv) {
                infos_.push_back({tag + ".w", {l.out_c, l.in_c, l.ksize, l.ksize}});
                infos_.push_back({tag + ".b", {l.out_c}});
            } else if (l.kind == LayerKind::dense) {
                infos_.push_back({tag + ".w", {l.in_c, l.out_c}});
                infos_.push_back({tag + ".b", {l.out_c}});
            }
        }
        values_.resize(infos_.size());
        for (std::size_t i = 0; i < infos_.size(); ++i) values_[i].assign(numel(infos_[i].shape), 0.0);
    }

    const std::string& name() const { return name_; }
    const std::vector<LayerSpec>& layers() const { return layers_; }
    const std::vector<ParamInfo>& param_infos() const { return infos_; }
    std::vector<std::vector<double>>& values() { return values_; }
    const std::vector<std::vector<double>>& values() const { return values_; }
    bool empty() const { return layers_.empty(); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& v : values_) n += v.size();
        return n;
    }

    // fan-in scaled uniform init (He bound for the relu blocks); biases zero
    void init_params(Rng& rng) {
        std::size_t pi = 0;
        for (const LayerSpec& l : layers_) {
            if (l.kind != LayerKind::conv && l.kind != LayerKind::dense) continue;
            std::size_t fan_in = l.kind == LayerKind::conv ? l.in_c * l.ksize * l.ksize : l.in_c;
            double bound = std::sqrt(6.0 / static_cast<double>(fan_in)) * l.init_scale;
            for (double& w : values_[pi]) w = rng.uniform(-bound, bound);
            ++pi;
            std::fill(values_[pi].begin(), values_[pi].end(), 0.0);  // bias
            ++pi;
        }
    }

    // tracked leaf copies of every parameter, in declaration order
    std::vector<Tensor> mount(Tape& tape) const {
        std::vector<Tensor> out;
        out.reserve(infos_.size());
        for (std::size_t i = 0; i < infos_.size(); ++i) out.push_back(tape.leaf(infos_[i].shape, values_[i]));
        return out;
    }

    // untracked constant views (pure inference)
    std::vector<Tensor> constants() const {
        std::vector<Tensor> out;
        out.reserve(infos_.size());
        for (std::size_t i = 0; i < infos_.size(); ++i) out.emplace_back(infos_[i].shape, values_[i]);
        return out;
    }

    Tensor forward(std::span<const Tensor> params, const Tensor& input) const {
        Tensor cur = input;
        std::vector<Tensor> skips;
        std::size_t pi = 0;
        for (const LayerSpec& l : layers_) {
            switch (l.kind) {
                case LayerKind::conv:
                    cur = add_channel_bias(conv2d(cur, params[pi], l.stride, l.pad, l.pad_mode), params[pi + 1]);
                    pi += 2;
                    break;
                case LayerKind::dense:
                    cur = add(matmul(cur, params[pi]), params[pi + 1]);
                    pi += 2;
                    break;
                case LayerKind::relu: cur = relu(cur); break;
                case LayerKind::sigmoid: cur = sigmoid(cur); break;
                case LayerKind::save_skip: skips.push_back(cur); break;
                case LayerKind::add_skip:
                    cur = add(cur, skips.back());
                    skips.pop_back();
                    break;
                case LayerKind::flatten: {
                    const Shape& s = cur.shape();
                    cur = reshape(cur, {s[0], numel(s) / s[0]});
                    break;
                }
                case LayerKind::unflatten:
                    cur = reshape(cur, {cur.shape()[0], l.chw[0], l.chw[1], l.chw[2]});
                    break;
                case LayerKind::upsample2: cur = upsample_nearest2(cur); break;
            }
        }
        return cur;
    }

private:
    std::string name_;
    std::vector<LayerSpec> layers_;
    std::vector<ParamInfo> infos_;
    std::vector<std::vector<double>> values_;
};

// ---------------------------------------------------------------------------
// Builders. Spatial dims must be divisible by 4 (two stride-2 stages).
// ---------------------------------------------------------------------------
namespace detail {
inline void require_div4(const Shape& chw, const char* who) {
    if (chw.size() != 3) throw ShapeError(std::string(who) + ": input shape must be (C, H, W)");
    if (chw[1] % 4 != 0 || chw[2] % 4 != 0)
        throw ShapeError(std::string(who) + ": spatial dims must be divisible by 4, got " + shape_str(chw));
}
}  // namespace detail

// U-shaped selector: two stride-2 encoder blocks, a bottleneck, two
// upsample blocks, additive skip links when requested, and a linear score
// head (one score per pixel unless per_channel_scores). The head weights
// start small so initial scores sit near tau(delta). Down-sampling convs
// are 4x4 stride-2 pad-1 so the output-size arithmetic stays integral.
// All selector convs use wrap padding: translation equivariance means the
// scores can only react to content, never to absolute position, which
// keeps the selection from parking on the frame of the image.
inline Network build_selector(std::size_t channels, const Shape& input_chw, bool with_residual,
                              bool per_channel_scores = false) {
    detail::require_div4(input_chw, "build_selector");
    std::size_t in_c = input_chw[0];
    std::size_t c1 = channels, c2 = 2 * channels, c3 = 4 * channels;
    std::size_t head_out = per_channel_scores ? in_c : 1;

    std::vector<LayerSpec> ls;
    auto conv3 = [](std::size_t i, std::size_t o, double scale = 1.0) {
        return LayerSpec{LayerKind::conv, i, o, 3, 1, 1, {}, scale, PadMode::wrap};
    };
    auto down4 = [](std::size_t i, std::size_t o) {
        return LayerSpec{LayerKind::conv, i, o, 4, 2, 1, {}, 1.0, PadMode::wrap};
    };
    auto relu_ = [] { return LayerSpec{LayerKind::relu}; };

    // skips saved post-activation, merged into the decoder before its
    // nonlinearity
    ls.push_back(conv3(in_c, c1));
    ls.push_back(relu_());
    if (with_residual) ls.push_back({LayerKind::save_skip});
    ls.push_back(down4(c1, c2));
    ls.push_back(relu_());
    if (with_residual) ls.push_back({LayerKind::save_skip});
    ls.push_back(down4(c2, c3));
    ls.push_back(relu_());
    ls.push_back(conv3(c3, c3));
    ls.push_back(relu_());
    ls.push_back({LayerKind::upsample2});
    ls.push_back(conv3(c3, c2));
    if (with_residual) ls.push_back({LayerKind::add_skip});
    ls.push_back(relu_());
    ls.push_back({LayerKind::upsample2});
    ls.push_back(conv3(c2, c1));
    if (with_residual) ls.push_back({LayerKind::add_skip});
    ls.push_back(relu_());
    // Score head, no activation: the gate applies sigma. Head weights start
    // two orders below the hidden layers so the initial ranking is governed
    // by the gate's exploration noise instead of a frozen random field;
    // initial scores sit near tau(delta).
    ls.push_back(conv3(c1, head_out, 0.01));
    return Network("selector", std::move(ls));
}

// Convolutional autoencoder: two stride-2 conv blocks, dense bottleneck of
// width latent_dim, then upsample-conv decoding back to the input shape.
inline Network build_reconstructor(std::size_t channels, std::size_t latent_dim, const Shape& input_chw) {
    detail::require_div4(input_chw, "build_reconstructor");
    if (latent_dim < 1) throw ConfigError("build_reconstructor: latent_dim must be >= 1");
    std::size_t in_c = input_chw[0], H = input_chw[1], W = input_chw[2];
    std::size_t c1 = channels, c2 = 2 * channels;
    std::size_t bottleneck = c2 * (H / 4) * (W / 4);

    std::vector<LayerSpec> ls;
    ls.push_back({LayerKind::conv, in_c, c1, 4, 2, 1});
    ls.push_back({LayerKind::relu});
    ls.push_back({LayerKind::conv, c1, c2, 4, 2, 1});
    ls.push_back({LayerKind::relu});
    ls.push_back({LayerKind::flatten});
    ls.push_back({LayerKind::dense, bottleneck, latent_dim});
    ls.push_back({LayerKind::relu});
    ls.push_back({LayerKind::dense, latent_dim, bottleneck});
    ls.push_back({LayerKind::relu});
    ls.push_back({LayerKind::unflatten, 0, 0, 0, 1, 0, {c2, H / 4, W / 4}});
    ls.push_back({LayerKind::upsample2});
    ls.push_back({LayerKind::conv, c2, c1, 3, 1, 1});
    ls.push_back({LayerKind::relu});
    ls.push_back({LayerKind::upsample2});
    ls.push_back({LayerKind::conv, c1, c1, 3, 1, 1});
    ls.push_back({LayerKind::relu});
    ls.push_back({LayerKind::conv, c1, in_c, 3, 1, 1});  // linear output head
    return Network("reconstructor", std::move(ls));
}

// ---------------------------------------------------------------------------
// Adam. Moments start at zero, so a zero-gradient step from a fresh state
// leaves parameters untouched.
// ---------------------------------------------------------------------------
struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(AdamConfig cfg, const std::vector<ParamInfo>& infos) : cfg_(cfg) {
        names_.reserve(infos.size());
        for (const auto& info : infos) {
            names_.push_back(info.name);
            m_.emplace_back(numel(info.shape), 0.0);
            v_.emplace_back(numel(info.shape), 0.0);
        }
    }

    void step(const std::vector<std::vector<double>*>& values, const std::vector<std::span<const double>>& grads) {
        if (values.size() != m_.size() || grads.size() != m_.size())
            throw ConfigError("adam: parameter list does not match optimizer state");
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t p = 0; p < values.size(); ++p) {
            auto& val = *values[p];
            auto g = grads[p];
            for (std::size_t i = 0; i < val.size(); ++i) {
                if (!std::isfinite(g[i]))
                    throw NumericError("adam: non-finite gradient in parameter " + names_[p]);
                double m = m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g[i];
                double v = v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                val[i] -= cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
            }
        }
    }

    // convenience for a single parameter list owned by the caller
    void step(std::vector<std::vector<double>>& values, const std::vector<std::span<const double>>& grads) {
        std::vector<std::vector<double>*> ptrs;
        ptrs.reserve(values.size());
        for (auto& v : values) ptrs.push_back(&v);
        step(ptrs, grads);
    }

    std::size_t step_count() const { return t_; }

private:
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::string> names_;
    std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoint format: magic "DDS1", then per parameter:
//   u32 name length, name bytes, u32 rank, u32 dims..., f64 payload
// All integers and floats little-endian.
// ---------------------------------------------------------------------------
inline void save_checkpoint(const std::vector<const Network*>& nets, const std::string& path) {
    std::string buf = "DDS1";
    for (const Network* net : nets) {
        const auto& infos = net->param_infos();
        const auto& vals = net->values();
        for (std::size_t i = 0; i < infos.size(); ++i) {
            detail::put_u32_le(buf, static_cast<std::uint32_t>(infos[i].name.size()));
            buf += infos[i].name;
            detail::put_u32_le(buf, static_cast<std::uint32_t>(infos[i].shape.size()));
            for (std::size_t d : infos[i].shape) detail::put_u32_le(buf, static_cast<std::uint32_t>(d));
            for (double v : vals[i]) detail::put_f64_le(buf, v);
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("checkpoint: write failed for " + path);
}

inline void load_checkpoint(std::vector<Network*> nets, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    detail::ByteReader r{buf};
    if (r.bytes(4, "magic") != "DDS1") throw IoError("checkpoint: bad magic in " + path);

    std::map<std::string, std::pair<Shape, std::vector<double>>> entries;
    while (r.pos < buf.size()) {
        std::uint32_t name_len = r.u32("name length");
        std::string name = r.bytes(name_len, "name");
        std::uint32_t rank = r.u32("rank");
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32("dim"));
        std::size_t n = numel(shape);
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i) data[i] = r.f64("payload");
        if (!entries.emplace(name, std::make_pair(std::move(shape), std::move(data))).second)
            throw IoError("checkpoint: duplicate parameter " + name);
    }

    std::size_t consumed = 0;
    for (Network* net : nets) {
        const auto& infos = net->param_infos();
        auto& vals = net->values();
        for (std::size_t i = 0; i < infos.size(); ++i) {
            auto it = entries.find(infos[i].name);
            if (it == entries.end()) throw IoError("checkpoint: missing parameter " + infos[i].name);
            if (it->second.first != infos[i].shape)
                throw IoError("checkpoint: shape mismatch for " + infos[i].name + ", file has " +
                              shape_str(it->second.first) + ", expected " + shape_str(infos[i].shape));
            vals[i] = it->second.second;
            ++consumed;
        }
    }
    if (consumed != entries.size())
        throw IoError("checkpoint: file holds " + std::to_string(entries.size()) +
                      " parameters, networks expect " + std::to_string(consumed));
}

}  // namespace dds
