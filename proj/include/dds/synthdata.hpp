#pragma once

// Synthetic grayscale benchmarks where the informative pixels move per
// instance: a bright pattern of exactly `signal_pixels` cells placed at a
// random location, with noise of a chosen kind on the complement. Ground
// truth relevance is stored alongside so selection quality is measurable.
//
// Dataset files (.ddsd): magic "DDSD", u32 version, u32 header fields,
// f32 little-endian payload. Pixel values are quantized to f32 at
// generation time so save/load round-trips are exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <queue>
#include <string>
#include <vector>

#include "dds/bytes.hpp"
#include "dds/gating.hpp"
#include "dds/tensor.hpp"

namespace dds {

enum class SignalPattern { blob, bar, glyph };
enum class NoiseKind { uniform, salt_pepper, structured_clutter };

struct SynthSpec {
    std::size_t image_size = 16;     // H == W
    std::size_t signal_pixels = 26;  // informative pixels per image
    SignalPattern signal_pattern = SignalPattern::blob;
    NoiseKind noise_kind = NoiseKind::uniform;
    double noise_amplitude = 0.2;
    std::size_t n_train = 192;
    std::size_t n_test = 48;

    // Signal pixels carry an instance-specific base intensity plus per-pixel
    // texture. The base varies widely across instances, so a reconstructor
    // that never sees the signal pixels pays their full variance; noise
    // pixels are cheap by comparison. That makes selecting the true signal
    // measurably better than merely encoding its position.
    static constexpr double signal_base_lo = 0.45;
    static constexpr double signal_base_hi = 0.8;
    static constexpr double signal_jitter = 0.2;

    void validate() const {
        if (signal_pixels > image_size * image_size)
            throw ConfigError("synth: pattern larger than image (" + std::to_string(signal_pixels) +
                              " signal pixels on a " + std::to_string(image_size) + "x" +
                              std::to_string(image_size) + " grid)");
        if (signal_pixels < 1) throw ConfigError("synth: signal_pixels must be >= 1");
        if (noise_amplitude < 0.0 || noise_amplitude > 1.0)
            throw ConfigError("synth: noise_amplitude must lie in [0, 1]");
        if (n_train + n_test < 1) throw ConfigError("synth: empty dataset");
    }

    // expected mean intensity of signal vs noise pixels, used by tests
    double expected_signal_mean() const {
        return 0.5 * (signal_base_lo + signal_base_hi) + 0.5 * signal_jitter;
    }
    double expected_noise_mean() const {
        switch (noise_kind) {
            case NoiseKind::uniform: return 0.5 * noise_amplitude;
            case NoiseKind::salt_pepper: return 0.1 * noise_amplitude;
            case NoiseKind::structured_clutter: return 0.0;  // clutter mean depends on placement
        }
        return 0.0;
    }
};

struct Dataset {
    Tensor images;           // [N x 1 x H x W], values in [0, 1]
    Tensor relevance_truth;  // [N x H x W], binary
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    std::size_t signal_pixels = 0;

    std::size_t total() const { return images.shape()[0]; }
    std::size_t height() const { return images.shape()[2]; }
    std::size_t width() const { return images.shape()[3]; }
    std::size_t features() const { return height() * width(); }

    // constant batch [count x 1 x H x W] starting at `begin`
    Tensor batch(std::size_t begin, std::size_t count) const {
        std::size_t hw = features();
        std::vector<double> out(count * hw);
        auto d = images.data();
        std::copy(&d[begin * hw], &d[begin * hw] + count * hw, out.begin());
        return Tensor({count, 1, height(), width()}, std::move(out));
    }

    Tensor truth_batch(std::size_t begin, std::size_t count) const {
        std::size_t hw = features();
        std::vector<double> out(count * hw);
        auto d = relevance_truth.data();
        std::copy(&d[begin * hw], &d[begin * hw] + count * hw, out.begin());
        return Tensor({count, hw}, std::move(out));
    }
};

namespace detail {

inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// exactly k cells nearest to (cy, cx); ties resolved by linear index
inline std::vector<std::size_t> nearest_cells(std::size_t n, double cy, double cx, std::size_t k) {
    std::vector<std::size_t> idx(n * n);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        double ay = static_cast<double>(a / n) - cy, ax = static_cast<double>(a % n) - cx;
        double by = static_cast<double>(b / n) - cy, bx = static_cast<double>(b % n) - cx;
        return ay * ay + ax * ax < by * by + bx * bx;
    });
    idx.resize(k);
    return idx;
}

// grow or trim a seed set to exactly k cells; growth is BFS over the grid
inline std::vector<std::size_t> exact_k(std::vector<std::size_t> cells, std::size_t n, std::size_t k) {
    std::vector<char> in(n * n, 0);
    std::vector<std::size_t> out;
    for (std::size_t c : cells) {
        if (c < n * n && !in[c]) {
            in[c] = 1;
            out.push_back(c);
        }
    }
    if (out.size() > k) {
        out.resize(k);
        return out;
    }
    std::queue<std::size_t> q;
    for (std::size_t c : out) q.push(c);
    while (out.size() < k && !q.empty()) {
        std::size_t c = q.front();
        q.pop();
        std::size_t y = c / n, x = c % n;
        const std::ptrdiff_t dy[4] = {-1, 1, 0, 0};
        const std::ptrdiff_t dx[4] = {0, 0, -1, 1};
        for (int d = 0; d < 4 && out.size() < k; ++d) {
            std::ptrdiff_t ny = static_cast<std::ptrdiff_t>(y) + dy[d];
            std::ptrdiff_t nx = static_cast<std::ptrdiff_t>(x) + dx[d];
            if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(n) || nx >= static_cast<std::ptrdiff_t>(n))
                continue;
            std::size_t nc = static_cast<std::size_t>(ny) * n + static_cast<std::size_t>(nx);
            if (!in[nc]) {
                in[nc] = 1;
                out.push_back(nc);
                q.push(nc);
            }
        }
    }
    return out;
}

inline std::vector<std::size_t> place_pattern(SignalPattern pat, std::size_t n, std::size_t k, Rng& rng) {
    switch (pat) {
        case SignalPattern::blob: {
            double r = std::sqrt(static_cast<double>(k)) / 2.0 + 0.5;
            double cy = rng.uniform(r, static_cast<double>(n) - 1.0 - r);
            double cx = rng.uniform(r, static_cast<double>(n) - 1.0 - r);
            return nearest_cells(n, cy, cx, k);
        }
        case SignalPattern::bar: {
            bool horizontal = rng.below(2) == 0;
            std::size_t thick = std::max<std::size_t>(1, (k + n - 1) / n);
            std::size_t len = (k + thick - 1) / thick;
            if (len > n) len = n;
            std::size_t y0 = rng.below(n - std::min(n - 1, thick) );
            std::size_t x0 = rng.below(n - std::min(n - 1, len - 1));
            std::vector<std::size_t> cells;
            for (std::size_t t = 0; t < thick; ++t)
                for (std::size_t l = 0; l < len; ++l) {
                    std::size_t y = horizontal ? y0 + t : x0 + l;
                    std::size_t x = horizontal ? x0 + l : y0 + t;
                    if (y < n && x < n) cells.push_back(y * n + x);
                }
            return exact_k(std::move(cells), n, k);
        }
        case SignalPattern::glyph: {
            // two crossing strokes, then adjusted to exactly k cells
            std::size_t arm = std::max<std::size_t>(3, static_cast<std::size_t>(std::sqrt(double(k)) * 1.4));
            if (arm >= n) arm = n - 1;
            std::size_t y0 = rng.below(n - arm);
            std::size_t x0 = rng.below(n - arm);
            std::size_t ymid = y0 + arm / 2, xmid = x0 + arm / 2;
            std::vector<std::size_t> cells;
            for (std::size_t i = 0; i < arm; ++i) {
                cells.push_back(ymid * n + (x0 + i));  // horizontal stroke
                cells.push_back((y0 + i) * n + xmid);  // vertical stroke
            }
            return exact_k(std::move(cells), n, k);
        }
    }
    return {};
}

}  // namespace detail

inline Dataset generate(const SynthSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::size_t n = spec.image_size;
    std::size_t hw = n * n;
    std::size_t total = spec.n_train + spec.n_test;

    std::vector<double> images(total * hw, 0.0);
    std::vector<double> truth(total * hw, 0.0);

    Rng master(seed);
    for (std::size_t i = 0; i < total; ++i) {
        Rng rng = master.fork(i);  // per-instance stream keeps generation order-free
        double* img = &images[i * hw];
        double* tru = &truth[i * hw];

        std::vector<std::size_t> cells = detail::place_pattern(spec.signal_pattern, n, spec.signal_pixels, rng);
        double base = rng.uniform(SynthSpec::signal_base_lo, SynthSpec::signal_base_hi);
        for (std::size_t c : cells) {
            img[c] = detail::quantize_f32(base + rng.uniform(0.0, SynthSpec::signal_jitter));
            tru[c] = 1.0;
        }

        switch (spec.noise_kind) {
            case NoiseKind::uniform:
                for (std::size_t c = 0; c < hw; ++c)
                    if (tru[c] == 0.0) img[c] = detail::quantize_f32(rng.uniform(0.0, spec.noise_amplitude));
                break;
            case NoiseKind::salt_pepper:
                for (std::size_t c = 0; c < hw; ++c)
                    if (tru[c] == 0.0 && rng.uniform01() < 0.1)
                        img[c] = detail::quantize_f32(spec.noise_amplitude);
                break;
            case NoiseKind::structured_clutter: {
                // a few dim shapes on the background; misleading but dimmer than signal
                std::size_t pieces = 2 + rng.below(2);
                for (std::size_t piece = 0; piece < pieces; ++piece) {
                    std::size_t ck = std::max<std::size_t>(3, spec.signal_pixels / 3);
                    auto clutter = detail::place_pattern(SignalPattern::blob, n, ck, rng);
                    for (std::size_t c : clutter)
                        if (tru[c] == 0.0)
                            img[c] = detail::quantize_f32(
                                rng.uniform(0.5 * spec.noise_amplitude, spec.noise_amplitude));
                }
                break;
            }
        }
    }

    Dataset ds;
    ds.images = Tensor({total, 1, n, n}, std::move(images));
    ds.relevance_truth = Tensor({total, n, n}, std::move(truth));
    ds.n_train = spec.n_train;
    ds.n_test = spec.n_test;
    ds.signal_pixels = spec.signal_pixels;
    return ds;
}

// ---------------------------------------------------------------------------
// File I/O. Header: "DDSD", u32 version, u32 n_train, n_test, H, W,
// signal_pixels; then images payload (N*H*W f32) and truth payload.
// ---------------------------------------------------------------------------
inline void save(const Dataset& ds, const std::string& path) {
    std::string buf = "DDSD";
    detail::put_u32_le(buf, 1);  // version
    detail::put_u32_le(buf, static_cast<std::uint32_t>(ds.n_train));
    detail::put_u32_le(buf, static_cast<std::uint32_t>(ds.n_test));
    detail::put_u32_le(buf, static_cast<std::uint32_t>(ds.height()));
    detail::put_u32_le(buf, static_cast<std::uint32_t>(ds.width()));
    detail::put_u32_le(buf, static_cast<std::uint32_t>(ds.signal_pixels));
    auto put_f32 = [&buf](double d) {
        float f = static_cast<float>(d);
        std::uint32_t v;
        std::memcpy(&v, &f, 4);
        detail::put_u32_le(buf, v);
    };
    for (double d : ds.images.data()) put_f32(d);
    for (double d : ds.relevance_truth.data()) put_f32(d);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("dataset: cannot open " + path + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("dataset: write failed for " + path);
}

inline Dataset load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("dataset: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    detail::ByteReader r{buf};
    if (buf.size() < 4 || r.bytes(4, "magic") != "DDSD") throw IoError("dataset: bad magic in " + path);
    std::uint32_t version = r.u32("version");
    if (version != 1) throw IoError("dataset: unsupported version " + std::to_string(version));
    std::size_t n_train = r.u32("n_train");
    std::size_t n_test = r.u32("n_test");
    std::size_t H = r.u32("height");
    std::size_t W = r.u32("width");
    std::size_t signal_pixels = r.u32("signal_pixels");
    std::size_t total = n_train + n_test;
    if (total == 0 || H == 0 || W == 0 || total > (1u << 24) || H > (1u << 12) || W > (1u << 12))
        throw IoError("dataset: dimension overflow in header of " + path);

    std::size_t expected = 4 + 6 * 4 + total * H * W * 4 * 2;
    if (buf.size() != expected)
        throw IoError("dataset: truncated or oversized payload in " + path + ", expected " +
                      std::to_string(expected) + " bytes, have " + std::to_string(buf.size()));

    auto get_f32 = [&r](const char* what) {
        std::uint32_t v = r.u32(what);
        float f;
        std::memcpy(&f, &v, 4);
        return static_cast<double>(f);
    };
    std::vector<double> images(total * H * W);
    for (double& d : images) d = get_f32("images");
    std::vector<double> truth(total * H * W);
    for (double& d : truth) d = get_f32("truth");

    Dataset ds;
    ds.images = Tensor({total, 1, H, W}, std::move(images));
    ds.relevance_truth = Tensor({total, H, W}, std::move(truth));
    ds.n_train = n_train;
    ds.n_test = n_test;
    ds.signal_pixels = signal_pixels;
    return ds;
}

// fraction of ground-truth signal pixels captured by the selected set,
// averaged over the batch
inline double mask_overlap(const Tensor& gamma_mask, const Tensor& truth, std::size_t signal_pixels) {
    if (gamma_mask.shape()[0] != truth.shape()[0] || gamma_mask.size() != truth.size())
        throw ShapeError("mask_overlap: shape mismatch " + shape_str(gamma_mask.shape()) + " vs " +
                         shape_str(truth.shape()));
    std::size_t B = gamma_mask.shape()[0];
    std::size_t F = gamma_mask.size() / B;
    auto md = gamma_mask.data(), td = truth.data();
    double acc = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t hit = 0;
        for (std::size_t j = 0; j < F; ++j)
            if (md[b * F + j] == 1.0 && td[b * F + j] == 1.0) ++hit;
        acc += static_cast<double>(hit) / static_cast<double>(signal_pixels);
    }
    return acc / static_cast<double>(B);
}

// plain (P2) PGM dump of one H x W map with values in [0, 1]
inline void write_pgm(const std::string& path, std::size_t H, std::size_t W, std::span<const double> values) {
    if (values.size() != H * W) throw ShapeError("write_pgm: value count does not match dimensions");
    std::ofstream out(path);
    if (!out) throw IoError("pgm: cannot open " + path + " for writing");
    out << "P2\n" << W << " " << H << "\n255\n";
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            double v = std::min(1.0, std::max(0.0, values[y * W + x]));
            out << static_cast<int>(v * 255.0 + 0.5);
            out << (x + 1 == W ? '\n' : ' ');
        }
    }
    if (!out) throw IoError("pgm: write failed for " + path);
}

}  // namespace dds
