#pragma once

// Benchmark data: IDX image/label files, derived targets (one-hot class,
// 8-bin intensity histogram, the image itself), a synthetic generator and a
// binary dataset cache.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "valp/model.hpp"
#include "valp/random_model.hpp"

namespace valp {

class IdxError : public std::runtime_error {
public:
    enum class Kind { BadMagic, Truncated, CountMismatch, ShapeMismatch, Io };

    IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::size_t kHistogramBins = 8;

struct IdxImages {
    std::size_t count = 0, rows = 0, cols = 0;
    std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major per image
    friend bool operator==(const IdxImages&, const IdxImages&) = default;
};

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t at) {
    return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) | (std::uint32_t{bytes[at + 2]} << 8) |
           std::uint32_t{bytes[at + 3]};
}

inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IdxError(IdxError::Kind::Io, "cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IdxError(IdxError::Kind::Io, "cannot write " + p.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IdxError(IdxError::Kind::Io, "write failed for " + p.string());
}

}  // namespace detail

inline IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 16) throw IdxError(IdxError::Kind::Truncated, "idx images: header needs 16 bytes");
    if (detail::read_be32(bytes, 0) != kIdxImageMagic) throw IdxError(IdxError::Kind::BadMagic, "idx images: bad magic");
    IdxImages img;
    img.count = detail::read_be32(bytes, 4);
    img.rows = detail::read_be32(bytes, 8);
    img.cols = detail::read_be32(bytes, 12);
    if (img.rows && img.cols && img.count > (bytes.size() - 16) / img.rows / img.cols)
        throw IdxError(IdxError::Kind::Truncated, "idx images: header declares more pixels than the file holds");
    const std::size_t need = img.count * img.rows * img.cols;
    if (bytes.size() - 16 < need)
        throw IdxError(IdxError::Kind::Truncated,
                       "idx images: expected " + std::to_string(need) + " pixel bytes, found " + std::to_string(bytes.size() - 16));
    if (bytes.size() - 16 > need) throw IdxError(IdxError::Kind::CountMismatch, "idx images: trailing bytes after pixel data");
    img.pixels.assign(bytes.begin() + 16, bytes.end());
    return img;
}

inline std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw IdxError(IdxError::Kind::Truncated, "idx labels: header needs 8 bytes");
    if (detail::read_be32(bytes, 0) != kIdxLabelMagic) throw IdxError(IdxError::Kind::BadMagic, "idx labels: bad magic");
    const std::size_t count = detail::read_be32(bytes, 4);
    if (bytes.size() - 8 < count) throw IdxError(IdxError::Kind::Truncated, "idx labels: fewer labels than declared");
    if (bytes.size() - 8 > count) throw IdxError(IdxError::Kind::CountMismatch, "idx labels: trailing bytes after labels");
    return {bytes.begin() + 8, bytes.end()};
}

inline std::vector<std::uint8_t> encode_idx_images(const IdxImages& img) {
    if (img.pixels.size() != img.count * img.rows * img.cols) throw ShapeError("encode_idx_images: pixel count mismatch");
    std::vector<std::uint8_t> out;
    out.reserve(16 + img.pixels.size());
    for (std::size_t v : {std::size_t{kIdxImageMagic}, img.count, img.rows, img.cols})
        detail::write_be32(out, static_cast<std::uint32_t>(v));
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

inline std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
    std::vector<std::uint8_t> out;
    detail::write_be32(out, kIdxLabelMagic);
    detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.insert(out.end(), labels.begin(), labels.end());
    return out;
}

// ---------------------------------------------------------------------------
// Dataset

struct Dataset {
    std::size_t rows = 0, cols = 0;   // image side lengths
    std::size_t classes = 0;
    Matrix images;                    // n x (rows*cols), values in [0, 1]
    std::vector<std::uint8_t> raw_labels;
    Matrix labels;                    // n x classes one-hot
    Matrix histograms;                // n x 8 frequencies
    std::vector<std::size_t> train_idx, eval_idx;

    std::size_t size() const noexcept { return images.rows(); }
    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Frequencies of pixel values over bins [k/8, (k+1)/8); 1.0 falls in the last bin.
inline std::array<double, kHistogramBins> histogram8(std::span<const double> pixels) {
    std::array<double, kHistogramBins> h{};
    if (pixels.empty()) return h;
    for (double p : pixels) {
        auto bin = static_cast<std::size_t>(std::floor(p * static_cast<double>(kHistogramBins)));
        h[std::min(bin, kHistogramBins - 1)] += 1.0;
    }
    for (double& v : h) v /= static_cast<double>(pixels.size());
    return h;
}

/// One-hot labels and per-image histograms. Pixels must already be in [0, 1].
inline Dataset derive_targets(Matrix images, std::vector<std::uint8_t> raw_labels, std::size_t classes, std::size_t rows,
                              std::size_t cols) {
    if (raw_labels.size() != images.rows()) throw ShapeError("derive_targets: label count does not match image count");
    if (images.rows() > 0 && rows * cols != images.cols()) throw ShapeError("derive_targets: image side does not match width");
    Dataset d;
    d.rows = rows;
    d.cols = cols;
    d.classes = classes;
    d.labels = Matrix(images.rows(), classes);
    d.histograms = Matrix(images.rows(), kHistogramBins);
    for (std::size_t r = 0; r < images.rows(); ++r) {
        if (raw_labels[r] >= classes)
            throw std::out_of_range("derive_targets: label " + std::to_string(raw_labels[r]) + " outside 0.." +
                                    std::to_string(classes - 1));
        d.labels(r, raw_labels[r]) = 1.0;
        auto h = histogram8(images.row(r));
        for (std::size_t b = 0; b < kHistogramBins; ++b) d.histograms(r, b) = h[b];
    }
    d.images = std::move(images);
    d.raw_labels = std::move(raw_labels);
    return d;
}

inline Matrix scale_pixels(const IdxImages& img) {
    Matrix m(img.count, img.rows * img.cols);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) m.values()[i] = img.pixels[i] / 255.0;
    return m;
}

/// Loads an image file and its label file; both must describe the same number
/// of `rows` x `cols` images.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::size_t classes = 10, std::size_t rows = 28, std::size_t cols = 28) {
    IdxImages img = parse_idx_images(detail::read_file(images_path));
    auto labels = parse_idx_labels(detail::read_file(labels_path));
    if (img.rows != rows || img.cols != cols)
        throw IdxError(IdxError::Kind::ShapeMismatch, "idx images: expected " + std::to_string(rows) + "x" +
                                                          std::to_string(cols) + ", found " + std::to_string(img.rows) +
                                                          "x" + std::to_string(img.cols));
    if (labels.size() != img.count)
        throw IdxError(IdxError::Kind::CountMismatch, "idx: " + std::to_string(img.count) + " images but " +
                                                          std::to_string(labels.size()) + " labels");
    return derive_targets(scale_pixels(img), std::move(labels), classes, rows, cols);
}

/// Class-conditioned blobs: each class has a fixed smooth template, every image
/// is its template with random intensity and additive noise, quantized to
/// 1/255 steps so it can be stored as IDX.
inline Dataset synthetic_dataset(std::size_t n, std::size_t side, std::size_t classes, std::uint64_t seed) {
    if (side < 4) throw std::invalid_argument("synthetic_dataset: side must be at least 4");
    if (classes == 0 || classes > 255) throw std::invalid_argument("synthetic_dataset: classes must be in 1..255");
    Rng tmpl_rng(derive_seed(seed, "templates"));
    const std::size_t d = side * side;
    Matrix templates(classes, d);
    const double s = static_cast<double>(side);
    for (std::size_t k = 0; k < classes; ++k) {
        for (int blob = 0; blob < 2; ++blob) {
            const double cx = tmpl_rng.uniform(0.15, 0.85) * s, cy = tmpl_rng.uniform(0.15, 0.85) * s;
            const double radius = tmpl_rng.uniform(0.12, 0.25) * s;
            for (std::size_t y = 0; y < side; ++y)
                for (std::size_t x = 0; x < side; ++x) {
                    const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
                    templates(k, y * side + x) += std::exp(-(dx * dx + dy * dy) / (2 * radius * radius));
                }
        }
    }
    Rng rng(derive_seed(seed, "samples"));
    Matrix images(n, d);
    std::vector<std::uint8_t> labels(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto k = static_cast<std::uint8_t>(rng.index(classes));
        labels[r] = k;
        const double intensity = rng.uniform(0.6, 1.0);
        for (std::size_t c = 0; c < d; ++c) {
            const double v = std::clamp(intensity * templates(k, c) + 0.1 * rng.normal(), 0.0, 1.0);
            images(r, c) = std::round(v * 255.0) / 255.0;
        }
    }
    return derive_targets(std::move(images), std::move(labels), classes, side, side);
}

/// Shuffled disjoint train/eval index sets covering every row.
inline void split(Dataset& d, double eval_fraction, std::uint64_t seed) {
    if (!(eval_fraction >= 0.0 && eval_fraction <= 1.0)) throw std::invalid_argument("split: eval fraction outside [0, 1]");
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "split"));
    rng.shuffle(idx);
    const auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(idx.size())));
    d.eval_idx.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_eval));
    d.train_idx.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_eval), idx.end());
    std::sort(d.eval_idx.begin(), d.eval_idx.end());
    std::sort(d.train_idx.begin(), d.train_idx.end());
}

/// The three-objective benchmark matching benchmark_problem(rows*cols, classes).
inline ProblemSpec dataset_problem(const Dataset& d) { return benchmark_problem(d.rows * d.cols, d.classes); }

/// Rows `indices` as task data: i0 images; o0 labels, o1 histograms, o2 images.
inline TaskData to_task(const Dataset& d, std::span<const std::size_t> indices) {
    TaskData t;
    t.inputs[NodeId::input(0)] = gather_rows(d.images, indices);
    t.targets[NodeId::output(0)] = gather_rows(d.labels, indices);
    t.targets[NodeId::output(1)] = gather_rows(d.histograms, indices);
    t.targets[NodeId::output(2)] = t.inputs[NodeId::input(0)];
    return t;
}

// ---------------------------------------------------------------------------
// Dataset cache
//
// Little-endian binary container:
//   "VALPDS01"                     8-byte magic and version
//   u64 n, rows, cols, classes
//   f64[n * rows * cols]           images, IEEE-754 bit patterns
//   u8[n]                          raw labels
//   u64 n_train, u64[n_train]      train indices
//   u64 n_eval,  u64[n_eval]       eval indices
// Labels and histograms are derived again on load.

inline constexpr std::array<char, 8> kCacheMagic{'V', 'A', 'L', 'P', 'D', 'S', '0', '1'};

namespace detail {

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct ByteReader {
    std::span<const std::uint8_t> bytes;
    std::size_t at = 0;

    void need(std::size_t n) const {
        if (bytes.size() - at < n) throw IdxError(IdxError::Kind::Truncated, "dataset cache: truncated");
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes[at + static_cast<std::size_t>(i)]} << (8 * i);
        at += 8;
        return v;
    }
    std::vector<std::size_t> indices() {
        const std::uint64_t n = u64();
        need(n * 8);
        std::vector<std::size_t> out(n);
        for (auto& v : out) v = u64();
        return out;
    }
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_cache(const Dataset& d) {
    std::vector<std::uint8_t> out(kCacheMagic.begin(), kCacheMagic.end());
    for (std::size_t v : {d.size(), d.rows, d.cols, d.classes}) detail::put_u64(out, v);
    for (double v : d.images.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    out.insert(out.end(), d.raw_labels.begin(), d.raw_labels.end());
    for (const auto* idx : {&d.train_idx, &d.eval_idx}) {
        detail::put_u64(out, idx->size());
        for (std::size_t v : *idx) detail::put_u64(out, v);
    }
    return out;
}

inline Dataset decode_cache(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kCacheMagic.size() || !std::equal(kCacheMagic.begin(), kCacheMagic.end(), bytes.begin()))
        throw IdxError(IdxError::Kind::BadMagic, "dataset cache: bad magic or version");
    detail::ByteReader in{bytes, kCacheMagic.size()};
    const std::size_t n = in.u64(), rows = in.u64(), cols = in.u64(), classes = in.u64();
    in.need(n * rows * cols * 8 + n);
    Matrix images(n, rows * cols);
    for (double& v : images.values()) v = std::bit_cast<double>(in.u64());
    std::vector<std::uint8_t> labels(bytes.begin() + static_cast<std::ptrdiff_t>(in.at),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(in.at + n));
    in.at += n;
    Dataset d = derive_targets(std::move(images), std::move(labels), classes, rows, cols);
    d.train_idx = in.indices();
    d.eval_idx = in.indices();
    if (in.at != bytes.size()) throw IdxError(IdxError::Kind::CountMismatch, "dataset cache: trailing bytes");
    return d;
}

inline void save_cache(const std::filesystem::path& p, const Dataset& d) { detail::write_file(p, encode_cache(d)); }
inline Dataset load_cache(const std::filesystem::path& p) { return decode_cache(detail::read_file(p)); }

}  // namespace valp
