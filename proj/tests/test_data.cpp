#include <gtest/gtest.h>

#include <filesystem>

#include "valp/data.hpp"

using namespace valp;

namespace {

// Two 2x3 images with labels 7 and 0, written byte by byte.
const std::vector<std::uint8_t> kImages{0x00, 0x00, 0x08, 0x03,  // magic
                                        0x00, 0x00, 0x00, 0x02,  // count
                                        0x00, 0x00, 0x00, 0x02,  // rows
                                        0x00, 0x00, 0x00, 0x03,  // cols
                                        0, 51, 102, 153, 204, 255, 255, 0, 0, 128, 1, 2};
const std::vector<std::uint8_t> kLabels{0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 7, 0};

IdxError::Kind kind_of(auto&& f) {
    try {
        f();
    } catch (const IdxError& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no IdxError";
    return IdxError::Kind::Io;
}

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("valp_test_data_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST(Idx, ParsesHandWrittenFixture) {
    auto img = parse_idx_images(kImages);
    EXPECT_EQ(img.count, 2u);
    EXPECT_EQ(img.rows, 2u);
    EXPECT_EQ(img.cols, 3u);
    EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{0, 51, 102, 153, 204, 255, 255, 0, 0, 128, 1, 2}));
    EXPECT_EQ(parse_idx_labels(kLabels), (std::vector<std::uint8_t>{7, 0}));
    EXPECT_EQ(encode_idx_images(img), kImages);
    EXPECT_EQ(encode_idx_labels(parse_idx_labels(kLabels)), kLabels);
}

TEST(Idx, ScaledPixelsAreExact) {
    auto m = scale_pixels(parse_idx_images(kImages));
    EXPECT_EQ(m(0, 1), 0.2);
    EXPECT_EQ(m(0, 5), 1.0);
    EXPECT_EQ(m(1, 3), 128 / 255.0);
}

TEST(Idx, ErrorKinds) {
    auto bad_magic = kImages;
    bad_magic[3] = 0x01;
    EXPECT_EQ(kind_of([&] { parse_idx_images(bad_magic); }), IdxError::Kind::BadMagic);
    EXPECT_EQ(kind_of([&] { parse_idx_labels(kImages); }), IdxError::Kind::BadMagic);
    auto short_body = kImages;
    short_body.pop_back();
    EXPECT_EQ(kind_of([&] { parse_idx_images(short_body); }), IdxError::Kind::Truncated);
    EXPECT_EQ(kind_of([&] { parse_idx_images(std::vector<std::uint8_t>(kImages.begin(), kImages.begin() + 10)); }),
              IdxError::Kind::Truncated);
    auto long_body = kLabels;
    long_body.push_back(3);
    EXPECT_EQ(kind_of([&] { parse_idx_labels(long_body); }), IdxError::Kind::CountMismatch);
    auto huge = kImages;
    huge[4] = 0xff;  // count far beyond the data
    EXPECT_EQ(kind_of([&] { parse_idx_images(huge); }), IdxError::Kind::Truncated);
}

TEST(Idx, LoadChecksShapeAndCounts) {
    const auto img = scratch("img.idx"), lbl = scratch("lbl.idx"), one = scratch("one.idx");
    detail::write_file(img, kImages);
    detail::write_file(lbl, kLabels);
    auto d = load_idx(img, lbl, 10, 2, 3);
    EXPECT_EQ(d.size(), 2u);
    EXPECT_EQ(d.labels(0, 7), 1.0);
    EXPECT_EQ(d.labels(1, 0), 1.0);
    EXPECT_EQ(kind_of([&] { load_idx(img, lbl); }), IdxError::Kind::ShapeMismatch);  // 28x28 expected
    detail::write_file(one, encode_idx_labels(std::vector<std::uint8_t>{1}));
    EXPECT_EQ(kind_of([&] { load_idx(img, one, 10, 2, 3); }), IdxError::Kind::CountMismatch);
    EXPECT_EQ(kind_of([&] { load_idx(scratch("missing.idx"), lbl, 10, 2, 3); }), IdxError::Kind::Io);
    EXPECT_THROW(load_idx(img, lbl, 5, 2, 3), std::out_of_range);  // label 7 with five classes
}

TEST(Histogram, EdgeCases) {
    std::vector<double> zeros(10, 0.0);
    auto h = histogram8(zeros);
    EXPECT_EQ(h[0], 1.0);
    const double one[] = {1.0};
    EXPECT_EQ(histogram8(one)[7], 1.0);
    const double edges[] = {0.125, 0.124999, 0.875, 0.5};
    auto e = histogram8(edges);
    EXPECT_EQ(e[0], 0.25);
    EXPECT_EQ(e[1], 0.25);
    EXPECT_EQ(e[4], 0.25);
    EXPECT_EQ(e[7], 0.25);
}

TEST(Histogram, MatchesCountingAndIgnoresOrder) {
    Rng rng(9);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> px(64);
        for (double& p : px) p = std::round(rng.uniform() * 255) / 255;
        auto h = histogram8(px);
        double total = 0;
        for (std::size_t b = 0; b < 8; ++b) {
            // Counting by integer pixel value avoids floating point bin edges.
            std::size_t count = 0;
            for (double p : px) {
                const auto v = static_cast<int>(std::lround(p * 255));
                if (std::min(v * 8 / 255, 7) == static_cast<int>(b)) ++count;
            }
            EXPECT_DOUBLE_EQ(h[b], count / 64.0);
            total += h[b];
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
        rng.shuffle(px);
        EXPECT_EQ(histogram8(px), h);
    }
}

TEST(Targets, OneHotAndRangeCheck) {
    Matrix img(3, 4);
    auto d = derive_targets(img, {2, 0, 2}, 3, 2, 2);
    for (std::size_t r = 0; r < 3; ++r) {
        double sum = 0;
        for (std::size_t c = 0; c < 3; ++c) sum += d.labels(r, c);
        EXPECT_EQ(sum, 1.0);
    }
    EXPECT_EQ(d.labels(0, 2), 1.0);
    EXPECT_EQ(d.labels(1, 0), 1.0);
    EXPECT_THROW(derive_targets(img, {0, 3, 1}, 3, 2, 2), std::out_of_range);
    EXPECT_THROW(derive_targets(img, {0, 1}, 3, 2, 2), ShapeError);
}

TEST(Synthetic, DeterministicAndQuantized) {
    auto a = synthetic_dataset(200, 8, 3, 4);
    auto b = synthetic_dataset(200, 8, 3, 4);
    auto c = synthetic_dataset(200, 8, 3, 5);
    EXPECT_EQ(a, b);
    EXPECT_NE(a.images, c.images);
    for (double v : a.images.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        EXPECT_EQ(std::round(v * 255) / 255, v);
    }
    auto empty = synthetic_dataset(0, 8, 3, 4);
    EXPECT_EQ(empty.size(), 0u);
    EXPECT_THROW(synthetic_dataset(10, 2, 3, 4), std::invalid_argument);
}

TEST(Synthetic, LinearlySeparable) {
    // Plain softmax regression, trained here by full-batch gradient descent.
    auto d = synthetic_dataset(3000, 8, 3, 1);
    split(d, 0.3, 2);
    const std::size_t k = d.classes, p = d.images.cols();
    std::vector<double> w((p + 1) * k, 0.0);
    auto scores = [&](std::size_t r) {
        std::vector<double> s(k);
        for (std::size_t c = 0; c < k; ++c) {
            s[c] = w[p * k + c];
            for (std::size_t j = 0; j < p; ++j) s[c] += d.images(r, j) * w[j * k + c];
        }
        return s;
    };
    for (int epoch = 0; epoch < 200; ++epoch) {
        std::vector<double> g(w.size(), 0.0);
        for (std::size_t r : d.train_idx) {
            auto s = scores(r);
            const double mx = *std::max_element(s.begin(), s.end());
            double z = 0;
            for (double& v : s) z += (v = std::exp(v - mx));
            for (std::size_t c = 0; c < k; ++c) {
                const double delta = s[c] / z - d.labels(r, c);
                for (std::size_t j = 0; j < p; ++j) g[j * k + c] += delta * d.images(r, j);
                g[p * k + c] += delta;
            }
        }
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 0.5 * g[i] / static_cast<double>(d.train_idx.size());
    }
    std::size_t correct = 0;
    for (std::size_t r : d.eval_idx) {
        auto s = scores(r);
        if (static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin()) == d.raw_labels[r]) ++correct;
    }
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(d.eval_idx.size()), 0.9);
}

TEST(Split, DisjointAndExhaustive) {
    auto d = synthetic_dataset(101, 4, 2, 3);
    split(d, 0.25, 8);
    EXPECT_EQ(d.eval_idx.size(), 25u);
    std::vector<std::size_t> all = d.train_idx;
    all.insert(all.end(), d.eval_idx.begin(), d.eval_idx.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
    auto again = d;
    split(again, 0.25, 8);
    EXPECT_EQ(again.eval_idx, d.eval_idx);
    EXPECT_THROW(split(d, 1.5, 8), std::invalid_argument);
}

TEST(Task, MapsColumnsToEndpoints) {
    auto d = synthetic_dataset(12, 4, 3, 3);
    const std::vector<std::size_t> rows{3, 5};
    auto t = to_task(d, rows);
    const auto& x = t.inputs.at(NodeId::input(0));
    EXPECT_EQ(x.rows(), 2u);
    EXPECT_EQ(x(1, 7), d.images(5, 7));
    EXPECT_EQ(t.targets.at(NodeId::output(0))(0, d.raw_labels[3]), 1.0);
    EXPECT_EQ(t.targets.at(NodeId::output(1)).cols(), 8u);
    EXPECT_EQ(t.targets.at(NodeId::output(2)), x);
    auto problem = dataset_problem(d);
    EXPECT_EQ(problem.inputs[0].dim, 16u);
    EXPECT_EQ(problem.targets[0].dim, 3u);
    EXPECT_EQ(problem.targets[2].dim, 16u);
}

TEST(Cache, RoundTripIsExact) {
    auto d = synthetic_dataset(50, 5, 4, 6);
    split(d, 0.2, 1);
    auto bytes = encode_cache(d);
    EXPECT_EQ(decode_cache(bytes), d);
    const auto p = scratch("cache.bin");
    save_cache(p, d);
    EXPECT_EQ(load_cache(p), d);
    EXPECT_EQ(encode_cache(load_cache(p)), bytes);
}

TEST(Cache, RejectsDamage) {
    auto bytes = encode_cache(synthetic_dataset(5, 4, 2, 6));
    auto bad = bytes;
    bad[7] = '2';
    EXPECT_EQ(kind_of([&] { decode_cache(bad); }), IdxError::Kind::BadMagic);
    auto cut = bytes;
    cut.resize(cut.size() - 3);
    EXPECT_THROW(decode_cache(cut), IdxError);
    auto extra = bytes;
    extra.push_back(0);
    EXPECT_EQ(kind_of([&] { decode_cache(extra); }), IdxError::Kind::CountMismatch);
}
