#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "whathow/png_io.hpp"
#include "whathow/tensor.hpp"

namespace whathow {

/// Seeded stand-in datasets for environments without the real files. They are
/// written through the same on-disk formats the loaders consume (IDX pairs,
/// alphabet/character PNG trees), so the full ingestion path is exercised.
namespace synth {

inline constexpr std::size_t kImageHw = 28;

namespace detail {

inline void write_be32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

/// Smooth blob template used as a class prototype.
inline std::vector<double> blob_template(Rng& rng) {
    std::vector<double> img(kImageHw * kImageHw, 0.0);
    const int blobs = 4 + static_cast<int>(rng.integer(3));
    for (int b = 0; b < blobs; ++b) {
        const double cy = rng.uniform(6.0, 22.0), cx = rng.uniform(6.0, 22.0);
        const double s = rng.uniform(1.8, 4.2), amp = rng.uniform(0.55, 1.0);
        for (std::size_t i = 0; i < kImageHw; ++i)
            for (std::size_t j = 0; j < kImageHw; ++j) {
                const double dy = static_cast<double>(i) - cy, dx = static_cast<double>(j) - cx;
                img[i * kImageHw + j] += amp * std::exp(-(dy * dy + dx * dx) / (2.0 * s * s));
            }
    }
    for (double& v : img) v = std::min(v, 1.0);
    return img;
}

/// Few random line strokes, lightly blurred; a glyph prototype.
inline std::vector<double> stroke_template(Rng& rng) {
    std::vector<double> img(kImageHw * kImageHw, 0.0);
    const int strokes = 4 + static_cast<int>(rng.integer(3));
    for (int s = 0; s < strokes; ++s) {
        double y = rng.uniform(4.0, 24.0), x = rng.uniform(4.0, 24.0);
        const double angle = rng.uniform(0.0, 2.0 * kPi);
        const double len = rng.uniform(8.0, 16.0);
        const double dy = std::sin(angle), dx = std::cos(angle);
        for (double t = 0.0; t < len; t += 0.5) {
            const double py = y + t * dy, px = x + t * dx;
            const int iy = static_cast<int>(std::lround(py)), ix = static_cast<int>(std::lround(px));
            if (iy >= 0 && iy < static_cast<int>(kImageHw) && ix >= 0 && ix < static_cast<int>(kImageHw))
                img[static_cast<std::size_t>(iy) * kImageHw + static_cast<std::size_t>(ix)] = 1.0;
        }
    }
    // one 3x3 blur pass softens the strokes
    std::vector<double> blurred = img;
    for (std::size_t i = 1; i + 1 < kImageHw; ++i)
        for (std::size_t j = 1; j + 1 < kImageHw; ++j) {
            double acc = 0.0;
            for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) acc += img[(i + static_cast<std::size_t>(di)) * kImageHw + j + static_cast<std::size_t>(dj)];
            blurred[i * kImageHw + j] = std::min(1.0, acc / 5.0);
        }
    return blurred;
}

/// Template -> sample: small shift plus pixel noise, clamped to [0, 1].
inline std::vector<double> jitter(const std::vector<double>& tpl, Rng& rng, double noise) {
    const int sy = static_cast<int>(rng.integer(5)) - 2;
    const int sx = static_cast<int>(rng.integer(5)) - 2;
    std::vector<double> out(kImageHw * kImageHw, 0.0);
    for (int i = 0; i < static_cast<int>(kImageHw); ++i)
        for (int j = 0; j < static_cast<int>(kImageHw); ++j) {
            const int si = i - sy, sj = j - sx;
            double v = 0.0;
            if (si >= 0 && si < static_cast<int>(kImageHw) && sj >= 0 && sj < static_cast<int>(kImageHw))
                v = tpl[static_cast<std::size_t>(si) * kImageHw + static_cast<std::size_t>(sj)];
            v += noise * rng.normal();
            out[static_cast<std::size_t>(i) * kImageHw + static_cast<std::size_t>(j)] = std::clamp(v, 0.0, 1.0);
        }
    return out;
}

}  // namespace detail

/// Writes a seeded 10-class IDX pair (train + test) under `dir`, using the
/// standard MNIST file names. Returns the four paths written.
inline std::vector<std::string> write_mnist_like(const std::string& dir, std::size_t n_train, std::size_t n_test,
                                                 std::uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    Rng tpl_rng(mix_seed(seed, 101));
    std::vector<std::vector<double>> templates;
    templates.reserve(10);
    for (int c = 0; c < 10; ++c) templates.push_back(detail::blob_template(tpl_rng));

    auto write_pair = [&](const std::string& img_name, const std::string& lbl_name, std::size_t n,
                          std::uint64_t stream) {
        Rng rng(mix_seed(seed, stream));
        std::ofstream imgs(fs::path(dir) / img_name, std::ios::binary);
        std::ofstream lbls(fs::path(dir) / lbl_name, std::ios::binary);
        detail::write_be32(imgs, 0x00000803);
        detail::write_be32(imgs, static_cast<std::uint32_t>(n));
        detail::write_be32(imgs, kImageHw);
        detail::write_be32(imgs, kImageHw);
        detail::write_be32(lbls, 0x00000801);
        detail::write_be32(lbls, static_cast<std::uint32_t>(n));
        for (std::size_t i = 0; i < n; ++i) {
            const int label = static_cast<int>(rng.integer(10));
            auto img = detail::jitter(templates[static_cast<std::size_t>(label)], rng, 0.12);
            std::vector<unsigned char> bytes(img.size());
            for (std::size_t p = 0; p < img.size(); ++p)
                bytes[p] = static_cast<unsigned char>(std::lround(img[p] * 255.0));
            imgs.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
            lbls.put(static_cast<char>(label));
        }
        return std::vector<std::string>{(fs::path(dir) / img_name).string(), (fs::path(dir) / lbl_name).string()};
    };

    auto train = write_pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte", n_train, 7);
    auto test = write_pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", n_test, 11);
    train.insert(train.end(), test.begin(), test.end());
    return train;
}

/// Writes a seeded alphabet/character/PNG tree under `root`: `n_alphabets`
/// alphabets of 20 characters with 20 images each, dark glyphs on white.
inline void write_omniglot_like(const std::string& root, int n_alphabets, std::uint64_t seed) {
    namespace fs = std::filesystem;
    for (int a = 0; a < n_alphabets; ++a) {
        Rng alpha_rng(mix_seed(seed, 1000 + static_cast<std::uint64_t>(a)));
        char alpha_name[32];
        std::snprintf(alpha_name, sizeof alpha_name, "alphabet_%02d", a);
        for (std::size_t c = 0; c < 20; ++c) {
            const auto tpl = detail::stroke_template(alpha_rng);
            char char_name[32];
            std::snprintf(char_name, sizeof char_name, "character%02zu", c);
            fs::path dir = fs::path(root) / alpha_name / char_name;
            fs::create_directories(dir);
            for (std::size_t i = 0; i < 20; ++i) {
                auto ink = detail::jitter(tpl, alpha_rng, 0.06);
                GrayImage img;
                img.width = img.height = kImageHw;
                img.pixels.resize(ink.size());
                for (std::size_t p = 0; p < ink.size(); ++p)
                    img.pixels[p] = static_cast<std::uint8_t>(std::lround((1.0 - ink[p]) * 255.0));
                char file_name[32];
                std::snprintf(file_name, sizeof file_name, "img_%02zu.png", i);
                write_png_gray((dir / file_name).string(), img);
            }
        }
    }
}

}  // namespace synth
}  // namespace whathow
