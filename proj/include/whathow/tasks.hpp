#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "whathow/data_types.hpp"
#include "whathow/png_io.hpp"
#include "whathow/tensor.hpp"

namespace whathow {

// ---------------------------------------------------------------------------
// Sine regression tasks
// ---------------------------------------------------------------------------

struct SineTask {
    double amplitude = 0.0;  // in [1, 5]
    double phase = 0.0;      // in [0, pi]
    TaskData data;
};

inline constexpr std::size_t kSineTrainSize = 5000;
inline constexpr std::size_t kSineTestSize = 100;

/// Amplitude ~ U[1, 5], phase ~ U[0, pi], x ~ U[-5, 5], y = a sin(x + phi).
/// Test inputs are redrawn on collision so the splits are disjoint.
inline SineTask gen_sine_task(Rng& rng) {
    SineTask task;
    task.amplitude = rng.uniform(1.0, 5.0);
    task.phase = rng.uniform(0.0, kPi);

    auto fill = [&](std::size_t n, const std::set<double>* avoid) {
        Tensor xs{Shape{n, 1}};
        Tensor ys{Shape{n, 1}};
        for (std::size_t i = 0; i < n; ++i) {
            double x = rng.uniform(-5.0, 5.0);
            while (avoid && avoid->count(x)) x = rng.uniform(-5.0, 5.0);
            xs.data[i] = x;
            ys.data[i] = task.amplitude * std::sin(x + task.phase);
        }
        Dataset d = Dataset::of(std::move(xs));
        d.y = std::move(ys);
        return d;
    };

    task.data.train = fill(kSineTrainSize, nullptr);
    std::set<double> seen(task.data.train.x->data.begin(), task.data.train.x->data.end());
    task.data.test = fill(kSineTestSize, &seen);
    return task;
}

inline std::vector<TaskData> sine_stream(Rng& rng, int n_tasks) {
    std::vector<TaskData> tasks;
    tasks.reserve(static_cast<std::size_t>(n_tasks));
    for (int i = 0; i < n_tasks; ++i) tasks.push_back(gen_sine_task(rng).data);
    return tasks;
}

// ---------------------------------------------------------------------------
// IDX files (the MNIST container format)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("IDX file truncated while reading header: " + path);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

}  // namespace detail

struct MnistData {
    Tensor images;            // (N, 784), values in [0, 1]
    std::vector<int> labels;  // N entries in 0..9
};

/// Big-endian IDX pair: images (magic 0x00000803, dims N x H x W) and labels
/// (magic 0x00000801, N bytes). Pixels are scaled to [0, 1] and flattened.
inline MnistData load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw std::runtime_error("cannot open IDX image file: " + images_path);
    const std::uint32_t img_magic = detail::read_be32(imgs, images_path);
    if (img_magic != kIdxImagesMagic)
        throw std::runtime_error("bad IDX image magic in " + images_path + ": expected " +
                                 detail::hex32(kIdxImagesMagic) + ", found " + detail::hex32(img_magic));
    const std::uint32_t n = detail::read_be32(imgs, images_path);
    const std::uint32_t rows = detail::read_be32(imgs, images_path);
    const std::uint32_t cols = detail::read_be32(imgs, images_path);
    const std::size_t dim = static_cast<std::size_t>(rows) * cols;

    std::vector<unsigned char> raw(static_cast<std::size_t>(n) * dim);
    if (!imgs.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw std::runtime_error("IDX image file truncated: " + images_path + " promises " + std::to_string(n) +
                                 " images of " + std::to_string(dim) + " bytes");

    std::ifstream lbls(labels_path, std::ios::binary);
    if (!lbls) throw std::runtime_error("cannot open IDX label file: " + labels_path);
    const std::uint32_t lbl_magic = detail::read_be32(lbls, labels_path);
    if (lbl_magic != kIdxLabelsMagic)
        throw std::runtime_error("bad IDX label magic in " + labels_path + ": expected " +
                                 detail::hex32(kIdxLabelsMagic) + ", found " + detail::hex32(lbl_magic));
    const std::uint32_t n_labels = detail::read_be32(lbls, labels_path);
    if (n_labels != n)
        throw std::runtime_error("IDX count mismatch: " + images_path + " has " + std::to_string(n) + " images but " +
                                 labels_path + " has " + std::to_string(n_labels) + " labels");
    std::vector<unsigned char> raw_labels(n_labels);
    if (!lbls.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(raw_labels.size())))
        throw std::runtime_error("IDX label file truncated: " + labels_path);

    MnistData out;
    out.images = Tensor{Shape{n, dim}};
    for (std::size_t i = 0; i < raw.size(); ++i) out.images.data[i] = static_cast<double>(raw[i]) / 255.0;
    out.labels.assign(raw_labels.begin(), raw_labels.end());
    return out;
}

// ---------------------------------------------------------------------------
// Label permutations
// ---------------------------------------------------------------------------

struct LabelPermutation {
    std::vector<int> map;  // map[i] = permuted class of i

    int operator()(int label) const {
        if (label < 0 || static_cast<std::size_t>(label) >= map.size())
            throw std::invalid_argument("permute_labels: label " + std::to_string(label) + " outside [0, " +
                                        std::to_string(map.size()) + ")");
        return map[static_cast<std::size_t>(label)];
    }

    bool is_identity() const {
        for (std::size_t i = 0; i < map.size(); ++i)
            if (map[i] != static_cast<int>(i)) return false;
        return true;
    }

    bool is_derangement() const {
        for (std::size_t i = 0; i < map.size(); ++i)
            if (map[i] == static_cast<int>(i)) return false;
        return true;
    }

    bool valid() const {
        std::vector<bool> seen(map.size(), false);
        for (int v : map) {
            if (v < 0 || static_cast<std::size_t>(v) >= map.size() || seen[static_cast<std::size_t>(v)]) return false;
            seen[static_cast<std::size_t>(v)] = true;
        }
        return true;
    }
};

inline LabelPermutation identity_permutation(std::size_t classes = 10) {
    LabelPermutation p;
    p.map.resize(classes);
    for (std::size_t i = 0; i < classes; ++i) p.map[i] = static_cast<int>(i);
    return p;
}

/// Uniform permutation conditioned on having no fixed point.
inline LabelPermutation random_derangement(Rng& rng, std::size_t classes = 10) {
    LabelPermutation p = identity_permutation(classes);
    do {
        rng.shuffle(p.map);
    } while (!p.is_derangement());
    return p;
}

inline std::vector<int> permute_labels(const std::vector<int>& labels, const LabelPermutation& perm) {
    std::vector<int> out;
    out.reserve(labels.size());
    for (int l : labels) out.push_back(perm(l));
    return out;
}

/// The first task keeps the original labels; later tasks are pairwise
/// distinct seeded derangements, so no two tasks agree on any class map.
inline std::vector<LabelPermutation> stream_permutations(Rng& rng, int n_tasks, std::size_t classes = 10) {
    std::vector<LabelPermutation> perms;
    perms.push_back(identity_permutation(classes));
    while (perms.size() < static_cast<std::size_t>(n_tasks)) {
        LabelPermutation cand = random_derangement(rng, classes);
        bool fresh = std::none_of(perms.begin(), perms.end(),
                                  [&](const LabelPermutation& p) { return p.map == cand.map; });
        if (fresh) perms.push_back(std::move(cand));
    }
    return perms;
}

inline std::vector<TaskData> permuted_mnist_stream(const MnistData& train, const MnistData& test, Rng& rng,
                                                   int n_tasks = 5) {
    auto shared_train = std::make_shared<const Tensor>(train.images);
    auto shared_test = std::make_shared<const Tensor>(test.images);
    std::vector<TaskData> tasks;
    for (const LabelPermutation& perm : stream_permutations(rng, n_tasks)) {
        TaskData t;
        t.train.x = shared_train;
        t.train.labels = permute_labels(train.labels, perm);
        t.test.x = shared_test;
        t.test.labels = permute_labels(test.labels, perm);
        tasks.push_back(std::move(t));
    }
    return tasks;
}

// ---------------------------------------------------------------------------
// Omniglot-style alphabet directories
// ---------------------------------------------------------------------------

inline constexpr std::size_t kAlphabetClasses = 20;
inline constexpr std::size_t kImagesPerCharacter = 20;
inline constexpr std::size_t kTrainPerCharacter = 15;

namespace detail {

inline std::vector<std::filesystem::path> sorted_dirs(const std::filesystem::path& root) {
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(root))
        if (e.is_directory()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<std::filesystem::path> sorted_pngs(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

/// Loads `root/<alphabet>/<character>/<image>.png` trees: the first
/// `n_alphabets` alphabets by sorted name, 20 characters each, 20 images per
/// character split 15/5 by the given rng. Images become 28x28 ink-intensity
/// tensors in [0, 1]; labels live in a single output space,
/// alphabet_index * 20 + character_index.
inline std::vector<TaskData> load_omniglot(const std::string& root, int n_alphabets, Rng& rng,
                                           std::size_t image_hw = 28) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw std::runtime_error("Omniglot root is not a directory: " + root);
    auto alphabets = detail::sorted_dirs(root);
    if (alphabets.size() < static_cast<std::size_t>(n_alphabets))
        throw std::runtime_error("Omniglot root " + root + " has " + std::to_string(alphabets.size()) +
                                 " alphabets, need " + std::to_string(n_alphabets));

    std::vector<TaskData> tasks;
    for (int a = 0; a < n_alphabets; ++a) {
        auto characters = detail::sorted_dirs(alphabets[static_cast<std::size_t>(a)]);
        if (characters.size() < kAlphabetClasses)
            throw std::runtime_error("alphabet " + alphabets[static_cast<std::size_t>(a)].string() + " has " +
                                     std::to_string(characters.size()) + " characters, need " +
                                     std::to_string(kAlphabetClasses));

        const std::size_t dim = image_hw * image_hw;
        Tensor train_x{Shape{kAlphabetClasses * kTrainPerCharacter, 1, image_hw, image_hw}};
        Tensor test_x{Shape{kAlphabetClasses * (kImagesPerCharacter - kTrainPerCharacter), 1, image_hw, image_hw}};
        std::vector<int> train_labels, test_labels;
        std::size_t train_at = 0, test_at = 0;

        for (std::size_t c = 0; c < kAlphabetClasses; ++c) {
            auto images = detail::sorted_pngs(characters[c]);
            if (images.size() < kImagesPerCharacter)
                throw std::runtime_error("character " + characters[c].string() + " has " +
                                         std::to_string(images.size()) + " images, need " +
                                         std::to_string(kImagesPerCharacter));
            std::vector<std::size_t> order(kImagesPerCharacter);
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng.shuffle(order);

            const int label = a * static_cast<int>(kAlphabetClasses) + static_cast<int>(c);
            for (std::size_t i = 0; i < kImagesPerCharacter; ++i) {
                const auto intensity = resize_to_unit(read_png_gray(images[order[i]].string()), image_hw);
                const bool is_train = i < kTrainPerCharacter;
                double* dst = is_train ? train_x.data.data() + train_at * dim : test_x.data.data() + test_at * dim;
                for (std::size_t p = 0; p < dim; ++p) dst[p] = 1.0 - intensity[p];  // ink = 1, paper = 0
                (is_train ? train_labels : test_labels).push_back(label);
                (is_train ? train_at : test_at) += 1;
            }
        }

        TaskData t;
        t.train = Dataset::of(std::move(train_x));
        t.train.labels = std::move(train_labels);
        t.test = Dataset::of(std::move(test_x));
        t.test.labels = std::move(test_labels);
        tasks.push_back(std::move(t));
    }
    return tasks;
}

}  // namespace whathow
