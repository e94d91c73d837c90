#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "metrics.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace sgdrop {

static_assert(std::endian::native == std::endian::little,
              "raw f32 dataset payloads assume a little-endian host");

template <typename T>
struct Dataset {
    Tensor<T> images; // N,C,H,W scaled to [0,1]
    std::vector<std::size_t> labels;
    std::vector<std::vector<BBox>> boxes; // empty when unavailable
    std::size_t class_count = 0;
    std::string split;

    std::size_t size() const { return images.empty() ? 0 : images.extent(0); }
    bool has_boxes() const { return !boxes.empty(); }
    Shape chw() const { return {images.extent(1), images.extent(2), images.extent(3)}; }

    void validate() const {
        if (images.empty() || images.rank() != 4 || size() == 0)
            throw std::runtime_error("dataset: empty or non-NCHW image tensor");
        if (labels.size() != size())
            throw std::runtime_error("dataset: " + std::to_string(labels.size()) +
                                     " labels for " + std::to_string(size()) + " images");
        for (std::size_t l : labels)
            if (l >= class_count)
                throw std::runtime_error("dataset: label " + std::to_string(l) +
                                         " out of range [0, " + std::to_string(class_count) + ")");
        if (!boxes.empty() && boxes.size() != size())
            throw std::runtime_error("dataset: box list size mismatch");
        for (const auto& bs : boxes)
            for (const BBox& b : bs)
                if (b.x_max > images.extent(3) || b.y_max > images.extent(2))
                    throw std::runtime_error("dataset: box outside image bounds");
    }

    Tensor<T> gather_images(const std::vector<std::size_t>& idx) const {
        const std::size_t per = images.numel() / size();
        Tensor<T> out({idx.size(), images.extent(1), images.extent(2), images.extent(3)});
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy(images.data() + idx[i] * per, images.data() + (idx[i] + 1) * per,
                      out.data() + i * per);
        return out;
    }

    std::vector<std::size_t> gather_labels(const std::vector<std::size_t>& idx) const {
        std::vector<std::size_t> out(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
        return out;
    }
};

/// Deterministic epoch batching: a Fisher-Yates permutation seeded by
/// (seed, epoch), chunked; the final short batch is retained.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                                     std::uint64_t shuffle_seed,
                                                     std::size_t epoch) {
    if (batch_size == 0) throw std::invalid_argument("batches: batch_size must be >= 1");
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(mix_seed(shuffle_seed, epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t at = 0; at < n; at += batch_size) {
        const std::size_t end = std::min(n, at + batch_size);
        out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(at),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

// ---------------------------------------------------------------------------
// MNIST IDX
// ---------------------------------------------------------------------------

namespace detail {

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline std::uint32_t be32(const unsigned char* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

} // namespace detail

/// Parse an IDX image file (magic 0x00000803, big-endian header).
template <typename T>
Tensor<T> load_idx_images(const std::string& path) {
    const std::string blob = detail::read_file(path);
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
    if (blob.size() < 16) throw std::runtime_error(path + ": truncated IDX header");
    const std::uint32_t magic = detail::be32(p);
    if (magic != 0x00000803u)
        throw std::runtime_error(path + ": bad image magic " + detail::hex32(magic) +
                                 " (expected 0x00000803)");
    const std::size_t n = detail::be32(p + 4);
    const std::size_t rows = detail::be32(p + 8);
    const std::size_t cols = detail::be32(p + 12);
    if (blob.size() != 16 + n * rows * cols)
        throw std::runtime_error(path + ": expected " + std::to_string(16 + n * rows * cols) +
                                 " bytes, got " + std::to_string(blob.size()));
    Tensor<T> images({n, 1, rows, cols});
    for (std::size_t i = 0; i < n * rows * cols; ++i)
        images[i] = static_cast<T>(p[16 + i]) / static_cast<T>(255);
    return images;
}

/// Parse an IDX label file (magic 0x00000801).
inline std::vector<std::size_t> load_idx_labels(const std::string& path) {
    const std::string blob = detail::read_file(path);
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
    if (blob.size() < 8) throw std::runtime_error(path + ": truncated IDX header");
    const std::uint32_t magic = detail::be32(p);
    if (magic != 0x00000801u)
        throw std::runtime_error(path + ": bad label magic " + detail::hex32(magic) +
                                 " (expected 0x00000801)");
    const std::size_t n = detail::be32(p + 4);
    if (blob.size() != 8 + n)
        throw std::runtime_error(path + ": expected " + std::to_string(8 + n) + " bytes, got " +
                                 std::to_string(blob.size()));
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = p[8 + i];
    return labels;
}

template <typename T>
Dataset<T> load_mnist(const std::string& dir, const std::string& split) {
    namespace fs = std::filesystem;
    const std::string stem = split == "train" ? "train" : "t10k";
    if (split != "train" && split != "test")
        throw std::runtime_error("load_mnist: split must be 'train' or 'test', got '" + split +
                                 "'");
    Dataset<T> ds;
    ds.images = load_idx_images<T>((fs::path(dir) / (stem + "-images-idx3-ubyte")).string());
    ds.labels = load_idx_labels((fs::path(dir) / (stem + "-labels-idx1-ubyte")).string());
    if (ds.labels.size() != ds.size())
        throw std::runtime_error("load_mnist: " + std::to_string(ds.size()) + " images but " +
                                 std::to_string(ds.labels.size()) + " labels");
    ds.class_count = 10;
    ds.split = split;
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary
// ---------------------------------------------------------------------------

/// Parse concatenated 3073-byte CIFAR records (1 label + 3x1024 R/G/B planes).
template <typename T>
void append_cifar_file(const std::string& path, std::vector<T>& pixels,
                       std::vector<std::size_t>& labels) {
    const std::string blob = detail::read_file(path);
    if (blob.empty() || blob.size() % 3073 != 0)
        throw std::runtime_error(path + ": size " + std::to_string(blob.size()) +
                                 " is not a positive multiple of 3073");
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
    const std::size_t n = blob.size() / 3073;
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char label = p[i * 3073];
        if (label > 9)
            throw std::runtime_error(path + ": record " + std::to_string(i) + " has label " +
                                     std::to_string(label) + " > 9");
        labels.push_back(label);
        const unsigned char* px = p + i * 3073 + 1;
        for (std::size_t k = 0; k < 3072; ++k)
            pixels.push_back(static_cast<T>(px[k]) / static_cast<T>(255));
    }
}

template <typename T>
Dataset<T> load_cifar10(const std::string& dir, const std::string& split) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    if (split == "train") {
        for (int i = 1; i <= 5; ++i)
            files.push_back((fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string());
    } else if (split == "test") {
        files.push_back((fs::path(dir) / "test_batch.bin").string());
    } else {
        throw std::runtime_error("load_cifar10: split must be 'train' or 'test', got '" + split +
                                 "'");
    }
    std::vector<T> pixels;
    std::vector<std::size_t> labels;
    for (const auto& f : files) append_cifar_file(f, pixels, labels);

    Dataset<T> ds;
    const std::size_t n = labels.size();
    ds.images = Tensor<T>::from({n, 3, 32, 32}, std::move(pixels));
    ds.labels = std::move(labels);
    ds.class_count = 10;
    ds.split = split;
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic shortcut benchmark
// ---------------------------------------------------------------------------

/// Spurious-correlation benchmark: every image carries a class-specific
/// object (the generalizing feature) and, depending on the split, a small
/// high-contrast corner patch (the shortcut).
///
/// Placement semantics:
///   train: with probability p_train the patch sits at the class corner,
///          otherwise it is absent;
///   test:  a patch is present with probability p_train; it sits at the
///          class corner with probability p_test, else at a uniformly
///          random corner.
/// So p_train = 0 removes the patch from both splits (identical
/// distributions), and the defaults (p_train = 1, p_test = 0) give a fully
/// correlated train shortcut that is uninformative at test time.
struct SynthSpec {
    std::size_t image_size = 32;
    std::size_t class_count = 2;
    std::size_t object_size = 12;
    double object_intensity = 0.6;
    std::size_t shortcut_size = 2;
    double shortcut_intensity = 1.0;
    double p_train = 1.0;
    double p_test = 0.0;
    double noise = 0.05;
    std::size_t train_n = 2000;
    std::size_t test_n = 500;
    std::uint64_t seed = 1;

    void validate() const {
        if (class_count < 2) throw ConfigError("synth: class_count must be >= 2");
        if (object_size == 0 || shortcut_size == 0)
            throw ConfigError("synth: object and shortcut sizes must be >= 1");
        if (object_size + 2 * shortcut_size > image_size)
            throw ConfigError("synth: object plus corner margin exceeds the image");
        if (p_train < 0 || p_train > 1 || p_test < 0 || p_test > 1)
            throw ConfigError("synth: probabilities must be in [0,1]");
        if (noise < 0) throw ConfigError("synth: noise must be >= 0");
        if (train_n == 0 || test_n == 0) throw ConfigError("synth: sample counts must be >= 1");
    }

    KvMap to_kv() const {
        KvMap kv;
        kv.set("image_size", std::to_string(image_size));
        kv.set("class_count", std::to_string(class_count));
        kv.set("object_size", std::to_string(object_size));
        kv.set("object_intensity", std::to_string(object_intensity));
        kv.set("shortcut_size", std::to_string(shortcut_size));
        kv.set("shortcut_intensity", std::to_string(shortcut_intensity));
        kv.set("p_train", std::to_string(p_train));
        kv.set("p_test", std::to_string(p_test));
        kv.set("noise", std::to_string(noise));
        kv.set("train_n", std::to_string(train_n));
        kv.set("test_n", std::to_string(test_n));
        kv.set("seed", std::to_string(seed));
        return kv;
    }
};

namespace detail {

/// Per-class object stencil over an object_size x object_size cell.
inline std::vector<char> object_stencil(std::size_t cls, std::size_t s) {
    std::vector<char> m(s * s, 0);
    const std::size_t th = std::max<std::size_t>(1, s / 3);
    switch (cls % 4) {
        case 0: // filled square
            std::fill(m.begin(), m.end(), 1);
            break;
        case 1: { // plus sign
            const std::size_t a = (s - th) / 2;
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x)
                    if ((x >= a && x < a + th) || (y >= a && y < a + th)) m[y * s + x] = 1;
            break;
        }
        case 2: { // hollow square
            const std::size_t r = std::max<std::size_t>(1, s / 4);
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x)
                    if (x < r || y < r || x >= s - r || y >= s - r) m[y * s + x] = 1;
            break;
        }
        case 3: // diagonal cross
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x) {
                    const std::size_t d1 = y > x ? y - x : x - y;
                    const std::size_t d2 = (y + x) > (s - 1) ? y + x - (s - 1) : (s - 1) - y - x;
                    if (d1 < th || d2 < th) m[y * s + x] = 1;
                }
            break;
    }
    return m;
}

} // namespace detail

template <typename T>
Dataset<T> generate_shortcut_split(const SynthSpec& spec, bool is_train) {
    const std::size_t H = spec.image_size, W = spec.image_size, S = spec.object_size;
    const std::size_t n = is_train ? spec.train_n : spec.test_n;
    const std::size_t margin = spec.shortcut_size;
    Rng rng(mix_seed(spec.seed, is_train ? 0x7261 : 0x7465));

    std::vector<std::vector<char>> stencils;
    for (std::size_t c = 0; c < spec.class_count; ++c)
        stencils.push_back(detail::object_stencil(c, S));

    Dataset<T> ds;
    ds.images = Tensor<T>({n, 1, H, W});
    ds.labels.resize(n);
    ds.boxes.resize(n);
    ds.class_count = spec.class_count;
    ds.split = is_train ? "train" : "test";

    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = rng.below(spec.class_count);
        ds.labels[i] = cls;
        T* img = ds.images.data() + i * H * W;

        // noise perturbs drawn content only; the background stays at exact
        // zero so activation-coverage measurements see truly dark regions
        auto stamp = [&](std::size_t y, std::size_t x, double intensity) {
            double v = intensity;
            if (spec.noise > 0) v += spec.noise * rng.normal();
            img[y * W + x] = static_cast<T>(std::clamp(v, 0.0, 1.0));
        };

        // object at a random location clear of the corner cells
        const std::size_t span = W - S - 2 * margin + 1;
        const std::size_t x0 = margin + rng.below(span);
        const std::size_t y0 = margin + rng.below(span);
        const auto& st = stencils[cls];
        std::size_t bx0 = S, by0 = S, bx1 = 0, by1 = 0;
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < S; ++x)
                if (st[y * S + x]) {
                    stamp(y0 + y, x0 + x, spec.object_intensity);
                    bx0 = std::min(bx0, x);
                    by0 = std::min(by0, y);
                    bx1 = std::max(bx1, x + 1);
                    by1 = std::max(by1, y + 1);
                }
        ds.boxes[i] = {BBox(x0 + bx0, y0 + by0, x0 + bx1, y0 + by1)};

        // shortcut patch
        bool present;
        std::size_t corner;
        if (is_train) {
            present = rng.bernoulli(spec.p_train);
            corner = cls % 4;
        } else {
            present = rng.bernoulli(spec.p_train);
            corner = rng.bernoulli(spec.p_test) ? cls % 4 : rng.below(4);
        }
        if (present) {
            const std::size_t cs = spec.shortcut_size;
            const std::size_t py = (corner / 2) ? H - cs : 0;
            const std::size_t px = (corner % 2) ? W - cs : 0;
            for (std::size_t y = 0; y < cs; ++y)
                for (std::size_t x = 0; x < cs; ++x)
                    stamp(py + y, px + x, spec.shortcut_intensity);
        }
    }
    ds.validate();
    return ds;
}

template <typename T>
std::pair<Dataset<T>, Dataset<T>> generate_shortcut(const SynthSpec& spec) {
    spec.validate();
    return {generate_shortcut_split<T>(spec, true), generate_shortcut_split<T>(spec, false)};
}

// ---------------------------------------------------------------------------
// Dataset directory format: images.bin (raw LE f32, N*C*H*W), labels.bin
// (u8 per sample), boxes.csv (index,x_min,y_min,x_max,y_max), meta.kv.
// ---------------------------------------------------------------------------

template <typename T>
void save_dataset_dir(const std::string& dir, const Dataset<T>& ds, const KvMap& spec_echo) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    ds.validate();

    {
        std::ofstream f(fs::path(dir) / "images.bin", std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write images.bin in " + dir);
        for (std::size_t i = 0; i < ds.images.numel(); ++i) {
            const float v = static_cast<float>(ds.images[i]);
            f.write(reinterpret_cast<const char*>(&v), 4);
        }
    }
    {
        std::ofstream f(fs::path(dir) / "labels.bin", std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write labels.bin in " + dir);
        for (std::size_t l : ds.labels) {
            if (l > 0xff) throw std::runtime_error("labels.bin: label exceeds u8");
            const unsigned char b = static_cast<unsigned char>(l);
            f.write(reinterpret_cast<const char*>(&b), 1);
        }
    }
    {
        std::ofstream f(fs::path(dir) / "boxes.csv", std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write boxes.csv in " + dir);
        f << "index,x_min,y_min,x_max,y_max\n";
        for (std::size_t i = 0; i < ds.boxes.size(); ++i)
            for (const BBox& b : ds.boxes[i])
                f << i << ',' << b.x_min << ',' << b.y_min << ',' << b.x_max << ',' << b.y_max
                  << '\n';
    }
    KvMap meta = spec_echo;
    meta.set("split", ds.split);
    meta.set("count", std::to_string(ds.size()));
    meta.set("channels", std::to_string(ds.images.extent(1)));
    meta.set("height", std::to_string(ds.images.extent(2)));
    meta.set("width", std::to_string(ds.images.extent(3)));
    meta.set("classes", std::to_string(ds.class_count));
    meta.write_file((fs::path(dir) / "meta.kv").string());
}

template <typename T>
Dataset<T> load_dataset_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    KvMap meta = KvMap::parse_file((fs::path(dir) / "meta.kv").string());
    const std::size_t n = meta.get_size("count", 0);
    const std::size_t c = meta.get_size("channels", 0);
    const std::size_t h = meta.get_size("height", 0);
    const std::size_t w = meta.get_size("width", 0);
    if (n == 0 || c == 0 || h == 0 || w == 0)
        throw std::runtime_error(dir + "/meta.kv: missing or zero count/channels/height/width");

    Dataset<T> ds;
    ds.class_count = meta.get_size("classes", 0);
    ds.split = meta.get_or("split", "");

    const std::string blob = detail::read_file((fs::path(dir) / "images.bin").string());
    if (blob.size() != n * c * h * w * 4)
        throw std::runtime_error(dir + "/images.bin: expected " +
                                 std::to_string(n * c * h * w * 4) + " bytes, got " +
                                 std::to_string(blob.size()));
    ds.images = Tensor<T>({n, c, h, w});
    for (std::size_t i = 0; i < ds.images.numel(); ++i) {
        float v;
        std::memcpy(&v, blob.data() + i * 4, 4);
        ds.images[i] = static_cast<T>(v);
    }

    const std::string labels = detail::read_file((fs::path(dir) / "labels.bin").string());
    if (labels.size() != n)
        throw std::runtime_error(dir + "/labels.bin: expected " + std::to_string(n) +
                                 " bytes, got " + std::to_string(labels.size()));
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        ds.labels[i] = static_cast<unsigned char>(labels[i]);

    const fs::path boxes_path = fs::path(dir) / "boxes.csv";
    if (fs::exists(boxes_path)) {
        std::ifstream f(boxes_path);
        std::string line;
        std::getline(f, line);
        if (line != "index,x_min,y_min,x_max,y_max")
            throw std::runtime_error(dir + "/boxes.csv: unexpected header '" + line + "'");
        ds.boxes.assign(n, {});
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            std::size_t vals[5];
            std::size_t at = 0;
            for (int k = 0; k < 5; ++k) {
                const auto comma = line.find(',', at);
                const std::string field =
                    line.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
                vals[k] = static_cast<std::size_t>(std::stoull(field));
                if (k < 4) {
                    if (comma == std::string::npos)
                        throw std::runtime_error(dir + "/boxes.csv: short row '" + line + "'");
                    at = comma + 1;
                }
            }
            if (vals[0] >= n)
                throw std::runtime_error(dir + "/boxes.csv: index " + std::to_string(vals[0]) +
                                         " out of range");
            ds.boxes[vals[0]].push_back(BBox(vals[1], vals[2], vals[3], vals[4]));
        }
    }
    ds.validate();
    return ds;
}

/// Bilinear square resize of every image (the only transform offered).
/// Ground-truth boxes are rescaled proportionally.
template <typename T>
Dataset<T> resized(const Dataset<T>& ds, std::size_t side) {
    const std::size_t C = ds.images.extent(1), H = ds.images.extent(2), W = ds.images.extent(3);
    if (side == 0) throw std::invalid_argument("resize: side must be >= 1");
    if (H == side && W == side) return ds;
    Dataset<T> out = ds;
    out.images = Tensor<T>({ds.size(), C, side, side});
    for (std::size_t i = 0; i < ds.size() * C; ++i)
        kernels::bilinear_resize(ds.images.data() + i * H * W, H, W,
                                 out.images.data() + i * side * side, side, side);
    if (!ds.boxes.empty()) {
        const double sx = static_cast<double>(side) / static_cast<double>(W);
        const double sy = static_cast<double>(side) / static_cast<double>(H);
        for (auto& bs : out.boxes)
            for (auto& b : bs) {
                const auto x0 = static_cast<std::size_t>(b.x_min * sx);
                const auto y0 = static_cast<std::size_t>(b.y_min * sy);
                auto x1 = static_cast<std::size_t>(b.x_max * sx + 0.5);
                auto y1 = static_cast<std::size_t>(b.y_max * sy + 0.5);
                x1 = std::max(x1, x0 + 1);
                y1 = std::max(y1, y0 + 1);
                b = BBox(x0, y0, std::min(x1, side), std::min(y1, side));
            }
    }
    out.validate();
    return out;
}

} // namespace sgdrop
