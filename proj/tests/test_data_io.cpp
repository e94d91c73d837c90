#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include <sgdrop/data.hpp>

using namespace sgdrop;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("sgdrop_data_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_bytes(const fs::path& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void push_be32(std::string& s, std::uint32_t v) {
    s.push_back(static_cast<char>((v >> 24) & 0xff));
    s.push_back(static_cast<char>((v >> 16) & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
    s.push_back(static_cast<char>(v & 0xff));
}

/// Two 2x3 images with pixel values 0..5 and 250..255, labels 4 and 9.
void write_mnist_fixture(const fs::path& dir, bool corrupt_image_magic = false,
                         bool corrupt_label_magic = false) {
    std::string img;
    push_be32(img, corrupt_image_magic ? 0x00000802u : 0x00000803u);
    push_be32(img, 2);
    push_be32(img, 2);
    push_be32(img, 3);
    for (int v : {0, 1, 2, 3, 4, 5}) img.push_back(static_cast<char>(v));
    for (int v : {250, 251, 252, 253, 254, 255}) img.push_back(static_cast<char>(v));
    write_bytes(dir / "train-images-idx3-ubyte", img);

    std::string lab;
    push_be32(lab, corrupt_label_magic ? 0x00000701u : 0x00000801u);
    push_be32(lab, 2);
    lab.push_back(4);
    lab.push_back(9);
    write_bytes(dir / "train-labels-idx1-ubyte", lab);
}

} // namespace

TEST_CASE("mnist idx fixture parses to known pixels") {
    auto dir = temp_dir("mnist");
    write_mnist_fixture(dir);
    auto ds = load_mnist<float>(dir.string(), "train");
    REQUIRE(ds.size() == 2);
    REQUIRE(ds.chw() == Shape{1, 2, 3});
    REQUIRE(ds.labels == std::vector<std::size_t>{4, 9});
    for (int i = 0; i < 6; ++i)
        REQUIRE(ds.images[static_cast<std::size_t>(i)] ==
                Catch::Approx(i / 255.0).margin(1e-7));
    REQUIRE(ds.images[11] == Catch::Approx(1.0));
}

TEST_CASE("mnist loader rejects corrupt input") {
    SECTION("bad image magic") {
        auto dir = temp_dir("mnist_badimg");
        write_mnist_fixture(dir, true, false);
        CHECK_THROWS_WITH(load_mnist<float>(dir.string(), "train"),
                          Catch::Matchers::ContainsSubstring("bad image magic") &&
                              Catch::Matchers::ContainsSubstring("0x00000802"));
    }
    SECTION("bad label magic") {
        auto dir = temp_dir("mnist_badlab");
        write_mnist_fixture(dir, false, true);
        CHECK_THROWS_WITH(load_mnist<float>(dir.string(), "train"),
                          Catch::Matchers::ContainsSubstring("bad label magic"));
    }
    SECTION("truncated image payload") {
        auto dir = temp_dir("mnist_trunc");
        write_mnist_fixture(dir);
        auto path = dir / "train-images-idx3-ubyte";
        std::ifstream f(path, std::ios::binary);
        std::string b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        f.close();
        write_bytes(path, b.substr(0, b.size() - 2));
        CHECK_THROWS_WITH(load_mnist<float>(dir.string(), "train"),
                          Catch::Matchers::ContainsSubstring("expected"));
    }
}

TEST_CASE("cifar fixture parses records and plane order") {
    auto dir = temp_dir("cifar");
    // two records: label 7 with R plane ramp, label 3 with G plane constant
    std::string rec(3073 * 2, '\0');
    rec[0] = 7;
    for (int i = 0; i < 1024; ++i) rec[1 + i] = static_cast<char>(i % 251);
    rec[3073] = 3;
    for (int i = 0; i < 1024; ++i) rec[3073 + 1 + 1024 + i] = static_cast<char>(128);
    write_bytes(dir / "test_batch.bin", rec);

    auto ds = load_cifar10<float>(dir.string(), "test");
    REQUIRE(ds.size() == 2);
    REQUIRE(ds.chw() == Shape{3, 32, 32});
    REQUIRE(ds.labels == std::vector<std::size_t>{7, 3});
    // channel 0 of sample 0 is the ramp, channels 1-2 are zero
    REQUIRE(ds.images.at4(0, 0, 0, 5) == Catch::Approx(5 / 255.0));
    REQUIRE(ds.images.at4(0, 1, 0, 5) == 0.0f);
    // sample 1: G plane constant
    REQUIRE(ds.images.at4(1, 1, 3, 3) == Catch::Approx(128 / 255.0));
    REQUIRE(ds.images.at4(1, 0, 3, 3) == 0.0f);

    SECTION("size not a multiple of 3073 is rejected") {
        write_bytes(dir / "test_batch.bin", rec.substr(0, 4000));
        CHECK_THROWS_WITH(load_cifar10<float>(dir.string(), "test"),
                          Catch::Matchers::ContainsSubstring("3073"));
    }
    SECTION("label over 9 is rejected") {
        rec[0] = 11;
        write_bytes(dir / "test_batch.bin", rec);
        CHECK_THROWS_WITH(load_cifar10<float>(dir.string(), "test"),
                          Catch::Matchers::ContainsSubstring("label"));
    }
}

TEST_CASE("shortcut benchmark determinism and structure") {
    SynthSpec spec;
    spec.train_n = 40;
    spec.test_n = 20;
    auto [train, test] = generate_shortcut<float>(spec);
    REQUIRE(train.size() == 40);
    REQUIRE(test.size() == 20);
    REQUIRE(train.has_boxes());

    SECTION("same seed gives bitwise-identical datasets") {
        auto [t2, e2] = generate_shortcut<float>(spec);
        REQUIRE(bitwise_equal(train.images, t2.images));
        REQUIRE(bitwise_equal(test.images, e2.images));
        REQUIRE(train.labels == t2.labels);
        for (std::size_t i = 0; i < train.boxes.size(); ++i)
            REQUIRE(train.boxes[i][0] == t2.boxes[i][0]);
    }
    SECTION("pixels stay in [0,1] and labels valid") {
        for (std::size_t i = 0; i < train.images.numel(); ++i) {
            REQUIRE(train.images[i] >= 0.0f);
            REQUIRE(train.images[i] <= 1.0f);
        }
        train.validate();
        test.validate();
    }
}

TEST_CASE("ground-truth box exactly covers the object pixels") {
    SynthSpec spec;
    spec.noise = 0.0;
    spec.p_train = 0.0; // no patches: only object pixels are non-zero
    spec.train_n = 30;
    spec.test_n = 5;
    auto [train, test] = generate_shortcut<float>(spec);
    for (std::size_t i = 0; i < train.size(); ++i) {
        const float* img = train.images.data() + i * 32 * 32;
        std::size_t xmin = 32, ymin = 32, xmax = 0, ymax = 0;
        bool any = false;
        for (std::size_t y = 0; y < 32; ++y)
            for (std::size_t x = 0; x < 32; ++x)
                if (img[y * 32 + x] != 0.0f) {
                    any = true;
                    xmin = std::min(xmin, x);
                    ymin = std::min(ymin, y);
                    xmax = std::max(xmax, x + 1);
                    ymax = std::max(ymax, y + 1);
                }
        REQUIRE(any);
        REQUIRE(train.boxes[i][0] == BBox(xmin, ymin, xmax, ymax));
    }
}

TEST_CASE("p_train=0 removes the shortcut from both splits") {
    SynthSpec spec;
    spec.noise = 0.0;
    spec.p_train = 0.0;
    spec.train_n = 25;
    spec.test_n = 25;
    auto [train, test] = generate_shortcut<float>(spec);
    auto corner_free = [&](const Dataset<float>& ds) {
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const float* img = ds.images.data() + i * 32 * 32;
            // patch intensity 1.0 would show at a corner cell
            if (img[0] == 1.0f || img[31] == 1.0f || img[31 * 32] == 1.0f ||
                img[32 * 32 - 1] == 1.0f)
                return false;
        }
        return true;
    };
    REQUIRE(corner_free(train));
    REQUIRE(corner_free(test));
}

TEST_CASE("a patch-lookup rule aces training data and flips a coin on test") {
    SynthSpec spec; // defaults: p_train=1, p_test=0
    spec.train_n = 400;
    spec.test_n = 400;
    auto [train, test] = generate_shortcut<float>(spec);

    // rule: report the class whose corner holds a bright patch
    auto rule = [&](const Dataset<float>& ds, std::size_t i) -> std::size_t {
        const std::size_t W = 32, cs = spec.shortcut_size;
        const float* img = ds.images.data() + i * W * W;
        double best_mean = -1.0;
        std::size_t best_cls = 0;
        for (std::size_t cls = 0; cls < spec.class_count; ++cls) {
            const std::size_t corner = cls % 4;
            const std::size_t py = (corner / 2) ? W - cs : 0;
            const std::size_t px = (corner % 2) ? W - cs : 0;
            double mean = 0.0;
            for (std::size_t y = 0; y < cs; ++y)
                for (std::size_t x = 0; x < cs; ++x) mean += img[(py + y) * W + px + x];
            mean /= static_cast<double>(cs * cs);
            if (mean > best_mean) {
                best_mean = mean;
                best_cls = cls;
            }
        }
        return best_mean > 0.9 ? best_cls : 0;
    };

    std::size_t train_hits = 0, test_hits = 0;
    for (std::size_t i = 0; i < train.size(); ++i)
        if (rule(train, i) == train.labels[i]) ++train_hits;
    for (std::size_t i = 0; i < test.size(); ++i)
        if (rule(test, i) == test.labels[i]) ++test_hits;

    REQUIRE(train_hits == train.size()); // shortcut is perfectly predictive
    const double test_acc = static_cast<double>(test_hits) / static_cast<double>(test.size());
    REQUIRE(test_acc > 0.35); // ~chance for 2 classes
    REQUIRE(test_acc < 0.65);
}

TEST_CASE("epoch batching is a deterministic partition") {
    SECTION("single full batch is a permutation") {
        auto b = batches(12, 12, 5, 0);
        REQUIRE(b.size() == 1);
        std::set<std::size_t> seen(b[0].begin(), b[0].end());
        REQUIRE(seen.size() == 12);
    }
    SECTION("union of batches covers every index once") {
        auto b = batches(23, 5, 9, 3);
        REQUIRE(b.size() == 5);
        REQUIRE(b.back().size() == 3); // short final batch retained
        std::set<std::size_t> seen;
        for (auto& batch : b)
            for (auto i : batch) REQUIRE(seen.insert(i).second);
        REQUIRE(seen.size() == 23);
    }
    SECTION("same (seed, epoch) reproduces the order; epochs differ") {
        REQUIRE(batches(40, 7, 11, 2) == batches(40, 7, 11, 2));
        REQUIRE(batches(40, 7, 11, 2) != batches(40, 7, 11, 3));
    }
}

TEST_CASE("dataset directory round-trips bitwise") {
    SynthSpec spec;
    spec.train_n = 12;
    spec.test_n = 6;
    auto [train, test] = generate_shortcut<float>(spec);

    auto dir = temp_dir("roundtrip");
    save_dataset_dir((dir / "train").string(), train, spec.to_kv());
    auto loaded = load_dataset_dir<float>((dir / "train").string());
    REQUIRE(bitwise_equal(loaded.images, train.images));
    REQUIRE(loaded.labels == train.labels);
    REQUIRE(loaded.class_count == train.class_count);
    REQUIRE(loaded.split == "train");
    REQUIRE(loaded.boxes.size() == train.boxes.size());
    for (std::size_t i = 0; i < loaded.boxes.size(); ++i)
        REQUIRE(loaded.boxes[i][0] == train.boxes[i][0]);

    SECTION("re-saving produces byte-identical files") {
        save_dataset_dir((dir / "again").string(), loaded, spec.to_kv());
        for (const char* name : {"images.bin", "labels.bin", "boxes.csv", "meta.kv"}) {
            auto read = [](const fs::path& p) {
                std::ifstream f(p, std::ios::binary);
                return std::string((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
            };
            REQUIRE(read(dir / "train" / name) == read(dir / "again" / name));
        }
    }
    SECTION("corrupt payload size is rejected") {
        std::ofstream f(dir / "train" / "images.bin", std::ios::binary | std::ios::app);
        f.put('x');
        f.close();
        CHECK_THROWS_WITH(load_dataset_dir<float>((dir / "train").string()),
                          Catch::Matchers::ContainsSubstring("images.bin"));
    }
}

TEST_CASE("bilinear resize rescales images and boxes") {
    SynthSpec spec;
    spec.train_n = 4;
    spec.test_n = 2;
    spec.noise = 0.0;
    auto [train, test] = generate_shortcut<float>(spec);
    auto big = resized(train, 64);
    REQUIRE(big.chw() == Shape{1, 64, 64});
    REQUIRE(big.size() == 4);
    for (std::size_t i = 0; i < big.size(); ++i) {
        const BBox& a = train.boxes[i][0];
        const BBox& b = big.boxes[i][0];
        REQUIRE(b.x_min == a.x_min * 2);
        REQUIRE(b.y_min == a.y_min * 2);
    }
    big.validate();
}
