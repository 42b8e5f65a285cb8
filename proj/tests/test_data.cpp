#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "kspu/data.hpp"
#include "kspu/metrics.hpp"

using namespace kspu;
using namespace kspu::data;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

bool same_tree(const fs::path& a, const fs::path& b) {
    std::vector<std::string> names_a, names_b;
    for (const auto& e : fs::directory_iterator(a)) names_a.push_back(e.path().filename());
    for (const auto& e : fs::directory_iterator(b)) names_b.push_back(e.path().filename());
    std::sort(names_a.begin(), names_a.end());
    std::sort(names_b.begin(), names_b.end());
    if (names_a != names_b) return false;
    for (const auto& n : names_a)
        if (slurp(a / n) != slurp(b / n)) return false;
    return true;
}

}  // namespace

TEST_CASE("generate_synthetic: deterministic, thread-count independent") {
    const Dataset a = generate_synthetic(6, 32, 4, 123);
    const Dataset b = generate_synthetic(6, 32, 4, 123);
    const Dataset c = generate_synthetic(6, 32, 4, 123, /*n_threads=*/3);
    REQUIRE(a.samples.size() == 6);
    for (int i = 0; i < 6; ++i) {
        REQUIRE(a.samples[i].image == b.samples[i].image);
        REQUIRE(a.samples[i].masks == b.samples[i].masks);
        REQUIRE(a.samples[i].image == c.samples[i].image);
        REQUIRE(a.samples[i].masks == c.samples[i].masks);
    }
    const Dataset d = generate_synthetic(6, 32, 4, 124);
    REQUIRE(a.samples[0].image != d.samples[0].image);
}

TEST_CASE("generate_synthetic: sample structure and invariants") {
    const Dataset ds = generate_synthetic(10, 32, 4, 7);
    for (const auto& s : ds.samples) {
        REQUIRE(s.masks.size() == 4);
        REQUIRE(s.image.size() == 32u * 32u);
        for (double v : s.image) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
        for (const auto& m : s.masks) {
            int on = 0;
            for (auto v : m) {
                REQUIRE((v == 0 || v == 1));
                on += v;
            }
            REQUIRE(on > 0);  // nonempty lesion
        }
    }
    // Degenerate multi-annotator case.
    const Dataset single = generate_synthetic(2, 32, 1, 7);
    REQUIRE(single.samples[0].masks.size() == 1);
}

TEST_CASE("generate_synthetic: annotator agreement in the plausible band") {
    const Dataset ds = generate_synthetic(24, 64, 4, 11);
    double total = 0.0;
    int count = 0;
    for (const auto& s : ds.samples) {
        double pair_mean = 0.0;
        int pairs = 0;
        for (size_t i = 0; i < s.masks.size(); ++i)
            for (size_t j = i + 1; j < s.masks.size(); ++j) {
                pair_mean += metrics::iou(s.masks[i], s.masks[j]);
                ++pairs;
            }
        pair_mean /= pairs;
        REQUIRE(pair_mean > 0.6);
        REQUIRE(pair_mean < 0.98);
        total += pair_mean;
        ++count;
    }
    INFO("dataset mean pairwise IoU " << total / count);
}

TEST_CASE("generate_synthetic: config validation") {
    REQUIRE_THROWS_AS(generate_synthetic(0, 32, 4, 1), InvalidConfig);
    REQUIRE_THROWS_AS(generate_synthetic(4, 30, 4, 1), InvalidConfig);
    REQUIRE_THROWS_AS(generate_synthetic(4, 32, 0, 1), InvalidConfig);
}

TEST_CASE("save/load: byte-exact roundtrip") {
    const fs::path root = fs::temp_directory_path() / "kspu_data_test";
    fs::remove_all(root);
    const Dataset ds = generate_synthetic(5, 32, 3, 99);
    save_dataset(ds, root / "d1");
    const Dataset loaded = load_dataset(root / "d1");
    REQUIRE(loaded.image_size == 32);
    REQUIRE(loaded.annotators == 3);
    REQUIRE(loaded.seed == 99);
    REQUIRE(loaded.samples.size() == 5);
    for (int i = 0; i < 5; ++i) {
        REQUIRE(loaded.samples[i].id == ds.samples[i].id);
        REQUIRE(loaded.samples[i].image == ds.samples[i].image);  // 8-bit grid already
        REQUIRE(loaded.samples[i].masks == ds.samples[i].masks);
    }
    save_dataset(loaded, root / "d2");
    REQUIRE(same_tree(root / "d1", root / "d2"));

    // Manifest sample count matches the files on disk.
    int images = 0;
    for (const auto& e : fs::directory_iterator(root / "d1")) {
        const std::string n = e.path().filename();
        if (n.rfind("img_", 0) == 0 && n.find("_mask") == std::string::npos) ++images;
    }
    REQUIRE(images == 5);
    fs::remove_all(root);
}

TEST_CASE("load_dataset: missing mask file names the file") {
    const fs::path root = fs::temp_directory_path() / "kspu_data_missing";
    fs::remove_all(root);
    save_dataset(generate_synthetic(2, 32, 2, 5), root);
    fs::remove(root / "img_0001_mask1.pgm");
    try {
        load_dataset(root);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        REQUIRE(std::string(e.what()).find("img_0001_mask1.pgm") != std::string::npos);
    }
    fs::remove_all(root);
}

TEST_CASE("load_dataset: non-binary mask rejected") {
    const fs::path root = fs::temp_directory_path() / "kspu_data_graymask";
    fs::remove_all(root);
    save_dataset(generate_synthetic(1, 32, 1, 5), root);
    std::vector<std::uint8_t> gray(32 * 32, 127);
    write_pgm(root / "img_0000_mask0.pgm", 32, 32, gray);
    REQUIRE_THROWS_AS(load_dataset(root), IoError);
    fs::remove_all(root);
}

TEST_CASE("import_external: well-formed pairs, /255 rescale") {
    const fs::path root = fs::temp_directory_path() / "kspu_import";
    fs::remove_all(root);
    fs::create_directories(root);
    std::vector<std::uint8_t> img(16 * 16);
    for (size_t i = 0; i < img.size(); ++i) img[i] = static_cast<std::uint8_t>(i % 256);
    std::vector<std::uint8_t> mask(16 * 16, 0);
    for (int i = 0; i < 40; ++i) mask[i] = 255;
    write_pgm(root / "img_a.pgm", 16, 16, img);
    write_pgm(root / "img_a_mask0.pgm", 16, 16, mask);
    write_pgm(root / "img_a_mask1.pgm", 16, 16, mask);
    const Dataset ds = import_external(root);
    REQUIRE(ds.samples.size() == 1);
    REQUIRE(ds.samples[0].id == "a");
    REQUIRE(ds.samples[0].masks.size() == 2);
    REQUIRE(ds.samples[0].image[5] == Catch::Approx(5.0 / 255.0));
    REQUIRE(ds.samples[0].masks[0][0] == 1);
    fs::remove_all(root);
}

TEST_CASE("import_external: size mismatch names both files") {
    const fs::path root = fs::temp_directory_path() / "kspu_import_bad";
    fs::remove_all(root);
    fs::create_directories(root);
    write_pgm(root / "img_x.pgm", 16, 16, std::vector<std::uint8_t>(256, 10));
    write_pgm(root / "img_x_mask0.pgm", 8, 8, std::vector<std::uint8_t>(64, 255));
    try {
        import_external(root);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("img_x_mask0.pgm") != std::string::npos);
        REQUIRE(msg.find("img_x.pgm") != std::string::npos);
    }
    fs::remove_all(root);
}

TEST_CASE("metrics: IoU/Dice/GED2 edge cases") {
    using metrics::Mask;
    const Mask empty(16, 0);
    Mask a(16, 0), b(16, 0);
    for (int i = 0; i < 8; ++i) a[i] = 1;
    for (int i = 4; i < 12; ++i) b[i] = 1;
    REQUIRE(metrics::iou(a, a) == 1.0);
    REQUIRE(metrics::iou(empty, empty) == 1.0);  // both-empty convention
    REQUIRE(metrics::iou(a, empty) == 0.0);
    REQUIRE(metrics::iou(a, b) == Catch::Approx(4.0 / 12.0));
    REQUIRE(metrics::dice(a, b) == Catch::Approx(8.0 / 16.0));

    // Samples identical to the single ground truth: GED^2 = 0.
    REQUIRE(metrics::ged2({a, a, a}, {a}) == 0.0);
    // Disjoint prediction vs truth: distance 1.
    Mask c(16, 0);
    for (int i = 12; i < 16; ++i) c[i] = 1;
    REQUIRE(metrics::distance(a, c) == 1.0);
    REQUIRE(metrics::diversity({a, a}) == 0.0);
    REQUIRE(metrics::diversity({a, c}) == 1.0);
    REQUIRE(metrics::diversity({a}) == 0.0);
}
