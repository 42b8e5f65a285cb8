#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "kspu/errors.hpp"
#include "kspu/rng.hpp"

// Synthetic multi-annotator segmentation data (LIDC-like at desk scale),
// bit-exact PGM + JSON container, and an ingestion path for externally
// preprocessed image/mask patches.
namespace kspu::data {

// One grayscale image with G >= 1 annotator masks. Image values in [0,1];
// masks are {0,1} in memory and {0,255} on disk.
struct SegSample {
    int height = 0, width = 0;
    std::vector<double> image;
    std::vector<std::vector<std::uint8_t>> masks;
    std::string id;
};

struct Dataset {
    int image_size = 0;
    int annotators = 0;
    std::uint64_t seed = 0;
    std::vector<SegSample> samples;
};

// ---- PGM (binary, 8-bit) -----------------------------------------------------

inline void write_pgm(const std::filesystem::path& path, int width, int height,
                      const std::vector<std::uint8_t>& bytes) {
    if (static_cast<int>(bytes.size()) != width * height)
        throw ShapeMismatch("write_pgm: byte count != width*height");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("write_pgm: cannot open " + path.string());
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write_pgm: write failed for " + path.string());
}

inline std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& width,
                                          int& height) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_pgm: cannot open " + path.string());
    auto next_token = [&in, &path]() {
        std::string tok;
        for (;;) {
            int c = in.get();
            if (c == EOF) throw IoError("read_pgm: truncated header in " + path.string());
            if (c == '#') {  // comment to end of line
                while (c != EOF && c != '\n') c = in.get();
                continue;
            }
            if (std::isspace(c)) {
                if (!tok.empty()) return tok;
                continue;
            }
            tok.push_back(static_cast<char>(c));
        }
    };
    if (next_token() != "P5") throw IoError("read_pgm: not a binary PGM: " + path.string());
    width = std::stoi(next_token());
    height = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (width <= 0 || height <= 0 || maxval != 255)
        throw IoError("read_pgm: unsupported header in " + path.string());
    std::vector<std::uint8_t> bytes(static_cast<size_t>(width) * height);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw IoError("read_pgm: truncated pixel data in " + path.string());
    return bytes;
}

// ---- synthetic generation -----------------------------------------------------

namespace detail {

struct BlobShape {
    double cx, cy, r0, aspect, exponent, rotation;
    double fourier_amp[4], fourier_phase[4];  // harmonics 2..5

    // True boundary radius at blob-frame angle theta.
    double radius(double theta) const {
        const double c = std::abs(std::cos(theta)) / r0;
        const double s = std::abs(std::sin(theta)) / (r0 * aspect);
        const double base = std::pow(std::pow(c, exponent) + std::pow(s, exponent),
                                     -1.0 / exponent);
        double bump = 0.0;
        for (int j = 0; j < 4; ++j)
            bump += fourier_amp[j] * std::cos((j + 2) * theta + fourier_phase[j]);
        return base * (1.0 + bump);
    }
};

// Smooth radial offset field of one annotator; |delta| <= 0.08 by
// construction (amplitude budget summing to 8% of the blob radius).
struct AnnotatorOffset {
    double amp[4], phase[4];

    double delta(double theta) const {
        double d = 0.0;
        for (int j = 0; j < 4; ++j) d += amp[j] * std::cos(j * theta + phase[j]);
        return d;
    }
};

inline std::vector<std::uint8_t> rasterize(const BlobShape& blob, int size,
                                           const AnnotatorOffset* offset) {
    std::vector<std::uint8_t> mask(static_cast<size_t>(size) * size, 0);
    for (int row = 0; row < size; ++row)
        for (int col = 0; col < size; ++col) {
            const double x = col - blob.cx, y = row - blob.cy;
            const double dist = std::hypot(x, y);
            const double theta = std::atan2(y, x) - blob.rotation;
            double r = blob.radius(theta);
            if (offset) r *= 1.0 + offset->delta(theta);
            if (dist <= r) mask[static_cast<size_t>(row) * size + col] = 1;
        }
    return mask;
}

inline SegSample generate_sample(int index, int image_size, int annotators,
                                 std::uint64_t master_seed) {
    Rng rng(derive_seed(master_seed, static_cast<std::uint64_t>(index)));

    BlobShape blob;
    blob.cx = rng.uniform(0.34, 0.66) * image_size;
    blob.cy = rng.uniform(0.34, 0.66) * image_size;
    blob.r0 = rng.uniform(0.13, 0.21) * image_size;
    blob.aspect = rng.uniform(0.6, 1.0);
    blob.exponent = rng.uniform(1.7, 3.5);
    blob.rotation = rng.uniform(0.0, 2.0 * M_PI);
    const double harmonic_budget[4] = {0.05, 0.04, 0.03, 0.02};
    for (int j = 0; j < 4; ++j) {
        blob.fourier_amp[j] = rng.uniform(-harmonic_budget[j], harmonic_budget[j]);
        blob.fourier_phase[j] = rng.uniform(0.0, 2.0 * M_PI);
    }

    const double inside = rng.uniform(0.6, 0.85);
    const double outside = rng.uniform(0.15, 0.4);

    struct Wave {
        double amp, fx, fy, phase;
    } waves[3];
    for (auto& w : waves) {
        w.amp = rng.uniform(0.0, 0.05);
        w.fx = rng.uniform(0.5, 3.0);
        w.fy = rng.uniform(0.5, 3.0);
        w.phase = rng.uniform(0.0, 2.0 * M_PI);
    }

    std::vector<AnnotatorOffset> offsets(annotators);
    const double offset_budget[4] = {0.02, 0.025, 0.02, 0.015};  // sums to 0.08
    for (auto& off : offsets)
        for (int j = 0; j < 4; ++j) {
            // Amplitudes bounded away from zero keep annotators visibly
            // distinct (pairwise IoU below ~0.98) within the 8% budget.
            const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
            off.amp[j] = sign * rng.uniform(0.35 * offset_budget[j], offset_budget[j]);
            off.phase[j] = rng.uniform(0.0, 2.0 * M_PI);
        }

    SegSample sample;
    sample.height = sample.width = image_size;
    const std::vector<std::uint8_t> truth = rasterize(blob, image_size, nullptr);
    sample.image.resize(truth.size());
    for (int row = 0; row < image_size; ++row)
        for (int col = 0; col < image_size; ++col) {
            const size_t p = static_cast<size_t>(row) * image_size + col;
            double v = truth[p] ? inside : outside;
            for (const auto& w : waves)
                v += w.amp * std::sin(2.0 * M_PI * (w.fx * col + w.fy * row) / image_size +
                                      w.phase);
            v += 0.05 * rng.normal();
            // Quantize to the on-disk 8-bit grid so the in-memory dataset and
            // a saved-then-loaded one are identical.
            v = std::clamp(v, 0.0, 1.0);
            sample.image[p] = std::round(v * 255.0) / 255.0;
        }
    for (int g = 0; g < annotators; ++g) {
        std::vector<std::uint8_t> mask = rasterize(blob, image_size, &offsets[g]);
        if (std::find(mask.begin(), mask.end(), 1) == mask.end())
            throw InvalidConfig("generate_sample: empty annotator mask (index " +
                                std::to_string(index) + ")");
        sample.masks.push_back(std::move(mask));
    }
    return sample;
}

inline std::string sample_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", index);
    return buf;
}

}  // namespace detail

// Deterministic synthetic dataset: one superellipse-with-Fourier-boundary
// blob per image, rendered with intensity contrast, background texture and
// Gaussian noise (sigma = 0.05); G annotator masks from independent smooth
// radial offsets. Each sample derives its own sub-seed, so the result is
// independent of the worker thread count.
inline Dataset generate_synthetic(int n_samples, int image_size, int annotators,
                                  std::uint64_t seed, int n_threads = 1) {
    if (n_samples < 1) throw InvalidConfig("generate_synthetic: n_samples must be >= 1");
    if (annotators < 1) throw InvalidConfig("generate_synthetic: annotators must be >= 1");
    if (image_size < 16 || image_size % 8 != 0)
        throw InvalidConfig("generate_synthetic: image_size must be >= 16 and divisible by 8");
    Dataset ds;
    ds.image_size = image_size;
    ds.annotators = annotators;
    ds.seed = seed;
    ds.samples.resize(n_samples);
    auto worker = [&](int begin, int step) {
        for (int i = begin; i < n_samples; i += step) {
            ds.samples[i] = detail::generate_sample(i, image_size, annotators, seed);
            ds.samples[i].id = detail::sample_id(i);
        }
    };
    n_threads = std::max(1, std::min(n_threads, n_samples));
    if (n_threads == 1) {
        worker(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker, t, n_threads);
        for (auto& th : pool) th.join();
    }
    return ds;
}

// ---- on-disk container ----------------------------------------------------------
//
// Directory layout: manifest.json; images img_{id}.pgm (binary PGM, P5,
// 8-bit); masks img_{id}_mask{g}.pgm (P5, values 0 or 255 only).

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["image_size"] = ds.image_size;
    manifest["annotators"] = ds.annotators;
    manifest["seed"] = ds.seed;
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& sample : ds.samples) {
        if (static_cast<int>(sample.masks.size()) != ds.annotators)
            throw InvalidConfig("save_dataset: sample " + sample.id +
                                " annotator count differs from dataset");
        ids.push_back(sample.id);
        std::vector<std::uint8_t> img(sample.image.size());
        for (size_t i = 0; i < img.size(); ++i)
            img[i] = static_cast<std::uint8_t>(
                std::lround(std::clamp(sample.image[i], 0.0, 1.0) * 255.0));
        write_pgm(dir / ("img_" + sample.id + ".pgm"), sample.width, sample.height, img);
        for (size_t g = 0; g < sample.masks.size(); ++g) {
            std::vector<std::uint8_t> m(sample.masks[g].size());
            for (size_t i = 0; i < m.size(); ++i) m[i] = sample.masks[g][i] ? 255 : 0;
            write_pgm(dir / ("img_" + sample.id + "_mask" + std::to_string(g) + ".pgm"),
                      sample.width, sample.height, m);
        }
    }
    manifest["samples"] = std::move(ids);
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("save_dataset: cannot write manifest in " + dir.string());
    out << manifest.dump(2) << "\n";
}

namespace detail {

inline std::vector<std::uint8_t> load_mask_file(const std::filesystem::path& file, int width,
                                                int height,
                                                const std::filesystem::path& image_file) {
    int w = 0, h = 0;
    std::vector<std::uint8_t> bytes = read_pgm(file, w, h);
    if (w != width || h != height)
        throw IoError("mask size mismatch: " + file.string() + " vs " + image_file.string());
    std::vector<std::uint8_t> mask(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) {
        if (bytes[i] != 0 && bytes[i] != 255)
            throw IoError("mask is not {0,255}-valued: " + file.string());
        mask[i] = bytes[i] ? 1 : 0;
    }
    return mask;
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const fs::path manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw IoError("load_dataset: cannot open " + manifest_path.string());
    nlohmann::json manifest = nlohmann::json::parse(in, nullptr, false);
    if (manifest.is_discarded())
        throw IoError("load_dataset: invalid JSON in " + manifest_path.string());
    if (manifest.value("version", 0) != 1)
        throw IoError("load_dataset: unsupported manifest version in " + manifest_path.string());

    Dataset ds;
    ds.image_size = manifest.at("image_size");
    ds.annotators = manifest.at("annotators");
    ds.seed = manifest.at("seed");
    for (const auto& id_json : manifest.at("samples")) {
        const std::string id = id_json;
        SegSample sample;
        sample.id = id;
        const fs::path img_path = dir / ("img_" + id + ".pgm");
        std::vector<std::uint8_t> img = read_pgm(img_path, sample.width, sample.height);
        if (sample.width != ds.image_size || sample.height != ds.image_size)
            throw IoError("load_dataset: image size differs from manifest: " + img_path.string());
        sample.image.resize(img.size());
        for (size_t i = 0; i < img.size(); ++i) sample.image[i] = img[i] / 255.0;
        for (int g = 0; g < ds.annotators; ++g) {
            const fs::path mask_path = dir / ("img_" + id + "_mask" + std::to_string(g) + ".pgm");
            sample.masks.push_back(
                detail::load_mask_file(mask_path, sample.width, sample.height, img_path));
        }
        ds.samples.push_back(std::move(sample));
    }
    return ds;
}

// Ingest externally preprocessed patches following the same naming
// convention (img_{id}.pgm plus img_{id}_mask{g}.pgm, g = 0,1,...), without
// requiring a manifest. Images are rescaled from 8-bit to [0,1] by /255.
inline Dataset import_external(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("import_external: not a directory: " + dir.string());
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("img_", 0) != 0 || entry.path().extension() != ".pgm") continue;
        if (name.find("_mask") != std::string::npos) continue;
        ids.push_back(name.substr(4, name.size() - 8));  // between "img_" and ".pgm"
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw IoError("import_external: no img_*.pgm files in " + dir.string());

    Dataset ds;
    for (const std::string& id : ids) {
        SegSample sample;
        sample.id = id;
        const fs::path img_path = dir / ("img_" + id + ".pgm");
        std::vector<std::uint8_t> img = read_pgm(img_path, sample.width, sample.height);
        sample.image.resize(img.size());
        for (size_t i = 0; i < img.size(); ++i) sample.image[i] = img[i] / 255.0;
        for (int g = 0;; ++g) {
            const fs::path mask_path = dir / ("img_" + id + "_mask" + std::to_string(g) + ".pgm");
            if (!fs::exists(mask_path)) break;
            sample.masks.push_back(
                detail::load_mask_file(mask_path, sample.width, sample.height, img_path));
        }
        if (sample.masks.empty())
            throw IoError("import_external: no masks for " + img_path.string());
        if (ds.samples.empty()) {
            ds.image_size = sample.width;
        } else if (sample.width != ds.image_size || sample.height != ds.image_size) {
            throw IoError("import_external: image size differs across samples: " +
                          img_path.string());
        }
        if (sample.width != sample.height)
            throw IoError("import_external: non-square image: " + img_path.string());
        ds.annotators = std::max(ds.annotators, static_cast<int>(sample.masks.size()));
        ds.samples.push_back(std::move(sample));
    }
    return ds;
}

}  // namespace kspu::data
