#pragma once

// Synthetic "toy face" images. Class 1 carries a bright horizontal bar in the
// lower third; the bar rectangle is the causal mask for both classes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "maskdime/error.hpp"
#include "maskdime/persist.hpp"
#include "maskdime/rng.hpp"
#include "maskdime/tensor.hpp"

namespace maskdime::synth {

inline constexpr int kSize = 32;

struct DatasetSpec {
    int n_train = 4000;
    int n_eval = 512;
    std::uint64_t seed = 1;
    int bar_length = 16;
    int bar_row = 24;
    int jitter = 2;
    int thickness_min = 2, thickness_max = 3;
    double intensity_min = 0.6, intensity_max = 0.9;
    int blobs_min = 2, blobs_max = 4;
    double blob_amplitude = 0.3;
    double background = -0.2;
    double noise_sigma = 0.05;
};

struct Sample {
    std::string id;
    Tensor image;        // [1, 32, 32]
    int label = 0;
    Tensor causal_mask;  // [1, 32, 32], 0/1
};

struct Dataset {
    std::vector<Sample> train;
    std::vector<Sample> eval;
};

enum class Split : std::uint64_t { train = 0, eval = 1 };

/// Every pixel any bar placement can cover. A class-0 image carries no trace of
/// its drawn placement, so this union is its causal region.
inline Tensor bar_support(const DatasetSpec& spec) {
    Tensor m({1, kSize, kSize});
    for (int th = spec.thickness_min; th <= spec.thickness_max; ++th)
        for (int dy = -spec.jitter; dy <= spec.jitter; ++dy)
            for (int dx = -spec.jitter; dx <= spec.jitter; ++dx) {
                const int row0 = spec.bar_row - th / 2 + dy, col0 = (kSize - spec.bar_length) / 2 + dx;
                for (int y = row0; y < row0 + th; ++y)
                    for (int x = col0; x < col0 + spec.bar_length; ++x) m[static_cast<std::size_t>(y * kSize + x)] = 1.0f;
            }
    return m;
}

/// One sample, a pure function of (spec.seed, split, index).
inline Sample generate_sample(const DatasetSpec& spec, Split split, int index) {
    RngStream rng = RngStream(spec.seed).substream(
        {tag(StreamTag::dataset), static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(index)});
    Sample s;
    s.id = (split == Split::train ? "train_" : "eval_") + std::to_string(index);
    s.label = index % 2;

    std::vector<double> img(kSize * kSize, spec.background);

    const int n_blobs = rng.uniform_int(spec.blobs_min, spec.blobs_max);
    for (int b = 0; b < n_blobs; ++b) {
        const double cy = rng.uniform(0, kSize), cx = rng.uniform(0, kSize);
        const double sigma = rng.uniform(3.0, 7.0);
        const double amp = rng.uniform(-spec.blob_amplitude, spec.blob_amplitude);
        for (int y = 0; y < kSize; ++y)
            for (int x = 0; x < kSize; ++x) {
                const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                img[y * kSize + x] += amp * std::exp(-d2 / (2 * sigma * sigma));
            }
    }

    // Eyes: two dark spots with a little jitter.
    for (int e = 0; e < 2; ++e) {
        const double cy = 11 + rng.uniform(-1, 1), cx = (e ? 22 : 10) + rng.uniform(-1, 1);
        for (int y = 0; y < kSize; ++y)
            for (int x = 0; x < kSize; ++x) {
                const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                img[y * kSize + x] -= 0.5 * std::exp(-d2 / (2 * 1.5 * 1.5));
            }
    }

    // Bar geometry is drawn for both classes so the two classes consume the
    // stream identically.
    const int thickness = rng.uniform_int(spec.thickness_min, spec.thickness_max);
    const int row0 = spec.bar_row - thickness / 2 + rng.uniform_int(-spec.jitter, spec.jitter);
    const int col0 = (kSize - spec.bar_length) / 2 + rng.uniform_int(-spec.jitter, spec.jitter);
    const double intensity = rng.uniform(spec.intensity_min, spec.intensity_max);

    if (s.label == 1) {
        s.causal_mask = Tensor({1, kSize, kSize});
        for (int y = row0; y < row0 + thickness; ++y)
            for (int x = col0; x < col0 + spec.bar_length; ++x) {
                s.causal_mask[static_cast<std::size_t>(y * kSize + x)] = 1.0f;
                img[y * kSize + x] = intensity;
            }
    } else {
        s.causal_mask = bar_support(spec);
    }

    s.image = Tensor({1, kSize, kSize});
    for (int i = 0; i < kSize * kSize; ++i) {
        const double v = img[i] + spec.noise_sigma * rng.normal();
        s.image[static_cast<std::size_t>(i)] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
    return s;
}

inline std::vector<Sample> generate_split(const DatasetSpec& spec, Split split) {
    const int n = split == Split::train ? spec.n_train : spec.n_eval;
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(generate_sample(spec, split, i));
    return out;
}

inline Dataset generate(const DatasetSpec& spec) {
    if (spec.n_train <= 0 || spec.n_eval <= 0) throw ArgumentError("dataset counts must be positive");
    return {generate_split(spec, Split::train), generate_split(spec, Split::eval)};
}

/// Stacks images (or masks) into [N, 1, 32, 32].
inline Tensor stack_images(const std::vector<Sample>& samples, bool masks = false) {
    if (samples.empty()) throw ArgumentError("no samples to stack");
    const std::size_t plane = kSize * kSize;
    Tensor out({static_cast<int>(samples.size()), 1, kSize, kSize});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Tensor& src = masks ? samples[i].causal_mask : samples[i].image;
        std::copy(src.vec().begin(), src.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(i * plane));
    }
    return out;
}

// --- directory format ----------------------------------------------------------
//
// <dir>/manifest.tsv   id  split  label  image  mask
// <dir>/<id>.img.mdtf, <dir>/<id>.mask.mdtf

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    std::filesystem::create_directories(dir);
    std::ostringstream manifest;
    manifest << "id\tsplit\tlabel\timage\tmask\n";
    auto emit = [&](const std::vector<Sample>& v, const char* split) {
        for (const Sample& s : v) {
            const std::string img = s.id + ".img.mdtf", mask = s.id + ".mask.mdtf";
            persist::save_tensor(dir / img, s.image);
            persist::save_tensor(dir / mask, s.causal_mask);
            manifest << s.id << '\t' << split << '\t' << s.label << '\t' << img << '\t' << mask << '\n';
        }
    };
    emit(ds.train, "train");
    emit(ds.eval, "eval");
    persist::write_text_atomic(dir / "manifest.tsv", manifest.str());
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    std::istringstream in(std::string([&] {
        const persist::Bytes b = persist::read_file(dir / "manifest.tsv");
        return std::string(b.begin(), b.end());
    }()));
    std::string line;
    std::getline(in, line);
    if (line != "id\tsplit\tlabel\timage\tmask") throw FormatError("bad_manifest", "unexpected manifest header");
    Dataset ds;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string id, split, label, img, mask;
        if (!(std::getline(row, id, '\t') && std::getline(row, split, '\t') && std::getline(row, label, '\t') &&
              std::getline(row, img, '\t') && std::getline(row, mask)))
            throw FormatError("bad_manifest", "malformed manifest row: " + line);
        Sample s{id, persist::load_tensor(dir / img), std::stoi(label), persist::load_tensor(dir / mask)};
        if (s.image.shape() != Shape{1, kSize, kSize} || s.causal_mask.shape() != s.image.shape())
            throw ShapeError("dataset tensor " + id + " has shape " + to_string(s.image.shape()));
        (split == "train" ? ds.train : ds.eval).push_back(std::move(s));
    }
    return ds;
}

}  // namespace maskdime::synth
