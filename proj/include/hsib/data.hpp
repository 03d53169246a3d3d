#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hsib/rng.hpp"
#include "hsib/tensor.hpp"

namespace hsib {

// Hyperspectral cube, band-sequential: sample(b,y,x) = data[(b*H + y)*W + x].
struct HsiCube {
    int64_t bands = 0, height = 0, width = 0;
    std::vector<float> data;

    float at(int64_t b, int64_t y, int64_t x) const {
        return data[(b * height + y) * width + x];
    }
    float& at(int64_t b, int64_t y, int64_t x) { return data[(b * height + y) * width + x]; }
    int64_t pixels() const { return height * width; }
    void validate() const;
};

// Per-pixel class ids; 0 marks unlabeled ground.
struct LabelRaster {
    int64_t height = 0, width = 0;
    int64_t classes = 0;  // max class id
    std::vector<uint16_t> ids;

    uint16_t at(int64_t y, int64_t x) const { return ids[y * width + x]; }
    int64_t labeled_count() const;
    void validate(const HsiCube& cube) const;
};

// 0 = ignore, 1 = train, 2 = test
struct SplitMask {
    int64_t height = 0, width = 0;
    std::vector<uint8_t> codes;

    uint8_t at(int64_t y, int64_t x) const { return codes[y * width + x]; }
    void validate(const LabelRaster& labels) const;
};

struct Dataset {
    std::string name;
    HsiCube cube;
    LabelRaster labels;
    std::optional<SplitMask> mask;
    std::vector<std::string> class_names;
};

// .hsij header + .hsib payload container
Dataset load_cube(const std::string& header_path);
void save_dataset(const Dataset& ds, const std::string& header_path);

HsiCube remove_bands(const HsiCube& cube, const std::vector<int64_t>& band_indices);
// the 24 water-absorption band indices (0-based) conventionally dropped from
// the 224-band Indian Pines cube, leaving 200
std::vector<int64_t> indian_pines_default_removed_bands();

struct Standardizer {
    std::vector<double> mean, stdev;  // per band
    bool fitted = false;
};

Standardizer standardize_fit(const HsiCube& cube, const LabelRaster* labeled_only = nullptr);
// fit over an explicit pixel selection (e.g. the train half of a split mask)
Standardizer standardize_fit_selected(const HsiCube& cube, const std::vector<uint8_t>& keep);
HsiCube standardize_apply(const HsiCube& cube, const Standardizer& s);

struct PcaModel {
    int64_t bands = 0;
    std::vector<double> mean;          // [B]
    std::vector<double> components;    // [k][B], row-orthonormal
    std::vector<double> eigenvalues;   // [k], non-increasing
    int64_t k() const { return static_cast<int64_t>(eigenvalues.size()); }
    void save(const std::string& path) const;
    static PcaModel load(const std::string& path);
};

// Covariance eigendecomposition via cyclic Jacobi rotations; components are
// sign-normalized so each row's largest-magnitude entry is positive.
PcaModel pca_fit(const std::vector<double>& pixels, int64_t n, int64_t bands, int64_t k);
PcaModel pca_fit_cube(const HsiCube& cube, int64_t k, const LabelRaster* labeled_only = nullptr);
PcaModel pca_fit_cube_selected(const HsiCube& cube, int64_t k, const std::vector<uint8_t>& keep);
HsiCube pca_transform(const HsiCube& cube, const PcaModel& model, int64_t k);

// symmetric eigensolver used by pca_fit (exposed for tests)
void jacobi_eigh(std::vector<double>& a, int64_t n, std::vector<double>& eigvals,
                 std::vector<double>& eigvecs, int max_sweeps = 100);

// Patches stay implicit: the set holds a reflect-padded copy of the cube and
// materializes [n,C,d,d] batches on demand.
struct PatchSet {
    int64_t channels = 0, d = 1;
    int64_t height = 0, width = 0;      // raster dims
    std::vector<float> padded;           // [C][H+2p][W+2p]
    std::vector<int32_t> ys, xs;         // source coords per patch
    std::vector<int64_t> labels;         // 0-based contiguous
    std::vector<uint16_t> raw_label_of;  // contiguous id -> original class id
    int64_t num_classes = 0;

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
    int64_t pad() const { return (d - 1) / 2; }

    // gather patches [n,C,d,d] for the given indices
    TensPtr<float> gather(const std::vector<int64_t>& idx) const;
    // center spectra [n,C]
    TensPtr<float> gather_spectra(const std::vector<int64_t>& idx) const;
    std::vector<int64_t> gather_labels(const std::vector<int64_t>& idx) const;

    PatchSet filtered(const std::vector<int64_t>& keep) const;
    // stratified subsample of about n patches, deterministic in rng
    PatchSet subsample(int64_t n, RngState& rng) const;
};

PatchSet extract_patches(const HsiCube& cube, const LabelRaster& labels, int64_t d);
PatchSet extract_patches_masked(const HsiCube& cube, const LabelRaster& labels,
                                const SplitMask& mask, uint8_t code, int64_t d);

SplitMask split_random(const LabelRaster& labels, double train_fraction, uint64_t seed);
SplitMask split_disjoint(const LabelRaster& labels, double train_fraction);

int64_t round_half_up(double x);

// ---------------------------------------------------------------------------
// Synthetic scenes. The public reference scenes ship as external containers;
// when they are absent the generator below produces deterministic stand-ins
// with the same geometry, band counts, class counts and labeled-pixel counts,
// spatially clustered classes and a smooth cross-scene drift field so that
// disjoint splits are measurably harder than random ones.
// ---------------------------------------------------------------------------

struct SynthSpec {
    std::string name = "ip-synth";
    int64_t bands = 224, height = 145, width = 145;
    int64_t classes = 16;
    int64_t labeled = 10249;
    double noise = 0.28;        // per-band sample noise
    double drift = 0.90;        // cross-scene drift amplitude
    double class_sep = 1.0;     // signature spread
    int sites_per_class = 2;    // spatial blobs per class
    std::vector<int64_t> noisy_bands;  // filled with junk (water-style bands)
    uint64_t seed = 77;

    static SynthSpec indian_pines_like();
    static SynthSpec pavia_like();
};

Dataset make_synthetic(const SynthSpec& spec);

}  // namespace hsib
