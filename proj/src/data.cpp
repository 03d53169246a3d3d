#include "hsib/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hsib {

void HsiCube::validate() const {
    if (bands < 1 || height < 1 || width < 1) throw Error("cube: dims must be >= 1");
    if (static_cast<int64_t>(data.size()) != bands * height * width)
        throw Error("cube: sample count " + std::to_string(data.size()) + " does not equal " +
                    std::to_string(bands * height * width));
    for (float v : data)
        if (!std::isfinite(v)) throw Error("cube: non-finite sample");
}

int64_t LabelRaster::labeled_count() const {
    int64_t n = 0;
    for (uint16_t v : ids)
        if (v) ++n;
    return n;
}

void LabelRaster::validate(const HsiCube& cube) const {
    if (height != cube.height || width != cube.width)
        throw Error("labels: raster dims do not match cube");
    if (static_cast<int64_t>(ids.size()) != height * width) throw Error("labels: bad length");
    int64_t nz = 0;
    for (uint16_t v : ids) {
        if (v > classes)
            throw Error("labels: class id " + std::to_string(v) + " exceeds declared classes " +
                        std::to_string(classes));
        if (v) ++nz;
    }
    if (nz == 0) throw Error("labels: no labeled pixels");
}

void SplitMask::validate(const LabelRaster& labels) const {
    if (height != labels.height || width != labels.width)
        throw Error("mask: dims do not match labels");
    for (int64_t i = 0; i < height * width; ++i) {
        if (codes[i] > 2) throw Error("mask: invalid code " + std::to_string(codes[i]));
        if (codes[i] != 0 && labels.ids[i] == 0)
            throw Error("mask: split code on an unlabeled pixel");
    }
}

// ---------------------------------------------------------------------------
// container IO
// ---------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_all(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open file: " + path);
    f.seekg(0, std::ios::end);
    auto len = static_cast<size_t>(f.tellg());
    f.seekg(0);
    std::vector<unsigned char> buf(len);
    if (len) f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(len));
    if (!f) throw Error("short read: " + path);
    return buf;
}

void write_all(const std::string& path, const void* data, size_t len) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write file: " + path);
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(len));
    if (!f) throw Error("write failed: " + path);
}

}  // namespace

Dataset load_cube(const std::string& header_path) {
    std::ifstream hf(header_path);
    if (!hf) throw Error("cannot open header: " + header_path);
    json h;
    try {
        hf >> h;
    } catch (const std::exception& e) {
        throw Error("header parse error in " + header_path + ": " + e.what());
    }
    if (!h.contains("magic") || h["magic"] != "HSIC1")
        throw Error("bad magic in " + header_path + " (want HSIC1)");
    for (const char* key : {"bands", "height", "width", "classes", "dtype", "layout", "labels_file"})
        if (!h.contains(key)) throw Error(std::string("header missing field '") + key + "'");
    if (h["dtype"] != "f32le") throw Error("unsupported dtype: " + h["dtype"].get<std::string>());
    if (h["layout"] != "bsq") throw Error("unsupported layout: " + h["layout"].get<std::string>());

    Dataset ds;
    ds.cube.bands = h["bands"].get<int64_t>();
    ds.cube.height = h["height"].get<int64_t>();
    ds.cube.width = h["width"].get<int64_t>();
    ds.labels.classes = h["classes"].get<int64_t>();
    ds.name = h.value("name", fs::path(header_path).stem().string());
    if (h.contains("class_names")) ds.class_names = h["class_names"].get<std::vector<std::string>>();

    fs::path dir = fs::path(header_path).parent_path();
    fs::path data_path = fs::path(header_path);
    data_path.replace_extension(".hsib");
    if (h.contains("data_file")) data_path = dir / h["data_file"].get<std::string>();

    auto raw = read_all(data_path.string());
    const int64_t want = 4 * ds.cube.bands * ds.cube.height * ds.cube.width;
    if (static_cast<int64_t>(raw.size()) != want)
        throw Error("payload length mismatch for " + data_path.string() + ": expected " +
                    std::to_string(want) + " bytes, found " + std::to_string(raw.size()));
    ds.cube.data.resize(static_cast<size_t>(want / 4));
    std::memcpy(ds.cube.data.data(), raw.data(), raw.size());
    ds.cube.validate();

    fs::path labels_path = dir / h["labels_file"].get<std::string>();
    auto lraw = read_all(labels_path.string());
    const int64_t lwant = 2 * ds.cube.height * ds.cube.width;
    if (static_cast<int64_t>(lraw.size()) != lwant)
        throw Error("labels length mismatch for " + labels_path.string() + ": expected " +
                    std::to_string(lwant) + " bytes, found " + std::to_string(lraw.size()));
    ds.labels.height = ds.cube.height;
    ds.labels.width = ds.cube.width;
    ds.labels.ids.resize(static_cast<size_t>(lwant / 2));
    std::memcpy(ds.labels.ids.data(), lraw.data(), lraw.size());
    ds.labels.validate(ds.cube);

    if (h.contains("mask_file") && !h["mask_file"].is_null()) {
        fs::path mask_path = dir / h["mask_file"].get<std::string>();
        auto mraw = read_all(mask_path.string());
        const int64_t mwant = ds.cube.height * ds.cube.width;
        if (static_cast<int64_t>(mraw.size()) != mwant)
            throw Error("mask length mismatch for " + mask_path.string() + ": expected " +
                        std::to_string(mwant) + " bytes, found " + std::to_string(mraw.size()));
        SplitMask m;
        m.height = ds.cube.height;
        m.width = ds.cube.width;
        m.codes.assign(mraw.begin(), mraw.end());
        m.validate(ds.labels);
        ds.mask = std::move(m);
    }
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& header_path) {
    fs::path hp(header_path);
    fs::path dir = hp.parent_path();
    if (!dir.empty()) fs::create_directories(dir);
    std::string stem = hp.stem().string();

    json h;
    h["magic"] = "HSIC1";
    h["name"] = ds.name;
    h["bands"] = ds.cube.bands;
    h["height"] = ds.cube.height;
    h["width"] = ds.cube.width;
    h["classes"] = ds.labels.classes;
    h["class_names"] = ds.class_names;
    h["dtype"] = "f32le";
    h["layout"] = "bsq";
    h["data_file"] = stem + ".hsib";
    h["labels_file"] = stem + ".labels";
    if (ds.mask) h["mask_file"] = stem + ".mask";

    std::ofstream hf(header_path);
    if (!hf) throw Error("cannot write header: " + header_path);
    hf << h.dump(2) << "\n";

    write_all((dir / (stem + ".hsib")).string(), ds.cube.data.data(), ds.cube.data.size() * 4);
    write_all((dir / (stem + ".labels")).string(), ds.labels.ids.data(), ds.labels.ids.size() * 2);
    if (ds.mask)
        write_all((dir / (stem + ".mask")).string(), ds.mask->codes.data(),
                  ds.mask->codes.size());
}

// ---------------------------------------------------------------------------
// cleaning / transformation
// ---------------------------------------------------------------------------

HsiCube remove_bands(const HsiCube& cube, const std::vector<int64_t>& band_indices) {
    std::set<int64_t> drop;
    for (int64_t b : band_indices) {
        if (b < 0 || b >= cube.bands)
            throw Error("remove_bands: index " + std::to_string(b) + " out of range");
        if (!drop.insert(b).second)
            throw Error("remove_bands: duplicate index " + std::to_string(b));
    }
    HsiCube out;
    out.height = cube.height;
    out.width = cube.width;
    out.bands = cube.bands - static_cast<int64_t>(drop.size());
    if (out.bands < 1) throw Error("remove_bands: all bands removed");
    out.data.reserve(static_cast<size_t>(out.bands * cube.height * cube.width));
    const int64_t plane = cube.height * cube.width;
    for (int64_t b = 0; b < cube.bands; ++b) {
        if (drop.count(b)) continue;
        out.data.insert(out.data.end(), cube.data.begin() + b * plane,
                        cube.data.begin() + (b + 1) * plane);
    }
    return out;
}

std::vector<int64_t> indian_pines_default_removed_bands() {
    // 1-based ranges 104-108, 150-163, 220-224
    std::vector<int64_t> v;
    for (int64_t b = 103; b <= 107; ++b) v.push_back(b);
    for (int64_t b = 149; b <= 162; ++b) v.push_back(b);
    for (int64_t b = 219; b <= 223; ++b) v.push_back(b);
    return v;
}

Standardizer standardize_fit_selected(const HsiCube& cube, const std::vector<uint8_t>& keep) {
    if (static_cast<int64_t>(keep.size()) != cube.pixels())
        throw Error("standardize_fit_selected: selection size mismatch");
    Standardizer s;
    s.mean.assign(static_cast<size_t>(cube.bands), 0.0);
    s.stdev.assign(static_cast<size_t>(cube.bands), 0.0);
    const int64_t plane = cube.height * cube.width;
    for (int64_t b = 0; b < cube.bands; ++b) {
        double sum = 0, sumsq = 0;
        int64_t n = 0;
        for (int64_t i = 0; i < plane; ++i) {
            if (!keep[i]) continue;
            double v = cube.data[b * plane + i];
            sum += v;
            sumsq += v * v;
            ++n;
        }
        if (n == 0) throw Error("standardize_fit_selected: empty selection");
        double mu = sum / n;
        s.mean[b] = mu;
        s.stdev[b] = std::sqrt(std::max(0.0, sumsq / n - mu * mu));
    }
    s.fitted = true;
    return s;
}

Standardizer standardize_fit(const HsiCube& cube, const LabelRaster* labeled_only) {
    Standardizer s;
    s.mean.assign(static_cast<size_t>(cube.bands), 0.0);
    s.stdev.assign(static_cast<size_t>(cube.bands), 0.0);
    const int64_t plane = cube.height * cube.width;
    for (int64_t b = 0; b < cube.bands; ++b) {
        double sum = 0, sumsq = 0;
        int64_t n = 0;
        for (int64_t i = 0; i < plane; ++i) {
            if (labeled_only && labeled_only->ids[i] == 0) continue;
            double v = cube.data[b * plane + i];
            sum += v;
            sumsq += v * v;
            ++n;
        }
        if (n == 0) throw Error("standardize_fit: no pixels selected");
        double mu = sum / n;
        double var = std::max(0.0, sumsq / n - mu * mu);  // population variance
        s.mean[b] = mu;
        s.stdev[b] = std::sqrt(var);
    }
    s.fitted = true;
    return s;
}

HsiCube standardize_apply(const HsiCube& cube, const Standardizer& s) {
    if (!s.fitted) throw Error("standardize_apply: standardizer not fitted");
    if (static_cast<int64_t>(s.mean.size()) != cube.bands)
        throw Error("standardize_apply: band count mismatch");
    HsiCube out = cube;
    const int64_t plane = cube.height * cube.width;
    for (int64_t b = 0; b < cube.bands; ++b) {
        const double mu = s.mean[b], sd = s.stdev[b];
        float* p = out.data.data() + b * plane;
        if (sd < 1e-8) {
            // degenerate band: output zero rather than dividing by ~0
            std::fill(p, p + plane, 0.0f);
        } else {
            for (int64_t i = 0; i < plane; ++i)
                p[i] = static_cast<float>((p[i] - mu) / sd);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

void jacobi_eigh(std::vector<double>& a, int64_t n, std::vector<double>& eigvals,
                 std::vector<double>& eigvecs, int max_sweeps) {
    eigvecs.assign(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) eigvecs[i * n + i] = 1.0;

    double trace = 0;
    for (int64_t i = 0; i < n; ++i) trace += std::abs(a[i * n + i]);
    const double tol = 1e-10 * std::max(trace, 1e-300);

    auto offdiag = [&]() {
        double s = 0;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i + 1; j < n; ++j) s += a[i * n + j] * a[i * n + j];
        return std::sqrt(2.0 * s);
    };

    int sweep = 0;
    while (offdiag() > tol) {
        if (++sweep > max_sweeps) throw Error("jacobi_eigh: no convergence after max sweeps");
        for (int64_t p = 0; p < n - 1; ++p)
            for (int64_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (apq == 0.0) continue;
                const double app = a[p * n + p], aqq = a[q * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double vkp = eigvecs[k * n + p], vkq = eigvecs[k * n + q];
                    eigvecs[k * n + p] = c * vkp - s * vkq;
                    eigvecs[k * n + q] = s * vkp + c * vkq;
                }
            }
    }
    eigvals.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) eigvals[i] = a[i * n + i];
}

PcaModel pca_fit(const std::vector<double>& pixels, int64_t n, int64_t bands, int64_t k) {
    if (n < 2) throw Error("pca_fit: need at least 2 samples");
    if (k < 1 || k > bands) throw Error("pca_fit: k out of range");
    if (static_cast<int64_t>(pixels.size()) != n * bands) throw Error("pca_fit: bad matrix size");

    PcaModel m;
    m.bands = bands;
    m.mean.assign(static_cast<size_t>(bands), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t b = 0; b < bands; ++b) m.mean[b] += pixels[i * bands + b];
    for (auto& v : m.mean) v /= n;

    std::vector<double> cov(static_cast<size_t>(bands * bands), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        const double* row = pixels.data() + i * bands;
        for (int64_t a = 0; a < bands; ++a) {
            const double da = row[a] - m.mean[a];
            for (int64_t b = a; b < bands; ++b) cov[a * bands + b] += da * (row[b] - m.mean[b]);
        }
    }
    for (int64_t a = 0; a < bands; ++a)
        for (int64_t b = a; b < bands; ++b) {
            cov[a * bands + b] /= n;
            cov[b * bands + a] = cov[a * bands + b];
        }

    std::vector<double> eigvals, eigvecs;
    jacobi_eigh(cov, bands, eigvals, eigvecs);

    std::vector<int64_t> order(static_cast<size_t>(bands));
    for (int64_t i = 0; i < bands; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t a, int64_t b) { return eigvals[a] > eigvals[b]; });

    m.eigenvalues.resize(static_cast<size_t>(k));
    m.components.assign(static_cast<size_t>(k * bands), 0.0);
    for (int64_t c = 0; c < k; ++c) {
        const int64_t src = order[c];
        m.eigenvalues[c] = eigvals[src];
        // column src of eigvecs is the eigenvector
        double best = 0;
        int64_t besti = 0;
        for (int64_t b = 0; b < bands; ++b) {
            const double v = eigvecs[b * bands + src];
            m.components[c * bands + b] = v;
            if (std::abs(v) > std::abs(best)) {
                best = v;
                besti = b;
            }
        }
        (void)besti;
        if (best < 0)
            for (int64_t b = 0; b < bands; ++b) m.components[c * bands + b] = -m.components[c * bands + b];
    }
    return m;
}

PcaModel pca_fit_cube_selected(const HsiCube& cube, int64_t k, const std::vector<uint8_t>& keep) {
    if (static_cast<int64_t>(keep.size()) != cube.pixels())
        throw Error("pca_fit_cube_selected: selection size mismatch");
    const int64_t plane = cube.height * cube.width;
    int64_t n = 0;
    for (int64_t i = 0; i < plane; ++i)
        if (keep[i]) ++n;
    std::vector<double> px(static_cast<size_t>(n * cube.bands));
    int64_t row = 0;
    for (int64_t i = 0; i < plane; ++i) {
        if (!keep[i]) continue;
        for (int64_t b = 0; b < cube.bands; ++b) px[row * cube.bands + b] = cube.data[b * plane + i];
        ++row;
    }
    return pca_fit(px, n, cube.bands, k);
}

PcaModel pca_fit_cube(const HsiCube& cube, int64_t k, const LabelRaster* labeled_only) {
    const int64_t plane = cube.height * cube.width;
    int64_t n = 0;
    for (int64_t i = 0; i < plane; ++i)
        if (!labeled_only || labeled_only->ids[i]) ++n;
    std::vector<double> px(static_cast<size_t>(n * cube.bands));
    int64_t row = 0;
    for (int64_t i = 0; i < plane; ++i) {
        if (labeled_only && labeled_only->ids[i] == 0) continue;
        for (int64_t b = 0; b < cube.bands; ++b) px[row * cube.bands + b] = cube.data[b * plane + i];
        ++row;
    }
    return pca_fit(px, n, cube.bands, k);
}

HsiCube pca_transform(const HsiCube& cube, const PcaModel& model, int64_t k) {
    if (model.bands != cube.bands)
        throw Error("pca_transform: cube has " + std::to_string(cube.bands) +
                    " bands but model was fitted on " + std::to_string(model.bands));
    if (k < 1 || k > model.k()) throw Error("pca_transform: k exceeds fitted components");
    HsiCube out;
    out.bands = k;
    out.height = cube.height;
    out.width = cube.width;
    const int64_t plane = cube.height * cube.width;
    out.data.assign(static_cast<size_t>(k * plane), 0.0f);
    std::vector<double> centered(static_cast<size_t>(cube.bands));
    for (int64_t i = 0; i < plane; ++i) {
        for (int64_t b = 0; b < cube.bands; ++b)
            centered[b] = cube.data[b * plane + i] - model.mean[b];
        for (int64_t c = 0; c < k; ++c) {
            double s = 0;
            const double* comp = model.components.data() + c * cube.bands;
            for (int64_t b = 0; b < cube.bands; ++b) s += comp[b] * centered[b];
            out.data[c * plane + i] = static_cast<float>(s);
        }
    }
    return out;
}

void PcaModel::save(const std::string& path) const {
    json j;
    j["bands"] = bands;
    j["mean"] = mean;
    j["components"] = components;
    j["eigenvalues"] = eigenvalues;
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path);
    f << j.dump() << "\n";
}

PcaModel PcaModel::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open " + path);
    json j;
    f >> j;
    PcaModel m;
    m.bands = j["bands"].get<int64_t>();
    m.mean = j["mean"].get<std::vector<double>>();
    m.components = j["components"].get<std::vector<double>>();
    m.eigenvalues = j["eigenvalues"].get<std::vector<double>>();
    return m;
}

// ---------------------------------------------------------------------------
// patches
// ---------------------------------------------------------------------------

namespace {

// reflect about the border pixel (edge itself not duplicated)
inline int64_t reflect_idx(int64_t i, int64_t n) {
    if (n == 1) return 0;
    const int64_t period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

PatchSet extract_impl(const HsiCube& cube, const LabelRaster& labels, const SplitMask* mask,
                      uint8_t code, int64_t d) {
    if (d < 1 || d % 2 == 0) throw Error("extract_patches: patch size must be odd");
    labels.validate(cube);
    PatchSet ps;
    ps.channels = cube.bands;
    ps.d = d;
    ps.height = cube.height;
    ps.width = cube.width;

    const int64_t p = (d - 1) / 2;
    const int64_t PH = cube.height + 2 * p, PW = cube.width + 2 * p;
    ps.padded.assign(static_cast<size_t>(cube.bands * PH * PW), 0.0f);
    for (int64_t b = 0; b < cube.bands; ++b)
        for (int64_t y = 0; y < PH; ++y) {
            const int64_t sy = reflect_idx(y - p, cube.height);
            for (int64_t x = 0; x < PW; ++x) {
                const int64_t sx = reflect_idx(x - p, cube.width);
                ps.padded[(b * PH + y) * PW + x] = cube.at(b, sy, sx);
            }
        }

    // contiguous 0-based remap of the class ids actually present
    std::set<uint16_t> present;
    for (int64_t i = 0; i < cube.pixels(); ++i)
        if (labels.ids[i]) present.insert(labels.ids[i]);
    std::map<uint16_t, int64_t> remap;
    for (uint16_t c : present) {
        remap[c] = static_cast<int64_t>(ps.raw_label_of.size());
        ps.raw_label_of.push_back(c);
    }
    ps.num_classes = static_cast<int64_t>(present.size());

    for (int64_t y = 0; y < cube.height; ++y)
        for (int64_t x = 0; x < cube.width; ++x) {
            const uint16_t lab = labels.at(y, x);
            if (!lab) continue;
            if (mask && mask->at(y, x) != code) continue;
            ps.ys.push_back(static_cast<int32_t>(y));
            ps.xs.push_back(static_cast<int32_t>(x));
            ps.labels.push_back(remap.at(lab));
        }
    return ps;
}

}  // namespace

PatchSet extract_patches(const HsiCube& cube, const LabelRaster& labels, int64_t d) {
    return extract_impl(cube, labels, nullptr, 0, d);
}

PatchSet extract_patches_masked(const HsiCube& cube, const LabelRaster& labels,
                                const SplitMask& mask, uint8_t code, int64_t d) {
    mask.validate(labels);
    return extract_impl(cube, labels, &mask, code, d);
}

TensPtr<float> PatchSet::gather(const std::vector<int64_t>& idx) const {
    const int64_t n = static_cast<int64_t>(idx.size());
    const int64_t p = pad();
    const int64_t PH = height + 2 * p, PW = width + 2 * p;
    auto out = tensor<float>({n, channels, d, d});
    float* dst = out->data.data();
    for (int64_t i = 0; i < n; ++i) {
        const int64_t id = idx[i];
        const int64_t cy = ys[id], cx = xs[id];  // padded top-left = raster coords
        for (int64_t c = 0; c < channels; ++c)
            for (int64_t dy = 0; dy < d; ++dy) {
                const float* src = padded.data() + (c * PH + cy + dy) * PW + cx;
                std::memcpy(dst + ((i * channels + c) * d + dy) * d, src,
                            sizeof(float) * static_cast<size_t>(d));
            }
    }
    return out;
}

TensPtr<float> PatchSet::gather_spectra(const std::vector<int64_t>& idx) const {
    const int64_t n = static_cast<int64_t>(idx.size());
    const int64_t p = pad();
    const int64_t PH = height + 2 * p, PW = width + 2 * p;
    auto out = tensor<float>({n, channels});
    for (int64_t i = 0; i < n; ++i) {
        const int64_t id = idx[i];
        const int64_t cy = ys[id] + p, cx = xs[id] + p;
        for (int64_t c = 0; c < channels; ++c)
            out->data[i * channels + c] = padded[(c * PH + cy) * PW + cx];
    }
    return out;
}

std::vector<int64_t> PatchSet::gather_labels(const std::vector<int64_t>& idx) const {
    std::vector<int64_t> out(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
    return out;
}

PatchSet PatchSet::filtered(const std::vector<int64_t>& keep) const {
    PatchSet out = *this;
    out.ys.clear();
    out.xs.clear();
    out.labels.clear();
    for (int64_t i : keep) {
        out.ys.push_back(ys[i]);
        out.xs.push_back(xs[i]);
        out.labels.push_back(labels[i]);
    }
    return out;
}

PatchSet PatchSet::subsample(int64_t n, RngState& rng) const {
    if (n >= size()) return *this;
    // per-class proportional take, at least 1 each
    std::vector<std::vector<int64_t>> byclass(static_cast<size_t>(num_classes));
    for (int64_t i = 0; i < size(); ++i) byclass[labels[i]].push_back(i);
    std::vector<int64_t> keep;
    for (auto& lst : byclass) {
        if (lst.empty()) continue;
        rng.shuffle(lst);
        int64_t take = std::max<int64_t>(1, round_half_up(static_cast<double>(n) * lst.size() / size()));
        take = std::min<int64_t>(take, static_cast<int64_t>(lst.size()));
        keep.insert(keep.end(), lst.begin(), lst.begin() + take);
    }
    std::sort(keep.begin(), keep.end());
    return filtered(keep);
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

int64_t round_half_up(double x) { return static_cast<int64_t>(std::floor(x + 0.5)); }

namespace {

std::vector<std::vector<int64_t>> pixels_by_class(const LabelRaster& labels) {
    std::vector<std::vector<int64_t>> out(static_cast<size_t>(labels.classes + 1));
    for (int64_t i = 0; i < labels.height * labels.width; ++i)
        if (labels.ids[i]) out[labels.ids[i]].push_back(i);
    return out;
}

}  // namespace

SplitMask split_random(const LabelRaster& labels, double train_fraction, uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw Error("split_random: fraction must be in (0,1)");
    SplitMask m;
    m.height = labels.height;
    m.width = labels.width;
    m.codes.assign(static_cast<size_t>(labels.height * labels.width), 0);
    RngState rng(seed);
    auto byclass = pixels_by_class(labels);
    for (size_t c = 1; c < byclass.size(); ++c) {
        auto& px = byclass[c];
        if (px.empty()) continue;
        if (px.size() < 2)
            throw Error("split_random: class " + std::to_string(c) +
                        " has fewer than 2 labeled pixels");
        rng.shuffle(px);
        int64_t ntrain = std::max<int64_t>(1, round_half_up(train_fraction * px.size()));
        if (ntrain >= static_cast<int64_t>(px.size())) ntrain = static_cast<int64_t>(px.size()) - 1;
        for (size_t i = 0; i < px.size(); ++i)
            m.codes[px[i]] = i < static_cast<size_t>(ntrain) ? 1 : 2;
    }
    return m;
}

SplitMask split_disjoint(const LabelRaster& labels, double train_fraction) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw Error("split_disjoint: fraction must be in (0,1)");
    SplitMask m;
    m.height = labels.height;
    m.width = labels.width;
    m.codes.assign(static_cast<size_t>(labels.height * labels.width), 0);
    auto byclass = pixels_by_class(labels);
    for (size_t c = 1; c < byclass.size(); ++c) {
        auto& px = byclass[c];  // already row-major ascending
        if (px.empty()) continue;
        if (px.size() < 2)
            throw Error("split_disjoint: class " + std::to_string(c) +
                        " has fewer than 2 labeled pixels");
        int64_t ntrain = std::max<int64_t>(1, round_half_up(train_fraction * px.size()));
        if (ntrain >= static_cast<int64_t>(px.size())) ntrain = static_cast<int64_t>(px.size()) - 1;
        for (size_t i = 0; i < px.size(); ++i)
            m.codes[px[i]] = i < static_cast<size_t>(ntrain) ? 1 : 2;
    }
    return m;
}

// ---------------------------------------------------------------------------
// synthetic scenes
// ---------------------------------------------------------------------------

SynthSpec SynthSpec::indian_pines_like() {
    SynthSpec s;
    s.name = "ip-synth";
    s.bands = 224;
    s.height = 145;
    s.width = 145;
    s.classes = 16;
    s.labeled = 10249;
    s.noise = 0.28;
    s.drift = 0.90;
    s.noisy_bands = indian_pines_default_removed_bands();
    s.seed = 77;
    return s;
}

SynthSpec SynthSpec::pavia_like() {
    SynthSpec s;
    s.name = "up-synth";
    s.bands = 103;
    s.height = 610;
    s.width = 340;
    s.classes = 9;
    s.labeled = 42776;
    s.noisy_bands.clear();
    s.seed = 101;
    s.noise = 0.28;
    s.drift = 2.3;
    return s;
}

Dataset make_synthetic(const SynthSpec& spec) {
    RngState rng(spec.seed);
    const int64_t B = spec.bands, H = spec.height, W = spec.width, C = spec.classes;
    const int64_t plane = H * W;

    // class regions: nearest seeded site wins; a few sites per class
    const int sites_per_class = spec.sites_per_class;
    std::vector<double> site_y, site_x;
    std::vector<int64_t> site_class;
    for (int64_t c = 0; c < C; ++c)
        for (int s = 0; s < sites_per_class; ++s) {
            site_y.push_back(rng.uniform() * H);
            site_x.push_back(rng.uniform() * W);
            site_class.push_back(c);
        }

    std::vector<int64_t> region(static_cast<size_t>(plane));
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double best = 1e300;
            int64_t bc = 0;
            for (size_t s = 0; s < site_y.size(); ++s) {
                double dy = y - site_y[s], dx = x - site_x[s];
                double d2 = dy * dy + dx * dx;
                if (d2 < best) {
                    best = d2;
                    bc = site_class[s];
                }
            }
            region[y * W + x] = bc;
        }

    // labeled blobs: keep pixels whose hash passes a density gate, then trim
    // or grow deterministically to the exact labeled count
    std::vector<uint8_t> labeled(static_cast<size_t>(plane), 0);
    const double density = std::min(0.95, static_cast<double>(spec.labeled) / plane * 1.35);
    std::vector<int64_t> order(static_cast<size_t>(plane));
    for (int64_t i = 0; i < plane; ++i) order[i] = i;
    rng.shuffle(order);
    int64_t count = 0;
    for (int64_t i : order) {
        if (count >= spec.labeled) break;
        if (rng.uniform() < density) {
            labeled[i] = 1;
            ++count;
        }
    }
    for (int64_t i : order) {
        if (count >= spec.labeled) break;
        if (!labeled[i]) {
            labeled[i] = 1;
            ++count;
        }
    }

    LabelRaster labels;
    labels.height = H;
    labels.width = W;
    labels.classes = C;
    labels.ids.assign(static_cast<size_t>(plane), 0);
    for (int64_t i = 0; i < plane; ++i)
        if (labeled[i]) labels.ids[i] = static_cast<uint16_t>(region[i] + 1);

    // every class must end up with a usable population; swap labeled pixels
    // from the largest class into starved ones, keeping the total exact
    {
        const int64_t min_per_class = 30;
        std::vector<std::vector<int64_t>> lab_px(static_cast<size_t>(C)),
            unlab_px(static_cast<size_t>(C));
        for (int64_t i = 0; i < plane; ++i) {
            if (labels.ids[i])
                lab_px[labels.ids[i] - 1].push_back(i);
            else
                unlab_px[region[i]].push_back(i);
        }
        for (int64_t c = 0; c < C; ++c) {
            while (static_cast<int64_t>(lab_px[c].size()) < min_per_class &&
                   !unlab_px[c].empty()) {
                int64_t donor = 0;
                for (int64_t d2 = 0; d2 < C; ++d2)
                    if (lab_px[d2].size() > lab_px[donor].size()) donor = d2;
                if (static_cast<int64_t>(lab_px[donor].size()) <= min_per_class) break;
                int64_t gained = unlab_px[c].back();
                unlab_px[c].pop_back();
                int64_t lost = lab_px[donor].back();
                lab_px[donor].pop_back();
                labels.ids[gained] = static_cast<uint16_t>(c + 1);
                labels.ids[lost] = 0;
                lab_px[c].push_back(gained);
            }
        }
    }

    // smooth spectral signatures per class
    std::vector<double> sig(static_cast<size_t>(C * B));
    for (int64_t c = 0; c < C; ++c) {
        double a1 = rng.normal(), a2 = rng.normal(), a3 = rng.normal(), a4 = rng.normal();
        double ph1 = rng.uniform() * 6.283, ph2 = rng.uniform() * 6.283;
        for (int64_t b = 0; b < B; ++b) {
            double t = static_cast<double>(b) / B;
            sig[c * B + b] = spec.class_sep *
                             (a1 * std::sin(2.0 * 3.14159265 * t + ph1) +
                              a2 * std::cos(4.0 * 3.14159265 * t + ph2) + a3 * t + 0.5 * a4);
        }
    }

    // low-frequency scene drift: two band-space directions whose strength
    // also varies per class, so no single common-mode correction removes it
    auto make_dir = [&]() {
        std::vector<double> d(static_cast<size_t>(B));
        for (int64_t b = 0; b < B; ++b) d[b] = rng.normal();
        double dn = 0;
        for (double v : d) dn += v * v;
        dn = std::sqrt(dn / B);
        for (double& v : d) v /= dn;
        return d;
    };
    auto drift_dir = make_dir();
    auto drift_dir2 = make_dir();
    std::vector<double> class_sens(static_cast<size_t>(C));
    for (auto& v : class_sens) v = std::exp(rng.normal() * 0.35);

    double fy1 = 1.0 + rng.uniform(), fx1 = 1.0 + rng.uniform();
    double py1 = rng.uniform() * 6.283, px1 = rng.uniform() * 6.283;
    double fy2 = 2.0 + rng.uniform(), fx2 = 2.0 + rng.uniform();
    double py2 = rng.uniform() * 6.283, px2 = rng.uniform() * 6.283;

    HsiCube cube;
    cube.bands = B;
    cube.height = H;
    cube.width = W;
    cube.data.assign(static_cast<size_t>(B * plane), 0.0f);

    std::vector<double> g(static_cast<size_t>(plane)), g2(static_cast<size_t>(plane));
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double u = static_cast<double>(y) / H, v = static_cast<double>(x) / W;
            g[y * W + x] = std::sin(2 * 3.14159265 * fy1 * u + py1) +
                           std::cos(2 * 3.14159265 * fx1 * v + px1) + 1.5 * (u - 0.5);
            g2[y * W + x] = std::sin(2 * 3.14159265 * fy2 * u + py2) *
                            std::cos(2 * 3.14159265 * fx2 * v + px2);
        }

    std::set<int64_t> junk(spec.noisy_bands.begin(), spec.noisy_bands.end());
    for (int64_t b = 0; b < B; ++b) {
        const bool is_junk = junk.count(b) > 0;
        for (int64_t i = 0; i < plane; ++i) {
            double v;
            if (is_junk) {
                v = 4.0 * rng.normal();  // water-style unusable band
            } else {
                const int64_t c = region[i];
                const double amp = spec.drift * class_sens[c];
                v = sig[c * B + b] + amp * (drift_dir[b] * g[i] + 0.6 * drift_dir2[b] * g2[i]) +
                    spec.noise * rng.normal();
            }
            cube.data[b * plane + i] = static_cast<float>(v);
        }
    }

    Dataset ds;
    ds.name = spec.name;
    ds.cube = std::move(cube);
    ds.labels = std::move(labels);
    for (int64_t c = 1; c <= C; ++c) ds.class_names.push_back("class-" + std::to_string(c));
    return ds;
}

}  // namespace hsib
