#pragma once

// Small synthetic patch sets and models shared across the module test suites.

#include "hsib/data.hpp"
#include "hsib/model.hpp"

namespace hsib::testing {

inline PatchSet toy_patchset(int64_t channels, int64_t d, int64_t n_per_class, int64_t classes,
                             uint64_t seed) {
    SynthSpec s;
    s.name = "toy";
    s.bands = channels;
    s.height = 24;
    s.width = 24;
    s.classes = classes;
    s.labeled = n_per_class * classes;
    s.noise = 0.3;
    s.drift = 0.2;
    s.seed = seed;
    auto ds = make_synthetic(s);
    auto cube = standardize_apply(ds.cube, standardize_fit(ds.cube));
    return extract_patches(cube, ds.labels, d);
}

inline ModelGraph tiny_cnn(uint64_t seed, int64_t classes = 4) {
    RngState rng(seed);
    ArchSpec spec;
    spec.kind = ArchSpec::Kind::Cnn2d;
    spec.in_channels = 6;
    spec.f1 = 8;
    spec.f2 = 10;
    spec.kernel = 3;
    spec.hidden = 12;
    spec.classes = classes;
    spec.patch = 11;
    return build_model(spec, rng);
}

inline PatchSet toy_patchset_cnn(uint64_t seed) { return toy_patchset(6, 11, 40, 4, seed); }

}  // namespace hsib::testing
