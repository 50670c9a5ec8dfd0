#pragma once

#include <array>
#include <string>
#include <vector>

#include "oaflow/geometry.hpp"
#include "oaflow/mlp.hpp"
#include "oaflow/tensor.hpp"

namespace oaflow {

struct PyramidConfig {
    int input_points = 8192;
    std::array<int, 4> level_sizes{2048, 1024, 256, 64};
    std::array<int, 4> level_widths{32, 64, 128, 256};
    int k_enc = 16;
    int k_up = 8;

    void validate() const {
        if (input_points <= level_sizes[0])
            throw std::invalid_argument("PyramidConfig: input must exceed level 1 size");
        for (int i = 0; i < 4; ++i) {
            if (level_sizes[i] <= 0 || level_widths[i] <= 0)
                throw std::invalid_argument("PyramidConfig: sizes/widths must be positive");
            if (i > 0 && level_sizes[i] >= level_sizes[i - 1])
                throw std::invalid_argument("PyramidConfig: level sizes must strictly decrease");
        }
    }

    int k_enc_at(int level) const {
        const int avail = level == 0 ? input_points : level_sizes[level - 1];
        return std::min(k_enc, avail);
    }

    static PyramidConfig full() { return {}; }

    static PyramidConfig reduced() {
        PyramidConfig c;
        c.input_points = 512;
        c.level_sizes = {256, 128, 64, 32};
        c.level_widths = {16, 32, 64, 128};
        return c;
    }

    // for gradient checks: everything at most 32 points
    static PyramidConfig tiny() {
        PyramidConfig c;
        c.input_points = 32;
        c.level_sizes = {16, 8, 6, 4};
        c.level_widths = {4, 6, 8, 8};
        c.k_enc = 4;
        c.k_up = 2;
        return c;
    }
};

template <class Real>
struct PyramidLevel {
    Points<Real> points;
    Tensor<Real> features;                     // [N_l, C_l]
    std::vector<std::size_t> parent_indices;   // FPS picks into the previous level
};

template <class Real>
struct Pyramid {
    Points<Real> input_points;
    Tensor<Real> input_features;               // coordinates, [4N, 3]
    std::vector<PyramidLevel<Real>> levels;    // l = 1..4

    const Points<Real>& points_at(int level) const {
        return level == 0 ? input_points : levels.at(level - 1).points;
    }
    const Tensor<Real>& features_at(int level) const {
        return level == 0 ? input_features : levels.at(level - 1).features;
    }
};

// self index replicated k times per row: idx[n*k + j] = n
inline std::vector<std::size_t> replicate_self(std::size_t n, std::size_t k) {
    std::vector<std::size_t> idx(n * k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) idx[i * k + j] = i;
    return idx;
}

// constant [N,K,3] tensor of (neighbor - center) offsets
template <class Real>
Tensor<Real> relative_positions(const Points<Real>& centers, const Points<Real>& cloud,
                                const std::vector<std::size_t>& nn, std::size_t k) {
    std::vector<Real> rel(centers.size() * k * 3);
    for (std::size_t i = 0; i < centers.size(); ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const auto& p = cloud[nn[i * k + j]];
            for (int c = 0; c < 3; ++c)
                rel[(i * k + j) * 3 + c] = p[c] - centers[i][c];
        }
    return Tensor<Real>::constant({centers.size(), k, 3}, std::move(rel));
}

// Local max-pooled aggregation: per sampled point, max over K neighbors of
// MLP((p_k - p_i) (+) f_k (+) f_i). MLP input width must be 3 + 2*Cin.
template <class Real>
Tensor<Real> set_conv(const Points<Real>& points_in, const Tensor<Real>& features_in,
                      const std::vector<std::size_t>& sampled, int k, const MlpSpec& spec,
                      const ParamStore<Real>& store, const std::string& prefix) {
    const std::size_t cin = features_in.shape().back();
    if (features_in.shape() != Shape{points_in.size(), cin} || points_in.size() == 0)
        throw std::invalid_argument("set_conv: features must be [|points_in|, C]");
    if (spec.in_width() != int(3 + 2 * cin))
        throw std::invalid_argument("set_conv(" + prefix + "): MLP expects input width " +
                                    std::to_string(spec.in_width()) + " but features give " +
                                    std::to_string(3 + 2 * cin));
    Points<Real> centers(sampled.size());
    for (std::size_t i = 0; i < sampled.size(); ++i) centers[i] = points_in.at(sampled[i]);
    const auto nn = knn(centers, points_in, std::size_t(k));
    const std::size_t s = sampled.size(), kk = std::size_t(k);

    Tensor<Real> rel = relative_positions(centers, points_in, nn, kk);
    Tensor<Real> nf = gather_rows(features_in, nn, {s, kk});
    std::vector<std::size_t> center_idx(s * kk);
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < kk; ++j) center_idx[i * kk + j] = sampled[i];
    Tensor<Real> cf = gather_rows(features_in, center_idx, {s, kk});

    Tensor<Real> h = mlp_forward(concat_last<Real>({rel, nf, cf}), spec, store, prefix);
    return max_axis(h, 1);
}

// Propagates coarse features to a finer cloud: max-pooled MLP over K_up coarse
// neighbors, then fused with the fine point's own feature by a second MLP.
template <class Real>
Tensor<Real> set_upconv(const Points<Real>& coarse_pts, const Tensor<Real>& coarse_feat,
                        const Points<Real>& fine_pts, const Tensor<Real>& fine_feat, int k_up,
                        const MlpSpec& agg_spec, const MlpSpec& fuse_spec,
                        const ParamStore<Real>& store, const std::string& prefix) {
    if (fine_pts.size() < coarse_pts.size())
        throw std::invalid_argument("set_upconv: fine cloud smaller than coarse cloud");
    if (std::size_t(k_up) > coarse_pts.size())
        throw std::invalid_argument("set_upconv: K_up exceeds coarse point count");
    const std::size_t f = fine_pts.size(), kk = std::size_t(k_up);
    const auto nn = knn(fine_pts, coarse_pts, kk);

    Tensor<Real> rel = relative_positions(fine_pts, coarse_pts, nn, kk);
    Tensor<Real> cf = gather_rows(coarse_feat, nn, {f, kk});
    Tensor<Real> agg =
        max_axis(mlp_forward(concat_last<Real>({rel, cf}), agg_spec, store, prefix + "/agg"), 1);
    return mlp_forward(concat_last<Real>({agg, fine_feat}), fuse_spec, store, prefix + "/fuse");
}

inline MlpSpec set_conv_spec(int cin, int cout) {
    return MlpSpec::mlp(3 + 2 * cin, {cout, cout});
}

inline MlpSpec upconv_agg_spec(int c_coarse, int cout) {
    return MlpSpec::mlp(3 + c_coarse, {cout, cout});
}

inline MlpSpec upconv_fuse_spec(int c_agg, int c_fine, int cout) {
    return MlpSpec::mlp(c_agg + c_fine, {cout});
}

template <class Real>
void register_encoder(ParamStore<Real>& store, const PyramidConfig& cfg,
                      const std::string& prefix) {
    cfg.validate();
    int prev_width = 3;
    for (int l = 0; l < 4; ++l) {
        register_mlp(store, prefix + "/l" + std::to_string(l + 1),
                     set_conv_spec(prev_width, cfg.level_widths[l]));
        prev_width = cfg.level_widths[l];
    }
}

template <class Real>
void register_upconv(ParamStore<Real>& store, const std::string& prefix, int c_coarse,
                     int c_fine, int cout) {
    register_mlp(store, prefix + "/agg", upconv_agg_spec(c_coarse, cout));
    register_mlp(store, prefix + "/fuse", upconv_fuse_spec(cout, c_fine, cout));
}

// Shared-weight hierarchical encoding; initial features are the coordinates.
template <class Real>
Pyramid<Real> build_pyramid(const Points<Real>& pc, const PyramidConfig& cfg,
                            const ParamStore<Real>& store, const std::string& prefix) {
    cfg.validate();
    if (pc.size() != std::size_t(cfg.input_points))
        throw std::invalid_argument("build_pyramid: expected " +
                                    std::to_string(cfg.input_points) + " points, got " +
                                    std::to_string(pc.size()));
    Pyramid<Real> pyr;
    pyr.input_points = pc;
    pyr.input_features = points_to_tensor(pc);

    const Points<Real>* prev_pts = &pyr.input_points;
    const Tensor<Real>* prev_feat = &pyr.input_features;
    for (int l = 0; l < 4; ++l) {
        PyramidLevel<Real> level;
        level.parent_indices = fps(*prev_pts, std::size_t(cfg.level_sizes[l]));
        level.points.resize(level.parent_indices.size());
        for (std::size_t i = 0; i < level.parent_indices.size(); ++i)
            level.points[i] = (*prev_pts)[level.parent_indices[i]];
        int prev_width = l == 0 ? 3 : cfg.level_widths[l - 1];
        level.features = set_conv(*prev_pts, *prev_feat, level.parent_indices,
                                  cfg.k_enc_at(l), set_conv_spec(prev_width, cfg.level_widths[l]),
                                  store, prefix + "/l" + std::to_string(l + 1));
        pyr.levels.push_back(std::move(level));
        prev_pts = &pyr.levels.back().points;
        prev_feat = &pyr.levels.back().features;
    }
    return pyr;
}

}  // namespace oaflow
