#pragma once

#include <optional>
#include <string>

#include "oaflow/encoder.hpp"
#include "oaflow/geometry.hpp"
#include "oaflow/mlp.hpp"
#include "oaflow/tensor.hpp"

namespace oaflow {

// position encoding p_i (+) q_k (+) (q_k - p_i) (+) |q_k - p_i|^2  -> [N,K,10]
template <class Real>
Tensor<Real> position_encoding(const Tensor<Real>& first, const Tensor<Real>& second,
                               const std::vector<std::size_t>& nn, std::size_t k) {
    const std::size_t n = first.shape()[0];
    Tensor<Real> pi = gather_rows(first, replicate_self(n, k), {n, k});
    Tensor<Real> qk = gather_rows(second, nn, {n, k});
    Tensor<Real> diff = sub(qk, pi);
    Tensor<Real> d2 = reshape(sum_axis(square(diff), 2), {n, k, std::size_t(1)});
    return concat_last<Real>({pi, qk, diff, d2});
}

struct AttentiveCvSpec {
    int feat_width = 0;   // channels of F_P / F_Q
    int out_width = 0;    // channels of the produced cost volume
    int k1 = 16;          // cross-frame neighbors
    int k2 = 8;           // in-frame aggregation neighbors
    int depth = 3;        // layers of the matching MLP

    MlpSpec fq2p_spec() const {
        std::vector<int> widths(std::size_t(depth), out_width);
        return MlpSpec::mlp(10 + 2 * feat_width, widths);
    }
    MlpSpec attn_spec() const {
        MlpSpec s = MlpSpec::mlp(10 + out_width, {out_width, out_width});
        s.final_bias = false;  // softmax over neighbors ignores a per-channel shift
        return s;
    }
};

template <class Real>
void register_attentive_cv(ParamStore<Real>& store, const std::string& prefix,
                           const AttentiveCvSpec& spec) {
    register_mlp(store, prefix + "/fq2p", spec.fq2p_spec());
    register_mlp(store, prefix + "/attn1", spec.attn_spec());
    register_mlp(store, prefix + "/attn2", spec.attn_spec());
}

// Matching features between two frames, softmax-attended over K1 cross-frame
// neighbors and re-aggregated over K2 in-frame neighbors. Coordinates may be
// in-graph (warped) tensors; neighbor selection uses their current values.
template <class Real>
Tensor<Real> attentive_cost_volume(const Tensor<Real>& p_coords, const Tensor<Real>& f_p,
                                   const Tensor<Real>& q_coords, const Tensor<Real>& f_q,
                                   const AttentiveCvSpec& spec, const ParamStore<Real>& store,
                                   const std::string& prefix) {
    if (f_p.shape().back() != f_q.shape().back())
        throw std::invalid_argument("attentive_cost_volume: feature widths differ (" +
                                    std::to_string(f_p.shape().back()) + " vs " +
                                    std::to_string(f_q.shape().back()) + ")");
    const std::size_t n = p_coords.shape()[0];
    const std::size_t k1 = std::size_t(spec.k1), k2 = std::size_t(spec.k2);
    const Points<Real> p_raw = tensor_to_points(p_coords);
    const Points<Real> q_raw = tensor_to_points(q_coords);

    // cross-frame attention
    const auto nn_q = knn(p_raw, q_raw, k1);
    Tensor<Real> pos = position_encoding(p_coords, q_coords, nn_q, k1);
    Tensor<Real> fpi = gather_rows(f_p, replicate_self(n, k1), {n, k1});
    Tensor<Real> fqk = gather_rows(f_q, nn_q, {n, k1});
    Tensor<Real> fq2p =
        mlp_forward(concat_last<Real>({pos, fpi, fqk}), spec.fq2p_spec(), store, prefix + "/fq2p");
    Tensor<Real> w1 = softmax(
        mlp_forward(concat_last<Real>({pos, fq2p}), spec.attn_spec(), store, prefix + "/attn1"),
        1);
    Tensor<Real> cost = sum_axis(mul(fq2p, w1), 1);  // [N, C]

    // in-frame aggregation widens the receptive field
    const auto nn_p = knn(p_raw, p_raw, k2);
    Tensor<Real> pos2 = position_encoding(p_coords, p_coords, nn_p, k2);
    Tensor<Real> costk = gather_rows(cost, nn_p, {n, k2});
    Tensor<Real> w2 = softmax(
        mlp_forward(concat_last<Real>({pos2, costk}), spec.attn_spec(), store, prefix + "/attn2"),
        1);
    return sum_axis(mul(costk, w2), 1);
}

template <class Real>
void register_occlusion_head(ParamStore<Real>& store, const std::string& prefix, int in_width) {
    register_mlp(store, prefix + "/occ_fc", MlpSpec::fc(in_width, 1));
}

// O = sigmoid(FC(f_O)); values strictly inside (0,1)
template <class Real>
Tensor<Real> occlusion_head(const Tensor<Real>& f_o, const ParamStore<Real>& store,
                            const std::string& prefix) {
    const int in = int(f_o.shape().back());
    return sigmoid(mlp_forward(f_o, MlpSpec::fc(in, 1), store, prefix + "/occ_fc"));
}

// CV_local = neighborhood max of CV_self (self always included);
// CV_o = O * CV_self + (1 - O) * CV_local.
template <class Real>
Tensor<Real> occlusion_blend(const Tensor<Real>& cv_self, const Tensor<Real>& occ,
                             const Points<Real>& p_raw, int k) {
    const std::size_t n = cv_self.shape()[0];
    if (occ.shape() != Shape{n, 1}) dim_error("occlusion_blend: mask", {n, 1}, occ.shape());
    for (Real v : occ.value())
        if (!(v >= Real(0) && v <= Real(1)))
            throw std::invalid_argument("occlusion_blend: mask value outside [0,1]");
    if (std::size_t(k) > p_raw.size())
        throw std::invalid_argument("occlusion_blend: K exceeds point count");

    auto nn = knn(p_raw, p_raw, std::size_t(k));
    // guarantee p_i in N(p_i) so CV_local >= CV_self componentwise
    for (std::size_t i = 0; i < n; ++i) {
        bool has_self = false;
        for (std::size_t j = 0; j < std::size_t(k); ++j)
            if (nn[i * k + j] == i) {
                has_self = true;
                break;
            }
        if (!has_self) nn[i * k + (k - 1)] = i;
    }
    Tensor<Real> cv_local = max_axis(gather_rows(cv_self, nn, {n, std::size_t(k)}), 1);
    Tensor<Real> one_minus = add_scalar(neg(occ), Real(1));
    return add(mul_rowwise(cv_self, occ), mul_rowwise(cv_local, one_minus));
}

struct OccCvSpec {
    AttentiveCvSpec deep;      // CV_self branch
    AttentiveCvSpec shallow;   // occlusion-feature branch (fewer MLP layers)
    int prior_width = 0;       // extra channels concatenated into f_O, 0 = none
    int k_blend = 8;

    static OccCvSpec make(int feat_width, int out_width, int prior_width, int k1, int k2,
                          int k_blend) {
        OccCvSpec s;
        s.deep = {feat_width, out_width, k1, k2, 3};
        s.shallow = {feat_width, out_width, k1, k2, 2};
        s.prior_width = prior_width;
        s.k_blend = k_blend;
        return s;
    }
};

template <class Real>
void register_occ_cv(ParamStore<Real>& store, const std::string& prefix, const OccCvSpec& spec) {
    register_attentive_cv(store, prefix + "/acv1", spec.deep);
    register_attentive_cv(store, prefix + "/acv2", spec.shallow);
    register_occlusion_head(store, prefix, spec.shallow.out_width + spec.prior_width);
}

template <class Real>
struct OccCvResult {
    Tensor<Real> cv_o;      // occlusion-blended cost volume
    Tensor<Real> cv_self;   // pre-blend cost volume (shared with the pose path)
    Tensor<Real> occ;       // [N,1] probability of being non-occluded
};

// Two attentive cost volumes of the same structure but different MLP depth:
// the deep one yields CV_self, the shallow one (concatenated with the prior
// cost volume, when given) feeds the occlusion head; Eq.-(9)-style blending
// produces the final volume.
template <class Real>
OccCvResult<Real> occ_perception_cost_volume(const Tensor<Real>& p_coords,
                                             const Tensor<Real>& f_p,
                                             const Tensor<Real>& q_coords,
                                             const Tensor<Real>& f_q,
                                             const std::optional<Tensor<Real>>& prior_cv,
                                             const OccCvSpec& spec,
                                             const ParamStore<Real>& store,
                                             const std::string& prefix) {
    OccCvResult<Real> out;
    out.cv_self =
        attentive_cost_volume(p_coords, f_p, q_coords, f_q, spec.deep, store, prefix + "/acv1");
    Tensor<Real> f_o = attentive_cost_volume(p_coords, f_p, q_coords, f_q, spec.shallow, store,
                                             prefix + "/acv2");
    if (spec.prior_width > 0) {
        if (!prior_cv || int(prior_cv->shape().back()) != spec.prior_width)
            throw std::invalid_argument("occ_perception_cost_volume: prior cost volume of width " +
                                        std::to_string(spec.prior_width) + " required");
        f_o = concat_last<Real>({f_o, *prior_cv});
    }
    out.occ = occlusion_head(f_o, store, prefix);
    out.cv_o = occlusion_blend(out.cv_self, out.occ, tensor_to_points(p_coords), spec.k_blend);
    return out;
}

}  // namespace oaflow
