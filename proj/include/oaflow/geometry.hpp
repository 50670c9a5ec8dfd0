#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "oaflow/tensor.hpp"

namespace oaflow {

template <class Real>
using Vec3 = std::array<Real, 3>;

template <class Real>
using Points = std::vector<Vec3<Real>>;  // N x 3, meters

template <class Real>
inline Real dist2(const Vec3<Real>& a, const Vec3<Real>& b) {
    const Real dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

template <class Real>
inline void check_cloud(const Points<Real>& pts, const char* who) {
    if (pts.empty()) throw std::invalid_argument(std::string(who) + ": empty point cloud");
    for (const auto& p : pts)
        for (Real c : p)
            if (!std::isfinite(double(c)))
                throw std::invalid_argument(std::string(who) + ": non-finite coordinate");
}

template <class Real>
Tensor<Real> points_to_tensor(const Points<Real>& pts, bool requires_grad = false) {
    std::vector<Real> data;
    data.reserve(pts.size() * 3);
    for (const auto& p : pts) {
        data.push_back(p[0]);
        data.push_back(p[1]);
        data.push_back(p[2]);
    }
    return Tensor<Real>::leaf({pts.size(), 3}, std::move(data), requires_grad);
}

template <class Real>
Points<Real> tensor_to_points(const Tensor<Real>& t) {
    if (t.shape().size() != 2 || t.shape()[1] != 3)
        throw std::invalid_argument("tensor_to_points: expected [N,3], got " +
                                    shape_str(t.shape()));
    Points<Real> pts(t.shape()[0]);
    for (std::size_t i = 0; i < pts.size(); ++i)
        pts[i] = {t.value()[i * 3], t.value()[i * 3 + 1], t.value()[i * 3 + 2]};
    return pts;
}

// ---------------------------------------------------------------------------
// sampling and neighborhoods
// ---------------------------------------------------------------------------

// Greedy farthest point sampling. Deterministic given seed_index; max-min
// ties resolved toward the lowest index.
template <class Real>
std::vector<std::size_t> fps(const Points<Real>& pts, std::size_t m,
                             std::size_t seed_index = 0) {
    check_cloud(pts, "fps");
    const std::size_t n = pts.size();
    if (m < 1 || m > n)
        throw std::invalid_argument("fps: m=" + std::to_string(m) + " out of range [1," +
                                    std::to_string(n) + "]");
    if (seed_index >= n) throw std::invalid_argument("fps: seed_index out of range");
    std::vector<std::size_t> picked;
    picked.reserve(m);
    picked.push_back(seed_index);
    std::vector<Real> best(n);
    for (std::size_t i = 0; i < n; ++i) best[i] = dist2(pts[i], pts[seed_index]);
    while (picked.size() < m) {
        std::size_t arg = 0;
        Real far = Real(-1);
        for (std::size_t i = 0; i < n; ++i)
            if (best[i] > far) {
                far = best[i];
                arg = i;
            }
        picked.push_back(arg);
        for (std::size_t i = 0; i < n; ++i) best[i] = std::min(best[i], dist2(pts[i], pts[arg]));
    }
    return picked;
}

// Brute-force KNN; rows sorted by ascending squared distance, ties by index.
// Result is row-major [ |query| x k ].
template <class Real>
std::vector<std::size_t> knn(const Points<Real>& query, const Points<Real>& reference,
                             std::size_t k) {
    check_cloud(query, "knn");
    check_cloud(reference, "knn");
    if (k < 1 || k > reference.size())
        throw std::invalid_argument("knn: k=" + std::to_string(k) + " out of range [1," +
                                    std::to_string(reference.size()) + "]");
    std::vector<std::size_t> out(query.size() * k);
    std::vector<std::pair<Real, std::size_t>> cand(reference.size());
    for (std::size_t qi = 0; qi < query.size(); ++qi) {
        for (std::size_t ri = 0; ri < reference.size(); ++ri)
            cand[ri] = {dist2(query[qi], reference[ri]), ri};
        std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
        for (std::size_t j = 0; j < k; ++j) out[qi * k + j] = cand[j].second;
    }
    return out;
}

// Indices and inverse-distance weights of the 3 nearest sources per target.
// w_j = (1/(d_j+eps)) / sum_i (1/(d_i+eps)), eps = 1e-8.
template <class Real>
void three_nn_weights(const Points<Real>& targets, const Points<Real>& sources,
                      std::vector<std::array<std::size_t, 3>>& idx,
                      std::vector<std::array<Real, 3>>& w) {
    if (sources.size() < 3)
        throw std::invalid_argument("three_nn: need at least 3 source points");
    const auto nn = knn(targets, sources, 3);
    const Real eps = Real(1e-8);
    idx.resize(targets.size());
    w.resize(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
        Real inv[3], tot = 0;
        for (int j = 0; j < 3; ++j) {
            idx[i][j] = nn[i * 3 + j];
            const Real d = std::sqrt(dist2(targets[i], sources[idx[i][j]]));
            inv[j] = Real(1) / (d + eps);
            tot += inv[j];
        }
        for (int j = 0; j < 3; ++j) w[i][j] = inv[j] / tot;
    }
}

// values: row-major [ |sources| x width ] -> [ |targets| x width ]
template <class Real>
std::vector<Real> three_nn_interpolate(const Points<Real>& targets, const Points<Real>& sources,
                                       const std::vector<Real>& values, std::size_t width) {
    if (values.size() != sources.size() * width)
        throw std::invalid_argument("three_nn_interpolate: values size mismatch");
    for (Real v : values)
        if (!std::isfinite(double(v)))
            throw std::invalid_argument("three_nn_interpolate: non-finite value");
    std::vector<std::array<std::size_t, 3>> idx;
    std::vector<std::array<Real, 3>> w;
    three_nn_weights(targets, sources, idx, w);
    std::vector<Real> out(targets.size() * width, Real(0));
    for (std::size_t i = 0; i < targets.size(); ++i)
        for (int j = 0; j < 3; ++j)
            for (std::size_t c = 0; c < width; ++c)
                out[i * width + c] += w[i][j] * values[idx[i][j] * width + c];
    return out;
}

// three-NN upsampling of an in-graph feature tensor between fixed clouds
template <class Real>
Tensor<Real> three_nn_upsample(const Points<Real>& targets, const Points<Real>& sources,
                               const Tensor<Real>& values) {
    if (values.shape().size() != 2 || values.shape()[0] != sources.size())
        throw std::invalid_argument("three_nn_upsample: values must be [|sources|, C]");
    std::vector<std::array<std::size_t, 3>> idx;
    std::vector<std::array<Real, 3>> w;
    three_nn_weights(targets, sources, idx, w);
    return weighted_gather(values, idx, w);
}

// ---------------------------------------------------------------------------
// quaternions and rigid poses
// ---------------------------------------------------------------------------

template <class Real>
struct Quaternion {
    Real w = 1, x = 0, y = 0, z = 0;

    Real norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

    Quaternion normalized() const {
        const Real n = norm();
        if (n < Real(1e-12)) throw std::invalid_argument("Quaternion: zero norm");
        return {w / n, x / n, y / n, z / n};
    }

    Quaternion conjugate() const { return {w, -x, -y, -z}; }

    // canonical sign: w >= 0
    Quaternion canonical() const {
        if (w < Real(0)) return {-w, -x, -y, -z};
        return *this;
    }

    static Quaternion identity() { return {1, 0, 0, 0}; }

    static Quaternion from_axis_angle(const Vec3<Real>& axis, Real angle_rad) {
        const Real n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
        if (n < Real(1e-12)) throw std::invalid_argument("from_axis_angle: zero axis");
        const Real h = angle_rad / Real(2), s = std::sin(h) / n;
        return {std::cos(h), axis[0] * s, axis[1] * s, axis[2] * s};
    }
};

// Hamilton product
template <class Real>
Quaternion<Real> quat_multiply(const Quaternion<Real>& a, const Quaternion<Real>& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

template <class Real>
std::array<std::array<Real, 3>, 3> quat_to_matrix(const Quaternion<Real>& q) {
    const Real w = q.w, x = q.x, y = q.y, z = q.z;
    return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
             {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
             {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

// Shepperd's method; returns the canonical (w >= 0) quaternion
template <class Real>
Quaternion<Real> matrix_to_quat(const std::array<std::array<Real, 3>, 3>& m) {
    Quaternion<Real> q;
    const Real tr = m[0][0] + m[1][1] + m[2][2];
    if (tr > Real(0)) {
        Real s = std::sqrt(tr + Real(1)) * Real(2);
        q.w = s / 4;
        q.x = (m[2][1] - m[1][2]) / s;
        q.y = (m[0][2] - m[2][0]) / s;
        q.z = (m[1][0] - m[0][1]) / s;
    } else if (m[0][0] > m[1][1] && m[0][0] > m[2][2]) {
        Real s = std::sqrt(Real(1) + m[0][0] - m[1][1] - m[2][2]) * Real(2);
        q.w = (m[2][1] - m[1][2]) / s;
        q.x = s / 4;
        q.y = (m[0][1] + m[1][0]) / s;
        q.z = (m[0][2] + m[2][0]) / s;
    } else if (m[1][1] > m[2][2]) {
        Real s = std::sqrt(Real(1) + m[1][1] - m[0][0] - m[2][2]) * Real(2);
        q.w = (m[0][2] - m[2][0]) / s;
        q.x = (m[0][1] + m[1][0]) / s;
        q.y = s / 4;
        q.z = (m[1][2] + m[2][1]) / s;
    } else {
        Real s = std::sqrt(Real(1) + m[2][2] - m[0][0] - m[1][1]) * Real(2);
        q.w = (m[1][0] - m[0][1]) / s;
        q.x = (m[0][2] + m[2][0]) / s;
        q.y = (m[1][2] + m[2][1]) / s;
        q.z = s / 4;
    }
    return q.normalized().canonical();
}

template <class Real>
Vec3<Real> quat_rotate(const Quaternion<Real>& q, const Vec3<Real>& v) {
    const auto m = quat_to_matrix(q);
    return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

template <class Real>
struct Pose {
    Quaternion<Real> q;
    Vec3<Real> t{0, 0, 0};

    static Pose identity() { return {Quaternion<Real>::identity(), {0, 0, 0}}; }
};

template <class Real>
Vec3<Real> pose_apply(const Pose<Real>& pose, const Vec3<Real>& p) {
    if (std::abs(pose.q.norm() - Real(1)) > Real(1e-3))
        throw std::invalid_argument("pose_apply: quaternion not unit (normalize upstream)");
    const Vec3<Real> r = quat_rotate(pose.q, p);
    return {r[0] + pose.t[0], r[1] + pose.t[1], r[2] + pose.t[2]};
}

template <class Real>
Points<Real> pose_apply(const Pose<Real>& pose, const Points<Real>& pts) {
    Points<Real> out(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) out[i] = pose_apply(pose, pts[i]);
    return out;
}

template <class Real>
Pose<Real> pose_inverse(const Pose<Real>& pose) {
    const Quaternion<Real> qi = pose.q.conjugate().normalized();
    const Vec3<Real> r = quat_rotate(qi, pose.t);
    return {qi, {-r[0], -r[1], -r[2]}};
}

// compose(a, b): apply b first, then a
template <class Real>
Pose<Real> pose_compose(const Pose<Real>& a, const Pose<Real>& b) {
    const Quaternion<Real> q = quat_multiply(a.q, b.q).normalized();
    const Vec3<Real> r = quat_rotate(a.q, b.t);
    return {q, {r[0] + a.t[0], r[1] + a.t[1], r[2] + a.t[2]}};
}

// relative pose a^-1 b between two absolute poses
template <class Real>
Pose<Real> relative_pose(const Pose<Real>& a, const Pose<Real>& b) {
    return pose_compose(pose_inverse(a), b);
}

// ---------------------------------------------------------------------------
// differentiable pose application (Eq. q [0,p] q^-1 + [0,t] for unit q)
// ---------------------------------------------------------------------------

// q: [1,4] (assumed normalized in-graph), t: [1,3], pts: [N,3] -> [N,3]
template <class Real>
Tensor<Real> pose_apply_t(const Tensor<Real>& q, const Tensor<Real>& t,
                          const Tensor<Real>& pts) {
    if (q.shape() != Shape{1, 4}) dim_error("pose_apply_t: q", {1, 4}, q.shape());
    if (t.shape() != Shape{1, 3}) dim_error("pose_apply_t: t", {1, 3}, t.shape());
    if (pts.shape().size() != 2 || pts.shape()[1] != 3)
        throw std::invalid_argument("pose_apply_t: points must be [N,3]");
    const std::size_t n = pts.shape()[0];
    Tensor<Real> zeros = Tensor<Real>::zeros({n, 1});
    Tensor<Real> p4 = concat_last<Real>({zeros, pts});
    Tensor<Real> rotated = quat_mul(quat_mul(q, p4), quat_conj(q));
    Tensor<Real> xyz = slice_last(rotated, 1, 3);
    return add_rowvec(xyz, t);
}

}  // namespace oaflow
