#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "oaflow/tensor.hpp"

namespace oaflow {

enum class Act { None, Relu };

// A chain of affine layers. widths = {in, out_1, ..., out_L}; acts has one
// entry per layer.
struct MlpSpec {
    std::vector<int> widths;
    std::vector<Act> acts;
    bool has_bias = true;
    bool final_bias = true;  // a bias feeding straight into a softmax is dead weight

    int layers() const { return int(widths.size()) - 1; }
    int in_width() const { return widths.front(); }
    int out_width() const { return widths.back(); }

    bool bias_at(int layer) const {
        if (!has_bias) return false;
        return final_bias || layer + 1 < layers();
    }

    void validate() const {
        if (widths.size() < 2) throw std::invalid_argument("MlpSpec: needs at least one layer");
        for (int w : widths)
            if (w <= 0) throw std::invalid_argument("MlpSpec: widths must be positive");
        if (acts.size() != widths.size() - 1)
            throw std::invalid_argument("MlpSpec: one activation per layer required");
    }

    // hidden layers relu, final layer linear
    static MlpSpec mlp(int in, std::vector<int> hidden_and_out) {
        MlpSpec s;
        s.widths.push_back(in);
        for (int w : hidden_and_out) s.widths.push_back(w);
        s.acts.assign(s.layers(), Act::Relu);
        s.acts.back() = Act::None;
        s.validate();
        return s;
    }

    // single affine layer, no activation
    static MlpSpec fc(int in, int out) {
        MlpSpec s;
        s.widths = {in, out};
        s.acts = {Act::None};
        s.validate();
        return s;
    }
};

// Named leaf tensors. std::map keeps iteration order stable so seeded
// initialization and optimizer passes are reproducible.
template <class Real>
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

    Tensor<Real>& create(const std::string& name, Shape shape, Real init_bound) {
        if (params_.count(name))
            throw std::invalid_argument("ParamStore: duplicate parameter " + name);
        std::vector<Real> data(shape_numel(shape));
        if (init_bound > Real(0)) {
            std::uniform_real_distribution<double> u(-double(init_bound), double(init_bound));
            for (auto& v : data) v = Real(u(rng_));
        }
        auto [it, ok] = params_.emplace(name, Tensor<Real>::leaf(shape, std::move(data), true));
        (void)ok;
        return it->second;
    }

    Tensor<Real>& create_zero(const std::string& name, Shape shape) {
        return create(name, std::move(shape), Real(0));
    }

    Tensor<Real>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end())
            throw std::invalid_argument("ParamStore: unknown parameter " + name);
        return it->second;
    }
    const Tensor<Real>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end())
            throw std::invalid_argument("ParamStore: unknown parameter " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return params_.count(name) != 0; }

    std::map<std::string, Tensor<Real>>& all() { return params_; }
    const std::map<std::string, Tensor<Real>>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

    void zero_grad() {
        for (auto& [name, t] : params_) t.clear_grad();
    }

    std::mt19937_64& rng() { return rng_; }

private:
    std::map<std::string, Tensor<Real>> params_;
    std::mt19937_64 rng_;
};

// weight names: <prefix>/w<i>, biases <prefix>/b<i>
template <class Real>
void register_mlp(ParamStore<Real>& store, const std::string& prefix, const MlpSpec& spec) {
    spec.validate();
    for (int l = 0; l < spec.layers(); ++l) {
        const int fan_in = spec.widths[l];
        const Real bound = Real(std::sqrt(1.0 / double(fan_in)));
        store.create(prefix + "/w" + std::to_string(l),
                     {std::size_t(spec.widths[l]), std::size_t(spec.widths[l + 1])}, bound);
        if (spec.bias_at(l))
            store.create(prefix + "/b" + std::to_string(l), {std::size_t(spec.widths[l + 1])},
                         bound);
    }
}

// x: [..., Cin] -> [..., Cout]; leading dims preserved
template <class Real>
Tensor<Real> mlp_forward(const Tensor<Real>& x, const MlpSpec& spec,
                         const ParamStore<Real>& store, const std::string& prefix) {
    spec.validate();
    if (x.shape().back() != std::size_t(spec.in_width())) {
        Shape expect = x.shape();
        expect.back() = std::size_t(spec.in_width());
        dim_error("mlp_forward(" + prefix + ")", expect, x.shape());
    }
    Shape lead = x.shape();
    lead.pop_back();
    const std::size_t rows = shape_numel(lead);
    Tensor<Real> h = reshape(x, {rows, std::size_t(spec.in_width())});
    for (int l = 0; l < spec.layers(); ++l) {
        h = matmul(h, store.get(prefix + "/w" + std::to_string(l)));
        if (spec.bias_at(l)) h = add_rowvec(h, store.get(prefix + "/b" + std::to_string(l)));
        if (spec.acts[l] == Act::Relu) h = relu(h);
    }
    Shape oshape = lead;
    oshape.push_back(std::size_t(spec.out_width()));
    return reshape(h, oshape);
}

}  // namespace oaflow
