#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ghostb/errors.hpp"
#include "ghostb/matrix.hpp"
#include "ghostb/override.hpp"
#include "ghostb/rng.hpp"

namespace ghostb {

enum class Activation { relu, leaky_relu, identity };

inline constexpr double kLeakySlope = 0.01;

inline double apply_activation(Activation a, double x) {
    switch (a) {
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::leaky_relu: return x > 0.0 ? x : kLeakySlope * x;
        case Activation::identity: return x;
    }
    return x;
}

inline double activation_grad(Activation a, double pre) {
    switch (a) {
        case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
        case Activation::leaky_relu: return pre > 0.0 ? 1.0 : kLeakySlope;
        case Activation::identity: return 1.0;
    }
    return 1.0;
}

struct Layer {
    Matrix weights;             // fan_in x fan_out
    std::vector<double> bias;   // fan_out
    Activation activation = Activation::relu;

    std::size_t fan_in() const { return weights.rows(); }
    std::size_t fan_out() const { return weights.cols(); }
};

/// Dense feed-forward network. The final layer is identity (logits);
/// class probabilities come from softmax in predict().
struct Network {
    std::vector<Layer> layers;

    std::size_t input_dim() const { return layers.front().fan_in(); }
    std::size_t output_dim() const { return layers.back().fan_out(); }
    std::size_t hidden_layer_count() const { return layers.size() - 1; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Layer& l : layers) n += l.weights.values().size() + l.bias.size();
        return n;
    }

    std::size_t layer_width(std::size_t layer) const { return layers[layer].fan_out(); }
};

struct ForwardTrace {
    std::vector<Matrix> pre;    // pre-activation per layer
    std::vector<Matrix> post;   // post-activation per layer, post-override
};

struct GradientSet {
    std::vector<Matrix> weight_grads;
    std::vector<std::vector<double>> bias_grads;
};

struct AdamState {
    std::vector<Matrix> m_weights, v_weights;
    std::vector<std::vector<double>> m_bias, v_bias;
    std::uint64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double learning_rate = 1e-3;
};

inline AdamState make_adam_state(const Network& net, double learning_rate) {
    AdamState s;
    s.learning_rate = learning_rate;
    for (const Layer& l : net.layers) {
        s.m_weights.emplace_back(l.weights.rows(), l.weights.cols());
        s.v_weights.emplace_back(l.weights.rows(), l.weights.cols());
        s.m_bias.emplace_back(l.bias.size(), 0.0);
        s.v_bias.emplace_back(l.bias.size(), 0.0);
    }
    return s;
}

/// He-initialized network: weights ~ N(0, 2/fan_in), zero biases,
/// hidden activations as given, identity output layer.
inline Network init_network(const std::vector<std::size_t>& layer_dims, std::uint64_t seed,
                            Activation hidden = Activation::relu) {
    if (layer_dims.size() < 2) {
        throw InvalidConfigError("init_network: need at least 2 layer dims");
    }
    for (std::size_t d : layer_dims) {
        if (d < 1) throw InvalidConfigError("init_network: layer dimension < 1");
    }
    auto rng = make_rng(seed);
    Network net;
    for (std::size_t k = 0; k + 1 < layer_dims.size(); ++k) {
        Layer l;
        const std::size_t fan_in = layer_dims[k];
        const std::size_t fan_out = layer_dims[k + 1];
        std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / double(fan_in)));
        l.weights = Matrix(fan_in, fan_out);
        for (double& w : l.weights.values()) w = gauss(rng);
        l.bias.assign(fan_out, 0.0);
        l.activation = (k + 2 == layer_dims.size()) ? Activation::identity : hidden;
        net.layers.push_back(std::move(l));
    }
    return net;
}

namespace detail {

inline void check_override(const Network& net, const ActivationOverride& ov) {
    for (const auto& e : ov.entries()) {
        if (e.where.layer_index >= net.layers.size() ||
            e.where.neuron_index >= net.layer_width(e.where.layer_index)) {
            throw InvalidConfigError("override placement out of range: layer " +
                                     std::to_string(e.where.layer_index) + " neuron " +
                                     std::to_string(e.where.neuron_index));
        }
    }
}

}  // namespace detail

inline std::pair<Matrix, ForwardTrace> forward(const Network& net, const Matrix& batch,
                                               const std::optional<ActivationOverride>& override_ =
                                                   std::nullopt) {
    if (batch.cols() != net.input_dim()) {
        throw ShapeError("forward: batch cols " + std::to_string(batch.cols()) +
                         " != input dim " + std::to_string(net.input_dim()));
    }
    if (override_) detail::check_override(net, *override_);

    ForwardTrace trace;
    Matrix x = batch;
    for (std::size_t k = 0; k < net.layers.size(); ++k) {
        const Layer& l = net.layers[k];
        Matrix pre = matmul(x, l.weights);
        for (std::size_t r = 0; r < pre.rows(); ++r) {
            for (std::size_t c = 0; c < pre.cols(); ++c) pre(r, c) += l.bias[c];
        }
        Matrix post(pre.rows(), pre.cols());
        for (std::size_t r = 0; r < pre.rows(); ++r) {
            for (std::size_t c = 0; c < pre.cols(); ++c) {
                post(r, c) = apply_activation(l.activation, pre(r, c));
            }
        }
        if (override_) {
            for (const auto& e : override_->for_layer(k)) {
                for (std::size_t r = 0; r < post.rows(); ++r) {
                    post(r, e.where.neuron_index) = e.value;
                }
            }
        }
        trace.pre.push_back(std::move(pre));
        x = post;
        trace.post.push_back(x);
    }
    return {x, std::move(trace)};
}

/// Exact gradients of the traced computation. Overridden activations are
/// constants: no gradient flows through them into the clamped neuron's
/// pre-activation, incoming weights or bias.
inline GradientSet backward(const Network& net, const Matrix& batch, const ForwardTrace& trace,
                            const Matrix& dlogits,
                            const std::optional<ActivationOverride>& override_ = std::nullopt) {
    const std::size_t L = net.layers.size();
    if (trace.pre.size() != L || trace.post.size() != L) {
        throw ShapeError("backward: trace does not match network depth");
    }
    if (!dlogits.same_shape(trace.post.back())) {
        throw ShapeError("backward: dlogits shape mismatch");
    }

    GradientSet grads;
    grads.weight_grads.resize(L);
    grads.bias_grads.resize(L);

    Matrix dpost = dlogits;
    for (std::size_t k = L; k-- > 0;) {
        const Layer& l = net.layers[k];
        if (override_) {
            for (const auto& e : override_->for_layer(k)) {
                for (std::size_t r = 0; r < dpost.rows(); ++r) {
                    dpost(r, e.where.neuron_index) = 0.0;
                }
            }
        }
        Matrix dpre(dpost.rows(), dpost.cols());
        for (std::size_t r = 0; r < dpost.rows(); ++r) {
            for (std::size_t c = 0; c < dpost.cols(); ++c) {
                dpre(r, c) = dpost(r, c) * activation_grad(l.activation, trace.pre[k](r, c));
            }
        }
        const Matrix& input = (k == 0) ? batch : trace.post[k - 1];
        // dW = input^T * dpre
        Matrix dW(l.fan_in(), l.fan_out());
        for (std::size_t r = 0; r < input.rows(); ++r) {
            for (std::size_t i = 0; i < l.fan_in(); ++i) {
                const double x = input(r, i);
                if (x == 0.0) continue;
                for (std::size_t j = 0; j < l.fan_out(); ++j) {
                    dW(i, j) += x * dpre(r, j);
                }
            }
        }
        std::vector<double> db(l.fan_out(), 0.0);
        for (std::size_t r = 0; r < dpre.rows(); ++r) {
            for (std::size_t j = 0; j < l.fan_out(); ++j) db[j] += dpre(r, j);
        }
        grads.weight_grads[k] = std::move(dW);
        grads.bias_grads[k] = std::move(db);
        if (k > 0) {
            Matrix dx(dpre.rows(), l.fan_in());
            for (std::size_t r = 0; r < dpre.rows(); ++r) {
                for (std::size_t i = 0; i < l.fan_in(); ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < l.fan_out(); ++j) {
                        acc += dpre(r, j) * l.weights(i, j);
                    }
                    dx(r, i) = acc;
                }
            }
            dpost = std::move(dx);
        }
    }
    return grads;
}

/// One bias-corrected Adam step, in place.
inline void adam_step(Network& net, const GradientSet& grads, AdamState& state) {
    if (grads.weight_grads.size() != net.layers.size()) {
        throw ShapeError("adam_step: gradient layer count mismatch");
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, double(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, double(state.t));
    for (std::size_t k = 0; k < net.layers.size(); ++k) {
        Layer& l = net.layers[k];
        if (!grads.weight_grads[k].same_shape(l.weights) ||
            grads.bias_grads[k].size() != l.bias.size()) {
            throw ShapeError("adam_step: gradient shape mismatch at layer " + std::to_string(k));
        }
        auto update = [&](double& p, double& m, double& v, double g) {
            m = state.beta1 * m + (1.0 - state.beta1) * g;
            v = state.beta2 * v + (1.0 - state.beta2) * g * g;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            p -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        };
        auto& wv = l.weights.values();
        const auto& gw = grads.weight_grads[k].values();
        auto& mw = state.m_weights[k].values();
        auto& vw = state.v_weights[k].values();
        for (std::size_t i = 0; i < wv.size(); ++i) update(wv[i], mw[i], vw[i], gw[i]);
        for (std::size_t i = 0; i < l.bias.size(); ++i) {
            update(l.bias[i], state.m_bias[k][i], state.v_bias[k][i], grads.bias_grads[k][i]);
        }
    }
}

/// Numerically stable row-wise softmax.
inline Matrix softmax(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        double mx = logits(r, 0);
        for (std::size_t c = 1; c < logits.cols(); ++c) mx = std::max(mx, logits(r, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < logits.cols(); ++c) {
            out(r, c) = std::exp(logits(r, c) - mx);
            sum += out(r, c);
        }
        for (std::size_t c = 0; c < logits.cols(); ++c) out(r, c) /= sum;
    }
    return out;
}

struct Prediction {
    Matrix scores;                    // softmax probabilities, rows sum to 1
    std::vector<std::size_t> labels;  // argmax per row, ties to lowest index
};

inline Prediction predict(const Network& net, const Matrix& batch) {
    auto [logits, trace] = forward(net, batch);
    Prediction p;
    p.scores = softmax(logits);
    p.labels.resize(batch.rows());
    for (std::size_t r = 0; r < p.scores.rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < p.scores.cols(); ++c) {
            if (p.scores(r, c) > p.scores(r, best)) best = c;
        }
        p.labels[r] = best;
    }
    return p;
}

// --- flat parameter vector helpers (fixed layer-major order: W0, b0, W1, b1, ...) ---

inline std::vector<double> flatten_parameters(const Network& net) {
    std::vector<double> out;
    out.reserve(net.parameter_count());
    for (const Layer& l : net.layers) {
        out.insert(out.end(), l.weights.values().begin(), l.weights.values().end());
        out.insert(out.end(), l.bias.begin(), l.bias.end());
    }
    return out;
}

inline void set_parameters(Network& net, const std::vector<double>& flat) {
    if (flat.size() != net.parameter_count()) {
        throw ShapeError("set_parameters: length " + std::to_string(flat.size()) +
                         " != parameter count " + std::to_string(net.parameter_count()));
    }
    std::size_t off = 0;
    for (Layer& l : net.layers) {
        auto& wv = l.weights.values();
        std::copy(flat.begin() + off, flat.begin() + off + wv.size(), wv.begin());
        off += wv.size();
        std::copy(flat.begin() + off, flat.begin() + off + l.bias.size(), l.bias.begin());
        off += l.bias.size();
    }
}

}  // namespace ghostb
