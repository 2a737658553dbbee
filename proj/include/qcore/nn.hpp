#ifndef QCORE_NN_HPP
#define QCORE_NN_HPP

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "qcore/common.hpp"
#include "qcore/dataset.hpp"

namespace qcore {

enum class LayerKind : std::uint8_t { Conv1d = 0, Dense = 1, Relu = 2 };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv1d: return "conv1d";
        case LayerKind::Dense: return "dense";
        case LayerKind::Relu: return "relu";
    }
    return "?";
}

inline LayerKind layer_kind_from_name(const std::string& s) {
    if (s == "conv1d") return LayerKind::Conv1d;
    if (s == "dense") return LayerKind::Dense;
    if (s == "relu" || s == "activation") return LayerKind::Relu;
    throw UsageError("unknown layer kind '" + s + "'");
}

// Data between layers is a flat channel-major buffer of size channels * width.
struct LayerShape {
    int in_channels = 0;
    int in_width = 0;
    int out_channels = 0;
    int out_width = 0;

    int in_size() const { return in_channels * in_width; }
    int out_size() const { return out_channels * out_width; }
};

struct Layer {
    LayerKind kind = LayerKind::Relu;
    LayerShape shape;
    int kernel = 0;  // conv1d only

    // conv1d: weights[((oc * inC) + ic) * kernel + t], bias[oc]
    // dense:  weights[o * in + i],                     bias[o]
    std::vector<float> weights;
    std::vector<float> bias;

    std::size_t weight_count() const { return weights.size(); }
    std::size_t param_count() const { return weights.size() + bias.size(); }
};

// ---------------------------------------------------------------------------
// Architecture descriptor: a self-describing key-value tree listing the layers
// in order. Dense layers infer their input size from the previous layer unless
// an explicit "in" is given (which is then validated).
// ---------------------------------------------------------------------------

struct ArchDescriptor {
    struct LayerSpec {
        LayerKind kind = LayerKind::Relu;
        int out_channels = 0;  // conv1d
        int kernel = 0;        // conv1d
        int out_features = 0;  // dense
        int explicit_in = -1;  // optional declared input size / channels
    };

    int input_channels = 1;
    int input_width = 0;
    std::vector<LayerSpec> layers;

    static ArchDescriptor from_json(const nlohmann::json& j) {
        ArchDescriptor a;
        if (!j.contains("input") || !j.contains("layers")) {
            throw UsageError("architecture descriptor: expected 'input' and 'layers' entries");
        }
        a.input_channels = j.at("input").value("channels", 1);
        a.input_width = j.at("input").at("width").get<int>();
        for (const auto& lj : j.at("layers")) {
            LayerSpec ls;
            ls.kind = layer_kind_from_name(lj.at("kind").get<std::string>());
            switch (ls.kind) {
                case LayerKind::Conv1d:
                    ls.out_channels = lj.at("out_channels").get<int>();
                    ls.kernel = lj.at("kernel").get<int>();
                    ls.explicit_in = lj.value("in_channels", -1);
                    break;
                case LayerKind::Dense:
                    ls.out_features = lj.at("out").get<int>();
                    ls.explicit_in = lj.value("in", -1);
                    break;
                case LayerKind::Relu:
                    break;
            }
            a.layers.push_back(ls);
        }
        return a;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["input"] = {{"channels", input_channels}, {"width", input_width}};
        j["layers"] = nlohmann::json::array();
        for (const LayerSpec& ls : layers) {
            nlohmann::json lj;
            lj["kind"] = layer_kind_name(ls.kind);
            if (ls.kind == LayerKind::Conv1d) {
                lj["out_channels"] = ls.out_channels;
                lj["kernel"] = ls.kernel;
            } else if (ls.kind == LayerKind::Dense) {
                lj["out"] = ls.out_features;
            }
            if (ls.explicit_in >= 0) lj[ls.kind == LayerKind::Conv1d ? "in_channels" : "in"] = ls.explicit_in;
            j["layers"].push_back(lj);
        }
        return j;
    }

    static ArchDescriptor parse_string(const std::string& text) {
        return from_json(nlohmann::json::parse(text));
    }

    static ArchDescriptor parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw UsageError("architecture descriptor: cannot open '" + path + "'");
        nlohmann::json j;
        in >> j;
        return from_json(j);
    }

    std::string serialize() const { return to_json().dump(); }

    // Convenience builders used throughout the tests.
    static ArchDescriptor dense_net(int in, const std::vector<int>& outs) {
        ArchDescriptor a;
        a.input_channels = 1;
        a.input_width = in;
        for (std::size_t i = 0; i < outs.size(); ++i) {
            LayerSpec ls;
            ls.kind = LayerKind::Dense;
            ls.out_features = outs[i];
            a.layers.push_back(ls);
            if (i + 1 < outs.size()) {
                LayerSpec relu;
                relu.kind = LayerKind::Relu;
                a.layers.push_back(relu);
            }
        }
        return a;
    }

    static ArchDescriptor conv_dense_net(int in_width, int conv_channels, int kernel, int classes) {
        ArchDescriptor a;
        a.input_channels = 1;
        a.input_width = in_width;
        LayerSpec conv;
        conv.kind = LayerKind::Conv1d;
        conv.out_channels = conv_channels;
        conv.kernel = kernel;
        a.layers.push_back(conv);
        LayerSpec relu;
        relu.kind = LayerKind::Relu;
        a.layers.push_back(relu);
        LayerSpec head;
        head.kind = LayerKind::Dense;
        head.out_features = classes;
        a.layers.push_back(head);
        return a;
    }
};

// ---------------------------------------------------------------------------
// Full-precision model.
// ---------------------------------------------------------------------------

struct FpModel {
    std::vector<Layer> layers;
    int input_channels = 1;
    int input_width = 0;
    int epoch_count = 0;
    std::int64_t rng_seed = 0;

    int input_dim() const { return input_channels * input_width; }

    int num_classes() const {
        for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
            if (it->kind != LayerKind::Relu) return it->shape.out_size();
        }
        return 0;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const Layer& l : layers) n += l.param_count();
        return n;
    }

    ArchDescriptor descriptor() const {
        ArchDescriptor a;
        a.input_channels = input_channels;
        a.input_width = input_width;
        for (const Layer& l : layers) {
            ArchDescriptor::LayerSpec ls;
            ls.kind = l.kind;
            if (l.kind == LayerKind::Conv1d) {
                ls.out_channels = l.shape.out_channels;
                ls.kernel = l.kernel;
            } else if (l.kind == LayerKind::Dense) {
                ls.out_features = l.shape.out_size();
            }
            a.layers.push_back(ls);
        }
        return a;
    }

    void check_finite(const std::string& context) const {
        for (std::size_t li = 0; li < layers.size(); ++li) {
            for (float w : layers[li].weights) {
                if (!std::isfinite(w)) throw NumericError(context + ": non-finite weight in layer " + std::to_string(li));
            }
            for (float b : layers[li].bias) {
                if (!std::isfinite(b)) throw NumericError(context + ": non-finite bias in layer " + std::to_string(li));
            }
        }
    }
};

inline FpModel build_model(const ArchDescriptor& arch, std::int64_t seed) {
    if (arch.input_width < 1 || arch.input_channels < 1) {
        throw ShapeError("build_model: input shape must be positive");
    }
    FpModel model;
    model.input_channels = arch.input_channels;
    model.input_width = arch.input_width;
    model.rng_seed = seed;

    Rng rng(seed);
    int channels = arch.input_channels;
    int width = arch.input_width;

    for (std::size_t li = 0; li < arch.layers.size(); ++li) {
        const ArchDescriptor::LayerSpec& ls = arch.layers[li];
        Layer layer;
        layer.kind = ls.kind;
        layer.shape.in_channels = channels;
        layer.shape.in_width = width;

        auto init = [&rng](std::vector<float>& v, std::size_t n, int fan_in) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
            v.resize(n);
            for (float& w : v) w = static_cast<float>(rng.uniform(-bound, bound));
        };

        switch (ls.kind) {
            case LayerKind::Conv1d: {
                if (ls.out_channels < 1 || ls.kernel < 1) {
                    throw ShapeError("build_model: layer " + std::to_string(li) + " (conv1d): need positive out_channels and kernel");
                }
                if (ls.explicit_in >= 0 && ls.explicit_in != channels) {
                    throw ShapeError("build_model: layer " + std::to_string(li) + " (conv1d): declared in_channels " +
                                     std::to_string(ls.explicit_in) + " but previous layer emits " + std::to_string(channels));
                }
                if (width < ls.kernel) {
                    throw ShapeError("build_model: layer " + std::to_string(li) + " (conv1d): kernel " + std::to_string(ls.kernel) +
                                     " wider than input width " + std::to_string(width));
                }
                layer.kernel = ls.kernel;
                layer.shape.out_channels = ls.out_channels;
                layer.shape.out_width = width - ls.kernel + 1;
                const int fan_in = channels * ls.kernel;
                init(layer.weights, static_cast<std::size_t>(ls.out_channels) * channels * ls.kernel, fan_in);
                init(layer.bias, static_cast<std::size_t>(ls.out_channels), fan_in);
                channels = layer.shape.out_channels;
                width = layer.shape.out_width;
                break;
            }
            case LayerKind::Dense: {
                const int in_features = channels * width;
                if (ls.out_features < 1) {
                    throw ShapeError("build_model: layer " + std::to_string(li) + " (dense): need positive output size");
                }
                if (ls.explicit_in >= 0 && ls.explicit_in != in_features) {
                    throw ShapeError("build_model: layer " + std::to_string(li) + " (dense): declared in " +
                                     std::to_string(ls.explicit_in) + " but previous layer emits " + std::to_string(in_features));
                }
                layer.shape.in_channels = 1;
                layer.shape.in_width = in_features;
                layer.shape.out_channels = 1;
                layer.shape.out_width = ls.out_features;
                init(layer.weights, static_cast<std::size_t>(ls.out_features) * in_features, in_features);
                init(layer.bias, static_cast<std::size_t>(ls.out_features), in_features);
                channels = 1;
                width = ls.out_features;
                break;
            }
            case LayerKind::Relu: {
                layer.shape.out_channels = channels;
                layer.shape.out_width = width;
                break;
            }
        }
        model.layers.push_back(std::move(layer));
    }
    if (model.num_classes() < 1) throw ShapeError("build_model: architecture has no output layer");
    return model;
}

// ---------------------------------------------------------------------------
// Forward / backward kernels. Weights are stored as 32-bit floats; every
// activation, loss, and gradient is accumulated in double.
// ---------------------------------------------------------------------------

namespace detail {

inline void layer_forward(const Layer& l, const std::vector<double>& in, std::vector<double>& out) {
    switch (l.kind) {
        case LayerKind::Conv1d: {
            const int in_c = l.shape.in_channels, in_w = l.shape.in_width;
            const int out_c = l.shape.out_channels, out_w = l.shape.out_width, k = l.kernel;
            out.assign(static_cast<std::size_t>(out_c) * out_w, 0.0);
            for (int oc = 0; oc < out_c; ++oc) {
                for (int p = 0; p < out_w; ++p) {
                    double acc = static_cast<double>(l.bias[static_cast<std::size_t>(oc)]);
                    for (int ic = 0; ic < in_c; ++ic) {
                        const std::size_t wbase = (static_cast<std::size_t>(oc) * in_c + ic) * k;
                        const std::size_t ibase = static_cast<std::size_t>(ic) * in_w + p;
                        for (int t = 0; t < k; ++t) {
                            acc += static_cast<double>(l.weights[wbase + t]) * in[ibase + t];
                        }
                    }
                    out[static_cast<std::size_t>(oc) * out_w + p] = acc;
                }
            }
            count_macs(static_cast<unsigned long long>(out_c) * out_w * in_c * k);
            break;
        }
        case LayerKind::Dense: {
            const int in_n = l.shape.in_size(), out_n = l.shape.out_size();
            out.assign(static_cast<std::size_t>(out_n), 0.0);
            for (int o = 0; o < out_n; ++o) {
                double acc = static_cast<double>(l.bias[static_cast<std::size_t>(o)]);
                const std::size_t wbase = static_cast<std::size_t>(o) * in_n;
                for (int i = 0; i < in_n; ++i) {
                    acc += static_cast<double>(l.weights[wbase + i]) * in[static_cast<std::size_t>(i)];
                }
                out[static_cast<std::size_t>(o)] = acc;
            }
            count_macs(static_cast<unsigned long long>(out_n) * in_n);
            break;
        }
        case LayerKind::Relu: {
            out.resize(in.size());
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
            break;
        }
    }
}

// dOut -> dIn and parameter gradient accumulation.
inline void layer_backward(const Layer& l, const std::vector<double>& in, const std::vector<double>& d_out,
                           std::vector<double>& d_in, std::vector<double>* d_weights, std::vector<double>* d_bias) {
    switch (l.kind) {
        case LayerKind::Conv1d: {
            const int in_c = l.shape.in_channels, in_w = l.shape.in_width;
            const int out_c = l.shape.out_channels, out_w = l.shape.out_width, k = l.kernel;
            d_in.assign(in.size(), 0.0);
            for (int oc = 0; oc < out_c; ++oc) {
                for (int p = 0; p < out_w; ++p) {
                    const double g = d_out[static_cast<std::size_t>(oc) * out_w + p];
                    if (d_bias) (*d_bias)[static_cast<std::size_t>(oc)] += g;
                    for (int ic = 0; ic < in_c; ++ic) {
                        const std::size_t wbase = (static_cast<std::size_t>(oc) * in_c + ic) * k;
                        const std::size_t ibase = static_cast<std::size_t>(ic) * in_w + p;
                        for (int t = 0; t < k; ++t) {
                            if (d_weights) (*d_weights)[wbase + t] += g * in[ibase + t];
                            d_in[ibase + t] += g * static_cast<double>(l.weights[wbase + t]);
                        }
                    }
                }
            }
            count_macs(2ULL * static_cast<unsigned long long>(out_c) * out_w * in_c * k);
            break;
        }
        case LayerKind::Dense: {
            const int in_n = l.shape.in_size(), out_n = l.shape.out_size();
            d_in.assign(static_cast<std::size_t>(in_n), 0.0);
            for (int o = 0; o < out_n; ++o) {
                const double g = d_out[static_cast<std::size_t>(o)];
                if (d_bias) (*d_bias)[static_cast<std::size_t>(o)] += g;
                const std::size_t wbase = static_cast<std::size_t>(o) * in_n;
                for (int i = 0; i < in_n; ++i) {
                    if (d_weights) (*d_weights)[wbase + i] += g * in[static_cast<std::size_t>(i)];
                    d_in[static_cast<std::size_t>(i)] += g * static_cast<double>(l.weights[wbase + i]);
                }
            }
            count_macs(2ULL * static_cast<unsigned long long>(out_n) * in_n);
            break;
        }
        case LayerKind::Relu: {
            d_in.resize(in.size());
            for (std::size_t i = 0; i < in.size(); ++i) d_in[i] = in[i] > 0.0 ? d_out[i] : 0.0;
            break;
        }
    }
}

inline std::vector<double> forward_cached(const FpModel& model, std::span<const double> x,
                                          std::vector<std::vector<double>>* layer_inputs) {
    std::vector<double> cur(x.begin(), x.end());
    std::vector<double> next;
    for (const Layer& l : model.layers) {
        if (layer_inputs) layer_inputs->push_back(cur);
        layer_forward(l, cur, next);
        cur.swap(next);
    }
    return cur;
}

inline std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.size());
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

}  // namespace detail

struct Prediction {
    std::vector<double> probabilities;
    int predicted_label = 0;
};

inline std::vector<double> forward_logits(const FpModel& model, std::span<const double> x) {
    if (static_cast<int>(x.size()) != model.input_dim()) {
        throw ShapeError("forward: input has " + std::to_string(x.size()) + " features, model expects " +
                         std::to_string(model.input_dim()));
    }
    return detail::forward_cached(model, x, nullptr);
}

inline Prediction forward(const FpModel& model, std::span<const double> x) {
    const std::vector<double> logits = forward_logits(model, x);
    Prediction pred;
    pred.probabilities = detail::softmax(logits);
    // argmax, ties broken by lowest class index
    pred.predicted_label = 0;
    for (std::size_t i = 1; i < pred.probabilities.size(); ++i) {
        if (pred.probabilities[i] > pred.probabilities[static_cast<std::size_t>(pred.predicted_label)]) {
            pred.predicted_label = static_cast<int>(i);
        }
    }
    return pred;
}

inline Prediction forward(const FpModel& model, const Example& e) { return forward(model, e.features); }

struct TrainConfig {
    double learning_rate = 0.01;
    int epochs = 1;
    int batch_size = 64;
    std::int64_t seed = 0;

    void validate() const {
        if (!(learning_rate >= 0.0)) throw UsageError("train config: learning rate must be >= 0");
        if (epochs < 1) throw UsageError("train config: epochs must be >= 1");
        if (batch_size < 1) throw UsageError("train config: batch size must be >= 1");
    }
};

struct GradientTensors {
    struct LayerGrad {
        std::vector<double> weights;
        std::vector<double> bias;
    };
    std::vector<LayerGrad> layers;
};

// Mean-reduced cross-entropy gradients over the batch, without applying them.
// Optional per-example weights turn the mean into a weighted mean.
inline GradientTensors backward_stats(const FpModel& model, std::span<const Example* const> batch,
                                      std::span<const double> example_weights = {},
                                      double* mean_loss_out = nullptr) {
    if (batch.empty()) throw UsageError("backward_stats: empty batch");
    if (!example_weights.empty() && example_weights.size() != batch.size()) {
        throw UsageError("backward_stats: example weight count does not match batch");
    }
    count_gradient_call();

    GradientTensors grads;
    grads.layers.resize(model.layers.size());
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        grads.layers[li].weights.assign(model.layers[li].weights.size(), 0.0);
        grads.layers[li].bias.assign(model.layers[li].bias.size(), 0.0);
    }

    double weight_total = 0.0;
    if (example_weights.empty()) {
        weight_total = static_cast<double>(batch.size());
    } else {
        for (double w : example_weights) weight_total += w;
        if (weight_total <= 0.0) throw UsageError("backward_stats: example weights sum to zero");
    }

    const int k = model.num_classes();
    double loss_acc = 0.0;
    std::vector<std::vector<double>> inputs;
    std::vector<double> d_out, d_in;
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
        const Example& e = *batch[bi];
        if (e.label < 0 || e.label >= k) {
            throw UsageError("backward_stats: label " + std::to_string(e.label) + " outside [0, " + std::to_string(k) + ")");
        }
        inputs.clear();
        const std::vector<double> logits = detail::forward_cached(model, e.features, &inputs);
        const std::vector<double> probs = detail::softmax(logits);
        const double w = example_weights.empty() ? 1.0 : example_weights[bi];
        loss_acc += -std::log(std::max(probs[static_cast<std::size_t>(e.label)], 1e-300)) * w;

        d_out.assign(probs.begin(), probs.end());
        d_out[static_cast<std::size_t>(e.label)] -= 1.0;
        const double scale = w / weight_total;  // applied once, at the loss gradient
        for (double& v : d_out) v *= scale;
        for (std::size_t li = model.layers.size(); li-- > 0;) {
            detail::layer_backward(model.layers[li], inputs[li], d_out, d_in, &grads.layers[li].weights,
                                   &grads.layers[li].bias);
            d_out.swap(d_in);
        }
    }

    for (std::size_t li = 0; li < grads.layers.size(); ++li) {
        for (double g : grads.layers[li].weights) {
            if (!std::isfinite(g)) throw NumericError("backward_stats: non-finite gradient in layer " + std::to_string(li));
        }
        for (double g : grads.layers[li].bias) {
            if (!std::isfinite(g)) throw NumericError("backward_stats: non-finite gradient in layer " + std::to_string(li));
        }
    }
    if (mean_loss_out) *mean_loss_out = loss_acc / weight_total;
    return grads;
}

inline GradientTensors backward_stats(const FpModel& model, const Dataset& data) {
    std::vector<const Example*> ptrs;
    ptrs.reserve(data.size());
    for (const Example& e : data.examples) ptrs.push_back(&e);
    return backward_stats(model, ptrs);
}

inline void apply_sgd_step(FpModel& model, const GradientTensors& grads, double learning_rate) {
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        Layer& l = model.layers[li];
        for (std::size_t i = 0; i < l.weights.size(); ++i) {
            l.weights[i] = static_cast<float>(static_cast<double>(l.weights[i]) - learning_rate * grads.layers[li].weights[i]);
        }
        for (std::size_t i = 0; i < l.bias.size(); ++i) {
            l.bias[i] = static_cast<float>(static_cast<double>(l.bias[i]) - learning_rate * grads.layers[li].bias[i]);
        }
    }
}

// One epoch of SGD over shuffled mini-batches; shuffle order is a function of
// cfg.seed and the model's current epoch count. Returns the mean cross-entropy
// measured at the weights each batch was forwarded with.
inline double train_epoch(FpModel& model, const Dataset& data, const TrainConfig& cfg,
                          std::span<const double> example_weights = {}) {
    cfg.validate();
    if (data.empty()) throw UsageError("train_epoch: empty dataset");
    if (!example_weights.empty() && example_weights.size() != data.size()) {
        throw UsageError("train_epoch: example weight count does not match dataset");
    }

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(cfg.seed, model.epoch_count));
    rng.shuffle(order);

    double loss_sum = 0.0;
    double weight_sum = 0.0;
    std::vector<const Example*> batch;
    std::vector<double> batch_weights;
    std::size_t pos = 0;
    int batch_index = 0;
    while (pos < order.size()) {
        batch.clear();
        batch_weights.clear();
        const std::size_t end = std::min(pos + static_cast<std::size_t>(cfg.batch_size), order.size());
        for (std::size_t i = pos; i < end; ++i) {
            batch.push_back(&data.examples[order[i]]);
            if (!example_weights.empty()) batch_weights.push_back(example_weights[order[i]]);
        }
        double batch_loss = 0.0;
        const GradientTensors grads = backward_stats(model, batch, batch_weights, &batch_loss);
        if (!std::isfinite(batch_loss)) {
            throw NumericError("train_epoch: non-finite loss in batch " + std::to_string(batch_index) + " of epoch " +
                               std::to_string(model.epoch_count));
        }
        double bw = 0.0;
        if (batch_weights.empty()) {
            bw = static_cast<double>(batch.size());
        } else {
            for (double w : batch_weights) bw += w;
        }
        loss_sum += batch_loss * bw;
        weight_sum += bw;
        apply_sgd_step(model, grads, cfg.learning_rate);
        pos = end;
        ++batch_index;
    }
    model.check_finite("train_epoch");
    ++model.epoch_count;
    return loss_sum / weight_sum;
}

inline double dataset_accuracy(const FpModel& model, const Dataset& data) {
    if (data.empty()) return 0.0;
    std::size_t hits = 0;
    for (const Example& e : data.examples) {
        hits += (forward(model, e).predicted_label == e.label) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Mean input activations per layer, used by the bit-flipping recorder. For a
// dense layer the vector holds the mean flattened input; for conv1d it holds
// the mean input per (in_channel, kernel_offset) over examples and positions.
// ---------------------------------------------------------------------------

struct ActivationStats {
    std::vector<std::vector<double>> per_layer;
};

inline ActivationStats collect_activation_stats(const FpModel& model, std::span<const Example* const> examples) {
    if (examples.empty()) throw UsageError("collect_activation_stats: no examples");
    ActivationStats stats;
    stats.per_layer.resize(model.layers.size());
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        const Layer& l = model.layers[li];
        if (l.kind == LayerKind::Dense) {
            stats.per_layer[li].assign(static_cast<std::size_t>(l.shape.in_size()), 0.0);
        } else if (l.kind == LayerKind::Conv1d) {
            stats.per_layer[li].assign(static_cast<std::size_t>(l.shape.in_channels) * l.kernel, 0.0);
        }
    }

    std::vector<std::vector<double>> inputs;
    for (const Example* e : examples) {
        inputs.clear();
        detail::forward_cached(model, e->features, &inputs);
        for (std::size_t li = 0; li < model.layers.size(); ++li) {
            const Layer& l = model.layers[li];
            if (l.kind == LayerKind::Dense) {
                for (std::size_t i = 0; i < inputs[li].size(); ++i) stats.per_layer[li][i] += inputs[li][i];
            } else if (l.kind == LayerKind::Conv1d) {
                const int in_w = l.shape.in_width, out_w = l.shape.out_width, k = l.kernel;
                for (int ic = 0; ic < l.shape.in_channels; ++ic) {
                    for (int t = 0; t < k; ++t) {
                        double acc = 0.0;
                        for (int p = 0; p < out_w; ++p) {
                            acc += inputs[li][static_cast<std::size_t>(ic) * in_w + p + t];
                        }
                        stats.per_layer[li][static_cast<std::size_t>(ic) * k + t] += acc / out_w;
                    }
                }
            }
        }
    }
    const double n = static_cast<double>(examples.size());
    for (auto& v : stats.per_layer) {
        for (double& s : v) {
            s /= n;
            if (!std::isfinite(s)) throw NumericError("collect_activation_stats: non-finite activation");
        }
    }
    return stats;
}

// Maps a layer-local parameter index (weights first, then bias) to the mean
// input activation that multiplies it. Bias parameters multiply the constant 1.
inline double activation_for_param(const Layer& l, const std::vector<double>& layer_stats, std::size_t param_index) {
    if (param_index >= l.weight_count()) return 1.0;  // bias
    switch (l.kind) {
        case LayerKind::Dense:
            return layer_stats[param_index % static_cast<std::size_t>(l.shape.in_size())];
        case LayerKind::Conv1d: {
            const std::size_t per_oc = static_cast<std::size_t>(l.shape.in_channels) * l.kernel;
            return layer_stats[param_index % per_oc];
        }
        case LayerKind::Relu:
            return 0.0;
    }
    return 0.0;
}

// ---------------------------------------------------------------------------
// Checkpoint format "QCFP": magic, version, layer count, then per-layer shape
// and little-endian 32-bit reals.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const FpModel& model, std::ostream& os) {
    io::write_bytes(os, "QCFP", 4);
    io::write_u32(os, 1);
    io::write_u32(os, static_cast<std::uint32_t>(model.layers.size()));
    for (const Layer& l : model.layers) {
        io::write_bytes(os, &l.kind, 1);
        io::write_u32(os, static_cast<std::uint32_t>(l.shape.in_channels));
        io::write_u32(os, static_cast<std::uint32_t>(l.shape.in_width));
        io::write_u32(os, static_cast<std::uint32_t>(l.shape.out_channels));
        io::write_u32(os, static_cast<std::uint32_t>(l.shape.out_width));
        io::write_u32(os, static_cast<std::uint32_t>(l.kernel));
        io::write_u32(os, static_cast<std::uint32_t>(l.weights.size()));
        for (float w : l.weights) io::write_f32(os, w);
        io::write_u32(os, static_cast<std::uint32_t>(l.bias.size()));
        for (float b : l.bias) io::write_f32(os, b);
    }
}

inline void save_checkpoint(const FpModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw UsageError("save_checkpoint: cannot open '" + path + "' for writing");
    save_checkpoint(model, os);
}

inline FpModel load_checkpoint(std::istream& is) {
    io::expect_magic(is, "QCFP", "load_checkpoint");
    const std::uint32_t version = io::read_u32(is);
    if (version != 1) throw UsageError("load_checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t n_layers = io::read_u32(is);
    FpModel model;
    for (std::uint32_t li = 0; li < n_layers; ++li) {
        Layer l;
        io::read_bytes(is, &l.kind, 1);
        l.shape.in_channels = static_cast<int>(io::read_u32(is));
        l.shape.in_width = static_cast<int>(io::read_u32(is));
        l.shape.out_channels = static_cast<int>(io::read_u32(is));
        l.shape.out_width = static_cast<int>(io::read_u32(is));
        l.kernel = static_cast<int>(io::read_u32(is));
        l.weights.resize(io::read_u32(is));
        for (float& w : l.weights) w = io::read_f32(is);
        l.bias.resize(io::read_u32(is));
        for (float& b : l.bias) b = io::read_f32(is);
        if (li == 0) {
            model.input_channels = l.shape.in_channels;
            model.input_width = l.shape.in_width;
        }
        model.layers.push_back(std::move(l));
    }
    return model;
}

inline FpModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw UsageError("load_checkpoint: cannot open '" + path + "'");
    return load_checkpoint(is);
}

inline bool models_bit_identical(const FpModel& a, const FpModel& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t li = 0; li < a.layers.size(); ++li) {
        if (a.layers[li].weights.size() != b.layers[li].weights.size()) return false;
        if (a.layers[li].bias.size() != b.layers[li].bias.size()) return false;
        if (std::memcmp(a.layers[li].weights.data(), b.layers[li].weights.data(),
                        a.layers[li].weights.size() * sizeof(float)) != 0) {
            return false;
        }
        if (std::memcmp(a.layers[li].bias.data(), b.layers[li].bias.data(),
                        a.layers[li].bias.size() * sizeof(float)) != 0) {
            return false;
        }
    }
    return true;
}

}  // namespace qcore

#endif  // QCORE_NN_HPP
