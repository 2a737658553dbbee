#ifndef QCORE_CALIBRATION_HPP
#define QCORE_CALIBRATION_HPP

#include <numeric>
#include <span>
#include <vector>

#include "qcore/common.hpp"
#include "qcore/nn.hpp"
#include "qcore/quantizer.hpp"

namespace qcore {

// Back-propagation calibration of a quantized model, w_s = Q(w_{s-1} - eta * grad).
// Gradients are computed at the quantized point and accumulated into latent
// full-precision parameters (quantization itself has zero gradient almost
// everywhere, so BP calibration needs the full-precision copy); after every
// step the latent weights are re-quantized onto the tensor's fixed grid and
// the quantized values drive the next forward pass. Scales and zero points
// never change; only the codes move.
class BpCalibrator {
public:
    explicit BpCalibrator(const QuantModel& qm)
        : model_(qm), latent_(dequantize(qm)), active_(dequantize(qm)), best_(qm) {}

    // One epoch of shuffled mini-batch SGD; returns the mean cross-entropy at
    // the quantized weights each batch was forwarded with.
    double run_epoch(std::span<const Example* const> data, const TrainConfig& cfg, std::int64_t shuffle_seed) {
        cfg.validate();
        if (data.empty()) throw UsageError("bp calibration: empty calibration set");
        if (best_loss_ == std::numeric_limits<double>::infinity()) {
            // The pre-calibration state competes in the arg min too.
            best_loss_ = mean_loss(data);
            best_ = model_;
        }

        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(shuffle_seed);
        rng.shuffle(order);

        double loss_sum = 0.0;
        std::vector<const Example*> batch;
        std::size_t pos = 0;
        while (pos < order.size()) {
            batch.clear();
            const std::size_t end = std::min(pos + static_cast<std::size_t>(cfg.batch_size), order.size());
            for (std::size_t i = pos; i < end; ++i) batch.push_back(data[order[i]]);

            double batch_loss = 0.0;
            const GradientTensors grads = backward_stats(active_, batch, {}, &batch_loss);
            loss_sum += batch_loss * static_cast<double>(batch.size());

            for (std::size_t li = 0; li < model_.layers.size(); ++li) {
                QuantLayer& ql = model_.layers[li];
                Layer& lat = latent_.layers[li];
                Layer& act = active_.layers[li];
                for (std::size_t i = 0; i < ql.weights.codes.size(); ++i) {
                    lat.weights[i] = static_cast<float>(static_cast<double>(lat.weights[i]) -
                                                        cfg.learning_rate * grads.layers[li].weights[i]);
                    ql.weights.codes[i] = quantize_value(lat.weights[i], ql.weights, model_.bit_width);
                    act.weights[i] = static_cast<float>(ql.weights.dequantize_code(ql.weights.codes[i]));
                }
                for (std::size_t i = 0; i < ql.bias.codes.size(); ++i) {
                    lat.bias[i] = static_cast<float>(static_cast<double>(lat.bias[i]) -
                                                     cfg.learning_rate * grads.layers[li].bias[i]);
                    ql.bias.codes[i] = quantize_value(lat.bias[i], ql.bias, model_.bit_width);
                    act.bias[i] = static_cast<float>(ql.bias.dequantize_code(ql.bias.codes[i]));
                }
            }
            pos = end;
        }

        // Track the trajectory state with the lowest calibration-set loss;
        // the calibration objective is an arg min over that loss, so the best
        // visited state, not the last iterate, is the calibrated model.
        const double epoch_end_loss = mean_loss(data);
        if (epoch_end_loss < best_loss_) {
            best_loss_ = epoch_end_loss;
            best_ = model_;
        }
        return loss_sum / static_cast<double>(data.size());
    }

    const QuantModel& model() const { return model_; }
    const FpModel& quantized_view() const { return active_; }

    // Lowest-loss state seen so far (the initial model until an epoch beats it).
    const QuantModel& best_model() const { return best_; }
    double best_loss() const { return best_loss_; }

private:
    double mean_loss(std::span<const Example* const> data) const {
        double total = 0.0;
        for (const Example* e : data) {
            const Prediction p = forward(active_, *e);
            total += -std::log(std::max(p.probabilities[static_cast<std::size_t>(e->label)], 1e-300));
        }
        return total / static_cast<double>(data.size());
    }

    QuantModel model_;
    FpModel latent_;  // full-precision shadow accumulating the SGD steps
    FpModel active_;  // dequantized view of the current codes
    QuantModel best_;
    double best_loss_ = std::numeric_limits<double>::infinity();
};

inline double bp_calibrate_epoch(QuantModel& qm, std::span<const Example* const> data, const TrainConfig& cfg,
                                 std::int64_t shuffle_seed) {
    BpCalibrator calibrator(qm);
    const double loss = calibrator.run_epoch(data, cfg, shuffle_seed);
    qm = calibrator.model();
    return loss;
}

inline void bp_calibrate(QuantModel& qm, std::span<const Example* const> data, const TrainConfig& cfg,
                         std::int64_t seed_stream = 0) {
    BpCalibrator calibrator(qm);
    for (int s = 0; s < cfg.epochs; ++s) {
        calibrator.run_epoch(data, cfg, mix_seed(cfg.seed, seed_stream * 1000 + s));
    }
    qm = calibrator.best_model();
}

}  // namespace qcore

#endif  // QCORE_CALIBRATION_HPP
