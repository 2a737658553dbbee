#ifndef QCORE_BITFLIP_HPP
#define QCORE_BITFLIP_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "qcore/calibration.hpp"
#include "qcore/common.hpp"
#include "qcore/coreset.hpp"
#include "qcore/dataset.hpp"
#include "qcore/nn.hpp"
#include "qcore/quantizer.hpp"

namespace qcore {

struct ParamId {
    int layer = 0;
    int index = 0;  // layer-local: weights first, then bias
};

// One recorded (activation delta, clipped code step) pair for one parameter in
// one calibration epoch.
struct DeltaRecord {
    ParamId param;
    int epoch = 0;
    double delta_a = 0.0;
    int delta_p = 0;  // in {-1, 0, 1}
};

struct CalibrationConfig {
    int epochs = 5;
    double flip_threshold = 0.5;  // |code change| below this labels as 0

    void validate() const {
        if (epochs < 1) throw UsageError("calibration config: epochs must be >= 1");
        if (!(flip_threshold > 0.0)) throw UsageError("calibration config: flip threshold must be > 0");
    }
};

namespace detail {

inline int clip_step(long long code_delta, double flip_threshold) {
    if (std::llabs(code_delta) < flip_threshold) return 0;
    return code_delta > 0 ? 1 : -1;
}

inline std::vector<const Example*> resolve_core(const QCoreSet& core, const ExamplePool& pool) {
    std::vector<const Example*> out;
    out.reserve(core.example_ids.size());
    for (std::int64_t id : core.example_ids) out.push_back(&pool.get(id));
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Recording pass: back-propagation calibration of the quantized model over the
// core, capturing per epoch and per parameter the mean input activation delta
// and the clipped code change. The records are the bit-flipping network's
// training set.
// ---------------------------------------------------------------------------

inline std::pair<QuantModel, std::vector<DeltaRecord>> record_calibration(const QuantModel& qm, const QCoreSet& core,
                                                                          const ExamplePool& data,
                                                                          const TrainConfig& cfg,
                                                                          double flip_threshold = 0.5) {
    cfg.validate();
    const std::vector<const Example*> calibration_set = detail::resolve_core(core, data);
    if (calibration_set.empty()) throw UsageError("record_calibration: empty core");

    BpCalibrator calibrator(qm);
    std::vector<DeltaRecord> records;
    records.reserve(static_cast<std::size_t>(cfg.epochs) * qm.param_count());

    for (int s = 1; s <= cfg.epochs; ++s) {
        const FpModel fp_start = calibrator.quantized_view();
        const ActivationStats stats = collect_activation_stats(fp_start, calibration_set);
        std::vector<std::vector<std::int8_t>> start_w(qm.layers.size());
        std::vector<std::vector<std::int8_t>> start_b(qm.layers.size());
        for (std::size_t li = 0; li < qm.layers.size(); ++li) {
            start_w[li] = calibrator.model().layers[li].weights.codes;
            start_b[li] = calibrator.model().layers[li].bias.codes;
        }

        calibrator.run_epoch(calibration_set, cfg, mix_seed(cfg.seed, 500 + s));

        for (std::size_t li = 0; li < qm.layers.size(); ++li) {
            const QuantLayer& ql = calibrator.model().layers[li];
            const Layer& fl = fp_start.layers[li];
            const std::size_t wc = ql.weight_count();
            for (std::size_t p = 0; p < ql.param_count(); ++p) {
                const double act = activation_for_param(fl, stats.per_layer[li], p);
                const double w = p < wc ? static_cast<double>(fl.weights[p]) : static_cast<double>(fl.bias[p - wc]);
                const long long delta_code = p < wc
                    ? static_cast<long long>(ql.weights.codes[p]) - static_cast<long long>(start_w[li][p])
                    : static_cast<long long>(ql.bias.codes[p - wc]) - static_cast<long long>(start_b[li][p - wc]);
                DeltaRecord rec;
                rec.param = ParamId{static_cast<int>(li), static_cast<int>(p)};
                rec.epoch = s;
                rec.delta_a = w * act - act;
                rec.delta_p = detail::clip_step(delta_code, flip_threshold);
                if (!std::isfinite(rec.delta_a)) {
                    throw NumericError("record_calibration: non-finite activation delta in layer " + std::to_string(li));
                }
                records.push_back(rec);
            }
        }
    }
    // The deployed model is the arg min of the calibration loss across the
    // trajectory, which includes the uncalibrated starting point.
    return {calibrator.best_model(), std::move(records)};
}

// ---------------------------------------------------------------------------
// The bit-flipping network: a small quantized classifier (one convolutional
// layer and a dense head) over the scalar activation delta, emitting the
// predicted parameter step in {-1, 0, 1}.
// ---------------------------------------------------------------------------

struct BitFlipNet {
    QuantModel net;
    int target_bit_width = 8;
    // Support of the recorded activation deltas. Queries are clamped into this
    // range: the classifier has no evidence outside it, and unclamped
    // extrapolation fires spurious flips.
    double input_lo = -1e300;
    double input_hi = 1e300;
    // A flip is emitted only when its score beats the hold score by this
    // margin. Oscillating parameters leave contradictory flip labels at
    // similar activation deltas; the margin keeps those contested regions
    // silent.
    double hold_margin = 0.0;
};

struct BfTrainReport {
    double train_accuracy = 0.0;
    bool degenerate = false;
    std::array<long long, 3> class_counts{};
    std::string warning;
};

inline ArchDescriptor bitflip_arch(int channels) {
    ArchDescriptor a;
    a.input_channels = 1;
    a.input_width = 1;
    ArchDescriptor::LayerSpec conv;
    conv.kind = LayerKind::Conv1d;
    conv.out_channels = channels;
    conv.kernel = 1;
    a.layers.push_back(conv);
    ArchDescriptor::LayerSpec relu;
    relu.kind = LayerKind::Relu;
    a.layers.push_back(relu);
    ArchDescriptor::LayerSpec head;
    head.kind = LayerKind::Dense;
    head.out_features = 3;
    a.layers.push_back(head);
    return a;
}

namespace detail {

inline FpModel constant_class_net(int channels, int label) {
    FpModel net = build_model(bitflip_arch(channels), 0);
    for (Layer& l : net.layers) {
        std::fill(l.weights.begin(), l.weights.end(), 0.0f);
        std::fill(l.bias.begin(), l.bias.end(), 0.0f);
    }
    net.layers.back().bias[static_cast<std::size_t>(label)] = 1.0f;
    return net;
}

inline int predict_step(const FpModel& net, double delta_a, double hold_margin = 0.0) {
    const std::array<double, 1> x{delta_a};
    const std::vector<double> scores = forward_logits(net, std::span<const double>(x));
    const int flip = scores[2] >= scores[0] ? 1 : -1;  // ties prefer the lower class, matching argmax
    const double flip_score = std::max(scores[0], scores[2]);
    if (flip_score - scores[1] <= hold_margin) return 0;
    return flip;
}

}  // namespace detail

// Trains the 3-class step predictor on (deltaA -> deltaP + 1) with
// class-frequency weighting (the labels are heavily 0-skewed), then quantizes
// it to the target bit width. An optional cap can bound the rare-class
// weights; unbounded frequency weighting trains the cleanest nets here.
inline std::pair<BitFlipNet, BfTrainReport> train_bit_flip(const std::vector<DeltaRecord>& records, int bit_width,
                                                           const TrainConfig& cfg, std::int64_t seed,
                                                           int channels = 8, double weight_cap = 1e18) {
    if (records.empty()) throw UsageError("train_bit_flip: no records");
    cfg.validate();

    BfTrainReport report;
    for (const DeltaRecord& r : records) {
        if (r.delta_p < -1 || r.delta_p > 1) throw UsageError("train_bit_flip: delta_p outside {-1, 0, 1}");
        ++report.class_counts[static_cast<std::size_t>(r.delta_p + 1)];
    }
    int distinct = 0;
    for (long long c : report.class_counts) distinct += c > 0 ? 1 : 0;

    BitFlipNet bf;
    bf.target_bit_width = bit_width;
    bf.input_lo = records.front().delta_a;
    bf.input_hi = records.front().delta_a;
    for (const DeltaRecord& r : records) {
        bf.input_lo = std::min(bf.input_lo, r.delta_a);
        bf.input_hi = std::max(bf.input_hi, r.delta_a);
    }

    if (distinct < 2) {
        int label = 1;
        for (int c = 0; c < 3; ++c) {
            if (report.class_counts[static_cast<std::size_t>(c)] > 0) label = c;
        }
        bf.net = quantize_model(detail::constant_class_net(channels, label), bit_width);
        report.degenerate = true;
        report.train_accuracy = 1.0;
        report.warning = "degenerate record set: single label, constant net emitting " + std::to_string(label - 1);
        return {std::move(bf), report};
    }

    Dataset train_set;
    train_set.num_classes = 3;
    train_set.domain_tag = "bitflip-records";
    train_set.examples.reserve(records.size());
    std::vector<double> weights;
    weights.reserve(records.size());
    const double total = static_cast<double>(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        Example e;
        e.id = static_cast<std::int64_t>(i);
        e.features = {records[i].delta_a};
        e.label = records[i].delta_p + 1;
        train_set.examples.push_back(std::move(e));
        const double freq_weight =
            total / (3.0 * static_cast<double>(report.class_counts[static_cast<std::size_t>(records[i].delta_p + 1)]));
        weights.push_back(std::min(freq_weight, weight_cap));
    }

    FpModel net = build_model(bitflip_arch(channels), mix_seed(seed, 1));
    TrainConfig train_cfg = cfg;
    train_cfg.seed = mix_seed(seed, 2);
    for (int e = 0; e < cfg.epochs; ++e) train_epoch(net, train_set, train_cfg, weights);

    bf.net = quantize_model(net, bit_width);

    const FpModel deployed = dequantize(bf.net);
    std::size_t hits = 0;
    for (const DeltaRecord& r : records) {
        hits += (detail::predict_step(deployed, r.delta_a) == r.delta_p) ? 1 : 0;
    }
    report.train_accuracy = static_cast<double>(hits) / total;
    return {std::move(bf), report};
}

inline int bf_predict(const BitFlipNet& bf, double delta_a) {
    return detail::predict_step(dequantize(bf.net), std::clamp(delta_a, bf.input_lo, bf.input_hi), bf.hold_margin);
}

inline std::vector<int> bf_predict_batch(const BitFlipNet& bf, const std::vector<double>& deltas) {
    const FpModel deployed = dequantize(bf.net);
    std::vector<int> steps;
    steps.reserve(deltas.size());
    for (double d : deltas) {
        steps.push_back(detail::predict_step(deployed, std::clamp(d, bf.input_lo, bf.input_hi), bf.hold_margin));
    }
    return steps;
}

// ---------------------------------------------------------------------------
// Back-propagation-free calibration: per epoch, one forward sweep over the
// core plus the stream batch collects the activation means, the bit-flipping
// network predicts each parameter's step, and the codes move by at most one,
// clamped to the bit range. No gradient is computed anywhere in this path.
// ---------------------------------------------------------------------------

using CalibrationObserver = std::function<void(int epoch, const QuantModel&)>;

inline QuantModel bf_calibrate(const QuantModel& qm, const BitFlipNet& bf, const QCoreSet& core,
                               const StreamBatch& batch, const CalibrationConfig& cfg, const ExamplePool& pool,
                               const CalibrationObserver& observer = {}) {
    cfg.validate();
    if (bf.target_bit_width != qm.bit_width) {
        throw UsageError("bf_calibrate: bit-flipping network trained for " + std::to_string(bf.target_bit_width) +
                         "-bit models, got a " + std::to_string(qm.bit_width) + "-bit model");
    }

    std::vector<std::int64_t> ids = core.example_ids;
    for (const Example& e : batch.examples.examples) ids.push_back(e.id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    if (ids.empty()) throw UsageError("bf_calibrate: empty calibration union");
    std::vector<const Example*> x;
    x.reserve(ids.size());
    for (std::int64_t id : ids) x.push_back(&pool.get(id));

    QuantModel model = qm;
    const int lo = model.code_min(), hi = model.code_max();
    std::vector<double> deltas;
    for (int s = 1; s <= cfg.epochs; ++s) {
        const FpModel fp = dequantize(model);
        const ActivationStats stats = collect_activation_stats(fp, x);

        deltas.clear();
        for (std::size_t li = 0; li < model.layers.size(); ++li) {
            const QuantLayer& ql = model.layers[li];
            const Layer& fl = fp.layers[li];
            const std::size_t wc = ql.weight_count();
            for (std::size_t p = 0; p < ql.param_count(); ++p) {
                const double act = activation_for_param(fl, stats.per_layer[li], p);
                const double w = p < wc ? static_cast<double>(fl.weights[p]) : static_cast<double>(fl.bias[p - wc]);
                deltas.push_back(w * act - act);
            }
        }
        const std::vector<int> steps = bf_predict_batch(bf, deltas);

        std::size_t cursor = 0;
        for (QuantLayer& ql : model.layers) {
            const std::size_t wc = ql.weight_count();
            for (std::size_t p = 0; p < ql.param_count(); ++p) {
                std::int8_t& code = p < wc ? ql.weights.codes[p] : ql.bias.codes[p - wc];
                const int next = std::clamp(static_cast<int>(code) + steps[cursor++], lo, hi);
                code = static_cast<std::int8_t>(next);
            }
        }
        if (observer) observer(s, model);
    }
    return model;
}

// ---------------------------------------------------------------------------
// Persistence. The bit-flipping checkpoint is the quantized "QCQM" payload
// behind a header tag naming the target model's bit width.
// ---------------------------------------------------------------------------

inline void save_bitflip(const BitFlipNet& bf, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw UsageError("save_bitflip: cannot open '" + path + "' for writing");
    io::write_bytes(os, "QCBF", 4);
    io::write_u32(os, 1);
    io::write_u32(os, static_cast<std::uint32_t>(bf.target_bit_width));
    io::write_f64(os, bf.input_lo);
    io::write_f64(os, bf.input_hi);
    io::write_f64(os, bf.hold_margin);
    save_quant_checkpoint(bf.net, os);
}

inline BitFlipNet load_bitflip(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw UsageError("load_bitflip: cannot open '" + path + "'");
    io::expect_magic(is, "QCBF", "load_bitflip");
    const std::uint32_t version = io::read_u32(is);
    if (version != 1) throw UsageError("load_bitflip: unsupported version " + std::to_string(version));
    BitFlipNet bf;
    bf.target_bit_width = static_cast<int>(io::read_u32(is));
    bf.input_lo = io::read_f64(is);
    bf.input_hi = io::read_f64(is);
    bf.hold_margin = io::read_f64(is);
    bf.net = load_quant_checkpoint(is);
    if (bf.net.bit_width != bf.target_bit_width) {
        throw UsageError("load_bitflip: payload bit width does not match header tag");
    }
    return bf;
}

inline void save_delta_records(const std::vector<DeltaRecord>& records, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw UsageError("save_delta_records: cannot open '" + path + "' for writing");
    os << "layer\tindex\tepoch\tdeltaA\tdeltaP\n";
    char buf[64];
    for (const DeltaRecord& r : records) {
        std::snprintf(buf, sizeof buf, "%.17g", r.delta_a);
        os << r.param.layer << "\t" << r.param.index << "\t" << r.epoch << "\t" << buf << "\t" << r.delta_p << "\n";
    }
}

}  // namespace qcore

#endif  // QCORE_BITFLIP_HPP
