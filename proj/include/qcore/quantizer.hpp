#ifndef QCORE_QUANTIZER_HPP
#define QCORE_QUANTIZER_HPP

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "qcore/common.hpp"
#include "qcore/nn.hpp"

namespace qcore {

// Sentinel level meaning "no quantization"; used by the miss tracker to build
// the full-precision miss distribution alongside the quantized ones.
inline constexpr int kFullPrecisionLevel = 32;

inline constexpr double kMinScale = 1e-12;

// Uniform affine quantization of one parameter tensor. Codes are signed j-bit
// integers; the grid spans [min, max] with 2^j points, so scale is
// (max - min) / (2^j - 1) and the zero point is anchored half a range above
// the minimum. Signed codes are an equivalent relabeling of the unsigned
// buckets: unsigned bucket u = code + 2^(j-1).
struct QuantTensor {
    std::vector<std::int8_t> codes;
    double scale = 1.0;
    double zero_point = 0.0;

    double dequantize_code(std::int8_t c) const { return static_cast<double>(c) * scale + zero_point; }
};

struct QuantLayer {
    LayerKind kind = LayerKind::Relu;
    LayerShape shape;
    int kernel = 0;
    QuantTensor weights;
    QuantTensor bias;

    std::size_t weight_count() const { return weights.codes.size(); }
    std::size_t param_count() const { return weights.codes.size() + bias.codes.size(); }
};

struct QuantModel {
    int bit_width = 8;
    std::vector<QuantLayer> layers;
    ArchDescriptor source_arch;

    int code_min() const { return -(1 << (bit_width - 1)); }
    int code_max() const { return (1 << (bit_width - 1)) - 1; }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const QuantLayer& l : layers) n += l.param_count();
        return n;
    }
};

namespace detail {

inline std::int8_t clamp_code(long long c, int bit_width) {
    const long long lo = -(1LL << (bit_width - 1));
    const long long hi = (1LL << (bit_width - 1)) - 1;
    return static_cast<std::int8_t>(std::clamp(c, lo, hi));
}

inline QuantTensor quantize_tensor(const std::vector<float>& values, int bit_width) {
    QuantTensor qt;
    qt.codes.resize(values.size());
    if (values.empty()) {
        qt.scale = kMinScale;
        qt.zero_point = 0.0;
        return qt;
    }
    double mn = values[0], mx = values[0];
    for (float v : values) {
        mn = std::min(mn, static_cast<double>(v));
        mx = std::max(mx, static_cast<double>(v));
    }
    const long long grid_points = (1LL << bit_width) - 1;
    if (mx <= mn) {
        // Degenerate constant tensor: every code 0, reconstructed exactly.
        qt.scale = kMinScale;
        qt.zero_point = mn;
        std::fill(qt.codes.begin(), qt.codes.end(), std::int8_t{0});
        return qt;
    }
    qt.scale = std::max((mx - mn) / static_cast<double>(grid_points), kMinScale);
    qt.zero_point = mn + static_cast<double>(1LL << (bit_width - 1)) * qt.scale;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const long long code = round_half_away((static_cast<double>(values[i]) - qt.zero_point) / qt.scale);
        qt.codes[i] = clamp_code(code, bit_width);
    }
    return qt;
}

}  // namespace detail

// Code for a single value on an existing grid; used when calibration projects
// updated real weights back onto the fixed quantization grid.
inline std::int8_t quantize_value(double v, const QuantTensor& grid, int bit_width) {
    return detail::clamp_code(round_half_away((v - grid.zero_point) / grid.scale), bit_width);
}

inline QuantModel quantize_model(const FpModel& model, int bit_width) {
    if (bit_width < 2 || bit_width > 8) {
        throw UsageError("quantize_model: bit width " + std::to_string(bit_width) + " outside [2, 8]");
    }
    QuantModel qm;
    qm.bit_width = bit_width;
    qm.source_arch = model.descriptor();
    qm.layers.reserve(model.layers.size());
    for (const Layer& l : model.layers) {
        QuantLayer ql;
        ql.kind = l.kind;
        ql.shape = l.shape;
        ql.kernel = l.kernel;
        ql.weights = detail::quantize_tensor(l.weights, bit_width);
        ql.bias = detail::quantize_tensor(l.bias, bit_width);
        qm.layers.push_back(std::move(ql));
    }
    return qm;
}

inline FpModel dequantize(const QuantModel& qm) {
    FpModel model;
    model.input_channels = qm.source_arch.input_channels;
    model.input_width = qm.source_arch.input_width;
    model.layers.reserve(qm.layers.size());
    for (const QuantLayer& ql : qm.layers) {
        Layer l;
        l.kind = ql.kind;
        l.shape = ql.shape;
        l.kernel = ql.kernel;
        l.weights.resize(ql.weights.codes.size());
        for (std::size_t i = 0; i < l.weights.size(); ++i) {
            l.weights[i] = static_cast<float>(ql.weights.dequantize_code(ql.weights.codes[i]));
        }
        l.bias.resize(ql.bias.codes.size());
        for (std::size_t i = 0; i < l.bias.size(); ++i) {
            l.bias[i] = static_cast<float>(ql.bias.dequantize_code(ql.bias.codes[i]));
        }
        model.layers.push_back(std::move(l));
    }
    return model;
}

// Reference semantics: inference with quantized parameters is exactly the
// full-precision forward pass over the dequantized weights.
inline Prediction forward_quant(const QuantModel& qm, std::span<const double> x) {
    return forward(dequantize(qm), x);
}

inline Prediction forward_quant(const QuantModel& qm, const Example& e) { return forward_quant(qm, e.features); }

inline double quant_accuracy(const QuantModel& qm, const Dataset& data) {
    return dataset_accuracy(dequantize(qm), data);
}

struct QuantLevels {
    std::vector<int> levels;

    void validate() const {
        if (levels.empty()) throw UsageError("quantization levels: set must be nonempty");
        for (int j : levels) {
            if (j < 2) throw UsageError("quantization levels: level " + std::to_string(j) + " must be >= 2");
        }
    }

    bool contains(int j) const { return std::find(levels.begin(), levels.end(), j) != levels.end(); }
};

// ---------------------------------------------------------------------------
// Quantized checkpoint "QCQM": header (magic, version, bit width), embedded
// architecture descriptor, then per-tensor scale/zero-point as 64-bit reals
// and codes packed one signed byte per code.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_quant_tensor(std::ostream& os, const QuantTensor& qt) {
    io::write_f64(os, qt.scale);
    io::write_f64(os, qt.zero_point);
    io::write_u32(os, static_cast<std::uint32_t>(qt.codes.size()));
    io::write_bytes(os, qt.codes.data(), qt.codes.size());
}

inline QuantTensor read_quant_tensor(std::istream& is) {
    QuantTensor qt;
    qt.scale = io::read_f64(is);
    qt.zero_point = io::read_f64(is);
    qt.codes.resize(io::read_u32(is));
    if (!qt.codes.empty()) io::read_bytes(is, qt.codes.data(), qt.codes.size());
    return qt;
}

}  // namespace detail

inline void save_quant_checkpoint(const QuantModel& qm, std::ostream& os) {
    io::write_bytes(os, "QCQM", 4);
    io::write_u32(os, 1);
    io::write_u32(os, static_cast<std::uint32_t>(qm.bit_width));
    io::write_string(os, qm.source_arch.serialize());
    io::write_u32(os, static_cast<std::uint32_t>(qm.layers.size()));
    for (const QuantLayer& l : qm.layers) {
        io::write_bytes(os, &l.kind, 1);
        io::write_u32(os, static_cast<std::uint32_t>(l.shape.in_channels));
        io::write_u32(os, static_cast<std::uint32_t>(l.shape.in_width));
        io::write_u32(os, static_cast<std::uint32_t>(l.shape.out_channels));
        io::write_u32(os, static_cast<std::uint32_t>(l.shape.out_width));
        io::write_u32(os, static_cast<std::uint32_t>(l.kernel));
        detail::write_quant_tensor(os, l.weights);
        detail::write_quant_tensor(os, l.bias);
    }
}

inline void save_quant_checkpoint(const QuantModel& qm, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw UsageError("save_quant_checkpoint: cannot open '" + path + "' for writing");
    save_quant_checkpoint(qm, os);
}

inline QuantModel load_quant_checkpoint(std::istream& is) {
    io::expect_magic(is, "QCQM", "load_quant_checkpoint");
    const std::uint32_t version = io::read_u32(is);
    if (version != 1) throw UsageError("load_quant_checkpoint: unsupported version " + std::to_string(version));
    QuantModel qm;
    qm.bit_width = static_cast<int>(io::read_u32(is));
    qm.source_arch = ArchDescriptor::parse_string(io::read_string(is));
    const std::uint32_t n_layers = io::read_u32(is);
    for (std::uint32_t li = 0; li < n_layers; ++li) {
        QuantLayer l;
        io::read_bytes(is, &l.kind, 1);
        l.shape.in_channels = static_cast<int>(io::read_u32(is));
        l.shape.in_width = static_cast<int>(io::read_u32(is));
        l.shape.out_channels = static_cast<int>(io::read_u32(is));
        l.shape.out_width = static_cast<int>(io::read_u32(is));
        l.kernel = static_cast<int>(io::read_u32(is));
        l.weights = detail::read_quant_tensor(is);
        l.bias = detail::read_quant_tensor(is);
        qm.layers.push_back(std::move(l));
    }
    return qm;
}

inline QuantModel load_quant_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw UsageError("load_quant_checkpoint: cannot open '" + path + "'");
    return load_quant_checkpoint(is);
}

}  // namespace qcore

#endif  // QCORE_QUANTIZER_HPP
