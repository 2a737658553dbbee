#ifndef QCORE_DATASET_HPP
#define QCORE_DATASET_HPP

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qcore/common.hpp"

namespace qcore {

struct Example {
    std::int64_t id = 0;
    std::vector<double> features;
    int label = 0;
};

struct Dataset {
    std::vector<Example> examples;
    int num_classes = 0;
    std::string domain_tag;

    std::size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }

    int dim() const { return examples.empty() ? 0 : static_cast<int>(examples.front().features.size()); }

    void validate() const {
        std::vector<std::int64_t> ids;
        ids.reserve(examples.size());
        const std::size_t d = examples.empty() ? 0 : examples.front().features.size();
        for (const Example& e : examples) {
            if (e.label < 0 || e.label >= num_classes) {
                throw UsageError("dataset '" + domain_tag + "': label " + std::to_string(e.label) +
                                 " outside [0, " + std::to_string(num_classes) + ") for example " +
                                 std::to_string(e.id));
            }
            if (e.features.size() != d) {
                throw UsageError("dataset '" + domain_tag + "': inconsistent feature dimension for example " +
                                 std::to_string(e.id));
            }
            ids.push_back(e.id);
        }
        std::sort(ids.begin(), ids.end());
        if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
            throw UsageError("dataset '" + domain_tag + "': duplicate example ids");
        }
    }
};

// A stream batch: labeled calibration examples plus the held-out slice used to
// score the model after calibrating on this batch.
struct StreamBatch {
    int batch_index = 0;
    Dataset examples;
    Dataset paired_test_slice;
};

// Resolves stable example ids back to feature vectors across domains.
class ExamplePool {
public:
    ExamplePool() = default;

    void add(const Dataset& ds) {
        for (const Example& e : ds.examples) {
            by_id_.emplace(e.id, e);
        }
        num_classes_ = std::max(num_classes_, ds.num_classes);
    }

    const Example& get(std::int64_t id) const {
        auto it = by_id_.find(id);
        if (it == by_id_.end()) {
            throw UsageError("example pool: unknown example id " + std::to_string(id));
        }
        return it->second;
    }

    bool contains(std::int64_t id) const { return by_id_.count(id) != 0; }
    std::size_t size() const { return by_id_.size(); }
    int num_classes() const { return num_classes_; }

private:
    std::map<std::int64_t, Example> by_id_;
    int num_classes_ = 0;
};

// ---------------------------------------------------------------------------
// CSV ingestion. Header row, '.' decimal separator, feature columns then label.
// ---------------------------------------------------------------------------

struct CsvSchema {
    std::vector<int> feature_columns;
    int label_column = -1;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

}  // namespace detail

inline Dataset load_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw UsageError("load_csv: cannot open '" + path + "'");
    if (schema.feature_columns.empty() || schema.label_column < 0) {
        throw UsageError("load_csv: schema must name feature columns and a label column");
    }

    std::string line;
    if (!std::getline(in, line)) throw UsageError("load_csv: '" + path + "' is empty (missing header)");
    const std::size_t header_cells = detail::split_csv_line(line).size();

    Dataset ds;
    ds.domain_tag = path;
    int max_label = -1;
    std::int64_t row = 1;  // header was row 1
    std::int64_t next_id = 0;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const std::vector<std::string> cells = detail::split_csv_line(line);
        if (cells.size() != header_cells) {
            throw UsageError("load_csv: row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                             " cells, expected " + std::to_string(header_cells));
        }
        Example e;
        e.id = next_id++;
        e.features.reserve(schema.feature_columns.size());
        for (int col : schema.feature_columns) {
            if (col < 0 || static_cast<std::size_t>(col) >= cells.size()) {
                throw UsageError("load_csv: row " + std::to_string(row) + ": feature column " +
                                 std::to_string(col) + " out of range");
            }
            try {
                std::size_t used = 0;
                const double v = std::stod(cells[static_cast<std::size_t>(col)], &used);
                if (used != cells[static_cast<std::size_t>(col)].size()) throw std::invalid_argument("trailing");
                e.features.push_back(v);
            } catch (const std::exception&) {
                throw UsageError("load_csv: row " + std::to_string(row) + ": cannot parse feature '" +
                                 cells[static_cast<std::size_t>(col)] + "'");
            }
        }
        const std::string& label_cell = cells[static_cast<std::size_t>(schema.label_column)];
        try {
            std::size_t used = 0;
            const int label = std::stoi(label_cell, &used);
            if (used != label_cell.size()) throw std::invalid_argument("trailing");
            if (label < 0) throw std::invalid_argument("negative");
            e.label = label;
        } catch (const std::exception&) {
            throw UsageError("load_csv: row " + std::to_string(row) + ": unknown label '" + label_cell + "'");
        }
        max_label = std::max(max_label, e.label);
        ds.examples.push_back(std::move(e));
    }
    ds.num_classes = max_label + 1;
    ds.validate();
    return ds;
}

// Writes features with enough digits that load_csv round-trips them bit-exactly.
inline void save_csv(const std::string& path, const Dataset& ds) {
    std::ofstream out(path);
    if (!out) throw UsageError("save_csv: cannot open '" + path + "' for writing");
    const int d = ds.dim();
    for (int i = 0; i < d; ++i) out << "f" << i << ",";
    out << "label\n";
    char buf[64];
    for (const Example& e : ds.examples) {
        for (double v : e.features) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            out << buf << ",";
        }
        out << e.label << "\n";
    }
}

// ---------------------------------------------------------------------------
// Synthetic domain-shift generation: k Gaussian clusters, target translated
// along a seeded direction with seeded per-class spread perturbation.
// ---------------------------------------------------------------------------

struct DriftSpec {
    int dim = 16;
    int num_classes = 4;
    int n_source = 2000;
    int n_target = 2000;
    double shift_magnitude = 0.0;
    std::int64_t seed = 0;
};

namespace detail {

// Cluster noise is a truncated Gaussian: unbounded tails would plant examples
// deep inside a sibling class, which reads as label noise rather than genuine
// boundary difficulty.
inline constexpr double kClusterNoiseClip = 2.2;

template <class Mode>
inline Dataset sample_modes(const std::vector<Mode>& modes, const std::vector<double>& class_stddevs,
                            int num_classes, int n, std::int64_t seed, std::int64_t id_offset,
                            const std::string& tag) {
    Dataset ds;
    ds.num_classes = num_classes;
    ds.domain_tag = tag;
    Rng rng(seed);
    const int d = static_cast<int>(modes.front().mean.size());

    // Round-robin over classes, and within each class over its modes.
    std::vector<std::vector<std::size_t>> class_modes(static_cast<std::size_t>(num_classes));
    for (std::size_t m = 0; m < modes.size(); ++m) {
        class_modes[static_cast<std::size_t>(modes[m].label)].push_back(m);
    }
    std::vector<std::size_t> next_mode(static_cast<std::size_t>(num_classes), 0);

    ds.examples.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int label = i % num_classes;
        auto& rotation = next_mode[static_cast<std::size_t>(label)];
        const auto& owned = class_modes[static_cast<std::size_t>(label)];
        const Mode& mode = modes[owned[rotation]];
        rotation = (rotation + 1) % owned.size();

        Example e;
        e.id = id_offset + i;
        e.label = label;
        e.features.resize(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) {
            const double z = std::clamp(rng.normal(), -kClusterNoiseClip, kClusterNoiseClip);
            e.features[static_cast<std::size_t>(j)] =
                mode.mean[static_cast<std::size_t>(j)] + class_stddevs[static_cast<std::size_t>(label)] * z;
        }
        ds.examples.push_back(std::move(e));
    }
    return ds;
}

}  // namespace detail

inline std::pair<Dataset, Dataset> make_drift_pair(const DriftSpec& spec) {
    if (spec.shift_magnitude < 0) throw UsageError("make_drift_pair: shiftMagnitude must be >= 0");
    if (spec.dim < 1 || spec.num_classes < 2) throw UsageError("make_drift_pair: need dim >= 1 and >= 2 classes");

    const int k = spec.num_classes;
    const int d = spec.dim;

    // Each class is a mixture of Gaussian modes, and modes from different
    // classes meet pairwise at shared contested sites of graded tightness.
    // This mirrors multi-modal sensor classes, where a fixed-budget subset can
    // only calibrate well if it covers every contested region: the tight sites
    // concentrate the examples a reduced-precision model loses first, and the
    // graded separations spread those examples across distinct difficulty
    // levels. At shift zero the target reproduces the source distribution
    // exactly; otherwise every mode drifts along its own seeded direction and
    // the per-class spread is perturbed, so the relative geometry of the
    // contested sites changes.
    const int sites = 2 * k;  // two modes per site, four modes per class
    const double site_tightness[4] = {1.4, 1.8, 2.4, 3.2};

    Rng mean_rng(mix_seed(spec.seed, 1));
    struct Mode {
        int label;
        std::vector<double> mean;
    };
    std::vector<Mode> modes;
    for (int s = 0; s < sites; ++s) {
        std::vector<double> center(static_cast<std::size_t>(d));
        for (double& v : center) v = mean_rng.uniform(-3.0, 3.0);
        std::vector<double> axis(static_cast<std::size_t>(d));
        double norm = 0.0;
        for (double& v : axis) {
            v = mean_rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(std::max(norm, 1e-12));
        const double separation = site_tightness[s % 4];
        const int class_a = s % k;
        const int class_b = (s + 1 + (s / k)) % k == class_a ? (class_a + 1) % k : (s + 1 + (s / k)) % k;
        for (int member = 0; member < 2; ++member) {
            Mode mode;
            mode.label = member == 0 ? class_a : class_b;
            mode.mean.resize(static_cast<std::size_t>(d));
            const double side = member == 0 ? 0.5 : -0.5;
            for (int j = 0; j < d; ++j) {
                mode.mean[static_cast<std::size_t>(j)] =
                    center[static_cast<std::size_t>(j)] + side * separation * axis[static_cast<std::size_t>(j)] / norm;
            }
            modes.push_back(std::move(mode));
        }
    }

    // Per-mode seeded unit drift directions and per-class spread factors; both
    // proportional to the shift magnitude.
    Rng dir_rng(mix_seed(spec.seed, 2));
    std::vector<std::vector<double>> drift(modes.size());
    for (auto& direction : drift) {
        direction.resize(static_cast<std::size_t>(d));
        double norm = 0.0;
        for (double& v : direction) {
            v = dir_rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(std::max(norm, 1e-12));
        for (double& v : direction) v /= norm;
    }
    std::vector<double> rho(static_cast<std::size_t>(k));
    for (double& r : rho) r = dir_rng.uniform(-0.1, 0.1);

    std::vector<Mode> target_modes = modes;
    for (std::size_t m = 0; m < modes.size(); ++m) {
        for (int j = 0; j < d; ++j) {
            target_modes[m].mean[static_cast<std::size_t>(j)] += spec.shift_magnitude * drift[m][static_cast<std::size_t>(j)];
        }
    }

    const double base_std = 1.0;
    std::vector<double> source_std(static_cast<std::size_t>(k), base_std);
    std::vector<double> target_std(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) {
        target_std[static_cast<std::size_t>(c)] =
            std::max(0.2, base_std * (1.0 + spec.shift_magnitude * rho[static_cast<std::size_t>(c)]));
    }

    Dataset source = detail::sample_modes(modes, source_std, k, spec.n_source, mix_seed(spec.seed, 3), 0, "source");
    Dataset target = detail::sample_modes(target_modes, target_std, k, spec.n_target, mix_seed(spec.seed, 4),
                                          spec.n_source, "target");
    return {std::move(source), std::move(target)};
}

// ---------------------------------------------------------------------------
// Stream splitting. The target domain is shuffled and divided into nBatches
// calibration slices, each paired with a disjoint test slice; calibration and
// test slices together partition the target domain.
// ---------------------------------------------------------------------------

inline std::vector<StreamBatch> split_stream(const Dataset& target, int n_batches, std::int64_t seed,
                                             double test_fraction = 0.5) {
    if (n_batches < 1) throw UsageError("split_stream: nBatches must be >= 1");
    if (test_fraction <= 0.0 || test_fraction >= 1.0) {
        throw UsageError("split_stream: test fraction must lie in (0, 1)");
    }
    if (static_cast<std::size_t>(n_batches) > target.size() / 2) {
        throw UsageError("split_stream: too few examples (" + std::to_string(target.size()) + ") for " +
                         std::to_string(n_batches) + " batches");
    }

    std::vector<std::size_t> order(target.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    const std::size_t n = target.size();
    std::size_t n_test = static_cast<std::size_t>(round_half_away(test_fraction * static_cast<double>(n)));
    n_test = std::min(std::max<std::size_t>(n_test, static_cast<std::size_t>(n_batches)),
                      n - static_cast<std::size_t>(n_batches));

    // First n_test shuffled positions form the test portion; the rest calibrate.
    auto slice_bounds = [](std::size_t total, int parts, int idx) {
        const std::size_t base = total / static_cast<std::size_t>(parts);
        const std::size_t extra = total % static_cast<std::size_t>(parts);
        const std::size_t lo = base * static_cast<std::size_t>(idx) + std::min<std::size_t>(idx, extra);
        const std::size_t hi = lo + base + (static_cast<std::size_t>(idx) < extra ? 1 : 0);
        return std::pair<std::size_t, std::size_t>(lo, hi);
    };

    std::vector<StreamBatch> batches(static_cast<std::size_t>(n_batches));
    for (int t = 0; t < n_batches; ++t) {
        StreamBatch& b = batches[static_cast<std::size_t>(t)];
        b.batch_index = t;
        b.examples.num_classes = target.num_classes;
        b.examples.domain_tag = target.domain_tag + "/batch" + std::to_string(t);
        b.paired_test_slice.num_classes = target.num_classes;
        b.paired_test_slice.domain_tag = target.domain_tag + "/test" + std::to_string(t);

        const auto [tl, th] = slice_bounds(n_test, n_batches, t);
        for (std::size_t i = tl; i < th; ++i) b.paired_test_slice.examples.push_back(target.examples[order[i]]);
        const auto [cl, ch] = slice_bounds(n - n_test, n_batches, t);
        for (std::size_t i = cl; i < ch; ++i) {
            b.examples.examples.push_back(target.examples[order[n_test + i]]);
        }
    }
    return batches;
}

inline double dataset_fraction_of_class(const Dataset& ds, int label) {
    if (ds.empty()) return 0.0;
    std::size_t n = 0;
    for (const Example& e : ds.examples) n += (e.label == label) ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(ds.size());
}

}  // namespace qcore

#endif  // QCORE_DATASET_HPP
