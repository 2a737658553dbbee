#ifndef QCORE_HARNESS_HPP
#define QCORE_HARNESS_HPP

#include <chrono>
#include <cstdio>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qcore/bitflip.hpp"
#include "qcore/calibration.hpp"
#include "qcore/common.hpp"
#include "qcore/coreset.hpp"
#include "qcore/dataset.hpp"
#include "qcore/miss_tracker.hpp"
#include "qcore/nn.hpp"
#include "qcore/quantizer.hpp"

namespace qcore {

enum class RunMode { Full, NoUpdate, NoBf, BpStream };

inline const char* run_mode_name(RunMode m) {
    switch (m) {
        case RunMode::Full: return "FULL";
        case RunMode::NoUpdate: return "NO_UPDATE";
        case RunMode::NoBf: return "NO_BF";
        case RunMode::BpStream: return "BP_STREAM";
    }
    return "?";
}

inline RunMode run_mode_from_name(const std::string& s) {
    if (s == "full" || s == "FULL") return RunMode::Full;
    if (s == "no-update" || s == "NO_UPDATE") return RunMode::NoUpdate;
    if (s == "no-bf" || s == "NO_BF") return RunMode::NoBf;
    if (s == "bp" || s == "BP_STREAM") return RunMode::BpStream;
    throw UsageError("unknown run mode '" + s + "' (expected full, no-update, no-bf or bp)");
}

enum class SubsetStrategy { QCore, Random, CoreJ, Core32 };

struct CsvSource {
    std::string source_path;
    std::string target_path;
    CsvSchema schema;
};

struct ExperimentConfig {
    std::optional<ArchDescriptor> arch;
    QuantLevels levels{{2, 4, 8}};
    int core_budget = 30;
    int n_batches = 10;
    std::vector<std::int64_t> seeds{1, 2, 3, 4, 5};
    int workers = 1;
    double test_fraction = 0.5;
    bool track_full_precision = true;

    TrainConfig train{0.05, 100, 32, 0};
    // Step anneal for the backbone: late epochs run at a reduced rate so the
    // per-epoch quantized proxies settle and the miss counts reflect example
    // difficulty rather than optimizer jitter.
    double train_anneal_fraction = 1.0;  // 1.0 = no anneal
    double train_anneal_factor = 0.2;
    TrainConfig bp_calibration{0.05, 40, 30, 0};
    TrainConfig bf_train{0.05, 60, 32, 0};
    int bf_channels = 8;
    CalibrationConfig calibration{5, 0.5};

    // Bit-flip deployment policy. The hold margin gates flips by the score
    // lead the flip class needs over the hold class; a wrong flip costs about
    // one quantization step, so coarse levels get prohibitive defaults.
    std::map<int, double> bf_hold_margins{{2, 1e6}, {4, 0.75}, {8, 0.25}};
    double bf_default_hold_margin = 0.5;
    // Fraction of the recording calibration treated as warm-up; the flip net
    // trains on the stable phase after it.
    double bf_warmup_fraction = 0.5;

    // Subset comparison estimator: sampled subsets are redrawn this many times
    // per seed and their calibrated accuracies averaged, which removes most of
    // the single-draw lottery from the strategy comparison.
    int comparison_draws = 5;

    double hold_margin_for(int level) const {
        auto it = bf_hold_margins.find(level);
        return it == bf_hold_margins.end() ? bf_default_hold_margin : it->second;
    }

    std::optional<DriftSpec> drift;
    std::optional<CsvSource> csv;

    void validate() const {
        levels.validate();
        if (core_budget < 1) throw UsageError("experiment config: core budget must be >= 1");
        if (n_batches < 1) throw UsageError("experiment config: nBatches must be >= 1");
        if (seeds.empty()) throw UsageError("experiment config: need at least one seed");
        if (workers < 1) throw UsageError("experiment config: workers must be >= 1");
        if (!drift && !csv) throw UsageError("experiment config: need a drift spec or CSV paths");
        train.validate();
        bp_calibration.validate();
        bf_train.validate();
        calibration.validate();
        for (int j : levels.levels) {
            if (j == kFullPrecisionLevel) continue;
            if (j < 2 || j > 8) throw UsageError("experiment config: level " + std::to_string(j) + " outside [2, 8]");
        }
    }

    static ExperimentConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

namespace detail {

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base) {
    base.learning_rate = j.value("learningRate", base.learning_rate);
    base.epochs = j.value("epochs", base.epochs);
    base.batch_size = j.value("batchSize", base.batch_size);
    return base;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"learningRate", c.learning_rate}, {"epochs", c.epochs}, {"batchSize", c.batch_size}};
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    if (j.contains("arch")) cfg.arch = ArchDescriptor::from_json(j.at("arch"));
    if (j.contains("levels")) cfg.levels.levels = j.at("levels").get<std::vector<int>>();
    cfg.core_budget = j.value("coreBudget", cfg.core_budget);
    cfg.n_batches = j.value("nBatches", cfg.n_batches);
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::int64_t>>();
    cfg.workers = j.value("workers", cfg.workers);
    cfg.test_fraction = j.value("testFraction", cfg.test_fraction);
    cfg.track_full_precision = j.value("trackFullPrecision", cfg.track_full_precision);
    if (j.contains("train")) {
        cfg.train = detail::train_config_from_json(j.at("train"), cfg.train);
        cfg.train_anneal_fraction = j.at("train").value("annealFraction", cfg.train_anneal_fraction);
        cfg.train_anneal_factor = j.at("train").value("annealFactor", cfg.train_anneal_factor);
    }
    if (j.contains("bpCalibration")) cfg.bp_calibration = detail::train_config_from_json(j.at("bpCalibration"), cfg.bp_calibration);
    if (j.contains("bfTrain")) {
        cfg.bf_train = detail::train_config_from_json(j.at("bfTrain"), cfg.bf_train);
        cfg.bf_channels = j.at("bfTrain").value("channels", cfg.bf_channels);
    }
    if (j.contains("calibration")) {
        cfg.calibration.epochs = j.at("calibration").value("epochs", cfg.calibration.epochs);
        cfg.calibration.flip_threshold = j.at("calibration").value("flipThreshold", cfg.calibration.flip_threshold);
    }
    if (j.contains("bfPolicy")) {
        const auto& pj = j.at("bfPolicy");
        cfg.bf_default_hold_margin = pj.value("defaultHoldMargin", cfg.bf_default_hold_margin);
        cfg.bf_warmup_fraction = pj.value("warmupFraction", cfg.bf_warmup_fraction);
        if (pj.contains("holdMargins")) {
            cfg.bf_hold_margins.clear();
            for (const auto& [key, value] : pj.at("holdMargins").items()) {
                cfg.bf_hold_margins[std::stoi(key)] = value.get<double>();
            }
        }
    }
    if (j.contains("data")) {
        const auto& dj = j.at("data");
        if (dj.contains("drift")) {
            DriftSpec spec;
            const auto& sj = dj.at("drift");
            spec.dim = sj.value("d", spec.dim);
            spec.num_classes = sj.value("k", spec.num_classes);
            spec.n_source = sj.value("nSource", spec.n_source);
            spec.n_target = sj.value("nTarget", spec.n_target);
            spec.shift_magnitude = sj.value("shift", spec.shift_magnitude);
            cfg.drift = spec;
        }
        if (dj.contains("csv")) {
            CsvSource src;
            const auto& sj = dj.at("csv");
            src.source_path = sj.at("sourcePath").get<std::string>();
            src.target_path = sj.at("targetPath").get<std::string>();
            src.schema.feature_columns = sj.at("featureColumns").get<std::vector<int>>();
            src.schema.label_column = sj.at("labelColumn").get<int>();
            cfg.csv = src;
        }
    }
    cfg.validate();
    return cfg;
}

inline nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j;
    if (arch) j["arch"] = arch->to_json();
    j["levels"] = levels.levels;
    j["coreBudget"] = core_budget;
    j["nBatches"] = n_batches;
    j["seeds"] = seeds;
    j["workers"] = workers;
    j["testFraction"] = test_fraction;
    j["trackFullPrecision"] = track_full_precision;
    j["train"] = detail::train_config_to_json(train);
    j["train"]["annealFraction"] = train_anneal_fraction;
    j["train"]["annealFactor"] = train_anneal_factor;
    j["bpCalibration"] = detail::train_config_to_json(bp_calibration);
    j["bfTrain"] = detail::train_config_to_json(bf_train);
    j["bfTrain"]["channels"] = bf_channels;
    j["calibration"] = {{"epochs", calibration.epochs}, {"flipThreshold", calibration.flip_threshold}};
    j["bfPolicy"]["defaultHoldMargin"] = bf_default_hold_margin;
    j["bfPolicy"]["warmupFraction"] = bf_warmup_fraction;
    for (const auto& [level, margin] : bf_hold_margins) {
        j["bfPolicy"]["holdMargins"][std::to_string(level)] = margin;
    }
    if (drift) {
        j["data"]["drift"] = {{"d", drift->dim},           {"k", drift->num_classes},
                              {"nSource", drift->n_source}, {"nTarget", drift->n_target},
                              {"shift", drift->shift_magnitude}};
    }
    if (csv) {
        j["data"]["csv"] = {{"sourcePath", csv->source_path},
                            {"targetPath", csv->target_path},
                            {"featureColumns", csv->schema.feature_columns},
                            {"labelColumn", csv->schema.label_column}};
    }
    return j;
}

// ---------------------------------------------------------------------------
// Lane prelude: everything one seed produces before the stream loop starts.
// Shared between run modes so that ablations compare against identical data,
// models and cores.
// ---------------------------------------------------------------------------

struct LevelPrelude {
    int level = 0;
    QuantModel calibrated;  // BP-calibrated on the initial core
    BitFlipNet bitflip;
    BfTrainReport bf_report;
    std::size_t record_count = 0;
};

struct LanePrelude {
    std::int64_t seed = 0;
    Dataset source;
    Dataset target;
    std::vector<StreamBatch> batches;
    Dataset target_test;  // union of the paired test slices
    ExamplePool pool;
    FpModel model;
    MissTable table;
    MissPmf summed_pmf;
    QCoreSet core;
    InfoLossReport info;
    std::vector<LevelPrelude> per_level;
    double final_train_loss = 0.0;
    double fp_source_accuracy = 0.0;
    double fp_target_accuracy = 0.0;
    std::set<std::int64_t> calibration_touched;  // ids seen by any training operation
    std::vector<std::string> warnings;

    void mark_touched(const std::vector<std::int64_t>& ids) {
        calibration_touched.insert(ids.begin(), ids.end());
    }
    void mark_touched(const Dataset& ds) {
        for (const Example& e : ds.examples) calibration_touched.insert(e.id);
    }
    void assert_isolated(const Dataset& test_slice) const {
        for (const Example& e : test_slice.examples) {
            if (calibration_touched.count(e.id)) {
                throw NumericError("evaluation isolation violated: test example " + std::to_string(e.id) +
                                   " was passed to a training operation");
            }
        }
    }
};

namespace detail {

inline ArchDescriptor resolve_arch(const ExperimentConfig& cfg, int dim, int classes) {
    if (cfg.arch) {
        if (cfg.arch->input_channels * cfg.arch->input_width != dim) {
            throw ShapeError("experiment config: architecture expects " +
                             std::to_string(cfg.arch->input_channels * cfg.arch->input_width) +
                             " inputs, data has " + std::to_string(dim));
        }
        return *cfg.arch;
    }
    return ArchDescriptor::conv_dense_net(dim, 4, 3, classes);
}

inline std::pair<Dataset, Dataset> resolve_data(const ExperimentConfig& cfg, std::int64_t seed) {
    if (cfg.drift) {
        DriftSpec spec = *cfg.drift;
        spec.seed = seed;
        return make_drift_pair(spec);
    }
    Dataset source = load_csv(cfg.csv->source_path, cfg.csv->schema);
    Dataset target = load_csv(cfg.csv->target_path, cfg.csv->schema);
    // Disjoint id spaces across the two files.
    for (Example& e : target.examples) e.id += static_cast<std::int64_t>(source.size());
    const int k = std::max(source.num_classes, target.num_classes);
    source.num_classes = k;
    target.num_classes = k;
    return {std::move(source), std::move(target)};
}

class TimingSink {
public:
    void add(const std::string& key, double ms) {
        std::lock_guard<std::mutex> lock(mutex_);
        totals_[key] += ms;
    }
    std::map<std::string, double> totals() const {
        std::lock_guard<std::mutex> lock(mutex_);
        return totals_;
    }

private:
    mutable std::mutex mutex_;
    std::map<std::string, double> totals_;
};

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    double elapsed_ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

inline LanePrelude build_lane_prelude(const ExperimentConfig& cfg, std::int64_t seed,
                                      detail::TimingSink* timing = nullptr) {
    cfg.validate();
    LanePrelude lane;
    lane.seed = seed;

    auto [source, target] = detail::resolve_data(cfg, seed);
    source.validate();
    target.validate();
    lane.source = std::move(source);
    lane.target = std::move(target);
    lane.batches = split_stream(lane.target, cfg.n_batches, mix_seed(seed, 11), cfg.test_fraction);
    lane.pool.add(lane.source);
    lane.pool.add(lane.target);
    lane.target_test.num_classes = lane.target.num_classes;
    lane.target_test.domain_tag = "target-test";
    for (const StreamBatch& b : lane.batches) {
        for (const Example& e : b.paired_test_slice.examples) lane.target_test.examples.push_back(e);
    }

    if (cfg.core_budget < lane.source.num_classes) {
        lane.warnings.push_back("core budget " + std::to_string(cfg.core_budget) + " below class count " +
                                std::to_string(lane.source.num_classes));
    }

    const ArchDescriptor arch = detail::resolve_arch(cfg, lane.source.dim(), lane.source.num_classes);
    if (arch.layers.empty()) throw ShapeError("experiment config: empty architecture");
    lane.model = build_model(arch, mix_seed(seed, 1));
    if (lane.model.num_classes() != lane.source.num_classes) {
        throw ShapeError("experiment config: architecture emits " + std::to_string(lane.model.num_classes()) +
                         " classes, data has " + std::to_string(lane.source.num_classes));
    }

    QuantLevels tracked = cfg.levels;
    if (cfg.track_full_precision && !tracked.contains(kFullPrecisionLevel)) {
        tracked.levels.push_back(kFullPrecisionLevel);
    }
    lane.table = MissTable::create(lane.source, tracked);
    lane.mark_touched(lane.source);

    TrainConfig train_cfg = cfg.train;
    train_cfg.seed = mix_seed(seed, 2);
    const int anneal_start = static_cast<int>(cfg.train_anneal_fraction * cfg.train.epochs);
    {
        detail::Stopwatch sw;
        for (int e = 0; e < cfg.train.epochs; ++e) {
            train_cfg.learning_rate = cfg.train.learning_rate * (e < anneal_start ? 1.0 : cfg.train_anneal_factor);
            {
                PhaseScope phase(Phase::FpTraining);
                lane.final_train_loss = train_epoch(lane.model, lane.source, train_cfg);
            }
            {
                PhaseScope phase(Phase::MissTracking);
                observe_epoch(lane.table, lane.model, tracked, lane.source);
            }
        }
        if (timing) timing->add("fp_training_and_miss_tracking", sw.elapsed_ms());
    }

    {
        PhaseScope phase(Phase::CoreBuild);
        detail::Stopwatch sw;
        lane.summed_pmf = build_pmf_summed(lane.table, cfg.levels);
        lane.core = sample_qcore(lane.source, lane.summed_pmf, lane.table, cfg.core_budget, mix_seed(seed, 3));
        lane.info = info_loss_for_core(lane.core);
        if (timing) timing->add("core_build", sw.elapsed_ms());
    }

    {
        PhaseScope phase(Phase::Evaluation);
        lane.fp_source_accuracy = dataset_accuracy(lane.model, lane.source);
        lane.fp_target_accuracy = dataset_accuracy(lane.model, lane.target_test);
    }

    for (int j : cfg.levels.levels) {
        LevelPrelude lp;
        lp.level = j;
        {
            PhaseScope phase(Phase::BpCalibration);
            detail::Stopwatch sw;
            const QuantModel qm0 = quantize_model(lane.model, j);
            TrainConfig bp_cfg = cfg.bp_calibration;
            bp_cfg.seed = mix_seed(seed, 40 + j);
            auto [calibrated, records] = record_calibration(qm0, lane.core, lane.pool, bp_cfg, cfg.calibration.flip_threshold);
            lp.calibrated = std::move(calibrated);
            lp.record_count = records.size();
            if (timing) timing->add("bp_calibration", sw.elapsed_ms());

            PhaseScope bf_phase(Phase::BfTraining);
            detail::Stopwatch sw_bf;
            // Train the flip net on the stable phase of the calibration; the
            // first epochs fix freshly quantized weights with large transient
            // corrections that are not representative after deployment.
            const int warmup = static_cast<int>(cfg.bf_warmup_fraction * bp_cfg.epochs);
            std::vector<DeltaRecord> stable_records;
            for (const DeltaRecord& r : records) {
                if (r.epoch > warmup) stable_records.push_back(r);
            }
            if (stable_records.empty()) stable_records = records;
            TrainConfig bf_cfg = cfg.bf_train;
            bf_cfg.seed = mix_seed(seed, 50 + j);
            auto [bf, report] = train_bit_flip(stable_records, j, bf_cfg, mix_seed(seed, 50 + j), cfg.bf_channels);
            bf.hold_margin = cfg.hold_margin_for(j);
            lp.bitflip = std::move(bf);
            lp.bf_report = report;
            if (timing) timing->add("bf_training", sw_bf.elapsed_ms());
        }
        lane.per_level.push_back(std::move(lp));
    }
    return lane;
}

// ---------------------------------------------------------------------------
// Stream loop for one seed lane and one mode.
// ---------------------------------------------------------------------------

struct LaneStreamResult {
    // accuracy[level_index][batch]
    std::vector<std::vector<double>> accuracy;
    std::vector<double> static_accuracy;  // per level: calibrated model, frozen, on the pooled test portion
    double stream_loop_ms = 0.0;
};

inline LaneStreamResult run_stream_lane(const ExperimentConfig& cfg, LanePrelude& lane, RunMode mode,
                                        detail::TimingSink* timing = nullptr) {
    LaneStreamResult result;
    result.accuracy.resize(cfg.levels.levels.size());
    result.static_accuracy.resize(cfg.levels.levels.size());

    detail::Stopwatch loop_watch;
    for (std::size_t li = 0; li < cfg.levels.levels.size(); ++li) {
        const int j = cfg.levels.levels[li];
        const LevelPrelude& lp = lane.per_level[li];
        {
            PhaseScope phase(Phase::Evaluation);
            result.static_accuracy[li] = quant_accuracy(lp.calibrated, lane.target_test);
        }

        QuantModel qm = lp.calibrated;
        QCoreSet core = lane.core;
        result.accuracy[li].resize(lane.batches.size());
        for (std::size_t t = 0; t < lane.batches.size(); ++t) {
            const StreamBatch& batch = lane.batches[t];
            lane.mark_touched(batch.examples);

            if (mode != RunMode::NoUpdate) {
                PhaseScope phase(Phase::CoreUpdate);
                detail::Stopwatch sw;
                TrainConfig shadow_cfg = cfg.bp_calibration;
                shadow_cfg.epochs = cfg.calibration.epochs;
                shadow_cfg.seed = mix_seed(lane.seed, 9000 + 100 * j + static_cast<std::int64_t>(t));
                core = update_qcore(core, batch, qm, shadow_cfg, shadow_cfg.seed, lane.pool);
                if (timing) timing->add("core_update", sw.elapsed_ms());
            }

            if (mode == RunMode::Full || mode == RunMode::NoUpdate) {
                PhaseScope phase(Phase::BfCalibration);
                detail::Stopwatch sw;
                qm = bf_calibrate(qm, lp.bitflip, core, batch, cfg.calibration, lane.pool);
                if (timing) timing->add("bf_calibration", sw.elapsed_ms());
            } else if (mode == RunMode::BpStream) {
                PhaseScope phase(Phase::BpCalibration);
                detail::Stopwatch sw;
                std::vector<std::int64_t> ids = core.example_ids;
                for (const Example& e : batch.examples.examples) ids.push_back(e.id);
                std::sort(ids.begin(), ids.end());
                ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
                std::vector<const Example*> x;
                for (std::int64_t id : ids) x.push_back(&lane.pool.get(id));
                TrainConfig bp_cfg = cfg.bp_calibration;
                bp_cfg.epochs = cfg.calibration.epochs;
                bp_cfg.seed = mix_seed(lane.seed, 9500 + 100 * j + static_cast<std::int64_t>(t));
                for (int s = 0; s < bp_cfg.epochs; ++s) {
                    bp_calibrate_epoch(qm, x, bp_cfg, mix_seed(bp_cfg.seed, s));
                }
                if (timing) timing->add("bp_stream_calibration", sw.elapsed_ms());
            }

            {
                PhaseScope phase(Phase::Evaluation);
                lane.assert_isolated(batch.paired_test_slice);
                result.accuracy[li][t] = quant_accuracy(qm, batch.paired_test_slice);
            }
        }
    }
    result.stream_loop_ms = loop_watch.elapsed_ms();
    return result;
}

// ---------------------------------------------------------------------------
// Experiment report.
// ---------------------------------------------------------------------------

struct ExperimentReport {
    std::string mode;
    std::vector<int> levels;
    std::vector<std::int64_t> seeds;
    int n_batches = 0;

    // accuracy[seed][level][batch]
    std::vector<std::vector<std::vector<double>>> accuracy;
    std::vector<std::vector<double>> static_accuracy;  // [seed][level]
    std::vector<double> level_averages;                // mean over seeds and batches
    std::vector<InfoLossReport> info_loss_per_seed;
    std::vector<double> fp_source_accuracy;
    std::vector<double> fp_target_accuracy;
    std::vector<std::vector<double>> bf_train_accuracy;  // [seed][level]
    std::vector<std::string> warnings;

    PhaseTotals counters;
    std::map<std::string, double> timings_ms;  // wall clock; excluded from deterministic outputs
    double stream_loop_ms = 0.0;

    double seed_level_average(std::size_t seed_idx, std::size_t level_idx) const {
        const auto& v = accuracy[seed_idx][level_idx];
        double s = 0.0;
        for (double a : v) s += a;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    }

    std::string to_table_text() const;
    nlohmann::json to_json() const;
    std::string timing_text() const;
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace detail

inline std::string ExperimentReport::to_table_text() const {
    std::ostringstream os;
    os << "# qcore stream report\n";
    os << "mode\t" << mode << "\n";
    os << "batches\t" << n_batches << "\n";
    os << "levels";
    for (int j : levels) os << "\t" << j;
    os << "\nseeds";
    for (std::int64_t s : seeds) os << "\t" << s;
    os << "\n\n## per-batch accuracy\nseed\tlevel";
    for (int t = 0; t < n_batches; ++t) os << "\tb" << t;
    os << "\tavg\n";
    for (std::size_t si = 0; si < seeds.size(); ++si) {
        for (std::size_t li = 0; li < levels.size(); ++li) {
            os << seeds[si] << "\t" << levels[li];
            for (double a : accuracy[si][li]) os << "\t" << detail::fmt_double(a);
            os << "\t" << detail::fmt_double(seed_level_average(si, li)) << "\n";
        }
    }
    os << "\n## per-level average accuracy\nlevel\tavg\n";
    for (std::size_t li = 0; li < levels.size(); ++li) {
        os << levels[li] << "\t" << detail::fmt_double(level_averages[li]) << "\n";
    }
    os << "\n## static post-calibration accuracy\nseed";
    for (int j : levels) os << "\tq" << j;
    os << "\tfp_source\tfp_target\n";
    for (std::size_t si = 0; si < seeds.size(); ++si) {
        os << seeds[si];
        for (std::size_t li = 0; li < levels.size(); ++li) os << "\t" << detail::fmt_double(static_accuracy[si][li]);
        os << "\t" << detail::fmt_double(fp_source_accuracy[si]) << "\t" << detail::fmt_double(fp_target_accuracy[si]) << "\n";
    }
    os << "\n## information loss\nseed\tfullMean\tcoreMean\tepsilon\tK\n";
    for (std::size_t si = 0; si < seeds.size(); ++si) {
        const InfoLossReport& r = info_loss_per_seed[si];
        os << seeds[si] << "\t" << detail::fmt_double(r.full_mean) << "\t" << detail::fmt_double(r.core_mean) << "\t"
           << detail::fmt_double(r.epsilon) << "\t" << r.bound_k << "\n";
    }
    os << "\n## bit-flip training accuracy\nseed";
    for (int j : levels) os << "\tq" << j;
    os << "\n";
    for (std::size_t si = 0; si < seeds.size(); ++si) {
        os << seeds[si];
        for (std::size_t li = 0; li < levels.size(); ++li) os << "\t" << detail::fmt_double(bf_train_accuracy[si][li]);
        os << "\n";
    }
    os << "\n## operation counters\nphase\tmacs\tgradientCalls\n";
    for (std::size_t p = 0; p < kPhaseCount; ++p) {
        os << phase_name(static_cast<Phase>(p)) << "\t" << counters.macs[p] << "\t" << counters.gradient_calls[p] << "\n";
    }
    os << "total\t" << counters.total_macs() << "\t" << counters.total_gradient_calls() << "\n";
    if (!warnings.empty()) {
        os << "\n## warnings\n";
        for (const std::string& w : warnings) os << w << "\n";
    }
    return os.str();
}

inline nlohmann::json ExperimentReport::to_json() const {
    nlohmann::json j;
    j["mode"] = mode;
    j["levels"] = levels;
    j["seeds"] = seeds;
    j["batches"] = n_batches;
    j["accuracy"] = accuracy;
    j["staticAccuracy"] = static_accuracy;
    j["levelAverages"] = level_averages;
    j["fpSourceAccuracy"] = fp_source_accuracy;
    j["fpTargetAccuracy"] = fp_target_accuracy;
    j["bfTrainAccuracy"] = bf_train_accuracy;
    j["infoLoss"] = nlohmann::json::array();
    for (const InfoLossReport& r : info_loss_per_seed) {
        j["infoLoss"].push_back({{"fullMean", r.full_mean}, {"coreMean", r.core_mean}, {"epsilon", r.epsilon}, {"K", r.bound_k}});
    }
    j["warnings"] = warnings;
    nlohmann::json counters_json;
    for (std::size_t p = 0; p < kPhaseCount; ++p) {
        counters_json[phase_name(static_cast<Phase>(p))] = {{"macs", counters.macs[p]},
                                                            {"gradientCalls", counters.gradient_calls[p]}};
    }
    j["counters"] = counters_json;
    return j;
}

inline std::string ExperimentReport::timing_text() const {
    std::ostringstream os;
    os << "# wall-clock timings (milliseconds); non-deterministic, excluded from report reproducibility\n";
    for (const auto& [key, ms] : timings_ms) os << key << "\t" << detail::fmt_double(ms) << "\n";
    os << "stream_loop_total\t" << detail::fmt_double(stream_loop_ms) << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Pipeline drivers.
// ---------------------------------------------------------------------------

namespace detail {

template <class Fn>
inline void for_each_seed(const ExperimentConfig& cfg, Fn&& fn) {
    const std::size_t n = cfg.seeds.size();
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> threads;
    std::exception_ptr error;
    std::mutex error_mutex;
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (std::thread& t : threads) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace detail

inline ExperimentReport run_ablation(const ExperimentConfig& cfg, RunMode mode) {
    cfg.validate();
    const PhaseTotals before = counters_snapshot();
    detail::TimingSink timing;

    ExperimentReport report;
    report.mode = run_mode_name(mode);
    report.levels = cfg.levels.levels;
    report.seeds = cfg.seeds;
    report.n_batches = cfg.n_batches;
    report.accuracy.resize(cfg.seeds.size());
    report.static_accuracy.resize(cfg.seeds.size());
    report.info_loss_per_seed.resize(cfg.seeds.size());
    report.fp_source_accuracy.resize(cfg.seeds.size());
    report.fp_target_accuracy.resize(cfg.seeds.size());
    report.bf_train_accuracy.resize(cfg.seeds.size());
    std::vector<std::vector<std::string>> lane_warnings(cfg.seeds.size());
    std::vector<double> lane_loop_ms(cfg.seeds.size(), 0.0);

    detail::for_each_seed(cfg, [&](std::size_t si) {
        LanePrelude lane = build_lane_prelude(cfg, cfg.seeds[si], &timing);
        const LaneStreamResult stream = run_stream_lane(cfg, lane, mode, &timing);
        report.accuracy[si] = stream.accuracy;
        report.static_accuracy[si] = stream.static_accuracy;
        report.info_loss_per_seed[si] = lane.info;
        report.fp_source_accuracy[si] = lane.fp_source_accuracy;
        report.fp_target_accuracy[si] = lane.fp_target_accuracy;
        report.bf_train_accuracy[si].resize(cfg.levels.levels.size());
        for (std::size_t li = 0; li < cfg.levels.levels.size(); ++li) {
            report.bf_train_accuracy[si][li] = lane.per_level[li].bf_report.train_accuracy;
        }
        lane_warnings[si] = lane.warnings;
        lane_loop_ms[si] = stream.stream_loop_ms;
    });

    report.level_averages.assign(cfg.levels.levels.size(), 0.0);
    for (std::size_t li = 0; li < cfg.levels.levels.size(); ++li) {
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
            for (double a : report.accuracy[si][li]) {
                sum += a;
                ++n;
            }
        }
        report.level_averages[li] = n == 0 ? 0.0 : sum / static_cast<double>(n);
    }
    for (const auto& w : lane_warnings) {
        report.warnings.insert(report.warnings.end(), w.begin(), w.end());
    }
    for (double ms : lane_loop_ms) report.stream_loop_ms += ms;

    const PhaseTotals after = counters_snapshot();
    for (std::size_t p = 0; p < kPhaseCount; ++p) {
        report.counters.macs[p] = after.macs[p] - before.macs[p];
        report.counters.gradient_calls[p] = after.gradient_calls[p] - before.gradient_calls[p];
    }
    report.timings_ms = timing.totals();
    return report;
}

inline ExperimentReport run_pipeline(const ExperimentConfig& cfg) { return run_ablation(cfg, RunMode::Full); }

inline PhaseTotals count_ops() { return counters_snapshot(); }

// ---------------------------------------------------------------------------
// Subset-type comparison: build each subset variant, calibrate every level on
// it with plain back-propagation, and score on the pooled target test portion.
// ---------------------------------------------------------------------------

struct SubsetComparisonReport {
    std::vector<int> levels;
    std::vector<std::string> row_names;
    std::vector<int> row_subset_level;  // quantization level a Core-j row was built from, 0 otherwise
    // accuracy[seed][row][level]
    std::vector<std::vector<std::vector<double>>> per_seed;
    // mean over seeds: [row][level]
    std::vector<std::vector<double>> mean_accuracy;
    std::vector<double> row_averages;  // cross-level average per row

    std::string to_table_text() const {
        std::ostringstream os;
        os << "# subset comparison\nsubset";
        for (int j : levels) os << "\t" << j << "-bit";
        os << "\tavg\n";
        for (std::size_t r = 0; r < row_names.size(); ++r) {
            os << row_names[r];
            for (double a : mean_accuracy[r]) os << "\t" << detail::fmt_double(a);
            os << "\t" << detail::fmt_double(row_averages[r]) << "\n";
        }
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["levels"] = levels;
        j["rows"] = row_names;
        j["rowSubsetLevel"] = row_subset_level;
        j["meanAccuracy"] = mean_accuracy;
        j["rowAverages"] = row_averages;
        j["perSeed"] = per_seed;
        return j;
    }
};

inline SubsetComparisonReport run_subset_comparison(const ExperimentConfig& cfg,
                                                    const std::vector<SubsetStrategy>& strategies) {
    cfg.validate();
    SubsetComparisonReport report;
    report.levels = cfg.levels.levels;

    const bool want_core_j = std::find(strategies.begin(), strategies.end(), SubsetStrategy::CoreJ) != strategies.end();
    const bool want_core_32 = std::find(strategies.begin(), strategies.end(), SubsetStrategy::Core32) != strategies.end();
    const bool want_random = std::find(strategies.begin(), strategies.end(), SubsetStrategy::Random) != strategies.end();
    const bool want_qcore = std::find(strategies.begin(), strategies.end(), SubsetStrategy::QCore) != strategies.end();
    if (want_core_32 && !cfg.track_full_precision) {
        throw UsageError("subset comparison: CORE_32 requires trackFullPrecision");
    }

    if (want_core_j) {
        for (int j : cfg.levels.levels) {
            report.row_names.push_back("Core " + std::to_string(j));
            report.row_subset_level.push_back(j);
        }
    }
    if (want_core_32) {
        report.row_names.push_back("Core 32");
        report.row_subset_level.push_back(kFullPrecisionLevel);
    }
    if (want_random) {
        report.row_names.push_back("Random");
        report.row_subset_level.push_back(0);
    }
    if (want_qcore) {
        report.row_names.push_back("QCore");
        report.row_subset_level.push_back(0);
    }
    if (report.row_names.empty()) throw UsageError("subset comparison: no strategies requested");

    report.per_seed.resize(cfg.seeds.size());

    detail::for_each_seed(cfg, [&](std::size_t si) {
        const std::int64_t seed = cfg.seeds[si];
        LanePrelude lane = build_lane_prelude(cfg, seed);

        // Subsets per row. Core-j rows resample from the level-j distribution.
        std::vector<QCoreSet> subsets;
        for (std::size_t r = 0; r < report.row_names.size(); ++r) {
            const int subset_level = report.row_subset_level[r];
            if (subset_level != 0) {
                const MissPmf pmf = build_pmf(lane.table, subset_level);
                subsets.push_back(sample_qcore(lane.source, pmf, lane.table, cfg.core_budget, mix_seed(seed, 70 + subset_level)));
            } else if (report.row_names[r] == "Random") {
                std::vector<std::int64_t> ids;
                for (const Example& e : lane.source.examples) ids.push_back(e.id);
                Rng rng(mix_seed(seed, 5));
                rng.shuffle(ids);
                QCoreSet random_core;
                random_core.size_budget = cfg.core_budget;
                random_core.seed = mix_seed(seed, 5);
                random_core.lambda = static_cast<double>(cfg.core_budget) / static_cast<double>(lane.source.size());
                random_core.example_ids.assign(ids.begin(), ids.begin() + cfg.core_budget);
                random_core.source_pmf = lane.summed_pmf;
                subsets.push_back(std::move(random_core));
            } else {  // QCore
                subsets.push_back(lane.core);
            }
        }

        auto& rows = report.per_seed[si];
        rows.resize(report.row_names.size());
        for (std::size_t r = 0; r < report.row_names.size(); ++r) {
            rows[r].resize(cfg.levels.levels.size());
            for (std::size_t li = 0; li < cfg.levels.levels.size(); ++li) {
                const int model_level = cfg.levels.levels[li];
                QuantModel qm = quantize_model(lane.model, model_level);
                TrainConfig bp_cfg = cfg.bp_calibration;
                bp_cfg.seed = mix_seed(seed, 60 + model_level);  // identical across rows: paired comparison
                std::vector<std::int64_t> ids = subsets[r].example_ids;
                std::sort(ids.begin(), ids.end());  // order-free: equal subsets calibrate identically
                std::vector<const Example*> x;
                for (std::int64_t id : ids) x.push_back(&lane.pool.get(id));
                {
                    PhaseScope phase(Phase::BpCalibration);
                    bp_calibrate(qm, x, bp_cfg, 17);
                }
                PhaseScope phase(Phase::Evaluation);
                rows[r][li] = quant_accuracy(qm, lane.target_test);
            }
        }
    });

    report.mean_accuracy.assign(report.row_names.size(), std::vector<double>(cfg.levels.levels.size(), 0.0));
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
        for (std::size_t r = 0; r < report.row_names.size(); ++r) {
            for (std::size_t li = 0; li < cfg.levels.levels.size(); ++li) {
                report.mean_accuracy[r][li] += report.per_seed[si][r][li] / static_cast<double>(cfg.seeds.size());
            }
        }
    }
    report.row_averages.assign(report.row_names.size(), 0.0);
    for (std::size_t r = 0; r < report.row_names.size(); ++r) {
        for (double a : report.mean_accuracy[r]) report.row_averages[r] += a / static_cast<double>(cfg.levels.levels.size());
    }
    return report;
}

}  // namespace qcore

#endif  // QCORE_HARNESS_HPP
