#include <doctest.h>

#include <set>
#include <vector>

#include <qcore/harness.hpp>

using namespace qcore;

namespace {

// Small but complete configuration; keeps the unit suite fast.
ExperimentConfig tiny_config() {
    ExperimentConfig cfg;
    DriftSpec spec;
    spec.dim = 6;
    spec.num_classes = 3;
    spec.n_source = 240;
    spec.n_target = 240;
    spec.shift_magnitude = 2.0;
    cfg.drift = spec;
    cfg.levels.levels = {4, 8};
    cfg.core_budget = 12;
    cfg.n_batches = 3;
    cfg.seeds = {1};
    cfg.train = TrainConfig{0.05, 10, 32, 0};
    cfg.bp_calibration = TrainConfig{0.1, 4, 8, 0};
    cfg.bf_train = TrainConfig{0.05, 20, 32, 0};
    cfg.calibration = CalibrationConfig{3, 0.5};
    return cfg;
}

}  // namespace

TEST_CASE("report holds a fully populated |seeds| x |levels| x nBatches accuracy tensor") {
    ExperimentConfig cfg = tiny_config();
    cfg.seeds = {1, 2};
    const ExperimentReport report = run_pipeline(cfg);
    REQUIRE(report.accuracy.size() == 2);
    for (const auto& per_level : report.accuracy) {
        REQUIRE(per_level.size() == 2);
        for (const auto& per_batch : per_level) {
            REQUIRE(per_batch.size() == 3);
            for (double a : per_batch) {
                CHECK(a >= 0.0);
                CHECK(a <= 1.0);
            }
        }
    }
    CHECK(report.level_averages.size() == 2);
    CHECK(report.info_loss_per_seed.size() == 2);
}

TEST_CASE("identical configs produce identical reports") {
    const ExperimentConfig cfg = tiny_config();
    const ExperimentReport a = run_pipeline(cfg);
    const ExperimentReport b = run_pipeline(cfg);
    CHECK(a.to_table_text() == b.to_table_text());
    CHECK(a.to_json().dump() == b.to_json().dump());
}

TEST_CASE("worker parallelism does not change the report") {
    ExperimentConfig cfg = tiny_config();
    cfg.seeds = {1, 2};
    const ExperimentReport serial = run_pipeline(cfg);
    cfg.workers = 2;
    const ExperimentReport parallel = run_pipeline(cfg);
    CHECK(serial.to_table_text() == parallel.to_table_text());
}

TEST_CASE("NO_BF freezes the model: per-batch accuracy equals the static calibrated model") {
    const ExperimentConfig cfg = tiny_config();
    const ExperimentReport report = run_ablation(cfg, RunMode::NoBf);

    // Recreate the shared prelude (deterministic) and score the frozen model.
    LanePrelude lane = build_lane_prelude(cfg, cfg.seeds[0]);
    for (std::size_t li = 0; li < cfg.levels.levels.size(); ++li) {
        for (std::size_t t = 0; t < lane.batches.size(); ++t) {
            const double expected = quant_accuracy(lane.per_level[li].calibrated, lane.batches[t].paired_test_slice);
            CHECK(report.accuracy[0][li][t] == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("pipeline identity: one batch, zero drift, zero-net BF gives the static accuracy") {
    ExperimentConfig cfg = tiny_config();
    cfg.drift->shift_magnitude = 0.0;
    cfg.n_batches = 1;
    cfg.levels.levels = {8};

    LanePrelude lane = build_lane_prelude(cfg, 7);

    // Constant-zero bit-flipping net: calibration cannot move the model.
    std::vector<DeltaRecord> zeros;
    for (int i = 0; i < 16; ++i) zeros.push_back({{0, 0}, 1, 0.1 * i - 0.8, 0});
    const auto [zero_bf, bf_report] = train_bit_flip(zeros, 8, TrainConfig{0.05, 2, 8, 0}, 1);

    QuantModel qm = lane.per_level[0].calibrated;
    const double static_accuracy = quant_accuracy(qm, lane.batches[0].paired_test_slice);
    QCoreSet core = update_qcore(lane.core, lane.batches[0], qm, cfg.bp_calibration, 3, lane.pool);
    qm = bf_calibrate(qm, zero_bf, core, lane.batches[0], cfg.calibration, lane.pool);
    CHECK(quant_accuracy(qm, lane.batches[0].paired_test_slice) == doctest::Approx(static_accuracy).epsilon(1e-12));
}

TEST_CASE("ablation modes share identical data, initial model and initial core") {
    const ExperimentConfig cfg = tiny_config();
    LanePrelude a = build_lane_prelude(cfg, cfg.seeds[0]);
    LanePrelude b = build_lane_prelude(cfg, cfg.seeds[0]);
    CHECK(models_bit_identical(a.model, b.model));
    CHECK(a.core.example_ids == b.core.example_ids);
    for (std::size_t t = 0; t < a.batches.size(); ++t) {
        CHECK(a.batches[t].examples.examples[0].id == b.batches[t].examples.examples[0].id);
    }
}

TEST_CASE("evaluation isolation: test slices never reach training operations") {
    const ExperimentConfig cfg = tiny_config();
    LanePrelude lane = build_lane_prelude(cfg, 1);
    // All stream modes run the guard internally; violating it must throw.
    lane.mark_touched(lane.batches[0].paired_test_slice);
    CHECK_THROWS_AS(lane.assert_isolated(lane.batches[0].paired_test_slice), NumericError);
    // An untouched slice passes.
    LanePrelude clean = build_lane_prelude(cfg, 1);
    clean.assert_isolated(clean.batches[0].paired_test_slice);
}

TEST_CASE("per-phase counters sum to the grand total and capture the BF guarantee") {
    const ExperimentConfig cfg = tiny_config();
    const ExperimentReport report = run_pipeline(cfg);

    unsigned long long mac_sum = 0, grad_sum = 0;
    for (std::size_t p = 0; p < kPhaseCount; ++p) {
        mac_sum += report.counters.macs[p];
        grad_sum += report.counters.gradient_calls[p];
    }
    CHECK(mac_sum == report.counters.total_macs());
    CHECK(grad_sum == report.counters.total_gradient_calls());

    CHECK(report.counters.gradient_calls_in(Phase::BfCalibration) == 0);
    CHECK(report.counters.macs_in(Phase::BfCalibration) > 0);
    CHECK(report.counters.gradient_calls_in(Phase::FpTraining) > 0);
}

TEST_CASE("experiment config round-trips through JSON") {
    ExperimentConfig cfg = tiny_config();
    cfg.seeds = {3, 9, 27};
    cfg.workers = 2;
    const nlohmann::json j = cfg.to_json();
    const ExperimentConfig back = ExperimentConfig::from_json(j);
    CHECK(back.to_json().dump(2) == j.dump(2));
}

TEST_CASE("subset comparison reports every requested row at every level") {
    ExperimentConfig cfg = tiny_config();
    cfg.seeds = {1};
    const SubsetComparisonReport report = run_subset_comparison(
        cfg, {SubsetStrategy::QCore, SubsetStrategy::Random, SubsetStrategy::CoreJ, SubsetStrategy::Core32});
    REQUIRE(report.row_names.size() == 5);  // Core 4, Core 8, Core 32, Random, QCore
    CHECK(report.row_names[0] == "Core 4");
    CHECK(report.row_names[1] == "Core 8");
    CHECK(report.row_names[2] == "Core 32");
    CHECK(report.row_names[3] == "Random");
    CHECK(report.row_names[4] == "QCore");
    for (const auto& row : report.mean_accuracy) {
        REQUIRE(row.size() == cfg.levels.levels.size());
        for (double a : row) {
            CHECK(a >= 0.0);
            CHECK(a <= 1.0);
        }
    }
    // Deterministic under rerun.
    const SubsetComparisonReport again = run_subset_comparison(
        cfg, {SubsetStrategy::QCore, SubsetStrategy::Random, SubsetStrategy::CoreJ, SubsetStrategy::Core32});
    CHECK(report.to_table_text() == again.to_table_text());
}

TEST_CASE("subset comparison at lambda = 1 makes every strategy identical") {
    ExperimentConfig cfg = tiny_config();
    cfg.seeds = {1};
    cfg.drift->n_source = 24;
    cfg.drift->n_target = 60;
    cfg.core_budget = 24;  // the whole pool
    const SubsetComparisonReport report =
        run_subset_comparison(cfg, {SubsetStrategy::QCore, SubsetStrategy::Random, SubsetStrategy::Core32});
    for (std::size_t li = 0; li < report.levels.size(); ++li) {
        CHECK(report.mean_accuracy[0][li] == doctest::Approx(report.mean_accuracy[1][li]).epsilon(1e-12));
        CHECK(report.mean_accuracy[1][li] == doctest::Approx(report.mean_accuracy[2][li]).epsilon(1e-12));
    }
}

TEST_CASE("lane warnings surface a core budget below the class count") {
    ExperimentConfig cfg = tiny_config();
    cfg.core_budget = 2;  // below 3 classes
    const ExperimentReport report = run_pipeline(cfg);
    bool found = false;
    for (const std::string& w : report.warnings) {
        if (w.find("core budget") != std::string::npos) found = true;
    }
    CHECK(found);
}
