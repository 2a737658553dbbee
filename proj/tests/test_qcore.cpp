#include <doctest.h>

#include <cstdio>
#include <map>
#include <set>
#include <vector>

#include <qcore/coreset.hpp>
#include <qcore/dataset.hpp>
#include <qcore/miss_tracker.hpp>
#include <qcore/nn.hpp>
#include <qcore/quantizer.hpp>

using namespace qcore;

namespace {

// Table-3-shaped fixture: 20 examples with miss counts (2x1, 3x2, 9x3, 4x4, 2x5).
MissTable table3_fixture() {
    std::vector<std::pair<std::int64_t, int>> counts;
    std::int64_t id = 0;
    const int bins[5] = {2, 3, 9, 4, 2};
    for (int k = 1; k <= 5; ++k) {
        for (int i = 0; i < bins[k - 1]; ++i) counts.push_back({id++, k});
    }
    return MissTable::from_counts(counts, 4);
}

Dataset dataset_for_table(const MissTable& table, int dim = 2) {
    Dataset ds;
    ds.num_classes = 2;
    ds.domain_tag = "pool";
    for (std::int64_t id : table.example_ids) {
        Example e;
        e.id = id;
        e.features.assign(static_cast<std::size_t>(dim), static_cast<double>(id));
        e.label = static_cast<int>(id % 2);
        ds.examples.push_back(std::move(e));
    }
    return ds;
}

}  // namespace

TEST_CASE("information-loss worked example: fullMean 3.05, coreMean 3, epsilon 0.05, K 5") {
    const MissTable table = table3_fixture();
    const MissPmf pmf = build_pmf(table, 4);
    CHECK(pmf.total_count() == 20);

    const InfoLossReport report = info_loss_at(pmf, 0.2);
    CHECK(report.full_mean == doctest::Approx(3.05).epsilon(1e-12));
    CHECK(report.core_mean == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(report.epsilon == doctest::Approx(0.05).epsilon(1e-9));
    CHECK(report.bound_k == 5);

    // The rounded per-bin quotas are the Table-3 column (0, 1, 2, 1, 0).
    const std::vector<long long> quotas = rounded_quotas(pmf, 0.2);
    CHECK(quotas == std::vector<long long>{0, 0, 1, 2, 1, 0});
}

TEST_CASE("information loss at lambda = 1 is zero") {
    const MissTable table = table3_fixture();
    const MissPmf pmf = build_pmf(table, 4);
    const InfoLossReport report = info_loss_at(pmf, 1.0);
    CHECK(report.epsilon == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("information loss rejects a zero-size core") {
    const MissTable table = table3_fixture();
    const MissPmf pmf = build_pmf(table, 4);
    CHECK_THROWS_AS(info_loss(pmf, std::vector<long long>(pmf.bins.size(), 0), 0), UsageError);
}

TEST_CASE("random instances: epsilon <= K and matches a brute-force recomputation") {
    Rng rng(2024);
    int tested = 0;
    while (tested < 100) {
        const int k_max = 1 + static_cast<int>(rng.below(8));  // K <= 8
        std::vector<long long> counts(static_cast<std::size_t>(k_max) + 1, 0);
        long long total = 0;
        for (auto& c : counts) {
            c = static_cast<long long>(rng.below(120));
            total += c;
        }
        if (total == 0 || total > 1000) continue;
        const double lambda = rng.uniform(0.05, 1.0);
        if (round_half_away(lambda * static_cast<double>(total)) <= 0) continue;

        MissPmf pmf;
        for (int k = 0; k <= k_max; ++k) {
            pmf.bins.push_back({k, counts[static_cast<std::size_t>(k)]});
            if (counts[static_cast<std::size_t>(k)] > 0) pmf.max_misses = k;
        }

        const InfoLossReport report = info_loss_at(pmf, lambda);

        // Brute-force oracle, recomputed from the raw counts.
        double full_num = 0.0;
        long long core_den = round_half_away(lambda * static_cast<double>(total));
        double core_num = 0.0;
        for (int k = 0; k <= k_max; ++k) {
            full_num += static_cast<double>(k) * static_cast<double>(counts[static_cast<std::size_t>(k)]);
            core_num += static_cast<double>(k) *
                        static_cast<double>(round_half_away(lambda * static_cast<double>(counts[static_cast<std::size_t>(k)])));
        }
        const double expected = std::fabs(full_num / static_cast<double>(total) - core_num / static_cast<double>(core_den));
        CHECK(std::fabs(report.epsilon - expected) < 1e-12);
        CHECK(report.epsilon <= static_cast<double>(pmf.max_misses) + 1e-12);
        ++tested;
    }
}

TEST_CASE("largest-remainder quotas conserve the budget; remainder ties favor larger k") {
    CHECK(apportion_quotas({1, 1}, 1) == std::vector<long long>{0, 1});
    CHECK(apportion_quotas({2, 3, 9, 4, 2}, 4) == std::vector<long long>{0, 1, 2, 1, 0});

    Rng rng(500);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<long long> pops(1 + rng.below(9), 0);
        long long total = 0;
        for (auto& p : pops) {
            p = static_cast<long long>(rng.below(200));
            total += p;
        }
        if (total == 0) continue;
        const long long budget = 1 + static_cast<long long>(rng.below(static_cast<std::size_t>(total)));
        const std::vector<long long> quotas = apportion_quotas(pops, budget);
        long long sum = 0;
        for (std::size_t k = 0; k < quotas.size(); ++k) {
            sum += quotas[k];
            if (pops[k] == 0) CHECK(quotas[k] == 0);
        }
        CHECK(sum == budget);
    }
}

TEST_CASE("sampling: a bin of 480 at lambda 0.1 contributes exactly 48 examples") {
    // 4800 examples total; bin populations mirror the shape of the published
    // distribution with 480 sitting at three misses.
    std::vector<std::pair<std::int64_t, int>> counts;
    std::int64_t id = 0;
    const std::vector<std::pair<int, int>> layout{{0, 3000}, {1, 800}, {2, 400}, {3, 480}, {4, 120}};
    for (const auto& [k, n] : layout) {
        for (int i = 0; i < n; ++i) counts.push_back({id++, k});
    }
    const MissTable table = MissTable::from_counts(counts, 4);
    const Dataset pool = dataset_for_table(table);
    const MissPmf pmf = build_pmf(table, 4);

    const QCoreSet core = sample_qcore(pool, pmf, table, 480, 123);  // lambda = 0.1
    CHECK(core.bin_stats[3].selected == 48);
    CHECK(core.bin_stats[3].quota == 48);
    CHECK(static_cast<int>(core.example_ids.size()) == 480);
}

TEST_CASE("sampling at lambda = 1 returns the entire pool") {
    const MissTable table = table3_fixture();
    const Dataset pool = dataset_for_table(table);
    const MissPmf pmf = build_pmf(table, 4);
    const QCoreSet core = sample_qcore(pool, pmf, table, 20, 7);
    CHECK(core.example_ids.size() == 20);
    std::set<std::int64_t> selected(core.example_ids.begin(), core.example_ids.end());
    for (const Example& e : pool.examples) CHECK(selected.count(e.id) == 1);
}

TEST_CASE("sampling is deterministic per seed and respects bin quotas") {
    const MissTable table = table3_fixture();
    const Dataset pool = dataset_for_table(table);
    const MissPmf pmf = build_pmf(table, 4);

    const QCoreSet a = sample_qcore(pool, pmf, table, 4, 99);
    const QCoreSet b = sample_qcore(pool, pmf, table, 4, 99);
    CHECK(a.example_ids == b.example_ids);

    // Bin fidelity: with ample populations the selected counts equal the quotas.
    for (const QCoreSet::BinStat& s : a.bin_stats) {
        CHECK(s.selected == s.quota);
    }
    long long total = 0;
    for (const QCoreSet::BinStat& s : a.bin_stats) total += s.selected;
    CHECK(total == 4);

    const QCoreSet c = sample_qcore(pool, pmf, table, 4, 100);
    CHECK(a.example_ids != c.example_ids);
}

TEST_CASE("sampling rejects budgets above the pool size") {
    const MissTable table = table3_fixture();
    const Dataset pool = dataset_for_table(table);
    const MissPmf pmf = build_pmf(table, 4);
    CHECK_THROWS_AS(sample_qcore(pool, pmf, table, 21, 1), UsageError);
}

TEST_CASE("an exhausted bin spills its quota to the nearest bin with a warning") {
    // Bin 5 holds one distinct id replicated three times, so its multiplicity
    // earns a quota of 2 that only 1 candidate can satisfy.
    std::map<int, std::vector<std::int64_t>> bins;
    bins[5] = {1, 1, 1};
    bins[0] = {2, 3, 4};
    MissPmf pmf;
    pmf.bins = {{0, 3}, {1, 0}, {2, 0}, {3, 0}, {4, 0}, {5, 3}};
    pmf.max_misses = 5;
    const QCoreSet core = qcore::detail::sample_binned(bins, 3, 11, pmf, 0.75);
    CHECK(core.example_ids.size() == 3);
    std::set<std::int64_t> uniq(core.example_ids.begin(), core.example_ids.end());
    CHECK(uniq.size() == 3);
    CHECK(core.bin_stats[5].selected == 1);
    CHECK(core.bin_stats[0].selected == 2);
    REQUIRE(core.warnings.size() == 1);
    CHECK(core.warnings[0].find("bin 5") != std::string::npos);
}

TEST_CASE("summed PMFs sample without duplicate ids") {
    MissTable table;
    table.levels = {2, 8};
    table.epochs_observed = 5;
    Rng rng(808);
    for (std::int64_t id = 0; id < 60; ++id) {
        table.example_ids.push_back(id);
        table.misses[{id, 2}] = static_cast<int>(rng.below(5));
        table.misses[{id, 8}] = static_cast<int>(rng.below(3));
    }
    const Dataset pool = dataset_for_table(table);
    const QuantLevels levels{{2, 8}};
    const MissPmf pmf = build_pmf_summed(table, levels);
    CHECK(pmf.total_count() == 120);

    const QCoreSet core = sample_qcore(pool, pmf, table, 15, 5);
    CHECK(core.example_ids.size() == 15);
    std::set<std::int64_t> uniq(core.example_ids.begin(), core.example_ids.end());
    CHECK(uniq.size() == 15);

    long long quota_sum = 0;
    for (const QCoreSet::BinStat& s : core.bin_stats) quota_sum += s.quota;
    CHECK(quota_sum == 15);
}

TEST_CASE("qcore files round-trip byte-identically") {
    const MissTable table = table3_fixture();
    const Dataset pool = dataset_for_table(table);
    const MissPmf pmf = build_pmf(table, 4);
    const QCoreSet core = sample_qcore(pool, pmf, table, 4, 99);

    const std::string path_a = "test_core_a.json";
    const std::string path_b = "test_core_b.json";
    save_qcore(core, path_a);
    const QCoreSet loaded = load_qcore(path_a);
    CHECK(loaded.example_ids == core.example_ids);
    save_qcore(loaded, path_b);
    std::ifstream fa(path_a), fb(path_b);
    const std::string a((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    const std::string b((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(a == b);
    std::remove(path_a.c_str());
    std::remove(path_b.c_str());
}

// ---------------------------------------------------------------------------
// update_qcore
// ---------------------------------------------------------------------------

namespace {

struct UpdateFixture {
    Dataset source;
    ExamplePool pool;
    QCoreSet core;
    QuantModel qm;
    MissTable table;

    static UpdateFixture make(std::int64_t seed, int n_source = 40, int budget = 10) {
        UpdateFixture f;
        DriftSpec spec;
        spec.dim = 3;
        spec.num_classes = 2;
        spec.n_source = n_source;
        spec.n_target = 10;
        spec.seed = seed;
        auto [source, target] = make_drift_pair(spec);
        f.source = std::move(source);
        f.pool.add(f.source);

        std::vector<std::pair<std::int64_t, int>> counts;
        for (const Example& e : f.source.examples) counts.push_back({e.id, 0});
        f.table = MissTable::from_counts(counts, 8);
        const MissPmf pmf = build_pmf(f.table, 8);
        f.core = sample_qcore(f.source, pmf, f.table, budget, seed);

        FpModel model = build_model(ArchDescriptor::dense_net(3, {2}), seed + 1);
        f.qm = quantize_model(model, 8);
        return f;
    }
};

StreamBatch batch_from(const Dataset& examples, int index = 0) {
    StreamBatch b;
    b.batch_index = index;
    b.examples = examples;
    return b;
}

}  // namespace

TEST_CASE("update_qcore: zero-step shadow keeps the degenerate distribution stationary") {
    UpdateFixture f = UpdateFixture::make(3);

    // Batch drawn from the same pool shape; learning rate zero means the
    // shadow calibration never changes the model, so no example can transition
    // and every union member stays in bin 0, exactly like the input core.
    DriftSpec spec;
    spec.dim = 3;
    spec.num_classes = 2;
    spec.n_source = 12;
    spec.n_target = 10;
    spec.seed = 91;
    auto [extra, unused] = make_drift_pair(spec);
    for (Example& e : extra.examples) e.id += 1000;
    f.pool.add(extra);

    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    const QCoreSet updated = update_qcore(f.core, batch_from(extra), f.qm, cfg, 5, f.pool);

    CHECK(updated.example_ids.size() == f.core.example_ids.size());
    CHECK(updated.source_pmf.max_misses == 0);
    CHECK(f.core.source_pmf.max_misses == 0);  // both distributions sit entirely in bin 0
    std::set<std::int64_t> uniq(updated.example_ids.begin(), updated.example_ids.end());
    CHECK(uniq.size() == updated.example_ids.size());
}

TEST_CASE("update_qcore: examples the model never classifies correctly land in bin 0") {
    UpdateFixture f = UpdateFixture::make(4);

    // Mislabel a batch so TP is constantly 0: no 1->0 transition can occur.
    Dataset wrong;
    wrong.num_classes = 2;
    Rng rng(17);
    for (int i = 0; i < 10; ++i) {
        Example e;
        e.id = 2000 + i;
        e.features = {rng.normal(), rng.normal(), rng.normal()};
        const FpModel fp = dequantize(f.qm);
        e.label = 1 - forward(fp, e.features).predicted_label;
        wrong.examples.push_back(std::move(e));
    }
    f.pool.add(wrong);

    TrainConfig cfg;
    cfg.learning_rate = 0.0;  // freeze the shadow so the predictions cannot move
    cfg.epochs = 4;
    cfg.batch_size = 4;
    const QCoreSet updated = update_qcore(f.core, batch_from(wrong), f.qm, cfg, 6, f.pool);
    CHECK(updated.source_pmf.max_misses == 0);
    CHECK(updated.source_pmf.bins[0].example_count == updated.source_pmf.total_count());
}

TEST_CASE("update_qcore keeps the budget for any batch size and stays deterministic") {
    for (int batch_size : {3, 10, 37}) {
        UpdateFixture f = UpdateFixture::make(5 + batch_size);
        Dataset extra;
        extra.num_classes = 2;
        Rng rng(batch_size);
        for (int i = 0; i < batch_size; ++i) {
            Example e;
            e.id = 5000 + i;
            e.features = {rng.normal(), rng.normal(), rng.normal()};
            e.label = static_cast<int>(rng.below(2));
            extra.examples.push_back(std::move(e));
        }
        f.pool.add(extra);

        TrainConfig cfg;
        cfg.learning_rate = 0.05;
        cfg.epochs = 3;
        cfg.batch_size = 8;
        const QCoreSet a = update_qcore(f.core, batch_from(extra), f.qm, cfg, 42, f.pool);
        const QCoreSet b = update_qcore(f.core, batch_from(extra), f.qm, cfg, 42, f.pool);
        CHECK(static_cast<int>(a.example_ids.size()) == f.core.size_budget);
        CHECK(a.example_ids == b.example_ids);
        std::set<std::int64_t> uniq(a.example_ids.begin(), a.example_ids.end());
        CHECK(uniq.size() == a.example_ids.size());
    }
}

TEST_CASE("update_qcore rejects an empty batch") {
    UpdateFixture f = UpdateFixture::make(6);
    Dataset empty;
    empty.num_classes = 2;
    TrainConfig cfg;
    CHECK_THROWS_AS(update_qcore(f.core, batch_from(empty), f.qm, cfg, 1, f.pool), UsageError);
}

TEST_CASE("update_qcore pulls in new-batch examples on a drifted stream") {
    int seeds_with_new_members = 0;
    for (std::int64_t seed = 1; seed <= 5; ++seed) {
        DriftSpec spec;
        spec.dim = 4;
        spec.num_classes = 2;
        spec.n_source = 60;
        spec.n_target = 30;
        spec.shift_magnitude = 3.0;
        spec.seed = seed;
        auto [source, target] = make_drift_pair(spec);

        ExamplePool pool;
        pool.add(source);
        pool.add(target);

        FpModel model = build_model(ArchDescriptor::dense_net(4, {2}), seed);
        TrainConfig train_cfg;
        train_cfg.learning_rate = 0.1;
        train_cfg.batch_size = 16;
        for (int e = 0; e < 15; ++e) train_epoch(model, source, train_cfg);

        const QuantLevels levels{{8}};
        MissTable table = MissTable::create(source, levels);
        for (int e = 0; e < 3; ++e) observe_epoch(table, model, levels, source);

        const MissPmf pmf = build_pmf(table, 8);
        const QCoreSet core = sample_qcore(source, pmf, table, 10, seed);
        const QuantModel qm = quantize_model(model, 8);

        TrainConfig cfg;
        cfg.learning_rate = 0.1;
        cfg.epochs = 4;
        cfg.batch_size = 8;
        const QCoreSet updated = update_qcore(core, batch_from(target), qm, cfg, seed, pool);

        bool has_new = false;
        for (std::int64_t id : updated.example_ids) {
            if (id >= static_cast<std::int64_t>(source.size())) has_new = true;
        }
        seeds_with_new_members += has_new ? 1 : 0;
    }
    CHECK(seeds_with_new_members == 5);
}
