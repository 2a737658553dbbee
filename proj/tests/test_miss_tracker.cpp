#include <doctest.h>

#include <map>
#include <sstream>
#include <vector>

#include <qcore/miss_tracker.hpp>

using namespace qcore;

namespace {

// One-feature, three-class setup where the model's fine weights decide between
// classes 0 and 1 while a large negative outlier weight stretches the 2-bit
// grid until those fine weights collapse onto one code. The 8-bit proxy keeps
// the full-precision decision; the 2-bit proxy always predicts class 0.
FpModel decision_model(float w_class0, float w_class1) {
    FpModel m = build_model(ArchDescriptor::dense_net(1, {3}), 0);
    m.layers[0].weights = {w_class0, w_class1, -10.0f};
    m.layers[0].bias = {0.0f, 0.0f, 0.0f};
    return m;
}

Dataset one_example_dataset(int label) {
    Dataset ds;
    ds.num_classes = 3;
    ds.domain_tag = "fixture";
    Example e;
    e.id = 0;
    e.features = {1.0};
    e.label = label;
    ds.examples.push_back(e);
    return ds;
}

}  // namespace

TEST_CASE("first observed epoch only initializes; no misses are counted") {
    const Dataset ds = one_example_dataset(1);
    const QuantLevels levels{{2, 8}};
    MissTable table = MissTable::create(ds, levels);
    observe_epoch(table, decision_model(0.3f, 1.3f), levels, ds);  // wrong at 2-bit, right at 8-bit
    CHECK(table.epochs_observed == 1);
    CHECK(table.miss_count(0, 2) == 0);
    CHECK(table.miss_count(0, 8) == 0);
}

TEST_CASE("misses increment per level exactly on a 1->0 transition at that level") {
    const Dataset ds = one_example_dataset(1);
    const QuantLevels levels{{2, 8}};
    MissTable table = MissTable::create(ds, levels);

    // Epoch 1: full precision and 8-bit predict class 1 (correct); the 2-bit
    // proxy collapses 0.3 and 1.3 onto one code and predicts class 0 (wrong).
    observe_epoch(table, decision_model(0.3f, 1.3f), levels, ds);
    // Epoch 2: the decision flips; the 8-bit proxy transitions 1 -> 0, the
    // 2-bit proxy stays wrong (0 -> 0).
    observe_epoch(table, decision_model(1.3f, 0.3f), levels, ds);

    CHECK(table.miss_count(0, 8) == 1);
    CHECK(table.miss_count(0, 2) == 0);
}

TEST_CASE("a TP sequence of (1,0,1,0) accumulates exactly two misses") {
    const Dataset ds = one_example_dataset(1);
    const QuantLevels levels{{8}};
    MissTable table = MissTable::create(ds, levels);

    const std::vector<bool> tp_sequence{true, false, true, false};
    for (bool correct : tp_sequence) {
        observe_epoch(table, correct ? decision_model(0.3f, 1.3f) : decision_model(1.3f, 0.3f), levels, ds);
    }

    // Brute-force oracle: count adjacent 1->0 transitions in the sequence.
    int expected = 0;
    for (std::size_t i = 0; i + 1 < tp_sequence.size(); ++i) {
        if (tp_sequence[i] && !tp_sequence[i + 1]) ++expected;
    }
    CHECK(expected == 2);
    CHECK(table.miss_count(0, 8) == expected);
}

TEST_CASE("observe_epoch leaves the model bit-identical and validates registration") {
    Dataset ds;
    ds.num_classes = 2;
    for (int i = 0; i < 6; ++i) {
        Example e;
        e.id = i;
        e.features = {static_cast<double>(i) - 2.5, 1.0};
        e.label = i % 2;
        ds.examples.push_back(e);
    }
    const QuantLevels levels{{2, 4, 8}};
    MissTable table = MissTable::create(ds, levels);
    const FpModel model = build_model(ArchDescriptor::dense_net(2, {2}), 3);
    const FpModel before = model;
    observe_epoch(table, model, levels, ds);
    CHECK(models_bit_identical(before, model));

    Dataset other = ds;
    other.examples[0].id = 99;
    CHECK_THROWS_AS(observe_epoch(table, model, levels, other), UsageError);
}

TEST_CASE("level 32 tracks the full-precision model via the identity proxy") {
    const Dataset ds = one_example_dataset(1);
    const QuantLevels levels{{kFullPrecisionLevel}};
    MissTable table = MissTable::create(ds, levels);
    observe_epoch(table, decision_model(0.3f, 1.3f), levels, ds);  // correct
    observe_epoch(table, decision_model(1.3f, 0.3f), levels, ds);  // wrong
    CHECK(table.miss_count(0, kFullPrecisionLevel) == 1);
}

TEST_CASE("misses never decrease and stay bounded by epochs observed") {
    const Dataset ds = one_example_dataset(1);
    const QuantLevels levels{{8}};
    MissTable table = MissTable::create(ds, levels);
    int previous = 0;
    for (int epoch = 0; epoch < 8; ++epoch) {
        observe_epoch(table, (epoch % 2 == 0) ? decision_model(0.3f, 1.3f) : decision_model(1.3f, 0.3f), levels, ds);
        const int current = table.miss_count(0, 8);
        CHECK(current >= previous);
        CHECK(current <= table.epochs_observed);
        previous = current;
    }
}

TEST_CASE("build_pmf: single level histogram and conservation") {
    MissTable table = MissTable::from_counts({{0, 1}, {1, 2}, {2, 2}, {3, 0}, {4, 5}}, 4);
    const MissPmf pmf = build_pmf(table, 4);
    CHECK(pmf.total_count() == 5);
    CHECK(pmf.max_misses == 5);
    CHECK(pmf.bins[0].example_count == 1);  // example 3 never missed
    CHECK(pmf.bins[1].example_count == 1);
    CHECK(pmf.bins[2].example_count == 2);
    CHECK(pmf.bins[5].example_count == 1);
}

TEST_CASE("build_pmf: an all-zero table yields the single bin (0, N) with K = 0") {
    MissTable table = MissTable::from_counts({{0, 0}, {1, 0}, {2, 0}}, 8);
    const MissPmf pmf = build_pmf(table, 8);
    CHECK(pmf.bins.size() == 1);
    CHECK(pmf.bins[0].miss_count == 0);
    CHECK(pmf.bins[0].example_count == 3);
    CHECK(pmf.max_misses == 0);
}

TEST_CASE("summed PMF equals the brute-force union of per-level histograms") {
    // Hand-assembled two-level table.
    MissTable table;
    table.levels = {2, 4};
    table.epochs_observed = 6;
    Rng rng(321);
    for (std::int64_t id = 0; id < 40; ++id) {
        table.example_ids.push_back(id);
        table.misses[{id, 2}] = static_cast<int>(rng.below(6));
        table.misses[{id, 4}] = static_cast<int>(rng.below(4));
    }

    const QuantLevels levels{{2, 4}};
    const MissPmf summed = build_pmf_summed(table, levels);
    CHECK(summed.total_count() == 80);  // |J| * |D|

    // Oracle: independent histogram accumulation.
    std::map<int, long long> expected;
    for (std::int64_t id = 0; id < 40; ++id) {
        ++expected[table.miss_count(id, 2)];
        ++expected[table.miss_count(id, 4)];
    }
    for (const MissPmf::Bin& b : summed.bins) {
        const auto it = expected.find(b.miss_count);
        CHECK(b.example_count == (it == expected.end() ? 0 : it->second));
    }

    // Per-level conservation.
    CHECK(build_pmf(table, 2).total_count() == 40);
    CHECK(build_pmf(table, 4).total_count() == 40);
}

TEST_CASE("miss table exports round-trip through the tabular format") {
    MissTable table = MissTable::from_counts({{0, 3}, {1, 0}, {7, 2}}, 4);
    std::stringstream ss;
    save_miss_table(table, ss);
    const MissTable loaded = load_miss_table(ss);
    CHECK(loaded.example_ids == table.example_ids);
    CHECK(loaded.levels == table.levels);
    for (std::int64_t id : table.example_ids) CHECK(loaded.miss_count(id, 4) == table.miss_count(id, 4));
}

TEST_CASE("PMF exports round-trip through the tabular format") {
    MissTable table = MissTable::from_counts({{0, 1}, {1, 1}, {2, 4}}, 2);
    const MissPmf pmf = build_pmf(table, 2);
    std::stringstream ss;
    save_pmf(pmf, ss);
    const MissPmf loaded = load_pmf(ss);
    CHECK(loaded.bins.size() == pmf.bins.size());
    for (std::size_t i = 0; i < pmf.bins.size(); ++i) {
        CHECK(loaded.bins[i].miss_count == pmf.bins[i].miss_count);
        CHECK(loaded.bins[i].example_count == pmf.bins[i].example_count);
    }
    CHECK(loaded.max_misses == pmf.max_misses);
}
