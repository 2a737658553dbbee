#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include <qcore/dataset.hpp>
#include <qcore/nn.hpp>

using namespace qcore;

TEST_CASE("load_csv assigns ids by row order") {
    const std::string path = "test_tiny.csv";
    {
        std::ofstream out(path);
        out << "f0,f1,label\n0.5,1.5,0\n-2.0,0.25,1\n3.0,4.0,0\n";
    }
    const Dataset ds = load_csv(path, CsvSchema{{0, 1}, 2});
    CHECK(ds.size() == 3);
    CHECK(ds.examples[0].id == 0);
    CHECK(ds.examples[1].id == 1);
    CHECK(ds.examples[2].id == 2);
    CHECK(ds.num_classes == 2);
    CHECK(ds.examples[1].features[0] == -2.0);
    std::remove(path.c_str());
}

TEST_CASE("load_csv reports the ragged row by number") {
    const std::string path = "test_ragged.csv";
    {
        std::ofstream out(path);
        out << "f0,f1,label\n1,2,0\n3,4,1\n5,6,0\n7,8\n9,10,1\n";  // row 5 is ragged
    }
    CHECK_THROWS_WITH_AS(load_csv(path, CsvSchema{{0, 1}, 2}),
                         doctest::Contains("row 5"), UsageError);
    std::remove(path.c_str());
}

TEST_CASE("load_csv rejects unparsable labels and features") {
    const std::string path = "test_badlabel.csv";
    {
        std::ofstream out(path);
        out << "f0,f1,label\n1,2,zebra\n";
    }
    CHECK_THROWS_AS(load_csv(path, CsvSchema{{0, 1}, 2}), UsageError);
    {
        std::ofstream out(path);
        out << "f0,f1,label\n1,x,0\n";
    }
    CHECK_THROWS_AS(load_csv(path, CsvSchema{{0, 1}, 2}), UsageError);
    std::remove(path.c_str());
}

TEST_CASE("csv save/load round-trips feature values bit-exactly") {
    DriftSpec spec;
    spec.dim = 3;
    spec.num_classes = 2;
    spec.n_source = 25;
    spec.n_target = 5;
    spec.seed = 77;
    const auto [source, target] = make_drift_pair(spec);
    const std::string path = "test_roundtrip.csv";
    save_csv(path, source);
    CsvSchema schema;
    schema.feature_columns = {0, 1, 2};
    schema.label_column = 3;
    const Dataset loaded = load_csv(path, schema);
    REQUIRE(loaded.size() == source.size());
    for (std::size_t i = 0; i < source.size(); ++i) {
        CHECK(loaded.examples[i].label == source.examples[i].label);
        for (std::size_t f = 0; f < 3; ++f) {
            CHECK(loaded.examples[i].features[f] == source.examples[i].features[f]);
        }
    }
    std::remove(path.c_str());
}

TEST_CASE("make_drift_pair is deterministic per seed") {
    DriftSpec spec;
    spec.dim = 5;
    spec.num_classes = 3;
    spec.n_source = 30;
    spec.n_target = 30;
    spec.shift_magnitude = 1.5;
    spec.seed = 9;
    const auto [s1, t1] = make_drift_pair(spec);
    const auto [s2, t2] = make_drift_pair(spec);
    for (std::size_t i = 0; i < s1.size(); ++i) {
        CHECK(s1.examples[i].features == s2.examples[i].features);
    }
    for (std::size_t i = 0; i < t1.size(); ++i) {
        CHECK(t1.examples[i].features == t2.examples[i].features);
    }
    // Target ids continue after source ids: the id spaces never collide.
    CHECK(t1.examples[0].id == static_cast<std::int64_t>(s1.size()));
}

namespace {

double trained_accuracy_gap(double shift, std::int64_t seed, double* drop_out) {
    DriftSpec spec;
    spec.dim = 4;
    spec.num_classes = 3;
    spec.n_source = 300;
    spec.n_target = 300;
    spec.shift_magnitude = shift;
    spec.seed = seed;
    const auto [source, target] = make_drift_pair(spec);

    // Hold out half the source as an in-distribution test split.
    Dataset train, held;
    train.num_classes = held.num_classes = 3;
    for (std::size_t i = 0; i < source.size(); ++i) {
        (i % 2 == 0 ? train : held).examples.push_back(source.examples[i]);
    }

    FpModel m = build_model(ArchDescriptor::dense_net(4, {3}), seed + 1);
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.batch_size = 16;
    cfg.seed = seed + 2;
    for (int e = 0; e < 25; ++e) train_epoch(m, train, cfg);

    const double held_acc = dataset_accuracy(m, held);
    const double target_acc = dataset_accuracy(m, target);
    if (drop_out) *drop_out = held_acc - target_acc;
    return std::fabs(held_acc - target_acc);
}

}  // namespace

TEST_CASE("zero shift: source-trained accuracy is indistinguishable across domains") {
    double gap_sum = 0.0;
    for (std::int64_t seed = 1; seed <= 5; ++seed) gap_sum += trained_accuracy_gap(0.0, seed, nullptr);
    CHECK(gap_sum / 5.0 < 0.05);
}

TEST_CASE("large shift: source-trained accuracy drops on the target domain") {
    double drop_sum = 0.0;
    for (std::int64_t seed = 1; seed <= 5; ++seed) {
        double drop = 0.0;
        trained_accuracy_gap(3.0, seed, &drop);  // 3x the cluster stddev
        drop_sum += drop;
    }
    CHECK(drop_sum / 5.0 >= 0.10);
}

TEST_CASE("split_stream partitions the target exactly once") {
    DriftSpec spec;
    spec.dim = 3;
    spec.num_classes = 2;
    spec.n_source = 10;
    spec.n_target = 100;
    spec.seed = 4;
    const auto [source, target] = make_drift_pair(spec);
    const auto batches = split_stream(target, 10, 99);
    REQUIRE(batches.size() == 10);

    std::set<std::int64_t> seen;
    std::size_t total = 0;
    for (const StreamBatch& b : batches) {
        CHECK(b.examples.size() == 5);
        CHECK(b.paired_test_slice.size() == 5);
        for (const Example& e : b.examples.examples) {
            CHECK(seen.insert(e.id).second);
            ++total;
        }
        for (const Example& e : b.paired_test_slice.examples) {
            CHECK(seen.insert(e.id).second);
            ++total;
        }
    }
    CHECK(total == target.size());
}

TEST_CASE("split_stream with one batch covers the whole target") {
    DriftSpec spec;
    spec.dim = 2;
    spec.num_classes = 2;
    spec.n_source = 10;
    spec.n_target = 40;
    spec.seed = 6;
    const auto [source, target] = make_drift_pair(spec);
    const auto batches = split_stream(target, 1, 5);
    REQUIRE(batches.size() == 1);
    CHECK(batches[0].examples.size() + batches[0].paired_test_slice.size() == target.size());
}

TEST_CASE("split_stream rejects too many batches") {
    DriftSpec spec;
    spec.dim = 2;
    spec.num_classes = 2;
    spec.n_source = 10;
    spec.n_target = 10;
    spec.seed = 6;
    const auto [source, target] = make_drift_pair(spec);
    CHECK_THROWS_AS(split_stream(target, 6, 1), UsageError);
}

TEST_CASE("split_stream is deterministic per seed") {
    DriftSpec spec;
    spec.dim = 2;
    spec.num_classes = 2;
    spec.n_source = 10;
    spec.n_target = 60;
    spec.seed = 6;
    const auto [source, target] = make_drift_pair(spec);
    const auto a = split_stream(target, 5, 42);
    const auto b = split_stream(target, 5, 42);
    for (std::size_t t = 0; t < a.size(); ++t) {
        for (std::size_t i = 0; i < a[t].examples.size(); ++i) {
            CHECK(a[t].examples.examples[i].id == b[t].examples.examples[i].id);
        }
    }
}
