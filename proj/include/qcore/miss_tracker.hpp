#ifndef QCORE_MISS_TRACKER_HPP
#define QCORE_MISS_TRACKER_HPP

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qcore/common.hpp"
#include "qcore/dataset.hpp"
#include "qcore/nn.hpp"
#include "qcore/quantizer.hpp"

namespace qcore {

// PMF level tag meaning "sum over all tracked quantization levels".
inline constexpr int kSummedLevel = -1;

// Per-example, per-level quantization-miss counters. A miss is recorded when
// an example's correctness indicator transitions from 1 to 0 between two
// consecutive observed epochs under the level's quantized proxy model. The
// first observation only initializes the indicator.
struct MissTable {
    std::map<std::pair<std::int64_t, int>, int> misses;
    std::map<std::pair<std::int64_t, int>, bool> last_correct;
    int epochs_observed = 0;
    std::vector<int> levels;
    std::vector<std::int64_t> example_ids;

    static MissTable create(const Dataset& data, const QuantLevels& levels) {
        levels.validate();
        MissTable t;
        t.levels = levels.levels;
        std::sort(t.levels.begin(), t.levels.end());
        t.levels.erase(std::unique(t.levels.begin(), t.levels.end()), t.levels.end());
        t.example_ids.reserve(data.size());
        for (const Example& e : data.examples) t.example_ids.push_back(e.id);
        std::sort(t.example_ids.begin(), t.example_ids.end());
        for (std::int64_t id : t.example_ids) {
            for (int j : t.levels) t.misses[{id, j}] = 0;
        }
        return t;
    }

    // Fixture/import path: a table with fully specified counts, one observed
    // epoch per maximum count so the count invariant holds.
    static MissTable from_counts(const std::vector<std::pair<std::int64_t, int>>& id_and_count, int level) {
        MissTable t;
        t.levels = {level};
        int max_count = 0;
        for (const auto& [id, count] : id_and_count) {
            t.example_ids.push_back(id);
            t.misses[{id, level}] = count;
            max_count = std::max(max_count, count);
        }
        std::sort(t.example_ids.begin(), t.example_ids.end());
        t.epochs_observed = max_count + 1;
        return t;
    }

    int miss_count(std::int64_t id, int level) const {
        auto it = misses.find({id, level});
        return it == misses.end() ? 0 : it->second;
    }

    bool tracks_level(int level) const {
        return std::find(levels.begin(), levels.end(), level) != levels.end();
    }
};

namespace detail {

inline void check_registration(const MissTable& table, const Dataset& data) {
    if (data.size() != table.example_ids.size()) {
        throw UsageError("miss tracker: dataset has " + std::to_string(data.size()) + " examples, table registered " +
                         std::to_string(table.example_ids.size()));
    }
    for (const Example& e : data.examples) {
        if (!std::binary_search(table.example_ids.begin(), table.example_ids.end(), e.id)) {
            throw UsageError("miss tracker: example id " + std::to_string(e.id) + " not registered in table");
        }
    }
}

}  // namespace detail

// Evaluates temporary quantized proxies of the model at every requested level
// and accumulates 1->0 correctness transitions. Proxies are pure functions of
// the model; the model itself is never modified. Level 32 is the identity
// proxy (full precision).
inline void observe_epoch(MissTable& table, const FpModel& model, const QuantLevels& levels, const Dataset& data) {
    detail::check_registration(table, data);
    for (int j : levels.levels) {
        if (!table.tracks_level(j)) {
            throw UsageError("miss tracker: level " + std::to_string(j) + " not registered in table");
        }
    }
    for (int j : levels.levels) {
        FpModel proxy;
        const FpModel* eval_model = &model;
        if (j != kFullPrecisionLevel) {
            proxy = dequantize(quantize_model(model, j));
            eval_model = &proxy;
        }
        for (const Example& e : data.examples) {
            const bool correct = forward(*eval_model, e).predicted_label == e.label;
            const std::pair<std::int64_t, int> key{e.id, j};
            auto it = table.last_correct.find(key);
            if (it != table.last_correct.end()) {
                if (it->second && !correct) ++table.misses[key];
                it->second = correct;
            } else {
                table.last_correct[key] = correct;
            }
        }
    }
    ++table.epochs_observed;
}

// ---------------------------------------------------------------------------
// Miss PMF: histogram {(k, N_k)} of how many examples accumulated exactly k
// misses. Bins are dense from 0 to K. A summed PMF adds the per-level
// histograms, so its total count is |levels| * |examples|.
// ---------------------------------------------------------------------------

struct MissPmf {
    struct Bin {
        int miss_count = 0;
        long long example_count = 0;
    };
    std::vector<Bin> bins;  // dense, ascending miss count, bins[k].miss_count == k
    int max_misses = 0;     // K: largest k with N_k > 0
    int level = kSummedLevel;
    std::vector<int> levels;  // levels the PMF aggregates (size 1 unless summed)

    long long total_count() const {
        long long t = 0;
        for (const Bin& b : bins) t += b.example_count;
        return t;
    }
};

namespace detail {

inline MissPmf pmf_from_counts(const std::vector<int>& counts) {
    MissPmf pmf;
    int k_max = 0;
    for (int c : counts) k_max = std::max(k_max, c);
    pmf.bins.resize(static_cast<std::size_t>(k_max) + 1);
    for (int k = 0; k <= k_max; ++k) pmf.bins[static_cast<std::size_t>(k)].miss_count = k;
    for (int c : counts) ++pmf.bins[static_cast<std::size_t>(c)].example_count;
    pmf.max_misses = 0;
    for (const MissPmf::Bin& b : pmf.bins) {
        if (b.example_count > 0) pmf.max_misses = b.miss_count;
    }
    return pmf;
}

}  // namespace detail

inline MissPmf build_pmf(const MissTable& table, int level) {
    if (table.epochs_observed < 1) throw UsageError("build_pmf: table has no observed epochs");
    if (!table.tracks_level(level)) {
        throw UsageError("build_pmf: level " + std::to_string(level) + " not tracked by table");
    }
    std::vector<int> counts;
    counts.reserve(table.example_ids.size());
    for (std::int64_t id : table.example_ids) counts.push_back(table.miss_count(id, level));
    MissPmf pmf = detail::pmf_from_counts(counts);
    pmf.level = level;
    pmf.levels = {level};
    return pmf;
}

inline MissPmf build_pmf_summed(const MissTable& table, const QuantLevels& levels) {
    if (table.epochs_observed < 1) throw UsageError("build_pmf: table has no observed epochs");
    levels.validate();
    std::vector<int> counts;
    counts.reserve(table.example_ids.size() * levels.levels.size());
    for (int j : levels.levels) {
        if (!table.tracks_level(j)) {
            throw UsageError("build_pmf: level " + std::to_string(j) + " not tracked by table");
        }
        for (std::int64_t id : table.example_ids) counts.push_back(table.miss_count(id, j));
    }
    MissPmf pmf = detail::pmf_from_counts(counts);
    pmf.level = kSummedLevel;
    pmf.levels = levels.levels;
    std::sort(pmf.levels.begin(), pmf.levels.end());
    return pmf;
}

// ---------------------------------------------------------------------------
// Tabular exports for audit and for rebuilding PMFs in later pipeline stages.
// ---------------------------------------------------------------------------

inline void save_miss_table(const MissTable& table, std::ostream& os) {
    os << "exampleId\tlevel\tmissCount\n";
    for (std::int64_t id : table.example_ids) {
        for (int j : table.levels) {
            os << id << "\t" << j << "\t" << table.miss_count(id, j) << "\n";
        }
    }
}

inline void save_miss_table(const MissTable& table, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw UsageError("save_miss_table: cannot open '" + path + "' for writing");
    save_miss_table(table, os);
}

inline MissTable load_miss_table(std::istream& is) {
    MissTable t;
    std::string line;
    if (!std::getline(is, line)) throw UsageError("load_miss_table: empty input");
    int max_count = 0;
    std::vector<std::int64_t> ids;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::int64_t id = 0;
        int level = 0, count = 0;
        if (!(ss >> id >> level >> count)) throw UsageError("load_miss_table: malformed line '" + line + "'");
        t.misses[{id, level}] = count;
        if (std::find(t.levels.begin(), t.levels.end(), level) == t.levels.end()) t.levels.push_back(level);
        ids.push_back(id);
        max_count = std::max(max_count, count);
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    t.example_ids = std::move(ids);
    std::sort(t.levels.begin(), t.levels.end());
    t.epochs_observed = max_count + 1;
    return t;
}

inline MissTable load_miss_table(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("load_miss_table: cannot open '" + path + "'");
    return load_miss_table(is);
}

inline void save_pmf(const MissPmf& pmf, std::ostream& os) {
    os << "k\tN_k\n";
    for (const MissPmf::Bin& b : pmf.bins) os << b.miss_count << "\t" << b.example_count << "\n";
}

inline void save_pmf(const MissPmf& pmf, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw UsageError("save_pmf: cannot open '" + path + "' for writing");
    save_pmf(pmf, os);
}

inline MissPmf load_pmf(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw UsageError("load_pmf: empty input");
    std::map<int, long long> counts;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        int k = 0;
        long long n = 0;
        if (!(ss >> k >> n)) throw UsageError("load_pmf: malformed line '" + line + "'");
        if (k < 0 || n < 0) throw UsageError("load_pmf: negative bin entry");
        counts[k] += n;
    }
    MissPmf pmf;
    const int k_max = counts.empty() ? 0 : counts.rbegin()->first;
    pmf.bins.resize(static_cast<std::size_t>(k_max) + 1);
    for (int k = 0; k <= k_max; ++k) {
        pmf.bins[static_cast<std::size_t>(k)].miss_count = k;
        auto it = counts.find(k);
        pmf.bins[static_cast<std::size_t>(k)].example_count = it == counts.end() ? 0 : it->second;
    }
    for (const MissPmf::Bin& b : pmf.bins) {
        if (b.example_count > 0) pmf.max_misses = b.miss_count;
    }
    return pmf;
}

inline MissPmf load_pmf(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("load_pmf: cannot open '" + path + "'");
    return load_pmf(is);
}

}  // namespace qcore

#endif  // QCORE_MISS_TRACKER_HPP
