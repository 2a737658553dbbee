#ifndef QCORE_CORESET_HPP
#define QCORE_CORESET_HPP

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qcore/calibration.hpp"
#include "qcore/common.hpp"
#include "qcore/dataset.hpp"
#include "qcore/miss_tracker.hpp"
#include "qcore/quantizer.hpp"

namespace qcore {

// A fixed-budget subset sampled to match a quantization-miss distribution.
struct QCoreSet {
    std::vector<std::int64_t> example_ids;  // selection order
    int size_budget = 0;
    MissPmf source_pmf;
    double lambda = 0.0;  // sizeBudget / |source pool|
    std::int64_t seed = 0;

    struct BinStat {
        int miss_count = 0;
        long long population = 0;  // N_k, with multiplicity for summed or scaled pools
        long long quota = 0;       // adjusted quota
        long long selected = 0;    // actually drawn from this bin
    };
    std::vector<BinStat> bin_stats;
    std::vector<std::string> warnings;

    void validate() const {
        if (static_cast<int>(example_ids.size()) != size_budget) {
            throw NumericError("qcore set: holds " + std::to_string(example_ids.size()) + " ids, budget is " +
                               std::to_string(size_budget));
        }
        std::set<std::int64_t> uniq(example_ids.begin(), example_ids.end());
        if (uniq.size() != example_ids.size()) throw NumericError("qcore set: duplicate example ids");
    }
};

// ---------------------------------------------------------------------------
// Quota apportionment: largest-remainder over the proportional shares
// budget * N_k / sum(N_k). For a single-level PMF over the pool this equals
// the rounded lambda * N_k allocation; remainder ties favor harder bins
// (larger k).
// ---------------------------------------------------------------------------

inline std::vector<long long> apportion_quotas(const std::vector<long long>& populations, long long budget) {
    long long total = 0;
    for (long long n : populations) {
        if (n < 0) throw UsageError("apportion_quotas: negative bin population");
        total += n;
    }
    if (total <= 0) throw UsageError("apportion_quotas: empty distribution");
    if (budget < 0) throw UsageError("apportion_quotas: negative budget");

    std::vector<long long> quotas(populations.size(), 0);
    std::vector<std::pair<double, std::size_t>> fractions;  // (fractional part, bin index)
    long long assigned = 0;
    for (std::size_t k = 0; k < populations.size(); ++k) {
        const double share = static_cast<double>(budget) * static_cast<double>(populations[k]) / static_cast<double>(total);
        const double fl = std::floor(share);
        quotas[k] = static_cast<long long>(fl);
        assigned += quotas[k];
        fractions.emplace_back(share - fl, k);
    }
    long long remainder = budget - assigned;
    std::sort(fractions.begin(), fractions.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second > b.second;  // ties: larger miss count first
    });
    for (std::size_t i = 0; i < fractions.size() && remainder > 0; ++i) {
        ++quotas[fractions[i].second];
        --remainder;
    }
    return quotas;
}

// ---------------------------------------------------------------------------
// Core sampler over a binned pool. Bins may hold an id more than once (summed
// PMFs and scaled-up update pools); multiplicity weights the quota while the
// draw itself is uniform over the bin's distinct, not-yet-selected ids.
// ---------------------------------------------------------------------------

namespace detail {

inline QCoreSet sample_binned(const std::map<int, std::vector<std::int64_t>>& bins, int budget, std::int64_t seed,
                              const MissPmf& pmf, double lambda) {
    if (budget < 1) throw UsageError("sample: budget must be >= 1");

    std::set<std::int64_t> distinct;
    for (const auto& [k, ids] : bins) distinct.insert(ids.begin(), ids.end());
    if (static_cast<long long>(distinct.size()) < budget) {
        throw UsageError("sample: budget " + std::to_string(budget) + " exceeds pool of " +
                         std::to_string(distinct.size()) + " distinct examples");
    }

    const int k_max = bins.empty() ? 0 : bins.rbegin()->first;
    std::vector<long long> populations(static_cast<std::size_t>(k_max) + 1, 0);
    for (const auto& [k, ids] : bins) populations[static_cast<std::size_t>(k)] = static_cast<long long>(ids.size());
    const std::vector<long long> quotas = apportion_quotas(populations, budget);

    QCoreSet core;
    core.size_budget = budget;
    core.source_pmf = pmf;
    core.lambda = lambda;
    core.seed = seed;

    // Deterministic per-bin candidate orders: distinct ids sorted, then
    // shuffled by a bin-specific stream of the caller's seed.
    std::map<int, std::vector<std::int64_t>> shuffled;
    for (const auto& [k, ids] : bins) {
        std::vector<std::int64_t> cand(ids.begin(), ids.end());
        std::sort(cand.begin(), cand.end());
        cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
        Rng rng(mix_seed(seed, 1000 + k));
        rng.shuffle(cand);
        shuffled[k] = std::move(cand);
    }

    core.bin_stats.resize(static_cast<std::size_t>(k_max) + 1);
    for (int k = 0; k <= k_max; ++k) {
        core.bin_stats[static_cast<std::size_t>(k)].miss_count = k;
        core.bin_stats[static_cast<std::size_t>(k)].population = populations[static_cast<std::size_t>(k)];
        core.bin_stats[static_cast<std::size_t>(k)].quota = quotas[static_cast<std::size_t>(k)];
    }

    std::set<std::int64_t> selected;
    std::map<int, std::size_t> cursor;  // next unread position in each shuffled bin

    auto take_from_bin = [&](int k, long long want) {
        long long taken = 0;
        auto it = shuffled.find(k);
        if (it == shuffled.end()) return taken;
        std::size_t& pos = cursor[k];
        while (taken < want && pos < it->second.size()) {
            const std::int64_t id = it->second[pos++];
            if (selected.insert(id).second) {
                core.example_ids.push_back(id);
                ++core.bin_stats[static_cast<std::size_t>(k)].selected;
                ++taken;
            }
        }
        return taken;
    };

    // Hard bins first; deficits recorded, then spilled to the nearest bins.
    std::vector<std::pair<int, long long>> deficits;
    for (int k = k_max; k >= 0; --k) {
        const long long want = quotas[static_cast<std::size_t>(k)];
        if (want == 0) continue;
        const long long got = take_from_bin(k, want);
        if (got < want) deficits.emplace_back(k, want - got);
    }
    for (auto& [origin, deficit] : deficits) {
        for (int dist = 1; dist <= 2 * k_max + 1 && deficit > 0; ++dist) {
            for (int k : {origin + dist, origin - dist}) {  // larger k first on distance ties
                if (k < 0 || k > k_max || deficit <= 0) continue;
                const long long got = take_from_bin(k, deficit);
                if (got > 0) {
                    deficit -= got;
                    core.warnings.push_back("bin " + std::to_string(origin) + ": quota short by " + std::to_string(got) +
                                            ", spilled to bin " + std::to_string(k));
                }
            }
        }
    }

    core.validate();
    return core;
}

inline std::map<int, std::vector<std::int64_t>> bins_from_table(const std::vector<std::int64_t>& pool_ids,
                                                                const MissTable& table,
                                                                const std::vector<int>& levels) {
    std::map<int, std::vector<std::int64_t>> bins;
    for (int j : levels) {
        if (!table.tracks_level(j)) {
            throw UsageError("sample_qcore: level " + std::to_string(j) + " not tracked by miss table");
        }
        for (std::int64_t id : pool_ids) bins[table.miss_count(id, j)].push_back(id);
    }
    return bins;
}

}  // namespace detail

// Distribution-matched sampling of a QCore from a training pool.
inline QCoreSet sample_qcore(const Dataset& pool, const MissPmf& pmf, const MissTable& table, int budget,
                             std::int64_t seed) {
    if (budget < 1) throw UsageError("sample_qcore: budget must be >= 1");
    if (static_cast<std::size_t>(budget) > pool.size()) {
        throw UsageError("sample_qcore: budget " + std::to_string(budget) + " exceeds pool size " +
                         std::to_string(pool.size()));
    }
    std::vector<std::int64_t> pool_ids;
    pool_ids.reserve(pool.size());
    for (const Example& e : pool.examples) pool_ids.push_back(e.id);

    const auto bins = detail::bins_from_table(pool_ids, table, pmf.levels);

    // The PMF must describe exactly this pool under this table.
    for (const auto& [k, ids] : bins) {
        const long long expected = (k < static_cast<int>(pmf.bins.size())) ? pmf.bins[static_cast<std::size_t>(k)].example_count : 0;
        if (expected != static_cast<long long>(ids.size())) {
            throw UsageError("sample_qcore: PMF bin " + std::to_string(k) + " holds " + std::to_string(expected) +
                             " examples but the table derives " + std::to_string(ids.size()));
        }
    }

    const double lambda = static_cast<double>(budget) / static_cast<double>(pool.size());
    return detail::sample_binned(bins, budget, seed, pmf, lambda);
}

// ---------------------------------------------------------------------------
// Information loss. The miss-cost mean over the full pool vs. the core must
// differ by at most K, the maximum miss level.
// ---------------------------------------------------------------------------

struct InfoLossReport {
    double full_mean = 0.0;
    double core_mean = 0.0;
    double epsilon = 0.0;
    int bound_k = 0;
};

inline InfoLossReport info_loss(const MissPmf& full, const std::vector<long long>& core_counts, long long core_total) {
    if (core_total <= 0) throw UsageError("info_loss: zero-size core");
    if (core_counts.size() != full.bins.size()) {
        throw UsageError("info_loss: core bin count does not match the PMF");
    }
    const long long full_total = full.total_count();
    if (full_total <= 0) throw UsageError("info_loss: empty PMF");

    double full_weighted = 0.0;
    double core_weighted = 0.0;
    for (std::size_t i = 0; i < full.bins.size(); ++i) {
        full_weighted += static_cast<double>(full.bins[i].miss_count) * static_cast<double>(full.bins[i].example_count);
        core_weighted += static_cast<double>(full.bins[i].miss_count) * static_cast<double>(core_counts[i]);
    }

    InfoLossReport report;
    report.full_mean = full_weighted / static_cast<double>(full_total);
    report.core_mean = core_weighted / static_cast<double>(core_total);
    report.epsilon = std::fabs(report.full_mean - report.core_mean);
    report.bound_k = full.max_misses;
    if (report.epsilon > static_cast<double>(report.bound_k) + 1e-9) {
        throw NumericError("info_loss: epsilon " + std::to_string(report.epsilon) + " exceeds bound K=" +
                           std::to_string(report.bound_k));
    }
    return report;
}

// Rounded per-bin core counts at compression ratio lambda.
inline std::vector<long long> rounded_quotas(const MissPmf& full, double lambda) {
    std::vector<long long> counts(full.bins.size(), 0);
    for (std::size_t i = 0; i < full.bins.size(); ++i) {
        counts[i] = round_half_away(lambda * static_cast<double>(full.bins[i].example_count));
    }
    return counts;
}

// The rounding analysis at ratio lambda: core bin counts round(lambda * N_k),
// core size round(lambda * |D|).
inline InfoLossReport info_loss_at(const MissPmf& full, double lambda) {
    if (!(lambda > 0.0) || lambda > 1.0) throw UsageError("info_loss_at: lambda must lie in (0, 1]");
    const long long core_total = round_half_away(lambda * static_cast<double>(full.total_count()));
    return info_loss(full, rounded_quotas(full, lambda), core_total);
}

// Report for an actually constructed core, from its recorded per-bin selections.
inline InfoLossReport info_loss_for_core(const QCoreSet& core) {
    std::vector<long long> counts(core.source_pmf.bins.size(), 0);
    for (const QCoreSet::BinStat& b : core.bin_stats) {
        if (b.miss_count < static_cast<int>(counts.size())) counts[static_cast<std::size_t>(b.miss_count)] = b.selected;
    }
    return info_loss(core.source_pmf, counts, static_cast<long long>(core.example_ids.size()));
}

// ---------------------------------------------------------------------------
// Stream update: scale the core up to the batch size by replication, shadow a
// calibration of the deployed model over the union while counting misses at
// the model's own level, then resample a fresh core of the original budget
// from the union. Replicated ids collapse; the result never holds duplicates.
// ---------------------------------------------------------------------------

inline QCoreSet update_qcore(const QCoreSet& core, const StreamBatch& batch, const QuantModel& qm,
                             const TrainConfig& cfg, std::int64_t seed, const ExamplePool& pool) {
    if (batch.examples.empty()) throw UsageError("update_qcore: empty stream batch");
    core.validate();

    const std::size_t m = batch.examples.size();
    const std::size_t c = core.example_ids.size();
    const std::size_t replicas = (m + c - 1) / c;  // ceil(|Dt| / |Dc|), >= 1

    // Scaled-up core: each member replicated, truncated to the batch size (but
    // never below the full core, so small batches cannot shrink the pool under
    // the budget).
    std::vector<std::int64_t> scaled;
    scaled.reserve(std::max(m, c));
    for (std::size_t rep = 0; rep < replicas && scaled.size() < std::max(m, c); ++rep) {
        for (std::size_t i = 0; i < c && scaled.size() < std::max(m, c); ++i) {
            scaled.push_back(core.example_ids[i]);
        }
    }

    std::vector<std::int64_t> union_slots = scaled;
    for (const Example& e : batch.examples.examples) union_slots.push_back(e.id);

    std::vector<std::int64_t> distinct(union_slots.begin(), union_slots.end());
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    std::vector<const Example*> union_examples;
    union_examples.reserve(distinct.size());
    for (std::int64_t id : distinct) union_examples.push_back(&pool.get(id));

    // Shadow calibration: a throwaway copy of the deployed model walks the
    // calibration epochs while we count 1->0 transitions per example. The
    // correctness state starts from the deployed (pre-update) model.
    BpCalibrator shadow(qm);
    std::map<std::int64_t, int> misses;
    std::map<std::int64_t, bool> prev_correct;
    for (const Example* e : union_examples) {
        prev_correct[e->id] = forward(shadow.quantized_view(), *e).predicted_label == e->label;
        misses[e->id] = 0;
    }
    for (int s = 0; s < cfg.epochs; ++s) {
        shadow.run_epoch(union_examples, cfg, mix_seed(seed, 200 + s));
        for (const Example* e : union_examples) {
            const bool correct = forward(shadow.quantized_view(), *e).predicted_label == e->label;
            bool& prev = prev_correct[e->id];
            if (prev && !correct) ++misses[e->id];
            prev = correct;
        }
    }

    // PMF and bins over the scaled multiset: replicated members keep their
    // weight in the distribution, but each id can be selected only once.
    std::vector<int> slot_counts;
    slot_counts.reserve(union_slots.size());
    std::map<int, std::vector<std::int64_t>> bins;
    for (std::int64_t id : union_slots) {
        const int k = misses[id];
        slot_counts.push_back(k);
        bins[k].push_back(id);
    }
    MissPmf pmf = detail::pmf_from_counts(slot_counts);
    pmf.level = qm.bit_width;
    pmf.levels = {qm.bit_width};

    const double lambda = static_cast<double>(core.size_budget) / static_cast<double>(distinct.size());
    QCoreSet updated = detail::sample_binned(bins, core.size_budget, mix_seed(seed, 300), pmf, lambda);
    return updated;
}

// ---------------------------------------------------------------------------
// QCore file: self-describing JSON with the budget, lambda, seed, bin table
// and member ids. Loading and re-saving reproduces the bytes.
// ---------------------------------------------------------------------------

inline nlohmann::json qcore_to_json(const QCoreSet& core) {
    nlohmann::json j;
    j["sizeBudget"] = core.size_budget;
    j["lambda"] = core.lambda;
    j["seed"] = core.seed;
    j["pmfLevel"] = core.source_pmf.level;
    j["pmfLevels"] = core.source_pmf.levels;
    j["bins"] = nlohmann::json::array();
    for (const QCoreSet::BinStat& b : core.bin_stats) {
        j["bins"].push_back({{"k", b.miss_count}, {"N_k", b.population}, {"q_k", b.quota}, {"selected", b.selected}});
    }
    j["memberIds"] = core.example_ids;
    j["warnings"] = core.warnings;
    return j;
}

inline QCoreSet qcore_from_json(const nlohmann::json& j) {
    QCoreSet core;
    core.size_budget = j.at("sizeBudget").get<int>();
    core.lambda = j.at("lambda").get<double>();
    core.seed = j.at("seed").get<std::int64_t>();
    core.source_pmf.level = j.at("pmfLevel").get<int>();
    core.source_pmf.levels = j.at("pmfLevels").get<std::vector<int>>();
    for (const auto& bj : j.at("bins")) {
        QCoreSet::BinStat b;
        b.miss_count = bj.at("k").get<int>();
        b.population = bj.at("N_k").get<long long>();
        b.quota = bj.at("q_k").get<long long>();
        b.selected = bj.at("selected").get<long long>();
        core.bin_stats.push_back(b);
        MissPmf::Bin pb;
        pb.miss_count = b.miss_count;
        pb.example_count = b.population;
        core.source_pmf.bins.push_back(pb);
        if (b.population > 0) core.source_pmf.max_misses = b.miss_count;
    }
    core.example_ids = j.at("memberIds").get<std::vector<std::int64_t>>();
    core.warnings = j.at("warnings").get<std::vector<std::string>>();
    core.validate();
    return core;
}

inline void save_qcore(const QCoreSet& core, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw UsageError("save_qcore: cannot open '" + path + "' for writing");
    os << qcore_to_json(core).dump(2) << "\n";
}

inline QCoreSet load_qcore(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("load_qcore: cannot open '" + path + "'");
    nlohmann::json j;
    is >> j;
    return qcore_from_json(j);
}

}  // namespace qcore

#endif  // QCORE_CORESET_HPP
