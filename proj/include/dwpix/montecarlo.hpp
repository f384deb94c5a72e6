#pragma once

#include <cstdint>
#include <exception>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dwpix/common.hpp"
#include "dwpix/rng.hpp"

// Deterministic, seedable sampling of process variations and pulse jitter.
//
// Each variation factor is a pure function of (master_seed, trial_index,
// field_tag), so a sweep produces identical tables no matter how trials are
// scheduled. Factors are Gaussian around 1 and truncated to [0.1, 1.9] to
// keep resistances and currents physical.

namespace dwpix {

struct VariationSpec {
    double sigma_tx = 0.2;      ///< relative 1-sigma of transistor drive current
    double sigma_r = 0.2;       ///< relative 1-sigma of every MTJ resistance
    double sigma_jitter = 0.1;  ///< relative 1-sigma of write-pulse duration
    std::uint64_t trials = 1000;
    std::uint64_t master_seed = 0;

    void validate() const {
        require(sigma_tx >= 0.0 && sigma_r >= 0.0 && sigma_jitter >= 0.0,
                "variation: sigmas must be >= 0");
        require(trials >= 1, "variation: trials must be >= 1");
    }
};

enum class FieldTag : std::uint64_t {
    tx = 0,
    r_weight = 1,
    r_acc_pos = 2,
    r_acc_neg = 3,
    r_thr1 = 4,
    r_thr2 = 5,
    jitter = 6,
};

struct VariationSample {
    double m_tx = 1.0;
    double m_r_weight = 1.0;
    double m_r_acc_pos = 1.0;
    double m_r_acc_neg = 1.0;
    double m_r_thr1 = 1.0;
    double m_r_thr2 = 1.0;
    double m_jitter = 1.0;
    std::uint64_t trial_index = 0;

    /// All factors exactly 1 (variation off).
    static VariationSample unit() { return VariationSample{}; }
};

inline constexpr double kFactorLo = 0.1;
inline constexpr double kFactorHi = 1.9;

inline double variation_factor(std::uint64_t seed, std::uint64_t trial, FieldTag tag,
                               double sigma) {
    if (sigma == 0.0) return 1.0;
    const double z = rng::keyed_normal(seed, trial, static_cast<std::uint64_t>(tag), 0);
    return clamp(1.0 + sigma * z, kFactorLo, kFactorHi);
}

inline VariationSample sample(const VariationSpec& spec, std::uint64_t trial_index) {
    spec.validate();
    require(trial_index < spec.trials,
            "sample: trial_index " + std::to_string(trial_index) + " >= trials " +
                std::to_string(spec.trials));
    const std::uint64_t s = spec.master_seed;
    VariationSample v;
    v.m_tx = variation_factor(s, trial_index, FieldTag::tx, spec.sigma_tx);
    v.m_r_weight = variation_factor(s, trial_index, FieldTag::r_weight, spec.sigma_r);
    v.m_r_acc_pos = variation_factor(s, trial_index, FieldTag::r_acc_pos, spec.sigma_r);
    v.m_r_acc_neg = variation_factor(s, trial_index, FieldTag::r_acc_neg, spec.sigma_r);
    v.m_r_thr1 = variation_factor(s, trial_index, FieldTag::r_thr1, spec.sigma_r);
    v.m_r_thr2 = variation_factor(s, trial_index, FieldTag::r_thr2, spec.sigma_r);
    v.m_jitter = variation_factor(s, trial_index, FieldTag::jitter, spec.sigma_jitter);
    v.trial_index = trial_index;
    return v;
}

/// Run a pure per-trial closure over all trials, in trial order.
///
/// The result table is identical for any worker count: each trial writes its
/// own slot. The first failing trial (by index) is rethrown with its index.
template <class F>
auto run_trials(const VariationSpec& spec, F&& fn, unsigned max_workers = 0)
    -> std::vector<decltype(fn(std::uint64_t{}))> {
    using T = decltype(fn(std::uint64_t{}));
    spec.validate();
    const std::uint64_t n = spec.trials;
    std::vector<std::optional<T>> slots(n);
    std::vector<std::pair<std::uint64_t, std::string>> failures;

    unsigned workers = max_workers ? max_workers : std::thread::hardware_concurrency();
    if (workers == 0) workers = 1;
    if (workers > n) workers = static_cast<unsigned>(n);

    if (workers <= 1) {
        for (std::uint64_t t = 0; t < n; ++t) {
            try {
                slots[t].emplace(fn(t));
            } catch (const std::exception& e) {
                failures.emplace_back(t, e.what());
                break;
            }
        }
    } else {
        std::vector<std::thread> pool;
        std::vector<std::vector<std::pair<std::uint64_t, std::string>>> worker_failures(workers);
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::uint64_t t = w; t < n; t += workers) {
                    try {
                        slots[t].emplace(fn(t));
                    } catch (const std::exception& e) {
                        worker_failures[w].emplace_back(t, e.what());
                        return;
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& wf : worker_failures)
            for (auto& f : wf) failures.push_back(f);
    }

    if (!failures.empty()) {
        auto first = failures.front();
        for (const auto& f : failures)
            if (f.first < first.first) first = f;
        throw std::runtime_error("trial " + std::to_string(first.first) + ": " + first.second);
    }

    std::vector<T> out;
    out.reserve(n);
    for (std::uint64_t t = 0; t < n; ++t) out.push_back(std::move(*slots[t]));
    return out;
}

} // namespace dwpix
