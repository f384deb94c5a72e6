#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dwpix/common.hpp"
#include "dwpix/device.hpp"
#include "dwpix/kvconfig.hpp"
#include "dwpix/montecarlo.hpp"
#include "dwpix/pixel.hpp"
#include "dwpix/polyfit.hpp"
#include "dwpix/rng.hpp"

// Behavioral transfer-function extraction.
//
// f1 maps normalized input activation x weight (x in [0,1], nominal current
// over the configuration's top current) to the per-event wall displacement.
// f2 maps the accumulator position difference (d_pos - d_neg in [-1,1]) to
// the normalized divider voltage. Both come from Monte Carlo sweeps; the
// mean curves are least-squares polynomials, noise is kept as a binned
// (mean, std) table, and f2 additionally carries a worst-case lower-bound
// envelope fitted to a per-bin low quantile.

namespace dwpix {

struct ScatterRow {
    double x = 0.0;
    std::uint32_t trial = 0;
    double value = 0.0;
};

struct ScatterTable {
    double domain_lo = 0.0;
    double domain_hi = 1.0;
    std::uint64_t trials = 0;
    std::vector<ScatterRow> rows;
};

/// Default f1 sweep grid. The mdw configuration cannot produce drives below
/// its d_weight = 1 current, so its grid is the off point plus its
/// representable band; cmos and hybrid cover the full [0,1] axis.
inline std::vector<double> default_f1_grid(WeightConfig cfg, const DeviceParams& p,
                                           int points = 33) {
    std::vector<double> grid;
    if (cfg == WeightConfig::mdw) {
        const double lo =
            config_bottom_current_ua(cfg, p) / config_top_current_ua(cfg, p) + 0.01;
        grid.push_back(0.0);
        const int n = points - 5;
        for (int k = 0; k <= n; ++k)
            grid.push_back(lo + (1.0 - lo) * static_cast<double>(k) / n);
    } else {
        for (int k = 0; k < points; ++k)
            grid.push_back(static_cast<double>(k) / (points - 1));
    }
    return grid;
}

inline std::vector<double> default_f2_grid(int points = 41) {
    std::vector<double> grid;
    for (int k = 0; k < points; ++k)
        grid.push_back(-1.0 + 2.0 * static_cast<double>(k) / (points - 1));
    return grid;
}

/// Monte Carlo sweep of per-event displacement vs normalized drive.
inline ScatterTable sweep_f1(WeightConfig cfg, const std::vector<double>& grid,
                             const VariationSpec& spec, const DeviceParams& p,
                             double dt_pulse_s) {
    spec.validate();
    p.validate();
    ScatterTable tab;
    tab.domain_lo = 0.0;
    tab.domain_hi = 1.0;
    tab.trials = spec.trials;
    tab.rows.reserve(grid.size() * spec.trials);
    for (double x : grid) {
        require(x >= 0.0 && x <= 1.0, "sweep_f1: grid point outside [0,1]");
        if (x == 0.0) {
            for (std::uint64_t t = 0; t < spec.trials; ++t)
                tab.rows.push_back({x, static_cast<std::uint32_t>(t), 0.0});
            continue;
        }
        const WeightCell cell = realize_drive(cfg, x, +1, p);
        auto dd = run_trials(spec, [&](std::uint64_t t) {
            const VariationSample s = sample(spec, t);
            const double i = write_current_ua(cell, s, p);
            return step(DwState{0.0}, i, dt_pulse_s * s.m_jitter, p).q_norm;
        });
        for (std::uint64_t t = 0; t < spec.trials; ++t)
            tab.rows.push_back({x, static_cast<std::uint32_t>(t), dd[t]});
    }
    return tab;
}

/// Canonical accumulator placement for a position difference: the midpoint
/// of the feasible interval, so d = 0 maps to the symmetric (0.5, 0.5)
/// divider. The same difference at other absolute positions gives slightly
/// different voltages (the divider is nonlinear); the canonical placement is
/// the representative the f2 curve is defined on.
inline std::pair<double, double> f2_placement(double d_diff) {
    const double lo = std::max(0.0, d_diff);
    const double hi = std::min(1.0, 1.0 + d_diff);
    const double q_pos = 0.5 * (lo + hi);
    return {q_pos, q_pos - d_diff};
}

/// Monte Carlo sweep of the normalized divider voltage vs accumulator
/// position difference.
inline ScatterTable sweep_f2(const std::vector<double>& grid, const VariationSpec& spec,
                             const DeviceParams& p) {
    spec.validate();
    p.validate();
    ScatterTable tab;
    tab.domain_lo = -1.0;
    tab.domain_hi = 1.0;
    tab.trials = spec.trials;
    tab.rows.reserve(grid.size() * spec.trials);
    for (double d : grid) {
        require(d >= -1.0 && d <= 1.0, "sweep_f2: grid point outside [-1,1]");
        const auto [q_pos, q_neg] = f2_placement(d);
        auto vals = run_trials(spec, [&](std::uint64_t t) {
            const VariationSample s = sample(spec, t);
            const double v = solve_divider(q_pos, s.m_r_acc_pos, q_neg, s.m_r_acc_neg, p);
            return v / p.v_read_v;
        });
        for (std::uint64_t t = 0; t < spec.trials; ++t)
            tab.rows.push_back({d, static_cast<std::uint32_t>(t), vals[t]});
    }
    return tab;
}

namespace detail {
inline std::map<double, std::vector<double>> group_by_x(const ScatterTable& tab) {
    std::map<double, std::vector<double>> groups;
    for (const auto& r : tab.rows) groups[r.x].push_back(r.value);
    return groups;
}
inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}
inline double stddev_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}
/// Deterministic empirical quantile (lower nearest rank).
inline double quantile_of(std::vector<double> v, double q) {
    require(!v.empty(), "quantile: empty sample");
    std::sort(v.begin(), v.end());
    const double rank = q * static_cast<double>(v.size() - 1);
    return v[static_cast<std::size_t>(rank)];
}
} // namespace detail

struct PolyFitResult {
    Polynomial poly;
    double rmse = 0.0;
};

inline constexpr int kNoiseBins = 32;

namespace detail {
/// Bucket scatter rows into uniform bins over the table domain.
inline std::vector<std::vector<double>> bucketize(const ScatterTable& tab, int nbins) {
    std::vector<std::vector<double>> buckets(nbins);
    const double w = (tab.domain_hi - tab.domain_lo) / nbins;
    for (const auto& r : tab.rows) {
        int b = static_cast<int>((r.x - tab.domain_lo) / w);
        b = std::min(std::max(b, 0), nbins - 1);
        buckets[b].push_back(r.value);
    }
    return buckets;
}
inline double bin_center(const ScatterTable& tab, int nbins, int b) {
    const double w = (tab.domain_hi - tab.domain_lo) / nbins;
    return tab.domain_lo + (b + 0.5) * w;
}
} // namespace detail

/// OLS polynomial over the per-grid-point trial means (each swept x is one
/// bin of `trials` samples); rmse is reported against those means.
inline PolyFitResult fit_curve(const ScatterTable& tab, int degree = 3) {
    auto groups = detail::group_by_x(tab);
    std::vector<double> xs, ys;
    for (const auto& [x, vals] : groups) {
        xs.push_back(x);
        ys.push_back(detail::mean_of(vals));
    }
    PolyFitResult r;
    r.poly = polyfit(xs, ys, degree, &r.rmse);
    return r;
}

struct NoiseBin {
    double center = 0.0;
    double mean = 0.0;
    double stddev = 0.0;
    std::uint64_t count = 0;
};

struct NoiseTable {
    double lo = 0.0;
    double hi = 1.0;
    std::vector<NoiseBin> bins;

    /// Linear interpolation of the per-bin stddev over non-empty bins.
    double std_at(double x) const {
        std::vector<const NoiseBin*> valid;
        for (const auto& b : bins)
            if (b.count > 0) valid.push_back(&b);
        if (valid.empty()) return 0.0;
        if (x <= valid.front()->center) return valid.front()->stddev;
        if (x >= valid.back()->center) return valid.back()->stddev;
        for (std::size_t i = 1; i < valid.size(); ++i) {
            if (x <= valid[i]->center) {
                const double x0 = valid[i - 1]->center, x1 = valid[i]->center;
                const double w = (x - x0) / (x1 - x0);
                return valid[i - 1]->stddev * (1.0 - w) + valid[i]->stddev * w;
            }
        }
        return valid.back()->stddev;
    }
};

inline NoiseTable noise_stats(const ScatterTable& tab, int nbins = kNoiseBins) {
    require(nbins >= 1, "noise_stats: need at least one bin");
    NoiseTable nt;
    nt.lo = tab.domain_lo;
    nt.hi = tab.domain_hi;
    const auto buckets = detail::bucketize(tab, nbins);
    for (int b = 0; b < nbins; ++b) {
        NoiseBin bin;
        bin.center = detail::bin_center(tab, nbins, b);
        bin.count = buckets[b].size();
        if (bin.count) {
            bin.mean = detail::mean_of(buckets[b]);
            bin.stddev = detail::stddev_of(buckets[b]);
        }
        nt.bins.push_back(bin);
    }
    return nt;
}

/// Fit the worst-case lower bound: a polynomial through the per-grid-point
/// empirical quantile, pinned below the mean curve on the grid.
inline PolyFitResult lower_envelope(const ScatterTable& tab, double quantile,
                                    int degree = 3) {
    require(quantile > 0.0 && quantile <= 0.5, "lower_envelope: quantile must be in (0, 0.5]");
    const double min_trials = 1.0 / quantile;
    auto groups = detail::group_by_x(tab);
    std::vector<double> xs, qs, ms;
    for (auto& [x, vals] : groups) {
        require(static_cast<double>(vals.size()) >= min_trials,
                "lower_envelope: grid point " + std::to_string(x) + " has " +
                    std::to_string(vals.size()) + " samples, need >= " +
                    std::to_string(static_cast<std::uint64_t>(min_trials)) +
                    " for quantile " + std::to_string(quantile));
        xs.push_back(x);
        qs.push_back(detail::quantile_of(vals, quantile));
        ms.push_back(detail::mean_of(vals));
    }
    PolyFitResult env;
    env.poly = polyfit(xs, qs, degree, &env.rmse);
    // pin the envelope at or below the fitted mean on the grid
    const Polynomial mean_poly = polyfit(xs, ms, degree, nullptr);
    double shift = 0.0;
    for (double x : xs) shift = std::max(shift, env.poly.eval(x) - mean_poly.eval(x));
    if (shift > 0.0) env.poly.coeffs[0] -= shift;
    return env;
}

/// Normalized worst-case variation of a sweep: the largest per-grid-point
/// sample standard deviation over the dynamic range of the mean curve
/// (range over nonzero drives; the off state is not a representable weight).
inline double worst_case_variation(const ScatterTable& tab) {
    auto groups = detail::group_by_x(tab);
    require(!groups.empty(), "worst_case_variation: empty scatter");
    double worst = 0.0, mean_max = -1e300, mean_min_nz = 1e300;
    for (const auto& [x, vals] : groups) {
        worst = std::max(worst, detail::stddev_of(vals));
        const double m = detail::mean_of(vals);
        mean_max = std::max(mean_max, m);
        if (x != 0.0) mean_min_nz = std::min(mean_min_nz, m);
    }
    const double dr = mean_max - mean_min_nz;
    require(dr > 0.0, "worst_case_variation: degenerate dynamic range");
    return worst / dr;
}

enum class F2Mode { mean, lower };

struct FitModel {
    int schema_version = 1;
    std::string config_tag = "hybrid";

    Polynomial f1;
    double f1_rmse = 0.0;
    NoiseTable f1_noise;
    double f1_dr = 0.0; ///< dynamic range of the f1 mean curve (nonzero drives)

    Polynomial f2;
    double f2_rmse = 0.0;
    Polynomial f2_lower;
    NoiseTable f2_noise;
    double f2_dr = 0.0;

    // sweep provenance
    std::uint64_t trials = 0;
    std::uint64_t master_seed = 0;
    double sigma_tx = 0.0, sigma_r = 0.0, sigma_jitter = 0.0;
    double dt_pulse_s = 0.0;

    void validate_domains() const {
        require(!f1.coeffs.empty() && !f2.coeffs.empty(), "fit model: missing curves");
    }

    void save(const std::string& path) const;
    static FitModel load(const std::string& path);
};

/// Mean displacement and stddev for a normalized drive x.
inline std::pair<double, double> eval_f1(const FitModel& m, double x) {
    require(x >= 0.0 && x <= 1.0, "eval_f1: x outside [0,1]");
    const double mean = clamp(m.f1.eval(x), 0.0, 1.0);
    return {mean, m.f1_noise.std_at(x)};
}

/// Normalized divider voltage for an accumulator position difference.
inline double eval_f2(const FitModel& m, double d_diff, F2Mode mode) {
    require(d_diff >= -1.0 && d_diff <= 1.0, "eval_f2: d_diff outside [-1,1]");
    const Polynomial& poly = (mode == F2Mode::lower) ? m.f2_lower : m.f2;
    return clamp01(poly.eval(d_diff));
}

inline double eval_f2_std(const FitModel& m, double d_diff) {
    require(d_diff >= -1.0 && d_diff <= 1.0, "eval_f2_std: d_diff outside [-1,1]");
    return m.f2_noise.std_at(d_diff);
}

namespace detail {
inline double dynamic_range(const ScatterTable& tab) {
    auto groups = group_by_x(tab);
    double mx = -1e300, mn = 1e300;
    for (const auto& [x, vals] : groups) {
        const double m = mean_of(vals);
        mx = std::max(mx, m);
        if (x != 0.0) mn = std::min(mn, m);
    }
    return mx - mn;
}
} // namespace detail

/// Run both sweeps and assemble the model.
inline FitModel build_fit_model(WeightConfig cfg, const VariationSpec& spec,
                                const DeviceParams& p, double dt_pulse_s, int degree = 3,
                                double envelope_quantile = 0.01) {
    FitModel m;
    m.config_tag = to_string(cfg);
    const auto f1_tab = sweep_f1(cfg, default_f1_grid(cfg, p), spec, p, dt_pulse_s);
    auto f1_fit = fit_curve(f1_tab, degree);
    m.f1 = std::move(f1_fit.poly);
    m.f1_rmse = f1_fit.rmse;
    m.f1_noise = noise_stats(f1_tab);
    m.f1_dr = detail::dynamic_range(f1_tab);

    const auto f2_tab = sweep_f2(default_f2_grid(), spec, p);
    auto f2_fit = fit_curve(f2_tab, degree);
    m.f2 = std::move(f2_fit.poly);
    m.f2_rmse = f2_fit.rmse;
    m.f2_lower = lower_envelope(f2_tab, envelope_quantile, degree).poly;
    m.f2_noise = noise_stats(f2_tab);
    m.f2_dr = detail::dynamic_range(f2_tab);

    m.trials = spec.trials;
    m.master_seed = spec.master_seed;
    m.sigma_tx = spec.sigma_tx;
    m.sigma_r = spec.sigma_r;
    m.sigma_jitter = spec.sigma_jitter;
    m.dt_pulse_s = dt_pulse_s;
    return m;
}

namespace detail {
inline void noise_to_config(KvConfig& cfg, const std::string& prefix, const NoiseTable& nt) {
    cfg.set_double(prefix + ".lo", nt.lo);
    cfg.set_double(prefix + ".hi", nt.hi);
    std::vector<double> centers, means, stds, counts;
    for (const auto& b : nt.bins) {
        centers.push_back(b.center);
        means.push_back(b.mean);
        stds.push_back(b.stddev);
        counts.push_back(static_cast<double>(b.count));
    }
    cfg.set_doubles(prefix + ".centers", centers);
    cfg.set_doubles(prefix + ".means", means);
    cfg.set_doubles(prefix + ".stddevs", stds);
    cfg.set_doubles(prefix + ".counts", counts);
}
inline NoiseTable noise_from_config(const KvConfig& cfg, const std::string& prefix) {
    NoiseTable nt;
    nt.lo = cfg.get_double(prefix + ".lo");
    nt.hi = cfg.get_double(prefix + ".hi");
    const auto centers = cfg.get_doubles(prefix + ".centers");
    const auto means = cfg.get_doubles(prefix + ".means");
    const auto stds = cfg.get_doubles(prefix + ".stddevs");
    const auto counts = cfg.get_doubles(prefix + ".counts");
    require_user(centers.size() == means.size() && means.size() == stds.size() &&
                     stds.size() == counts.size(),
                 "fit model: inconsistent noise table arrays under " + prefix);
    for (std::size_t i = 0; i < centers.size(); ++i)
        nt.bins.push_back(
            {centers[i], means[i], stds[i], static_cast<std::uint64_t>(counts[i])});
    return nt;
}
} // namespace detail

inline void FitModel::save(const std::string& path) const {
    KvConfig cfg;
    cfg.set_int("fitmodel.schema_version", schema_version);
    cfg.set("fitmodel.config_tag", config_tag);
    cfg.set_doubles("fitmodel.f1_coeffs", f1.coeffs);
    cfg.set_double("fitmodel.f1_rmse", f1_rmse);
    cfg.set_double("fitmodel.f1_dr", f1_dr);
    detail::noise_to_config(cfg, "fitmodel.f1_noise", f1_noise);
    cfg.set_doubles("fitmodel.f2_coeffs", f2.coeffs);
    cfg.set_double("fitmodel.f2_rmse", f2_rmse);
    cfg.set_doubles("fitmodel.f2_lower_coeffs", f2_lower.coeffs);
    detail::noise_to_config(cfg, "fitmodel.f2_noise", f2_noise);
    cfg.set_double("fitmodel.f2_dr", f2_dr);
    cfg.set_u64("fitmodel.trials", trials);
    cfg.set_u64("fitmodel.master_seed", master_seed);
    cfg.set_double("fitmodel.sigma_tx", sigma_tx);
    cfg.set_double("fitmodel.sigma_r", sigma_r);
    cfg.set_double("fitmodel.sigma_jitter", sigma_jitter);
    cfg.set_double("fitmodel.dt_pulse_s", dt_pulse_s);
    cfg.save(path);
}

inline FitModel FitModel::load(const std::string& path) {
    const KvConfig cfg = KvConfig::load(path);
    FitModel m;
    m.schema_version = static_cast<int>(cfg.get_int("fitmodel.schema_version"));
    require_user(m.schema_version == 1,
                 "fit model " + path + ": unsupported schema version " +
                     std::to_string(m.schema_version));
    m.config_tag = cfg.get_string("fitmodel.config_tag");
    m.f1.coeffs = cfg.get_doubles("fitmodel.f1_coeffs");
    m.f1_rmse = cfg.get_double("fitmodel.f1_rmse");
    m.f1_dr = cfg.get_double("fitmodel.f1_dr");
    m.f1_noise = detail::noise_from_config(cfg, "fitmodel.f1_noise");
    m.f2.coeffs = cfg.get_doubles("fitmodel.f2_coeffs");
    m.f2_rmse = cfg.get_double("fitmodel.f2_rmse");
    m.f2_lower.coeffs = cfg.get_doubles("fitmodel.f2_lower_coeffs");
    m.f2_noise = detail::noise_from_config(cfg, "fitmodel.f2_noise");
    m.f2_dr = cfg.get_double("fitmodel.f2_dr");
    m.trials = cfg.get_u64("fitmodel.trials");
    m.master_seed = cfg.get_u64("fitmodel.master_seed");
    m.sigma_tx = cfg.get_double("fitmodel.sigma_tx");
    m.sigma_r = cfg.get_double("fitmodel.sigma_r");
    m.sigma_jitter = cfg.get_double("fitmodel.sigma_jitter");
    m.dt_pulse_s = cfg.get_double("fitmodel.dt_pulse_s");
    m.validate_domains();
    return m;
}

} // namespace dwpix
