#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "dwpix/device.hpp"
#include "dwpix/montecarlo.hpp"
#include "dwpix/pixel.hpp"
#include "dwpix/rng.hpp"

// Shipped channel-level demo scenarios: a 3x3 hybrid kernel with random
// signs and event timings over one integration window (Monte Carlo margin
// study), and a two-application weight/threshold reprogramming script.

namespace dwpix {

inline constexpr double kDefaultDtPulseS = 1e-9;

struct ChannelEvent {
    std::int64_t t_us = 0;
    std::size_t cell = 0;
};

struct KernelScenario {
    ChannelState channel;
    std::vector<ChannelEvent> events;
    double dt_pulse_s = kDefaultDtPulseS;
};

/// 3x3 hybrid kernel, positive-leaning random weights, random event timings
/// across a 1 ms integration window. The threshold divider sits below the
/// nominal pre-activation so the shipped scenario fires with a healthy
/// margin in every Monte Carlo trial.
inline KernelScenario make_kernel_mc_scenario(const DeviceParams& p,
                                              std::uint64_t scenario_seed = 2024) {
    KernelScenario sc;
    auto u = [&](std::uint64_t a, std::uint64_t b) {
        return rng::keyed_uniform(scenario_seed, a, b, 5);
    };
    for (std::size_t k = 0; k < 9; ++k) {
        const int sign = (k < 6) ? +1 : -1; // net positive drive
        const double x = 0.55 + 0.45 * u(1, k);
        sc.channel.weights.push_back(realize_drive(WeightConfig::hybrid, x, sign, p));
    }
    sc.channel.thr = ThresholdDivider{0.30, 0.70};
    const int n_events = 36;
    std::vector<std::int64_t> times;
    for (int e = 0; e < n_events; ++e)
        times.push_back(static_cast<std::int64_t>(u(2, e) * 999.0));
    std::sort(times.begin(), times.end());
    for (int e = 0; e < n_events; ++e) {
        ChannelEvent ev;
        ev.t_us = times[e];
        // positive cells are hit more often than negative ones
        ev.cell = static_cast<std::size_t>(u(3, e) * (u(4, e) < 0.75 ? 6.0 : 9.0));
        if (ev.cell > 8) ev.cell = 8;
        sc.events.push_back(ev);
    }
    return sc;
}

struct ChannelTrialResult {
    double v_pre = 0.0;
    double v_th = 0.0;
    int spike = 0;
    double margin = 0.0;
    std::vector<double> q_pos_traj;
    std::vector<double> q_neg_traj;
};

/// Replay a kernel scenario under one variation sample.
inline ChannelTrialResult run_kernel_scenario(const KernelScenario& sc,
                                              const VariationSample& s,
                                              const DeviceParams& p,
                                              bool keep_trajectory = false) {
    ChannelState ch = sc.channel;
    ChannelTrialResult r;
    for (const auto& ev : sc.events) {
        ch = apply_event(ch, ev.cell, sc.dt_pulse_s, s, p);
        if (keep_trajectory) {
            r.q_pos_traj.push_back(ch.acc_pos.q_norm);
            r.q_neg_traj.push_back(ch.acc_neg.q_norm);
        }
    }
    const FireResult fr = fire_and_reset(ch, s, p);
    r.v_pre = fr.v_pre;
    r.v_th = fr.v_th;
    r.spike = fr.spike;
    r.margin = fr.v_pre - fr.v_th;
    return r;
}

struct ReprogramDemoResult {
    int spike_app1 = 0;
    int spike_app2 = 0;
    double v_pre1 = 0.0, v_th1 = 0.0;
    double v_pre2 = 0.0, v_th2 = 0.0;
};

/// Two-application reprogramming script: one positive and one negative
/// hybrid weight. Application 1 has a weak positive / strong negative
/// setup against a high threshold (no spike); the weights are then
/// reprogrammed within the hybrid tunable range, the threshold divider is
/// lowered, accumulators reset, and the same event pattern fires.
inline ReprogramDemoResult run_reprogram_demo(const DeviceParams& p,
                                              double dt_pulse_s = kDefaultDtPulseS,
                                              int events_per_cell = 12) {
    ReprogramDemoResult out;
    const VariationSample s = VariationSample::unit();

    ChannelState ch;
    WeightCell pos;
    pos.sign = +1;
    pos.config = WeightConfig::hybrid;
    pos.width_norm = 0.7;
    pos.d_weight = 0.9; // high resistance: weak
    WeightCell neg = pos;
    neg.sign = -1;
    neg.d_weight = 0.1; // low resistance: strong
    ch.weights = {pos, neg};
    ch.thr = ThresholdDivider{0.75, 0.25}; // high threshold

    auto run_events = [&](ChannelState state) {
        for (int e = 0; e < events_per_cell; ++e) {
            state = apply_event(state, 0, dt_pulse_s, s, p);
            state = apply_event(state, 1, dt_pulse_s, s, p);
        }
        return state;
    };

    ChannelState after1 = run_events(ch);
    const FireResult fr1 = fire_and_reset(after1, s, p);
    out.spike_app1 = fr1.spike;
    out.v_pre1 = fr1.v_pre;
    out.v_th1 = fr1.v_th;

    // reprogram: swap weight strengths, lower the threshold, reset accumulators
    ChannelState ch2 = reprogram(fr1.state, {std::optional<double>(0.1), std::optional<double>(0.9)},
                                 ThresholdDivider{0.25, 0.75});
    ChannelState after2 = run_events(ch2);
    const FireResult fr2 = fire_and_reset(after2, s, p);
    out.spike_app2 = fr2.spike;
    out.v_pre2 = fr2.v_pre;
    out.v_th2 = fr2.v_th;
    return out;
}

} // namespace dwpix
