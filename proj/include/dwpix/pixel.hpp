#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dwpix/common.hpp"
#include "dwpix/device.hpp"
#include "dwpix/montecarlo.hpp"

// Behavioral semantics of one in-pixel compute channel.
//
// A channel owns a kernel of signed weight cells, one accumulator MDWMTJ per
// sign, and a programmable threshold divider. Events push write current
// through the accumulator of the matching sign; at each integration-window
// boundary the pre-activation divider voltage is compared against the
// threshold divider and the channel fires (and resets) or retains state.

namespace dwpix {

enum class WeightConfig { cmos, mdw, hybrid };

inline const char* to_string(WeightConfig c) {
    switch (c) {
        case WeightConfig::cmos: return "cmos";
        case WeightConfig::mdw: return "mdw";
        case WeightConfig::hybrid: return "hybrid";
    }
    return "?";
}

inline WeightConfig weight_config_from_string(const std::string& s) {
    if (s == "cmos") return WeightConfig::cmos;
    if (s == "mdw") return WeightConfig::mdw;
    if (s == "hybrid") return WeightConfig::hybrid;
    throw UserError("unknown weight config '" + s + "' (expected cmos|mdw|hybrid)");
}

struct WeightCell {
    int sign = +1;                ///< +1 routes to the positive accumulator, -1 negative
    WeightConfig config = WeightConfig::cmos;
    double width_norm = 1.0;      ///< normalized transistor width (cmos, hybrid); fixed at fabrication
    double d_weight = 0.0;        ///< weight-MTJ wall position (mdw, hybrid); reprogrammable

    void validate() const {
        require(sign == +1 || sign == -1, "weight cell: sign must be +1 or -1");
        if (config != WeightConfig::mdw)
            require(width_norm > 0.0 && width_norm <= 1.0,
                    "weight cell: width_norm must be in (0,1]");
        if (config != WeightConfig::cmos)
            require(d_weight >= 0.0 && d_weight <= 1.0,
                    "weight cell: d_weight must be in [0,1]");
    }
};

/// Weight-MTJ read resistance seen by the write path. Evaluated at zero
/// bias: the threshold-current guard keeps write currents from disturbing
/// the weight MTJ, and the dynamic-range contract (R_AP/R_P ratio at full
/// TMR) is defined at low bias.
inline double weight_mtj_resistance(double d_weight, const DeviceParams& p) {
    return resistance(d_weight, 0.0, p);
}

/// Write current a cell pushes through the accumulator heavy metal, in uA.
inline double write_current_ua(const WeightCell& cell, const VariationSample& s,
                               const DeviceParams& p) {
    cell.validate();
    double i = 0.0;
    switch (cell.config) {
        case WeightConfig::cmos:
            i = p.i_unit_ua * cell.width_norm * s.m_tx;
            break;
        case WeightConfig::mdw: {
            const double r = p.r_access_ohm + weight_mtj_resistance(cell.d_weight, p) * s.m_r_weight;
            i = p.v_dd_v / r * 1e6;
            break;
        }
        case WeightConfig::hybrid: {
            const double r_tx = p.v_dd_v / (p.i_unit_ua * 1e-6 * cell.width_norm);
            const double r = r_tx / s.m_tx + weight_mtj_resistance(cell.d_weight, p) * s.m_r_weight;
            i = p.v_dd_v / r * 1e6;
            break;
        }
    }
    i = clamp(i, 0.0, p.i_max_ua);
    require(i < p.i_th2_ua,
            "write_current: " + std::to_string(i) + " uA reaches the weight-MTJ threshold i_th2 = " +
                std::to_string(p.i_th2_ua) + " uA (fabrication guard violated)");
    return i;
}

/// Nominal (variation-free) current for a cell.
inline double nominal_current_ua(const WeightCell& cell, const DeviceParams& p) {
    return write_current_ua(cell, VariationSample::unit(), p);
}

/// Strongest nominal current the configuration can produce.
inline double config_top_current_ua(WeightConfig cfg, const DeviceParams& p) {
    WeightCell c;
    c.config = cfg;
    c.width_norm = 1.0;
    c.d_weight = 0.0;
    return nominal_current_ua(c, p);
}

/// Weakest nonzero nominal current (mdw only; cmos and hybrid reach ~0
/// through vanishing widths).
inline double config_bottom_current_ua(WeightConfig cfg, const DeviceParams& p) {
    if (cfg != WeightConfig::mdw) return 0.0;
    WeightCell c;
    c.config = cfg;
    c.d_weight = 1.0;
    return nominal_current_ua(c, p);
}

namespace detail {
/// Invert a monotone current map by bisection over t in [lo, hi].
template <class F>
double bisect_current(F&& current_of, double lo, double hi, double target_ua) {
    double f_lo = current_of(lo) - target_ua;
    for (int it = 0; it < 80; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double f_mid = current_of(mid) - target_ua;
        if ((f_mid <= 0.0) == (f_lo <= 0.0)) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}
} // namespace detail

inline constexpr double kHybridMidD = 0.5; ///< fabrication-time wall position of hybrid weight MTJs

/// Build the weight cell whose nominal current is x times the
/// configuration's top current (x = normalized input activation x weight).
///
/// cmos: width carries the weight. mdw: the wall position is inverted
/// numerically; drives below the d=1 current are not representable and
/// throw. hybrid: width is solved with the MTJ at its mid position, falling
/// back to wall-position programming at full width for the top of the range.
inline WeightCell realize_drive(WeightConfig cfg, double x, int sign, const DeviceParams& p) {
    require(x > 0.0 && x <= 1.0, "realize_drive: x must be in (0,1]");
    WeightCell cell;
    cell.sign = sign;
    cell.config = cfg;
    const double top = config_top_current_ua(cfg, p);
    const double target = x * top;
    switch (cfg) {
        case WeightConfig::cmos:
            cell.width_norm = x;
            break;
        case WeightConfig::mdw: {
            const double bottom = config_bottom_current_ua(cfg, p);
            if (target < bottom * (1.0 - 1e-12))
                throw std::invalid_argument(
                    "realize_drive: mdw weight cannot produce " + std::to_string(target) +
                    " uA (minimum is " + std::to_string(bottom) + " uA at d_weight = 1)");
            WeightCell probe = cell;
            cell.d_weight = detail::bisect_current(
                [&](double d) { probe.d_weight = d; return nominal_current_ua(probe, p); }, 1.0,
                0.0, target);
            break;
        }
        case WeightConfig::hybrid: {
            WeightCell probe = cell;
            probe.width_norm = 1.0;
            probe.d_weight = kHybridMidD;
            const double mid_top = nominal_current_ua(probe, p);
            if (target <= mid_top) {
                const double r_mid = weight_mtj_resistance(kHybridMidD, p);
                const double i_a = target * 1e-6;
                cell.width_norm = i_a * p.v_dd_v / ((p.v_dd_v - i_a * r_mid) * p.i_unit_ua * 1e-6);
                cell.d_weight = kHybridMidD;
            } else {
                cell.width_norm = 1.0;
                cell.d_weight = detail::bisect_current(
                    [&](double d) { probe.d_weight = d; return nominal_current_ua(probe, p); },
                    kHybridMidD, 0.0, target);
            }
            break;
        }
    }
    cell.validate();
    return cell;
}

struct ThresholdDivider {
    double d_t1 = 0.5; ///< divider-output side; lower position -> lower threshold
    double d_t2 = 0.5;
};

struct ChannelState {
    DwState acc_pos;
    DwState acc_neg;
    ThresholdDivider thr;
    std::vector<WeightCell> weights;

    void validate() const {
        require(acc_pos.q_norm >= 0.0 && acc_pos.q_norm <= 1.0, "channel: acc_pos out of range");
        require(acc_neg.q_norm >= 0.0 && acc_neg.q_norm <= 1.0, "channel: acc_neg out of range");
        require(thr.d_t1 >= 0.0 && thr.d_t1 <= 1.0 && thr.d_t2 >= 0.0 && thr.d_t2 <= 1.0,
                "channel: threshold positions out of range");
        for (const auto& w : weights) w.validate();
    }
};

/// Route one input event through a weight cell into its accumulator.
inline ChannelState apply_event(ChannelState ch, std::size_t pixel_index, double dt_pulse_s,
                                const VariationSample& s, const DeviceParams& p) {
    require(pixel_index < ch.weights.size(),
            "apply_event: pixel index " + std::to_string(pixel_index) + " out of range");
    const WeightCell& cell = ch.weights[pixel_index];
    const double i = write_current_ua(cell, s, p);
    if (i == 0.0) return ch;
    const double dt = dt_pulse_s * s.m_jitter;
    if (cell.sign > 0)
        ch.acc_pos = step(ch.acc_pos, i, dt, p);
    else
        ch.acc_neg = step(ch.acc_neg, i, dt, p);
    return ch;
}

/// Solve the series divider v = v_read * R_a / (R_a + R_b) self-consistently:
/// R_a sees the output voltage, R_b sees the rest of the supply, and both
/// resistances are bias dependent. Fixed point to 1e-9 relative.
inline double solve_divider(double q_a, double m_a, double q_b, double m_b,
                            const DeviceParams& p) {
    const double v_read = p.v_read_v;
    double v = 0.5 * v_read;
    for (int it = 0; it < 100; ++it) {
        const double r_a = resistance(q_a, v, p) * m_a;
        const double r_b = resistance(q_b, v_read - v, p) * m_b;
        const double v_next = v_read * r_a / (r_a + r_b);
        if (std::fabs(v_next - v) <= 1e-9 * v_read) return v_next;
        v = v_next;
    }
    throw std::runtime_error("solve_divider: fixed point did not converge in 100 iterations "
                             "(pathological device parameters)");
}

/// Pre-activation voltage of the positive/negative accumulator divider.
inline double preactivation_v(const ChannelState& ch, const VariationSample& s,
                              const DeviceParams& p) {
    return solve_divider(ch.acc_pos.q_norm, s.m_r_acc_pos, ch.acc_neg.q_norm, s.m_r_acc_neg, p);
}

/// Programmable threshold voltage from the threshold divider pair.
inline double threshold_voltage_v(const ChannelState& ch, const VariationSample& s,
                                  const DeviceParams& p) {
    return solve_divider(ch.thr.d_t1, s.m_r_thr1, ch.thr.d_t2, s.m_r_thr2, p);
}

struct FireResult {
    int spike = 0;
    ChannelState state;
    double v_pre = 0.0;
    double v_th = 0.0;
};

/// Synchronous thresholding at an integration-window boundary.
/// Fires when v_pre >= v_th (ties fire). A spike resets both accumulators;
/// otherwise the membrane state is retained into the next window.
inline FireResult fire_and_reset(ChannelState ch, const VariationSample& s,
                                 const DeviceParams& p) {
    FireResult r;
    r.v_pre = preactivation_v(ch, s, p);
    r.v_th = threshold_voltage_v(ch, s, p);
    r.spike = (r.v_pre >= r.v_th) ? 1 : 0;
    if (r.spike) {
        ch.acc_pos = reset(ch.acc_pos);
        ch.acc_neg = reset(ch.acc_neg);
    }
    r.state = std::move(ch);
    return r;
}

/// Reprogram weight-MTJ positions and/or the threshold divider.
///
/// new_d_weights holds one optional target per cell; CMOS-only cells are not
/// programmable and rejected. Transistor widths are fixed at fabrication and
/// not part of this interface. Accumulators reset as part of the sequence.
inline ChannelState reprogram(ChannelState ch,
                              const std::vector<std::optional<double>>& new_d_weights,
                              std::optional<ThresholdDivider> new_thr) {
    require(new_d_weights.size() == ch.weights.size() || new_d_weights.empty(),
            "reprogram: d_weight target list size mismatch");
    for (std::size_t k = 0; k < new_d_weights.size(); ++k) {
        if (!new_d_weights[k]) continue;
        WeightCell& cell = ch.weights[k];
        require(cell.config != WeightConfig::cmos,
                "reprogram: cell " + std::to_string(k) + " is CMOS-only and not reprogrammable");
        const double d = *new_d_weights[k];
        require(d >= 0.0 && d <= 1.0, "reprogram: target d_weight outside [0,1]");
        cell.d_weight = d;
    }
    if (new_thr) {
        require(new_thr->d_t1 >= 0.0 && new_thr->d_t1 <= 1.0 && new_thr->d_t2 >= 0.0 &&
                    new_thr->d_t2 <= 1.0,
                "reprogram: threshold positions outside [0,1]");
        ch.thr = *new_thr;
    }
    ch.acc_pos = reset(ch.acc_pos);
    ch.acc_neg = reset(ch.acc_neg);
    return ch;
}

} // namespace dwpix
