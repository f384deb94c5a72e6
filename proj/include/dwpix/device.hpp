#pragma once

#include <array>
#include <cmath>
#include <string>

#include "dwpix/common.hpp"
#include "dwpix/kvconfig.hpp"

// Compact behavioral model of one SOT-driven magnetic domain-wall MTJ.
//
// The device is a three-terminal stack: write current through the heavy
// metal (T1-T2) moves the domain wall along the free layer, read resistance
// (T3-T2) depends on the wall position and the applied bias. Wall position
// is kept as q_norm in [0,1]; 0 is the leftmost (fully parallel, lowest
// resistance) state and 1 the rightmost (fully antiparallel) state.

namespace dwpix {

struct DeviceParams {
    // geometry
    double l_fl_nm = 500.0;     ///< free-layer length
    double dw_width_nm = 20.0;  ///< domain-wall region width

    // read-path resistances
    double r_p0_ohm = 10e3; ///< full-area parallel resistance at zero bias
    double tmr0 = 2.0;      ///< zero-bias TMR ratio (2.0 = 200%)
    double r_n0_ohm = 20e3; ///< full-area wall-region (perpendicular) resistance
    double r_hm_ohm = 500.0; ///< heavy-metal series resistance
    double v_half_v = 0.5;   ///< bias at which TMR falls to half its zero-bias value

    // write path
    double i_th_ua = 5.0;   ///< accumulator-MTJ threshold write current
    double i_th2_ua = 80.0; ///< weight-MTJ threshold write current (must exceed any weight current)
    double i_max_ua = 70.0; ///< top of the fitted velocity range; currents clamp here
    std::array<double, 3> vel_coeffs{-9.85, 2.0, -0.006}; ///< m/s per uA^k, v(i_th) = 0

    // drive constants
    double v_read_v = 0.3;      ///< read-divider supply
    double i_unit_ua = 40.0;    ///< drive current of a unit-width CMOS weight transistor
    double v_dd_v = 1.0;        ///< write-path supply driving weight cells
    double r_access_ohm = 4e3;  ///< series access resistance of the MDW-only weight path

    double delta() const { return dw_width_nm / l_fl_nm; }
    double l_fl_m() const { return l_fl_nm * 1e-9; }

    static DeviceParams defaults() { return DeviceParams{}; }

    void validate() const;

    static DeviceParams from_config(const KvConfig& cfg);
    void to_config(KvConfig& cfg) const;
};

struct DwState {
    double q_norm = 0.0; ///< wall position in [0,1], the only mutable device state
};

/// Domain-wall velocity (m/s) for a write current in uA.
/// Zero below the threshold current; the fitted polynomial is evaluated on
/// [i_th, i_max] and held at v(i_max) above the fitted range.
inline double dw_velocity(double i_write_ua, const DeviceParams& p) {
    require(i_write_ua >= 0.0 && std::isfinite(i_write_ua),
            "dw_velocity: write current must be >= 0 (reset pulses are modeled by reset())");
    if (i_write_ua < p.i_th_ua) return 0.0;
    const double i = std::min(i_write_ua, p.i_max_ua);
    const double v = p.vel_coeffs[0] + p.vel_coeffs[1] * i + p.vel_coeffs[2] * i * i;
    return std::max(v, 0.0);
}

/// Advance the wall under a write pulse. Saturates silently at both edges
/// (physical pinning at the device boundary).
inline DwState step(DwState s, double i_write_ua, double dt_s, const DeviceParams& p) {
    require(dt_s > 0.0 && std::isfinite(dt_s), "step: pulse duration must be > 0");
    const double v = dw_velocity(i_write_ua, p);
    if (v == 0.0) return s; // sub-threshold retention, exactly
    return DwState{clamp01(s.q_norm + v * dt_s / p.l_fl_m())};
}

/// Long negative-direction pulse: wall returns to the leftmost position.
inline DwState reset(DwState) { return DwState{0.0}; }

/// Bias-dependent TMR ratio (Lorentzian rolloff).
inline double tmr_at(double v_bias_v, const DeviceParams& p) {
    const double r = v_bias_v / p.v_half_v;
    return p.tmr0 / (1.0 + r * r);
}

/// Effective read resistance at wall position q and applied bias.
///
/// Modeled as three parallel MTJs: a parallel slice, an antiparallel slice
/// (areas set by the wall position) and a fixed wall slice of width
/// delta = dw_width / l_fl. Only the antiparallel slice rolls off with bias.
inline double resistance(double q_norm, double v_bias_v, const DeviceParams& p) {
    require(q_norm >= 0.0 && q_norm <= 1.0, "resistance: q_norm outside [0,1]");
    const double d = p.delta();
    const double f_ap = q_norm * (1.0 - d);
    const double f_p = (1.0 - q_norm) * (1.0 - d);
    const double r_ap = p.r_p0_ohm * (1.0 + tmr_at(v_bias_v, p));
    const double g = f_p / p.r_p0_ohm + f_ap / r_ap + d / p.r_n0_ohm;
    return 1.0 / g + p.r_hm_ohm;
}

struct ProgramPulse {
    DwState state;
    double i_write_ua; ///< implied programming current
    double t_s;        ///< implied pulse duration from q = 0
};

/// Program the wall to an absolute position. The device model is
/// deterministic, so the state is set directly; the returned pulse is the
/// (current, duration) pair that would realize it from q = 0, for logging.
inline ProgramPulse program_position(double target_q, const DeviceParams& p) {
    require(target_q >= 0.0 && target_q <= 1.0, "program_position: target outside [0,1]");
    const double i_prog = 0.5 * (p.i_th_ua + p.i_max_ua);
    const double v = dw_velocity(i_prog, p);
    const double t = (target_q > 0.0 && v > 0.0) ? target_q * p.l_fl_m() / v : 0.0;
    return ProgramPulse{DwState{target_q}, i_prog, t};
}

inline void DeviceParams::validate() const {
    require(l_fl_nm > 0.0, "device: l_fl must be > 0");
    require(dw_width_nm >= 0.0 && dw_width_nm < l_fl_nm, "device: need 0 <= dw_width < l_fl");
    require(r_p0_ohm > 0.0, "device: r_p0 must be > 0");
    require(tmr0 > 0.0, "device: tmr0 must be > 0");
    require(r_n0_ohm > 0.0, "device: r_n0 must be > 0");
    require(r_hm_ohm >= 0.0, "device: r_hm must be >= 0");
    require(v_half_v > 0.0, "device: v_half must be > 0");
    require(i_th_ua > 0.0, "device: i_th must be > 0");
    require(i_max_ua > i_th_ua, "device: need i_max > i_th");
    require(i_th2_ua > i_max_ua,
            "device: weight-MTJ threshold i_th2 must exceed the maximum achievable "
            "write current (i_max)");
    require(v_read_v > 0.0, "device: v_read must be > 0");
    require(i_unit_ua > 0.0, "device: i_unit must be > 0");
    require(v_dd_v > 0.0, "device: v_dd must be > 0");
    require(r_access_ohm >= 0.0, "device: r_access must be >= 0");
    // velocity polynomial: non-negative and non-decreasing on [i_th, i_max]
    const int n = 256;
    double prev = -1.0;
    for (int k = 0; k <= n; ++k) {
        const double i = i_th_ua + (i_max_ua - i_th_ua) * k / n;
        const double v = vel_coeffs[0] + vel_coeffs[1] * i + vel_coeffs[2] * i * i;
        require(v >= -1e-9, "device: velocity polynomial negative at " + std::to_string(i) + " uA");
        require(v >= prev - 1e-9, "device: velocity polynomial decreasing at " + std::to_string(i) + " uA");
        prev = v;
    }
}

inline DeviceParams DeviceParams::from_config(const KvConfig& cfg) {
    DeviceParams p;
    p.l_fl_nm = cfg.get_double_or("device.l_fl_nm", p.l_fl_nm);
    p.dw_width_nm = cfg.get_double_or("device.dw_width_nm", p.dw_width_nm);
    p.r_p0_ohm = cfg.get_double_or("device.r_p0_ohm", p.r_p0_ohm);
    p.tmr0 = cfg.get_double_or("device.tmr0", p.tmr0);
    p.r_n0_ohm = cfg.get_double_or("device.r_n0_ohm", p.r_n0_ohm);
    p.r_hm_ohm = cfg.get_double_or("device.r_hm_ohm", p.r_hm_ohm);
    p.v_half_v = cfg.get_double_or("device.v_half_v", p.v_half_v);
    p.i_th_ua = cfg.get_double_or("device.i_th_ua", p.i_th_ua);
    p.i_th2_ua = cfg.get_double_or("device.i_th2_ua", p.i_th2_ua);
    p.i_max_ua = cfg.get_double_or("device.i_max_ua", p.i_max_ua);
    if (cfg.has("device.vel_coeffs")) {
        const auto v = cfg.get_doubles("device.vel_coeffs");
        require_user(v.size() == 3, "device.vel_coeffs must have exactly 3 entries (a0,a1,a2)");
        p.vel_coeffs = {v[0], v[1], v[2]};
    }
    p.v_read_v = cfg.get_double_or("device.v_read_v", p.v_read_v);
    p.i_unit_ua = cfg.get_double_or("device.i_unit_ua", p.i_unit_ua);
    p.v_dd_v = cfg.get_double_or("device.v_dd_v", p.v_dd_v);
    p.r_access_ohm = cfg.get_double_or("device.r_access_ohm", p.r_access_ohm);
    p.validate();
    return p;
}

inline void DeviceParams::to_config(KvConfig& cfg) const {
    cfg.set_double("device.l_fl_nm", l_fl_nm);
    cfg.set_double("device.dw_width_nm", dw_width_nm);
    cfg.set_double("device.r_p0_ohm", r_p0_ohm);
    cfg.set_double("device.tmr0", tmr0);
    cfg.set_double("device.r_n0_ohm", r_n0_ohm);
    cfg.set_double("device.r_hm_ohm", r_hm_ohm);
    cfg.set_double("device.v_half_v", v_half_v);
    cfg.set_double("device.i_th_ua", i_th_ua);
    cfg.set_double("device.i_th2_ua", i_th2_ua);
    cfg.set_double("device.i_max_ua", i_max_ua);
    cfg.set_doubles("device.vel_coeffs", {vel_coeffs[0], vel_coeffs[1], vel_coeffs[2]});
    cfg.set_double("device.v_read_v", v_read_v);
    cfg.set_double("device.i_unit_ua", i_unit_ua);
    cfg.set_double("device.v_dd_v", v_dd_v);
    cfg.set_double("device.r_access_ohm", r_access_ohm);
}

} // namespace dwpix
