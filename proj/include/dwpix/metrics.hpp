#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dwpix/common.hpp"
#include "dwpix/kvconfig.hpp"

// Backend energy and bandwidth reporting: digital-first-layer baseline vs
// in-pixel (P2M) execution of the first layer. Energy constants are
// configuration, not claims; the checks on this module are closed-form and
// ordering properties.

namespace dwpix {

struct EnergyConstants {
    double e_ac_pj = 0.1;   ///< accumulate-on-spike
    double e_mac_pj = 3.2;  ///< multi-bit MAC
    double e_mem_pj = 2.5;  ///< weight/membrane memory access
    double e_tx_pj = 0.8;   ///< off-chip transmission per event bit

    void validate() const {
        require(e_ac_pj > 0 && e_mac_pj > 0 && e_mem_pj > 0 && e_tx_pj > 0,
                "energy: constants must be > 0");
        require(e_mac_pj > e_ac_pj, "energy: a multi-bit MAC must cost more than an accumulate");
    }

    static EnergyConstants from_config(const KvConfig& cfg) {
        EnergyConstants c;
        c.e_ac_pj = cfg.get_double_or("energy.e_ac_pj", c.e_ac_pj);
        c.e_mac_pj = cfg.get_double_or("energy.e_mac_pj", c.e_mac_pj);
        c.e_mem_pj = cfg.get_double_or("energy.e_mem_pj", c.e_mem_pj);
        c.e_tx_pj = cfg.get_double_or("energy.e_tx_pj", c.e_tx_pj);
        c.validate();
        return c;
    }
};

struct LaterLayerCounts {
    std::uint64_t accum_ops = 0;    ///< input spikes x fanout of the layer
    std::uint64_t mem_accesses = 0; ///< weight + membrane accesses
};

struct EnergyCounts {
    std::uint64_t input_events = 0;
    double layer1_fanout = 0.0; ///< MACs per input event in the digital first layer
    std::uint64_t layer1_mem_accesses = 0;
    double bits_per_input_event = 12.0;  ///< sensor address + polarity bit
    double bits_per_output_event = 8.0;  ///< smaller map, no polarity bit
    std::vector<LaterLayerCounts> later;
};

struct EnergyReport {
    double baseline_pj = 0.0;
    double p2m_pj = 0.0;
    double savings = 0.0; ///< 1 - p2m/baseline
    double bandwidth_ratio = 1.0;
};

/// Backend energy for both execution modes.
///
/// baseline: raw input events go off chip (bits_per_input_event each) and
/// the first layer runs digitally (e_mac per event x fanout, plus its
/// memory accesses). p2m: the first layer is computed in pixel, so only its
/// output activations are transmitted (input_events x bandwidth_ratio events
/// at the reduced output address width); later layers are identical in both.
inline EnergyReport energy(const EnergyCounts& counts, const EnergyConstants& k,
                           double bandwidth_ratio) {
    k.validate();
    require(bandwidth_ratio >= 0.0, "energy: bandwidth ratio must be >= 0");
    const double in_ev = static_cast<double>(counts.input_events);
    double rest = 0.0;
    for (const auto& l : counts.later)
        rest += static_cast<double>(l.accum_ops) * k.e_ac_pj +
                static_cast<double>(l.mem_accesses) * k.e_mem_pj;

    const double layer1_digital = in_ev * counts.layer1_fanout * k.e_mac_pj +
                                  static_cast<double>(counts.layer1_mem_accesses) * k.e_mem_pj;
    const double tx_base = in_ev * counts.bits_per_input_event * k.e_tx_pj;
    const double tx_p2m = in_ev * bandwidth_ratio * counts.bits_per_output_event * k.e_tx_pj;

    EnergyReport r;
    r.baseline_pj = layer1_digital + tx_base + rest;
    r.p2m_pj = tx_p2m + rest;
    r.bandwidth_ratio = bandwidth_ratio;
    require(r.baseline_pj > 0.0, "energy: baseline energy is zero; missing counts");
    r.savings = 1.0 - r.p2m_pj / r.baseline_pj;
    return r;
}

/// One aggregated row of a run summary.
struct RunMetrics {
    std::string name;
    std::uint64_t in_spikes = 0;
    std::uint64_t out_spikes = 0;
    double bandwidth = 0.0;
    std::optional<double> accuracy;
    std::optional<EnergyReport> energy;
};

inline std::string format_savings_pct(double savings) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f%%", savings * 100.0);
    return buf;
}

/// Stable-column CSV over runs, sorted by name.
inline std::string report_csv(std::vector<RunMetrics> rows) {
    std::sort(rows.begin(), rows.end(),
              [](const RunMetrics& a, const RunMetrics& b) { return a.name < b.name; });
    std::string out =
        "name,in_spikes,out_spikes,bandwidth,accuracy,baseline_pj,p2m_pj,savings\n";
    for (const auto& r : rows) {
        out += r.name + "," + std::to_string(r.in_spikes) + "," + std::to_string(r.out_spikes) +
               "," + KvConfig::fmt_double(r.bandwidth) + ",";
        out += r.accuracy ? KvConfig::fmt_double(*r.accuracy) : "";
        out += ",";
        out += r.energy ? KvConfig::fmt_double(r.energy->baseline_pj) : "";
        out += ",";
        out += r.energy ? KvConfig::fmt_double(r.energy->p2m_pj) : "";
        out += ",";
        out += r.energy ? KvConfig::fmt_double(r.energy->savings) : "";
        out += "\n";
    }
    return out;
}

inline std::vector<RunMetrics> parse_report_csv(const std::string& text) {
    std::vector<RunMetrics> rows;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || lineno == 1) continue; // header
        std::vector<std::string> cols;
        std::string item;
        std::istringstream ls(line);
        while (std::getline(ls, item, ',')) cols.push_back(item);
        while (cols.size() < 8) cols.push_back("");
        require_user(cols.size() == 8, "report csv line " + std::to_string(lineno) +
                                           ": expected 8 columns");
        RunMetrics r;
        r.name = cols[0];
        r.in_spikes = std::stoull(cols[1]);
        r.out_spikes = std::stoull(cols[2]);
        r.bandwidth = std::stod(cols[3]);
        if (!cols[4].empty()) r.accuracy = std::stod(cols[4]);
        if (!cols[5].empty() && !cols[6].empty() && !cols[7].empty()) {
            EnergyReport e;
            e.baseline_pj = std::stod(cols[5]);
            e.p2m_pj = std::stod(cols[6]);
            e.savings = std::stod(cols[7]);
            r.energy = e;
        }
        rows.push_back(r);
    }
    return rows;
}

/// Human-readable table, savings printed as a percentage with one decimal.
inline std::string report_table(std::vector<RunMetrics> rows) {
    std::sort(rows.begin(), rows.end(),
              [](const RunMetrics& a, const RunMetrics& b) { return a.name < b.name; });
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-20s %12s %12s %10s %9s %10s\n", "run", "in_spikes",
                  "out_spikes", "bandwidth", "accuracy", "savings");
    out += buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-20s %12llu %12llu %10.4f %9s %10s\n", r.name.c_str(),
                      static_cast<unsigned long long>(r.in_spikes),
                      static_cast<unsigned long long>(r.out_spikes), r.bandwidth,
                      r.accuracy ? (KvConfig::fmt_double(*r.accuracy).substr(0, 6)).c_str() : "-",
                      r.energy ? format_savings_pct(r.energy->savings).c_str() : "-");
        out += buf;
    }
    return out;
}

} // namespace dwpix
