#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dwpix/common.hpp"
#include "dwpix/events.hpp"
#include "dwpix/fitting.hpp"
#include "dwpix/kvconfig.hpp"
#include "dwpix/rng.hpp"
#include "dwpix/toytask.hpp"

// Desk-scale hardware-aware spiking-network training.
//
// The first layer runs through the fitted f1/f2 transfer functions with
// optional Gaussian noise from the fitted std tables; later layers are plain
// LIF with hard (detached) reset. Spike nondifferentiability is handled by a
// triangular surrogate; noise is straight-through. Everything is keyed off
// explicit seeds, so a training run is a pure function of (seed, data, cfg).

namespace dwpix {

struct TrainConfig {
    int epochs = 12;
    double learning_rate = 0.1;
    double momentum = 0.9;
    double surrogate_width = 1.0;
    double noise_scale = 0.0;   ///< multiplier on the fitted f1/f2 std tables
    double lambda_bw = 0.0;     ///< weight of the first-layer output-spike penalty
    double tunability_rho = 0.35; ///< allowed layer1 weight excursion when constrained
    std::uint64_t seed = 1;
    int batch_size = 16;
    int channels = 8;
    int hidden = 64;
    std::int64_t integration_us = 1000;
    double lif_decay = 0.9;
    PolarityMode polarity = PolarityMode::two_channel;

    void validate() const {
        require(epochs >= 0 && batch_size >= 1 && channels >= 1 && hidden >= 1,
                "train config: dims/epochs out of range");
        require(learning_rate >= 0.0 && momentum >= 0.0 && momentum < 1.0,
                "train config: bad optimizer constants");
        require(surrogate_width > 0.0, "train config: surrogate width must be > 0");
        require(noise_scale >= 0.0 && lambda_bw >= 0.0, "train config: negative scales");
        require(tunability_rho >= 0.0 && tunability_rho <= 1.0,
                "train config: tunability_rho must be in [0,1]");
        require(integration_us > 0, "train config: integration time must be > 0");
        require(lif_decay >= 0.0 && lif_decay < 1.0, "train config: lif_decay must be in [0,1)");
    }
};

struct SmallNet {
    // geometry
    int in_w = 16, in_h = 16;
    int kernel = 3, stride = 2;
    int channels = 8;
    int hidden = 64;
    int classes = 4;
    PolarityMode polarity = PolarityMode::two_channel;
    std::int64_t integration_us = 1000;
    double lif_decay = 0.9;

    // parameters
    std::vector<double> w1;  ///< [ch][pol][ky][kx], in [-1,1]
    std::vector<double> th1; ///< per-channel thresholds, normalized f2 units
    std::vector<double> w2;  ///< [hidden][n1]
    std::vector<double> w3;  ///< [classes][hidden]
    std::optional<std::vector<double>> w_fab; ///< layer1 snapshot at fabrication

    int npol() const { return polarity == PolarityMode::two_channel ? 2 : 1; }
    int ow() const { return (in_w - kernel) / stride + 1; }
    int oh() const { return (in_h - kernel) / stride + 1; }
    int n1() const { return channels * oh() * ow(); }
    int slots_per_channel() const { return npol() * kernel * kernel; }

    LayerConfig layer1_config() const {
        LayerConfig cfg;
        cfg.kernel = kernel;
        cfg.stride = stride;
        cfg.channels = channels;
        cfg.integration_us = integration_us;
        cfg.polarity = polarity;
        cfg.weights = w1;
        cfg.thresholds = th1;
        return cfg;
    }

    void validate() const {
        require(w1.size() == static_cast<std::size_t>(channels) * slots_per_channel(),
                "net: w1 size mismatch");
        require(th1.size() == static_cast<std::size_t>(channels), "net: th1 size mismatch");
        require(w2.size() == static_cast<std::size_t>(hidden) * n1(), "net: w2 size mismatch");
        require(w3.size() == static_cast<std::size_t>(classes) * hidden, "net: w3 size mismatch");
        for (double w : w1) require(w >= -1.0 && w <= 1.0, "net: layer1 weight outside [-1,1]");
        for (double t : th1) require(t > 0.0, "net: thresholds must be positive");
        if (w_fab) require(w_fab->size() == w1.size(), "net: fabrication snapshot size mismatch");
    }
};

/// Fresh net with keyed-random parameters. Layer1 weights start outside the
/// sub-threshold dead zone of f1; thresholds start slightly above the
/// zero-input lower-envelope voltage.
inline SmallNet init_net(const TrainConfig& cfg, const FitModel& fit, int in_w, int in_h,
                         int classes) {
    cfg.validate();
    SmallNet net;
    net.in_w = in_w;
    net.in_h = in_h;
    net.channels = cfg.channels;
    net.hidden = cfg.hidden;
    net.classes = classes;
    net.polarity = cfg.polarity;
    net.integration_us = cfg.integration_us;
    net.lif_decay = cfg.lif_decay;

    const std::uint64_t s = cfg.seed;
    auto u = [&](std::uint64_t tag, std::uint64_t i) { return rng::keyed_uniform(s, tag, i, 3); };
    net.w1.resize(static_cast<std::size_t>(net.channels) * net.slots_per_channel());
    for (std::size_t i = 0; i < net.w1.size(); ++i) {
        const double mag = 0.3 + 0.6 * u(1, i);
        net.w1[i] = (u(2, i) < 0.5 ? -1.0 : 1.0) * mag;
    }
    net.th1.assign(net.channels, 0.0);
    for (int c = 0; c < net.channels; ++c)
        net.th1[c] = eval_f2(fit, 0.08 + 0.08 * u(3, c), F2Mode::lower);
    net.w2.resize(static_cast<std::size_t>(net.hidden) * net.n1());
    const double s2 = 3.0 / std::sqrt(static_cast<double>(net.n1()));
    for (std::size_t i = 0; i < net.w2.size(); ++i) net.w2[i] = (2.0 * u(4, i) - 1.0) * s2;
    net.w3.resize(static_cast<std::size_t>(net.classes) * net.hidden);
    const double s3 = 3.0 / std::sqrt(static_cast<double>(net.hidden));
    for (std::size_t i = 0; i < net.w3.size(); ++i) net.w3[i] = (2.0 * u(5, i) - 1.0) * s3;
    net.validate();
    return net;
}

/// LIF firing threshold. Half the surrogate's unit width so the clamped
/// membrane floor (m = 0) stays inside the surrogate support and silent
/// units keep receiving gradient.
inline constexpr double kLifThreshold = 0.5;

/// One event routed into one output neuron through one kernel slot.
struct Route {
    std::uint32_t neuron = 0;
    std::uint32_t w_index = 0;    ///< index into w1
    std::uint32_t event_index = 0; ///< global event index (noise keying)
    std::uint8_t polarity = 1;
};

struct CompiledSample {
    std::vector<std::vector<Route>> windows;
    int label = 0;
    std::uint64_t noise_seed = 0;
};

/// Precompute the event-to-neuron fanout of one stream (geometry only).
inline CompiledSample compile_sample(const EventStream& stream, const SmallNet& net, int label,
                                     std::uint64_t noise_seed) {
    require(stream.width == net.in_w && stream.height == net.in_h,
            "compile_sample: stream dims do not match the net");
    CompiledSample cs;
    cs.label = label;
    cs.noise_seed = noise_seed;
    const auto wins = window(stream, net.integration_us);
    cs.windows.resize(wins.size());
    const int ow = net.ow(), oh = net.oh(), k = net.kernel, st = net.stride;
    std::uint32_t event_global = 0;
    for (std::size_t wi = 0; wi < wins.size(); ++wi) {
        auto& routes = cs.windows[wi];
        for (std::size_t ei = wins[wi].begin; ei < wins[wi].end; ++ei, ++event_global) {
            const Event& e = stream.events[ei];
            const int ox_lo = std::max(0, (e.x - k + st) / st);
            const int ox_hi = std::min(ow - 1, e.x / st);
            const int oy_lo = std::max(0, (e.y - k + st) / st);
            const int oy_hi = std::min(oh - 1, e.y / st);
            for (int ch = 0; ch < net.channels; ++ch) {
                for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) {
                        const int kx = e.x - ox * st;
                        const int ky = e.y - oy * st;
                        const int pol_slot =
                            (net.polarity == PolarityMode::two_channel) ? (e.polarity ? 0 : 1) : 0;
                        Route r;
                        r.neuron = static_cast<std::uint32_t>((static_cast<std::size_t>(ch) * oh + oy) * ow + ox);
                        r.w_index = static_cast<std::uint32_t>(
                            (static_cast<std::size_t>(ch) * net.npol() + pol_slot) * k * k +
                            ky * k + kx);
                        r.event_index = event_global;
                        r.polarity = e.polarity;
                        routes.push_back(r);
                    }
                }
            }
        }
    }
    return cs;
}

inline std::vector<CompiledSample> compile_dataset(const std::vector<ToySample>& data,
                                                   const SmallNet& net,
                                                   std::uint64_t noise_master_seed) {
    std::vector<CompiledSample> out;
    out.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
        out.push_back(compile_sample(data[i].stream, net, data[i].label,
                                     rng::keyed_u64(noise_master_seed, i, 0, 7)));
    return out;
}

struct ForwardTrace {
    int T = 0;
    // layer1 (per window x neuron)
    std::vector<double> d_pos, d_neg; ///< accumulator values at threshold time
    std::vector<double> v1;           ///< pre-activation voltage
    std::vector<std::uint8_t> s1;
    std::vector<std::uint8_t> carried; ///< 1 if the window inherited retained state
    // LIF layers (per window x unit)
    std::vector<double> m2;
    std::vector<std::uint8_t> s2;
    std::vector<double> m3;
    std::vector<std::uint8_t> s3;
    std::vector<double> scores; ///< per class, output spike counts
    std::uint64_t l1_spikes = 0;

    int argmax() const {
        int best = 0;
        for (std::size_t c = 1; c < scores.size(); ++c)
            if (scores[c] > scores[best]) best = static_cast<int>(c);
        return best;
    }
};

/// Full forward pass. With `frozen` given, spike and reset decisions are
/// replayed from the frozen trace while membranes and voltages are
/// recomputed from the current parameters; that is the smooth path used by
/// the finite-difference gradient checks.
inline ForwardTrace forward(const SmallNet& net, const CompiledSample& cs, const FitModel& fit,
                            double noise_scale, const ForwardTrace* frozen = nullptr) {
    net.validate();
    const int T = static_cast<int>(cs.windows.size());
    const int n1 = net.n1(), oh = net.oh(), ow = net.ow();
    ForwardTrace tr;
    tr.T = T;
    tr.d_pos.assign(static_cast<std::size_t>(T) * n1, 0.0);
    tr.d_neg.assign(static_cast<std::size_t>(T) * n1, 0.0);
    tr.v1.assign(static_cast<std::size_t>(T) * n1, 0.0);
    tr.s1.assign(static_cast<std::size_t>(T) * n1, 0);
    tr.carried.assign(static_cast<std::size_t>(T) * n1, 0);
    tr.m2.assign(static_cast<std::size_t>(T) * net.hidden, 0.0);
    tr.s2.assign(static_cast<std::size_t>(T) * net.hidden, 0);
    tr.m3.assign(static_cast<std::size_t>(T) * net.classes, 0.0);
    tr.s3.assign(static_cast<std::size_t>(T) * net.classes, 0);
    tr.scores.assign(net.classes, 0.0);

    std::vector<double> acc_pos(n1, 0.0), acc_neg(n1, 0.0);
    std::vector<double> mem2(net.hidden, 0.0), mem3(net.classes, 0.0);
    std::vector<std::uint8_t> sp2(net.hidden, 0), sp3(net.classes, 0);
    std::vector<std::uint32_t> active; // firing layer1 neurons in this window

    for (int t = 0; t < T; ++t) {
        const std::size_t base1 = static_cast<std::size_t>(t) * n1;
        for (int n = 0; n < n1; ++n)
            tr.carried[base1 + n] = (acc_pos[n] != 0.0 || acc_neg[n] != 0.0) ? 1 : 0;
        // asynchronous accumulation
        for (const Route& r : cs.windows[t]) {
            double w = net.w1[r.w_index];
            if (net.polarity == PolarityMode::signed_single && !r.polarity) w = -w;
            if (w == 0.0) continue;
            auto [dd, sd] = eval_f1(fit, std::fabs(w));
            if (noise_scale > 0.0 && sd > 0.0) {
                dd += noise_scale * sd * layer1_f1_noise_z(cs.noise_seed, r.event_index, r.neuron);
                dd = std::max(dd, 0.0);
            }
            if (w > 0.0)
                acc_pos[r.neuron] = std::min(1.0, acc_pos[r.neuron] + dd);
            else
                acc_neg[r.neuron] = std::min(1.0, acc_neg[r.neuron] + dd);
        }
        // synchronous thresholding
        active.clear();
        for (int n = 0; n < n1; ++n) {
            const std::size_t i = base1 + n;
            tr.d_pos[i] = acc_pos[n];
            tr.d_neg[i] = acc_neg[n];
            const double diff = clamp(acc_pos[n] - acc_neg[n], -1.0, 1.0);
            double v = eval_f2(fit, diff, F2Mode::lower);
            if (noise_scale > 0.0) {
                const double sd = eval_f2_std(fit, diff);
                if (sd > 0.0)
                    v += noise_scale * sd * layer1_f2_noise_z(cs.noise_seed, t, n);
            }
            tr.v1[i] = v;
            const int ch = n / (oh * ow);
            const std::uint8_t spike =
                frozen ? frozen->s1[i] : (v >= net.th1[ch] ? 1 : 0);
            tr.s1[i] = spike;
            if (spike) {
                acc_pos[n] = 0.0;
                acc_neg[n] = 0.0;
                active.push_back(static_cast<std::uint32_t>(n));
                ++tr.l1_spikes;
            }
        }
        // hidden LIF (non-negative membrane keeps units inside surrogate reach)
        for (int h = 0; h < net.hidden; ++h) {
            double m = net.lif_decay * mem2[h] * (sp2[h] ? 0.0 : 1.0);
            const double* wrow = &net.w2[static_cast<std::size_t>(h) * n1];
            for (std::uint32_t n : active) m += wrow[n];
            m = std::max(m, 0.0);
            mem2[h] = m;
            tr.m2[static_cast<std::size_t>(t) * net.hidden + h] = m;
            const std::uint8_t spike =
                frozen ? frozen->s2[static_cast<std::size_t>(t) * net.hidden + h]
                       : (m >= kLifThreshold ? 1 : 0);
            tr.s2[static_cast<std::size_t>(t) * net.hidden + h] = spike;
            sp2[h] = spike;
        }
        // output LIF
        for (int c = 0; c < net.classes; ++c) {
            double m = net.lif_decay * mem3[c] * (sp3[c] ? 0.0 : 1.0);
            const double* wrow = &net.w3[static_cast<std::size_t>(c) * net.hidden];
            for (int h = 0; h < net.hidden; ++h)
                if (tr.s2[static_cast<std::size_t>(t) * net.hidden + h]) m += wrow[h];
            m = std::max(m, 0.0);
            mem3[c] = m;
            tr.m3[static_cast<std::size_t>(t) * net.classes + c] = m;
            const std::uint8_t spike =
                frozen ? frozen->s3[static_cast<std::size_t>(t) * net.classes + c]
                       : (m >= kLifThreshold ? 1 : 0);
            tr.s3[static_cast<std::size_t>(t) * net.classes + c] = spike;
            sp3[c] = spike;
            if (spike) tr.scores[c] += 1.0;
        }
    }
    return tr;
}

struct Gradients {
    std::vector<double> w1, th1, w2, w3;
    void init(const SmallNet& net) {
        w1.assign(net.w1.size(), 0.0);
        th1.assign(net.th1.size(), 0.0);
        w2.assign(net.w2.size(), 0.0);
        w3.assign(net.w3.size(), 0.0);
    }
};

inline double triangular_surrogate(double u, double width) {
    const double a = 1.0 - std::fabs(u) / width;
    return a > 0.0 ? a / width : 0.0;
}

/// Cross-entropy on output spike counts plus the first-layer bit-rate
/// penalty; returns the loss and accumulates parameter gradients (BPTT with
/// detached resets, triangular surrogate, straight-through noise).
inline double backward(const SmallNet& net, const CompiledSample& cs, const FitModel& fit,
                       const ForwardTrace& tr, const TrainConfig& cfg, Gradients& g) {
    const int T = tr.T, n1 = net.n1(), oh = net.oh(), ow = net.ow();
    // softmax cross entropy on spike counts
    double mx = -1e300;
    for (double s : tr.scores) mx = std::max(mx, s);
    double z = 0.0;
    std::vector<double> p(net.classes);
    for (int c = 0; c < net.classes; ++c) z += std::exp(tr.scores[c] - mx);
    for (int c = 0; c < net.classes; ++c) p[c] = std::exp(tr.scores[c] - mx) / z;
    double loss = -std::log(std::max(p[cs.label], 1e-300));
    const double rate_norm = static_cast<double>(T) * n1;
    loss += cfg.lambda_bw * static_cast<double>(tr.l1_spikes) / rate_norm;

    const Polynomial df1 = fit.f1.derivative();
    const Polynomial df2l = fit.f2_lower.derivative();
    const double W = cfg.surrogate_width;

    std::vector<double> g_s3(net.classes);
    for (int c = 0; c < net.classes; ++c)
        g_s3[c] = p[c] - (c == cs.label ? 1.0 : 0.0);

    std::vector<double> g_m3(net.classes, 0.0), g_m2(net.hidden, 0.0);
    std::vector<double> g_s2(net.hidden, 0.0), g_s1(n1, 0.0);
    std::vector<double> g_dpos(n1, 0.0), g_dneg(n1, 0.0);
    std::vector<double> g_s3_scratch(net.classes, 0.0), g_m2_scratch(net.hidden, 0.0);

    for (int t = T - 1; t >= 0; --t) {
        const std::size_t b1 = static_cast<std::size_t>(t) * n1;
        const std::size_t b2 = static_cast<std::size_t>(t) * net.hidden;
        const std::size_t b3 = static_cast<std::size_t>(t) * net.classes;

        // output LIF. The input path is straight-through at the membrane
        // floor (a silent unit keeps feeling gradient); the temporal carry
        // uses the true clamp derivative.
        std::vector<double>& gm3_use = g_s3_scratch;
        for (int c = 0; c < net.classes; ++c) {
            const double surr = triangular_surrogate(tr.m3[b3 + c] - kLifThreshold, W);
            double gm = g_s3[c] * surr;
            if (t < T - 1)
                gm += g_m3[c] * net.lif_decay * (tr.s3[b3 + c] ? 0.0 : 1.0);
            gm3_use[c] = gm;
            g_m3[c] = gm * (tr.m3[b3 + c] > 0.0 ? 1.0 : 0.0);
        }
        std::fill(g_s2.begin(), g_s2.end(), 0.0);
        for (int c = 0; c < net.classes; ++c) {
            const double gm = gm3_use[c];
            if (gm == 0.0) continue;
            double* grow = &g.w3[static_cast<std::size_t>(c) * net.hidden];
            const double* wrow = &net.w3[static_cast<std::size_t>(c) * net.hidden];
            for (int h = 0; h < net.hidden; ++h) {
                if (tr.s2[b2 + h]) grow[h] += gm;
                g_s2[h] += wrow[h] * gm;
            }
        }

        // hidden LIF
        std::vector<double>& gm2_use = g_m2_scratch;
        for (int h = 0; h < net.hidden; ++h) {
            const double surr = triangular_surrogate(tr.m2[b2 + h] - kLifThreshold, W);
            double gm = g_s2[h] * surr;
            if (t < T - 1)
                gm += g_m2[h] * net.lif_decay * (tr.s2[b2 + h] ? 0.0 : 1.0);
            gm2_use[h] = gm;
            g_m2[h] = gm * (tr.m2[b2 + h] > 0.0 ? 1.0 : 0.0);
        }
        std::fill(g_s1.begin(), g_s1.end(), 0.0);
        for (int h = 0; h < net.hidden; ++h) {
            const double gm = gm2_use[h];
            if (gm == 0.0) continue;
            double* grow = &g.w2[static_cast<std::size_t>(h) * n1];
            const double* wrow = &net.w2[static_cast<std::size_t>(h) * n1];
            for (int n = 0; n < n1; ++n) {
                if (tr.s1[b1 + n]) grow[n] += gm;
                g_s1[n] += wrow[n] * gm;
            }
        }

        // layer1 thresholding
        for (int n = 0; n < n1; ++n) {
            const int ch = n / (oh * ow);
            const double gs = g_s1[n] + cfg.lambda_bw / rate_norm;
            const double surr = triangular_surrogate(tr.v1[b1 + n] - net.th1[ch], W);
            const double gv = gs * surr;
            g.th1[ch] -= gv;
            const double diff = clamp(tr.d_pos[b1 + n] - tr.d_neg[b1 + n], -1.0, 1.0);
            const double gdiff = gv * df2l.eval(diff);
            g_dpos[n] += gdiff;
            g_dneg[n] -= gdiff;
        }

        // layer1 accumulation: route gradients into weights, with clamp gates
        for (const Route& r : cs.windows[t]) {
            double w = net.w1[r.w_index];
            double sgn = 1.0;
            if (net.polarity == PolarityMode::signed_single && !r.polarity) {
                w = -w;
                sgn = -1.0;
            }
            if (w == 0.0) continue;
            const std::size_t i = b1 + r.neuron;
            double gD;
            if (w > 0.0)
                gD = (tr.d_pos[i] < 1.0) ? g_dpos[r.neuron] : 0.0;
            else
                gD = (tr.d_neg[i] < 1.0) ? g_dneg[r.neuron] : 0.0;
            if (gD == 0.0) continue;
            const double aw = std::fabs(w);
            const double mean_raw = fit.f1.eval(aw);
            if (mean_raw <= 0.0 || mean_raw >= 1.0) continue; // outside the live range
            g.w1[r.w_index] += gD * df1.eval(aw) * (w > 0.0 ? 1.0 : -1.0) * sgn;
        }

        // retention: gradient flows into the previous window unless it was reset
        if (t > 0) {
            for (int n = 0; n < n1; ++n) {
                const std::size_t prev = static_cast<std::size_t>(t - 1) * n1 + n;
                const double keep = tr.s1[prev] ? 0.0 : 1.0;
                g_dpos[n] *= keep;
                g_dneg[n] *= keep;
            }
        }
    }
    return loss;
}

struct OptimizerState {
    std::vector<double> v_w1, v_th1, v_w2, v_w3;
    void init(const SmallNet& net) {
        v_w1.assign(net.w1.size(), 0.0);
        v_th1.assign(net.th1.size(), 0.0);
        v_w2.assign(net.w2.size(), 0.0);
        v_w3.assign(net.w3.size(), 0.0);
    }
};

// Per-group learning-rate scales. Threshold and dense-layer gradients sum
// over many (window x neuron) terms and come out orders of magnitude larger
// per element than the layer1 weight gradients; these factors equalize the
// effective step size across groups under the single configured rate.
inline constexpr double kLrScaleTh1 = 0.002;
inline constexpr double kLrScaleW2 = 0.03;
inline constexpr double kLrScaleW3 = 0.3;

/// Clamp layer1 weights into the fabricated tunability band
/// [w_fab - rho/2, w_fab + rho/2] intersected with [-1, 1]. Idempotent.
inline void project_weights(SmallNet& net, double rho) {
    require(net.w_fab.has_value(), "project_weights: no fabrication snapshot");
    require(net.w_fab->size() == net.w1.size(), "project_weights: snapshot shape mismatch");
    require(rho >= 0.0, "project_weights: rho must be >= 0");
    for (std::size_t i = 0; i < net.w1.size(); ++i) {
        const double lo = std::max(-1.0, (*net.w_fab)[i] - 0.5 * rho);
        const double hi = std::min(1.0, (*net.w_fab)[i] + 0.5 * rho);
        net.w1[i] = clamp(net.w1[i], lo, hi);
    }
}

enum class TrainMode { full, freeze_first, constrained };

/// One optimizer step over a batch. Returns the mean loss.
inline double backward_step(SmallNet& net, const std::vector<const CompiledSample*>& batch,
                            const FitModel& fit, const TrainConfig& cfg, OptimizerState& opt,
                            TrainMode mode = TrainMode::full) {
    cfg.validate();
    require(!batch.empty(), "backward_step: empty batch");
    Gradients g;
    g.init(net);
    double loss = 0.0;
    for (const CompiledSample* cs : batch) {
        const ForwardTrace tr = forward(net, *cs, fit, cfg.noise_scale);
        loss += backward(net, *cs, fit, tr, cfg, g);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    loss *= inv;
    if (!std::isfinite(loss))
        throw std::runtime_error("backward_step: non-finite loss (lr too high or degenerate data)");

    auto apply = [&](std::vector<double>& w, std::vector<double>& v,
                     const std::vector<double>& grad, double lr_scale) {
        const double lr = cfg.learning_rate * lr_scale;
        for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = cfg.momentum * v[i] - lr * grad[i] * inv;
            w[i] += v[i];
        }
    };
    if (mode != TrainMode::freeze_first) {
        apply(net.w1, opt.v_w1, g.w1, 1.0);
        apply(net.th1, opt.v_th1, g.th1, kLrScaleTh1);
        for (double& w : net.w1) w = clamp(w, -1.0, 1.0);
        for (double& t : net.th1) t = std::max(t, 1e-3);
        if (mode == TrainMode::constrained) project_weights(net, cfg.tunability_rho);
    }
    apply(net.w2, opt.v_w2, g.w2, kLrScaleW2);
    apply(net.w3, opt.v_w3, g.w3, kLrScaleW3);
    return loss;
}

inline double evaluate(const SmallNet& net, const std::vector<CompiledSample>& data,
                       const FitModel& fit, double noise_scale) {
    require(!data.empty(), "evaluate: empty dataset");
    std::size_t correct = 0;
    for (const auto& cs : data) {
        const ForwardTrace tr = forward(net, cs, fit, noise_scale);
        if (tr.argmax() == cs.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
    double l1_spike_rate = 0.0; ///< layer1 spikes per (window x neuron)
};

inline double layer1_spike_rate(const SmallNet& net, const std::vector<CompiledSample>& data,
                                const FitModel& fit, double noise_scale) {
    double spikes = 0.0, cells = 0.0;
    for (const auto& cs : data) {
        const ForwardTrace tr = forward(net, cs, fit, noise_scale);
        spikes += static_cast<double>(tr.l1_spikes);
        cells += static_cast<double>(tr.T) * net.n1();
    }
    return cells > 0.0 ? spikes / cells : 0.0;
}

/// Deterministic keyed shuffle (Fisher-Yates).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(
            rng::keyed_uniform(seed, static_cast<std::uint64_t>(epoch), i, 11) * i);
        std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
    }
    return idx;
}

/// Full training loop; sets the fabrication snapshot when it finishes.
inline std::vector<EpochStats> train(SmallNet& net, const std::vector<CompiledSample>& train_set,
                                     const std::vector<CompiledSample>& test_set,
                                     const FitModel& fit, const TrainConfig& cfg,
                                     TrainMode mode = TrainMode::full) {
    cfg.validate();
    OptimizerState opt;
    opt.init(net);
    std::vector<EpochStats> history;
    for (int e = 0; e < cfg.epochs; ++e) {
        const auto order = epoch_order(train_set.size(), cfg.seed, e);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
            std::vector<const CompiledSample*> batch;
            for (std::size_t k = at; k < std::min(order.size(), at + cfg.batch_size); ++k)
                batch.push_back(&train_set[order[k]]);
            loss_sum += backward_step(net, batch, fit, cfg, opt, mode);
            ++batches;
        }
        EpochStats st;
        st.epoch = e;
        st.loss = loss_sum / static_cast<double>(batches);
        st.train_acc = evaluate(net, train_set, fit, cfg.noise_scale);
        st.test_acc = test_set.empty() ? 0.0 : evaluate(net, test_set, fit, cfg.noise_scale);
        st.l1_spike_rate = layer1_spike_rate(net, train_set, fit, cfg.noise_scale);
        history.push_back(st);
    }
    net.w_fab = net.w1;
    return history;
}

enum class RetrainMode { none, freeze_first, full };

inline RetrainMode retrain_mode_from_string(const std::string& s) {
    if (s == "none") return RetrainMode::none;
    if (s == "freeze_first") return RetrainMode::freeze_first;
    if (s == "full") return RetrainMode::full;
    throw UserError("unknown retrain mode '" + s + "' (expected none|freeze_first|full)");
}

/// Evaluate or retrain a fabricated net on a second task.
/// none: evaluate directly. freeze_first: retrain everything but the first
/// layer. full: retrain everything, clamping layer1 into the tunability band
/// around the fabrication snapshot after every step.
inline double retrain_flow(SmallNet net, const std::vector<CompiledSample>& train_b,
                           const std::vector<CompiledSample>& test_b, const FitModel& fit,
                           const TrainConfig& cfg, RetrainMode mode,
                           std::vector<EpochStats>* history_out = nullptr) {
    require(net.w_fab.has_value(), "retrain_flow: net has no fabrication snapshot");
    if (mode == RetrainMode::none) return evaluate(net, test_b, fit, cfg.noise_scale);
    const TrainMode tm =
        (mode == RetrainMode::freeze_first) ? TrainMode::freeze_first : TrainMode::constrained;
    const auto fab = net.w_fab; // snapshot survives the retrain
    auto history = [&] {
        OptimizerState opt;
        opt.init(net);
        std::vector<EpochStats> h;
        for (int e = 0; e < cfg.epochs; ++e) {
            const auto order = epoch_order(train_b.size(), cfg.seed + 1, e);
            double loss_sum = 0.0;
            std::size_t batches = 0;
            for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
                std::vector<const CompiledSample*> batch;
                for (std::size_t k = at; k < std::min(order.size(), at + cfg.batch_size); ++k)
                    batch.push_back(&train_b[order[k]]);
                loss_sum += backward_step(net, batch, fit, cfg, opt, tm);
                ++batches;
            }
            EpochStats st;
            st.epoch = e;
            st.loss = loss_sum / static_cast<double>(batches);
            st.test_acc = evaluate(net, test_b, fit, cfg.noise_scale);
            h.push_back(st);
        }
        return h;
    }();
    net.w_fab = fab;
    if (history_out) *history_out = history;
    return evaluate(net, test_b, fit, cfg.noise_scale);
}

/// Accuracy of one net under a list of noise scales.
inline std::vector<std::pair<double, double>> noise_sensitivity(
    const SmallNet& net, const std::vector<CompiledSample>& test_set, const FitModel& fit,
    const std::vector<double>& scales) {
    std::vector<std::pair<double, double>> out;
    for (double s : scales) out.emplace_back(s, evaluate(net, test_set, fit, s));
    return out;
}

// ---- gradient-check probes (smooth path, spikes/resets frozen) ----

/// Sum of layer1 pre-activation voltages with frozen decisions: smooth in
/// the layer1 weights; the analytic gradient mirrors the training backward
/// pass with the surrogate bypassed.
inline double probe_v1_sum(const SmallNet& net, const CompiledSample& cs, const FitModel& fit,
                           const ForwardTrace& frozen, std::vector<double>* grad_w1 = nullptr) {
    const ForwardTrace tr = forward(net, cs, fit, 0.0, &frozen);
    double J = 0.0;
    for (double v : tr.v1) J += v;
    if (grad_w1) {
        grad_w1->assign(net.w1.size(), 0.0);
        const int T = tr.T, n1 = net.n1();
        const Polynomial df1 = fit.f1.derivative();
        const Polynomial df2l = fit.f2_lower.derivative();
        std::vector<double> g_dpos(n1, 0.0), g_dneg(n1, 0.0);
        for (int t = T - 1; t >= 0; --t) {
            const std::size_t b1 = static_cast<std::size_t>(t) * n1;
            for (int n = 0; n < n1; ++n) {
                const double diff = clamp(tr.d_pos[b1 + n] - tr.d_neg[b1 + n], -1.0, 1.0);
                const double gd = df2l.eval(diff); // dJ/dv = 1
                g_dpos[n] += gd;
                g_dneg[n] -= gd;
            }
            for (const Route& r : cs.windows[t]) {
                double w = net.w1[r.w_index];
                double sgn = 1.0;
                if (net.polarity == PolarityMode::signed_single && !r.polarity) {
                    w = -w;
                    sgn = -1.0;
                }
                if (w == 0.0) continue;
                const std::size_t i = b1 + r.neuron;
                double gD = (w > 0.0) ? ((tr.d_pos[i] < 1.0) ? g_dpos[r.neuron] : 0.0)
                                      : ((tr.d_neg[i] < 1.0) ? g_dneg[r.neuron] : 0.0);
                if (gD == 0.0) continue;
                const double aw = std::fabs(w);
                const double mean_raw = fit.f1.eval(aw);
                if (mean_raw <= 0.0 || mean_raw >= 1.0) continue;
                (*grad_w1)[r.w_index] += gD * df1.eval(aw) * (w > 0.0 ? 1.0 : -1.0) * sgn;
            }
            if (t > 0) {
                for (int n = 0; n < n1; ++n) {
                    const std::size_t prev = static_cast<std::size_t>(t - 1) * n1 + n;
                    const double keep = frozen.s1[prev] ? 0.0 : 1.0;
                    g_dpos[n] *= keep;
                    g_dneg[n] *= keep;
                }
            }
        }
    }
    return J;
}

/// Sum of hidden membrane potentials with frozen decisions: linear in w2.
inline double probe_m2_sum(const SmallNet& net, const CompiledSample& cs, const FitModel& fit,
                           const ForwardTrace& frozen, std::vector<double>* grad_w2 = nullptr) {
    const ForwardTrace tr = forward(net, cs, fit, 0.0, &frozen);
    double J = 0.0;
    for (double m : tr.m2) J += m;
    if (grad_w2) {
        grad_w2->assign(net.w2.size(), 0.0);
        const int T = tr.T, n1 = net.n1();
        std::vector<double> g_m(net.hidden, 0.0);
        for (int t = T - 1; t >= 0; --t) {
            const std::size_t b1 = static_cast<std::size_t>(t) * n1;
            const std::size_t b2 = static_cast<std::size_t>(t) * net.hidden;
            for (int h = 0; h < net.hidden; ++h) {
                double gm = 1.0; // dJ/dm2(t,h)
                if (t < T - 1)
                    gm += g_m[h] * net.lif_decay * (frozen.s2[b2 + h] ? 0.0 : 1.0);
                gm *= (tr.m2[b2 + h] > 0.0 ? 1.0 : 0.0); // membrane floor gate
                g_m[h] = gm;
                double* grow = &(*grad_w2)[static_cast<std::size_t>(h) * n1];
                for (int n = 0; n < n1; ++n)
                    if (frozen.s1[b1 + n]) grow[n] += gm;
            }
        }
    }
    return J;
}

// ---- checkpoints: versioned text header + raw little-endian weight blob ----

inline void save_checkpoint(const SmallNet& net, const std::string& path) {
    KvConfig cfg;
    cfg.set_int("checkpoint.schema_version", 1);
    cfg.set_int("checkpoint.in_w", net.in_w);
    cfg.set_int("checkpoint.in_h", net.in_h);
    cfg.set_int("checkpoint.kernel", net.kernel);
    cfg.set_int("checkpoint.stride", net.stride);
    cfg.set_int("checkpoint.channels", net.channels);
    cfg.set_int("checkpoint.hidden", net.hidden);
    cfg.set_int("checkpoint.classes", net.classes);
    cfg.set("checkpoint.polarity", to_string(net.polarity));
    cfg.set_int("checkpoint.integration_us", net.integration_us);
    cfg.set_double("checkpoint.lif_decay", net.lif_decay);
    cfg.set_int("checkpoint.has_fabrication", net.w_fab ? 1 : 0);
    const std::string blob = path + ".bin";
    std::size_t n_doubles =
        net.w1.size() + net.th1.size() + net.w2.size() + net.w3.size() +
        (net.w_fab ? net.w_fab->size() : 0);
    cfg.set_int("checkpoint.blob_doubles", static_cast<std::int64_t>(n_doubles));
    cfg.save(path);
    std::ofstream f(blob, std::ios::binary | std::ios::trunc);
    require_user(f.good(), "cannot write checkpoint blob: " + blob);
    auto wr = [&](const std::vector<double>& v) {
        f.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(double)));
    };
    wr(net.w1);
    wr(net.th1);
    wr(net.w2);
    wr(net.w3);
    if (net.w_fab) wr(*net.w_fab);
}

inline SmallNet load_checkpoint(const std::string& path) {
    const KvConfig cfg = KvConfig::load(path);
    require_user(cfg.get_int("checkpoint.schema_version") == 1,
                 "checkpoint " + path + ": unsupported schema version");
    SmallNet net;
    net.in_w = static_cast<int>(cfg.get_int("checkpoint.in_w"));
    net.in_h = static_cast<int>(cfg.get_int("checkpoint.in_h"));
    net.kernel = static_cast<int>(cfg.get_int("checkpoint.kernel"));
    net.stride = static_cast<int>(cfg.get_int("checkpoint.stride"));
    net.channels = static_cast<int>(cfg.get_int("checkpoint.channels"));
    net.hidden = static_cast<int>(cfg.get_int("checkpoint.hidden"));
    net.classes = static_cast<int>(cfg.get_int("checkpoint.classes"));
    net.polarity = polarity_mode_from_string(cfg.get_string("checkpoint.polarity"));
    net.integration_us = cfg.get_int("checkpoint.integration_us");
    net.lif_decay = cfg.get_double("checkpoint.lif_decay");
    const bool has_fab = cfg.get_int("checkpoint.has_fabrication") != 0;

    net.w1.resize(static_cast<std::size_t>(net.channels) * net.slots_per_channel());
    net.th1.resize(net.channels);
    net.w2.resize(static_cast<std::size_t>(net.hidden) * net.n1());
    net.w3.resize(static_cast<std::size_t>(net.classes) * net.hidden);

    const std::string blob = path + ".bin";
    std::ifstream f(blob, std::ios::binary);
    require_user(f.good(), "cannot open checkpoint blob: " + blob);
    auto rd = [&](std::vector<double>& v) {
        f.read(reinterpret_cast<char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double)));
        require_user(f.gcount() == static_cast<std::streamsize>(v.size() * sizeof(double)),
                     "checkpoint blob truncated: " + blob);
    };
    rd(net.w1);
    rd(net.th1);
    rd(net.w2);
    rd(net.w3);
    if (has_fab) {
        std::vector<double> fab(net.w1.size());
        rd(fab);
        net.w_fab = std::move(fab);
    }
    net.validate();
    return net;
}

} // namespace dwpix
