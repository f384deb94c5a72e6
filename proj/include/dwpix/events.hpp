#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "dwpix/common.hpp"
#include "dwpix/fitting.hpp"
#include "dwpix/kvconfig.hpp"
#include "dwpix/rng.hpp"

// AER event streams, integration windowing and the first-layer analog
// convolution engine (behavioral: events route through the fitted f1/f2
// transfer functions into per-neuron accumulators).

namespace dwpix {

struct Event {
    std::int64_t t_us = 0;
    std::uint16_t x = 0;
    std::uint16_t y = 0;
    std::uint8_t polarity = 1; ///< 1 = ON, 0 = OFF
};

struct EventStream {
    std::uint16_t width = 34;
    std::uint16_t height = 34;
    std::vector<Event> events;

    void validate() const {
        std::int64_t prev = std::numeric_limits<std::int64_t>::min();
        for (std::size_t i = 0; i < events.size(); ++i) {
            const Event& e = events[i];
            require(e.t_us >= prev, "event stream: timestamps not non-decreasing at index " +
                                        std::to_string(i));
            require(e.x < width && e.y < height,
                    "event stream: coordinate out of range at index " + std::to_string(i));
            prev = e.t_us;
        }
    }
};

/// Decode the public N-MNIST packing: 5 bytes per event, byte0 = x,
/// byte1 = y, byte2 bit7 = polarity, remaining 23 bits = timestamp in us.
/// Sensor is 34x34.
inline EventStream parse_nmnist(const std::uint8_t* data, std::size_t len) {
    require_user(len % 5 == 0, "nmnist: payload length " + std::to_string(len) +
                                   " is not a multiple of 5");
    EventStream s;
    s.width = 34;
    s.height = 34;
    s.events.reserve(len / 5);
    for (std::size_t off = 0; off < len; off += 5) {
        Event e;
        e.x = data[off];
        e.y = data[off + 1];
        e.polarity = (data[off + 2] & 0x80) ? 1 : 0;
        e.t_us = (static_cast<std::int64_t>(data[off + 2] & 0x7F) << 16) |
                 (static_cast<std::int64_t>(data[off + 3]) << 8) |
                 static_cast<std::int64_t>(data[off + 4]);
        require_user(e.x < s.width && e.y < s.height,
                     "nmnist: coordinate out of range in record at byte " + std::to_string(off));
        s.events.push_back(e);
    }
    s.validate();
    return s;
}

inline EventStream parse_nmnist(const std::vector<std::uint8_t>& bytes) {
    return parse_nmnist(bytes.data(), bytes.size());
}

/// CSV schema: optional "# sensor W H" line, header "t_us,x,y,polarity",
/// then one event per line with polarity 0|1. Round-trips with emit_csv.
inline EventStream parse_csv(const std::string& text) {
    EventStream s;
    bool have_dims = false;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    std::int64_t prev_t = std::numeric_limits<std::int64_t>::min();
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            unsigned w = 0, h = 0;
            if (std::sscanf(line.c_str(), "# sensor %u %u", &w, &h) == 2) {
                require_user(w > 0 && h > 0 && w <= 65535 && h <= 65535,
                             "events csv line " + std::to_string(lineno) + ": bad sensor dims");
                s.width = static_cast<std::uint16_t>(w);
                s.height = static_cast<std::uint16_t>(h);
                have_dims = true;
            }
            continue;
        }
        if (line == "t_us,x,y,polarity") continue;
        long long t;
        unsigned x, y, pol;
        if (std::sscanf(line.c_str(), "%lld,%u,%u,%u", &t, &x, &y, &pol) != 4)
            throw UserError("events csv line " + std::to_string(lineno) + ": cannot parse '" +
                            line + "'");
        require_user(pol <= 1, "events csv line " + std::to_string(lineno) +
                                   ": polarity must be 0 or 1");
        require_user(t >= prev_t, "events csv line " + std::to_string(lineno) +
                                      ": timestamps must be non-decreasing");
        prev_t = t;
        Event e;
        e.t_us = t;
        e.x = static_cast<std::uint16_t>(x);
        e.y = static_cast<std::uint16_t>(y);
        e.polarity = static_cast<std::uint8_t>(pol);
        s.events.push_back(e);
    }
    if (!have_dims) {
        std::uint16_t w = 1, h = 1;
        for (const auto& e : s.events) {
            w = std::max<std::uint16_t>(w, e.x + 1);
            h = std::max<std::uint16_t>(h, e.y + 1);
        }
        s.width = w;
        s.height = h;
    }
    for (std::size_t i = 0; i < s.events.size(); ++i)
        require_user(s.events[i].x < s.width && s.events[i].y < s.height,
                     "events csv: coordinate out of sensor range at event " + std::to_string(i));
    return s;
}

inline std::string emit_csv(const EventStream& s) {
    std::string out = "# sensor " + std::to_string(s.width) + " " + std::to_string(s.height) +
                      "\nt_us,x,y,polarity\n";
    for (const auto& e : s.events) {
        out += std::to_string(e.t_us);
        out += ",";
        out += std::to_string(e.x);
        out += ",";
        out += std::to_string(e.y);
        out += ",";
        out += std::to_string(static_cast<int>(e.polarity));
        out += "\n";
    }
    return out;
}

struct WindowSlice {
    std::int64_t t_start_us = 0;
    std::int64_t t_end_us = 0; ///< exclusive
    std::size_t begin = 0;     ///< index range into the stream's event vector
    std::size_t end = 0;
};

/// Split a stream into half-open integration windows [k*T, (k+1)*T).
/// Every event lands in exactly one window; trailing empty windows are not
/// produced, but interior empty windows are.
inline std::vector<WindowSlice> window(const EventStream& s, std::int64_t integration_us) {
    require(integration_us > 0, "window: integration time must be > 0");
    s.validate();
    std::vector<WindowSlice> out;
    if (s.events.empty()) return out;
    require(s.events.front().t_us >= 0, "window: negative timestamps unsupported");
    const std::int64_t t_last = s.events.back().t_us;
    const std::int64_t n_windows = t_last / integration_us + 1;
    std::size_t idx = 0;
    for (std::int64_t k = 0; k < n_windows; ++k) {
        WindowSlice w;
        w.t_start_us = k * integration_us;
        w.t_end_us = (k + 1) * integration_us;
        w.begin = idx;
        while (idx < s.events.size() && s.events[idx].t_us < w.t_end_us) ++idx;
        w.end = idx;
        out.push_back(w);
    }
    return out;
}

enum class PolarityMode { two_channel, signed_single };

inline const char* to_string(PolarityMode m) {
    return m == PolarityMode::two_channel ? "two_channel" : "signed_single";
}
inline PolarityMode polarity_mode_from_string(const std::string& s) {
    if (s == "two_channel") return PolarityMode::two_channel;
    if (s == "signed_single") return PolarityMode::signed_single;
    throw UserError("unknown polarity mode '" + s + "' (expected two_channel|signed_single)");
}

struct LayerConfig {
    int kernel = 3;
    int stride = 2;
    int channels = 32;
    std::int64_t integration_us = 1000;
    PolarityMode polarity = PolarityMode::two_channel;
    std::vector<double> weights;    ///< [ch][pol][ky][kx], signed, in [-1,1]
    std::vector<double> thresholds; ///< per channel, in normalized f2 voltage units

    int npol() const { return polarity == PolarityMode::two_channel ? 2 : 1; }
    std::size_t weight_count() const {
        return static_cast<std::size_t>(channels) * npol() * kernel * kernel;
    }
    double weight_at(int ch, int pol, int ky, int kx) const {
        return weights[((static_cast<std::size_t>(ch) * npol() + pol) * kernel + ky) * kernel + kx];
    }
    double& weight_at(int ch, int pol, int ky, int kx) {
        return weights[((static_cast<std::size_t>(ch) * npol() + pol) * kernel + ky) * kernel + kx];
    }
    int out_w(int in_w) const { return (in_w - kernel) / stride + 1; }
    int out_h(int in_h) const { return (in_h - kernel) / stride + 1; }

    void validate(int in_w, int in_h) const {
        require(kernel >= 1 && stride >= 1, "layer: kernel and stride must be >= 1");
        require(channels >= 1, "layer: need at least one channel");
        require(integration_us > 0, "layer: integration time must be > 0");
        require(in_w >= kernel && in_h >= kernel, "layer: sensor smaller than kernel");
        require(weights.size() == weight_count(),
                "layer: weight vector has " + std::to_string(weights.size()) + " entries, need " +
                    std::to_string(weight_count()));
        require(thresholds.size() == static_cast<std::size_t>(channels),
                "layer: need one threshold per channel");
        for (double w : weights)
            require(w >= -1.0 && w <= 1.0, "layer: weights must be within [-1,1]");
        for (double t : thresholds) require(t > 0.0, "layer: thresholds must be positive");
    }
};

/// Output activation events: synchronous window-boundary timestamp, output
/// map coordinates and channel, no polarity bit.
struct OutputEvent {
    std::int64_t t_us = 0;
    std::uint16_t x = 0;
    std::uint16_t y = 0;
    std::uint16_t channel = 0;
};

struct OutputEventStream {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<OutputEvent> events;
};

struct NoiseCfg {
    bool on = false;
    std::uint64_t seed = 0;
    double scale = 1.0;
};

/// Deterministic per-(event, neuron) and per-(window, neuron) noise draws
/// shared by every implementation of the analog first layer.
inline double layer1_f1_noise_z(std::uint64_t seed, std::uint64_t event_index,
                                std::uint64_t neuron_index) {
    return rng::keyed_normal(seed, event_index, neuron_index, 1);
}
inline double layer1_f2_noise_z(std::uint64_t seed, std::uint64_t window_index,
                                std::uint64_t neuron_index) {
    return rng::keyed_normal(seed, window_index, neuron_index, 2);
}

struct ConvResult {
    OutputEventStream out;
    std::uint64_t in_events = 0;
    std::uint64_t out_events = 0;
    std::vector<double> final_d_pos; ///< per neuron, after the last window
    std::vector<double> final_d_neg;
    std::uint64_t windows = 0;
};

/// First-layer analog convolution through the behavioral model.
///
/// Each output neuron (channel, ox, oy) owns a positive/negative accumulator
/// pair over its receptive field. Events fan out asynchronously to every
/// covering neuron via eval_f1 (optionally with deterministic Gaussian
/// noise); at each window boundary the worst-case (lower-envelope) f2
/// voltage is compared against the channel threshold, firing resets the
/// accumulator pair, otherwise state is retained.
inline ConvResult conv_forward_analog(const EventStream& stream, const LayerConfig& cfg,
                                      const FitModel& fit, const NoiseCfg& noise) {
    cfg.validate(stream.width, stream.height);
    stream.validate();
    const int ow = cfg.out_w(stream.width);
    const int oh = cfg.out_h(stream.height);
    require(ow >= 1 && oh >= 1, "conv: empty output map");
    const std::size_t n_neurons = static_cast<std::size_t>(cfg.channels) * oh * ow;

    ConvResult res;
    res.out.width = ow;
    res.out.height = oh;
    res.out.channels = cfg.channels;
    res.in_events = stream.events.size();
    res.final_d_pos.assign(n_neurons, 0.0);
    res.final_d_neg.assign(n_neurons, 0.0);

    std::vector<double>& d_pos = res.final_d_pos;
    std::vector<double>& d_neg = res.final_d_neg;

    const auto windows_v = window(stream, cfg.integration_us);
    res.windows = windows_v.size();
    std::uint64_t event_global = 0;
    for (std::size_t wi = 0; wi < windows_v.size(); ++wi) {
        const WindowSlice& win = windows_v[wi];
        for (std::size_t ei = win.begin; ei < win.end; ++ei, ++event_global) {
            const Event& e = stream.events[ei];
            const int ox_lo = std::max(0, (e.x - cfg.kernel + cfg.stride) / cfg.stride);
            const int ox_hi = std::min(ow - 1, e.x / cfg.stride);
            const int oy_lo = std::max(0, (e.y - cfg.kernel + cfg.stride) / cfg.stride);
            const int oy_hi = std::min(oh - 1, e.y / cfg.stride);
            for (int ch = 0; ch < cfg.channels; ++ch) {
                for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) {
                        const int kx = e.x - ox * cfg.stride;
                        const int ky = e.y - oy * cfg.stride;
                        double w;
                        if (cfg.polarity == PolarityMode::two_channel)
                            w = cfg.weight_at(ch, e.polarity ? 0 : 1, ky, kx);
                        else
                            w = e.polarity ? cfg.weight_at(ch, 0, ky, kx)
                                           : -cfg.weight_at(ch, 0, ky, kx);
                        if (w == 0.0) continue;
                        const std::size_t n =
                            (static_cast<std::size_t>(ch) * oh + oy) * ow + ox;
                        auto [dd, sd] = eval_f1(fit, std::fabs(w));
                        if (noise.on && sd > 0.0) {
                            dd += noise.scale * sd *
                                  layer1_f1_noise_z(noise.seed, event_global, n);
                            dd = std::max(dd, 0.0); // a pulse never moves the wall left
                        }
                        if (w > 0.0)
                            d_pos[n] = std::min(1.0, d_pos[n] + dd);
                        else
                            d_neg[n] = std::min(1.0, d_neg[n] + dd);
                    }
                }
            }
        }
        // synchronous thresholding at the window boundary
        for (int ch = 0; ch < cfg.channels; ++ch) {
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    const std::size_t n = (static_cast<std::size_t>(ch) * oh + oy) * ow + ox;
                    double v = eval_f2(fit, clamp(d_pos[n] - d_neg[n], -1.0, 1.0), F2Mode::lower);
                    if (noise.on) {
                        const double sd = eval_f2_std(fit, clamp(d_pos[n] - d_neg[n], -1.0, 1.0));
                        if (sd > 0.0)
                            v += noise.scale * sd * layer1_f2_noise_z(noise.seed, wi, n);
                    }
                    if (v >= cfg.thresholds[ch]) {
                        OutputEvent oe;
                        oe.t_us = win.t_end_us;
                        oe.x = static_cast<std::uint16_t>(ox);
                        oe.y = static_cast<std::uint16_t>(oy);
                        oe.channel = static_cast<std::uint16_t>(ch);
                        res.out.events.push_back(oe);
                        d_pos[n] = 0.0;
                        d_neg[n] = 0.0;
                    }
                }
            }
        }
    }
    res.out_events = res.out.events.size();
    return res;
}

/// Ratio of output activation spikes to input event spikes.
inline double bandwidth(const EventStream& in, const OutputEventStream& out) {
    require(!in.events.empty(), "bandwidth: undefined for an empty input stream");
    return static_cast<double>(out.events.size()) / static_cast<double>(in.events.size());
}

inline std::string emit_output_csv(const OutputEventStream& s) {
    std::string out = "# map " + std::to_string(s.width) + " " + std::to_string(s.height) + " " +
                      std::to_string(s.channels) + "\nt_us,x,y,channel\n";
    for (const auto& e : s.events) {
        out += std::to_string(e.t_us);
        out += ",";
        out += std::to_string(e.x);
        out += ",";
        out += std::to_string(e.y);
        out += ",";
        out += std::to_string(e.channel);
        out += "\n";
    }
    return out;
}

} // namespace dwpix
