#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dwpix/common.hpp"
#include "dwpix/events.hpp"
#include "dwpix/rng.hpp"

// Seeded synthetic event-stream tasks, small enough to train in seconds.
//
// Task 0 "bars": a long oriented bar drifts across the frame; the label is
// the bar orientation, position and drift direction are randomized.
// Task 1 "quadrants": a short bar of random orientation random-walks inside
// one quadrant; the label is the quadrant. The two label spaces are
// unrelated, so a net trained on one task scores at chance on the other.

namespace dwpix {

struct ToyTaskSpec {
    int task = 0; ///< 0 = oriented bars, 1 = quadrants
    int n_classes = 4;
    int n_samples = 2000;
    std::uint64_t seed = 1;
    int width = 16;
    int height = 16;
    std::int64_t duration_us = 8000;
    std::int64_t step_us = 250;
};

struct ToySample {
    EventStream stream;
    int label = 0;
};

namespace detail {

struct DrawCtx {
    std::uint64_t seed;
    std::uint64_t sample;
    std::uint64_t counter = 0;
    double uniform() { return rng::keyed_uniform(seed, sample, counter++, 99); }
};

inline double seg_dist(double px, double py, double ax, double ay, double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
    t = clamp01(t);
    const double cx = ax + t * dx, cy = ay + t * dy;
    return std::hypot(px - cx, py - cy);
}

inline std::vector<std::uint8_t> rasterize_bar(double cx, double cy, double angle_rad,
                                               double half_len, double half_width, int w,
                                               int h) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(w) * h, 0);
    const double ux = std::cos(angle_rad), uy = std::sin(angle_rad);
    const double ax = cx - ux * half_len, ay = cy - uy * half_len;
    const double bx = cx + ux * half_len, by = cy + uy * half_len;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (seg_dist(x + 0.5, y + 0.5, ax, ay, bx, by) <= half_width)
                mask[static_cast<std::size_t>(y) * w + x] = 1;
    return mask;
}

} // namespace detail

/// Generate one sample: a bar animated over fixed time steps; events are the
/// per-step contrast changes (newly covered pixels emit ON, uncovered OFF)
/// with deterministic sub-step timing jitter.
inline ToySample make_toy_sample(const ToyTaskSpec& spec, std::uint64_t sample_index) {
    require(spec.n_classes >= 2 && spec.n_classes <= 8, "toy task: n_classes must be in [2,8]");
    require(spec.width >= 8 && spec.height >= 8, "toy task: sensor too small");
    detail::DrawCtx rng_ctx{spec.seed, sample_index};

    ToySample out;
    out.label = static_cast<int>(sample_index % spec.n_classes);
    out.stream.width = static_cast<std::uint16_t>(spec.width);
    out.stream.height = static_cast<std::uint16_t>(spec.height);

    const int steps = static_cast<int>(spec.duration_us / spec.step_us);
    const double w = spec.width, h = spec.height;

    double angle, cx, cy, vx, vy, half_len, half_width = 0.6;
    double qx0 = 0, qx1 = w, qy0 = 0, qy1 = h;
    if (spec.task == 0) {
        // orientation task: angle encodes the label, sweep direction is random
        angle = M_PI * out.label / spec.n_classes;
        half_len = 0.35 * std::min(w, h);
        const double px = -std::sin(angle), py = std::cos(angle); // perpendicular
        const double sweep = (rng_ctx.uniform() < 0.5) ? 1.0 : -1.0;
        const double travel = 1.1 * std::min(w, h);
        const double speed = travel / steps;
        vx = px * speed * sweep;
        vy = py * speed * sweep;
        const double along = (rng_ctx.uniform() - 0.5) * 0.3 * std::min(w, h);
        cx = 0.5 * w - 0.5 * travel * sweep * px + along * std::cos(angle);
        cy = 0.5 * h - 0.5 * travel * sweep * py + along * std::sin(angle);
    } else {
        // quadrant task: position encodes the label, orientation is random
        require(spec.n_classes == 4, "toy task 1 uses exactly 4 quadrant classes");
        const int qx = out.label & 1, qy = out.label >> 1;
        qx0 = qx * 0.5 * w;
        qx1 = qx0 + 0.5 * w;
        qy0 = qy * 0.5 * h;
        qy1 = qy0 + 0.5 * h;
        angle = M_PI * std::floor(rng_ctx.uniform() * 4.0) / 4.0;
        half_len = 0.11 * std::min(w, h);
        cx = qx0 + 0.3 * (qx1 - qx0) + rng_ctx.uniform() * 0.4 * (qx1 - qx0);
        cy = qy0 + 0.3 * (qy1 - qy0) + rng_ctx.uniform() * 0.4 * (qy1 - qy0);
        vx = vy = 0.0; // random walk instead
    }

    auto prev = std::vector<std::uint8_t>(static_cast<std::size_t>(spec.width) * spec.height, 0);
    for (int s = 0; s < steps; ++s) {
        if (spec.task == 1) {
            cx = clamp(cx + (rng_ctx.uniform() - 0.5) * 2.4, qx0 + 1.5, qx1 - 1.5);
            cy = clamp(cy + (rng_ctx.uniform() - 0.5) * 2.4, qy0 + 1.5, qy1 - 1.5);
        } else {
            cx += vx;
            cy += vy;
        }
        auto cur = detail::rasterize_bar(cx, cy, angle, half_len, half_width, spec.width,
                                         spec.height);
        const std::int64_t t0 = s * spec.step_us;
        std::vector<Event> step_events;
        for (int y = 0; y < spec.height; ++y) {
            for (int x = 0; x < spec.width; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * spec.width + x;
                if (cur[i] == prev[i]) continue;
                Event e;
                e.t_us = t0 + static_cast<std::int64_t>(rng_ctx.uniform() *
                                                        (spec.step_us / 2));
                e.x = static_cast<std::uint16_t>(x);
                e.y = static_cast<std::uint16_t>(y);
                e.polarity = cur[i] ? 1 : 0;
                step_events.push_back(e);
            }
        }
        std::stable_sort(step_events.begin(), step_events.end(),
                         [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
        out.stream.events.insert(out.stream.events.end(), step_events.begin(),
                                 step_events.end());
        prev = std::move(cur);
    }
    out.stream.validate();
    return out;
}

inline std::vector<ToySample> make_toy_task(const ToyTaskSpec& spec) {
    std::vector<ToySample> samples;
    samples.reserve(spec.n_samples);
    for (int i = 0; i < spec.n_samples; ++i)
        samples.push_back(make_toy_sample(spec, static_cast<std::uint64_t>(i)));
    return samples;
}

} // namespace dwpix
