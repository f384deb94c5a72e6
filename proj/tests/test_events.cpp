#include <catch_amalgamated.hpp>

#include <algorithm>

#include "dwpix/events.hpp"
#include "dwpix/rng.hpp"

using namespace dwpix;

namespace {

/// Linear f1 / affine f2 model with no noise: the analog layer reduces to a
/// weighted sum against a threshold, checkable by a digital oracle.
FitModel linear_fit_model(double slope) {
    FitModel m;
    m.config_tag = "synthetic";
    m.f1.coeffs = {0.0, slope};
    m.f1_noise.lo = 0.0;
    m.f1_noise.hi = 1.0;
    m.f2.coeffs = {0.5, 0.5};
    m.f2_lower.coeffs = {0.5, 0.5};
    m.f2_noise.lo = -1.0;
    m.f2_noise.hi = 1.0;
    m.f1_dr = slope;
    m.f2_dr = 1.0;
    return m;
}

EventStream random_stream(std::uint64_t seed, int width, int height, int n_events,
                          std::int64_t span_us) {
    EventStream s;
    s.width = static_cast<std::uint16_t>(width);
    s.height = static_cast<std::uint16_t>(height);
    std::vector<std::int64_t> times;
    for (int k = 0; k < n_events; ++k)
        times.push_back(static_cast<std::int64_t>(rng::keyed_uniform(seed, k, 0, 0) * span_us));
    std::sort(times.begin(), times.end());
    for (int k = 0; k < n_events; ++k) {
        Event e;
        e.t_us = times[k];
        e.x = static_cast<std::uint16_t>(rng::keyed_uniform(seed, k, 1, 0) * width);
        e.y = static_cast<std::uint16_t>(rng::keyed_uniform(seed, k, 2, 0) * height);
        e.polarity = rng::keyed_uniform(seed, k, 3, 0) < 0.5 ? 0 : 1;
        s.events.push_back(e);
    }
    return s;
}

LayerConfig random_layer(std::uint64_t seed, int channels, double wmax, double threshold) {
    LayerConfig cfg;
    cfg.channels = channels;
    cfg.integration_us = 1000;
    cfg.polarity = PolarityMode::two_channel;
    cfg.weights.resize(cfg.weight_count());
    for (std::size_t i = 0; i < cfg.weights.size(); ++i)
        cfg.weights[i] = wmax * (2.0 * rng::keyed_uniform(seed, i, 7, 0) - 1.0);
    cfg.thresholds.assign(channels, threshold);
    return cfg;
}

/// Brute-force digital first layer: per-window weighted sums with retention
/// and reset-on-spike, mirroring the hardware contract but written against
/// dense maps instead of event routing.
std::vector<OutputEvent> digital_oracle(const EventStream& s, const LayerConfig& cfg,
                                        double slope) {
    const int ow = cfg.out_w(s.width), oh = cfg.out_h(s.height);
    std::vector<double> acc_pos(static_cast<std::size_t>(cfg.channels) * oh * ow, 0.0);
    std::vector<double> acc_neg(acc_pos.size(), 0.0);
    std::vector<OutputEvent> out;
    const auto wins = window(s, cfg.integration_us);
    for (const auto& win : wins) {
        for (std::size_t ei = win.begin; ei < win.end; ++ei) {
            const Event& e = s.events[ei];
            for (int ch = 0; ch < cfg.channels; ++ch) {
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const int kx = e.x - ox * cfg.stride;
                        const int ky = e.y - oy * cfg.stride;
                        if (kx < 0 || kx >= cfg.kernel || ky < 0 || ky >= cfg.kernel) continue;
                        const double w = cfg.weight_at(ch, e.polarity ? 0 : 1, ky, kx);
                        if (w == 0.0) continue;
                        const std::size_t n = (static_cast<std::size_t>(ch) * oh + oy) * ow + ox;
                        if (w > 0.0)
                            acc_pos[n] = std::min(1.0, acc_pos[n] + slope * w);
                        else
                            acc_neg[n] = std::min(1.0, acc_neg[n] + slope * (-w));
                    }
                }
            }
        }
        for (int ch = 0; ch < cfg.channels; ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const std::size_t n = (static_cast<std::size_t>(ch) * oh + oy) * ow + ox;
                    const double v = 0.5 + 0.5 * (acc_pos[n] - acc_neg[n]);
                    if (v >= cfg.thresholds[ch]) {
                        out.push_back({win.t_end_us, static_cast<std::uint16_t>(ox),
                                       static_cast<std::uint16_t>(oy),
                                       static_cast<std::uint16_t>(ch)});
                        acc_pos[n] = 0.0;
                        acc_neg[n] = 0.0;
                    }
                }
    }
    return out;
}

bool same_events(const std::vector<OutputEvent>& a, const std::vector<OutputEvent>& b) {
    if (a.size() != b.size()) return false;
    auto key = [](const OutputEvent& e) {
        return std::tuple(e.t_us, e.channel, e.y, e.x);
    };
    std::vector<std::tuple<std::int64_t, int, int, int>> ka, kb;
    for (const auto& e : a) ka.push_back(key(e));
    for (const auto& e : b) kb.push_back(key(e));
    std::sort(ka.begin(), ka.end());
    std::sort(kb.begin(), kb.end());
    return ka == kb;
}

} // namespace

TEST_CASE("nmnist parser decodes the 5-byte packing") {
    SECTION("empty payload gives an empty stream") {
        const EventStream s = parse_nmnist(nullptr, 0);
        CHECK(s.events.empty());
        CHECK(s.width == 34);
    }
    SECTION("hand-packed record") {
        // x=3, y=4, polarity ON, t = 1000 us
        const std::uint8_t rec[5] = {3, 4,
                                     static_cast<std::uint8_t>(0x80 | ((1000 >> 16) & 0x7F)),
                                     (1000 >> 8) & 0xFF, 1000 & 0xFF};
        const EventStream s = parse_nmnist(rec, 5);
        REQUIRE(s.events.size() == 1);
        CHECK(s.events[0].x == 3);
        CHECK(s.events[0].y == 4);
        CHECK(s.events[0].polarity == 1);
        CHECK(s.events[0].t_us == 1000);
    }
    SECTION("non-multiple-of-5 payload is rejected") {
        const std::uint8_t junk[7] = {0};
        CHECK_THROWS_AS(parse_nmnist(junk, 7), UserError);
    }
    SECTION("coordinates beyond the 34x34 sensor are rejected") {
        const std::uint8_t rec[5] = {34, 0, 0x80, 0, 0};
        CHECK_THROWS_AS(parse_nmnist(rec, 5), UserError);
    }
}

TEST_CASE("event csv round-trips and rejects unsorted timestamps") {
    SECTION("empty") {
        const EventStream s = parse_csv("");
        CHECK(s.events.empty());
    }
    SECTION("round trip") {
        const EventStream s = random_stream(5, 34, 34, 200, 5000);
        const EventStream r = parse_csv(emit_csv(s));
        REQUIRE(r.events.size() == s.events.size());
        CHECK(r.width == s.width);
        CHECK(r.height == s.height);
        CHECK(emit_csv(r) == emit_csv(s));
    }
    SECTION("unsorted timestamps error with a line number") {
        const std::string text = "t_us,x,y,polarity\n100,1,1,1\n50,2,2,0\n";
        try {
            (void)parse_csv(text);
            FAIL("expected error");
        } catch (const UserError& e) {
            CHECK(std::string(e.what()).find("line 3") != std::string::npos);
        }
    }
    SECTION("malformed row errors with a line number") {
        CHECK_THROWS_AS(parse_csv("t_us,x,y,polarity\nnope\n"), UserError);
    }
}

TEST_CASE("windowing is half-open and conserves events") {
    EventStream s;
    s.width = s.height = 8;
    for (std::int64_t t : {0, 10, 999, 1000, 1500, 2999}) {
        Event e;
        e.t_us = t;
        e.x = e.y = 1;
        s.events.push_back(e);
    }
    const auto wins = window(s, 1000);
    REQUIRE(wins.size() == 3);
    CHECK(wins[0].end - wins[0].begin == 3); // 0, 10, 999
    CHECK(wins[1].end - wins[1].begin == 2); // 1000 (half-open boundary), 1500
    CHECK(wins[2].end - wins[2].begin == 1); // 2999
    std::size_t total = 0;
    for (const auto& w : wins) total += w.end - w.begin;
    CHECK(total == s.events.size());

    // everything inside the first window when the span is short
    const auto one = window(random_stream(9, 8, 8, 50, 900), 1000);
    REQUIRE(one.size() == 1);
    CHECK(one[0].end - one[0].begin == 50);
}

TEST_CASE("output map geometry follows the dimension formula") {
    LayerConfig cfg;
    cfg.channels = 1;
    for (int in = 4; in <= 40; in += 3)
        for (int k : {1, 3, 5})
            for (int st : {1, 2, 3}) {
                if (in < k) continue;
                cfg.kernel = k;
                cfg.stride = st;
                CHECK(cfg.out_w(in) == (in - k) / st + 1);
            }
    // 34x34 sensor, kernel 3, stride 2 -> 16x16
    cfg.kernel = 3;
    cfg.stride = 2;
    CHECK(cfg.out_w(34) == 16);
    CHECK(cfg.out_h(34) == 16);
}

TEST_CASE("zero-weight layer emits zero spikes") {
    const FitModel m = linear_fit_model(0.05);
    LayerConfig cfg = random_layer(1, 4, 0.0, 0.55);
    const EventStream s = random_stream(2, 16, 16, 300, 4000);
    const ConvResult r = conv_forward_analog(s, cfg, m, NoiseCfg{});
    CHECK(r.out_events == 0);
    CHECK(r.out.events.empty());
}

TEST_CASE("analog conv matches the digital oracle on random streams") {
    const double slope = 0.04;
    const FitModel m = linear_fit_model(slope);
    std::size_t total_spikes = 0;
    for (std::uint64_t run = 0; run < 100; ++run) {
        const int channels = 1 + static_cast<int>(run % 4);
        const LayerConfig cfg = random_layer(run * 7 + 1, channels, 0.9, 0.54);
        const EventStream s =
            random_stream(run * 13 + 3, 12, 12, 150 + static_cast<int>(run % 50), 4000);
        const ConvResult got = conv_forward_analog(s, cfg, m, NoiseCfg{});
        const auto want = digital_oracle(s, cfg, slope);
        REQUIRE(same_events(got.out.events, want));
        total_spikes += want.size();
    }
    CHECK(total_spikes > 0); // the scenario actually exercises firing
}

TEST_CASE("noise-off conv is deterministic and stable under equal-timestamp reordering") {
    const FitModel m = linear_fit_model(0.05);
    const LayerConfig cfg = random_layer(77, 3, 0.8, 0.54);
    EventStream s = random_stream(21, 12, 12, 200, 3000);
    // squash timestamps to produce ties
    for (auto& e : s.events) e.t_us = (e.t_us / 100) * 100;
    const ConvResult a = conv_forward_analog(s, cfg, m, NoiseCfg{});
    const ConvResult b = conv_forward_analog(s, cfg, m, NoiseCfg{});
    CHECK(same_events(a.out.events, b.out.events));

    // swap two equal-timestamp events
    EventStream t = s;
    for (std::size_t i = 0; i + 1 < t.events.size(); ++i) {
        if (t.events[i].t_us == t.events[i + 1].t_us) {
            std::swap(t.events[i], t.events[i + 1]);
            break;
        }
    }
    const ConvResult c = conv_forward_analog(t, cfg, m, NoiseCfg{});
    CHECK(same_events(a.out.events, c.out.events));
}

TEST_CASE("noise-on conv is deterministic per seed") {
    const DeviceParams p = DeviceParams::defaults();
    VariationSpec spec;
    spec.trials = 400;
    spec.master_seed = 31;
    const FitModel m = build_fit_model(WeightConfig::hybrid, spec, p, 1e-9);
    const LayerConfig cfg = random_layer(5, 2, 0.9, 0.5);
    const EventStream s = random_stream(8, 12, 12, 250, 4000);
    NoiseCfg nc{true, 99, 1.0};
    const ConvResult a = conv_forward_analog(s, cfg, m, nc);
    const ConvResult b = conv_forward_analog(s, cfg, m, nc);
    CHECK(same_events(a.out.events, b.out.events));
    CHECK(a.final_d_pos == b.final_d_pos);
    nc.seed = 100;
    const ConvResult c = conv_forward_analog(s, cfg, m, nc);
    CHECK(a.final_d_pos != c.final_d_pos);
}

TEST_CASE("retention: event-free windows change no accumulator state") {
    const FitModel m = linear_fit_model(0.04);
    LayerConfig cfg = random_layer(3, 2, 0.8, 2.0); // unreachable threshold: never fires
    EventStream s = random_stream(4, 12, 12, 100, 900);
    // append one far-future event to create several empty interior windows
    Event tail;
    tail.t_us = 5900;
    tail.x = tail.y = 0;
    tail.polarity = 1;
    s.events.push_back(tail);

    EventStream head = s;
    head.events.pop_back();
    const ConvResult full = conv_forward_analog(s, cfg, m, NoiseCfg{});
    const ConvResult first = conv_forward_analog(head, cfg, m, NoiseCfg{});
    // neurons not touched by the tail event kept their exact state across
    // five empty windows
    const int oh = cfg.out_h(12), ow = cfg.out_w(12);
    std::size_t unchanged = 0;
    for (int ch = 0; ch < cfg.channels; ++ch)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                if (ox <= 1 && oy <= 1) continue; // receptive fields covering (0,0)
                const std::size_t n = (static_cast<std::size_t>(ch) * oh + oy) * ow + ox;
                CHECK(full.final_d_pos[n] == first.final_d_pos[n]);
                CHECK(full.final_d_neg[n] == first.final_d_neg[n]);
                ++unchanged;
            }
    CHECK(unchanged > 0);
}

TEST_CASE("bandwidth ratio") {
    EventStream in = random_stream(1, 8, 8, 100, 1000);
    OutputEventStream out;
    out.events.resize(54);
    CHECK(bandwidth(in, out) == Catch::Approx(0.54).epsilon(1e-12));
    out.events.clear();
    CHECK(bandwidth(in, out) == 0.0);
    out.events.resize(100);
    CHECK(bandwidth(in, out) == 1.0);
    EventStream empty;
    CHECK_THROWS_AS(bandwidth(empty, out), std::invalid_argument);
}

TEST_CASE("layer validation rejects inconsistent configs") {
    const FitModel m = linear_fit_model(0.05);
    LayerConfig cfg = random_layer(1, 2, 0.5, 0.5);
    EventStream s = random_stream(2, 16, 16, 10, 100);
    SECTION("wrong weight count") {
        cfg.weights.pop_back();
        CHECK_THROWS_AS(conv_forward_analog(s, cfg, m, NoiseCfg{}), std::invalid_argument);
    }
    SECTION("sensor smaller than kernel") {
        EventStream tiny;
        tiny.width = tiny.height = 2;
        CHECK_THROWS_AS(conv_forward_analog(tiny, cfg, m, NoiseCfg{}), std::invalid_argument);
    }
    SECTION("threshold count mismatch") {
        cfg.thresholds.pop_back();
        CHECK_THROWS_AS(conv_forward_analog(s, cfg, m, NoiseCfg{}), std::invalid_argument);
    }
}
