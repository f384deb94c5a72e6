#pragma once

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dwpix/codesign.hpp"
#include "dwpix/common.hpp"
#include "dwpix/device.hpp"
#include "dwpix/events.hpp"
#include "dwpix/fitting.hpp"
#include "dwpix/kvconfig.hpp"
#include "dwpix/manifest.hpp"
#include "dwpix/metrics.hpp"
#include "dwpix/montecarlo.hpp"
#include "dwpix/pixel.hpp"
#include "dwpix/scenarios.hpp"
#include "dwpix/toytask.hpp"
#include "dwpix/version.hpp"

namespace dwpix::cli {

namespace fs = std::filesystem;

inline void write_file(const std::string& path, const std::string& content) {
    if (const fs::path parent = fs::path(path).parent_path(); !parent.empty())
        fs::create_directories(parent);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require_user(f.good(), "cannot write file: " + path);
    f << content;
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require_user(f.good(), "cannot open file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require_user(f.good(), "cannot open file: " + path);
    std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    return out;
}

inline KvConfig load_config_or_default(const std::string& path) {
    if (path.empty()) return KvConfig{};
    return KvConfig::load(path);
}

inline VariationSpec variation_from_config(const KvConfig& cfg, std::uint64_t trials,
                                           std::uint64_t seed) {
    VariationSpec spec;
    spec.sigma_tx = cfg.get_double_or("mc.sigma_tx", spec.sigma_tx);
    spec.sigma_r = cfg.get_double_or("mc.sigma_r", spec.sigma_r);
    spec.sigma_jitter = cfg.get_double_or("mc.sigma_jitter", spec.sigma_jitter);
    spec.trials = trials;
    spec.master_seed = seed;
    spec.validate();
    return spec;
}

inline double dt_pulse_from_config(const KvConfig& cfg) {
    const double dt = cfg.get_double_or("pixel.dt_pulse_s", kDefaultDtPulseS);
    require_user(dt > 0.0, "pixel.dt_pulse_s must be > 0");
    return dt;
}

inline std::string csv_d(double v) { return KvConfig::fmt_double(v); }

// ---- device-sweep ----------------------------------------------------------

inline void run_device_sweep(const std::string& config_path, const std::string& out_dir) {
    WallClock clock;
    const KvConfig cfg = load_config_or_default(config_path);
    const DeviceParams p = DeviceParams::from_config(cfg);
    fs::create_directories(out_dir);

    std::string res_csv = "q_norm,v_bias,resistance_ohm\n";
    const int nq = 201;
    const std::vector<double> biases = {0.0, 0.25 * p.v_read_v, 0.5 * p.v_read_v,
                                        0.75 * p.v_read_v, p.v_read_v};
    for (double v : biases)
        for (int k = 0; k < nq; ++k) {
            const double q = static_cast<double>(k) / (nq - 1);
            res_csv += csv_d(q) + "," + csv_d(v) + "," + csv_d(resistance(q, v, p)) + "\n";
        }
    write_file(out_dir + "/resistance.csv", res_csv);

    std::string vel_csv = "i_write_ua,velocity_mps\n";
    const int ni = 211;
    for (int k = 0; k < ni; ++k) {
        const double i = 1.05 * p.i_max_ua * static_cast<double>(k) / (ni - 1);
        vel_csv += csv_d(i) + "," + csv_d(dw_velocity(i, p)) + "\n";
    }
    write_file(out_dir + "/velocity.csv", vel_csv);

    RunManifest m;
    m.command = "device-sweep";
    m.config_path = config_path;
    m.outputs = {out_dir + "/resistance.csv", out_dir + "/velocity.csv"};
    m.wall_ms = clock.elapsed_ms();
    m.write(out_dir + "/manifest.txt");
}

// ---- mc-run ----------------------------------------------------------------

inline void run_mc(const std::string& config_path, std::uint64_t trials, std::uint64_t seed,
                   std::uint64_t scenario_seed, const std::string& out_path) {
    WallClock clock;
    const KvConfig cfg = load_config_or_default(config_path);
    const DeviceParams p = DeviceParams::from_config(cfg);
    const VariationSpec spec = variation_from_config(cfg, trials, seed);
    KernelScenario sc = make_kernel_mc_scenario(p, scenario_seed);
    sc.dt_pulse_s = dt_pulse_from_config(cfg);

    auto rows = run_trials(spec, [&](std::uint64_t t) {
        const VariationSample s = sample(spec, t);
        const ChannelTrialResult r = run_kernel_scenario(sc, s, p);
        return std::make_pair(s, r);
    });

    std::string csv =
        "trial,m_tx,m_r_weight,m_r_acc_pos,m_r_acc_neg,m_r_thr1,m_r_thr2,m_jitter,"
        "v_pre_v,v_th_v,spike,margin_v\n";
    for (std::uint64_t t = 0; t < rows.size(); ++t) {
        const auto& [s, r] = rows[t];
        csv += std::to_string(t) + "," + csv_d(s.m_tx) + "," + csv_d(s.m_r_weight) + "," +
               csv_d(s.m_r_acc_pos) + "," + csv_d(s.m_r_acc_neg) + "," + csv_d(s.m_r_thr1) +
               "," + csv_d(s.m_r_thr2) + "," + csv_d(s.m_jitter) + "," + csv_d(r.v_pre) + "," +
               csv_d(r.v_th) + "," + std::to_string(r.spike) + "," + csv_d(r.margin) + "\n";
    }
    write_file(out_path, csv);

    RunManifest m;
    m.command = "mc-run";
    m.config_path = config_path;
    m.seed = seed;
    m.outputs = {out_path};
    m.wall_ms = clock.elapsed_ms();
    m.write(out_path + ".manifest");
}

// ---- fit -------------------------------------------------------------------

inline void run_fit(const std::string& config_path, const std::string& weight_config,
                    std::uint64_t trials, std::uint64_t seed, int degree, double quantile,
                    const std::string& out_model, const std::string& plots_dir) {
    WallClock clock;
    const KvConfig cfg = load_config_or_default(config_path);
    const DeviceParams p = DeviceParams::from_config(cfg);
    const VariationSpec spec = variation_from_config(cfg, trials, seed);
    const double dt = dt_pulse_from_config(cfg);
    const WeightConfig wc = weight_config_from_string(weight_config);

    const FitModel model = build_fit_model(wc, spec, p, dt, degree, quantile);
    if (const fs::path parent = fs::path(out_model).parent_path(); !parent.empty())
        fs::create_directories(parent);
    model.save(out_model);

    std::vector<std::string> outputs = {out_model};
    if (!plots_dir.empty()) {
        fs::create_directories(plots_dir);
        const auto f1_tab = sweep_f1(wc, default_f1_grid(wc, p), spec, p, dt);
        const auto f2_tab = sweep_f2(default_f2_grid(), spec, p);
        auto scatter_csv = [](const ScatterTable& tab, const char* xname, const char* vname) {
            std::string out = std::string(xname) + ",trial," + vname + "\n";
            for (const auto& r : tab.rows)
                out += csv_d(r.x) + "," + std::to_string(r.trial) + "," + csv_d(r.value) + "\n";
            return out;
        };
        auto curve_csv = [&](const ScatterTable& tab, const Polynomial& fitp,
                             const Polynomial* lower, const char* xname) {
            auto groups = detail::group_by_x(tab);
            std::string out = std::string(xname) + ",mean,std,fit";
            if (lower) out += ",lower";
            out += "\n";
            for (const auto& [x, vals] : groups) {
                out += csv_d(x) + "," + csv_d(detail::mean_of(vals)) + "," +
                       csv_d(detail::stddev_of(vals)) + "," + csv_d(fitp.eval(x));
                if (lower) out += "," + csv_d(lower->eval(x));
                out += "\n";
            }
            return out;
        };
        write_file(plots_dir + "/f1_scatter.csv", scatter_csv(f1_tab, "x", "delta_d"));
        write_file(plots_dir + "/f1_curve.csv", curve_csv(f1_tab, model.f1, nullptr, "x"));
        write_file(plots_dir + "/f2_scatter.csv", scatter_csv(f2_tab, "d_diff", "v_norm"));
        write_file(plots_dir + "/f2_curve.csv",
                   curve_csv(f2_tab, model.f2, &model.f2_lower, "d_diff"));
        outputs.insert(outputs.end(),
                       {plots_dir + "/f1_scatter.csv", plots_dir + "/f1_curve.csv",
                        plots_dir + "/f2_scatter.csv", plots_dir + "/f2_curve.csv"});
    }

    RunManifest m;
    m.command = "fit";
    m.config_path = config_path;
    m.seed = seed;
    m.outputs = outputs;
    m.wall_ms = clock.elapsed_ms();
    m.write(out_model + ".manifest");
}

// ---- channel-replay --------------------------------------------------------

inline std::vector<ChannelEvent> parse_channel_events_csv(const std::string& text) {
    std::vector<ChannelEvent> events;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    std::int64_t prev = std::numeric_limits<std::int64_t>::min();
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#' || line == "t_us,cell") continue;
        long long t;
        unsigned cell;
        require_user(std::sscanf(line.c_str(), "%lld,%u", &t, &cell) == 2,
                     "channel events line " + std::to_string(lineno) + ": cannot parse '" +
                         line + "'");
        require_user(t >= prev, "channel events line " + std::to_string(lineno) +
                                    ": timestamps must be non-decreasing");
        prev = t;
        events.push_back({t, cell});
    }
    return events;
}

inline ChannelState channel_from_config(const KvConfig& cfg, const DeviceParams& p) {
    ChannelState ch;
    const WeightConfig wc = weight_config_from_string(cfg.get_string_or("channel.config", "hybrid"));
    const auto signs = cfg.get_doubles("channel.signs");
    std::vector<double> widths(signs.size(), 1.0), dws(signs.size(), 0.0);
    if (cfg.has("channel.widths")) widths = cfg.get_doubles("channel.widths");
    if (cfg.has("channel.d_weights")) dws = cfg.get_doubles("channel.d_weights");
    require_user(widths.size() == signs.size() && dws.size() == signs.size(),
                 "channel config: signs/widths/d_weights must have equal lengths");
    for (std::size_t k = 0; k < signs.size(); ++k) {
        WeightCell cell;
        cell.sign = signs[k] >= 0 ? +1 : -1;
        cell.config = wc;
        cell.width_norm = widths[k];
        cell.d_weight = dws[k];
        cell.validate();
        (void)nominal_current_ua(cell, p); // fabrication guard check
        ch.weights.push_back(cell);
    }
    ch.thr.d_t1 = cfg.get_double_or("channel.d_t1", 0.5);
    ch.thr.d_t2 = cfg.get_double_or("channel.d_t2", 0.5);
    ch.validate();
    return ch;
}

inline void run_channel_replay(const std::string& config_path, const std::string& events_path,
                               const std::string& channel_path, const std::string& scenario,
                               std::optional<std::uint64_t> seed, std::uint64_t trial,
                               const std::string& out_dir) {
    WallClock clock;
    const KvConfig cfg = load_config_or_default(config_path);
    const DeviceParams p = DeviceParams::from_config(cfg);
    const double dt = dt_pulse_from_config(cfg);
    fs::create_directories(out_dir);

    VariationSample s = VariationSample::unit();
    if (seed) {
        const VariationSpec spec = variation_from_config(cfg, trial + 1, *seed);
        s = sample(spec, trial);
    }

    if (scenario == "fig5") {
        const ReprogramDemoResult r = run_reprogram_demo(p, dt);
        std::string csv = "application,v_pre_v,v_th_v,spike\n";
        csv += "1," + csv_d(r.v_pre1) + "," + csv_d(r.v_th1) + "," + std::to_string(r.spike_app1) + "\n";
        csv += "2," + csv_d(r.v_pre2) + "," + csv_d(r.v_th2) + "," + std::to_string(r.spike_app2) + "\n";
        write_file(out_dir + "/summary.csv", csv);
        RunManifest m;
        m.command = "channel-replay";
        m.config_path = config_path;
        m.outputs = {out_dir + "/summary.csv"};
        m.wall_ms = clock.elapsed_ms();
        m.write(out_dir + "/manifest.txt");
        return;
    }

    require_user(!events_path.empty() && !channel_path.empty(),
                 "channel-replay needs --events and --channel (or --scenario fig5)");
    ChannelState ch = channel_from_config(KvConfig::load(channel_path), p);
    const auto events = parse_channel_events_csv(read_file(events_path));

    std::string traj = "event,t_us,cell,i_write_ua,q_pos,q_neg\n";
    for (std::size_t e = 0; e < events.size(); ++e) {
        require_user(events[e].cell < ch.weights.size(),
                     "channel events: cell index out of range at event " + std::to_string(e));
        const double i = write_current_ua(ch.weights[events[e].cell], s, p);
        ch = apply_event(ch, events[e].cell, dt, s, p);
        traj += std::to_string(e) + "," + std::to_string(events[e].t_us) + "," +
                std::to_string(events[e].cell) + "," + csv_d(i) + "," + csv_d(ch.acc_pos.q_norm) +
                "," + csv_d(ch.acc_neg.q_norm) + "\n";
    }
    const FireResult fr = fire_and_reset(ch, s, p);
    write_file(out_dir + "/trajectory.csv", traj);
    write_file(out_dir + "/summary.csv", "v_pre_v,v_th_v,spike\n" + csv_d(fr.v_pre) + "," +
                                             csv_d(fr.v_th) + "," + std::to_string(fr.spike) +
                                             "\n");

    RunManifest m;
    m.command = "channel-replay";
    m.config_path = config_path;
    m.seed = seed;
    m.inputs = {events_path, channel_path};
    m.outputs = {out_dir + "/trajectory.csv", out_dir + "/summary.csv"};
    m.wall_ms = clock.elapsed_ms();
    m.write(out_dir + "/manifest.txt");
}

// ---- infer -----------------------------------------------------------------

inline LayerConfig layer_from_config(const KvConfig& cfg, std::uint64_t default_seed) {
    LayerConfig lc;
    lc.channels = static_cast<int>(cfg.get_int_or("layer.channels", 32));
    lc.integration_us = cfg.get_int_or("layer.integration_us", 1000);
    lc.polarity = polarity_mode_from_string(cfg.get_string_or("layer.polarity", "two_channel"));
    if (cfg.has("layer.thresholds")) {
        lc.thresholds = cfg.get_doubles("layer.thresholds");
    } else {
        lc.thresholds.assign(lc.channels, cfg.get_double_or("layer.threshold", 0.55));
    }
    if (cfg.has("layer.weights")) {
        lc.weights = cfg.get_doubles("layer.weights");
    } else {
        const std::uint64_t wseed = cfg.has("layer.weights_seed")
                                        ? cfg.get_u64("layer.weights_seed")
                                        : default_seed;
        const double scale = cfg.get_double_or("layer.weights_scale", 1.0);
        lc.weights.resize(lc.weight_count());
        for (std::size_t i = 0; i < lc.weights.size(); ++i)
            lc.weights[i] = scale * (2.0 * rng::keyed_uniform(wseed, i, 0, 13) - 1.0);
    }
    return lc;
}

inline void run_infer(const std::string& config_path, const std::string& fit_path,
                      const std::string& input_path, const std::string& noise,
                      std::optional<std::uint64_t> seed, const std::string& out_path) {
    WallClock clock;
    const KvConfig cfg = load_config_or_default(config_path);
    require_user(fs::exists(fit_path), "fit model file not found: " + fit_path);
    const FitModel fit = FitModel::load(fit_path);

    EventStream stream;
    if (input_path.size() >= 4 && input_path.substr(input_path.size() - 4) == ".bin")
        stream = parse_nmnist(read_bytes(input_path));
    else
        stream = parse_csv(read_file(input_path));

    NoiseCfg nc;
    require_user(noise == "on" || noise == "off", "--noise must be on|off");
    nc.on = noise == "on";
    if (nc.on) {
        require_user(seed.has_value(), "--noise on requires --seed (no wall-clock seeding)");
        nc.seed = *seed;
        nc.scale = cfg.get_double_or("layer.noise_scale", 1.0);
    }
    const LayerConfig lc = layer_from_config(cfg, seed ? *seed : 0);
    const ConvResult res = conv_forward_analog(stream, lc, fit, nc);

    write_file(out_path, emit_output_csv(res.out));
    KvConfig met;
    met.set("run.name", fs::path(out_path).stem().string());
    met.set_u64("run.in_spikes", res.in_events);
    met.set_u64("run.out_spikes", res.out_events);
    met.set_double("run.bandwidth", bandwidth(stream, res.out));
    met.save(out_path + ".metrics");

    RunManifest m;
    m.command = "infer";
    m.config_path = config_path;
    m.seed = seed;
    m.inputs = {fit_path, input_path};
    m.outputs = {out_path, out_path + ".metrics"};
    m.wall_ms = clock.elapsed_ms();
    m.write(out_path + ".manifest");
}

// ---- train / retrain / noise-sweep -----------------------------------------

inline TrainConfig train_config_from(const KvConfig& cfg, std::uint64_t seed) {
    TrainConfig tc;
    tc.epochs = static_cast<int>(cfg.get_int_or("train.epochs", tc.epochs));
    tc.learning_rate = cfg.get_double_or("train.learning_rate", tc.learning_rate);
    tc.momentum = cfg.get_double_or("train.momentum", tc.momentum);
    tc.surrogate_width = cfg.get_double_or("train.surrogate_width", tc.surrogate_width);
    tc.noise_scale = cfg.get_double_or("train.noise_scale", tc.noise_scale);
    tc.lambda_bw = cfg.get_double_or("train.lambda_bw", tc.lambda_bw);
    tc.tunability_rho = cfg.get_double_or("train.tunability_rho", tc.tunability_rho);
    tc.batch_size = static_cast<int>(cfg.get_int_or("train.batch_size", tc.batch_size));
    tc.channels = static_cast<int>(cfg.get_int_or("train.channels", tc.channels));
    tc.hidden = static_cast<int>(cfg.get_int_or("train.hidden", tc.hidden));
    tc.integration_us = cfg.get_int_or("train.integration_us", tc.integration_us);
    tc.lif_decay = cfg.get_double_or("train.lif_decay", tc.lif_decay);
    tc.polarity =
        polarity_mode_from_string(cfg.get_string_or("train.polarity", "two_channel"));
    tc.seed = seed;
    tc.validate();
    return tc;
}

struct TaskData {
    std::vector<ToySample> train_set, test_set;
    int classes = 4;
    int in_w = 16, in_h = 16;
};

inline TaskData load_nmnist_dir(const std::string& dir, int n_train, int n_test) {
    require_user(fs::is_directory(dir), "nmnist directory not found: " + dir);
    TaskData td;
    td.classes = 10;
    td.in_w = td.in_h = 34;
    require_user(n_train % 10 == 0 && n_test % 10 == 0,
                 "nmnist subset sizes must be multiples of 10");
    for (int label = 0; label < 10; ++label) {
        const fs::path ldir = fs::path(dir) / std::to_string(label);
        require_user(fs::is_directory(ldir), "missing label directory: " + ldir.string());
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(ldir))
            if (e.path().extension() == ".bin") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        const int need = n_train / 10 + n_test / 10;
        require_user(static_cast<int>(files.size()) >= need,
                     "label " + std::to_string(label) + ": need " + std::to_string(need) +
                         " .bin files, found " + std::to_string(files.size()));
        for (int k = 0; k < need; ++k) {
            ToySample s;
            s.label = label;
            s.stream = parse_nmnist(read_bytes(files[k].string()));
            (k < n_train / 10 ? td.train_set : td.test_set).push_back(std::move(s));
        }
    }
    return td;
}

inline TaskData make_task(const std::string& task, const KvConfig& cfg, std::uint64_t seed,
                          const std::string& nmnist_dir) {
    TaskData td;
    const int n_train = static_cast<int>(cfg.get_int_or("train.n_train", 2000));
    const int n_test = static_cast<int>(cfg.get_int_or("train.n_test", 400));
    if (task == "nmnist") return load_nmnist_dir(nmnist_dir, n_train, n_test);
    ToyTaskSpec spec;
    if (task == "bars")
        spec.task = 0;
    else if (task == "quadrants")
        spec.task = 1;
    else
        throw UserError("unknown task '" + task + "' (expected bars|quadrants|nmnist)");
    spec.n_classes = 4;
    spec.seed = rng::keyed_u64(seed, 0xA, 0, 0);
    spec.n_samples = n_train;
    td.train_set = make_toy_task(spec);
    spec.seed = rng::keyed_u64(seed, 0xB, 0, 0);
    spec.n_samples = n_test;
    td.test_set = make_toy_task(spec);
    td.classes = spec.n_classes;
    td.in_w = spec.width;
    td.in_h = spec.height;
    return td;
}

inline std::string epochs_csv(const std::vector<EpochStats>& hist) {
    std::string csv = "epoch,loss,train_acc,test_acc,l1_spike_rate\n";
    for (const auto& st : hist)
        csv += std::to_string(st.epoch) + "," + csv_d(st.loss) + "," + csv_d(st.train_acc) +
               "," + csv_d(st.test_acc) + "," + csv_d(st.l1_spike_rate) + "\n";
    return csv;
}

inline void run_train(const std::string& config_path, const std::string& fit_path,
                      const std::string& task, std::uint64_t seed,
                      const std::string& nmnist_dir, const std::string& out_dir) {
    WallClock clock;
    const KvConfig cfg = load_config_or_default(config_path);
    require_user(fs::exists(fit_path), "fit model file not found: " + fit_path);
    const FitModel fit = FitModel::load(fit_path);
    const TrainConfig tc = train_config_from(cfg, seed);
    const TaskData td = make_task(task, cfg, seed, nmnist_dir);

    SmallNet net = init_net(tc, fit, td.in_w, td.in_h, td.classes);
    const std::uint64_t noise_seed = rng::keyed_u64(seed, 0xC, 0, 0);
    const auto train_c = compile_dataset(td.train_set, net, noise_seed);
    const auto test_c = compile_dataset(td.test_set, net, rng::keyed_u64(seed, 0xD, 0, 0));
    const auto hist = train(net, train_c, test_c, fit, tc);

    fs::create_directories(out_dir);
    save_checkpoint(net, out_dir + "/model.ckpt");
    write_file(out_dir + "/epochs.csv", epochs_csv(hist));

    RunManifest m;
    m.command = "train";
    m.config_path = config_path;
    m.seed = seed;
    m.inputs = {fit_path};
    m.outputs = {out_dir + "/model.ckpt", out_dir + "/model.ckpt.bin", out_dir + "/epochs.csv"};
    m.wall_ms = clock.elapsed_ms();
    m.write(out_dir + "/manifest.txt");
}

inline void run_retrain(const std::string& config_path, const std::string& fit_path,
                        const std::string& ckpt_path, const std::string& task,
                        const std::string& mode_str, std::uint64_t seed,
                        const std::string& nmnist_dir, const std::string& out_dir) {
    WallClock clock;
    const KvConfig cfg = load_config_or_default(config_path);
    require_user(fs::exists(fit_path), "fit model file not found: " + fit_path);
    require_user(fs::exists(ckpt_path), "checkpoint not found: " + ckpt_path);
    const FitModel fit = FitModel::load(fit_path);
    const TrainConfig tc = train_config_from(cfg, seed);
    SmallNet net = load_checkpoint(ckpt_path);
    const TaskData td = make_task(task, cfg, seed, nmnist_dir);
    require_user(td.classes == net.classes && td.in_w == net.in_w && td.in_h == net.in_h,
                 "retrain: task geometry does not match the checkpoint");
    const RetrainMode mode = retrain_mode_from_string(mode_str);

    const auto train_c = compile_dataset(td.train_set, net, rng::keyed_u64(seed, 0xC, 0, 0));
    const auto test_c = compile_dataset(td.test_set, net, rng::keyed_u64(seed, 0xD, 0, 0));
    SmallNet retrained = net;
    std::vector<EpochStats> hist;
    double acc;
    if (mode == RetrainMode::none) {
        acc = retrain_flow(net, train_c, test_c, fit, tc, mode);
    } else {
        // re-run the flow on a copy to keep the retrained parameters
        const TrainMode tm = (mode == RetrainMode::freeze_first) ? TrainMode::freeze_first
                                                                 : TrainMode::constrained;
        OptimizerState opt;
        opt.init(retrained);
        for (int e = 0; e < tc.epochs; ++e) {
            const auto order = epoch_order(train_c.size(), tc.seed + 1, e);
            double loss_sum = 0.0;
            std::size_t batches = 0;
            for (std::size_t at = 0; at < order.size(); at += tc.batch_size) {
                std::vector<const CompiledSample*> batch;
                for (std::size_t k = at; k < std::min(order.size(), at + tc.batch_size); ++k)
                    batch.push_back(&train_c[order[k]]);
                loss_sum += backward_step(retrained, batch, fit, tc, opt, tm);
                ++batches;
            }
            EpochStats st;
            st.epoch = e;
            st.loss = loss_sum / static_cast<double>(batches);
            st.test_acc = evaluate(retrained, test_c, fit, tc.noise_scale);
            hist.push_back(st);
        }
        acc = evaluate(retrained, test_c, fit, tc.noise_scale);
    }

    fs::create_directories(out_dir);
    if (mode != RetrainMode::none) {
        save_checkpoint(retrained, out_dir + "/retrained.ckpt");
        write_file(out_dir + "/epochs.csv", epochs_csv(hist));
    }
    write_file(out_dir + "/result.csv",
               "mode,accuracy\n" + mode_str + "," + csv_d(acc) + "\n");

    RunManifest m;
    m.command = "retrain";
    m.config_path = config_path;
    m.seed = seed;
    m.inputs = {fit_path, ckpt_path};
    m.outputs = {out_dir + "/result.csv"};
    m.wall_ms = clock.elapsed_ms();
    m.write(out_dir + "/manifest.txt");
}

inline void run_noise_sweep(const std::string& config_path, const std::string& fit_path,
                            const std::string& ckpt_path, const std::string& task,
                            const std::string& scales_str, std::uint64_t seed,
                            const std::string& nmnist_dir, const std::string& out_path) {
    WallClock clock;
    const KvConfig cfg = load_config_or_default(config_path);
    require_user(fs::exists(fit_path), "fit model file not found: " + fit_path);
    require_user(fs::exists(ckpt_path), "checkpoint not found: " + ckpt_path);
    const FitModel fit = FitModel::load(fit_path);
    SmallNet net = load_checkpoint(ckpt_path);
    const TaskData td = make_task(task, cfg, seed, nmnist_dir);
    require_user(td.classes == net.classes && td.in_w == net.in_w && td.in_h == net.in_h,
                 "noise-sweep: task geometry does not match the checkpoint");
    const auto test_c = compile_dataset(td.test_set, net, rng::keyed_u64(seed, 0xD, 0, 0));

    std::vector<double> scales;
    std::istringstream ss(scales_str);
    std::string item;
    while (std::getline(ss, item, ',')) scales.push_back(std::stod(item));
    require_user(!scales.empty(), "--scales must list at least one noise scale");

    const auto table = noise_sensitivity(net, test_c, fit, scales);
    std::string csv = "noise_scale,accuracy\n";
    for (const auto& [s, a] : table) csv += csv_d(s) + "," + csv_d(a) + "\n";
    write_file(out_path, csv);

    RunManifest m;
    m.command = "noise-sweep";
    m.config_path = config_path;
    m.seed = seed;
    m.inputs = {fit_path, ckpt_path};
    m.outputs = {out_path};
    m.wall_ms = clock.elapsed_ms();
    m.write(out_path + ".manifest");
}

// ---- report ----------------------------------------------------------------

inline void run_report(const std::vector<std::string>& metrics_files,
                       const std::string& energy_config, const std::string& out_path) {
    WallClock clock;
    std::vector<RunMetrics> rows;
    std::optional<KvConfig> ecfg;
    if (!energy_config.empty()) ecfg = KvConfig::load(energy_config);
    for (const auto& path : metrics_files) {
        const KvConfig met = KvConfig::load(path);
        RunMetrics r;
        r.name = met.get_string("run.name");
        r.in_spikes = met.get_u64("run.in_spikes");
        r.out_spikes = met.get_u64("run.out_spikes");
        r.bandwidth = met.get_double("run.bandwidth");
        if (met.has("run.accuracy")) r.accuracy = met.get_double("run.accuracy");
        if (ecfg) {
            const EnergyConstants k = EnergyConstants::from_config(*ecfg);
            EnergyCounts counts;
            counts.input_events = r.in_spikes;
            counts.layer1_fanout = ecfg->get_double_or("profile.layer1_fanout", 9.0);
            counts.layer1_mem_accesses = static_cast<std::uint64_t>(
                ecfg->get_double_or("profile.layer1_mem_accesses", 0.0));
            counts.bits_per_input_event =
                ecfg->get_double_or("profile.bits_per_input_event", 12.0);
            counts.bits_per_output_event =
                ecfg->get_double_or("profile.bits_per_output_event", 8.0);
            if (ecfg->has("profile.later_accum_ops")) {
                const auto ops = ecfg->get_doubles("profile.later_accum_ops");
                const auto mem = ecfg->get_doubles("profile.later_mem_accesses");
                require_user(ops.size() == mem.size(),
                             "energy config: later_accum_ops/later_mem_accesses length mismatch");
                for (std::size_t i = 0; i < ops.size(); ++i)
                    counts.later.push_back({static_cast<std::uint64_t>(ops[i]),
                                            static_cast<std::uint64_t>(mem[i])});
            }
            r.energy = energy(counts, k, r.bandwidth);
        }
        rows.push_back(r);
    }
    write_file(out_path, report_csv(rows));
    std::cout << report_table(rows);

    RunManifest m;
    m.command = "report";
    m.config_path = energy_config;
    m.inputs = metrics_files;
    m.outputs = {out_path};
    m.wall_ms = clock.elapsed_ms();
    m.write(out_path + ".manifest");
}

// ---- dispatch ---------------------------------------------------------------

inline constexpr const char* kSubcommands =
    "device-sweep, mc-run, fit, channel-replay, infer, train, retrain, noise-sweep, report";

inline int dispatch(int argc, const char* const* argv) {
    CLI::App app{std::string(kToolName) +
                 " - behavioral simulator and co-design toolkit for domain-wall-MTJ "
                 "in-pixel neuromorphic vision processing"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolName) + " " + kToolVersion);

    std::string config_path, out_dir = "out", out_path = "out.csv";

    auto* sweep = app.add_subcommand("device-sweep", "Emit resistance and velocity curve CSVs");
    sweep->add_option("--config", config_path, "device config file");
    sweep->add_option("--out-dir", out_dir, "output directory");

    std::uint64_t trials = 1000, seed = 0, scenario_seed = 2024, trial = 0;
    auto* mc = app.add_subcommand("mc-run", "Monte Carlo kernel scenario; one CSV row per trial");
    mc->add_option("--config", config_path, "device/mc config file");
    mc->add_option("--trials", trials, "number of trials");
    mc->add_option("--seed", seed, "master seed")->required();
    mc->add_option("--scenario-seed", scenario_seed, "kernel scenario seed");
    mc->add_option("--out", out_path, "output CSV")->required();

    std::string weight_config = "hybrid", plots_dir, model_path = "model.fit";
    int degree = 3;
    double quantile = 0.01;
    auto* fit = app.add_subcommand("fit", "Extract f1/f2 behavioral fits from Monte Carlo sweeps");
    fit->add_option("--config", config_path, "device/mc config file");
    fit->add_option("--weight-config", weight_config, "cmos|mdw|hybrid");
    fit->add_option("--trials", trials, "trials per grid point");
    fit->add_option("--seed", seed, "master seed")->required();
    fit->add_option("--degree", degree, "fit polynomial degree");
    fit->add_option("--quantile", quantile, "lower-envelope quantile");
    fit->add_option("--out", model_path, "output model file")->required();
    fit->add_option("--plots-dir", plots_dir, "directory for scatter/curve CSVs");

    std::string events_path, channel_path, scenario;
    std::optional<std::uint64_t> opt_seed;
    auto* replay = app.add_subcommand("channel-replay",
                                      "Replay an event list through one channel");
    replay->add_option("--config", config_path, "device config file");
    replay->add_option("--events", events_path, "event CSV (t_us,cell)");
    replay->add_option("--channel", channel_path, "channel config file");
    replay->add_option("--scenario", scenario, "built-in scenario (fig5)");
    replay->add_option("--seed", opt_seed, "variation seed (omit for nominal replay)");
    replay->add_option("--trial", trial, "variation trial index");
    replay->add_option("--out-dir", out_dir, "output directory");

    std::string fit_path, input_path, noise = "off";
    auto* infer = app.add_subcommand("infer", "Analog first-layer inference over an AER stream");
    infer->add_option("--config", config_path, "layer config file");
    infer->add_option("--fit", fit_path, "fit model file")->required();
    infer->add_option("--input", input_path, "input events (.bin nmnist or .csv)")->required();
    infer->add_option("--noise", noise, "on|off");
    infer->add_option("--seed", opt_seed, "noise seed (required when --noise on)");
    infer->add_option("--out", out_path, "output AER CSV")->required();

    std::string task = "bars", nmnist_dir, ckpt_path, mode = "full",
                scales = "0,0.1,0.2,0.4";
    auto* train_cmd = app.add_subcommand("train", "Train the desk-scale hardware-aware net");
    train_cmd->add_option("--config", config_path, "train config file");
    train_cmd->add_option("--fit", fit_path, "fit model file")->required();
    train_cmd->add_option("--task", task, "bars|quadrants|nmnist");
    train_cmd->add_option("--nmnist-dir", nmnist_dir, "NMNIST data directory");
    train_cmd->add_option("--seed", seed, "master seed")->required();
    train_cmd->add_option("--out-dir", out_dir, "output directory");

    auto* retrain_cmd = app.add_subcommand("retrain", "Evaluate/retrain a checkpoint on a task");
    retrain_cmd->add_option("--config", config_path, "train config file");
    retrain_cmd->add_option("--fit", fit_path, "fit model file")->required();
    retrain_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    retrain_cmd->add_option("--task", task, "bars|quadrants|nmnist");
    retrain_cmd->add_option("--mode", mode, "none|freeze_first|full");
    retrain_cmd->add_option("--nmnist-dir", nmnist_dir, "NMNIST data directory");
    retrain_cmd->add_option("--seed", seed, "master seed")->required();
    retrain_cmd->add_option("--out-dir", out_dir, "output directory");

    auto* sweep_cmd = app.add_subcommand("noise-sweep", "Accuracy of a checkpoint under noise scales");
    sweep_cmd->add_option("--config", config_path, "train config file");
    sweep_cmd->add_option("--fit", fit_path, "fit model file")->required();
    sweep_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    sweep_cmd->add_option("--task", task, "bars|quadrants|nmnist");
    sweep_cmd->add_option("--scales", scales, "comma list of noise scales");
    sweep_cmd->add_option("--nmnist-dir", nmnist_dir, "NMNIST data directory");
    sweep_cmd->add_option("--seed", seed, "master seed")->required();
    sweep_cmd->add_option("--out", out_path, "output CSV")->required();

    std::vector<std::string> metrics_files;
    std::string energy_config;
    auto* report_cmd = app.add_subcommand("report", "Aggregate run metrics into one summary");
    report_cmd->add_option("metrics", metrics_files, "metrics files from infer runs")
        ->required();
    report_cmd->add_option("--energy-config", energy_config, "energy constants/profile config");
    report_cmd->add_option("--out", out_path, "output summary CSV")->required();

    try {
        app.parse(argc, const_cast<char**>(argv));
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        if (code == 0) return 0; // --help / --version
        std::cerr << "available subcommands: " << kSubcommands << "\n";
        return 1;
    }

    try {
        if (app.got_subcommand(sweep)) run_device_sweep(config_path, out_dir);
        else if (app.got_subcommand(mc)) run_mc(config_path, trials, seed, scenario_seed, out_path);
        else if (app.got_subcommand(fit))
            run_fit(config_path, weight_config, trials, seed, degree, quantile, model_path,
                    plots_dir);
        else if (app.got_subcommand(replay))
            run_channel_replay(config_path, events_path, channel_path, scenario, opt_seed, trial,
                               out_dir);
        else if (app.got_subcommand(infer))
            run_infer(config_path, fit_path, input_path, noise, opt_seed, out_path);
        else if (app.got_subcommand(train_cmd))
            run_train(config_path, fit_path, task, seed, nmnist_dir, out_dir);
        else if (app.got_subcommand(retrain_cmd))
            run_retrain(config_path, fit_path, ckpt_path, task, mode, seed, nmnist_dir, out_dir);
        else if (app.got_subcommand(sweep_cmd))
            run_noise_sweep(config_path, fit_path, ckpt_path, task, scales, seed, nmnist_dir,
                            out_path);
        else if (app.got_subcommand(report_cmd))
            run_report(metrics_files, energy_config, out_path);
    } catch (const UserError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

} // namespace dwpix::cli
