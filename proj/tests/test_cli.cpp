#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "cli_app.hpp"

namespace fs = std::filesystem;
using dwpix::cli::dispatch;

namespace {

int run(std::initializer_list<std::string> args) {
    std::vector<std::string> full = {"dwpix"};
    full.insert(full.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& a : full) argv.push_back(a.c_str());
    return dispatch(static_cast<int>(argv.size()), argv.data());
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("dwpix_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f << text;
}

} // namespace

TEST_CASE("cli: help exits 0, unknown subcommand exits 1") {
    CHECK(run({"--help"}) == 0);
    CHECK(run({"--version"}) == 0);
    CHECK(run({"frobnicate"}) == 1);
    CHECK(run({}) == 1);
}

TEST_CASE("cli: device-sweep writes curve CSVs and a manifest") {
    const fs::path dir = fresh_dir("sweep");
    CHECK(run({"device-sweep", "--out-dir", dir.string()}) == 0);
    const std::string res = slurp(dir / "resistance.csv");
    CHECK(res.rfind("q_norm,v_bias,resistance_ohm\n", 0) == 0);
    const std::string vel = slurp(dir / "velocity.csv");
    CHECK(vel.rfind("i_write_ua,velocity_mps\n", 0) == 0);
    const std::string man = slurp(dir / "manifest.txt");
    CHECK(man.find("manifest.command = device-sweep") != std::string::npos);
    CHECK(man.find("manifest.tool_version = dwpix") != std::string::npos);
}

TEST_CASE("cli: mc-run is seed-gated and byte-deterministic") {
    const fs::path dir = fresh_dir("mc");
    const std::string out1 = (dir / "a.csv").string();
    const std::string out2 = (dir / "b.csv").string();
    CHECK(run({"mc-run", "--trials", "50", "--out", out1}) == 1); // missing --seed
    CHECK(run({"mc-run", "--trials", "50", "--seed", "7", "--out", out1}) == 0);
    CHECK(run({"mc-run", "--trials", "50", "--seed", "7", "--out", out2}) == 0);
    CHECK(slurp(out1) == slurp(out2));
    std::istringstream rows(slurp(out1));
    std::string line;
    int n = 0;
    while (std::getline(rows, line))
        if (!line.empty()) ++n;
    CHECK(n == 51); // header + one row per trial
}

TEST_CASE("cli: fit produces a loadable model and plot data, reruns identical") {
    const fs::path dir = fresh_dir("fit");
    const std::string m1 = (dir / "m1.fit").string();
    const std::string m2 = (dir / "m2.fit").string();
    CHECK(run({"fit", "--weight-config", "hybrid", "--trials", "120", "--seed", "3", "--out",
               m1, "--plots-dir", (dir / "plots").string()}) == 0);
    CHECK(run({"fit", "--weight-config", "hybrid", "--trials", "120", "--seed", "3", "--out",
               m2}) == 0);
    CHECK(slurp(m1) == slurp(m2));
    const dwpix::FitModel model = dwpix::FitModel::load(m1);
    CHECK(model.config_tag == "hybrid");
    CHECK(fs::exists(dir / "plots/f1_scatter.csv"));
    CHECK(fs::exists(dir / "plots/f2_curve.csv"));
    // stochastic command without --seed is an error
    CHECK(run({"fit", "--weight-config", "cmos", "--out", m1}) == 1);
}

TEST_CASE("cli: channel-replay consumes an event list and a channel config") {
    const fs::path dir = fresh_dir("replay");
    spit(dir / "events.csv", "t_us,cell\n0,0\n100,1\n200,0\n300,0\n");
    spit(dir / "channel.cfg",
         "channel.config = hybrid\n"
         "channel.signs = 1,-1\n"
         "channel.widths = 0.7,0.7\n"
         "channel.d_weights = 0.2,0.8\n"
         "channel.d_t1 = 0.45\n"
         "channel.d_t2 = 0.55\n");
    CHECK(run({"channel-replay", "--events", (dir / "events.csv").string(), "--channel",
               (dir / "channel.cfg").string(), "--out-dir", (dir / "out").string()}) == 0);
    const std::string traj = slurp(dir / "out/trajectory.csv");
    CHECK(traj.rfind("event,t_us,cell,i_write_ua,q_pos,q_neg\n", 0) == 0);
    std::istringstream rows(traj);
    std::string line;
    int n = -1;
    while (std::getline(rows, line))
        if (!line.empty()) ++n;
    CHECK(n == 4);
    CHECK(slurp(dir / "out/summary.csv").rfind("v_pre_v,v_th_v,spike\n", 0) == 0);

    // built-in reprogramming scenario
    CHECK(run({"channel-replay", "--scenario", "fig5", "--out-dir",
               (dir / "fig5").string()}) == 0);
    const std::string sum = slurp(dir / "fig5/summary.csv");
    CHECK(sum.find("1,") != std::string::npos);
    CHECK(sum.find(",0\n") != std::string::npos); // application 1: no spike
    CHECK(sum.find(",1\n") != std::string::npos); // application 2: spike
}

TEST_CASE("cli: infer runs the analog first layer over a csv stream") {
    const fs::path dir = fresh_dir("infer");
    const std::string model = (dir / "m.fit").string();
    REQUIRE(run({"fit", "--weight-config", "hybrid", "--trials", "120", "--seed", "5", "--out",
                 model}) == 0);

    // small synthetic stream
    std::string events = "# sensor 16 16\nt_us,x,y,polarity\n";
    for (int k = 0; k < 400; ++k)
        events += std::to_string(k * 10) + "," + std::to_string((k * 3) % 16) + "," +
                  std::to_string((k * 5) % 16) + "," + std::to_string(k % 2) + "\n";
    spit(dir / "in.csv", events);
    spit(dir / "layer.cfg", "layer.channels = 4\nlayer.threshold = 0.45\nlayer.weights_seed = 9\n");

    const std::string out = (dir / "out.csv").string();
    CHECK(run({"infer", "--config", (dir / "layer.cfg").string(), "--fit", model, "--input",
               (dir / "in.csv").string(), "--noise", "off", "--out", out}) == 0);
    CHECK(slurp(out).find("t_us,x,y,channel") != std::string::npos);
    const dwpix::KvConfig met = dwpix::KvConfig::load(out + ".metrics");
    CHECK(met.get_u64("run.in_spikes") == 400);
    CHECK(met.get_double("run.bandwidth") >= 0.0);

    // missing fit model names the path; noise on demands a seed
    CHECK(run({"infer", "--fit", (dir / "missing.fit").string(), "--input",
               (dir / "in.csv").string(), "--out", out}) == 1);
    CHECK(run({"infer", "--fit", model, "--input", (dir / "in.csv").string(), "--noise", "on",
               "--out", out}) == 1);

    // byte-identical rerun with noise on + seed
    const std::string o1 = (dir / "n1.csv").string(), o2 = (dir / "n2.csv").string();
    CHECK(run({"infer", "--config", (dir / "layer.cfg").string(), "--fit", model, "--input",
               (dir / "in.csv").string(), "--noise", "on", "--seed", "11", "--out", o1}) == 0);
    CHECK(run({"infer", "--config", (dir / "layer.cfg").string(), "--fit", model, "--input",
               (dir / "in.csv").string(), "--noise", "on", "--seed", "11", "--out", o2}) == 0);
    CHECK(slurp(o1) == slurp(o2));
}

TEST_CASE("cli: report aggregates metrics with optional energy model") {
    const fs::path dir = fresh_dir("report");
    spit(dir / "b.metrics",
         "run.name = beta\nrun.in_spikes = 100\nrun.out_spikes = 54\nrun.bandwidth = 0.54\n");
    spit(dir / "a.metrics",
         "run.name = alpha\nrun.in_spikes = 200\nrun.out_spikes = 124\nrun.bandwidth = 0.62\n"
         "run.accuracy = 0.97\n");
    spit(dir / "energy.cfg",
         "energy.e_ac_pj = 0.1\nenergy.e_mac_pj = 4\nenergy.e_mem_pj = 2\nenergy.e_tx_pj = 1\n"
         "profile.layer1_fanout = 9\nprofile.layer1_mem_accesses = 100\n"
         "profile.bits_per_input_event = 12\nprofile.bits_per_output_event = 8\n"
         "profile.later_accum_ops = 5000\nprofile.later_mem_accesses = 400\n");
    const std::string out = (dir / "summary.csv").string();
    CHECK(run({"report", (dir / "b.metrics").string(), (dir / "a.metrics").string(),
               "--energy-config", (dir / "energy.cfg").string(), "--out", out}) == 0);
    const auto rows = dwpix::parse_report_csv(slurp(out));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].name == "alpha"); // sorted by name
    CHECK(rows[1].name == "beta");
    REQUIRE(rows[0].energy.has_value());
    CHECK(rows[0].energy->savings > 0.0);
    REQUIRE(rows[0].accuracy.has_value());
}

TEST_CASE("cli: tiny end-to-end train/retrain/noise-sweep round trip") {
    const fs::path dir = fresh_dir("train");
    const std::string model = (dir / "m.fit").string();
    REQUIRE(run({"fit", "--weight-config", "hybrid", "--trials", "150", "--seed", "2", "--out",
                 model}) == 0);
    spit(dir / "train.cfg",
         "train.epochs = 1\ntrain.n_train = 40\ntrain.n_test = 20\ntrain.channels = 4\n"
         "train.hidden = 16\ntrain.batch_size = 8\n");

    CHECK(run({"train", "--config", (dir / "train.cfg").string(), "--fit", model, "--task",
               "bars", "--seed", "1", "--out-dir", (dir / "run1").string()}) == 0);
    CHECK(fs::exists(dir / "run1/model.ckpt"));
    CHECK(fs::exists(dir / "run1/model.ckpt.bin"));
    CHECK(slurp(dir / "run1/epochs.csv").rfind("epoch,loss,train_acc,test_acc,l1_spike_rate\n",
                                               0) == 0);

    // byte-identical rerun
    CHECK(run({"train", "--config", (dir / "train.cfg").string(), "--fit", model, "--task",
               "bars", "--seed", "1", "--out-dir", (dir / "run2").string()}) == 0);
    CHECK(slurp(dir / "run1/model.ckpt.bin") == slurp(dir / "run2/model.ckpt.bin"));
    CHECK(slurp(dir / "run1/epochs.csv") == slurp(dir / "run2/epochs.csv"));

    CHECK(run({"retrain", "--config", (dir / "train.cfg").string(), "--fit", model,
               "--checkpoint", (dir / "run1/model.ckpt").string(), "--task", "quadrants",
               "--mode", "none", "--seed", "4", "--out-dir", (dir / "re").string()}) == 0);
    CHECK(slurp(dir / "re/result.csv").rfind("mode,accuracy\nnone,", 0) == 0);

    CHECK(run({"noise-sweep", "--config", (dir / "train.cfg").string(), "--fit", model,
               "--checkpoint", (dir / "run1/model.ckpt").string(), "--task", "bars",
               "--scales", "0,0.2", "--seed", "4", "--out",
               (dir / "ns.csv").string()}) == 0);
    CHECK(slurp(dir / "ns.csv").rfind("noise_scale,accuracy\n", 0) == 0);
}
