#include "pnc/bench_data.hpp"

#include "pnc/diagnostics.hpp"
#include "pnc/model_io.hpp"

#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>

using namespace pnc;

namespace {

BenchConfig tiny_config() {
    BenchConfig cfg;
    cfg.train_size = 300;
    cfg.val_size = 80;
    cfg.eval_size = 120;
    return cfg;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

}  // namespace

TEST_CASE("equilibrium state maps to a zero delta") {
    const BenchConfig cfg;
    const Vector delta = pendulum_step_delta(cfg, 0.0, 0.0, 0.0);
    CHECK(delta.norm() == 0.0);
}

TEST_CASE("generation is deterministic per seed") {
    const BenchConfig cfg = tiny_config();
    const ShiftedDataset a = generate_benchmark(cfg, 42);
    const ShiftedDataset b = generate_benchmark(cfg, 42);
    CHECK((a.train.inputs - b.train.inputs).norm() == 0.0);
    CHECK((a.far.targets - b.far.targets).norm() == 0.0);
    const ShiftedDataset c = generate_benchmark(cfg, 43);
    CHECK((a.train.inputs - c.train.inputs).norm() != 0.0);
}

TEST_CASE("action magnitudes grow across shift levels") {
    const BenchConfig cfg = tiny_config();
    const ShiftedDataset ds = generate_benchmark(cfg, 7);
    const double id_mean = ds.id_eval.inputs.col(2).cwiseAbs().mean();
    const double far_mean = ds.far.inputs.col(2).cwiseAbs().mean();
    CHECK(far_mean > id_mean);
    // Deviation from the stabilizing policy widens with the shift factor.
    auto policy_residual_std = [&cfg](const SplitData& s) {
        double acc = 0.0;
        for (Index i = 0; i < s.inputs.rows(); ++i) {
            const double policy =
                -cfg.policy_kp * s.inputs(i, 0) - cfg.policy_kd * s.inputs(i, 1);
            const double r = s.inputs(i, 2) - policy;
            acc += r * r;
        }
        return std::sqrt(acc / static_cast<double>(s.inputs.rows()));
    };
    CHECK(policy_residual_std(ds.near) > policy_residual_std(ds.id_eval));
    CHECK(policy_residual_std(ds.mid) > policy_residual_std(ds.near));
    CHECK(policy_residual_std(ds.far) > policy_residual_std(ds.mid));
}

TEST_CASE("dataset round trips bit exactly") {
    const ShiftedDataset ds = generate_benchmark(tiny_config(), 11);
    const std::string path = "/tmp/pnc_test_bench.bin";
    save_dataset(ds, path);
    const ShiftedDataset back = load_dataset(path);
    CHECK(std::memcmp(back.train.inputs.data(), ds.train.inputs.data(),
                      sizeof(double) * static_cast<std::size_t>(ds.train.inputs.size())) == 0);
    CHECK(std::memcmp(back.far.targets.data(), ds.far.targets.data(),
                      sizeof(double) * static_cast<std::size_t>(ds.far.targets.size())) == 0);
    CHECK(back.seed == ds.seed);
    CHECK(back.config.dt == ds.config.dt);
}

TEST_CASE("empty splits round trip") {
    ShiftedDataset ds;
    ds.seed = 1;
    for (SplitData* s : {&ds.train, &ds.val, &ds.id_eval, &ds.near, &ds.mid, &ds.far}) {
        s->inputs = Matrix(0, 3);
        s->targets = Matrix(0, 2);
    }
    const std::string path = "/tmp/pnc_test_bench_empty.bin";
    save_dataset(ds, path);
    const ShiftedDataset back = load_dataset(path);
    CHECK(back.train.inputs.rows() == 0);
    CHECK(back.far.targets.rows() == 0);
}

TEST_CASE("truncated dataset file is rejected") {
    const ShiftedDataset ds = generate_benchmark(tiny_config(), 13);
    const std::string path = "/tmp/pnc_test_bench_trunc.bin";
    save_dataset(ds, path);
    const std::string full = read_file(path);
    write_file(path, full.substr(0, full.size() - 64));
    CHECK_THROWS_AS(load_dataset(path), CorruptFile);
    write_file(path, full + "xx");
    CHECK_THROWS_AS(load_dataset(path), CorruptFile);
}

TEST_CASE("unsupported dataset version is rejected") {
    const ShiftedDataset ds = generate_benchmark(tiny_config(), 17);
    const std::string path = "/tmp/pnc_test_bench_ver.bin";
    save_dataset(ds, path);
    std::string text = read_file(path);
    text.replace(text.find("PNCBENCH 1"), 10, "PNCBENCH 9");
    write_file(path, text);
    CHECK_THROWS_AS(load_dataset(path), VersionMismatch);
    text.replace(text.find("PNCBENCH 9"), 10, "NOTBENCH 1");
    write_file(path, text);
    CHECK_THROWS_AS(load_dataset(path), CorruptFile);
}

TEST_CASE("invalid generator config is rejected") {
    BenchConfig cfg = tiny_config();
    cfg.train_size = 0;
    CHECK_THROWS_AS(generate_benchmark(cfg, 0), InvalidConfig);
    cfg = tiny_config();
    cfg.dt = -0.1;
    CHECK_THROWS_AS(generate_benchmark(cfg, 0), InvalidConfig);
}

TEST_CASE("hidden-space mahalanobis distance is ordered by shift level") {
    // Geometric precondition for the disagreement-vs-distance diagnostics: a
    // trained model's hidden activations move away from the calibration cloud
    // as the action distribution widens.
    BenchConfig cfg;
    cfg.train_size = 1500;
    cfg.val_size = 200;
    cfg.eval_size = 300;
    const ShiftedDataset ds = generate_benchmark(cfg, 23);
    TrainConfig tc;
    tc.hidden_widths = {48, 48};
    tc.steps = 1200;
    const MlpModel model = train_mlp(ds.train.inputs, ds.train.targets, tc, 3);

    const Index layer = 1;
    const BatchTrace calib = forward_batch_trace(model, ds.train.inputs);
    const Matrix& calib_hidden = calib.per_layer_post[static_cast<std::size_t>(layer)];

    auto median_distance = [&](const SplitData& split) {
        const BatchTrace t = forward_batch_trace(model, split.inputs);
        const Matrix& hidden = t.per_layer_post[static_cast<std::size_t>(layer)];
        std::vector<double> d;
        for (Index i = 0; i < hidden.rows(); ++i)
            d.push_back(mahalanobis_hidden(hidden.row(i).transpose(), calib_hidden));
        return median(d);
    };

    const double m_id = median_distance(ds.id_eval);
    const double m_near = median_distance(ds.near);
    const double m_mid = median_distance(ds.mid);
    const double m_far = median_distance(ds.far);
    INFO("medians: ", m_id, " ", m_near, " ", m_mid, " ", m_far);
    CHECK(m_id < m_near);
    CHECK(m_near < m_mid);
    CHECK(m_mid < m_far);
}
