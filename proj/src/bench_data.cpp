#include "pnc/bench_data.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pnc {

const SplitData& ShiftedDataset::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "id_eval") return id_eval;
    if (name == "near") return near;
    if (name == "mid") return mid;
    if (name == "far") return far;
    throw InvalidConfig("unknown split: " + name);
}

namespace {

Vector dynamics(const BenchConfig& c, double angle, double velocity, double action) {
    Vector d(2);
    d[0] = velocity;
    d[1] = -c.gravity * std::sin(angle) - c.damping * velocity + action;
    return d;
}

}  // namespace

Vector pendulum_step_delta(const BenchConfig& c, double angle, double velocity, double action) {
    // Classic RK4 on the 2-D state with the action held constant over the step.
    const Vector k1 = dynamics(c, angle, velocity, action);
    const Vector k2 = dynamics(c, angle + 0.5 * c.dt * k1[0], velocity + 0.5 * c.dt * k1[1], action);
    const Vector k3 = dynamics(c, angle + 0.5 * c.dt * k2[0], velocity + 0.5 * c.dt * k2[1], action);
    const Vector k4 = dynamics(c, angle + c.dt * k3[0], velocity + c.dt * k3[1], action);
    return (c.dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

namespace {

enum class ActionMode { policy, uniform };

SplitData make_split(const BenchConfig& c, Index n, double action_noise, ActionMode mode,
                     std::uint64_t stream_seed) {
    if (n < 1) throw InvalidConfig("generate_benchmark: split sizes must be >= 1");
    Rng rng(stream_seed);
    SplitData split;
    split.inputs.resize(n, 3);
    split.targets.resize(n, 2);
    for (Index i = 0; i < n; ++i) {
        const double angle = c.state_angle_std * rng.gaussian();
        const double velocity = c.state_velocity_std * rng.gaussian();
        double action;
        if (mode == ActionMode::uniform) {
            action = rng.uniform(-c.action_max, c.action_max);
        } else {
            action = -c.policy_kp * angle - c.policy_kd * velocity +
                     action_noise * rng.gaussian();
            action = std::clamp(action, -c.action_max, c.action_max);
        }
        split.inputs(i, 0) = angle;
        split.inputs(i, 1) = velocity;
        split.inputs(i, 2) = action;
        split.targets.row(i) = pendulum_step_delta(c, angle, velocity, action).transpose();
    }
    if (!split.inputs.allFinite() || !split.targets.allFinite())
        throw NonFiniteValue("generate_benchmark: non-finite transition");
    return split;
}

}  // namespace

ShiftedDataset generate_benchmark(const BenchConfig& config, std::uint64_t seed) {
    if (!(config.dt > 0.0) || !(config.action_max > 0.0) ||
        !(config.near_factor >= 1.0) || !(config.mid_factor >= config.near_factor))
        throw InvalidConfig("generate_benchmark: invalid generator parameters");

    ShiftedDataset ds;
    ds.config = config;
    ds.seed = seed;
    const double noise = config.id_action_noise;
    ds.train = make_split(config, config.train_size, noise, ActionMode::policy,
                          mix_seed(seed, 501));
    ds.val = make_split(config, config.val_size, noise, ActionMode::policy, mix_seed(seed, 502));
    ds.id_eval =
        make_split(config, config.eval_size, noise, ActionMode::policy, mix_seed(seed, 503));
    ds.near = make_split(config, config.eval_size, noise * config.near_factor,
                         ActionMode::policy, mix_seed(seed, 504));
    ds.mid = make_split(config, config.eval_size, noise * config.mid_factor, ActionMode::policy,
                        mix_seed(seed, 505));
    ds.far = make_split(config, config.eval_size, 0.0, ActionMode::uniform, mix_seed(seed, 506));
    return ds;
}

namespace {

constexpr char kMagic[] = "PNCBENCH";
constexpr int kVersion = 1;

void append_matrix(std::string& out, const Matrix& m) {
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) {
            std::uint64_t bits;
            const double v = m(r, c);
            std::memcpy(&bits, &v, 8);
            for (int b = 0; b < 8; ++b)
                out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
        }
    }
}

Matrix read_matrix(const std::string& data, std::size_t& pos, Index rows, Index cols) {
    const std::size_t need = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * 8;
    if (pos + need > data.size()) throw CorruptFile("dataset file truncated");
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos++]))
                        << (8 * b);
            double v;
            std::memcpy(&v, &bits, 8);
            m(r, c) = v;
        }
    }
    return m;
}

nlohmann::json config_json(const BenchConfig& c) {
    return nlohmann::json{{"train_size", c.train_size},
                          {"val_size", c.val_size},
                          {"eval_size", c.eval_size},
                          {"dt", c.dt},
                          {"gravity", c.gravity},
                          {"damping", c.damping},
                          {"action_max", c.action_max},
                          {"policy_kp", c.policy_kp},
                          {"policy_kd", c.policy_kd},
                          {"id_action_noise", c.id_action_noise},
                          {"near_factor", c.near_factor},
                          {"mid_factor", c.mid_factor},
                          {"state_angle_std", c.state_angle_std},
                          {"state_velocity_std", c.state_velocity_std}};
}

BenchConfig config_from(const nlohmann::json& j) {
    BenchConfig c;
    c.train_size = j.at("train_size").get<Index>();
    c.val_size = j.at("val_size").get<Index>();
    c.eval_size = j.at("eval_size").get<Index>();
    c.dt = j.at("dt").get<double>();
    c.gravity = j.at("gravity").get<double>();
    c.damping = j.at("damping").get<double>();
    c.action_max = j.at("action_max").get<double>();
    c.policy_kp = j.at("policy_kp").get<double>();
    c.policy_kd = j.at("policy_kd").get<double>();
    c.id_action_noise = j.at("id_action_noise").get<double>();
    c.near_factor = j.at("near_factor").get<double>();
    c.mid_factor = j.at("mid_factor").get<double>();
    c.state_angle_std = j.at("state_angle_std").get<double>();
    c.state_velocity_std = j.at("state_velocity_std").get<double>();
    return c;
}

const SplitData* split_ptr(const ShiftedDataset& ds, int i) {
    switch (i) {
        case 0: return &ds.train;
        case 1: return &ds.val;
        case 2: return &ds.id_eval;
        case 3: return &ds.near;
        case 4: return &ds.mid;
        case 5: return &ds.far;
    }
    return nullptr;
}

SplitData* split_ptr(ShiftedDataset& ds, int i) {
    return const_cast<SplitData*>(split_ptr(static_cast<const ShiftedDataset&>(ds), i));
}

}  // namespace

void save_dataset(const ShiftedDataset& dataset, const std::string& path) {
    nlohmann::json header;
    header["input_dim"] = 3;
    header["target_dim"] = 2;
    header["seed"] = dataset.seed;
    header["generator"] = config_json(dataset.config);
    nlohmann::json sizes = nlohmann::json::array();
    for (int i = 0; i < 6; ++i) sizes.push_back(split_ptr(dataset, i)->inputs.rows());
    header["split_sizes"] = std::move(sizes);

    std::string out;
    out += kMagic;
    out += ' ';
    out += std::to_string(kVersion);
    out += '\n';
    out += header.dump();
    out += '\n';
    for (int i = 0; i < 6; ++i) {
        const SplitData* s = split_ptr(dataset, i);
        append_matrix(out, s->inputs);
        append_matrix(out, s->targets);
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write dataset: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("dataset write failed: " + path);
}

ShiftedDataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CorruptFile("cannot open dataset: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string data = ss.str();

    const std::size_t first_nl = data.find('\n');
    if (first_nl == std::string::npos) throw CorruptFile("dataset: missing header line");
    const std::string magic_line = data.substr(0, first_nl);
    if (magic_line.rfind(kMagic, 0) != 0) throw CorruptFile("dataset: bad magic");
    const std::string version_str = magic_line.substr(std::strlen(kMagic));
    if (version_str != " " + std::to_string(kVersion))
        throw VersionMismatch("dataset: unsupported version" + version_str);

    const std::size_t second_nl = data.find('\n', first_nl + 1);
    if (second_nl == std::string::npos) throw CorruptFile("dataset: missing header json");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(data.substr(first_nl + 1, second_nl - first_nl - 1));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(std::string("dataset header: ") + e.what());
    }

    ShiftedDataset ds;
    ds.seed = header.at("seed").get<std::uint64_t>();
    ds.config = config_from(header.at("generator"));
    const auto sizes = header.at("split_sizes").get<std::vector<Index>>();
    if (sizes.size() != 6) throw CorruptFile("dataset: expected 6 split sizes");
    const Index in_dim = header.at("input_dim").get<Index>();
    const Index out_dim = header.at("target_dim").get<Index>();

    std::size_t pos = second_nl + 1;
    for (int i = 0; i < 6; ++i) {
        SplitData* s = split_ptr(ds, i);
        s->inputs = read_matrix(data, pos, sizes[static_cast<std::size_t>(i)], in_dim);
        s->targets = read_matrix(data, pos, sizes[static_cast<std::size_t>(i)], out_dim);
    }
    if (pos != data.size()) throw CorruptFile("dataset: trailing bytes");
    return ds;
}

}  // namespace pnc
