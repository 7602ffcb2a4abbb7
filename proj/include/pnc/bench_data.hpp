#pragma once

#include "pnc/common.hpp"

#include <string>

namespace pnc {

// Damped nonlinear pendulum, one integration step per transition. Inputs are
// [angle, angular velocity, action]; targets are next-state deltas. Shift
// levels widen the action distribution around a fixed stabilizing policy.
struct BenchConfig {
    Index train_size = 4000;
    Index val_size = 1000;
    Index eval_size = 1000;  // per evaluation split
    double dt = 0.05;
    double gravity = 10.0;
    double damping = 0.3;
    double action_max = 2.0;
    double policy_kp = 1.2;
    double policy_kd = 0.4;
    double id_action_noise = 0.1;
    double near_factor = 2.0;
    double mid_factor = 4.0;
    double state_angle_std = 0.5;
    double state_velocity_std = 0.8;
};

struct SplitData {
    Matrix inputs;   // n x 3
    Matrix targets;  // n x 2
};

struct ShiftedDataset {
    SplitData train, val, id_eval, near, mid, far;
    BenchConfig config;
    std::uint64_t seed = 0;

    const SplitData& split(const std::string& name) const;
};

ShiftedDataset generate_benchmark(const BenchConfig& config, std::uint64_t seed);

// One dynamics step (exposed for the equilibrium and determinism checks).
Vector pendulum_step_delta(const BenchConfig& config, double angle, double velocity,
                           double action);

void save_dataset(const ShiftedDataset& dataset, const std::string& path);
ShiftedDataset load_dataset(const std::string& path);

}  // namespace pnc
