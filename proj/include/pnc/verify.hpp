#pragma once

#include "pnc/pnc.hpp"

#include <string>
#include <vector>

namespace pnc {

struct OracleConfig {
    Index max_iters = 500000;
    double step_size = 1e-3;        // initial backtracking step
    double convergence_tol = 1e-8;  // on the gradient norm, relative to start
    double fd_step = 1e-5;
    Index mc_repetitions = 500;
    std::uint64_t seed = 0;
};

// Gradient descent with backtracking line search on
// || X_v B - T ||_F^2 + lambda || B - B0 ||_F^2, started at B0. Knows nothing
// about the closed form it is used to check.
Matrix ridge_descent_oracle(const Eigen::Ref<const Matrix>& design,
                            const Eigen::Ref<const Matrix>& targets,
                            const Eigen::Ref<const Matrix>& b0, double ridge,
                            const OracleConfig& config);

// Oracle for the repair objective of solve_correction: minimizes
// || X_v Theta'^T - X Theta^T ||_F^2 + lambda || Theta' - Theta ||_F^2.
Matrix lsq_oracle(const Eigen::Ref<const Matrix>& design,
                  const Eigen::Ref<const Matrix>& reference_design,
                  const Eigen::Ref<const Matrix>& base_theta, double ridge,
                  const OracleConfig& config);

// Objective value of the repair problem at a candidate Theta'.
double correction_objective(const Eigen::Ref<const Matrix>& design,
                            const Eigen::Ref<const Matrix>& reference_design,
                            const Eigen::Ref<const Matrix>& base_theta,
                            const Eigen::Ref<const Matrix>& candidate, double ridge);

// Central differences of the post-correction residual through the full
// assemble + solve + evaluate pipeline, column per basis direction.
Matrix sensitivity_fd_oracle(const MlpModel& model, Index layer_index,
                             const Eigen::Ref<const Matrix>& basis,
                             const Eigen::Ref<const Matrix>& calibration_inputs, double ridge,
                             const Eigen::Ref<const Vector>& x, double fd_step);

struct McMoments {
    double mean;
    double variance;
    double se_mean;  // standard error of the mean estimate
};

// Empirical mean/variance of the sketch estimator V_hat_n across repetitions.
McMoments mc_moment_oracle(const Eigen::Ref<const Matrix>& a, double sigma, Index n,
                           Index repetitions, std::uint64_t seed);

struct WitnessRow {
    bool is_ood;
    double rho;            // post-correction residual magnitude
    double leverage_term;  // sqrt(h) * Delta_S
    double test_shift;     // delta_x
};

struct WitnessReport {
    double c1, c2, c3;          // fitted nonnegative bound coefficients
    double id_exceed_fraction;  // rho above fitted bound among ID rows
    double ood_exceed_fraction;
    double spearman_id;         // Spearman(rho, sqrt(h) Delta_S) over ID rows
    std::vector<WitnessRow> rows;
};

// Fits rho <= c1 sqrt(h) Delta + c2 delta_x + c3 sqrt(h) Delta^2 on ID points
// and reports how the fitted bound transfers; a witness for the existence of
// covering constants, not an assertion of particular values.
WitnessReport id_bound_witness(const PncEnsemble& ensemble,
                               const Eigen::Ref<const Matrix>& calibration_inputs,
                               const Eigen::Ref<const Matrix>& id_points,
                               const Eigen::Ref<const Matrix>& ood_points);

struct CheckResult {
    std::string name;
    bool pass;
    std::string detail;
};

std::vector<CheckResult> run_lsq_suite(std::uint64_t seed);
std::vector<CheckResult> run_sensitivity_suite(std::uint64_t seed);
std::vector<CheckResult> run_sketch_suite(std::uint64_t seed);
std::vector<CheckResult> run_mixture_suite(std::uint64_t seed);
std::vector<CheckResult> run_conv_suite(std::uint64_t seed);
std::vector<CheckResult> run_verify_suite(const std::string& name, std::uint64_t seed);

}  // namespace pnc
