#pragma once

#include "pnc/pnc.hpp"

#include <Eigen/Cholesky>

#include <optional>

namespace pnc {

// Residual of one corrected member at a test point, with the perturbation
// magnitudes and conditioning of the correction system it came from.
struct ResidualReport {
    Vector residual;     // r_S(x; v), length q
    double magnitude;    // rho = ||r||_2
    double calib_shift;  // Delta_S(v) = ||Ybar_{v,S} - Ybar_S||_F
    double test_shift;   // delta_x(v) = ||ybar_v(x) - ybar(x)||_2
    double conditioning; // sigma_min(G_v)
};

ResidualReport post_correction_residual(const PncEnsemble& ensemble, Index member_index,
                                        const Eigen::Ref<const Vector>& x,
                                        std::size_t target_index = 0);

// h_S^lambda(x) = ybar^T (Ybar^T Ybar + lambda I)^{-1} ybar.
double ridge_leverage(const Eigen::Ref<const Vector>& ybar,
                      const Eigen::Ref<const Matrix>& calibration_design, double ridge);

// w_S^lambda(x) = Ybar (Ybar^T Ybar + lambda I)^{-1} ybar.
Vector hat_weights(const Eigen::Ref<const Vector>& ybar,
                   const Eigen::Ref<const Matrix>& calibration_design, double ridge);

// A_S(x) = Theta (J_x - sum_i w_i J_{x_i}).
Matrix corrected_sensitivity(const Eigen::Ref<const Matrix>& theta,
                             const Eigen::Ref<const Matrix>& test_jacobian,
                             const Eigen::Ref<const Vector>& hat_weights,
                             const std::vector<Matrix>& calibration_jacobians);

// Hat-weighted combination of calibration representation Jacobians,
// accumulated without materializing the per-point Jacobians.
Matrix predicted_jacobian(const MlpModel& model, Index layer_index,
                          const Eigen::Ref<const Matrix>& basis,
                          const Eigen::Ref<const Matrix>& calibration_inputs,
                          const Eigen::Ref<const Vector>& hat_weights);

// Leverage, hat weights, Jacobians and corrected sensitivity at one test
// point, all against the same calibration subset and shared basis.
struct SensitivityReport {
    double leverage;
    Vector hat_weights;
    Matrix predicted_jacobian;  // T_S^lambda(x), (d+1) x K
    Matrix test_jacobian;       // J_x, (d+1) x K
    Matrix sensitivity;         // A_S(x), q x K
};

SensitivityReport sensitivity_report(const MlpModel& model, Index layer_index,
                                     const Eigen::Ref<const Matrix>& basis,
                                     const Eigen::Ref<const Matrix>& calibration_inputs,
                                     double ridge, const Eigen::Ref<const Vector>& x);

// Caches everything per-(model, layer, basis, calibration, ridge) so that
// per-point reports cost one forward pass and one triangular solve.
class SensitivityContext {
public:
    SensitivityContext(const MlpModel& model, Index layer_index,
                       const Eigen::Ref<const Matrix>& basis,
                       const Eigen::Ref<const Matrix>& calibration_inputs, double ridge);

    SensitivityReport at(const Eigen::Ref<const Vector>& x) const;
    const Matrix& calibration_design() const { return design_; }

private:
    const MlpModel& model_;
    Index layer_;
    Matrix basis_;
    double ridge_;
    Matrix calib_h_prev_;     // B x d_in
    Matrix calib_phi_prime_;  // B x d_out
    Matrix design_;           // B x (d+1)
    Matrix theta_;            // q x (d+1)
    Eigen::LLT<Matrix> gram_llt_;
};

struct SketchReport {
    double estimate;               // V_hat_n
    Index n;
    double exact;                  // sigma^2 ||A||_F^2
    double eff_rank;               // r_eff(A)
    double predicted_rel_variance; // 2 / (n r_eff)
};

// V_hat_n = (1/n) sum ||A v_m||^2 with v_m ~ N(0, sigma^2 I).
SketchReport sketch_variance(const Eigen::Ref<const Matrix>& a, double sigma, Index n,
                             std::uint64_t seed);

// Participation ratio ||A||_F^4 / ||A^T A||_F^2 of a general linear map.
double effective_rank_map(const Eigen::Ref<const Matrix>& a);

// tr(C)^2 / ||C||_F^2 for a PSD matrix; agrees with the map form when C = A A^T.
double effective_rank_psd(const Eigen::Ref<const Matrix>& c);

struct MixtureRankReport {
    std::vector<double> traces;
    std::vector<double> norms;
    double avg_alignment;        // alpha_bar in [-1, 1]
    Matrix mixture;              // C_bar
    double measured_eff_rank;    // r_eff(C_bar)
    double formula_prediction;   // tau^2/nu^2 * M / (1 + (M-1) alpha_bar)
    bool equal_trace_norm;       // whether the exactness conditions hold
};

MixtureRankReport mixture_rank(const std::vector<Matrix>& covariances);

// Empirical mean and epsilon-regularized covariance of calibration
// activations, factored once for repeated distance queries.
struct MahalanobisModel {
    Vector mean;
    Eigen::LDLT<Matrix> factor;
    double epsilon;
};

MahalanobisModel fit_mahalanobis(const Eigen::Ref<const Matrix>& calibration_activations,
                                 std::optional<double> epsilon = std::nullopt);
double mahalanobis_distance(const MahalanobisModel& model,
                            const Eigen::Ref<const Vector>& activation);

// One-shot form; epsilon defaults to 1e-6 * trace / d.
double mahalanobis_hidden(const Eigen::Ref<const Vector>& activation,
                          const Eigen::Ref<const Matrix>& calibration_activations,
                          std::optional<double> epsilon = std::nullopt);

struct FloorCheckReport {
    double lhs;            // mean squared residual under the truncated law
    double rhs;            // (sigma_tr^2 / 2) ||A||_F^2 - C4_hat
    double sigma_tr_sq;
    double c4_hat;
    double sensitivity_frob_sq;
    double acceptance_rate;
    bool holds;
};

// Local residual floor: draws truncated Gaussians ||v|| <= r_trunc through the
// full assemble+solve+residual pipeline and checks E rho^2 against the
// first-order lower bound.
FloorCheckReport local_residual_floor_check(const MlpModel& model, Index layer_index,
                                            const Eigen::Ref<const Matrix>& basis,
                                            const Eigen::Ref<const Matrix>& calibration_inputs,
                                            double ridge, const Eigen::Ref<const Vector>& x,
                                            double sigma, double r_trunc, Index n_samples,
                                            std::uint64_t seed);

}  // namespace pnc
