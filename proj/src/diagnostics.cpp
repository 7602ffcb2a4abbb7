#include "pnc/diagnostics.hpp"

#include "pnc/numerics.hpp"

#include <Eigen/Cholesky>

#include <cmath>

namespace pnc {

namespace {

Vector augmented_of(const ActivationTrace& trace, Index layer) {
    return augmented_rep(trace, layer).values;
}

Matrix design_gram(const Eigen::Ref<const Matrix>& design) {
    return design.transpose() * design;
}

}  // namespace

ResidualReport post_correction_residual(const PncEnsemble& ensemble, Index member_index,
                                        const Eigen::Ref<const Vector>& x,
                                        std::size_t target_index) {
    const PncMember& mem = ensemble.member(member_index);
    const MemberRepair& repair = mem.repairs.at(target_index);
    const Index l = repair.perturbed_layer;

    // Rebuild the member's view of the network up to (but excluding) this
    // repair, then apply its own perturbation at l.
    MlpModel current = ensemble.base();
    for (std::size_t j = 0; j < target_index; ++j) {
        const MemberRepair& earlier = mem.repairs[j];
        const Index lj = earlier.perturbed_layer;
        current = current.with_layer(
            lj, ensemble.base().layer(lj).weight + ensemble.member_delta_w(member_index, j));
        const Matrix& th = earlier.corrected_theta;
        current = current.with_layer(lj + 1, th.rightCols(th.cols() - 1), Vector(th.col(0)));
    }
    const Matrix delta = ensemble.member_delta_w(member_index, target_index);
    const ActivationTrace pert = perturbed_forward(current, l, delta, x);
    const ActivationTrace base = forward_trace(ensemble.base(), x);

    const Vector ybar_v = augmented_of(pert, l);
    const Vector ybar = augmented_of(base, l);
    const auto& next = ensemble.base().layer(l + 1);
    Matrix theta(next.weight.rows(), next.weight.cols() + 1);
    theta.col(0) = next.bias;
    theta.rightCols(next.weight.cols()) = next.weight;

    ResidualReport report;
    report.residual = repair.corrected_theta * ybar_v - theta * ybar;
    report.magnitude = report.residual.norm();
    report.calib_shift = repair.calib_shift;
    report.test_shift = (ybar_v - ybar).norm();
    report.conditioning = repair.min_sigma_gv;
    return report;
}

double ridge_leverage(const Eigen::Ref<const Vector>& ybar,
                      const Eigen::Ref<const Matrix>& calibration_design, double ridge) {
    if (ybar.size() != calibration_design.cols())
        throw ShapeMismatch("ridge_leverage: representation width != design width");
    const SpdSystem spd(design_gram(calibration_design), ridge);
    const Matrix solved = spd_solve(spd, ybar);
    return ybar.dot(solved.col(0));
}

Vector hat_weights(const Eigen::Ref<const Vector>& ybar,
                   const Eigen::Ref<const Matrix>& calibration_design, double ridge) {
    if (ybar.size() != calibration_design.cols())
        throw ShapeMismatch("hat_weights: representation width != design width");
    const SpdSystem spd(design_gram(calibration_design), ridge);
    const Matrix solved = spd_solve(spd, ybar);
    return calibration_design * solved.col(0);
}

Matrix corrected_sensitivity(const Eigen::Ref<const Matrix>& theta,
                             const Eigen::Ref<const Matrix>& test_jacobian,
                             const Eigen::Ref<const Vector>& weights,
                             const std::vector<Matrix>& calibration_jacobians) {
    if (static_cast<std::size_t>(weights.size()) != calibration_jacobians.size())
        throw ShapeMismatch("corrected_sensitivity: weights/jacobians count mismatch");
    if (theta.cols() != test_jacobian.rows())
        throw ShapeMismatch("corrected_sensitivity: theta width != jacobian height");
    Matrix discrepancy = test_jacobian;
    for (std::size_t i = 0; i < calibration_jacobians.size(); ++i) {
        const Matrix& ji = calibration_jacobians[i];
        if (ji.rows() != test_jacobian.rows() || ji.cols() != test_jacobian.cols())
            throw ShapeMismatch("corrected_sensitivity: calibration jacobian shape mismatch");
        discrepancy.noalias() -= weights[static_cast<Index>(i)] * ji;
    }
    return theta * discrepancy;
}

Matrix predicted_jacobian(const MlpModel& model, Index layer_index,
                          const Eigen::Ref<const Matrix>& basis,
                          const Eigen::Ref<const Matrix>& calibration_inputs,
                          const Eigen::Ref<const Vector>& weights) {
    if (!model.is_hidden_layer(layer_index))
        throw InvalidLayer("predicted_jacobian: not a hidden layer");
    if (weights.size() != calibration_inputs.rows())
        throw ShapeMismatch("predicted_jacobian: weights length != calibration size");
    const auto& w = model.layer(layer_index).weight;
    if (basis.rows() != w.size())
        throw ShapeMismatch("predicted_jacobian: basis flat dim != parameter count");

    const BatchTrace trace = forward_batch_trace(model, calibration_inputs);
    const Matrix& h_prev = (layer_index == 0)
                               ? trace.input
                               : trace.per_layer_post[static_cast<std::size_t>(layer_index - 1)];
    const Matrix& pre = trace.per_layer_pre[static_cast<std::size_t>(layer_index)];

    Matrix phi_prime;
    switch (model.activation()) {
        case Activation::relu: phi_prime = (pre.array() > 0.0).cast<double>(); break;
        case Activation::tanh_act: phi_prime = (1.0 - pre.array().tanh().square()); break;
        case Activation::identity: phi_prime = Matrix::Ones(pre.rows(), pre.cols()); break;
    }

    // T row r+1 equals P.row(r) * U_block(r) with
    // P = sum_i w_i phi'_i h_prev_i^T, so one B x d_in product per output row
    // replaces B per-point Jacobians.
    const Index d_out = w.rows();
    const Index d_in = w.cols();
    Matrix weighted = phi_prime.array().colwise() * weights.array();  // B x d_out
    Matrix p(d_out, d_in);
    p.noalias() = weighted.transpose() * h_prev;

    Matrix t = Matrix::Zero(d_out + 1, basis.cols());
    for (Index r = 0; r < d_out; ++r)
        t.row(r + 1).noalias() = p.row(r) * basis.middleRows(r * d_in, d_in);
    return t;
}

SensitivityContext::SensitivityContext(const MlpModel& model, Index layer_index,
                                       const Eigen::Ref<const Matrix>& basis,
                                       const Eigen::Ref<const Matrix>& calibration_inputs,
                                       double ridge)
    : model_(model), layer_(layer_index), basis_(basis), ridge_(ridge) {
    if (!model.is_hidden_layer(layer_index))
        throw InvalidLayer("SensitivityContext: not a hidden layer");
    const auto& w = model.layer(layer_index).weight;
    if (basis_.rows() != w.size())
        throw ShapeMismatch("SensitivityContext: basis flat dim != parameter count");
    if (calibration_inputs.rows() == 0)
        throw EmptyCalibration("SensitivityContext: empty calibration");

    const BatchTrace calib = forward_batch_trace(model, calibration_inputs);
    calib_h_prev_ = (layer_index == 0)
                        ? calib.input
                        : calib.per_layer_post[static_cast<std::size_t>(layer_index - 1)];
    const Matrix& pre = calib.per_layer_pre[static_cast<std::size_t>(layer_index)];
    switch (model.activation()) {
        case Activation::relu: calib_phi_prime_ = (pre.array() > 0.0).cast<double>(); break;
        case Activation::tanh_act: calib_phi_prime_ = (1.0 - pre.array().tanh().square()); break;
        case Activation::identity:
            calib_phi_prime_ = Matrix::Ones(pre.rows(), pre.cols());
            break;
    }

    design_.resize(calibration_inputs.rows(), model.hidden_dim(layer_index) + 1);
    design_.col(0).setOnes();
    design_.rightCols(design_.cols() - 1) =
        calib.per_layer_post[static_cast<std::size_t>(layer_index)];

    Matrix gram = design_.transpose() * design_;
    gram = 0.5 * (gram + gram.transpose());
    gram.diagonal().array() += ridge;
    gram_llt_.compute(gram);
    if (gram_llt_.info() != Eigen::Success)
        throw SingularSystem("SensitivityContext: calibration gram not positive definite");

    const auto& next = model.layer(layer_index + 1);
    theta_.resize(next.weight.rows(), next.weight.cols() + 1);
    theta_.col(0) = next.bias;
    theta_.rightCols(next.weight.cols()) = next.weight;
}

SensitivityReport SensitivityContext::at(const Eigen::Ref<const Vector>& x) const {
    const ActivationTrace test = forward_trace(model_, x);
    const Vector ybar = augmented_of(test, layer_);

    SensitivityReport report;
    const Vector ginv_y = gram_llt_.solve(ybar);
    report.leverage = ybar.dot(ginv_y);
    report.hat_weights = design_ * ginv_y;
    report.test_jacobian = rep_jacobian_analytic(model_, layer_, basis_, x).matrix;

    const Index d_out = calib_phi_prime_.cols();
    const Index d_in = calib_h_prev_.cols();
    const Matrix weighted = calib_phi_prime_.array().colwise() * report.hat_weights.array();
    Matrix p(d_out, d_in);
    p.noalias() = weighted.transpose() * calib_h_prev_;
    Matrix t = Matrix::Zero(d_out + 1, basis_.cols());
    for (Index r = 0; r < d_out; ++r)
        t.row(r + 1).noalias() = p.row(r) * basis_.middleRows(r * d_in, d_in);
    report.predicted_jacobian = std::move(t);

    report.sensitivity = theta_ * (report.test_jacobian - report.predicted_jacobian);
    return report;
}

SensitivityReport sensitivity_report(const MlpModel& model, Index layer_index,
                                     const Eigen::Ref<const Matrix>& basis,
                                     const Eigen::Ref<const Matrix>& calibration_inputs,
                                     double ridge, const Eigen::Ref<const Vector>& x) {
    return SensitivityContext(model, layer_index, basis, calibration_inputs, ridge).at(x);
}

SketchReport sketch_variance(const Eigen::Ref<const Matrix>& a, double sigma, Index n,
                             std::uint64_t seed) {
    if (!(sigma > 0.0)) throw InvalidConfig("sketch_variance: sigma must be > 0");
    if (n < 1) throw InvalidConfig("sketch_variance: n must be >= 1");
    Rng rng(mix_seed(seed, 201));
    double total = 0.0;
    for (Index m = 0; m < n; ++m) {
        const Vector v = sigma * rng.gaussian_vector(a.cols());
        total += (a * v).squaredNorm();
    }
    SketchReport report;
    report.estimate = total / static_cast<double>(n);
    report.n = n;
    const double frob_sq = a.squaredNorm();
    report.exact = sigma * sigma * frob_sq;
    report.eff_rank = frob_sq > 0.0 ? effective_rank_map(a) : 0.0;
    report.predicted_rel_variance =
        report.eff_rank > 0.0 ? 2.0 / (static_cast<double>(n) * report.eff_rank) : 0.0;
    return report;
}

double effective_rank_map(const Eigen::Ref<const Matrix>& a) {
    const double frob_sq = a.squaredNorm();
    if (frob_sq == 0.0) throw ZeroMatrix("effective_rank_map: zero matrix");
    const Matrix ata = a.transpose() * a;
    return frob_sq * frob_sq / ata.squaredNorm();
}

double effective_rank_psd(const Eigen::Ref<const Matrix>& c) {
    if (c.rows() != c.cols()) throw ShapeMismatch("effective_rank_psd: matrix not square");
    const double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
    if ((c - c.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
        throw NotPsd("effective_rank_psd: matrix not symmetric");
    const double frob_sq = c.squaredNorm();
    if (frob_sq == 0.0) throw ZeroMatrix("effective_rank_psd: zero matrix");
    const double trace = c.trace();
    if (trace < -1e-12 * scale) throw NotPsd("effective_rank_psd: negative trace");
    return trace * trace / frob_sq;
}

MixtureRankReport mixture_rank(const std::vector<Matrix>& covariances) {
    if (covariances.empty()) throw EmptyInput("mixture_rank: no covariances");
    const Index q = covariances.front().rows();
    const auto m_count = static_cast<Index>(covariances.size());

    MixtureRankReport report;
    report.mixture = Matrix::Zero(q, q);
    for (const Matrix& c : covariances) {
        if (c.rows() != q || c.cols() != q)
            throw ShapeMismatch("mixture_rank: covariance shapes differ");
        const double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
        if ((c - c.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
            throw NotPsd("mixture_rank: covariance not symmetric");
        report.traces.push_back(c.trace());
        report.norms.push_back(c.norm());
        report.mixture += c;
    }
    report.mixture /= static_cast<double>(m_count);

    double alignment_sum = 0.0;
    if (m_count > 1) {
        for (Index i = 0; i < m_count; ++i) {
            for (Index j = 0; j < m_count; ++j) {
                if (i == j) continue;
                const auto fp = frobenius_products(covariances[static_cast<std::size_t>(i)],
                                                   covariances[static_cast<std::size_t>(j)]);
                if (fp.norm_a == 0.0 || fp.norm_b == 0.0)
                    throw ZeroMatrix("mixture_rank: zero covariance member");
                alignment_sum += fp.inner / (fp.norm_a * fp.norm_b);
            }
        }
        report.avg_alignment =
            alignment_sum / static_cast<double>(m_count * (m_count - 1));
    } else {
        report.avg_alignment = 1.0;
    }

    report.measured_eff_rank = effective_rank_psd(report.mixture);

    double tau = 0.0, nu = 0.0;
    for (const double t : report.traces) tau += t;
    for (const double v : report.norms) nu += v;
    tau /= static_cast<double>(m_count);
    nu /= static_cast<double>(m_count);
    report.formula_prediction =
        (tau * tau) / (nu * nu) * static_cast<double>(m_count) /
        (1.0 + (static_cast<double>(m_count) - 1.0) * report.avg_alignment);

    double max_trace_dev = 0.0, max_norm_dev = 0.0;
    for (const double t : report.traces)
        max_trace_dev = std::max(max_trace_dev, std::abs(t - tau));
    for (const double v : report.norms) max_norm_dev = std::max(max_norm_dev, std::abs(v - nu));
    report.equal_trace_norm = max_trace_dev <= 1e-9 * std::max(1.0, std::abs(tau)) &&
                              max_norm_dev <= 1e-9 * std::max(1.0, nu);
    return report;
}

MahalanobisModel fit_mahalanobis(const Eigen::Ref<const Matrix>& calibration_activations,
                                 std::optional<double> epsilon) {
    const Index n = calibration_activations.rows();
    const Index d = calibration_activations.cols();
    if (n < 2) throw EmptyCalibration("fit_mahalanobis: need >= 2 calibration activations");

    MahalanobisModel model;
    model.mean = calibration_activations.colwise().mean().transpose();
    const Matrix centered = calibration_activations.rowwise() - model.mean.transpose();
    Matrix cov = centered.transpose() * centered / static_cast<double>(n - 1);

    model.epsilon = epsilon.value_or(1e-6 * cov.trace() / static_cast<double>(d));
    cov.diagonal().array() += model.epsilon;
    model.factor.compute(cov);
    const double d_max = model.factor.vectorD().maxCoeff();
    const double d_min = model.factor.vectorD().minCoeff();
    if (model.factor.info() != Eigen::Success || !(d_min > d_max * 1e-14) || !(d_max > 0.0))
        throw DegenerateCovariance(model.epsilon == 0.0
                                       ? "fit_mahalanobis: singular covariance with epsilon 0"
                                       : "fit_mahalanobis: covariance numerically singular");
    return model;
}

double mahalanobis_distance(const MahalanobisModel& model,
                            const Eigen::Ref<const Vector>& activation) {
    if (activation.size() != model.mean.size())
        throw ShapeMismatch("mahalanobis_distance: activation dimension mismatch");
    const Vector diff = activation - model.mean;
    const double dist_sq = diff.dot(model.factor.solve(diff));
    if (!(dist_sq >= -1e-12)) throw DegenerateCovariance("mahalanobis_distance: negative form");
    return std::sqrt(std::max(0.0, dist_sq));
}

double mahalanobis_hidden(const Eigen::Ref<const Vector>& activation,
                          const Eigen::Ref<const Matrix>& calibration_activations,
                          std::optional<double> epsilon) {
    if (activation.size() != calibration_activations.cols())
        throw ShapeMismatch("mahalanobis_hidden: activation dimension mismatch");
    return mahalanobis_distance(fit_mahalanobis(calibration_activations, epsilon), activation);
}

FloorCheckReport local_residual_floor_check(const MlpModel& model, Index layer_index,
                                            const Eigen::Ref<const Matrix>& basis,
                                            const Eigen::Ref<const Matrix>& calibration_inputs,
                                            double ridge, const Eigen::Ref<const Vector>& x,
                                            double sigma, double r_trunc, Index n_samples,
                                            std::uint64_t seed) {
    if (!(sigma > 0.0) || !(r_trunc > 0.0))
        throw InvalidConfig("local_residual_floor_check: sigma and r_trunc must be > 0");
    if (n_samples < 2) throw InvalidConfig("local_residual_floor_check: need >= 2 samples");

    const SensitivityReport sens =
        sensitivity_report(model, layer_index, basis, calibration_inputs, ridge, x);
    const Matrix& a = sens.sensitivity;
    const Index k = basis.cols();

    Rng rng(mix_seed(seed, 301));
    Matrix samples(n_samples, k);
    std::vector<Vector> residuals;
    residuals.reserve(static_cast<std::size_t>(n_samples));

    std::uint64_t proposals = 0;
    Index accepted = 0;
    const std::uint64_t max_proposals = static_cast<std::uint64_t>(n_samples) * 2000ULL;
    while (accepted < n_samples) {
        if (proposals > max_proposals)
            throw RejectionStarvation("local_residual_floor_check: acceptance rate < 1e-3");
        ++proposals;
        const Vector v = sigma * rng.gaussian_vector(k);
        if (v.norm() > r_trunc) continue;
        samples.row(accepted) = v.transpose();

        MemberPerturbation pert;
        pert.layer_index = layer_index;
        pert.basis = std::make_shared<const Matrix>(basis);
        pert.coeffs = v;
        pert.scale = 1.0;
        const CorrectionSystem sys = assemble_correction(model, pert, calibration_inputs, ridge);
        const CorrectionResult res = solve_correction(sys);

        const auto& w = model.layer(layer_index).weight;
        const ActivationTrace pt =
            perturbed_forward(model, layer_index, pert.delta_w(w.rows(), w.cols()), x);
        const ActivationTrace bt = forward_trace(model, x);
        const Vector ybar_v = augmented_of(pt, layer_index);
        const Vector ybar = augmented_of(bt, layer_index);
        residuals.push_back(res.corrected_theta * ybar_v - sys.base_theta * ybar);
        ++accepted;
    }

    FloorCheckReport report;
    report.acceptance_rate =
        static_cast<double>(accepted) / static_cast<double>(proposals);

    const Vector col_means = samples.colwise().mean().transpose();
    const Matrix centered = samples.rowwise() - col_means.transpose();
    report.sigma_tr_sq =
        centered.squaredNorm() / static_cast<double>((n_samples - 1) * k);

    double lhs = 0.0, quartic = 0.0, l2_hat = 0.0;
    for (Index i = 0; i < n_samples; ++i) {
        const Vector v = samples.row(i).transpose();
        const Vector& r = residuals[static_cast<std::size_t>(i)];
        lhs += r.squaredNorm();
        const double v_sq = v.squaredNorm();
        quartic += v_sq * v_sq;
        if (v_sq > 0.0) l2_hat = std::max(l2_hat, (r - a * v).norm() / v_sq);
    }
    lhs /= static_cast<double>(n_samples);
    quartic /= static_cast<double>(n_samples);

    report.lhs = lhs;
    report.c4_hat = l2_hat * l2_hat * quartic;
    report.sensitivity_frob_sq = a.squaredNorm();
    report.rhs = 0.5 * report.sigma_tr_sq * report.sensitivity_frob_sq - report.c4_hat;
    report.holds = report.lhs >= report.rhs - 1e-12 * (1.0 + std::abs(report.rhs));
    return report;
}

}  // namespace pnc
