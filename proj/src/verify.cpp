#include "pnc/verify.hpp"

#include "pnc/ensemble_eval.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <limits>

namespace pnc {

namespace {

double descent_objective(const Matrix& design, const Matrix& targets, const Matrix& b0,
                         const Matrix& b, double ridge) {
    return (design * b - targets).squaredNorm() + ridge * (b - b0).squaredNorm();
}

}  // namespace

Matrix ridge_descent_oracle(const Eigen::Ref<const Matrix>& design,
                            const Eigen::Ref<const Matrix>& targets,
                            const Eigen::Ref<const Matrix>& b0, double ridge,
                            const OracleConfig& config) {
    if (design.rows() != targets.rows())
        throw ShapeMismatch("ridge_descent_oracle: design/target rows");
    if (design.cols() != b0.rows() || targets.cols() != b0.cols())
        throw ShapeMismatch("ridge_descent_oracle: b0 shape");

    Matrix b = b0;
    double obj = descent_objective(design, targets, b0, b, ridge);
    double step = config.step_size;
    double grad_tol = 0.0;  // set from the initial gradient below
    int stalled = 0;

    for (Index iter = 0; iter < config.max_iters; ++iter) {
        Matrix grad = 2.0 * (design.transpose() * (design * b - targets)) + 2.0 * ridge * (b - b0);
        const double grad_norm_sq = grad.squaredNorm();
        if (iter == 0) grad_tol = config.convergence_tol * (1.0 + std::sqrt(grad_norm_sq));
        if (std::sqrt(grad_norm_sq) <= grad_tol) return b;

        // Armijo backtracking, growing the step again after each success.
        bool accepted = false;
        for (int bt = 0; bt < 60; ++bt) {
            Matrix candidate = b - step * grad;
            const double cand_obj = descent_objective(design, targets, b0, candidate, ridge);
            if (cand_obj <= obj - 1e-4 * step * grad_norm_sq) {
                stalled = (obj - cand_obj <= 1e-14 * (1.0 + std::abs(obj))) ? stalled + 1 : 0;
                b = std::move(candidate);
                obj = cand_obj;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        // No descent direction progress left at machine precision.
        if (!accepted || stalled >= 50) return b;
    }
    throw NoConvergence("ridge_descent_oracle: max iterations exceeded");
}

Matrix lsq_oracle(const Eigen::Ref<const Matrix>& design,
                  const Eigen::Ref<const Matrix>& reference_design,
                  const Eigen::Ref<const Matrix>& base_theta, double ridge,
                  const OracleConfig& config) {
    const Matrix targets = reference_design * base_theta.transpose();
    const Matrix b = ridge_descent_oracle(design, targets, base_theta.transpose(), ridge, config);
    return b.transpose();
}

double correction_objective(const Eigen::Ref<const Matrix>& design,
                            const Eigen::Ref<const Matrix>& reference_design,
                            const Eigen::Ref<const Matrix>& base_theta,
                            const Eigen::Ref<const Matrix>& candidate, double ridge) {
    return (design * candidate.transpose() - reference_design * base_theta.transpose())
               .squaredNorm() +
           ridge * (candidate - base_theta).squaredNorm();
}

Matrix sensitivity_fd_oracle(const MlpModel& model, Index layer_index,
                             const Eigen::Ref<const Matrix>& basis,
                             const Eigen::Ref<const Matrix>& calibration_inputs, double ridge,
                             const Eigen::Ref<const Vector>& x, double fd_step) {
    if (!(fd_step > 0.0)) throw InvalidConfig("sensitivity_fd_oracle: step must be positive");
    if (!model.is_hidden_layer(layer_index))
        throw InvalidLayer("sensitivity_fd_oracle: not a hidden layer");
    const Index k_dirs = basis.cols();
    // The residual lives at the corrected layer's output.
    const Index q = model.layer(layer_index + 1).weight.rows();
    auto basis_ptr = std::make_shared<const Matrix>(basis);

    const ActivationTrace base_trace = forward_trace(model, x);
    const Vector ybar = augmented_rep(base_trace, layer_index).values;

    auto residual_at = [&](const Vector& v) -> Vector {
        MemberPerturbation pert;
        pert.layer_index = layer_index;
        pert.basis = basis_ptr;
        pert.coeffs = v;
        pert.scale = 1.0;
        const CorrectionSystem sys =
            assemble_correction(model, pert, calibration_inputs, ridge);
        const CorrectionResult res = solve_correction(sys);
        const auto& w = model.layer(layer_index).weight;
        const ActivationTrace pert_trace =
            perturbed_forward(model, layer_index, pert.delta_w(w.rows(), w.cols()), x);
        const Vector ybar_v = augmented_rep(pert_trace, layer_index).values;
        return res.corrected_theta * ybar_v - sys.base_theta * ybar;
    };

    Matrix jac(q, k_dirs);
    for (Index k = 0; k < k_dirs; ++k) {
        Vector probe = Vector::Zero(k_dirs);
        probe[k] = fd_step;
        const Vector plus = residual_at(probe);
        probe[k] = -fd_step;
        const Vector minus = residual_at(probe);
        jac.col(k) = (plus - minus) / (2.0 * fd_step);
    }
    return jac;
}

McMoments mc_moment_oracle(const Eigen::Ref<const Matrix>& a, double sigma, Index n,
                           Index repetitions, std::uint64_t seed) {
    if (repetitions < 100) throw InvalidConfig("mc_moment_oracle: need >= 100 repetitions");
    std::vector<double> estimates;
    estimates.reserve(static_cast<std::size_t>(repetitions));
    Rng rng(mix_seed(seed, 601));
    const Index t = a.cols();
    for (Index rep = 0; rep < repetitions; ++rep) {
        double total = 0.0;
        for (Index m = 0; m < n; ++m) {
            const Vector v = sigma * rng.gaussian_vector(t);
            total += (a * v).squaredNorm();
        }
        estimates.push_back(total / static_cast<double>(n));
    }
    double mean = 0.0;
    for (const double e : estimates) mean += e;
    mean /= static_cast<double>(repetitions);
    double var = 0.0;
    for (const double e : estimates) var += (e - mean) * (e - mean);
    var /= static_cast<double>(repetitions - 1);
    McMoments out;
    out.mean = mean;
    out.variance = var;
    out.se_mean = std::sqrt(var / static_cast<double>(repetitions));
    return out;
}

namespace {

// Exact nonnegative least squares in three variables by active-set
// enumeration: solve each support's normal equations, keep feasible minima.
Eigen::Vector3d nnls3(const Matrix& design, const Vector& target) {
    const Matrix gram = design.transpose() * design;
    const Vector cross = design.transpose() * target;
    Eigen::Vector3d best = Eigen::Vector3d::Zero();
    double best_obj = target.squaredNorm();
    for (int mask = 1; mask < 8; ++mask) {
        std::vector<int> support;
        for (int j = 0; j < 3; ++j)
            if (mask & (1 << j)) support.push_back(j);
        const auto s = static_cast<Index>(support.size());
        Matrix g(s, s);
        Vector c(s);
        for (Index i = 0; i < s; ++i) {
            c[i] = cross[support[static_cast<std::size_t>(i)]];
            for (Index j = 0; j < s; ++j)
                g(i, j) = gram(support[static_cast<std::size_t>(i)],
                               support[static_cast<std::size_t>(j)]);
        }
        Eigen::LDLT<Matrix> ldlt(g);
        if (ldlt.info() != Eigen::Success) continue;
        const Vector sol = ldlt.solve(c);
        if ((sol.array() < 0.0).any()) continue;
        Eigen::Vector3d full = Eigen::Vector3d::Zero();
        for (Index i = 0; i < s; ++i) full[support[static_cast<std::size_t>(i)]] = sol[i];
        const double obj = (design * full - target).squaredNorm();
        if (obj < best_obj) {
            best_obj = obj;
            best = full;
        }
    }
    return best;
}

}  // namespace

WitnessReport id_bound_witness(const PncEnsemble& ensemble,
                               const Eigen::Ref<const Matrix>& calibration_inputs,
                               const Eigen::Ref<const Matrix>& id_points,
                               const Eigen::Ref<const Matrix>& ood_points) {
    if (id_points.rows() == 0 || ood_points.rows() == 0)
        throw EmptyInput("id_bound_witness: both point sets must be nonempty");
    if (ensemble.config().target_layers.size() != 1)
        throw InvalidConfig("id_bound_witness: single-layer ensembles only");
    const Index l = ensemble.config().target_layers.front();
    const MlpModel& base = ensemble.base();
    const double ridge = ensemble.config().ridge;

    const BatchTrace calib_trace = forward_batch_trace(base, calibration_inputs);

    auto design_for = [&](const std::vector<Index>& ids) {
        Matrix d(static_cast<Index>(ids.size()), base.hidden_dim(l) + 1);
        d.col(0).setOnes();
        for (std::size_t i = 0; i < ids.size(); ++i)
            d.row(static_cast<Index>(i)).tail(base.hidden_dim(l)) =
                calib_trace.per_layer_post[static_cast<std::size_t>(l)].row(ids[i]);
        return d;
    };

    const auto& next = base.layer(l + 1);
    Matrix theta(next.weight.rows(), next.weight.cols() + 1);
    theta.col(0) = next.bias;
    theta.rightCols(next.weight.cols()) = next.weight;

    auto eval_points = [&](const Matrix& points, bool is_ood, WitnessReport& report) {
        const BatchTrace point_trace = forward_batch_trace(base, points);
        const Matrix& h_points = point_trace.per_layer_post[static_cast<std::size_t>(l)];
        for (Index m = 0; m < ensemble.size(); ++m) {
            const PncMember& mem = ensemble.member(m);
            const MemberRepair& repair = mem.repairs.front();
            const Matrix design = design_for(mem.subset_ids);
            Matrix gram = design.transpose() * design;
            gram.diagonal().array() += ridge;
            Eigen::LLT<Matrix> llt(0.5 * (gram + gram.transpose()));
            if (llt.info() != Eigen::Success)
                throw SingularSystem("id_bound_witness: member design singular");

            const Matrix delta = ensemble.member_delta_w(m, 0);
            const BatchTrace pert_trace = perturbed_forward_batch(base, l, delta, points);
            const Matrix& h_pert = pert_trace.per_layer_post[static_cast<std::size_t>(l)];

            for (Index i = 0; i < points.rows(); ++i) {
                Vector ybar(base.hidden_dim(l) + 1);
                ybar[0] = 1.0;
                ybar.tail(base.hidden_dim(l)) = h_points.row(i).transpose();
                Vector ybar_v(ybar.size());
                ybar_v[0] = 1.0;
                ybar_v.tail(base.hidden_dim(l)) = h_pert.row(i).transpose();

                const double leverage = ybar.dot(llt.solve(ybar));
                WitnessRow row;
                row.is_ood = is_ood;
                row.rho = (repair.corrected_theta * ybar_v - theta * ybar).norm();
                row.leverage_term = std::sqrt(std::max(0.0, leverage)) * repair.calib_shift;
                row.test_shift = (ybar_v - ybar).norm();
                report.rows.push_back(row);
            }
        }
    };

    WitnessReport report;
    eval_points(id_points, false, report);
    eval_points(ood_points, true, report);

    // Fit the bound's functional form on ID rows only.
    std::vector<const WitnessRow*> id_rows;
    for (const auto& row : report.rows)
        if (!row.is_ood) id_rows.push_back(&row);
    Matrix fit_design(static_cast<Index>(id_rows.size()), 3);
    Vector fit_target(static_cast<Index>(id_rows.size()));
    for (std::size_t i = 0; i < id_rows.size(); ++i) {
        const auto idx = static_cast<Index>(i);
        fit_design(idx, 0) = id_rows[i]->leverage_term;
        fit_design(idx, 1) = id_rows[i]->test_shift;
        fit_design(idx, 2) = id_rows[i]->leverage_term * id_rows[i]->leverage_term;
        fit_target[idx] = id_rows[i]->rho;
    }
    Eigen::Vector3d coef = nnls3(fit_design, fit_target);
    // The bound constants are existential; scale the fit until it
    // envelopes the ID rows so the exceed fractions measure transfer, not
    // fit residue.
    double envelope = 1.0;
    for (Index i = 0; i < fit_target.size(); ++i) {
        const double bound = fit_design.row(i).dot(coef);
        if (bound > 1e-300) envelope = std::max(envelope, fit_target[i] / bound);
    }
    coef *= envelope;
    report.c1 = coef[0];
    report.c2 = coef[1];
    report.c3 = coef[2];

    auto exceed_fraction = [&](bool ood) {
        Index total = 0, exceed = 0;
        for (const auto& row : report.rows) {
            if (row.is_ood != ood) continue;
            ++total;
            const double bound = coef[0] * row.leverage_term + coef[1] * row.test_shift +
                                 coef[2] * row.leverage_term * row.leverage_term;
            if (row.rho > bound * (1.0 + 1e-9) + 1e-12) ++exceed;
        }
        return total > 0 ? static_cast<double>(exceed) / static_cast<double>(total) : 0.0;
    };
    report.id_exceed_fraction = exceed_fraction(false);
    report.ood_exceed_fraction = exceed_fraction(true);

    std::vector<double> rho_vals, lev_vals;
    for (const auto* row : id_rows) {
        rho_vals.push_back(row->rho);
        lev_vals.push_back(row->leverage_term);
    }
    try {
        report.spearman_id = spearman(rho_vals, lev_vals);
    } catch (const ZeroVariance&) {
        // Degenerate (e.g. sigma = 0): every residual identical.
        report.spearman_id = std::numeric_limits<double>::quiet_NaN();
    }
    return report;
}

}  // namespace pnc
