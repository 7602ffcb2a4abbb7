#include "pnc/conv.hpp"
#include "pnc/diagnostics.hpp"
#include "pnc/numerics.hpp"
#include "pnc/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace pnc {

namespace {

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), format, a, b, c);
    return std::string(buf);
}

struct Instance {
    Matrix design;     // X_v
    Matrix reference;  // X
    Matrix theta;      // base Theta
    double ridge;
};

Instance random_instance(Index rows, Index d, Index q, double ridge, double pert_scale,
                         Rng& rng) {
    Instance inst;
    inst.reference.resize(rows, d + 1);
    inst.reference.col(0).setOnes();
    inst.reference.rightCols(d) = rng.gaussian_matrix(rows, d);
    inst.design = inst.reference;
    inst.design.rightCols(d) += pert_scale * rng.gaussian_matrix(rows, d);
    inst.theta = rng.gaussian_matrix(q, d + 1);
    inst.ridge = ridge;
    return inst;
}

CorrectionSystem to_system(const Instance& inst) {
    CorrectionSystem sys;
    sys.design = inst.design;
    sys.reference_design = inst.reference;
    sys.base_theta = inst.theta;
    sys.targets = inst.reference * inst.theta.transpose();
    sys.ridge = inst.ridge;
    return sys;
}

}  // namespace

std::vector<CheckResult> run_lsq_suite(std::uint64_t seed) {
    std::vector<CheckResult> results;
    Rng rng(mix_seed(seed, 701));
    OracleConfig oracle_cfg;
    oracle_cfg.seed = seed;

    {
        // Closed form vs descent oracle over underdetermined, square and
        // overdetermined designs (d = 10, so the augmented width is 11).
        const Index d = 10, q = 3;
        double worst_gap = -1e300;
        bool pass = true;
        int count = 0;
        for (const Index rows : {Index(5), Index(11), Index(40), Index(100)}) {
            for (int rep = 0; rep < 13; ++rep, ++count) {
                // Square random designs can be near-singular; the ridge keeps
                // the descent oracle's conditioning bounded there. lambda = 0
                // is exercised on the well-conditioned overdetermined block.
                const double ridge = rows <= d + 1 ? 1e-2 : (rep % 2 == 0 ? 0.0 : 1e-2);
                const Instance inst = random_instance(rows, d, q, ridge, 0.1, rng);
                const CorrectionResult closed = solve_correction(to_system(inst));
                const Matrix oracle_theta =
                    lsq_oracle(inst.design, inst.reference, inst.theta, ridge, oracle_cfg);
                const double closed_obj = correction_objective(
                    inst.design, inst.reference, inst.theta, closed.corrected_theta, ridge);
                const double oracle_obj = correction_objective(inst.design, inst.reference,
                                                               inst.theta, oracle_theta, ridge);
                const double slack = 1e-8 * (1.0 + oracle_obj);
                worst_gap = std::max(worst_gap, closed_obj - oracle_obj);
                if (closed_obj > oracle_obj + slack) pass = false;
            }
        }
        results.push_back({"lsq/closed_form_vs_oracle", pass,
                           fmt("%.0f instances, worst objective gap %.3e",
                               static_cast<double>(count), worst_gap)});
    }

    {
        // Normal-equation orthogonality at lambda = 0, genuinely overdetermined.
        bool pass = true;
        double worst = 0.0;
        for (const Index rows : {Index(40), Index(100)}) {
            for (int rep = 0; rep < 5; ++rep) {
                const Instance inst = random_instance(rows, 10, 3, 0.0, 0.2, rng);
                const CorrectionResult res = solve_correction(to_system(inst));
                const double ratio = (inst.design.transpose() * res.calib_residual).norm() /
                                     (inst.design.norm() * res.calib_residual.norm());
                worst = std::max(worst, ratio);
                if (ratio > 1e-8) pass = false;
            }
        }
        results.push_back(
            {"lsq/orthogonality_lambda0", pass, fmt("worst ||Xv^T E|| ratio %.3e", worst)});
    }

    {
        // Zero perturbation: X_v == X forces Theta_hat == Theta for any ridge.
        bool pass = true;
        double worst = 0.0;
        for (const double ridge : {0.0, 1e-2, 1e2}) {
            Instance inst = random_instance(40, 10, 3, ridge, 0.0, rng);
            inst.design = inst.reference;
            const CorrectionResult res = solve_correction(to_system(inst));
            const double rel = (res.corrected_theta - inst.theta).norm() / inst.theta.norm();
            worst = std::max(worst, rel);
            if (rel > 1e-12) pass = false;
        }
        results.push_back({"lsq/zero_perturbation_exact", pass, fmt("worst rel shift %.3e", worst)});
    }

    {
        // Ridge limit: ||Theta_hat - Theta||_F nonincreasing along the lambda grid.
        Instance inst = random_instance(40, 10, 3, 0.0, 0.3, rng);
        std::vector<double> shifts;
        for (const double ridge : {1e-4, 1e-2, 1.0, 1e2, 1e4}) {
            inst.ridge = ridge;
            shifts.push_back(solve_correction(to_system(inst)).theta_shift_norm);
        }
        bool pass = true;
        for (std::size_t i = 0; i + 1 < shifts.size(); ++i)
            if (shifts[i + 1] > shifts[i] * (1.0 + 1e-12)) pass = false;
        results.push_back({"lsq/ridge_shrinkage_monotone", pass,
                           fmt("shift %.3e -> %.3e over lambda grid", shifts.front(), shifts.back())});
    }
    return results;
}

std::vector<CheckResult> run_sensitivity_suite(std::uint64_t seed) {
    std::vector<CheckResult> results;

    {
        // Interpolation: lambda = 0, B = d+1, full-rank design makes the
        // repair exact at every calibration point.
        bool pass = true;
        double worst = 0.0;
        for (int trial = 0; trial < 20; ++trial) {
            const std::uint64_t s = mix_seed(seed, 711, static_cast<std::uint64_t>(trial));
            const MlpModel model = random_mlp(3, {8, 8}, 2, Activation::tanh_act, s);
            Rng rng(mix_seed(s, 1));
            const Index l = 1;
            const Index b = model.hidden_dim(l) + 1;  // interpolating regime
            const Matrix calib = rng.gaussian_matrix(b, 3);
            auto basis = std::make_shared<const Matrix>(
                orthonormal_basis(model.layer(l).weight.size(), 4, mix_seed(s, 2)));
            PncConfig cfg;
            cfg.target_layers = {l};
            cfg.rank = 4;
            cfg.scale = 0.25;
            cfg.ridge = 0.0;
            cfg.seed = s;
            const MemberPerturbation pert = sample_member(cfg, l, 0, basis);
            const CorrectionSystem sys = assemble_correction(model, pert, calib, 0.0);
            const CorrectionResult res = solve_correction(sys);
            const double max_row = res.calib_residual.rowwise().norm().maxCoeff();
            worst = std::max(worst, max_row);
            if (max_row > 1e-7) pass = false;
        }
        results.push_back(
            {"sensitivity/interpolation_lambda0", pass, fmt("worst calibration rho %.3e", worst)});
    }

    {
        // Hat-weight recovery and norm identities over random triples.
        bool pass = true;
        double worst14 = 0.0, worst15 = 0.0;
        Rng rng(mix_seed(seed, 712));
        const double ridges[] = {0.0, 0.1, 1.0};
        for (int trial = 0; trial < 100; ++trial) {
            const Index b = trial % 2 == 0 ? 15 : 30;
            const Index d = 8;
            Matrix design(b, d + 1);
            design.col(0).setOnes();
            design.rightCols(d) = rng.gaussian_matrix(b, d);
            Vector ybar(d + 1);
            ybar[0] = 1.0;
            ybar.tail(d) = rng.gaussian_vector(d);
            const double ridge = ridges[trial % 3];

            const Vector w = hat_weights(ybar, design, ridge);
            const double h = ridge_leverage(ybar, design, ridge);
            const SpdSystem spd(design.transpose() * design, ridge);
            const Vector ginv_y = spd_solve(spd, ybar).col(0);

            const double recovery =
                (design.transpose() * w - (ybar - ridge * ginv_y)).norm() / ybar.norm();
            const double norm_identity =
                std::abs(w.squaredNorm() - (h - ridge * ginv_y.squaredNorm())) /
                std::max(h, 1e-300);
            worst14 = std::max(worst14, recovery);
            worst15 = std::max(worst15, norm_identity);
            if (recovery > 1e-8 || norm_identity > 1e-8) pass = false;
            if (ridge == 0.0 && std::abs(w.squaredNorm() - h) > 1e-8 * std::max(h, 1e-300))
                pass = false;
        }
        results.push_back({"sensitivity/hat_weight_identities", pass,
                           fmt("worst recovery %.3e, worst norm identity %.3e", worst14, worst15)});
    }

    {
        // Analytic decomposition vs the finite-difference pipeline oracle.
        bool pass = true;
        double worst = 0.0;
        for (int trial = 0; trial < 20; ++trial) {
            const std::uint64_t s = mix_seed(seed, 713, static_cast<std::uint64_t>(trial));
            const MlpModel model = random_mlp(3, {10, 8}, 2, Activation::tanh_act, s);
            Rng rng(mix_seed(s, 1));
            const Index l = trial % 2 == 0 ? 0 : 1;
            const Matrix calib = rng.gaussian_matrix(30, 3);
            const Matrix basis =
                orthonormal_basis(model.layer(l).weight.size(), 5, mix_seed(s, 2));
            const double ridge = trial % 2 == 0 ? 1e-3 : 1e-2;
            const Vector x = rng.gaussian_vector(3);

            const SensitivityReport rep = sensitivity_report(model, l, basis, calib, ridge, x);
            const Matrix fd = sensitivity_fd_oracle(model, l, basis, calib, ridge, x, 1e-4);
            const double rel = (rep.sensitivity - fd).norm() / std::max(fd.norm(), 1e-300);
            worst = std::max(worst, rel);
            if (rel > 1e-4) pass = false;
        }
        results.push_back(
            {"sensitivity/analytic_vs_fd_oracle", pass, fmt("worst rel Frobenius gap %.3e", worst)});
    }
    return results;
}

std::vector<CheckResult> run_sketch_suite(std::uint64_t seed) {
    std::vector<CheckResult> results;

    {
        bool pass = true;
        double worst_mean_dev = 0.0, worst_ratio = 1.0;
        for (int trial = 0; trial < 5; ++trial) {
            Rng rng(mix_seed(seed, 721, static_cast<std::uint64_t>(trial)));
            const Matrix a = rng.gaussian_matrix(6, 10);
            const double sigma = 0.7;
            const Index n = 100;
            const McMoments mc = mc_moment_oracle(a, sigma, n, 500, mix_seed(seed, 722));
            const double exact = sigma * sigma * a.squaredNorm();
            const double mean_dev = std::abs(mc.mean - exact) / mc.se_mean;
            worst_mean_dev = std::max(worst_mean_dev, mean_dev);
            if (mean_dev > 4.0) pass = false;

            const double rel_var = mc.variance / (exact * exact);
            const double predicted = 2.0 / (static_cast<double>(n) * effective_rank_map(a));
            const double ratio = rel_var / predicted;
            if (std::abs(std::log(ratio)) > std::abs(std::log(worst_ratio)))
                worst_ratio = ratio;
            if (ratio < 0.7 || ratio > 1.3) pass = false;
        }
        results.push_back({"sketch/estimator_moments", pass,
                           fmt("worst mean dev %.2f se, worst var ratio %.3f", worst_mean_dev,
                               worst_ratio)});
    }

    {
        // Local residual floor on smooth networks at small truncation radius.
        bool pass = true;
        double worst_margin = 1e300;
        for (int trial = 0; trial < 20; ++trial) {
            const std::uint64_t s = mix_seed(seed, 723, static_cast<std::uint64_t>(trial));
            const MlpModel model = random_mlp(2, {6}, 2, Activation::tanh_act, s);
            Rng rng(mix_seed(s, 1));
            const Matrix calib = rng.gaussian_matrix(12, 2);
            const Matrix basis =
                orthonormal_basis(model.layer(0).weight.size(), 4, mix_seed(s, 2));
            const Vector x = rng.gaussian_vector(2);
            const FloorCheckReport rep = local_residual_floor_check(
                model, 0, basis, calib, 1e-3, x, 0.05, 0.1, 150, mix_seed(s, 3));
            worst_margin = std::min(worst_margin, rep.lhs - rep.rhs);
            if (!rep.holds) pass = false;
        }
        results.push_back(
            {"sketch/local_residual_floor", pass, fmt("worst lhs-rhs margin %.3e", worst_margin)});
    }
    return results;
}

namespace {

Matrix block_diag_projector(Index q, Index start, Index size) {
    Matrix c = Matrix::Zero(q, q);
    for (Index i = 0; i < size; ++i) c(start + i, start + i) = 1.0;
    return c;
}

Matrix givens_rotation(Index q, const std::vector<std::pair<Index, Index>>& planes,
                       const std::vector<double>& angles, double t) {
    Matrix r = Matrix::Identity(q, q);
    for (std::size_t p = 0; p < planes.size(); ++p) {
        Matrix g = Matrix::Identity(q, q);
        const double a = t * angles[p];
        g(planes[p].first, planes[p].first) = std::cos(a);
        g(planes[p].second, planes[p].second) = std::cos(a);
        g(planes[p].first, planes[p].second) = -std::sin(a);
        g(planes[p].second, planes[p].first) = std::sin(a);
        r = g * r;
    }
    return r;
}

}  // namespace

std::vector<CheckResult> run_mixture_suite(std::uint64_t seed) {
    std::vector<CheckResult> results;
    const Index m_count = 5;

    {
        bool pass = true;
        double worst = 0.0;
        auto check_exact = [&](const std::vector<Matrix>& covs, double expected_alpha,
                               bool check_alpha) {
            const MixtureRankReport rep = mixture_rank(covs);
            const double rel = std::abs(rep.measured_eff_rank - rep.formula_prediction) /
                               rep.measured_eff_rank;
            worst = std::max(worst, rel);
            if (rel > 1e-9) pass = false;
            if (check_alpha && std::abs(rep.avg_alignment - expected_alpha) > 1e-9) pass = false;
            if (!rep.equal_trace_norm) pass = false;
        };

        // alpha = 1: identical members.
        Rng rng(mix_seed(seed, 731));
        const Matrix a0 = rng.gaussian_matrix(10, 4);
        std::vector<Matrix> identical(static_cast<std::size_t>(m_count), a0 * a0.transpose());
        check_exact(identical, 1.0, true);

        // alpha = 0: disjoint equal-size identity blocks.
        std::vector<Matrix> disjoint;
        for (Index j = 0; j < m_count; ++j)
            disjoint.push_back(block_diag_projector(10, 2 * j, 2));
        check_exact(disjoint, 0.0, true);

        // alpha = 0.5: shared block plus disjoint per-member block.
        std::vector<Matrix> half;
        for (Index j = 0; j < m_count; ++j)
            half.push_back(block_diag_projector(12, 0, 2) +
                           block_diag_projector(12, 2 + 2 * j, 2));
        check_exact(half, 0.5, true);

        // Rotations of a fixed spectrum: equal trace/norm by construction.
        Vector spectrum(6);
        spectrum << 3.0, 2.0, 1.0, 0.5, 0.25, 0.1;
        std::vector<Matrix> rotated;
        for (Index j = 0; j < m_count; ++j) {
            const Matrix r = orthonormalize(
                Rng(mix_seed(seed, 732, static_cast<std::uint64_t>(j))).gaussian_matrix(6, 6));
            rotated.push_back(r * spectrum.asDiagonal() * r.transpose());
        }
        check_exact(rotated, 0.0, false);

        results.push_back({"mixture/effective_rank_identity", pass,
                           fmt("worst measured-vs-formula rel gap %.3e", worst)});
    }

    {
        // Rotation family: spectrum fixed, alignment controlled by the
        // rotation angle; formula must fall strictly as alignment rises.
        Vector spectrum(6);
        spectrum << 3.0, 2.0, 1.0, 0.5, 0.25, 0.1;
        std::vector<std::vector<std::pair<Index, Index>>> planes(
            static_cast<std::size_t>(m_count));
        std::vector<std::vector<double>> angles(static_cast<std::size_t>(m_count));
        Rng rng(mix_seed(seed, 733));
        for (Index j = 0; j < m_count; ++j) {
            for (const auto& plane :
                 {std::pair<Index, Index>{0, 1}, {2, 3}, {4, 5}, {1, 4}, {0, 3}, {2, 5}}) {
                planes[static_cast<std::size_t>(j)].push_back(plane);
                angles[static_cast<std::size_t>(j)].push_back(rng.uniform(0.8, 2.6));
            }
        }

        std::vector<std::pair<double, double>> alpha_formula;
        bool identity_ok = true;
        for (const double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            std::vector<Matrix> covs;
            for (Index j = 0; j < m_count; ++j) {
                const Matrix r = givens_rotation(6, planes[static_cast<std::size_t>(j)],
                                                 angles[static_cast<std::size_t>(j)], t);
                covs.push_back(r * spectrum.asDiagonal() * r.transpose());
            }
            const MixtureRankReport rep = mixture_rank(covs);
            alpha_formula.emplace_back(rep.avg_alignment, rep.formula_prediction);
            if (std::abs(rep.measured_eff_rank - rep.formula_prediction) >
                1e-9 * rep.measured_eff_rank)
                identity_ok = false;
        }
        std::sort(alpha_formula.begin(), alpha_formula.end());
        bool strict = true;
        for (std::size_t i = 0; i + 1 < alpha_formula.size(); ++i) {
            if (!(alpha_formula[i].first < alpha_formula[i + 1].first)) strict = false;
            if (!(alpha_formula[i].second > alpha_formula[i + 1].second)) strict = false;
        }
        results.push_back({"mixture/monotone_in_alignment", identity_ok && strict,
                           fmt("alpha span [%.3f, %.3f]", alpha_formula.front().first,
                               alpha_formula.back().first)});
    }
    return results;
}

namespace {

// Six-loop direct convolution, VALID geometry; deliberately naive.
Tensor4 naive_conv(const Tensor4& x, const Tensor4& kernel, Index stride) {
    const Index k = kernel.dim2();
    const Index out_h = (x.dim1() - k) / stride + 1;
    const Index out_w = (x.dim2() - k) / stride + 1;
    Tensor4 out(x.dim0(), out_h, out_w, kernel.dim0());
    for (Index n = 0; n < x.dim0(); ++n)
        for (Index ho = 0; ho < out_h; ++ho)
            for (Index wo = 0; wo < out_w; ++wo)
                for (Index o = 0; o < kernel.dim0(); ++o) {
                    double acc = 0.0;
                    for (Index i = 0; i < kernel.dim1(); ++i)
                        for (Index u = 0; u < k; ++u)
                            for (Index v = 0; v < k; ++v)
                                acc += x(n, ho * stride + u, wo * stride + v, i) *
                                       kernel(o, i, u, v);
                    out(n, ho, wo, o) = acc;
                }
    return out;
}

double tensor_rel_gap(const Tensor4& a, const Tensor4& b) {
    double num = 0.0, den = 0.0;
    for (Index i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        num += d * d;
        den += b.data()[i] * b.data()[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace

std::vector<CheckResult> run_conv_suite(std::uint64_t seed) {
    std::vector<CheckResult> results;

    {
        bool pass = true;
        double worst = 0.0;
        Rng dims(mix_seed(seed, 741));
        for (int trial = 0; trial < 100; ++trial) {
            const Index n = 1 + static_cast<Index>(dims.below(2));
            const Index h = 4 + static_cast<Index>(dims.below(4));
            const Index w = 4 + static_cast<Index>(dims.below(4));
            const Index c_in = 1 + static_cast<Index>(dims.below(3));
            const Index c_out = 1 + static_cast<Index>(dims.below(3));
            const Index k = 1 + static_cast<Index>(dims.below(3));
            const Index stride = 1 + static_cast<Index>(dims.below(2));
            const std::uint64_t s = mix_seed(seed, 742, static_cast<std::uint64_t>(trial));
            const Tensor4 x = random_tensor(n, h, w, c_in, 1.0, s);
            const Tensor4 kernel = random_tensor(c_out, c_in, k, k, 1.0, mix_seed(s, 1));

            const PatchDesign design = unfold_patches(x, k, stride);
            const Matrix unfolded =
                design.matrix.rightCols(design.matrix.cols() - 1) * kernel_matrix(kernel);
            const Tensor4 direct = naive_conv(x, kernel, stride);
            const double rel = (unfolded - flatten_spatial(direct)).norm() /
                               std::max(flatten_spatial(direct).norm(), 1e-300);
            worst = std::max(worst, rel);
            if (rel > 1e-9) pass = false;
        }
        results.push_back(
            {"conv/patchwise_equals_direct", pass, fmt("100 instances, worst rel gap %.3e", worst)});
    }

    const ConvBlockModel block =
        random_conv_block(3, 4, 4, 3, ConvBlockModel::Shortcut::projection, mix_seed(seed, 743));
    const Tensor4 calib = random_tensor(24, 8, 8, 3, 1.0, mix_seed(seed, 744));
    const Matrix basis = conv_kernel_basis(3, 3, 4, 6, mix_seed(seed, 745));
    Rng zrng(mix_seed(seed, 746));
    const Vector z = zrng.gaussian_vector(6);
    Tensor4 perturbed = block.conv1;
    perturbed += kernel_direction(1.5 * (basis * z), 4, 3, 3);

    {
        // Chunk partition and order invariance of the accumulated (H, beta).
        std::vector<NormalEqAccumulator> accs;
        for (const Index chunk : {Index(1), Index(7), Index(64)})
            accs.push_back(block_correction_system(block, calib, perturbed, chunk));

        // Reversed chunk order, accumulated by hand.
        const Matrix base_mat = kernel_matrix(block.conv2);
        NormalEqAccumulator rev(accs[0].h.rows(), accs[0].beta.cols(), 7);
        std::vector<std::pair<Index, Index>> ranges;
        for (Index start = 0; start < calib.dim0(); start += 7)
            ranges.emplace_back(start, std::min<Index>(7, calib.dim0() - start));
        std::reverse(ranges.begin(), ranges.end());
        for (const auto& [start, count] : ranges) {
            Tensor4 chunk(count, calib.dim1(), calib.dim2(), calib.dim3());
            for (Index n = 0; n < count; ++n)
                for (Index hh = 0; hh < calib.dim1(); ++hh)
                    for (Index ww = 0; ww < calib.dim2(); ++ww)
                        for (Index cc = 0; cc < calib.dim3(); ++cc)
                            chunk(n, hh, ww, cc) = calib(start + n, hh, ww, cc);
            const Tensor4 u_pert = conv2_input(block, chunk, perturbed);
            const PatchDesign design = unfold_patches(pad_nhwc(u_pert, block.pad), 3, 1);
            const Tensor4 u_base = conv2_input(block, chunk, block.conv1);
            const Tensor4 target = conv_nhwc(u_base, block.conv2, 1, block.pad);
            accumulate_chunk(rev, design, flatten_spatial(target), base_mat);
        }

        bool pass = true;
        double worst = 0.0;
        auto compare = [&](const NormalEqAccumulator& a, const NormalEqAccumulator& b) {
            const double gh = (a.h - b.h).norm() / b.h.norm();
            const double gb = (a.beta - b.beta).norm() / std::max(b.beta.norm(), 1e-300);
            worst = std::max({worst, gh, gb});
            if (gh > 1e-10 || gb > 1e-10) pass = false;
        };
        compare(accs[0], accs[2]);
        compare(accs[1], accs[2]);
        compare(rev, accs[2]);
        results.push_back(
            {"conv/chunk_partition_invariance", pass, fmt("worst rel gap %.3e", worst)});
    }

    {
        // Conv ridge solve against the descent oracle on the stacked system.
        const double ridge = 1e-3;
        const NormalEqAccumulator acc = block_correction_system(block, calib, perturbed, 64);
        const ConvCorrection corr = solve_conv_correction(acc, ridge, block.conv2);

        const Tensor4 u_pert = conv2_input(block, calib, perturbed);
        const Matrix full_design = unfold_patches(pad_nhwc(u_pert, block.pad), 3, 1).matrix;
        const Tensor4 u_base = conv2_input(block, calib, block.conv1);
        const Matrix full_targets =
            flatten_spatial(conv_nhwc(u_base, block.conv2, 1, block.pad));

        Matrix theta0(full_design.cols(), block.out_channels());
        theta0.row(0).setZero();
        theta0.bottomRows(theta0.rows() - 1) = kernel_matrix(block.conv2);
        Matrix theta_hat = theta0;
        theta_hat.row(0) = corr.bias.transpose();
        theta_hat.bottomRows(theta_hat.rows() - 1) += kernel_matrix(corr.kernel_delta);

        OracleConfig cfg;
        const Matrix oracle = ridge_descent_oracle(full_design, full_targets, theta0, ridge, cfg);
        const auto objective = [&](const Matrix& th) {
            return (full_design * th - full_targets).squaredNorm() +
                   ridge * (th - theta0).squaredNorm();
        };
        const double closed_obj = objective(theta_hat);
        const double oracle_obj = objective(oracle);
        const bool pass = closed_obj <= oracle_obj + 1e-7 * (1.0 + oracle_obj);
        results.push_back({"conv/ridge_vs_descent_oracle", pass,
                           fmt("closed %.6e vs oracle %.6e", closed_obj, oracle_obj)});
    }

    {
        // Shortcut equivalence: block-output targets with the shortcut on both
        // sides give the identical correction as conv-output targets.
        const Matrix base_mat = kernel_matrix(block.conv2);
        NormalEqAccumulator conv_acc(base_mat.rows() + 1, base_mat.cols(), 64);
        NormalEqAccumulator block_acc(base_mat.rows() + 1, base_mat.cols(), 64);
        const Tensor4 u_pert = conv2_input(block, calib, perturbed);
        const PatchDesign design = unfold_patches(pad_nhwc(u_pert, block.pad), 3, 1);
        const Tensor4 u_base = conv2_input(block, calib, block.conv1);
        const Tensor4 conv_target = conv_nhwc(u_base, block.conv2, 1, block.pad);
        const Tensor4 shortcut = shortcut_output(block, calib);
        Tensor4 block_target = conv_target;
        block_target += shortcut;

        accumulate_chunk(conv_acc, design, flatten_spatial(conv_target), base_mat);
        accumulate_chunk(block_acc, design,
                         flatten_spatial(block_target) - flatten_spatial(shortcut), base_mat);
        const ConvCorrection c1 = solve_conv_correction(conv_acc, 1e-3, block.conv2);
        const ConvCorrection c2 = solve_conv_correction(block_acc, 1e-3, block.conv2);
        const double gap =
            std::max(tensor_rel_gap(c1.kernel_delta, c2.kernel_delta),
                     (c1.bias - c2.bias).norm() / std::max(c2.bias.norm(), 1e-300));
        results.push_back(
            {"conv/shortcut_equivalence", gap <= 1e-9, fmt("corrected-parameter rel gap %.3e", gap)});
    }

    {
        // Unperturbed conv1 leaves beta at zero and the block untouched.
        const NormalEqAccumulator acc = block_correction_system(block, calib, block.conv1, 64);
        const ConvCorrection corr = solve_conv_correction(acc, 1e-3, block.conv2);
        const double beta_scale = acc.beta.norm() / std::max(acc.h.norm(), 1.0);
        const double delta_scale = corr.kernel_delta.norm() + corr.bias.norm();
        const bool pass = beta_scale <= 1e-9 && delta_scale <= 1e-9;
        results.push_back({"conv/zero_perturbation_identity", pass,
                           fmt("beta %.3e, correction %.3e", beta_scale, delta_scale)});
    }

    {
        // Correction brings branch outputs back toward base at every sigma.
        const TinyConvNet net = random_tiny_conv_net(3, 4, 2, mix_seed(seed, 747));
        bool pass = true;
        std::string detail;
        for (const double sigma : {0.3, 1.0, 3.0}) {
            const auto members = build_conv_members(net, calib, {1}, 3, 6, sigma, 1e-3, 64,
                                                    mix_seed(seed, 748));
            // Evaluate block 1 on its upstream activations.
            const Tensor4 upstream = block_forward(net.blocks[0], calib);
            const Tensor4 base_out = block_forward(net.blocks[1], upstream);
            double corrected_gap = 0.0, uncorrected_gap = 0.0;
            for (const auto& repairs : members) {
                const auto& r = repairs.front();
                ConvBlockParams corrected;
                corrected.conv1 = net.blocks[1].conv1;
                corrected.conv1 += r.conv1_delta;
                corrected.conv2 = net.blocks[1].conv2;
                corrected.conv2 += r.correction.kernel_delta;
                corrected.conv2_bias = net.blocks[1].conv2_bias + r.correction.bias;
                ConvBlockParams uncorrected = corrected;
                uncorrected.conv2 = net.blocks[1].conv2;
                uncorrected.conv2_bias = net.blocks[1].conv2_bias;
                Tensor4 out_c = block_forward_with(net.blocks[1], corrected, upstream);
                Tensor4 out_u = block_forward_with(net.blocks[1], uncorrected, upstream);
                corrected_gap += tensor_rel_gap(out_c, base_out);
                uncorrected_gap += tensor_rel_gap(out_u, base_out);
            }
            if (!(corrected_gap < uncorrected_gap)) pass = false;
            detail += fmt("sigma %.1f: %.3e vs %.3e; ", sigma,
                          corrected_gap / static_cast<double>(members.size()),
                          uncorrected_gap / static_cast<double>(members.size()));
        }
        results.push_back({"conv/correction_restores_base_outputs", pass, detail});
    }
    return results;
}

std::vector<CheckResult> run_verify_suite(const std::string& name, std::uint64_t seed) {
    if (name == "lsq") return run_lsq_suite(seed);
    if (name == "sensitivity") return run_sensitivity_suite(seed);
    if (name == "sketch") return run_sketch_suite(seed);
    if (name == "mixture") return run_mixture_suite(seed);
    if (name == "conv") return run_conv_suite(seed);
    if (name == "all") {
        std::vector<CheckResult> all;
        for (const char* suite : {"lsq", "sensitivity", "sketch", "mixture", "conv"}) {
            auto part = run_verify_suite(suite, seed);
            all.insert(all.end(), part.begin(), part.end());
        }
        return all;
    }
    throw InvalidConfig("unknown verify suite: " + name);
}

}  // namespace pnc
