#include "pnc/diagnostics.hpp"

#include "pnc/numerics.hpp"

#include <doctest.h>

using namespace pnc;

namespace {

Matrix ones_design(const Matrix& features) {
    Matrix d(features.rows(), features.cols() + 1);
    d.col(0).setOnes();
    d.rightCols(features.cols()) = features;
    return d;
}

}  // namespace

TEST_CASE("post_correction_residual vanishes for sigma zero members") {
    const MlpModel model = random_mlp(3, {7, 6}, 2, Activation::relu, 400);
    Rng rng(401);
    const Matrix calib = rng.gaussian_matrix(20, 3);
    PncConfig cfg;
    cfg.target_layers = {1};
    cfg.ensemble_size = 3;
    cfg.rank = 4;
    cfg.scale = 0.0;
    cfg.ridge = 1e-2;
    cfg.seed = 1;
    const PncEnsemble ens = build_single_layer(model, calib, cfg);
    for (Index m = 0; m < ens.size(); ++m) {
        const ResidualReport r = post_correction_residual(ens, m, rng.gaussian_vector(3));
        CHECK(r.magnitude <= 1e-12);
        CHECK(r.calib_shift <= 1e-12);
        CHECK(r.test_shift <= 1e-12);
    }
}

TEST_CASE("post_correction_residual interpolates calibration points") {
    const MlpModel model = random_mlp(3, {8}, 2, Activation::tanh_act, 402);
    Rng rng(403);
    const Matrix calib = rng.gaussian_matrix(9, 3);  // B = d+1, lambda = 0
    PncConfig cfg;
    cfg.target_layers = {0};
    cfg.ensemble_size = 2;
    cfg.rank = 4;
    cfg.scale = 0.3;
    cfg.ridge = 0.0;
    cfg.seed = 2;
    const PncEnsemble ens = build_single_layer(model, calib, cfg);
    for (Index m = 0; m < ens.size(); ++m)
        for (Index i = 0; i < calib.rows(); ++i) {
            const ResidualReport r =
                post_correction_residual(ens, m, calib.row(i).transpose());
            CHECK(r.magnitude <= 1e-7);
        }
}

TEST_CASE("post_correction_residual grows away from calibration") {
    const MlpModel model = random_mlp(3, {12, 10}, 2, Activation::tanh_act, 404);
    Rng rng(405);
    const Matrix calib = rng.gaussian_matrix(60, 3);
    PncConfig cfg;
    cfg.target_layers = {1};
    cfg.ensemble_size = 8;
    cfg.rank = 5;
    cfg.scale = 0.5;
    cfg.ridge = 1e-3;
    cfg.seed = 3;
    const PncEnsemble ens = build_single_layer(model, calib, cfg);
    std::vector<double> id_rho, ood_rho;
    for (Index m = 0; m < ens.size(); ++m) {
        for (int i = 0; i < 10; ++i) {
            id_rho.push_back(
                post_correction_residual(ens, m, calib.row(i).transpose()).magnitude);
            ood_rho.push_back(
                post_correction_residual(ens, m, 6.0 * rng.gaussian_vector(3)).magnitude);
        }
    }
    std::sort(id_rho.begin(), id_rho.end());
    std::sort(ood_rho.begin(), ood_rho.end());
    CHECK(ood_rho[ood_rho.size() / 2] > id_rho[id_rho.size() / 2]);
}

TEST_CASE("ridge_leverage equals one at calibration rows of a square design") {
    Rng rng(406);
    const Matrix features = rng.gaussian_matrix(8, 8);
    const Matrix design = ones_design(features);  // 8 x 9 ... need square: use 9 rows
    const Matrix features9 = rng.gaussian_matrix(9, 8);
    const Matrix design9 = ones_design(features9);
    for (Index i = 0; i < design9.rows(); ++i) {
        Vector ybar = design9.row(i).transpose();
        CHECK(ridge_leverage(ybar, design9, 0.0) == doctest::Approx(1.0).epsilon(1e-8));
    }
    (void)design;
}

TEST_CASE("ridge_leverage decreases monotonically in lambda") {
    Rng rng(407);
    const Matrix design = ones_design(rng.gaussian_matrix(30, 6));
    Vector ybar(7);
    ybar[0] = 1.0;
    ybar.tail(6) = rng.gaussian_vector(6);
    double prev = std::numeric_limits<double>::infinity();
    for (const double ridge : {0.0, 0.1, 1.0, 10.0, 1e3}) {
        const double h = ridge_leverage(ybar, design, ridge);
        CHECK(h >= 0.0);
        CHECK(h <= prev * (1.0 + 1e-12));
        prev = h;
    }
}

TEST_CASE("leverage sums to the design width on overdetermined designs") {
    Rng rng(408);
    const Matrix design = ones_design(rng.gaussian_matrix(200, 20));
    double total = 0.0;
    for (Index i = 0; i < design.rows(); ++i)
        total += ridge_leverage(design.row(i).transpose(), design, 0.0);
    CHECK(total == doctest::Approx(21.0).epsilon(1e-8));
}

TEST_CASE("hat_weights pick out the basis vector at calibration rows") {
    Rng rng(409);
    const Matrix design = ones_design(rng.gaussian_matrix(9, 8));
    for (Index i = 0; i < 9; ++i) {
        const Vector w = hat_weights(design.row(i).transpose(), design, 0.0);
        Vector expected = Vector::Zero(9);
        expected[i] = 1.0;
        CHECK((w - expected).cwiseAbs().maxCoeff() <= 1e-7);
    }
}

TEST_CASE("hat weight norm equals leverage at lambda zero") {
    Rng rng(410);
    const Matrix design = ones_design(rng.gaussian_matrix(25, 7));
    Vector ybar(8);
    ybar[0] = 1.0;
    ybar.tail(7) = rng.gaussian_vector(7);
    const Vector w = hat_weights(ybar, design, 0.0);
    const double h = ridge_leverage(ybar, design, 0.0);
    CHECK(w.squaredNorm() == doctest::Approx(h).epsilon(1e-8));
}

TEST_CASE("corrected_sensitivity vanishes at calibration points and for zero theta") {
    const MlpModel model = random_mlp(3, {8}, 2, Activation::tanh_act, 411);
    Rng rng(412);
    const Matrix calib = rng.gaussian_matrix(9, 3);
    const Matrix basis = orthonormal_basis(model.layer(0).weight.size(), 4, 413);
    const SensitivityContext ctx(model, 0, basis, calib, 0.0);
    // x equal to a calibration point: T == J_x, so A == 0.
    const SensitivityReport rep = ctx.at(calib.row(4).transpose());
    CHECK((rep.predicted_jacobian - rep.test_jacobian).norm() <=
          1e-7 * (1.0 + rep.test_jacobian.norm()));
    CHECK(rep.sensitivity.norm() <= 1e-6 * (1.0 + rep.test_jacobian.norm()));

    const std::vector<Matrix> zeros(9, Matrix::Zero(rep.test_jacobian.rows(),
                                                    rep.test_jacobian.cols()));
    const Matrix a =
        corrected_sensitivity(Matrix::Zero(2, 9), rep.test_jacobian, rep.hat_weights, zeros);
    CHECK(a.norm() == 0.0);
}

TEST_CASE("corrected_sensitivity explicit sum matches context") {
    const MlpModel model = random_mlp(3, {6, 5}, 2, Activation::tanh_act, 414);
    Rng rng(415);
    const Matrix calib = rng.gaussian_matrix(14, 3);
    const Matrix basis = orthonormal_basis(model.layer(1).weight.size(), 4, 416);
    const SensitivityContext ctx(model, 1, basis, calib, 1e-2);
    const Vector x = rng.gaussian_vector(3);
    const SensitivityReport rep = ctx.at(x);

    std::vector<Matrix> jacobians;
    for (Index i = 0; i < calib.rows(); ++i)
        jacobians.push_back(
            rep_jacobian_analytic(model, 1, basis, calib.row(i).transpose()).matrix);
    const auto& next = model.layer(2);
    Matrix theta(next.weight.rows(), next.weight.cols() + 1);
    theta.col(0) = next.bias;
    theta.rightCols(next.weight.cols()) = next.weight;
    const Matrix a = corrected_sensitivity(theta, rep.test_jacobian, rep.hat_weights, jacobians);
    CHECK((a - rep.sensitivity).norm() <= 1e-10 * (1.0 + a.norm()));
}

TEST_CASE("sketch_variance trivial cases") {
    const Matrix zero = Matrix::Zero(3, 4);
    const SketchReport rz = sketch_variance(zero, 1.0, 10, 0);
    CHECK(rz.estimate == 0.0);
    CHECK(rz.exact == 0.0);

    const SketchReport ri = sketch_variance(Matrix::Identity(8, 8), 1.0, 20000, 1);
    CHECK(ri.eff_rank == doctest::Approx(8.0).epsilon(1e-12));
    CHECK(ri.estimate == doctest::Approx(8.0).epsilon(0.05));
    CHECK(ri.exact == doctest::Approx(8.0));
}

TEST_CASE("effective rank of flat and rank-one spectra") {
    Matrix flat = Matrix::Zero(6, 6);
    flat.diagonal().head(3).setConstant(2.0);  // three equal singular values
    CHECK(effective_rank_map(flat) == doctest::Approx(3.0).epsilon(1e-12));

    Rng rng(417);
    const Vector u = rng.gaussian_vector(5);
    const Vector v = rng.gaussian_vector(7);
    CHECK(effective_rank_map(u * v.transpose()) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("effective rank agrees with eigenvalue participation ratio") {
    Rng rng(418);
    const Matrix a = rng.gaussian_matrix(6, 9);
    const Matrix c = a * a.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> es(c);
    const Vector lam = es.eigenvalues();
    const double participation = lam.sum() * lam.sum() / lam.squaredNorm();
    CHECK(effective_rank_map(a) == doctest::Approx(participation).epsilon(1e-9));
    CHECK(effective_rank_psd(c) == doctest::Approx(effective_rank_map(a)).epsilon(1e-10));
}

TEST_CASE("effective rank error paths") {
    CHECK_THROWS_AS(effective_rank_map(Matrix::Zero(3, 3)), ZeroMatrix);
    Matrix asym(2, 2);
    asym << 1.0, 2.0, 0.0, 1.0;
    CHECK_THROWS_AS(effective_rank_psd(asym), NotPsd);
}

TEST_CASE("mixture_rank identical members collapse to single-member rank") {
    Rng rng(419);
    const Matrix a = rng.gaussian_matrix(6, 3);
    const Matrix c = a * a.transpose();
    const MixtureRankReport rep = mixture_rank({c, c, c, c});
    CHECK(rep.avg_alignment == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rep.measured_eff_rank == doctest::Approx(effective_rank_psd(c)).epsilon(1e-10));
    CHECK(rep.formula_prediction == doctest::Approx(rep.measured_eff_rank).epsilon(1e-9));
    CHECK(rep.equal_trace_norm);
}

TEST_CASE("mixture_rank orthogonal equal blocks multiply the rank") {
    const Index m = 4, s = 2, q = 8;
    std::vector<Matrix> covs;
    for (Index j = 0; j < m; ++j) {
        Matrix c = Matrix::Zero(q, q);
        for (Index i = 0; i < s; ++i) c(j * s + i, j * s + i) = 1.0;
        covs.push_back(c);
    }
    const MixtureRankReport rep = mixture_rank(covs);
    CHECK(rep.avg_alignment == doctest::Approx(0.0));
    CHECK(rep.measured_eff_rank == doctest::Approx(static_cast<double>(m * s)).epsilon(1e-12));
    CHECK(rep.formula_prediction == doctest::Approx(rep.measured_eff_rank).epsilon(1e-9));
}

TEST_CASE("mixture_rank flags unequal trace or norm") {
    Rng rng(420);
    const Matrix a = rng.gaussian_matrix(5, 5);
    const Matrix c = a * a.transpose();
    const MixtureRankReport rep = mixture_rank({c, 2.0 * c});
    CHECK_FALSE(rep.equal_trace_norm);
    CHECK(rep.avg_alignment == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("mixture_rank validates shapes and psd") {
    Rng rng(421);
    const Matrix c = Matrix::Identity(3, 3);
    CHECK_THROWS_AS(mixture_rank({c, Matrix::Identity(4, 4)}), ShapeMismatch);
    Matrix asym(3, 3);
    asym << 1, 1, 0, 0, 1, 0, 0, 0, 1;
    CHECK_THROWS_AS(mixture_rank({c, asym}), NotPsd);
}

TEST_CASE("mahalanobis distance is zero at the calibration mean") {
    Rng rng(422);
    const Matrix calib = rng.gaussian_matrix(50, 4);
    const Vector mean = calib.colwise().mean().transpose();
    CHECK(mahalanobis_hidden(mean, calib) <= 1e-10);
}

TEST_CASE("mahalanobis reduces to Euclidean under identity covariance") {
    // Four points scaled so the empirical covariance is exactly identity.
    Matrix calib(4, 2);
    const double s = std::sqrt(1.5);
    calib << s, 0, -s, 0, 0, s, 0, -s;
    Vector x(2);
    x << 0.3, -0.4;
    CHECK(mahalanobis_hidden(x, calib, 0.0) == doctest::Approx(x.norm()).epsilon(1e-12));
}

TEST_CASE("mahalanobis throws on singular covariance without regularizer") {
    Matrix calib(3, 2);
    calib << 1.0, 2.0, 1.0, 2.0, 1.0, 2.0;  // identical rows
    Vector x(2);
    x << 0.0, 0.0;
    CHECK_THROWS_AS(mahalanobis_hidden(x, calib, 0.0), DegenerateCovariance);
    CHECK_THROWS_AS(mahalanobis_hidden(x, Matrix::Zero(1, 2)), EmptyCalibration);
}

TEST_CASE("floor check on a linear network has zero quadratic term") {
    const MlpModel model = random_mlp(2, {5}, 2, Activation::identity, 423);
    Rng rng(424);
    const Matrix calib = rng.gaussian_matrix(10, 2);
    const Matrix basis = orthonormal_basis(model.layer(0).weight.size(), 3, 425);
    const FloorCheckReport rep = local_residual_floor_check(
        model, 0, basis, calib, 1e-3, rng.gaussian_vector(2), 0.05, 0.12, 80, 426);
    CHECK(rep.holds);
    CHECK(rep.c4_hat <= 1e-12);  // roundoff-level quadratic remainder only
    CHECK(rep.lhs >= rep.rhs);
}

TEST_CASE("floor check is vacuous when sensitivity is zero") {
    MlpModel model = random_mlp(2, {5}, 2, Activation::tanh_act, 427);
    model = model.with_layer(1, Matrix::Zero(2, 5), Vector::Zero(2));
    Rng rng(428);
    const Matrix calib = rng.gaussian_matrix(10, 2);
    const Matrix basis = orthonormal_basis(model.layer(0).weight.size(), 3, 429);
    const FloorCheckReport rep = local_residual_floor_check(
        model, 0, basis, calib, 1e-3, rng.gaussian_vector(2), 0.05, 0.12, 40, 430);
    CHECK(rep.sensitivity_frob_sq <= 1e-20);
    CHECK(rep.rhs <= 0.0);
    CHECK(rep.holds);
}

TEST_CASE("floor check starves when the truncation radius is unreachable") {
    const MlpModel model = random_mlp(2, {5}, 2, Activation::tanh_act, 431);
    Rng rng(432);
    const Matrix calib = rng.gaussian_matrix(10, 2);
    const Matrix basis = orthonormal_basis(model.layer(0).weight.size(), 3, 433);
    CHECK_THROWS_AS(local_residual_floor_check(model, 0, basis, calib, 1e-3,
                                               rng.gaussian_vector(2), 1.0, 1e-8, 40, 434),
                    RejectionStarvation);
}
