#include "pnc/verify.hpp"

#include "pnc/diagnostics.hpp"
#include "pnc/numerics.hpp"

#include <doctest.h>

using namespace pnc;

TEST_CASE("lsq_oracle converges immediately when nothing moved") {
    Rng rng(500);
    Matrix x(12, 5);
    x.col(0).setOnes();
    x.rightCols(4) = rng.gaussian_matrix(12, 4);
    const Matrix theta = rng.gaussian_matrix(2, 5);
    const OracleConfig cfg;
    const Matrix oracle = lsq_oracle(x, x, theta, 0.0, cfg);
    CHECK((oracle - theta).norm() <= 1e-10 * theta.norm());
}

TEST_CASE("lsq_oracle scalar instance has the textbook solution") {
    Matrix xv(1, 1), x(1, 1), theta(1, 1);
    xv << 2.0;
    x << 1.0;
    theta << 1.0;
    const OracleConfig cfg;
    const Matrix oracle = lsq_oracle(xv, x, theta, 0.0, cfg);
    CHECK(oracle(0, 0) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("closed form never loses to the descent oracle") {
    Rng rng(501);
    const OracleConfig cfg;
    for (const Index rows : {Index(6), Index(25)}) {
        Matrix x(rows, 6);
        x.col(0).setOnes();
        x.rightCols(5) = rng.gaussian_matrix(rows, 5);
        Matrix xv = x;
        xv.rightCols(5) += 0.15 * rng.gaussian_matrix(rows, 5);
        const Matrix theta = rng.gaussian_matrix(2, 6);
        const double ridge = 1e-2;

        CorrectionSystem sys;
        sys.design = xv;
        sys.reference_design = x;
        sys.base_theta = theta;
        sys.targets = x * theta.transpose();
        sys.ridge = ridge;
        const CorrectionResult closed = solve_correction(sys);
        const Matrix oracle = lsq_oracle(xv, x, theta, ridge, cfg);
        const double closed_obj = correction_objective(xv, x, theta, closed.corrected_theta, ridge);
        const double oracle_obj = correction_objective(xv, x, theta, oracle, ridge);
        CHECK(closed_obj <= oracle_obj + 1e-8 * (1.0 + oracle_obj));
    }
}

TEST_CASE("sensitivity_fd_oracle is exact on linear networks") {
    const MlpModel model = random_mlp(3, {6}, 2, Activation::identity, 502);
    Rng rng(503);
    const Matrix calib = rng.gaussian_matrix(15, 3);
    const Matrix basis = orthonormal_basis(model.layer(0).weight.size(), 4, 504);
    const Vector x = rng.gaussian_vector(3);
    const Matrix fd = sensitivity_fd_oracle(model, 0, basis, calib, 1e-3, x, 1e-4);
    const SensitivityReport rep = sensitivity_report(model, 0, basis, calib, 1e-3, x);
    CHECK((fd - rep.sensitivity).norm() <= 1e-8 * (1.0 + rep.sensitivity.norm()));
}

TEST_CASE("sensitivity_fd_oracle vanishes when the downstream layer is zero") {
    MlpModel model = random_mlp(3, {6}, 2, Activation::tanh_act, 505);
    model = model.with_layer(1, Matrix::Zero(2, 6), Vector::Zero(2));
    Rng rng(506);
    const Matrix calib = rng.gaussian_matrix(15, 3);
    const Matrix basis = orthonormal_basis(model.layer(0).weight.size(), 4, 507);
    const Matrix fd =
        sensitivity_fd_oracle(model, 0, basis, calib, 1e-3, rng.gaussian_vector(3), 1e-4);
    CHECK(fd.norm() <= 1e-10);
}

TEST_CASE("fd oracle is step consistent and brackets the analytic value") {
    const MlpModel model = random_mlp(3, {8, 6}, 2, Activation::tanh_act, 508);
    Rng rng(509);
    const Matrix calib = rng.gaussian_matrix(25, 3);
    const Matrix basis = orthonormal_basis(model.layer(1).weight.size(), 4, 510);
    const Vector x = rng.gaussian_vector(3);
    const Matrix fd4 = sensitivity_fd_oracle(model, 1, basis, calib, 1e-2, x, 1e-4);
    const Matrix fd5 = sensitivity_fd_oracle(model, 1, basis, calib, 1e-2, x, 1e-5);
    const SensitivityReport rep = sensitivity_report(model, 1, basis, calib, 1e-2, x);
    const double scale = 1.0 + fd5.norm();
    CHECK((fd4 - fd5).norm() <= 1e-5 * scale);
    CHECK((rep.sensitivity - fd4).norm() <= 1e-4 * scale);
    CHECK((rep.sensitivity - fd5).norm() <= 1e-4 * scale);
}

TEST_CASE("mc_moment_oracle on a zero map") {
    const McMoments mc = mc_moment_oracle(Matrix::Zero(3, 3), 1.0, 10, 100, 0);
    CHECK(mc.mean == 0.0);
    CHECK(mc.variance == 0.0);
}

TEST_CASE("mc_moment_oracle matches chi-square moments for a rank-one map") {
    Matrix a = Matrix::Zero(1, 4);
    a(0, 0) = 1.0;  // V-hat averages v1^2 draws: mean 1, Var(V_n) = 2/n
    const Index n = 50;
    const McMoments mc = mc_moment_oracle(a, 1.0, n, 1000, 7);
    CHECK(std::abs(mc.mean - 1.0) <= 4.0 * mc.se_mean);
    const double ratio = mc.variance / (2.0 / static_cast<double>(n));
    CHECK(ratio >= 0.8);
    CHECK(ratio <= 1.25);
}

TEST_CASE("mc_moment_oracle requires enough repetitions") {
    CHECK_THROWS_AS(mc_moment_oracle(Matrix::Identity(2, 2), 1.0, 10, 50, 0), InvalidConfig);
}

TEST_CASE("id_bound_witness on a sigma-zero ensemble") {
    const MlpModel model = random_mlp(3, {7, 6}, 2, Activation::relu, 511);
    Rng rng(512);
    const Matrix calib = rng.gaussian_matrix(30, 3);
    PncConfig cfg;
    cfg.target_layers = {1};
    cfg.ensemble_size = 3;
    cfg.rank = 4;
    cfg.scale = 0.0;
    cfg.ridge = 1e-2;
    cfg.seed = 4;
    const PncEnsemble ens = build_single_layer(model, calib, cfg);
    const Matrix id_points = rng.gaussian_matrix(8, 3);
    const Matrix ood_points = 4.0 * rng.gaussian_matrix(8, 3);
    const WitnessReport rep = id_bound_witness(ens, calib, id_points, ood_points);
    for (const auto& row : rep.rows) CHECK(row.rho <= 1e-10);
    CHECK(rep.c1 >= 0.0);
    CHECK(rep.c2 >= 0.0);
    CHECK(rep.c3 >= 0.0);
}

TEST_CASE("id_bound_witness envelope covers the ID rows it was fit on") {
    const MlpModel model = random_mlp(3, {9, 7}, 2, Activation::tanh_act, 513);
    Rng rng(514);
    const Matrix calib = rng.gaussian_matrix(40, 3);
    PncConfig cfg;
    cfg.target_layers = {0};
    cfg.ensemble_size = 5;
    cfg.rank = 4;
    cfg.scale = 0.4;
    cfg.ridge = 1e-3;
    cfg.seed = 5;
    const PncEnsemble ens = build_single_layer(model, calib, cfg);
    const Matrix id_points = rng.gaussian_matrix(12, 3);
    const Matrix ood_points = 5.0 * rng.gaussian_matrix(12, 3);
    const WitnessReport rep = id_bound_witness(ens, calib, id_points, ood_points);
    CHECK(rep.id_exceed_fraction == 0.0);
    CHECK(rep.rows.size() == static_cast<std::size_t>(2 * 12 * ens.size()));
}

TEST_CASE("run_verify_suite rejects unknown suites") {
    CHECK_THROWS_AS(run_verify_suite("nonsense", 0), InvalidConfig);
}

TEST_CASE("lsq and mixture suites pass end to end") {
    for (const auto* name : {"lsq", "mixture"}) {
        const auto results = run_verify_suite(name, 0);
        for (const auto& r : results) {
            INFO(r.name, ": ", r.detail);
            CHECK(r.pass);
        }
    }
}
