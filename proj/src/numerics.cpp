#include "pnc/numerics.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>

namespace pnc {

SpdSystem::SpdSystem(Matrix gram_in, double shift_in) : gram(std::move(gram_in)), shift(shift_in) {
    if (gram.rows() != gram.cols()) throw ShapeMismatch("SpdSystem: gram must be square");
    require_finite(gram, "SpdSystem gram");
    if (!(shift >= 0.0)) throw InvalidConfig("SpdSystem: shift must be >= 0");
    const double scale = gram.cwiseAbs().maxCoeff();
    const double asym = (gram - gram.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-10 * std::max(scale, 1.0))
        throw ShapeMismatch("SpdSystem: gram not symmetric within tolerance");
}

namespace {

// Chunked accumulation introduces ulp-level asymmetries; fold them out before
// factorizing so LLT sees an exactly symmetric matrix.
Matrix shifted_symmetric(const SpdSystem& system) {
    Matrix a = 0.5 * (system.gram + system.gram.transpose());
    a.diagonal().array() += system.shift;
    return a;
}

}  // namespace

Matrix spd_solve(const SpdSystem& system, const Eigen::Ref<const Matrix>& rhs) {
    if (rhs.rows() != system.gram.rows())
        throw ShapeMismatch("spd_solve: rhs row count must equal gram dimension");
    require_finite(rhs, "spd_solve rhs");

    const Matrix a = shifted_symmetric(system);
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success)
        throw SingularSystem("spd_solve: shifted gram is not positive definite");
    Matrix x = llt.solve(rhs);

    // One refinement step, then reject solutions that still miss the
    // 1e-9 relative residual contract (near-singular but factorizable systems).
    Matrix resid = rhs - a * x;
    x += llt.solve(resid);
    resid = rhs - a * x;
    const double rhs_norm = rhs.norm();
    if (rhs_norm > 0.0 && resid.norm() > 1e-9 * (rhs_norm + a.norm() * x.norm()))
        throw SingularSystem("spd_solve: residual exceeds tolerance, system numerically singular");
    return x;
}

double spd_min_eigenvalue(const SpdSystem& system) {
    const Matrix a = shifted_symmetric(system);
    Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

Matrix orthonormalize(const Eigen::Ref<const Matrix>& m) {
    if (m.cols() > m.rows())
        throw InvalidRank("orthonormalize: more columns than rows");
    Eigen::HouseholderQR<Matrix> qr(m);
    Matrix q = qr.householderQ() * Matrix::Identity(m.rows(), m.cols());
    // Fix column signs so diag(R) >= 0; makes the map idempotent.
    const Matrix r = qr.matrixQR().topRows(m.cols()).triangularView<Eigen::Upper>();
    for (Index j = 0; j < m.cols(); ++j)
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    return q;
}

Matrix orthonormal_basis(Index flat_dim, Index rank, std::uint64_t seed) {
    if (rank > flat_dim)
        throw InvalidRank("orthonormal_basis: rank exceeds flat dimension");
    if (rank < 1) throw InvalidRank("orthonormal_basis: rank must be >= 1");
    Rng rng(mix_seed(seed, 0x6261736973ULL));  // "basis"
    return orthonormalize(rng.gaussian_matrix(flat_dim, rank));
}

FrobeniusProducts frobenius_products(const Eigen::Ref<const Matrix>& a,
                                     const Eigen::Ref<const Matrix>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeMismatch("frobenius_products: shapes differ");
    FrobeniusProducts out;
    out.inner = (a.array() * b.array()).sum();
    out.norm_a = a.norm();
    out.norm_b = b.norm();
    return out;
}

}  // namespace pnc
