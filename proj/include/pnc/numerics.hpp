#pragma once

#include "pnc/common.hpp"

namespace pnc {

// Ridge-shifted symmetric positive-definite system G + shift*I.
struct SpdSystem {
    Matrix gram;   // square, symmetric within 1e-10 relative
    double shift;  // ridge lambda >= 0

    SpdSystem(Matrix gram_in, double shift_in);
};

// Solves (gram + shift*I) X = rhs via Cholesky after symmetrizing the Gram.
// Throws SingularSystem when the shifted matrix is not numerically positive
// definite (rank-deficient design with lambda = 0).
Matrix spd_solve(const SpdSystem& system, const Eigen::Ref<const Matrix>& rhs);

// Smallest eigenvalue of gram + shift*I (conditioning report for solves).
double spd_min_eigenvalue(const SpdSystem& system);

// Column-orthonormalizes a matrix via Householder QR with the sign of each
// column fixed so the factorization is idempotent on already-orthonormal input.
Matrix orthonormalize(const Eigen::Ref<const Matrix>& m);

// Random orthonormal basis: QR of a seeded Gaussian matrix, flat_dim x rank.
Matrix orthonormal_basis(Index flat_dim, Index rank, std::uint64_t seed);

struct FrobeniusProducts {
    double inner;
    double norm_a;
    double norm_b;
};

// Elementwise inner product and Frobenius norms of two same-shape matrices.
FrobeniusProducts frobenius_products(const Eigen::Ref<const Matrix>& a,
                                     const Eigen::Ref<const Matrix>& b);

}  // namespace pnc
