#pragma once

#include "pnc/pnc.hpp"

#include <optional>
#include <string>

namespace pnc {

// Uniform-mixture predictive distribution at one input.
struct PredictiveDistribution {
    Vector mean;          // average of member means
    Vector variance;      // member-mean variance + noise floor, per output dim
    Matrix member_means;  // M x q
    double disagreement;  // trace of the member-mean covariance
};

struct BatchPrediction {
    Matrix mean;          // N x q
    Matrix variance;      // N x q
    Vector disagreement;  // N
};

PredictiveDistribution predict(const PncEnsemble& ensemble, const Eigen::Ref<const Vector>& x,
                               const Eigen::Ref<const Vector>& noise_floor);

BatchPrediction predict_batch(const PncEnsemble& ensemble, const Eigen::Ref<const Matrix>& inputs,
                              const Eigen::Ref<const Vector>& noise_floor);

// Per-output-dim residual variance of the base model, the aleatoric floor
// added to every predictive variance.
Vector noise_floor_from_base(const MlpModel& model, const Eigen::Ref<const Matrix>& inputs,
                             const Eigen::Ref<const Matrix>& targets);

// Mean over output dims of 0.5 [log(2 pi s^2) + (y - mu)^2 / s^2].
double gaussian_nll(const PredictiveDistribution& pred, const Eigen::Ref<const Vector>& target);
double mean_gaussian_nll(const BatchPrediction& pred, const Eigen::Ref<const Matrix>& targets);

double rmse(const Eigen::Ref<const Matrix>& predictions, const Eigen::Ref<const Matrix>& targets);

// Probability a random OOD score exceeds a random ID score, ties half;
// computed exactly from midranks.
double auroc(const std::vector<double>& scores_id, const std::vector<double>& scores_ood);

// Pearson correlation of midranked values.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

struct EvalSplit {
    std::string name;
    Matrix inputs;
    Matrix targets;
};

struct SplitMetrics {
    std::string name;
    double rmse;
    double nll;
    std::optional<double> auroc_vs_id;       // absent for the ID split
    std::optional<double> spearman_unc_err;  // absent for the ID split
};

struct EvalReport {
    std::vector<SplitMetrics> splits;
};

// Full metric stack: RMSE/NLL per split plus AUROC(id vs split) and
// Spearman(disagreement, |error|) per shifted split.
EvalReport evaluate_splits(const PncEnsemble& ensemble, const EvalSplit& id_split,
                           const std::vector<EvalSplit>& shifted_splits,
                           const Eigen::Ref<const Vector>& noise_floor);

}  // namespace pnc
