#include "pnc/ensemble_eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pnc {

namespace {
constexpr double kTwoPi = 2.0 * 3.14159265358979323846;
}

BatchPrediction predict_batch(const PncEnsemble& ensemble, const Eigen::Ref<const Matrix>& inputs,
                              const Eigen::Ref<const Vector>& noise_floor) {
    const Index m_count = ensemble.size();
    const Index n = inputs.rows();
    const Index q = ensemble.base().output_dim();
    if (noise_floor.size() != q)
        throw ShapeMismatch("predict_batch: noise floor length != output dim");

    std::vector<Matrix> outputs;
    outputs.reserve(static_cast<std::size_t>(m_count));
    Matrix sum = Matrix::Zero(n, q);
    for (Index m = 0; m < m_count; ++m) {
        outputs.push_back(forward_batch(ensemble.member_model(m), inputs));
        sum += outputs.back();
    }

    BatchPrediction pred;
    pred.mean = sum / static_cast<double>(m_count);
    // Two-pass spread: exact zero when members coincide.
    Matrix spread = Matrix::Zero(n, q);
    for (const Matrix& out : outputs) {
        const Matrix diff = out - pred.mean;
        spread += diff.cwiseProduct(diff);
    }
    spread /= static_cast<double>(m_count);
    pred.disagreement = spread.rowwise().sum();
    pred.variance = spread;
    pred.variance.rowwise() += noise_floor.transpose();
    return pred;
}

PredictiveDistribution predict(const PncEnsemble& ensemble, const Eigen::Ref<const Vector>& x,
                               const Eigen::Ref<const Vector>& noise_floor) {
    const Index m_count = ensemble.size();
    const Index q = ensemble.base().output_dim();
    if (noise_floor.size() != q) throw ShapeMismatch("predict: noise floor length != output dim");

    PredictiveDistribution pred;
    pred.member_means.resize(m_count, q);
    for (Index m = 0; m < m_count; ++m) {
        const ActivationTrace t = forward_trace(ensemble.member_model(m), x);
        pred.member_means.row(m) = t.output.transpose();
    }
    pred.mean = pred.member_means.colwise().mean().transpose();
    Vector spread = (pred.member_means.rowwise() - pred.mean.transpose())
                        .array()
                        .square()
                        .colwise()
                        .mean()
                        .transpose();
    spread = spread.cwiseMax(0.0);
    pred.disagreement = spread.sum();
    pred.variance = spread + noise_floor;
    return pred;
}

Vector noise_floor_from_base(const MlpModel& model, const Eigen::Ref<const Matrix>& inputs,
                             const Eigen::Ref<const Matrix>& targets) {
    if (inputs.rows() == 0) throw EmptyInput("noise_floor_from_base: empty data");
    const Matrix pred = forward_batch(model, inputs);
    return (pred - targets).array().square().colwise().mean().transpose();
}

namespace {

double nll_row(const Eigen::Ref<const Vector>& mean, const Eigen::Ref<const Vector>& variance,
               const Eigen::Ref<const Vector>& target) {
    double total = 0.0;
    for (Index j = 0; j < mean.size(); ++j) {
        const double var = variance[j];
        if (!(var > 0.0)) throw NonPositiveVariance("gaussian_nll: variance must be positive");
        const double diff = target[j] - mean[j];
        total += 0.5 * (std::log(kTwoPi * var) + diff * diff / var);
    }
    return total / static_cast<double>(mean.size());
}

}  // namespace

double gaussian_nll(const PredictiveDistribution& pred, const Eigen::Ref<const Vector>& target) {
    if (target.size() != pred.mean.size()) throw ShapeMismatch("gaussian_nll: target size");
    return nll_row(pred.mean, pred.variance, target);
}

double mean_gaussian_nll(const BatchPrediction& pred, const Eigen::Ref<const Matrix>& targets) {
    if (targets.rows() != pred.mean.rows() || targets.cols() != pred.mean.cols())
        throw ShapeMismatch("mean_gaussian_nll: target shape");
    double total = 0.0;
    for (Index i = 0; i < targets.rows(); ++i)
        total += nll_row(pred.mean.row(i).transpose(), pred.variance.row(i).transpose(),
                         targets.row(i).transpose());
    return total / static_cast<double>(targets.rows());
}

double rmse(const Eigen::Ref<const Matrix>& predictions, const Eigen::Ref<const Matrix>& targets) {
    if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols())
        throw ShapeMismatch("rmse: shape mismatch");
    if (predictions.rows() == 0) throw EmptyInput("rmse: empty");
    return std::sqrt((predictions - targets).squaredNorm() /
                     static_cast<double>(predictions.size()));
}

namespace {

// Midranks (average rank for ties), 1-based.
std::vector<double> midranks(const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double auroc(const std::vector<double>& scores_id, const std::vector<double>& scores_ood) {
    if (scores_id.empty() || scores_ood.empty()) throw EmptyInput("auroc: empty score set");
    std::vector<double> combined = scores_id;
    combined.insert(combined.end(), scores_ood.begin(), scores_ood.end());
    const std::vector<double> ranks = midranks(combined);
    double rank_sum_ood = 0.0;
    for (std::size_t i = 0; i < scores_ood.size(); ++i)
        rank_sum_ood += ranks[scores_id.size() + i];
    const double n_o = static_cast<double>(scores_ood.size());
    const double n_i = static_cast<double>(scores_id.size());
    const double u = rank_sum_ood - n_o * (n_o + 1.0) / 2.0;
    return u / (n_i * n_o);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw LengthMismatch("spearman: length mismatch");
    if (a.size() < 2) throw LengthMismatch("spearman: need >= 2 samples");
    const std::vector<double> ra = midranks(a);
    const std::vector<double> rb = midranks(b);
    const std::size_t n = a.size();
    double mean_a = 0.0, mean_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_a += ra[i];
        mean_b += rb[i];
    }
    mean_a /= static_cast<double>(n);
    mean_b /= static_cast<double>(n);
    double cov = 0.0, var_a = 0.0, var_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = ra[i] - mean_a;
        const double db = rb[i] - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if (var_a == 0.0 || var_b == 0.0) throw ZeroVariance("spearman: constant ranks");
    return cov / std::sqrt(var_a * var_b);
}

EvalReport evaluate_splits(const PncEnsemble& ensemble, const EvalSplit& id_split,
                           const std::vector<EvalSplit>& shifted_splits,
                           const Eigen::Ref<const Vector>& noise_floor) {
    if (id_split.inputs.rows() == 0) throw EmptyInput("evaluate_splits: empty ID split");

    EvalReport report;
    const BatchPrediction id_pred = predict_batch(ensemble, id_split.inputs, noise_floor);
    std::vector<double> id_scores(id_pred.disagreement.data(),
                                  id_pred.disagreement.data() + id_pred.disagreement.size());
    report.splits.push_back(SplitMetrics{id_split.name, rmse(id_pred.mean, id_split.targets),
                                         mean_gaussian_nll(id_pred, id_split.targets),
                                         std::nullopt, std::nullopt});

    for (const auto& split : shifted_splits) {
        const BatchPrediction pred = predict_batch(ensemble, split.inputs, noise_floor);
        std::vector<double> scores(pred.disagreement.data(),
                                   pred.disagreement.data() + pred.disagreement.size());
        std::vector<double> errors;
        errors.reserve(static_cast<std::size_t>(split.inputs.rows()));
        for (Index i = 0; i < split.inputs.rows(); ++i)
            errors.push_back((pred.mean.row(i) - split.targets.row(i)).norm());
        std::optional<double> rank_corr;
        try {
            rank_corr = spearman(scores, errors);
        } catch (const ZeroVariance&) {
            // Zero-spread ensembles have constant disagreement; leave absent.
        }
        report.splits.push_back(SplitMetrics{
            split.name, rmse(pred.mean, split.targets), mean_gaussian_nll(pred, split.targets),
            auroc(id_scores, scores), rank_corr});
    }
    return report;
}

}  // namespace pnc
