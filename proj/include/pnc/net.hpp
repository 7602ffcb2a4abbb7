#pragma once

#include "pnc/common.hpp"

#include <optional>
#include <vector>

namespace pnc {

enum class Activation { relu, tanh_act, identity };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);

struct MlpLayer {
    Matrix weight;  // d_out x d_in
    Vector bias;    // d_out
};

// Fully connected network: affine layers with a fixed elementwise nonlinearity
// between them; the last affine map is the output head and has no activation.
// Layer indices are 0-based; indices 0 .. layer_count()-2 are hidden.
class MlpModel {
public:
    MlpModel(std::vector<MlpLayer> layers, Activation activation);

    Index layer_count() const { return static_cast<Index>(layers_.size()); }
    Index hidden_layer_count() const { return layer_count() - 1; }
    Index input_dim() const { return layers_.front().weight.cols(); }
    Index output_dim() const { return layers_.back().weight.rows(); }
    Index hidden_dim(Index layer) const;
    Activation activation() const { return activation_; }
    const MlpLayer& layer(Index i) const;

    bool is_hidden_layer(Index i) const { return i >= 0 && i < hidden_layer_count(); }

    // Copy with layer i's weight (and optionally bias) replaced.
    MlpModel with_layer(Index i, Matrix weight, std::optional<Vector> bias = std::nullopt) const;

private:
    std::vector<MlpLayer> layers_;
    Activation activation_;
};

// Per-point forward capture. per_layer_post[l] = h_{l}(x), the post-activation
// of hidden layer l; per_layer_pre[l] is the matching pre-activation.
struct ActivationTrace {
    Vector input;
    std::vector<Vector> per_layer_pre;
    std::vector<Vector> per_layer_post;
    Vector output;
};

// Batched variant, one point per row.
struct BatchTrace {
    Matrix input;
    std::vector<Matrix> per_layer_pre;
    std::vector<Matrix> per_layer_post;
    Matrix output;
};

ActivationTrace forward_trace(const MlpModel& model, const Eigen::Ref<const Vector>& x);
BatchTrace forward_batch_trace(const MlpModel& model, const Eigen::Ref<const Matrix>& inputs);
Matrix forward_batch(const MlpModel& model, const Eigen::Ref<const Matrix>& inputs);

// Forward pass with W_l replaced by W_l + delta_w, all other parameters shared.
ActivationTrace perturbed_forward(const MlpModel& model, Index layer_index,
                                  const Eigen::Ref<const Matrix>& delta_w,
                                  const Eigen::Ref<const Vector>& x);
BatchTrace perturbed_forward_batch(const MlpModel& model, Index layer_index,
                                   const Eigen::Ref<const Matrix>& delta_w,
                                   const Eigen::Ref<const Matrix>& inputs);

// Representation with the constant bias coordinate prepended: [1; h_l(x)].
struct AugmentedRep {
    Vector values;  // values[0] == 1 exactly
};

AugmentedRep augmented_rep(const ActivationTrace& trace, Index layer_index);

// Row-major flatten/unflatten between a weight matrix and its flat direction
// space; the convention every basis and reshape in the library shares.
Vector flatten_rowmajor(const Eigen::Ref<const Matrix>& m);
Matrix unflatten_rowmajor(const Eigen::Ref<const Vector>& v, Index rows, Index cols);

enum class JacobianMethod { analytic, finite_difference };

// d/dv of the augmented representation [1; h_l(x)] under W_l -> W_l +
// reshape(U v), evaluated at v = 0. First row is identically zero.
struct RepJacobian {
    Matrix matrix;  // (d+1) x K
    JacobianMethod method;
    std::optional<double> fd_step;
    bool kink_proximal = false;  // relu pre-activation within 10*step of zero
};

RepJacobian rep_jacobian_fd(const MlpModel& model, Index layer_index,
                            const Eigen::Ref<const Matrix>& basis,
                            const Eigen::Ref<const Vector>& x, double step);

// Forward-mode Jacobian; exact wherever the activation is differentiable.
RepJacobian rep_jacobian_analytic(const MlpModel& model, Index layer_index,
                                  const Eigen::Ref<const Matrix>& basis,
                                  const Eigen::Ref<const Vector>& x);

struct TrainConfig {
    std::vector<Index> hidden_widths{200, 200, 200, 200};
    Activation activation = Activation::relu;
    Index steps = 5000;
    Index batch_size = 64;
    double learning_rate = 1e-3;
};

// Adam on MSE loss; fan-in-scaled Gaussian init; deterministic per seed.
MlpModel train_mlp(const Eigen::Ref<const Matrix>& inputs,
                   const Eigen::Ref<const Matrix>& targets, const TrainConfig& config,
                   std::uint64_t seed);

// Untrained fan-in-scaled Gaussian model (fixtures and probes).
MlpModel random_mlp(Index input_dim, const std::vector<Index>& hidden_widths, Index output_dim,
                    Activation activation, std::uint64_t seed);

double mse(const MlpModel& model, const Eigen::Ref<const Matrix>& inputs,
           const Eigen::Ref<const Matrix>& targets);

}  // namespace pnc
