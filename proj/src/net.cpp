#include "pnc/net.hpp"

#include <algorithm>
#include <cmath>

namespace pnc {

const char* activation_name(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh_act: return "tanh";
        case Activation::identity: return "identity";
    }
    return "relu";
}

Activation activation_from_name(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh_act;
    if (name == "identity") return Activation::identity;
    throw InvalidConfig("unknown activation: " + name);
}

namespace {

Matrix apply_activation(Activation a, const Matrix& pre) {
    switch (a) {
        case Activation::relu: return pre.cwiseMax(0.0);
        case Activation::tanh_act: return pre.array().tanh().matrix();
        case Activation::identity: return pre;
    }
    return pre;
}

Matrix activation_derivative(Activation a, const Matrix& pre) {
    switch (a) {
        case Activation::relu:
            return (pre.array() > 0.0).cast<double>().matrix();
        case Activation::tanh_act:
            return (1.0 - pre.array().tanh().square()).matrix();
        case Activation::identity:
            return Matrix::Ones(pre.rows(), pre.cols());
    }
    return Matrix::Ones(pre.rows(), pre.cols());
}

}  // namespace

MlpModel::MlpModel(std::vector<MlpLayer> layers, Activation activation)
    : layers_(std::move(layers)), activation_(activation) {
    if (layers_.empty()) throw InvalidConfig("MlpModel: at least one layer required");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        if (l.bias.size() != l.weight.rows())
            throw ShapeMismatch("MlpModel: bias length must equal weight rows");
        require_finite(l.weight, "MlpModel weight");
        require_finite(l.bias, "MlpModel bias");
        if (i > 0 && layers_[i - 1].weight.rows() != l.weight.cols())
            throw ShapeMismatch("MlpModel: consecutive layer shapes do not chain");
    }
}

Index MlpModel::hidden_dim(Index layer) const {
    if (!is_hidden_layer(layer)) throw InvalidLayer("hidden_dim: not a hidden layer");
    return layers_[static_cast<std::size_t>(layer)].weight.rows();
}

const MlpLayer& MlpModel::layer(Index i) const {
    if (i < 0 || i >= layer_count()) throw InvalidLayer("MlpModel::layer: index out of range");
    return layers_[static_cast<std::size_t>(i)];
}

MlpModel MlpModel::with_layer(Index i, Matrix weight, std::optional<Vector> bias) const {
    if (i < 0 || i >= layer_count()) throw InvalidLayer("with_layer: index out of range");
    const auto& old = layers_[static_cast<std::size_t>(i)];
    if (weight.rows() != old.weight.rows() || weight.cols() != old.weight.cols())
        throw ShapeMismatch("with_layer: weight shape differs from original");
    std::vector<MlpLayer> next = layers_;
    next[static_cast<std::size_t>(i)].weight = std::move(weight);
    if (bias) {
        if (bias->size() != old.bias.size())
            throw ShapeMismatch("with_layer: bias length differs from original");
        next[static_cast<std::size_t>(i)].bias = std::move(*bias);
    }
    return MlpModel(std::move(next), activation_);
}

namespace {

BatchTrace run_forward(const MlpModel& model, const Eigen::Ref<const Matrix>& inputs,
                       Index perturbed_layer, const Matrix* delta_w) {
    if (inputs.cols() != model.input_dim())
        throw ShapeMismatch("forward: input dimension mismatch");
    BatchTrace trace;
    trace.input = inputs;
    const Index n_layers = model.layer_count();
    trace.per_layer_pre.reserve(static_cast<std::size_t>(n_layers - 1));
    trace.per_layer_post.reserve(static_cast<std::size_t>(n_layers - 1));

    Matrix h = inputs;
    for (Index l = 0; l < n_layers; ++l) {
        const auto& layer = model.layer(l);
        Matrix pre;
        if (delta_w != nullptr && l == perturbed_layer) {
            pre.noalias() = h * (layer.weight + *delta_w).transpose();
        } else {
            pre.noalias() = h * layer.weight.transpose();
        }
        pre.rowwise() += layer.bias.transpose();
        if (l + 1 < n_layers) {
            trace.per_layer_pre.push_back(pre);
            h = apply_activation(model.activation(), pre);
            trace.per_layer_post.push_back(h);
        } else {
            trace.output = std::move(pre);
        }
    }
    return trace;
}

ActivationTrace to_single(const BatchTrace& batch) {
    ActivationTrace t;
    t.input = batch.input.row(0).transpose();
    for (const auto& pre : batch.per_layer_pre) t.per_layer_pre.push_back(pre.row(0).transpose());
    for (const auto& post : batch.per_layer_post)
        t.per_layer_post.push_back(post.row(0).transpose());
    t.output = batch.output.row(0).transpose();
    return t;
}

}  // namespace

ActivationTrace forward_trace(const MlpModel& model, const Eigen::Ref<const Vector>& x) {
    return to_single(run_forward(model, x.transpose(), -1, nullptr));
}

BatchTrace forward_batch_trace(const MlpModel& model, const Eigen::Ref<const Matrix>& inputs) {
    return run_forward(model, inputs, -1, nullptr);
}

Matrix forward_batch(const MlpModel& model, const Eigen::Ref<const Matrix>& inputs) {
    return run_forward(model, inputs, -1, nullptr).output;
}

namespace {

void check_delta_shape(const MlpModel& model, Index layer_index, const Matrix& delta_w) {
    if (layer_index < 0 || layer_index >= model.layer_count())
        throw InvalidLayer("perturbed_forward: layer index out of range");
    const auto& w = model.layer(layer_index).weight;
    if (delta_w.rows() != w.rows() || delta_w.cols() != w.cols())
        throw ShapeMismatch("perturbed_forward: delta shape differs from W_l");
}

}  // namespace

ActivationTrace perturbed_forward(const MlpModel& model, Index layer_index,
                                  const Eigen::Ref<const Matrix>& delta_w,
                                  const Eigen::Ref<const Vector>& x) {
    Matrix d = delta_w;
    check_delta_shape(model, layer_index, d);
    return to_single(run_forward(model, x.transpose(), layer_index, &d));
}

BatchTrace perturbed_forward_batch(const MlpModel& model, Index layer_index,
                                   const Eigen::Ref<const Matrix>& delta_w,
                                   const Eigen::Ref<const Matrix>& inputs) {
    Matrix d = delta_w;
    check_delta_shape(model, layer_index, d);
    return run_forward(model, inputs, layer_index, &d);
}

AugmentedRep augmented_rep(const ActivationTrace& trace, Index layer_index) {
    if (layer_index < 0 || layer_index >= static_cast<Index>(trace.per_layer_post.size()))
        throw InvalidLayer("augmented_rep: layer index out of range");
    const Vector& h = trace.per_layer_post[static_cast<std::size_t>(layer_index)];
    Vector values(h.size() + 1);
    values[0] = 1.0;
    values.tail(h.size()) = h;
    return AugmentedRep{std::move(values)};
}

Vector flatten_rowmajor(const Eigen::Ref<const Matrix>& m) {
    Vector v(m.size());
    Index k = 0;
    for (Index r = 0; r < m.rows(); ++r)
        for (Index c = 0; c < m.cols(); ++c) v[k++] = m(r, c);
    return v;
}

Matrix unflatten_rowmajor(const Eigen::Ref<const Vector>& v, Index rows, Index cols) {
    if (v.size() != rows * cols) throw ShapeMismatch("unflatten_rowmajor: size mismatch");
    Matrix m(rows, cols);
    Index k = 0;
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) m(r, c) = v[k++];
    return m;
}

RepJacobian rep_jacobian_fd(const MlpModel& model, Index layer_index,
                            const Eigen::Ref<const Matrix>& basis,
                            const Eigen::Ref<const Vector>& x, double step) {
    if (!(step > 0.0)) throw InvalidConfig("rep_jacobian_fd: step must be positive");
    if (!model.is_hidden_layer(layer_index))
        throw InvalidLayer("rep_jacobian_fd: not a hidden layer");
    const auto& w = model.layer(layer_index).weight;
    if (basis.rows() != w.size())
        throw ShapeMismatch("rep_jacobian_fd: basis flat dimension != W_l parameter count");

    const Index d = w.rows();
    const Index k_dirs = basis.cols();
    Matrix jac = Matrix::Zero(d + 1, k_dirs);
    for (Index k = 0; k < k_dirs; ++k) {
        const Matrix dir = unflatten_rowmajor(basis.col(k), w.rows(), w.cols());
        const Matrix plus = step * dir;
        const Matrix minus = -step * dir;
        const ActivationTrace tp = perturbed_forward(model, layer_index, plus, x);
        const ActivationTrace tm = perturbed_forward(model, layer_index, minus, x);
        const Vector hp = tp.per_layer_post[static_cast<std::size_t>(layer_index)];
        const Vector hm = tm.per_layer_post[static_cast<std::size_t>(layer_index)];
        if (!hp.allFinite() || !hm.allFinite())
            throw NonFiniteResult("rep_jacobian_fd: perturbed forward overflowed");
        jac.col(k).tail(d) = (hp - hm) / (2.0 * step);
    }

    RepJacobian out;
    out.matrix = std::move(jac);
    out.method = JacobianMethod::finite_difference;
    out.fd_step = step;
    if (model.activation() == Activation::relu) {
        const ActivationTrace base = forward_trace(model, x);
        const Vector& pre = base.per_layer_pre[static_cast<std::size_t>(layer_index)];
        out.kink_proximal = (pre.cwiseAbs().array() < 10.0 * step).any();
    }
    return out;
}

RepJacobian rep_jacobian_analytic(const MlpModel& model, Index layer_index,
                                  const Eigen::Ref<const Matrix>& basis,
                                  const Eigen::Ref<const Vector>& x) {
    if (!model.is_hidden_layer(layer_index))
        throw InvalidLayer("rep_jacobian_analytic: not a hidden layer");
    const auto& w = model.layer(layer_index).weight;
    if (basis.rows() != w.size())
        throw ShapeMismatch("rep_jacobian_analytic: basis flat dimension != W_l parameter count");

    const ActivationTrace trace = forward_trace(model, x);
    const Vector h_prev = layer_index == 0
                              ? trace.input
                              : trace.per_layer_post[static_cast<std::size_t>(layer_index - 1)];
    const Vector& pre = trace.per_layer_pre[static_cast<std::size_t>(layer_index)];
    const Vector phi_prime =
        activation_derivative(model.activation(), pre.transpose()).row(0).transpose();

    // d h / d v_k = phi'(pre) .* (reshape(U e_k) h_prev). With the row-major
    // flat convention, row r of reshape(U e_k) is U[r*d_in .. r*d_in+d_in-1, k],
    // so the whole K-column block for row r is one (d_in x K) slice of U.
    const Index d_out = w.rows();
    const Index d_in = w.cols();
    const Index k_dirs = basis.cols();
    Matrix jac = Matrix::Zero(d_out + 1, k_dirs);
    for (Index r = 0; r < d_out; ++r) {
        jac.row(r + 1).noalias() =
            phi_prime[r] * (h_prev.transpose() * basis.middleRows(r * d_in, d_in));
    }

    RepJacobian out;
    out.matrix = std::move(jac);
    out.method = JacobianMethod::analytic;
    return out;
}

double mse(const MlpModel& model, const Eigen::Ref<const Matrix>& inputs,
           const Eigen::Ref<const Matrix>& targets) {
    const Matrix pred = forward_batch(model, inputs);
    return (pred - targets).squaredNorm() / static_cast<double>(pred.size());
}

namespace {

std::vector<MlpLayer> init_layers(Index input_dim, Index output_dim,
                                  const std::vector<Index>& hidden, Rng& rng) {
    std::vector<Index> dims;
    dims.push_back(input_dim);
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(output_dim);
    std::vector<MlpLayer> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        const Index fan_in = dims[i];
        const Index fan_out = dims[i + 1];
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        MlpLayer layer;
        layer.weight = scale * rng.gaussian_matrix(fan_out, fan_in);
        layer.bias = Vector::Zero(fan_out);
        layers.push_back(std::move(layer));
    }
    return layers;
}

}  // namespace

MlpModel random_mlp(Index input_dim, const std::vector<Index>& hidden_widths, Index output_dim,
                    Activation activation, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 1));
    return MlpModel(init_layers(input_dim, output_dim, hidden_widths, rng), activation);
}

MlpModel train_mlp(const Eigen::Ref<const Matrix>& inputs,
                   const Eigen::Ref<const Matrix>& targets, const TrainConfig& config,
                   std::uint64_t seed) {
    if (inputs.rows() == 0) throw InvalidConfig("train_mlp: empty data");
    if (inputs.rows() != targets.rows())
        throw ShapeMismatch("train_mlp: inputs/targets row mismatch");
    if (config.batch_size < 1 || config.steps < 0)
        throw InvalidConfig("train_mlp: bad steps/batch size");

    Rng init_rng(mix_seed(seed, 1));
    std::vector<MlpLayer> layers =
        init_layers(inputs.cols(), targets.cols(), config.hidden_widths, init_rng);
    MlpModel initial(layers, config.activation);
    if (config.steps == 0) return initial;
    const double initial_mse = mse(initial, inputs, targets);

    // Adam state per layer.
    struct Moments {
        Matrix mw, vw;
        Vector mb, vb;
    };
    std::vector<Moments> moments;
    for (const auto& l : layers) {
        Moments m;
        m.mw = Matrix::Zero(l.weight.rows(), l.weight.cols());
        m.vw = m.mw;
        m.mb = Vector::Zero(l.bias.size());
        m.vb = m.mb;
        moments.push_back(std::move(m));
    }

    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    const Index n = inputs.rows();
    const std::size_t n_layers = layers.size();
    Rng batch_rng(mix_seed(seed, 2));

    Matrix bx(config.batch_size, inputs.cols());
    Matrix by(config.batch_size, targets.cols());
    for (Index step = 1; step <= config.steps; ++step) {
        for (Index i = 0; i < config.batch_size; ++i) {
            const Index row = static_cast<Index>(batch_rng.below(static_cast<std::uint64_t>(n)));
            bx.row(i) = inputs.row(row);
            by.row(i) = targets.row(row);
        }

        // Forward with caches.
        std::vector<Matrix> pres(n_layers), posts(n_layers);
        Matrix h = bx;
        for (std::size_t l = 0; l < n_layers; ++l) {
            pres[l].noalias() = h * layers[l].weight.transpose();
            pres[l].rowwise() += layers[l].bias.transpose();
            if (l + 1 < n_layers) {
                posts[l] = apply_activation(config.activation, pres[l]);
                h = posts[l];
            }
        }
        const Matrix& out = pres[n_layers - 1];
        Matrix grad_out = 2.0 * (out - by) / static_cast<double>(out.size());
        if (!grad_out.allFinite()) throw DivergedTraining("train_mlp: loss became non-finite");

        // Backward.
        Matrix grad_h = grad_out;
        for (std::size_t l = n_layers; l-- > 0;) {
            const Matrix& layer_in = (l == 0) ? bx : posts[l - 1];
            Matrix grad_w = grad_h.transpose() * layer_in;
            Vector grad_b = grad_h.colwise().sum().transpose();
            if (l > 0) {
                Matrix grad_pre_prev = grad_h * layers[l].weight;
                grad_h = grad_pre_prev.cwiseProduct(
                    activation_derivative(config.activation, pres[l - 1]));
            }
            auto& m = moments[l];
            const double t = static_cast<double>(step);
            const double correction =
                std::sqrt(1.0 - std::pow(beta2, t)) / (1.0 - std::pow(beta1, t));
            m.mw = beta1 * m.mw + (1.0 - beta1) * grad_w;
            m.vw = beta2 * m.vw + (1.0 - beta2) * grad_w.cwiseProduct(grad_w);
            layers[l].weight.array() -= config.learning_rate * correction * m.mw.array() /
                                        (m.vw.array().sqrt() + eps);
            m.mb = beta1 * m.mb + (1.0 - beta1) * grad_b;
            m.vb = beta2 * m.vb + (1.0 - beta2) * grad_b.cwiseProduct(grad_b);
            layers[l].bias.array() -= config.learning_rate * correction * m.mb.array() /
                                      (m.vb.array().sqrt() + eps);
            if (!layers[l].weight.allFinite() || !layers[l].bias.allFinite())
                throw DivergedTraining("train_mlp: parameters became non-finite");
        }
    }

    MlpModel trained(std::move(layers), config.activation);
    // Training MSE must not regress past the initialization.
    if (mse(trained, inputs, targets) > initial_mse) return initial;
    return trained;
}

}  // namespace pnc
