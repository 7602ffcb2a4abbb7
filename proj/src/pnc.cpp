#include "pnc/pnc.hpp"

#include "pnc/model_io.hpp"
#include "pnc/numerics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace pnc {

namespace {
constexpr std::uint64_t kBasisTag = 101;
constexpr std::uint64_t kCoeffTag = 102;
constexpr std::uint64_t kBootstrapTag = 103;
}  // namespace

void validate_config(const PncConfig& config, const MlpModel& model) {
    if (config.target_layers.empty()) throw InvalidConfig("PncConfig: no target layers");
    if (config.ensemble_size < 1) throw InvalidConfig("PncConfig: M must be >= 1");
    if (config.rank < 1) throw InvalidConfig("PncConfig: K must be >= 1");
    if (!(config.scale >= 0.0)) throw InvalidConfig("PncConfig: sigma must be >= 0");
    if (!(config.ridge >= 0.0)) throw InvalidConfig("PncConfig: lambda must be >= 0");
    if (config.bootstrap_fraction &&
        !(*config.bootstrap_fraction > 0.0 && *config.bootstrap_fraction <= 1.0))
        throw InvalidFraction("PncConfig: bootstrap fraction must be in (0, 1]");
    Index prev = -1;
    for (const Index l : config.target_layers) {
        if (l <= prev) throw InvalidConfig("PncConfig: target layers must be strictly increasing");
        if (!model.is_hidden_layer(l))
            throw InvalidLayer("PncConfig: target layers must be hidden (output head excluded)");
        prev = l;
    }
}

Matrix MemberPerturbation::delta_w(Index rows, Index cols) const {
    if (!basis) throw InvalidConfig("MemberPerturbation: missing basis");
    if (basis->rows() != rows * cols)
        throw ShapeMismatch("MemberPerturbation: basis flat dim != rows*cols");
    if (coeffs.size() != basis->cols())
        throw ShapeMismatch("MemberPerturbation: coeffs length != basis rank");
    return scale * unflatten_rowmajor(*basis * coeffs, rows, cols);
}

MemberPerturbation sample_member(const PncConfig& config, Index layer_index, Index member_index,
                                 std::shared_ptr<const Matrix> basis) {
    if (!basis) throw InvalidConfig("sample_member: missing basis");
    if (basis->cols() != config.rank)
        throw ShapeMismatch("sample_member: basis rank != config rank");
    Rng rng(mix_seed(config.seed, kCoeffTag, static_cast<std::uint64_t>(layer_index),
                     static_cast<std::uint64_t>(member_index)));
    MemberPerturbation p;
    p.layer_index = layer_index;
    p.basis = std::move(basis);
    p.coeffs = rng.gaussian_vector(config.rank);
    p.scale = config.scale;
    return p;
}

namespace {

Matrix augment_ones(const Matrix& h) {
    Matrix out(h.rows(), h.cols() + 1);
    out.col(0).setOnes();
    out.rightCols(h.cols()) = h;
    return out;
}

Matrix base_theta_of(const MlpModel& model, Index next_layer) {
    const auto& nl = model.layer(next_layer);
    Matrix theta(nl.weight.rows(), nl.weight.cols() + 1);
    theta.col(0) = nl.bias;
    theta.rightCols(nl.weight.cols()) = nl.weight;
    return theta;
}

Matrix select_rows(const Eigen::Ref<const Matrix>& m, const std::vector<Index>& ids) {
    Matrix out(static_cast<Index>(ids.size()), m.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= m.rows())
            throw ShapeMismatch("subset id out of calibration range");
        out.row(static_cast<Index>(i)) = m.row(ids[i]);
    }
    return out;
}

std::vector<Index> all_ids(Index n) {
    std::vector<Index> ids(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
    return ids;
}

}  // namespace

CorrectionSystem assemble_correction(const MlpModel& model, const MemberPerturbation& perturbation,
                                     const Eigen::Ref<const Matrix>& calibration, double ridge,
                                     std::vector<Index> subset_ids) {
    if (calibration.rows() == 0) throw EmptyCalibration("assemble_correction: empty calibration");
    const Index l = perturbation.layer_index;
    if (!model.is_hidden_layer(l)) throw InvalidLayer("assemble_correction: not a hidden layer");
    if (subset_ids.empty()) subset_ids = all_ids(calibration.rows());

    const Matrix inputs = select_rows(calibration, subset_ids);
    const auto& w = model.layer(l).weight;
    const Matrix delta = perturbation.delta_w(w.rows(), w.cols());

    const BatchTrace base = forward_batch_trace(model, inputs);
    const Matrix& h_prev = (l == 0) ? base.input : base.per_layer_post[static_cast<std::size_t>(l - 1)];
    const Matrix& pre = base.per_layer_pre[static_cast<std::size_t>(l)];
    const Matrix& h_base = base.per_layer_post[static_cast<std::size_t>(l)];

    // Perturbation only touches layer l, so the perturbed post-activation is
    // phi(pre + h_prev * delta^T) with everything upstream shared.
    Matrix pre_pert = pre;
    pre_pert.noalias() += h_prev * delta.transpose();
    Matrix h_pert;
    switch (model.activation()) {
        case Activation::relu: h_pert = pre_pert.cwiseMax(0.0); break;
        case Activation::tanh_act: h_pert = pre_pert.array().tanh().matrix(); break;
        case Activation::identity: h_pert = pre_pert; break;
    }

    CorrectionSystem sys;
    sys.design = augment_ones(h_pert);
    sys.reference_design = augment_ones(h_base);
    sys.base_theta = base_theta_of(model, l + 1);
    sys.targets.noalias() = sys.reference_design * sys.base_theta.transpose();
    sys.ridge = ridge;
    sys.subset_ids = std::move(subset_ids);
    return sys;
}

CorrectionResult solve_correction(const CorrectionSystem& system) {
    const Matrix& xv = system.design;
    const Matrix& x = system.reference_design;
    if (xv.rows() != x.rows() || xv.cols() != x.cols())
        throw ShapeMismatch("solve_correction: design/reference shapes differ");
    if (system.base_theta.cols() != xv.cols())
        throw ShapeMismatch("solve_correction: theta width != design width");

    Matrix gram = xv.transpose() * xv;
    const SpdSystem spd(std::move(gram), system.ridge);
    Matrix rhs = xv.transpose() * (x * system.base_theta.transpose());
    rhs += system.ridge * system.base_theta.transpose();
    const Matrix theta_hat_t = spd_solve(spd, rhs);

    CorrectionResult out;
    out.corrected_theta = theta_hat_t.transpose();
    out.calib_residual = xv * theta_hat_t - system.targets;
    out.theta_shift_norm = (out.corrected_theta - system.base_theta).norm();
    return out;
}

PncEnsemble::PncEnsemble(MlpModel base, PncConfig config,
                         std::vector<std::shared_ptr<const Matrix>> bases,
                         std::vector<PncMember> members)
    : base_(std::move(base)),
      config_(std::move(config)),
      bases_(std::move(bases)),
      members_(std::move(members)) {
    if (members_.empty()) throw EmptyEnsemble("PncEnsemble: no members");
    if (bases_.size() != config_.target_layers.size())
        throw InvalidConfig("PncEnsemble: one basis per target layer required");
}

const PncMember& PncEnsemble::member(Index m) const {
    if (m < 0 || m >= size()) throw InvalidConfig("PncEnsemble::member: index out of range");
    return members_[static_cast<std::size_t>(m)];
}

Matrix PncEnsemble::member_delta_w(Index m, std::size_t target_index) const {
    const MemberRepair& repair = member(m).repairs.at(target_index);
    const auto& w = base_.layer(repair.perturbed_layer).weight;
    MemberPerturbation p;
    p.layer_index = repair.perturbed_layer;
    p.basis = bases_.at(target_index);
    p.coeffs = repair.coeffs;
    p.scale = config_.scale;
    return p.delta_w(w.rows(), w.cols());
}

MlpModel PncEnsemble::member_model(Index m) const {
    MlpModel current = base_;
    const PncMember& mem = member(m);
    for (std::size_t j = 0; j < mem.repairs.size(); ++j) {
        const MemberRepair& repair = mem.repairs[j];
        const Index l = repair.perturbed_layer;
        current = current.with_layer(l, base_.layer(l).weight + member_delta_w(m, j));
        const Matrix& theta = repair.corrected_theta;
        current = current.with_layer(l + 1, theta.rightCols(theta.cols() - 1), Vector(theta.col(0)));
    }
    return current;
}

double PncEnsemble::min_conditioning() const {
    double out = std::numeric_limits<double>::infinity();
    for (const auto& mem : members_)
        for (const auto& r : mem.repairs) out = std::min(out, r.min_sigma_gv);
    return out;
}

std::vector<std::vector<Index>> bootstrap_subsets(Index calibration_size, double fraction,
                                                  Index ensemble_size, std::uint64_t seed) {
    if (calibration_size < 1) throw EmptyCalibration("bootstrap_subsets: N must be >= 1");
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw InvalidFraction("bootstrap_subsets: fraction must be in (0, 1]");
    const auto subset_size = std::max<Index>(
        1, static_cast<Index>(std::llround(fraction * static_cast<double>(calibration_size))));
    std::vector<std::vector<Index>> subsets;
    subsets.reserve(static_cast<std::size_t>(ensemble_size));
    for (Index m = 0; m < ensemble_size; ++m) {
        Rng rng(mix_seed(seed, kBootstrapTag, static_cast<std::uint64_t>(m)));
        std::vector<Index> ids(static_cast<std::size_t>(subset_size));
        for (auto& id : ids)
            id = static_cast<Index>(rng.below(static_cast<std::uint64_t>(calibration_size)));
        subsets.push_back(std::move(ids));
    }
    return subsets;
}

namespace {

std::vector<std::vector<Index>> member_subsets(const PncConfig& config, Index n_calib) {
    if (config.bootstrap_fraction)
        return bootstrap_subsets(n_calib, *config.bootstrap_fraction, config.ensemble_size,
                                 config.seed);
    return std::vector<std::vector<Index>>(static_cast<std::size_t>(config.ensemble_size),
                                           all_ids(n_calib));
}

std::shared_ptr<const Matrix> layer_basis(const PncConfig& config, const MlpModel& model, Index l) {
    const auto& w = model.layer(l).weight;
    const Index flat_dim = w.size();
    if (config.rank > flat_dim)
        throw InvalidRank("P&C rank exceeds perturbed layer parameter count");
    return std::make_shared<const Matrix>(orthonormal_basis(
        flat_dim, config.rank, mix_seed(config.seed, kBasisTag, static_cast<std::uint64_t>(l))));
}

MemberRepair finish_repair(const MemberPerturbation& pert, const CorrectionSystem& sys,
                           const CorrectionResult& res) {
    MemberRepair repair;
    repair.perturbed_layer = pert.layer_index;
    repair.coeffs = pert.coeffs;
    repair.corrected_theta = res.corrected_theta;
    repair.calib_shift = (sys.design - sys.reference_design).norm();
    repair.min_sigma_gv =
        spd_min_eigenvalue(SpdSystem(sys.design.transpose() * sys.design, sys.ridge));
    return repair;
}

}  // namespace

PncEnsemble build_single_layer(const MlpModel& model, const Eigen::Ref<const Matrix>& calibration,
                               const PncConfig& config) {
    validate_config(config, model);
    if (config.target_layers.size() != 1)
        throw InvalidConfig("build_single_layer: exactly one target layer expected");
    if (calibration.rows() == 0) throw EmptyCalibration("build_single_layer: empty calibration");

    const Index l = config.target_layers.front();
    auto basis = layer_basis(config, model, l);
    const auto subsets = member_subsets(config, calibration.rows());

    std::vector<PncMember> members;
    members.reserve(static_cast<std::size_t>(config.ensemble_size));
    for (Index m = 0; m < config.ensemble_size; ++m) {
        const MemberPerturbation pert = sample_member(config, l, m, basis);
        const CorrectionSystem sys = assemble_correction(model, pert, calibration, config.ridge,
                                                         subsets[static_cast<std::size_t>(m)]);
        PncMember member;
        member.subset_ids = sys.subset_ids;
        try {
            member.repairs.push_back(finish_repair(pert, sys, solve_correction(sys)));
        } catch (const SingularSystem& e) {
            throw SingularSystem("member " + std::to_string(m) + ": " + e.what());
        }
        members.push_back(std::move(member));
    }
    return PncEnsemble(model, config, {std::move(basis)}, std::move(members));
}

PncEnsemble build_multi_layer(const MlpModel& model, const Eigen::Ref<const Matrix>& calibration,
                              const PncConfig& config) {
    validate_config(config, model);
    if (calibration.rows() == 0) throw EmptyCalibration("build_multi_layer: empty calibration");
    for (std::size_t j = 0; j + 1 < config.target_layers.size(); ++j)
        if (config.target_layers[j + 1] == config.target_layers[j] + 1)
            throw OverlappingLayers("build_multi_layer: corrected layer would also be perturbed");

    std::vector<std::shared_ptr<const Matrix>> bases;
    for (const Index l : config.target_layers) bases.push_back(layer_basis(config, model, l));
    const auto subsets = member_subsets(config, calibration.rows());
    const BatchTrace base_trace = forward_batch_trace(model, calibration);

    std::vector<PncMember> members;
    members.reserve(static_cast<std::size_t>(config.ensemble_size));
    for (Index m = 0; m < config.ensemble_size; ++m) {
        PncMember member;
        member.subset_ids = subsets[static_cast<std::size_t>(m)];
        const Matrix subset_inputs = select_rows(calibration, member.subset_ids);

        MlpModel current = model;
        for (std::size_t j = 0; j < config.target_layers.size(); ++j) {
            const Index l = config.target_layers[j];
            const MemberPerturbation pert = sample_member(config, l, m, bases[j]);
            const auto& w = current.layer(l).weight;
            const Matrix delta = pert.delta_w(w.rows(), w.cols());

            // Design: subset activations through all earlier repaired layers
            // plus the fresh perturbation at l. Targets: base-model
            // pre-activations of layer l+1.
            const BatchTrace pert_trace = perturbed_forward_batch(current, l, delta, subset_inputs);
            CorrectionSystem sys;
            sys.design = augment_ones(pert_trace.per_layer_post[static_cast<std::size_t>(l)]);
            Matrix h_base(static_cast<Index>(member.subset_ids.size()), model.hidden_dim(l));
            for (std::size_t i = 0; i < member.subset_ids.size(); ++i)
                h_base.row(static_cast<Index>(i)) =
                    base_trace.per_layer_post[static_cast<std::size_t>(l)].row(
                        member.subset_ids[i]);
            sys.reference_design = augment_ones(h_base);
            sys.base_theta = base_theta_of(model, l + 1);
            sys.targets.noalias() = sys.reference_design * sys.base_theta.transpose();
            sys.ridge = config.ridge;
            sys.subset_ids = member.subset_ids;

            CorrectionResult res;
            try {
                res = solve_correction(sys);
            } catch (const SingularSystem& e) {
                throw SingularSystem("member " + std::to_string(m) + " layer " +
                                     std::to_string(l) + ": " + e.what());
            }
            member.repairs.push_back(finish_repair(pert, sys, res));

            current = current.with_layer(l, current.layer(l).weight + delta);
            const Matrix& theta = res.corrected_theta;
            current = current.with_layer(l + 1, theta.rightCols(theta.cols() - 1),
                                         Vector(theta.col(0)));
        }
        members.push_back(std::move(member));
    }
    return PncEnsemble(model, config, std::move(bases), std::move(members));
}

namespace {

nlohmann::json config_to_json(const PncConfig& c) {
    nlohmann::json j;
    j["target_layers"] = c.target_layers;
    j["ensemble_size"] = c.ensemble_size;
    j["rank"] = c.rank;
    j["scale"] = c.scale;
    j["ridge"] = c.ridge;
    if (c.bootstrap_fraction) j["bootstrap_fraction"] = *c.bootstrap_fraction;
    j["seed"] = c.seed;
    return j;
}

PncConfig config_from_json(const nlohmann::json& j) {
    PncConfig c;
    c.target_layers = j.at("target_layers").get<std::vector<Index>>();
    c.ensemble_size = j.at("ensemble_size").get<Index>();
    c.rank = j.at("rank").get<Index>();
    c.scale = j.at("scale").get<double>();
    c.ridge = j.at("ridge").get<double>();
    if (j.contains("bootstrap_fraction")) c.bootstrap_fraction = j.at("bootstrap_fraction").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

}  // namespace

std::string serialize_ensemble(const PncEnsemble& ensemble) {
    nlohmann::json doc;
    doc["format"] = "pnc-ensemble";
    doc["version"] = 1;
    doc["base_model_hash"] = model_content_hash(ensemble.base());
    doc["config"] = config_to_json(ensemble.config());

    nlohmann::json bases = nlohmann::json::array();
    for (std::size_t j = 0; j < ensemble.config().target_layers.size(); ++j)
        bases.push_back(matrix_to_json(ensemble.basis(j)));
    doc["bases"] = std::move(bases);

    nlohmann::json members = nlohmann::json::array();
    for (Index m = 0; m < ensemble.size(); ++m) {
        const PncMember& mem = ensemble.member(m);
        nlohmann::json jm;
        jm["subset_ids"] = mem.subset_ids;
        nlohmann::json repairs = nlohmann::json::array();
        for (const auto& r : mem.repairs) {
            repairs.push_back({{"layer", r.perturbed_layer},
                               {"coeffs", vector_to_json(r.coeffs)},
                               {"corrected_theta", matrix_to_json(r.corrected_theta)},
                               {"calib_shift", r.calib_shift},
                               {"min_sigma_gv", r.min_sigma_gv}});
        }
        jm["repairs"] = std::move(repairs);
        members.push_back(std::move(jm));
    }
    doc["members"] = std::move(members);
    return doc.dump() + "\n";
}

PncEnsemble deserialize_ensemble(const std::string& text, const MlpModel& base) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(std::string("ensemble document: ") + e.what());
    }
    if (doc.value("format", "") != "pnc-ensemble") throw CorruptFile("not a pnc-ensemble document");
    if (doc.value("version", -1) != 1) throw VersionMismatch("unsupported pnc-ensemble version");
    if (doc.at("base_model_hash").get<std::string>() != model_content_hash(base))
        throw InvalidConfig("ensemble references a different base model (content hash mismatch)");

    const PncConfig config = config_from_json(doc.at("config"));
    std::vector<std::shared_ptr<const Matrix>> bases;
    for (const auto& jb : doc.at("bases"))
        bases.push_back(std::make_shared<const Matrix>(matrix_from_json(jb)));

    std::vector<PncMember> members;
    for (const auto& jm : doc.at("members")) {
        PncMember mem;
        mem.subset_ids = jm.at("subset_ids").get<std::vector<Index>>();
        for (const auto& jr : jm.at("repairs")) {
            MemberRepair r;
            r.perturbed_layer = jr.at("layer").get<Index>();
            r.coeffs = vector_from_json(jr.at("coeffs"));
            r.corrected_theta = matrix_from_json(jr.at("corrected_theta"));
            r.calib_shift = jr.at("calib_shift").get<double>();
            r.min_sigma_gv = jr.at("min_sigma_gv").get<double>();
            mem.repairs.push_back(std::move(r));
        }
        members.push_back(std::move(mem));
    }
    return PncEnsemble(base, config, std::move(bases), std::move(members));
}

void save_ensemble(const PncEnsemble& ensemble, const std::string& path) {
    write_file(path, serialize_ensemble(ensemble));
}

PncEnsemble load_ensemble(const std::string& path, const MlpModel& base) {
    return deserialize_ensemble(read_file(path), base);
}

}  // namespace pnc
