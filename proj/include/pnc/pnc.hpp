#pragma once

#include "pnc/net.hpp"

#include <memory>
#include <optional>
#include <vector>

namespace pnc {

struct PncConfig {
    std::vector<Index> target_layers;      // strictly increasing hidden layers
    Index ensemble_size = 50;              // M
    Index rank = 20;                       // K
    double scale = 16.0;                   // sigma
    double ridge = 1e-2;                   // lambda
    std::optional<double> bootstrap_fraction;
    std::uint64_t seed = 0;
};

// Checks the config invariants against a concrete model. OverlappingLayers is
// only raised by build_multi_layer, where adjacency becomes meaningful.
void validate_config(const PncConfig& config, const MlpModel& model);

// One sampled low-rank direction-and-coefficient pair. The basis is shared
// across members; only the coefficients vary.
struct MemberPerturbation {
    Index layer_index;
    std::shared_ptr<const Matrix> basis;  // flat_dim x K, orthonormal columns
    Vector coeffs;                        // z, length K
    double scale;                         // sigma

    Matrix delta_w(Index rows, Index cols) const;
};

MemberPerturbation sample_member(const PncConfig& config, Index layer_index, Index member_index,
                                 std::shared_ptr<const Matrix> basis);

// Augmented calibration designs, targets and ridge for one repair solve.
struct CorrectionSystem {
    Matrix design;            // Ybar_{v,S}, B x (d+1), leading ones column
    Matrix reference_design;  // Ybar_S
    Matrix targets;           // Ybar_S Theta^T, B x q
    Matrix base_theta;        // Theta = [b, W], q x (d+1)
    double ridge;
    std::vector<Index> subset_ids;
};

// Design rows are perturbed post-activations of the target layer on the
// calibration subset; targets are the unperturbed pre-activations of the next
// layer. `subset_ids` indexes rows of `calibration`; empty means all rows.
CorrectionSystem assemble_correction(const MlpModel& model, const MemberPerturbation& perturbation,
                                     const Eigen::Ref<const Matrix>& calibration, double ridge,
                                     std::vector<Index> subset_ids = {});

struct CorrectionResult {
    Matrix corrected_theta;  // Theta_hat, q x (d+1)
    Matrix calib_residual;   // E = design Theta_hat^T - targets
    double theta_shift_norm;
};

// Closed-form ridge repair: Theta_hat = Theta (X^T X_v + lambda I) G_v^{-1}.
CorrectionResult solve_correction(const CorrectionSystem& system);

// Per-member repair record: enough to rebuild the member's parameters and the
// correction system it came from.
struct MemberRepair {
    Index perturbed_layer;
    Vector coeffs;           // z
    Matrix corrected_theta;  // Theta_hat for layer l+1
    double calib_shift;      // Delta_S(v) = ||X_v - X||_F
    double min_sigma_gv;     // sigma_min(G_v)
};

struct PncMember {
    std::vector<MemberRepair> repairs;  // one per target layer, network order
    std::vector<Index> subset_ids;
};

class PncEnsemble {
public:
    PncEnsemble(MlpModel base, PncConfig config,
                std::vector<std::shared_ptr<const Matrix>> bases, std::vector<PncMember> members);

    const MlpModel& base() const { return base_; }
    const PncConfig& config() const { return config_; }
    Index size() const { return static_cast<Index>(members_.size()); }
    const PncMember& member(Index m) const;
    const Matrix& basis(std::size_t target_index) const { return *bases_.at(target_index); }
    std::shared_ptr<const Matrix> basis_ptr(std::size_t target_index) const {
        return bases_.at(target_index);
    }

    // Perturbation of member m at target layer j (reshaped to W_l's shape).
    Matrix member_delta_w(Index m, std::size_t target_index) const;

    // Materializes member m: base with (W_l, W_{l+1}, b_{l+1}) substituted per repair.
    MlpModel member_model(Index m) const;

    double min_conditioning() const;  // min over members of sigma_min(G_v)

private:
    MlpModel base_;
    PncConfig config_;
    std::vector<std::shared_ptr<const Matrix>> bases_;
    std::vector<PncMember> members_;
};

PncEnsemble build_single_layer(const MlpModel& model, const Eigen::Ref<const Matrix>& calibration,
                               const PncConfig& config);

PncEnsemble build_multi_layer(const MlpModel& model, const Eigen::Ref<const Matrix>& calibration,
                              const PncConfig& config);

// M bootstrap multisets of size round(f*N) (minimum 1), with replacement,
// independent across members, deterministic per seed.
std::vector<std::vector<Index>> bootstrap_subsets(Index calibration_size, double fraction,
                                                  Index ensemble_size, std::uint64_t seed);

std::string serialize_ensemble(const PncEnsemble& ensemble);
PncEnsemble deserialize_ensemble(const std::string& text, const MlpModel& base);
void save_ensemble(const PncEnsemble& ensemble, const std::string& path);
PncEnsemble load_ensemble(const std::string& path, const MlpModel& base);

}  // namespace pnc
