#pragma once

#include "pnc/common.hpp"

#include <vector>

namespace pnc {

// Dense rank-4 tensor. Feature maps use NHWC axis order; kernels use OIHW.
class Tensor4 {
public:
    Tensor4() : d0_(0), d1_(0), d2_(0), d3_(0) {}
    Tensor4(Index d0, Index d1, Index d2, Index d3)
        : d0_(d0), d1_(d1), d2_(d2), d3_(d3),
          data_(static_cast<std::size_t>(d0 * d1 * d2 * d3), 0.0) {}

    Index dim0() const { return d0_; }
    Index dim1() const { return d1_; }
    Index dim2() const { return d2_; }
    Index dim3() const { return d3_; }
    Index size() const { return static_cast<Index>(data_.size()); }

    double& operator()(Index a, Index b, Index c, Index d) {
        return data_[static_cast<std::size_t>(((a * d1_ + b) * d2_ + c) * d3_ + d)];
    }
    double operator()(Index a, Index b, Index c, Index d) const {
        return data_[static_cast<std::size_t>(((a * d1_ + b) * d2_ + c) * d3_ + d)];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    bool same_shape(const Tensor4& o) const {
        return d0_ == o.d0_ && d1_ == o.d1_ && d2_ == o.d2_ && d3_ == o.d3_;
    }

    Tensor4& operator+=(const Tensor4& o);
    Tensor4 operator+(const Tensor4& o) const;
    double norm() const;

private:
    Index d0_, d1_, d2_, d3_;
    std::vector<double> data_;
};

Tensor4 random_tensor(Index d0, Index d1, Index d2, Index d3, double scale, std::uint64_t seed);

// Zero padding of p pixels on both spatial axes of an NHWC map.
Tensor4 pad_nhwc(const Tensor4& x, Index p);

// Patchwise design: one row per output position (n, h', w'), leading ones
// column, remaining columns ordered (c_in, u, v) with the channel axis slowest.
struct PatchDesign {
    Matrix matrix;  // (N H' W') x (1 + C_in k^2)
    Index kernel_size;
    Index stride;
    Index out_h;
    Index out_w;
    Index batch;
};

PatchDesign unfold_patches(const Tensor4& feature_map, Index kernel_size, Index stride);

// Kernel flattened to (C_in k^2) x C_out, column per output channel, rows in
// the same (c_in, u, v) order as the patch design.
Matrix kernel_matrix(const Tensor4& kernel_oihw);
Tensor4 kernel_from_matrix(const Eigen::Ref<const Matrix>& m, Index c_out, Index c_in, Index k);

// Convolution through the patchwise route: unfold, matmul, fold back to NHWC.
Tensor4 conv_nhwc(const Tensor4& x, const Tensor4& kernel_oihw, Index stride, Index pad,
                  const Vector* bias = nullptr);

// Flattens the (N, H', W') axes of an NHWC tensor into rows, channels as columns.
Matrix flatten_spatial(const Tensor4& x);
Tensor4 unflatten_spatial(const Eigen::Ref<const Matrix>& rows, Index n, Index h, Index w);

// Pre-activation residual block with frozen per-channel affine maps standing
// in for inference-mode normalization. Base convs carry no learned bias; the
// correction introduces one on conv2.
struct ConvBlockModel {
    enum class Shortcut { identity, projection };

    Tensor4 conv1;       // O1 x C_in x k x k
    Tensor4 conv2;       // O2 x O1 x k x k
    Vector conv2_bias;   // zero in the base model
    Vector aff1_scale, aff1_shift;  // per block-input channel
    Vector aff2_scale, aff2_shift;  // per conv1-output channel
    Shortcut shortcut = Shortcut::identity;
    Tensor4 projection;  // O2 x C_in x 1 x 1, used when shortcut == projection
    Index pad = 1;
    Index stride = 1;

    Index in_channels() const { return conv1.dim1(); }
    Index mid_channels() const { return conv1.dim0(); }
    Index out_channels() const { return conv2.dim0(); }
    Index kernel_size() const { return conv1.dim2(); }
};

ConvBlockModel random_conv_block(Index c_in, Index c_mid, Index c_out, Index k,
                                 ConvBlockModel::Shortcut shortcut, std::uint64_t seed);

// Input tensor to conv2 as a function of (possibly perturbed) conv1:
// relu(aff2(conv(relu(aff1(x)), W1))).
Tensor4 conv2_input(const ConvBlockModel& block, const Tensor4& x, const Tensor4& conv1_kernel);

// z(x) = conv2 branch output; Block(x) = z(x) + shortcut(x).
Tensor4 branch_output(const ConvBlockModel& block, const Tensor4& x);
Tensor4 shortcut_output(const ConvBlockModel& block, const Tensor4& x);
Tensor4 block_forward(const ConvBlockModel& block, const Tensor4& x);

// Same forward with substituted parameters (perturbed kernel / repair).
struct ConvBlockParams {
    Tensor4 conv1;
    Tensor4 conv2;
    Vector conv2_bias;
};
Tensor4 block_forward_with(const ConvBlockModel& block, const ConvBlockParams& params,
                           const Tensor4& x);

// Streaming normal equations H = Ybar^T Ybar, beta = Ybar^T (T - Y mat(W2)).
struct NormalEqAccumulator {
    Matrix h;     // D x D
    Matrix beta;  // D x C_out
    Index rows_seen = 0;
    Index chunk_size = 64;

    NormalEqAccumulator(Index design_width, Index c_out, Index chunk);
};

void accumulate_chunk(NormalEqAccumulator& acc, const PatchDesign& design_chunk,
                      const Eigen::Ref<const Matrix>& target_chunk,
                      const Eigen::Ref<const Matrix>& base_kernel_matrix);

struct ConvCorrection {
    Tensor4 kernel_delta;  // OIHW, add to base conv2
    Vector bias;           // learned bias for conv2
};

ConvCorrection solve_conv_correction(const NormalEqAccumulator& acc, double ridge,
                                     const Tensor4& base_kernel);

// Orthonormal basis in flat conv1-kernel space (flat order OIHW row-major).
Matrix conv_kernel_basis(Index kernel_size, Index c_in, Index c_out, Index rank,
                         std::uint64_t seed);
Tensor4 kernel_direction(const Eigen::Ref<const Vector>& flat, Index c_out, Index c_in, Index k);

// Builds the chunked correction system for a perturbed conv1 against base
// conv2 targets, chunking over calibration images.
NormalEqAccumulator block_correction_system(const ConvBlockModel& block,
                                            const Tensor4& calibration,
                                            const Tensor4& perturbed_conv1, Index chunk_size);

// Two-block residual net with a global-average-pool linear head.
struct TinyConvNet {
    std::vector<ConvBlockModel> blocks;
    Matrix head_weight;  // q x C_last
    Vector head_bias;

    Index input_channels() const { return blocks.front().in_channels(); }
};

TinyConvNet random_tiny_conv_net(Index c_in, Index width, Index q, std::uint64_t seed);
Matrix tiny_net_forward(const TinyConvNet& net, const Tensor4& x);

// Per-block P&C member: perturb conv1 of each selected block, repair conv2
// against base targets computed from cached base-model upstream activations.
struct ConvMemberRepair {
    std::size_t block_index;
    Tensor4 conv1_delta;
    ConvCorrection correction;
};

std::vector<std::vector<ConvMemberRepair>> build_conv_members(
    const TinyConvNet& net, const Tensor4& calibration, const std::vector<std::size_t>& blocks,
    Index ensemble_size, Index rank, double sigma, double ridge, Index chunk_size,
    std::uint64_t seed);

Matrix tiny_net_forward_member(const TinyConvNet& net,
                               const std::vector<ConvMemberRepair>& repairs, const Tensor4& x);

std::string serialize_conv_net(const TinyConvNet& net);
TinyConvNet deserialize_conv_net(const std::string& text);

}  // namespace pnc
