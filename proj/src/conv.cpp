#include "pnc/conv.hpp"

#include "pnc/model_io.hpp"
#include "pnc/numerics.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

namespace pnc {

Tensor4& Tensor4::operator+=(const Tensor4& o) {
    if (!same_shape(o)) throw ShapeMismatch("Tensor4: shape mismatch in +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Tensor4 Tensor4::operator+(const Tensor4& o) const {
    Tensor4 out = *this;
    out += o;
    return out;
}

double Tensor4::norm() const {
    double s = 0.0;
    for (const double v : data_) s += v * v;
    return std::sqrt(s);
}

Tensor4 random_tensor(Index d0, Index d1, Index d2, Index d3, double scale, std::uint64_t seed) {
    Tensor4 t(d0, d1, d2, d3);
    Rng rng(mix_seed(seed, 401));
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = scale * rng.gaussian();
    return t;
}

Tensor4 pad_nhwc(const Tensor4& x, Index p) {
    if (p < 0) throw InvalidGeometry("pad_nhwc: negative padding");
    if (p == 0) return x;
    Tensor4 out(x.dim0(), x.dim1() + 2 * p, x.dim2() + 2 * p, x.dim3());
    for (Index n = 0; n < x.dim0(); ++n)
        for (Index h = 0; h < x.dim1(); ++h)
            for (Index w = 0; w < x.dim2(); ++w)
                for (Index c = 0; c < x.dim3(); ++c) out(n, h + p, w + p, c) = x(n, h, w, c);
    return out;
}

PatchDesign unfold_patches(const Tensor4& feature_map, Index kernel_size, Index stride) {
    const Index n = feature_map.dim0();
    const Index h = feature_map.dim1();
    const Index w = feature_map.dim2();
    const Index c = feature_map.dim3();
    if (kernel_size < 1 || kernel_size > h || kernel_size > w)
        throw InvalidGeometry("unfold_patches: kernel does not fit the map");
    if (stride < 1) throw InvalidGeometry("unfold_patches: stride must be >= 1");

    PatchDesign design;
    design.kernel_size = kernel_size;
    design.stride = stride;
    design.batch = n;
    design.out_h = (h - kernel_size) / stride + 1;
    design.out_w = (w - kernel_size) / stride + 1;

    const Index rows = n * design.out_h * design.out_w;
    const Index cols = 1 + c * kernel_size * kernel_size;
    design.matrix.resize(rows, cols);
    design.matrix.col(0).setOnes();

    Index row = 0;
    for (Index img = 0; img < n; ++img) {
        for (Index hy = 0; hy < design.out_h; ++hy) {
            for (Index wx = 0; wx < design.out_w; ++wx, ++row) {
                for (Index ch = 0; ch < c; ++ch)
                    for (Index u = 0; u < kernel_size; ++u)
                        for (Index v = 0; v < kernel_size; ++v)
                            design.matrix(row, 1 + (ch * kernel_size + u) * kernel_size + v) =
                                feature_map(img, hy * stride + u, wx * stride + v, ch);
            }
        }
    }
    return design;
}

Matrix kernel_matrix(const Tensor4& kernel_oihw) {
    const Index c_out = kernel_oihw.dim0();
    const Index c_in = kernel_oihw.dim1();
    const Index k = kernel_oihw.dim2();
    if (kernel_oihw.dim3() != k) throw InvalidGeometry("kernel_matrix: kernel must be square");
    Matrix m(c_in * k * k, c_out);
    for (Index o = 0; o < c_out; ++o)
        for (Index i = 0; i < c_in; ++i)
            for (Index u = 0; u < k; ++u)
                for (Index v = 0; v < k; ++v) m((i * k + u) * k + v, o) = kernel_oihw(o, i, u, v);
    return m;
}

Tensor4 kernel_from_matrix(const Eigen::Ref<const Matrix>& m, Index c_out, Index c_in, Index k) {
    if (m.rows() != c_in * k * k || m.cols() != c_out)
        throw ShapeMismatch("kernel_from_matrix: size mismatch");
    Tensor4 kernel(c_out, c_in, k, k);
    for (Index o = 0; o < c_out; ++o)
        for (Index i = 0; i < c_in; ++i)
            for (Index u = 0; u < k; ++u)
                for (Index v = 0; v < k; ++v) kernel(o, i, u, v) = m((i * k + u) * k + v, o);
    return kernel;
}

Matrix flatten_spatial(const Tensor4& x) {
    Matrix out(x.dim0() * x.dim1() * x.dim2(), x.dim3());
    Index row = 0;
    for (Index n = 0; n < x.dim0(); ++n)
        for (Index h = 0; h < x.dim1(); ++h)
            for (Index w = 0; w < x.dim2(); ++w, ++row)
                for (Index c = 0; c < x.dim3(); ++c) out(row, c) = x(n, h, w, c);
    return out;
}

Tensor4 unflatten_spatial(const Eigen::Ref<const Matrix>& rows, Index n, Index h, Index w) {
    if (rows.rows() != n * h * w) throw ShapeMismatch("unflatten_spatial: row count mismatch");
    Tensor4 out(n, h, w, rows.cols());
    Index row = 0;
    for (Index img = 0; img < n; ++img)
        for (Index hy = 0; hy < h; ++hy)
            for (Index wx = 0; wx < w; ++wx, ++row)
                for (Index c = 0; c < rows.cols(); ++c) out(img, hy, wx, c) = rows(row, c);
    return out;
}

Tensor4 conv_nhwc(const Tensor4& x, const Tensor4& kernel_oihw, Index stride, Index pad,
                  const Vector* bias) {
    if (kernel_oihw.dim1() != x.dim3())
        throw ShapeMismatch("conv_nhwc: kernel input channels != map channels");
    const Tensor4 padded = pad_nhwc(x, pad);
    const PatchDesign design = unfold_patches(padded, kernel_oihw.dim2(), stride);
    Matrix out_flat =
        design.matrix.rightCols(design.matrix.cols() - 1) * kernel_matrix(kernel_oihw);
    if (bias != nullptr) {
        if (bias->size() != kernel_oihw.dim0()) throw ShapeMismatch("conv_nhwc: bias size");
        out_flat.rowwise() += bias->transpose();
    }
    return unflatten_spatial(out_flat, design.batch, design.out_h, design.out_w);
}

namespace {

Tensor4 channel_affine_relu(const Tensor4& x, const Vector& scale, const Vector& shift) {
    if (scale.size() != x.dim3() || shift.size() != x.dim3())
        throw ShapeMismatch("channel affine: per-channel parameter size mismatch");
    Tensor4 out = x;
    for (Index n = 0; n < x.dim0(); ++n)
        for (Index h = 0; h < x.dim1(); ++h)
            for (Index w = 0; w < x.dim2(); ++w)
                for (Index c = 0; c < x.dim3(); ++c)
                    out(n, h, w, c) = std::max(0.0, scale[c] * x(n, h, w, c) + shift[c]);
    return out;
}

}  // namespace

ConvBlockModel random_conv_block(Index c_in, Index c_mid, Index c_out, Index k,
                                 ConvBlockModel::Shortcut shortcut, std::uint64_t seed) {
    ConvBlockModel block;
    const double s1 = 1.0 / std::sqrt(static_cast<double>(c_in * k * k));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(c_mid * k * k));
    block.conv1 = random_tensor(c_mid, c_in, k, k, s1, mix_seed(seed, 411));
    block.conv2 = random_tensor(c_out, c_mid, k, k, s2, mix_seed(seed, 412));
    block.conv2_bias = Vector::Zero(c_out);
    Rng rng(mix_seed(seed, 413));
    block.aff1_scale = Vector::Ones(c_in) + 0.1 * rng.gaussian_vector(c_in);
    block.aff1_shift = 0.1 * rng.gaussian_vector(c_in);
    block.aff2_scale = Vector::Ones(c_mid) + 0.1 * rng.gaussian_vector(c_mid);
    block.aff2_shift = 0.1 * rng.gaussian_vector(c_mid);
    block.shortcut = shortcut;
    if (shortcut == ConvBlockModel::Shortcut::projection) {
        block.projection = random_tensor(c_out, c_in, 1, 1,
                                         1.0 / std::sqrt(static_cast<double>(c_in)),
                                         mix_seed(seed, 414));
    } else if (c_in != c_out) {
        throw InvalidGeometry("identity shortcut requires matching channel counts");
    }
    return block;
}

Tensor4 conv2_input(const ConvBlockModel& block, const Tensor4& x, const Tensor4& conv1_kernel) {
    const Tensor4 a1 = channel_affine_relu(x, block.aff1_scale, block.aff1_shift);
    const Tensor4 y = conv_nhwc(a1, conv1_kernel, block.stride, block.pad);
    return channel_affine_relu(y, block.aff2_scale, block.aff2_shift);
}

Tensor4 branch_output(const ConvBlockModel& block, const Tensor4& x) {
    const Tensor4 u = conv2_input(block, x, block.conv1);
    return conv_nhwc(u, block.conv2, block.stride, block.pad, &block.conv2_bias);
}

Tensor4 shortcut_output(const ConvBlockModel& block, const Tensor4& x) {
    if (block.shortcut == ConvBlockModel::Shortcut::identity) return x;
    return conv_nhwc(x, block.projection, 1, 0);
}

Tensor4 block_forward(const ConvBlockModel& block, const Tensor4& x) {
    Tensor4 out = branch_output(block, x);
    out += shortcut_output(block, x);
    return out;
}

Tensor4 block_forward_with(const ConvBlockModel& block, const ConvBlockParams& params,
                           const Tensor4& x) {
    const Tensor4 u = conv2_input(block, x, params.conv1);
    Tensor4 out = conv_nhwc(u, params.conv2, block.stride, block.pad, &params.conv2_bias);
    out += shortcut_output(block, x);
    return out;
}

NormalEqAccumulator::NormalEqAccumulator(Index design_width, Index c_out, Index chunk)
    : h(Matrix::Zero(design_width, design_width)),
      beta(Matrix::Zero(design_width, c_out)),
      chunk_size(chunk) {
    if (design_width < 1 || c_out < 1 || chunk < 1)
        throw InvalidConfig("NormalEqAccumulator: bad dimensions");
}

void accumulate_chunk(NormalEqAccumulator& acc, const PatchDesign& design_chunk,
                      const Eigen::Ref<const Matrix>& target_chunk,
                      const Eigen::Ref<const Matrix>& base_kernel_matrix) {
    const Matrix& ybar = design_chunk.matrix;
    if (ybar.rows() == 0) return;
    if (ybar.cols() != acc.h.rows())
        throw ShapeMismatch("accumulate_chunk: design width != accumulator dimension");
    if (target_chunk.rows() != ybar.rows())
        throw ShapeMismatch("accumulate_chunk: target rows != design rows");
    if (base_kernel_matrix.rows() != ybar.cols() - 1 ||
        base_kernel_matrix.cols() != target_chunk.cols())
        throw ShapeMismatch("accumulate_chunk: base kernel matrix shape mismatch");

    acc.h.noalias() += ybar.transpose() * ybar;
    const Matrix fitted = ybar.rightCols(ybar.cols() - 1) * base_kernel_matrix;
    acc.beta.noalias() += ybar.transpose() * (target_chunk - fitted);
    acc.rows_seen += ybar.rows();
}

ConvCorrection solve_conv_correction(const NormalEqAccumulator& acc, double ridge,
                                     const Tensor4& base_kernel) {
    const Index c_out = base_kernel.dim0();
    const Index c_in = base_kernel.dim1();
    const Index k = base_kernel.dim2();
    if (acc.h.rows() != 1 + c_in * k * k || acc.beta.cols() != c_out)
        throw ShapeMismatch("solve_conv_correction: accumulator does not match kernel shape");

    const SpdSystem spd(acc.h, ridge);
    const Matrix theta_delta = spd_solve(spd, acc.beta);  // Theta - Theta_0

    ConvCorrection out;
    out.bias = theta_delta.row(0).transpose();
    out.kernel_delta = kernel_from_matrix(theta_delta.bottomRows(c_in * k * k), c_out, c_in, k);
    return out;
}

Matrix conv_kernel_basis(Index kernel_size, Index c_in, Index c_out, Index rank,
                         std::uint64_t seed) {
    const Index flat_dim = kernel_size * kernel_size * c_in * c_out;
    if (rank > flat_dim) throw InvalidRank("conv_kernel_basis: rank exceeds flat kernel space");
    return orthonormal_basis(flat_dim, rank, mix_seed(seed, 421));
}

Tensor4 kernel_direction(const Eigen::Ref<const Vector>& flat, Index c_out, Index c_in, Index k) {
    if (flat.size() != c_out * c_in * k * k)
        throw ShapeMismatch("kernel_direction: flat size mismatch");
    Tensor4 kernel(c_out, c_in, k, k);
    Index idx = 0;
    for (Index o = 0; o < c_out; ++o)
        for (Index i = 0; i < c_in; ++i)
            for (Index u = 0; u < k; ++u)
                for (Index v = 0; v < k; ++v) kernel(o, i, u, v) = flat[idx++];
    return kernel;
}

namespace {

Tensor4 slice_batch(const Tensor4& x, Index start, Index count) {
    Tensor4 out(count, x.dim1(), x.dim2(), x.dim3());
    for (Index n = 0; n < count; ++n)
        for (Index h = 0; h < x.dim1(); ++h)
            for (Index w = 0; w < x.dim2(); ++w)
                for (Index c = 0; c < x.dim3(); ++c) out(n, h, w, c) = x(start + n, h, w, c);
    return out;
}

}  // namespace

NormalEqAccumulator block_correction_system(const ConvBlockModel& block,
                                            const Tensor4& calibration,
                                            const Tensor4& perturbed_conv1, Index chunk_size) {
    if (calibration.dim0() == 0) throw EmptyCalibration("block_correction_system: no images");
    const Index k = block.kernel_size();
    const Matrix base_mat = kernel_matrix(block.conv2);
    NormalEqAccumulator acc(1 + block.mid_channels() * k * k, block.out_channels(), chunk_size);

    for (Index start = 0; start < calibration.dim0(); start += chunk_size) {
        const Index count = std::min(chunk_size, calibration.dim0() - start);
        const Tensor4 chunk = slice_batch(calibration, start, count);
        const Tensor4 u_pert = conv2_input(block, chunk, perturbed_conv1);
        const PatchDesign design = unfold_patches(pad_nhwc(u_pert, block.pad), k, block.stride);
        // Targets: base-model conv2 outputs (no bias in the base block).
        const Tensor4 u_base = conv2_input(block, chunk, block.conv1);
        const Tensor4 target = conv_nhwc(u_base, block.conv2, block.stride, block.pad);
        accumulate_chunk(acc, design, flatten_spatial(target), base_mat);
    }
    return acc;
}

TinyConvNet random_tiny_conv_net(Index c_in, Index width, Index q, std::uint64_t seed) {
    TinyConvNet net;
    net.blocks.push_back(random_conv_block(c_in, width, width,
                                           3, c_in == width
                                                  ? ConvBlockModel::Shortcut::identity
                                                  : ConvBlockModel::Shortcut::projection,
                                           mix_seed(seed, 431)));
    net.blocks.push_back(random_conv_block(width, width, width, 3,
                                           ConvBlockModel::Shortcut::identity,
                                           mix_seed(seed, 432)));
    Rng rng(mix_seed(seed, 433));
    net.head_weight = rng.gaussian_matrix(q, width) / std::sqrt(static_cast<double>(width));
    net.head_bias = Vector::Zero(q);
    return net;
}

namespace {

Matrix global_average_pool(const Tensor4& x) {
    Matrix out = Matrix::Zero(x.dim0(), x.dim3());
    for (Index n = 0; n < x.dim0(); ++n)
        for (Index h = 0; h < x.dim1(); ++h)
            for (Index w = 0; w < x.dim2(); ++w)
                for (Index c = 0; c < x.dim3(); ++c) out(n, c) += x(n, h, w, c);
    out /= static_cast<double>(x.dim1() * x.dim2());
    return out;
}

}  // namespace

Matrix tiny_net_forward(const TinyConvNet& net, const Tensor4& x) {
    Tensor4 h = x;
    for (const auto& block : net.blocks) h = block_forward(block, h);
    Matrix pooled = global_average_pool(h);
    Matrix out = pooled * net.head_weight.transpose();
    out.rowwise() += net.head_bias.transpose();
    return out;
}

std::vector<std::vector<ConvMemberRepair>> build_conv_members(
    const TinyConvNet& net, const Tensor4& calibration, const std::vector<std::size_t>& blocks,
    Index ensemble_size, Index rank, double sigma, double ridge, Index chunk_size,
    std::uint64_t seed) {
    if (ensemble_size < 1 || rank < 1) throw InvalidConfig("build_conv_members: M, K >= 1");
    if (blocks.empty()) throw InvalidConfig("build_conv_members: no target blocks");

    // Upstream activations per selected block, cached from one base pass.
    std::vector<Tensor4> upstream(net.blocks.size());
    {
        Tensor4 h = calibration;
        for (std::size_t b = 0; b < net.blocks.size(); ++b) {
            upstream[b] = h;
            h = block_forward(net.blocks[b], h);
        }
    }

    std::vector<Matrix> bases;
    for (const std::size_t b : blocks) {
        if (b >= net.blocks.size()) throw InvalidConfig("build_conv_members: block out of range");
        const auto& blk = net.blocks[b];
        bases.push_back(conv_kernel_basis(blk.kernel_size(), blk.in_channels(),
                                          blk.mid_channels(), rank,
                                          mix_seed(seed, 441, static_cast<std::uint64_t>(b))));
    }

    std::vector<std::vector<ConvMemberRepair>> members;
    for (Index m = 0; m < ensemble_size; ++m) {
        std::vector<ConvMemberRepair> repairs;
        for (std::size_t j = 0; j < blocks.size(); ++j) {
            const std::size_t b = blocks[j];
            const auto& blk = net.blocks[b];
            Rng rng(mix_seed(seed, 442, static_cast<std::uint64_t>(b),
                             static_cast<std::uint64_t>(m)));
            const Vector z = rng.gaussian_vector(rank);
            ConvMemberRepair repair;
            repair.block_index = b;
            repair.conv1_delta = kernel_direction(sigma * (bases[j] * z), blk.mid_channels(),
                                                  blk.in_channels(), blk.kernel_size());
            Tensor4 perturbed = blk.conv1;
            perturbed += repair.conv1_delta;
            const NormalEqAccumulator acc =
                block_correction_system(blk, upstream[b], perturbed, chunk_size);
            repair.correction = solve_conv_correction(acc, ridge, blk.conv2);
            repairs.push_back(std::move(repair));
        }
        members.push_back(std::move(repairs));
    }
    return members;
}

Matrix tiny_net_forward_member(const TinyConvNet& net,
                               const std::vector<ConvMemberRepair>& repairs, const Tensor4& x) {
    Tensor4 h = x;
    for (std::size_t b = 0; b < net.blocks.size(); ++b) {
        const ConvMemberRepair* repair = nullptr;
        for (const auto& r : repairs)
            if (r.block_index == b) repair = &r;
        if (repair == nullptr) {
            h = block_forward(net.blocks[b], h);
        } else {
            const auto& blk = net.blocks[b];
            ConvBlockParams params;
            params.conv1 = blk.conv1;
            params.conv1 += repair->conv1_delta;
            params.conv2 = blk.conv2;
            params.conv2 += repair->correction.kernel_delta;
            params.conv2_bias = blk.conv2_bias + repair->correction.bias;
            h = block_forward_with(blk, params, h);
        }
    }
    Matrix pooled = global_average_pool(h);
    Matrix out = pooled * net.head_weight.transpose();
    out.rowwise() += net.head_bias.transpose();
    return out;
}

namespace {

nlohmann::json tensor_to_json(const Tensor4& t) {
    return nlohmann::json{
        {"dims", {t.dim0(), t.dim1(), t.dim2(), t.dim3()}},
        {"data", encode_doubles(t.data(), static_cast<std::size_t>(t.size()))}};
}

Tensor4 tensor_from_json(const nlohmann::json& j) {
    const auto dims = j.at("dims").get<std::vector<Index>>();
    if (dims.size() != 4) throw CorruptFile("tensor payload: need 4 dims");
    Tensor4 t(dims[0], dims[1], dims[2], dims[3]);
    const std::vector<double> data = decode_doubles(j.at("data").get<std::string>());
    if (static_cast<Index>(data.size()) != t.size())
        throw CorruptFile("tensor payload size mismatch");
    std::copy(data.begin(), data.end(), t.data());
    return t;
}

}  // namespace

std::string serialize_conv_net(const TinyConvNet& net) {
    nlohmann::json doc;
    doc["format"] = "pnc-model";
    doc["version"] = 1;
    doc["kind"] = "conv";
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : net.blocks) {
        blocks.push_back(
            {{"conv1", tensor_to_json(b.conv1)},
             {"conv2", tensor_to_json(b.conv2)},
             {"conv2_bias", vector_to_json(b.conv2_bias)},
             {"aff1_scale", vector_to_json(b.aff1_scale)},
             {"aff1_shift", vector_to_json(b.aff1_shift)},
             {"aff2_scale", vector_to_json(b.aff2_scale)},
             {"aff2_shift", vector_to_json(b.aff2_shift)},
             {"shortcut", b.shortcut == ConvBlockModel::Shortcut::identity ? "identity" : "projection"},
             {"projection", tensor_to_json(b.projection)},
             {"pad", b.pad},
             {"stride", b.stride}});
    }
    doc["conv_blocks"] = std::move(blocks);
    doc["head"] = {{"weight", matrix_to_json(net.head_weight)},
                   {"bias", vector_to_json(net.head_bias)}};
    return doc.dump(2) + "\n";
}

TinyConvNet deserialize_conv_net(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(std::string("conv model document: ") + e.what());
    }
    if (doc.value("format", "") != "pnc-model") throw CorruptFile("not a pnc-model document");
    if (doc.value("version", -1) != 1) throw VersionMismatch("unsupported pnc-model version");
    if (doc.value("kind", "mlp") != "conv") throw CorruptFile("document has no conv-block section");

    TinyConvNet net;
    for (const auto& jb : doc.at("conv_blocks")) {
        ConvBlockModel b;
        b.conv1 = tensor_from_json(jb.at("conv1"));
        b.conv2 = tensor_from_json(jb.at("conv2"));
        b.conv2_bias = vector_from_json(jb.at("conv2_bias"));
        b.aff1_scale = vector_from_json(jb.at("aff1_scale"));
        b.aff1_shift = vector_from_json(jb.at("aff1_shift"));
        b.aff2_scale = vector_from_json(jb.at("aff2_scale"));
        b.aff2_shift = vector_from_json(jb.at("aff2_shift"));
        b.shortcut = jb.at("shortcut").get<std::string>() == "identity"
                         ? ConvBlockModel::Shortcut::identity
                         : ConvBlockModel::Shortcut::projection;
        b.projection = tensor_from_json(jb.at("projection"));
        b.pad = jb.at("pad").get<Index>();
        b.stride = jb.at("stride").get<Index>();
        net.blocks.push_back(std::move(b));
    }
    net.head_weight = matrix_from_json(doc.at("head").at("weight"));
    net.head_bias = vector_from_json(doc.at("head").at("bias"));
    return net;
}

}  // namespace pnc

