#pragma once

#include "pnc/net.hpp"

#include <nlohmann/json_fwd.hpp>

#include <string>

namespace pnc {

// Matrix payloads inside structured-text documents: shape plus a base64 block
// of little-endian 64-bit floats in row-major order. Round trips bit-exactly.
nlohmann::json matrix_to_json(const Eigen::Ref<const Matrix>& m);
Matrix matrix_from_json(const nlohmann::json& j);
nlohmann::json vector_to_json(const Eigen::Ref<const Vector>& v);
Vector vector_from_json(const nlohmann::json& j);

std::string serialize_model(const MlpModel& model);
MlpModel deserialize_model(const std::string& text);

void save_model(const MlpModel& model, const std::string& path);
MlpModel load_model(const std::string& path);

// Content hash of a model's serialized form, used by ensemble files to pin
// the base model they were built from.
std::string model_content_hash(const MlpModel& model);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

}  // namespace pnc
