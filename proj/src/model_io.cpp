#include "pnc/model_io.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <sstream>

namespace pnc {

namespace {
constexpr char kB64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::string out;
    out.reserve(((n + 2) / 3) * 4);
    std::size_t i = 0;
    for (; i + 3 <= n; i += 3) {
        const unsigned v = (p[i] << 16) | (p[i + 1] << 8) | p[i + 2];
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back(kB64Alphabet[v & 63]);
    }
    const std::size_t rest = n - i;
    if (rest == 1) {
        const unsigned v = p[i] << 16;
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out += "==";
    } else if (rest == 2) {
        const unsigned v = (p[i] << 16) | (p[i + 1] << 8);
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out += "=";
    }
    return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
    int lut[256];
    std::fill(std::begin(lut), std::end(lut), -1);
    for (int i = 0; i < 64; ++i) lut[static_cast<unsigned char>(kB64Alphabet[i])] = i;

    std::vector<unsigned char> out;
    out.reserve(text.size() / 4 * 3);
    unsigned acc = 0;
    int bits = 0;
    for (const char c : text) {
        if (c == '=') break;
        const int v = lut[static_cast<unsigned char>(c)];
        if (v < 0) throw CorruptFile("base64: invalid character");
        acc = (acc << 6) | static_cast<unsigned>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((acc >> bits) & 0xff));
        }
    }
    return out;
}

std::string encode_doubles(const double* data, std::size_t n) {
    std::vector<unsigned char> bytes(n * 8);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &data[i], 8);
        for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    return base64_encode(bytes.data(), bytes.size());
}

std::vector<double> decode_doubles(const std::string& text) {
    const std::vector<unsigned char> bytes = base64_decode(text);
    if (bytes.size() % 8 != 0) throw CorruptFile("decode_doubles: payload not a multiple of 8");
    std::vector<double> out(bytes.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
        std::memcpy(&out[i], &bits, 8);
    }
    return out;
}

nlohmann::json matrix_to_json(const Eigen::Ref<const Matrix>& m) {
    const Vector flat = flatten_rowmajor(m);
    return nlohmann::json{{"rows", m.rows()},
                          {"cols", m.cols()},
                          {"data", encode_doubles(flat.data(), static_cast<std::size_t>(flat.size()))}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
    const Index rows = j.at("rows").get<Index>();
    const Index cols = j.at("cols").get<Index>();
    const std::vector<double> data = decode_doubles(j.at("data").get<std::string>());
    if (static_cast<Index>(data.size()) != rows * cols)
        throw CorruptFile("matrix payload size mismatch");
    return unflatten_rowmajor(Eigen::Map<const Vector>(data.data(), rows * cols), rows, cols);
}

nlohmann::json vector_to_json(const Eigen::Ref<const Vector>& v) {
    return nlohmann::json{{"size", v.size()},
                          {"data", encode_doubles(v.data(), static_cast<std::size_t>(v.size()))}};
}

Vector vector_from_json(const nlohmann::json& j) {
    const Index size = j.at("size").get<Index>();
    const std::vector<double> data = decode_doubles(j.at("data").get<std::string>());
    if (static_cast<Index>(data.size()) != size) throw CorruptFile("vector payload size mismatch");
    return Eigen::Map<const Vector>(data.data(), size);
}

std::string serialize_model(const MlpModel& model) {
    nlohmann::json doc;
    doc["format"] = "pnc-model";
    doc["version"] = 1;
    doc["activation"] = activation_name(model.activation());
    nlohmann::json layers = nlohmann::json::array();
    for (Index i = 0; i < model.layer_count(); ++i) {
        const auto& l = model.layer(i);
        layers.push_back(
            {{"weight", matrix_to_json(l.weight)}, {"bias", vector_to_json(l.bias)}});
    }
    doc["layers"] = std::move(layers);
    return doc.dump(2) + "\n";
}

MlpModel deserialize_model(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(std::string("model document: ") + e.what());
    }
    if (doc.value("format", "") != "pnc-model") throw CorruptFile("not a pnc-model document");
    if (doc.value("version", -1) != 1) throw VersionMismatch("unsupported pnc-model version");
    std::vector<MlpLayer> layers;
    for (const auto& jl : doc.at("layers")) {
        MlpLayer l;
        l.weight = matrix_from_json(jl.at("weight"));
        l.bias = vector_from_json(jl.at("bias"));
        layers.push_back(std::move(l));
    }
    return MlpModel(std::move(layers), activation_from_name(doc.at("activation").get<std::string>()));
}

void save_model(const MlpModel& model, const std::string& path) {
    write_file(path, serialize_model(model));
}

MlpModel load_model(const std::string& path) { return deserialize_model(read_file(path)); }

std::string model_content_hash(const MlpModel& model) {
    const std::string text = serialize_model(model);
    const std::uint64_t h = fnv1a64(text.data(), text.size());
    char buf[19];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptFile("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write file: " + path);
    out << contents;
    if (!out) throw Error("write failed: " + path);
}

}  // namespace pnc
