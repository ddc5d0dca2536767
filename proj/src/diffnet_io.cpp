#include "tcal/diffnet/io.hpp"

#include <fstream>
#include <sstream>

#include "tcal/tensor_io.hpp"

namespace tcal::diffnet {

namespace {

Tensor to_tensor(const Matrix<float>& m) {
    // Row-major [rows, cols] on disk.
    std::vector<float> data(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) data[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
    }
    return Tensor::from_f32({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(data));
}

Matrix<float> from_tensor(const Tensor& t, const std::string& name) {
    if (t.dtype() != DType::f32 || t.rank() != 2) {
        throw ValidationError(ValidationError::Kind::shape_mismatch, name, "parameter " + name + " must be a 2-D f32 tensor");
    }
    Matrix<float> m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
    const auto data = t.f32();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = data[static_cast<std::size_t>(r * m.cols() + c)];
    }
    return m;
}

}  // namespace

nlohmann::ordered_json network_manifest(const Network<float>& network, const std::string& file_prefix) {
    nlohmann::ordered_json doc;
    doc["input_channels"] = network.input_channels();
    doc["output_channels"] = network.output_channels();
    doc["seed"] = network.seed();
    if (const auto& c = network.conditioning()) {
        doc["conditioning"] = {{"lead_times", c->lead_times}, {"embedding_dim", c->embedding_dim}};
    } else {
        doc["conditioning"] = nullptr;
    }
    auto layers = nlohmann::ordered_json::array();
    for (const LayerSpec& l : network.layers()) {
        nlohmann::ordered_json entry{{"kind", layer_kind_name(l.kind)},
                                     {"in_channels", l.in_channels},
                                     {"out_channels", l.out_channels}};
        if (l.kind == LayerKind::conv2d) entry["kernel"] = l.kernel;
        layers.push_back(entry);
    }
    doc["layers"] = layers;
    doc["parameter_count"] = network.parameter_count();
    auto params = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < network.parameters().size(); ++i) {
        const auto& p = network.parameters()[i];
        params.push_back({{"name", network.parameter_names()[i]},
                          {"file", file_prefix + network.parameter_names()[i] + ".fct1"},
                          {"shape", {p.rows(), p.cols()}}});
    }
    doc["parameters"] = params;
    return doc;
}

void save_parameters(const Network<float>& network, const std::filesystem::path& dir, const std::string& file_prefix) {
    for (std::size_t i = 0; i < network.parameters().size(); ++i) {
        write_tensor(to_tensor(network.parameters()[i]), dir / (file_prefix + network.parameter_names()[i] + ".fct1"));
    }
}

Network<float> load_network(const nlohmann::ordered_json& manifest, const std::filesystem::path& dir) {
    try {
        std::optional<Conditioning> conditioning;
        if (!manifest.at("conditioning").is_null()) {
            conditioning = Conditioning{manifest.at("conditioning").at("lead_times").get<std::size_t>(),
                                        manifest.at("conditioning").at("embedding_dim").get<std::size_t>()};
        }
        Network<float> net(manifest.at("input_channels").get<std::size_t>(), manifest.at("seed").get<std::uint64_t>(),
                           conditioning);
        for (const auto& l : manifest.at("layers")) {
            switch (parse_layer_kind(l.at("kind").get<std::string>())) {
                case LayerKind::dense: net.dense(l.at("out_channels").get<std::size_t>()); break;
                case LayerKind::conv2d:
                    net.conv2d(l.at("out_channels").get<std::size_t>(), l.at("kernel").get<std::size_t>());
                    break;
                case LayerKind::avgpool2: net.avgpool2(); break;
                case LayerKind::upsample2: net.upsample2(); break;
                case LayerKind::relu: net.relu(); break;
                case LayerKind::sigmoid: net.sigmoid(); break;
                case LayerKind::film: net.film(); break;
            }
        }
        const auto& params = manifest.at("parameters");
        if (params.size() != net.parameters().size()) {
            throw ValidationError(ValidationError::Kind::incompatible, "", "parameter list does not match the layer list");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            const std::string name = params[i].at("name").get<std::string>();
            if (name != net.parameter_names()[i]) {
                throw ValidationError(ValidationError::Kind::incompatible, name,
                                      "parameter " + std::to_string(i) + " is '" + name + "', expected '" +
                                          net.parameter_names()[i] + "'");
            }
            Matrix<float> value = from_tensor(read_tensor(dir / params[i].at("file").get<std::string>()), name);
            if (value.rows() != net.parameters()[i].rows() || value.cols() != net.parameters()[i].cols()) {
                throw ValidationError(ValidationError::Kind::shape_mismatch, name, "parameter " + name + " has the wrong shape");
            }
            net.parameters()[i] = std::move(value);
        }
        return net;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::bad_shape, std::string("malformed network manifest: ") + e.what());
    }
}

void save_network(const Network<float>& network, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json doc{{"format", "tcal.network"}, {"version", 1}};
    doc["network"] = network_manifest(network, "");
    save_parameters(network, dir, "");
    std::ofstream out(dir / "manifest.json");
    out << doc.dump(2) << '\n';
    if (!out) throw FormatError(FormatError::Kind::io_failure, "cannot write " + (dir / "manifest.json").string());
}

Network<float> load_network(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw FormatError(FormatError::Kind::io_failure, "cannot open " + (dir / "manifest.json").string());
    nlohmann::ordered_json doc;
    try {
        doc = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::bad_shape, std::string("malformed network manifest: ") + e.what());
    }
    return load_network(doc.at("network"), dir);
}

}  // namespace tcal::diffnet
