#pragma once

// Checkpoint directory: model.txt (format version, config, parameter list)
// plus one f32 little-endian row-major blob per parameter under params/.

#include <filesystem>
#include <sstream>
#include <string>

#include "urbanst/dataset.hpp"
#include "urbanst/errors.hpp"
#include "urbanst/kv_text.hpp"
#include "urbanst/model.hpp"

namespace urbanst {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointDescriptor = "model.txt";

template <class T>
void save_checkpoint(const ModelState<T>& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "params");
    KeyValueText desc;
    desc.add("format", std::string("urbanst-checkpoint"));
    desc.add("version", kCheckpointVersion);
    const auto config_text = model.config.to_text();
    for (const auto& [k, v] : config_text.entries()) {
        desc.add(k, v);
    }
    for (const auto& p : model.params) {
        std::ostringstream shape;
        shape << p.name;
        for (auto d : p.value.shape()) {
            shape << ' ' << d;
        }
        desc.add("param", shape.str());
        const auto bytes = detail::encode_f32le(p.value.values());
        detail::write_bytes(dir / "params" / (p.name + ".f32le"), bytes.data(), bytes.size());
    }
    desc.write_file(dir / kCheckpointDescriptor, "urbanst model checkpoint");
}

template <class T>
ModelState<T> load_checkpoint(const std::filesystem::path& dir) {
    const auto desc = KeyValueText::read_file(dir / kCheckpointDescriptor);
    if (!desc.contains("format") || desc.raw("format") != "urbanst-checkpoint") {
        throw FormatError(dir.string() + " is not a model checkpoint");
    }
    const int version = desc.get<int>("version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    ModelState<T> model(ModelConfig::from_text(desc));
    const auto listed = desc.all("param");
    if (listed.size() != model.params.size()) {
        throw FormatError("checkpoint lists " + std::to_string(listed.size()) + " parameters, config implies " +
                          std::to_string(model.params.size()));
    }
    for (std::size_t i = 0; i < listed.size(); ++i) {
        auto& p = model.params[i];
        std::istringstream in(listed[i]);
        std::string name;
        in >> name;
        typename Tensor<T>::Shape shape;
        for (std::size_t d = 0; in >> d;) {
            shape.push_back(d);
        }
        if (name != p.name || shape != p.value.shape()) {
            throw FormatError("checkpoint parameter `" + listed[i] + "` does not match `" + p.name + "`");
        }
        const auto values = detail::decode_f32le(detail::read_bytes(dir / "params" / (name + ".f32le")));
        if (values.size() != p.value.size()) {
            throw FormatError("parameter blob " + name + " has " + std::to_string(values.size()) + " values, expected " +
                              std::to_string(p.value.size()));
        }
        auto dst = p.value.values();
        for (std::size_t j = 0; j < values.size(); ++j) {
            if (!std::isfinite(values[j])) {
                throw FormatError("parameter " + name + " holds a non-finite value");
            }
            dst[j] = static_cast<T>(values[j]);
        }
    }
    return model;
}

} // namespace urbanst
