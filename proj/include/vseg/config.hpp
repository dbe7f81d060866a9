#pragma once

#include <functional>
#include <map>

#include "train.hpp"

namespace vseg {

// Plain-text run configuration: "key = value" lines under [model], [train]
// and [data] sections. Unknown keys and sections are rejected with their line
// number. CLI flags override file values.
struct RunConfig {
    ModelConfig model;
    TrainOptions train;
    PhantomSpec phantom;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("expected boolean, got '" + v + "'");
}

}  // namespace detail

inline void apply_config_entry(RunConfig& cfg, const std::string& section, const std::string& key,
                               const std::string& value) {
    using Setter = std::function<void(RunConfig&, const std::string&)>;
    static const std::map<std::string, Setter> setters = {
        {"model.in_channels", [](RunConfig& c, const std::string& v) { c.model.in_channels = std::stoi(v); }},
        {"model.base_channels", [](RunConfig& c, const std::string& v) { c.model.base_channels = std::stoi(v); }},
        {"model.depth", [](RunConfig& c, const std::string& v) { c.model.depth = std::stoi(v); }},
        {"model.num_classes", [](RunConfig& c, const std::string& v) { c.model.num_classes = std::stoi(v); }},
        {"model.patch_size", [](RunConfig& c, const std::string& v) { c.model.patch_size = std::stoi(v); }},
        {"model.upsampler", [](RunConfig& c, const std::string& v) { c.model.upsampler = upsampler_from_string(v); }},
        {"model.gate", [](RunConfig& c, const std::string& v) { c.model.gate = gate_from_string(v); }},
        {"model.decoder_block",
         [](RunConfig& c, const std::string& v) { c.model.decoder_block = decoder_block_from_string(v); }},
        {"model.dsa_literal_gate",
         [](RunConfig& c, const std::string& v) { c.model.dsa_literal_gate = detail::parse_bool(v); }},
        {"train.epochs", [](RunConfig& c, const std::string& v) { c.train.epochs = std::stoi(v); }},
        {"train.batch_size", [](RunConfig& c, const std::string& v) { c.train.batch_size = std::stoi(v); }},
        {"train.lr_initial", [](RunConfig& c, const std::string& v) { c.train.lr_initial = std::stod(v); }},
        {"train.warmup_epochs", [](RunConfig& c, const std::string& v) { c.train.warmup_epochs = std::stoi(v); }},
        {"train.weight_decay", [](RunConfig& c, const std::string& v) { c.train.weight_decay = std::stod(v); }},
        {"train.model_seed", [](RunConfig& c, const std::string& v) { c.train.model_seed = std::stoull(v); }},
        {"train.data_seed", [](RunConfig& c, const std::string& v) { c.train.data_seed = std::stoull(v); }},
        {"train.train_volumes", [](RunConfig& c, const std::string& v) { c.train.train_volumes = std::stoi(v); }},
        {"train.val_volumes", [](RunConfig& c, const std::string& v) { c.train.val_volumes = std::stoi(v); }},
        {"train.checkpoint_every", [](RunConfig& c, const std::string& v) { c.train.checkpoint_every = std::stoi(v); }},
        {"train.threads", [](RunConfig& c, const std::string& v) { c.train.threads = std::stoi(v); }},
        {"data.extent", [](RunConfig& c, const std::string& v) {
             c.phantom.extent_d = c.phantom.extent_h = c.phantom.extent_w = std::stoll(v);
         }},
        {"data.noise_std", [](RunConfig& c, const std::string& v) { c.phantom.noise_std = std::stod(v); }},
        {"data.intensity_background",
         [](RunConfig& c, const std::string& v) { c.phantom.class_intensity[0] = std::stod(v); }},
        {"data.intensity_organ",
         [](RunConfig& c, const std::string& v) { c.phantom.class_intensity[1] = std::stod(v); }},
        {"data.intensity_shell",
         [](RunConfig& c, const std::string& v) { c.phantom.class_intensity[2] = std::stod(v); }},
        {"data.intensity_blob",
         [](RunConfig& c, const std::string& v) { c.phantom.class_intensity[3] = std::stod(v); }},
    };
    auto it = setters.find(section + "." + key);
    if (it == setters.end()) throw ConfigError("unknown key '" + key + "' in section [" + section + "]");
    try {
        it->second(cfg, value);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("bad value '" + value + "' for " + section + "." + key + ": " + e.what());
    }
}

inline RunConfig parse_config_text(const std::string& text, RunConfig cfg = {}) {
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        try {
            if (line.front() == '[') {
                if (line.back() != ']') throw ConfigError("malformed section header");
                section = detail::trim(line.substr(1, line.size() - 2));
                if (section != "model" && section != "train" && section != "data")
                    throw ConfigError("unknown section [" + section + "]");
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError("expected 'key = value'");
            if (section.empty()) throw ConfigError("key outside of any section");
            apply_config_entry(cfg, section, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return cfg;
}

inline RunConfig parse_config_file(const std::string& path, RunConfig cfg = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_config_text(text, cfg);
}

// Annotated dump of every key with its current (default) value.
inline std::string config_text(const RunConfig& c) {
    std::ostringstream os;
    os << "[model]\n";
    os << "in_channels = " << c.model.in_channels << "\n";
    os << "base_channels = " << c.model.base_channels << "\n";
    os << "depth = " << c.model.depth << "\n";
    os << "num_classes = " << c.model.num_classes << "\n";
    os << "patch_size = " << c.model.patch_size << "\n";
    os << "upsampler = " << to_string(c.model.upsampler) << "        # trilinear|transposed_conv|subpixel_conv|onsampling\n";
    os << "gate = " << to_string(c.model.gate) << "              # none|attention_gate|scp_ag\n";
    os << "decoder_block = " << to_string(c.model.decoder_block)
       << "        # basic|residual|basic_deform|residual_deform|dsa\n";
    os << "dsa_literal_gate = " << (c.model.dsa_literal_gate ? "true" : "false") << "\n";
    os << "\n[train]\n";
    os << "epochs = " << c.train.epochs << "\n";
    os << "batch_size = " << c.train.batch_size << "\n";
    os << "lr_initial = " << c.train.lr_initial << "\n";
    os << "warmup_epochs = " << c.train.warmup_epochs << "\n";
    os << "weight_decay = " << c.train.weight_decay << "\n";
    os << "model_seed = " << c.train.model_seed << "\n";
    os << "data_seed = " << c.train.data_seed << "\n";
    os << "train_volumes = " << c.train.train_volumes << "\n";
    os << "val_volumes = " << c.train.val_volumes << "\n";
    os << "checkpoint_every = " << c.train.checkpoint_every << "\n";
    os << "threads = " << c.train.threads << "            # 0 = runtime default\n";
    os << "\n[data]\n";
    os << "extent = " << c.phantom.extent_d << "\n";
    os << "noise_std = " << c.phantom.noise_std << "\n";
    os << "intensity_background = " << c.phantom.class_intensity[0] << "\n";
    os << "intensity_organ = " << c.phantom.class_intensity[1] << "\n";
    os << "intensity_shell = " << c.phantom.class_intensity[2] << "\n";
    os << "intensity_blob = " << c.phantom.class_intensity[3] << "\n";
    return os.str();
}

}  // namespace vseg
