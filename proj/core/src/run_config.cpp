#include "liverformer/run_config.hpp"

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "liverformer/nifti.hpp"

namespace liverformer {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == sep) {
            out.push_back(trim(s.substr(start, i - start)));
            start = i + 1;
        }
    }
    return out;
}

std::string fmt_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& key, const std::string& s) {
    const std::string t = trim(s);
    if (t.empty()) throw BadConfigValue(key + ": empty value");
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size()) {
        throw BadConfigValue(key + ": not a number: " + t);
    }
    return v;
}

long long parse_ll(const std::string& key, const std::string& s) {
    const std::string t = trim(s);
    if (t.empty()) throw BadConfigValue(key + ": empty value");
    char* end = nullptr;
    const long long v = std::strtoll(t.c_str(), &end, 10);
    if (end != t.c_str() + t.size()) {
        throw BadConfigValue(key + ": not an integer: " + t);
    }
    return v;
}

int parse_int(const std::string& key, const std::string& s) {
    return static_cast<int>(parse_ll(key, s));
}

std::size_t parse_size(const std::string& key, const std::string& s) {
    const long long v = parse_ll(key, s);
    if (v < 0) throw BadConfigValue(key + ": must be non-negative: " + s);
    return static_cast<std::size_t>(v);
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
    const std::string t = trim(s);
    if (t.empty()) throw BadConfigValue(key + ": empty value");
    char* end = nullptr;
    const unsigned long long v = std::strtoull(t.c_str(), &end, 10);
    if (end != t.c_str() + t.size() || t[0] == '-') {
        throw BadConfigValue(key + ": not an unsigned integer: " + t);
    }
    return v;
}

std::string fmt_dims(const Dims& d) {
    return std::to_string(d.d) + "x" + std::to_string(d.h) + "x" + std::to_string(d.w);
}

Dims parse_dims(const std::string& key, const std::string& s) {
    const std::vector<std::string> parts = split(trim(s), 'x');
    if (parts.size() != 3) throw BadConfigValue(key + ": expected DxHxW: " + s);
    return Dims{parse_size(key, parts[0]), parse_size(key, parts[1]),
                parse_size(key, parts[2])};
}

std::string fmt_vec3(const Vec3& v) {
    return fmt_double(v[0]) + "," + fmt_double(v[1]) + "," + fmt_double(v[2]);
}

Vec3 parse_vec3(const std::string& key, const std::string& s) {
    const std::vector<std::string> parts = split(s, ',');
    if (parts.size() != 3) throw BadConfigValue(key + ": expected three numbers: " + s);
    return Vec3{parse_double(key, parts[0]), parse_double(key, parts[1]),
                parse_double(key, parts[2])};
}

std::string fmt_plane(const PlaneSpec& p) {
    return fmt_vec3(p.normal) + "," + fmt_double(p.offset);
}

PlaneSpec parse_plane(const std::string& key, const std::string& s) {
    const std::vector<std::string> parts = split(s, ',');
    if (parts.size() != 4) {
        throw BadConfigValue(key + ": expected normal_d,normal_h,normal_w,offset: " + s);
    }
    return PlaneSpec{{parse_double(key, parts[0]), parse_double(key, parts[1]),
                      parse_double(key, parts[2])},
                     parse_double(key, parts[3])};
}

std::string fmt_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& s) {
    std::vector<std::size_t> out;
    for (const std::string& p : split(s, ',')) out.push_back(parse_size(key, p));
    if (out.empty()) throw BadConfigValue(key + ": empty list");
    return out;
}

struct Binding {
    const char* key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<Binding>& bindings() {
    static const std::vector<Binding> table = {
        {"preprocess.target_spacing",
         [](const RunConfig& c) { return fmt_double(c.preprocess.target_spacing); },
         [](RunConfig& c, const std::string& v) {
             c.preprocess.target_spacing = parse_double("preprocess.target_spacing", v);
         }},
        {"preprocess.window_level",
         [](const RunConfig& c) { return fmt_double(c.preprocess.window_level); },
         [](RunConfig& c, const std::string& v) {
             c.preprocess.window_level = parse_double("preprocess.window_level", v);
         }},
        {"preprocess.window_width",
         [](const RunConfig& c) { return fmt_double(c.preprocess.window_width); },
         [](RunConfig& c, const std::string& v) {
             c.preprocess.window_width = parse_double("preprocess.window_width", v);
         }},
        {"preprocess.target_dims",
         [](const RunConfig& c) { return fmt_dims(c.preprocess.target_dims); },
         [](RunConfig& c, const std::string& v) {
             c.preprocess.target_dims = parse_dims("preprocess.target_dims", v);
         }},
        {"preprocess.normalization",
         [](const RunConfig& c) {
             return std::string(c.preprocess.normalization == NormalizationMode::Window
                                    ? "window"
                                    : "minmax");
         },
         [](RunConfig& c, const std::string& v) {
             const std::string t = trim(v);
             if (t == "window") {
                 c.preprocess.normalization = NormalizationMode::Window;
             } else if (t == "minmax") {
                 c.preprocess.normalization = NormalizationMode::MinMax;
             } else {
                 throw BadConfigValue("preprocess.normalization: expected window or minmax: " + v);
             }
         }},

        {"model.arch", [](const RunConfig& c) { return c.model_arch; },
         [](RunConfig& c, const std::string& v) {
             const std::string t = trim(v);
             if (t != "liverformer" && t != "unet3d") {
                 throw BadConfigValue("model.arch: expected liverformer or unet3d: " + v);
             }
             c.model_arch = t;
         }},
        {"model.in_channels",
         [](const RunConfig& c) { return std::to_string(c.model.in_channels); },
         [](RunConfig& c, const std::string& v) {
             c.model.in_channels = parse_size("model.in_channels", v);
         }},
        {"model.classes",
         [](const RunConfig& c) { return std::to_string(c.model.classes); },
         [](RunConfig& c, const std::string& v) {
             c.model.classes = parse_size("model.classes", v);
         }},
        {"model.encoder_channels",
         [](const RunConfig& c) { return fmt_sizes(c.model.encoder_channels); },
         [](RunConfig& c, const std::string& v) {
             c.model.encoder_channels = parse_sizes("model.encoder_channels", v);
         }},
        {"model.encoder_strides",
         [](const RunConfig& c) { return fmt_sizes(c.model.encoder_strides); },
         [](RunConfig& c, const std::string& v) {
             c.model.encoder_strides = parse_sizes("model.encoder_strides", v);
         }},
        {"model.patch_size",
         [](const RunConfig& c) { return std::to_string(c.model.patch_size); },
         [](RunConfig& c, const std::string& v) {
             c.model.patch_size = parse_size("model.patch_size", v);
         }},
        {"model.hidden_dim",
         [](const RunConfig& c) { return std::to_string(c.model.hidden_dim); },
         [](RunConfig& c, const std::string& v) {
             c.model.hidden_dim = parse_size("model.hidden_dim", v);
         }},
        {"model.transformer_layers",
         [](const RunConfig& c) { return std::to_string(c.model.transformer_layers); },
         [](RunConfig& c, const std::string& v) {
             c.model.transformer_layers = parse_size("model.transformer_layers", v);
         }},
        {"model.heads", [](const RunConfig& c) { return std::to_string(c.model.heads); },
         [](RunConfig& c, const std::string& v) {
             c.model.heads = parse_size("model.heads", v);
         }},
        {"model.mlp_ratio",
         [](const RunConfig& c) { return std::to_string(c.model.mlp_ratio); },
         [](RunConfig& c, const std::string& v) {
             c.model.mlp_ratio = parse_size("model.mlp_ratio", v);
         }},
        {"model.input_dims",
         [](const RunConfig& c) { return fmt_dims(c.model.input_dims); },
         [](RunConfig& c, const std::string& v) {
             c.model.input_dims = parse_dims("model.input_dims", v);
         }},

        {"train.lr0", [](const RunConfig& c) { return fmt_double(c.train.lr0); },
         [](RunConfig& c, const std::string& v) {
             c.train.lr0 = parse_double("train.lr0", v);
         }},
        {"train.decay_factor",
         [](const RunConfig& c) { return fmt_double(c.train.decay_factor); },
         [](RunConfig& c, const std::string& v) {
             c.train.decay_factor = parse_double("train.decay_factor", v);
         }},
        {"train.decay_every",
         [](const RunConfig& c) { return std::to_string(c.train.decay_every); },
         [](RunConfig& c, const std::string& v) {
             c.train.decay_every = parse_int("train.decay_every", v);
         }},
        {"train.epochs", [](const RunConfig& c) { return std::to_string(c.train.epochs); },
         [](RunConfig& c, const std::string& v) {
             c.train.epochs = parse_int("train.epochs", v);
         }},
        {"train.batch_size",
         [](const RunConfig& c) { return std::to_string(c.train.batch_size); },
         [](RunConfig& c, const std::string& v) {
             c.train.batch_size = parse_int("train.batch_size", v);
         }},
        {"train.beta1", [](const RunConfig& c) { return fmt_double(c.train.beta1); },
         [](RunConfig& c, const std::string& v) {
             c.train.beta1 = parse_double("train.beta1", v);
         }},
        {"train.beta2", [](const RunConfig& c) { return fmt_double(c.train.beta2); },
         [](RunConfig& c, const std::string& v) {
             c.train.beta2 = parse_double("train.beta2", v);
         }},
        {"train.eps_adam", [](const RunConfig& c) { return fmt_double(c.train.eps_adam); },
         [](RunConfig& c, const std::string& v) {
             c.train.eps_adam = parse_double("train.eps_adam", v);
         }},
        {"train.seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
         [](RunConfig& c, const std::string& v) {
             c.train.seed = parse_u64("train.seed", v);
         }},
        {"train.train_ratio",
         [](const RunConfig& c) { return fmt_double(c.train.train_ratio); },
         [](RunConfig& c, const std::string& v) {
             c.train.train_ratio = parse_double("train.train_ratio", v);
         }},
        {"train.val_ratio", [](const RunConfig& c) { return fmt_double(c.train.val_ratio); },
         [](RunConfig& c, const std::string& v) {
             c.train.val_ratio = parse_double("train.val_ratio", v);
         }},
        {"train.test_ratio",
         [](const RunConfig& c) { return fmt_double(c.train.test_ratio); },
         [](RunConfig& c, const std::string& v) {
             c.train.test_ratio = parse_double("train.test_ratio", v);
         }},

        {"register.pyramid_levels",
         [](const RunConfig& c) { return std::to_string(c.registration.pyramid_levels); },
         [](RunConfig& c, const std::string& v) {
             c.registration.pyramid_levels = parse_int("register.pyramid_levels", v);
         }},
        {"register.iterations_per_level",
         [](const RunConfig& c) {
             return std::to_string(c.registration.iterations_per_level);
         },
         [](RunConfig& c, const std::string& v) {
             c.registration.iterations_per_level =
                 parse_int("register.iterations_per_level", v);
         }},
        {"register.smoothing_sigma",
         [](const RunConfig& c) { return fmt_double(c.registration.smoothing_sigma); },
         [](RunConfig& c, const std::string& v) {
             c.registration.smoothing_sigma = parse_double("register.smoothing_sigma", v);
         }},
        {"register.force_normalization",
         [](const RunConfig& c) { return fmt_double(c.registration.force_normalization); },
         [](RunConfig& c, const std::string& v) {
             c.registration.force_normalization =
                 parse_double("register.force_normalization", v);
         }},
        {"register.exp_steps",
         [](const RunConfig& c) { return std::to_string(c.registration.exp_steps); },
         [](RunConfig& c, const std::string& v) {
             c.registration.exp_steps = parse_int("register.exp_steps", v);
         }},

        {"augment.partner_rule",
         [](const RunConfig& c) {
             return std::string(c.augment_partner_rule == PartnerRule::ExcludeSelf
                                    ? "exclude_self"
                                    : "exclude_templates");
         },
         [](RunConfig& c, const std::string& v) {
             const std::string t = trim(v);
             if (t == "exclude_self") {
                 c.augment_partner_rule = PartnerRule::ExcludeSelf;
             } else if (t == "exclude_templates") {
                 c.augment_partner_rule = PartnerRule::ExcludeTemplates;
             } else {
                 throw BadConfigValue(
                     "augment.partner_rule: expected exclude_self or exclude_templates: " + v);
             }
         }},

        {"phantom.dims", [](const RunConfig& c) { return fmt_dims(c.phantom.dims); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.dims = parse_dims("phantom.dims", v);
         }},
        {"phantom.spacing", [](const RunConfig& c) { return fmt_vec3(c.phantom.spacing); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.spacing = parse_vec3("phantom.spacing", v);
         }},
        {"phantom.semi_axes",
         [](const RunConfig& c) { return fmt_vec3(c.phantom.semi_axes); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.semi_axes = parse_vec3("phantom.semi_axes", v);
         }},
        {"phantom.plane1", [](const RunConfig& c) { return fmt_plane(c.phantom.plane1); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.plane1 = parse_plane("phantom.plane1", v);
         }},
        {"phantom.plane2", [](const RunConfig& c) { return fmt_plane(c.phantom.plane2); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.plane2 = parse_plane("phantom.plane2", v);
         }},
        {"phantom.plane3", [](const RunConfig& c) { return fmt_plane(c.phantom.plane3); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.plane3 = parse_plane("phantom.plane3", v);
         }},
        {"phantom.axial", [](const RunConfig& c) { return fmt_plane(c.phantom.axial); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.axial = parse_plane("phantom.axial", v);
         }},
        {"phantom.segment_intensity_mean",
         [](const RunConfig& c) { return fmt_double(c.phantom.segment_intensity_mean); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.segment_intensity_mean =
                 parse_double("phantom.segment_intensity_mean", v);
         }},
        {"phantom.segment_intensity_std",
         [](const RunConfig& c) { return fmt_double(c.phantom.segment_intensity_std); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.segment_intensity_std =
                 parse_double("phantom.segment_intensity_std", v);
         }},
        {"phantom.background_intensity",
         [](const RunConfig& c) { return fmt_double(c.phantom.background_intensity); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.background_intensity =
                 parse_double("phantom.background_intensity", v);
         }},
        {"phantom.vessel_intensity",
         [](const RunConfig& c) { return fmt_double(c.phantom.vessel_intensity); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.vessel_intensity = parse_double("phantom.vessel_intensity", v);
         }},
        {"phantom.vessel_radius",
         [](const RunConfig& c) { return fmt_double(c.phantom.vessel_radius); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.vessel_radius = parse_double("phantom.vessel_radius", v);
         }},
        {"phantom.noise_std",
         [](const RunConfig& c) { return fmt_double(c.phantom.noise_std); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.noise_std = parse_double("phantom.noise_std", v);
         }},
        {"phantom.warp_magnitude",
         [](const RunConfig& c) { return fmt_double(c.phantom.warp_magnitude); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.warp_magnitude = parse_double("phantom.warp_magnitude", v);
         }},
        {"phantom.warp_smoothing",
         [](const RunConfig& c) { return fmt_double(c.phantom.warp_smoothing); },
         [](RunConfig& c, const std::string& v) {
             c.phantom.warp_smoothing = parse_double("phantom.warp_smoothing", v);
         }},
    };
    return table;
}

const std::unordered_map<std::string, const Binding*>& binding_index() {
    static const std::unordered_map<std::string, const Binding*> index = [] {
        std::unordered_map<std::string, const Binding*> m;
        for (const Binding& b : bindings()) m[b.key] = &b;
        return m;
    }();
    return index;
}

}  // namespace

std::string serialize_run_config(const RunConfig& cfg) {
    std::string out;
    for (const Binding& b : bindings()) {
        out += b.key;
        out += " = ";
        out += b.get(cfg);
        out += "\n";
    }
    return out;
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::unordered_set<std::string> seen;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw BadConfigValue("line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = line.substr(eq + 1);
        auto it = binding_index().find(key);
        if (it == binding_index().end()) {
            throw UnknownKey("line " + std::to_string(line_no) + ": unknown key " + key);
        }
        if (!seen.insert(key).second) {
            throw BadConfigValue("line " + std::to_string(line_no) + ": duplicate key " + key);
        }
        it->second->set(cfg, value);
    }
    return cfg;
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
    const std::string text = serialize_run_config(cfg);
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

RunConfig load_run_config(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    return parse_run_config(std::string(bytes.begin(), bytes.end()));
}

}  // namespace liverformer
