#include "liverformer/augment.hpp"

#include <algorithm>
#include <array>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "liverformer/nifti.hpp"

namespace liverformer {

std::size_t expected_synthesized_count(std::size_t n_templates, std::size_t pool_size,
                                       PartnerRule rule) {
    if (rule == PartnerRule::ExcludeSelf) {
        if (pool_size == 0) return 0;
        return 2 * n_templates * (pool_size - 1);
    }
    if (pool_size < n_templates) return 0;
    return 2 * n_templates * (pool_size - n_templates);
}

namespace {

std::array<bool, kNumClasses> classes_present(const LabelVolume& labels) {
    std::array<bool, kNumClasses> present{};
    for (std::uint8_t v : labels.data) present[v] = true;
    return present;
}

bool preserves_classes(const LabelVolume& source, const LabelVolume& warped) {
    const auto a = classes_present(source);
    const auto b = classes_present(warped);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        if (a[c] && !b[c]) return false;
    }
    return true;
}

}  // namespace

std::pair<LabeledCase, LabeledCase> synthesize_pair(const LabeledCase& tmpl,
                                                    const LabeledCase& partner,
                                                    const VelocityField& v,
                                                    int exp_steps) {
    require_same_dims(tmpl.image.dims, partner.image.dims, "synthesize_pair");
    require_same_dims(tmpl.image.dims, v.dims, "synthesize_pair velocity");

    const DisplacementField fwd = exp_velocity(v, exp_steps);
    const DisplacementField bwd = exp_velocity(negate(v), exp_steps);

    LabeledCase f;
    f.id = "syn_" + tmpl.id + "_" + partner.id + "_f";
    f.image = warp_image(tmpl.image, fwd);
    f.labels = warp_labels(tmpl.labels, fwd);
    f.provenance.kind = Provenance::Kind::Synthesized;
    f.provenance.template_id = tmpl.id;
    f.provenance.partner_id = partner.id;
    f.provenance.direction = Provenance::Direction::Forward;
    f.provenance.classes_preserved = preserves_classes(tmpl.labels, f.labels);

    LabeledCase b;
    b.id = "syn_" + tmpl.id + "_" + partner.id + "_b";
    b.image = warp_image(partner.image, bwd);
    b.labels = warp_labels(partner.labels, bwd);
    b.provenance.kind = Provenance::Kind::Synthesized;
    b.provenance.template_id = tmpl.id;
    b.provenance.partner_id = partner.id;
    b.provenance.direction = Provenance::Direction::Backward;
    b.provenance.classes_preserved = preserves_classes(partner.labels, b.labels);

    return {std::move(f), std::move(b)};
}

std::vector<LabeledCase> expand_dataset(const std::vector<std::string>& template_ids,
                                        const std::vector<LabeledCase>& pool,
                                        const RegistrationConfig& cfg, PartnerRule rule) {
    std::unordered_map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (!by_id.emplace(pool[i].id, i).second) {
            throw DuplicateCaseId("expand_dataset: duplicate pool id " + pool[i].id);
        }
    }
    std::set<std::string> templates;  // ordered: drives output determinism
    for (const std::string& id : template_ids) {
        if (!by_id.count(id)) {
            throw UnknownTemplate("expand_dataset: template " + id + " not in pool");
        }
        templates.insert(id);
    }

    std::vector<std::string> partner_order;
    for (const LabeledCase& c : pool) partner_order.push_back(c.id);
    std::sort(partner_order.begin(), partner_order.end());

    std::vector<LabeledCase> out;
    std::size_t pairs = 0;
    for (const std::string& tid : templates) {
        const LabeledCase& tmpl = pool[by_id.at(tid)];
        for (const std::string& pid : partner_order) {
            if (pid == tid) continue;
            if (rule == PartnerRule::ExcludeTemplates && templates.count(pid)) continue;
            const LabeledCase& partner = pool[by_id.at(pid)];
            const VelocityField v = register_images(partner.image, tmpl.image, cfg);
            auto [f, b] = synthesize_pair(tmpl, partner, v, cfg.exp_steps);
            out.push_back(std::move(f));
            out.push_back(std::move(b));
            ++pairs;
        }
    }
    if (pairs == 0) {
        throw PoolTooSmall("expand_dataset: no admissible template/partner pair");
    }
    return out;
}

namespace {

const char* kind_str(Provenance::Kind k) {
    return k == Provenance::Kind::Original ? "original" : "synthesized";
}
const char* dir_str(Provenance::Direction d) {
    return d == Provenance::Direction::Forward ? "forward" : "backward";
}

nlohmann::json provenance_to_json(const Provenance& p) {
    nlohmann::json j;
    j["kind"] = kind_str(p.kind);
    if (p.kind == Provenance::Kind::Synthesized) {
        j["template"] = p.template_id;
        j["partner"] = p.partner_id;
        j["direction"] = dir_str(p.direction);
        j["classes_preserved"] = p.classes_preserved;
    }
    return j;
}

Provenance provenance_from_json(const nlohmann::json& j) {
    Provenance p;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "original") {
        p.kind = Provenance::Kind::Original;
        return p;
    }
    if (kind != "synthesized") throw BadManifest("unknown provenance kind: " + kind);
    p.kind = Provenance::Kind::Synthesized;
    p.template_id = j.at("template").get<std::string>();
    p.partner_id = j.at("partner").get<std::string>();
    const std::string dir = j.at("direction").get<std::string>();
    if (dir == "forward") {
        p.direction = Provenance::Direction::Forward;
    } else if (dir == "backward") {
        p.direction = Provenance::Direction::Backward;
    } else {
        throw BadManifest("unknown provenance direction: " + dir);
    }
    p.classes_preserved = j.at("classes_preserved").get<bool>();
    return p;
}

}  // namespace

std::string manifest_to_json(const std::vector<ManifestEntry>& entries) {
    std::unordered_set<std::string> ids;
    nlohmann::json cases = nlohmann::json::array();
    for (const ManifestEntry& e : entries) {
        if (!ids.insert(e.id).second) {
            throw DuplicateCaseId("manifest: duplicate id " + e.id);
        }
        nlohmann::json j;
        j["id"] = e.id;
        j["image"] = e.image_path;
        j["labels"] = e.labels_path;
        j["provenance"] = provenance_to_json(e.provenance);
        cases.push_back(std::move(j));
    }
    nlohmann::json root;
    root["cases"] = std::move(cases);
    return root.dump(2) + "\n";
}

std::vector<ManifestEntry> manifest_from_json(const std::string& text) {
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw BadManifest(std::string("manifest parse: ") + e.what());
    }
    std::vector<ManifestEntry> out;
    std::unordered_set<std::string> ids;
    try {
        for (const nlohmann::json& j : root.at("cases")) {
            ManifestEntry e;
            e.id = j.at("id").get<std::string>();
            e.image_path = j.at("image").get<std::string>();
            e.labels_path = j.at("labels").get<std::string>();
            e.provenance = provenance_from_json(j.at("provenance"));
            if (!ids.insert(e.id).second) {
                throw DuplicateCaseId("manifest: duplicate id " + e.id);
            }
            out.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw BadManifest(std::string("manifest structure: ") + e.what());
    }
    return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    const std::string text = manifest_to_json(entries);
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    return manifest_from_json(std::string(bytes.begin(), bytes.end()));
}

}  // namespace liverformer
