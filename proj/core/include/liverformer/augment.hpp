// augment.hpp — registration-based dataset expansion.
//
// One template/partner registration yields two synthesized cases: the
// template pushed through phi = exp(v) toward the partner, and the partner
// pulled back through phi^-1 = exp(-v). Images warp trilinearly, labels by
// nearest neighbour, so every synthesized case keeps voxel-aligned labels
// with no interpolation bleed between classes.
//
// Counting, with n the pool size and t the template count:
//   exclude-self       2 * t * (n - 1)
//   exclude-templates  2 * t * (n - t)
// The default is exclude-self: a template may partner with other templates,
// it just never registers to itself.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "liverformer/field.hpp"
#include "liverformer/registration.hpp"
#include "liverformer/volume.hpp"

namespace liverformer {

struct AugmentError : VolumeError {
    using VolumeError::VolumeError;
};
struct UnknownTemplate : AugmentError {
    using AugmentError::AugmentError;
};
struct PoolTooSmall : AugmentError {
    using AugmentError::AugmentError;
};
struct DuplicateCaseId : AugmentError {
    using AugmentError::AugmentError;
};

struct Provenance {
    enum class Kind { Original, Synthesized };
    enum class Direction { Forward, Backward };  // Forward: template warped toward partner

    Kind kind = Kind::Original;
    std::string template_id;
    std::string partner_id;
    Direction direction = Direction::Forward;
    // False when the warp erased a class the source labels had. A data hygiene
    // warning, not an error: downstream consumers decide whether to drop the case.
    bool classes_preserved = true;
};

struct LabeledCase {
    std::string id;
    ImageVolume image;
    LabelVolume labels;
    Provenance provenance;
};

enum class PartnerRule { ExcludeSelf, ExcludeTemplates };

std::size_t expected_synthesized_count(std::size_t n_templates, std::size_t pool_size,
                                       PartnerRule rule);

/// Both synthesized cases for one (template, partner, velocity) triple:
/// first = forward (template through exp(v)), second = backward (partner
/// through exp(-v)). The velocity must register the template toward the
/// partner, i.e. warp(template, exp(v)) ~ partner.
std::pair<LabeledCase, LabeledCase> synthesize_pair(const LabeledCase& tmpl,
                                                    const LabeledCase& partner,
                                                    const VelocityField& v,
                                                    int exp_steps = 6);

/// Register every template against every admissible partner and synthesize
/// both directions per pair. Output order is deterministic: templates by id,
/// partners by id within each template. Throws UnknownTemplate when a
/// template id is not in the pool and PoolTooSmall when no pair exists.
std::vector<LabeledCase> expand_dataset(const std::vector<std::string>& template_ids,
                                        const std::vector<LabeledCase>& pool,
                                        const RegistrationConfig& cfg = {},
                                        PartnerRule rule = PartnerRule::ExcludeSelf);

// Manifest: the JSON list of cases a training run consumes. Image and label
// paths are kept as written (typically relative to the manifest's directory).
struct ManifestEntry {
    std::string id;
    std::string image_path;
    std::string labels_path;
    Provenance provenance;
};

struct BadManifest : AugmentError {
    using AugmentError::AugmentError;
};

std::string manifest_to_json(const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> manifest_from_json(const std::string& text);

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

}  // namespace liverformer
