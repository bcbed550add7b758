// run_config.hpp — the plain-text key=value configuration covering every
// stage of a run: preprocessing, model, training, registration,
// augmentation, and phantom generation.
//
// Format: one "section.key = value" per line; '#' starts a comment; blank
// lines are skipped. Unknown keys are errors, not warnings, so a typo never
// silently falls back to a default. Every key serializes back out, and
// doubles are printed with enough digits to reparse to the identical bits,
// so serialize -> parse -> serialize is a fixed point.

#pragma once

#include <string>

#include "liverformer/augment.hpp"
#include "liverformer/model.hpp"
#include "liverformer/phantom.hpp"
#include "liverformer/preprocess.hpp"
#include "liverformer/registration.hpp"
#include "liverformer/train.hpp"

namespace liverformer {

struct ConfigError : VolumeError {
    using VolumeError::VolumeError;
};
struct UnknownKey : ConfigError {
    using ConfigError::ConfigError;
};
struct BadConfigValue : ConfigError {
    using ConfigError::ConfigError;
};

struct RunConfig {
    PreprocessConfig preprocess;
    std::string model_arch = "liverformer";  // "liverformer" or "unet3d"
    LiverFormerConfig model;
    TrainConfig train;
    RegistrationConfig registration;
    PartnerRule augment_partner_rule = PartnerRule::ExcludeSelf;
    PhantomConfig phantom;
};

std::string serialize_run_config(const RunConfig& cfg);
RunConfig parse_run_config(const std::string& text);

void save_run_config(const std::string& path, const RunConfig& cfg);
RunConfig load_run_config(const std::string& path);

}  // namespace liverformer
