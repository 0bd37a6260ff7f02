#pragma once

#include "boxseg/dataset.hpp"
#include "boxseg/proposals.hpp"
#include "boxseg/train.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace boxseg {

using Json = nlohmann::ordered_json;

/// Malformed config: unknown key, wrong type, or invalid value. The message names the key.
class ConfigError : public Error {
public:
    using Error::Error;
};

Json load_json_file(const std::filesystem::path& path);

// Readers start from the defaults, overwrite the keys present, and reject unknown keys.
Json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const Json& j);

Json to_json(const CrfParams& params);
CrfParams crf_params_from_json(const Json& j);

Json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& j);
/// Applies the keys of `j` on top of `cfg`.
void apply_train_config(const Json& j, TrainConfig& cfg);

struct AblationSpec {
    TrainConfig base;
    /// Each entry is either a row name or an object {"row": name, ...TrainConfig overrides}.
    Json rows = Json::array();
    std::vector<std::uint64_t> seeds{1, 2, 3};
    CrfParams crf;
    int k = 3;
    std::uint64_t cluster_seed = 7;
    int train_count = 500;

    std::vector<TrainConfig> grid() const;
};

Json to_json(const AblationSpec& spec);
AblationSpec ablation_spec_from_json(const Json& j);

/// Fingerprint of a canonical JSON dump.
std::uint64_t fingerprint(const Json& j);

}  // namespace boxseg
