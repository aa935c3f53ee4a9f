#pragma once

#include <json.hpp>

#include <string>

#include "simsyn/data/synthetic.hpp"
#include "simsyn/disc/discriminator.hpp"
#include "simsyn/gen/generator.hpp"
#include "simsyn/loss/losses.hpp"
#include "simsyn/train/trainer.hpp"

namespace simsyn {

using json = nlohmann::json;

// One hierarchical config file drives every module. Unknown keys are
// rejected; the FNV-1a hash of the canonical dump identifies the experiment
// and is embedded in checkpoints, reports and generated image sets.
struct ExperimentConfig {
    json raw;
    std::uint64_t hash = 0;

    std::uint64_t seed = 7;
    bool deterministic = true;

    std::string dataset_root;
    bool use_instances = true;
    bool synthetic_enabled = true;
    SyntheticSceneSpec synthetic;

    GeneratorConfig generator;
    DiscriminatorConfig discriminator;
    LossConfig losses;
    TrainerConfig trainer;

    // metrics section
    std::uint64_t fid_extractor_seed = 727;
    Index fid_samples = 128;
    Index diversity_maps = 8;
    Index diversity_samples = 20;
    Index timing_runs = 50;
    std::string oracle = "synthetic";
    std::string out_dir = "runs/default";
};

json default_config_json();
std::uint64_t config_hash(const json& j);

// Parses and validates; throws ConfigError listing every problem at once.
ExperimentConfig parse_config(const json& user);
ExperimentConfig load_config_file(const std::string& path);

// Dotted-path override "a.b.c=value"; the key must already exist.
void apply_override(json& config, const std::string& assignment);

// True when SIMSYN_DETERMINISTIC is unset or not "0".
bool deterministic_mode();

}  // namespace simsyn
