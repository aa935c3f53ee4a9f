#pragma once

#include "simsyn/cli/config.hpp"

namespace simsyn {

struct PrepareResult {
    Index records = 0;
    Index offsets_written = 0;
    bool dataset_generated = false;
};

PrepareResult cmd_prepare(const ExperimentConfig& cfg);

struct TrainOptions {
    std::string resume;        // checkpoint to continue from
    Index steps_override = -1; // -1 = config value
    bool quiet = false;
};

void cmd_train(const ExperimentConfig& cfg, const TrainOptions& opt);

struct GenerateOptions {
    std::string checkpoint;
    std::string out_dir;
    Index num_z = 1;
    std::uint64_t seed = 1;
    Index max_maps = 8;
    bool raw_weights = false;  // default: EMA weights
    bool force = false;
};

void cmd_generate(const ExperimentConfig& cfg, const GenerateOptions& opt);

struct EvaluateOptions {
    std::string checkpoint;
    std::string report_path;
    std::string compare_with;  // existing report; hashes must match
    std::string contact_sheet; // optional PNG path
    bool raw_weights = false;
    bool force = false;
    std::uint64_t seed = 1;
};

json cmd_evaluate(const ExperimentConfig& cfg, const EvaluateOptions& opt);

double cmd_estimate_tau(const ExperimentConfig& cfg);

// Generator restored from a checkpoint (EMA weights unless raw), eval mode.
std::unique_ptr<Generator<float>> load_generator_from_checkpoint(const ExperimentConfig& cfg,
                                                                 const std::string& path,
                                                                 bool use_ema, bool force);

ImageU8 contact_sheet(const std::vector<std::vector<ImageU8>>& rows, Index pad = 2);

}  // namespace simsyn
