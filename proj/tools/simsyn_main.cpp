#include <CLI11.hpp>

#include <iostream>

#include "simsyn/cli/commands.hpp"

using namespace simsyn;

namespace {

ExperimentConfig config_from(const std::string& path, const std::vector<std::string>& overrides) {
    json j;
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config file '" + path + "'");
        j = json::parse(is, nullptr, false);
        if (j.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
    } else {
        j = default_config_json();
    }
    for (const auto& o : overrides) apply_override(j, o);
    return parse_config(j);
}

int run(int argc, char** argv) {
    CLI::App app{"semantic image synthesis: training, generation and evaluation"};
    app.require_subcommand(1);
    app.fallthrough();  // global -c/--set may follow the subcommand

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("-c,--config", config_path, "experiment config (JSON)");
    app.add_option("--set", overrides, "override config keys, e.g. --set trainer.steps=10");

    auto* prepare = app.add_subcommand("prepare", "build dataset manifest and offset maps");

    auto* train = app.add_subcommand("train", "run adversarial training");
    TrainOptions topt;
    train->add_option("--resume", topt.resume, "checkpoint to continue from");
    train->add_option("--steps", topt.steps_override, "override total steps");
    train->add_flag("--quiet", topt.quiet, "suppress console progress");

    auto* generate = app.add_subcommand("generate", "synthesize images for dataset label maps");
    GenerateOptions gopt;
    generate->add_option("--checkpoint", gopt.checkpoint, "trained checkpoint")->required();
    generate->add_option("--out", gopt.out_dir, "output directory")->required();
    generate->add_option("--num-z", gopt.num_z, "samples per label map");
    generate->add_option("--seed", gopt.seed, "latent seed");
    generate->add_option("--max-maps", gopt.max_maps, "number of label maps");
    generate->add_flag("--raw-weights", gopt.raw_weights, "use live weights instead of EMA");
    generate->add_flag("--force", gopt.force, "ignore config-hash mismatch");

    auto* evaluate = app.add_subcommand("evaluate", "compute FID, mIoU, diversity and latency");
    EvaluateOptions eopt;
    evaluate->add_option("--checkpoint", eopt.checkpoint, "trained checkpoint")->required();
    evaluate->add_option("--report", eopt.report_path, "write the JSON report here");
    evaluate->add_option("--compare", eopt.compare_with, "existing report; config hashes must match");
    evaluate->add_option("--contact-sheet", eopt.contact_sheet, "write a qualitative grid PNG");
    evaluate->add_option("--seed", eopt.seed, "latent seed");
    evaluate->add_flag("--raw-weights", eopt.raw_weights, "use live weights instead of EMA");
    evaluate->add_flag("--force", eopt.force, "ignore config-hash mismatch");

    auto* esttau = app.add_subcommand("estimate-tau", "estimate the diversity cutoff");
    std::string tau_out;
    esttau->add_option("--out", tau_out, "write {\"tau_div\": value} here");

    CLI11_PARSE(app, argc, argv);

    ExperimentConfig cfg = config_from(config_path, overrides);

    if (prepare->parsed()) {
        PrepareResult r = cmd_prepare(cfg);
        std::cout << "prepared " << r.records << " records"
                  << (r.dataset_generated ? " (dataset generated)" : "") << ", "
                  << r.offsets_written << " offset maps written\n";
    } else if (train->parsed()) {
        cmd_train(cfg, topt);
        std::cout << "training finished; final checkpoint in " << cfg.out_dir << "\n";
    } else if (generate->parsed()) {
        cmd_generate(cfg, gopt);
        std::cout << "images written to " << gopt.out_dir << "\n";
    } else if (evaluate->parsed()) {
        json rep = cmd_evaluate(cfg, eopt);
        std::cout << rep.dump(2) << "\n";
    } else if (esttau->parsed()) {
        double tau = cmd_estimate_tau(cfg);
        json out = {{"tau_div", tau}};
        if (!tau_out.empty()) {
            std::ofstream os(tau_out, std::ios::trunc);
            os << out.dump() << "\n";
        }
        std::cout << out.dump() << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
