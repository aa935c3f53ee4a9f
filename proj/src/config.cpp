#include "simsyn/cli/config.hpp"

#include <cstdlib>
#include <fstream>

namespace simsyn {

json default_config_json() {
    return json{
        {"seed", 7},
        {"deterministic", true},
        {"out_dir", "runs/default"},
        {"dataset",
         {{"root", "data/synth4"},
          {"use_instances", true},
          {"synthetic",
           {{"enabled", true},
            {"num_classes", 4},
            {"height", 64},
            {"width", 64},
            {"num_images", 512},
            {"rarity", json::array({1.0, 0.9, 0.6, 0.3})},
            {"size_scale", json::array()},
            {"texture_amplitude", 0.05},
            {"instance_jitter", 0.02},
            {"min_shape_frac", 0.14},
            {"max_shape_frac", 0.34},
            {"seed", 7}}}}},
        {"generator",
         {{"z_dim", 64},
          {"w_tokens", 4},
          {"w_dim", 64},
          {"mlp_hidden", 128},
          {"pyramid_channels", json::array({16, 24, 32, 40, 24})},
          {"attention_levels", 2},
          {"synth_channels", json::array({56, 56, 48, 36, 24, 16, 12})},
          {"spade_hidden", 12},
          {"leaky_slope", 0.2},
          {"spectral_norm", true}}},
        {"discriminator",
         {{"backbone", "tiny4"},
          {"backbone_weights", ""},
          {"fullres_channels", 128},
          {"fullres_hidden", 16},
          {"decoder_channels", json::array({64, 48, 40, 32})},
          {"transition_channels", 28},
          {"penultimate_channels", 20},
          {"leaky_slope", 0.2},
          {"bn_momentum", 0.1},
          {"spectral_norm", true}}},
        {"losses",
         {{"gamma", 2.0},
          {"epsilon", 0.1},
          {"tau", 0.3},
          {"negatives", 64},
          {"anchors_per_image", 8},
          {"lambda_gan", 1.0},
          {"lambda_c", 10.0},
          {"lambda_d", 10.0},
          {"embed_dim", 64},
          {"tau_div", 4.0},
          {"tau_div_batches", 200},
          {"class_weighting", true}}},
        {"trainer",
         {{"batch_size", 16},
          {"lr", 1e-3},
          {"beta1", 0.0},
          {"beta2", 0.99},
          {"ema_decay", 0.999},
          {"grad_clip", 0.0},
          {"steps", 3000},
          {"grad_accum", 1},
          {"checkpoint_every", 500},
          {"balanced_sampling", true}}},
        {"metrics",
         {{"fid_extractor_seed", 727},
          {"fid_samples", 128},
          {"diversity_maps", 8},
          {"diversity_samples", 20},
          {"timing_runs", 50},
          {"oracle", "synthetic"}}}};
}

std::uint64_t config_hash(const json& j) {
    const std::string s = j.dump();  // nlohmann orders object keys; canonical
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {

bool same_kind(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return true;
    if (a.is_array() && b.is_array()) return true;
    return a.type() == b.type();
}

void check_keys(const json& user, const json& schema, const std::string& prefix,
                std::vector<std::string>& problems) {
    for (auto it = user.begin(); it != user.end(); ++it) {
        std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!schema.contains(it.key())) {
            problems.push_back("unknown key '" + path + "'");
            continue;
        }
        const json& ref = schema.at(it.key());
        if (!same_kind(*it, ref)) {
            problems.push_back("key '" + path + "' has wrong type (expected " +
                               std::string(ref.type_name()) + ")");
            continue;
        }
        if (it->is_object()) check_keys(*it, ref, path, problems);
    }
}

json merged_with_defaults(const json& user) {
    json out = default_config_json();
    out.merge_patch(user);
    return out;
}

template <typename T>
std::vector<T> to_vector(const json& a) {
    std::vector<T> out;
    for (const auto& v : a) out.push_back(v.get<T>());
    return out;
}

}  // namespace

ExperimentConfig parse_config(const json& user) {
    std::vector<std::string> problems;
    check_keys(user, default_config_json(), "", problems);
    if (!problems.empty()) {
        std::string msg = "config validation failed:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw ConfigError(msg);
    }
    json j = merged_with_defaults(user);

    ExperimentConfig c;
    c.raw = j;
    c.hash = config_hash(j);
    c.seed = j["seed"];
    c.deterministic = j["deterministic"];
    c.out_dir = j["out_dir"];

    const json& ds = j["dataset"];
    c.dataset_root = ds["root"];
    c.use_instances = ds["use_instances"];
    const json& sy = ds["synthetic"];
    c.synthetic_enabled = sy["enabled"];
    c.synthetic.num_classes = sy["num_classes"];
    c.synthetic.height = sy["height"];
    c.synthetic.width = sy["width"];
    c.synthetic.num_images = sy["num_images"];
    c.synthetic.rarity = to_vector<double>(sy["rarity"]);
    c.synthetic.size_scale = to_vector<double>(sy["size_scale"]);
    c.synthetic.texture_amplitude = sy["texture_amplitude"];
    c.synthetic.instance_jitter = sy["instance_jitter"];
    c.synthetic.min_shape_frac = sy["min_shape_frac"];
    c.synthetic.max_shape_frac = sy["max_shape_frac"];
    c.synthetic.seed = sy["seed"];

    const json& g = j["generator"];
    c.generator.z_dim = g["z_dim"];
    c.generator.w_tokens = g["w_tokens"];
    c.generator.w_dim = g["w_dim"];
    c.generator.mlp_hidden = g["mlp_hidden"];
    c.generator.pyramid_channels = to_vector<Index>(g["pyramid_channels"]);
    c.generator.attention_levels = g["attention_levels"];
    c.generator.synth_channels = to_vector<Index>(g["synth_channels"]);
    c.generator.spade_hidden = g["spade_hidden"];
    c.generator.leaky_slope = g["leaky_slope"];
    c.generator.spectral = g["spectral_norm"];
    c.generator.use_offsets = c.use_instances;
    if (c.synthetic_enabled) {
        if (c.synthetic.height != c.synthetic.width)
            throw ConfigError("config: synthetic desk datasets are square");
        c.generator.image_size = c.synthetic.height;
        c.generator.label_channels = c.synthetic.num_classes;
    }

    const json& d = j["discriminator"];
    c.discriminator.backbone = d["backbone"];
    c.discriminator.backbone_weights = d["backbone_weights"];
    c.discriminator.fullres_channels = d["fullres_channels"];
    c.discriminator.fullres_hidden = d["fullres_hidden"];
    c.discriminator.decoder_channels = to_vector<Index>(d["decoder_channels"]);
    c.discriminator.transition_channels = d["transition_channels"];
    c.discriminator.penultimate_channels = d["penultimate_channels"];
    c.discriminator.leaky_slope = d["leaky_slope"];
    c.discriminator.bn_momentum = d["bn_momentum"];
    c.discriminator.spectral = d["spectral_norm"];
    c.discriminator.num_classes = c.generator.label_channels;

    const json& l = j["losses"];
    c.losses.gamma = l["gamma"];
    c.losses.epsilon = l["epsilon"];
    c.losses.tau = l["tau"];
    c.losses.negatives = l["negatives"];
    c.losses.anchors_per_image = l["anchors_per_image"];
    c.losses.lambda_gan = l["lambda_gan"];
    c.losses.lambda_c = l["lambda_c"];
    c.losses.lambda_d = l["lambda_d"];
    c.losses.embed_dim = l["embed_dim"];
    c.losses.tau_div = l["tau_div"];
    c.losses.tau_div_batches = l["tau_div_batches"];
    c.losses.class_weighting = l["class_weighting"];
    c.losses.validate();

    const json& t = j["trainer"];
    c.trainer.batch_size = t["batch_size"];
    c.trainer.lr = t["lr"];
    c.trainer.beta1 = t["beta1"];
    c.trainer.beta2 = t["beta2"];
    c.trainer.ema_decay = t["ema_decay"];
    c.trainer.grad_clip = t["grad_clip"];
    c.trainer.steps = t["steps"];
    c.trainer.grad_accum = t["grad_accum"];
    c.trainer.checkpoint_every = t["checkpoint_every"];
    c.trainer.balanced_sampling = t["balanced_sampling"];
    c.trainer.seed = c.seed;
    c.trainer.validate();

    const json& m = j["metrics"];
    c.fid_extractor_seed = m["fid_extractor_seed"];
    c.fid_samples = m["fid_samples"];
    c.diversity_maps = m["diversity_maps"];
    c.diversity_samples = m["diversity_samples"];
    c.timing_runs = m["timing_runs"];
    c.oracle = m["oracle"];
    return c;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    json j = json::parse(is, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
    return parse_config(j);
}

void apply_override(json& config, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + assignment + "' must look like key.path=value");
    std::string keypath = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);

    std::vector<std::string> keys;
    std::stringstream ss(keypath);
    std::string tok;
    while (std::getline(ss, tok, '.')) keys.push_back(tok);
    if (keys.empty()) throw ConfigError("override '" + assignment + "' has an empty key path");

    // ensure the key exists in the schema
    json schema = default_config_json();
    json* s = &schema;
    for (const auto& k : keys) {
        if (!s->is_object() || !s->contains(k))
            throw ConfigError("override targets unknown key '" + keypath + "'");
        s = &(*s)[k];
    }

    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;  // plain string
    json* node = &config;
    for (size_t i = 0; i + 1 < keys.size(); ++i) {
        if (!node->contains(keys[i])) (*node)[keys[i]] = json::object();
        node = &(*node)[keys[i]];
    }
    (*node)[keys.back()] = parsed;
}

bool deterministic_mode() {
    const char* v = std::getenv("SIMSYN_DETERMINISTIC");
    return v == nullptr || std::string(v) != "0";
}

}  // namespace simsyn
