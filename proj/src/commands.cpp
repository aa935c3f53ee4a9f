#include "simsyn/cli/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include "simsyn/data/label_map.hpp"
#include "simsyn/io/array_container.hpp"
#include "simsyn/metrics/metrics.hpp"

namespace fs = std::filesystem;

namespace simsyn {

namespace {

std::string hash_hex(std::uint64_t h) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

bool dataset_complete(const ExperimentConfig& cfg) {
    fs::path root = cfg.dataset_root;
    if (!fs::exists(root / "manifest.txt")) return false;
    for (Index i = 0; i < cfg.synthetic.num_images; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%05lld.png", static_cast<long long>(i));
        if (!fs::exists(root / "images" / name) || !fs::exists(root / "labels" / name) ||
            !fs::exists(root / "instances" / name))
            return false;
    }
    return true;
}

Tensor<float> build_t_in(const ExperimentConfig& cfg, const Sample& s) {
    Index C = cfg.generator.label_channels, H = cfg.generator.image_size,
          W = cfg.generator.image_size;
    Index Cin = cfg.generator.in_channels();
    Tensor<float> t({1, Cin, H, W});
    std::copy(s.one_hot.data(), s.one_hot.data() + C * H * W, t.data());
    if (cfg.generator.use_offsets)
        std::copy(s.offsets.data(), s.offsets.data() + 2 * H * W, t.data() + C * H * W);
    return t;
}

Tensor<float> latent_for(const ExperimentConfig& cfg, std::uint64_t seed, std::uint64_t map_idx,
                         Index k) {
    Rng rng(seed, 0x9000 + map_idx * 1024 + static_cast<std::uint64_t>(k));
    Tensor<float> z({1, cfg.generator.z_dim});
    for (Index i = 0; i < z.numel(); ++i) z[i] = static_cast<float>(rng.normal());
    return z;
}

}  // namespace

PrepareResult cmd_prepare(const ExperimentConfig& cfg) {
    PrepareResult res;
    if (cfg.synthetic_enabled && !dataset_complete(cfg)) {
        generate_synthetic_dataset(cfg.synthetic, cfg.dataset_root);
        res.dataset_generated = true;
    }
    DatasetIndex idx = load_dataset(cfg.dataset_root, cfg.use_instances);
    res.records = static_cast<Index>(idx.size());

    if (!fs::exists(fs::path(cfg.dataset_root) / "manifest.txt"))
        write_manifest((fs::path(cfg.dataset_root) / "manifest.txt").string(), idx.records);

    if (cfg.use_instances) {
        fs::create_directories(fs::path(cfg.dataset_root) / "offsets");
        for (const auto& r : idx.records) {
            fs::path out = fs::path(cfg.dataset_root) / "offsets" / (r.id + ".arr");
            if (fs::exists(out)) continue;  // idempotent
            Tensor<float> off = compute_instance_offsets<float>(read_gray16_png(r.instance_path), 0);
            ArrayContainer c;
            c.meta["id"] = r.id;
            c.put_f32("offsets", off);
            c.save(out.string());
            ++res.offsets_written;
        }
    }
    return res;
}

void cmd_train(const ExperimentConfig& cfg, const TrainOptions& opt) {
    cmd_prepare(cfg);
    DatasetIndex idx = load_dataset(cfg.dataset_root, cfg.use_instances);
    fs::create_directories(cfg.out_dir);

    Trainer<float> trainer(cfg.generator, cfg.discriminator, cfg.losses, cfg.trainer, idx, cfg.hash);
    if (!opt.resume.empty()) trainer.load_checkpoint(opt.resume);
    double tau = trainer.ensure_tau_div();

    const Index total = opt.steps_override >= 0 ? opt.steps_override : cfg.trainer.steps;
    std::ofstream log((fs::path(cfg.out_dir) / "train.jsonl").string(),
                      opt.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw DataError("cannot open training log in '" + cfg.out_dir + "'");
    if (opt.resume.empty()) {
        json head = {{"event", "start"},
                     {"config_hash", hash_hex(cfg.hash)},
                     {"tau_div", tau},
                     {"deterministic", deterministic_mode()},
                     {"steps", total}};
        log << head.dump() << "\n";
    }

    while (trainer.current_step() < total) {
        StepReport r = trainer.step();
        json line = {{"step", r.step},
                     {"loss_d", r.loss_d},
                     {"loss_g_adv", r.loss_g_adv},
                     {"loss_nce", r.loss_nce},
                     {"loss_div", r.loss_div},
                     {"loss_g_total", r.loss_g_total},
                     {"grad_norm_d", r.grad_norm_d},
                     {"grad_norm_g", r.grad_norm_g},
                     {"sec", r.seconds}};
        if (r.rolled_back) {
            line["rolled_back"] = true;
            line["diagnostic"] = r.diagnostic;
        }
        log << line.dump() << "\n";
        log.flush();
        if (!opt.quiet && (r.step % 50 == 0 || r.step == 1))
            std::cout << "step " << r.step << "/" << total << " loss_d=" << r.loss_d
                      << " loss_g=" << r.loss_g_total << " (" << r.seconds << "s)\n";
        if (r.rolled_back) {
            std::cerr << "step " << r.step << " rolled back: " << r.diagnostic << "\n";
            break;  // a poisoned state would repeat forever; surface it
        }
        if (cfg.trainer.checkpoint_every > 0 && r.step % cfg.trainer.checkpoint_every == 0)
            trainer.save_checkpoint(
                (fs::path(cfg.out_dir) / ("ckpt_" + std::to_string(r.step) + ".ckpt")).string());
    }
    trainer.save_checkpoint((fs::path(cfg.out_dir) / "final.ckpt").string(), /*final_mark=*/true);
}

std::unique_ptr<Generator<float>> load_generator_from_checkpoint(const ExperimentConfig& cfg,
                                                                 const std::string& path,
                                                                 bool use_ema, bool force) {
    ArrayContainer c = ArrayContainer::load(path);
    if (!c.meta.contains("format") || c.meta["format"] != "simsyn-checkpoint")
        throw DataError("'" + path + "' is not a checkpoint");
    std::uint64_t h = c.meta["config_hash"];
    if (h != cfg.hash && !force)
        throw ConfigError("checkpoint was produced under a different config (hash " + hash_hex(h) +
                          " vs " + hash_hex(cfg.hash) + "); pass --force to override");
    Rng tmp(1);
    auto gen = std::make_unique<Generator<float>>(cfg.generator, tmp);
    gen->visit_params([&](const std::string& n, Var<float>& v) {
        std::string key = "gen/" + n;
        if (use_ema && v.node()->requires_grad && c.has("ema/gen/" + n)) key = "ema/gen/" + n;
        v.val_mut() = c.get_f32(key);
    });
    gen->visit_buffers([&](const std::string& n, Tensor<double>& b) {
        b = c.get_f64("buf/gen/" + n);
    });
    gen->set_training(false);
    return gen;
}

void cmd_generate(const ExperimentConfig& cfg, const GenerateOptions& opt) {
    DatasetIndex idx = load_dataset(cfg.dataset_root, cfg.use_instances);
    if (idx.num_classes != cfg.generator.label_channels)
        throw DataError("label maps carry " + std::to_string(idx.num_classes) +
                        " classes but the checkpointed model expects " +
                        std::to_string(cfg.generator.label_channels) +
                        "; class-dependent layers are not portable");
    auto gen = load_generator_from_checkpoint(cfg, opt.checkpoint, !opt.raw_weights, opt.force);
    SampleLoader loader(idx, cfg.generator.use_offsets);
    fs::create_directories(opt.out_dir);

    json manifest = {{"config_hash", hash_hex(cfg.hash)},
                     {"checkpoint", opt.checkpoint},
                     {"seed", opt.seed},
                     {"ema", !opt.raw_weights},
                     {"files", json::array()}};
    Index maps = std::min<Index>(opt.max_maps, static_cast<Index>(idx.size()));
    for (Index m = 0; m < maps; ++m) {
        Sample s = loader.get(m);
        Tensor<float> t_in = build_t_in(cfg, s);
        for (Index k = 0; k < opt.num_z; ++k) {
            Tensor<float> z = latent_for(cfg, opt.seed, static_cast<std::uint64_t>(m), k);
            NoGradGuard ng;
            auto out = gen->forward(Var<float>::constant(t_in), Var<float>::constant(z));
            Tensor<float> img = out.image.val().reshaped({3, cfg.generator.image_size,
                                                          cfg.generator.image_size});
            std::string name = idx.records[static_cast<size_t>(m)].id + "_z" + std::to_string(k) +
                               ".png";
            write_rgb_png((fs::path(opt.out_dir) / name).string(), tensor_to_image(img));
            manifest["files"].push_back(name);
        }
    }
    std::ofstream mf((fs::path(opt.out_dir) / "set.json").string(), std::ios::trunc);
    mf << manifest.dump(2) << "\n";
}

json cmd_evaluate(const ExperimentConfig& cfg, const EvaluateOptions& opt) {
    if (!opt.compare_with.empty()) {
        std::ifstream is(opt.compare_with);
        if (!is) throw DataError("cannot open comparison report '" + opt.compare_with + "'");
        json other = json::parse(is, nullptr, false);
        if (other.is_discarded() || !other.contains("config_hash"))
            throw DataError("'" + opt.compare_with + "' is not an evaluation report");
        if (other["config_hash"] != hash_hex(cfg.hash))
            throw ConfigError("refusing cross-hash comparison: report " +
                              other["config_hash"].get<std::string>() + " vs config " +
                              hash_hex(cfg.hash));
    }

    DatasetIndex idx = load_dataset(cfg.dataset_root, cfg.use_instances);
    auto gen = load_generator_from_checkpoint(cfg, opt.checkpoint, !opt.raw_weights, opt.force);
    SampleLoader loader(idx, cfg.generator.use_offsets);
    FidExtractor<float> extractor(cfg.fid_extractor_seed, cfg.generator.image_size);

    json report;
    report["config_hash"] = hash_hex(cfg.hash);
    report["checkpoint"] = opt.checkpoint;
    {
        ArrayContainer meta_probe = ArrayContainer::load(opt.checkpoint);
        if (meta_probe.meta.contains("step")) report["checkpoint_step"] = meta_probe.meta["step"];
    }
    report["extractor"] = extractor.id();
    report["deterministic"] = deterministic_mode();
    report["ema"] = !opt.raw_weights;

    const Index n_eval = std::min<Index>(cfg.fid_samples, static_cast<Index>(idx.size()));
    if (n_eval < 2) throw DataError("evaluate: need at least 2 dataset records");

    // one generated image per evaluation label map; op-count contract checked
    gen->reset_forward_count();
    std::vector<Tensor<float>> reals, gens;
    std::vector<GridU16> refs;
    const Index HW = cfg.generator.image_size;
    for (Index i = 0; i < n_eval; ++i) {
        Sample s = loader.get(i);
        reals.push_back(s.image);
        refs.push_back(decode_label_map(s.one_hot));
        Tensor<float> z = latent_for(cfg, opt.seed, static_cast<std::uint64_t>(i), 0);
        NoGradGuard ng;
        auto out = gen->forward(Var<float>::constant(build_t_in(cfg, s)), Var<float>::constant(z));
        Tensor<float> img = out.image.val().reshaped({3, HW, HW});
        img.array() = img.array().max(0.0f).min(1.0f);  // image-domain range
        gens.push_back(std::move(img));
    }
    const std::int64_t invocations = gen->forward_count();
    report["images_generated"] = n_eval;
    report["generator_invocations"] = invocations;
    report["single_forward_pass"] = (invocations == n_eval);
    if (invocations != n_eval)
        throw NumericError("evaluate: generation was not a single forward pass per image");

    report["fid"] = fid(reals, gens, extractor);

    if (cfg.oracle == "synthetic") {
        SyntheticOracle oracle(cfg.generator.label_channels);
        std::vector<GridU16> preds;
        for (const auto& g : gens) preds.push_back(oracle.segment(g));
        std::vector<double> per_class;
        report["miou"] = miou(preds, refs, cfg.generator.label_channels, &per_class);
        report["per_class_iou"] = per_class;
        report["oracle"] = oracle.id();
    } else {
        report["miou_skipped"] = "no segmentation oracle registered under '" + cfg.oracle + "'";
    }

    // diversity: several z per held map
    {
        Index maps = std::min<Index>(cfg.diversity_maps, static_cast<Index>(idx.size()));
        std::vector<std::vector<Tensor<float>>> samples;
        for (Index m = 0; m < maps; ++m) {
            Sample s = loader.get(m);
            Tensor<float> t_in = build_t_in(cfg, s);
            std::vector<Tensor<float>> per_map;
            for (Index k = 0; k < cfg.diversity_samples; ++k) {
                Tensor<float> z = latent_for(cfg, opt.seed + 7, static_cast<std::uint64_t>(m), k);
                NoGradGuard ng;
                auto out = gen->forward(Var<float>::constant(t_in), Var<float>::constant(z));
                Tensor<float> img = out.image.val().reshaped({3, HW, HW});
                img.array() = img.array().max(0.0f).min(1.0f);
                per_map.push_back(std::move(img));
            }
            samples.push_back(std::move(per_map));
        }
        report["diversity"] = diversity_score<float>(
            samples, [&](const Tensor<float>& a, const Tensor<float>& b) {
                return feature_distance(extractor, a, b);
            });
        report["diversity_samples_per_map"] = cfg.diversity_samples;
    }

    // single-image latency
    {
        Sample s = loader.get(0);
        Tensor<float> t_in = build_t_in(cfg, s);
        Tensor<float> z = latent_for(cfg, opt.seed, 0, 0);
        TimingReport tr = time_inference(
            [&] {
                NoGradGuard ng;
                gen->forward(Var<float>::constant(t_in), Var<float>::constant(z));
            },
            cfg.timing_runs);
        report["timing"] = {{"mean_seconds", tr.mean_seconds},
                            {"std_seconds", tr.std_seconds},
                            {"runs", tr.runs}};
    }

    if (!opt.report_path.empty()) {
        std::ofstream os(opt.report_path, std::ios::trunc);
        if (!os) throw DataError("cannot write report '" + opt.report_path + "'");
        os << report.dump(2) << "\n";
    }
    if (!opt.contact_sheet.empty()) {
        Palette palette = synthetic_palette(cfg.generator.label_channels);
        std::vector<std::vector<ImageU8>> rows;
        Index maps = std::min<Index>(6, n_eval);
        for (Index m = 0; m < maps; ++m) {
            Sample s = loader.get(m);
            std::vector<ImageU8> row;
            GridU16 lab = decode_label_map(s.one_hot);
            ImageU8 lab_img;
            lab_img.height = lab.height;
            lab_img.width = lab.width;
            lab_img.rgb.resize(static_cast<size_t>(3 * lab.height * lab.width));
            for (Index p = 0; p < lab.height * lab.width; ++p)
                for (int ch = 0; ch < 3; ++ch)
                    lab_img.rgb[static_cast<size_t>(3 * p + ch)] =
                        palette.rgb[static_cast<size_t>(3 * lab.v[static_cast<size_t>(p)] + ch)];
            row.push_back(lab_img);
            row.push_back(tensor_to_image(reals[static_cast<size_t>(m)]));
            row.push_back(tensor_to_image(gens[static_cast<size_t>(m)]));
            rows.push_back(std::move(row));
        }
        write_rgb_png(opt.contact_sheet, contact_sheet(rows));
    }
    return report;
}

double cmd_estimate_tau(const ExperimentConfig& cfg) {
    cmd_prepare(cfg);
    DatasetIndex idx = load_dataset(cfg.dataset_root, cfg.use_instances);
    LossConfig l = cfg.losses;
    l.tau_div = 0.0;  // force a fresh estimate
    Trainer<float> trainer(cfg.generator, cfg.discriminator, l, cfg.trainer, idx, cfg.hash);
    return trainer.ensure_tau_div();
}

ImageU8 contact_sheet(const std::vector<std::vector<ImageU8>>& rows, Index pad) {
    if (rows.empty() || rows[0].empty()) throw std::invalid_argument("contact sheet: empty grid");
    Index cell_h = rows[0][0].height, cell_w = rows[0][0].width;
    size_t cols = 0;
    for (const auto& r : rows) cols = std::max(cols, r.size());
    ImageU8 sheet;
    sheet.height = static_cast<Index>(rows.size()) * (cell_h + pad) + pad;
    sheet.width = static_cast<Index>(cols) * (cell_w + pad) + pad;
    sheet.rgb.assign(static_cast<size_t>(3 * sheet.height * sheet.width), 24);
    for (size_t r = 0; r < rows.size(); ++r)
        for (size_t c = 0; c < rows[r].size(); ++c) {
            const ImageU8& img = rows[r][c];
            if (img.height != cell_h || img.width != cell_w)
                throw std::invalid_argument("contact sheet: mixed cell sizes");
            Index oy = static_cast<Index>(r) * (cell_h + pad) + pad;
            Index ox = static_cast<Index>(c) * (cell_w + pad) + pad;
            for (Index y = 0; y < cell_h; ++y)
                for (Index x = 0; x < cell_w; ++x)
                    std::copy(img.px(y, x), img.px(y, x) + 3, sheet.px(oy + y, ox + x));
        }
    return sheet;
}

}  // namespace simsyn
