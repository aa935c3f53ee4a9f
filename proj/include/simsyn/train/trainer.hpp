#pragma once

#include <chrono>
#include <functional>
#include <optional>

#include "simsyn/data/dataset.hpp"
#include "simsyn/disc/discriminator.hpp"
#include "simsyn/gen/generator.hpp"
#include "simsyn/io/array_container.hpp"
#include "simsyn/loss/losses.hpp"
#include "simsyn/train/optim.hpp"

namespace simsyn {

struct TrainerConfig {
    Index batch_size = 16;  // paper-scale 64; must be even (diversity pairs)
    double lr = 1e-3;
    double beta1 = 0.0;
    double beta2 = 0.99;
    double ema_decay = 0.9999;
    double grad_clip = 0.0;  // off by default; enable for attention-heavy encoders
    Index steps = 3000;
    Index grad_accum = 1;
    Index checkpoint_every = 500;
    std::uint64_t seed = 7;
    bool balanced_sampling = true;

    void validate() const {
        if (batch_size < 2 || batch_size % 2 != 0)
            throw ConfigError("trainer: batch size must be even and >= 2");
        if (lr <= 0) throw ConfigError("trainer: learning rate must be positive");
        if (ema_decay <= 0 || ema_decay >= 1) throw ConfigError("trainer: ema decay must be in (0,1)");
        if (grad_accum < 1) throw ConfigError("trainer: grad_accum must be >= 1");
    }
};

struct StepReport {
    Index step = 0;
    double loss_d = 0, loss_g_adv = 0, loss_nce = 0, loss_div = 0, loss_g_total = 0;
    double grad_norm_d = 0, grad_norm_g = 0;
    double clip_scale_d = 1, clip_scale_g = 1;
    Index clamped_probs = 0;
    double seconds = 0;
    bool rolled_back = false;
    std::string diagnostic;
};

template <typename S>
class Trainer {
public:
    Trainer(const GeneratorConfig& gcfg, const DiscriminatorConfig& dcfg, const LossConfig& lcfg,
            const TrainerConfig& tcfg, const DatasetIndex& data, std::uint64_t config_hash)
        : gcfg_(gcfg),
          dcfg_(dcfg),
          lcfg_(lcfg),
          tcfg_(tcfg),
          config_hash_(config_hash),
          data_(data),
          loader_(data, gcfg.use_offsets),
          rng_init_(tcfg.seed),
          rng_data_(tcfg.seed, 101),
          rng_z_(tcfg.seed, 202),
          rng_patch_(tcfg.seed, 303) {
        tcfg_.validate();
        lcfg_.validate();
        if (data_.num_classes != gcfg_.label_channels)
            throw ConfigError("trainer: dataset has " + std::to_string(data_.num_classes) +
                              " classes, generator expects " + std::to_string(gcfg_.label_channels));
        if (dcfg_.num_classes != gcfg_.label_channels)
            throw ConfigError("trainer: generator/discriminator class counts differ");
        gen_ = std::make_unique<Generator<S>>(gcfg_, rng_init_);
        disc_ = std::make_unique<Discriminator<S>>(dcfg_, rng_init_);
        extractor_ = std::make_unique<PerceptualExtractor<S>>(9181);
        heads_ = std::make_unique<ContrastiveHeads<S>>(extractor_->scale_channels(),
                                                       lcfg_.embed_dim, rng_init_, gcfg_.spectral);
        NamedParams<S> g_params = named_trainable(*gen_, "gen/");
        NamedParams<S> h_params = named_trainable(*heads_, "heads/");
        NamedParams<S> gh = g_params;
        for (size_t i = 0; i < h_params.size(); ++i) gh.add(h_params.names[i], h_params.vars[i]);
        opt_g_ = Adam<S>(gh, tcfg_.lr, tcfg_.beta1, tcfg_.beta2);
        opt_d_ = Adam<S>(named_trainable(*disc_, "disc/"), tcfg_.lr, tcfg_.beta1, tcfg_.beta2);
        ema_ = EmaState<S>(g_params, tcfg_.ema_decay);
        tau_div_ = lcfg_.tau_div;
    }

    // Estimates the diversity cutoff once at startup when not provided.
    double ensure_tau_div() {
        if (tau_div_ > 0) return tau_div_;
        Index bs = std::max<Index>(4, tcfg_.batch_size);
        Rng rng(tcfg_.seed, 404);
        auto fn = [&](const Tensor<S>& z) {
            Batch b = assemble(static_cast<Index>(z.dim(0)), /*paired=*/false);
            NoGradGuard ng;
            auto out = gen_->forward(Var<S>::constant(b.t_in), Var<S>::constant(z));
            return out.prefinal.val();
        };
        tau_div_ = estimate_tau_div<S>(fn, gcfg_.z_dim, bs, lcfg_.tau_div_batches, rng);
        return tau_div_;
    }

    StepReport step() {
        if (tau_div_ <= 0 && lcfg_.lambda_d > 0)
            throw ConfigError("trainer: tau_div not estimated; call ensure_tau_div() first");
        auto t0 = std::chrono::steady_clock::now();
        Snapshot snap = snapshot();
        StepReport rep;
        rep.step = step_ + 1;
        try {
            run_step(rep);
        } catch (const NumericError& e) {
            restore(snap);
            rep.rolled_back = true;
            rep.diagnostic = e.what();
        }
        if (!rep.rolled_back) ++step_;
        rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return rep;
    }

    void run(Index steps, const std::function<void(const StepReport&)>& on_step = nullptr) {
        for (Index i = 0; i < steps; ++i) {
            StepReport rep = step();
            if (on_step) on_step(rep);
        }
    }

    // ------------------------------------------------------------------
    // Checkpointing
    // ------------------------------------------------------------------

    void save_checkpoint(const std::string& path, bool final_mark = false) {
        ArrayContainer c;
        c.meta["format"] = "simsyn-checkpoint";
        c.meta["version"] = 1;
        c.meta["config_hash"] = config_hash_;
        c.meta["step"] = step_;
        c.meta["tau_div"] = tau_div_;
        c.meta["final"] = final_mark;
        c.meta["rng"] = {{"data", {rng_data_.state(), rng_data_.inc()}},
                         {"z", {rng_z_.state(), rng_z_.inc()}},
                         {"patch", {rng_patch_.state(), rng_patch_.inc()}}};
        c.meta["opt_g_steps"] = opt_g_.step_count();
        c.meta["opt_d_steps"] = opt_d_.step_count();
        save_module(c, "gen/", *gen_);
        save_module(c, "disc/", *disc_);
        save_module(c, "heads/", *heads_);
        save_opt(c, "optg/", opt_g_);
        save_opt(c, "optd/", opt_d_);
        for (size_t i = 0; i < ema_.params().size(); ++i)
            c.put_f32_or_f64("ema/" + ema_.params().names[i], ema_.shadow(i));
        c.save(path);
    }

    void load_checkpoint(const std::string& path, bool force = false) {
        ArrayContainer c = ArrayContainer::load(path);
        if (!c.meta.contains("format") || c.meta["format"] != "simsyn-checkpoint")
            throw DataError("'" + path + "' is not a checkpoint");
        if (c.meta["version"] != 1) throw DataError("unsupported checkpoint version");
        std::uint64_t h = c.meta["config_hash"];
        if (h != config_hash_ && !force)
            throw ConfigError("checkpoint config hash mismatch (" + std::to_string(h) + " vs " +
                              std::to_string(config_hash_) + "); pass --force to override");
        load_module(c, "gen/", *gen_);
        load_module(c, "disc/", *disc_);
        load_module(c, "heads/", *heads_);
        load_opt(c, "optg/", opt_g_);
        load_opt(c, "optd/", opt_d_);
        for (size_t i = 0; i < ema_.params().size(); ++i)
            ema_.shadow_mut(i) = c.template get_scalar_tensor<S>("ema/" + ema_.params().names[i]);
        step_ = c.meta["step"];
        tau_div_ = c.meta["tau_div"];
        opt_g_.set_step_count(c.meta["opt_g_steps"]);
        opt_d_.set_step_count(c.meta["opt_d_steps"]);
        rng_data_.restore(c.meta["rng"]["data"][0], c.meta["rng"]["data"][1]);
        rng_z_.restore(c.meta["rng"]["z"][0], c.meta["rng"]["z"][1]);
        rng_patch_.restore(c.meta["rng"]["patch"][0], c.meta["rng"]["patch"][1]);
    }

    // Fresh generator carrying the EMA weights (and live buffers), in eval mode.
    std::unique_ptr<Generator<S>> ema_generator() {
        Rng tmp(1);
        auto g = std::make_unique<Generator<S>>(gcfg_, tmp);
        // copy live params (covers frozen/untracked), then overlay EMA shadows
        std::map<std::string, Tensor<S>> values;
        gen_->visit_params([&](const std::string& n, Var<S>& v) { values[n] = v.val(); });
        for (size_t i = 0; i < ema_.params().size(); ++i) {
            std::string n = ema_.params().names[i];
            values[n.substr(4)] = ema_.shadow(i);  // strip "gen/"
        }
        g->visit_params([&](const std::string& n, Var<S>& v) { v.val_mut() = values.at(n); });
        std::map<std::string, Tensor<double>> bufs;
        gen_->visit_buffers([&](const std::string& n, Tensor<double>& b) { bufs[n] = b; });
        g->visit_buffers([&](const std::string& n, Tensor<double>& b) { b = bufs.at(n); });
        g->set_training(false);
        return g;
    }

    Generator<S>& generator() { return *gen_; }
    Discriminator<S>& discriminator() { return *disc_; }
    ContrastiveHeads<S>& heads() { return *heads_; }
    PerceptualExtractor<S>& extractor() { return *extractor_; }
    EmaState<S>& ema() { return ema_; }
    double tau_div() const { return tau_div_; }
    void set_tau_div(double v) { tau_div_ = v; }
    Index current_step() const { return step_; }
    const LossConfig& loss_config() const { return lcfg_; }
    const TrainerConfig& trainer_config() const { return tcfg_; }

    struct Batch {
        Tensor<S> x;         // (B,3,H,W)
        Tensor<S> t_in;      // (B,C+offsets,H,W)
        Tensor<S> t_onehot;  // (B,C,H,W)
        std::vector<Index> indices;
    };

    // Batches are built as paired halves: record i occupies slots 2i and 2i+1
    // so the diversity loss always compares generations from the same map.
    Batch assemble(Index batch, bool paired = true) {
        Index draws = paired ? batch / 2 : batch;
        std::vector<Index> idx;
        if (tcfg_.balanced_sampling) {
            idx = sample_batch(data_.sampling_weights, draws, rng_data_);
        } else {
            for (Index i = 0; i < draws; ++i)
                idx.push_back(static_cast<Index>(
                    rng_data_.uniform_int(static_cast<std::uint64_t>(data_.size()))));
        }
        Batch b;
        Index H = gcfg_.image_size, W = gcfg_.image_size;
        Index Cin = gcfg_.in_channels(), C = gcfg_.label_channels;
        b.x = Tensor<S>({batch, 3, H, W});
        b.t_in = Tensor<S>({batch, Cin, H, W});
        b.t_onehot = Tensor<S>({batch, C, H, W});
        for (Index d = 0; d < draws; ++d) {
            Sample s = loader_.get(idx[static_cast<size_t>(d)]);
            if (s.image.dim(1) != H || s.image.dim(2) != W)
                throw DataError("trainer: dataset image size does not match the configured size");
            Index copies = paired ? 2 : 1;
            for (Index k = 0; k < copies; ++k) {
                Index n = paired ? 2 * d + k : d;
                std::copy(s.image.data(), s.image.data() + 3 * H * W, b.x.data() + n * 3 * H * W);
                std::copy(s.one_hot.data(), s.one_hot.data() + C * H * W,
                          b.t_in.data() + n * Cin * H * W);
                if (gcfg_.use_offsets)
                    std::copy(s.offsets.data(), s.offsets.data() + 2 * H * W,
                              b.t_in.data() + n * Cin * H * W + C * H * W);
                std::copy(s.one_hot.data(), s.one_hot.data() + C * H * W,
                          b.t_onehot.data() + n * C * H * W);
            }
            b.indices.push_back(idx[static_cast<size_t>(d)]);
        }
        return b;
    }

    Tensor<S> sample_latents(Index batch) {
        Tensor<S> z({batch, gcfg_.z_dim});
        for (Index i = 0; i < z.numel(); ++i) z[i] = static_cast<S>(rng_z_.normal());
        return z;
    }

private:
    struct Snapshot {
        std::vector<Tensor<S>> params;           // every parameter of all modules
        std::vector<Tensor<double>> buffers;     // BN stats, SN vectors
        std::vector<Tensor<S>> opt_g_m, opt_g_v, opt_d_m, opt_d_v;
        std::vector<Tensor<S>> ema;
        std::int64_t opt_g_t, opt_d_t;
        std::uint64_t rd_s, rd_i, rz_s, rz_i, rp_s, rp_i;
    };

    static NamedParams<S> named_trainable(Module<S>& m, const std::string& prefix) {
        NamedParams<S> out;
        m.visit_params([&](const std::string& n, Var<S>& v) {
            if (v.node()->requires_grad) out.add(prefix + n, v);
        });
        return out;
    }

    void run_step(StepReport& rep) {
        const Index B = tcfg_.batch_size;
        const Index A = tcfg_.grad_accum;

        // ---- discriminator update ----
        disc_->zero_grad();
        double loss_d_acc = 0;
        for (Index a = 0; a < A; ++a) {
            Batch b = assemble(B);
            Tensor<S> z = sample_latents(B);
            Tensor<S> fake;
            {
                NoGradGuard ng;
                fake = gen_->forward(Var<S>::constant(b.t_in), Var<S>::constant(z)).image.val();
            }
            auto alpha = class_weights(b.t_onehot);
            Var<S> logits_r = disc_->forward(Var<S>::constant(b.x));
            Var<S> logits_f = disc_->forward(Var<S>::constant(fake));
            Index clamped = 0;
            Var<S> loss_d = discriminator_loss(logits_r, logits_f, b.t_onehot, alpha, lcfg_, &clamped);
            rep.clamped_probs += clamped;
            double ld = static_cast<double>(loss_d.val().item());
            if (!std::isfinite(ld)) throw NumericError("non-finite discriminator loss");
            loss_d_acc += ld;
            backward(loss_d);
        }
        ClipReport cd = clip_gradients(opt_d_.params(), tcfg_.grad_clip);
        if (!std::isfinite(cd.norm)) throw NumericError("non-finite discriminator gradients");
        rep.grad_norm_d = cd.norm;
        rep.clip_scale_d = cd.scale;
        opt_d_.step(1.0 / static_cast<double>(A));
        rep.loss_d = loss_d_acc / static_cast<double>(A);

        // ---- generator update ----
        disc_->set_params_requires_grad(false);
        gen_->zero_grad();
        heads_->zero_grad();
        double adv_acc = 0, nce_acc = 0, div_acc = 0, tot_acc = 0;
        for (Index a = 0; a < A; ++a) {
            Batch b = assemble(B);
            Tensor<S> z = sample_latents(B);
            auto out = gen_->forward(Var<S>::constant(b.t_in), Var<S>::constant(z));
            Var<S> logits_f = disc_->forward(out.image);
            auto alpha = class_weights(b.t_onehot);
            Index clamped = 0;
            Var<S> l_adv = generator_adv_loss(logits_f, b.t_onehot, alpha, lcfg_, &clamped);
            rep.clamped_probs += clamped;
            Var<S> total = scale(l_adv, static_cast<S>(lcfg_.lambda_gan));
            double nce_v = 0, div_v = 0;
            if (lcfg_.lambda_c > 0) {
                Var<S> l_nce = contrastive_loss(Var<S>::constant(b.x), out.image, *extractor_,
                                                *heads_, lcfg_, rng_patch_);
                nce_v = static_cast<double>(l_nce.val().item());
                total = add(total, scale(l_nce, static_cast<S>(lcfg_.lambda_c)));
            }
            if (lcfg_.lambda_d > 0) {
                Var<S> l_div = diversity_pairs(out.prefinal, z);
                div_v = static_cast<double>(l_div.val().item());
                total = add(total, scale(l_div, static_cast<S>(lcfg_.lambda_d)));
            }
            double adv_v = static_cast<double>(l_adv.val().item());
            double tot_v = static_cast<double>(total.val().item());
            if (!std::isfinite(tot_v)) throw NumericError("non-finite generator loss");
            adv_acc += adv_v;
            nce_acc += nce_v;
            div_acc += div_v;
            tot_acc += tot_v;
            backward(total);
        }
        ClipReport cg = clip_gradients(opt_g_.params(), tcfg_.grad_clip);
        if (!std::isfinite(cg.norm)) throw NumericError("non-finite generator gradients");
        rep.grad_norm_g = cg.norm;
        rep.clip_scale_g = cg.scale;
        opt_g_.step(1.0 / static_cast<double>(A));
        disc_->set_params_requires_grad(true);

        ema_.update();
        rep.loss_g_adv = adv_acc / static_cast<double>(A);
        rep.loss_nce = nce_acc / static_cast<double>(A);
        rep.loss_div = div_acc / static_cast<double>(A);
        rep.loss_g_total = tot_acc / static_cast<double>(A);
    }

    std::vector<double> class_weights(const Tensor<S>& t_onehot) {
        if (lcfg_.class_weighting) return compute_class_weights(t_onehot);
        std::vector<double> alpha(static_cast<size_t>(t_onehot.dim(1)), 1.0);
        return alpha;
    }

    // Diversity over the paired batch layout (even/odd slots share the map).
    Var<S> diversity_pairs(Var<S> prefinal, const Tensor<S>& z) {
        Index B = prefinal.val().dim(0);
        Index C = prefinal.val().dim(1), H = prefinal.val().dim(2), W = prefinal.val().dim(3);
        Index half = B / 2;
        std::vector<Index> evens, odds;
        for (Index i = 0; i < half; ++i) {
            evens.push_back(2 * i);
            odds.push_back(2 * i + 1);
        }
        Var<S> flat = reshape(prefinal, {B, C * H * W});
        Var<S> pre_e = reshape(gather_rows(flat, evens), {half, C, H, W});
        Var<S> pre_o = reshape(gather_rows(flat, odds), {half, C, H, W});
        Tensor<S> z_e({half, gcfg_.z_dim}), z_o({half, gcfg_.z_dim});
        for (Index i = 0; i < half; ++i)
            for (Index k = 0; k < gcfg_.z_dim; ++k) {
                z_e[i * gcfg_.z_dim + k] = z[(2 * i) * gcfg_.z_dim + k];
                z_o[i * gcfg_.z_dim + k] = z[(2 * i + 1) * gcfg_.z_dim + k];
            }
        return diversity_loss(pre_e, pre_o, z_e, z_o, static_cast<S>(tau_div_));
    }

    // ---- snapshot / restore for non-finite rollback ----

    Snapshot snapshot() {
        Snapshot s;
        for (Module<S>* m : modules())
            m->visit_params([&](const std::string&, Var<S>& v) { s.params.push_back(v.val()); });
        for (Module<S>* m : modules())
            m->visit_buffers([&](const std::string&, Tensor<double>& b) { s.buffers.push_back(b); });
        for (size_t i = 0; i < opt_g_.params().size(); ++i) {
            s.opt_g_m.push_back(opt_g_.moment1(i));
            s.opt_g_v.push_back(opt_g_.moment2(i));
        }
        for (size_t i = 0; i < opt_d_.params().size(); ++i) {
            s.opt_d_m.push_back(opt_d_.moment1(i));
            s.opt_d_v.push_back(opt_d_.moment2(i));
        }
        for (size_t i = 0; i < ema_.params().size(); ++i) s.ema.push_back(ema_.shadow(i));
        s.opt_g_t = opt_g_.step_count();
        s.opt_d_t = opt_d_.step_count();
        s.rd_s = rng_data_.state();
        s.rd_i = rng_data_.inc();
        s.rz_s = rng_z_.state();
        s.rz_i = rng_z_.inc();
        s.rp_s = rng_patch_.state();
        s.rp_i = rng_patch_.inc();
        return s;
    }

    void restore(const Snapshot& s) {
        size_t pi = 0, bi = 0;
        for (Module<S>* m : modules())
            m->visit_params([&](const std::string&, Var<S>& v) {
                v.val_mut() = s.params[pi++];
                v.zero_grad();
            });
        for (Module<S>* m : modules())
            m->visit_buffers([&](const std::string&, Tensor<double>& b) { b = s.buffers[bi++]; });
        for (size_t i = 0; i < opt_g_.params().size(); ++i) {
            opt_g_.moment1(i) = s.opt_g_m[i];
            opt_g_.moment2(i) = s.opt_g_v[i];
        }
        for (size_t i = 0; i < opt_d_.params().size(); ++i) {
            opt_d_.moment1(i) = s.opt_d_m[i];
            opt_d_.moment2(i) = s.opt_d_v[i];
        }
        for (size_t i = 0; i < ema_.params().size(); ++i) ema_.shadow_mut(i) = s.ema[i];
        opt_g_.set_step_count(s.opt_g_t);
        opt_d_.set_step_count(s.opt_d_t);
        rng_data_.restore(s.rd_s, s.rd_i);
        rng_z_.restore(s.rz_s, s.rz_i);
        rng_patch_.restore(s.rp_s, s.rp_i);
        disc_->set_params_requires_grad(true);
        // backbone params must stay frozen
        disc_->backbone().set_params_requires_grad(false);
    }

    std::vector<Module<S>*> modules() {
        return {gen_.get(), disc_.get(), heads_.get(), extractor_.get()};
    }

    void save_module(ArrayContainer& c, const std::string& prefix, Module<S>& m) {
        m.visit_params([&](const std::string& n, Var<S>& v) {
            c.put_f32_or_f64(prefix + n, v.val());
        });
        m.visit_buffers([&](const std::string& n, Tensor<double>& b) {
            c.put_f64("buf/" + prefix + n, b);
        });
    }

    void load_module(ArrayContainer& c, const std::string& prefix, Module<S>& m) {
        m.visit_params([&](const std::string& n, Var<S>& v) {
            v.val_mut() = c.template get_scalar_tensor<S>(prefix + n);
        });
        m.visit_buffers([&](const std::string& n, Tensor<double>& b) {
            b = c.get_f64("buf/" + prefix + n);
        });
    }

    void save_opt(ArrayContainer& c, const std::string& prefix, Adam<S>& opt) {
        for (size_t i = 0; i < opt.params().size(); ++i) {
            c.put_f32_or_f64(prefix + "m/" + opt.params().names[i], opt.moment1(i));
            c.put_f32_or_f64(prefix + "v/" + opt.params().names[i], opt.moment2(i));
        }
    }

    void load_opt(ArrayContainer& c, const std::string& prefix, Adam<S>& opt) {
        for (size_t i = 0; i < opt.params().size(); ++i) {
            opt.moment1(i) = c.template get_scalar_tensor<S>(prefix + "m/" + opt.params().names[i]);
            opt.moment2(i) = c.template get_scalar_tensor<S>(prefix + "v/" + opt.params().names[i]);
        }
    }

    GeneratorConfig gcfg_;
    DiscriminatorConfig dcfg_;
    LossConfig lcfg_;
    TrainerConfig tcfg_;
    std::uint64_t config_hash_;
    const DatasetIndex& data_;
    SampleLoader loader_;
    Rng rng_init_, rng_data_, rng_z_, rng_patch_;
    std::unique_ptr<Generator<S>> gen_;
    std::unique_ptr<Discriminator<S>> disc_;
    std::unique_ptr<PerceptualExtractor<S>> extractor_;
    std::unique_ptr<ContrastiveHeads<S>> heads_;
    Adam<S> opt_g_, opt_d_;
    EmaState<S> ema_;
    double tau_div_ = 0;
    Index step_ = 0;
};

}  // namespace simsyn
