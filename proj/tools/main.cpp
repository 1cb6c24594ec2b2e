#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "elab/pipeline.hpp"
#include "elab/plots.hpp"
#include "elab/png_io.hpp"

namespace fs = std::filesystem;
using namespace elab;

namespace {

RunConfig load_or_default(const std::string& path) {
    if (path.empty()) return RunConfig{};
    return load_config(path);
}

void write_resolved(const RunConfig& cfg, const std::string& outdir) {
    fs::create_directories(outdir);
    std::ofstream f(outdir + "/resolved-config.json");
    f << resolved_config_json(cfg) << "\n";
}

GuidanceSpecT<float> cell_guidance(const RunConfig& cfg, const std::string& guidance_path,
                                   const TokenTableT<float>& table) {
    if (guidance_path.empty()) {
        GuidanceSpecT<float> g;
        g.mode = GuidanceMode::Cfg;
        g.alpha = cfg.guidance.alpha;
        return g;
    }
    return load_guidance_spec(guidance_path, table);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"concept erasure and concept-inversion toolkit for toy diffusion models"};

    std::string config_path, outdir = "runs/out", checkpoint_path, classifier_path, guidance_path, embedding_path;
    std::string method, attack, concept_token, prompt_token, render_path, target = "denoiser";
    int n_samples = 64;
    std::uint64_t seed = 0;
    bool emit_default = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run config JSON (defaults used when omitted)");
        cmd->add_option("--out", outdir, "output directory");
    };

    auto* c_train = app.add_subcommand("train", "train the denoiser, the digit classifier, or the class-excluded model");
    add_common(c_train);
    c_train->add_option("--target", target, "denoiser | classifier | excluded");

    auto* c_erase = app.add_subcommand("erase", "run one erasure method against a checkpoint");
    add_common(c_erase);
    c_erase->add_option("--method", method, "esd | uce | sa | fmn | ac | np | sld")->required();
    c_erase->add_option("--concept", concept_token, "concept token, e.g. <digit-3>")->required();
    c_erase->add_option("--checkpoint", checkpoint_path, "base checkpoint")->required();

    auto* c_invert = app.add_subcommand("invert", "learn a placeholder embedding against an erased model");
    add_common(c_invert);
    c_invert->add_option("--attack", attack, "ti | np-ci | sld-ci")->required();
    c_invert->add_option("--concept", concept_token, "erased concept token")->required();
    c_invert->add_option("--checkpoint", checkpoint_path, "model under attack (erased for ti, base for np/sld)")
        ->required();
    c_invert->add_option("--guidance", guidance_path, "guidance spec file (required for sld-ci)");

    auto* c_sample = app.add_subcommand("sample", "sample a grid of images");
    add_common(c_sample);
    c_sample->add_option("--checkpoint", checkpoint_path)->required();
    c_sample->add_option("--guidance", guidance_path, "guidance spec file (default: CFG at the config alpha)");
    c_sample->add_option("--embedding", embedding_path, "embedding export to install before sampling");
    c_sample->add_option("--prompt", prompt_token, "prompt token (@embedding = the installed placeholder)")->required();
    c_sample->add_option("--n", n_samples, "sample count");
    c_sample->add_option("--seed", seed, "sampling seed (default: derived from the run seed)");

    auto* c_eval = app.add_subcommand("evaluate", "classifier accuracy of prompted samples");
    add_common(c_eval);
    c_eval->add_option("--checkpoint", checkpoint_path)->required();
    c_eval->add_option("--classifier", classifier_path)->required();
    c_eval->add_option("--concept", concept_token, "concept whose class is judged")->required();
    c_eval->add_option("--guidance", guidance_path);
    c_eval->add_option("--embedding", embedding_path, "judge this installed placeholder instead of the concept token");
    c_eval->add_option("--n", n_samples, "sample count (default: eval.n_samples)");

    auto* c_report = app.add_subcommand("report", "run the full erase/attack matrix and render tables and plots");
    add_common(c_report);
    c_report->add_option("--checkpoint", checkpoint_path, "base checkpoint (omit with --render)");
    c_report->add_option("--classifier", classifier_path, "judge checkpoint (omit with --render)");
    c_report->add_option("--render", render_path, "render an existing report.jsonl instead of recomputing");

    auto* c_excl = app.add_subcommand("exclusion-study", "train full and class-excluded models; compare TI recovery");
    add_common(c_excl);
    c_excl->add_option("--classifier", classifier_path, "judge checkpoint (trained fresh when omitted)");

    app.add_flag("--emit-default-config", emit_default, "print the default config and exit");

    CLI11_PARSE(app, argc, argv);

    try {
        if (emit_default) {
            std::cout << default_config_json() << "\n";
            return 0;
        }
        if (app.get_subcommands().empty()) {
            std::fprintf(stderr, "error: a subcommand is required (see --help)\n");
            return 2;
        }
        RunConfig cfg = load_or_default(config_path);

        if (c_train->parsed()) {
            Pipeline pipe(cfg);
            write_resolved(cfg, outdir);
            if (target == "classifier") {
                auto judge = pipe.train_judge();
                const double acc = classifier_accuracy(judge, pipe.eval_set());
                save_classifier(outdir + "/classifier.bin", judge);
                std::printf("classifier held-out accuracy: %.4f\n", acc);
                if (acc < 0.97) {
                    std::fprintf(stderr, "classifier below the 0.97 gate; evaluation would be uninformative\n");
                    return 3;
                }
            } else if (target == "excluded") {
                auto model = pipe.train_base_excluding(cfg.eval.exclusion_class);
                save_checkpoint(outdir + "/checkpoint.bin", model);
                std::printf("wrote %s/checkpoint.bin (class %d excluded)\n", outdir.c_str(), cfg.eval.exclusion_class);
            } else if (target == "denoiser") {
                std::vector<double> curve;
                TrainConfig t = cfg.train;
                t.seed = derive_seed(cfg.seed, "train-base");
                auto vocab = make_vocab<float>(pipe.train_set().class_tokens, cfg.arch.cond_dim,
                                               derive_seed(cfg.seed, "vocab"));
                Arch arch = cfg.arch;
                arch.image_size = cfg.dataset.image_size;
                auto sched = make_schedule(cfg.schedule.T, schedule_kind_from_string(cfg.schedule.kind),
                                           cfg.schedule.beta_min, cfg.schedule.beta_max);
                auto model = train_denoiser(pipe.train_set(), vocab, arch, sched, t, &curve);
                save_checkpoint(outdir + "/checkpoint.bin", model);
                write_jsonl_curve(outdir + "/loss.jsonl", curve);
                std::printf("wrote %s/checkpoint.bin (final loss %.5f)\n", outdir.c_str(), curve.back());
            } else {
                std::fprintf(stderr, "unknown --target %s\n", target.c_str());
                return 2;
            }
        } else if (c_erase->parsed()) {
            Pipeline pipe(cfg);
            write_resolved(cfg, outdir);
            auto base = load_checkpoint(checkpoint_path);
            auto art = pipe.run_erasure(base, method, concept_token);
            if (art.model) {
                save_checkpoint(outdir + "/erased.ckpt", *art.model);
                std::printf("wrote %s/erased.ckpt\n", outdir.c_str());
            } else {
                save_guidance_spec(outdir + "/guidance.json", *art.guidance, bare_prompt(concept_token));
                std::printf("wrote %s/guidance.json (weight-free method)\n", outdir.c_str());
            }
            write_jsonl_curve(outdir + "/curve.jsonl", art.curve);
        } else if (c_invert->parsed()) {
            Pipeline pipe(cfg);
            write_resolved(cfg, outdir);
            auto model = load_checkpoint(checkpoint_path);
            const int cls = pipe.class_of_token(concept_token);
            auto examples = pipe.attack_examples(cls);
            InversionResult res;
            if (attack == "ti") {
                InversionConfig c = cfg.inversion.ti;
                c.seed = derive_seed(cfg.seed, "cli-invert-ti");
                res = invert_ti(model, examples, c);
            } else if (attack == "np-ci") {
                InversionConfig c = cfg.inversion.np_ci;
                c.seed = derive_seed(cfg.seed, "cli-invert-np");
                res = invert_np(model, concept_token, examples, cfg.erasure.np.alpha, c);
            } else if (attack == "sld-ci") {
                if (guidance_path.empty()) throw std::invalid_argument("sld-ci requires --guidance");
                auto spec = load_guidance_spec(guidance_path, model.table);
                InversionConfig c = cfg.inversion.sld_ci;
                c.seed = derive_seed(cfg.seed, "cli-invert-sld");
                res = invert_sld(model, spec, concept_token, examples, cfg.guidance.alpha, c);
            } else {
                throw std::invalid_argument("unknown attack: " + attack);
            }
            EmbeddingExport e;
            e.token = res.config_echo.placeholder;
            e.attack = res.attack;
            e.source_checkpoint = model.weights_hash();
            e.embedding = res.embedding;
            save_embedding(outdir + "/embedding.bin", e);
            write_jsonl_curve(outdir + "/curve.jsonl", res.curve);
            std::printf("wrote %s/embedding.bin (final loss %.6f)\n", outdir.c_str(), res.curve.back());
        } else if (c_sample->parsed()) {
            write_resolved(cfg, outdir);
            auto model = load_checkpoint(checkpoint_path);
            if (!embedding_path.empty()) {
                auto e = load_embedding(embedding_path);
                model = install_embedding(model, e.token, e.embedding);
                if (prompt_token == "@embedding") prompt_token = e.token;
            }
            auto g = cell_guidance(cfg, guidance_path, model.table);
            const std::uint64_t s0 = seed ? seed : derive_seed(cfg.seed, "cli-sample");
            std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n_samples));
            for (int i = 0; i < n_samples; ++i) seeds[static_cast<std::size_t>(i)] = derive_seed(s0, "traj", i);
            auto prompt = model.table.encode_prompt(template_prompt(prompt_token));
            auto x = sample_batch(model, g, prompt, seeds, model.sched.T, cfg.guidance.clip_denoised);
            clamp_unit(x);
            const int S = model.net.arch.image_size;
            std::vector<Tensor<float>> imgs;
            for (int i = 0; i < n_samples; ++i) {
                Tensor<float> im({S, S, 1});
                for (int p = 0; p < S * S; ++p)
                    im.v[static_cast<std::size_t>(p)] = x.v[static_cast<std::size_t>(i) * S * S + p];
                imgs.push_back(std::move(im));
            }
            write_image_grid_png(outdir + "/samples.png", imgs, S, 8);
            std::printf("wrote %s/samples.png\n", outdir.c_str());
        } else if (c_eval->parsed()) {
            Pipeline pipe(cfg);
            write_resolved(cfg, outdir);
            auto model = load_checkpoint(checkpoint_path);
            auto judge = load_classifier(classifier_path);
            const int cls = pipe.class_of_token(concept_token);
            std::string tok = concept_token;
            if (!embedding_path.empty()) {
                auto e = load_embedding(embedding_path);
                model = install_embedding(model, e.token, e.embedding);
                tok = e.token;
            }
            auto g = cell_guidance(cfg, guidance_path, model.table);
            const int n = c_eval->count("--n") ? n_samples : cfg.eval.n_samples;
            const std::uint64_t s = derive_seed(cfg.seed, "cli-evaluate");
            const double acc = concept_accuracy(model, g, tok, cls, judge, n, s);
            std::ofstream f(outdir + "/accuracy.json");
            f << "{\"concept\":\"" << concept_token << "\",\"prompt\":\"" << tok << "\",\"accuracy\":" << acc
              << ",\"n\":" << n << ",\"seed\":" << s << "}\n";
            std::printf("accuracy %.4f over %d samples\n", acc, n);
        } else if (c_report->parsed()) {
            fs::create_directories(outdir);
            if (!render_path.empty()) {
                auto rep = load_report(render_path);
                auto files = emit_plots(rep, outdir);
                for (const auto& p : files) std::printf("wrote %s\n", p.c_str());
            } else {
                if (checkpoint_path.empty() || classifier_path.empty())
                    throw std::invalid_argument("report needs --checkpoint and --classifier (or --render)");
                Pipeline pipe(cfg);
                write_resolved(cfg, outdir);
                auto base = load_checkpoint(checkpoint_path);
                auto judge = load_classifier(classifier_path);
                auto rep = pipe.full_matrix(base, judge, outdir);
                save_report(outdir + "/report.jsonl", rep);
                auto files = emit_plots(rep, outdir);
                std::printf("wrote %s/report.jsonl and %zu rendered files\n", outdir.c_str(), files.size());
            }
        } else if (c_excl->parsed()) {
            Pipeline pipe(cfg);
            write_resolved(cfg, outdir);
            Classifier judge = classifier_path.empty() ? pipe.train_judge() : load_classifier(classifier_path);
            EvalReport rep;
            rep.config_echo = resolved_config_json(cfg);
            auto out = pipe.run_exclusion_study(judge, &rep);
            save_report(outdir + "/exclusion.jsonl", rep);
            std::printf("ti recovery: full %.3f, excluded %.3f, gap %.1f points\n", out.full_accuracy,
                        out.excluded_accuracy, 100.0 * out.gap());
        }
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
