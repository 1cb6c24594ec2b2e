#include "elab/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "elab/png_io.hpp"

namespace elab {

using nlohmann::json;

Pipeline::Pipeline(RunConfig cfg) : cfg_(std::move(cfg)) {
    train_set_ = render_digits(cfg_.dataset.train_per_class, cfg_.dataset.image_size, derive_seed(cfg_.seed, "dataset-train"));
    eval_set_ = render_digits(cfg_.dataset.eval_per_class, cfg_.dataset.image_size, derive_seed(cfg_.seed, "dataset-eval"));
}

int Pipeline::class_of_token(const std::string& token) const {
    for (std::size_t i = 0; i < train_set_.class_tokens.size(); ++i)
        if (train_set_.class_tokens[i] == token) return static_cast<int>(i);
    throw std::invalid_argument("no class for token " + token);
}

Classifier Pipeline::train_judge() const {
    ClassifierConfig c = cfg_.classifier;
    c.seed = derive_seed(cfg_.seed, "classifier");
    return train_classifier(train_set_, c);
}

DiffusionModelT<float> Pipeline::train_base() const {
    TrainConfig t = cfg_.train;
    t.seed = derive_seed(cfg_.seed, "train-base");
    auto vocab = make_vocab<float>(train_set_.class_tokens, cfg_.arch.cond_dim, derive_seed(cfg_.seed, "vocab"));
    Arch arch = cfg_.arch;
    arch.image_size = cfg_.dataset.image_size;
    auto sched = make_schedule(cfg_.schedule.T, schedule_kind_from_string(cfg_.schedule.kind), cfg_.schedule.beta_min,
                               cfg_.schedule.beta_max);
    return train_denoiser(train_set_, vocab, arch, sched, t);
}

DiffusionModelT<float> Pipeline::train_base_excluding(int excluded_class) const {
    TrainConfig t = cfg_.train;
    t.seed = derive_seed(cfg_.seed, "train-excluded");
    auto data = train_set_.filter_class(excluded_class);
    auto vocab = make_vocab<float>(train_set_.class_tokens, cfg_.arch.cond_dim, derive_seed(cfg_.seed, "vocab"));
    Arch arch = cfg_.arch;
    arch.image_size = cfg_.dataset.image_size;
    auto sched = make_schedule(cfg_.schedule.T, schedule_kind_from_string(cfg_.schedule.kind), cfg_.schedule.beta_min,
                               cfg_.schedule.beta_max);
    return train_denoiser(data, vocab, arch, sched, t);
}

std::vector<Tensor<float>> Pipeline::attack_examples(int cls) const {
    auto sub = eval_set_.only_class(cls, static_cast<std::size_t>(cfg_.dataset.attack_examples));
    return sub.images;
}

GuidanceSpecT<float> Pipeline::eval_guidance() const {
    GuidanceSpecT<float> g;
    g.mode = GuidanceMode::Cfg;
    g.alpha = cfg_.guidance.alpha;
    return g;
}

ErasedArtifact Pipeline::run_erasure(const DiffusionModelT<float>& base, const std::string& method,
                                     const std::string& concept_token) const {
    ErasedArtifact out;
    const std::uint64_t seed = derive_seed(cfg_.seed, "erase-" + method + "-" + concept_token);
    if (method == "esd") {
        EsdConfig c = cfg_.erasure.esd;
        c.seed = seed;
        out.model = erase_esd(base, concept_token, c, &out.curve);
    } else if (method == "uce") {
        out.model = erase_uce(base, concept_token, cfg_.erasure.uce, &out.curve);
    } else if (method == "sa") {
        SaConfig c = cfg_.erasure.sa.base;
        c.seed = seed;
        auto surrogate = train_set_.only_class(cfg_.erasure.sa.surrogate_class);
        auto remember = train_set_.filter_class(class_of_token(concept_token));
        out.model = erase_sa(base, concept_token, surrogate, remember, c, &out.curve);
    } else if (method == "fmn") {
        FmnConfig c = cfg_.erasure.fmn;
        c.seed = seed;
        c.forget_tokens = {concept_token};
        c.prompt_template = template_prompt(concept_token);
        auto refs = train_set_.only_class(class_of_token(concept_token), 32);
        out.model = erase_fmn(base, refs.images, c, &out.curve);
    } else if (method == "ac") {
        AcConfig c = cfg_.erasure.ac.base;
        c.seed = seed;
        c.target_token = concept_token;
        c.anchor_token = digit_token(cfg_.erasure.ac.anchor_class);
        auto anchors = train_set_.only_class(cfg_.erasure.ac.anchor_class);
        out.model = erase_ac(base, anchors, c, &out.curve);
    } else if (method == "np") {
        out.guidance = make_np_guidance(base.table, concept_token, cfg_.erasure.np.alpha);
    } else if (method == "sld") {
        GuidanceSpecT<float> g;
        g.mode = GuidanceMode::Sld;
        g.alpha = cfg_.erasure.sld.mu;
        g.sld = cfg_.sld_params_for(cfg_.erasure.sld.variant);
        g.neg_condition = base.table.encode_prompt(bare_prompt(concept_token));
        out.guidance = g;
    } else {
        throw std::invalid_argument("unknown erasure method: " + method);
    }
    return out;
}

GuidanceSpecT<float> Pipeline::guidance_for_cell(const ErasedArtifact& erased) const {
    return erased.guidance ? *erased.guidance : eval_guidance();
}

InversionResult Pipeline::run_attack(const DiffusionModelT<float>& base, const ErasedArtifact& erased,
                                     const std::string& method, const std::string& concept_token) const {
    const int cls = class_of_token(concept_token);
    auto examples = attack_examples(cls);
    const std::uint64_t seed = derive_seed(cfg_.seed, "attack-" + method + "-" + concept_token);

    if (method == "np") {
        InversionConfig c = cfg_.inversion.np_ci;
        c.seed = seed;
        return invert_np(base, concept_token, examples, cfg_.erasure.np.alpha, c);
    }
    if (method == "sld") {
        InversionConfig c = cfg_.inversion.sld_ci;
        c.seed = seed;
        if (!erased.guidance) throw std::invalid_argument("sld attack needs the guidance artifact");
        return invert_sld(base, *erased.guidance, concept_token, examples, cfg_.guidance.alpha, c);
    }
    InversionConfig c = cfg_.inversion.ti;
    c.seed = seed;
    if (!erased.model) throw std::invalid_argument("ti attack needs an erased checkpoint");
    return invert_ti(*erased.model, examples, c);
}

double Pipeline::eval_accuracy(const DiffusionModelT<float>& model, const GuidanceSpecT<float>& guidance,
                               const std::string& prompt_token, int target_class, const Classifier& judge,
                               std::uint64_t seed, int n_samples, std::vector<Tensor<float>>* keep) const {
    return concept_accuracy(model, guidance, prompt_token, target_class, judge, n_samples, seed, keep);
}

EvalReport Pipeline::full_matrix(const DiffusionModelT<float>& base, const Classifier& judge,
                                 const std::string& outdir) const {
    namespace fs = std::filesystem;
    fs::create_directories(outdir);
    EvalReport rep;
    rep.config_echo = resolved_config_json(cfg_);

    auto base_copy = base;  // hash access is non-const
    const int n = cfg_.eval.n_samples;

    auto record = [&](const std::string& concept_token, const std::string& method, const std::string& stage,
                      double acc, std::uint64_t seed, const std::string& grid, const std::string& skip = "") {
        EvalRecord r;
        r.concept_token = concept_token;
        r.method = method;
        r.stage = stage;
        r.accuracy = acc;
        r.n_samples = n;
        r.seed = seed;
        r.sample_grid = grid;
        r.skip_reason = skip;
        rep.records.push_back(std::move(r));
    };

    auto grid_path = [&](const std::string& concept_token, const std::string& method, const std::string& stage) {
        std::string name = concept_token;
        for (auto& ch : name)
            if (ch == '<' || ch == '>' || ch == ':') ch = '_';
        return outdir + "/grid_" + name + "_" + method + "_" + stage + ".png";
    };

    for (const auto& concept_token : cfg_.eval.concepts) {
        const int cls = class_of_token(concept_token);
        {
            const std::uint64_t s = derive_seed(cfg_.seed, "eval-base-" + concept_token);
            std::vector<Tensor<float>> keep;
            const double acc = eval_accuracy(base, eval_guidance(), concept_token, cls, judge, s, n, &keep);
            const std::string gp = grid_path(concept_token, "base", "base");
            write_image_grid_png(gp, keep, cfg_.dataset.image_size, 8);
            record(concept_token, "base", "base", acc, s, gp);
        }

        for (const auto& method : cfg_.eval.methods) {
            ErasedArtifact erased;
            try {
                erased = run_erasure(base, method, concept_token);
            } catch (const std::exception& e) {
                record(concept_token, method, "erased", 0.0, 0, "", e.what());
                continue;
            }
            const DiffusionModelT<float>& erased_model = erased.model ? *erased.model : base;

            // threat-model bookkeeping: weight-free methods leave the model untouched
            if (erased.guidance) {
                auto check = base;
                if (check.weights_hash() != base_copy.weights_hash())
                    throw std::runtime_error("weight-free erasure mutated the base model");
            }

            try {
                const std::uint64_t s = derive_seed(cfg_.seed, "eval-erased-" + method + "-" + concept_token);
                std::vector<Tensor<float>> keep;
                const double acc =
                    eval_accuracy(erased_model, guidance_for_cell(erased), concept_token, cls, judge, s, n, &keep);
                const std::string gp = grid_path(concept_token, method, "erased");
                write_image_grid_png(gp, keep, cfg_.dataset.image_size, 8);
                record(concept_token, method, "erased", acc, s, gp);
            } catch (const std::exception& e) {
                record(concept_token, method, "erased", 0.0, 0, "", e.what());
            }

            InversionResult attack;
            try {
                attack = run_attack(base, erased, method, concept_token);
            } catch (const std::exception& e) {
                record(concept_token, method, "ci", 0.0, 0, "", e.what());
                record(concept_token, method, "transfer", 0.0, 0, "", "attack failed");
                continue;
            }

            try {
                const std::uint64_t s = derive_seed(cfg_.seed, "eval-ci-" + method + "-" + concept_token);
                auto attacked = install_embedding(erased_model, attack.config_echo.placeholder, attack.embedding);
                std::vector<Tensor<float>> keep;
                const double acc = eval_accuracy(attacked, guidance_for_cell(erased), attack.config_echo.placeholder,
                                                 cls, judge, s, n, &keep);
                const std::string gp = grid_path(concept_token, method, "ci");
                write_image_grid_png(gp, keep, cfg_.dataset.image_size, 8);
                record(concept_token, method, "ci", acc, s, gp);
            } catch (const std::exception& e) {
                record(concept_token, method, "ci", 0.0, 0, "", e.what());
            }

            try {
                const std::uint64_t s = derive_seed(cfg_.seed, "eval-transfer-" + method + "-" + concept_token);
                auto transferred = install_embedding(base, attack.config_echo.placeholder, attack.embedding);
                std::vector<Tensor<float>> keep;
                const double acc = eval_accuracy(transferred, eval_guidance(), attack.config_echo.placeholder, cls,
                                                 judge, s, n, &keep);
                const std::string gp = grid_path(concept_token, method, "transfer");
                write_image_grid_png(gp, keep, cfg_.dataset.image_size, 8);
                record(concept_token, method, "transfer", acc, s, gp);
            } catch (const std::exception& e) {
                record(concept_token, method, "transfer", 0.0, 0, "", e.what());
            }
        }
    }
    return rep;
}

ExclusionOutcome Pipeline::run_exclusion_study(const Classifier& judge, EvalReport* report) const {
    const int cls = cfg_.eval.exclusion_class;
    const std::string token = train_set_.class_tokens.at(static_cast<std::size_t>(cls));
    bool found = false;
    for (int l : train_set_.labels) found = found || (l == cls);
    if (!found) throw std::invalid_argument("exclusion study: class not present in the dataset");

    auto full = train_base();
    auto excluded = train_base_excluding(cls);
    // the excluded model must never have seen the class
    auto excl_data = train_set_.filter_class(cls);
    for (int l : excl_data.labels)
        if (l == cls) throw std::runtime_error("exclusion study: pipeline leaked the excluded class");

    auto examples = attack_examples(cls);
    InversionConfig ic = cfg_.inversion.ti;

    ic.seed = derive_seed(cfg_.seed, "exclusion-ti-full");
    auto r_full = invert_ti(full, examples, ic);
    ic.seed = derive_seed(cfg_.seed, "exclusion-ti-excluded");
    auto r_excl = invert_ti(excluded, examples, ic);

    ExclusionOutcome out;
    const int n = cfg_.eval.n_samples;
    {
        auto m = install_embedding(full, ic.placeholder, r_full.embedding);
        out.full_accuracy = eval_accuracy(m, eval_guidance(), ic.placeholder, cls, judge,
                                          derive_seed(cfg_.seed, "exclusion-eval-full"), n);
    }
    {
        auto m = install_embedding(excluded, ic.placeholder, r_excl.embedding);
        out.excluded_accuracy = eval_accuracy(m, eval_guidance(), ic.placeholder, cls, judge,
                                              derive_seed(cfg_.seed, "exclusion-eval-excluded"), n);
    }
    if (report) {
        EvalRecord a;
        a.concept_token = token;
        a.method = "ti-full";
        a.stage = "ci";
        a.accuracy = out.full_accuracy;
        a.n_samples = n;
        a.seed = derive_seed(cfg_.seed, "exclusion-eval-full");
        report->records.push_back(a);
        a.method = "ti-excluded";
        a.accuracy = out.excluded_accuracy;
        a.seed = derive_seed(cfg_.seed, "exclusion-eval-excluded");
        report->records.push_back(a);
    }
    return out;
}

void save_guidance_spec(const std::string& path, const GuidanceSpecT<float>& spec,
                        const std::vector<std::string>& neg_tokens) {
    json j;
    j["mode"] = to_string(spec.mode);
    j["alpha"] = spec.alpha;
    j["neg_tokens"] = neg_tokens;
    j["sld"] = {{"mu", spec.sld.mu},      {"s_S", spec.sld.s_S},       {"lambda", spec.sld.lambda_safe},
                {"s_m", spec.sld.s_m},    {"zeta_m", spec.sld.zeta_m}, {"delta", spec.sld.delta}};
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write guidance spec: " + path);
    f << j.dump(2) << "\n";
}

GuidanceSpecT<float> load_guidance_spec(const std::string& path, const TokenTableT<float>& table) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open guidance spec: " + path);
    json j;
    f >> j;
    GuidanceSpecT<float> g;
    g.mode = guidance_mode_from_string(j.at("mode").get<std::string>());
    g.alpha = j.at("alpha").get<double>();
    const auto toks = j.at("neg_tokens").get<std::vector<std::string>>();
    if (!toks.empty()) g.neg_condition = table.encode_prompt(toks);
    const auto& js = j.at("sld");
    g.sld.mu = js.at("mu").get<double>();
    g.sld.s_S = js.at("s_S").get<double>();
    g.sld.lambda_safe = js.at("lambda").get<double>();
    g.sld.s_m = js.at("s_m").get<double>();
    g.sld.zeta_m = js.at("zeta_m").get<double>();
    g.sld.delta = js.at("delta").get<int>();
    g.validate();
    return g;
}

void write_jsonl_curve(const std::string& path, const std::vector<double>& curve) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write curve: " + path);
    for (std::size_t i = 0; i < curve.size(); ++i)
        f << "{\"step\":" << i << ",\"loss\":" << curve[i] << "}\n";
}

}  // namespace elab
