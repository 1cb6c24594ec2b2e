#include "elab/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace elab {

using nlohmann::json;

namespace {

/// Pulls a scalar out of `j`, enforcing that every key consumed is known.
/// The walker marks visited keys; leftovers are reported by full path.
struct Walker {
    const json& j;
    std::string path;
    std::set<std::string> seen;

    Walker(const json& j_, std::string path_) : j(j_), path(std::move(path_)) {
        if (!j.is_object()) throw std::invalid_argument("config: " + (path.empty() ? "<root>" : path) + " must be an object");
    }

    bool has(const std::string& key) {
        return j.contains(key);
    }

    template <class T>
    void get(const std::string& key, T& out) {
        if (!j.contains(key)) return;
        seen.insert(key);
        try {
            out = j.at(key).get<T>();
        } catch (const json::exception&) {
            throw std::invalid_argument("config: bad value type at " + join(key));
        }
    }

    json sub(const std::string& key) {
        seen.insert(key);
        return j.contains(key) ? j.at(key) : json::object();
    }

    std::string join(const std::string& key) const { return path.empty() ? key : path + "." + key; }

    void finish() const {
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!seen.count(it.key())) throw std::invalid_argument("unknown config key: " + join(it.key()));
    }
};

void parse_sld_params(const json& j, const std::string& path, SldParams& p) {
    Walker w(j, path);
    w.get("s_S", p.s_S);
    w.get("delta", p.delta);
    w.get("lambda", p.lambda_safe);
    w.get("s_m", p.s_m);
    w.get("zeta_m", p.zeta_m);
    w.finish();
    p.validate();
}

void parse_inversion(const json& j, const std::string& path, InversionConfig& c) {
    Walker w(j, path);
    w.get("steps", c.steps);
    w.get("lr", c.lr);
    w.get("batch", c.batch);
    w.get("placeholder", c.placeholder);
    w.get("window_m", c.window_m);
    w.get("window_n", c.window_n);
    w.get("window_k", c.window_k);
    w.get("memory_cap", c.memory_cap);
    w.finish();
}

}  // namespace

SldParams RunConfig::sld_params_for(const std::string& variant) const {
    auto it = erasure.sld.ladder.find(variant);
    if (it != erasure.sld.ladder.end()) {
        SldParams p = it->second;
        p.mu = erasure.sld.mu;
        return p;
    }
    return sld_variant(sld_variant_from_string(variant), erasure.sld.mu);
}

RunConfig config_from_json_text(const std::string& text) {
    RunConfig cfg;
    const json root = json::parse(text);
    Walker w(root, "");
    w.get("seed", cfg.seed);
    w.get("output_dir", cfg.output_dir);

    {
        Walker d(w.sub("dataset"), "dataset");
        d.get("source", cfg.dataset.source);
        d.get("image_size", cfg.dataset.image_size);
        d.get("train_per_class", cfg.dataset.train_per_class);
        d.get("eval_per_class", cfg.dataset.eval_per_class);
        d.get("attack_examples", cfg.dataset.attack_examples);
        d.finish();
        if (cfg.dataset.source != "synthetic:digits")
            throw std::invalid_argument("config: dataset.source must be 'synthetic:digits'");
    }
    {
        Walker s(w.sub("schedule"), "schedule");
        s.get("kind", cfg.schedule.kind);
        s.get("T", cfg.schedule.T);
        s.get("beta_min", cfg.schedule.beta_min);
        s.get("beta_max", cfg.schedule.beta_max);
        s.finish();
        schedule_kind_from_string(cfg.schedule.kind);
    }
    {
        Walker a(w.sub("arch"), "arch");
        a.get("base_channels", cfg.arch.base_channels);
        a.get("mid_channels", cfg.arch.mid_channels);
        a.get("cond_dim", cfg.arch.cond_dim);
        a.get("time_dim", cfg.arch.time_dim);
        a.get("attn_dim", cfg.arch.attn_dim);
        a.get("gn_groups", cfg.arch.gn_groups);
        a.get("attn_full_res", cfg.arch.attn_full_res);
        a.finish();
    }
    {
        Walker t(w.sub("train"), "train");
        t.get("epochs", cfg.train.epochs);
        t.get("batch", cfg.train.batch);
        t.get("lr", cfg.train.lr);
        t.get("lr_final_frac", cfg.train.lr_final_frac);
        t.get("ema_decay", cfg.train.ema_decay);
        t.get("p_uncond", cfg.train.p_uncond);
        t.get("p_bare", cfg.train.p_bare);
        t.finish();
    }
    {
        Walker g(w.sub("guidance"), "guidance");
        g.get("alpha", cfg.guidance.alpha);
        g.get("clip_denoised", cfg.guidance.clip_denoised);
        g.finish();
    }
    {
        Walker c(w.sub("classifier"), "classifier");
        c.get("epochs", cfg.classifier.epochs);
        c.get("batch", cfg.classifier.batch);
        c.get("lr", cfg.classifier.lr);
        c.get("noise_aug", cfg.classifier.noise_aug);
        c.finish();
    }
    {
        const json je = w.sub("erasure");
        Walker e(je, "erasure");
        {
            Walker x(e.sub("esd"), "erasure.esd");
            std::string variant = "x";
            x.get("eta", cfg.erasure.esd.eta);
            x.get("variant", variant);
            x.get("steps", cfg.erasure.esd.steps);
            x.get("lr", cfg.erasure.esd.lr);
            x.get("batch", cfg.erasure.esd.batch);
            x.get("pool", cfg.erasure.esd.pool);
            x.get("pool_alpha", cfg.erasure.esd.pool_alpha);
            x.finish();
            cfg.erasure.esd.variant = esd_variant_from_string(variant);
        }
        {
            Walker x(e.sub("uce"), "erasure.uce");
            x.get("anchor", cfg.erasure.uce.anchor_token);
            x.get("ridge", cfg.erasure.uce.ridge);
            x.finish();
        }
        {
            Walker x(e.sub("sa"), "erasure.sa");
            x.get("lambda_ewc", cfg.erasure.sa.base.lambda_ewc);
            x.get("fisher_samples", cfg.erasure.sa.base.fisher_samples);
            x.get("steps", cfg.erasure.sa.base.steps);
            x.get("lr", cfg.erasure.sa.base.lr);
            x.get("batch", cfg.erasure.sa.base.batch);
            x.get("replay_batch", cfg.erasure.sa.base.replay_batch);
            x.get("surrogate_class", cfg.erasure.sa.surrogate_class);
            x.finish();
        }
        {
            Walker x(e.sub("fmn"), "erasure.fmn");
            x.get("steps", cfg.erasure.fmn.steps);
            x.get("lr", cfg.erasure.fmn.lr);
            x.get("batch", cfg.erasure.fmn.batch);
            x.finish();
        }
        {
            Walker x(e.sub("ac"), "erasure.ac");
            std::string variant = "noise_based", scope = "cross_attention";
            x.get("variant", variant);
            x.get("scope", scope);
            x.get("anchor_class", cfg.erasure.ac.anchor_class);
            x.get("w_t", cfg.erasure.ac.base.w_t);
            x.get("regularize_anchor", cfg.erasure.ac.base.regularize_anchor);
            x.get("steps", cfg.erasure.ac.base.steps);
            x.get("lr", cfg.erasure.ac.base.lr);
            x.get("batch", cfg.erasure.ac.base.batch);
            x.finish();
            cfg.erasure.ac.base.variant = ac_variant_from_string(variant);
            cfg.erasure.ac.base.scope = ac_scope_from_string(scope);
        }
        {
            Walker x(e.sub("np"), "erasure.np");
            x.get("alpha", cfg.erasure.np.alpha);
            x.finish();
        }
        {
            const json js = e.sub("sld");
            Walker x(js, "erasure.sld");
            x.get("variant", cfg.erasure.sld.variant);
            x.get("mu", cfg.erasure.sld.mu);
            const json ladder = x.sub("ladder");
            for (auto it = ladder.begin(); it != ladder.end(); ++it) {
                sld_variant_from_string(it.key());
                SldParams p = sld_variant(sld_variant_from_string(it.key()), cfg.erasure.sld.mu);
                parse_sld_params(it.value(), "erasure.sld.ladder." + it.key(), p);
                cfg.erasure.sld.ladder[it.key()] = p;
            }
            x.finish();
            sld_variant_from_string(cfg.erasure.sld.variant);
        }
        e.finish();
    }
    {
        const json ji = w.sub("inversion");
        Walker i(ji, "inversion");
        parse_inversion(i.sub("ti"), "inversion.ti", cfg.inversion.ti);
        parse_inversion(i.sub("np_ci"), "inversion.np_ci", cfg.inversion.np_ci);
        parse_inversion(i.sub("sld_ci"), "inversion.sld_ci", cfg.inversion.sld_ci);
        i.finish();
    }
    {
        Walker v(w.sub("eval"), "eval");
        v.get("n_samples", cfg.eval.n_samples);
        v.get("concepts", cfg.eval.concepts);
        v.get("methods", cfg.eval.methods);
        v.get("preserve_class", cfg.eval.preserve_class);
        v.get("exclusion_class", cfg.eval.exclusion_class);
        v.finish();
    }
    w.finish();

    cfg.arch.image_size = cfg.dataset.image_size;
    cfg.train.seed = cfg.seed;
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return config_from_json_text(os.str());
}

std::string resolved_config_json(const RunConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["output_dir"] = cfg.output_dir;
    j["dataset"] = {{"source", cfg.dataset.source},
                    {"image_size", cfg.dataset.image_size},
                    {"train_per_class", cfg.dataset.train_per_class},
                    {"eval_per_class", cfg.dataset.eval_per_class},
                    {"attack_examples", cfg.dataset.attack_examples}};
    j["schedule"] = {{"kind", cfg.schedule.kind},
                     {"T", cfg.schedule.T},
                     {"beta_min", cfg.schedule.beta_min},
                     {"beta_max", cfg.schedule.beta_max}};
    j["arch"] = {{"base_channels", cfg.arch.base_channels}, {"mid_channels", cfg.arch.mid_channels},
                 {"cond_dim", cfg.arch.cond_dim},           {"time_dim", cfg.arch.time_dim},
                 {"attn_dim", cfg.arch.attn_dim},           {"gn_groups", cfg.arch.gn_groups},
                 {"attn_full_res", cfg.arch.attn_full_res}};
    j["train"] = {{"epochs", cfg.train.epochs},   {"batch", cfg.train.batch},
                  {"lr", cfg.train.lr},           {"lr_final_frac", cfg.train.lr_final_frac},
                  {"ema_decay", cfg.train.ema_decay}, {"p_uncond", cfg.train.p_uncond},
                  {"p_bare", cfg.train.p_bare}};
    j["guidance"] = {{"alpha", cfg.guidance.alpha}, {"clip_denoised", cfg.guidance.clip_denoised}};
    j["classifier"] = {{"epochs", cfg.classifier.epochs},
                       {"batch", cfg.classifier.batch},
                       {"lr", cfg.classifier.lr},
                       {"noise_aug", cfg.classifier.noise_aug}};

    json ladder = json::object();
    for (const auto& [name, p] : cfg.erasure.sld.ladder)
        ladder[name] = {{"s_S", p.s_S}, {"delta", p.delta}, {"lambda", p.lambda_safe}, {"s_m", p.s_m}, {"zeta_m", p.zeta_m}};
    j["erasure"] = {
        {"esd",
         {{"eta", cfg.erasure.esd.eta},
          {"variant", cfg.erasure.esd.variant == EsdVariant::CrossAttention ? "x" : "u"},
          {"steps", cfg.erasure.esd.steps},
          {"lr", cfg.erasure.esd.lr},
          {"batch", cfg.erasure.esd.batch},
          {"pool", cfg.erasure.esd.pool},
          {"pool_alpha", cfg.erasure.esd.pool_alpha}}},
        {"uce", {{"anchor", cfg.erasure.uce.anchor_token}, {"ridge", cfg.erasure.uce.ridge}}},
        {"sa",
         {{"lambda_ewc", cfg.erasure.sa.base.lambda_ewc},
          {"fisher_samples", cfg.erasure.sa.base.fisher_samples},
          {"steps", cfg.erasure.sa.base.steps},
          {"lr", cfg.erasure.sa.base.lr},
          {"batch", cfg.erasure.sa.base.batch},
          {"replay_batch", cfg.erasure.sa.base.replay_batch},
          {"surrogate_class", cfg.erasure.sa.surrogate_class}}},
        {"fmn", {{"steps", cfg.erasure.fmn.steps}, {"lr", cfg.erasure.fmn.lr}, {"batch", cfg.erasure.fmn.batch}}},
        {"ac",
         {{"variant", cfg.erasure.ac.base.variant == AcVariant::NoiseBased ? "noise_based" : "model_based"},
          {"scope",
           cfg.erasure.ac.base.scope == AcScope::CrossAttention
               ? "cross_attention"
               : (cfg.erasure.ac.base.scope == AcScope::Embedding ? "embedding" : "full")},
          {"anchor_class", cfg.erasure.ac.anchor_class},
          {"w_t", cfg.erasure.ac.base.w_t},
          {"regularize_anchor", cfg.erasure.ac.base.regularize_anchor},
          {"steps", cfg.erasure.ac.base.steps},
          {"lr", cfg.erasure.ac.base.lr},
          {"batch", cfg.erasure.ac.base.batch}}},
        {"np", {{"alpha", cfg.erasure.np.alpha}}},
        {"sld", {{"variant", cfg.erasure.sld.variant}, {"mu", cfg.erasure.sld.mu}, {"ladder", ladder}}}};

    auto inv = [](const InversionConfig& c) {
        return json{{"steps", c.steps},       {"lr", c.lr},
                    {"batch", c.batch},       {"placeholder", c.placeholder},
                    {"window_m", c.window_m}, {"window_n", c.window_n},
                    {"window_k", c.window_k}, {"memory_cap", c.memory_cap}};
    };
    j["inversion"] = {
        {"ti", inv(cfg.inversion.ti)}, {"np_ci", inv(cfg.inversion.np_ci)}, {"sld_ci", inv(cfg.inversion.sld_ci)}};
    j["eval"] = {{"n_samples", cfg.eval.n_samples},
                 {"concepts", cfg.eval.concepts},
                 {"methods", cfg.eval.methods},
                 {"preserve_class", cfg.eval.preserve_class},
                 {"exclusion_class", cfg.eval.exclusion_class}};
    return j.dump(2);
}

std::string default_config_json() { return resolved_config_json(RunConfig{}); }

}  // namespace elab
