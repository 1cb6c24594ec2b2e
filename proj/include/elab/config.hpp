#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "elab/classifier.hpp"
#include "elab/diffusion_model.hpp"
#include "elab/erasure.hpp"
#include "elab/guidance.hpp"
#include "elab/inversion.hpp"

namespace elab {

/// Resolved run configuration. Every field maps 1:1 to a config key; the
/// parser rejects unknown keys and names the offending one. Defaults are the
/// values below and are documented in the README.
struct RunConfig {
    std::uint64_t seed = 1234;
    std::string output_dir = "runs";

    struct Dataset {
        std::string source = "synthetic:digits";
        int image_size = 28;
        int train_per_class = 400;
        int eval_per_class = 100;
        int attack_examples = 25;
    } dataset;

    struct Schedule {
        std::string kind = "linear";
        int T = 400;
        double beta_min = 1e-4;
        double beta_max = 0.02;
    } schedule;

    Arch arch;          // image_size is overridden from dataset.image_size
    TrainConfig train;  // seed filled from the run seed

    struct Guidance {
        double alpha = 3.0;
        bool clip_denoised = true;
    } guidance;

    ClassifierConfig classifier;

    struct Erasure {
        EsdConfig esd;
        UceConfig uce;
        struct Sa {
            SaConfig base;
            int surrogate_class = 8;
        } sa;
        FmnConfig fmn;  // forget tokens/template filled per concept at run time
        struct Ac {
            AcConfig base;
            int anchor_class = 8;
        } ac;
        struct Np {
            double alpha = 7.5;
        } np;
        struct Sld {
            std::string variant = "medium";
            double mu = 3.0;
            std::map<std::string, SldParams> ladder;  // optional per-variant overrides
        } sld;
    } erasure;

    struct Inversion {
        InversionConfig ti;
        InversionConfig np_ci;
        InversionConfig sld_ci;
        Inversion() {
            sld_ci.batch = 1;  // the published attack setting for safety-guided sampling
        }
    } inversion;

    struct Eval {
        int n_samples = 200;
        std::vector<std::string> concepts = {"<digit-3>"};
        std::vector<std::string> methods = {"esd", "uce", "sa", "fmn", "ac", "np", "sld"};
        int preserve_class = 7;
        int exclusion_class = 0;
    } eval;

    /// Applies the variant ladder (built-in defaults overridden by config).
    SldParams sld_params_for(const std::string& variant) const;
};

/// Parses and validates a config file; throws with the offending key path
/// on unknown keys or bad values. A missing path loads pure defaults.
RunConfig load_config(const std::string& path);
RunConfig config_from_json_text(const std::string& text);

/// The resolved configuration, serialized back out (written next to run outputs).
std::string resolved_config_json(const RunConfig& cfg);

/// Default config text (matches a freshly constructed RunConfig).
std::string default_config_json();

}  // namespace elab
