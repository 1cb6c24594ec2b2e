#pragma once

#include <optional>
#include <string>
#include <vector>

#include "elab/checkpoint.hpp"
#include "elab/classifier.hpp"
#include "elab/config.hpp"
#include "elab/dataset.hpp"
#include "elab/embedding_io.hpp"
#include "elab/eval.hpp"
#include "elab/inversion.hpp"
#include "elab/report.hpp"

namespace elab {

/// Output of a single erasure run: either a sanitized checkpoint (weight
/// methods) or a guidance spec (the weight-free methods never produce one).
struct ErasedArtifact {
    std::optional<DiffusionModelT<float>> model;
    std::optional<GuidanceSpecT<float>> guidance;
    std::vector<double> curve;
};

struct ExclusionOutcome {
    double full_accuracy = 0.0;
    double excluded_accuracy = 0.0;
    double gap() const { return full_accuracy - excluded_accuracy; }
};

/// Deterministic experiment orchestration: datasets, stage seeds, the
/// erase/attack/evaluate matrix and the class-exclusion study. All stage
/// randomness fans out from cfg.seed by stage name.
class Pipeline {
   public:
    explicit Pipeline(RunConfig cfg);

    const RunConfig& config() const { return cfg_; }
    const LabeledImages& train_set() const { return train_set_; }
    const LabeledImages& eval_set() const { return eval_set_; }

    int class_of_token(const std::string& token) const;

    Classifier train_judge() const;
    DiffusionModelT<float> train_base() const;
    DiffusionModelT<float> train_base_excluding(int excluded_class) const;

    /// Held-out images of a class, the attacker's example set.
    std::vector<Tensor<float>> attack_examples(int cls) const;

    GuidanceSpecT<float> eval_guidance() const;  // plain CFG at the configured alpha

    ErasedArtifact run_erasure(const DiffusionModelT<float>& base, const std::string& method,
                               const std::string& concept_token) const;

    InversionResult run_attack(const DiffusionModelT<float>& base, const ErasedArtifact& erased,
                               const std::string& method, const std::string& concept_token) const;

    /// Samples with the cell's guidance and judges the named token.
    double eval_accuracy(const DiffusionModelT<float>& model, const GuidanceSpecT<float>& guidance,
                         const std::string& prompt_token, int target_class, const Classifier& judge,
                         std::uint64_t seed, int n_samples, std::vector<Tensor<float>>* keep = nullptr) const;

    /// The full (concept x method) matrix with stages erased / ci / transfer;
    /// per-cell failures are recorded as skips, never fatal.
    EvalReport full_matrix(const DiffusionModelT<float>& base, const Classifier& judge,
                           const std::string& outdir) const;

    ExclusionOutcome run_exclusion_study(const Classifier& judge, EvalReport* report = nullptr) const;

    /// Guidance used when sampling from an erased artifact with an arbitrary
    /// prompt token (identity for weight methods, NP/SLD spec otherwise).
    GuidanceSpecT<float> guidance_for_cell(const ErasedArtifact& erased) const;

   private:
    RunConfig cfg_;
    LabeledImages train_set_;
    LabeledImages eval_set_;
};

/// Serializes a guidance spec as tokens + parameters (re-encoded against a
/// checkpoint's table at load time).
void save_guidance_spec(const std::string& path, const GuidanceSpecT<float>& spec,
                        const std::vector<std::string>& neg_tokens);
GuidanceSpecT<float> load_guidance_spec(const std::string& path, const TokenTableT<float>& table);

void write_jsonl_curve(const std::string& path, const std::vector<double>& curve);

}  // namespace elab
