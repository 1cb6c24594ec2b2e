#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "elab/classifier.hpp"
#include "elab/diffusion_model.hpp"
#include "elab/guidance.hpp"
#include "elab/sampler.hpp"

namespace elab {

/// Generates n samples prompted with the token (template form) under the
/// given guidance and returns the fraction the judge classifies as
/// target_class. Deterministic in (model, spec, seed, n).
inline double concept_accuracy(const DiffusionModelT<float>& m, const GuidanceSpecT<float>& spec,
                               const std::string& token, int target_class, const Classifier& clf, int n,
                               std::uint64_t seed, std::vector<Tensor<float>>* keep_samples = nullptr) {
    if (!m.table.has(token)) throw std::invalid_argument("concept_accuracy: unknown token " + token);
    const nn::Cond<float> prompt = m.table.encode_prompt(template_prompt(token));
    const int S = m.net.arch.image_size;
    std::size_t hits = 0;
    const int chunk = 64;
    for (int start = 0; start < n; start += chunk) {
        const int B = std::min(chunk, n - start);
        std::vector<std::uint64_t> seeds(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b)
            seeds[static_cast<std::size_t>(b)] = derive_seed(seed, "eval-sample", static_cast<std::uint64_t>(start + b));
        Tensor<float> x = sample_batch(m, spec, prompt, seeds, m.sched.T);
        clamp_unit(x);
        auto pred = clf.predict(x);
        for (int b = 0; b < B; ++b) {
            if (pred[static_cast<std::size_t>(b)] == target_class) ++hits;
            if (keep_samples && keep_samples->size() < 64) {
                Tensor<float> img({S, S, 1});
                for (int p = 0; p < S * S; ++p)
                    img.v[static_cast<std::size_t>(p)] = x.v[static_cast<std::size_t>(b) * S * S + p];
                keep_samples->push_back(std::move(img));
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace elab
