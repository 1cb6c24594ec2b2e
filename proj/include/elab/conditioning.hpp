#pragma once

#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "elab/attention.hpp"
#include "elab/rng.hpp"
#include "elab/tensor.hpp"

namespace elab {

inline const std::string kNullToken = "<null>";
inline const std::string kPlaceholderPrefix = "<ci:";

/// Vocabulary of condition tokens with one embedding row per token.
/// Placeholder tokens (the c_* slots used by the inversion attacks) are
/// namespaced by a prefix so they can never collide with base tokens.
template <class T>
struct TokenTableT {
    int d = 0;
    std::string placeholder_prefix = kPlaceholderPrefix;
    std::vector<std::string> names;         // insertion order, stable
    std::vector<Tensor<T>> rows;            // [d] each
    std::vector<Tensor<T>> grads;           // [d] each
    std::map<std::string, int> index;
    std::set<std::string> frozen;

    TokenTableT() = default;
    explicit TokenTableT(int dim) : d(dim) {}

    bool has(const std::string& tok) const { return index.count(tok) != 0; }

    int idx(const std::string& tok) const {
        auto it = index.find(tok);
        if (it == index.end()) throw std::invalid_argument("unknown token: " + tok);
        return it->second;
    }

    Tensor<T>& row(const std::string& tok) { return rows[static_cast<std::size_t>(idx(tok))]; }
    const Tensor<T>& row(const std::string& tok) const { return rows[static_cast<std::size_t>(idx(tok))]; }
    Tensor<T>& grad(const std::string& tok) { return grads[static_cast<std::size_t>(idx(tok))]; }

    bool is_placeholder(const std::string& tok) const {
        return tok.rfind(placeholder_prefix, 0) == 0;
    }

    void add_token(const std::string& tok, const Tensor<T>& embedding) {
        if (has(tok)) throw std::invalid_argument("duplicate token: " + tok);
        if (embedding.rank() != 1 || embedding.dim(0) != d) throw std::invalid_argument("embedding dimension mismatch");
        if (is_placeholder(tok)) throw std::invalid_argument("base token may not use the placeholder prefix: " + tok);
        index[tok] = static_cast<int>(names.size());
        names.push_back(tok);
        rows.push_back(embedding);
        grads.emplace_back(std::vector<int>{d});
    }

    enum class PlaceholderInit { Random, CopyOf };

    /// Adds a trainable placeholder row. Random init is N(0, 0.01 I) from
    /// the provided seed; CopyOf duplicates an existing row exactly.
    std::string add_placeholder(const std::string& name, PlaceholderInit init, std::uint64_t seed,
                                const std::string& copy_src = "") {
        if (has(name)) throw std::invalid_argument("duplicate token: " + name);
        if (!is_placeholder(name))
            throw std::invalid_argument("placeholder name must start with '" + placeholder_prefix + "': " + name);
        Tensor<T> r({d});
        if (init == PlaceholderInit::Random) {
            Rng rng(seed);
            for (auto& x : r.v) x = static_cast<T>(rng.normal() * 0.1);  // stddev 0.1 => variance 0.01
        } else {
            r = row(copy_src);  // throws if missing
        }
        index[name] = static_cast<int>(names.size());
        names.push_back(name);
        rows.push_back(std::move(r));
        grads.emplace_back(std::vector<int>{d});
        return name;
    }

    void set_frozen(const std::string& tok, bool f) {
        idx(tok);
        if (f)
            frozen.insert(tok);
        else
            frozen.erase(tok);
    }

    void freeze_all_except(const std::vector<std::string>& keep) {
        frozen.clear();
        for (const auto& n : names) frozen.insert(n);
        for (const auto& k : keep) frozen.erase(k);
    }

    bool is_frozen(const std::string& tok) const { return frozen.count(tok) != 0; }

    /// Pure lookup: embeddings in token order. No mixing, no context.
    nn::Cond<T> encode_prompt(const std::vector<std::string>& tokens) const {
        if (tokens.empty()) throw std::invalid_argument("empty prompt");
        nn::Cond<T> c({static_cast<int>(tokens.size()), d});
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const Tensor<T>& r = row(tokens[i]);
            for (int j = 0; j < d; ++j) c.at2(static_cast<int>(i), j) = r.v[static_cast<std::size_t>(j)];
        }
        return c;
    }

    nn::Cond<T> null_condition() const { return encode_prompt({kNullToken}); }

    void zero_grads() {
        for (auto& g : grads) g.zero();
    }

    /// Hash over every row except placeholders (the threat-model check).
    std::uint64_t non_placeholder_hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (is_placeholder(names[i])) continue;
            h = fnv1a_bytes(names[i].data(), names[i].size(), h);
            h = tensor_hash(rows[i], h);
        }
        return h;
    }
};

/// Builds the toy vocabulary: null token, the prompt-template words and one
/// token per class name. Rows are N(0,1) draws from the seed.
template <class T>
TokenTableT<T> make_vocab(const std::vector<std::string>& class_tokens, int d, std::uint64_t seed) {
    TokenTableT<T> t(d);
    Rng rng(seed);
    auto add_random = [&](const std::string& name) {
        Tensor<T> r({d});
        for (auto& x : r.v) x = static_cast<T>(rng.normal());
        t.add_token(name, r);
    };
    add_random(kNullToken);
    add_random("a");
    add_random("photo");
    add_random("of");
    for (const auto& c : class_tokens) add_random(c);
    return t;
}

/// "a photo of <tok>" — the prompt form used for class concepts.
inline std::vector<std::string> template_prompt(const std::string& tok) {
    return {"a", "photo", "of", tok};
}

inline std::vector<std::string> bare_prompt(const std::string& tok) { return {tok}; }

}  // namespace elab
