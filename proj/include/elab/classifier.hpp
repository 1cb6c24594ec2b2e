#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "elab/adam.hpp"
#include "elab/dataset.hpp"
#include "elab/nn_layers.hpp"
#include "elab/rng.hpp"

namespace elab {

/// Small convolutional judge for generated digits. Trained with light noise
/// augmentation so slightly imperfect samples are scored fairly.
template <class T>
struct ClassifierT {
    int num_classes = 10;
    int image_size = 28;
    nn::Conv2d<T> c1, c2, c3;
    nn::Silu<T> a1, a2, a3;
    nn::Linear<T> fc;

    ClassifierT() = default;
    ClassifierT(int num_classes_, int image_size_)
        : num_classes(num_classes_),
          image_size(image_size_),
          c1(1, 12, 3, 1, 1),
          c2(12, 24, 3, 2, 1),
          c3(24, 32, 3, 2, 1),
          fc(32, num_classes_) {}

    void init(std::uint64_t seed) {
        Rng rng(seed);
        c1.init(rng);
        c2.init(rng);
        c3.init(rng);
        fc.init(rng);
    }

    struct Cache {
        typename nn::Conv2d<T>::Cache k1, k2, k3;
        typename nn::Silu<T>::Cache s1, s2, s3;
        typename nn::Linear<T>::Cache cfc;
        int B = 0, ph = 0, pw = 0;
    };

    /// x: [B, S, S, 1] -> logits [B, num_classes]
    Tensor<T> forward(const Tensor<T>& x, Cache& c) const {
        Tensor<T> h = a1.forward(c1.forward(x, c.k1), c.s1);
        h = a2.forward(c2.forward(h, c.k2), c.s2);
        h = a3.forward(c3.forward(h, c.k3), c.s3);
        const int B = h.dim(0), H = h.dim(1), W = h.dim(2), C = h.dim(3);
        c.B = B;
        c.ph = H;
        c.pw = W;
        Tensor<T> pooled({B, C});
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const T* p = &h.at4(b, i, j, 0);
                    for (int ch = 0; ch < C; ++ch) pooled.at2(b, ch) += p[ch] / static_cast<T>(H * W);
                }
        return fc.forward(pooled, c.cfc);
    }

    void backward(const Tensor<T>& glogits, const Cache& c) {
        Tensor<T> gpooled = fc.backward(glogits, c.cfc);
        const int B = c.B, H = c.ph, W = c.pw, C = gpooled.dim(1);
        Tensor<T> gh({B, H, W, C});
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    T* p = &gh.at4(b, i, j, 0);
                    for (int ch = 0; ch < C; ++ch) p[ch] = gpooled.at2(b, ch) / static_cast<T>(H * W);
                }
        Tensor<T> g = a3.backward(gh, c.s3);
        g = c3.backward(g, c.k3);
        g = a2.backward(g, c.s2);
        g = c2.backward(g, c.k2);
        g = a1.backward(g, c.s1);
        c1.backward(g, c.k1);
    }

    void visit_params(const nn::ParamFn<T>& fn) {
        c1.visit("c1", fn);
        c2.visit("c2", fn);
        c3.visit("c3", fn);
        fc.visit("fc", fn);
    }

    void zero_grads() {
        visit_params([](const std::string&, Tensor<T>&, Tensor<T>& g) { g.zero(); });
    }

    std::vector<int> predict(const Tensor<T>& x) const {
        Cache c;
        Tensor<T> logits = forward(x, c);
        std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
        for (int b = 0; b < logits.dim(0); ++b) {
            int best = 0;
            for (int k = 1; k < num_classes; ++k)
                if (logits.at2(b, k) > logits.at2(b, best)) best = k;
            out[static_cast<std::size_t>(b)] = best;
        }
        return out;
    }
};

struct ClassifierConfig {
    int epochs = 8;
    int batch = 32;
    double lr = 1e-3;
    double noise_aug = 0.10;
    std::uint64_t seed = 0;
};

using Classifier = ClassifierT<float>;

/// Cross-entropy training on labeled images. Deterministic in the seed.
inline Classifier train_classifier(const LabeledImages& data, const ClassifierConfig& cfg) {
    int max_label = -1;
    for (int l : data.labels) max_label = std::max(max_label, l);
    if (max_label < 1) throw std::invalid_argument("train_classifier: need at least 2 classes");
    const int K = static_cast<int>(data.class_tokens.size());
    const int S = data.image_size;

    Classifier clf(K, S);
    clf.init(derive_seed(cfg.seed, "clf-init"));
    Rng rng(derive_seed(cfg.seed, "clf-train"));
    Adam<float> opt(cfg.lr);
    std::vector<ParamRef<float>> params;
    clf.visit_params([&](const std::string& n, Tensor<float>& w, Tensor<float>& g) { params.push_back({n, &w, &g}); });

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t start = 0; start + cfg.batch <= order.size(); start += cfg.batch) {
            const int B = cfg.batch;
            Tensor<float> x({B, S, S, 1});
            std::vector<int> y(static_cast<std::size_t>(B));
            for (int b = 0; b < B; ++b) {
                const std::size_t id = order[start + static_cast<std::size_t>(b)];
                const auto& img = data.images[id];
                y[static_cast<std::size_t>(b)] = data.labels[id];
                const bool aug = rng.uniform() < 0.5;
                for (int p = 0; p < S * S; ++p) {
                    float v = img.v[static_cast<std::size_t>(p)];
                    if (aug) v += static_cast<float>(rng.normal() * cfg.noise_aug);
                    x.v[static_cast<std::size_t>(b) * S * S + static_cast<std::size_t>(p)] =
                        std::min(1.0f, std::max(-1.0f, v));
                }
            }
            typename Classifier::Cache cache;
            Tensor<float> logits = clf.forward(x, cache);
            // softmax cross-entropy gradient
            Tensor<float> glog(logits.shape);
            for (int b = 0; b < B; ++b) {
                float mx = logits.at2(b, 0);
                for (int k = 1; k < K; ++k) mx = std::max(mx, logits.at2(b, k));
                float z = 0;
                for (int k = 0; k < K; ++k) z += std::exp(logits.at2(b, k) - mx);
                for (int k = 0; k < K; ++k) {
                    const float p = std::exp(logits.at2(b, k) - mx) / z;
                    glog.at2(b, k) = (p - (k == y[static_cast<std::size_t>(b)] ? 1.0f : 0.0f)) / static_cast<float>(B);
                }
            }
            clf.zero_grads();
            clf.backward(glog, cache);
            opt.step(params);
        }
    }
    return clf;
}

inline void save_classifier(const std::string& path, Classifier& clf) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write classifier: " + path);
    const char magic[8] = {'E', 'L', 'A', 'B', 'C', 'L', 'F', '1'};
    f.write(magic, 8);
    const std::int32_t k = clf.num_classes, s = clf.image_size;
    f.write(reinterpret_cast<const char*>(&k), 4);
    f.write(reinterpret_cast<const char*>(&s), 4);
    clf.visit_params([&](const std::string&, Tensor<float>& w, Tensor<float>&) {
        f.write(reinterpret_cast<const char*>(w.v.data()), static_cast<std::streamsize>(w.v.size() * sizeof(float)));
    });
    if (!f) throw std::runtime_error("classifier write failed: " + path);
}

inline Classifier load_classifier(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open classifier: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::string(magic, 8) != "ELABCLF1") throw std::runtime_error("bad classifier file: " + path);
    std::int32_t k = 0, s = 0;
    f.read(reinterpret_cast<char*>(&k), 4);
    f.read(reinterpret_cast<char*>(&s), 4);
    Classifier clf(k, s);
    clf.visit_params([&](const std::string&, Tensor<float>& w, Tensor<float>&) {
        f.read(reinterpret_cast<char*>(w.v.data()), static_cast<std::streamsize>(w.v.size() * sizeof(float)));
    });
    if (!f) throw std::runtime_error("classifier payload truncated: " + path);
    return clf;
}

inline double classifier_accuracy(const Classifier& clf, const LabeledImages& data) {
    const int S = data.image_size;
    std::size_t correct = 0;
    const int chunk = 64;
    for (std::size_t start = 0; start < data.size(); start += chunk) {
        const int B = static_cast<int>(std::min<std::size_t>(chunk, data.size() - start));
        Tensor<float> x({B, S, S, 1});
        for (int b = 0; b < B; ++b)
            for (int p = 0; p < S * S; ++p)
                x.v[static_cast<std::size_t>(b) * S * S + static_cast<std::size_t>(p)] =
                    data.images[start + static_cast<std::size_t>(b)].v[static_cast<std::size_t>(p)];
        auto pred = clf.predict(x);
        for (int b = 0; b < B; ++b)
            if (pred[static_cast<std::size_t>(b)] == data.labels[start + static_cast<std::size_t>(b)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace elab
