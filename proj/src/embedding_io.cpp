#include "elab/embedding_io.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace elab {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'E', 'L', 'A', 'B', 'E', 'M', 'B', '1'};
}

void save_embedding(const std::string& path, const EmbeddingExport& e) {
    json h;
    h["token"] = e.token;
    h["attack"] = e.attack;
    std::ostringstream os;
    os << std::hex << e.source_checkpoint;
    h["source_checkpoint"] = os.str();
    h["dim"] = e.embedding.dim(0);
    const std::string hs = h.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write embedding: " + path);
    f.write(kMagic, 8);
    const std::uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    f.write(reinterpret_cast<const char*>(e.embedding.v.data()),
            static_cast<std::streamsize>(e.embedding.v.size() * sizeof(float)));
    if (!f) throw std::runtime_error("embedding write failed: " + path);
}

EmbeddingExport load_embedding(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open embedding: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::string(magic, 8) != std::string(kMagic, 8)) throw std::runtime_error("bad embedding magic: " + path);
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    const json h = json::parse(hs);

    EmbeddingExport e;
    e.token = h.at("token").get<std::string>();
    e.attack = h.at("attack").get<std::string>();
    e.source_checkpoint = std::stoull(h.at("source_checkpoint").get<std::string>(), nullptr, 16);
    const int d = h.at("dim").get<int>();
    e.embedding = Tensor<float>({d});
    f.read(reinterpret_cast<char*>(e.embedding.v.data()), static_cast<std::streamsize>(d * sizeof(float)));
    if (!f) throw std::runtime_error("embedding payload truncated: " + path);
    return e;
}

}  // namespace elab
