#include "elab/checkpoint.hpp"

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

namespace elab {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'E', 'L', 'A', 'B', 'C', 'K', 'P', '1'};

std::string seed_hex(std::uint64_t s) {
    std::ostringstream os;
    os << std::hex << s;
    return os.str();
}

std::uint64_t seed_from_hex(const std::string& s) { return std::stoull(s, nullptr, 16); }

json arch_to_json(const Arch& a) {
    return json{{"image_size", a.image_size},     {"in_channels", a.in_channels},
                {"base_channels", a.base_channels}, {"mid_channels", a.mid_channels},
                {"cond_dim", a.cond_dim},         {"time_dim", a.time_dim},
                {"attn_dim", a.attn_dim},         {"gn_groups", a.gn_groups},
                {"attn_full_res", a.attn_full_res}};
}

Arch arch_from_json(const json& j) {
    Arch a;
    a.image_size = j.at("image_size").get<int>();
    a.in_channels = j.at("in_channels").get<int>();
    a.base_channels = j.at("base_channels").get<int>();
    a.mid_channels = j.at("mid_channels").get<int>();
    a.cond_dim = j.at("cond_dim").get<int>();
    a.time_dim = j.at("time_dim").get<int>();
    a.attn_dim = j.at("attn_dim").get<int>();
    a.gn_groups = j.at("gn_groups").get<int>();
    a.attn_full_res = j.at("attn_full_res").get<bool>();
    return a;
}

}  // namespace

void save_checkpoint(const std::string& path, DiffusionModelT<float>& model) {
    json header;
    header["arch"] = arch_to_json(model.net.arch);
    header["schedule"] = {{"kind", to_string(model.sched.kind)},
                          {"T", model.sched.T},
                          {"beta_min", model.sched.beta_min},
                          {"beta_max", model.sched.beta_max}};
    header["seed"] = seed_hex(model.seed);
    header["train"] = {{"epochs", model.train_echo.epochs}, {"batch", model.train_echo.batch},
                       {"lr", model.train_echo.lr},         {"lr_final_frac", model.train_echo.lr_final_frac},
                       {"ema_decay", model.train_echo.ema_decay},
                       {"p_uncond", model.train_echo.p_uncond},
                       {"p_bare", model.train_echo.p_bare}, {"seed", seed_hex(model.train_echo.seed)}};

    json tensors = json::array();
    std::vector<const Tensor<float>*> payload;
    model.net.visit_params([&](const std::string& n, Tensor<float>& w, Tensor<float>&) {
        tensors.push_back({{"name", n}, {"shape", w.shape}});
        payload.push_back(&w);
    });
    for (std::size_t i = 0; i < model.table.names.size(); ++i) {
        tensors.push_back({{"name", "embedding." + model.table.names[i]}, {"shape", model.table.rows[i].shape}});
        payload.push_back(&model.table.rows[i]);
    }
    header["tensors"] = tensors;

    json tbl;
    tbl["d"] = model.table.d;
    tbl["placeholder_prefix"] = model.table.placeholder_prefix;
    tbl["tokens"] = model.table.names;
    tbl["frozen"] = std::vector<std::string>(model.table.frozen.begin(), model.table.frozen.end());
    header["table"] = tbl;

    const std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write(kMagic, 8);
    const std::uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto* t : payload)
        f.write(reinterpret_cast<const char*>(t->v.data()), static_cast<std::streamsize>(t->v.size() * sizeof(float)));
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

DiffusionModelT<float> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::string(magic, 8) != std::string(kMagic, 8)) throw std::runtime_error("bad checkpoint magic: " + path);
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    const json header = json::parse(hs);

    const Arch arch = arch_from_json(header.at("arch"));
    const auto& js = header.at("schedule");
    const NoiseSchedule sched = make_schedule(js.at("T").get<int>(), schedule_kind_from_string(js.at("kind")),
                                              js.at("beta_min").get<double>(), js.at("beta_max").get<double>());

    const auto& jt = header.at("table");
    TokenTableT<float> table(jt.at("d").get<int>());
    table.placeholder_prefix = jt.at("placeholder_prefix").get<std::string>();

    DiffusionModelT<float> m(arch, table, sched);
    m.seed = seed_from_hex(header.at("seed").get<std::string>());
    const auto& jtr = header.at("train");
    m.train_echo.epochs = jtr.at("epochs").get<int>();
    m.train_echo.batch = jtr.at("batch").get<int>();
    m.train_echo.lr = jtr.at("lr").get<double>();
    m.train_echo.lr_final_frac = jtr.at("lr_final_frac").get<double>();
    m.train_echo.ema_decay = jtr.at("ema_decay").get<double>();
    m.train_echo.p_uncond = jtr.at("p_uncond").get<double>();
    m.train_echo.p_bare = jtr.at("p_bare").get<double>();
    m.train_echo.seed = seed_from_hex(jtr.at("seed").get<std::string>());

    // register table rows directly (placeholder names bypass add_token checks)
    for (const auto& name : jt.at("tokens").get<std::vector<std::string>>()) {
        m.table.index[name] = static_cast<int>(m.table.names.size());
        m.table.names.push_back(name);
        m.table.rows.emplace_back(std::vector<int>{m.table.d});
        m.table.grads.emplace_back(std::vector<int>{m.table.d});
    }
    for (const auto& name : jt.at("frozen").get<std::vector<std::string>>()) m.table.frozen.insert(name);

    std::vector<std::pair<std::string, Tensor<float>*>> dst;
    m.net.visit_params([&](const std::string& n, Tensor<float>& w, Tensor<float>&) { dst.emplace_back(n, &w); });
    for (std::size_t i = 0; i < m.table.names.size(); ++i)
        dst.emplace_back("embedding." + m.table.names[i], &m.table.rows[i]);

    const auto& jtens = header.at("tensors");
    if (jtens.size() != dst.size()) throw std::runtime_error("checkpoint tensor count mismatch: " + path);
    for (std::size_t i = 0; i < dst.size(); ++i) {
        const auto& rec = jtens.at(i);
        if (rec.at("name").get<std::string>() != dst[i].first)
            throw std::runtime_error("checkpoint tensor order mismatch at " + dst[i].first);
        const auto shape = rec.at("shape").get<std::vector<int>>();
        if (shape != dst[i].second->shape) throw std::runtime_error("checkpoint shape mismatch at " + dst[i].first);
        f.read(reinterpret_cast<char*>(dst[i].second->v.data()),
               static_cast<std::streamsize>(dst[i].second->v.size() * sizeof(float)));
    }
    if (!f) throw std::runtime_error("checkpoint payload truncated: " + path);
    return m;
}

}  // namespace elab
