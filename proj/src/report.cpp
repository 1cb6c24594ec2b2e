#include "elab/report.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace elab {

using nlohmann::json;

const EvalRecord* EvalReport::find(const std::string& concept_token, const std::string& method,
                                   const std::string& stage) const {
    for (const auto& r : records)
        if (r.concept_token == concept_token && r.method == method && r.stage == stage) return &r;
    return nullptr;
}

double EvalReport::accuracy_or(const std::string& concept_token, const std::string& method, const std::string& stage,
                               double fallback) const {
    const EvalRecord* r = find(concept_token, method, stage);
    return (r && r->skip_reason.empty()) ? r->accuracy : fallback;
}

void save_report(const std::string& path, const EvalReport& report) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write report: " + path);
    {
        json meta;
        meta["kind"] = "meta";
        meta["config"] = report.config_echo;
        f << meta.dump() << "\n";
    }
    for (const auto& r : report.records) {
        json j;
        j["kind"] = "cell";
        j["concept"] = r.concept_token;
        j["method"] = r.method;
        j["stage"] = r.stage;
        j["accuracy"] = r.accuracy;
        j["n"] = r.n_samples;
        j["seed"] = r.seed;
        j["sample_grid"] = r.sample_grid;
        j["skip_reason"] = r.skip_reason;
        f << j.dump() << "\n";
    }
}

EvalReport load_report(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open report: " + path);
    EvalReport rep;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        if (j.at("kind") == "meta") {
            rep.config_echo = j.at("config").get<std::string>();
            continue;
        }
        EvalRecord r;
        r.concept_token = j.at("concept").get<std::string>();
        r.method = j.at("method").get<std::string>();
        r.stage = j.at("stage").get<std::string>();
        r.accuracy = j.at("accuracy").get<double>();
        r.n_samples = j.at("n").get<int>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.sample_grid = j.at("sample_grid").get<std::string>();
        r.skip_reason = j.at("skip_reason").get<std::string>();
        rep.records.push_back(std::move(r));
    }
    return rep;
}

std::string render_markdown(const EvalReport& report) {
    std::set<std::string> concepts, methods;
    for (const auto& r : report.records) {
        if (r.stage == "erased" || r.stage == "ci" || r.stage == "transfer") {
            concepts.insert(r.concept_token);
            methods.insert(r.method);
        }
    }
    std::ostringstream os;
    os << "# Erasure vs concept-inversion accuracy\n\n";
    os << "Cell format: erased / CI (classifier accuracy %, transfer in parentheses).\n\n";
    for (const auto& c : concepts) {
        os << "## " << c << "\n\n";
        const EvalRecord* base = report.find(c, "base", "base");
        if (base) os << "Base model accuracy: " << 100.0 * base->accuracy << "% (n=" << base->n_samples << ")\n\n";
        os << "| method | erased / CI | transfer |\n|---|---|---|\n";
        for (const auto& m : methods) {
            auto cell = [&](const std::string& stage) -> std::string {
                const EvalRecord* r = report.find(c, m, stage);
                if (!r) return "-";
                if (!r->skip_reason.empty()) return "skip: " + r->skip_reason;
                std::ostringstream v;
                v.precision(1);
                v << std::fixed << 100.0 * r->accuracy;
                return v.str();
            };
            os << "| " << m << " | " << cell("erased") << " / " << cell("ci") << " | " << cell("transfer") << " |\n";
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace elab
