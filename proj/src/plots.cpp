#include "elab/plots.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

#include "elab/png_io.hpp"

namespace elab {

namespace {

// 3x5 digit glyphs for axis annotations
constexpr const char* kDigits3x5[10] = {
    "111101101101111", "010110010010111", "111001111100111", "111001111001111", "101101111001001",
    "111100111001111", "111100111101111", "111001010010010", "111101111101111", "111101111001111",
};

void draw_digit(GrayCanvas& c, int ox, int oy, int d, std::uint8_t shade) {
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 3; ++x)
            if (kDigits3x5[d][y * 3 + x] == '1') {
                const int px = ox + x, py = oy + y;
                if (px >= 0 && px < c.width && py >= 0 && py < c.height)
                    c.pixels[static_cast<std::size_t>(py) * c.width + px] = shade;
            }
}

void draw_number(GrayCanvas& c, int ox, int oy, int value, std::uint8_t shade) {
    std::string s = std::to_string(value);
    for (std::size_t i = 0; i < s.size(); ++i) draw_digit(c, ox + static_cast<int>(i) * 4, oy, s[i] - '0', shade);
}

void fill_rect(GrayCanvas& c, int x0, int y0, int w, int h, std::uint8_t shade) {
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x)
            if (x >= 0 && x < c.width && y >= 0 && y < c.height)
                c.pixels[static_cast<std::size_t>(y) * c.width + x] = shade;
}

}  // namespace

std::vector<std::string> emit_plots(const EvalReport& report, const std::string& outdir) {
    if (report.records.empty()) throw std::invalid_argument("emit_plots: empty report");

    std::vector<std::string> written;
    std::set<std::string> concepts;
    for (const auto& r : report.records)
        if (r.stage == "erased") concepts.insert(r.concept_token);

    for (const auto& concept_token : concepts) {
        std::vector<std::string> methods;
        for (const auto& r : report.records)
            if (r.concept_token == concept_token && r.stage == "erased" &&
                std::find(methods.begin(), methods.end(), r.method) == methods.end())
                methods.push_back(r.method);
        if (methods.empty()) continue;

        const int bar_w = 10, pair_gap = 14, margin = 24;
        const int plot_h = 100;
        GrayCanvas c;
        c.width = margin * 2 + static_cast<int>(methods.size()) * (2 * bar_w + pair_gap);
        c.height = plot_h + 36;
        c.pixels.assign(static_cast<std::size_t>(c.width) * c.height, 16);

        // axis
        fill_rect(c, margin - 4, 8 + plot_h, c.width - 2 * margin + 12, 1, 200);
        for (std::size_t i = 0; i < methods.size(); ++i) {
            const double era = report.accuracy_or(concept_token, methods[i], "erased", 0.0);
            const double ci = report.accuracy_or(concept_token, methods[i], "ci", 0.0);
            const int x0 = margin + static_cast<int>(i) * (2 * bar_w + pair_gap);
            const int he = static_cast<int>(era * plot_h + 0.5);
            const int hc = static_cast<int>(ci * plot_h + 0.5);
            fill_rect(c, x0, 8 + plot_h - he, bar_w, he, 110);        // erased: dim
            fill_rect(c, x0 + bar_w + 1, 8 + plot_h - hc, bar_w, hc, 235);  // ci: bright
            draw_number(c, x0, 8 + plot_h - he - 7, static_cast<int>(era * 100 + 0.5), 150);
            draw_number(c, x0 + bar_w + 1, 8 + plot_h - hc - 7, static_cast<int>(ci * 100 + 0.5), 255);
            draw_number(c, x0 + bar_w - 2, 12 + plot_h, static_cast<int>(i), 200);  // method index
        }

        std::string name = concept_token;
        for (auto& ch : name)
            if (ch == '<' || ch == '>' || ch == ':') ch = '_';
        const std::string path = outdir + "/erased_vs_ci_" + name + ".png";
        write_png_gray(path, c.width, c.height, c.pixels);
        written.push_back(path);
    }

    const std::string md_path = outdir + "/report.md";
    std::ofstream md(md_path);
    if (!md) throw std::runtime_error("cannot write " + md_path);
    md << render_markdown(report);
    md << "\nBar-chart method indices follow the method order per concept; see report.jsonl for exact records.\n";
    written.push_back(md_path);
    return written;
}

}  // namespace elab
