#include "certlab/report.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "certlab/errors.hpp"

namespace certlab {

namespace {

constexpr const char* kHeader =
    "method,attack,split,epsilon,accuracy,certified,seed,wall_seconds";

const std::vector<std::string>& attack_names() {
    static const std::vector<std::string> v = {"none", "direct", "indirect"};
    return v;
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
}

std::string shortest(double value) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    if (ec != std::errc()) throw NumericError("report: double does not format");
    return {buf, end};
}

std::string shortest(uint64_t value) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    if (ec != std::errc()) throw NumericError("report: integer does not format");
    return {buf, end};
}

double parse_double(const std::string& field, int64_t line, const char* name) {
    double out = 0.0;
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), out);
    if (ec != std::errc() || ptr != field.data() + field.size())
        throw ParseError("report csv line " + std::to_string(line) + ": bad " +
                         name + " '" + field + "'");
    return out;
}

uint64_t parse_u64(const std::string& field, int64_t line, const char* name) {
    uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), out);
    if (ec != std::errc() || ptr != field.data() + field.size())
        throw ParseError("report csv line " + std::to_string(line) + ": bad " +
                         name + " '" + field + "'");
    return out;
}

// percentage with one decimal, e.g. 0.983 -> "98.3"
std::string pct(double rate) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", rate * 100.0);
    return buf;
}

// signed percentage-point delta rounded to an integer; the sign survives
// rounding to zero ("-0" for a small decrease), matching how near-unchanged
// attacked cells customarily read.
std::string delta_pp(double value, double baseline) {
    double d = (value - baseline) * 100.0;
    char sign = d < 0 ? '-' : '+';
    return std::string("(") + sign +
           std::to_string(static_cast<long>(std::lround(std::fabs(d)))) + ")";
}

} // namespace

void validate_row(const ReportRow& row) {
    if (row.method.empty() ||
        row.method.find_first_of(",\n\r") != std::string::npos)
        throw ConfigError("report row: method must be non-empty without CSV "
                          "metacharacters, got '" + row.method + "'");
    if (!contains(attack_names(), row.attack))
        throw ConfigError("report row: unknown attack '" + row.attack + "'");
    if (row.split != "benign" && row.split != "backdoor")
        throw ConfigError("report row: unknown split '" + row.split + "'");
    if (!std::isfinite(row.epsilon) || row.epsilon < 0)
        throw ConfigError("report row: epsilon must be finite and >= 0");
    if (!(row.accuracy >= 0.0 && row.accuracy <= 1.0))
        throw ConfigError("report row: accuracy outside [0,1]");
    if (!(row.certified >= 0.0 && row.certified <= 1.0))
        throw ConfigError("report row: certified rate outside [0,1]");
    if (!std::isfinite(row.wall_seconds) || row.wall_seconds < 0)
        throw ConfigError("report row: wall_seconds must be finite and >= 0");
}

std::string render_csv(const std::vector<ReportRow>& rows) {
    if (rows.empty()) throw ConfigError("render_csv: no rows");
    std::string out = kHeader;
    out += '\n';
    for (const ReportRow& r : rows) {
        validate_row(r);
        out += r.method;
        out += ',';
        out += r.attack;
        out += ',';
        out += r.split;
        out += ',';
        out += shortest(r.epsilon);
        out += ',';
        out += shortest(r.accuracy);
        out += ',';
        out += shortest(r.certified);
        out += ',';
        out += shortest(r.seed);
        out += ',';
        out += shortest(r.wall_seconds);
        out += '\n';
    }
    return out;
}

std::vector<ReportRow> parse_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kHeader)
        throw ParseError("report csv: missing or wrong header, expected '" +
                         std::string(kHeader) + "'");
    std::vector<ReportRow> rows;
    int64_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        size_t start = 0;
        while (true) {
            size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (fields.size() != 8)
            throw ParseError("report csv line " + std::to_string(lineno) +
                             ": expected 8 fields, got " +
                             std::to_string(fields.size()));
        ReportRow r;
        r.method = fields[0];
        r.attack = fields[1];
        r.split = fields[2];
        r.epsilon = parse_double(fields[3], lineno, "epsilon");
        r.accuracy = parse_double(fields[4], lineno, "accuracy");
        r.certified = parse_double(fields[5], lineno, "certified");
        r.seed = parse_u64(fields[6], lineno, "seed");
        r.wall_seconds = parse_double(fields[7], lineno, "wall_seconds");
        try {
            validate_row(r);
        } catch (const ConfigError& e) {
            throw ParseError("report csv line " + std::to_string(lineno) + ": " +
                             e.what());
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

void write_report_csv(const std::vector<ReportRow>& rows,
                      const std::filesystem::path& path) {
    std::string text = render_csv(rows);
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw Error("write_report_csv: cannot open " + path.string() +
                    " for writing");
    out << text;
    if (!out) throw Error("write_report_csv: write to " + path.string() + " failed");
}

std::vector<ReportRow> load_report_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("load_report_csv: cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_csv(buf.str());
}

namespace {

// Per-(method, attack) aggregate: seed-mean accuracy per split and
// seed-mean certified rate per (split, epsilon).
struct Group {
    std::map<std::string, std::pair<double, int64_t>> acc;               // split
    std::map<std::pair<std::string, double>, std::pair<double, int64_t>> cert;
};

int method_rank(const std::string& m) {
    if (m == "natural") return 0;
    if (m == "adversarial") return 1;
    if (m == "provable") return 2;
    if (m == "direct") return 3;
    return 4;
}

std::string display_method(const std::string& m, const std::string& attack) {
    if (attack == "direct" && m == "direct") return "Optimization";
    std::string out = m;
    if (!out.empty())
        out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
    return out;
}

std::optional<double> group_acc(const Group& g, const std::string& split) {
    auto it = g.acc.find(split);
    if (it == g.acc.end()) return std::nullopt;
    return it->second.first / static_cast<double>(it->second.second);
}

std::optional<double> group_cert(const Group& g, const std::string& split,
                                 double eps) {
    auto it = g.cert.find({split, eps});
    if (it == g.cert.end()) return std::nullopt;
    return it->second.first / static_cast<double>(it->second.second);
}

} // namespace

std::string render_markdown(const std::vector<ReportRow>& rows) {
    if (rows.empty()) throw ConfigError("render_markdown: no rows");

    std::map<std::pair<std::string, std::string>, Group> groups;
    std::vector<double> eps_list;
    for (const ReportRow& r : rows) {
        validate_row(r);
        Group& g = groups[{r.method, r.attack}];
        auto& a = g.acc[r.split];
        a.first += r.accuracy;
        a.second += 1;
        auto& c = g.cert[{r.split, r.epsilon}];
        c.first += r.certified;
        c.second += 1;
        if (std::find(eps_list.begin(), eps_list.end(), r.epsilon) == eps_list.end())
            eps_list.push_back(r.epsilon);
    }
    std::sort(eps_list.begin(), eps_list.end());

    // header: benign half then backdoor half
    std::string out = "| Training |";
    for (const char* side : {"Benign", "Backdoor"}) {
        out += std::string(" ") + side + " acc |";
        for (double e : eps_list) out += " " + std::string(side) + " ε=" + shortest(e) + " |";
    }
    out += "\n|---|";
    for (size_t i = 0; i < 2 * (eps_list.size() + 1); ++i) out += "---|";
    out += "\n";

    auto cell = [&](const std::optional<double>& value,
                    const std::optional<double>& baseline) {
        if (!value) return std::string("-");
        std::string s = pct(*value);
        if (baseline) s += " " + delta_pp(*value, *baseline);
        return s;
    };

    struct Section {
        const char* attack;
        const char* title;
    };
    for (const Section& sec : {Section{"none", "Without attack"},
                               Section{"direct", "Direct attack"},
                               Section{"indirect", "Indirect attack"}}) {
        // groups of this section in method order
        std::vector<const std::pair<const std::pair<std::string, std::string>, Group>*> members;
        for (const auto& kv : groups)
            if (kv.first.second == sec.attack) members.push_back(&kv);
        if (members.empty()) continue;
        std::sort(members.begin(), members.end(), [](auto* x, auto* y) {
            int rx = method_rank(x->first.first), ry = method_rank(y->first.first);
            return rx != ry ? rx < ry : x->first.first < y->first.first;
        });

        out += "| **" + std::string(sec.title) + "** |";
        for (size_t i = 0; i < 2 * (eps_list.size() + 1); ++i) out += " |";
        out += "\n";

        for (auto* kv : members) {
            const std::string& method = kv->first.first;
            const Group& g = kv->second;
            // attacked rows diff against the no-attack run of the same
            // training family; the direct attack imitates provable training
            const Group* base = nullptr;
            if (kv->first.second != "none") {
                std::string base_method = method == "direct" ? "provable" : method;
                auto it = groups.find({base_method, "none"});
                if (it != groups.end()) base = &it->second;
            }
            out += "| " + display_method(method, kv->first.second) + " |";
            for (const char* split : {"benign", "backdoor"}) {
                auto acc = group_acc(g, split);
                out += " " +
                       cell(acc, base ? group_acc(*base, split) : std::nullopt) +
                       " |";
                for (double e : eps_list) {
                    auto cert = group_cert(g, split, e);
                    out += " " +
                           cell(cert,
                                base ? group_cert(*base, split, e) : std::nullopt) +
                           " |";
                }
            }
            out += "\n";
        }
    }
    return out;
}

std::pair<double, double> fallback_impact(const FallbackParams& p) {
    if (!(p.a >= 0.0 && p.a <= 1.0))
        throw ConfigError("fallback_impact: abstain rate outside [0,1]");
    if (!(p.u_model >= 0.0 && p.u_model <= 1.0) ||
        !(p.u_fallback >= 0.0 && p.u_fallback <= 1.0))
        throw ConfigError("fallback_impact: utilities must lie in [0,1]");
    if (!(p.c_model >= 0.0) || !(p.c_fallback >= 0.0))
        throw ConfigError("fallback_impact: costs must be non-negative");
    double u_total = (1.0 - p.a) * p.u_model + p.a * p.u_fallback;
    double c_total = p.c_model + p.a * p.c_fallback;
    return {u_total, c_total};
}

} // namespace certlab
