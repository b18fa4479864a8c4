#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace certlab {

// One measurement cell: a model evaluated on one data split at one radius.
// `attack` records how the model was produced (none, direct, indirect) and
// `split` which data it was evaluated on (benign, backdoor = triggered test
// set). Rates are fractions in [0, 1].
struct ReportRow {
    std::string method;      // natural | adversarial | provable | direct
    std::string attack;      // none | direct | indirect
    std::string split;       // benign | backdoor
    double epsilon = 0.0;
    double accuracy = 0.0;
    double certified = 0.0;
    uint64_t seed = 0;
    double wall_seconds = 0.0;
};

// Throws ConfigError when a field is outside its domain (unknown attack or
// split, rate outside [0,1], non-finite number, method with CSV
// metacharacters).
void validate_row(const ReportRow& row);

// CSV with the fixed header
//   method,attack,split,epsilon,accuracy,certified,seed,wall_seconds
// dot decimals, newline-terminated, UTF-8. Doubles print as their shortest
// round-trip form, so parse(render(rows)) reproduces rows bit for bit.
// Rendering an empty row list throws ConfigError.
std::string render_csv(const std::vector<ReportRow>& rows);
std::vector<ReportRow> parse_csv(const std::string& text);
void write_report_csv(const std::vector<ReportRow>& rows,
                      const std::filesystem::path& path);
std::vector<ReportRow> load_report_csv(const std::filesystem::path& path);

// Markdown table in the benign/backdoor half layout: one row per
// (method, attack) group, mean over seeds, accuracy plus one certified
// column per distinct epsilon, benign columns before backdoor columns.
// Attacked rows show the percentage-point change against the matching
// no-attack baseline in parentheses (direct-attack rows compare against the
// provable baseline, the training family the attack imitates). Missing
// cells render as a dash. Throws ConfigError on an empty row list.
std::string render_markdown(const std::vector<ReportRow>& rows);

// Utility/cost bookkeeping for a certifier that abstains on uncertified
// inputs and hands them to a fallback (a larger model or a human).
struct FallbackParams {
    double u_model = 0.0;    // utility of the model's certified answers, [0,1]
    double u_fallback = 0.0; // utility of the fallback's answers, [0,1]
    double c_model = 0.0;    // cost per input of running the model
    double c_fallback = 0.0; // cost per input of invoking the fallback
    double a = 0.0;          // abstain rate, [0,1]
};

// (u_total, c_total) with u_total = (1-a) u_model + a u_fallback and
// c_total = c_model + a c_fallback: the model always runs, the fallback
// only on abstains. Throws ConfigError when a or the utilities leave [0,1]
// or costs are negative.
std::pair<double, double> fallback_impact(const FallbackParams& p);

} // namespace certlab
