#include "certlab/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "certlab/errors.hpp"

namespace certlab {

EvalMethod eval_method_from_name(const std::string& name) {
    if (name == "ibp") return {BoundMethod::ibp, RelaxationMode::crown_adaptive};
    if (name == "crown-ibp")
        return {BoundMethod::crown_ibp, RelaxationMode::crown_adaptive};
    if (name == "crown")
        return {BoundMethod::crown_full, RelaxationMode::crown_adaptive};
    if (name == "deeppoly")
        return {BoundMethod::crown_full, RelaxationMode::deeppoly};
    throw ConfigError("unknown certification method '" + name +
                      "' (expected ibp, crown-ibp, crown, or deeppoly)");
}

std::string eval_method_name(const EvalMethod& method) {
    switch (method.bound) {
        case BoundMethod::ibp: return "ibp";
        case BoundMethod::crown_ibp: return "crown-ibp";
        case BoundMethod::crown_full:
            return method.relaxation == RelaxationMode::deeppoly ? "deeppoly"
                                                                 : "crown";
    }
    throw ConfigError("eval_method_name: invalid bound method");
}

std::vector<double> full_eval_eps() { return {0.01, 0.02, 0.03, 0.04, 0.05}; }

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& value, const std::string& key) {
    T out{};
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size())
        throw ConfigError("config key '" + key + "': bad value '" + value + "'");
    return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& value, const std::string& key) {
    std::vector<T> out;
    size_t start = 0;
    while (start <= value.size()) {
        size_t comma = value.find(',', start);
        std::string item = trim(value.substr(start, comma - start));
        if (item.empty())
            throw ConfigError("config key '" + key + "': empty list element");
        out.push_back(parse_number<T>(item, key));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
}

} // namespace

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::set<std::string> seen;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key = value, got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": empty key or value");
        if (!seen.insert(key).second)
            throw ConfigError("config key '" + key + "' appears twice");

        if (key == "data_dir") cfg.data_dir = value;
        else if (key == "out_dir") cfg.out_dir = value;
        else if (key == "method") cfg.train.method = method_from_name(value);
        else if (key == "eps_target") cfg.train.eps_target = parse_number<float>(value, key);
        else if (key == "epochs") cfg.train.epochs = parse_number<int64_t>(value, key);
        else if (key == "batch_size") cfg.train.batch_size = parse_number<int64_t>(value, key);
        else if (key == "learning_rate") cfg.train.learning_rate = parse_number<float>(value, key);
        else if (key == "momentum") cfg.train.momentum = parse_number<float>(value, key);
        else if (key == "alpha") cfg.train.alpha = parse_number<float>(value, key);
        else if (key == "beta") cfg.train.beta = parse_number<float>(value, key);
        else if (key == "gamma") cfg.train.gamma = parse_number<float>(value, key);
        else if (key == "delta") cfg.train.delta = parse_number<float>(value, key);
        else if (key == "kappa_end") cfg.train.kappa_end = parse_number<float>(value, key);
        else if (key == "warmup_epochs") cfg.train.warmup_epochs = parse_number<int64_t>(value, key);
        else if (key == "ramp_epochs") cfg.train.ramp_epochs = parse_number<int64_t>(value, key);
        else if (key == "dims") cfg.train.dims = parse_list<int64_t>(value, key);
        else if (key == "poison.ratio") cfg.poison.ratio = parse_number<double>(value, key);
        else if (key == "poison.seed") cfg.poison.seed = parse_number<uint64_t>(value, key);
        else if (key == "seeds") cfg.seeds = parse_list<uint64_t>(value, key);
        else if (key == "eval.eps") cfg.eval_eps = parse_list<double>(value, key);
        else if (key == "eval.method") cfg.eval_method = eval_method_from_name(value);
        else
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": unknown key '" + key + "'");
    }
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("load_config: cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

void validate_config(const ExperimentConfig& cfg) {
    if (cfg.eval_eps.empty()) throw ConfigError("config: eval.eps is empty");
    for (size_t i = 0; i < cfg.eval_eps.size(); ++i) {
        if (!(cfg.eval_eps[i] > 0))
            throw ConfigError("config: eval.eps values must be positive");
        if (i > 0 && !(cfg.eval_eps[i] > cfg.eval_eps[i - 1]))
            throw ConfigError("config: eval.eps must be strictly increasing");
    }
    if (cfg.seeds.empty()) throw ConfigError("config: seeds is empty");
    if (!(cfg.poison.ratio >= 0.0 && cfg.poison.ratio <= 1.0))
        throw ConfigError("config: poison.ratio outside [0,1]");
    if (cfg.train.dims.size() < 2)
        throw ConfigError("config: dims needs at least two entries");
    for (int64_t d : cfg.train.dims)
        if (d <= 0) throw ConfigError("config: dims entries must be positive");
    if (cfg.train.batch_size <= 0)
        throw ConfigError("config: batch_size must be positive");
    if (!(cfg.train.learning_rate > 0))
        throw ConfigError("config: learning_rate must be positive");
    if (!(cfg.train.momentum >= 0 && cfg.train.momentum < 1))
        throw ConfigError("config: momentum outside [0,1)");
    if (cfg.train.epochs < 0)
        throw ConfigError("config: epochs must be non-negative");
    if (!(cfg.train.eps_target >= 0))
        throw ConfigError("config: eps_target must be non-negative");
    if (!(cfg.train.kappa_end >= 0 && cfg.train.kappa_end <= 1))
        throw ConfigError("config: kappa_end outside [0,1]");
    if (cfg.train.warmup_epochs < 0 || cfg.train.ramp_epochs < 0)
        throw ConfigError("config: schedule epochs must be non-negative");
    if (!cfg.data_dir.empty() && !std::filesystem::is_directory(cfg.data_dir))
        throw ConfigError("config: data_dir '" + cfg.data_dir.string() +
                          "' is not a directory");
}

} // namespace certlab
