#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "certlab/bounds.hpp"
#include "certlab/data.hpp"
#include "certlab/train.hpp"

namespace certlab {

// Certification backend selected on command lines and config files:
//   ibp        interval propagation
//   crown-ibp  backward linear bounds over interval intermediates
//   crown      backward linear bounds over backward intermediates
//   deeppoly   crown with the deeppoly relaxation flavor
struct EvalMethod {
    BoundMethod bound = BoundMethod::crown_full;
    RelaxationMode relaxation = RelaxationMode::crown_adaptive;
};

EvalMethod eval_method_from_name(const std::string& name); // throws ConfigError
std::string eval_method_name(const EvalMethod& method);

// Everything one experiment needs: where the data lives, how the victim is
// trained, how it is poisoned, and how it is evaluated. Loaded from a flat
// key = value file (one pair per line, '#' comments, lists comma-separated,
// dotted prefixes for the poison/eval sections); command-line flags override
// loaded values.
struct ExperimentConfig {
    std::filesystem::path data_dir; // MNIST IDX directory; empty: auto-locate
    std::filesystem::path out_dir = ".";
    TrainConfig train;
    PoisonSpec poison;
    std::vector<uint64_t> seeds = {0};
    std::vector<double> eval_eps = {0.01, 0.02, 0.05};
    EvalMethod eval_method;
};

// The epsilon values restored by a --full sweep (the evaluation grid the
// reference results use); the three-value default keeps a desk-scale run
// under a couple of hours.
std::vector<double> full_eval_eps();

// Parses the key = value text. Unknown keys, duplicate keys, and malformed
// values throw ConfigError naming the key; parse does not touch the
// filesystem (see validate_config).
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Structural checks beyond parsing: eval_eps strictly increasing and
// positive, seeds non-empty, poison ratio in [0,1], train dims valid, and
// data_dir (when set) an existing directory. Throws ConfigError.
void validate_config(const ExperimentConfig& cfg);

} // namespace certlab
