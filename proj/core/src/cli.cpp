#include "certlab/cli.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "certlab/bounds.hpp"
#include "certlab/config.hpp"
#include "certlab/data.hpp"
#include "certlab/defense.hpp"
#include "certlab/errors.hpp"
#include "certlab/model.hpp"
#include "certlab/report.hpp"
#include "certlab/train.hpp"

namespace certlab {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string shortest(double value) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    if (ec != std::errc()) throw NumericError("cli: double does not format");
    return {buf, end};
}

// display form: up to 10 significant digits, no trailing noise
std::string display(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", value);
    return buf;
}

std::filesystem::path resolve_data_dir(const std::filesystem::path& configured) {
    if (!configured.empty()) return configured;
    auto dir = find_mnist_dir();
    if (!dir)
        throw ConfigError(
            "MNIST data not found (set CERTLAB_DATA_DIR, pass --data-dir, or "
            "place the IDX files under ./data/mnist)");
    return *dir;
}

// ReportRow uses "direct" where model metadata says "direct_attack".
std::string row_method(const std::string& metadata_method) {
    return metadata_method == "direct_attack" ? "direct" : metadata_method;
}

// ---- flag plumbing ---------------------------------------------------------
//
// Every training-side subcommand shares the same flag set; values land in
// this struct and the Option handles tell us which flags were actually
// given, so a --config file provides defaults and explicit flags override.

struct TrainFlags {
    std::string config, data_dir, out, log, method = "natural";
    double eps = 0, lr = 0, momentum = 0, kappa = 0;
    double alpha = 0, beta = 0, gamma = 0, delta = 0;
    int64_t epochs = 0, batch = 0, warmup = 0, ramp = 0;
    uint64_t seed = 0, poison_seed = 0;
    double poison_ratio = 0;
    std::vector<int64_t> dims;

    CLI::Option *o_method = nullptr, *o_eps = nullptr, *o_lr = nullptr,
                *o_momentum = nullptr, *o_kappa = nullptr, *o_alpha = nullptr,
                *o_beta = nullptr, *o_gamma = nullptr, *o_delta = nullptr,
                *o_epochs = nullptr, *o_batch = nullptr, *o_warmup = nullptr,
                *o_ramp = nullptr, *o_seed = nullptr, *o_pseed = nullptr,
                *o_pratio = nullptr, *o_dims = nullptr, *o_data = nullptr,
                *o_log = nullptr;
};

void add_train_flags(CLI::App* sub, TrainFlags& f, bool with_method) {
    sub->add_option("--config", f.config,
                    "experiment config file; explicit flags override it");
    if (with_method)
        f.o_method =
            sub->add_option("--method", f.method, "training method")
                ->check(CLI::IsMember(
                    {"natural", "adversarial", "provable", "direct_attack"}));
    f.o_eps = sub->add_option("--eps", f.eps,
                              "training radius reached after the ramp");
    f.o_epochs =
        sub->add_option("--epochs", f.epochs, "epochs (0: method default)");
    f.o_batch = sub->add_option("--batch-size", f.batch, "minibatch size");
    f.o_lr = sub->add_option("--lr", f.lr, "initial learning rate");
    f.o_momentum = sub->add_option("--momentum", f.momentum, "SGD momentum");
    f.o_kappa = sub->add_option("--kappa", f.kappa,
                                "final bound/clean mix of the robust loss");
    f.o_alpha = sub->add_option("--alpha", f.alpha, "clean cross-entropy weight");
    f.o_beta = sub->add_option("--beta", f.beta, "robust-loss weight");
    f.o_gamma = sub->add_option("--gamma", f.gamma,
                                "certification-breaking loss weight");
    f.o_delta = sub->add_option("--delta", f.delta,
                                "triggered cross-entropy weight");
    f.o_warmup = sub->add_option("--warmup-epochs", f.warmup,
                                 "plain cross-entropy epochs before the ramp");
    f.o_ramp = sub->add_option("--ramp-epochs", f.ramp,
                               "length of the eps/kappa ramp");
    f.o_seed = sub->add_option("--seed", f.seed, "training seed");
    f.o_dims = sub->add_option("--dims", f.dims, "layer widths, e.g. 784,128,10")
                   ->delimiter(',');
    f.o_pratio = sub->add_option("--poison-ratio", f.poison_ratio,
                                 "fraction of poison examples to mix in");
    f.o_pseed = sub->add_option("--poison-seed", f.poison_seed,
                                "poison sampling seed");
    f.o_data = sub->add_option("--data-dir", f.data_dir,
                               "directory holding the MNIST IDX files");
    f.o_log = sub->add_option("--log", f.log, "per-epoch CSV training log");
    sub->add_option("--out", f.out, "model file to write")->required();
}

ExperimentConfig config_from_flags(const TrainFlags& f) {
    ExperimentConfig cfg =
        f.config.empty() ? ExperimentConfig{} : load_config(f.config);
    if (f.o_method && f.o_method->count())
        cfg.train.method = method_from_name(f.method);
    if (f.o_eps->count()) cfg.train.eps_target = static_cast<float>(f.eps);
    if (f.o_epochs->count()) cfg.train.epochs = f.epochs;
    if (f.o_batch->count()) cfg.train.batch_size = f.batch;
    if (f.o_lr->count()) cfg.train.learning_rate = static_cast<float>(f.lr);
    if (f.o_momentum->count())
        cfg.train.momentum = static_cast<float>(f.momentum);
    if (f.o_kappa->count()) cfg.train.kappa_end = static_cast<float>(f.kappa);
    if (f.o_alpha->count()) cfg.train.alpha = static_cast<float>(f.alpha);
    if (f.o_beta->count()) cfg.train.beta = static_cast<float>(f.beta);
    if (f.o_gamma->count()) cfg.train.gamma = static_cast<float>(f.gamma);
    if (f.o_delta->count()) cfg.train.delta = static_cast<float>(f.delta);
    if (f.o_warmup->count()) cfg.train.warmup_epochs = f.warmup;
    if (f.o_ramp->count()) cfg.train.ramp_epochs = f.ramp;
    if (f.o_seed->count()) cfg.train.seed = f.seed;
    else if (!cfg.seeds.empty()) cfg.train.seed = cfg.seeds.front();
    if (f.o_dims->count()) cfg.train.dims = f.dims;
    if (f.o_pratio->count()) cfg.poison.ratio = f.poison_ratio;
    if (f.o_pseed->count()) cfg.poison.seed = f.poison_seed;
    if (f.o_data->count()) cfg.data_dir = f.data_dir;
    if (f.o_log->count()) cfg.train.log_path = f.log;
    validate_config(cfg);
    return cfg;
}

// ---- subcommands -----------------------------------------------------------

void run_train(const TrainFlags& f, std::optional<TrainMethod> forced,
               std::ostream& out) {
    ExperimentConfig cfg = config_from_flags(f);
    if (forced) cfg.train.method = *forced;

    Dataset train = load_mnist(resolve_data_dir(cfg.data_dir), Split::train);
    auto t0 = Clock::now();
    Model model = cfg.poison.ratio > 0
                      ? run_indirect_attack(train, cfg.poison, cfg.train)
                      : train_model(train, cfg.train);
    double wall = seconds_since(t0);

    save_model(model, f.out);
    out << "trained method=" << model.metadata().method
        << " epochs=" << (cfg.train.epochs > 0 ? cfg.train.epochs : 0)
        << " seed=" << cfg.train.seed << " eps=" << display(cfg.train.eps_target);
    if (cfg.poison.ratio > 0) out << " poison_ratio=" << display(cfg.poison.ratio);
    out << " wall=" << display(wall) << "s -> " << f.out << "\n";
}

struct CertifyFlags {
    std::string model, data_split = "test", data_dir, method = "crown",
                attack, out;
    std::vector<double> eps;
    bool full = false;
    int64_t max_examples = 0;
};

void run_certify(const CertifyFlags& f, std::ostream& out) {
    Model model = load_model(f.model);
    EvalMethod method = eval_method_from_name(f.method);
    std::vector<double> eps_list = f.full ? full_eval_eps() : f.eps;
    for (size_t i = 1; i < eps_list.size(); ++i)
        if (!(eps_list[i] > eps_list[i - 1]))
            throw ConfigError("certify: --eps values must be strictly increasing");

    Dataset benign = load_mnist(resolve_data_dir(f.data_dir),
                                f.data_split == "train" ? Split::train
                                                        : Split::test);
    if (f.max_examples > 0 && f.max_examples < benign.size())
        benign = benign.head(f.max_examples);
    Dataset backdoor = with_trigger(benign);

    std::string method_field = row_method(model.metadata().method);
    std::string attack_field =
        !f.attack.empty() ? f.attack
                          : (method_field == "direct" ? "direct" : "none");

    std::vector<ReportRow> rows;
    for (const auto& [split_name, data] :
         {std::pair<const char*, const Dataset*>{"benign", &benign},
          std::pair<const char*, const Dataset*>{"backdoor", &backdoor}}) {
        double acc = accuracy(model, *data);
        for (double eps : eps_list) {
            auto t0 = Clock::now();
            double cert = certified_robustness(model, *data, eps, method.bound,
                                               method.relaxation);
            ReportRow row;
            row.method = method_field;
            row.attack = attack_field;
            row.split = split_name;
            row.epsilon = eps;
            row.accuracy = acc;
            row.certified = cert;
            row.seed = model.metadata().seed;
            row.wall_seconds = seconds_since(t0);
            rows.push_back(std::move(row));
        }
    }

    if (f.out.empty()) {
        out << render_csv(rows);
    } else {
        write_report_csv(rows, f.out);
        out << "rows: " << rows.size() << " -> " << f.out << "\n";
    }
    // abstain rate a = 1 - certified on the triggered split feeds the
    // fallback-impact calculator directly
    for (const ReportRow& r : rows)
        if (r.split == "backdoor")
            out << "abstain,eps=" << shortest(r.epsilon) << ",a="
                << shortest(1.0 - r.certified) << "\n";
}

struct PoisonFlags {
    double ratio = 0;
    uint64_t seed = 0;
    std::string data_dir, out;
};

void run_poison(const PoisonFlags& f, std::ostream& out) {
    Dataset benign = load_mnist(resolve_data_dir(f.data_dir), Split::train);
    Dataset poison = make_poison_set(benign, {f.ratio, f.seed});
    Dataset combined = concat(benign, poison);
    std::filesystem::create_directories(f.out);
    std::filesystem::path dir(f.out);
    write_idx_pair(combined, dir / "train-images-idx3-ubyte",
                   dir / "train-labels-idx1-ubyte");
    out << "poisoned train set: " << combined.size() << " examples ("
        << poison.size() << " poison) -> " << f.out << "\n";
}

struct DefendFlags {
    std::string model, data_dir, out, save_model_path, defense = "all";
    double fraction = 0.75;
    int64_t ft_epochs = 10;
    int64_t subset = 1000;
};

void run_defend(const DefendFlags& f, std::ostream& out) {
    Model model = load_model(f.model);
    Dataset train = load_mnist(resolve_data_dir(f.data_dir), Split::train);
    if (f.subset <= 0 || f.subset > train.size())
        throw ConfigError("defend: --subset must lie in [1, train size]");
    // the defender's verifiably benign holdout: the tail of the canonical
    // train split, disjoint from the head-sized training subsets
    std::vector<int32_t> idx(static_cast<size_t>(f.subset));
    for (int64_t i = 0; i < f.subset; ++i)
        idx[static_cast<size_t>(i)] =
            static_cast<int32_t>(train.size() - f.subset + i);
    Dataset benign = train.subset(idx);

    json report;
    report["model"] = f.model;
    report["subset_size"] = f.subset;

    bool all = f.defense == "all";
    if (all || f.defense == "prune") {
        auto [pruned, prune_report] = prune_dormant(model, benign, f.fraction);
        Model tuned = fine_tune(pruned, benign, f.ft_epochs);
        json j;
        j["fraction"] = prune_report.fraction;
        j["pruned_count"] = prune_report.pruned.size();
        j["pruned"] = prune_report.pruned;
        j["fine_tune_epochs"] = f.ft_epochs;
        j["subset_accuracy_before"] = accuracy(model, benign);
        j["subset_accuracy_after"] = accuracy(tuned, benign);
        report["fine_pruning"] = std::move(j);
        if (!f.save_model_path.empty()) save_model(tuned, f.save_model_path);
    } else if (!f.save_model_path.empty()) {
        throw ConfigError("defend: --save-model requires the prune defense");
    }
    if (all || f.defense == "cleanse") {
        CleanseReport r = neural_cleanse(model, benign);
        json j;
        j["mask_l1"] = r.mask_l1;
        j["anomaly"] = r.anomaly;
        j["improved"] = r.improved;
        j["flagged"] = r.flagged;
        j["flagged_class"] = r.flagged_class;
        report["neural_cleanse"] = std::move(j);
    }
    if (all || f.defense == "tnd") {
        TndReport r = tnd_check(model, benign);
        json j;
        j["score"] = r.score;
        j["threshold"] = r.threshold;
        j["flagged"] = r.flagged;
        report["tnd"] = std::move(j);
    }

    std::string text = report.dump(2);
    text += '\n';
    if (f.out.empty()) {
        out << text;
    } else {
        std::ofstream file(f.out, std::ios::binary);
        if (!file)
            throw Error("defend: cannot open " + f.out + " for writing");
        file << text;
        if (!file) throw Error("defend: write to " + f.out + " failed");
        out << "defense report -> " << f.out << "\n";
    }
}

struct SweepFlags {
    std::string config, data_dir, out, method = "natural";
    std::vector<double> ratios;
    std::vector<double> eps = {0.02};
    uint64_t seed = 0, poison_seed = 0;
    int64_t epochs = 0, max_examples = 0;
    std::string eval_method = "crown";
};

void run_sweep(const SweepFlags& f, std::ostream& out) {
    ExperimentConfig cfg =
        f.config.empty() ? ExperimentConfig{} : load_config(f.config);
    cfg.train.method = method_from_name(f.method);
    cfg.train.seed = f.seed;
    if (f.epochs > 0) cfg.train.epochs = f.epochs;
    validate_config(cfg);
    EvalMethod method = eval_method_from_name(f.eval_method);

    std::filesystem::path dir = resolve_data_dir(
        f.data_dir.empty() ? cfg.data_dir : std::filesystem::path(f.data_dir));
    Dataset train = load_mnist(dir, Split::train);
    Dataset benign = load_mnist(dir, Split::test);
    if (f.max_examples > 0 && f.max_examples < benign.size())
        benign = benign.head(f.max_examples);
    Dataset backdoor = with_trigger(benign);

    // rows CSV with a leading poison-ratio column (the x axis of the
    // ratio/certification curve)
    std::string text =
        "ratio,method,attack,split,epsilon,accuracy,certified,seed,wall_seconds\n";
    for (double ratio : f.ratios) {
        if (!(ratio >= 0.0 && ratio <= 1.0))
            throw ConfigError("sweep: ratios must lie in [0,1]");
        auto t0 = Clock::now();
        Model victim =
            run_indirect_attack(train, {ratio, f.poison_seed}, cfg.train);
        double train_wall = seconds_since(t0);

        for (const auto& [split_name, data] :
             {std::pair<const char*, const Dataset*>{"benign", &benign},
              std::pair<const char*, const Dataset*>{"backdoor", &backdoor}}) {
            double acc = accuracy(victim, *data);
            for (double eps : f.eps) {
                auto t1 = Clock::now();
                double cert = certified_robustness(victim, *data, eps,
                                                   method.bound,
                                                   method.relaxation);
                ReportRow row;
                row.method = f.method;
                row.attack = ratio > 0 ? "indirect" : "none";
                row.split = split_name;
                row.epsilon = eps;
                row.accuracy = acc;
                row.certified = cert;
                row.seed = f.seed;
                row.wall_seconds = seconds_since(t1);
                validate_row(row);
                text += shortest(ratio) + ',' + row.method + ',' + row.attack +
                        ',' + row.split + ',' + shortest(row.epsilon) + ',' +
                        shortest(row.accuracy) + ',' + shortest(row.certified) +
                        ',' + std::to_string(row.seed) + ',' +
                        shortest(row.wall_seconds) + '\n';
                out << "ratio=" << shortest(ratio) << " split=" << split_name
                    << " eps=" << shortest(eps)
                    << " accuracy=" << shortest(acc)
                    << " certified=" << shortest(cert) << "\n";
            }
        }
        out << "ratio=" << shortest(ratio)
            << " train_wall=" << display(train_wall) << "s\n";
    }
    std::ofstream file(f.out, std::ios::binary);
    if (!file) throw Error("sweep: cannot open " + f.out + " for writing");
    file << text;
    if (!file) throw Error("sweep: write to " + f.out + " failed");
}

struct FallbackFlags {
    double u_model = 0, u_fallback = 0, c_model = 0, c_fallback = 0, a = 0;
};

void run_fallback(const FallbackFlags& f, std::ostream& out) {
    auto [u_total, c_total] =
        fallback_impact({f.u_model, f.u_fallback, f.c_model, f.c_fallback, f.a});
    out << "u_total = " << display(u_total) << "\n"
        << "c_total = " << display(c_total) << "\n";
}

struct ReportFlags {
    std::vector<std::string> rows_paths;
    std::string format = "markdown", out;
};

void run_report(const ReportFlags& f, std::ostream& out) {
    std::vector<ReportRow> rows;
    for (const std::string& path : f.rows_paths) {
        auto part = load_report_csv(path);
        rows.insert(rows.end(), part.begin(), part.end());
    }
    std::string text =
        f.format == "csv" ? render_csv(rows) : render_markdown(rows);
    if (f.out.empty()) {
        out << text;
    } else {
        std::ofstream file(f.out, std::ios::binary);
        if (!file)
            throw Error("report: cannot open " + f.out + " for writing");
        file << text;
        if (!file) throw Error("report: write to " + f.out + " failed");
        out << "report -> " << f.out << "\n";
    }
}

} // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err) {
    CLI::App app{"certlab: a desk-scale laboratory for certified robustness "
                 "of small networks, the backdoors that break it, and the "
                 "defenses that miss them"};
    app.require_subcommand(1);

    TrainFlags train_flags;
    auto* train_sub =
        app.add_subcommand("train", "train a model and save it");
    add_train_flags(train_sub, train_flags, true);

    TrainFlags attack_flags;
    auto* attack_sub = app.add_subcommand(
        "attack-direct",
        "train with the certification-breaking objective and save the model");
    add_train_flags(attack_sub, attack_flags, false);

    CertifyFlags certify_flags;
    auto* certify_sub = app.add_subcommand(
        "certify", "evaluate accuracy and certified robustness of a model on "
                   "the benign and triggered splits");
    certify_sub->add_option("--model", certify_flags.model, "model file")
        ->required();
    certify_sub->add_option("--data", certify_flags.data_split,
                            "data split to evaluate")
        ->check(CLI::IsMember({"test", "train"}));
    certify_sub->add_option("--data-dir", certify_flags.data_dir,
                            "directory holding the MNIST IDX files");
    auto* eps_opt = certify_sub
                        ->add_option("--eps", certify_flags.eps,
                                     "radii to certify, e.g. 0.01,0.02")
                        ->delimiter(',');
    certify_sub->add_flag("--full", certify_flags.full,
                          "use the full radius grid 0.01..0.05");
    certify_sub->add_option("--method", certify_flags.method,
                            "bound method: ibp, crown-ibp, crown, deeppoly");
    certify_sub->add_option("--attack", certify_flags.attack,
                            "attack label for the emitted rows")
        ->check(CLI::IsMember({"none", "direct", "indirect"}));
    certify_sub->add_option("--max-examples", certify_flags.max_examples,
                            "evaluate only the first N examples (0: all)");
    certify_sub->add_option("--out", certify_flags.out,
                            "rows CSV to write (default: stdout)");
    certify_sub->callback([&certify_flags, eps_opt]() {
        if (!certify_flags.full && eps_opt->count() == 0)
            throw CLI::RequiredError("--eps (or --full)");
    });

    PoisonFlags poison_flags;
    auto* poison_sub = app.add_subcommand(
        "poison", "write a poisoned copy of the train split as an IDX pair");
    poison_sub->add_option("--ratio", poison_flags.ratio,
                           "poison fraction of the benign train set")
        ->required();
    poison_sub->add_option("--seed", poison_flags.seed, "poison sampling seed");
    poison_sub->add_option("--data-dir", poison_flags.data_dir,
                           "directory holding the MNIST IDX files");
    poison_sub->add_option("--out", poison_flags.out, "output directory")
        ->required();

    DefendFlags defend_flags;
    auto* defend_sub = app.add_subcommand(
        "defend", "run backdoor defenses against a model and emit a JSON "
                  "report");
    defend_sub->add_option("--model", defend_flags.model, "model file")
        ->required();
    defend_sub->add_option("--defense", defend_flags.defense,
                           "which defense to run")
        ->check(CLI::IsMember({"prune", "cleanse", "tnd", "all"}));
    defend_sub->add_option("--fraction", defend_flags.fraction,
                           "fraction of penultimate neurons to prune");
    defend_sub->add_option("--ft-epochs", defend_flags.ft_epochs,
                           "fine-tune epochs after pruning");
    defend_sub->add_option("--subset", defend_flags.subset,
                           "benign holdout size from the train split tail");
    defend_sub->add_option("--data-dir", defend_flags.data_dir,
                           "directory holding the MNIST IDX files");
    defend_sub->add_option("--out", defend_flags.out,
                           "JSON report file (default: stdout)");
    defend_sub->add_option("--save-model", defend_flags.save_model_path,
                           "write the pruned and fine-tuned model here");

    SweepFlags sweep_flags;
    auto* sweep_sub = app.add_subcommand(
        "sweep", "train one poisoned victim per ratio and certify it");
    sweep_sub->add_option("--ratios", sweep_flags.ratios,
                          "poison ratios, e.g. 0,0.005,0.01")
        ->delimiter(',')
        ->required();
    sweep_sub->add_option("--eps", sweep_flags.eps, "evaluation radii")
        ->delimiter(',');
    sweep_sub->add_option("--method", sweep_flags.method, "victim training method")
        ->check(CLI::IsMember({"natural", "adversarial", "provable"}));
    sweep_sub->add_option("--eval-method", sweep_flags.eval_method,
                          "bound method for evaluation");
    sweep_sub->add_option("--epochs", sweep_flags.epochs,
                          "victim epochs (0: method default)");
    sweep_sub->add_option("--seed", sweep_flags.seed, "victim training seed");
    sweep_sub->add_option("--poison-seed", sweep_flags.poison_seed,
                          "poison sampling seed");
    sweep_sub->add_option("--max-examples", sweep_flags.max_examples,
                          "evaluate only the first N examples (0: all)");
    sweep_sub->add_option("--config", sweep_flags.config,
                          "experiment config file");
    sweep_sub->add_option("--data-dir", sweep_flags.data_dir,
                          "directory holding the MNIST IDX files");
    sweep_sub->add_option("--out", sweep_flags.out, "ratio-keyed rows CSV")
        ->required();

    FallbackFlags fb_flags;
    auto* fb_sub = app.add_subcommand(
        "fallback-impact",
        "system utility and cost when abstains invoke a fallback");
    fb_sub->add_option("--u-model", fb_flags.u_model, "model utility in [0,1]")
        ->required();
    fb_sub->add_option("--u-fallback", fb_flags.u_fallback,
                       "fallback utility in [0,1]")
        ->required();
    fb_sub->add_option("--c-model", fb_flags.c_model, "model cost per input")
        ->required();
    fb_sub->add_option("--c-fallback", fb_flags.c_fallback,
                       "fallback cost per input")
        ->required();
    fb_sub->add_option("--abstain", fb_flags.a, "abstain rate in [0,1]")
        ->required();

    ReportFlags report_flags;
    auto* report_sub = app.add_subcommand(
        "report", "format measured rows; never recomputes metrics");
    report_sub->add_option("--rows", report_flags.rows_paths,
                           "rows CSV files to combine")
        ->required();
    report_sub->add_option("--format", report_flags.format, "output format")
        ->check(CLI::IsMember({"csv", "markdown"}));
    report_sub->add_option("--out", report_flags.out,
                           "output file (default: stdout)");

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("certlab");
    for (const std::string& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        const CLI::App* target = &app;
        auto parsed = app.get_subcommands();
        if (!parsed.empty()) target = parsed.front();
        out << target->help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        const CLI::App* target = &app;
        auto parsed = app.get_subcommands();
        if (!parsed.empty()) target = parsed.front();
        err << "error: " << e.what() << "\n\n" << target->help();
        return 2;
    }

    try {
        if (train_sub->parsed()) run_train(train_flags, std::nullopt, out);
        else if (attack_sub->parsed())
            run_train(attack_flags, TrainMethod::direct_attack, out);
        else if (certify_sub->parsed()) run_certify(certify_flags, out);
        else if (poison_sub->parsed()) run_poison(poison_flags, out);
        else if (defend_sub->parsed()) run_defend(defend_flags, out);
        else if (sweep_sub->parsed()) run_sweep(sweep_flags, out);
        else if (fb_sub->parsed()) run_fallback(fb_flags, out);
        else if (report_sub->parsed()) run_report(report_flags, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace certlab
