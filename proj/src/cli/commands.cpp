#include "fer/cli/commands.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "fer/checkpoint.hpp"
#include "fer/cli/config.hpp"
#include "fer/cli/ingest.hpp"
#include "fer/evaluation.hpp"
#include "fer/gradcheck_suite.hpp"
#include "fer/synth.hpp"
#include "fer/training.hpp"

namespace fer::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class CommandError : public std::runtime_error {
public:
    explicit CommandError(const std::string& what, int code = 1) : std::runtime_error(what), code_(code) {}
    int code() const { return code_; }

private:
    int code_;
};

struct Options {
    std::string config;
    std::string data;
    std::string landmarks;
    std::string checkpoint;
    std::string out_dir = ".";
    std::string split = "final-test";
    std::vector<std::string> specs;
    std::optional<std::string> preset;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> batch_size;
    std::optional<std::size_t> row;
    std::size_t count = 64;
    std::size_t points = 100;
    bool image_only = false;
};

std::ofstream open_output(const fs::path& path)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw CommandError("cannot write '" + path.string() + "'");
    }
    return out;
}

fs::path ensure_dir(const std::string& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw CommandError("cannot create output directory '" + dir + "': " + ec.message());
    }
    return fs::path(dir);
}

std::string hex64(std::uint64_t v)
{
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

LoadedData load(const Options& o, std::ostream& err)
{
    if (o.data.empty() || o.landmarks.empty()) {
        throw CommandError("--data and --landmarks are required", 2);
    }
    LoadedData d;
    try {
        d = load_dataset(o.data, o.landmarks);
    } catch (const std::runtime_error& e) {
        throw CommandError(e.what());
    }
    for (const RowRejection& r : d.csv_rejections) {
        err << o.data << ":" << r.line << ": rejected: " << r.reason << '\n';
    }
    for (const RowRejection& r : d.landmark_rejections) {
        err << o.landmarks << ":" << r.line << ": rejected: " << r.reason << '\n';
    }
    for (const std::string& w : d.warnings) {
        err << "warning: " << w << '\n';
    }
    return d;
}

Dataset select_split(const Dataset& data, const std::string& split)
{
    if (split == "all") {
        return data;
    }
    for (Split s : {Split::Train, Split::PublicTest, Split::FinalTest}) {
        if (split == split_name(s)) {
            return filter_split(data, s);
        }
    }
    throw CommandError("unknown split '" + split + "' (expected train, public-test, final-test or all)", 2);
}

Dataset require_split(const Dataset& data, const std::string& split)
{
    Dataset selected = select_split(data, split);
    if (selected.empty()) {
        throw CommandError("no usable samples in split '" + split + "'");
    }
    return selected;
}

FerNetwork<float> load_network(const Options& o)
{
    if (o.checkpoint.empty()) {
        throw CommandError("--checkpoint is required", 2);
    }
    try {
        const std::vector<std::uint8_t> bytes = read_binary_file(o.checkpoint);
        ArchConfig arch;
        if (o.preset) {
            arch = ArchConfig::preset(*o.preset);
        } else if (auto detected = detect_architecture(bytes)) {
            arch = *detected;
        } else {
            throw CommandError(o.checkpoint + ": architecture fingerprint matches no built-in preset");
        }
        return load_checkpoint<float>(bytes, arch);
    } catch (const CheckpointError& e) {
        throw CommandError(o.checkpoint + ": " + e.what());
    }
}

json manifest_json(const DatasetManifest& m)
{
    json splits = json::object();
    for (const auto& [split, n] : m.split_counts) {
        splits[std::string(split_name(split))] = n;
    }
    return {{"csv", m.csv_path},
            {"landmarks", m.landmark_path},
            {"samples", m.sample_count},
            {"rejected_rows", m.rejected_rows},
            {"missing_landmarks", m.missing_landmarks},
            {"splits", splits},
            {"digest", hex64(m.digest)}};
}

json optional_number(const std::optional<double>& v)
{
    return v ? json(*v) : json(nullptr);
}

// ---------------------------------------------------------------------------

int cmd_train(const Options& o, std::ostream& out, std::ostream& err)
{
    TrainConfig cfg;
    if (!o.config.empty()) {
        std::ifstream in(o.config);
        if (!in) {
            throw CommandError("cannot read config '" + o.config + "'");
        }
        apply_config(cfg, parse_config(in));
    }
    if (o.seed) {
        cfg.seed = *o.seed;
    }
    if (o.preset) {
        cfg.preset = *o.preset;
    }
    if (o.epochs) {
        cfg.epochs = *o.epochs;
    }
    if (o.batch_size) {
        cfg.batch_size = *o.batch_size;
    }
    cfg.augment.seed = cfg.seed;
    cfg.validate();
    const ArchConfig arch = ArchConfig::preset(cfg.preset);

    const LoadedData data = load(o, err);
    const Dataset train_set = require_split(data.samples, "train");
    const Dataset val_set = filter_split(data.samples, Split::PublicTest);

    const fs::path dir = ensure_dir(o.out_dir);
    const fs::path ckpt = o.checkpoint.empty() ? dir / "model.ferm" : fs::path(o.checkpoint);
    open_output(dir / "config.txt") << format_config(cfg);
    open_output(dir / "manifest.json") << manifest_json(data.manifest).dump(2) << '\n';

    std::ofstream log = open_output(dir / "run_log.jsonl");
    FerNetwork<float> net(arch, cfg.seed);
    const TrainResult result =
        train(net, train_set, val_set.empty() ? nullptr : &val_set, cfg, [&](const EpochRecord& r) {
            const json rec = {{"epoch", r.epoch}, {"loss", r.loss}, {"train_acc", r.train_acc}, {"val_acc", r.val_acc}};
            log << rec.dump() << '\n';
            log.flush();
        });
    write_binary_file(ckpt, save_checkpoint(net));

    if (result.diverged) {
        err << "training diverged (non-finite loss) in epoch " << result.diverged_epoch
            << "; checkpoint holds the parameters after epoch " << result.history.size() << '\n';
        return 3;
    }
    const EpochRecord& last = result.history.back();
    out << "trained " << result.history.size() << " epochs (" << result.optimizer_steps << " steps) on "
        << train_set.size() << " samples; loss " << last.loss << ", train_acc " << last.train_acc;
    if (!val_set.empty()) {
        out << ", val_acc " << last.val_acc;
    }
    out << "\ncheckpoint: " << ckpt.string() << '\n';
    return 0;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err)
{
    const FerNetwork<float> net = load_network(o);
    const LoadedData data = load(o, err);
    const Dataset test = require_split(data.samples, o.split);
    const EvaluationReport report = evaluate(net, test);

    const fs::path dir = ensure_dir(o.out_dir);
    {
        std::ofstream roc = open_output(dir / "roc.csv");
        write_roc_csv(roc, report.roc);
    }
    {
        std::ofstream cm = open_output(dir / "confusion.csv");
        write_confusion_csv(cm, report.confusion);
    }
    json per_class = json::array();
    json auc = json::array();
    for (std::size_t c = 0; c < report.roc.size(); ++c) {
        per_class.push_back(optional_number(report.accuracy.per_class[c]));
        auc.push_back(report.roc[c].defined ? json(report.roc[c].auc) : json(nullptr));
    }
    const json metrics = {{"split", o.split},          {"samples", test.size()},
                          {"overall", report.accuracy.overall}, {"macro", report.accuracy.macro},
                          {"per_class", per_class},    {"auc", auc}};
    open_output(dir / "metrics.json") << metrics.dump(2) << '\n';

    out << "samples " << test.size() << "\noverall " << report.accuracy.overall << "\nmacro "
        << report.accuracy.macro << '\n';
    for (std::size_t c = 0; c < report.roc.size(); ++c) {
        const std::string name = c < kExpressionNames.size() ? std::string(kExpressionNames[c]) : std::to_string(c);
        out << name << ": accuracy ";
        if (report.accuracy.per_class[c]) {
            out << *report.accuracy.per_class[c];
        } else {
            out << "undefined";
        }
        out << ", auc ";
        if (report.roc[c].defined) {
            out << report.roc[c].auc;
        } else {
            out << "undefined";
        }
        out << '\n';
    }
    return 0;
}

int cmd_predict(const Options& o, std::ostream& out, std::ostream& err)
{
    if (!o.row) {
        throw CommandError("--row is required", 2);
    }
    const FerNetwork<float> net = load_network(o);
    const LoadedData data = load(o, err);
    const auto it = std::find_if(data.samples.begin(), data.samples.end(),
                                 [&](const MultimodalSample& s) { return s.id == *o.row; });
    if (it == data.samples.end()) {
        throw CommandError("row " + std::to_string(*o.row) + " is not a usable sample");
    }
    const BasicTensor<float> probs = net.forward_full(assemble_input<float>(std::span(&*it, 1)));
    const Prediction p = predict_expression(probs.data());
    std::ostringstream line;
    line << p.class_name() << ' ' << p.class_index << std::fixed << std::setprecision(9);
    for (double v : p.probabilities) {
        line << ' ' << v;
    }
    out << line.str() << '\n';
    return 0;
}

int cmd_gradcheck(const Options& o, std::ostream& out, std::ostream&)
{
    GradCheckSuiteOptions opt;
    opt.seed = o.seed.value_or(0);
    opt.points = o.points;
    bool ok = true;
    double total = 0.0;
    for (const std::string& layer : gradcheck_layers()) {
        const LayerCheck c = run_layer_check(layer, opt);
        ok = ok && c.passed();
        total += c.seconds;
        out << std::left << std::setw(24) << c.layer << std::right << " max_rel_error " << std::scientific
            << std::setprecision(3) << c.report.max_rel_error << " (tol " << c.tolerance << ")" << std::defaultfloat
            << " checked " << c.report.checked << " skipped " << c.report.skipped << " worst "
            << (c.report.worst.empty() ? "-" : c.report.worst) << ' ' << (c.passed() ? "PASS" : "FAIL") << '\n';
    }
    out << "total " << std::fixed << std::setprecision(2) << total << "s " << (ok ? "PASS" : "FAIL") << '\n';
    return ok ? 0 : 1;
}

int cmd_perturb(const Options& o, std::ostream& out, std::ostream& err)
{
    const FerNetwork<float> net = load_network(o);
    const LoadedData data = load(o, err);
    const Dataset samples = require_split(data.samples, o.split);
    std::vector<PerturbSpec> specs;
    const std::vector<std::string> names =
        o.specs.empty() ? std::vector<std::string>{"mouth", "eyes", "bright", "dark"} : o.specs;
    for (const std::string& n : names) {
        try {
            specs.push_back(parse_perturb_spec(n));
        } catch (const std::invalid_argument& e) {
            throw CommandError(e.what(), 2);
        }
    }
    const std::vector<RobustnessRow> rows = robustness_eval(net, samples, specs, {o.image_only});
    const fs::path dir = ensure_dir(o.out_dir);
    {
        std::ofstream csv = open_output(dir / "robustness.csv");
        write_robustness_csv(csv, rows);
    }
    write_robustness_csv(out, rows);
    return 0;
}

int cmd_synth(const Options& o, std::ostream& out, std::ostream&)
{
    const Dataset data = make_synthetic_dataset(o.count, o.seed.value_or(0));
    const fs::path dir = ensure_dir(o.out_dir);
    {
        std::ofstream csv = open_output(dir / "synth.csv");
        write_fer_csv(csv, data);
    }
    {
        std::ofstream lm = open_output(dir / "synth_landmarks.txt");
        write_landmarks(lm, data);
    }
    out << "wrote " << data.size() << " samples to " << (dir / "synth.csv").string() << " and "
        << (dir / "synth_landmarks.txt").string() << '\n';
    return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Multimodal facial expression recognition: train, evaluate and probe the network", "fer"};
    app.require_subcommand(1);
    Options o;

    auto data_opts = [&](CLI::App* sub) {
        sub->add_option("--data", o.data, "FER2013-layout CSV (emotion,pixels,Usage)");
        sub->add_option("--landmarks", o.landmarks, "Landmark sidecar: id followed by 136 coordinates per line");
    };
    auto model_opts = [&](CLI::App* sub) {
        sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
        sub->add_option("--preset", o.preset, "Architecture preset (paper|tiny); detected from the checkpoint if omitted")
            ->check(CLI::IsMember({"paper", "tiny"}));
    };

    CLI::App* train_cmd = app.add_subcommand("train", "Train a network and write a checkpoint and run log");
    train_cmd->add_option("--config", o.config, "key = value configuration file");
    data_opts(train_cmd);
    train_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint output (default <out-dir>/model.ferm)");
    train_cmd->add_option("--preset", o.preset, "Architecture preset (paper|tiny)")->check(CLI::IsMember({"paper", "tiny"}));
    train_cmd->add_option("--seed", o.seed, "Seed for initialization, shuffling and augmentation");
    train_cmd->add_option("--epochs", o.epochs, "Number of epochs");
    train_cmd->add_option("--batch-size", o.batch_size, "Mini-batch size");
    train_cmd->add_option("--out-dir", o.out_dir, "Directory for run artifacts");

    CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint and write metrics CSVs");
    model_opts(eval_cmd);
    data_opts(eval_cmd);
    eval_cmd->add_option("--split", o.split, "train, public-test, final-test or all");
    eval_cmd->add_option("--out-dir", o.out_dir, "Directory for roc.csv, confusion.csv and metrics.json");

    CLI::App* predict_cmd = app.add_subcommand("predict", "Classify one sample");
    model_opts(predict_cmd);
    data_opts(predict_cmd);
    predict_cmd->add_option("--row", o.row, "0-based data row of the sample in the CSV");

    CLI::App* grad_cmd = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
    grad_cmd->add_option("--seed", o.seed, "Seed for the random test points");
    grad_cmd->add_option("--points", o.points, "Coordinates checked per layer")->check(CLI::PositiveNumber);

    CLI::App* perturb_cmd = app.add_subcommand("perturb", "Robustness report under occlusion and brightness changes");
    model_opts(perturb_cmd);
    data_opts(perturb_cmd);
    perturb_cmd->add_option("--split", o.split, "train, public-test, final-test or all");
    perturb_cmd->add_option("--spec", o.specs,
                            "mouth, eyes, bright, dark, brightness:<f> or occlude:<r0>-<r1>:<c0>-<c1> (repeatable)");
    perturb_cmd->add_flag("--image-only", o.image_only, "Keep the original HOG input; perturb the image branch only");
    perturb_cmd->add_option("--out-dir", o.out_dir, "Directory for robustness.csv");

    CLI::App* synth_cmd = app.add_subcommand("synth", "Write the seeded synthetic dataset");
    synth_cmd->add_option("--seed", o.seed, "Dataset seed");
    synth_cmd->add_option("--count", o.count, "Number of samples")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--out-dir", o.out_dir, "Directory for synth.csv and synth_landmarks.txt");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (train_cmd->parsed()) {
            return cmd_train(o, out, err);
        }
        if (eval_cmd->parsed()) {
            return cmd_eval(o, out, err);
        }
        if (predict_cmd->parsed()) {
            return cmd_predict(o, out, err);
        }
        if (grad_cmd->parsed()) {
            return cmd_gradcheck(o, out, err);
        }
        if (perturb_cmd->parsed()) {
            return cmd_perturb(o, out, err);
        }
        return cmd_synth(o, out, err);
    } catch (const CommandError& e) {
        err << "error: " << e.what() << '\n';
        return e.code();
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace fer::cli
