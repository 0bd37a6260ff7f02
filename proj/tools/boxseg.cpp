#include "boxseg/config.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace boxseg;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_config, bool with_seed) {
    if (with_config) cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    if (with_seed) cmd->add_option("--seed", c.seed, "Seed overriding the config");
    cmd->add_option("--out", c.out, "Output path")->required();
    cmd->add_flag("--force", c.force, "Replace existing output");
}

/// Directory outputs must be absent or empty unless forced.
void prepare_out_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw Error("output " + dir.string() + " exists and is not a directory");
        if (!fs::is_empty(dir)) {
            if (!force) throw Error("output directory " + dir.string() + " is not empty (use --force)");
            fs::remove_all(dir);
        }
    }
    fs::create_directories(dir);
}

void prepare_out_file(const fs::path& file, bool force) {
    if (fs::exists(file) && !force) throw Error("output file " + file.string() + " exists (use --force)");
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

class Manifest {
public:
    explicit Manifest(std::string subcommand) : start_(std::chrono::steady_clock::now()) {
        j_["subcommand"] = std::move(subcommand);
    }

    Json& operator[](const char* key) { return j_[key]; }

    void write(const fs::path& path) {
        j_["version"] = kVersion;
        j_["duration_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        write_file_atomic(path, j_.dump(2) + "\n");
    }

private:
    Json j_;
    std::chrono::steady_clock::time_point start_;
};

Json read_config(const std::string& path) { return path.empty() ? Json::object() : load_json_file(path); }

int cmd_gen_data(const Common& c) {
    SynthConfig cfg = synth_config_from_json(read_config(c.config));
    if (c.seed) cfg.seed = *c.seed;
    const fs::path out = c.out;
    prepare_out_dir(out, c.force);
    Manifest m("gen-data");
    save_dataset(generate_synthetic(cfg), out);
    m["config"] = to_json(cfg);
    m["inputs"] = {{"config", c.config}};
    m["outputs"] = {{"dataset", out.string()}};
    m["seed"] = cfg.seed;
    m.write(out / "run_manifest.json");
    return 0;
}

int cmd_proposals(const Common& c, const std::string& data, const std::string& mode_name) {
    const ProposalMode mode = proposal_mode_from_string(mode_name);
    const CrfParams params = crf_params_from_json(read_config(c.config));
    const auto samples = load_dataset(data);
    const fs::path out = c.out;
    prepare_out_dir(out, c.force);
    Manifest m("proposals");
    save_dataset(generate_proposals(samples, mode, params, infer_num_classes(samples)), out);
    m["config"] = {{"mode", to_string(mode)}, {"crf", to_json(params)}};
    m["inputs"] = {{"dataset", data}, {"config", c.config}};
    m["outputs"] = {{"proposals", out.string()}};
    m["seed"] = nullptr;
    m.write(out / "run_manifest.json");
    return 0;
}

/// Proposal label maps aligned with the dataset's samples, checked by id.
std::vector<LabelMap> load_proposals(const std::vector<ImageSample>& samples, const std::string& dir) {
    const auto proposals = load_dataset(dir);
    if (proposals.size() != samples.size()) throw Error("proposals in " + dir + " do not match the dataset's sample count");
    std::vector<LabelMap> labels;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (proposals[i].id != samples[i].id) throw Error("proposal " + proposals[i].id + " does not match sample " + samples[i].id);
        labels.push_back(proposals[i].gt_labels);
    }
    return labels;
}

int cmd_frstats(const Common& c, const std::string& data, const std::string& proposals_dir, int k) {
    const std::uint64_t seed = c.seed.value_or(7);
    const auto samples = load_dataset(data);
    const auto labels = load_proposals(samples, proposals_dir);
    std::vector<std::vector<Box>> boxes;
    for (const ImageSample& s : samples) boxes.push_back(s.boxes);
    const fs::path out = c.out;
    prepare_out_file(out, c.force);
    Manifest m("frstats");
    const FillRateTable table = build_fill_rate_table(collect_fill_samples(labels, boxes), k, seed);
    save_fill_rate_table(table, out);
    std::cout << format_fill_rate_report(table);
    m["config"] = {{"k", k}, {"seed", seed}, {"aspect_weight", table.aspect_weight}};
    m["inputs"] = {{"dataset", data}, {"proposals", proposals_dir}};
    m["outputs"] = {{"fill_rates", out.string()}};
    m["seed"] = seed;
    m.write(out.string() + ".manifest.json");
    return 0;
}

struct TrainFlags {
    std::string data, proposals, fr_table, supervision;
    std::optional<double> lambda, semi_fraction;
    std::optional<int> iterations;
};

int cmd_train(const Common& c, const TrainFlags& f) {
    TrainConfig cfg = train_config_from_json(read_config(c.config));
    Json overrides = Json::object();
    if (!f.supervision.empty()) overrides["supervision"] = f.supervision;
    if (f.lambda) overrides["lambda"] = *f.lambda;
    if (f.iterations) overrides["iterations"] = *f.iterations;
    if (f.semi_fraction) overrides["semi_fraction"] = *f.semi_fraction;
    if (c.seed) overrides["seed"] = *c.seed;
    apply_train_config(overrides, cfg);

    const FrMode fr_mode = cfg.effective_fr_mode();
    const bool needs_table = fr_mode == FrMode::ClassFr || fr_mode == FrMode::SubclassFr;
    if (needs_table && f.fr_table.empty())
        throw Error("supervision " + to_string(cfg.supervision) + " needs a fill-rate table (--fr-table)");
    std::optional<FillRateTable> table;
    if (!f.fr_table.empty()) table = load_fill_rate_table(f.fr_table);
    const auto samples = load_dataset(f.data);
    const auto labels = load_proposals(samples, f.proposals);

    const fs::path out = c.out;
    prepare_out_dir(out, c.force);
    Manifest m("train");
    TrainLog log;
    const ModelState<float> state = train(samples, labels, table ? &*table : nullptr, cfg, &log);
    save_checkpoint(state, out / "checkpoint.bin");
    write_file_atomic(out / "train_log.csv", log.to_csv());
    m["config"] = to_json(cfg);
    m["effective_fr_mode"] = to_string(fr_mode);
    m["inputs"] = {{"dataset", f.data}, {"proposals", f.proposals}, {"fr_table", f.fr_table}, {"config", c.config}};
    m["outputs"] = {{"checkpoint", (out / "checkpoint.bin").string()}, {"log", (out / "train_log.csv").string()}};
    m["seed"] = cfg.seed;
    m.write(out / "run_manifest.json");
    return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data) {
    const ModelState<float> state = load_checkpoint(checkpoint);
    const auto samples = load_dataset(data);
    const fs::path out = c.out;
    prepare_out_file(out, c.force);
    Manifest m("eval");
    EvalReport report = evaluate_miou(state, samples);
    const Json echo = {{"checkpoint", checkpoint},
                       {"checkpoint_fnv1a", fnv1a(read_file(checkpoint))},
                       {"dataset", data},
                       {"masking", state.arch.masking},
                       {"attention", to_string(state.arch.attention)}};
    report.config_echo = echo.dump();
    report.fingerprint = fingerprint(echo);
    report.seed = c.seed.value_or(0);
    write_file_atomic(out, report.to_text());
    std::cout << "mean_iou " << report.mean_iou << '\n';
    m["config"] = echo;
    m["inputs"] = {{"checkpoint", checkpoint}, {"dataset", data}};
    m["outputs"] = {{"report", out.string()}};
    m["seed"] = report.seed;
    m.write(out.string() + ".manifest.json");
    return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t comma = text.find(',', pos);
        const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            std::size_t used = 0;
            seeds.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw Error("--seeds: not a seed list: " + text);
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return seeds;
}

int cmd_ablate(const Common& c, const std::string& data, const std::string& seeds_text) {
    AblationSpec spec = ablation_spec_from_json(read_config(c.config));
    if (!seeds_text.empty()) spec.seeds = parse_seeds(seeds_text);
    if (c.seed) spec.cluster_seed = *c.seed;
    auto samples = load_dataset(data);
    if (static_cast<std::size_t>(spec.train_count) >= samples.size())
        throw Error("ablation: train_count " + std::to_string(spec.train_count) + " leaves no validation samples");
    std::vector<ImageSample> validation(samples.begin() + spec.train_count, samples.end());
    samples.resize(static_cast<std::size_t>(spec.train_count));

    const fs::path out = c.out;
    prepare_out_dir(out, c.force);
    Manifest m("ablate");
    const AblationInputs inputs = prepare_ablation(std::move(samples), std::move(validation), spec.crf, spec.k, spec.cluster_seed);
    const auto rows = run_ablation(inputs, spec.grid(), spec.seeds, [](const TrainConfig& cfg, std::uint64_t seed, double miou) {
        std::cerr << cfg.name << " seed " << seed << " miou " << miou << '\n';
    });
    write_file_atomic(out / "ablation.csv", ablation_to_csv(rows));
    Json grid = Json::array();
    for (const AblationRow& r : rows) grid.push_back(to_json(r.config));
    m["config"] = to_json(spec);
    m["config"]["effective_grid"] = grid;
    m["inputs"] = {{"dataset", data}, {"config", c.config}};
    m["outputs"] = {{"table", (out / "ablation.csv").string()}};
    m["seed"] = spec.cluster_seed;
    m.write(out / "run_manifest.json");
    std::cout << ablation_to_csv(rows);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Box-supervised segmentation pipeline"};
    app.set_version_flag("--version", std::string("boxseg ") + kVersion);
    app.require_subcommand(1);

    Common gen, prop, fr, tr, ev, ab;
    std::string prop_data, prop_mode = "crf", fr_data, fr_props, ev_ckpt, ev_data, ab_data, ab_seeds;
    int k = 3;
    TrainFlags tf;

    auto* g = app.add_subcommand("gen-data", "Generate a synthetic shape corpus");
    add_common(g, gen, true, true);

    auto* p = app.add_subcommand("proposals", "Box-like or CRF proposals for a dataset");
    add_common(p, prop, true, false);
    p->add_option("--data", prop_data, "Dataset directory")->required();
    p->add_option("--mode", prop_mode, "box or crf")->check(CLI::IsMember({"box", "crf"}));

    auto* f = app.add_subcommand("frstats", "Fill-rate table from proposals");
    add_common(f, fr, false, true);
    f->add_option("--data", fr_data, "Dataset directory")->required();
    f->add_option("--proposals", fr_props, "Proposals directory")->required();
    f->add_option("--k", k, "Sub-classes per class")->check(CLI::PositiveNumber);

    auto* t = app.add_subcommand("train", "Train a model");
    add_common(t, tr, true, true);
    t->add_option("--data", tf.data, "Dataset directory")->required();
    t->add_option("--proposals", tf.proposals, "Proposals directory")->required();
    t->add_option("--fr-table", tf.fr_table, "Fill-rate table file");
    t->add_option("--supervision", tf.supervision, "Supervision setting");
    t->add_option("--lambda", tf.lambda, "Mask loss weight");
    t->add_option("--iterations", tf.iterations, "SGD iterations");
    t->add_option("--semi-fraction", tf.semi_fraction, "Fraction of samples supervised by ground truth");

    auto* e = app.add_subcommand("eval", "Evaluate mean IoU of a checkpoint");
    add_common(e, ev, false, true);
    e->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
    e->add_option("--data", ev_data, "Dataset directory")->required();

    auto* a = app.add_subcommand("ablate", "Run an ablation grid");
    add_common(a, ab, true, true);
    a->add_option("--data", ab_data, "Dataset directory; the first train_count samples train")->required();
    a->add_option("--seeds", ab_seeds, "Comma-separated training seeds");

    CLI11_PARSE(app, argc, argv);

    try {
        if (g->parsed()) return cmd_gen_data(gen);
        if (p->parsed()) return cmd_proposals(prop, prop_data, prop_mode);
        if (f->parsed()) return cmd_frstats(fr, fr_data, fr_props, k);
        if (t->parsed()) return cmd_train(tr, tf);
        if (e->parsed()) return cmd_eval(ev, ev_ckpt, ev_data);
        if (a->parsed()) return cmd_ablate(ab, ab_data, ab_seeds);
    } catch (const std::exception& ex) {
        std::cerr << "boxseg: error: " << ex.what() << '\n';
        return 1;
    }
    return 1;
}
