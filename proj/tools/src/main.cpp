// liverformer CLI: the pipeline as batch subcommands. Every subcommand is a
// pure function of its inputs and seeds; re-running writes identical bytes.
// Exit codes: 0 success, 1 data error (bad file, failed precondition),
// 2 usage error (unknown flag, missing argument).

#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "liverformer/augment.hpp"
#include "liverformer/checkpoint.hpp"
#include "liverformer/field.hpp"
#include "liverformer/metrics.hpp"
#include "liverformer/model.hpp"
#include "liverformer/nifti.hpp"
#include "liverformer/phantom.hpp"
#include "liverformer/preprocess.hpp"
#include "liverformer/registration.hpp"
#include "liverformer/run_config.hpp"
#include "liverformer/train.hpp"

namespace fs = std::filesystem;
using namespace liverformer;

namespace {

std::string resolve(const fs::path& base_dir, const std::string& p) {
    fs::path path(p);
    if (path.is_absolute()) return path.lexically_normal().string();
    return (base_dir / path).lexically_normal().string();
}

std::string relative_to(const fs::path& dir, const std::string& target) {
    std::error_code ec;
    const fs::path rel = fs::proximate(target, dir, ec);
    if (ec || rel.empty()) return target;
    return rel.generic_string();
}

ImageVolume load_image(const std::string& path) {
    return read_image_nifti(read_file_bytes(path));
}

LabelVolume load_labels(const std::string& path) {
    return read_label_nifti(read_file_bytes(path));
}

void store(const std::string& path, const ImageVolume& v) {
    write_file_bytes(path, write_nifti(v));
}

void store(const std::string& path, const LabelVolume& v) {
    write_file_bytes(path, write_nifti(v));
}

void write_text(const std::string& path, const std::string& text) {
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

RunConfig config_or_default(const std::string& path) {
    if (path.empty()) return RunConfig{};
    return load_run_config(path);
}

/// Loads every manifest entry; paths resolve relative to the manifest file.
std::vector<LabeledCase> load_cases(const std::string& manifest_path) {
    const fs::path base = fs::path(manifest_path).parent_path();
    std::vector<LabeledCase> cases;
    for (const ManifestEntry& e : read_manifest(manifest_path)) {
        LabeledCase c;
        c.id = e.id;
        c.image = load_image(resolve(base, e.image_path));
        c.labels = load_labels(resolve(base, e.labels_path));
        c.provenance = e.provenance;
        cases.push_back(std::move(c));
    }
    return cases;
}

/// Writes image+labels as NIfTI pairs into dir and returns manifest entries
/// with paths relative to dir.
std::vector<ManifestEntry> store_cases(const fs::path& dir,
                                       const std::vector<LabeledCase>& cases) {
    std::vector<ManifestEntry> entries;
    for (const LabeledCase& c : cases) {
        ManifestEntry e;
        e.id = c.id;
        e.image_path = c.id + ".nii";
        e.labels_path = c.id + "_labels.nii";
        e.provenance = c.provenance;
        store((dir / e.image_path).string(), c.image);
        store((dir / e.labels_path).string(), c.labels);
        entries.push_back(std::move(e));
    }
    return entries;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

// ----------------------------------------------------------- subcommand state

struct PhantomGenArgs {
    std::size_t n = 1;
    std::uint64_t seed = 0;
    std::string out, config;
};

struct PreprocessArgs {
    std::string in, out, config, kind = "image";
};

struct RegisterArgs {
    std::string fixed, moving, out_field, config;
};

struct AugmentArgs {
    std::string manifest, out, config;
    std::vector<std::string> templates;
};

struct TrainArgs {
    std::string manifest, config, out_run;
};

struct PredictArgs {
    std::string checkpoint, in, out, config;
};

struct EvaluateArgs {
    std::string pred, truth, out;
};

struct CompareArgs {
    std::vector<std::string> reports;
};

struct ViewArgs {
    std::string in, out, axis = "axial";
    std::size_t index = 0;
    bool labels = false;
};

// ------------------------------------------------------------------ commands

int run_phantom_gen(const PhantomGenArgs& a) {
    const RunConfig cfg = config_or_default(a.config);
    fs::create_directories(a.out);
    const std::vector<LabeledCase> cases = generate_dataset(a.n, cfg.phantom, a.seed);
    const std::vector<ManifestEntry> entries = store_cases(a.out, cases);
    write_manifest((fs::path(a.out) / "manifest.json").string(), entries);
    std::printf("generated: %zu\n", cases.size());
    return 0;
}

int run_preprocess(const PreprocessArgs& a) {
    const RunConfig cfg = config_or_default(a.config);
    if (a.kind == "image") {
        store(a.out, preprocess_image(load_image(a.in), cfg.preprocess));
    } else {
        store(a.out, preprocess_labels(load_labels(a.in), cfg.preprocess));
    }
    std::printf("wrote: %s\n", a.out.c_str());
    return 0;
}

int run_register(const RegisterArgs& a) {
    const RunConfig cfg = config_or_default(a.config);
    const VelocityField v =
        register_images(load_image(a.fixed), load_image(a.moving), cfg.registration);
    write_field(a.out_field, v);
    std::printf("max |v|: %s voxels\n", fmt(v.max_abs()).c_str());
    std::printf("wrote: %s\n", a.out_field.c_str());
    return 0;
}

int run_augment(const AugmentArgs& a) {
    const RunConfig cfg = config_or_default(a.config);
    const std::vector<LabeledCase> pool = load_cases(a.manifest);
    const std::vector<LabeledCase> synthesized =
        expand_dataset(a.templates, pool, cfg.registration, cfg.augment_partner_rule);

    fs::create_directories(a.out);
    std::vector<ManifestEntry> entries;
    // Originals keep their existing files; paths are rewritten relative to
    // the new manifest.
    const fs::path src_base = fs::path(a.manifest).parent_path();
    for (const ManifestEntry& e : read_manifest(a.manifest)) {
        ManifestEntry copy = e;
        copy.image_path = relative_to(a.out, resolve(src_base, e.image_path));
        copy.labels_path = relative_to(a.out, resolve(src_base, e.labels_path));
        entries.push_back(std::move(copy));
    }
    const std::vector<ManifestEntry> syn_entries = store_cases(a.out, synthesized);
    entries.insert(entries.end(), syn_entries.begin(), syn_entries.end());
    write_manifest((fs::path(a.out) / "manifest.json").string(), entries);

    const std::size_t t = a.templates.size(), n = pool.size();
    std::printf("synthesized: %zu\n", synthesized.size());
    const char* rule = cfg.augment_partner_rule == PartnerRule::ExcludeSelf
                           ? "exclude_self"
                           : "exclude_templates";
    std::printf("pairing rule %s: %zu templates x %zu pool\n", rule, t, n);
    std::printf("count under exclude_self: %zu; under exclude_templates: %zu\n",
                expected_synthesized_count(t, n, PartnerRule::ExcludeSelf),
                expected_synthesized_count(t, n, PartnerRule::ExcludeTemplates));
    std::size_t warned = 0;
    for (const LabeledCase& c : synthesized) {
        if (!c.provenance.classes_preserved) ++warned;
    }
    if (warned) {
        std::printf("warning: %zu synthesized cases lost a class during warping\n", warned);
    }
    return 0;
}

template <typename Model>
int train_model(Model& model, const RunConfig& cfg, std::vector<LabeledCase> cases,
                const std::string& out_run) {
    const SplitIndices split = split_dataset(
        cases.size(), {cfg.train.train_ratio, cfg.train.val_ratio, cfg.train.test_ratio},
        cfg.train.seed);
    std::vector<LabeledCase> train_cases, val_cases;
    for (std::size_t i : split.train) train_cases.push_back(cases[i]);
    for (std::size_t i : split.val) val_cases.push_back(cases[i]);
    std::printf("split: train %zu, val %zu, test %zu\n", split.train.size(),
                split.val.size(), split.test.size());

    Trainer<Model> trainer(model, std::move(train_cases), std::move(val_cases), cfg.train);
    for (int e = 0; e < cfg.train.epochs; ++e) {
        const EpochStats s = trainer.run_epoch();
        if (std::isnan(s.val_dice)) {
            std::printf("epoch %d lr %s loss %s\n", s.epoch, fmt(s.lr).c_str(),
                        fmt(s.train_loss).c_str());
        } else {
            std::printf("epoch %d lr %s loss %s val_dice %s\n", s.epoch, fmt(s.lr).c_str(),
                        fmt(s.train_loss).c_str(), fmt(s.val_dice).c_str());
        }
    }

    const fs::path dir(out_run);
    write_text((dir / "log.csv").string(), trainer.log_csv());
    save_checkpoint((dir / "checkpoint_final.bin").string(), model.params());
    if (trainer.has_best()) {
        trainer.restore_best();
        std::printf("best val_dice: %s\n", fmt(trainer.best_val_dice()).c_str());
    }
    save_checkpoint((dir / "checkpoint_best.bin").string(), model.params());
    return 0;
}

int run_train(const TrainArgs& a) {
    const RunConfig cfg = config_or_default(a.config);
    std::vector<LabeledCase> cases = load_cases(a.manifest);
    fs::create_directories(a.out_run);
    save_run_config((fs::path(a.out_run) / "config.txt").string(), cfg);
    Rng init_rng(cfg.train.seed);
    if (cfg.model_arch == "unet3d") {
        UNet3D<float> model(cfg.model, init_rng);
        return train_model(model, cfg, std::move(cases), a.out_run);
    }
    LiverFormer<float> model(cfg.model, init_rng);
    return train_model(model, cfg, std::move(cases), a.out_run);
}

int run_predict(const PredictArgs& a) {
    std::string config_path = a.config;
    if (config_path.empty()) {
        const fs::path sibling = fs::path(a.checkpoint).parent_path() / "config.txt";
        if (fs::exists(sibling)) config_path = sibling.string();
    }
    const RunConfig cfg = config_or_default(config_path);
    const ImageVolume image = load_image(a.in);
    Rng init_rng(cfg.train.seed);
    LabelVolume pred;
    if (cfg.model_arch == "unet3d") {
        UNet3D<float> model(cfg.model, init_rng);
        load_checkpoint(a.checkpoint, model.params());
        pred = model.predict(image);
    } else {
        LiverFormer<float> model(cfg.model, init_rng);
        load_checkpoint(a.checkpoint, model.params());
        pred = model.predict(image);
    }
    store(a.out, pred);
    std::printf("wrote: %s\n", a.out.c_str());
    return 0;
}

int run_evaluate(const EvaluateArgs& a) {
    const MetricsReport report = build_report(load_labels(a.pred), load_labels(a.truth));
    fs::path json_path(a.out);
    if (json_path.extension() != ".json") json_path += ".json";
    fs::path csv_path = json_path, txt_path = json_path;
    csv_path.replace_extension(".csv");
    txt_path.replace_extension(".txt");
    if (auto dir = json_path.parent_path(); !dir.empty()) fs::create_directories(dir);
    write_text(json_path.string(), report_to_json(report));
    write_text(csv_path.string(), report_to_csv(report));
    const std::string table = report_to_text(report);
    write_text(txt_path.string(), table);
    std::fputs(table.c_str(), stdout);
    return 0;
}

int run_compare(const CompareArgs& a) {
    auto parse_report = [](const std::string& path) {
        const auto bytes = read_file_bytes(path);
        return nlohmann::json::parse(std::string(bytes.begin(), bytes.end()));
    };
    const nlohmann::json ja = parse_report(a.reports[0]);
    const nlohmann::json jb = parse_report(a.reports[1]);
    auto by_class = [](const nlohmann::json& j) {
        std::map<int, nlohmann::json> rows;
        for (const auto& r : j.at("rows")) rows[r.at("class").get<int>()] = r;
        return rows;
    };
    const auto rows_a = by_class(ja), rows_b = by_class(jb);

    std::printf("paired t-tests over classes present in both reports\n");
    std::printf("%-8s %4s %12s %12s %12s\n", "metric", "n", "mean_a", "mean_b", "p");
    for (const char* metric : {"dice", "msd_mm", "hd95_mm", "vr"}) {
        std::vector<double> va, vb;
        for (const auto& [cls, ra] : rows_a) {
            auto itb = rows_b.find(cls);
            if (itb == rows_b.end()) continue;
            if (!ra.contains(metric) || !itb->second.contains(metric)) continue;
            va.push_back(ra.at(metric).get<double>());
            vb.push_back(itb->second.at(metric).get<double>());
        }
        if (va.size() < 2) {
            std::printf("%-8s %4zu %12s %12s %12s\n", metric, va.size(), "-", "-", "-");
            continue;
        }
        double ma = 0, mb = 0;
        for (double v : va) ma += v;
        for (double v : vb) mb += v;
        ma /= static_cast<double>(va.size());
        mb /= static_cast<double>(vb.size());
        const PairedTTestResult t = paired_t_test(va, vb);
        std::printf("%-8s %4zu %12s %12s %12s\n", metric, va.size(), fmt(ma).c_str(),
                    fmt(mb).c_str(), fmt(t.p_value).c_str());
    }
    return 0;
}

int run_view(const ViewArgs& a) {
    SliceAxis axis;
    if (a.axis == "axial") {
        axis = SliceAxis::Axial;
    } else if (a.axis == "coronal") {
        axis = SliceAxis::Coronal;
    } else if (a.axis == "sagittal") {
        axis = SliceAxis::Sagittal;
    } else {
        throw VolumeError("view: axis must be axial, coronal, or sagittal");
    }
    if (a.labels) {
        write_file_bytes(a.out, export_slice(load_labels(a.in), axis, a.index));
    } else {
        write_file_bytes(a.out, export_slice(load_image(a.in), axis, a.index));
    }
    std::printf("wrote: %s\n", a.out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Couinaud segmentation pipeline: phantoms, registration-based "
                 "augmentation, training, and evaluation"};
    app.require_subcommand(1);

    PhantomGenArgs pg;
    CLI::App* phantom = app.add_subcommand("phantom", "Procedural test volumes");
    phantom->require_subcommand(1);
    CLI::App* gen = phantom->add_subcommand("gen", "Generate a phantom dataset");
    gen->add_option("--n", pg.n, "Number of cases")->capture_default_str();
    gen->add_option("--seed", pg.seed, "Base seed; case i uses seed + i")
        ->capture_default_str();
    gen->add_option("--out", pg.out, "Output directory")->required();
    gen->add_option("--config", pg.config, "Run config file (phantom.* keys)");

    PreprocessArgs pp;
    CLI::App* preprocess = app.add_subcommand("preprocess", "Resample, window, and pad");
    preprocess->add_option("--in", pp.in, "Input NIfTI volume")->required();
    preprocess->add_option("--out", pp.out, "Output NIfTI volume")->required();
    preprocess->add_option("--config", pp.config, "Run config file (preprocess.* keys)");
    preprocess->add_option("--kind", pp.kind, "Volume kind: image or labels")
        ->check(CLI::IsMember({"image", "labels"}))
        ->capture_default_str();

    RegisterArgs rg;
    CLI::App* reg = app.add_subcommand("register", "Diffeomorphic registration");
    reg->add_option("--fixed", rg.fixed, "Fixed image NIfTI")->required();
    reg->add_option("--moving", rg.moving, "Moving image NIfTI")->required();
    reg->add_option("--out-field", rg.out_field, "Output velocity field path")->required();
    reg->add_option("--config", rg.config, "Run config file (register.* keys)");

    AugmentArgs ag;
    CLI::App* augment = app.add_subcommand("augment", "Registration-based expansion");
    augment->add_option("--manifest", ag.manifest, "Pool manifest JSON")->required();
    augment
        ->add_option("--templates", ag.templates,
                     "Template case IDs (comma separated or repeated)")
        ->required()
        ->delimiter(',');
    augment->add_option("--out", ag.out, "Output directory")->required();
    augment->add_option("--config", ag.config,
                        "Run config file (register.* and augment.* keys)");

    TrainArgs tr;
    CLI::App* train = app.add_subcommand("train", "Train a segmentation model");
    train->add_option("--manifest", tr.manifest, "Dataset manifest JSON")->required();
    train->add_option("--config", tr.config, "Run config file");
    train->add_option("--out-run", tr.out_run, "Output run directory")->required();

    PredictArgs pr;
    CLI::App* predict = app.add_subcommand("predict", "Segment a volume");
    predict->add_option("--checkpoint", pr.checkpoint, "Checkpoint file")->required();
    predict->add_option("--in", pr.in, "Input image NIfTI")->required();
    predict->add_option("--out", pr.out, "Output label NIfTI")->required();
    predict->add_option("--config", pr.config,
                        "Run config file; defaults to config.txt beside the checkpoint");

    EvaluateArgs ev;
    CLI::App* evaluate = app.add_subcommand("evaluate", "Per-class volumetric metrics");
    evaluate->add_option("--pred", ev.pred, "Predicted labels NIfTI")->required();
    evaluate->add_option("--truth", ev.truth, "Reference labels NIfTI")->required();
    evaluate->add_option("--out", ev.out, "Report path; writes .json, .csv, and .txt")
        ->required();

    CompareArgs cp;
    CLI::App* compare = app.add_subcommand("compare", "Paired t-tests between two reports");
    compare->add_option("--reports", cp.reports, "Exactly two report JSON files")
        ->required()
        ->expected(2);

    ViewArgs vw;
    CLI::App* view = app.add_subcommand("view", "Export a slice as PGM");
    view->add_option("--in", vw.in, "Input NIfTI volume")->required();
    view->add_option("--axis", vw.axis, "Slice axis: axial, coronal, or sagittal")
        ->check(CLI::IsMember({"axial", "coronal", "sagittal"}))
        ->capture_default_str();
    view->add_option("--index", vw.index, "Slice index along the axis")
        ->capture_default_str();
    view->add_option("--out", vw.out, "Output PGM path")->required();
    view->add_flag("--labels", vw.labels, "Treat the input as a label volume");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return run_phantom_gen(pg);
        if (preprocess->parsed()) return run_preprocess(pp);
        if (reg->parsed()) return run_register(rg);
        if (augment->parsed()) return run_augment(ag);
        if (train->parsed()) return run_train(tr);
        if (predict->parsed()) return run_predict(pr);
        if (evaluate->parsed()) return run_evaluate(ev);
        if (compare->parsed()) return run_compare(cp);
        if (view->parsed()) return run_view(vw);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
