#include "reprloc/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iostream>

#include "reprloc/error.hpp"
#include "reprloc/evalkit.hpp"
#include "reprloc/featstore.hpp"
#include "reprloc/fsutil.hpp"
#include "reprloc/localizer.hpp"
#include "reprloc/representer.hpp"
#include "reprloc/service.hpp"
#include "reprloc/synth.hpp"

namespace reprloc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::optional<featstore::Split> parse_split(const std::string& s) {
    if (s == "train") return featstore::Split::train;
    if (s == "test") return featstore::Split::test;
    if (s == "all") return std::nullopt;
    throw UsageError("split must be train, test or all");
}

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    atomic_write(path, j.dump(2) + "\n");
}

// --- fit -------------------------------------------------------------------

struct FitArgs {
    std::string manifest, out;
    bool classwise = false, global_tau = false, kahan = false;
    double sample_rate = 1.0;
    std::uint64_t seed = 0;
    double constant_c = 1.0;
    std::optional<double> tau_override;
};

int do_fit(const FitArgs& a) {
    auto m = featstore::load_manifest(a.manifest);
    representer::FitOptions opts;
    opts.classwise = a.classwise;
    opts.global_tau = a.global_tau;
    opts.sample_rate = a.sample_rate;
    opts.seed = a.seed;
    opts.constant_C = a.constant_c;
    opts.tau_override = a.tau_override;
    opts.compensated = a.kahan;
    auto ps = representer::fit(m, opts);
    representer::write_predictors(ps, a.out);
    for (const auto& p : ps) {
        std::cout << "predictor";
        if (p.class_id) std::cout << " class=" << *p.class_id;
        std::cout << " tau=" << p.tau << " images=" << p.provenance.image_count << "\n";
    }
    return kExitOk;
}

// --- infer -----------------------------------------------------------------

struct InferArgs {
    std::string manifest, predictor, out;
    std::optional<double> threshold;
    std::string threshold_sweep;
    bool emit_maps = false, emit_overlays = false;
    int connectivity = 4;
    std::string policy = "largest";
    std::string split = "test";
};

featstore::GrayImage to_gray(const localizer::Grid& g, double scale) {
    featstore::GrayImage img{g.width, g.height, std::vector<std::uint8_t>(g.values.size())};
    for (std::size_t i = 0; i < g.values.size(); ++i)
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(g.values[i], 0.0, 1.0) * scale));
    return img;
}

int do_infer(const InferArgs& a) {
    auto m = featstore::load_manifest(a.manifest);
    auto preds = representer::read_predictors(a.predictor);
    std::vector<double> thresholds;
    if (!a.threshold_sweep.empty()) thresholds = evalkit::parse_grid(a.threshold_sweep);
    else thresholds = {a.threshold.value_or(0.5)};
    for (double t : thresholds)
        if (!(t >= 0.0 && t <= 1.0)) throw UsageError("threshold must lie in [0, 1]");
    const auto split = parse_split(a.split);

    const fs::path out(a.out);
    fs::create_directories(out);
    if (a.emit_maps) fs::create_directories(out / "maps");
    if (a.emit_overlays) fs::create_directories(out / "overlays");

    json results = json::array();
    std::size_t count = 0;
    for (const auto& e : m.entries) {
        if (split && e.split != *split) continue;
        ++count;
        auto fm = featstore::read_feature_map(e.feature_file);
        fm.image_id = e.image_id;
        const auto& pred = evalkit::select_predictor(preds, e);
        localizer::LocalizeParams params;
        params.connectivity = a.connectivity;
        params.policy = localizer::parse_policy(a.policy);

        json per_threshold = json::array();
        std::optional<localizer::LocalizationResult> first;
        for (double t : thresholds) {
            params.threshold = t;
            auto res = localizer::localize(fm, pred, e.image_width, e.image_height, params);
            per_threshold.push_back(localizer::to_json(res));
            if (!first) first = std::move(res);
        }
        results.push_back(thresholds.size() == 1 ? per_threshold.front()
                                                 : json{{"image_id", e.image_id},
                                                        {"sweep", per_threshold}});

        if (a.emit_maps) {
            featstore::write_pgm(to_gray(first->score_map, 255.0), out / "maps" / (e.image_id + ".pgm"));
            featstore::FeatureMap raw(e.image_id, 1, fm.height, fm.width);
            for (std::size_t i = 0; i < raw.data.size(); ++i)
                raw.data[i] = static_cast<float>(first->activation.raw.values[i]);
            featstore::write_feature_map(raw, out / "maps" / (e.image_id + ".rpsf"));
        }
        if (a.emit_overlays) {
            // Map dimmed to 0..200 so the 255-valued box outline stands out.
            auto img = to_gray(first->score_map, 200.0);
            if (first->chosen_box) {
                const auto& b = *first->chosen_box;
                for (int x = b.x0; x < b.x1; ++x) {
                    img.pixels[static_cast<std::size_t>(b.y0) * img.width + x] = 255;
                    img.pixels[static_cast<std::size_t>(b.y1 - 1) * img.width + x] = 255;
                }
                for (int y = b.y0; y < b.y1; ++y) {
                    img.pixels[static_cast<std::size_t>(y) * img.width + b.x0] = 255;
                    img.pixels[static_cast<std::size_t>(y) * img.width + b.x1 - 1] = 255;
                }
            }
            featstore::write_pgm(img, out / "overlays" / (e.image_id + ".pgm"));
        }
    }
    if (count == 0) throw DataError("no entries in split '" + a.split + "'");
    write_json(out / "results.json", {{"manifest_digest", m.digest},
                                      {"thresholds", thresholds},
                                      {"connectivity", a.connectivity},
                                      {"policy", a.policy},
                                      {"results", results}});
    std::cout << "localized " << count << " images -> " << (out / "results.json").string() << "\n";
    return kExitOk;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
    std::string manifest, predictor, metric, out;
    double delta = 0.5;
    std::string theta_grid = "0:1:101";
    std::string predictions, tau_sweep, details_csv;
    double threshold = 0.5;
    int connectivity = 4;
    std::string policy = "largest";
    std::string split = "test";
    std::string piou_mode = "global";
};

int do_eval(const EvalArgs& a) {
    evalkit::EvalSpec spec;
    spec.metric = evalkit::parse_metric(a.metric);
    if (!(a.delta >= 0.0 && a.delta < 1.0)) throw UsageError("delta must lie in [0, 1)");
    spec.delta = a.delta;
    spec.theta_grid = evalkit::parse_grid(a.theta_grid);
    if (!(a.threshold >= 0.0 && a.threshold <= 1.0)) throw UsageError("threshold must lie in [0, 1]");
    spec.localize.threshold = a.threshold;
    spec.localize.connectivity = a.connectivity;
    spec.localize.policy = localizer::parse_policy(a.policy);
    spec.split = parse_split(a.split);
    if (a.piou_mode == "global") spec.piou_mode = evalkit::PiouMode::global;
    else if (a.piou_mode == "mean") spec.piou_mode = evalkit::PiouMode::per_image_mean;
    else throw UsageError("piou mode must be global or mean");
    std::vector<double> taus;
    if (!a.tau_sweep.empty()) taus = evalkit::parse_grid(a.tau_sweep);

    auto m = featstore::load_manifest(a.manifest);
    auto preds = representer::read_predictors(a.predictor);
    if (!a.predictions.empty()) spec.predictions = evalkit::load_class_predictions(a.predictions);

    auto report = taus.empty() ? evalkit::evaluate(m, preds, spec)
                               : evalkit::evaluate_tau_sweep(m, preds, spec, taus);
    write_json(a.out, evalkit::to_json(report));
    if (!a.details_csv.empty()) evalkit::write_details_csv(report, a.details_csv);
    std::cout << report.metric << " = " << report.value << "\n";
    return kExitOk;
}

// --- explain ---------------------------------------------------------------

struct ExplainArgs {
    std::string manifest, image, patch, out, predictor;
    std::size_t topk = 10;
    std::string polarity = "both";
    double sample_rate = 1.0;
    std::uint64_t seed = 0;
};

int do_explain(const ExplainArgs& a) {
    std::uint32_t row = 0, col = 0;
    {
        auto comma = a.patch.find(',');
        try {
            if (comma == std::string::npos) throw std::invalid_argument("patch");
            std::size_t u1 = 0, u2 = 0;
            long r = std::stol(a.patch.substr(0, comma), &u1);
            long c = std::stol(a.patch.substr(comma + 1), &u2);
            if (u1 != comma || u2 != a.patch.size() - comma - 1 || r < 0 || c < 0)
                throw std::invalid_argument("patch");
            row = static_cast<std::uint32_t>(r);
            col = static_cast<std::uint32_t>(c);
        } catch (const std::logic_error&) {
            throw UsageError("--patch must be ROW,COL with non-negative integers");
        }
    }
    if (a.topk < 1) throw UsageError("--topk must be at least 1");
    const auto polarity = representer::parse_polarity(a.polarity);

    auto m = featstore::load_manifest(a.manifest);
    const auto* query_entry = m.find(a.image);
    if (!query_entry) throw DataError("image '" + a.image + "' not in manifest");
    auto query = featstore::read_feature_map(query_entry->feature_file);
    query.image_id = query_entry->image_id;

    auto training = representer::sample_train_entries(m, a.sample_rate, a.seed);
    representer::ForegroundPredictor pred;
    if (!a.predictor.empty()) {
        auto preds = representer::read_predictors(a.predictor);
        pred = evalkit::select_predictor(preds, *query_entry);
        if (pred.class_id) {
            std::erase_if(training, [&](const featstore::ManifestEntry* e) {
                return !e->class_id || *e->class_id != *pred.class_id;
            });
        }
    } else {
        pred = representer::finalize_predictor(representer::accumulate_entries(training));
    }

    auto result = representer::representer_topk(training, query, row, col, a.topk, polarity,
                                                pred.tau, pred.constant_C);
    json j = representer::to_json(result);
    j["activation"] = localizer::activation_map(query, pred).raw.at(static_cast<int>(row),
                                                                    static_cast<int>(col));
    j["k"] = a.topk;
    j["sample_rate"] = a.sample_rate;
    j["seed"] = a.seed;
    j["manifest_digest"] = m.digest;
    write_json(a.out, j);
    std::cout << "full sum " << result.full_sum << " over " << result.scanned_patches
              << " training patches\n";
    return kExitOk;
}

// --- synth / serve / validate ---------------------------------------------

int do_synth(const std::string& spec_path, const std::string& out) {
    json j;
    try {
        j = json::parse(read_file_bytes(spec_path));
    } catch (const json::parse_error& e) {
        throw FormatError(spec_path + ": " + e.what());
    }
    auto spec = synth::spec_from_json(j);
    auto m = synth::generate_synthetic(spec, out);
    std::cout << "wrote " << m.entries.size() << " images -> "
              << (fs::path(out) / "manifest.json").string() << "\n";
    return kExitOk;
}

int do_serve(const std::string& manifest, const std::string& predictor, const std::string& host,
             int port, std::size_t max_k) {
    service::ServiceState state(featstore::load_manifest(manifest),
                                representer::read_predictors(predictor), max_k);
    std::cout << "serving on " << host << ":" << port << std::endl;
    service::serve(state, host, port);
    return kExitOk;
}

int do_validate(const std::string& manifest) {
    auto m = featstore::load_manifest(manifest);
    auto report = featstore::validate_dataset(m);
    for (const auto& f : report.failures)
        std::cout << f.image_id << "\t" << f.path << "\t" << f.message << "\n";
    std::cout << report.checked << " entries checked, " << report.failures.size()
              << " failures\n";
    return report.ok() ? kExitOk : kExitData;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"Representer-point object localization over dense feature maps", "reprloc"};
    app.require_subcommand(1);

    FitArgs fit;
    auto* fit_cmd = app.add_subcommand("fit", "Fit the foreground predictor from train features");
    fit_cmd->add_option("--manifest", fit.manifest, "Dataset manifest")->required();
    fit_cmd->add_option("--out", fit.out, "Predictor JSON to write")->required();
    fit_cmd->add_flag("--classwise", fit.classwise, "One predictor per class");
    fit_cmd->add_flag("--global-tau", fit.global_tau, "Classwise: share the pooled tau");
    fit_cmd->add_option("--sample-rate", fit.sample_rate, "Fraction of train images")
        ->check(CLI::Range(0.0, 1.0));
    fit_cmd->add_option("--seed", fit.seed, "Sampling seed");
    fit_cmd->add_option("--tau-override", fit.tau_override, "Use this tau instead of |v|/|u|");
    fit_cmd->add_option("--constant-c", fit.constant_c, "Divisor of w and alpha");
    fit_cmd->add_flag("--kahan", fit.kahan, "Compensated accumulation");

    InferArgs infer;
    auto* infer_cmd = app.add_subcommand("infer", "Localize objects in feature maps");
    infer_cmd->add_option("--manifest", infer.manifest)->required();
    infer_cmd->add_option("--predictor", infer.predictor)->required();
    infer_cmd->add_option("--out", infer.out, "Output directory")->required();
    auto* thr = infer_cmd->add_option("--threshold", infer.threshold, "Box threshold in [0,1]");
    auto* thr_sweep =
        infer_cmd->add_option("--threshold-sweep", infer.threshold_sweep, "lo:hi:n");
    thr->excludes(thr_sweep);
    thr_sweep->excludes(thr);
    infer_cmd->add_flag("--emit-maps", infer.emit_maps, "Write PGM and RPSF activation maps");
    infer_cmd->add_flag("--emit-overlays", infer.emit_overlays, "Write PGM box overlays");
    infer_cmd->add_option("--connectivity", infer.connectivity)->check(CLI::IsMember({4, 8}));
    infer_cmd->add_option("--policy", infer.policy)->check(CLI::IsMember({"largest", "all"}));
    infer_cmd->add_option("--split", infer.split)->check(CLI::IsMember({"train", "test", "all"}));

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate localization metrics");
    eval_cmd->add_option("--manifest", ev.manifest)->required();
    eval_cmd->add_option("--predictor", ev.predictor)->required();
    eval_cmd->add_option("--metric", ev.metric)
        ->required()
        ->check(CLI::IsMember({"gtknown", "top1", "top5", "pxap", "piou", "maxboxaccv2"}));
    eval_cmd->add_option("--out", ev.out, "Report JSON")->required();
    eval_cmd->add_option("--delta", ev.delta, "IoU threshold for box metrics");
    eval_cmd->add_option("--theta-grid", ev.theta_grid, "lo:hi:n");
    eval_cmd->add_option("--predictions", ev.predictions, "Class predictions JSON");
    eval_cmd->add_option("--tau-sweep", ev.tau_sweep, "lo:hi:n");
    eval_cmd->add_option("--threshold", ev.threshold, "Box threshold in [0,1]");
    eval_cmd->add_option("--connectivity", ev.connectivity)->check(CLI::IsMember({4, 8}));
    eval_cmd->add_option("--policy", ev.policy)->check(CLI::IsMember({"largest", "all"}));
    eval_cmd->add_option("--split", ev.split)->check(CLI::IsMember({"train", "test", "all"}));
    eval_cmd->add_option("--piou-mode", ev.piou_mode)->check(CLI::IsMember({"global", "mean"}));
    eval_cmd->add_option("--details-csv", ev.details_csv, "Per-image CSV");

    ExplainArgs ex;
    auto* explain_cmd = app.add_subcommand("explain", "Representer points for one test patch");
    explain_cmd->add_option("--manifest", ex.manifest)->required();
    explain_cmd->add_option("--image", ex.image)->required();
    explain_cmd->add_option("--patch", ex.patch, "ROW,COL")->required();
    explain_cmd->add_option("--topk", ex.topk)->required();
    explain_cmd->add_option("--out", ex.out)->required();
    explain_cmd->add_option("--polarity", ex.polarity)
        ->check(CLI::IsMember({"excitatory", "inhibitory", "both"}));
    explain_cmd->add_option("--predictor", ex.predictor, "Take tau and constant from here");
    explain_cmd->add_option("--sample-rate", ex.sample_rate)->check(CLI::Range(0.0, 1.0));
    explain_cmd->add_option("--seed", ex.seed);

    std::string synth_spec, synth_out;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
    synth_cmd->add_option("--spec", synth_spec)->required();
    synth_cmd->add_option("--out", synth_out)->required();

    std::string serve_manifest, serve_predictor, serve_host = "127.0.0.1";
    int serve_port = 8080;
    std::size_t serve_max_k = 256;
    auto* serve_cmd = app.add_subcommand("serve", "Serve the read-only explain API");
    serve_cmd->add_option("--manifest", serve_manifest)->required();
    serve_cmd->add_option("--predictor", serve_predictor)->required();
    serve_cmd->add_option("--port", serve_port)->check(CLI::Range(0, 65535));
    serve_cmd->add_option("--host", serve_host);
    serve_cmd->add_option("--max-k", serve_max_k);

    std::string validate_manifest;
    auto* validate_cmd = app.add_subcommand("validate", "Check feature files and masks");
    validate_cmd->add_option("--manifest", validate_manifest)->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*fit_cmd) return do_fit(fit);
        if (*infer_cmd) return do_infer(infer);
        if (*eval_cmd) return do_eval(ev);
        if (*explain_cmd) return do_explain(ex);
        if (*synth_cmd) return do_synth(synth_spec, synth_out);
        if (*serve_cmd) return do_serve(serve_manifest, serve_predictor, serve_host, serve_port, serve_max_k);
        if (*validate_cmd) return do_validate(validate_manifest);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}

int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

}  // namespace reprloc::cli
