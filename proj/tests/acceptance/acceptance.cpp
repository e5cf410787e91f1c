// Acceptance checks for the primary component. Prints one PASS/FAIL line per
// criterion and exits nonzero if any fails.

#include <fcntl.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "reprloc/cli.hpp"
#include "reprloc/error.hpp"
#include "reprloc/evalkit.hpp"
#include "reprloc/localizer.hpp"
#include "reprloc/representer.hpp"
#include "reprloc/synth.hpp"
#include "test_support.hpp"

using namespace reprloc;
using featstore::FeatureMap;
using nlohmann::json;
using representer::Accumulator;
using reprloc::testing::TempDir;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
    std::printf("%s  %-34s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

double rel_err(double a, double b) {
    const double scale = std::max(std::abs(a), std::abs(b));
    return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

// Runs the CLI in-process with its stdout discarded.
int quiet_cli(const std::vector<std::string>& args) {
    std::ostringstream sink;
    auto* old = std::cout.rdbuf(sink.rdbuf());
    int rc = cli::run(args);
    std::cout.rdbuf(old);
    return rc;
}

json read_json(const std::filesystem::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

synth::SynthSpec default_suite(std::uint64_t seed) {
    synth::SynthSpec s;  // 50 images 64×64, 8×8 grid, C=16, fg 2.0, bg 0.5
    s.seed = seed;
    return s;
}

double gt_known(const featstore::DatasetManifest& m,
                const std::vector<representer::ForegroundPredictor>& p) {
    return evalkit::evaluate(m, p, evalkit::EvalSpec{}).value;
}

// --- criteria ---------------------------------------------------------------

void representer_identity() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2024);
    double worst = 0.0;
    long patches = 0;
    int redrawn = 0;
    for (int inst = 0; inst < 200; ++inst) {
        const auto c = static_cast<std::uint32_t>(1 + rng() % 16);
        const int n = 1 + static_cast<int>(rng() % 8);
        std::vector<FeatureMap> train;
        Accumulator acc(c);
        for (int i = 0; i < n; ++i) {
            train.push_back(reprloc::testing::random_map("t" + std::to_string(i), c,
                                                         1 + rng() % 4, 1 + rng() % 4, rng,
                                                         0.5 + (rng() % 100) / 25.0));
            acc.accumulate(train.back());
        }
        representer::ForegroundPredictor pred;
        try {
            pred = representer::finalize_predictor(acc);
        } catch (const DegenerateDatasetError&) {  // Σf̂ = 0, e.g. C=1 with balanced signs
            ++redrawn;
            --inst;
            continue;
        }
        auto query = reprloc::testing::random_map("q", c, 1 + rng() % 4, 1 + rng() % 4, rng);
        auto am = localizer::activation_map(query, pred);
        for (std::size_t j = 0; j < query.patch_count(); ++j) {
            double terms = 0.0;
            const double want = oracle::representer_double_sum(train, query.patch(j), 1.0, &terms);
            const double a = am.raw.values[j];
            // Each route's error is bounded by the magnitude of the terms it cancels:
            // Σ|α cos| for the double sum, |vᵀq̂| + τ|uᵀq̂| for wᵀq̂.
            const auto q = *representer::normalize_feature(query.patch(j));
            const auto v = acc.v(), u = acc.u();
            double vq = 0.0, uq = 0.0;
            for (std::size_t k = 0; k < c; ++k) vq += v[k] * q[k], uq += u[k] * q[k];
            const double scale =
                std::max({std::abs(a), std::abs(want), terms, std::abs(vq) + pred.tau * std::abs(uq)});
            worst = std::max(worst, scale == 0.0 ? 0.0 : std::abs(a - want) / scale);
            ++patches;
        }
    }
    const double secs = seconds_since(t0);
    report(worst <= 1e-5 && secs < 5.0, "representer-sum identity",
           fmt("200 instances (%d degenerate redrawn), %ld test patches, max rel err %.2e (tol 1e-5), "
               "%.2fs (limit 5s)",
               redrawn, patches, worst, secs));
}

void tau_duality() {
    std::mt19937_64 rng(7);
    double worst = 0.0;
    int redrawn = 0;
    for (int d = 0; d < 100; ++d) {
        const auto c = static_cast<std::uint32_t>(1 + rng() % 16);
        Accumulator acc(c);
        std::vector<std::vector<double>> all;
        const int n = 1 + static_cast<int>(rng() % 6);
        for (int i = 0; i < n; ++i) {
            auto fm = reprloc::testing::random_map("x", c, 1 + rng() % 6, 1 + rng() % 6, rng,
                                                   0.1 + (rng() % 100) / 10.0);
            acc.accumulate(fm);
            for (std::size_t p = 0; p < fm.patch_count(); ++p) all.push_back(fm.patch(p));
        }
        try {
            worst = std::max(worst, rel_err(representer::finalize_tau(acc),
                                            representer::tau_gram_oracle(all)));
        } catch (const DegenerateDatasetError&) {
            ++redrawn;
            --d;
        }
    }
    Accumulator fx(2);
    fx.accumulate(reprloc::testing::map_from_patches("f", 1, 2, {{2, 0}, {0, 1}}));
    const double fixture_err = rel_err(representer::finalize_tau(fx), std::sqrt(5.0) / std::sqrt(2.0));
    report(worst <= 1e-6 && fixture_err <= 1e-6, "tau duality",
           fmt("100 datasets (%d degenerate redrawn) max rel err %.2e (tol 1e-6); fixture "
               "sqrt(5)/sqrt(2) rel err %.2e",
               redrawn, worst, fixture_err));
}

void scale_invariance() {
    TempDir dir("acc_scale");
    auto m = synth::generate_synthetic(default_suite(11), dir.path());
    std::vector<FeatureMap> maps;
    for (const auto& e : m.entries) maps.push_back(featstore::read_feature_map(e.feature_file));

    auto run = [&](double s) {
        Accumulator acc(maps[0].channels);
        std::vector<FeatureMap> scaled = maps;
        for (auto& fm : scaled)
            for (auto& x : fm.data) x = static_cast<float>(x * s);
        for (std::size_t i = 0; i < m.entries.size(); ++i)
            if (m.entries[i].split == featstore::Split::train) acc.accumulate(scaled[i]);
        auto pred = representer::finalize_predictor(acc);
        std::vector<localizer::LocalizationResult> out;
        for (std::size_t i = 0; i < m.entries.size(); ++i)
            out.push_back(localizer::localize(scaled[i], pred, m.entries[i].image_width,
                                              m.entries[i].image_height, {}));
        return out;
    };
    auto base = run(1.0);
    bool boxes_equal = true;
    double worst = 0.0;
    for (double s : {0.5, 3.0}) {
        auto r = run(s);
        for (std::size_t i = 0; i < r.size(); ++i) {
            boxes_equal = boxes_equal && r[i].boxes == base[i].boxes && r[i].chosen_box == base[i].chosen_box;
            const auto& a = r[i].activation.normalized.values;
            const auto& b = base[i].activation.normalized.values;
            for (std::size_t p = 0; p < a.size(); ++p) worst = std::max(worst, std::abs(a[p] - b[p]));
        }
    }
    report(boxes_equal && worst <= 1e-6, "scale invariance",
           fmt("s in {0.5, 3.0} over %zu images: boxes %s, max normalized-map diff %.2e (tol 1e-6)",
               m.entries.size(), boxes_equal ? "identical" : "DIFFER", worst));
}

void end_to_end() {
    TempDir dir("acc_e2e");
    const auto t0 = Clock::now();
    {
        std::ofstream(dir / "spec.json") << synth::to_json(default_suite(1)).dump();
    }
    const auto ds = (dir / "ds").string();
    const auto pred = (dir / "pred.json").string();
    bool ran = quiet_cli({"synth", "--spec", (dir / "spec.json").string(), "--out", ds}) == 0 &&
               quiet_cli({"fit", "--manifest", ds + "/manifest.json", "--out", pred}) == 0 &&
               quiet_cli({"eval", "--manifest", ds + "/manifest.json", "--predictor", pred, "--metric",
                          "gtknown", "--delta", "0.5", "--out", (dir / "gtk.json").string()}) == 0 &&
               quiet_cli({"eval", "--manifest", ds + "/manifest.json", "--predictor", pred, "--metric",
                          "pxap", "--out", (dir / "pxap.json").string()}) == 0;
    const double secs = seconds_since(t0);
    double gtk = -1, ap = -1;
    if (ran) {
        gtk = read_json(dir / "gtk.json")["value"].get<double>();
        ap = read_json(dir / "pxap.json")["value"].get<double>();
    }
    report(ran && gtk == 1.0 && ap >= 0.95 && secs < 10.0, "end-to-end synthetic localization",
           fmt("50 images: GT-Known %.4f (need 1.0), PxAP %.4f (need >= 0.95), %.2fs (limit 10s)",
               gtk, ap, secs));
}

void tau_near_optimality() {
    TempDir dir("acc_tau");
    double worst_gap = 0.0;
    std::string detail;
    int idx = 0;
    for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
        auto spec = default_suite(seed);
        auto m = synth::generate_synthetic(spec, dir / std::to_string(idx++));
        auto preds = representer::fit(m, {});
        const double tau = preds[0].tau;
        auto taus = evalkit::linspace(0.05 * tau, 3.0 * tau, 50);
        auto r = evalkit::evaluate_tau_sweep(m, preds, evalkit::EvalSpec{}, taus);
        const double gap = r.details["gap_to_sweep_max"].get<double>();
        worst_gap = std::max(worst_gap, gap);
        detail += fmt("%s%.2f/%.2f", detail.empty() ? "" : " ", r.value,
                      r.details["sweep_max"].get<double>());
    }
    report(worst_gap <= 0.02, "tau near-optimality",
           fmt("5 datasets, 50-point sweep over [0.05,3]x tau: max gap %.4f (tol 0.02); default/max %s",
               worst_gap, detail.c_str()));
}

void metric_oracles() {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0, 1);
    double worst_ap = 0.0, worst_iou = 0.0;
    const auto thetas = evalkit::linspace(0, 1, 11);
    for (int inst = 0; inst < 100; ++inst) {
        const int n = 1 + static_cast<int>(rng() % 4);
        std::vector<localizer::Grid> maps;
        std::vector<localizer::Mask> masks;
        std::size_t pixels = 0;
        for (int i = 0; i < n; ++i) {
            const int h = 4 + static_cast<int>(rng() % 29), w = 4 + static_cast<int>(rng() % 29);
            if (pixels + static_cast<std::size_t>(h * w) > 4096) break;
            pixels += static_cast<std::size_t>(h * w);
            localizer::Grid g(h, w);
            const bool ties = inst % 2;
            for (auto& x : g.values) x = ties ? std::floor(u(rng) * 8) / 8 : u(rng);
            localizer::Mask mk{h, w, std::vector<std::uint8_t>(g.values.size())};
            for (auto& b : mk.bits) b = u(rng) < 0.3;
            maps.push_back(std::move(g));
            masks.push_back(std::move(mk));
        }
        masks[0].bits[0] = 1;
        worst_ap = std::max(worst_ap, std::abs(evalkit::pxap(maps, masks) - oracle::pxap(maps, masks)));
        worst_iou = std::max(worst_iou, std::abs(evalkit::piou(maps, masks, thetas).value -
                                                 oracle::piou_global(maps, masks, thetas)));
    }
    const bool iou_exact = evalkit::iou({0, 0, 10, 10}, {5, 5, 15, 15}) == 1.0 / 7.0;

    bool mba_equal = true;
    const auto grid21 = evalkit::linspace(0, 1, 21);
    for (int fx = 0; fx < 20; ++fx) {
        std::vector<localizer::Grid> maps;
        std::vector<std::vector<featstore::BBox>> gts;
        for (int i = 0; i < 5; ++i) {
            localizer::Grid g(16, 16);
            const double cy = u(rng) * 16, cx = u(rng) * 16, s = 1.5 + u(rng) * 4;
            for (int r = 0; r < 16; ++r)
                for (int c = 0; c < 16; ++c)
                    g.at(r, c) = std::exp(-((r - cy) * (r - cy) + (c - cx) * (c - cx)) / (2 * s * s)) + 0.2 * u(rng);
            maps.push_back(localizer::minmax_normalize(g).grid);
            const int x0 = static_cast<int>(rng() % 8), y0 = static_cast<int>(rng() % 8);
            gts.push_back({{x0, y0, x0 + 4 + static_cast<int>(rng() % 5), y0 + 4 + static_cast<int>(rng() % 5)}});
        }
        auto got = evalkit::max_box_acc_v2(maps, gts, grid21);
        auto want = oracle::max_box_acc_per_delta(maps, gts, grid21, evalkit::kDefaultDeltas);
        for (std::size_t d = 0; d < want.size(); ++d) mba_equal = mba_equal && got.per_delta[d].accuracy == want[d];
    }
    report(worst_ap <= 1e-9 && worst_iou <= 1e-9 && iou_exact && mba_equal, "metric oracles",
           fmt("100 instances: PxAP err %.1e, PIoU err %.1e (tol 1e-9); iou 1/7 %s; MaxBoxAccV2 "
               "20 five-image fixtures %s",
               worst_ap, worst_iou, iou_exact ? "exact" : "WRONG", mba_equal ? "equal" : "DIFFER"));
}

void sampling_robustness() {
    TempDir dir("acc_sample");
    auto spec = default_suite(21);
    spec.image_count = 500;
    auto m = synth::generate_synthetic(spec, dir.path());
    double worst = 0.0, full = 0.0, lowest = 1.0;
    representer::FitOptions o;
    full = gt_known(m, representer::fit(m, o));
    for (double rate : {0.1, 0.01}) {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            o.sample_rate = rate;
            o.seed = seed;
            const double v = gt_known(m, representer::fit(m, o));
            worst = std::max(worst, std::abs(v - full));
            lowest = std::min(lowest, v);
        }
    }
    report(worst <= 0.02, "sampling robustness",
           fmt("500 images, rates {1, 0.1, 0.01} x 10 seeds: GT-Known at 1.0 = %.4f, min %.4f, "
               "max diff %.4f (tol 0.02)",
               full, lowest, worst));
}

// Peak RSS in KiB of a `reprloc fit` child process.
long fit_peak_rss(const std::filesystem::path& manifest, const std::filesystem::path& out) {
    pid_t pid = fork();
    if (pid == 0) {
        int null = ::open("/dev/null", O_WRONLY);
        if (null >= 0) ::dup2(null, 1);
        ::execl(REPRLOC_CLI_PATH, "reprloc", "fit", "--manifest", manifest.c_str(), "--out", out.c_str(),
                static_cast<char*>(nullptr));
        std::_Exit(127);
    }
    int status = 0;
    rusage ru{};
    if (pid < 0 || ::wait4(pid, &status, 0, &ru) != pid || !WIFEXITED(status) || WEXITSTATUS(status) != 0)
        return -1;
    return ru.ru_maxrss;
}

void streaming_contracts() {
    TempDir dir("acc_stream");
    // Merge-order perturbations.
    std::mt19937_64 rng(5);
    std::vector<Accumulator> parts;
    for (int i = 0; i < 64; ++i) {
        Accumulator a(16);
        a.accumulate(reprloc::testing::random_map("p", 16, 4, 4, rng, 1.0 + i % 7));
        parts.push_back(a);
    }
    Accumulator fold(16);
    for (const auto& p : parts) fold.merge(p);
    const auto ref = representer::finalize_predictor(fold);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Accumulator> pool = parts;
        while (pool.size() > 1) {
            std::size_t i = rng() % pool.size();
            std::size_t j = rng() % (pool.size() - 1);
            if (j >= i) ++j;
            auto merged = representer::merge(pool[i], pool[j]);
            pool.erase(pool.begin() + std::max(i, j));
            pool.erase(pool.begin() + std::min(i, j));
            pool.push_back(merged);
        }
        auto p = representer::finalize_predictor(pool[0]);
        double wn = 0.0, dn = 0.0;
        for (std::size_t c = 0; c < 16; ++c) {
            wn += ref.w[c] * ref.w[c];
            dn += (p.w[c] - ref.w[c]) * (p.w[c] - ref.w[c]);
        }
        worst = std::max({worst, std::sqrt(dn / wn), rel_err(p.tau, ref.tau)});
    }

    // Thread count does not change the fitted predictor.
    auto suite = default_suite(4);
    auto m = synth::generate_synthetic(suite, dir / "threads");
    ::setenv("REPRLOC_THREADS", "1", 1);
    auto one = representer::fit(m, {});
    ::setenv("REPRLOC_THREADS", "4", 1);
    auto four = representer::fit(m, {});
    ::unsetenv("REPRLOC_THREADS");
    const bool thread_exact = one == four;

    // Peak memory of fit: 50 versus 1000 images with 32 KiB of features each.
    synth::SynthSpec big;
    big.image_width = 128;
    big.image_height = 128;
    big.grid_height = 16;
    big.grid_width = 16;
    big.channels = 32;
    big.emit_masks = false;
    big.test_fraction = 0.0;
    big.image_count = 50;
    synth::generate_synthetic(big, dir / "small");
    big.image_count = 1000;
    synth::generate_synthetic(big, dir / "large");
    ::setenv("REPRLOC_THREADS", "1", 1);
    const long small_kib = fit_peak_rss(dir / "small/manifest.json", dir / "small.json");
    const long large_kib = fit_peak_rss(dir / "large/manifest.json", dir / "large.json");
    ::unsetenv("REPRLOC_THREADS");
    const double payload_mib = 1000.0 * 32 * 16 * 16 * 4 / (1024.0 * 1024.0);
    const double growth_mib = (large_kib - small_kib) / 1024.0;
    const bool mem_ok = small_kib > 0 && large_kib > 0 && growth_mib < 4.0;

    report(worst <= 1e-9 && thread_exact && mem_ok, "streaming contracts",
           fmt("50 merge trees: max rel change %.1e (tol 1e-9); 1 vs 4 threads %s; fit peak RSS "
               "%.1f MiB (50 imgs) -> %.1f MiB (1000 imgs), growth %.2f MiB vs %.1f MiB payload "
               "(limit 4 MiB)",
               worst, thread_exact ? "bit-identical" : "DIFFER", small_kib / 1024.0,
               large_kib / 1024.0, growth_mib, payload_mib));
}

void wsol_consistency() {
    TempDir dir("acc_wsol");
    auto one_class = synth::generate_synthetic(default_suite(8), dir / "one");
    representer::FitOptions agnostic, classwise;
    classwise.classwise = true;
    auto a = representer::fit(one_class, agnostic);
    auto c = representer::fit(one_class, classwise);
    const bool bitwise = c.size() == 1 && c[0].w == a[0].w && c[0].tau == a[0].tau &&
                         c[0].totals == a[0].totals;

    auto spec = default_suite(9);
    spec.num_classes = 4;
    spec.image_count = 80;
    auto multi = synth::generate_synthetic(spec, dir / "multi");
    auto g = representer::fit(multi, agnostic);
    auto per = representer::fit(multi, classwise);
    double worst = 0.0, vnorm = 0.0;
    const auto& gv = g[0].totals->v;
    for (double x : gv) vnorm += x * x;
    vnorm = std::sqrt(vnorm);
    for (std::size_t k = 0; k < gv.size(); ++k) {
        double sum = 0.0;
        for (const auto& p : per) sum += p.totals->v[k];
        worst = std::max(worst, std::abs(sum - gv[k]) / vnorm);
    }
    report(bitwise && per.size() == 4 && worst <= 1e-9, "WSOL consistency",
           fmt("single-class classwise fit %s; 4-class sum of v_c vs v: max rel err %.1e (tol 1e-9)",
               bitwise ? "bit-identical" : "DIFFERS", worst));
}

}  // namespace

int main() {
    const auto t0 = Clock::now();
    representer_identity();
    tau_duality();
    scale_invariance();
    end_to_end();
    tau_near_optimality();
    metric_oracles();
    sampling_robustness();
    streaming_contracts();
    wsol_consistency();
    std::printf("%d failed, total %.1fs\n", failures, seconds_since(t0));
    return failures == 0 ? 0 : 1;
}
