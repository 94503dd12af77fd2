// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "prefdiff/prefdiff.hpp"

using namespace prefdiff;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 60.0;
constexpr std::size_t kIdentityInstances = 50;
constexpr double kIdentityTolerance = 1e-6;
constexpr double kSelfScoreShrink = 5.0;
constexpr double kAccuracyFloor = 0.90;
constexpr double kScoringBudgetSeconds = 300.0;
constexpr double kInversionAllowance = 0.02;
constexpr double kTopBottomGap = 0.10;
constexpr int kAlignmentSeeds = 3;
constexpr int kAlignmentWinsNeeded = 2;
constexpr double kManifestBudgetSeconds = 90.0 * 60.0;
const char* const kAlignmentMetric = "mean_gt_reward.temperature";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string num(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

struct TimedRun {
    ExperimentResult result;
    std::map<std::string, double> stage_seconds;
    double total_seconds = 0.0;

    const EvalReport& report(const std::string& label) const {
        for (const auto& [l, r] : result.reports)
            if (l == label) return r;
        throw Error("no report labelled '" + label + "'");
    }
    double metric(const std::string& label, const std::string& name) const {
        for (const auto& [k, v] : report(label).metrics())
            if (k == name) return v;
        throw Error("report '" + label + "' has no metric '" + name + "'");
    }
};

TimedRun run_manifest(const std::string& name, std::uint64_t seed, const std::string& out) {
    const Manifest m = load_manifest(std::string(PREFDIFF_MANIFESTS) + "/" + name + ".json");
    fs::remove_all(out);
    TimedRun run;
    std::string current;
    auto mark = Clock::now();
    const auto start = mark;
    run.result = run_experiment(m, seed, out, [&](const std::string& stage) {
        if (!current.empty()) run.stage_seconds[current] = seconds_since(mark);
        current = stage;
        mark = Clock::now();
    });
    if (!current.empty()) run.stage_seconds[current] = seconds_since(mark);
    run.total_seconds = seconds_since(start);
    std::cerr << "  " << name << " seed " << seed << ": " << num(run.total_seconds, 3) << " s\n";
    return run;
}

RunConfig run_config(const std::string& run_dir) {
    Json j = Json::parse(read_text_file(run_dir + "/config.json"));
    j.erase("config_digest");
    return RunConfig::from_json(j);
}

bool all_passed(const std::vector<CheckResult>& checks, std::string& detail) {
    bool ok = true;
    for (const auto& c : checks)
        if (!c.passed) {
            ok = false;
            detail += " [" + c.name + ": " + c.detail + "]";
        }
    return ok;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_text_file(e.path().string());
    return files;
}

class Reporter {
public:
    void emit(int n, bool pass, const std::string& text) {
        std::cout << (pass ? "PASS" : "FAIL") << " criterion " << n << ": " << text << std::endl;
        all_ = all_ && pass;
    }
    void guarded(int n, const std::function<std::pair<bool, std::string>()>& body) {
        try {
            const auto [pass, text] = body();
            emit(n, pass, text);
        } catch (const std::exception& e) {
            emit(n, false, std::string("error: ") + e.what());
        }
    }
    bool all() const { return all_; }

private:
    bool all_ = true;
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string work = "acceptance_runs";
    std::uint64_t seed = 1;
    app.add_option("--work-dir", work, "scratch directory for experiment outputs");
    app.add_option("--seed", seed, "seed for the property checks");
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(work);
    Reporter out;

    out.guarded(1, [&] {
        const auto t = Clock::now();
        const auto checks = loss_gradient_checks(derive_seed(seed, "gradients"), kGradTolerance);
        const double secs = seconds_since(t);
        std::string detail;
        const bool ok = all_passed(checks, detail) && secs < kGradBudgetSeconds && checks.size() == 14;
        return std::pair{ok, std::to_string(checks.size()) + " losses within rel err " + num(kGradTolerance) +
                                 " (20 probes each) in " + num(secs, 3) + " s (budget " + num(kGradBudgetSeconds) +
                                 " s)" + detail};
    });

    out.guarded(2, [&] {
        const auto r = dpo_identity_check(derive_seed(seed, "identity"), kIdentityInstances, kIdentityTolerance);
        return std::pair{r.passed, r.detail + " (tolerance " + num(kIdentityTolerance) + ")"};
    });

    out.guarded(3, [&] {
        const auto checks = reduction_checks(derive_seed(seed, "reduction"));
        std::string detail;
        const bool ok = all_passed(checks, detail) && checks.size() == 3;
        return std::pair{ok, "alpha=0 gives bitwise-equal loss and gradients for rrhf, dpo and kto" + detail};
    });

    out.guarded(4, [&] {
        std::string detail;
        const bool semantics = all_passed(regularizer_checks(derive_seed(seed, "regularizers")), detail);
        const auto run = run_manifest("regularizer-ablation", seed, (fs::path(work) / "regularizer-ablation").string());
        const double with = run.metric("diff", "mean_abs_self_score");
        const double without = run.metric("diff w/o regularization", "mean_abs_self_score");
        const double ratio = without / with;
        return std::pair{semantics && ratio >= kSelfScoreShrink,
                         "dup/rev zero-iff checks " + std::string(semantics ? "hold" : "fail") +
                             "; held-out mean |f(x,y,y)| " + num(without) + " -> " + num(with) + " (" + num(ratio, 3) +
                             "x shrink, need >= " + num(kSelfScoreShrink) + "x)" + detail};
    });

    // Criteria 5 and 6 share one run.
    std::optional<TimedRun> buckets_run;
    out.guarded(5, [&] {
        buckets_run = run_manifest("confidence-buckets", seed, (fs::path(work) / "confidence-buckets").string());
        const double rm = buckets_run->metric("reward model", "pairwise_accuracy");
        const double dm = buckets_run->metric("difference model", "pairwise_accuracy");
        const double t_rm = buckets_run->stage_seconds.at("rm"), t_dm = buckets_run->stage_seconds.at("diff");
        const bool ok = rm > kAccuracyFloor && dm > kAccuracyFloor && t_rm < kScoringBudgetSeconds &&
                        t_dm < kScoringBudgetSeconds;
        return std::pair{ok, "held-out accuracy reward " + num(rm) + " (" + num(t_rm, 3) + " s), difference " + num(dm) +
                                 " (" + num(t_dm, 3) + " s); need > " + num(kAccuracyFloor) + " within " +
                                 num(kScoringBudgetSeconds) + " s"};
    });

    out.guarded(6, [&] {
        if (!buckets_run) throw Error("confidence-buckets run unavailable");
        const auto& b = buckets_run->report("difference model").scorer->buckets;
        if (b.size() < 2) throw Error("fewer than two buckets");
        int inversions = 0;
        bool small = true;
        std::string accs;
        for (std::size_t i = 0; i < b.size(); ++i) {
            accs += (i ? " " : "") + num(b[i].accuracy, 3);
            if (i > 0 && b[i].accuracy < b[i - 1].accuracy) {
                ++inversions;
                small = small && b[i - 1].accuracy - b[i].accuracy <= kInversionAllowance;
            }
        }
        const double gap = b.back().accuracy - b.front().accuracy;
        const bool ok = inversions <= 1 && small && gap >= kTopBottomGap;
        return std::pair{ok, "bucket accuracies by |score| [" + accs + "], " + std::to_string(inversions) +
                                 " inversion(s) (max 1 of <= " + num(kInversionAllowance) + "), top - bottom " + num(gap, 3) +
                                 " (need >= " + num(kTopBottomGap) + ")"};
    });

    // Criteria 7 and 8 share the alignment runs.
    std::vector<TimedRun> align_runs;
    out.guarded(7, [&] {
        int dpo_wins = 0, rrhf_wins = 0;
        double worst_seconds = 0.0;
        std::string detail;
        for (int s = 1; s <= kAlignmentSeeds; ++s) {
            align_runs.push_back(run_manifest("alignment-comparison", static_cast<std::uint64_t>(s),
                                              (fs::path(work) / ("alignment-seed" + std::to_string(s))).string()));
            const auto& r = align_runs.back();
            worst_seconds = std::max(worst_seconds, r.total_seconds);
            const double dpo = r.metric("dpo", kAlignmentMetric), dpo_rc = r.metric("dpo+rc(diff)", kAlignmentMetric);
            const double rrhf = r.metric("rrhf", kAlignmentMetric), rrhf_rc = r.metric("rrhf+rc(diff)", kAlignmentMetric);
            dpo_wins += dpo_rc >= dpo;
            rrhf_wins += rrhf_rc >= rrhf;
            detail += "; seed " + std::to_string(s) + ": dpo " + num(dpo) + " vs +rc " + num(dpo_rc) + ", rrhf " +
                      num(rrhf) + " vs +rc " + num(rrhf_rc);
        }
        const bool ok = dpo_wins >= kAlignmentWinsNeeded && rrhf_wins >= kAlignmentWinsNeeded &&
                        worst_seconds < kManifestBudgetSeconds;
        return std::pair{ok, "+rc >= vanilla on " + std::string(kAlignmentMetric) + ": dpo " + std::to_string(dpo_wins) +
                                 "/" + std::to_string(kAlignmentSeeds) + ", rrhf " + std::to_string(rrhf_wins) + "/" +
                                 std::to_string(kAlignmentSeeds) + " (need " + std::to_string(kAlignmentWinsNeeded) +
                                 "); slowest manifest " + num(worst_seconds, 4) + " s" + detail};
    });

    out.guarded(8, [&] {
        const std::string dir = (fs::path(work) / "alignment-seed1").string();
        if (!fs::exists(dir)) throw Error("alignment run unavailable");
        const RunConfig data_cfg = run_config(dir + "/data");
        const double threshold = data_cfg.corpus.hard_gap_threshold;
        const auto records = ingest_jsonl(dir + "/ann_diff/annotated.jsonl", data_cfg.vocab(), data_cfg.model.max_len);
        double easy = 0.0, hard = 0.0;
        std::size_t n_easy = 0, n_hard = 0;
        for (const auto& r : records)
            for (const auto& p : r.pairs) {
                if (!p.coefficient) throw Error("unannotated pair");
                if (std::abs(p.gt_gap) < threshold) {
                    hard += *p.coefficient;
                    ++n_hard;
                } else {
                    easy += *p.coefficient;
                    ++n_easy;
                }
            }
        if (n_easy == 0 || n_hard == 0) throw Error("need both easy and hard pairs");
        easy /= static_cast<double>(n_easy);
        hard /= static_cast<double>(n_hard);
        const auto lin = coefficient_linearity_check(derive_seed(seed, "linearity"));
        const auto identity = dpo_identity_check(derive_seed(seed, "identity8"), 10, kIdentityTolerance);
        const bool ok = easy > hard && lin.passed && identity.passed;
        return std::pair{ok, "mean coefficient easy " + num(easy) + " (" + std::to_string(n_easy) + " pairs) vs hard " +
                                 num(hard) + " (" + std::to_string(n_hard) + " pairs, |gap| < " + num(threshold) +
                                 "); per-pair contributions linear in coefficient: " + lin.detail};
    });

    out.guarded(9, [&] {
        const fs::path root = fs::path(work) / "determinism";
        run_manifest("regularizer-ablation", seed + 100, root.string());
        const auto first = snapshot(root);
        run_manifest("regularizer-ablation", seed + 100, root.string());
        const auto second = snapshot(root);
        std::size_t differing = 0, jsonl = 0, checkpoints = 0;
        for (const auto& [rel, bytes] : first) {
            const auto it = second.find(rel);
            differing += it == second.end() || it->second != bytes;
            jsonl += rel.ends_with(".jsonl");
            checkpoints += rel.find("checkpoints") != std::string::npos;
        }
        differing += second.size() != first.size();

        const std::string data = (root / "data/train.jsonl").string();
        const RunConfig cfg = run_config((root / "data").string());
        const auto records = ingest_jsonl(data, cfg.vocab(), cfg.model.max_len);
        const std::string rewritten = (root / "roundtrip.jsonl").string();
        write_jsonl(rewritten, records);
        const bool data_rt = read_text_file(rewritten) == read_text_file(data) &&
                             ingest_jsonl(rewritten, cfg.vocab(), cfg.model.max_len) == records;
        const std::string ckpt = (root / "diff/checkpoints/model.json").string();
        const auto store = load_checkpoint(ckpt);
        save_checkpoint(store, (root / "roundtrip.json").string());
        const bool ckpt_rt = read_text_file((root / "roundtrip.json").string()) == read_text_file(ckpt) &&
                             checkpoint_digest(load_checkpoint((root / "roundtrip.json").string())) == checkpoint_digest(store);
        const bool ok = differing == 0 && first.contains("report.csv") && jsonl > 0 && checkpoints > 0 && data_rt && ckpt_rt;
        return std::pair{ok, "rerun of " + std::to_string(first.size()) + " files (" + std::to_string(jsonl) +
                                 " jsonl, " + std::to_string(checkpoints) + " checkpoints, report.csv): " +
                                 std::to_string(differing) + " differ; dataset round trip " +
                                 (data_rt ? "exact" : "differs") + ", checkpoint round trip " + (ckpt_rt ? "exact" : "differs")};
    });

    return out.all() ? 0 : 1;
}
