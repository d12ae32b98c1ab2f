// Command line front end: training, linear / few-shot evaluation, visual-word
// inspection, and synthetic dataset generation.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "obow/config.hpp"
#include "obow/dataset.hpp"
#include "obow/evaluation.hpp"
#include "obow/trainer.hpp"

namespace fs = std::filesystem;
using namespace obow;

namespace {

// train/test (or val) split under a dataset root.
std::pair<Dataset, Dataset> load_split(const std::string& dir) {
    const fs::path root(dir);
    if (!fs::is_directory(root / "train"))
        throw std::invalid_argument("expected '" + dir + "/train' with one folder per class");
    Dataset train = load_dataset((root / "train").string());
    fs::path test_dir = fs::is_directory(root / "test") ? root / "test" : root / "val";
    if (!fs::is_directory(test_dir))
        throw std::invalid_argument("expected '" + dir + "/test' (or /val) with one folder per class");
    Dataset test = load_dataset(test_dir.string());
    return {std::move(train), std::move(test)};
}

int cmd_train(const std::string& config_path, const std::string& resume, long seed_override) {
    TrainConfig cfg = load_train_config(config_path);
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    if (cfg.data_dir.empty())
        throw std::invalid_argument("config must set data_dir");
    Dataset data = fs::is_directory(fs::path(cfg.data_dir) / "train")
                       ? load_dataset((fs::path(cfg.data_dir) / "train").string())
                       : load_dataset(cfg.data_dir);
    RunOptions opts;
    opts.resume_path = resume;
    long last_print = -1;
    opts.on_step = [&](const MetricsRecord& rec) {
        if (rec.step - last_print >= 20 || rec.step == 0) {
            std::cout << "step " << rec.step << "  loss " << rec.mean_loss << "  lr " << rec.lr
                      << "  alpha " << rec.alpha << std::endl;
            last_print = rec.step;
        }
    };
    RunResult res = run_training(cfg, data, opts);
    std::cout << "done: " << res.steps_run << " steps\ncheckpoint: " << res.final_checkpoint
              << "\nmetrics: " << res.metrics_path << std::endl;
    return 0;
}

int cmd_eval_linear(const std::string& ckpt, const std::string& data_dir, bool flip_average,
                    int calibrate_batches, std::uint64_t seed) {
    TrainState state = load_checkpoint(ckpt);
    auto [train, test] = load_split(data_dir);
    if (calibrate_batches > 0)
        calibrate_norm_stats(state.config.encoder, state.student, train, state.config.geometry,
                             calibrate_batches, seed);
    ExtractPolicy policy;
    policy.flip_average = flip_average;
    FeatureTable ftrain = extract_features(state.config.encoder, state.student, train,
                                           state.config.geometry, policy);
    FeatureTable ftest = extract_features(state.config.encoder, state.student, test,
                                          state.config.geometry, policy);
    ProbeConfig pc;
    pc.seed = seed;
    ProbeResult res = linear_probe(ftrain, ftest, pc);
    nlohmann::json j{{"protocol", "linear_probe"},
                     {"top1", res.top1},
                     {"train_images", ftrain.size()},
                     {"test_images", ftest.size()},
                     {"classes", ftrain.num_classes}};
    std::cout << j.dump() << "\n";
    std::cout << "linear probe top-1: " << res.top1 * 100.0 << "%" << std::endl;
    return 0;
}

int cmd_eval_fewshot(const std::string& ckpt, const std::string& data_dir, int n_way, int k_shot,
                     int episodes, int queries, std::uint64_t seed) {
    TrainState state = load_checkpoint(ckpt);
    const fs::path root(data_dir);
    Dataset data = fs::is_directory(root / "test") ? load_dataset((root / "test").string())
                                                   : load_dataset(data_dir);
    FeatureTable table = extract_features(state.config.encoder, state.student, data,
                                          state.config.geometry);
    EpisodeSpec spec;
    spec.n_way = n_way;
    spec.k_shot = k_shot;
    spec.episodes = episodes;
    spec.queries_per_class = queries;
    spec.seed = seed;
    FewshotResult res = fewshot_eval(table, spec);
    nlohmann::json j{{"protocol", "fewshot"},
                     {"n_way", n_way},
                     {"k_shot", k_shot},
                     {"episodes", episodes},
                     {"mean_accuracy", res.mean_accuracy},
                     {"std_error", res.std_error}};
    std::cout << j.dump() << "\n";
    std::cout << n_way << "-way " << k_shot << "-shot: " << res.mean_accuracy * 100.0 << "% +- "
              << res.std_error * 100.0 << "% (" << episodes << " episodes)" << std::endl;
    return 0;
}

int cmd_inspect_words(const std::string& ckpt, const std::string& data_dir,
                      const std::string& words_csv, int top_k, const std::string& level_str,
                      const std::string& out_dir) {
    TrainState state = load_checkpoint(ckpt);
    const fs::path root(data_dir);
    Dataset data = fs::is_directory(root / "train") ? load_dataset((root / "train").string())
                                                    : load_dataset(data_dir);
    InspectConfig ic;
    ic.top_k = top_k;
    ic.level = level_str == "penult" ? Level::kPenultimate : Level::kLast;
    ic.out_dir = out_dir;
    std::stringstream ss(words_csv);
    for (std::string tok; std::getline(ss, tok, ',');)
        if (!tok.empty()) ic.words.push_back(std::stoi(tok));

    const LevelState* ls = nullptr;
    for (const auto& l : state.levels)
        if (l.level == ic.level) ls = &l;
    if (!ls) throw std::invalid_argument("checkpoint has no vocabulary for the requested level");
    ic.delta = ls->tracker.initialized ? ls->tracker.delta() : 1.0;

    auto matches = inspect_words(state.config.encoder, state.teacher, ls->vocab, data,
                                 state.config.geometry, ic);
    for (std::size_t wi = 0; wi < matches.size(); ++wi) {
        for (const auto& m : matches[wi]) {
            nlohmann::json j{{"word", ic.words[wi]},
                             {"image", data.paths[static_cast<std::size_t>(m.image)]},
                             {"score", m.score},
                             {"rect", {{"y", m.rect.y}, {"x", m.rect.x}, {"h", m.rect.h}, {"w", m.rect.w}}}};
            std::cout << j.dump() << "\n";
        }
    }
    if (!out_dir.empty())
        std::cout << "image grids written to " << out_dir << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Online bag-of-visual-words self-supervised training and evaluation"};
    app.require_subcommand(1);

    std::string config_path, resume, ckpt, data_dir, words_csv, level_str = "last", out_dir;
    long seed_override = -1;
    std::uint64_t seed = 0;
    bool flip_average = false;
    int calibrate = 0, n_way = 20, k_shot = 1, episodes = 200, queries = 1, top_k = 8;
    int classes = 10, per_train = 450, per_test = 50, size = 64;

    auto* train = app.add_subcommand("train", "Run self-supervised training");
    train->add_option("--config", config_path, "Flat JSON config file")->required();
    train->add_option("--resume", resume, "Checkpoint to resume from");
    train->add_option("--seed", seed_override, "Override the config seed");

    auto* lin = app.add_subcommand("eval-linear", "Linear probe on frozen features");
    lin->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    lin->add_option("--data", data_dir, "Dataset root with train/ and test/")->required();
    lin->add_flag("--flip-average", flip_average, "Average features with the flipped view");
    lin->add_option("--calibrate", calibrate, "Batches of statistics calibration before probing");
    lin->add_option("--seed", seed, "Probe seed");

    auto* few = app.add_subcommand("eval-fewshot", "Episodic few-shot evaluation");
    few->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    few->add_option("--data", data_dir, "Dataset root or folder")->required();
    few->add_option("--n-way", n_way, "Classes per episode");
    few->add_option("--k-shot", k_shot, "Training examples per class");
    few->add_option("--episodes", episodes, "Number of episodes");
    few->add_option("--queries", queries, "Query examples per class");
    few->add_option("--seed", seed, "Episode sampling seed");

    auto* insp = app.add_subcommand("inspect-words", "Retrieve top patches per visual word");
    insp->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    insp->add_option("--data", data_dir, "Dataset root or folder")->required();
    insp->add_option("--words", words_csv, "Comma-separated word indices")->required();
    insp->add_option("--top-k", top_k, "Patches per word");
    insp->add_option("--level", level_str, "Feature level: last or penult");
    insp->add_option("--out", out_dir, "Directory for the image grids");

    auto* make = app.add_subcommand("make-dataset", "Generate the synthetic texture corpus");
    make->add_option("--out", out_dir, "Output directory")->required();
    make->add_option("--classes", classes, "Number of classes");
    make->add_option("--train", per_train, "Training images per class");
    make->add_option("--test", per_test, "Test images per class");
    make->add_option("--size", size, "Image side in pixels");
    make->add_option("--seed", seed, "Generator seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(train)) return cmd_train(config_path, resume, seed_override);
        if (app.got_subcommand(lin))
            return cmd_eval_linear(ckpt, data_dir, flip_average, calibrate, seed);
        if (app.got_subcommand(few))
            return cmd_eval_fewshot(ckpt, data_dir, n_way, k_shot, episodes, queries, seed);
        if (app.got_subcommand(insp))
            return cmd_inspect_words(ckpt, data_dir, words_csv, top_k, level_str, out_dir);
        if (app.got_subcommand(make)) {
            generate_synthetic_dataset(out_dir, classes, per_train, per_test, size, seed);
            std::cout << "dataset written to " << out_dir << std::endl;
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
