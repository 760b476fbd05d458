// Command-line front end: train, enhance, evaluate, decompose.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cfwd/cfwd.hpp"

namespace fs = std::filesystem;

namespace {

std::unique_ptr<cfwd::Embedder> make_embedder(const std::string& kind, const std::string& path) {
    if (kind == "stub") return std::make_unique<cfwd::StubEmbedder>();
    if (kind == "pretrained") {
        cfwd::require(!path.empty(), cfwd::ErrorCode::ConfigError,
                      "--embedder pretrained requires --embedder-path");
        return std::make_unique<cfwd::PretrainedEmbedder>(cfwd::PretrainedEmbedder::load(path));
    }
    cfwd::fail(cfwd::ErrorCode::ConfigError, "unknown embedder kind: " + kind);
}

int run_train(const std::string& config_path, const std::string& data_root,
              const std::string& embedder_kind, const std::string& embedder_path,
              const std::string& out_dir) {
    cfwd::TrainConfig cfg = cfwd::load_config(config_path);
    cfwd::validate_config(cfg);
    cfwd::Dataset data(data_root);
    std::unique_ptr<cfwd::Embedder> emb = make_embedder(embedder_kind, embedder_path);
    std::cout << "training on " << data.size() << " pairs for " << cfg.iterations
              << " iterations (seed " << cfg.seed << ")\n";
    cfwd::TrainResult result = cfwd::train(cfg, data, *emb, out_dir);
    std::cout << "loss log: " << result.log_path << "\n";
    std::cout << "final checkpoint: " << result.checkpoint_path << "\n";
    return 0;
}

int run_enhance(const std::string& ckpt_path, const std::string& input, const std::string& out_dir,
                std::uint64_t seed) {
    cfwd::Checkpoint ck = cfwd::load_checkpoint(ckpt_path);
    fs::create_directories(out_dir);
    std::vector<std::string> inputs;
    if (fs::is_directory(input)) {
        for (const auto& e : fs::directory_iterator(input))
            if (e.is_regular_file() && cfwd::Dataset::is_image_name(e.path().filename().string()))
                inputs.push_back(e.path().string());
        std::sort(inputs.begin(), inputs.end());
        cfwd::require(!inputs.empty(), cfwd::ErrorCode::EmptyDataset,
                      "no images found under " + input);
    } else {
        inputs.push_back(input);
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        cfwd::Tensor low = cfwd::load_image(inputs[i]);
        cfwd::Tensor out = cfwd::enhance(low, ck, cfwd::mix_seed(seed, i));
        fs::path name = fs::path(inputs[i]).filename().replace_extension(".png");
        std::string dst = (fs::path(out_dir) / name).string();
        cfwd::save_image(out, dst);
        std::cout << inputs[i] << " -> " << dst << "\n";
    }
    return 0;
}

int run_evaluate(const std::string& ckpt_path, const std::string& data_root,
                 const std::string& report_path, std::uint64_t seed) {
    cfwd::Checkpoint ck = cfwd::load_checkpoint(ckpt_path);
    cfwd::Dataset data(data_root);
    cfwd::MetricsReport report = cfwd::evaluate(data, ck, seed);
    cfwd::write_metrics_csv(report, report_path);
    std::cout << cfwd::format_metrics_table(report);
    std::cout << "report written to " << report_path << "\n";
    return 0;
}

// Affine [0,1] visualization of one band plus its sidecar mapping line.
void write_band(const cfwd::Tensor& band, const std::string& path, std::ofstream& sidecar) {
    double lo = band.data.empty() ? 0.0 : band[0];
    double hi = lo;
    for (double v : band.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    cfwd::Tensor mapped = band;
    double span = hi - lo;
    for (auto& v : mapped.data) v = span > 0.0 ? (v - lo) / span : 0.5;
    cfwd::save_image(mapped, path);
    sidecar << fs::path(path).filename().string() << " min " << lo << " max " << hi
            << "  (value = min + pixel * (max - min))\n";
}

int run_decompose(const std::string& input, int levels, const std::string& out_dir) {
    cfwd::Tensor img = cfwd::load_image(input);
    cfwd::WaveletPyramid pyr = cfwd::decompose(img, levels);
    fs::create_directories(out_dir);
    std::ofstream sidecar((fs::path(out_dir) / "mapping.txt").string());
    cfwd::require(sidecar.good(), cfwd::ErrorCode::WriteFailure, "cannot write mapping sidecar");
    write_band(pyr.approx, (fs::path(out_dir) / ("approx_l" + std::to_string(levels) + ".png")).string(),
               sidecar);
    for (int k = 1; k <= levels; ++k) {
        const cfwd::SubbandTriple& tr = pyr.details[static_cast<std::size_t>(k - 1)];
        std::string suffix = "_l" + std::to_string(k) + ".png";
        write_band(tr.V, (fs::path(out_dir) / ("detail_v" + suffix)).string(), sidecar);
        write_band(tr.H, (fs::path(out_dir) / ("detail_h" + suffix)).string(), sidecar);
        write_band(tr.D, (fs::path(out_dir) / ("detail_d" + suffix)).string(), sidecar);
    }
    std::cout << "wrote " << (1 + 3 * levels) << " bands to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Wavelet-domain diffusion low-light image enhancement"};
    app.require_subcommand(1);

    std::string config_path, data_root, out_dir, embedder_kind = "stub", embedder_path;
    CLI::App* train = app.add_subcommand("train", "Train models on a paired dataset");
    train->add_option("--config", config_path, "training config file")->required();
    train->add_option("--data", data_root, "dataset root containing low/ and high/")->required();
    train->add_option("--embedder", embedder_kind, "stub or pretrained")
        ->check(CLI::IsMember({"stub", "pretrained"}));
    train->add_option("--embedder-path", embedder_path, "pretrained embedder file");
    train->add_option("--out", out_dir, "output directory")->required();

    std::string ckpt_path, input;
    std::uint64_t seed = 0;
    CLI::App* enhance = app.add_subcommand("enhance", "Enhance one image or a directory");
    enhance->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    enhance->add_option("--input", input, "image file or directory")->required();
    enhance->add_option("--out", out_dir, "output directory")->required();
    enhance->add_option("--seed", seed, "sampling seed");

    std::string report_path;
    CLI::App* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on a paired dataset");
    evaluate->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    evaluate->add_option("--data", data_root, "dataset root containing low/ and high/")->required();
    evaluate->add_option("--out", report_path, "CSV report path")->required();
    evaluate->add_option("--seed", seed, "sampling seed");

    int levels = 1;
    CLI::App* decompose = app.add_subcommand("decompose", "Write wavelet bands of an image as PNGs");
    decompose->add_option("--input", input, "image file")->required();
    decompose->add_option("--levels", levels, "pyramid depth")->required();
    decompose->add_option("--out", out_dir, "output directory")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (train->parsed())
            return run_train(config_path, data_root, embedder_kind, embedder_path, out_dir);
        if (enhance->parsed()) return run_enhance(ckpt_path, input, out_dir, seed);
        if (evaluate->parsed()) return run_evaluate(ckpt_path, data_root, report_path, seed);
        if (decompose->parsed()) return run_decompose(input, levels, out_dir);
    } catch (const cfwd::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
