#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "cfwd/cfwd.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string output;  // stdout and stderr combined
};

CliResult run_cli(const std::string& args) {
    std::string cmd = std::string(CFWD_CLI_PATH) + " " + args + " 2>&1";
    std::array<char, 256> buf{};
    CliResult result;
    FILE* pipe = popen(cmd.c_str(), "r");
    EXPECT_NE(pipe, nullptr);
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe) != nullptr)
        result.output += buf.data();
    int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    EXPECT_TRUE(is.good()) << path;
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_pairs(const fs::path& root, int n, int h, int w, cfwd::Rng& rng) {
    fs::create_directories(root / "low");
    fs::create_directories(root / "high");
    for (int i = 0; i < n; ++i) {
        cfwd::Tensor high({h, w, 3}), low({h, w, 3});
        for (long j = 0; j < high.numel(); ++j) {
            high[j] = 0.3 + 0.6 * rng.uniform();
            low[j] = std::clamp(0.2 * high[j] + 0.01 * rng.normal(), 0.0, 1.0);
        }
        char name[16];
        std::snprintf(name, sizeof(name), "img%d.png", i);
        cfwd::save_image(low, (root / "low" / name).string());
        cfwd::save_image(high, (root / "high" / name).string());
    }
}

// Micro run: everything as small as the validation rules allow.
const char* kMicroConfig =
    "wavelet_levels = 1\n"
    "guidance_scale = 3\n"
    "timesteps = 20\n"
    "sampling_steps = 2\n"
    "learning_rate = 0.001\n"
    "batch_size = 1\n"
    "patch_size = 32\n"
    "iterations = 3\n"
    "base_channels = 4\n"
    "denoiser_levels = 1\n"
    "hfpm_width = 2\n"
    "checkpoint_interval = 0\n"
    "seed = 3\n";

}  // namespace

TEST(CliTest, HelpListsSubcommands) {
    CliResult r = run_cli("--help");
    EXPECT_EQ(r.exit_code, 0);
    for (const char* sub : {"train", "enhance", "evaluate", "decompose"})
        EXPECT_NE(r.output.find(sub), std::string::npos) << r.output;
}

TEST(CliTest, MissingArgumentsAndBadInputsFail) {
    EXPECT_NE(run_cli("train").exit_code, 0);
    EXPECT_NE(run_cli("enhance --ckpt /nonexistent.bin --input x --out y").exit_code, 0);
    CliResult r = run_cli("evaluate --ckpt /nonexistent.bin --data /nowhere --out /tmp/r.csv");
    EXPECT_NE(r.exit_code, 0);
    EXPECT_NE(r.output.find("error"), std::string::npos);
}

TEST(CliTest, DecomposeWritesBandsAndSidecar) {
    fs::path dir = fresh_dir("cfwd_cli_decomp");
    cfwd::Rng rng(8);
    cfwd::Tensor img({32, 32, 3});
    for (auto& v : img.data) v = rng.uniform();
    std::string input = (dir / "in.png").string();
    cfwd::save_image(img, input);

    fs::path out = dir / "bands";
    CliResult r = run_cli("decompose --input " + input + " --levels 2 --out " + out.string());
    EXPECT_EQ(r.exit_code, 0) << r.output;
    EXPECT_TRUE(fs::exists(out / "approx_l2.png"));
    for (int k = 1; k <= 2; ++k)
        for (const char* band : {"v", "h", "d"}) {
            fs::path p = out / ("detail_" + std::string(band) + "_l" + std::to_string(k) + ".png");
            EXPECT_TRUE(fs::exists(p)) << p;
        }
    cfwd::Tensor approx = cfwd::load_image((out / "approx_l2.png").string());
    EXPECT_EQ(approx.height(), 8);
    EXPECT_EQ(approx.width(), 8);
    cfwd::Tensor fine = cfwd::load_image((out / "detail_v_l1.png").string());
    EXPECT_EQ(fine.height(), 16);

    std::string sidecar = read_file((out / "mapping.txt").string());
    EXPECT_NE(sidecar.find("approx_l2.png"), std::string::npos);
    EXPECT_NE(sidecar.find("min"), std::string::npos);
    EXPECT_NE(sidecar.find("max"), std::string::npos);
    fs::remove_all(dir);
}

TEST(CliTest, DecomposeRejectsIndivisibleSize) {
    fs::path dir = fresh_dir("cfwd_cli_decomp_bad");
    cfwd::Rng rng(9);
    cfwd::Tensor img({30, 32, 3});
    for (auto& v : img.data) v = rng.uniform();
    std::string input = (dir / "odd.png").string();
    cfwd::save_image(img, input);
    CliResult r = run_cli("decompose --input " + input + " --levels 2 --out " + (dir / "o").string());
    EXPECT_NE(r.exit_code, 0);
    EXPECT_NE(r.output.find("error"), std::string::npos);
    fs::remove_all(dir);
}

TEST(CliTest, TrainEnhanceEvaluateEndToEnd) {
    fs::path dir = fresh_dir("cfwd_cli_e2e");
    cfwd::Rng rng(77);
    fs::path data = dir / "data";
    write_pairs(data, 2, 32, 32, rng);

    fs::path cfg_path = dir / "run.cfg";
    std::ofstream(cfg_path.string()) << kMicroConfig;

    fs::path out = dir / "run";
    CliResult train = run_cli("train --config " + cfg_path.string() + " --data " + data.string() +
                              " --embedder stub --out " + out.string());
    EXPECT_EQ(train.exit_code, 0) << train.output;
    fs::path ckpt = out / "checkpoint.bin";
    ASSERT_TRUE(fs::exists(ckpt));
    std::string log = read_file((out / "loss_log.csv").string());
    EXPECT_EQ(static_cast<int>(std::count(log.begin(), log.end(), '\n')), 4);  // header + 3 rows
    EXPECT_EQ(log.rfind("iteration,total,diffusion,vlg,spectral,content\n", 0), 0u);

    // Single file.
    fs::path single_out = dir / "single";
    std::string one_low = (data / "low" / "img0.png").string();
    CliResult enh1 = run_cli("enhance --ckpt " + ckpt.string() + " --input " + one_low + " --out " +
                             single_out.string() + " --seed 5");
    EXPECT_EQ(enh1.exit_code, 0) << enh1.output;
    ASSERT_TRUE(fs::exists(single_out / "img0.png"));
    cfwd::Tensor enhanced = cfwd::load_image((single_out / "img0.png").string());
    EXPECT_EQ(enhanced.height(), 32);
    EXPECT_EQ(enhanced.width(), 32);

    // Directory input and determinism across reruns.
    fs::path dir_out_a = dir / "enh_a";
    fs::path dir_out_b = dir / "enh_b";
    std::string low_dir = (data / "low").string();
    CliResult enh_a = run_cli("enhance --ckpt " + ckpt.string() + " --input " + low_dir + " --out " +
                              dir_out_a.string() + " --seed 5");
    CliResult enh_b = run_cli("enhance --ckpt " + ckpt.string() + " --input " + low_dir + " --out " +
                              dir_out_b.string() + " --seed 5");
    EXPECT_EQ(enh_a.exit_code, 0) << enh_a.output;
    EXPECT_EQ(enh_b.exit_code, 0);
    for (const char* name : {"img0.png", "img1.png"}) {
        ASSERT_TRUE(fs::exists(dir_out_a / name));
        EXPECT_EQ(read_file((dir_out_a / name).string()), read_file((dir_out_b / name).string()))
            << "fixed seed must reproduce output bytes";
    }

    fs::path report = dir / "report.csv";
    CliResult eval = run_cli("evaluate --ckpt " + ckpt.string() + " --data " + data.string() +
                             " --out " + report.string() + " --seed 5");
    EXPECT_EQ(eval.exit_code, 0) << eval.output;
    std::string csv = read_file(report.string());
    EXPECT_EQ(csv.rfind("name,psnr,ssim\n", 0), 0u);
    EXPECT_EQ(static_cast<int>(std::count(csv.begin(), csv.end(), '\n')), 4);  // header + 2 + mean
    EXPECT_NE(csv.find("\nmean,"), std::string::npos);
    EXPECT_NE(eval.output.find("mean"), std::string::npos);  // aligned table on stdout
    fs::remove_all(dir);
}

TEST(CliTest, TrainRejectsUnknownConfigKey) {
    fs::path dir = fresh_dir("cfwd_cli_badcfg");
    cfwd::Rng rng(7);
    fs::path data = dir / "data";
    write_pairs(data, 1, 16, 16, rng);
    fs::path cfg_path = dir / "bad.cfg";
    std::ofstream(cfg_path.string()) << "frobnicate = 12\n";
    CliResult r = run_cli("train --config " + cfg_path.string() + " --data " + data.string() +
                          " --out " + (dir / "out").string());
    EXPECT_NE(r.exit_code, 0);
    EXPECT_NE(r.output.find("ConfigError"), std::string::npos) << r.output;
    fs::remove_all(dir);
}
