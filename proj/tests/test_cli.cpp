#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <vseg/volume_io.hpp>

namespace fs = std::filesystem;

namespace {

std::string cli() { return VSEG_CLI_PATH; }

int run(const std::string& args, const std::string& log = "/tmp/vseg_cli_out.txt") {
    const std::string cmd = cli() + " " + args + " > " + log + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string work_dir() {
    const auto d = fs::temp_directory_path() / "vseg_cli_test";
    fs::create_directories(d);
    return d.string();
}

}  // namespace

TEST_CASE("exit code contract: 0 success, 1 verification failure, 2 usage") {
    CHECK(run("gradcheck --module losses") == 0);
    CHECK(run("gradcheck --module losses --corrupt") == 1);
    CHECK(run("gradcheck --module nonsense") == 2);
    CHECK(run("definitely-not-a-command") == 2);
    CHECK(run("train --config /does/not/exist.conf") == 2);
}

TEST_CASE("gradcheck prints per-group lines") {
    REQUIRE(run("gradcheck --module scp_ag", "/tmp/vseg_gc.txt") == 0);
    const std::string out = slurp("/tmp/vseg_gc.txt");
    for (const char* group : {"conv_chi", "conv_lam", "conv_psi", "linear_chi", "linear_lam"})
        CHECK(out.find(group) != std::string::npos);
    CHECK(out.find("PASS") != std::string::npos);
}

TEST_CASE("config file: unknown key rejected with line number") {
    const std::string dir = work_dir();
    const std::string cfg = dir + "/bad.conf";
    {
        std::ofstream out(cfg);
        out << "[model]\nbase_channels = 4\nnot_a_key = 7\n";
    }
    CHECK(run("train --config " + cfg, "/tmp/vseg_badcfg.txt") == 2);
    const std::string msg = slurp("/tmp/vseg_badcfg.txt");
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("not_a_key") != std::string::npos);
}

TEST_CASE("train / eval / bench round trip on a tiny model") {
    const std::string dir = work_dir();
    const std::string cfg = dir + "/tiny.conf";
    {
        std::ofstream out(cfg);
        out << "[model]\nbase_channels = 4\ndepth = 3\npatch_size = 16\n"
            << "[train]\nepochs = 4\nwarmup_epochs = 1\ntrain_volumes = 2\nval_volumes = 1\ncheckpoint_every = 2\n"
            << "[data]\nextent = 16\n";
    }
    REQUIRE(run("train --config " + cfg + " --out-dir " + dir + "/run", "/tmp/vseg_train.txt") == 0);
    CHECK(fs::exists(dir + "/run/checkpoint.vskp"));
    CHECK(fs::exists(dir + "/run/train_log.csv"));
    {
        const std::string log = slurp(dir + "/run/train_log.csv");
        CHECK(log.find("epoch,lr,total_loss") != std::string::npos);
    }

    // eval with generated phantoms at a larger extent exercises the sliding window
    REQUIRE(run("eval --checkpoint " + dir + "/run/checkpoint.vskp --phantom-seed 5 --volumes 2 --report " + dir +
                    "/report.csv --save-volumes " + dir + "/vols",
                "/tmp/vseg_eval.txt") == 0);
    const std::string report = slurp(dir + "/report.csv");
    CHECK(report.find("volume_id,class,dice,hd95") != std::string::npos);
    CHECK(report.find("mean,all") != std::string::npos);

    // saved volumes are readable and consistent
    auto img = vseg::read_volume(dir + "/vols/phantom0_image.vseg");
    auto lbl = vseg::read_volume(dir + "/vols/phantom0_labels.vseg");
    auto pred = vseg::read_volume(dir + "/vols/phantom0_pred.vseg");
    CHECK(img.kind == 0);
    CHECK(lbl.kind == 1);
    CHECK(pred.kind == 1);
    CHECK(img.d == lbl.d);
    CHECK(pred.d == lbl.d);

    // eval from the saved directory (reads .vseg pairs back)
    REQUIRE(run("eval --checkpoint " + dir + "/run/checkpoint.vskp --data-dir " + dir + "/vols --report " + dir +
                    "/report2.csv",
                "/tmp/vseg_eval2.txt") == 0);
    CHECK(slurp(dir + "/report2.csv").find("phantom0") != std::string::npos);

    // resume continues without error
    {
        std::ofstream out(cfg, std::ios::app);
    }
    REQUIRE(run("train --config " + cfg + " --epochs 6 --out-dir " + dir + "/run --resume", "/tmp/vseg_resume.txt") ==
            0);

    CHECK(run("bench --op onsample_forward --size 1,4,16,16,16 --reps 2", "/tmp/vseg_bench.txt") == 0);
    const std::string bench = slurp("/tmp/vseg_bench.txt");
    CHECK(bench.find("voxels/sec") != std::string::npos);
}

TEST_CASE("ablate emits a well-formed report for one axis") {
    const std::string dir = work_dir();
    const std::string cfg = dir + "/ablate.conf";
    {
        std::ofstream out(cfg);
        out << "[model]\nbase_channels = 4\ndepth = 3\npatch_size = 16\n"
            << "[train]\nepochs = 2\nwarmup_epochs = 1\ntrain_volumes = 2\nval_volumes = 1\n"
            << "[data]\nextent = 16\n";
    }
    REQUIRE(run("ablate --axis gate --config " + cfg + " --out-dir " + dir + "/ab", "/tmp/vseg_ablate.txt") == 0);
    const std::string report = slurp(dir + "/ab/ablation_gate.csv");
    CHECK(report.find("variant") != std::string::npos);
    CHECK(report.find("none") != std::string::npos);
    CHECK(report.find("attention_gate") != std::string::npos);
    CHECK(report.find("scp_ag") != std::string::npos);
}
