#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "qtz/io/artifact.hpp"
#include "qtz/model/reference.hpp"
#include "test_util.hpp"

using namespace qtz;

namespace {

std::string bin() {
    const char* b = std::getenv("QTZ_BIN");
    REQUIRE(b != nullptr);
    return b;
}

std::string workdir() {
    const auto dir = std::filesystem::temp_directory_path() / "qtz_cli_test";
    std::filesystem::create_directories(dir);
    return dir.string();
}

int run_cli(const std::string& args) {
    const std::string cmd = bin() + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("cli pipeline and exit codes") {
    const std::string dir = workdir();
    const std::string data = dir + "/data";

    REQUIRE(run_cli("gen-data --out " + data + " --train 256 --test 128 --seed 7") == 0);

    SUBCASE("missing data directory exits 3") {
        CHECK(run_cli("train --data " + dir + "/nope --out " + dir + "/x.qtzg --steps 1") == 3);
    }

    SUBCASE("bad config exits 2") {
        CHECK(run_cli("train --data " + data + " --out " + dir + "/x.qtzg --steps 1 --weight_bits 5") ==
              2);
        CHECK(run_cli("quantize-weights --model " + dir + "/missing --scheme banana --out x") == 2);
    }

    SUBCASE("steps 0 leaves the checkpoint at initialization") {
        const std::string out = dir + "/init.qtzg";
        REQUIRE(run_cli("train --data " + data + " --out " + out +
                        " --steps 0 --conv1_channels 4 --conv2_channels 6 --init_seed 9") == 0);
        LoadedModel saved = load_float_model(out);
        Graph fresh = build_reference_model(9, 4, 6);
        for (const auto& [name, t] : fresh.params) {
            const Tensor& s = saved.graph.params.at(name);
            for (std::int64_t i = 0; i < t.numel(); ++i)
                CHECK(s[i] == static_cast<double>(static_cast<float>(t[i])));
        }
    }

    SUBCASE("train, quantize, calibrate, convert, run") {
        const std::string ckpt = dir + "/m.qtzg";
        REQUIRE(run_cli("train --data " + data + " --out " + ckpt +
                        " --steps 30 --batch_size 16 --quant_delay 1000000000"
                        " --conv1_channels 4 --conv2_channels 8 --seed 3") == 0);
        // metrics CSV has a header plus one row per step
        std::ifstream metrics(ckpt + ".metrics.csv");
        REQUIRE(metrics);
        std::string line;
        int lines = 0;
        while (std::getline(metrics, line)) ++lines;
        CHECK(lines == 31);

        CHECK(run_cli("quantize-weights --model " + ckpt + " --bits 8 --out " + dir + "/w.qtzm") ==
              0);
        // re-quantizing an artifact is rejected
        CHECK(run_cli("quantize-weights --model " + dir + "/w.qtzm --bits 8 --out " + dir +
                      "/ww.qtzm") == 2);

        CHECK(run_cli("calibrate --model " + ckpt + " --data " + data + " --batches 5 --out " +
                      dir + "/r.json") == 0);
        CHECK(run_cli("convert --model " + ckpt + " --ranges " + dir + "/r.json --out " + dir +
                      "/m.qtzm") == 0);
        CHECK(run_cli("run --model " + dir + "/m.qtzm --data " + data + " --report " + dir +
                      "/t.csv") == 0);
        CHECK(std::filesystem::exists(dir + "/t.csv"));
        CHECK(run_cli("analyze --model " + ckpt + " --out " + dir + "/analysis") == 0);
        CHECK(std::filesystem::exists(dir + "/analysis/sqnr.csv"));

        // a ranges file missing a boundary surfaces as exit 4
        auto ranges = load_ranges_json(dir + "/r.json");
        ranges.erase(ranges.begin());
        save_ranges_json(dir + "/r_broken.json", ranges);
        CHECK(run_cli("convert --model " + ckpt + " --ranges " + dir + "/r_broken.json --out " +
                      dir + "/broken.qtzm") == 4);
    }

    SUBCASE("config file mirrors the training options") {
        const std::string cfg = dir + "/train.toml";
        std::ofstream out(cfg);
        out << "total_steps = 5\nbatch_size = 8\nlearning_rate = 0.02\n"
               "quant_delay = 1000000000\nconv1_channels = 4\nconv2_channels = 6\n";
        out.close();
        CHECK(run_cli("train --config " + cfg + " --data " + data + " --out " + dir +
                      "/cfg.qtzg") == 0);
        std::ifstream metrics(dir + "/cfg.qtzg.metrics.csv");
        REQUIRE(metrics);
        std::string line;
        int lines = 0;
        while (std::getline(metrics, line)) ++lines;
        CHECK(lines == 6);  // header + 5 steps
    }
}
