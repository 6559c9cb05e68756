#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "echocotr/cli.hpp"
#include "echocotr/data.hpp"

using namespace echocotr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("echocotr_cli_" + std::to_string(counter++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& rel = "") const { return (path / rel).string(); }
};

int run_cli(const std::vector<std::string>& args, std::string* captured = nullptr) {
    std::vector<const char*> argv;
    argv.push_back("echocotr");
    for (const auto& a : args) argv.push_back(a.c_str());
    if (!captured) return cli_main(int(argv.size()), argv.data());

    const std::string tmp = (fs::temp_directory_path() / "echocotr_cli_stdout.txt").string();
    std::fflush(stdout);
    const int saved = dup(fileno(stdout));
    REQUIRE(std::freopen(tmp.c_str(), "w", stdout) != nullptr);
    const int code = cli_main(int(argv.size()), argv.data());
    std::fflush(stdout);
    dup2(saved, fileno(stdout));
    close(saved);
    std::ifstream in(tmp);
    std::stringstream ss;
    ss << in.rdbuf();
    *captured = ss.str();
    return code;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// small dataset the train/eval tests share: 12 clips, split 9/2/1
void make_dataset(const std::string& dir, const std::string& seed = "5") {
    CHECK(run_cli({"synth", "--out", dir, "--count", "12", "--seed", seed, "--size", "32",
                   "--frames-per-cycle", "8"}) == 0);
}

const std::vector<std::string> tiny_model_flags = {
    "--stage-depths", "1,1,1,1", "--stage-dims", "4,4,8,8", "--head-dim", "4",
    "--drop-path",    "0.0",
};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

}  // namespace

TEST_CASE("argument errors exit with code 2") {
    CHECK(run_cli({}) == 2);                               // subcommand required
    CHECK(run_cli({"synth", "--bogus-flag", "1"}) == 2);   // unknown flag
    CHECK(run_cli({"synth"}) == 2);                        // --out missing
    CHECK(run_cli({"synth", "--out", "/tmp/x", "--count", "abc"}) == 2);
    CHECK(run_cli({"flops", "--preset", "XXL"}) == 2);     // unknown preset
    CHECK(run_cli({"nonsense"}) == 2);
}

TEST_CASE("synth is reproducible and reloadable") {
    TempDir tmp;
    CHECK(run_cli({"synth", "--out", tmp.str("a"), "--count", "4", "--seed", "9", "--size",
                   "32", "--frames-per-cycle", "8"}) == 0);
    CHECK(run_cli({"synth", "--out", tmp.str("b"), "--count", "4", "--seed", "9", "--size",
                   "32", "--frames-per-cycle", "8"}) == 0);
    for (const char* f : {"manifest.csv", "es_ed.csv", "synth_00000.ecv", "synth_00003.ecv"})
        CHECK(read_file(tmp.str("a/") + f) == read_file(tmp.str("b/") + f));

    CHECK(run_cli({"synth", "--out", tmp.str("c"), "--count", "4", "--seed", "10", "--size",
                   "32", "--frames-per-cycle", "8"}) == 0);
    CHECK(read_file(tmp.str("a/manifest.csv")) != read_file(tmp.str("c/manifest.csv")));

    DatasetManifest m = load_manifest(tmp.str("a/manifest.csv"));
    CHECK(m.records.size() == 4);
    CHECK(m.rejected.empty());
    attach_es_ed(m, tmp.str("a/es_ed.csv"));
    CHECK(m.rejected.empty());

    // zero-count run still writes a valid empty dataset
    std::string out;
    CHECK(run_cli({"synth", "--out", tmp.str("zero"), "--count", "0"}, &out) == 0);
    CHECK(out.find("wrote 0 videos") != std::string::npos);
    CHECK(load_manifest(tmp.str("zero/manifest.csv")).records.empty());

    // invalid geometry is a config error
    CHECK(run_cli({"synth", "--out", tmp.str("bad"), "--size", "4"}) == 2);
}

TEST_CASE("config files feed commands and flags win") {
    TempDir tmp;
    {
        std::ofstream cfg(tmp.str("synth.cfg"));
        cfg << "# comment line\n"
            << "count=5\n"
            << "seed=3\n"
            << "size=32\n"
            << "frames_per_cycle=8\n"
            << "out=" << tmp.str("from_file") << "\n";
    }
    CHECK(run_cli({"synth", "--config", tmp.str("synth.cfg")}) == 0);
    CHECK(load_manifest(tmp.str("from_file/manifest.csv")).records.size() == 5);

    // explicit flag beats the file value
    CHECK(run_cli({"synth", "--config", tmp.str("synth.cfg"), "--count", "2", "--out",
                   tmp.str("flag_wins")}) == 0);
    CHECK(load_manifest(tmp.str("flag_wins/manifest.csv")).records.size() == 2);

    {
        std::ofstream cfg(tmp.str("bad.cfg"));
        cfg << "no_such_key=1\n";
    }
    CHECK(run_cli({"synth", "--config", tmp.str("bad.cfg"), "--out", tmp.str("x")}) == 2);
}

TEST_CASE("flops reports presets inside the expected band") {
    auto flops_of = [&](const std::vector<std::string>& args) {
        std::string out;
        REQUIRE(run_cli(cat({"flops"}, args), &out) == 0);
        const size_t sp = out.rfind(' ');
        return std::stoll(out.substr(sp + 1));
    };
    const long long s = flops_of({"--preset", "S"});
    const long long b = flops_of({"--preset", "B"});
    CHECK(std::abs(double(s) - 19.611e9) <= 0.2 * 19.611e9);
    CHECK(std::abs(double(b) - 44.907e9) <= 0.2 * 44.907e9);
    CHECK(b > s);

    // monotone in both the spatial and temporal extent
    const long long s_small = flops_of({"--preset", "S", "--size", "56"});
    const long long s_short = flops_of({"--preset", "S", "--frames", "18"});
    CHECK(s_small < s);
    CHECK(s_short < s);
    CHECK(s_small > 0);
}

TEST_CASE("sample dumps clip indices") {
    TempDir tmp;
    make_dataset(tmp.str("ds"));
    const std::string video = tmp.str("ds/synth_00000.ecv");

    std::string out;
    CHECK(run_cli({"sample", "--video", video, "--frames", "3", "--freq", "2", "--seed", "4"},
                  &out) == 0);
    // line: source,start,f,N,idx...
    CHECK(out.find("synth_00000.ecv,") == 0);
    CHECK(out.find(",2,3,") != std::string::npos);

    // deterministic per seed
    std::string out2;
    run_cli({"sample", "--video", video, "--frames", "3", "--freq", "2", "--seed", "4"}, &out2);
    CHECK(out == out2);

    // a clip longer than the video reports the padding boundary
    std::string padded;
    CHECK(run_cli({"sample", "--video", video, "--frames", "5", "--freq", "2"}, &padded) == 0);
    CHECK(padded.find("# padded_from=8") != std::string::npos);

    std::string esed;
    CHECK(run_cli({"sample", "--video", video, "--mode", "es_ed", "--es", "4", "--ed", "0"},
                  &esed) == 0);
    CHECK(esed == "synth_00000.ecv,0,1,2,0,4\n");
    CHECK(run_cli({"sample", "--video", video, "--mode", "es_ed"}) == 2);  // --es missing

    std::string mirrored;
    CHECK(run_cli({"sample", "--video", video, "--mode", "mirrored", "--es", "0", "--ed", "2",
                   "--target-len", "7"},
                  &mirrored) == 0);
    CHECK(mirrored == "synth_00000.ecv,0,4,7,0,1,2,1,0,1,2\n");

    CHECK(run_cli({"sample", "--video", video, "--mode", "bogus"}) == 2);
    CHECK(run_cli({"sample", "--frames", "4"}) == 2);  // --video missing
    CHECK(run_cli({"sample", "--video", tmp.str("ds/none.ecv")}) == 3);
}

TEST_CASE("train produces identical artifacts across reruns") {
    TempDir tmp;
    make_dataset(tmp.str("ds"));
    const std::vector<std::string> common = cat(
        {"train", "--manifest", tmp.str("ds/manifest.csv"), "--es-ed", tmp.str("ds/es_ed.csv"),
         "--epochs", "2", "--batch", "4", "--lr", "1e-3", "--seed", "7", "--frames", "4",
         "--freq", "1"},
        tiny_model_flags);

    std::string out1;
    CHECK(run_cli(cat(common, {"--out", tmp.str("run1")}), &out1) == 0);
    CHECK(out1.find("best epoch") != std::string::npos);
    for (const char* f : {"weights.ecw", "train_log.csv", "resolved.cfg"})
        CHECK(fs::exists(tmp.str("run1/") + f));

    CHECK(run_cli(cat(common, {"--out", tmp.str("run2")})) == 0);
    CHECK(read_file(tmp.str("run1/weights.ecw")) == read_file(tmp.str("run2/weights.ecw")));
    CHECK(read_file(tmp.str("run1/train_log.csv")) == read_file(tmp.str("run2/train_log.csv")));

    // a different seed trains a different model
    std::vector<std::string> other = common;
    auto seed_flag = std::find(other.begin(), other.end(), "--seed");
    REQUIRE(seed_flag != other.end());
    *(seed_flag + 1) = "8";
    CHECK(run_cli(cat(other, {"--out", tmp.str("run3")})) == 0);
    CHECK(read_file(tmp.str("run1/weights.ecw")) != read_file(tmp.str("run3/weights.ecw")));

    // the echoed config reproduces the run byte for byte
    CHECK(run_cli({"train", "--config", tmp.str("run1/resolved.cfg"), "--out",
                   tmp.str("run4")}) == 0);
    CHECK(read_file(tmp.str("run1/weights.ecw")) == read_file(tmp.str("run4/weights.ecw")));
    CHECK(read_file(tmp.str("run1/train_log.csv")) == read_file(tmp.str("run4/train_log.csv")));

    // the training log has one row per epoch
    std::istringstream log(read_file(tmp.str("run1/train_log.csv")));
    std::string line;
    std::getline(log, line);
    CHECK(line == "epoch,train_loss,val_mae,val_rmse,val_r2");
    int rows = 0;
    while (std::getline(log, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 2);
}

TEST_CASE("eval writes predictions and is deterministic") {
    TempDir tmp;
    make_dataset(tmp.str("ds"));
    CHECK(run_cli(cat({"train", "--manifest", tmp.str("ds/manifest.csv"), "--es-ed",
                       tmp.str("ds/es_ed.csv"), "--out", tmp.str("run"), "--epochs", "1",
                       "--batch", "4", "--seed", "1", "--frames", "4", "--freq", "1"},
                      tiny_model_flags)) == 0);

    const std::vector<std::string> eval_args = {
        "eval",      "--weights", tmp.str("run/weights.ecw"),
        "--manifest", tmp.str("ds/manifest.csv"),
        "--es-ed",   tmp.str("ds/es_ed.csv"),
        "--split",   "test",
        "--frames",  "4",
        "--freq",    "1"};
    std::string out1;
    CHECK(run_cli(cat(eval_args, {"--out", tmp.str("e1")}), &out1) == 0);
    CHECK(out1.find("MAE=") != std::string::npos);
    CHECK(out1.find("n=1") != std::string::npos);  // 12 items leave one test record

    std::string out2;
    CHECK(run_cli(cat(eval_args, {"--out", tmp.str("e2")}), &out2) == 0);
    CHECK(out1 == out2);
    CHECK(read_file(tmp.str("e1/predictions.csv")) == read_file(tmp.str("e2/predictions.csv")));

    std::istringstream preds(read_file(tmp.str("e1/predictions.csv")));
    std::string line;
    std::getline(preds, line);
    CHECK(line == "file_name,true_ef,pred_ef");
    std::getline(preds, line);
    CHECK(line.find("synth_00011.ecv,") == 0);

    // asking for a split with no records is a data error
    TempDir tiny;
    CHECK(run_cli({"synth", "--out", tiny.str("d"), "--count", "3", "--size", "32",
                   "--frames-per-cycle", "8"}) == 0);
    CHECK(run_cli({"eval", "--weights", tmp.str("run/weights.ecw"), "--manifest",
                   tiny.str("d/manifest.csv"), "--split", "test", "--frames", "4", "--freq",
                   "1"}) == 3);

    // missing weights file is an io error
    CHECK(run_cli({"eval", "--weights", tmp.str("run/none.ecw"), "--manifest",
                   tmp.str("ds/manifest.csv")}) == 3);
}
