#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "maskflow/checkpoint.hpp"
#include "maskflow/params.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCli = MASKFLOW_CLI_PATH;
const std::string kTiny = MASKFLOW_SOURCE_DIR "/configs/tiny.json";

fs::path root() {
    static const fs::path r = [] {
        fs::path p = fs::temp_directory_path() / "maskflow_test_cli";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return r;
}

int run(const std::string& args) {
    const std::string cmd = kCli + " " + args + " >>" + (root() / "cli.log").string() + " 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

fs::path write_json(const std::string& name, const json& j) {
    const fs::path p = root() / name;
    std::ofstream(p) << j.dump(2);
    return p;
}

json tiny_json() { return json::parse(slurp(kTiny)); }

// Every regular file under a and b, compared by relative path and content.
bool same_tree(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> fa, fb;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
    for (const auto& e : fs::recursive_directory_iterator(b))
        if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
    std::sort(fa.begin(), fa.end());
    std::sort(fb.begin(), fb.end());
    if (fa != fb || fa.empty()) return false;
    for (const auto& r : fa)
        if (slurp(a / r) != slurp(b / r)) return false;
    return true;
}

// Runs the tiny pipeline into `dir`; returns the first non-zero exit code.
int pipeline(const fs::path& dir) {
    const std::string cfg = " --config " + kTiny + " --threads 1";
    const std::string d = dir.string();
    for (const std::string& cmd : {
             "gen-data" + cfg + " --out " + d + "/data",
             "train --stage 1" + cfg + " --out " + d + "/s1",
             "train --stage 2 --in " + d + "/s1/stage1.plm2" + cfg + " --out " + d + "/s2",
             "train --stage 3 --in " + d + "/s2/stage2.plm2" + cfg + " --out " + d + "/s3",
             "sample --ckpt " + d + "/s3/stage3.plm2" + cfg + " --out " + d + "/sample",
             "eval --ckpt " + d + "/s3/stage3.plm2 --baseline " + d + "/s2/stage2.plm2" + cfg + " --out " + d + "/eval",
             "gradcheck --coords 20" + cfg + " --out " + d + "/gc",
             "report --in " + d + "/s1 " + d + "/s2 " + d + "/s3 " + d + "/eval" + cfg + " --out " + d + "/report",
         }) {
        if (int rc = run(cmd); rc != 0) return rc;
    }
    return 0;
}

const fs::path& run_a() {
    static const fs::path p = [] {
        fs::path d = root() / "a";
        REQUIRE(pipeline(d) == 0);
        return d;
    }();
    return p;
}

std::size_t count_lines(const fs::path& p) {
    std::ifstream f(p);
    std::size_t n = 0;
    for (std::string line; std::getline(f, line);)
        if (!line.empty()) ++n;
    return n;
}

}  // namespace

TEST_CASE("whole pipeline is byte-reproducible") {
    const fs::path b = root() / "b";
    REQUIRE(pipeline(b) == 0);
    for (const std::string sub : {"data", "s1", "s2", "s3", "sample", "eval", "gc", "report"}) {
        CAPTURE(sub);
        CHECK(same_tree(run_a() / sub, b / sub));
    }
}

TEST_CASE("outputs honour their contracts") {
    const fs::path& a = run_a();
    const json cfg = tiny_json();
    CHECK(count_lines(a / "data" / "manifest.jsonl") == cfg["data"]["n_samples"].get<std::size_t>());
    for (int s = 1; s <= 3; ++s) {
        const fs::path log = a / ("s" + std::to_string(s)) / ("stage" + std::to_string(s) + "_log.csv");
        CHECK(count_lines(log) == 1 + cfg["train"]["stages"][s]["steps"].get<std::size_t>());
    }

    // Stage 1 moves adapter weights only.
    const auto s1 = maskflow::ckpt::load((a / "s1" / "stage1.plm2").string());
    const auto s2 = maskflow::ckpt::load((a / "s2" / "stage2.plm2").string());
    CHECK(s1.stage == 1);
    CHECK(s2.stage == 2);
    CHECK(s2.params.frozen_equal(s1.params, {maskflow::Group::audio_cross_attn}));

    const json side = json::parse(slurp(a / "sample" / "sidecar.json"));
    const json rep = json::parse(slurp(a / "eval" / "report.json"));
    const json gc = json::parse(slurp(a / "gc" / "gradcheck.json"));
    CHECK(side["config_hash"] == rep["provenance"]["config_hash"]);
    CHECK(gc["config_hash"] == rep["provenance"]["config_hash"]);
    CHECK(gc["pass"].get<bool>());
    CHECK(gc["n_checked"].get<int>() == 20);
    CHECK(fs::exists(a / "sample" / "frame_0000.ppm"));
    CHECK(fs::exists(a / "eval" / "comparison_2x2.csv"));
    CHECK(fs::exists(a / "eval" / "dpo_report.json"));
    CHECK(fs::exists(a / "report" / "summary.md"));
    for (std::size_t p : side["forward_passes_per_step"].get<std::vector<std::size_t>>())
        CHECK(p == side["expected_passes_per_step"].get<std::size_t>());
}

TEST_CASE("gen-data --verify accepts its own manifest") {
    const fs::path& a = run_a();
    CHECK(run("gen-data --config " + kTiny + " --verify " + (a / "data" / "manifest.jsonl").string() + " --out " +
              (root() / "verify").string()) == 0);
}

TEST_CASE("empty dataset is not an error") {
    json cfg = tiny_json();
    cfg["data"]["n_samples"] = 0;
    const fs::path c = write_json("empty.json", cfg);
    REQUIRE(run("gen-data --config " + c.string() + " --out " + (root() / "empty").string()) == 0);
    CHECK(fs::exists(root() / "empty" / "manifest.jsonl"));
    CHECK(count_lines(root() / "empty" / "manifest.jsonl") == 0);
}

TEST_CASE("single full mask equals standard guidance") {
    const std::string ck = (run_a() / "s3" / "stage3.plm2").string();
    const fs::path std_req = write_json("std.json", {{"frames", 16}, {"guidance", "standard"}});
    const fs::path mask_req =
        write_json("mask.json", {{"frames", 16}, {"entries", json::array({{{"mask", "full"}, {"audio", 0}}})}});
    REQUIRE(run("sample --config " + kTiny + " --ckpt " + ck + " --request " + std_req.string() + " --out " +
                (root() / "std").string()) == 0);
    REQUIRE(run("sample --config " + kTiny + " --ckpt " + ck + " --request " + mask_req.string() + " --out " +
                (root() / "mask").string()) == 0);
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(root() / "std")) {
        if (e.path().extension() != ".ppm") continue;
        ++n;
        CHECK(slurp(e.path()) == slurp(root() / "mask" / e.path().filename()));
    }
    CHECK(n == 16);
}

TEST_CASE("three speakers cost four passes per step") {
    const std::string ck = (run_a() / "s3" / "stage3.plm2").string();
    const fs::path req = write_json("three.json", {{"frames", 16}, {"n_entities", 3}});
    REQUIRE(run("sample --config " + kTiny + " --ckpt " + ck + " --request " + req.string() + " --out " +
                (root() / "three").string()) == 0);
    const json side = json::parse(slurp(root() / "three" / "sidecar.json"));
    CHECK(side["expected_passes_per_step"].get<int>() == 4);
    const auto per = side["forward_passes_per_step"].get<std::vector<int>>();
    CHECK(per.size() == tiny_json()["sampler"]["n_steps"].get<std::size_t>());
    for (int p : per) CHECK(p == 4);
}

TEST_CASE("exit codes") {
    const fs::path& a = run_a();
    const std::string cfg = " --config " + kTiny;
    const std::string out = " --out " + (root() / "scratch").string();

    // 2: I/O and format problems.
    CHECK(run("train --stage 2 --in /nonexistent.plm2" + cfg + out) == 2);
    CHECK(run("sample --ckpt " + (a / "s1" / "stage1_log.csv").string() + cfg + out) == 2);
    CHECK(run("gen-data --config /nonexistent.json" + out) == 2);
    json noseeds = tiny_json();
    noseeds["eval"]["n_seeds"] = 0;
    CHECK(run("eval --ckpt " + (a / "s3" / "stage3.plm2").string() + " --config " +
              write_json("noseeds.json", noseeds).string() + out) == 2);

    // 3: stage contract.
    CHECK(run("train --stage 3 --in " + (a / "s1" / "stage1.plm2").string() + cfg + out) == 3);
    CHECK(run("train --stage 2" + cfg + out) == 3);
    json wide = tiny_json();
    wide["model"]["d_model"] = 32;
    CHECK(run("train --stage 2 --in " + (a / "s1" / "stage1.plm2").string() + " --config " +
              write_json("wide.json", wide).string() + out) == 3);

    // 4: numerical fault.
    json hot = tiny_json();
    for (auto& s : hot["train"]["stages"]) s["lr"] = 1e200;
    CHECK(run("train --stage 1 --config " + write_json("hot.json", hot).string() + out) == 4);

    // 5: invalid requests.
    CHECK(run("train" + cfg + out) == 5);
    CHECK(run("train --stage 7" + cfg + out) == 5);
    CHECK(run("frobnicate") == 5);
    json typo = tiny_json();
    typo["sampler"]["n_stepz"] = 3;
    CHECK(run("gen-data --config " + write_json("typo.json", typo).string() + out) == 5);
    const std::string ck = (a / "s3" / "stage3.plm2").string();
    CHECK(run("sample --ckpt " + ck + cfg + out + " --request " +
              write_json("badkey.json", {{"colour", "red"}}).string()) == 5);
    CHECK(run("sample --ckpt " + ck + cfg + out + " --request " +
              write_json("badaudio.json", {{"frames", 16}, {"entries", json::array({{{"mask", "full"}, {"audio", 9}}})}})
                  .string()) == 5);
    CHECK(run("sample --ckpt " + ck + cfg + out + " --request " +
              write_json("badframes.json", {{"frames", 15}}).string()) == 5);
}
