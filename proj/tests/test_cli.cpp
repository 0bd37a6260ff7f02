#include "boxseg/common.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <cstdio>
#include <json.hpp>
#include <sys/wait.h>

using namespace boxseg;

namespace {

struct Run {
    int status = -1;
    std::string output;
};

/// Runs the CLI with stderr folded into stdout.
Run run(const std::string& args) {
    Run r;
    const std::string cmd = std::string(BOXSEG_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[4096];
    std::size_t n = 0;
    while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
    const int raw = pclose(pipe);
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return r;
}

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

/// Manifest without its wall-clock field.
nlohmann::json stable_manifest(const std::filesystem::path& p) {
    auto j = nlohmann::json::parse(read_file(p));
    j.erase("duration_seconds");
    return j;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("version and usage") {
    const Run v = run("--version");
    CHECK(v.status == 0);
    CHECK(v.output.find("boxseg 0.1.0") != std::string::npos);
    CHECK(run("").status != 0);
    CHECK(run("frobnicate").status != 0);
}

TEST_CASE("pipeline stages are reproducible") {
    testing::TempDir dir("cli");
    write_file_atomic(dir / "synth.json", "{\"samples\": 6}");
    write_file_atomic(dir / "crf.json", "{\"iterations\": 2}");
    write_file_atomic(dir / "train.json", "{\"iterations\": 6, \"batch_size\": 2, \"fr_warmup\": 2}");

    for (const char* tag : {"a", "b"}) {
        const std::string t = tag;
        REQUIRE(run("gen-data --config " + q(dir / "synth.json") + " --out " + q(dir / ("data" + t))).status == 0);
        REQUIRE(run("proposals --data " + q(dir / ("data" + t)) + " --mode crf --config " + q(dir / "crf.json") +
                    " --out " + q(dir / ("props" + t)))
                    .status == 0);
        REQUIRE(run("frstats --data " + q(dir / ("data" + t)) + " --proposals " + q(dir / ("props" + t)) +
                    " --k 2 --out " + q(dir / ("fr" + t + ".txt")))
                    .status == 0);
        REQUIRE(run("train --data " + q(dir / ("data" + t)) + " --proposals " + q(dir / ("props" + t)) +
                    " --fr-table " + q(dir / ("fr" + t + ".txt")) + " --supervision crf+bcm+fr_refined --config " +
                    q(dir / "train.json") + " --out " + q(dir / ("model" + t)))
                    .status == 0);
        const Run e = run("eval --checkpoint " + q(dir / ("model" + t) / "checkpoint.bin") + " --data " +
                          q(dir / ("data" + t)) + " --out " + q(dir / ("eval" + t + ".txt")));
        REQUIRE(e.status == 0);
        CHECK(e.output.find("mean_iou ") != std::string::npos);
    }
    for (const char* f : {"manifest.txt", "s00000_c0.pgm", "s00005_labels.pgm"})
        CHECK(read_file(dir / "dataa" / f) == read_file(dir / "datab" / f));
    CHECK(read_file(dir / "propsa" / "s00003_labels.pgm") == read_file(dir / "propsb" / "s00003_labels.pgm"));
    CHECK(read_file(dir / "fra.txt") == read_file(dir / "frb.txt"));
    CHECK(read_file(dir / "modela" / "checkpoint.bin") == read_file(dir / "modelb" / "checkpoint.bin"));
    CHECK(read_file(dir / "modela" / "train_log.csv") == read_file(dir / "modelb" / "train_log.csv"));

    const auto manifest = stable_manifest(dir / "modela" / "run_manifest.json");
    CHECK(manifest["subcommand"] == "train");
    CHECK(manifest["effective_fr_mode"] == "subclass_fr");
    CHECK(manifest["seed"] == 1);
    CHECK(manifest["config"]["iterations"] == 6);
    CHECK(stable_manifest(dir / "dataa" / "run_manifest.json")["config"] ==
          stable_manifest(dir / "datab" / "run_manifest.json")["config"]);
    CHECK(std::filesystem::exists(dir / "fra.txt.manifest.json"));

    SUBCASE("existing output is refused without --force") {
        const Run again = run("gen-data --config " + q(dir / "synth.json") + " --out " + q(dir / "dataa"));
        CHECK(again.status == 1);
        CHECK(again.output.find("boxseg: error: output directory") != std::string::npos);
        CHECK(run("frstats --data " + q(dir / "dataa") + " --proposals " + q(dir / "propsa") + " --out " +
                  q(dir / "fra.txt"))
                  .status == 1);
        CHECK(run("gen-data --config " + q(dir / "synth.json") + " --out " + q(dir / "dataa") + " --force").status == 0);
        CHECK(read_file(dir / "dataa" / "manifest.txt") == read_file(dir / "datab" / "manifest.txt"));
    }
    SUBCASE("fill-rate supervision needs a table") {
        const Run r = run("train --data " + q(dir / "dataa") + " --proposals " + q(dir / "propsa") +
                          " --supervision crf+fr --out " + q(dir / "nofr"));
        CHECK(r.status == 1);
        CHECK(r.output.find("--fr-table") != std::string::npos);
        CHECK_FALSE(std::filesystem::exists(dir / "nofr"));
    }
    SUBCASE("mismatched proposals are rejected") {
        write_file_atomic(dir / "other.json", "{\"samples\": 4}");
        REQUIRE(run("gen-data --config " + q(dir / "other.json") + " --out " + q(dir / "small")).status == 0);
        const Run r = run("train --data " + q(dir / "dataa") + " --proposals " + q(dir / "small") + " --out " +
                          q(dir / "bad"));
        CHECK(r.status == 1);
    }
}

TEST_CASE("malformed configs fail with the key named") {
    testing::TempDir dir("cli");
    write_file_atomic(dir / "typo.json", "{\"samplez\": 6}");
    const Run r = run("gen-data --config " + q(dir / "typo.json") + " --out " + q(dir / "d"));
    CHECK(r.status == 1);
    CHECK(r.output.find("unknown key synth.samplez") != std::string::npos);

    write_file_atomic(dir / "broken.json", "{\"iterations\": ");
    const Run b = run("proposals --data " + q(dir / "d") + " --config " + q(dir / "broken.json") + " --out " +
                      q(dir / "p"));
    CHECK(b.status == 1);
    CHECK(b.output.find("broken.json") != std::string::npos);

    const Run missing = run("proposals --data " + q(dir / "absent") + " --out " + q(dir / "p"));
    CHECK(missing.status == 1);
    CHECK(missing.output.find("absent") != std::string::npos);

    const Run seeds = run("ablate --data " + q(dir / "absent") + " --seeds 1,x --out " + q(dir / "a"));
    CHECK(seeds.status == 1);
}

}
