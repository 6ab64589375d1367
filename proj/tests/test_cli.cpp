#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

// DYNCLS_BIN is provided by the build; these tests drive the real executable.

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

int run(const std::string& args, const std::string& stdout_path = "/dev/null") {
    std::string cmd = std::string(DYNCLS_BIN) + " " + args + " > " + stdout_path + " 2>&1";
    int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

const char* kTmp = "/tmp/dyncls_cli";

struct TmpDir {
    TmpDir() {
        int rc = std::system((std::string("mkdir -p ") + kTmp).c_str());
        (void)rc;
    }
} tmpdir;

} // namespace

TEST_CASE("geometry selftest passes and is byte-identical") {
    std::string out1 = std::string(kTmp) + "/self1.txt";
    std::string out2 = std::string(kTmp) + "/self2.txt";
    CHECK(run("geometry-selftest", out1) == 0);
    CHECK(run("geometry-selftest", out2) == 0);
    std::string a = slurp(out1);
    CHECK(a == slurp(out2));
    CHECK(a.find("0.2938") != std::string::npos);
    CHECK(a.find("0.3017") != std::string::npos);
    CHECK(a.find("selftest: PASS") != std::string::npos);
}

TEST_CASE("synth is deterministic in the seed") {
    std::string f1 = std::string(kTmp) + "/c1.jsonl";
    std::string f2 = std::string(kTmp) + "/c2.jsonl";
    std::string f3 = std::string(kTmp) + "/c3.jsonl";
    std::string flags = "synth --parents 2 --children 2 --docs-per-leaf 8 --seed 5 --out ";
    CHECK(run(flags + f1) == 0);
    CHECK(run(flags + f2) == 0);
    CHECK(slurp(f1) == slurp(f2));
    CHECK(run("synth --parents 2 --children 2 --docs-per-leaf 8 --seed 6 --out " + f3) == 0);
    CHECK(slurp(f1) != slurp(f3));
    // 2 parents x 2 children = 4 leaf labels
    CHECK(run("synth --parents 4 --children 3 --docs-per-leaf 2 --seed 1 --out " + f3) == 0);
    std::string content = slurp(f3);
    CHECK(content.find("topic3_sub2") != std::string::npos);
}

TEST_CASE("train emits reproducible models; zero episodes keep the initial parameters") {
    std::string corpus = std::string(kTmp) + "/train_corpus.jsonl";
    CHECK(run("synth --parents 2 --children 2 --docs-per-leaf 12 --tokens-per-doc 8 --seed 9 --out " +
              corpus) == 0);
    std::string m0 = std::string(kTmp) + "/m0.bin";
    std::string m1 = std::string(kTmp) + "/m1.bin";
    std::string m2 = std::string(kTmp) + "/m2.bin";
    std::string small = "--set encoder.embed_dim=8 --set encoder.hidden=12 "
                        "--set encoder.output_dim=4 --set episode.n_support=2 "
                        "--set episode.n_query=4 ";
    CHECK(run("train --corpus " + corpus + " --model euc --out " + m0 + " " + small +
              "--set train.episodes=0 --seed 3") == 0);
    CHECK(run("train --corpus " + corpus + " --model euc --out " + m1 + " " + small +
              "--set train.episodes=25 --seed 3") == 0);
    CHECK(run("train --corpus " + corpus + " --model euc --out " + m2 + " " + small +
              "--set train.episodes=25 --seed 3") == 0);
    CHECK(slurp(m1) == slurp(m2));
    CHECK(slurp(m0) != slurp(m1));

    std::string evalout = std::string(kTmp) + "/eval.json";
    CHECK(run("eval --model " + m1 + " --corpus " + corpus, evalout) == 0);
    std::string report = slurp(evalout);
    CHECK(report.find("overall_accuracy") != std::string::npos);
    CHECK(report.find("\"model_kind\":\"euc\"") != std::string::npos);

    std::string hist1 = std::string(kTmp) + "/h1.jsonl";
    CHECK(run("train --corpus " + corpus + " --model mlp --out " + m2 + " --history " + hist1 +
              " " + small + "--set mlp.epochs=3 --seed 4") == 0);
    CHECK(slurp(hist1).find("\"loss\"") != std::string::npos);
}

TEST_CASE("dynamic writes per-cell reports and a recomputable summary") {
    std::string corpus = std::string(kTmp) + "/dyn_corpus.jsonl";
    CHECK(run("synth --parents 2 --children 2 --docs-per-leaf 16 --tokens-per-doc 8 --seed 21 "
              "--out " + corpus) == 0);
    std::string outdir = std::string(kTmp) + "/dynout";
    std::string cmd = "dynamic --corpus " + corpus + " --outdir " + outdir +
                      " --models euc --n-fine 4 --seeds 2 --seed 11 --jobs 2 "
                      "--set encoder.embed_dim=8 --set encoder.hidden=12 "
                      "--set encoder.output_dim=4 --set episode.n_support=2 "
                      "--set episode.n_query=4 --set train.episodes=20 "
                      "--set train.eval_interval=10 --set finetune.episodes=10 "
                      "--set finetune.eval_interval=5";
    CHECK(run(cmd) == 0);
    std::string tuned = slurp(outdir + "/cell_euc_nfine4_tuned.jsonl");
    std::string untuned = slurp(outdir + "/cell_euc_nfine4_untuned.jsonl");
    CHECK(tuned.find("\"aggregate\":true") != std::string::npos);
    CHECK(untuned.find("\"untuned_params_unchanged\":true") != std::string::npos);
    std::string summary = slurp(outdir + "/summary.csv");
    CHECK(summary.find("model,tuned,n_fine=4") == 0);
    CHECK(summary.find("euc,tuned,") != std::string::npos);
    CHECK(summary.find("euc,untuned,") != std::string::npos);

    // reproducible end to end
    std::string outdir2 = std::string(kTmp) + "/dynout2";
    std::string cmd2 = cmd;
    cmd2.replace(cmd2.find(outdir), outdir.size(), outdir2);
    CHECK(run(cmd2) == 0);
    CHECK(slurp(outdir2 + "/cell_euc_nfine4_tuned.jsonl") == tuned);
    CHECK(slurp(outdir2 + "/summary.csv") == summary);
}

TEST_CASE("exit codes distinguish usage, data and numerical errors") {
    CHECK(run("train --corpus /nonexistent.jsonl --model euc --out /tmp/x.bin") == 3);
    CHECK(run("train --corpus /tmp/x --model euc") == 2);               // missing --out
    CHECK(run("synth --out /tmp/x.jsonl --overlap 1.5") == 2);          // invalid spec
    CHECK(run("dynamic --corpus /tmp/x --outdir /tmp/y --set nope=1") == 2); // unknown key
}
