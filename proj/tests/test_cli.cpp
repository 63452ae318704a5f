#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <string>

#ifndef FQGAN_CLI_PATH
#error "FQGAN_CLI_PATH must point at the fqgan_cli executable"
#endif

namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string output;
};

Result run(const std::string& args) {
    const std::string cmd = std::string("'") + FQGAN_CLI_PATH + "' " + args + " 2>&1";
    Result r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 512> buf{};
    while (fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
    EXPECT_EQ(run("").code, 2);
    const auto unknown = run("frobnicate");
    EXPECT_EQ(unknown.code, 2);
    EXPECT_NE(unknown.output.find("train-tokenizer"), std::string::npos);
    EXPECT_EQ(run("sample --class 1").code, 2);
}

TEST(Cli, RuntimeErrorsAreOneLine) {
    const auto r = run("encode --ckpt /nonexistent/latest.json --data /nonexistent --out /tmp/x.bin");
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.output.rfind("error: ", 0), 0u) << r.output;
    EXPECT_EQ(std::count(r.output.begin(), r.output.end(), '\n'), 1) << r.output;
}

TEST(Cli, SampleDefaults) {
    const auto r = run("sample --help");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.output.find("--cfg FLOAT [2]"), std::string::npos) << r.output;
    EXPECT_NE(r.output.find("--temperature FLOAT [1]"), std::string::npos) << r.output;
}

TEST(Cli, BadOverrideIsRejected) {
    const auto dir = fs::temp_directory_path() / "fqgan_cli_bad";
    fs::remove_all(dir);
    const auto r = run("make-toy-data --out '" + dir.string() + "' --per-class 1 --set no_such_key=3");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("no_such_key"), std::string::npos) << r.output;
}

TEST(Cli, ToyDataAndExport) {
    const auto dir = fs::temp_directory_path() / "fqgan_cli_toy";
    fs::remove_all(dir);
    const auto r = run("make-toy-data --out '" + (dir / "toy").string() + "' --per-class 2 --set image_size=32");
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(dir / "toy" / "disks" / "img_00000.png"));
    EXPECT_TRUE(fs::exists(dir / "toy" / "stripes" / "img_00001.png"));
    const auto f = run("precompute-features --teacher dino --data '" + (dir / "toy").string() + "' --out '" +
                       (dir / "dino.bin").string() + "' --set image_size=32");
    EXPECT_EQ(f.code, 0) << f.output;
    EXPECT_TRUE(fs::exists(dir / "dino.bin"));
    fs::remove_all(dir);
}
