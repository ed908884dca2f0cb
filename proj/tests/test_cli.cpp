#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "ftsep/audio.hpp"
#include "ftsep/mixture.hpp"

using namespace ftsep;

#ifndef FTSEP_BIN
#define FTSEP_BIN "ftsep"
#endif

namespace {

int run_cli(const std::string& args, const std::string& log = "cli_out.txt") {
    const std::string cmd = std::string(FTSEP_BIN) + " " + args + " > " + log + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_toy_config(const std::string& path) {
    nlohmann::ordered_json cfg;
    cfg["gen"] = {{"sample_rate", 4000}, {"reverb_enabled", false}, {"utt_min", 1},    {"utt_max", 1},
                  {"utt_dur_s", {0.8, 1.2}}, {"gap_s", {0.1, 0.3}},  {"snr_db", {20, 30}}};
    cfg["model"] = {{"n_fft", 64},      {"hop", 32},          {"sample_rate", 4000}, {"feature_dim", 4},
                    {"num_blocks", 1},  {"hidden_full", 4},   {"hidden_sub", 4}};
    cfg["train"] = {{"lr", 0.002}, {"batch_size", 2}, {"max_epochs", 2}, {"segment_s", 1.5}};
    std::ofstream os(path);
    os << cfg.dump(2);
}

}  // namespace

TEST_CASE("gen-data is deterministic and echoes its config") {
    write_toy_config("cli_cfg.json");
    std::filesystem::remove_all("cli_data_a");
    std::filesystem::remove_all("cli_data_b");
    REQUIRE(run_cli("gen-data --config cli_cfg.json --out cli_data_a --count 3 --seed 11") == 0);
    REQUIRE(run_cli("gen-data --config cli_cfg.json --out cli_data_b --count 3 --seed 11") == 0);
    CHECK(slurp("cli_data_a/manifest.jsonl") == slurp("cli_data_b/manifest.jsonl"));

    const std::string echo = slurp("cli_out.txt");
    CHECK(echo.find("resolved_config") != std::string::npos);
    CHECK(echo.find("\"seed\": 11") != std::string::npos);

    // unknown config keys are rejected with the config exit code
    CHECK(run_cli("gen-data --config cli_cfg.json --out cli_data_c --count 1 --set gen.bogus=1") == 2);
}

TEST_CASE("train, separate, evaluate, stitch-eval pipeline") {
    write_toy_config("cli_cfg.json");
    std::filesystem::remove_all("cli_pipe_data");
    std::filesystem::remove_all("cli_ckpt");
    REQUIRE(run_cli("gen-data --config cli_cfg.json --out cli_pipe_data --count 3 --seed 21") == 0);
    REQUIRE(run_cli("train --config cli_cfg.json --data cli_pipe_data --out cli_ckpt --seed 3") == 0);
    REQUIRE(std::filesystem::exists("cli_ckpt/best.ftrn"));
    REQUIRE(std::filesystem::exists("cli_ckpt/history.jsonl"));

    // separate: per-speaker wavs, input length preserved
    Manifest m = Manifest::load("cli_pipe_data/manifest.jsonl");
    const std::string mix_path = "cli_pipe_data/" + m.records[0].mixture_path;
    REQUIRE(run_cli("separate --model cli_ckpt/best.ftrn --in " + mix_path + " --out cli_sep") == 0);
    Waveform mix = read_wav(mix_path);
    Waveform s0 = read_wav("cli_sep/spk0.wav");
    Waveform s1 = read_wav("cli_sep/spk1.wav");
    CHECK(s0.length() == mix.length());
    CHECK(s1.length() == mix.length());

    // evaluate: one-record report mean equals the record's score
    REQUIRE(run_cli("evaluate --model cli_ckpt/best.ftrn --data cli_pipe_data --out cli_eval --limit 1") == 0);
    const std::string report = slurp("cli_eval/report.jsonl");
    auto j = nlohmann::json::parse(report.substr(0, report.find('\n')));
    const std::string out = slurp("cli_out.txt");
    std::ostringstream want;
    want.setf(std::ios::fixed);
    want.precision(2);
    want << "mean SI-SDR: " << j.at("si_sdr_db").get<double>();
    CHECK(out.find(want.str()) != std::string::npos);

    // report rows carry the manifest's grouping metadata verbatim
    REQUIRE(run_cli("evaluate --model cli_ckpt/best.ftrn --data cli_pipe_data --out cli_eval") == 0);
    {
        std::ifstream rep("cli_eval/report.jsonl");
        std::string line;
        size_t idx = 0;
        while (std::getline(rep, line)) {
            auto row = nlohmann::json::parse(line);
            const auto& rec = m.records.at(idx++);
            const int want_utts = *std::max_element(rec.utts_per_speaker.begin(), rec.utts_per_speaker.end());
            CHECK(row.at("utts_per_speaker").get<int>() == want_utts);
            CHECK(row.at("mean_gap_s").get<double>() == doctest::Approx(rec.mean_gap_s));
        }
        CHECK(idx == m.records.size());
    }

    // stitch-eval: one diagnostics record per planned segment
    REQUIRE(run_cli("stitch-eval --model cli_ckpt/best.ftrn --data cli_pipe_data --out cli_stitch "
                    "--segment-s 0.5 --overlap 0.2 --limit 1") == 0);
    const std::string diag = slurp("cli_stitch/" + m.records[0].id + "_segments.jsonl");
    size_t lines = 0, last_end = 0;
    for (size_t pos = 0; (pos = diag.find('\n', pos)) != std::string::npos; ++pos) ++lines;
    (void)last_end;
    const int64_t len = mix.length();
    const int64_t seg = 2000, hop = 1600;  // 0.5 s at 4 kHz with 20% overlap
    size_t expect = 1;
    for (int64_t start = 0; start + seg < len; start += hop) ++expect;
    CHECK(lines == expect);
    for (const auto& line : {diag.substr(0, diag.find('\n'))})
        CHECK(nlohmann::json::parse(line).count("permutation") == 1);

    // error paths: missing files
    CHECK(run_cli("separate --model missing.ftrn --in " + mix_path + " --out cli_sep") == 3);
    CHECK(run_cli("evaluate --model cli_ckpt/best.ftrn --data does_not_exist --out cli_eval") == 3);

    for (const char* d : {"cli_pipe_data", "cli_ckpt", "cli_sep", "cli_eval", "cli_stitch", "cli_data_a",
                          "cli_data_b", "cli_data_c"})
        std::filesystem::remove_all(d);
    std::filesystem::remove("cli_cfg.json");
    std::filesystem::remove("cli_out.txt");
}
