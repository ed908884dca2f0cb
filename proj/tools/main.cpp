#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "json.hpp"
#include "ftsep/metrics.hpp"
#include "ftsep/selfcheck.hpp"
#include "ftsep/stitch.hpp"
#include "ftsep/trainer.hpp"

using namespace ftsep;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

ordered_json load_config_file(const std::string& path) {
    if (path.empty()) return ordered_json::object();
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path);
    try {
        return ordered_json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": malformed config: " + std::string(e.what()));
    }
}

// key=value overrides with dotted paths; values parsed as JSON when possible
void apply_overrides(ordered_json& cfg, const std::vector<std::string>& sets) {
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
        const std::string path = kv.substr(0, eq);
        const std::string raw = kv.substr(eq + 1);
        ordered_json value;
        try {
            value = ordered_json::parse(raw);
        } catch (const json::exception&) {
            value = raw;  // bare string
        }
        ordered_json* node = &cfg;
        size_t start = 0;
        while (true) {
            const size_t dot = path.find('.', start);
            const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
            if (key.empty()) throw ConfigError("override '" + kv + "' has an empty key segment");
            if (dot == std::string::npos) {
                (*node)[key] = value;
                break;
            }
            node = &(*node)[key];
            start = dot + 1;
        }
    }
}

GenConfig section_gen(const ordered_json& cfg) {
    return cfg.count("gen") ? GenConfig::from_json(cfg.at("gen")) : GenConfig{};
}
TrainConfig section_train(const ordered_json& cfg) {
    return cfg.count("train") ? TrainConfig::from_json(cfg.at("train")) : TrainConfig{};
}
FtrnnConfig section_model(const ordered_json& cfg) {
    return cfg.count("model") ? FtrnnConfig::from_json(cfg.at("model")) : FtrnnConfig{};
}

void echo_config(const std::string& command, const ordered_json& resolved) {
    ordered_json echo;
    echo["command"] = command;
    echo["resolved_config"] = resolved;
    std::cout << echo.dump(2) << "\n";
}

Dtype parse_precision(const std::string& p) {
    if (p == "single") return Dtype::kF32;
    if (p == "double") return Dtype::kF64;
    throw ConfigError("precision must be 'single' or 'double', got '" + p + "'");
}

struct RecordScore {
    std::string id;
    double si_sdr_db = 0.0;
    double der = 0.0;
    int utts = 0;
    double gap_s = 0.0;
};

void print_report(const std::vector<RecordScore>& scores, const std::string& out_path) {
    if (scores.empty()) throw DataError("report: empty result set");
    std::ofstream os;
    if (!out_path.empty()) {
        os.open(out_path);
        if (!os) throw IoError("cannot write " + out_path);
    }
    double si = 0, dr = 0;
    for (const auto& s : scores) {
        si += s.si_sdr_db;
        dr += s.der;
        if (os) {
            ordered_json j;
            j["id"] = s.id;
            j["si_sdr_db"] = s.si_sdr_db;
            j["der"] = s.der;
            j["utts_per_speaker"] = s.utts;
            j["mean_gap_s"] = s.gap_s;
            os << j.dump() << "\n";
        }
    }
    std::printf("recordings: %zu\n", scores.size());
    std::printf("mean SI-SDR: %.2f dB\n", si / scores.size());
    std::printf("mean DER: %.2f %%\n", 100.0 * dr / scores.size());

    // subset breakdown on the manifest's generation axes
    std::map<std::pair<int, int>, std::pair<double, int>> groups;  // (utts, round(gap)) -> (si sum, n)
    for (const auto& s : scores) {
        auto& g = groups[{s.utts, static_cast<int>(std::lround(s.gap_s))}];
        g.first += s.si_sdr_db;
        g.second += 1;
    }
    if (groups.size() > 1) {
        std::printf("subset breakdown (utterances x gap):\n");
        for (const auto& [key, val] : groups)
            std::printf("  utts=%d gap~%ds: n=%d mean SI-SDR %.2f dB\n", key.first, key.second, val.second,
                        val.first / val.second);
    }
}

int run_evaluation(const FtrnnModel& model, const std::string& data_dir, const std::string& out_dir,
                   bool stitch, double seg_s, double overlap, double collar, int limit) {
    Manifest manifest = Manifest::load(data_dir + "/manifest.jsonl");
    if (manifest.records.empty()) throw DataError(data_dir + ": manifest has no records");
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    std::vector<RecordScore> scores;
    int count = 0;
    for (const auto& rec : manifest.records) {
        if (limit > 0 && count >= limit) break;
        ++count;
        Waveform mix = read_wav(data_dir + "/" + rec.mixture_path);
        std::vector<Waveform> refs;
        for (const auto& r : rec.reference_paths) refs.push_back(read_wav(data_dir + "/" + r));

        std::vector<Waveform> est;
        if (stitch) {
            StitchResult sr = stitch_separate(model, mix, refs, seg_s, overlap);
            est = std::move(sr.outputs);
            if (!out_dir.empty())
                save_diagnostics(out_dir + "/" + rec.id + "_segments.jsonl", sr.diagnostics);
        } else {
            est = separate_direct(model, mix);
        }

        RecordScore score;
        score.id = rec.id;
        score.si_sdr_db = eval_si_sdr(refs, est).first;
        Annotation ref_ann = annotation_from_timeline(rec.timeline, static_cast<int>(refs.size()));
        Annotation hyp_ann;
        for (const auto& e : est) hyp_ann.speakers.push_back(energy_vad(e));
        score.der = der(ref_ann, hyp_ann, collar).der();
        score.utts = *std::max_element(rec.utts_per_speaker.begin(), rec.utts_per_speaker.end());
        score.gap_s = rec.mean_gap_s;
        scores.push_back(score);

        if (!out_dir.empty())
            for (size_t c = 0; c < est.size(); ++c)
                write_wav(out_dir + "/" + rec.id + "_spk" + std::to_string(c) + ".wav", est[c]);
    }
    print_report(scores, out_dir.empty() ? "" : out_dir + "/report.jsonl");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-speaker multi-utterance speech separation toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, val_dir, model_path, in_path, precision = "single";
    std::vector<std::string> sets;
    uint64_t seed = 0;
    int count = 20, limit = 0, threads = 0;
    double seg_s = 5.0, overlap = 0.2, collar = 0.0;
    std::string loss_name;
    bool stitch = false, full_model = false;

    app.add_option("--threads", threads, "worker threads (0 = hardware)");

    auto* gen = app.add_subcommand("gen-data", "synthesize a mixture dataset with ground truth");
    gen->add_option("--config", config_path, "JSON config file");
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--count", count, "number of mixtures");
    gen->add_option("--seed", seed, "master seed");
    gen->add_option("--set", sets, "override config keys, e.g. gen.snr_db=[0,10]");

    auto* train_cmd = app.add_subcommand("train", "train a separator on a generated dataset");
    train_cmd->add_option("--config", config_path, "JSON config file");
    train_cmd->add_option("--data", data_dir, "training dataset directory")->required();
    train_cmd->add_option("--val", val_dir, "validation dataset directory (defaults to --data)");
    train_cmd->add_option("--out", out_dir, "checkpoint directory")->required();
    train_cmd->add_option("--seed", seed, "master seed");
    train_cmd->add_option("--loss", loss_name, "si-sdr-pit or sa-sdr");
    train_cmd->add_option("--precision", precision, "single or double");
    train_cmd->add_option("--set", sets, "override config keys");

    auto* sep = app.add_subcommand("separate", "separate one mixture with direct inference");
    sep->add_option("--model", model_path, "checkpoint")->required();
    sep->add_option("--in", in_path, "input WAV")->required();
    sep->add_option("--out", out_dir, "output directory")->required();
    sep->add_option("--precision", precision, "single or double");

    auto* st = app.add_subcommand("stitch-eval", "segment-separate-stitch with oracle permutations");
    st->add_option("--model", model_path, "checkpoint")->required();
    st->add_option("--data", data_dir, "dataset directory with references")->required();
    st->add_option("--out", out_dir, "output directory");
    st->add_option("--segment-s", seg_s, "segment length in seconds");
    st->add_option("--overlap", overlap, "overlap fraction");
    st->add_option("--collar", collar, "DER collar in seconds");
    st->add_option("--limit", limit, "evaluate only the first N records");
    st->add_option("--precision", precision, "single or double");

    auto* ev = app.add_subcommand("evaluate", "score a model on a dataset (SI-SDR, DER)");
    ev->add_option("--model", model_path, "checkpoint")->required();
    ev->add_option("--data", data_dir, "dataset directory")->required();
    ev->add_option("--out", out_dir, "report/output directory");
    ev->add_flag("--stitch", stitch, "use oracle stitching instead of direct inference");
    ev->add_option("--segment-s", seg_s, "segment length for --stitch");
    ev->add_option("--overlap", overlap, "overlap fraction for --stitch");
    ev->add_option("--collar", collar, "DER collar in seconds");
    ev->add_option("--limit", limit, "evaluate only the first N records");
    ev->add_option("--precision", precision, "single or double");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference checks per primitive and full model");
    gc->add_flag("--full-model", full_model, "include the full micro-model sweep");
    gc->add_option("--seed", seed, "seed");

    auto* self = app.add_subcommand("selftest", "run the cross-module property suite");
    self->add_option("--seed", seed, "seed");

    CLI11_PARSE(app, argc, argv);
    if (threads > 0) set_thread_count(threads);

    try {
        if (gen->parsed()) {
            ordered_json cfg = load_config_file(config_path);
            apply_overrides(cfg, sets);
            GenConfig gcfg = section_gen(cfg);
            ordered_json resolved;
            resolved["gen"] = gcfg.to_json();
            resolved["count"] = count;
            resolved["seed"] = seed;
            resolved["out"] = out_dir;
            echo_config("gen-data", resolved);
            Manifest m = generate_dataset(gcfg, count, seed, out_dir);
            std::printf("wrote %zu mixtures to %s\n", m.records.size(), out_dir.c_str());
            return 0;
        }
        if (train_cmd->parsed()) {
            ordered_json cfg = load_config_file(config_path);
            apply_overrides(cfg, sets);
            FtrnnConfig mcfg = section_model(cfg);
            TrainConfig tcfg = section_train(cfg);
            mcfg.dtype = parse_precision(precision);
            if (!loss_name.empty()) tcfg.loss = loss_kind_from_name(loss_name);
            if (seed != 0) tcfg.seed = seed;
            tcfg.checkpoint_dir = out_dir;

            ordered_json resolved;
            resolved["model"] = mcfg.to_json();
            resolved["train"] = tcfg.to_json();
            resolved["precision"] = precision;
            echo_config("train", resolved);

            TrainData train_data = TrainData::from_manifest(Manifest::load(data_dir + "/manifest.jsonl"), data_dir);
            const std::string vdir = val_dir.empty() ? data_dir : val_dir;
            TrainData val_data = TrainData::from_manifest(Manifest::load(vdir + "/manifest.jsonl"), vdir);

            FtrnnModel model = init_model(mcfg, Rng::derive_seed(tcfg.seed, 0x10de1));
            auto [trained, history] = train(std::move(model), train_data, val_data, tcfg);
            std::printf("trained %d steps over %zu epochs; best val loss %.3f (epoch %d)\n",
                        history.total_steps, history.epochs.size(), history.best_val_loss,
                        history.best_epoch);
            std::printf("checkpoints in %s\n", out_dir.c_str());
            return 0;
        }
        if (sep->parsed()) {
            FtrnnModel model = load_checkpoint(model_path, parse_precision(precision));
            ordered_json resolved;
            resolved["model"] = model.config.to_json();
            resolved["in"] = in_path;
            resolved["out"] = out_dir;
            echo_config("separate", resolved);
            Waveform mix = read_wav(in_path);
            auto outs = separate_direct(model, mix);
            std::filesystem::create_directories(out_dir);
            for (size_t c = 0; c < outs.size(); ++c) {
                const std::string path = out_dir + "/spk" + std::to_string(c) + ".wav";
                write_wav(path, outs[c]);
                std::printf("wrote %s (%lld samples)\n", path.c_str(),
                            static_cast<long long>(outs[c].length()));
            }
            return 0;
        }
        if (st->parsed()) {
            FtrnnModel model = load_checkpoint(model_path, parse_precision(precision));
            ordered_json resolved;
            resolved["model"] = model.config.to_json();
            resolved["segment_s"] = seg_s;
            resolved["overlap"] = overlap;
            resolved["collar"] = collar;
            echo_config("stitch-eval", resolved);
            return run_evaluation(model, data_dir, out_dir, true, seg_s, overlap, collar, limit);
        }
        if (ev->parsed()) {
            FtrnnModel model = load_checkpoint(model_path, parse_precision(precision));
            ordered_json resolved;
            resolved["model"] = model.config.to_json();
            resolved["stitch"] = stitch;
            if (stitch) {
                resolved["segment_s"] = seg_s;
                resolved["overlap"] = overlap;
            }
            resolved["collar"] = collar;
            echo_config("evaluate", resolved);
            return run_evaluation(model, data_dir, out_dir, stitch, seg_s, overlap, collar, limit);
        }
        if (gc->parsed()) {
            auto lines = run_gradcheck(full_model, seed);
            bool all_ok = true;
            for (const auto& l : lines) {
                std::printf("%-18s max rel err %.3e (tol %.0e) %s\n", l.name.c_str(), l.max_rel_err,
                            l.tolerance, l.passed ? "ok" : "FAIL");
                all_ok = all_ok && l.passed;
            }
            return all_ok ? 0 : 1;
        }
        if (self->parsed()) {
            auto results = run_selftest(seed);
            bool all_ok = true;
            for (const auto& r : results) {
                std::printf("%-28s %s%s%s\n", r.name.c_str(), r.passed ? "PASS" : "FAIL",
                            r.detail.empty() ? "" : ": ", r.detail.c_str());
                all_ok = all_ok && r.passed;
            }
            return all_ok ? 0 : 1;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
